//! World-space clustering of detections and evaluation against reference
//! lamps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{Detection, LampState};
use crate::geom::Vec3;

/// Default clustering radius, meters.
pub const CLUSTER_RADIUS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("duplicate reference position {0:?}")]
    DuplicateReference([f64; 3]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: Vec3,
    /// Indices into the clustered detection list, ascending.
    pub members: Vec<usize>,
    pub member_ids: Vec<String>,
    pub accumulated_scores: BTreeMap<String, f64>,
    pub on_votes: usize,
    pub off_votes: usize,
    pub decided_model: String,
    pub decided_state: LampState,
}

/// Vote weight of one detection: lower chamfer cost weighs more.
pub fn detection_weight(chamfer_score: f64) -> f64 {
    1.0 / (1.0 + chamfer_score.max(0.0))
}

fn nearest_within(centers: &[Vec3], p: &Vec3, radius: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centers.iter().enumerate() {
        let d = (c - p).norm();
        if d <= radius && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy agglomeration in input order, followed by one pass that moves
/// every detection to its nearest centre. `model_order` breaks score ties.
pub fn cluster_detections(detections: &[Detection], radius: f64, model_order: &[String]) -> Vec<Cluster> {
    assert!(radius > 0.0, "cluster radius must be positive");
    let positions: Vec<Vec3> = detections.iter().map(|d| d.pose.position()).collect();
    let mut centers: Vec<Vec3> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for p in &positions {
        match nearest_within(&centers, p, radius) {
            Some(i) => {
                counts[i] += 1;
                let step = (p - centers[i]) / counts[i] as f64;
                centers[i] += step;
            }
            None => {
                centers.push(*p);
                counts.push(1);
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); centers.len()];
    for (i, p) in positions.iter().enumerate() {
        let mut best = (0, f64::INFINITY);
        for (c, center) in centers.iter().enumerate() {
            let d = (center - p).norm();
            if d < best.1 {
                best = (c, d);
            }
        }
        groups[best.0].push(i);
    }

    groups
        .into_iter()
        .filter(|g| !g.is_empty())
        .map(|members| build_cluster(detections, &positions, members, model_order))
        .collect()
}

fn build_cluster(detections: &[Detection], positions: &[Vec3], members: Vec<usize>, model_order: &[String]) -> Cluster {
    let center = members.iter().fold(Vec3::zeros(), |a, &i| a + positions[i]) / members.len() as f64;
    let mut accumulated_scores = BTreeMap::new();
    let (mut on_votes, mut off_votes) = (0, 0);
    for &i in &members {
        let d = &detections[i];
        *accumulated_scores.entry(d.model_id.clone()).or_insert(0.0) += detection_weight(d.chamfer_score);
        match d.state {
            LampState::On => on_votes += 1,
            LampState::Off => off_votes += 1,
        }
    }
    let mut cluster = Cluster {
        center,
        member_ids: members.iter().map(|&i| detections[i].id.clone()).collect(),
        members,
        accumulated_scores,
        on_votes,
        off_votes,
        decided_model: String::new(),
        decided_state: LampState::On,
    };
    let (model, state) = decide_cluster(&cluster, model_order);
    cluster.decided_model = model;
    cluster.decided_state = state;
    cluster
}

fn model_rank(id: &str, model_order: &[String]) -> usize {
    model_order.iter().position(|m| m == id).unwrap_or(usize::MAX)
}

/// Highest accumulated score (ties to the earlier model in `model_order`,
/// then by id) and majority state (ties to On).
pub fn decide_cluster(cluster: &Cluster, model_order: &[String]) -> (String, LampState) {
    let mut best: Option<(&String, f64)> = None;
    for (id, &s) in &cluster.accumulated_scores {
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) => {
                let better = s > bs || (s == bs && (model_rank(id, model_order), id) < (model_rank(bid, model_order), bid));
                if better {
                    Some((id, s))
                } else {
                    Some((bid, bs))
                }
            }
        };
    }
    let model = best.map(|(id, _)| id.clone()).unwrap_or_default();
    let state = if cluster.on_votes >= cluster.off_votes { LampState::On } else { LampState::Off };
    (model, state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLamp {
    pub position: Vec3,
    pub model: String,
    pub state: LampState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceSet {
    pub lamps: Vec<ReferenceLamp>,
}

impl ReferenceSet {
    pub fn new(lamps: Vec<ReferenceLamp>) -> Result<Self, ClusterError> {
        for (i, a) in lamps.iter().enumerate() {
            if lamps[..i].iter().any(|b| b.position == a.position) {
                return Err(ClusterError::DuplicateReference([a.position.x, a.position.y, a.position.z]));
            }
        }
        Ok(ReferenceSet { lamps })
    }

    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let lamps: Vec<ReferenceLamp> = serde_json::from_str(text).map_err(|e| ClusterError::SchemaError(e.to_string()))?;
        Self::new(lamps)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.lamps).expect("references serialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|_| ClusterError::MissingFile(path.display().to_string()))?;
        Self::from_json(&text)
    }
}

/// Square confusion matrix; rows are reference classes, columns detected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix { labels, counts: vec![vec![0; n]; n] }
    }

    fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn add(&mut self, truth: &str, detected: &str) {
        if let (Some(r), Some(c)) = (self.index(truth), self.index(detected)) {
            self.counts[r][c] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    /// Fraction of off-diagonal entries; zero for an empty matrix.
    pub fn error_rate(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            (t - self.correct()) as f64 / t as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub cluster: usize,
    pub reference: usize,
    pub distance_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_detections: usize,
    pub clusters: usize,
    pub members_min: usize,
    pub members_mean: f64,
    pub members_max: usize,
    pub model_confusion: ConfusionMatrix,
    pub state_confusion: ConfusionMatrix,
    pub matches: Vec<MatchedPair>,
    /// Mean over matched pairs; `None` when nothing matched.
    pub mean_distance_cm: Option<f64>,
    pub false_positives: usize,
    pub misses: usize,
}

fn state_label(s: LampState) -> &'static str {
    match s {
        LampState::Off => "off",
        LampState::On => "on",
    }
}

/// Greedy one-to-one matching by ascending distance within `match_radius`.
pub fn evaluate(clusters: &[Cluster], refs: &ReferenceSet, match_radius: f64) -> EvalReport {
    assert!(match_radius > 0.0, "match radius must be positive");
    let mut pairs = Vec::new();
    for (c, cl) in clusters.iter().enumerate() {
        for (r, rf) in refs.lamps.iter().enumerate() {
            let d = (cl.center - rf.position).norm();
            if d <= match_radius {
                pairs.push((d, c, r));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_c = vec![false; clusters.len()];
    let mut used_r = vec![false; refs.lamps.len()];
    let mut matches = Vec::new();
    for (d, c, r) in pairs {
        if !used_c[c] && !used_r[r] {
            used_c[c] = true;
            used_r[r] = true;
            matches.push(MatchedPair { cluster: c, reference: r, distance_cm: d * 100.0 });
        }
    }
    matches.sort_by_key(|m| (m.reference, m.cluster));

    let mut labels: Vec<String> = refs.lamps.iter().map(|r| r.model.clone()).collect();
    labels.extend(clusters.iter().map(|c| c.decided_model.clone()));
    labels.sort();
    labels.dedup();
    let mut model_confusion = ConfusionMatrix::new(labels);
    let mut state_confusion = ConfusionMatrix::new(vec!["off".into(), "on".into()]);
    for m in &matches {
        let (cl, rf) = (&clusters[m.cluster], &refs.lamps[m.reference]);
        model_confusion.add(&rf.model, &cl.decided_model);
        state_confusion.add(state_label(rf.state), state_label(cl.decided_state));
    }

    let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
    let total_detections = sizes.iter().sum();
    let mean_distance_cm = if matches.is_empty() {
        None
    } else {
        Some(matches.iter().map(|m| m.distance_cm).sum::<f64>() / matches.len() as f64)
    };
    EvalReport {
        total_detections,
        clusters: clusters.len(),
        members_min: sizes.iter().copied().min().unwrap_or(0),
        members_mean: if sizes.is_empty() { 0.0 } else { total_detections as f64 / sizes.len() as f64 },
        members_max: sizes.iter().copied().max().unwrap_or(0),
        model_confusion,
        state_confusion,
        false_positives: clusters.len() - matches.len(),
        misses: refs.lamps.len() - matches.len(),
        matches,
        mean_distance_cm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::RigidTransform;
    use crate::pose::ObjectPose;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn det(id: &str, p: Vec3, model: &str, state: LampState, score: f64) -> Detection {
        Detection {
            id: id.into(),
            frame: 0,
            model_id: model.into(),
            pose: ObjectPose::new(RigidTransform::from_translation(p)),
            state,
            chamfer_score: score,
            reprojection_error: 0.0,
            area: 100.0,
            circular: false,
        }
    }

    fn order() -> Vec<String> {
        vec!["A".into(), "B".into()]
    }

    #[test]
    fn simple_cases() {
        assert!(cluster_detections(&[], 0.5, &order()).is_empty());
        let near = [
            det("a", Vec3::new(0.0, 0.0, 3.0), "A", LampState::On, 0.5),
            det("b", Vec3::new(0.1, 0.0, 3.0), "A", LampState::On, 0.5),
        ];
        let c = cluster_detections(&near, 0.5, &order());
        assert_eq!(c.len(), 1);
        assert!((c[0].center - Vec3::new(0.05, 0.0, 3.0)).norm() < 1e-12);
        assert_eq!(c[0].member_ids, vec!["a", "b"]);
        let far = [
            det("a", Vec3::new(0.0, 0.0, 3.0), "A", LampState::On, 0.5),
            det("b", Vec3::new(2.0, 0.0, 3.0), "B", LampState::Off, 0.5),
        ];
        let c = cluster_detections(&far, 0.5, &order());
        assert_eq!(c.len(), 2);
        assert_eq!((c[1].decided_model.as_str(), c[1].decided_state), ("B", LampState::Off));
    }

    fn cluster_with(scores: &[(&str, f64)], on: usize, off: usize) -> Cluster {
        Cluster {
            center: Vec3::zeros(),
            members: vec![0],
            member_ids: vec!["x".into()],
            accumulated_scores: scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            on_votes: on,
            off_votes: off,
            decided_model: String::new(),
            decided_state: LampState::On,
        }
    }

    #[test]
    fn decisions() {
        let c = cluster_with(&[("A", 12.0), ("B", 3.0)], 1, 0);
        assert_eq!(decide_cluster(&c, &order()).0, "A");
        let c = cluster_with(&[("A", 1.0), ("B", 3.0)], 5, 5);
        assert_eq!(decide_cluster(&c, &order()), ("B".into(), LampState::On));
        // Tie goes to the earlier model in the database order.
        let rev = vec!["B".to_string(), "A".to_string()];
        let c = cluster_with(&[("A", 2.0), ("B", 2.0)], 0, 1);
        assert_eq!(decide_cluster(&c, &rev), ("B".into(), LampState::Off));
        assert_eq!(decide_cluster(&c, &order()).0, "A");
        let single = cluster_detections(&[det("s", Vec3::zeros(), "B", LampState::Off, 3.0)], 0.5, &order());
        assert_eq!((single[0].decided_model.as_str(), single[0].decided_state), ("B", LampState::Off));
        assert!((single[0].accumulated_scores["B"] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn decision_scale_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let scores: Vec<(String, f64)> = ["A", "B", "C"].iter().map(|m| (m.to_string(), rng.random_range(0.0..10.0))).collect();
            let s: f64 = rng.random_range(0.01..100.0);
            let mut a = cluster_with(&[], 1, 0);
            a.accumulated_scores = scores.iter().cloned().collect();
            let mut b = a.clone();
            for v in b.accumulated_scores.values_mut() {
                *v *= s;
            }
            assert_eq!(decide_cluster(&a, &order()), decide_cluster(&b, &order()));
        }
    }

    fn lamp_field(rng: &mut impl Rng) -> Vec<Detection> {
        let lamps = [Vec3::new(0.0, 0.0, 3.0), Vec3::new(2.0, 0.0, 3.0), Vec3::new(0.0, 2.5, 3.0), Vec3::new(3.0, 3.0, 2.8)];
        let mut out = Vec::new();
        for (k, l) in lamps.iter().enumerate() {
            for j in 0..15 {
                let n = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
                out.push(det(&format!("{k}-{j}"), l + n, "A", LampState::On, 0.5));
            }
        }
        out
    }

    #[test]
    fn permutation_stability() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let dets = lamp_field(&mut rng);
        let base = cluster_detections(&dets, 0.5, &order());
        assert_eq!(base.len(), 4);
        for _ in 0..20 {
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut rng);
            let c = cluster_detections(&shuffled, 0.5, &order());
            assert_eq!(c.len(), 4);
            for b in &base {
                let best = c.iter().map(|x| (x.center - b.center).norm()).fold(f64::INFINITY, f64::min);
                assert!(best < 1e-9);
            }
        }
    }

    fn refs() -> ReferenceSet {
        ReferenceSet::new(vec![
            ReferenceLamp { position: Vec3::new(0.0, 0.0, 3.0), model: "A".into(), state: LampState::On },
            ReferenceLamp { position: Vec3::new(2.0, 0.0, 3.0), model: "B".into(), state: LampState::Off },
        ])
        .unwrap()
    }

    #[test]
    fn evaluation_cases() {
        let dets = [
            det("a", Vec3::new(0.0, 0.0, 3.0), "A", LampState::On, 0.5),
            det("b", Vec3::new(2.1, 0.0, 3.0), "A", LampState::Off, 0.5),
            det("c", Vec3::new(5.0, 0.0, 3.0), "A", LampState::On, 0.5),
        ];
        let c = cluster_detections(&dets, 0.5, &order());
        let r = evaluate(&c, &refs(), 1.0);
        assert_eq!(r.matches.len(), 2);
        assert_eq!(r.matches[0].distance_cm, 0.0);
        assert!((r.matches[1].distance_cm - 10.0).abs() < 1e-9);
        assert_eq!(r.model_confusion.labels, vec!["A", "B"]);
        assert_eq!(r.model_confusion.counts, vec![vec![1, 0], vec![1, 0]]);
        assert_eq!(r.state_confusion.counts, vec![vec![1, 0], vec![0, 1]]);
        assert_eq!(r.false_positives, 1);
        assert_eq!(r.misses, 0);
        assert_eq!(r.total_detections, 3);
        assert_eq!((r.members_min, r.members_max), (1, 1));
        assert!((r.model_confusion.error_rate() - 0.5).abs() < 1e-15);
        let rows: usize = r.model_confusion.counts.iter().flatten().sum();
        assert_eq!(rows, r.matches.len());
    }

    #[test]
    fn evaluation_translation_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let dets = lamp_field(&mut rng);
        let shift = Vec3::new(13.0, -4.0, 0.5);
        let moved: Vec<Detection> = dets
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.pose.transform.translation += shift;
                d
            })
            .collect();
        let reference = |s: Vec3| {
            ReferenceSet::new(
                [Vec3::new(0.0, 0.0, 3.0), Vec3::new(2.0, 0.0, 3.0), Vec3::new(0.0, 2.5, 3.0)]
                    .iter()
                    .map(|p| ReferenceLamp { position: p + s, model: "A".into(), state: LampState::On })
                    .collect(),
            )
            .unwrap()
        };
        let a = evaluate(&cluster_detections(&dets, 0.5, &order()), &reference(Vec3::zeros()), 1.0);
        let b = evaluate(&cluster_detections(&moved, 0.5, &order()), &reference(shift), 1.0);
        assert_eq!(a.model_confusion, b.model_confusion);
        assert_eq!(a.state_confusion, b.state_confusion);
        assert_eq!(a.false_positives, b.false_positives);
        for (x, y) in a.matches.iter().zip(&b.matches) {
            assert!((x.distance_cm - y.distance_cm).abs() < 1e-9);
        }
    }

    #[test]
    fn far_cluster_is_false_positive() {
        let c = cluster_detections(&[det("z", Vec3::new(3.0, 3.0, 3.0), "A", LampState::On, 0.1)], 0.5, &order());
        let r = evaluate(&c, &refs(), 1.0);
        assert_eq!((r.false_positives, r.misses), (1, 2));
        assert_eq!(r.mean_distance_cm, None);
    }

    #[test]
    fn reference_json() {
        let text = r#"[{"position":[1.0,2.0,3.0],"model":"A","state":"on"},{"position":[0,0,3],"model":"B","state":"off"}]"#;
        let r = ReferenceSet::from_json(text).unwrap();
        assert_eq!(r.lamps[1].state, LampState::Off);
        assert_eq!(ReferenceSet::from_json(&r.to_json()).unwrap(), r);
        let dup = r#"[{"position":[1,2,3],"model":"A","state":"on"},{"position":[1,2,3],"model":"B","state":"off"}]"#;
        assert!(matches!(ReferenceSet::from_json(dup), Err(ClusterError::DuplicateReference(_))));
        assert!(matches!(ReferenceSet::load("/nonexistent/refs.json"), Err(ClusterError::MissingFile(_))));
    }
}
