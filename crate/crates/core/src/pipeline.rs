//! Frame-by-frame detection, evaluation and mode comparison.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{load_building, reference_plane, BuildingModel, MountingKind};
use crate::chamfer::{build_ddf_region, detect_edges, dilate_roi, fdcm_score, refine_d2co, sample_template, EdgeMap};
use crate::cluster::{cluster_detections, evaluate, Cluster, EvalReport, ReferenceSet};
use crate::config::{Mode, PipelineConfig};
use crate::filter::{classify_state, reprojection_error_circle, reprojection_error_polygon, Detection, LampState};
use crate::geom::{camera_center, z_axis_angle, CameraIntrinsics, Plane, RigidTransform, Vec3};
use crate::pose::{
    estimate_circular_candidate, estimate_polygonal_constrained, load_models, prefilter_reason, LampModel, ObjectPose,
    PoseCandidate, SolveRecord,
};
use crate::shapes::{
    extract_blobs, fit_ellipse, isoperimetric_ratio, refine_corners, simplify_polygon, trace_contour, Blob, BoundingBox,
    GrayImage, ShapeObservation,
};
use crate::synth::{preset_scene, write_dataset, DatasetPaths, PoseFile, SynthError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("ingest error: {0}")]
    Ingest(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io { path, message } => PipelineError::Io { path, message },
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Where a blob's processing ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Frame,
    Shape,
    Estimate,
    Prefilter,
    Chamfer,
    Score,
    Reprojection,
    State,
    Accepted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeLabel {
    Polygonal,
    Circular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLog {
    pub model_id: String,
    pub prefilter: Option<String>,
    pub chamfer_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SurvivalFlags {
    pub prefilter: bool,
    pub score: bool,
    pub reprojection: bool,
}

/// One line of the detection log: a blob, or an unreadable frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub id: String,
    pub frame: usize,
    pub blob: Option<usize>,
    pub stage: Stage,
    pub accepted: bool,
    pub reason: Option<String>,
    pub shape: Option<ShapeLabel>,
    pub bbox: Option<BoundingBox>,
    pub area: Option<f64>,
    pub candidates: Vec<CandidateLog>,
    pub model_id: Option<String>,
    pub pose: Option<ObjectPose>,
    pub plane_normal: Option<Vec3>,
    pub z_axis_angle: Option<f64>,
    pub chamfer_score: Option<f64>,
    pub epsilon: Option<f64>,
    pub state: Option<LampState>,
    pub survived: SurvivalFlags,
    pub solves: Vec<SolveRecord>,
}

impl LogRecord {
    fn new(frame: usize, blob: Option<usize>) -> Self {
        let id = match blob {
            Some(b) => format!("f{frame:06}-b{b:03}"),
            None => format!("f{frame:06}"),
        };
        Self {
            id,
            frame,
            blob,
            stage: Stage::Frame,
            accepted: false,
            reason: None,
            shape: None,
            bbox: None,
            area: None,
            candidates: Vec::new(),
            model_id: None,
            pose: None,
            plane_normal: None,
            z_axis_angle: None,
            chamfer_score: None,
            epsilon: None,
            state: None,
            survived: SurvivalFlags::default(),
            solves: Vec::new(),
        }
    }

    fn reject(mut self, stage: Stage, reason: impl Into<String>) -> Self {
        self.stage = stage;
        self.reason = Some(reason.into());
        self
    }

    pub fn detection(&self) -> Option<Detection> {
        if !self.accepted {
            return None;
        }
        Some(Detection {
            id: self.id.clone(),
            frame: self.frame,
            model_id: self.model_id.clone()?,
            pose: self.pose?,
            state: self.state?,
            chamfer_score: self.chamfer_score?,
            reprojection_error: self.epsilon.unwrap_or(f64::NAN),
            area: self.area?,
            circular: self.shape? == ShapeLabel::Circular,
        })
    }
}

/// Append-only list of log records in frame order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionLog {
    pub records: Vec<LogRecord>,
}

impl DetectionLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("log record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, PipelineError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| PipelineError::Ingest(format!("log line {}: {e}", i + 1))))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Ingest(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.records.iter().filter_map(LogRecord::detection).collect()
    }

    pub fn accepted_ids(&self) -> Vec<String> {
        self.records.iter().filter(|r| r.accepted).map(|r| r.id.clone()).collect()
    }

    pub fn stage_counts(&self) -> BTreeMap<Stage, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.stage).or_insert(0) += 1;
        }
        m
    }
}

pub struct FrameInput {
    pub index: usize,
    pub view: RigidTransform,
    pub path: Option<PathBuf>,
    pub image: Option<GrayImage>,
}

pub struct Inputs {
    pub camera: CameraIntrinsics,
    pub frames: Vec<FrameInput>,
    pub models: Vec<LampModel>,
    pub building: BuildingModel,
    pub references: Option<ReferenceSet>,
}

impl Inputs {
    pub fn model_order(&self) -> Vec<String> {
        self.models.iter().map(|m| m.id.clone()).collect()
    }
}

/// Reads the pose file, models, building and (optional) references. Frame
/// images are read lazily during detection.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs, PipelineError> {
    let p = cfg.resolved_paths();
    let poses = PoseFile::load(&p.poses).map_err(|e| PipelineError::Ingest(format!("poses: {e}")))?;
    let models = load_models(&p.models).map_err(|e| PipelineError::Ingest(format!("models: {e}")))?;
    if models.is_empty() {
        return Err(PipelineError::Ingest("models: empty model list".into()));
    }
    let building = load_building(&p.building).map_err(|e| PipelineError::Ingest(format!("building: {e}")))?;
    let references = if p.references.exists() {
        Some(ReferenceSet::load(&p.references).map_err(|e| PipelineError::Ingest(format!("references: {e}")))?)
    } else {
        None
    };
    let frames = poses
        .frames
        .into_iter()
        .map(|f| FrameInput { index: f.index, view: f.view, path: Some(p.images.join(&f.file)), image: None })
        .collect();
    Ok(Inputs { camera: poses.camera, frames, models, building, references })
}

fn shape_of(blob: &Blob, cfg: &PipelineConfig) -> Result<(ShapeObservation, ShapeLabel), String> {
    let contour = trace_contour(blob).map_err(|e| e.to_string())?;
    if isoperimetric_ratio(&contour) < cfg.shapes.ratio_threshold {
        let e = fit_ellipse(&contour.boundary).map_err(|e| e.to_string())?;
        Ok((ShapeObservation::ellipse(e, blob.bbox, contour.boundary), ShapeLabel::Circular))
    } else {
        let b = &blob.bbox;
        let diag = (b.width() as f64).hypot(b.height() as f64);
        let eps = (cfg.shapes.simplify_fraction * diag).max(cfg.shapes.simplify_min_px);
        let verts = simplify_polygon(&contour, eps).map_err(|e| e.to_string())?;
        let verts = refine_corners(&verts, &contour.boundary, cfg.shapes.corner_shift_px);
        let shape = ShapeObservation::polygon(verts, blob.bbox, contour.boundary).map_err(|e| e.to_string())?;
        Ok((shape, ShapeLabel::Polygonal))
    }
}

/// Reference plane for a lamp seen along the ray through `px`: the ray is
/// intersected with every ceiling and the hit closest to its surface wins.
fn provisional_plane(
    building: &BuildingModel,
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    px: &crate::geom::Pixel,
) -> Result<Plane, String> {
    let origin = camera_center(view);
    let dir = view.rotation.transpose() * camera.unproject(px);
    let mut best: Option<(f64, f64, Vec3)> = None;
    for c in &building.ceilings {
        let pl = c.plane();
        let denom = pl.normal.dot(&dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let t = pl.normal.dot(&(pl.point - origin)) / denom;
        if t <= 0.0 {
            continue;
        }
        let hit = origin + dir * t;
        let d = c.distance_to(&hit);
        if best.is_none_or(|(bd, bt, _)| d < bd || (d == bd && t < bt)) {
            best = Some((d, t, hit));
        }
    }
    let hit = match best {
        Some((_, _, h)) => h,
        None if matches!(model.mounting, MountingKind::Hanging { .. }) => origin,
        None => return Err("viewing ray misses every ceiling".into()),
    };
    reference_plane(building, &hit, model.mounting).map_err(|e| e.to_string())
}

fn same_plane(a: &Plane, b: &Plane) -> bool {
    (a.normal - b.normal).norm() < 1e-9 && a.signed_distance(&b.point).abs() < 1e-9
}

#[allow(clippy::too_many_arguments)]
fn estimate(
    shape: &ShapeObservation,
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    plane: &Plane,
    cfg: &PipelineConfig,
) -> Result<PoseCandidate, String> {
    let lm = cfg.lm();
    let constrained = cfg.mode.constrained();
    let r = if model.is_circular() {
        estimate_circular_candidate(shape, &shape.boundary, model, camera, view, plane, constrained, &lm)
    } else {
        estimate_polygonal_constrained(shape, model, camera, view, plane, constrained, &lm)
    };
    r.map_err(|e| e.to_string())
}

struct Scored {
    model: usize,
    candidate: PoseCandidate,
    score: f64,
}

#[allow(clippy::too_many_arguments)]
fn process_blob(
    rec: &mut LogRecord,
    blob: &Blob,
    img: &GrayImage,
    edges: &EdgeMap,
    view: &RigidTransform,
    inputs: &Inputs,
    cfg: &PipelineConfig,
) -> Result<(), (Stage, String)> {
    let camera = &inputs.camera;
    rec.bbox = Some(blob.bbox);
    let (shape, label) = shape_of(blob, cfg).map_err(|e| (Stage::Shape, e))?;
    rec.shape = Some(label);
    rec.area = Some(shape.area);

    let centroid = blob.centroid();
    let mut candidates = Vec::new();
    for (mi, model) in inputs.models.iter().enumerate() {
        if !model.compatible_with(&shape) {
            continue;
        }
        let mut log = CandidateLog { model_id: model.id.clone(), prefilter: None, chamfer_score: None, error: None };
        let attempt = provisional_plane(&inputs.building, model, camera, view, &centroid).and_then(|plane| {
            let c = estimate(&shape, model, camera, view, &plane, cfg)?;
            let refreshed = reference_plane(&inputs.building, &c.pose.position(), model.mounting).map_err(|e| e.to_string())?;
            if same_plane(&refreshed, &plane) {
                Ok(c)
            } else {
                estimate(&shape, model, camera, view, &refreshed, cfg)
            }
        });
        match attempt {
            Ok(c) => {
                rec.solves.extend(c.solves.iter().copied());
                log.prefilter = prefilter_reason(&c, model, camera, view, &cfg.pose.prefilter).map(str::to_string);
                if log.prefilter.is_none() {
                    candidates.push((mi, c, rec.candidates.len()));
                }
            }
            Err(e) => log.error = Some(e),
        }
        rec.candidates.push(log);
    }
    if rec.candidates.is_empty() {
        return Err((Stage::Estimate, "no compatible model".into()));
    }
    if candidates.is_empty() {
        let stage = if rec.candidates.iter().any(|c| c.prefilter.is_some()) { Stage::Prefilter } else { Stage::Estimate };
        return Err((stage, "no candidate survived".into()));
    }
    rec.survived.prefilter = true;

    let (w, h) = (img.width(), img.height());
    let roi = dilate_roi(&blob.bbox, cfg.chamfer.roi_dilation, cfg.chamfer.roi_min_margin, w, h);
    let field = build_ddf_region(edges, cfg.chamfer.q, cfg.chamfer.lambda, &roi).map_err(|e| (Stage::Chamfer, e.to_string()))?;
    let mut best: Option<Scored> = None;
    for (mi, c, li) in candidates {
        let model = &inputs.models[mi];
        let t = sample_template(model, &c.pose.transform, camera, view, cfg.chamfer.template_step_px);
        match fdcm_score(&t, &c.pose.transform, camera, view, &field, &roi) {
            Ok(s) => {
                rec.candidates[li].chamfer_score = Some(s);
                if best.as_ref().is_none_or(|b| s < b.score) {
                    best = Some(Scored { model: mi, candidate: c, score: s });
                }
            }
            Err(e) => rec.candidates[li].error = Some(e.to_string()),
        }
    }
    let Scored { model: mi, candidate, mut score } = best.ok_or((Stage::Chamfer, "no template visible".to_string()))?;
    let model = &inputs.models[mi];
    let mut pose = candidate.pose.transform;
    let template = sample_template(model, &pose, camera, view, cfg.chamfer.template_step_px);
    let constrained = cfg.mode.constrained();
    if let Ok(r) =
        refine_d2co(&pose, &template, &field, camera, view, &roi, &candidate.alignment, constrained, &cfg.refine_lm())
    {
        rec.solves.push(r.record);
        if r.score < score {
            pose = r.pose;
            score = r.score;
        }
    }
    rec.model_id = Some(model.id.clone());
    rec.pose = Some(ObjectPose::new(pose));
    rec.plane_normal = Some(candidate.plane.normal);
    rec.z_axis_angle = Some(z_axis_angle(&pose, &candidate.plane.normal));
    rec.chamfer_score = Some(score);
    if score > cfg.chamfer.score_threshold {
        return Err((Stage::Score, format!("chamfer score {score:.4} above threshold")));
    }
    rec.survived.score = true;

    let eps = match model.radius() {
        Some(r) => reprojection_error_circle(&pose, &shape.boundary, camera, view, r, shape.area),
        None => reprojection_error_polygon(&pose, &candidate.correspondences, camera, view, shape.area),
    };
    match eps {
        Ok(s) => {
            rec.epsilon = Some(s.epsilon);
            let thr = if model.is_circular() { cfg.reprojection.threshold_circular } else { cfg.reprojection.threshold_polygonal };
            if cfg.mode.filters() && s.epsilon > thr {
                return Err((Stage::Reprojection, format!("reprojection error {:.5} above threshold", s.epsilon)));
            }
        }
        Err(e) if cfg.mode.filters() => return Err((Stage::Reprojection, e.to_string())),
        Err(_) => {}
    }
    rec.survived.reprojection = true;

    let state = classify_state(img, &pose, model, camera, view, cfg.state.on_threshold).map_err(|e| (Stage::State, e.to_string()))?;
    rec.state = Some(state);
    Ok(())
}

fn detect_frame(frame: &FrameInput, inputs: &Inputs, cfg: &PipelineConfig) -> (Vec<LogRecord>, bool) {
    let loaded;
    let img = match (&frame.image, &frame.path) {
        (Some(img), _) => img,
        (None, Some(path)) => match GrayImage::read_pgm(path) {
            Ok(i) => {
                loaded = i;
                &loaded
            }
            Err(e) => return (vec![LogRecord::new(frame.index, None).reject(Stage::Frame, e.to_string())], false),
        },
        (None, None) => return (vec![LogRecord::new(frame.index, None).reject(Stage::Frame, "no image")], false),
    };
    if img.width() != inputs.camera.width || img.height() != inputs.camera.height {
        let msg = format!("image is {}x{}, camera expects {}x{}", img.width(), img.height(), inputs.camera.width, inputs.camera.height);
        return (vec![LogRecord::new(frame.index, None).reject(Stage::Frame, msg)], false);
    }
    let blobs = extract_blobs(img, cfg.blobs.threshold, cfg.blobs.min_area);
    if blobs.is_empty() {
        return (Vec::new(), true);
    }
    let edges = detect_edges(img, cfg.chamfer.grad_threshold);
    let records = blobs
        .iter()
        .enumerate()
        .map(|(b, blob)| {
            let mut rec = LogRecord::new(frame.index, Some(b));
            match process_blob(&mut rec, blob, img, &edges, &frame.view, inputs, cfg) {
                Ok(()) => {
                    rec.stage = Stage::Accepted;
                    rec.accepted = true;
                    rec
                }
                Err((stage, reason)) => rec.reject(stage, reason),
            }
        })
        .collect();
    (records, true)
}

/// Runs every frame and merges the records in frame order.
pub fn detect(inputs: &Inputs, cfg: &PipelineConfig) -> Result<DetectionLog, PipelineError> {
    cfg.validate().map_err(PipelineError::Validation)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Validation(format!("worker pool: {e}")))?;
    let results: Vec<(Vec<LogRecord>, bool)> =
        pool.install(|| inputs.frames.par_iter().map(|f| detect_frame(f, inputs, cfg)).collect());
    let unreadable = results.iter().filter(|(_, ok)| !ok).count();
    if !inputs.frames.is_empty() && 2 * unreadable > inputs.frames.len() {
        return Err(PipelineError::Ingest(format!("{unreadable} of {} frames unreadable", inputs.frames.len())));
    }
    Ok(DetectionLog { records: results.into_iter().flat_map(|(r, _)| r).collect() })
}

pub fn run_detect(cfg: &PipelineConfig) -> Result<DetectionLog, PipelineError> {
    detect(&load_inputs(cfg)?, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCounts {
    pub detections: usize,
    pub clusters: usize,
    pub members_min: usize,
    pub members_mean: f64,
    pub members_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub blobs: usize,
    pub unreadable_frames: usize,
    pub stages: BTreeMap<Stage, usize>,
    pub counts: ClusterCounts,
    pub clusters: Vec<Cluster>,
    /// Present when references were available.
    pub evaluation: Option<EvalReport>,
}

/// Report plus CSV tables keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub report: RunReport,
    pub tables: BTreeMap<String, String>,
}

fn csv_table<S: AsRef<str>>(header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref())).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn confusion_csv(m: &crate::cluster::ConfusionMatrix) -> String {
    let mut header = vec!["reference"];
    header.extend(m.labels.iter().map(String::as_str));
    let rows = m.labels.iter().zip(&m.counts).map(|(l, row)| {
        let mut r = vec![l.clone()];
        r.extend(row.iter().map(|c| c.to_string()));
        r
    });
    csv_table(&header, rows)
}

/// Clusters the accepted detections and evaluates them against `refs`.
pub fn evaluate_log(
    log: &DetectionLog,
    mode: Mode,
    model_order: &[String],
    refs: Option<&ReferenceSet>,
    cfg: &PipelineConfig,
) -> Result<EvalOutput, PipelineError> {
    if log.records.is_empty() {
        return Err(PipelineError::Validation("detection log is empty".into()));
    }
    let detections = log.detections();
    let clusters = cluster_detections(&detections, cfg.cluster.radius, model_order);
    let sizes: Vec<usize> = clusters.iter().map(|c| c.members.len()).collect();
    let counts = ClusterCounts {
        detections: detections.len(),
        clusters: clusters.len(),
        members_min: sizes.iter().copied().min().unwrap_or(0),
        members_mean: if sizes.is_empty() { 0.0 } else { detections.len() as f64 / sizes.len() as f64 },
        members_max: sizes.iter().copied().max().unwrap_or(0),
    };
    let evaluation = refs.map(|r| evaluate(&clusters, r, cfg.cluster.match_radius));

    let mut tables = BTreeMap::new();
    let mut summary = vec![
        vec!["mode".to_string(), mode.name().to_string()],
        vec!["blobs".into(), log.records.iter().filter(|r| r.blob.is_some()).count().to_string()],
        vec!["detections".into(), counts.detections.to_string()],
        vec!["clusters".into(), counts.clusters.to_string()],
        vec!["members_min".into(), counts.members_min.to_string()],
        vec!["members_mean".into(), format!("{:.4}", counts.members_mean)],
        vec!["members_max".into(), counts.members_max.to_string()],
    ];
    if let Some(e) = &evaluation {
        summary.push(vec!["mean_distance_cm".into(), e.mean_distance_cm.map_or(String::new(), |d| format!("{d:.4}"))]);
        summary.push(vec!["model_error_rate".into(), format!("{:.4}", e.model_confusion.error_rate())]);
        summary.push(vec!["state_error_rate".into(), format!("{:.4}", e.state_confusion.error_rate())]);
        summary.push(vec!["false_positives".into(), e.false_positives.to_string()]);
        summary.push(vec!["misses".into(), e.misses.to_string()]);
        let dist = e.matches.iter().map(|m| vec![m.cluster.to_string(), m.reference.to_string(), format!("{:.4}", m.distance_cm)]);
        tables.insert("distances.csv".into(), csv_table(&["cluster", "reference", "distance_cm"], dist));
        tables.insert("model_confusion.csv".into(), confusion_csv(&e.model_confusion));
        tables.insert("state_confusion.csv".into(), confusion_csv(&e.state_confusion));
    }
    tables.insert("summary.csv".into(), csv_table(&["metric", "value"], summary));
    let members = clusters.iter().enumerate().map(|(i, c)| {
        let (x, y, z) = (c.center.x, c.center.y, c.center.z);
        vec![
            i.to_string(),
            c.members.len().to_string(),
            format!("{x:.4}"),
            format!("{y:.4}"),
            format!("{z:.4}"),
            c.decided_model.clone(),
            if c.decided_state == LampState::On { "on".into() } else { "off".into() },
        ]
    });
    tables.insert("clusters.csv".into(), csv_table(&["cluster", "members", "x", "y", "z", "model", "state"], members));
    let scores = clusters.iter().enumerate().flat_map(|(i, c)| {
        model_order.iter().map(move |m| vec![i.to_string(), m.clone(), format!("{:.6}", c.accumulated_scores.get(m).copied().unwrap_or(0.0))])
    });
    tables.insert("cluster_scores.csv".into(), csv_table(&["cluster", "model", "accumulated_score"], scores));

    let report = RunReport {
        mode,
        blobs: log.records.iter().filter(|r| r.blob.is_some()).count(),
        unreadable_frames: log.records.iter().filter(|r| r.blob.is_none()).count(),
        stages: log.stage_counts(),
        counts,
        clusters,
        evaluation,
    };
    Ok(EvalOutput { report, tables })
}

impl EvalOutput {
    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serialises")
    }

    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        write_file(&dir.join("report.json"), &self.report_json())?;
        for (name, body) in &self.tables {
            write_file(&dir.join(name), body)?;
        }
        Ok(())
    }
}

/// Evaluates a log read from disk using the models and references named
/// by the config.
pub fn run_eval(log: &DetectionLog, cfg: &PipelineConfig) -> Result<EvalOutput, PipelineError> {
    let p = cfg.resolved_paths();
    let models = load_models(&p.models).map_err(|e| PipelineError::Ingest(format!("models: {e}")))?;
    let order: Vec<String> = models.iter().map(|m| m.id.clone()).collect();
    let refs = if p.references.exists() {
        Some(ReferenceSet::load(&p.references).map_err(|e| PipelineError::Ingest(format!("references: {e}")))?)
    } else {
        None
    };
    evaluate_log(log, cfg.mode, &order, refs.as_ref(), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: Mode,
    pub detections: usize,
    pub clusters: usize,
    pub mean_distance_cm: Option<f64>,
    pub model_error_rate: Option<f64>,
    pub state_error_rate: Option<f64>,
    pub false_positives: Option<usize>,
    pub misses: Option<usize>,
}

impl ModeRow {
    pub fn from_report(r: &RunReport) -> Self {
        let e = r.evaluation.as_ref();
        Self {
            mode: r.mode,
            detections: r.counts.detections,
            clusters: r.counts.clusters,
            mean_distance_cm: e.and_then(|e| e.mean_distance_cm),
            model_error_rate: e.map(|e| e.model_confusion.error_rate()),
            state_error_rate: e.map(|e| e.state_confusion.error_rate()),
            false_positives: e.map(|e| e.false_positives),
            misses: e.map(|e| e.misses),
        }
    }
}

pub fn comparison_csv(rows: &[ModeRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.4}"));
    let body = rows.iter().map(|r| {
        vec![
            r.mode.name().to_string(),
            r.detections.to_string(),
            r.clusters.to_string(),
            opt(r.mean_distance_cm),
            opt(r.model_error_rate),
            opt(r.state_error_rate),
            r.false_positives.map_or(String::new(), |v| v.to_string()),
            r.misses.map_or(String::new(), |v| v.to_string()),
        ]
    });
    csv_table(
        &["mode", "detections", "clusters", "mean_distance_cm", "model_error_rate", "state_error_rate", "false_positives", "misses"],
        body,
    )
}

pub struct ModeRun {
    pub mode: Mode,
    pub log: DetectionLog,
    pub eval: EvalOutput,
}

/// Detection and evaluation under each of the three modes on shared inputs.
pub fn run_modes(inputs: &Inputs, cfg: &PipelineConfig) -> Result<Vec<ModeRun>, PipelineError> {
    let order = inputs.model_order();
    Mode::ALL
        .into_iter()
        .map(|mode| {
            let c = PipelineConfig { mode, ..cfg.clone() };
            let log = detect(inputs, &c)?;
            let eval = evaluate_log(&log, mode, &order, inputs.references.as_ref(), &c)?;
            Ok(ModeRun { mode, log, eval })
        })
        .collect()
}

/// Renders the configured synthetic scene into `dir`.
pub fn run_synth(cfg: &PipelineConfig, dir: &Path) -> Result<DatasetPaths, PipelineError> {
    let (scene, preset_traj) = preset_scene(&cfg.synth.scene, cfg.seed)?;
    let mut traj = cfg.synth.trajectory.clone().unwrap_or(preset_traj);
    if let Some(n) = cfg.synth.frames {
        traj = traj.truncated(n)?;
    }
    Ok(write_dataset(dir, &scene, &traj, &cfg.synth.camera, cfg.seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{ScenePreset, SceneOptions};

    fn small_config(dir: &Path, frames: usize) -> PipelineConfig {
        let mut cfg = PipelineConfig::synthetic();
        cfg.synth.scene = SceneOptions { lamp_count: 2, ..SceneOptions::default() };
        cfg.synth.frames = Some(frames);
        cfg.paths.data_dir = Some(dir.to_path_buf());
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn log_round_trip_and_ids() {
        let mut r = LogRecord::new(12, Some(3));
        assert_eq!(r.id, "f000012-b003");
        r.pose = Some(ObjectPose::new(RigidTransform::identity()));
        let log = DetectionLog { records: vec![r, LogRecord::new(4, None).reject(Stage::Frame, "missing")] };
        let back = DetectionLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert!(back.detections().is_empty());
        assert!(DetectionLog::from_jsonl("{").is_err());
    }

    #[test]
    fn empty_log_is_an_error() {
        let cfg = PipelineConfig::default();
        assert!(matches!(
            evaluate_log(&DetectionLog::default(), Mode::FilterOnly, &[], None, &cfg),
            Err(PipelineError::Validation(_))
        ));
    }

    #[test]
    fn missing_models_is_ingest_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 3);
        run_synth(&cfg, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("models.json")).unwrap();
        assert!(matches!(run_detect(&cfg), Err(PipelineError::Ingest(_))));
    }

    #[test]
    fn unreadable_majority_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path(), 4);
        run_synth(&cfg, dir.path()).unwrap();
        for i in 0..3 {
            std::fs::write(dir.path().join("frames").join(crate::synth::frame_file_name(i)), b"junk").unwrap();
        }
        assert!(matches!(run_detect(&cfg), Err(PipelineError::Ingest(_))));
        std::fs::write(dir.path().join("frames").join(crate::synth::frame_file_name(0)), b"junk").unwrap();
        let cfg2 = small_config(dir.path(), 4);
        run_synth(&cfg2, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frames").join(crate::synth::frame_file_name(1))).unwrap();
        let log = run_detect(&cfg2).unwrap();
        assert_eq!(log.records.iter().filter(|r| r.stage == Stage::Frame).count(), 1);
    }

    #[test]
    fn close_lamp_detected_exactly_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path(), 30);
        cfg.synth.scene.preset = ScenePreset::Hallway;
        run_synth(&cfg, dir.path()).unwrap();
        let inputs = load_inputs(&cfg).unwrap();
        let log = detect(&inputs, &cfg).unwrap();
        let dets = log.detections();
        assert!(!dets.is_empty(), "stages {:?}", log.stage_counts());
        for r in log.records.iter().filter(|r| r.accepted) {
            assert!(r.z_axis_angle.unwrap() < 1e-9);
        }
        let refs = inputs.references.as_ref().unwrap();
        for d in &dets {
            let near = refs.lamps.iter().map(|l| (l.position - d.pose.position()).norm()).fold(f64::INFINITY, f64::min);
            assert!(near < 0.1, "{} is {near} m from every lamp", d.id);
        }
    }

    #[test]
    fn comparison_has_three_rows() {
        let rows: Vec<ModeRow> = Mode::ALL
            .into_iter()
            .map(|mode| ModeRow {
                mode,
                detections: 1,
                clusters: 1,
                mean_distance_cm: None,
                model_error_rate: None,
                state_error_rate: None,
                false_positives: None,
                misses: None,
            })
            .collect();
        assert_eq!(comparison_csv(&rows).lines().count(), 4);
    }
}
