//! Initial pose candidates from shape observations.
//!
//! Polygonal shapes go through planar PnP over every vertex correspondence
//! hypothesis; elliptical shapes through a ray/plane circle fit. Both can
//! keep the model z-axis on a reference plane normal.

mod circle;
mod pnp;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use circle::{circle_problem, estimate_circular_constrained, CircleEstimate, CircleProblem, CircleSolution};
pub use pnp::{solve_pnp_planar, Correspondence, PnpProblem, PnpSolution};

use crate::bim::MountingKind;
use crate::geom::{
    alignment_rotation, constrain_pose, log_map, project, z_axis_angle, AlignmentFrame, CameraIntrinsics, GeomError,
    Pixel, Plane, RigidTransform, RotVec, Vec3,
};
use crate::optim::{lm_minimize, LmOptions};
use crate::shapes::{shoelace_area, ShapeKind, ShapeObservation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoseError {
    #[error("object points are collinear or too few")]
    DegenerateConfiguration,
    #[error("no pose places the object in front of the camera")]
    NoValidPose,
    #[error("shape has {got} vertices, model face has {expected}")]
    ShapeModelMismatch { expected: usize, got: usize },
    #[error("most image rays are parallel to the circle plane")]
    RaysParallelToPlane,
    #[error("estimation failed: {0}")]
    EstimationFailed(String),
    #[error("invalid lamp model: {0}")]
    InvalidModel(String),
    #[error("cannot read {0}")]
    MissingFile(String),
    #[error("models file: {0}")]
    SchemaError(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaceShape {
    /// Face outline on the model z = 0 plane, meters.
    Polygon(Vec<Vec3>),
    /// Circle radius in meters.
    Circle(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LampModel {
    pub id: String,
    pub face: FaceShape,
    /// 3D segments in model coordinates used for chamfer matching.
    pub edge_template: Vec<[Vec3; 2]>,
    pub mounting: MountingKind,
}

/// Segments used to outline a circle face.
pub const CIRCLE_TEMPLATE_SEGMENTS: usize = 180;

impl LampModel {
    pub fn new(
        id: impl Into<String>,
        face: FaceShape,
        edge_template: Vec<[Vec3; 2]>,
        mounting: MountingKind,
    ) -> Result<Self, PoseError> {
        let m = Self { id: id.into(), face, edge_template, mounting };
        m.validate()?;
        Ok(m)
    }

    /// Model whose template is the face outline.
    pub fn with_outline(id: impl Into<String>, face: FaceShape, mounting: MountingKind) -> Result<Self, PoseError> {
        let outline = outline_points(&face, CIRCLE_TEMPLATE_SEGMENTS);
        let n = outline.len();
        let template = (0..n).map(|i| [outline[i], outline[(i + 1) % n]]).collect();
        Self::new(id, face, template, mounting)
    }

    pub fn validate(&self) -> Result<(), PoseError> {
        match &self.face {
            FaceShape::Polygon(v) => {
                if v.len() < 4 {
                    return Err(PoseError::InvalidModel(format!("{}: face needs at least 4 vertices", self.id)));
                }
                if v.iter().any(|p| p.z != 0.0 || !p.x.is_finite() || !p.y.is_finite()) {
                    return Err(PoseError::InvalidModel(format!("{}: face vertices must lie on z = 0", self.id)));
                }
            }
            FaceShape::Circle(r) => {
                if !(*r > 0.0) || !r.is_finite() {
                    return Err(PoseError::InvalidModel(format!("{}: radius must be positive", self.id)));
                }
            }
        }
        if self.edge_template.is_empty() {
            return Err(PoseError::InvalidModel(format!("{}: empty edge template", self.id)));
        }
        if let MountingKind::Hanging { offset } = self.mounting {
            if !(offset >= 0.0) {
                return Err(PoseError::InvalidModel(format!("{}: negative hanging offset", self.id)));
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> Option<f64> {
        match self.face {
            FaceShape::Circle(r) => Some(r),
            FaceShape::Polygon(_) => None,
        }
    }

    pub fn polygon(&self) -> Option<&[Vec3]> {
        match &self.face {
            FaceShape::Polygon(v) => Some(v),
            FaceShape::Circle(_) => None,
        }
    }

    pub fn is_circular(&self) -> bool {
        matches!(self.face, FaceShape::Circle(_))
    }

    /// Face area in square meters.
    pub fn face_area(&self) -> f64 {
        match &self.face {
            FaceShape::Circle(r) => std::f64::consts::PI * r * r,
            FaceShape::Polygon(v) => {
                let pts: Vec<Pixel> = v.iter().map(|p| Pixel::new(p.x, p.y)).collect();
                shoelace_area(&pts).abs()
            }
        }
    }

    /// Whether the model can explain the shape (same kind, same vertex count).
    pub fn compatible_with(&self, shape: &ShapeObservation) -> bool {
        match (&self.face, &shape.kind) {
            (FaceShape::Circle(_), ShapeKind::Circular { .. }) => true,
            (FaceShape::Polygon(v), ShapeKind::Polygonal { vertices }) => v.len() == vertices.len(),
            _ => false,
        }
    }
}

/// Face outline in model coordinates; circles are sampled with `n` points.
pub fn outline_points(face: &FaceShape, n: usize) -> Vec<Vec3> {
    match face {
        FaceShape::Polygon(v) => v.clone(),
        FaceShape::Circle(r) => (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                Vec3::new(r * a.cos(), r * a.sin(), 0.0)
            })
            .collect(),
    }
}

pub fn load_models(path: impl AsRef<Path>) -> Result<Vec<LampModel>, PoseError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|_| PoseError::MissingFile(path.display().to_string()))?;
    let models: Vec<LampModel> = serde_json::from_str(&text).map_err(|e| PoseError::SchemaError(e.to_string()))?;
    for m in &models {
        m.validate()?;
    }
    Ok(models)
}

/// Model transform together with its rotation vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub transform: RigidTransform,
    pub w: RotVec,
}

impl ObjectPose {
    pub fn new(transform: RigidTransform) -> Self {
        let w = log_map(&transform.rotation).unwrap_or_else(|_| RotVec::zero());
        Self { transform, w }
    }

    pub fn position(&self) -> Vec3 {
        self.transform.translation
    }
}

/// `(w, t)` parameters to a transform.
pub fn pose_from_params(x: &[f64]) -> RigidTransform {
    RigidTransform::from_rotvec(&RotVec::new(x[0], x[1], x[2]), Vec3::new(x[3], x[4], x[5]))
}

pub fn pose_to_params(m: &RigidTransform) -> [f64; 6] {
    let w = log_map(&m.rotation).unwrap_or_else(|_| RotVec::zero()).0;
    [w.x, w.y, w.z, m.translation.x, m.translation.y, m.translation.z]
}

/// Aligned-frame parameters `(0, 0, w_z, t)` of a constrained pose.
pub fn constrained_params(m: &RigidTransform, frame: &AlignmentFrame) -> [f64; 6] {
    let c = constrain_pose(m, frame);
    [0.0, 0.0, c.wz, c.t.x, c.t.y, c.t.z]
}

/// Free-parameter mask for constrained poses: rotation about the aligned z
/// axis plus translation.
pub const CONSTRAINED_MASK: [bool; 6] = [false, false, true, true, true, true];
pub const UNCONSTRAINED_MASK: [bool; 6] = [true; 6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolvePurpose {
    Pnp,
    ConstrainedPnp,
    CircleCenter,
    CircleNormal,
    Refinement,
}

impl SolvePurpose {
    /// Solves over a full rigid pose (as opposed to circle centre/normal fits).
    pub fn is_pose_solve(&self) -> bool {
        matches!(self, Self::Pnp | Self::ConstrainedPnp | Self::Refinement)
    }
}

/// Bookkeeping of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub purpose: SolvePurpose,
    pub n_params: usize,
    pub n_free: usize,
    pub constrained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseCandidate {
    pub model_id: String,
    pub pose: ObjectPose,
    /// Pose before any projection onto the plane, when one was computed.
    pub unconstrained_pose: Option<RigidTransform>,
    pub constrained: bool,
    pub shape: ShapeObservation,
    pub plane: Plane,
    pub alignment: AlignmentFrame,
    /// Model-to-image vertex pairs (polygons only).
    pub correspondences: Vec<Correspondence>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub solves: Vec<SolveRecord>,
}

/// Image area of the model face at a pose; zero if any point is behind the
/// camera.
pub fn projected_area(model: &LampModel, pose: &RigidTransform, camera: &CameraIntrinsics, view: &RigidTransform) -> f64 {
    let mut pts = Vec::new();
    for p in outline_points(&model.face, 64) {
        match project(camera, view, pose, &p) {
            Ok(px) => pts.push(px),
            Err(_) => return 0.0,
        }
    }
    shoelace_area(&pts).abs()
}

/// Polygonal pose: best vertex correspondence by PnP cost, then optionally
/// projected onto the plane and re-minimised over `(w_z, t)`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_polygonal_constrained(
    shape: &ShapeObservation,
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    plane: &Plane,
    constrained: bool,
    lm: &LmOptions,
) -> Result<PoseCandidate, PoseError> {
    let face = model.polygon().ok_or(PoseError::ShapeModelMismatch { expected: 0, got: 0 })?;
    let image = shape.vertices().ok_or(PoseError::ShapeModelMismatch { expected: face.len(), got: 0 })?;
    let n = face.len();
    if image.len() != n {
        return Err(PoseError::ShapeModelMismatch { expected: n, got: image.len() });
    }

    let mut best: Option<(bool, f64, PnpSolution, Vec<Correspondence>)> = None;
    let mut solves = Vec::new();
    let mut last_err = PoseError::NoValidPose;
    for reversed in [false, true] {
        for shift in 0..n {
            let corr: Vec<Correspondence> = (0..n)
                .map(|i| {
                    let j = if reversed { (shift + n - i) % n } else { (shift + i) % n };
                    Correspondence { p_obj: face[i], p_img: image[j] }
                })
                .collect();
            let sol = match solve_pnp_planar(&corr, camera, view, lm) {
                Ok(s) => s,
                Err(e) => {
                    last_err = e;
                    continue;
                }
            };
            solves.push(sol.record);
            let facing = sol.transform.z_axis().dot(&plane.normal) > 0.0;
            let better = match &best {
                None => true,
                Some((bf, bc, _, _)) => (facing && !bf) || (facing == *bf && sol.cost < *bc),
            };
            if better {
                best = Some((facing, sol.cost, sol, corr));
            }
        }
    }
    let (_, pnp_cost, pnp, corr) = best.ok_or(last_err)?;
    let alignment = alignment_rotation(&plane.normal)?;

    let (pose, initial_cost, final_cost) = if constrained {
        let problem = PnpProblem { correspondences: &corr, camera, view, frame: Some(alignment) };
        let x0 = constrained_params(&pnp.transform, &alignment);
        let res = lm_minimize(&problem, &x0, &CONSTRAINED_MASK, lm).map_err(|e| PoseError::EstimationFailed(e.to_string()))?;
        solves.push(SolveRecord { purpose: SolvePurpose::ConstrainedPnp, n_params: 6, n_free: res.n_free, constrained: true });
        (problem.transform(&res.x), res.initial_cost, res.final_cost)
    } else {
        (pnp.transform, pnp_cost, pnp_cost)
    };

    Ok(PoseCandidate {
        model_id: model.id.clone(),
        pose: ObjectPose::new(pose),
        unconstrained_pose: Some(pnp.transform),
        constrained,
        shape: shape.clone(),
        plane: *plane,
        alignment,
        correspondences: corr,
        initial_cost,
        final_cost,
        solves,
    })
}

/// Circle candidate from the shape's boundary samples.
#[allow(clippy::too_many_arguments)]
pub fn estimate_circular_candidate(
    shape: &ShapeObservation,
    points: &[Pixel],
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    plane: &Plane,
    constrained: bool,
    lm: &LmOptions,
) -> Result<PoseCandidate, PoseError> {
    let radius = model.radius().ok_or(PoseError::ShapeModelMismatch { expected: 0, got: 0 })?;
    let alignment = alignment_rotation(&plane.normal)?;
    let sol = estimate_circular_constrained(points, radius, camera, view, &alignment, constrained, lm)?;
    Ok(PoseCandidate {
        model_id: model.id.clone(),
        pose: ObjectPose::new(sol.transform),
        unconstrained_pose: if constrained { None } else { Some(sol.transform) },
        constrained,
        shape: shape.clone(),
        plane: *plane,
        alignment,
        correspondences: Vec::new(),
        initial_cost: sol.initial_cost,
        final_cost: sol.estimate.residual,
        solves: sol.records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefilterLimits {
    /// Largest angle between the unconstrained z-axis and the plane normal, radians.
    pub max_tilt_before_projection: f64,
    /// Largest distance of the pose origin from the reference plane, meters.
    pub height_band: f64,
    /// Accepted range of projected-face area over observed shape area.
    pub size_ratio_band: [f64; 2],
}

impl Default for PrefilterLimits {
    fn default() -> Self {
        Self { max_tilt_before_projection: 25f64.to_radians(), height_band: 0.3, size_ratio_band: [0.5, 2.0] }
    }
}

/// Why a candidate failed the prefilter, if it did.
pub fn prefilter_reason(
    candidate: &PoseCandidate,
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    limits: &PrefilterLimits,
) -> Option<&'static str> {
    if let Some(u) = &candidate.unconstrained_pose {
        if z_axis_angle(u, &candidate.plane.normal) > limits.max_tilt_before_projection {
            return Some("tilt");
        }
    }
    if candidate.plane.signed_distance(&candidate.pose.position()).abs() > limits.height_band {
        return Some("height");
    }
    let ratio = projected_area(model, &candidate.pose.transform, camera, view) / candidate.shape.area;
    if !(ratio >= limits.size_ratio_band[0] && ratio <= limits.size_ratio_band[1]) {
        return Some("size");
    }
    None
}

/// Keeps candidates inside all prefilter limits. Candidates whose model is
/// not in `models` are dropped.
pub fn prefilter_candidates(
    candidates: Vec<PoseCandidate>,
    models: &[LampModel],
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    limits: &PrefilterLimits,
) -> Vec<PoseCandidate> {
    candidates
        .into_iter()
        .filter(|c| match models.iter().find(|m| m.id == c.model_id) {
            Some(m) => prefilter_reason(c, m, camera, view, limits).is_none(),
            None => false,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rodrigues;
    use crate::shapes::BoundingBox;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 640.0, 480.0, 1280, 960).unwrap()
    }

    fn panel() -> LampModel {
        let h = 0.3;
        LampModel::with_outline(
            "panel",
            FaceShape::Polygon(vec![
                Vec3::new(-h, -h * 0.5, 0.0),
                Vec3::new(h, -h * 0.5, 0.0),
                Vec3::new(h, h * 0.5, 0.0),
                Vec3::new(-h, h * 0.5, 0.0),
            ]),
            MountingKind::Embedded,
        )
        .unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox { min_x: 0, min_y: 0, max_x: 10, max_y: 10 }
    }

    // Camera looking straight up (+z) at a ceiling at z = 3 with normal -z.
    fn upward_view() -> RigidTransform {
        RigidTransform::identity()
    }

    fn observe(model: &LampModel, m: &RigidTransform, view: &RigidTransform) -> ShapeObservation {
        let verts: Vec<Pixel> = model.polygon().unwrap().iter().map(|p| project(&camera(), view, m, p).unwrap()).collect();
        let mut verts = verts;
        if shoelace_area(&verts) > 0.0 {
            verts.reverse();
        }
        verts.rotate_left(1);
        ShapeObservation::polygon(verts, bbox(), Vec::new()).unwrap()
    }

    fn ceiling() -> Plane {
        Plane::new(Vec3::new(0.0, 0.0, 3.0), -Vec3::z()).unwrap()
    }

    fn ceiling_pose(wz: f64, t: Vec3) -> RigidTransform {
        let frame = alignment_rotation(&-Vec3::z()).unwrap();
        RigidTransform { rotation: frame.transform.rotation * rodrigues(&RotVec::new(0.0, 0.0, wz)), translation: t }
    }

    #[test]
    fn aligned_lamp_round_trip() {
        let model = panel();
        let view = upward_view() * RigidTransform::from_translation(Vec3::new(-0.2, 0.3, -0.5));
        let truth = ceiling_pose(0.4, Vec3::new(0.5, -0.3, 3.0));
        let shape = observe(&model, &truth, &view);
        let cand = estimate_polygonal_constrained(&shape, &model, &camera(), &view, &ceiling(), true, &LmOptions::default()).unwrap();
        let dt = (cand.pose.transform.translation - truth.translation).norm();
        let dr = (cand.pose.transform.rotation - truth.rotation).abs().max();
        assert!(dt < 1e-6 && dr < 1e-6, "{dt} {dr}");
        assert!(z_axis_angle(&cand.pose.transform, &ceiling().normal) < 1e-9);
        let pose_solves: Vec<_> = cand.solves.iter().filter(|s| s.purpose.is_pose_solve()).collect();
        assert!(pose_solves.iter().all(|s| s.n_params == 6));
        let constrained: Vec<_> = pose_solves.iter().filter(|s| s.constrained).collect();
        assert_eq!(constrained.len(), 1);
        assert_eq!(constrained[0].n_free, 4);
        assert!(pose_solves.iter().filter(|s| !s.constrained).all(|s| s.n_free == 6));
    }

    #[test]
    fn tilted_truth_is_projected() {
        let model = panel();
        let view = upward_view() * RigidTransform::from_translation(Vec3::new(0.3, 0.1, -0.2));
        let aligned = ceiling_pose(0.2, Vec3::new(0.1, 0.2, 3.0));
        let tilt = RigidTransform::from_rotvec(&RotVec::new(5f64.to_radians(), 0.0, 0.0), Vec3::zeros());
        let truth = aligned * tilt;
        let shape = observe(&model, &truth, &view);
        let cand = estimate_polygonal_constrained(&shape, &model, &camera(), &view, &ceiling(), true, &LmOptions::default()).unwrap();
        assert!(z_axis_angle(&cand.pose.transform, &ceiling().normal) < 1e-9);
        assert!(cand.final_cost > 0.0);
        let free = estimate_polygonal_constrained(&shape, &model, &camera(), &view, &ceiling(), false, &LmOptions::default()).unwrap();
        assert!(cand.final_cost >= free.final_cost);
        assert!((z_axis_angle(&free.pose.transform, &ceiling().normal) - 5f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn vertex_count_mismatch() {
        let model = panel();
        let verts = vec![Pixel::new(0.0, 0.0), Pixel::new(10.0, 0.0), Pixel::new(12.0, 5.0), Pixel::new(10.0, 10.0), Pixel::new(0.0, 10.0)];
        let shape = ShapeObservation::polygon(verts, bbox(), Vec::new()).unwrap();
        let err = estimate_polygonal_constrained(&shape, &model, &camera(), &upward_view(), &ceiling(), true, &LmOptions::default());
        assert!(matches!(err, Err(PoseError::ShapeModelMismatch { expected: 4, got: 5 })));
    }

    fn candidate_with(unconstrained: RigidTransform, pose: RigidTransform, area: f64) -> PoseCandidate {
        let verts = vec![Pixel::new(0.0, 0.0), Pixel::new(0.0, 10.0), Pixel::new(10.0, 10.0), Pixel::new(10.0, 0.0)];
        let mut shape = ShapeObservation::polygon(verts, bbox(), Vec::new()).unwrap();
        shape.area = area;
        PoseCandidate {
            model_id: "panel".into(),
            pose: ObjectPose::new(pose),
            unconstrained_pose: Some(unconstrained),
            constrained: false,
            shape,
            plane: ceiling(),
            alignment: alignment_rotation(&ceiling().normal).unwrap(),
            correspondences: Vec::new(),
            initial_cost: 0.0,
            final_cost: 0.0,
            solves: Vec::new(),
        }
    }

    #[test]
    fn prefilter_limits() {
        let model = panel();
        let view = upward_view();
        let base = ceiling_pose(0.0, Vec3::new(0.0, 0.0, 3.05));
        let area = projected_area(&model, &base, &camera(), &view);
        assert!((area - 0.18 / (3.05f64 * 3.05) * 1e6).abs() < 1.0);
        let limits = PrefilterLimits::default();

        let ok = candidate_with(base, base, area);
        assert_eq!(prefilter_reason(&ok, &model, &camera(), &view, &limits), None);

        let tilted = base * RigidTransform::from_rotvec(&RotVec::new(40f64.to_radians(), 0.0, 0.0), Vec3::zeros());
        let c = candidate_with(tilted, base, area);
        assert_eq!(prefilter_reason(&c, &model, &camera(), &view, &limits), Some("tilt"));

        let low = ceiling_pose(0.0, Vec3::new(0.0, 0.0, 2.5));
        let c = candidate_with(low, low, area);
        assert_eq!(prefilter_reason(&c, &model, &camera(), &view, &limits), Some("height"));

        let c = candidate_with(base, base, area * 3.0);
        assert_eq!(prefilter_reason(&c, &model, &camera(), &view, &limits), Some("size"));

        let out = prefilter_candidates(vec![ok.clone(), candidate_with(tilted, base, area)], &[model.clone()], &camera(), &view, &limits);
        assert_eq!(out, vec![ok]);
        assert!(prefilter_candidates(Vec::new(), &[model], &camera(), &view, &limits).is_empty());
    }

    #[test]
    fn models_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("models.json");
        let models = vec![
            panel(),
            LampModel::with_outline("round", FaceShape::Circle(0.2), MountingKind::Hanging { offset: 0.5 }).unwrap(),
        ];
        std::fs::write(&path, serde_json::to_string(&models).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"circle\":0.2"));
        assert!(text.contains("\"polygon\""));
        assert_eq!(load_models(&path).unwrap(), models);
        assert!(matches!(load_models(dir.path().join("none.json")), Err(PoseError::MissingFile(_))));
        std::fs::write(&path, "[{\"id\":1}]").unwrap();
        assert!(matches!(load_models(&path), Err(PoseError::SchemaError(_))));
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(LampModel::with_outline("c", FaceShape::Circle(0.0), MountingKind::Embedded).is_err());
        assert!(LampModel::new("t", FaceShape::Circle(0.1), Vec::new(), MountingKind::Embedded).is_err());
        let tri = FaceShape::Polygon(vec![Vec3::zeros(), Vec3::x(), Vec3::y()]);
        assert!(LampModel::with_outline("tri", tri, MountingKind::Embedded).is_err());
    }
}
