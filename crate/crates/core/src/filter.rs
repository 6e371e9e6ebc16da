//! Area-normalised reprojection error, virtual circle correspondences and
//! on/off state classification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{camera_center, project, CameraIntrinsics, GeomError, Pixel, RigidTransform, Vec3};
use crate::pose::{outline_points, Correspondence, LampModel, ObjectPose};
use crate::shapes::{polygon_pixels, shoelace_area, GrayImage};

/// Default polygonal reprojection threshold.
pub const THRESHOLD_POLYGONAL: f64 = 0.015;
/// Default circular reprojection threshold.
pub const THRESHOLD_CIRCULAR: f64 = 0.035;
/// Largest fraction of contour points allowed to fail the virtual-point
/// construction.
pub const MAX_DEGENERATE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("no correspondences")]
    Empty,
    #[error("shape area must be positive")]
    NonPositiveArea,
    #[error("ray is parallel to the circle plane")]
    RayParallelToPlane,
    #[error("point projects onto the circle centre")]
    ProjectedAtCenter,
    #[error("{failed} of {total} contour points have no virtual correspondence")]
    TooManyDegeneratePoints { failed: usize, total: usize },
    #[error("lamp face is not visible in the image")]
    StateUndetermined,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LampState {
    On,
    Off,
}

/// Frame-level detection after model selection and refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `f<frame>-b<blob>` identifier, unique within a run.
    pub id: String,
    pub frame: usize,
    pub model_id: String,
    pub pose: ObjectPose,
    pub state: LampState,
    pub chamfer_score: f64,
    pub reprojection_error: f64,
    /// Observed shape area, pixels squared.
    pub area: f64,
    pub circular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionStats {
    pub squared_errors: Vec<f64>,
    pub n: usize,
    pub area: f64,
    pub epsilon: f64,
    /// Contour points skipped by the circle construction.
    pub excluded: usize,
}

/// Mean squared pixel error divided by the shape area.
pub fn normalized_error(squared_errors: &[f64], area: f64) -> Result<f64, FilterError> {
    if squared_errors.is_empty() {
        return Err(FilterError::Empty);
    }
    if !(area > 0.0) {
        return Err(FilterError::NonPositiveArea);
    }
    let n = squared_errors.len() as f64;
    Ok(squared_errors.iter().sum::<f64>() / (n * area))
}

fn stats(squared_errors: Vec<f64>, area: f64, excluded: usize) -> Result<ReprojectionStats, FilterError> {
    let epsilon = normalized_error(&squared_errors, area)?;
    Ok(ReprojectionStats { n: squared_errors.len(), squared_errors, area, epsilon, excluded })
}

pub fn reprojection_error_polygon(
    pose: &RigidTransform,
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    area: f64,
) -> Result<ReprojectionStats, FilterError> {
    let mut errs = Vec::with_capacity(correspondences.len());
    for c in correspondences {
        let p = project(camera, view, pose, &c.p_obj)?;
        errs.push((p - c.p_img).norm_squared());
    }
    stats(errs, area, 0)
}

fn non_negative(v: f64) -> bool {
    v >= 0.0
}

/// Circle point paired with an image point: the image ray is cut with the
/// model z = 0 plane, and the cut point is pushed radially onto the circle,
/// keeping the intersection in the same quadrant.
pub fn circular_virtual_point(
    img_pt: &Pixel,
    pose: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    radius: f64,
) -> Result<Vec3, FilterError> {
    let inv = pose.inverse();
    let origin = inv.apply(&camera_center(view));
    let dir = inv.apply_vector(&(view.rotation.transpose() * camera.unproject(img_pt)));
    if dir.z.abs() <= 1e-12 * dir.norm() {
        return Err(FilterError::RayParallelToPlane);
    }
    let t = -origin.z / dir.z;
    let (x, y) = (origin.x + t * dir.x, origin.y + t * dir.y);
    let r = x.hypot(y);
    if r == 0.0 {
        return Err(FilterError::ProjectedAtCenter);
    }
    let a = (radius * x / r, radius * y / r);
    let b = (-a.0, -a.1);
    let quadrant = (non_negative(x), non_negative(y));
    let pick = if (non_negative(a.0), non_negative(a.1)) == quadrant {
        a
    } else if (non_negative(b.0), non_negative(b.1)) == quadrant {
        b
    } else {
        a
    };
    Ok(Vec3::new(pick.0, pick.1, 0.0))
}

pub fn reprojection_error_circle(
    pose: &RigidTransform,
    points: &[Pixel],
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    radius: f64,
    area: f64,
) -> Result<ReprojectionStats, FilterError> {
    let mut errs = Vec::with_capacity(points.len());
    let mut failed = 0;
    for p in points {
        let projected = circular_virtual_point(p, pose, camera, view, radius)
            .ok()
            .and_then(|v| project(camera, view, pose, &v).ok());
        match projected {
            Some(q) => errs.push((q - p).norm_squared()),
            None => failed += 1,
        }
    }
    if points.is_empty() {
        return Err(FilterError::Empty);
    }
    if failed as f64 > MAX_DEGENERATE_FRACTION * points.len() as f64 {
        return Err(FilterError::TooManyDegeneratePoints { failed, total: points.len() });
    }
    stats(errs, area, failed)
}

/// Keeps detections under their shape-specific threshold, in order.
pub fn apply_reprojection_filter(detections: Vec<Detection>, thr_poly: f64, thr_circ: f64) -> Vec<Detection> {
    detections
        .into_iter()
        .filter(|d| d.reprojection_error <= if d.circular { thr_circ } else { thr_poly })
        .collect()
}

/// Fraction of the face (about its centre) sampled for the state test, so a
/// slightly misplaced outline does not mix in background.
pub const STATE_SAMPLE_SCALE: f64 = 0.8;

/// On when the mean intensity inside the projected face reaches
/// `on_threshold`.
pub fn classify_state(
    img: &GrayImage,
    pose: &RigidTransform,
    model: &LampModel,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    on_threshold: u8,
) -> Result<LampState, FilterError> {
    let outline = outline_points(&model.face, 64);
    let n = outline.len() as f64;
    let centre = outline.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut poly = Vec::with_capacity(outline.len());
    for p in &outline {
        let q = centre + (p - centre) * STATE_SAMPLE_SCALE;
        poly.push(project(camera, view, pose, &q).map_err(|_| FilterError::StateUndetermined)?);
    }
    if shoelace_area(&poly).abs() < 3.0 {
        return Err(FilterError::StateUndetermined);
    }
    let pixels = polygon_pixels(&poly, img.width(), img.height());
    if pixels.is_empty() {
        return Err(FilterError::StateUndetermined);
    }
    let sum: u64 = pixels.iter().map(|&(x, y)| img.get(x, y) as u64).sum();
    let mean = sum as f64 / pixels.len() as f64;
    Ok(if mean >= on_threshold as f64 { LampState::On } else { LampState::Off })
}
