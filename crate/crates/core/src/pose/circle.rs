use serde::{Deserialize, Serialize};

use super::{PoseError, SolvePurpose, SolveRecord};
use crate::geom::{camera_center, rodrigues, AlignmentFrame, CameraIntrinsics, Pixel, RigidTransform, RotVec, Vec3};
use crate::optim::{lm_minimize, LmOptions, ResidualProblem};
use crate::shapes::fit_ellipse;

/// Fraction of rays allowed to run parallel to the circle plane.
const MAX_PARALLEL_FRACTION: f64 = 0.5;
const PARALLEL_EPS: f64 = 1e-12;

/// Circle centre and normal in the aligned frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleEstimate {
    pub center: Vec3,
    pub normal: Vec3,
    /// Final sum of squared radial residuals, in meters squared.
    pub residual: f64,
}

/// Radial residuals of image rays intersected with a circle plane.
///
/// All quantities live in the aligned frame. With a fixed normal the
/// parameters are the circle centre; otherwise they are `(p_C, w)` and the
/// normal is `rodrigues(w) * z`.
pub struct CircleProblem {
    pub origin: Vec3,
    pub rays: Vec<Vec3>,
    pub radius: f64,
    pub free_normal: bool,
}

impl CircleProblem {
    pub fn normal_of(&self, x: &[f64]) -> Vec3 {
        if self.free_normal {
            rodrigues(&RotVec::new(x[3], x[4], x[5])) * Vec3::z()
        } else {
            Vec3::z()
        }
    }

    fn residuals_with(&self, center: &Vec3, normal: &Vec3) -> Vec<f64> {
        self.rays
            .iter()
            .map(|f| {
                let t = normal.dot(&(center - self.origin)) / normal.dot(f);
                let hit = self.origin + f * t;
                (hit - center).norm() - self.radius
            })
            .collect()
    }

    /// Radial cost for an arbitrary centre and unit normal.
    pub fn cost(&self, center: &Vec3, normal: &Vec3) -> f64 {
        self.residuals_with(center, normal).iter().map(|r| r * r).sum()
    }
}

impl ResidualProblem for CircleProblem {
    fn n_params(&self) -> usize {
        if self.free_normal {
            6
        } else {
            3
        }
    }

    fn n_residuals(&self) -> usize {
        self.rays.len()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let center = Vec3::new(x[0], x[1], x[2]);
        self.residuals_with(&center, &self.normal_of(x))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleSolution {
    pub estimate: CircleEstimate,
    /// Model transform: z-axis on the circle normal, no in-plane rotation.
    pub transform: RigidTransform,
    pub initial_cost: f64,
    pub records: Vec<SolveRecord>,
}

/// Builds the aligned-frame ray bundle for image points.
pub fn circle_problem(
    points: &[Pixel],
    radius: f64,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    frame: &AlignmentFrame,
    free_normal: bool,
) -> CircleProblem {
    let world_from_cam = view.rotation.transpose();
    let rays = points.iter().map(|p| frame.to_aligned(&(world_from_cam * camera.unproject(p)))).collect();
    CircleProblem { origin: frame.to_aligned(&camera_center(view)), rays, radius, free_normal }
}

/// Circle pose from boundary points. Constrained mode keeps the normal on
/// the frame normal and solves for the centre only; otherwise the normal is
/// refined too, starting from the constrained solution.
pub fn estimate_circular_constrained(
    points: &[Pixel],
    radius: f64,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    frame: &AlignmentFrame,
    constrained: bool,
    lm: &LmOptions,
) -> Result<CircleSolution, PoseError> {
    if points.len() < 6 {
        return Err(PoseError::EstimationFailed(format!("need at least 6 points, got {}", points.len())));
    }
    if !(radius > 0.0) {
        return Err(PoseError::InvalidModel("circle radius must be positive".into()));
    }
    let mut problem = circle_problem(points, radius, camera, view, frame, false);
    let parallel = problem.rays.iter().filter(|f| f.z.abs() < PARALLEL_EPS * f.norm()).count();
    if parallel as f64 > MAX_PARALLEL_FRACTION * points.len() as f64 {
        return Err(PoseError::RaysParallelToPlane);
    }

    // Seed: depth from the apparent size along the ray through the centre.
    let (center_px, semi_major) = match fit_ellipse(points) {
        Ok(e) => (e.center, e.semi_major),
        Err(_) => {
            let n = points.len() as f64;
            let c = points.iter().fold(Vec3::zeros(), |acc, p| acc + Vec3::new(p.x, p.y, 0.0)) / n;
            let c = Pixel::new(c.x, c.y);
            (c, points.iter().map(|p| (p - c).norm()).fold(0.0, f64::max))
        }
    };
    if !(semi_major > 0.0) {
        return Err(PoseError::EstimationFailed("zero apparent size".into()));
    }
    let depth = camera.fx * radius / semi_major;
    let ray = frame.to_aligned(&(view.rotation.transpose() * camera.unproject(&center_px))).normalize();
    let seed = problem.origin + ray * depth;

    let x0 = [seed.x, seed.y, seed.z];
    let res = lm_minimize(&problem, &x0, &[true; 3], lm).map_err(|e| PoseError::EstimationFailed(e.to_string()))?;
    let mut records =
        vec![SolveRecord { purpose: SolvePurpose::CircleCenter, n_params: 3, n_free: res.n_free, constrained: true }];
    let mut initial_cost = res.initial_cost;
    let mut x = vec![res.x[0], res.x[1], res.x[2], 0.0, 0.0, 0.0];
    let mut residual = res.final_cost;

    if !constrained {
        problem.free_normal = true;
        // The in-plane component of w does not move the normal.
        let mask = [true, true, true, true, true, false];
        let res = lm_minimize(&problem, &x, &mask, lm).map_err(|e| PoseError::EstimationFailed(e.to_string()))?;
        records.push(SolveRecord { purpose: SolvePurpose::CircleNormal, n_params: 6, n_free: res.n_free, constrained: false });
        initial_cost = res.initial_cost;
        residual = res.final_cost;
        x = res.x;
    }
    if !residual.is_finite() {
        return Err(PoseError::EstimationFailed("non-finite cost".into()));
    }

    let center = Vec3::new(x[0], x[1], x[2]);
    let w = RotVec::new(x[3], x[4], 0.0);
    let normal = rodrigues(&w) * Vec3::z();
    let aligned = RigidTransform::from_rotvec(&w, center);
    Ok(CircleSolution {
        estimate: CircleEstimate { center, normal, residual },
        transform: frame.transform * aligned,
        initial_cost,
        records,
    })
}
