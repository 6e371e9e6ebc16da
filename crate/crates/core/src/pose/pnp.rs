use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{pose_from_params, pose_to_params, PoseError, SolvePurpose, SolveRecord};
use crate::geom::{project, AlignmentFrame, CameraIntrinsics, Pixel, RigidTransform, Vec3};
use crate::optim::{lm_minimize, LmOptions, ResidualProblem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub p_obj: Vec3,
    pub p_img: Pixel,
}

/// Reprojection residuals of a model pose over point correspondences.
///
/// Parameters are `(w, t)`. Without a frame they describe the model
/// transform directly; with a frame the transform is `L * (w, t)` so that
/// fixing `w_x` and `w_y` at zero keeps the model z-axis on the frame normal.
pub struct PnpProblem<'a> {
    pub correspondences: &'a [Correspondence],
    pub camera: &'a CameraIntrinsics,
    pub view: &'a RigidTransform,
    pub frame: Option<AlignmentFrame>,
}

impl PnpProblem<'_> {
    pub fn transform(&self, x: &[f64]) -> RigidTransform {
        let local = pose_from_params(x);
        match &self.frame {
            Some(f) => f.transform * local,
            None => local,
        }
    }
}

impl ResidualProblem for PnpProblem<'_> {
    fn n_params(&self) -> usize {
        6
    }

    fn n_residuals(&self) -> usize {
        2 * self.correspondences.len()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let m = self.transform(x);
        let mut r = Vec::with_capacity(2 * self.correspondences.len());
        for c in self.correspondences {
            match project(self.camera, self.view, &m, &c.p_obj) {
                Ok(p) => {
                    r.push(p.x - c.p_img.x);
                    r.push(p.y - c.p_img.y);
                }
                Err(_) => {
                    r.push(f64::NAN);
                    r.push(f64::NAN);
                }
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    pub transform: RigidTransform,
    /// Sum of squared pixel residuals.
    pub cost: f64,
    pub rms: f64,
    pub record: SolveRecord,
}

// Similarity normalising 2D points to zero mean and mean distance sqrt(2).
fn normalisation(points: &[(f64, f64)]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let mean_d = points.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_d > 0.0 { std::f64::consts::SQRT_2 / mean_d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = h * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalised DLT homography mapping `src` onto `dst`.
pub(crate) fn homography(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Matrix3<f64>> {
    let ts = normalisation(src);
    let td = normalisation(dst);
    let mut a = DMatrix::zeros(2 * src.len(), 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let (x, y) = apply_h(&ts, *s);
        let (u, v) = apply_h(&td, *d);
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        let r2 = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, -u];
        for j in 0..9 {
            a[(2 * i, j)] = r1[j];
            a[(2 * i + 1, j)] = r2[j];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(k);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = td.try_inverse()? * hn * ts;
    h.iter().all(|v| v.is_finite()).then_some(h)
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap_or_else(Matrix3::identity), svd.v_t.unwrap_or_else(Matrix3::identity));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * d * vt;
    }
    r
}

/// Planar PnP: homography seed followed by a six-parameter LM polish.
///
/// Object points must lie on the model z = 0 plane.
pub fn solve_pnp_planar(
    correspondences: &[Correspondence],
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    lm: &LmOptions,
) -> Result<PnpSolution, PoseError> {
    if correspondences.len() < 4 {
        return Err(PoseError::DegenerateConfiguration);
    }
    if correspondences.iter().any(|c| c.p_obj.z.abs() > 1e-9) {
        return Err(PoseError::DegenerateConfiguration);
    }
    let src: Vec<(f64, f64)> = correspondences.iter().map(|c| (c.p_obj.x, c.p_obj.y)).collect();
    // Collinearity: the object points' 2D scatter must have two spread directions.
    let n = src.len() as f64;
    let (mx, my) = src.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &src {
        sxx += (p.0 - mx).powi(2);
        sxy += (p.0 - mx) * (p.1 - my);
        syy += (p.1 - my).powi(2);
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    if !(tr > 0.0) || det <= 1e-10 * tr * tr {
        return Err(PoseError::DegenerateConfiguration);
    }

    let dst: Vec<(f64, f64)> = correspondences
        .iter()
        .map(|c| {
            let r = camera.unproject(&c.p_img);
            (r.x, r.y)
        })
        .collect();
    let h = homography(&src, &dst).ok_or(PoseError::DegenerateConfiguration)?;
    let (h1, h2, h3) = (h.column(0).into_owned(), h.column(1).into_owned(), h.column(2).into_owned());
    let denom = h1.norm() + h2.norm();
    if !(denom > 0.0) {
        return Err(PoseError::DegenerateConfiguration);
    }
    let mut lambda = 2.0 / denom;
    if h3.z * lambda < 0.0 {
        lambda = -lambda;
    }
    let (r1, r2, t) = (h1 * lambda, h2 * lambda, h3 * lambda);
    let r = nearest_rotation(&Matrix3::from_columns(&[r1, r2, r1.cross(&r2)]));
    let cam_pose = RigidTransform { rotation: r, translation: t };
    let seed = view.inverse() * cam_pose;

    let problem = PnpProblem { correspondences, camera, view, frame: None };
    let x0 = pose_to_params(&seed);
    let res = lm_minimize(&problem, &x0, &[true; 6], lm).map_err(|_| PoseError::NoValidPose)?;
    let transform = problem.transform(&res.x);
    for c in correspondences {
        let pc = view.apply(&transform.apply(&c.p_obj));
        if !(pc.z > 0.0) {
            return Err(PoseError::NoValidPose);
        }
    }
    Ok(PnpSolution {
        transform,
        cost: res.final_cost,
        rms: (res.final_cost / correspondences.len() as f64).sqrt(),
        record: SolveRecord { purpose: SolvePurpose::Pnp, n_params: 6, n_free: res.n_free, constrained: false },
    })
}
