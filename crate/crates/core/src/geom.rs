//! Rigid-body geometry, the pinhole projection chain and the plane-alignment
//! machinery used to restrict object orientations to a single degree of
//! freedom about a reference normal.
//!
//! Conventions:
//! * a model transform `M` maps model coordinates to world coordinates;
//! * a view transform `V` maps world coordinates to camera coordinates
//!   (x right, y down, z forward);
//! * the alignment rotation `L` maps the unit z-axis onto the plane normal,
//!   and an aligned pose is written `M = L * M_p` with `M_p` a rotation about
//!   z plus a translation expressed in the aligned frame.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Pixel = Point2<f64>;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;
/// Minimum camera-frame depth accepted by [`project`].
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("matrix is not a proper rotation (orthonormality error {0:e})")]
    InvalidRotation(f64),
    #[error("normal vector is not unit length (norm {0})")]
    InvalidNormal(f64),
    #[error("point is behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
}

/// Axis-angle rotation vector: direction is the axis, norm is the angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotVec(pub Vec3);

impl RotVec {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vec3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    /// Wraps the angle into `[0, pi]`, flipping the axis when needed. At
    /// exactly `pi` the axis sign is fixed so its first non-zero component is
    /// positive.
    pub fn canonical(&self) -> Self {
        let theta = self.0.norm();
        if theta == 0.0 || !theta.is_finite() {
            return *self;
        }
        let axis = self.0 / theta;
        let mut wrapped = theta.rem_euclid(2.0 * PI);
        let mut axis = axis;
        if wrapped > PI {
            wrapped = 2.0 * PI - wrapped;
            axis = -axis;
        }
        if (wrapped - PI).abs() < 1e-15 {
            axis = positive_axis(axis);
        }
        Self(axis * wrapped)
    }
}

fn positive_axis(axis: Vec3) -> Vec3 {
    for c in axis.iter() {
        if *c > 0.0 {
            return axis;
        }
        if *c < 0.0 {
            return -axis;
        }
    }
    axis
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to a rotation matrix.
pub fn rodrigues(w: &RotVec) -> Mat3 {
    let theta2 = w.0.norm_squared();
    let k = skew(&w.0);
    let k2 = k * k;
    // Taylor expansions keep the small-angle branch accurate to machine
    // precision.
    let (a, b) = if theta2 < 1e-12 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Mat3::identity() + k * a + k2 * b
}

/// Maximum absolute deviation of `r^T r` from the identity.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}

pub fn check_rotation(r: &Mat3) -> Result<(), GeomError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::InvalidRotation(f64::INFINITY));
    }
    let err = orthonormality_error(r);
    let det = r.determinant();
    if err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeomError::InvalidRotation(err.max((det - 1.0).abs())));
    }
    Ok(())
}

/// Logarithm map from a rotation matrix to a canonical rotation vector.
pub fn log_map(r: &Mat3) -> Result<RotVec, GeomError> {
    check_rotation(r)?;
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let sin_theta = 0.5 * vee.norm();
    let cos_theta = (0.5 * (r.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < 1e-6 {
        // theta / sin(theta) ~ 1 + theta^2 / 6
        let scale = 0.5 * (1.0 + theta * theta / 6.0);
        return Ok(RotVec(vee * scale));
    }
    if theta < PI - 1e-3 {
        return Ok(RotVec(vee * (theta / (2.0 * sin_theta))));
    }

    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part (1 - cos) k k^T.
    let sym = (r + r.transpose()) * 0.5 - Mat3::identity() * cos_theta;
    let one_minus_cos = 1.0 - cos_theta;
    let diag = sym.diagonal();
    let i = diag.imax();
    let col = sym.column(i) / one_minus_cos;
    let mut axis: Vec3 = col.into_owned();
    axis /= axis.norm();
    if vee.norm() > 1e-14 {
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
    } else {
        axis = positive_axis(axis);
    }
    Ok(RotVec(axis * theta).canonical())
}

/// Proper rigid transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a transform after validating the rotation.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn from_rotvec(w: &RotVec, translation: Vec3) -> Self {
        Self { rotation: rodrigues(w), translation }
    }

    pub fn from_rotation(rotation: Mat3) -> Self {
        Self { rotation, translation: Vec3::zeros() }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn rotvec(&self) -> Result<RotVec, GeomError> {
        log_map(&self.rotation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// The transformed z-axis (third rotation column).
    pub fn z_axis(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let r = &self.rotation;
        let repr = RigidTransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = RigidTransformRepr::deserialize(d)?;
        let m = repr.rotation;
        let rotation = Mat3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        );
        let t = repr.translation;
        RigidTransform::new(rotation, Vec3::new(t[0], t[1], t[2])).map_err(serde::de::Error::custom)
    }
}

/// Pinhole camera with optional Brown-Conrady distortion
/// `[k1, k2, p1, p2, k3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub distortion: [f64; 5],
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let cam = Self { fx, fy, cx, cy, width, height, distortion: [0.0; 5] };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeomError::InvalidCamera("image size must be positive".into()));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) || self.distortion.iter().any(|d| !d.is_finite()) {
            return Err(GeomError::InvalidCamera("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.distortion.iter().any(|&d| d != 0.0)
    }

    fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let [k1, k2, p1, p2, k3] = self.distortion;
        let r2 = x * x + y * y;
        let radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3));
        let xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        (xd, yd)
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project_camera_point(&self, pc: &Vec3) -> Result<Pixel, GeomError> {
        if !(pc.z > MIN_DEPTH) {
            return Err(GeomError::BehindCamera(pc.z));
        }
        let (mut x, mut y) = (pc.x / pc.z, pc.y / pc.z);
        if self.has_distortion() {
            (x, y) = self.distort(x, y);
        }
        Ok(Pixel::new(self.fx * x + self.cx, self.fy * y + self.cy))
    }

    /// Normalized (z = 1) camera ray through a pixel, undoing distortion by
    /// fixed-point iteration.
    pub fn unproject(&self, px: &Pixel) -> Vec3 {
        let xd = (px.x - self.cx) / self.fx;
        let yd = (px.y - self.cy) / self.fy;
        if !self.has_distortion() {
            return Vec3::new(xd, yd, 1.0);
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..50 {
            let (dx, dy) = self.distort(x, y);
            let (ex, ey) = (dx - xd, dy - yd);
            x -= ex;
            y -= ey;
            if ex.abs() < 1e-15 && ey.abs() < 1e-15 {
                break;
            }
        }
        Vec3::new(x, y, 1.0)
    }
}

/// Projects a model-space point through `model`, `view` and the camera.
pub fn project(
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    model: &RigidTransform,
    p: &Vec3,
) -> Result<Pixel, GeomError> {
    let world = model.apply(p);
    let cam = view.apply(&world);
    camera.project_camera_point(&cam)
}

/// Camera centre in world coordinates for a world-to-camera view.
pub fn camera_center(view: &RigidTransform) -> Vec3 {
    -(view.rotation.transpose() * view.translation)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl Plane {
    pub fn new(point: Vec3, normal: Vec3) -> Result<Self, GeomError> {
        let n = normal.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeomError::InvalidNormal(n));
        }
        Ok(Self { point, normal: normal / n })
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.point))
    }
}

/// Rotation taking the z-axis onto a plane normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentFrame {
    pub normal: Vec3,
    pub l: RotVec,
    pub transform: RigidTransform,
}

impl AlignmentFrame {
    pub fn rotation(&self) -> &Mat3 {
        &self.transform.rotation
    }

    /// World (or object) coordinates to aligned coordinates, `L^-1 p`.
    pub fn to_aligned(&self, p: &Vec3) -> Vec3 {
        self.transform.rotation.transpose() * p
    }

    /// Aligned coordinates back to world coordinates, `L p`.
    pub fn from_aligned(&self, p: &Vec3) -> Vec3 {
        self.transform.rotation * p
    }
}

pub fn alignment_rotation(normal: &Vec3) -> Result<AlignmentFrame, GeomError> {
    let n = normal.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
        return Err(GeomError::InvalidNormal(n));
    }
    let z = Vec3::z();
    let lp = z.cross(normal);
    let s = lp.norm();
    let c = z.dot(normal);
    let l = if s < 1e-9 {
        if c > 0.0 {
            RotVec::zero()
        } else {
            RotVec::new(PI, 0.0, 0.0)
        }
    } else {
        RotVec(lp * (s.atan2(c) / s))
    };
    Ok(AlignmentFrame {
        normal: *normal,
        l,
        transform: RigidTransform::from_rotation(rodrigues(&l)),
    })
}

/// Pose restricted to rotations about the aligned z-axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstrainedPoseParams {
    pub wz: f64,
    pub t: Vec3,
    pub frame: AlignmentFrame,
    /// The `(wx, wy)` components dropped by the projection onto z.
    pub discarded: [f64; 2],
}

impl ConstrainedPoseParams {
    pub fn new(wz: f64, t: Vec3, frame: AlignmentFrame) -> Self {
        Self { wz, t, frame, discarded: [0.0, 0.0] }
    }

    /// The aligned-frame transform `M_p`.
    pub fn aligned_transform(&self) -> RigidTransform {
        RigidTransform::from_rotvec(&RotVec::new(0.0, 0.0, self.wz), self.t)
    }
}

pub fn constrain_pose(m: &RigidTransform, frame: &AlignmentFrame) -> ConstrainedPoseParams {
    let aligned = frame.transform.inverse() * *m;
    // A model transform validated at construction always has a log.
    let w = log_map(&aligned.rotation).unwrap_or_else(|_| RotVec::zero());
    ConstrainedPoseParams {
        wz: w.0.z,
        t: aligned.translation,
        frame: *frame,
        discarded: [w.0.x, w.0.y],
    }
}

pub fn restore_pose(params: &ConstrainedPoseParams) -> RigidTransform {
    params.frame.transform * params.aligned_transform()
}

/// Angle in `[0, pi]` between the model z-axis and `normal`.
pub fn z_axis_angle(m: &RigidTransform, normal: &Vec3) -> f64 {
    let z = m.z_axis();
    z.cross(normal).norm().atan2(z.dot(normal))
}
