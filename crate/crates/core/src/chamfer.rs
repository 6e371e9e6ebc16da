//! Edge extraction, the orientation-augmented distance field, chamfer
//! scoring of projected edge templates and direct chamfer pose refinement.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::Detection;
use crate::geom::{project, AlignmentFrame, CameraIntrinsics, RigidTransform, Vec3};
use crate::optim::{lm_minimize, LmOptions, OptimError, ResidualProblem};
use crate::pose::{
    constrained_params, pose_from_params, pose_to_params, LampModel, SolvePurpose, SolveRecord, CONSTRAINED_MASK,
    UNCONSTRAINED_MASK,
};
use crate::shapes::{BoundingBox, GrayImage};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChamferError {
    #[error("no template point projects into the image")]
    NoVisibleTemplate,
    #[error("invalid field parameters: {0}")]
    InvalidParameters(String),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgePoint {
    pub x: u32,
    pub y: u32,
    /// Undirected line orientation in `[0, pi)`.
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeMap {
    pub width: u32,
    pub height: u32,
    pub points: Vec<EdgePoint>,
}

/// Wraps an angle into `[0, pi)`.
pub fn wrap_orientation(theta: f64) -> f64 {
    let t = theta.rem_euclid(PI);
    if t >= PI {
        0.0
    } else {
        t
    }
}

/// Nearest orientation channel: channel `k` is centred on `k pi / q`.
pub fn orientation_channel(theta: f64, q: usize) -> usize {
    ((wrap_orientation(theta) * q as f64 / PI).round() as usize) % q
}

/// Circular angular distance between two channels, radians.
pub fn channel_distance(a: usize, b: usize, q: usize) -> f64 {
    let d = a.abs_diff(b);
    let d = d.min(q - d);
    d as f64 * PI / q as f64
}

/// Sobel gradient magnitude of the Gaussian-smoothed image with
/// non-maximum suppression. Orientation is the
/// locally averaged gradient direction turned by 90 degrees.
pub fn detect_edges(img: &GrayImage, grad_threshold: f64) -> EdgeMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut gx = vec![0.0f64; w * h];
    let mut gy = vec![0.0f64; w * h];
    let mut mag = vec![0.0f64; w * h];
    let data = gaussian_blur(img, EDGE_SIGMA);
    let at = |x: usize, y: usize| data[y * w + x];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let sx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let sy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y * w + x;
            gx[i] = sx;
            gy[i] = sy;
            mag[i] = (sx * sx + sy * sy).sqrt();
        }
    }
    let mut points = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m < grad_threshold || m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]);
            // Quantise the gradient direction to one of four neighbour axes.
            let sector = (((angle + PI) / (PI / 4.0)).round() as i64).rem_euclid(4);
            let (dx, dy): (i64, i64) = match sector {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let fwd = mag[(y as i64 + dy) as usize * w + (x as i64 + dx) as usize];
            let bwd = mag[(y as i64 - dy) as usize * w + (x as i64 - dx) as usize];
            // Strict on one side so two-pixel plateaus keep a single edge.
            if m > fwd && m >= bwd {
                let grad = tensor_orientation(&gx, &gy, w, h, x, y);
                points.push(EdgePoint { x: x as u32, y: y as u32, theta: wrap_orientation(grad + PI / 2.0) });
            }
        }
    }
    EdgeMap { width: img.width(), height: img.height(), points }
}

const TENSOR_RADIUS: usize = 2;
const EDGE_SIGMA: f64 = 1.0;

// Separable Gaussian blur with clamped borders.
fn gaussian_blur(img: &GrayImage, sigma: f64) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let src = img.data();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let u = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += k * src[y * w + u] as f64;
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let v = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += k * tmp[v * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

// Dominant gradient direction of a window, from the doubled-angle
// structure tensor.
fn tensor_orientation(gx: &[f64], gy: &[f64], w: usize, h: usize, x: usize, y: usize) -> f64 {
    let (mut jxx, mut jxy, mut jyy) = (0.0, 0.0, 0.0);
    for v in y.saturating_sub(TENSOR_RADIUS)..(y + TENSOR_RADIUS + 1).min(h) {
        for u in x.saturating_sub(TENSOR_RADIUS)..(x + TENSOR_RADIUS + 1).min(w) {
            let (a, b) = (gx[v * w + u], gy[v * w + u]);
            jxx += a * a;
            jxy += a * b;
            jyy += b * b;
        }
    }
    0.5 * (2.0 * jxy).atan2(jxx - jyy)
}

/// Dense field over a rectangular image region:
/// `value(x, y, k) = min_e |(x, y) - e| + lambda * dtheta(k, channel(e))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalDistanceField {
    pub x0: u32,
    pub y0: u32,
    pub width: usize,
    pub height: usize,
    pub q: usize,
    pub lambda: f64,
    /// Upper bound of any finite value; also returned for cells with no edge
    /// in reach and for lookups outside the region.
    pub max_value: f64,
    data: Vec<f64>,
}

impl DirectionalDistanceField {
    /// Value at integer region coordinates.
    #[inline]
    pub fn at(&self, x: usize, y: usize, k: usize) -> f64 {
        self.data[(k * self.height + y) * self.width + x]
    }

    /// Bilinear lookup at image coordinates in channel `k`.
    pub fn lookup(&self, px: f64, py: f64, k: usize) -> f64 {
        let x = px - self.x0 as f64;
        let y = py - self.y0 as f64;
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return self.max_value;
        }
        let (xi, yi) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((xi + 1).min(self.width - 1), (yi + 1).min(self.height - 1));
        let (fx, fy) = (x - xi as f64, y - yi as f64);
        let top = self.at(xi, yi, k) * (1.0 - fx) + self.at(x1, yi, k) * fx;
        let bottom = self.at(xi, y1, k) * (1.0 - fx) + self.at(x1, y1, k) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Whether image point lies inside the field region.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let x = px - self.x0 as f64;
        let y = py - self.y0 as f64;
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Three-tap box blur along x then y, per channel.
    pub fn smoothed(&self) -> Self {
        let mut out = self.clone();
        let (w, h) = (self.width, self.height);
        for k in 0..self.q {
            let base = k * w * h;
            let mut tmp = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (x.saturating_sub(1), (x + 1).min(w - 1));
                    tmp[y * w + x] = (self.data[base + y * w + a] + self.data[base + y * w + x] + self.data[base + y * w + b]) / 3.0;
                }
            }
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
                    out.data[base + y * w + x] = (tmp[a * w + x] + tmp[y * w + x] + tmp[b * w + x]) / 3.0;
                }
            }
        }
        out
    }
}

const UNREACHED: i64 = i64::MAX;

// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher)
// of a binary mask, integer valued.
fn squared_edt(mask: &[bool], w: usize, h: usize) -> Vec<i64> {
    let mut col = vec![UNREACHED; w * h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if mask[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = ((y - l) * (y - l)) as i64;
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if mask[y * w + x] {
                next = Some(y);
            }
            if let Some(n) = next {
                let d = ((n - y) * (n - y)) as i64;
                if d < col[y * w + x] {
                    col[y * w + x] = d;
                }
            }
        }
    }
    let mut out = vec![UNREACHED; w * h];
    let mut v = vec![0usize; w];
    let mut z = vec![0f64; w + 1];
    for y in 0..h {
        let f = &col[y * w..(y + 1) * w];
        let mut k: isize = -1;
        for q in 0..w {
            if f[q] == UNREACHED {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                let p = v[k as usize];
                let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64 / (2.0 * (q as f64 - p as f64));
                if s <= z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                v[k as usize] = q;
                z[k as usize] = s;
                z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for q in 0..w {
            while z[j + 1] < q as f64 {
                j += 1;
            }
            let p = v[j];
            let d = q as i64 - p as i64;
            out[y * w + q] = d * d + f[p];
        }
    }
    out
}

/// Field over the whole image.
pub fn build_ddf(edges: &EdgeMap, q: usize, lambda: f64) -> Result<DirectionalDistanceField, ChamferError> {
    let region = BoundingBox {
        min_x: 0,
        min_y: 0,
        max_x: edges.width.saturating_sub(1),
        max_y: edges.height.saturating_sub(1),
    };
    build_ddf_region(edges, q, lambda, &region)
}

/// Field restricted to `region` (inclusive bounds); only edges inside the
/// region contribute.
pub fn build_ddf_region(
    edges: &EdgeMap,
    q: usize,
    lambda: f64,
    region: &BoundingBox,
) -> Result<DirectionalDistanceField, ChamferError> {
    if q == 0 {
        return Err(ChamferError::InvalidParameters("q must be at least 1".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(ChamferError::InvalidParameters("lambda must be finite and non-negative".into()));
    }
    if region.max_x < region.min_x || region.max_y < region.min_y {
        return Err(ChamferError::InvalidParameters("empty region".into()));
    }
    let (w, h) = (region.width() as usize, region.height() as usize);
    let max_value = ((w * w + h * h) as f64).sqrt() + lambda * PI / 2.0;

    let mut masks = vec![vec![false; w * h]; q];
    let mut present = vec![false; q];
    for e in &edges.points {
        if e.x < region.min_x || e.x > region.max_x || e.y < region.min_y || e.y > region.max_y {
            continue;
        }
        let k = orientation_channel(e.theta, q);
        masks[k][(e.y - region.min_y) as usize * w + (e.x - region.min_x) as usize] = true;
        present[k] = true;
    }
    let dist: Vec<Option<Vec<f64>>> = masks
        .par_iter()
        .zip(present.par_iter())
        .map(|(m, &p)| {
            p.then(|| {
                squared_edt(m, w, h)
                    .into_iter()
                    .map(|d| if d == UNREACHED { f64::INFINITY } else { (d as f64).sqrt() })
                    .collect()
            })
        })
        .collect();

    let cost = |k: usize, j: usize, i: usize| -> f64 {
        match &dist[j] {
            Some(d) => d[i] + lambda * channel_distance(k, j, q),
            None => f64::INFINITY,
        }
    };
    let mut data = vec![max_value; q * w * h];
    let mut src = vec![usize::MAX; q];
    for i in 0..w * h {
        // Circular propagation of the best source channel; values are always
        // recomputed from the source so they match the direct definition.
        for k in 0..q {
            src[k] = if dist[k].is_some() { k } else { usize::MAX };
        }
        let value = |k: usize, s: usize| if s == usize::MAX { f64::INFINITY } else { cost(k, s, i) };
        for _ in 0..2 {
            for step in 0..q {
                let k = (step + 1) % q;
                let prev = (k + q - 1) % q;
                if value(k, src[prev]) < value(k, src[k]) {
                    src[k] = src[prev];
                }
            }
            for step in 0..q {
                let k = (2 * q - 2 - step) % q;
                let next = (k + 1) % q;
                if value(k, src[next]) < value(k, src[k]) {
                    src[k] = src[next];
                }
            }
        }
        for k in 0..q {
            let v = value(k, src[k]);
            if v.is_finite() {
                data[k * w * h + i] = v;
            }
        }
    }
    Ok(DirectionalDistanceField {
        x0: region.min_x,
        y0: region.min_y,
        width: w,
        height: h,
        q,
        lambda,
        max_value,
        data,
    })
}

/// Template points sampled along the model's edge segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateEdges {
    pub points: Vec<Vec3>,
    /// Unit 3D direction of the segment each point was sampled from.
    pub directions: Vec<Vec3>,
}

/// Samples every template segment so that consecutive points are at most
/// `max_step_px` apart when projected at the nominal pose.
pub fn sample_template(
    model: &LampModel,
    nominal: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    max_step_px: f64,
) -> TemplateEdges {
    let mut points = Vec::new();
    let mut directions = Vec::new();
    for [a, b] in &model.edge_template {
        let d = b - a;
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        let px_len = match (project(camera, view, nominal, a), project(camera, view, nominal, b)) {
            (Ok(pa), Ok(pb)) => (pa - pb).norm(),
            _ => 0.0,
        };
        let n = ((px_len / max_step_px).ceil() as usize).max(2);
        // Interior samples only: segment endpoints are shared corners whose
        // orientation is ambiguous.
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            points.push(a + d * t);
            directions.push(d / len);
        }
    }
    TemplateEdges { points, directions }
}

// Image position and orientation channel of every template point, or None
// for points behind the camera.
fn project_template(
    template: &TemplateEdges,
    pose: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    q: usize,
) -> Vec<Option<(f64, f64, usize)>> {
    template
        .points
        .iter()
        .zip(&template.directions)
        .map(|(p, d)| {
            let c = project(camera, view, pose, p).ok()?;
            let e = 1e-3;
            let a = project(camera, view, pose, &(p - d * e)).ok()?;
            let b = project(camera, view, pose, &(p + d * e)).ok()?;
            let theta = (b.y - a.y).atan2(b.x - a.x);
            Some((c.x, c.y, orientation_channel(theta, q)))
        })
        .collect()
}

fn in_box(x: f64, y: f64, b: &BoundingBox) -> bool {
    x >= b.min_x as f64 && x <= b.max_x as f64 && y >= b.min_y as f64 && y <= b.max_y as f64
}

/// Per-point chamfer values; points outside `roi` or the image cost the
/// field maximum.
fn template_values(
    template: &TemplateEdges,
    pose: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    field: &DirectionalDistanceField,
    roi: &BoundingBox,
) -> (Vec<f64>, usize) {
    let mut visible = 0;
    let values = project_template(template, pose, camera, view, field.q)
        .into_iter()
        .map(|p| match p {
            Some((x, y, k)) => {
                if x >= 0.0 && y >= 0.0 && x <= (camera.width - 1) as f64 && y <= (camera.height - 1) as f64 {
                    visible += 1;
                }
                if in_box(x, y, roi) {
                    field.lookup(x, y, k)
                } else {
                    field.max_value
                }
            }
            None => field.max_value,
        })
        .collect();
    (values, visible)
}

/// Mean directional chamfer distance of the projected template.
pub fn fdcm_score(
    template: &TemplateEdges,
    pose: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    field: &DirectionalDistanceField,
    roi: &BoundingBox,
) -> Result<f64, ChamferError> {
    let (values, visible) = template_values(template, pose, camera, view, field, roi);
    if visible == 0 || values.is_empty() {
        return Err(ChamferError::NoVisibleTemplate);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Bounding box grown by `fraction` of its size in total (half per side),
/// at least `min_margin` pixels per side, clipped to the image.
pub fn dilate_roi(bbox: &BoundingBox, fraction: f64, min_margin: u32, width: u32, height: u32) -> BoundingBox {
    let mx = ((bbox.width() as f64 * fraction / 2.0).ceil() as u32).max(min_margin);
    let my = ((bbox.height() as f64 * fraction / 2.0).ceil() as u32).max(min_margin);
    BoundingBox {
        min_x: bbox.min_x.saturating_sub(mx),
        min_y: bbox.min_y.saturating_sub(my),
        max_x: (bbox.max_x + mx).min(width.saturating_sub(1)),
        max_y: (bbox.max_y + my).min(height.saturating_sub(1)),
    }
}

/// Default total ROI growth over the shape bounding box.
pub const ROI_DILATION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelChoice {
    pub index: usize,
    pub model_id: String,
    pub score: f64,
    /// Score of every model in database order (`None` when not visible).
    pub scores: Vec<Option<f64>>,
}

/// Scores every model template at the candidate pose; lowest score wins,
/// ties go to the lower index.
pub fn select_model(
    pose: &RigidTransform,
    db: &[LampModel],
    field: &DirectionalDistanceField,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    roi: &BoundingBox,
    max_step_px: f64,
) -> Option<ModelChoice> {
    let scores: Vec<Option<f64>> = db
        .iter()
        .map(|m| {
            let t = sample_template(m, pose, camera, view, max_step_px);
            fdcm_score(&t, pose, camera, view, field, roi).ok()
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s < b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(index, score)| ModelChoice { index, model_id: db[index].id.clone(), score, scores })
}

/// Chamfer residuals (one field lookup per template point).
pub struct ChamferProblem<'a> {
    pub template: &'a TemplateEdges,
    pub field: &'a DirectionalDistanceField,
    pub camera: &'a CameraIntrinsics,
    pub view: &'a RigidTransform,
    pub roi: BoundingBox,
    pub frame: Option<AlignmentFrame>,
}

impl ChamferProblem<'_> {
    pub fn transform(&self, x: &[f64]) -> RigidTransform {
        let local = pose_from_params(x);
        match &self.frame {
            Some(f) => f.transform * local,
            None => local,
        }
    }
}

impl ResidualProblem for ChamferProblem<'_> {
    fn n_params(&self) -> usize {
        6
    }

    fn n_residuals(&self) -> usize {
        self.template.points.len()
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        template_values(self.template, &self.transform(x), self.camera, self.view, self.field, &self.roi).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: RigidTransform,
    pub score: f64,
    pub record: SolveRecord,
}

/// Direct chamfer refinement. Constrained mode optimises `(w_z, t)` in the
/// alignment frame and so never leaves the plane-aligned manifold.
#[allow(clippy::too_many_arguments)]
pub fn refine_d2co(
    pose: &RigidTransform,
    template: &TemplateEdges,
    field: &DirectionalDistanceField,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
    roi: &BoundingBox,
    alignment: &AlignmentFrame,
    constrained: bool,
    lm: &LmOptions,
) -> Result<Refinement, ChamferError> {
    let problem = ChamferProblem {
        template,
        field,
        camera,
        view,
        roi: *roi,
        frame: constrained.then_some(*alignment),
    };
    let (x0, mask) = if constrained {
        (constrained_params(pose, alignment), CONSTRAINED_MASK)
    } else {
        (pose_to_params(pose), UNCONSTRAINED_MASK)
    };
    let res = lm_minimize(&problem, &x0, &mask, lm)?;
    let refined = problem.transform(&res.x);
    let score = fdcm_score(template, &refined, camera, view, field, roi)?;
    Ok(Refinement {
        pose: refined,
        score,
        record: SolveRecord { purpose: SolvePurpose::Refinement, n_params: 6, n_free: res.n_free, constrained },
    })
}

/// Keeps detections whose chamfer score is at most `threshold`.
pub fn score_filter(detections: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    detections.into_iter().filter(|d| d.chamfer_score <= threshold).collect()
}
