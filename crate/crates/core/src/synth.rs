//! Synthetic ceiling-lamp scenes: walking trajectories, rendering with
//! exact ground truth, and dataset files.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bim::{reference_plane, BimError, BuildingModel, CeilingSurface, MountingKind};
use crate::cluster::{ReferenceLamp, ReferenceSet};
use crate::filter::LampState;
use crate::geom::{alignment_rotation, camera_center, project, rodrigues, CameraIntrinsics, Mat3, Pixel, RigidTransform, RotVec, Vec3};
use crate::pose::{outline_points, FaceShape, LampModel, PoseError};
use crate::shapes::{polygon_pixels, shoelace_area, GrayImage, ShapeError};

pub const ON_INTENSITY: u8 = 255;
pub const OFF_INTENSITY: u8 = 60;
/// Smallest projected face area recorded as visible, pixels squared.
pub const MIN_VISIBLE_AREA: f64 = 50.0;
/// Visible lamps keep this many pixels clear of the image border.
pub const VISIBLE_MARGIN: f64 = 2.0;
const OUTLINE_SAMPLES: usize = 256;
/// Contour jitter is a smooth offset interpolated between this many
/// random knots spread evenly along the outline.
const JITTER_KNOTS: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("trajectory path is degenerate")]
    InvalidPath,
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Bim(#[from] BimError),
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Polyline in the floor plane, meters.
    pub path: Vec<[f64; 2]>,
    /// Meters per second.
    pub speed: f64,
    pub frame_rate: f64,
    /// Camera height above the floor, meters.
    pub height: f64,
    /// Optical axis elevation above the horizontal, degrees.
    pub pitch_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self { path: vec![[0.0, 0.0], [10.0, 0.0]], speed: 1.0, frame_rate: 10.0, height: 1.5, pitch_deg: 60.0 }
    }
}

impl TrajectorySpec {
    /// The same walk cut short so that it yields at most `frames` views.
    pub fn truncated(&self, frames: usize) -> Result<Self, SynthError> {
        if frames == 0 || !(self.speed > 0.0) || !(self.frame_rate > 0.0) {
            return Err(SynthError::InvalidPath);
        }
        let mut budget = (frames as f64 - 0.5) * self.speed / self.frame_rate;
        let mut path = vec![*self.path.first().ok_or(SynthError::InvalidPath)?];
        for w in self.path.windows(2) {
            let len = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            if len >= budget {
                let f = budget / len;
                path.push([w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])]);
                return Ok(Self { path, ..self.clone() });
            }
            budget -= len;
            path.push(w[1]);
        }
        Ok(self.clone())
    }
}

/// World-to-camera transform for a camera at `position` heading along
/// `heading` (radians from +x) and pitched up by `pitch` radians.
pub fn walking_view(position: Vec3, heading: f64, pitch: f64) -> RigidTransform {
    let forward = Vec3::new(heading.cos(), heading.sin(), 0.0);
    let z = forward * pitch.cos() + Vec3::z() * pitch.sin();
    let x = Vec3::new(heading.sin(), -heading.cos(), 0.0);
    let y = z.cross(&x);
    let r = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    RigidTransform { rotation: r, translation: -(r * position) }
}

/// Views sampled every `speed / frame_rate` meters along the path.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<RigidTransform>, SynthError> {
    if spec.path.len() < 2 || !(spec.speed > 0.0) || !(spec.frame_rate > 0.0) {
        return Err(SynthError::InvalidPath);
    }
    let segs: Vec<(Vec3, Vec3, f64)> = spec
        .path
        .windows(2)
        .map(|w| {
            let a = Vec3::new(w[0][0], w[0][1], 0.0);
            let b = Vec3::new(w[1][0], w[1][1], 0.0);
            (a, b, (b - a).norm())
        })
        .filter(|s| s.2 > 0.0)
        .collect();
    let length: f64 = segs.iter().map(|s| s.2).sum();
    if segs.is_empty() || !length.is_finite() {
        return Err(SynthError::InvalidPath);
    }
    let spacing = spec.speed / spec.frame_rate;
    let count = (length / spacing + 1e-9).floor() as usize + 1;
    let pitch = spec.pitch_deg.to_radians();
    let mut views = Vec::with_capacity(count);
    for i in 0..count {
        let mut s = (i as f64 * spacing).min(length);
        let mut seg = &segs[segs.len() - 1];
        for candidate in &segs {
            if s <= candidate.2 {
                seg = candidate;
                break;
            }
            s -= candidate.2;
        }
        let dir = (seg.1 - seg.0) / seg.2;
        let pos = seg.0 + dir * s.min(seg.2) + Vec3::z() * spec.height;
        views.push(walking_view(pos, dir.y.atan2(dir.x), pitch));
    }
    Ok(views)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLamp {
    pub model_id: String,
    pub pose: RigidTransform,
    pub state: LampState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub building: BuildingModel,
    pub models: Vec<LampModel>,
    pub lamps: Vec<SceneLamp>,
    pub ambient: u8,
    /// Gaussian intensity noise, grey levels.
    pub noise_sigma: f64,
    /// Gaussian displacement of the outline jitter knots, pixels.
    pub contour_jitter: f64,
    pub distractors: usize,
}

impl SceneSpec {
    pub fn model(&self, id: &str) -> Option<&LampModel> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for l in &self.lamps {
            if self.model(&l.model_id).is_none() {
                return Err(SynthError::InvalidScene(format!("unknown model {}", l.model_id)));
            }
        }
        Ok(())
    }

    pub fn references(&self) -> ReferenceSet {
        ReferenceSet {
            lamps: self
                .lamps
                .iter()
                .map(|l| ReferenceLamp { position: l.pose.translation, model: l.model_id.clone(), state: l.state })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScenePreset {
    /// Straight corridor with a line of alternating panel and round lamps.
    #[default]
    Hallway,
    /// Open room with a grid of square panels and an L-shaped walk.
    Lab,
    /// Hall with round pendants hanging below the ceiling.
    Reception,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    pub preset: ScenePreset,
    pub ceiling_height: f64,
    pub lamp_count: usize,
    pub ambient: u8,
    pub noise_sigma: f64,
    pub contour_jitter: f64,
    pub distractors: usize,
    /// Ground-truth lamp tilt away from the mounting plane, degrees.
    pub tilt_deg: f64,
    /// Every `off_every`-th lamp is off; 0 keeps all lamps on.
    pub off_every: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            preset: ScenePreset::Hallway,
            ceiling_height: 3.0,
            lamp_count: 8,
            ambient: 20,
            noise_sigma: 0.0,
            contour_jitter: 0.0,
            distractors: 0,
            tilt_deg: 0.0,
            off_every: 3,
        }
    }
}

pub fn panel_model(id: &str, sx: f64, sy: f64) -> LampModel {
    let (hx, hy) = (sx / 2.0, sy / 2.0);
    LampModel::with_outline(
        id,
        FaceShape::Polygon(vec![
            Vec3::new(-hx, -hy, 0.0),
            Vec3::new(hx, -hy, 0.0),
            Vec3::new(hx, hy, 0.0),
            Vec3::new(-hx, hy, 0.0),
        ]),
        MountingKind::Embedded,
    )
    .expect("panel model is valid")
}

pub fn round_model(id: &str, radius: f64, mounting: MountingKind) -> LampModel {
    LampModel::with_outline(id, FaceShape::Circle(radius), mounting).expect("round model is valid")
}

fn flat_ceiling(x0: f64, y0: f64, x1: f64, y1: f64, z: f64) -> CeilingSurface {
    CeilingSurface::new(
        vec![Vec3::new(x0, y0, z), Vec3::new(x1, y0, z), Vec3::new(x1, y1, z), Vec3::new(x0, y1, z)],
        -Vec3::z(),
    )
    .expect("flat ceiling is valid")
}

fn tilt(rng: &mut impl Rng, deg: f64) -> Mat3 {
    if deg == 0.0 {
        return Mat3::identity();
    }
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    rodrigues(&RotVec::new(a.cos() * deg.to_radians(), a.sin() * deg.to_radians(), 0.0))
}

fn mount(building: &BuildingModel, model: &LampModel, xy: [f64; 2], yaw: f64, tilt_rot: Mat3) -> Result<RigidTransform, SynthError> {
    let probe = Vec3::new(xy[0], xy[1], 10.0);
    let plane = reference_plane(building, &probe, model.mounting)?;
    let z = match model.mounting {
        MountingKind::Embedded => {
            let c = building.ceilings[building.nearest_ceiling(&probe).expect("embedded lamp needs a ceiling")].plane();
            c.point.z + (c.point.x - xy[0]) * c.normal.x / c.normal.z + (c.point.y - xy[1]) * c.normal.y / c.normal.z
        }
        MountingKind::Hanging { .. } => plane.point.z,
    };
    let frame = alignment_rotation(&plane.normal).map_err(PoseError::from)?;
    let r = frame.transform.rotation * tilt_rot * rodrigues(&RotVec::new(0.0, 0.0, yaw));
    Ok(RigidTransform { rotation: r, translation: Vec3::new(xy[0], xy[1], z) })
}

/// Scene and matching walk for a preset. Lamp tilts come from `seed`.
pub fn preset_scene(opts: &SceneOptions, seed: u64) -> Result<(SceneSpec, TrajectorySpec), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = opts.ceiling_height;
    let n = opts.lamp_count.max(1);
    let state = |i: usize| if opts.off_every > 0 && i % opts.off_every == opts.off_every - 1 { LampState::Off } else { LampState::On };
    let (building, models, placements, path): (BuildingModel, Vec<LampModel>, Vec<(usize, [f64; 2], f64)>, Vec<[f64; 2]>) =
        match opts.preset {
            ScenePreset::Hallway => {
                let spacing = 2.5;
                let length = 2.0 + spacing * n as f64 + 1.0;
                let building = BuildingModel::new("hallway", vec![flat_ceiling(-2.0, -2.0, length + 2.0, 2.0, h)])?;
                let models = vec![panel_model("panel", 0.6, 0.6), round_model("downlight", 0.2, MountingKind::Embedded)];
                let placements = (0..n)
                    .map(|i| (i % 2, [2.5 + spacing * i as f64, if i % 2 == 0 { 0.35 } else { -0.35 }], 0.15 * i as f64))
                    .collect();
                (building, models, placements, vec![[0.0, 0.0], [length - 2.5, 0.0]])
            }
            ScenePreset::Lab => {
                let cols = n.div_ceil(2);
                let width = 2.0 * cols as f64 + 2.0;
                let building = BuildingModel::new("lab", vec![flat_ceiling(-2.0, -3.0, width + 2.0, 3.0, h)])?;
                let models = vec![panel_model("panel", 0.6, 0.6), panel_model("strip", 1.2, 0.3)];
                let placements = (0..n)
                    .map(|i| {
                        let (c, r) = (i / 2, i % 2);
                        ((c + r) % 2, [2.0 + 2.0 * c as f64, if r == 0 { 1.0 } else { -1.0 }], 0.0)
                    })
                    .collect();
                (building, models, placements, vec![[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, 2.0]])
            }
            ScenePreset::Reception => {
                let spacing = 2.5;
                let length = 2.0 + spacing * n as f64 + 1.0;
                let building = BuildingModel::new("reception", vec![flat_ceiling(-2.0, -3.0, length + 2.0, 3.0, h)])?;
                let models = vec![round_model("pendant", 0.25, MountingKind::Hanging { offset: 0.5 })];
                let placements = (0..n).map(|i| (0, [2.5 + spacing * i as f64, if i % 2 == 0 { 0.3 } else { -0.3 }], 0.0)).collect();
                (building, models, placements, vec![[0.0, 0.0], [length - 2.5, 0.0]])
            }
        };
    let mut lamps = Vec::with_capacity(placements.len());
    for (i, (m, xy, yaw)) in placements.into_iter().enumerate() {
        let t = tilt(&mut rng, opts.tilt_deg);
        let pose = mount(&building, &models[m], xy, yaw, t)?;
        lamps.push(SceneLamp { model_id: models[m].id.clone(), pose, state: state(i) });
    }
    let scene = SceneSpec {
        building,
        models,
        lamps,
        ambient: opts.ambient,
        noise_sigma: opts.noise_sigma,
        contour_jitter: opts.contour_jitter,
        distractors: opts.distractors,
    };
    Ok((scene, TrajectorySpec { path, ..TrajectorySpec::default() }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleLamp {
    /// Index into the scene lamp list.
    pub lamp: usize,
    pub model_id: String,
    pub pose: RigidTransform,
    pub state: LampState,
    pub projected_area: f64,
    pub centroid: Pixel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image: GrayImage,
    pub view: RigidTransform,
    pub visible: Vec<VisibleLamp>,
    /// Number of distractor blobs drawn.
    pub distractors: usize,
}

fn face_outline(model: &LampModel) -> Vec<Vec3> {
    match &model.face {
        FaceShape::Circle(_) => outline_points(&model.face, OUTLINE_SAMPLES),
        FaceShape::Polygon(v) => {
            let per_edge = OUTLINE_SAMPLES / v.len();
            let mut out = Vec::new();
            for i in 0..v.len() {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                for k in 0..per_edge {
                    out.push(a + (b - a) * (k as f64 / per_edge as f64));
                }
            }
            out
        }
    }
}

fn project_outline(
    model: &LampModel,
    pose: &RigidTransform,
    camera: &CameraIntrinsics,
    view: &RigidTransform,
) -> Option<Vec<Pixel>> {
    face_outline(model).iter().map(|p| project(camera, view, pose, p).ok()).collect()
}

fn polygon_centroid(poly: &[Pixel]) -> Pixel {
    let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        let c = p.x * q.y - q.x * p.y;
        a2 += c;
        cx += (p.x + q.x) * c;
        cy += (p.y + q.y) * c;
    }
    Pixel::new(cx / (3.0 * a2), cy / (3.0 * a2))
}

fn inside_image(poly: &[Pixel], camera: &CameraIntrinsics, margin: f64) -> bool {
    poly.iter().all(|p| {
        p.x >= margin && p.y >= margin && p.x <= camera.width as f64 - 1.0 - margin && p.y <= camera.height as f64 - 1.0 - margin
    })
}

fn distractor_polygon(rng: &mut impl Rng, camera: &CameraIntrinsics) -> Vec<Pixel> {
    let r_mean: f64 = rng.random_range(7.0..16.0);
    let cx = rng.random_range(r_mean * 1.6..camera.width as f64 - r_mean * 1.6);
    let cy = rng.random_range(r_mean * 1.6..camera.height as f64 - r_mean * 1.6);
    let k = rng.random_range(5..9);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    (0..k)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / k as f64;
            // Alternate long and short spokes so the blob is neither round
            // nor a clean polygon.
            let r = r_mean * if i % 2 == 0 { rng.random_range(1.1..1.5) } else { rng.random_range(0.5..0.8) };
            Pixel::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

/// Rasterises one frame. `rng` drives noise, jitter and distractors.
pub fn render_frame(
    scene: &SceneSpec,
    view: &RigidTransform,
    camera: &CameraIntrinsics,
    rng: &mut impl Rng,
) -> Result<FrameRecord, SynthError> {
    scene.validate()?;
    let mut img = GrayImage::filled(camera.width, camera.height, scene.ambient);
    let mut occupied = vec![false; (camera.width * camera.height) as usize];
    let mut visible = Vec::new();
    let jitter = Normal::new(0.0, scene.contour_jitter.max(0.0)).expect("valid sigma");
    let centre = camera_center(view);

    // Far lamps first so nearer faces overwrite them.
    let mut order: Vec<usize> = (0..scene.lamps.len()).collect();
    order.sort_by(|&a, &b| {
        let da = (scene.lamps[a].pose.translation - centre).norm();
        let db = (scene.lamps[b].pose.translation - centre).norm();
        db.total_cmp(&da).then(a.cmp(&b))
    });
    for i in order {
        let lamp = &scene.lamps[i];
        let model = scene.model(&lamp.model_id).expect("validated");
        let Some(outline) = project_outline(model, &lamp.pose, camera, view) else { continue };
        let area = shoelace_area(&outline).abs();
        let mut drawn = outline.clone();
        if scene.contour_jitter > 0.0 {
            let knots: Vec<(f64, f64)> = (0..JITTER_KNOTS).map(|_| (jitter.sample(rng), jitter.sample(rng))).collect();
            let n = drawn.len();
            for (i, p) in drawn.iter_mut().enumerate() {
                let t = i as f64 * JITTER_KNOTS as f64 / n as f64;
                let k = t.floor() as usize;
                let f = t - k as f64;
                let (a, b) = (knots[k % JITTER_KNOTS], knots[(k + 1) % JITTER_KNOTS]);
                p.x += a.0 + f * (b.0 - a.0);
                p.y += a.1 + f * (b.1 - a.1);
            }
        }
        let value = match lamp.state {
            LampState::On => ON_INTENSITY,
            LampState::Off => OFF_INTENSITY,
        };
        for (x, y) in polygon_pixels(&drawn, camera.width, camera.height) {
            img.set(x, y, value);
            occupied[(y * camera.width + x) as usize] = true;
        }
        if area >= MIN_VISIBLE_AREA && inside_image(&outline, camera, VISIBLE_MARGIN) {
            visible.push(VisibleLamp {
                lamp: i,
                model_id: lamp.model_id.clone(),
                pose: lamp.pose,
                state: lamp.state,
                projected_area: area,
                centroid: polygon_centroid(&outline),
            });
        }
    }
    visible.sort_by_key(|v| v.lamp);

    let mut placed = 0;
    let mut attempts = 0;
    while placed < scene.distractors && attempts < 200 * scene.distractors.max(1) {
        attempts += 1;
        let poly = distractor_polygon(rng, camera);
        let pixels = polygon_pixels(&poly, camera.width, camera.height);
        // Keep a 2 px moat so distractors never merge with lamps or each other.
        let clear = pixels.iter().all(|&(x, y)| {
            let (x0, y0) = (x.saturating_sub(2), y.saturating_sub(2));
            let (x1, y1) = ((x + 2).min(camera.width - 1), (y + 2).min(camera.height - 1));
            (y0..=y1).all(|v| (x0..=x1).all(|u| !occupied[(v * camera.width + u) as usize]))
        });
        if !clear || pixels.len() < 120 {
            continue;
        }
        for &(x, y) in &pixels {
            img.set(x, y, ON_INTENSITY);
        }
        for &(x, y) in &pixels {
            occupied[(y * camera.width + x) as usize] = true;
        }
        placed += 1;
    }

    if scene.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, scene.noise_sigma).expect("valid sigma");
        for v in img.data_mut() {
            *v = (*v as f64 + noise.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(FrameRecord { image: img, view: *view, visible, distractors: placed })
}

/// Generator for frame `index`: one ChaCha stream per frame.
pub fn frame_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

pub fn render_sequence(
    scene: &SceneSpec,
    views: &[RigidTransform],
    camera: &CameraIntrinsics,
    seed: u64,
) -> Result<Vec<FrameRecord>, SynthError> {
    views.par_iter().enumerate().map(|(i, v)| render_frame(scene, v, camera, &mut frame_rng(seed, i))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub file: String,
    pub view: RigidTransform,
    pub visible: Vec<VisibleLamp>,
}

/// Contents of `poses.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub camera: CameraIntrinsics,
    pub frames: Vec<FrameEntry>,
}

impl PoseFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let text = read(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| SynthError::InvalidScene(e.to_string()))
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

fn read(path: &Path) -> Result<String, SynthError> {
    std::fs::read_to_string(path).map_err(|e| SynthError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn write(path: &Path, text: &str) -> Result<(), SynthError> {
    std::fs::write(path, text).map_err(|e| SynthError::Io { path: path.display().to_string(), message: e.to_string() })
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub images: PathBuf,
    pub poses: PathBuf,
    pub models: PathBuf,
    pub building: PathBuf,
    pub references: PathBuf,
    pub scene: PathBuf,
    pub trajectory: PathBuf,
}

impl DatasetPaths {
    pub fn under(dir: &Path) -> Self {
        DatasetPaths {
            images: dir.join("frames"),
            poses: dir.join("poses.json"),
            models: dir.join("models.json"),
            building: dir.join("building.json"),
            references: dir.join("references.json"),
            scene: dir.join("scene.json"),
            trajectory: dir.join("trajectory.json"),
        }
    }
}

/// Renders the walk and writes frames plus every side file into `dir`.
pub fn write_dataset(
    dir: &Path,
    scene: &SceneSpec,
    trajectory: &TrajectorySpec,
    camera: &CameraIntrinsics,
    seed: u64,
) -> Result<DatasetPaths, SynthError> {
    let paths = DatasetPaths::under(dir);
    std::fs::create_dir_all(&paths.images)
        .map_err(|e| SynthError::Io { path: paths.images.display().to_string(), message: e.to_string() })?;
    let views = generate_trajectory(trajectory)?;
    let frames = render_sequence(scene, &views, camera, seed)?;
    let mut entries = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = frame_file_name(i);
        f.image.write_pgm(paths.images.join(&name))?;
        entries.push(FrameEntry { index: i, file: name, view: f.view, visible: f.visible.clone() });
    }
    write(&paths.poses, &pretty(&PoseFile { camera: *camera, frames: entries }))?;
    write(&paths.models, &pretty(&scene.models))?;
    write(&paths.building, &scene.building.to_json())?;
    write(&paths.references, &scene.references().to_json())?;
    write(&paths.scene, &pretty(scene))?;
    write(&paths.trajectory, &pretty(trajectory))?;
    Ok(paths)
}

fn pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("dataset values serialize")
}
