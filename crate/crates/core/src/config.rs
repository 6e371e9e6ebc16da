//! TOML pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chamfer::ROI_DILATION;
use crate::cluster::CLUSTER_RADIUS;
use crate::filter::{THRESHOLD_CIRCULAR, THRESHOLD_POLYGONAL};
use crate::geom::CameraIntrinsics;
use crate::optim::LmOptions;
use crate::pose::PrefilterLimits;
use crate::shapes::SHAPE_RATIO_THRESHOLD;
use crate::synth::{DatasetPaths, SceneOptions, TrajectorySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unconstrained,
    FilterOnly,
    #[default]
    FilterAndAlignment,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Unconstrained, Mode::FilterOnly, Mode::FilterAndAlignment];

    pub fn constrained(self) -> bool {
        self == Mode::FilterAndAlignment
    }

    pub fn filters(self) -> bool {
        self != Mode::Unconstrained
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unconstrained => "unconstrained",
            Mode::FilterOnly => "filter_only",
            Mode::FilterAndAlignment => "filter_and_alignment",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Input locations. Unset entries fall back to the dataset layout under
/// `data_dir`; relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub models: Option<PathBuf>,
    pub building: Option<PathBuf>,
    pub references: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPaths {
    pub images: PathBuf,
    pub poses: PathBuf,
    pub models: PathBuf,
    pub building: PathBuf,
    pub references: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub threshold: u8,
    pub min_area: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { threshold: 220, min_area: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapeConfig {
    pub ratio_threshold: f64,
    /// Douglas-Peucker tolerance relative to the blob's bounding-box diagonal.
    pub simplify_fraction: f64,
    pub simplify_min_px: f64,
    pub corner_shift_px: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        Self { ratio_threshold: SHAPE_RATIO_THRESHOLD, simplify_fraction: 0.04, simplify_min_px: 2.0, corner_shift_px: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    pub prefilter: PrefilterLimits,
    pub max_iterations: usize,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self { prefilter: PrefilterLimits::default(), max_iterations: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChamferConfig {
    pub q: usize,
    pub lambda: f64,
    pub grad_threshold: f64,
    pub score_threshold: f64,
    pub roi_dilation: f64,
    pub roi_min_margin: u32,
    pub template_step_px: f64,
    pub refine_iterations: usize,
}

impl Default for ChamferConfig {
    fn default() -> Self {
        Self {
            q: 60,
            lambda: 100.0,
            grad_threshold: 60.0,
            score_threshold: 1.5,
            roi_dilation: ROI_DILATION,
            roi_min_margin: 4,
            template_step_px: 2.0,
            refine_iterations: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprojectionConfig {
    pub threshold_polygonal: f64,
    pub threshold_circular: f64,
}

impl Default for ReprojectionConfig {
    fn default() -> Self {
        Self { threshold_polygonal: THRESHOLD_POLYGONAL, threshold_circular: THRESHOLD_CIRCULAR }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateConfig {
    pub on_threshold: u8,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self { on_threshold: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub radius: f64,
    pub match_radius: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { radius: CLUSTER_RADIUS, match_radius: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub scene: SceneOptions,
    /// Overrides the preset walk when set.
    pub trajectory: Option<TrajectorySpec>,
    /// Truncates the walk to this many frames when set.
    pub frames: Option<usize>,
    pub camera: CameraIntrinsics,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: SceneOptions::default(),
            trajectory: None,
            frames: None,
            camera: CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).expect("default camera"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub blobs: BlobConfig,
    pub shapes: ShapeConfig,
    pub pose: PoseConfig,
    pub chamfer: ChamferConfig,
    pub reprojection: ReprojectionConfig,
    pub state: StateConfig,
    pub cluster: ClusterConfig,
    pub synth: SynthConfig,
    /// Directory holding the config file; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), String> {
        let c = &self.chamfer;
        if c.q == 0 || !(c.lambda >= 0.0) || !(c.template_step_px > 0.0) || !(c.roi_dilation >= 0.0) {
            return Err("chamfer: q ≥ 1, lambda ≥ 0, template_step_px > 0 and roi_dilation ≥ 0 required".into());
        }
        if !(self.cluster.radius > 0.0 && self.cluster.match_radius > 0.0) {
            return Err("cluster: radius and match_radius must be positive".into());
        }
        let r = &self.reprojection;
        if !(r.threshold_polygonal > 0.0 && r.threshold_circular > 0.0) {
            return Err("reprojection: thresholds must be positive".into());
        }
        let s = &self.shapes;
        if !(s.simplify_fraction >= 0.0 && s.simplify_min_px > 0.0 && s.ratio_threshold > 0.0) {
            return Err("shapes: invalid simplification or ratio settings".into());
        }
        self.synth.camera.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolved_paths(&self) -> ResolvedPaths {
        let data = self.resolve(self.paths.data_dir.as_deref().unwrap_or(Path::new(".")));
        let d = DatasetPaths::under(&data);
        let pick = |o: &Option<PathBuf>, fallback: PathBuf| o.as_ref().map(|p| self.resolve(p)).unwrap_or(fallback);
        ResolvedPaths {
            images: pick(&self.paths.images, d.images),
            poses: pick(&self.paths.poses, d.poses),
            models: pick(&self.paths.models, d.models),
            building: pick(&self.paths.building, d.building),
            references: pick(&self.paths.references, d.references),
        }
    }

    pub fn lm(&self) -> LmOptions {
        LmOptions { max_iterations: self.pose.max_iterations, ..LmOptions::default() }
    }

    pub fn refine_lm(&self) -> LmOptions {
        LmOptions { max_iterations: self.chamfer.refine_iterations, ..LmOptions::default() }
    }

    /// Settings for rendered scenes: a blob threshold between the ambient
    /// level and the off-lamp intensity so dark lamps are also extracted.
    pub fn synthetic() -> Self {
        let mut cfg = Self::default();
        cfg.blobs.threshold = 40;
        cfg
    }
}
