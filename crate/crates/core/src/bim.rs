//! Simplified building geometry: ceiling surfaces that supply the reference
//! plane constraining lamp orientation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Plane, Vec3};

/// Maximum distance of a ceiling vertex from its supporting plane (meters).
pub const COPLANARITY_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum BimError {
    #[error("building file not found: {0}")]
    MissingFile(String),
    #[error("building schema error: {0}")]
    SchemaError(String),
    #[error("ceiling {index} is not planar (vertex off by {deviation:.3e} m)")]
    NonCoplanarSurface { index: usize, deviation: f64 },
    #[error("no ceiling available for an embedded lamp")]
    NoCeilingAvailable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MountingKind {
    Embedded,
    /// Suspended below the nearest ceiling by `offset` meters.
    Hanging { offset: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeilingSurface {
    pub vertices: Vec<Vec3>,
    /// Unit normal pointing down into the room.
    pub normal: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BuildingFile", into = "BuildingFile")]
pub struct BuildingModel {
    pub id: String,
    pub ceilings: Vec<CeilingSurface>,
}

#[derive(Clone, Serialize, Deserialize)]
struct CeilingFile {
    vertices: Vec<[f64; 3]>,
    normal: [f64; 3],
}

#[derive(Clone, Serialize, Deserialize)]
struct BuildingFile {
    id: String,
    ceilings: Vec<CeilingFile>,
}

impl CeilingSurface {
    pub fn new(vertices: Vec<Vec3>, normal: Vec3) -> Result<Self, BimError> {
        if vertices.len() < 3 {
            return Err(BimError::SchemaError("a ceiling needs at least 3 vertices".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(BimError::SchemaError("non-finite ceiling vertex".into()));
        }
        let len = normal.norm();
        if !(len > 1e-12) || !len.is_finite() {
            return Err(BimError::SchemaError("ceiling normal must be non-zero".into()));
        }
        Ok(Self { vertices, normal: normal / len })
    }

    pub fn centroid(&self) -> Vec3 {
        self.vertices.iter().sum::<Vec3>() / self.vertices.len() as f64
    }

    pub fn plane(&self) -> Plane {
        Plane { point: self.centroid(), normal: self.normal }
    }

    /// Largest vertex distance from the plane through the centroid.
    pub fn planarity_deviation(&self) -> f64 {
        let plane = self.plane();
        self.vertices.iter().map(|v| plane.signed_distance(v).abs()).fold(0.0, f64::max)
    }

    /// Closest point of the (filled) polygon to `p`.
    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let plane = self.plane();
        let projected = p - plane.normal * plane.signed_distance(p);
        if self.contains_projected(&projected) {
            return projected;
        }
        let n = self.vertices.len();
        let mut best = self.vertices[0];
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let ab = b - a;
            let t = if ab.norm_squared() > 0.0 { ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
            let q = a + ab * t;
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        (p - self.closest_point(p)).norm()
    }

    // Point-in-polygon on the plane, using the two in-plane axes.
    fn contains_projected(&self, p: &Vec3) -> bool {
        let n = self.normal;
        let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = n.cross(&helper).normalize();
        let v = n.cross(&u);
        let to2d = |q: &Vec3| (q.dot(&u), q.dot(&v));
        let (px, py) = to2d(p);
        let pts: Vec<(f64, f64)> = self.vertices.iter().map(to2d).collect();
        let mut inside = false;
        let mut j = pts.len() - 1;
        for i in 0..pts.len() {
            let (xi, yi) = pts[i];
            let (xj, yj) = pts[j];
            if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

impl TryFrom<BuildingFile> for BuildingModel {
    type Error = BimError;

    fn try_from(file: BuildingFile) -> Result<Self, BimError> {
        let ceilings = file
            .ceilings
            .into_iter()
            .map(|c| {
                CeilingSurface::new(
                    c.vertices.iter().map(|v| Vec3::new(v[0], v[1], v[2])).collect(),
                    Vec3::new(c.normal[0], c.normal[1], c.normal[2]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(file.id, ceilings)
    }
}

impl From<BuildingModel> for BuildingFile {
    fn from(b: BuildingModel) -> Self {
        BuildingFile {
            id: b.id,
            ceilings: b
                .ceilings
                .iter()
                .map(|c| CeilingFile {
                    vertices: c.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
                    normal: [c.normal.x, c.normal.y, c.normal.z],
                })
                .collect(),
        }
    }
}

impl BuildingModel {
    pub fn new(id: impl Into<String>, ceilings: Vec<CeilingSurface>) -> Result<Self, BimError> {
        for (index, c) in ceilings.iter().enumerate() {
            let deviation = c.planarity_deviation();
            if deviation > COPLANARITY_TOL {
                return Err(BimError::NonCoplanarSurface { index, deviation });
            }
        }
        Ok(Self { id: id.into(), ceilings })
    }

    pub fn from_json(text: &str) -> Result<Self, BimError> {
        let file: BuildingFile = serde_json::from_str(text).map_err(|e| BimError::SchemaError(e.to_string()))?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&BuildingFile::from(self.clone())).expect("building serialises")
    }

    pub fn nearest_ceiling(&self, p: &Vec3) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.ceilings.iter().enumerate() {
            let d = c.distance_to(p);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn load_building(path: impl AsRef<Path>) -> Result<BuildingModel, BimError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|_| BimError::MissingFile(path.display().to_string()))?;
    BuildingModel::from_json(&text)
}

/// Plane that constrains the orientation of a lamp near `world_pos`.
///
/// Embedded lamps take the nearest ceiling. Hanging lamps take a horizontal
/// plane `offset` below the nearest ceiling point, or `z = 0` when the
/// building has no ceilings.
pub fn reference_plane(building: &BuildingModel, world_pos: &Vec3, mounting: MountingKind) -> Result<Plane, BimError> {
    let nearest = building.nearest_ceiling(world_pos);
    match mounting {
        MountingKind::Embedded => {
            let i = nearest.ok_or(BimError::NoCeilingAvailable)?;
            Ok(building.ceilings[i].plane())
        }
        MountingKind::Hanging { offset } => {
            let height = match nearest {
                Some(i) => building.ceilings[i].closest_point(world_pos).z - offset,
                None => 0.0,
            };
            Ok(Plane { point: Vec3::new(world_pos.x, world_pos.y, height), normal: Vec3::z() })
        }
    }
}
