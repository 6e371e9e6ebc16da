//! Bright-blob extraction and shape simplification.
//!
//! Frames are thresholded into 8-connected blobs, each blob's outer boundary
//! is traced, and the boundary is routed to a polygonal or elliptical
//! description depending on its isoperimetric ratio.

mod contour;
mod ellipse;

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use contour::{
    classify_shape, isoperimetric_ratio, refine_corners, shoelace_area, simplify_polygon, trace_contour, Contour,
    ShapeClass, SHAPE_RATIO_THRESHOLD,
};
pub use ellipse::{fit_ellipse, Ellipse};

use crate::geom::Pixel;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("blob has no enclosed area")]
    DegenerateBlob,
    #[error("polygon simplification kept only {0} vertices")]
    TooFewVertices(usize),
    #[error("ellipse fit failed: {0}")]
    EllipseFitFailure(String),
    #[error("image data length {got} does not match {width}x{height}")]
    BadImage { width: u32, height: u32, got: usize },
    #[error("image io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ShapeError> {
        if data.len() != width as usize * height as usize {
            return Err(ShapeError::BadImage { width, height, got: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self { width, height, data: vec![value; width as usize * height as usize] }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    /// Reads a binary 8-bit PGM (P5) file.
    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self, ShapeError> {
        let img = image::ImageReader::open(path.as_ref())
            .map_err(|e| ShapeError::Io(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| ShapeError::Io(e.to_string()))?
            .decode()
            .map_err(|e| ShapeError::Io(e.to_string()))?;
        let luma = img.into_luma8();
        let (w, h) = luma.dimensions();
        Self::new(w, h, luma.into_raw())
    }

    /// Writes a binary 8-bit PGM (P5) file.
    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), ShapeError> {
        let file = std::fs::File::create(path.as_ref()).map_err(|e| ShapeError::Io(e.to_string()))?;
        let mut writer = std::io::BufWriter::new(file);
        let encoder = image::codecs::pnm::PnmEncoder::new(&mut writer)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary));
        image::ImageEncoder::write_image(encoder, &self.data, self.width, self.height, image::ExtendedColorType::L8)
            .map_err(|e| ShapeError::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: u32,
    pub min_y: u32,
    pub max_x: u32,
    pub max_y: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.max_x - self.min_x + 1
    }

    pub fn height(&self) -> u32 {
        self.max_y - self.min_y + 1
    }
}

/// 8-connected component of bright pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    /// Pixel coordinates in discovery order; the first one is the top-most,
    /// left-most pixel of the component.
    pub pixels: Vec<(u32, u32)>,
    pub bbox: BoundingBox,
    pub mean_intensity: f64,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> Pixel {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
        Pixel::new(sx / n, sy / n)
    }

    /// Blob membership as a mask over the bounding box padded by one pixel.
    pub(crate) fn mask(&self) -> BlobMask {
        let w = self.bbox.width() as usize + 2;
        let h = self.bbox.height() as usize + 2;
        let mut data = vec![false; w * h];
        for &(x, y) in &self.pixels {
            let lx = (x - self.bbox.min_x) as usize + 1;
            let ly = (y - self.bbox.min_y) as usize + 1;
            data[ly * w + lx] = true;
        }
        BlobMask { w, h, ox: self.bbox.min_x as i64 - 1, oy: self.bbox.min_y as i64 - 1, data }
    }
}

pub(crate) struct BlobMask {
    pub w: usize,
    pub h: usize,
    pub ox: i64,
    pub oy: i64,
    pub data: Vec<bool>,
}

impl BlobMask {
    #[inline]
    pub fn at(&self, lx: i64, ly: i64) -> bool {
        lx >= 0 && ly >= 0 && (lx as usize) < self.w && (ly as usize) < self.h && self.data[ly as usize * self.w + lx as usize]
    }
}

/// Connected components (8-neighbourhood) of pixels `>= threshold` with at
/// least `min_area` pixels, largest first.
pub fn extract_blobs(img: &GrayImage, intensity_threshold: u8, min_area: usize) -> Vec<Blob> {
    let w = img.width as usize;
    let h = img.height as usize;
    let mut visited = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if visited[start] || img.data[start] < intensity_threshold {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        let mut sum = 0u64;
        let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            sum += img.data[idx] as u64;
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if !visited[n] && img.data[n] >= intensity_threshold {
                        visited[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        if pixels.len() >= min_area {
            let mean_intensity = sum as f64 / pixels.len() as f64;
            blobs.push(Blob {
                pixels,
                bbox: BoundingBox { min_x: min_x as u32, min_y: min_y as u32, max_x: max_x as u32, max_y: max_y as u32 },
                mean_intensity,
            });
        }
    }
    // Stable: equal areas keep raster discovery order.
    blobs.sort_by(|a, b| b.pixels.len().cmp(&a.pixels.len()));
    blobs
}

/// Pixels whose centres fall inside a simple polygon (even-odd rule),
/// clipped to the image.
pub fn polygon_pixels(poly: &[Pixel], width: u32, height: u32) -> Vec<(u32, u32)> {
    let n = poly.len();
    if n < 3 || width == 0 || height == 0 {
        return Vec::new();
    }
    let ymin = poly.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let ymax = poly.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).floor().min(height as f64 - 1.0);
    if !(ymin <= ymax) {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut xs = Vec::new();
    for y in ymin as u32..=ymax as u32 {
        let yc = y as f64;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            if (a.y <= yc) != (b.y <= yc) {
                xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let x0 = pair[0].ceil().max(0.0);
            let x1 = pair[1].floor().min(width as f64 - 1.0);
            if x0 <= x1 {
                for x in x0 as u32..=x1 as u32 {
                    out.push((x, y));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Polygonal { vertices: Vec<[f64; 2]> },
    Circular { ellipse: Ellipse },
}

/// Simplified image shape feeding the pose estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeObservation {
    pub kind: ShapeKind,
    /// Shape area in pixels squared.
    pub area: f64,
    pub bbox: BoundingBox,
    /// Sub-pixel boundary samples of the source blob.
    #[serde(skip)]
    pub boundary: Vec<Pixel>,
}

impl ShapeObservation {
    pub fn polygon(vertices: Vec<Pixel>, bbox: BoundingBox, boundary: Vec<Pixel>) -> Result<Self, ShapeError> {
        if vertices.len() < 4 {
            return Err(ShapeError::TooFewVertices(vertices.len()));
        }
        let area = shoelace_area(&vertices).abs();
        Ok(Self { kind: ShapeKind::Polygonal { vertices: vertices.iter().map(|p| [p.x, p.y]).collect() }, area, bbox, boundary })
    }

    pub fn ellipse(ellipse: Ellipse, bbox: BoundingBox, boundary: Vec<Pixel>) -> Self {
        let area = std::f64::consts::PI * ellipse.semi_major * ellipse.semi_minor;
        Self { kind: ShapeKind::Circular { ellipse }, area, bbox, boundary }
    }

    pub fn is_circular(&self) -> bool {
        matches!(self.kind, ShapeKind::Circular { .. })
    }

    pub fn vertices(&self) -> Option<Vec<Pixel>> {
        match &self.kind {
            ShapeKind::Polygonal { vertices } => Some(vertices.iter().map(|v| Pixel::new(v[0], v[1])).collect()),
            ShapeKind::Circular { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn draw_rect(img: &mut GrayImage, x0: u32, y0: u32, w: u32, h: u32, v: u8) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                img.set(x, y, v);
            }
        }
    }

    // Independent oracle: union-find labelling over the 8-neighbourhood.
    fn count_components(img: &GrayImage, thr: u8) -> Vec<usize> {
        let w = img.width as usize;
        let n = img.data.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut Vec<usize>, i: usize) -> usize {
            let mut r = i;
            while p[r] != r {
                r = p[r];
            }
            p[i] = r;
            r
        }
        for i in 0..n {
            if img.data[i] < thr {
                continue;
            }
            let (x, y) = (i % w, i / w);
            for (dx, dy) in [(-1i64, -1i64), (0, -1), (1, -1), (-1, 0)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if img.data[j] >= thr {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
        let mut sizes = std::collections::BTreeMap::new();
        for i in 0..n {
            if img.data[i] >= thr {
                *sizes.entry(find(&mut parent, i)).or_insert(0usize) += 1;
            }
        }
        let mut v: Vec<usize> = sizes.into_values().collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v
    }

    #[test]
    fn black_image_has_no_blobs() {
        assert!(extract_blobs(&GrayImage::filled(64, 48, 0), 200, 50).is_empty());
    }

    #[test]
    fn single_square() {
        let mut img = GrayImage::filled(64, 64, 0);
        draw_rect(&mut img, 10, 12, 20, 20, 255);
        let blobs = extract_blobs(&img, 200, 50);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area(), 400);
        assert_eq!(blobs[0].bbox, BoundingBox { min_x: 10, min_y: 12, max_x: 29, max_y: 31 });
        assert_eq!(blobs[0].mean_intensity, 255.0);
    }

    #[test]
    fn two_squares_sorted_by_area() {
        let mut img = GrayImage::filled(100, 60, 10);
        draw_rect(&mut img, 5, 5, 10, 10, 250);
        draw_rect(&mut img, 40, 20, 30, 25, 230);
        let blobs = extract_blobs(&img, 200, 50);
        let areas: Vec<usize> = blobs.iter().map(|b| b.area()).collect();
        assert_eq!(areas, count_components(&img, 200));
        assert_eq!(areas, vec![750, 100]);
    }

    #[test]
    fn diagonal_pixels_join_and_min_area_filters() {
        let mut img = GrayImage::filled(20, 20, 0);
        img.set(3, 3, 255);
        img.set(4, 4, 255);
        img.set(15, 15, 255);
        let blobs = extract_blobs(&img, 200, 2);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area(), 2);
    }

    #[test]
    fn random_images_match_union_find() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let data: Vec<u8> = (0..40 * 30).map(|_| if rng.random_bool(0.4) { 255 } else { 0 }).collect();
            let img = GrayImage::new(40, 30, data).unwrap();
            let areas: Vec<usize> = extract_blobs(&img, 128, 1).iter().map(|b| b.area()).collect();
            assert_eq!(areas, count_components(&img, 128));
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut a = GrayImage::filled(80, 80, 0);
        draw_rect(&mut a, 10, 10, 12, 7, 255);
        draw_rect(&mut a, 30, 40, 5, 15, 255);
        let mut b = GrayImage::filled(80, 80, 0);
        draw_rect(&mut b, 17, 13, 12, 7, 255);
        draw_rect(&mut b, 37, 43, 5, 15, 255);
        let ba = extract_blobs(&a, 200, 1);
        let bb = extract_blobs(&b, 200, 1);
        assert_eq!(ba.len(), bb.len());
        for (x, y) in ba.iter().zip(&bb) {
            let mut px: Vec<(u32, u32)> = x.pixels.iter().map(|&(u, v)| (u + 7, v + 3)).collect();
            let mut py = y.pixels.clone();
            px.sort_unstable();
            py.sort_unstable();
            assert_eq!(px, py);
        }
        assert_eq!(extract_blobs(&a, 200, 1), ba);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        img.write_pgm(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(GrayImage::read_pgm(&path).unwrap(), img);
    }

    #[test]
    fn polygon_fill_counts() {
        let sq = [Pixel::new(1.5, 1.5), Pixel::new(11.5, 1.5), Pixel::new(11.5, 6.5), Pixel::new(1.5, 6.5)];
        assert_eq!(polygon_pixels(&sq, 20, 20).len(), 50);
        // Clipped by the image border.
        assert_eq!(polygon_pixels(&sq, 5, 20).len(), 15);
        let tri = [Pixel::new(0.0, 0.0), Pixel::new(100.0, 0.0), Pixel::new(0.0, 100.0)];
        let n = polygon_pixels(&tri, 200, 200).len() as f64;
        assert!((n - 5000.0).abs() < 200.0);
        assert!(polygon_pixels(&sq[..2], 20, 20).is_empty());
    }

    #[test]
    fn bad_image_length() {
        assert!(matches!(GrayImage::new(3, 3, vec![0; 8]), Err(ShapeError::BadImage { .. })));
    }
}
