use std::collections::VecDeque;

use super::{Blob, BlobMask, BoundingBox, ShapeError};
use crate::geom::Pixel;

/// Isoperimetric ratio `P^2 / A` separating circular from polygonal shapes.
/// It sits between the circle's `4 pi` and the square's 16.
pub const SHAPE_RATIO_THRESHOLD: f64 = 14.0;

// Clockwise on screen (y down), starting east.
const DIRS: [(i64, i64); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

/// Outer boundary of a blob.
#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    /// Boundary pixel centres in tracing order (clockwise on screen, positive
    /// signed area). The first point is repeated implicitly.
    pub points: Vec<Pixel>,
    /// Midpoints between each exterior boundary pixel and its outside
    /// 4-neighbours; unbiased samples of the true shape outline.
    pub boundary: Vec<Pixel>,
    /// Perimeter of the shape outline in pixels.
    pub perimeter: f64,
    /// Enclosed area in pixels squared.
    pub area: f64,
    pub bbox: BoundingBox,
}

/// Signed shoelace area; positive when the points turn from +x towards +y
/// (clockwise on screen, where y points down).
pub fn shoelace_area(points: &[Pixel]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        s += a.x * b.y - b.x * a.y;
    }
    0.5 * s
}

// Chain length with the Vossepoel-Smeulders correction for even, odd and
// corner codes, which removes most of the digitisation bias.
fn corrected_chain_length(codes: &[usize]) -> f64 {
    let n = codes.len();
    let mut even = 0usize;
    let mut odd = 0usize;
    let mut corners = 0usize;
    for i in 0..n {
        if codes[i] % 2 == 0 {
            even += 1;
        } else {
            odd += 1;
        }
        if codes[i] != codes[(i + 1) % n] {
            corners += 1;
        }
    }
    0.980 * even as f64 + 1.406 * odd as f64 - 0.091 * corners as f64
}

pub fn trace_contour(blob: &Blob) -> Result<Contour, ShapeError> {
    let mask = blob.mask();
    let &(sx, sy) = blob.pixels.first().ok_or(ShapeError::DegenerateBlob)?;
    let start = (sx as i64 - mask.ox, sy as i64 - mask.oy);

    let mut points = vec![start];
    let mut codes = Vec::new();
    let mut cur = start;
    // The pixel west of the raster-first pixel is always background.
    let mut back = 4usize;
    let mut first_move: Option<usize> = None;
    let limit = 8 * blob.pixels.len() + 16;
    loop {
        let mut found = None;
        for i in 1..=8 {
            let d = (back + i) % 8;
            let (dx, dy) = DIRS[d];
            if mask.at(cur.0 + dx, cur.1 + dy) {
                found = Some(d);
                break;
            }
        }
        let Some(d) = found else {
            return Err(ShapeError::DegenerateBlob);
        };
        if cur == start {
            match first_move {
                None => first_move = Some(d),
                Some(f) if f == d => break,
                Some(_) => {}
            }
        }
        codes.push(d);
        cur = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
        back = (d + 4) % 8;
        points.push(cur);
        if codes.len() > limit {
            return Err(ShapeError::DegenerateBlob);
        }
    }
    // The loop ends standing on the start pixel again.
    points.pop();

    let pts: Vec<Pixel> =
        points.iter().map(|&(x, y)| Pixel::new((x + mask.ox) as f64, (y + mask.oy) as f64)).collect();
    let chain = corrected_chain_length(&codes);
    let inner_area = shoelace_area(&pts);
    if inner_area <= 0.0 {
        return Err(ShapeError::DegenerateBlob);
    }
    // Pixel centres sit half a pixel inside the outline; the Steiner formula
    // for an offset by 1/2 turns the centre chain into the outline.
    let perimeter = chain + std::f64::consts::PI;
    let area = inner_area + 0.5 * chain + std::f64::consts::FRAC_PI_4;

    Ok(Contour { points: pts, boundary: exterior_crossings(blob, &mask), perimeter, area, bbox: blob.bbox })
}

// Midpoints between blob pixels and 4-adjacent background pixels that are
// connected to the outside of the blob (holes are ignored).
fn exterior_crossings(blob: &Blob, mask: &BlobMask) -> Vec<Pixel> {
    let (w, h) = (mask.w, mask.h);
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    outside[0] = true;
    queue.push_back(0usize);
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if !outside[j] && !mask.data[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    let mut out = Vec::new();
    for &(px, py) in &blob.pixels {
        let lx = px as i64 - mask.ox;
        let ly = py as i64 - mask.oy;
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let j = (ly + dy) as usize * w + (lx + dx) as usize;
            if outside[j] {
                out.push(Pixel::new(px as f64 + 0.5 * dx as f64, py as f64 + 0.5 * dy as f64));
            }
        }
    }
    out
}

pub fn isoperimetric_ratio(contour: &Contour) -> f64 {
    contour.perimeter * contour.perimeter / contour.area
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Polygonal,
    Circular,
}

pub fn classify_shape(contour: &Contour) -> ShapeClass {
    if isoperimetric_ratio(contour) < SHAPE_RATIO_THRESHOLD {
        ShapeClass::Circular
    } else {
        ShapeClass::Polygonal
    }
}

fn point_segment_distance(p: &Pixel, a: &Pixel, b: &Pixel) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

// Douglas-Peucker on the open chain points[lo..=hi].
fn dp_chain(points: &[Pixel], lo: usize, hi: usize, eps: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = point_segment_distance(&points[i], &points[lo], &points[hi % points.len()]);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    if best_d > eps {
        keep[best] = true;
        dp_chain(points, lo, best, eps, keep);
        dp_chain(points, best, hi, eps, keep);
    }
}

fn max_deviation(points: &[Pixel], from: usize, to: usize) -> f64 {
    let n = points.len();
    let (a, b) = (points[from], points[to]);
    let mut i = (from + 1) % n;
    let mut worst: f64 = 0.0;
    while i != to {
        worst = worst.max(point_segment_distance(&points[i], &a, &b));
        i = (i + 1) % n;
    }
    worst
}

/// Closed-contour Douglas-Peucker. Vertices come back counterclockwise as
/// displayed (y down, so negative signed area), starting from the one nearest
/// the image origin.
pub fn simplify_polygon(contour: &Contour, eps: f64) -> Result<Vec<Pixel>, ShapeError> {
    let pts = &contour.points;
    let n = pts.len();
    if n < 4 {
        return Err(ShapeError::TooFewVertices(n));
    }
    let far = (0..n)
        .max_by(|&a, &b| (pts[a] - pts[0]).norm_squared().total_cmp(&(pts[b] - pts[0]).norm_squared()))
        .unwrap_or(0);
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[far] = true;
    // Second chain wraps: index n stands for point 0.
    let mut ext = pts.clone();
    ext.push(pts[0]);
    let mut keep_ext = vec![false; n + 1];
    dp_chain(&ext, 0, far, eps, &mut keep_ext);
    dp_chain(&ext, far, n, eps, &mut keep_ext);
    for i in 0..n {
        keep[i] |= keep_ext[i];
    }
    let mut idx: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();

    // Drop vertices that the seed split forced but the tolerance does not
    // need.
    let mut changed = true;
    while changed && idx.len() > 3 {
        changed = false;
        for k in 0..idx.len() {
            let prev = idx[(k + idx.len() - 1) % idx.len()];
            let next = idx[(k + 1) % idx.len()];
            if max_deviation(pts, prev, next) <= eps {
                idx.remove(k);
                changed = true;
                break;
            }
        }
    }

    let mut verts: Vec<Pixel> = idx.iter().map(|&i| pts[i]).collect();
    if verts.len() < 4 {
        return Err(ShapeError::TooFewVertices(verts.len()));
    }
    Ok(canonical_order(&mut verts))
}

fn canonical_order(verts: &mut Vec<Pixel>) -> Vec<Pixel> {
    if shoelace_area(verts) > 0.0 {
        verts.reverse();
    }
    let first = (0..verts.len())
        .min_by(|&a, &b| verts[a].coords.norm_squared().total_cmp(&verts[b].coords.norm_squared()))
        .unwrap_or(0);
    verts.rotate_left(first);
    verts.clone()
}

// Total-least-squares line through points: (centroid, unit direction).
fn fit_line(points: &[Pixel]) -> Option<(Pixel, nalgebra::Vector2<f64>)> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let c = points.iter().fold(nalgebra::Vector2::zeros(), |acc, p| acc + p.coords) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p.coords - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Some((Pixel::from(c), nalgebra::Vector2::new(angle.cos(), angle.sin())))
}

fn intersect(a: &(Pixel, nalgebra::Vector2<f64>), b: &(Pixel, nalgebra::Vector2<f64>)) -> Option<Pixel> {
    let (p, r) = a;
    let (q, s) = b;
    let denom = r.x * s.y - r.y * s.x;
    if denom.abs() < 1e-9 {
        return None;
    }
    let qp = q - p;
    let t = (qp.x * s.y - qp.y * s.x) / denom;
    Some(p + r * t)
}

/// Moves polygon corners onto the intersections of lines fitted to the
/// boundary samples of each side. Corners whose neighbouring sides cannot be
/// fitted, or that would move more than `max_shift` pixels, are kept.
pub fn refine_corners(vertices: &[Pixel], boundary: &[Pixel], max_shift: f64) -> Vec<Pixel> {
    let n = vertices.len();
    let lines: Vec<Option<(Pixel, nalgebra::Vector2<f64>)>> = (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let ab = b - a;
            let len2 = ab.norm_squared();
            if len2 < 1.0 {
                return None;
            }
            let len = len2.sqrt();
            let margin = (2.0 / len).min(0.25);
            let pts: Vec<Pixel> = boundary
                .iter()
                .filter(|p| {
                    let t = (*p - a).dot(&ab) / len2;
                    let dist = ((*p - a).x * ab.y - (*p - a).y * ab.x).abs() / len;
                    t > margin && t < 1.0 - margin && dist < 2.0
                })
                .copied()
                .collect();
            fit_line(&pts)
        })
        .collect();
    (0..n)
        .map(|i| {
            let prev = &lines[(i + n - 1) % n];
            let cur = &lines[i];
            match (prev, cur) {
                (Some(a), Some(b)) => match intersect(a, b) {
                    Some(p) if (p - vertices[i]).norm() <= max_shift => p,
                    _ => vertices[i],
                },
                _ => vertices[i],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{extract_blobs, GrayImage};

    fn blob_of(img: &GrayImage) -> Blob {
        extract_blobs(img, 128, 1).remove(0)
    }

    fn raster<F: Fn(f64, f64) -> bool>(w: u32, h: u32, inside: F) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                if inside(x as f64, y as f64) {
                    img.set(x, y, 255);
                }
            }
        }
        img
    }

    fn disk(r: f64) -> GrayImage {
        let c = r + 5.3;
        let size = (2.0 * c) as u32 + 2;
        raster(size, size, |x, y| (x - c).powi(2) + (y - c + 0.2).powi(2) <= r * r)
    }

    #[test]
    fn square_measures() {
        let mut img = GrayImage::filled(30, 30, 0);
        crate::shapes::tests::draw_rect(&mut img, 5, 7, 10, 10, 255);
        let c = trace_contour(&blob_of(&img)).unwrap();
        assert_eq!(c.points.len(), 36);
        assert!((c.perimeter - 36.0).abs() < 3.0, "{}", c.perimeter);
        assert!((c.area - 100.0).abs() < 2.0, "{}", c.area);
        assert_eq!(c.boundary.len(), 40);
        assert!(shoelace_area(&c.points) > 0.0);
        assert_eq!(classify_shape(&c), ShapeClass::Polygonal);
    }

    #[test]
    fn disk_ratio_in_band() {
        let c = trace_contour(&blob_of(&disk(20.0))).unwrap();
        let ratio = isoperimetric_ratio(&c);
        assert!((12.0..=14.0).contains(&ratio), "{ratio}");
        assert_eq!(classify_shape(&c), ShapeClass::Circular);
    }

    #[test]
    fn single_pixel_is_degenerate() {
        let mut img = GrayImage::filled(5, 5, 0);
        img.set(2, 2, 255);
        assert!(matches!(trace_contour(&blob_of(&img)), Err(ShapeError::DegenerateBlob)));
        let mut img = GrayImage::filled(8, 5, 0);
        for x in 1..6 {
            img.set(x, 2, 255);
        }
        assert!(matches!(trace_contour(&blob_of(&img)), Err(ShapeError::DegenerateBlob)));
    }

    #[test]
    fn area_tracks_pixel_count_on_convex_shapes() {
        for r in [6.0, 11.0, 25.0, 40.0] {
            let b = blob_of(&disk(r));
            let c = trace_contour(&b).unwrap();
            let rel = (c.area - b.area() as f64).abs() / b.area() as f64;
            assert!(rel < 0.15, "r={r}: {} vs {}", c.area, b.area());
        }
    }

    #[test]
    fn ideal_ratios_bracket_threshold() {
        assert!(4.0 * std::f64::consts::PI < SHAPE_RATIO_THRESHOLD);
        assert!(16.0 > SHAPE_RATIO_THRESHOLD);
        assert_eq!(SHAPE_RATIO_THRESHOLD, 14.0);
    }

    #[test]
    fn ratio_is_scale_stable() {
        let base = isoperimetric_ratio(&trace_contour(&blob_of(&disk(15.0))).unwrap());
        for r in [30.0, 60.0] {
            let ratio = isoperimetric_ratio(&trace_contour(&blob_of(&disk(r))).unwrap());
            assert!((ratio - base).abs() < 0.5, "{ratio} vs {base}");
        }
        let sq = |s: u32| {
            let mut img = GrayImage::filled(s + 10, s + 10, 0);
            crate::shapes::tests::draw_rect(&mut img, 5, 5, s, s, 255);
            isoperimetric_ratio(&trace_contour(&blob_of(&img)).unwrap())
        };
        let (a, b) = (sq(20), sq(80));
        assert!((a - b).abs() < 0.5, "{a} vs {b}");
    }

    #[test]
    fn classification_sweep() {
        for r in [8.0, 12.0, 20.0, 35.0, 70.0] {
            let c = trace_contour(&blob_of(&disk(r))).unwrap();
            assert_eq!(classify_shape(&c), ShapeClass::Circular, "disk r={r} ratio {}", isoperimetric_ratio(&c));
        }
        for (w, h) in [(10u32, 10u32), (16, 16), (40, 40), (30, 24), (100, 90)] {
            let mut img = GrayImage::filled(w + 10, h + 10, 0);
            crate::shapes::tests::draw_rect(&mut img, 5, 5, w, h, 255);
            let c = trace_contour(&blob_of(&img)).unwrap();
            assert_eq!(classify_shape(&c), ShapeClass::Polygonal, "{w}x{h} ratio {}", isoperimetric_ratio(&c));
        }
        for angle in [0.2f64, 0.5, 0.785] {
            let (s, co) = angle.sin_cos();
            let img = raster(90, 90, |x, y| {
                let (dx, dy) = (x - 45.0, y - 45.0);
                (co * dx + s * dy).abs() <= 20.0 && (-s * dx + co * dy).abs() <= 20.0
            });
            let c = trace_contour(&blob_of(&img)).unwrap();
            assert_eq!(classify_shape(&c), ShapeClass::Polygonal, "rotated {angle} ratio {}", isoperimetric_ratio(&c));
        }
    }

    fn quad_image(corners: [(f64, f64); 4], w: u32, h: u32) -> GrayImage {
        raster(w, h, |x, y| {
            (0..4).all(|i| {
                let (ax, ay) = corners[i];
                let (bx, by) = corners[(i + 1) % 4];
                (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0.0
            })
        })
    }

    #[test]
    fn rectangle_simplifies_to_four_corners() {
        let corners = [(12.3, 10.6), (62.2, 14.1), (58.7, 44.4), (9.4, 39.8)];
        let img = quad_image(corners, 80, 60);
        let c = trace_contour(&blob_of(&img)).unwrap();
        let v = simplify_polygon(&c, 2.0).unwrap();
        assert_eq!(v.len(), 4, "{v:?}");
        assert!(shoelace_area(&v) < 0.0);
        for (i, p) in v.iter().enumerate() {
            let d = corners.iter().map(|&(x, y)| ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt()).fold(f64::MAX, f64::min);
            assert!(d < 2.0, "vertex {i} {p:?} off by {d}");
        }
        // Starts at the vertex nearest the origin.
        assert!((v[0].x - 12.0).abs() < 2.0 && (v[0].y - 11.0).abs() < 2.0);

        let refined = refine_corners(&v, &c.boundary, 3.0);
        for p in &refined {
            let d = corners.iter().map(|&(x, y)| ((p.x - x).powi(2) + (p.y - y).powi(2)).sqrt()).fold(f64::MAX, f64::min);
            assert!(d < 0.5, "refined {p:?} off by {d}");
        }
    }

    #[test]
    fn oversized_epsilon_fails() {
        let mut img = GrayImage::filled(30, 30, 0);
        crate::shapes::tests::draw_rect(&mut img, 5, 5, 12, 12, 255);
        let c = trace_contour(&blob_of(&img)).unwrap();
        assert!(matches!(simplify_polygon(&c, 100.0), Err(ShapeError::TooFewVertices(_))));
    }

    #[test]
    fn dp_respects_tolerance() {
        let c = trace_contour(&blob_of(&disk(25.0))).unwrap();
        let eps = 1.5;
        let v = simplify_polygon(&c, eps).unwrap();
        // Every contour point lies within eps of the polygon outline.
        for p in &c.points {
            let d = (0..v.len()).map(|i| point_segment_distance(p, &v[i], &v[(i + 1) % v.len()])).fold(f64::MAX, f64::min);
            assert!(d <= eps + 1e-9);
        }
    }

    #[test]
    fn jittered_rectangle_keeps_four_vertices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut img = GrayImage::filled(120, 100, 0);
        crate::shapes::tests::draw_rect(&mut img, 20, 20, 70, 50, 255);
        // +-1 px boundary jitter on every side pixel row/column.
        for x in 20..90 {
            match rng.random_range(-1i32..=1) {
                -1 => img.set(x, 20, 0),
                1 => img.set(x, 19, 255),
                _ => {}
            }
        }
        for y in 21..69 {
            match rng.random_range(-1i32..=1) {
                -1 => img.set(89, y, 0),
                1 => img.set(90, y, 255),
                _ => {}
            }
        }
        let c = trace_contour(&blob_of(&img)).unwrap();
        assert_eq!(simplify_polygon(&c, 3.0).unwrap().len(), 4);
    }
}
