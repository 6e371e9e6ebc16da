use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ShapeError;
use crate::geom::Pixel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: Pixel,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Major-axis direction in radians, in `(-pi/2, pi/2]`.
    pub angle: f64,
}

impl Ellipse {
    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.semi_major * self.semi_minor
    }

    pub fn major_axis(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.angle.cos(), self.angle.sin())
    }

    pub fn point_at(&self, t: f64) -> Pixel {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (self.semi_major * t.cos(), self.semi_minor * t.sin());
        Pixel::new(self.center.x + c * x - s * y, self.center.y + s * x + c * y)
    }
}

fn null_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let cands = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
    cands.into_iter().max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared())).unwrap_or_else(Vector3::zeros)
}

/// Direct least-squares ellipse fit (Halir and Flusser's numerically stable
/// form) on isotropically normalised coordinates.
pub fn fit_ellipse(points: &[Pixel]) -> Result<Ellipse, ShapeError> {
    if points.len() < 5 {
        return Err(ShapeError::EllipseFitFailure(format!("need at least 5 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(nalgebra::Vector2::zeros(), |acc, p| acc + p.coords) / n;
    let rms = (points.iter().map(|p| (p.coords - mean).norm_squared()).sum::<f64>() / n).sqrt();
    if !(rms > 1e-12) {
        return Err(ShapeError::EllipseFitFailure("points coincide".into()));
    }
    let scale = rms / std::f64::consts::SQRT_2;

    let mut s1 = Matrix3::zeros();
    let mut s2 = Matrix3::zeros();
    let mut s3 = Matrix3::zeros();
    for p in points {
        let q = (p.coords - mean) / scale;
        let d1 = Vector3::new(q.x * q.x, q.x * q.y, q.y * q.y);
        let d2 = Vector3::new(q.x, q.y, 1.0);
        s1 += d1 * d1.transpose();
        s2 += d1 * d2.transpose();
        s3 += d2 * d2.transpose();
    }
    let s3_inv = s3.try_inverse().ok_or_else(|| ShapeError::EllipseFitFailure("singular scatter".into()))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    let reduced = Matrix3::from_rows(&[m.row(2) / 2.0, -m.row(1), m.row(0) / 2.0]);

    let eig = reduced.complex_eigenvalues();
    let mut best: Option<Vector3<f64>> = None;
    for lambda in eig.iter() {
        if lambda.im.abs() > 1e-9 * (1.0 + lambda.re.abs()) {
            continue;
        }
        let v = null_vector(&(reduced - Matrix3::identity() * lambda.re));
        if v.norm_squared() == 0.0 {
            continue;
        }
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 {
            best = Some(v);
        }
    }
    let a1 = best.ok_or_else(|| ShapeError::EllipseFitFailure("no elliptical solution".into()))?;
    let a2 = t * a1;
    let (a, b, c, d, e, f) = (a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]);

    let det = 4.0 * a * c - b * b;
    if !(det.abs() > 1e-14) {
        return Err(ShapeError::EllipseFitFailure("degenerate conic".into()));
    }
    let x0 = (b * e - 2.0 * c * d) / det;
    let y0 = (b * d - 2.0 * a * e) / det;
    let f0 = f + 0.5 * (d * x0 + e * y0);
    let q = nalgebra::Matrix2::new(a, b / 2.0, b / 2.0, c);
    let se = q.symmetric_eigen();
    let (l_small, l_large, v_major) = if se.eigenvalues[0].abs() <= se.eigenvalues[1].abs() {
        (se.eigenvalues[0], se.eigenvalues[1], se.eigenvectors.column(0).into_owned())
    } else {
        (se.eigenvalues[1], se.eigenvalues[0], se.eigenvectors.column(1).into_owned())
    };
    let r_major = -f0 / l_small;
    let r_minor = -f0 / l_large;
    if !(r_major > 0.0 && r_minor > 0.0) || !r_major.is_finite() {
        return Err(ShapeError::EllipseFitFailure("imaginary axes".into()));
    }
    let mut angle = v_major.y.atan2(v_major.x);
    if angle <= -std::f64::consts::FRAC_PI_2 {
        angle += std::f64::consts::PI;
    } else if angle > std::f64::consts::FRAC_PI_2 {
        angle -= std::f64::consts::PI;
    }
    Ok(Ellipse {
        center: Pixel::new(mean.x + scale * x0, mean.y + scale * y0),
        semi_major: scale * r_major.sqrt(),
        semi_minor: scale * r_minor.sqrt(),
        angle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::{extract_blobs, trace_contour, GrayImage};

    fn raster_ellipse(w: u32, h: u32, e: &Ellipse) -> GrayImage {
        let mut img = GrayImage::filled(w, h, 0);
        let (s, c) = e.angle.sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - e.center.x, y as f64 - e.center.y);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                if (u / e.semi_major).powi(2) + (v / e.semi_minor).powi(2) <= 1.0 {
                    img.set(x, y, 255);
                }
            }
        }
        img
    }

    fn fit_raster(w: u32, h: u32, truth: &Ellipse) -> Ellipse {
        let img = raster_ellipse(w, h, truth);
        let blob = extract_blobs(&img, 128, 1).remove(0);
        fit_ellipse(&trace_contour(&blob).unwrap().boundary).unwrap()
    }

    #[test]
    fn exact_samples_recover_parameters() {
        let truth = Ellipse { center: Pixel::new(12.5, -4.0), semi_major: 9.0, semi_minor: 3.5, angle: 0.7 };
        let pts: Vec<Pixel> = (0..40).map(|i| truth.point_at(i as f64 * 0.157)).collect();
        let e = fit_ellipse(&pts).unwrap();
        assert!((e.center - truth.center).norm() < 1e-8);
        assert!((e.semi_major - 9.0).abs() < 1e-8);
        assert!((e.semi_minor - 3.5).abs() < 1e-8);
        assert!((e.angle - 0.7).abs() < 1e-8);
    }

    #[test]
    fn raster_circle() {
        let truth = Ellipse { center: Pixel::new(100.0, 80.0), semi_major: 30.0, semi_minor: 30.0, angle: 0.0 };
        let e = fit_raster(200, 160, &truth);
        assert!((e.center - truth.center).norm() < 0.5);
        assert!((e.semi_major - 30.0).abs() < 0.5 && (e.semi_minor - 30.0).abs() < 0.5, "{e:?}");
    }

    #[test]
    fn raster_rotated_ellipse() {
        let truth = Ellipse { center: Pixel::new(60.3, 50.7), semi_major: 40.0, semi_minor: 20.0, angle: 30f64.to_radians() };
        let e = fit_raster(130, 110, &truth);
        assert!((e.angle - truth.angle).abs() < 2f64.to_radians(), "{}", e.angle.to_degrees());
        assert!((e.semi_major - 40.0).abs() < 0.7);
        assert!((e.semi_minor - 20.0).abs() < 0.7);
        assert!((e.center - truth.center).norm() < 0.5);
    }

    #[test]
    fn angle_range_is_half_open() {
        let truth = Ellipse { center: Pixel::new(0.0, 0.0), semi_major: 5.0, semi_minor: 2.0, angle: -1.2 };
        let pts: Vec<Pixel> = (0..30).map(|i| truth.point_at(i as f64 * 0.21)).collect();
        let e = fit_ellipse(&pts).unwrap();
        assert!((e.angle + 1.2).abs() < 1e-8);
        assert!(e.angle > -std::f64::consts::FRAC_PI_2 && e.angle <= std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn collinear_points_fail() {
        let pts: Vec<Pixel> = (0..20).map(|i| Pixel::new(i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert!(matches!(fit_ellipse(&pts), Err(ShapeError::EllipseFitFailure(_))));
        assert!(matches!(fit_ellipse(&pts[..3]), Err(ShapeError::EllipseFitFailure(_))));
    }
}
