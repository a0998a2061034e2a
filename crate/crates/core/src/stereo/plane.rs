//! Robust ground-plane fit in disparity space and the derived horizon line.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{CameraMeta, DisparityMap};
use crate::error::{Error, Result};

/// Disparity sample `(u, v, disparity)`.
pub type PlanePoint = [f64; 3];

/// Ground disparity plane `disparity = a*u + b*v + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub inlier_count: usize,
    pub inlier_fraction: f64,
}

impl GroundPlane {
    /// A plane with no fit statistics attached.
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Self {
        Self {
            a,
            b,
            c,
            inlier_count: 0,
            inlier_fraction: 0.0,
        }
    }

    #[inline]
    pub fn disparity_at(&self, u: f64, v: f64) -> f64 {
        self.a * u + self.b * v + self.c
    }

    pub fn coefficients(&self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

/// Triangle of pixels in front of the vehicle used for the plane fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiTriangle {
    pub vertices: [(f64, f64); 3],
}

impl RoiTriangle {
    /// Apex centered `0.15 * height` below the expected horizon row, base
    /// spanning 10%..90% of the width on the bottom row.
    pub fn default_for(width: usize, height: usize, horizon_v: f64) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self::with_fractions(w, h, horizon_v, 0.15, 0.1)
    }

    pub fn with_fractions(w: f64, h: f64, horizon_v: f64, apex_below: f64, base_margin: f64) -> Self {
        let apex_v = (horizon_v + apex_below * h).clamp(0.0, h - 1.0);
        Self {
            vertices: [
                (w / 2.0, apex_v),
                (base_margin * w, h - 1.0),
                ((1.0 - base_margin) * w, h - 1.0),
            ],
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        let [p0, p1, p2] = self.vertices;
        let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (v - a.1) - (b.1 - a.1) * (u - a.0);
        let d0 = edge(p0, p1);
        let d1 = edge(p1, p2);
        let d2 = edge(p2, p0);
        let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
        let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
        !(has_neg && has_pos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneFitParams {
    /// Cauchy scale in disparity pixels.
    pub cauchy_scale: f64,
    pub max_iterations: usize,
    /// Stop once the relative coefficient change drops below this.
    pub tolerance: f64,
    /// Residual bound for counting a point as an inlier.
    pub inlier_threshold: f64,
    /// Finish with an unweighted refit on the inliers, which removes the
    /// small pull that near-plane outliers exert on the Cauchy solution.
    pub refine_inliers: bool,
}

impl Default for PlaneFitParams {
    fn default() -> Self {
        Self {
            cauchy_scale: 1.0,
            max_iterations: 20,
            tolerance: 1e-8,
            inlier_threshold: 1.0,
            refine_inliers: true,
        }
    }
}

impl PlaneFitParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.cauchy_scale > 0.0) {
            return Err(Error::invalid("plane.cauchy_scale", "must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("plane.max_iterations", "must be >= 1"));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::invalid("plane.inlier_threshold", "must be positive"));
        }
        Ok(())
    }
}

/// Zero-disparity line `a*u + b*v + c = 0` of the ground plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// In-image tilt angle of the line, radians.
    pub tilt: f64,
}

impl HorizonLine {
    /// Row of the line at column `u`; `None` for a vertical line.
    pub fn v_at(&self, u: f64) -> Option<f64> {
        (self.b != 0.0).then(|| -(self.a * u + self.c) / self.b)
    }

    /// Line value at a pixel; positive on the ground side when `b > 0`.
    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> f64 {
        self.a * u + self.b * v + self.c
    }

    /// Intersections with the left and right image borders.
    pub fn border_points(&self, width: usize) -> Option<[(f64, f64); 2]> {
        let u1 = width.saturating_sub(1).max(1) as f64;
        Some([(0.0, self.v_at(0.0)?), (u1, self.v_at(u1)?)])
    }
}

/// Centered weighted least squares; returns `None` for a singular system.
fn solve_weighted(points: &[PlanePoint], weights: Option<&[f64]>) -> Option<[f64; 3]> {
    let mut sw = 0.0;
    let (mut mu, mut mv, mut md) = (0.0, 0.0, 0.0);
    for (i, p) in points.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        sw += w;
        mu += w * p[0];
        mv += w * p[1];
        md += w * p[2];
    }
    if sw <= 0.0 {
        return None;
    }
    mu /= sw;
    mv /= sw;
    md /= sw;
    let (mut suu, mut suv, mut svv, mut sud, mut svd) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, p) in points.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[i]);
        let (du, dv, dd) = (p[0] - mu, p[1] - mv, p[2] - md);
        suu += w * du * du;
        suv += w * du * dv;
        svv += w * dv * dv;
        sud += w * du * dd;
        svd += w * dv * dd;
    }
    let m = Matrix2::new(suu, suv, suv, svv);
    let scale = suu + svv;
    if scale <= 0.0 || m.determinant() <= 1e-12 * scale * scale {
        return None;
    }
    let ab = m.try_inverse()? * Vector2::new(sud, svd);
    let (a, b) = (ab[0], ab[1]);
    Some([a, b, md - a * mu - b * mv])
}

/// Ordinary least-squares plane through the points.
pub fn least_squares_plane(points: &[PlanePoint]) -> Result<[f64; 3]> {
    if points.len() < 3 {
        return Err(Error::NoGroundPlane(format!(
            "{} valid points, need at least 3",
            points.len()
        )));
    }
    solve_weighted(points, None)
        .ok_or_else(|| Error::NoGroundPlane("points are collinear".into()))
}

/// Cauchy-loss plane fit by iteratively reweighted least squares, started
/// from the ordinary least-squares solution.
pub fn fit_plane_points(points: &[PlanePoint], params: &PlaneFitParams) -> Result<GroundPlane> {
    params.validate()?;
    let mut coef = least_squares_plane(points)?;
    let s2 = params.cauchy_scale * params.cauchy_scale;
    let mut weights = vec![1.0; points.len()];
    for _ in 0..params.max_iterations {
        for (w, p) in weights.iter_mut().zip(points) {
            let r = coef[0] * p[0] + coef[1] * p[1] + coef[2] - p[2];
            *w = 1.0 / (1.0 + r * r / s2);
        }
        let next = solve_weighted(points, Some(&weights))
            .ok_or_else(|| Error::NoGroundPlane("weighted system is singular".into()))?;
        let old = Vector3::from(coef);
        let new = Vector3::from(next);
        coef = next;
        if (new - old).norm() <= params.tolerance * new.norm().max(1e-12) {
            break;
        }
    }
    let is_inlier = |c: &[f64; 3], p: &PlanePoint| (c[0] * p[0] + c[1] * p[1] + c[2] - p[2]).abs() < params.inlier_threshold;
    if params.refine_inliers {
        let inliers: Vec<PlanePoint> = points.iter().copied().filter(|p| is_inlier(&coef, p)).collect();
        if let Some(refit) = (inliers.len() >= 3).then(|| solve_weighted(&inliers, None)).flatten() {
            coef = refit;
        }
    }
    let inlier_count = points.iter().filter(|p| is_inlier(&coef, p)).count();
    Ok(GroundPlane {
        a: coef[0],
        b: coef[1],
        c: coef[2],
        inlier_count,
        inlier_fraction: inlier_count as f64 / points.len() as f64,
    })
}

/// Fits the ground plane to the valid disparities inside `roi`.
///
/// Fails when the points are too few or degenerate, or when the fitted plane
/// does not increase toward the bottom of the image.
pub fn fit_ground_plane(
    disp: &DisparityMap,
    roi: &RoiTriangle,
    params: &PlaneFitParams,
) -> Result<GroundPlane> {
    let mut points = Vec::new();
    for v in 0..disp.height() {
        for u in 0..disp.width() {
            if let Some(d) = disp.get(u, v) {
                if roi.contains(u as f64, v as f64) {
                    points.push([u as f64, v as f64, d as f64]);
                }
            }
        }
    }
    let plane = fit_plane_points(&points, params)?;
    if !(plane.b > 0.0) {
        return Err(Error::NoGroundPlane(format!(
            "fitted plane does not grow downward (b = {})",
            plane.b
        )));
    }
    Ok(plane)
}

pub fn horizon_line(plane: &GroundPlane, width: usize) -> Result<HorizonLine> {
    if plane.a == 0.0 && plane.b == 0.0 {
        return Err(Error::DegenerateHorizon);
    }
    let mut line = HorizonLine {
        a: plane.a,
        b: plane.b,
        c: plane.c,
        tilt: 0.0,
    };
    line.tilt = match line.border_points(width) {
        Some([(u0, v0), (u5, v5)]) => ((v5 - v0) / (u5 - u0)).atan(),
        None => std::f64::consts::FRAC_PI_2,
    };
    Ok(line)
}

/// Ground distance along the optical axis from the plane disparity at a
/// pixel; `None` at or above the horizon.
pub fn pixel_distance(plane: &GroundPlane, meta: &CameraMeta, u: f64, v: f64) -> Option<f64> {
    let d = plane.disparity_at(u, v);
    (d > 0.0).then(|| meta.focal_length * meta.baseline / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Grid;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_points(n: usize, outlier_frac: f64, seed: u64) -> Vec<PlanePoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = rng.random_range(0.0..1280.0);
                let v = rng.random_range(360.0..720.0);
                let d = if rng.random_bool(outlier_frac) {
                    rng.random_range(0.0..300.0)
                } else {
                    0.5 * v - 100.0
                };
                [u, v, d]
            })
            .collect()
    }

    #[test]
    fn exact_plane_recovered() {
        let pts = plane_points(2000, 0.0, 1);
        let p = fit_plane_points(&pts, &PlaneFitParams::default()).unwrap();
        assert!(p.a.abs() < 1e-6);
        assert!((p.b - 0.5).abs() < 1e-6);
        assert!((p.c + 100.0).abs() < 1e-6);
        assert_eq!(p.inlier_count, 2000);
    }

    #[test]
    fn outliers_rejected() {
        let pts = plane_points(20000, 0.2, 2);
        let p = fit_plane_points(&pts, &PlaneFitParams::default()).unwrap();
        assert!(p.a.abs() < 1e-3, "{p:?}");
        assert!((p.b - 0.5).abs() < 1e-3, "{p:?}");
        assert!((p.c + 100.0).abs() < 1e-3, "{p:?}");
        assert!((p.inlier_fraction - 0.8).abs() < 0.02);
    }

    #[test]
    fn degenerate_inputs_fail() {
        let params = PlaneFitParams::default();
        let two = [[0.0, 0.0, 1.0], [1.0, 1.0, 2.0]];
        assert!(matches!(fit_plane_points(&two, &params), Err(Error::NoGroundPlane(_))));
        let line: Vec<PlanePoint> = (0..10).map(|i| [i as f64, 2.0 * i as f64, 1.0]).collect();
        assert!(matches!(fit_plane_points(&line, &params), Err(Error::NoGroundPlane(_))));
    }

    #[test]
    fn scale_equivariance() {
        let pts = plane_points(3000, 0.0, 3);
        let base = fit_plane_points(&pts, &PlaneFitParams::default()).unwrap();
        for k in [0.25, 3.0] {
            let scaled: Vec<_> = pts.iter().map(|p| [p[0], p[1], k * p[2]]).collect();
            let p = fit_plane_points(&scaled, &PlaneFitParams::default()).unwrap();
            for (x, y) in p.coefficients().iter().zip(base.coefficients()) {
                assert!((x - k * y).abs() < 1e-6);
            }
            assert_eq!(p.inlier_count, base.inlier_count);
        }
    }

    #[test]
    fn irls_beats_least_squares() {
        let truth = [0.0, 0.5, -100.0];
        let pts = plane_points(5000, 0.2, 4);
        let err = |c: [f64; 3]| c.iter().zip(truth).map(|(x, t)| (x - t).abs()).fold(0.0, f64::max);
        let ls = least_squares_plane(&pts).unwrap();
        let robust = fit_plane_points(&pts, &PlaneFitParams::default()).unwrap();
        assert!(err(robust.coefficients()) < err(ls));
    }

    #[test]
    fn roi_fit_from_disparity_map() {
        let values = Grid::from_fn(320, 180, |_, v| {
            let d = 0.5 * v as f32 - 50.0;
            if d >= 0.0 { d } else { DisparityMap::INVALID }
        });
        let disp = DisparityMap::from_values(values);
        let roi = RoiTriangle::default_for(320, 180, 100.0);
        let p = fit_ground_plane(&disp, &roi, &PlaneFitParams::default()).unwrap();
        assert_relative_eq!(p.b, 0.5, epsilon = 1e-9);
        assert_relative_eq!(p.c, -50.0, epsilon = 1e-6);

        let empty = DisparityMap::from_values(Grid::new(320, 180, DisparityMap::INVALID));
        assert!(fit_ground_plane(&empty, &roi, &PlaneFitParams::default()).is_err());
    }

    #[test]
    fn horizon_examples() {
        let flat = horizon_line(&GroundPlane::from_coefficients(0.0, 0.5, -100.0), 1280).unwrap();
        assert_relative_eq!(flat.v_at(17.0).unwrap(), 200.0);
        assert_eq!(flat.tilt, 0.0);

        let tilted = horizon_line(&GroundPlane::from_coefficients(0.1, 0.5, -100.0), 1280).unwrap();
        assert_relative_eq!(tilted.tilt, (-0.2f64).atan(), epsilon = 1e-12);

        let above = horizon_line(&GroundPlane::from_coefficients(0.0, 0.5, 100.0), 1280).unwrap();
        assert_relative_eq!(above.v_at(0.0).unwrap(), -200.0);

        assert!(matches!(
            horizon_line(&GroundPlane::from_coefficients(0.0, 0.0, 3.0), 1280),
            Err(Error::DegenerateHorizon)
        ));
    }

    #[test]
    fn horizon_points_evaluate_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let plane = GroundPlane::from_coefficients(
                rng.random_range(-0.2..0.2),
                rng.random_range(0.01..1.0),
                rng.random_range(-300.0..100.0),
            );
            let line = horizon_line(&plane, 1280).unwrap();
            for u in [0.0, 100.5, 640.0, 1279.0] {
                let v = line.v_at(u).unwrap();
                assert!(line.eval(u, v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn distance_examples() {
        let meta = CameraMeta {
            focal_length: 720.0,
            baseline: 0.12,
            camera_height: 1.77,
            principal_point: (640.0, 360.0),
        };
        let at = |d: f64| pixel_distance(&GroundPlane::from_coefficients(0.0, 0.0, d), &meta, 0.0, 0.0);
        assert_relative_eq!(at(8.64).unwrap(), 10.0, epsilon = 1e-12);
        assert_relative_eq!(at(86.4).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(at(0.0), None);
        assert_eq!(at(-1.0), None);
    }
}
