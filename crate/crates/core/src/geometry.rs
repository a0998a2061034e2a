//! Per-pixel reflection and azimuth angles below the horizon line.
//!
//! The horizon line `a*u + b*v + c = 0` together with the intrinsics fixes
//! the plane through the camera center parallel to the ground: a pixel ray
//! `(u - u_c, v - v_c, f)` lies in it exactly when the line evaluates to
//! zero, so its normal is `(a, b, (a*u_c + b*v_c + c) / f)`. The reflection
//! angle is the angle between a pixel ray and that normal. The azimuth is the
//! signed angle, inside the plane, between the projected optical axis and the
//! projected pixel ray (positive to the right).
//!
//! [`cosine_rule_reflection_angle`] and [`cosine_rule_azimuth_angle`] are the
//! in-image constructions using perpendicular feet on the horizon line. They
//! agree with the exact maps whenever the horizon passes through the principal
//! point, and drift from them otherwise.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};
use crate::stereo::HorizonLine;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub f: f64,
    pub u_c: f64,
    pub v_c: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, u_c: f64, v_c: f64) -> Result<Self> {
        if !(f > 0.0 && f.is_finite()) {
            return Err(Error::invalid("intrinsics.f", "focal length must be positive"));
        }
        Ok(Self { f, u_c, v_c })
    }

    pub fn validate_for(&self, dims: (usize, usize)) -> Result<()> {
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        if !(0.0..=w).contains(&self.u_c) || !(0.0..=h).contains(&self.v_c) {
            return Err(Error::invalid(
                "intrinsics.principal_point",
                format!("({}, {}) outside {}x{}", self.u_c, self.v_c, dims.0, dims.1),
            ));
        }
        Ok(())
    }

    #[inline]
    fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [u - self.u_c, v - self.v_c, self.f]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AngleMaps {
    /// Reflection angle, radians; 0 off the mask.
    pub theta: Grid<f64>,
    /// Signed azimuth from the camera forward direction, radians; 0 off the mask.
    pub psi: Grid<f64>,
    pub below_horizon: Mask,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Precomputed frame of the horizon plane for one (intrinsics, horizon) pair.
#[derive(Clone, Copy, Debug)]
struct HorizonFrame {
    intr: CameraIntrinsics,
    line: HorizonLine,
    /// Unit normal pointing to the ground side.
    normal: [f64; 3],
    forward: [f64; 3],
    right: [f64; 3],
}

impl HorizonFrame {
    fn new(intr: &CameraIntrinsics, line: &HorizonLine) -> Result<Self> {
        if line.a == 0.0 && line.b == 0.0 {
            return Err(Error::DegenerateHorizon);
        }
        let n = [line.a, line.b, (line.a * intr.u_c + line.b * intr.v_c + line.c) / intr.f];
        let normal = scale(n, 1.0 / norm(n));
        let z = [0.0, 0.0, 1.0];
        let fwd = sub(z, scale(normal, normal[2]));
        let fwd_norm = norm(fwd);
        if fwd_norm < 1e-12 {
            return Err(Error::invalid("horizon", "optical axis is normal to the ground"));
        }
        let forward = scale(fwd, 1.0 / fwd_norm);
        let right = cross(normal, forward);
        Ok(Self {
            intr: *intr,
            line: *line,
            normal,
            forward,
            right,
        })
    }

    #[inline]
    fn below(&self, u: f64, v: f64) -> bool {
        self.line.eval(u, v) > 0.0
    }

    #[inline]
    fn theta(&self, u: f64, v: f64) -> f64 {
        let r = self.intr.ray(u, v);
        let along = dot(self.normal, r);
        let across = norm(cross(self.normal, r));
        across.atan2(along)
    }

    #[inline]
    fn psi(&self, u: f64, v: f64) -> f64 {
        let r = self.intr.ray(u, v);
        dot(r, self.right).atan2(dot(r, self.forward))
    }
}

/// Reflection angle at one pixel; `None` on or above the horizon.
pub fn reflection_angle(intr: &CameraIntrinsics, horizon: &HorizonLine, u: f64, v: f64) -> Result<Option<f64>> {
    let frame = HorizonFrame::new(intr, horizon)?;
    Ok(frame.below(u, v).then(|| frame.theta(u, v)))
}

/// Signed azimuth at one pixel; `None` on or above the horizon.
pub fn azimuth_angle(intr: &CameraIntrinsics, horizon: &HorizonLine, u: f64, v: f64) -> Result<Option<f64>> {
    let frame = HorizonFrame::new(intr, horizon)?;
    Ok(frame.below(u, v).then(|| frame.psi(u, v)))
}

fn build_map(
    frame: &HorizonFrame,
    dims: (usize, usize),
    f: impl Fn(&HorizonFrame, f64, f64) -> f64 + Sync,
) -> (Grid<f64>, Mask) {
    let (w, h) = dims;
    let mut values = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    values
        .par_chunks_mut(w.max(1))
        .zip(mask.par_chunks_mut(w.max(1)))
        .enumerate()
        .for_each(|(v, (vals, ms))| {
            for u in 0..w {
                let (uf, vf) = (u as f64, v as f64);
                if frame.below(uf, vf) {
                    vals[u] = f(frame, uf, vf);
                    ms[u] = true;
                }
            }
        });
    (
        Grid::from_vec(w, h, values).expect("sized"),
        Grid::from_vec(w, h, mask).expect("sized"),
    )
}

pub fn reflection_angle_map(
    intr: &CameraIntrinsics,
    horizon: &HorizonLine,
    dims: (usize, usize),
) -> Result<(Grid<f64>, Mask)> {
    let frame = HorizonFrame::new(intr, horizon)?;
    Ok(build_map(&frame, dims, HorizonFrame::theta))
}

pub fn azimuth_angle_map(intr: &CameraIntrinsics, horizon: &HorizonLine, dims: (usize, usize)) -> Result<Grid<f64>> {
    let frame = HorizonFrame::new(intr, horizon)?;
    Ok(build_map(&frame, dims, HorizonFrame::psi).0)
}

pub fn angle_maps(intr: &CameraIntrinsics, horizon: &HorizonLine, dims: (usize, usize)) -> Result<AngleMaps> {
    let frame = HorizonFrame::new(intr, horizon)?;
    let (theta, below_horizon) = build_map(&frame, dims, HorizonFrame::theta);
    let (psi, _) = build_map(&frame, dims, HorizonFrame::psi);
    Ok(AngleMaps {
        theta,
        psi,
        below_horizon,
    })
}

/// Cosine-rule reflection angle using the perpendicular foot `I4` of the
/// pixel on the horizon line. Exact when the horizon passes through the
/// principal point.
pub fn cosine_rule_reflection_angle(intr: &CameraIntrinsics, horizon: &HorizonLine, u: f64, v: f64) -> Option<f64> {
    let omega = horizon.tilt;
    let v_i3 = horizon.v_at(u)?;
    if v <= v_i3 {
        return None;
    }
    let ri4 = (v - v_i3) * omega.cos();
    let u_i4 = u + ri4 * omega.sin();
    let v_i4 = v - ri4 * omega.cos();
    let f2 = intr.f * intr.f;
    let or = (f2 + (intr.u_c - u).powi(2) + (intr.v_c - v).powi(2)).sqrt();
    let oi4 = (f2 + (intr.u_c - u_i4).powi(2) + (intr.v_c - v_i4).powi(2)).sqrt();
    let cos_alpha = (or * or + oi4 * oi4 - ri4 * ri4) / (2.0 * or * oi4);
    Some(FRAC_PI_2 - cos_alpha.clamp(-1.0, 1.0).acos())
}

/// In-image azimuth construction: the lateral offset of the pixel along the
/// horizon direction over the distance from the camera center to the foot
/// `I2` of the principal point on the horizon. Signed, positive to the right.
/// Exact when the horizon passes through the principal point.
pub fn cosine_rule_azimuth_angle(intr: &CameraIntrinsics, horizon: &HorizonLine, u: f64, v: f64) -> Option<f64> {
    let omega = horizon.tilt;
    let v_i3 = horizon.v_at(u)?;
    if v <= v_i3 {
        return None;
    }
    let (du, dv) = (u - intr.u_c, v - intr.v_c);
    let cr = du.hypot(dv);
    // angle of CR against the image horizontal
    let in_image_ray_angle = dv.atan2(du);
    let v_i1 = horizon.v_at(intr.u_c)?;
    let ci2 = (intr.v_c - v_i1) * omega.cos();
    let oi2 = (intr.f * intr.f + ci2 * ci2).sqrt();
    Some((cr * (in_image_ray_angle - omega).cos()).atan2(oi2))
}

/// Grayscale debug rendering: `lo..hi` maps linearly to `0..255`, pixels off
/// the mask are black.
pub fn angle_map_png(map: &Grid<f64>, mask: &Mask, lo: f64, hi: f64) -> image::GrayImage {
    image::GrayImage::from_fn(map.width() as u32, map.height() as u32, |u, v| {
        let (u, v) = (u as usize, v as usize);
        if !*mask.get(u, v) {
            return image::Luma([0]);
        }
        let t = ((map.get(u, v) - lo) / (hi - lo)).clamp(0.0, 1.0);
        image::Luma([(t * 255.0).round() as u8])
    })
}

pub fn save_angle_maps(maps: &AngleMaps, dir: &Path) -> Result<()> {
    let save = |img: image::GrayImage, name: &str| {
        let path = dir.join(name);
        img.save(&path).map_err(|source| Error::Image { path, source })
    };
    save(angle_map_png(&maps.theta, &maps.below_horizon, 0.0, FRAC_PI_2), "theta.png")?;
    save(angle_map_png(&maps.psi, &maps.below_horizon, -FRAC_PI_2, FRAC_PI_2), "psi.png")
}

/// Reuses angle maps while the horizon stays within `tolerance` of the one
/// they were built for (per coefficient).
#[derive(Debug)]
pub struct AngleMapCache {
    tolerance: f64,
    entry: Option<(CameraIntrinsics, [f64; 3], (usize, usize), Arc<AngleMaps>)>,
}

impl Default for AngleMapCache {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AngleMapCache {
    pub fn new(tolerance: f64) -> Self {
        Self {
            tolerance,
            entry: None,
        }
    }

    pub fn get(&mut self, intr: &CameraIntrinsics, horizon: &HorizonLine, dims: (usize, usize)) -> Result<Arc<AngleMaps>> {
        let coef = [horizon.a, horizon.b, horizon.c];
        if let Some((ci, cc, cd, maps)) = &self.entry {
            let close = cc.iter().zip(&coef).all(|(a, b)| (a - b).abs() <= self.tolerance);
            if ci == intr && *cd == dims && close {
                return Ok(Arc::clone(maps));
            }
        }
        let maps = Arc::new(angle_maps(intr, horizon, dims)?);
        self.entry = Some((*intr, coef, dims, Arc::clone(&maps)));
        Ok(maps)
    }
}
