//! Census-cost semi-global matching.
//!
//! The two views sit behind orthogonal polarizers, so their absolute
//! brightness differs; the census transform only looks at the intensity
//! ordering inside each window.

use std::path::Path;

use image::{ImageBuffer, Luma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PolarizedStereoFrame;
use crate::error::{Error, Result};
use crate::raster::{gray, Grid, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationPaths {
    Four,
    Eight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StereoParams {
    /// Census window radius; the window is `(2r+1)^2`.
    pub census_radius: usize,
    /// Disparities searched are `0..max_disparity`.
    pub max_disparity: usize,
    pub p1: u16,
    pub p2: u16,
    pub paths: AggregationPaths,
    /// Maximum left/right disagreement in pixels.
    pub lr_threshold: f32,
    pub subpixel: bool,
    /// When set, frames of any other size are rejected.
    pub expected_dims: Option<(usize, usize)>,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            census_radius: 2,
            max_disparity: 48,
            p1: 10,
            p2: 120,
            paths: AggregationPaths::Four,
            lr_threshold: 1.0,
            subpixel: true,
            expected_dims: None,
        }
    }
}

impl StereoParams {
    pub fn validate(&self) -> Result<()> {
        if self.census_radius == 0 || self.census_radius > 3 {
            return Err(Error::invalid("stereo.census_radius", "must be 1, 2 or 3"));
        }
        if self.max_disparity < 2 {
            return Err(Error::invalid("stereo.max_disparity", "must be >= 2"));
        }
        if self.p1 >= self.p2 {
            return Err(Error::invalid("stereo.p1", "must be smaller than p2"));
        }
        if !(self.lr_threshold >= 0.0) {
            return Err(Error::invalid("stereo.lr_threshold", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub values: Grid<f32>,
    pub valid: Mask,
}

impl DisparityMap {
    pub const INVALID: f32 = -1.0;

    /// Builds a map from raw values; entries equal to [`Self::INVALID`] or
    /// non-finite are marked invalid.
    pub fn from_values(values: Grid<f32>) -> Self {
        let valid = values.map(|&d| d.is_finite() && d >= 0.0);
        let values = values.map(|&d| if d.is_finite() && d >= 0.0 { d } else { Self::INVALID });
        Self { values, valid }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f32> {
        if *self.valid.get(u, v) {
            Some(*self.values.get(u, v))
        } else {
            None
        }
    }

    /// 16-bit fixed point (1/16 px); invalid pixels are 65535.
    pub fn to_png16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        ImageBuffer::from_fn(self.width() as u32, self.height() as u32, |u, v| {
            let out = match self.get(u as usize, v as usize) {
                Some(d) => (d * 16.0).round().min(65534.0) as u16,
                None => u16::MAX,
            };
            Luma([out])
        })
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        self.to_png16().save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

fn census(img: &Grid<f32>, radius: usize) -> Vec<u64> {
    let (w, h) = img.dims();
    let r = radius as isize;
    let mut out = vec![0u64; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, slot) in row.iter_mut().enumerate() {
            let center = *img.get(u, v);
            let mut bits = 0u64;
            for dv in -r..=r {
                let vv = (v as isize + dv).clamp(0, h as isize - 1) as usize;
                for du in -r..=r {
                    if du == 0 && dv == 0 {
                        continue;
                    }
                    let uu = (u as isize + du).clamp(0, w as isize - 1) as usize;
                    bits = (bits << 1) | u64::from(*img.get(uu, vv) < center);
                }
            }
            *slot = bits;
        }
    });
    out
}

/// Matching cost volume laid out `[v][u][d]`, Hamming distances rescaled to
/// the 0..=255 range.
fn cost_volume(left: &[u64], right: &[u64], w: usize, h: usize, nd: usize, bits: u32) -> Vec<u16> {
    const OUT_OF_VIEW: u16 = 255;
    let scale = 255.0 / bits as f32;
    let lut: Vec<u16> = (0..=bits)
        .map(|b| (b as f32 * scale).round() as u16)
        .collect();
    let mut cost = vec![OUT_OF_VIEW; w * h * nd];
    cost.par_chunks_mut(w * nd).enumerate().for_each(|(v, row)| {
        let lrow = &left[v * w..(v + 1) * w];
        let rrow = &right[v * w..(v + 1) * w];
        for u in 0..w {
            let cell = &mut row[u * nd..(u + 1) * nd];
            for (d, c) in cell.iter_mut().enumerate().take(u + 1) {
                *c = lut[(lrow[u] ^ rrow[u - d]).count_ones() as usize];
            }
        }
    });
    cost
}

#[inline]
fn path_step(cost: &[u16], prev: &[u16], out: &mut [u16], p1: u16, p2: u16) {
    let nd = cost.len();
    let prev_min = *prev.iter().min().unwrap();
    let jump = prev_min.saturating_add(p2);
    for d in 0..nd {
        let mut best = prev[d];
        if d > 0 {
            best = best.min(prev[d - 1].saturating_add(p1));
        }
        if d + 1 < nd {
            best = best.min(prev[d + 1].saturating_add(p1));
        }
        best = best.min(jump);
        out[d] = cost[d] + (best - prev_min);
    }
}

fn aggregate_horizontal(
    cost: &[u16],
    sum: &mut [u16],
    w: usize,
    nd: usize,
    forward: bool,
    p1: u16,
    p2: u16,
) {
    sum.par_chunks_mut(w * nd)
        .zip(cost.par_chunks(w * nd))
        .for_each(|(srow, crow)| {
            let mut prev = vec![0u16; nd];
            let mut cur = vec![0u16; nd];
            let order: Box<dyn Iterator<Item = usize>> = if forward {
                Box::new(0..w)
            } else {
                Box::new((0..w).rev())
            };
            let mut first = true;
            for u in order {
                let c = &crow[u * nd..(u + 1) * nd];
                if first {
                    cur.copy_from_slice(c);
                    first = false;
                } else {
                    path_step(c, &prev, &mut cur, p1, p2);
                }
                for (s, &l) in srow[u * nd..(u + 1) * nd].iter_mut().zip(&cur) {
                    *s += l;
                }
                std::mem::swap(&mut prev, &mut cur);
            }
        });
}

/// Paths with a vertical component: rows are swept in order, each row
/// depending on the previous one shifted by `du`.
#[allow(clippy::too_many_arguments)]
fn aggregate_vertical(
    cost: &[u16],
    sum: &mut [u16],
    w: usize,
    h: usize,
    nd: usize,
    downward: bool,
    du: isize,
    p1: u16,
    p2: u16,
) {
    let row_len = w * nd;
    let mut prev = vec![0u16; row_len];
    let mut cur = vec![0u16; row_len];
    let rows: Vec<usize> = if downward {
        (0..h).collect()
    } else {
        (0..h).rev().collect()
    };
    for (i, &v) in rows.iter().enumerate() {
        let crow = &cost[v * row_len..(v + 1) * row_len];
        let prev_ref = &prev;
        cur.par_chunks_mut(nd).enumerate().for_each(|(u, out)| {
            let c = &crow[u * nd..(u + 1) * nd];
            let src = u as isize - du;
            if i == 0 || src < 0 || src >= w as isize {
                out.copy_from_slice(c);
            } else {
                let s = src as usize;
                path_step(c, &prev_ref[s * nd..(s + 1) * nd], out, p1, p2);
            }
        });
        for (s, &l) in sum[v * row_len..(v + 1) * row_len].iter_mut().zip(&cur) {
            *s += l;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
}

fn argmin(costs: &[u16]) -> usize {
    let mut best = 0;
    for d in 1..costs.len() {
        if costs[d] < costs[best] {
            best = d;
        }
    }
    best
}

/// Per-pixel disparity of the left view by semi-global matching over census
/// costs, with a left/right consistency check.
pub fn compute_disparity(frame: &PolarizedStereoFrame, params: &StereoParams) -> Result<DisparityMap> {
    match_views(frame, params).map(|(disp, _)| disp)
}

/// Left disparity map plus the integer right-anchored disparities used by
/// the consistency check.
pub(crate) fn match_views(
    frame: &PolarizedStereoFrame,
    params: &StereoParams,
) -> Result<(DisparityMap, Grid<u16>)> {
    params.validate()?;
    let (w, h) = frame.dims();
    if let Some(expected) = params.expected_dims {
        if expected != (w, h) {
            return Err(Error::DimensionMismatch {
                expected,
                actual: (w, h),
            });
        }
    }
    if w <= 2 * params.census_radius || h <= 2 * params.census_radius {
        return Err(Error::invalid("frame", "smaller than the census window"));
    }
    let nd = params.max_disparity.min(w);
    let window = 2 * params.census_radius + 1;
    let bits = (window * window - 1) as u32;

    let cl = census(&gray(&frame.left), params.census_radius);
    let cr = census(&gray(&frame.right), params.census_radius);
    let cost = cost_volume(&cl, &cr, w, h, nd, bits);
    drop((cl, cr));

    let mut sum = vec![0u16; w * h * nd];
    let (p1, p2) = (params.p1, params.p2);
    aggregate_horizontal(&cost, &mut sum, w, nd, true, p1, p2);
    aggregate_horizontal(&cost, &mut sum, w, nd, false, p1, p2);
    aggregate_vertical(&cost, &mut sum, w, h, nd, true, 0, p1, p2);
    aggregate_vertical(&cost, &mut sum, w, h, nd, false, 0, p1, p2);
    if params.paths == AggregationPaths::Eight {
        for (down, du) in [(true, 1), (true, -1), (false, 1), (false, -1)] {
            aggregate_vertical(&cost, &mut sum, w, h, nd, down, du, p1, p2);
        }
    }
    drop(cost);

    let mut values = Grid::new(w, h, DisparityMap::INVALID);
    let mut valid = Grid::new(w, h, false);
    let mut right_anchored = Grid::new(w, h, 0u16);
    let max_d = (nd - 1) as f32;
    for v in 0..h {
        let row = &sum[v * w * nd..(v + 1) * w * nd];
        // right-anchored disparity: best d with the right pixel x matched to x + d
        let right_disp: Vec<usize> = (0..w)
            .map(|x| {
                let mut best = 0;
                let mut best_cost = u16::MAX;
                for d in 0..nd.min(w - x) {
                    let c = row[(x + d) * nd + d];
                    if c < best_cost {
                        best_cost = c;
                        best = d;
                    }
                }
                best
            })
            .collect();
        for (x, &d) in right_disp.iter().enumerate() {
            right_anchored.set(x, v, d as u16);
        }
        for u in 0..w {
            let cell = &row[u * nd..u * nd + nd.min(u + 1)];
            let d = argmin(cell);
            let back = right_disp[u - d];
            if (back as f32 - d as f32).abs() > params.lr_threshold {
                continue;
            }
            let mut disp = d as f32;
            if params.subpixel && d > 0 && d + 1 < cell.len() {
                let (cm, c0, cp) = (cell[d - 1] as f32, cell[d] as f32, cell[d + 1] as f32);
                let denom = cm - 2.0 * c0 + cp;
                if denom > 0.0 {
                    disp += 0.5 * (cm - cp) / denom;
                }
            }
            values.set(u, v, disp.clamp(0.0, max_d));
            valid.set(u, v, true);
        }
    }
    Ok((DisparityMap { values, valid }, right_anchored))
}
