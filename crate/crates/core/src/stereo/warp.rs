use image::{Rgb, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{GroundPlane, PolarizedStereoFrame};
use crate::raster::{Grid, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    Nearest,
    #[default]
    Bilinear,
}

/// Left view and the right view resampled into left coordinates, both with
/// channels scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct WarpedPair {
    pub left: Rgb32FImage,
    pub right_warped: Rgb32FImage,
    /// Pixels whose warp source fell inside the right image.
    pub coverage: Mask,
}

fn to_unit(p: &Rgb<u8>) -> Rgb<f32> {
    Rgb(p.0.map(|c| c as f32 / 255.0))
}

fn sample(img: &RgbImage, x: f64, v: u32, mode: WarpMode) -> Rgb<f32> {
    match mode {
        WarpMode::Nearest => to_unit(img.get_pixel(x.round() as u32, v)),
        WarpMode::Bilinear => {
            let x0 = x.floor();
            let t = (x - x0) as f32;
            let x0 = x0 as u32;
            let x1 = (x0 + 1).min(img.width() - 1);
            let a = to_unit(img.get_pixel(x0, v));
            if t == 0.0 {
                return a;
            }
            let b = to_unit(img.get_pixel(x1, v));
            Rgb(std::array::from_fn(|c| a[c] * (1.0 - t) + b[c] * t))
        }
    }
}

/// Resamples the right view at `(u - disparity(u, v), v)` for every left
/// pixel with non-negative plane disparity. The measured disparity is not
/// used: everything below the horizon is assumed to be ground.
pub fn warp_right_to_left(frame: &PolarizedStereoFrame, plane: &GroundPlane, mode: WarpMode) -> WarpedPair {
    let (w, h) = frame.left.dimensions();
    let left = Rgb32FImage::from_fn(w, h, |u, v| to_unit(frame.left.get_pixel(u, v)));
    let mut right_warped = Rgb32FImage::new(w, h);
    let mut coverage = Grid::new(w as usize, h as usize, false);
    let max_x = (w - 1) as f64;
    for v in 0..h {
        for u in 0..w {
            let d = plane.disparity_at(u as f64, v as f64);
            if d < 0.0 {
                continue;
            }
            let x = u as f64 - d;
            if !(0.0..=max_x).contains(&x) {
                continue;
            }
            right_warped.put_pixel(u, v, sample(&frame.right, x, v, mode));
            coverage.set(u as usize, v as usize, true);
        }
    }
    WarpedPair {
        left,
        right_warped,
        coverage,
    }
}
