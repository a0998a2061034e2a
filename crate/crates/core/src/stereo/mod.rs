//! Stereo front end: disparity, ground-plane fit, horizon and warp.

mod disparity;
mod plane;
mod warp;

pub use disparity::{compute_disparity, AggregationPaths, DisparityMap, StereoParams};
pub use plane::{
    fit_ground_plane, fit_plane_points, horizon_line, least_squares_plane, pixel_distance,
    GroundPlane, HorizonLine, PlaneFitParams, PlanePoint, RoiTriangle,
};
pub use warp::{warp_right_to_left, WarpMode, WarpedPair};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera constants of a rectified stereo rig.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraMeta {
    /// Focal length in pixels.
    pub focal_length: f64,
    /// Baseline in meters.
    pub baseline: f64,
    /// Mounting height above the ground in meters.
    pub camera_height: f64,
    /// Principal point `(u, v)` in pixels.
    pub principal_point: (f64, f64),
}

impl CameraMeta {
    pub const DEFAULT_FOCAL_LENGTH: f64 = 720.0;
    pub const DEFAULT_BASELINE: f64 = 0.12;
    pub const DEFAULT_HEIGHT: f64 = 1.77;

    /// Defaults of the reference rig for an image of the given size.
    pub fn for_image(width: usize, height: usize) -> Self {
        let scale = height as f64 / 720.0;
        Self {
            focal_length: Self::DEFAULT_FOCAL_LENGTH * scale,
            baseline: Self::DEFAULT_BASELINE,
            camera_height: Self::DEFAULT_HEIGHT,
            principal_point: (width as f64 / 2.0, height as f64 / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal_length > 0.0) {
            return Err(Error::invalid("focal_length", "must be positive"));
        }
        if !(self.baseline > 0.0) {
            return Err(Error::invalid("baseline", "must be positive"));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::invalid("camera_height", "must be positive"));
        }
        Ok(())
    }
}

/// Left view behind a horizontal polarizer, right view behind a vertical one.
#[derive(Clone, Debug)]
pub struct PolarizedStereoFrame {
    pub left: RgbImage,
    pub right: RgbImage,
    pub meta: CameraMeta,
    pub frame_id: u64,
}

impl PolarizedStereoFrame {
    pub fn new(left: RgbImage, right: RgbImage, meta: CameraMeta, frame_id: u64) -> Result<Self> {
        if left.dimensions() != right.dimensions() {
            let (lw, lh) = left.dimensions();
            let (rw, rh) = right.dimensions();
            return Err(Error::DimensionMismatch {
                expected: (lw as usize, lh as usize),
                actual: (rw as usize, rh as usize),
            });
        }
        meta.validate()?;
        Ok(Self {
            left,
            right,
            meta,
            frame_id,
        })
    }

    /// Splits a side-by-side image exactly at `width / 2`.
    pub fn from_side_by_side(img: &RgbImage, meta: CameraMeta, frame_id: u64) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w % 2 != 0 {
            return Err(Error::invalid(
                "side_by_side",
                format!("width {w} is not even"),
            ));
        }
        let half = w / 2;
        let left = image::imageops::crop_imm(img, 0, 0, half, h).to_image();
        let right = image::imageops::crop_imm(img, half, 0, half, h).to_image();
        Self::new(left, right, meta, frame_id)
    }

    pub fn to_side_by_side(&self) -> RgbImage {
        let (w, h) = self.left.dimensions();
        let mut out = RgbImage::new(2 * w, h);
        image::imageops::replace(&mut out, &self.left, 0, 0);
        image::imageops::replace(&mut out, &self.right, w as i64, 0);
        out
    }

    pub fn width(&self) -> usize {
        self.left.width() as usize
    }

    pub fn height(&self) -> usize {
        self.left.height() as usize
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
}
