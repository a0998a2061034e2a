//! End-to-end orchestration: configuration, the per-frame algorithm and the
//! `synth` / `train` / `detect` / `eval` / `curves` commands.

mod commands;
mod dataset;

pub use commands::{
    cmd_curves, cmd_detect, cmd_eval, cmd_synth, cmd_train, load_model, synth_dataset, DetectionRecord,
    DetectionSummary, EvalSummary, FrameMetrics, FrameStatus, SkippedFrame, TrainSummary, DETECTIONS_FILE,
    NOT_WATER_MODEL, WATER_MODEL,
};
pub use dataset::{
    import_directory, BatchLayout, BatchSpec, DatasetManifest, DatasetSpec, FrameEntry, PolarizerAxis, Polarizers, RandomPuddles,
    Split, MANIFEST_FILE,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::default_bin_edges;
use crate::features::{extract_features, FeatureMap, FeatureSet};
use crate::geometry::{angle_maps, CameraIntrinsics};
use crate::gmm::{FeatureDescriptor, GmmTrainConfig};
use crate::stereo::{
    compute_disparity, fit_ground_plane, horizon_line, warp_right_to_left, GroundPlane, HorizonLine, PlaneFitParams,
    PolarizedStereoFrame, RoiTriangle, StereoParams, WarpMode,
};

/// Plane-fit triangle relative to the image: apex `apex_below * height`
/// under the principal point row, base along the bottom row inset by
/// `base_margin * width` on both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiConfig {
    pub apex_below: f64,
    pub base_margin: f64,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            apex_below: 0.15,
            base_margin: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stereo: StereoParams,
    pub roi: RoiConfig,
    pub plane: PlaneFitParams,
    /// Frames whose plane explains less than this fraction of the ROI
    /// disparities are skipped.
    pub min_inlier_fraction: f64,
    pub warp: WarpMode,
    /// Pixels whose ground-plane distance exceeds this many meters are
    /// left unclassified.
    pub max_distance: f64,
    pub gmm: GmmTrainConfig,
    pub feature_set: FeatureSet,
    pub with_hue: bool,
    /// Likelihood-ratio threshold; water where the ratio exceeds it.
    pub threshold: f64,
    /// Per-class cap on pooled training samples.
    pub max_samples_per_class: usize,
    pub bin_edges: Vec<f64>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stereo: StereoParams::default(),
            roi: RoiConfig::default(),
            plane: PlaneFitParams::default(),
            min_inlier_fraction: 0.2,
            warp: WarpMode::Bilinear,
            max_distance: 100.0,
            gmm: GmmTrainConfig::default(),
            feature_set: FeatureSet::WithAzimuth,
            with_hue: false,
            threshold: 1.0,
            max_samples_per_class: 20_000,
            bin_edges: default_bin_edges(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stereo.validate()?;
        self.plane.validate()?;
        self.gmm.validate()?;
        if !(0.0..1.0).contains(&self.roi.apex_below) {
            return Err(Error::invalid("roi.apex_below", "must lie in [0, 1)"));
        }
        if !(0.0..0.5).contains(&self.roi.base_margin) {
            return Err(Error::invalid("roi.base_margin", "must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_fraction) {
            return Err(Error::invalid("min_inlier_fraction", "must lie in [0, 1]"));
        }
        if !(self.max_distance > 0.0) {
            return Err(Error::invalid("max_distance", "must be positive"));
        }
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::invalid("threshold", "must be finite and non-negative"));
        }
        if self.max_samples_per_class == 0 {
            return Err(Error::invalid("max_samples_per_class", "must be positive"));
        }
        if self.bin_edges.len() < 2 || self.bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("bin_edges", "need at least two strictly increasing edges"));
        }
        Ok(())
    }

    pub fn descriptor(&self) -> FeatureDescriptor {
        FeatureDescriptor::new(self.feature_set, self.with_hue)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Result of steps 1-5 on one frame.
#[derive(Clone, Debug)]
pub struct ProcessedFrame {
    pub plane: GroundPlane,
    pub horizon: HorizonLine,
    pub features: FeatureMap,
}

/// Disparity, robust ground plane, horizon, angle maps, warp and features.
/// Features are valid only on ground within `max_distance`.
pub fn process_frame(frame: &PolarizedStereoFrame, cfg: &PipelineConfig) -> Result<ProcessedFrame> {
    let (w, h) = frame.dims();
    let disp = compute_disparity(frame, &cfg.stereo)?;
    let roi = RoiTriangle::with_fractions(
        w as f64,
        h as f64,
        frame.meta.principal_point.1,
        cfg.roi.apex_below,
        cfg.roi.base_margin,
    );
    let plane = fit_ground_plane(&disp, &roi, &cfg.plane)?;
    if plane.inlier_fraction < cfg.min_inlier_fraction {
        return Err(Error::NoGroundPlane(format!(
            "inlier fraction {:.3} below {}",
            plane.inlier_fraction, cfg.min_inlier_fraction
        )));
    }
    let horizon = horizon_line(&plane, w)?;
    let (u_c, v_c) = frame.meta.principal_point;
    let intr = CameraIntrinsics::new(frame.meta.focal_length, u_c, v_c)?;
    let angles = angle_maps(&intr, &horizon, (w, h))?;
    let warped = warp_right_to_left(frame, &plane, cfg.warp);
    let mut features = extract_features(&warped, &angles)?;
    let min_disparity = frame.meta.focal_length * frame.meta.baseline / cfg.max_distance;
    for v in 0..h {
        for u in 0..w {
            if plane.disparity_at(u as f64, v as f64) < min_disparity {
                features.valid.set(u, v, false);
            }
        }
    }
    Ok(ProcessedFrame {
        plane,
        horizon,
        features,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn save_png(path: &Path, save: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp.png");
    save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn save_image<P, C>(path: &Path, img: &image::ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    save_png(path, |tmp| {
        img.save_with_format(tmp, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: tmp.to_path_buf(),
                source,
            })
    })
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_hash() {
        let mut cfg = PipelineConfig::default();
        cfg.stereo.max_disparity = 24;
        cfg.feature_set = FeatureSet::WithoutAzimuth;
        let text = cfg.to_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(PipelineConfig::default().hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PipelineConfig::default();
        cfg.threshold = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PipelineConfig::default();
        cfg.bin_edges = vec![0.0, 0.0];
        assert!(cfg.validate().is_err());
        let partial: PipelineConfig = toml::from_str("threshold = 2.0\n[gmm]\nclusters = 3\n").unwrap();
        assert_eq!(partial.gmm.clusters, 3);
        assert_eq!(partial.gmm.max_iterations, 300);
        assert!(toml::from_str::<PipelineConfig>("bogus = 1").is_err());
    }
}
