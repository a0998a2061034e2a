//! Color/angle features on warped correspondences.

use image::{Rgb, Rgb32FImage};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::AngleMaps;
use crate::raster::{Grid, Mask};
use crate::stereo::WarpedPair;

/// Which angle features enter the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    /// `(sat_left, sat_right, value_left, theta)`
    WithoutAzimuth,
    /// `(sat_left, sat_right, value_left, theta, |psi|)`
    WithAzimuth,
    /// As [`FeatureSet::WithAzimuth`] but keeping the sign of psi.
    WithSignedAzimuth,
}

impl FeatureSet {
    pub fn dim(self) -> usize {
        match self {
            FeatureSet::WithoutAzimuth => 4,
            FeatureSet::WithAzimuth | FeatureSet::WithSignedAzimuth => 5,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "without-azimuth" => Some(FeatureSet::WithoutAzimuth),
            "with-azimuth" => Some(FeatureSet::WithAzimuth),
            "with-signed-azimuth" => Some(FeatureSet::WithSignedAzimuth),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::WithoutAzimuth => "without-azimuth",
            FeatureSet::WithAzimuth => "with-azimuth",
            FeatureSet::WithSignedAzimuth => "with-signed-azimuth",
        }
    }
}

impl std::fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hsv {
    /// Degrees in `[0, 360)`.
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

/// HSV of an RGB triple with channels in `[0, 1]`.
pub fn rgb_to_hsv(p: Rgb<f32>) -> Hsv {
    let [r, g, b] = p.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    Hsv { h, s, v: max }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub sat_left: f64,
    pub sat_right: f64,
    pub value_left: f64,
    pub theta: f64,
    /// Signed azimuth; [`FeatureVector::to_vec`] decides how it is used.
    pub psi: f64,
    pub hue_left: f64,
}

impl FeatureVector {
    /// Classifier input for the chosen feature set, optionally with the
    /// left hue (degrees) appended.
    pub fn to_vec(&self, set: FeatureSet, with_hue: bool) -> Vec<f64> {
        let mut out = vec![self.sat_left, self.sat_right, self.value_left, self.theta];
        match set {
            FeatureSet::WithoutAzimuth => {}
            FeatureSet::WithAzimuth => out.push(self.psi.abs()),
            FeatureSet::WithSignedAzimuth => out.push(self.psi),
        }
        if with_hue {
            out.push(self.hue_left);
        }
        out
    }
}

/// Per-pixel features plus the mask of pixels where they are defined
/// (below the horizon and covered by the warp).
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub features: Grid<FeatureVector>,
    pub valid: Mask,
}

fn hsv_at(img: &Rgb32FImage, u: usize, v: usize) -> Hsv {
    rgb_to_hsv(*img.get_pixel(u as u32, v as u32))
}

pub fn extract_features(warped: &WarpedPair, angles: &AngleMaps) -> Result<FeatureMap> {
    let dims = (warped.left.width() as usize, warped.left.height() as usize);
    angles.theta.ensure_dims(dims)?;
    warped.coverage.ensure_dims(dims)?;
    let valid = angles.below_horizon.and(&warped.coverage)?;
    let features = Grid::from_fn(dims.0, dims.1, |u, v| {
        if !*valid.get(u, v) {
            return FeatureVector::default();
        }
        let l = hsv_at(&warped.left, u, v);
        let r = hsv_at(&warped.right_warped, u, v);
        FeatureVector {
            sat_left: l.s as f64,
            sat_right: r.s as f64,
            value_left: l.v as f64,
            theta: *angles.theta.get(u, v),
            psi: *angles.psi.get(u, v),
            hue_left: l.h as f64,
        }
    });
    assert!(
        features.as_slice().iter().all(|f| {
            [f.sat_left, f.sat_right, f.value_left]
                .iter()
                .all(|x| (0.0..=1.0).contains(x))
        }),
        "saturation/value outside [0, 1]"
    );
    Ok(FeatureMap { features, valid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook hexcone conversion written independently of `rgb_to_hsv`.
    fn reference_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
        let v = r.max(g).max(b);
        let c = v - r.min(g).min(b);
        let s = if v == 0.0 { 0.0 } else { c / v };
        let h = if c == 0.0 {
            0.0
        } else {
            let hp = if v == r {
                ((g - b) / c) % 6.0
            } else if v == g {
                (b - r) / c + 2.0
            } else {
                (r - g) / c + 4.0
            };
            let deg = 60.0 * hp;
            if deg < 0.0 { deg + 360.0 } else { deg }
        };
        (h, s, v)
    }

    #[test]
    fn published_vectors() {
        // (r, g, b) -> (h, s, v), standard sRGB HSV table values
        let cases: [([f32; 3], [f32; 3]); 8] = [
            ([1.0, 0.0, 0.0], [0.0, 1.0, 1.0]),
            ([0.0, 1.0, 0.0], [120.0, 1.0, 1.0]),
            ([0.0, 0.0, 1.0], [240.0, 1.0, 1.0]),
            ([1.0, 1.0, 0.0], [60.0, 1.0, 1.0]),
            ([0.5, 0.5, 0.5], [0.0, 0.0, 0.5]),
            ([0.5, 1.0, 1.0], [180.0, 0.5, 1.0]),
            ([0.5, 0.0, 0.5], [300.0, 1.0, 0.5]),
            ([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
        ];
        for (rgb, [h, s, v]) in cases {
            let out = rgb_to_hsv(Rgb(rgb));
            assert!((out.h - h).abs() < 1e-4 && (out.s - s).abs() < 1e-6 && (out.v - v).abs() < 1e-6, "{rgb:?}");
            let (rh, rs, rv) = reference_hsv(rgb[0] as f64, rgb[1] as f64, rgb[2] as f64);
            assert!((rh - h as f64).abs() < 1e-4 && (rs - s as f64).abs() < 1e-6 && (rv - v as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn gray_and_primary() {
        let gray = rgb_to_hsv(Rgb([0.3, 0.3, 0.3]));
        assert_eq!(gray.s, 0.0);
        let blue = rgb_to_hsv(Rgb([0.0, 0.0, 1.0]));
        assert_eq!((blue.s, blue.v), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn matches_reference(r in 0u8..=255, g in 0u8..=255, b in 0u8..=255) {
            let (rf, gf, bf) = (r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0);
            let out = rgb_to_hsv(Rgb([rf, gf, bf]));
            let (h, s, v) = reference_hsv(rf as f64, gf as f64, bf as f64);
            prop_assert!((out.s as f64 - s).abs() < 1e-6);
            prop_assert!((out.v as f64 - v).abs() < 1e-6);
            let dh = (out.h as f64 - h).abs();
            prop_assert!(dh < 1e-3 || (dh - 360.0).abs() < 1e-3);
            prop_assert!((0.0..=1.0).contains(&out.s) && (0.0..=1.0).contains(&out.v));
        }
    }

    #[test]
    fn extract_on_valid_pixels_only() {
        let left = Rgb32FImage::from_fn(3, 2, |u, _| {
            if u == 0 { Rgb([0.0, 0.0, 1.0]) } else { Rgb([0.4, 0.4, 0.4]) }
        });
        let right = Rgb32FImage::from_fn(3, 2, |_, _| Rgb([0.2, 0.2, 0.2]));
        let mut coverage = Grid::new(3, 2, true);
        coverage.set(2, 1, false);
        let warped = WarpedPair { left, right_warped: right, coverage };
        let below = Grid::from_fn(3, 2, |_, v| v == 1);
        let angles = AngleMaps {
            theta: Grid::new(3, 2, 1.2),
            psi: Grid::new(3, 2, -0.3),
            below_horizon: below,
        };
        let map = extract_features(&warped, &angles).unwrap();
        assert_eq!(map.valid.count(), 2);
        let blue = map.features.get(0, 1);
        assert_eq!((blue.sat_left, blue.value_left, blue.sat_right), (1.0, 1.0, 0.0));
        assert_eq!((blue.theta, blue.psi), (1.2, -0.3));
        let grey = map.features.get(1, 1);
        assert_eq!((grey.sat_left, grey.sat_right), (0.0, 0.0));
        assert_eq!(*map.features.get(1, 0), FeatureVector::default());

        let wrong = AngleMaps {
            theta: Grid::new(2, 2, 0.0),
            psi: Grid::new(2, 2, 0.0),
            below_horizon: Grid::new(2, 2, true),
        };
        assert!(extract_features(&warped, &wrong).is_err());
    }

    #[test]
    fn feature_sets() {
        let f = FeatureVector {
            sat_left: 0.1,
            sat_right: 0.2,
            value_left: 0.3,
            theta: 1.0,
            psi: -0.5,
            hue_left: 200.0,
        };
        assert_eq!(f.to_vec(FeatureSet::WithoutAzimuth, false), vec![0.1, 0.2, 0.3, 1.0]);
        assert_eq!(f.to_vec(FeatureSet::WithAzimuth, false), vec![0.1, 0.2, 0.3, 1.0, 0.5]);
        assert_eq!(f.to_vec(FeatureSet::WithSignedAzimuth, true), vec![0.1, 0.2, 0.3, 1.0, -0.5, 200.0]);
        for set in [FeatureSet::WithoutAzimuth, FeatureSet::WithAzimuth, FeatureSet::WithSignedAzimuth] {
            assert_eq!(FeatureSet::parse(set.name()), Some(set));
        }
    }
}
