//! Pixelwise confusion metrics and distance-binned detection rates.

use std::ops::{Add, AddAssign};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};
use crate::stereo::{pixel_distance, CameraMeta, GroundPlane};

/// Truth-mask gray levels.
pub const TRUTH_DRY: u8 = 0;
pub const TRUTH_WATER: u8 = 255;
pub const TRUTH_IGNORE: u8 = 128;

/// Ground truth with an optional "ignore" label (e.g. wet but not pooled).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthMask {
    pub water: Mask,
    pub ignore: Mask,
}

impl TruthMask {
    pub fn from_water(water: Mask) -> Self {
        let (w, h) = water.dims();
        Self {
            water,
            ignore: Grid::new(w, h, false),
        }
    }

    /// 0 = dry, 128 = ignore, 255 = water; other levels go to the nearest.
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let level = |u: usize, v: usize| img.get_pixel(u as u32, v as u32)[0];
        Self {
            water: Grid::from_fn(w, h, |u, v| level(u, v) >= 192),
            ignore: Grid::from_fn(w, h, |u, v| (64..192).contains(&level(u, v))),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.water.width() as u32, self.water.height() as u32, |u, v| {
            let (u, v) = (u as usize, v as usize);
            image::Luma([if *self.ignore.get(u, v) {
                TRUTH_IGNORE
            } else if *self.water.get(u, v) {
                TRUTH_WATER
            } else {
                TRUTH_DRY
            }])
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.water.dims()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts over pixels that are valid and not labeled "ignore".
pub fn confusion(pred: &Mask, truth: &TruthMask, valid: &Mask) -> Result<ConfusionCounts> {
    let dims = pred.dims();
    truth.water.ensure_dims(dims)?;
    truth.ignore.ensure_dims(dims)?;
    valid.ensure_dims(dims)?;
    let mut c = ConfusionCounts::default();
    let cells = pred
        .as_slice()
        .iter()
        .zip(truth.water.as_slice())
        .zip(truth.ignore.as_slice())
        .zip(valid.as_slice());
    for (((&p, &t), &ign), &ok) in cells {
        if !ok || ign {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Ratios with a zero denominator are `None`, not 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    let total = c.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / total as f64,
        recall: ratio(c.tp, c.tp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
    })
}

/// Unweighted mean over frames of each metric that is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub frames: usize,
}

pub fn mean_metrics(per_frame: &[Metrics]) -> MeanMetrics {
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    MeanMetrics {
        accuracy: mean(per_frame.iter().map(|m| m.accuracy).collect()),
        recall: mean(per_frame.iter().filter_map(|m| m.recall).collect()),
        precision: mean(per_frame.iter().filter_map(|m| m.precision).collect()),
        frames: per_frame.len(),
    }
}

/// Distance bin edges `0, 5, ..., 105` meters.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=21).map(|i| 5.0 * i as f64).collect()
}

/// Per-bin true detections and misses of ground-truth water.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeCounts {
    pub tp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl RangeCounts {
    pub fn zeros(bins: usize) -> Self {
        Self {
            tp: vec![0; bins],
            fn_: vec![0; bins],
        }
    }

    pub fn merge(&mut self, o: &RangeCounts) {
        self.tp.iter_mut().zip(&o.tp).for_each(|(a, b)| *a += b);
        self.fn_.iter_mut().zip(&o.fn_).for_each(|(a, b)| *a += b);
    }
}

/// One frame's inputs for [`range_counts`].
#[derive(Clone, Copy)]
pub struct RangeFrame<'a> {
    pub pred: &'a Mask,
    pub truth: &'a TruthMask,
    pub valid: &'a Mask,
    pub plane: &'a GroundPlane,
    pub meta: &'a CameraMeta,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("bin_edges", "need at least two strictly increasing edges"));
    }
    Ok(())
}

/// Bins each evaluated ground-truth water pixel by its plane distance.
pub fn range_counts(frame: &RangeFrame<'_>, edges: &[f64]) -> Result<RangeCounts> {
    check_edges(edges)?;
    let dims = frame.pred.dims();
    frame.truth.water.ensure_dims(dims)?;
    frame.valid.ensure_dims(dims)?;
    let mut out = RangeCounts::zeros(edges.len() - 1);
    for v in 0..dims.1 {
        for u in 0..dims.0 {
            if !*frame.truth.water.get(u, v) || *frame.truth.ignore.get(u, v) || !*frame.valid.get(u, v) {
                continue;
            }
            let Some(z) = pixel_distance(frame.plane, frame.meta, u as f64, v as f64) else {
                continue;
            };
            // bins are [lo, hi)
            let idx = edges.partition_point(|&e| e <= z);
            if idx == 0 || idx == edges.len() {
                continue;
            }
            if *frame.pred.get(u, v) {
                out.tp[idx - 1] += 1;
            } else {
                out.fn_[idx - 1] += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub lo: f64,
    pub hi: f64,
    /// `tp / (tp + fn)`; `None` when the bin holds no water.
    pub rate: Option<f64>,
    pub support: u64,
}

impl RangeBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeCurve {
    pub bins: Vec<RangeBin>,
}

impl RangeCurve {
    pub fn from_counts(counts: &RangeCounts, edges: &[f64]) -> Result<Self> {
        check_edges(edges)?;
        if counts.tp.len() != edges.len() - 1 {
            return Err(Error::invalid("bin_edges", "does not match the counts"));
        }
        let bins = edges
            .windows(2)
            .zip(counts.tp.iter().zip(&counts.fn_))
            .map(|(e, (&tp, &fn_))| {
                let support = tp + fn_;
                RangeBin {
                    lo: e[0],
                    hi: e[1],
                    rate: (support > 0).then(|| tp as f64 / support as f64),
                    support,
                }
            })
            .collect();
        Ok(Self { bins })
    }

    /// Support-weighted rate over bins overlapping `[lo, hi)`.
    pub fn pooled_rate(&self, lo: f64, hi: f64) -> Option<f64> {
        let (mut hit, mut all) = (0.0, 0u64);
        for b in self.bins.iter().filter(|b| b.lo < hi && b.hi > lo) {
            if let Some(r) = b.rate {
                hit += r * b.support as f64;
                all += b.support;
            }
        }
        (all > 0).then(|| hit / all as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_center", "rate", "support"]).expect("in-memory write");
        for b in &self.bins {
            let rate = b.rate.map(|r| r.to_string()).unwrap_or_default();
            w.write_record([b.center().to_string(), rate, b.support.to_string()])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Range curve over several frames; order-independent.
pub fn range_curve(frames: &[RangeFrame<'_>], edges: &[f64]) -> Result<RangeCurve> {
    let mut total = RangeCounts::zeros(edges.len().saturating_sub(1));
    for f in frames {
        total.merge(&range_counts(f, edges)?);
    }
    RangeCurve::from_counts(&total, edges)
}
