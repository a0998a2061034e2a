use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, DatasetSpec, FrameEntry, Polarizers, Split, MANIFEST_FILE};
use super::{create_dir, process_frame, save_image, save_png, write_atomic, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{
    confusion, mean_metrics, metrics, range_counts, ConfusionCounts, MeanMetrics, Metrics, RangeCounts, RangeCurve,
    RangeFrame, TruthMask,
};
use crate::gmm::{classify, train_gmm, GmmModel, Provenance, SampleSet};
use crate::optics::curves::{emit_model_curves, CurveConfig};
use crate::raster::{read_mask_png, write_mask_png, Grid};
use crate::stereo::{GroundPlane, HorizonLine};
use crate::synth::render;

pub const WATER_MODEL: &str = "water.json";
pub const NOT_WATER_MODEL: &str = "not_water.json";
pub const DETECTIONS_FILE: &str = "detections.json";

/// Dry pixels drawn per training frame when it holds little water.
const MIN_DRY_PER_FRAME: usize = 1000;

fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn frame_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders every frame of a dataset spec into `out`: `frames/<id>.png`
/// (side by side), `masks/<id>.png` (0 dry / 255 water) and the manifest.
pub fn cmd_synth(spec_path: &Path, out: &Path) -> Result<DatasetManifest> {
    let spec = DatasetSpec::load(spec_path)?;
    synth_dataset(&spec, out)
}

pub fn synth_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    create_dir(&out.join("frames"))?;
    create_dir(&out.join("masks"))?;
    let frames = spec.frames();
    let entries = frames
        .par_iter()
        .enumerate()
        .map(|(i, (id, batch, scene))| {
            let f = render(scene, i as u64).map_err(|e| Error::Dataset(format!("frame {id}: {e}")))?;
            let image = PathBuf::from("frames").join(format!("{id}.png"));
            save_image(&out.join(&image), &f.frame.to_side_by_side())?;
            let mask = if batch.masks {
                let p = PathBuf::from("masks").join(format!("{id}.png"));
                save_image(&out.join(&p), &TruthMask::from_water(f.truth).to_gray())?;
                Some(p)
            } else {
                None
            };
            Ok(FrameEntry {
                id: id.clone(),
                image: Some(image),
                left: None,
                right: None,
                mask,
                split: batch.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        camera: spec.scene.meta(),
        polarizers: Polarizers::default(),
        frames: entries,
    };
    manifest.validate()?;
    write_atomic(&out.join(MANIFEST_FILE), manifest.to_toml().as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedFrame {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub frames_used: usize,
    pub skipped: Vec<SkippedFrame>,
    pub water_samples: usize,
    pub not_water_samples: usize,
}

/// Water pixels plus a same-sized random draw of dry pixels from one frame.
fn frame_samples(
    frame_index: usize,
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &PipelineConfig,
) -> Result<(SampleSet, SampleSet)> {
    let frame = manifest.load_frame(frame_index, root)?;
    let truth = manifest.load_truth(frame_index, root)?.expect("masked frame");
    let processed = process_frame(&frame, cfg)?;
    let desc = cfg.descriptor();
    let fm = &processed.features;
    let mut water = Vec::new();
    let mut dry = Vec::new();
    for (i, &ok) in fm.valid.as_slice().iter().enumerate() {
        if !ok || truth.ignore.as_slice()[i] {
            continue;
        }
        if truth.water.as_slice()[i] {
            water.push(i);
        } else {
            dry.push(i);
        }
    }
    let take = water.len().max(MIN_DRY_PER_FRAME).min(dry.len());
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(cfg.seed, frame_index));
    let mut picked = rand::seq::index::sample(&mut rng, dry.len(), take).into_vec();
    picked.sort_unstable();
    let collect = |idx: &mut dyn Iterator<Item = usize>| -> Result<SampleSet> {
        let mut set = SampleSet::new(desc.dim());
        for i in idx {
            set.push(&desc.vector(&fm.features.as_slice()[i]))?;
        }
        Ok(set)
    };
    Ok((
        collect(&mut water.iter().copied())?,
        collect(&mut picked.into_iter().map(|k| dry[k]))?,
    ))
}

/// Trains the water and not-water mixtures on the masked training frames
/// and writes them to `out`.
pub fn cmd_train(manifest_path: &Path, cfg: &PipelineConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest.check_files(&root)?;
    let frames: Vec<(usize, &FrameEntry)> =
        manifest.frames_in(Split::Train).filter(|(_, f)| f.mask.is_some()).collect();
    if frames.is_empty() {
        return Err(Error::Dataset("the train split has no masked frames".into()));
    }
    let results: Vec<(String, Result<(SampleSet, SampleSet)>)> = frames
        .par_iter()
        .map(|&(i, f)| (f.id.clone(), frame_samples(i, &manifest, &root, cfg)))
        .collect();
    let dim = cfg.descriptor().dim();
    let (mut water, mut dry) = (SampleSet::new(dim), SampleSet::new(dim));
    let mut skipped = Vec::new();
    let mut used = 0;
    for (id, r) in results {
        match r {
            Ok((w, d)) => {
                water.extend(&w)?;
                dry.extend(&d)?;
                used += 1;
            }
            Err(e @ (Error::NoGroundPlane(_) | Error::DegenerateHorizon)) => {
                log::warn!("train: skipping frame {id}: {e}");
                skipped.push(SkippedFrame {
                    id,
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let water = water.subsample(cfg.max_samples_per_class, cfg.seed);
    let dry = dry.subsample(cfg.max_samples_per_class, cfg.seed.wrapping_add(1));
    let hash = cfg.hash();
    let provenance = |class: &str| Provenance {
        class: class.into(),
        config_hash: hash.clone(),
        frames: used,
    };
    let desc = Some(cfg.descriptor());
    let (wm, dm) = rayon::join(
        || train_gmm(&water, desc, &cfg.gmm, cfg.seed),
        || train_gmm(&dry, desc, &cfg.gmm, cfg.seed.wrapping_add(1)),
    );
    let wm = wm?.with_provenance(provenance("water"));
    let dm = dm?.with_provenance(provenance("not_water"));
    create_dir(out)?;
    write_atomic(&out.join(WATER_MODEL), wm.to_json().as_bytes())?;
    write_atomic(&out.join(NOT_WATER_MODEL), dm.to_json().as_bytes())?;
    let summary = TrainSummary {
        config_hash: hash,
        frames_used: used,
        skipped,
        water_samples: water.len(),
        not_water_samples: dry.len(),
    };
    write_atomic(&out.join("train_summary.json"), &to_json(&summary))?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStatus {
    Ok,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub status: FrameStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<GroundPlane>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<HorizonLine>,
    /// Fraction of all pixels marked water.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub water_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub config_hash: String,
    pub frames: Vec<DetectionRecord>,
}

impl DetectionSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(DETECTIONS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            message: e.to_string(),
        })
    }

    pub fn skipped(&self) -> usize {
        self.frames.iter().filter(|r| r.status == FrameStatus::Skipped).count()
    }
}

pub fn load_model(path: &Path) -> Result<GmmModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GmmModel::from_json(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

fn detect_frame(
    index: usize,
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &PipelineConfig,
    models: (&GmmModel, &GmmModel),
    out: &Path,
) -> Result<DetectionRecord> {
    let id = &manifest.frames[index].id;
    let started = Instant::now();
    let frame = manifest.load_frame(index, root)?;
    let processed = match process_frame(&frame, cfg) {
        Ok(p) => p,
        Err(e @ (Error::NoGroundPlane(_) | Error::DegenerateHorizon)) => {
            log::warn!("detect: skipping frame {id}: {e}");
            return Ok(DetectionRecord {
                id: id.clone(),
                status: FrameStatus::Skipped,
                reason: Some(e.to_string()),
                plane: None,
                horizon: None,
                water_fraction: None,
            });
        }
        Err(e) => return Err(e),
    };
    let c = classify(&processed.features, models.0, models.1, cfg.threshold)?;
    save_png(&out.join(format!("{id}_mask.png")), |p| write_mask_png(p, &c.mask))?;
    save_png(&out.join(format!("{id}_valid.png")), |p| write_mask_png(p, &c.ratio.valid))?;
    save_image(&out.join(format!("{id}_ratio.png")), &c.ratio.to_gray())?;
    let plane = processed.plane;
    log::info!(
        "{}",
        serde_json::json!({
            "frame": id,
            "plane": [plane.a, plane.b, plane.c],
            "inlier_fraction": plane.inlier_fraction,
            "water_pixels": c.mask.count(),
            "millis": started.elapsed().as_millis() as u64,
        })
    );
    Ok(DetectionRecord {
        id: id.clone(),
        status: FrameStatus::Ok,
        reason: None,
        plane: Some(plane),
        horizon: Some(processed.horizon),
        water_fraction: Some(c.mask.count() as f64 / c.mask.as_slice().len() as f64),
    })
}

/// Classifies every test frame, writing `<id>_mask.png`, `<id>_valid.png`,
/// `<id>_ratio.png` and a `detections.json` summary to `out`.
pub fn cmd_detect(manifest_path: &Path, models: &Path, cfg: &PipelineConfig, out: &Path) -> Result<DetectionSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest.check_files(&root)?;
    let water = load_model(&models.join(WATER_MODEL))?;
    let dry = load_model(&models.join(NOT_WATER_MODEL))?;
    let want = cfg.descriptor();
    for m in [&water, &dry] {
        match m.descriptor() {
            Some(d) if d == want => {}
            Some(d) => return Err(Error::FeatureSetMismatch(want.set, d.set)),
            None => return Err(Error::invalid("model", "missing feature descriptor")),
        }
    }
    create_dir(out)?;
    let frames: Vec<usize> = manifest.frames_in(Split::Test).map(|(i, _)| i).collect();
    let records = frames
        .par_iter()
        .map(|&i| detect_frame(i, &manifest, &root, cfg, (&water, &dry), out))
        .collect::<Result<Vec<_>>>()?;
    let summary = DetectionSummary {
        config_hash: cfg.hash(),
        frames: records,
    };
    write_atomic(&out.join(DETECTIONS_FILE), &to_json(&summary))?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub id: String,
    pub status: FrameStatus,
    pub counts: ConfusionCounts,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub frames: usize,
    pub skipped: usize,
    pub counts: ConfusionCounts,
    pub pooled: Metrics,
    pub mean: MeanMetrics,
    pub range_curve: RangeCurve,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Dataset(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Dataset(format!("csv: {e}")))
}

fn eval_frame(
    index: usize,
    manifest: &DatasetManifest,
    root: &Path,
    record: &DetectionRecord,
    dir: &Path,
    edges: &[f64],
) -> Result<(FrameMetrics, RangeCounts)> {
    let id = &record.id;
    let truth = manifest.load_truth(index, root)?.expect("masked frame");
    let dims = truth.dims();
    let (pred, valid, plane) = match (record.status, record.plane) {
        (FrameStatus::Ok, Some(plane)) => {
            let pred = read_mask_png(&dir.join(format!("{id}_mask.png")))?;
            let valid = read_mask_png(&dir.join(format!("{id}_valid.png")))?;
            (pred, valid, Some(plane))
        }
        // a skipped frame predicts nothing anywhere
        _ => (Grid::new(dims.0, dims.1, false), Grid::new(dims.0, dims.1, true), None),
    };
    pred.ensure_dims(dims)
        .map_err(|e| Error::Dataset(format!("frame {id}: detection mask: {e}")))?;
    let counts = confusion(&pred, &truth, &valid)?;
    let range = match plane {
        Some(plane) => range_counts(
            &RangeFrame {
                pred: &pred,
                truth: &truth,
                valid: &valid,
                plane: &plane,
                meta: &manifest.camera,
            },
            edges,
        )?,
        None => RangeCounts::zeros(edges.len() - 1),
    };
    let m = FrameMetrics {
        id: id.clone(),
        status: record.status,
        counts,
        metrics: metrics(&counts).ok(),
    };
    Ok((m, range))
}

/// Scores detections against the masked test frames. Writes
/// `metrics_per_frame.csv`, `metrics.csv`, `summary.json` and
/// `range_curve.csv` to `out`.
pub fn cmd_eval(manifest_path: &Path, detections: &Path, cfg: &PipelineConfig, out: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_root(manifest_path);
    manifest.check_files(&root)?;
    let det = DetectionSummary::load(detections)?;
    let frames: Vec<(usize, &FrameEntry)> =
        manifest.frames_in(Split::Test).filter(|(_, f)| f.mask.is_some()).collect();
    let mut missing = Vec::new();
    let mut jobs = Vec::new();
    for &(i, f) in &frames {
        match det.frames.iter().find(|r| r.id == f.id) {
            Some(r) if r.status == FrameStatus::Skipped || detections.join(format!("{}_mask.png", f.id)).exists() => {
                jobs.push((i, r))
            }
            _ => missing.push(f.id.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("no detections for frames: {}", missing.join(", "))));
    }
    if jobs.is_empty() {
        return Err(Error::Dataset("the test split has no masked frames".into()));
    }
    let edges = &cfg.bin_edges;
    let results = jobs
        .par_iter()
        .map(|&(i, r)| eval_frame(i, &manifest, &root, r, detections, edges))
        .collect::<Result<Vec<_>>>()?;
    let mut range = RangeCounts::zeros(edges.len() - 1);
    for (_, r) in &results {
        range.merge(r);
    }
    let per_frame: Vec<FrameMetrics> = results.into_iter().map(|(m, _)| m).collect();
    let counts: ConfusionCounts = per_frame.iter().map(|m| m.counts).sum();
    let pooled = metrics(&counts)?;
    let mean = mean_metrics(&per_frame.iter().filter_map(|m| m.metrics).collect::<Vec<_>>());
    let curve = RangeCurve::from_counts(&range, edges)?;

    create_dir(out)?;
    let rows: Vec<Vec<String>> = per_frame
        .iter()
        .map(|m| {
            let c = m.counts;
            vec![
                m.id.clone(),
                serde_json::to_value(m.status).unwrap().as_str().unwrap().to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.tn.to_string(),
                c.fn_.to_string(),
                opt(m.metrics.map(|x| x.accuracy)),
                opt(m.metrics.and_then(|x| x.recall)),
                opt(m.metrics.and_then(|x| x.precision)),
            ]
        })
        .collect();
    let header = ["frame", "status", "tp", "fp", "tn", "fn", "accuracy", "recall", "precision"];
    write_atomic(&out.join("metrics_per_frame.csv"), &csv_bytes(&header, &rows)?)?;
    let agg = vec![
        vec![
            "pooled".to_string(),
            pooled.accuracy.to_string(),
            opt(pooled.recall),
            opt(pooled.precision),
            per_frame.len().to_string(),
        ],
        vec![
            "mean".to_string(),
            opt(mean.accuracy),
            opt(mean.recall),
            opt(mean.precision),
            mean.frames.to_string(),
        ],
    ];
    write_atomic(
        &out.join("metrics.csv"),
        &csv_bytes(&["scope", "accuracy", "recall", "precision", "frames"], &agg)?,
    )?;
    write_atomic(&out.join("range_curve.csv"), curve.to_csv().as_bytes())?;
    let summary = EvalSummary {
        frames: per_frame.len(),
        skipped: per_frame.iter().filter(|m| m.status == FrameStatus::Skipped).count(),
        counts,
        pooled,
        mean,
        range_curve: curve,
    };
    write_atomic(&out.join("summary.json"), &to_json(&summary))?;
    Ok(summary)
}

/// Writes the sky-polarization and water-reflection model curves.
pub fn cmd_curves(out: &Path) -> Result<[PathBuf; 2]> {
    create_dir(out)?;
    emit_model_curves(&CurveConfig::default(), out)
}
