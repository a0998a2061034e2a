//! Gaussian mixture models for the water / not-water likelihood ratio.
//!
//! Densities are evaluated in log space through per-cluster Cholesky
//! factors, so the ratio of two mixtures never degenerates to `0 / 0`.

use image::GrayImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSet, FeatureVector};
use crate::raster::{Grid, Mask};

pub const MODEL_FORMAT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const COLLAPSE_WEIGHT: f64 = 1e-8;
/// Fixed chunking keeps parallel reductions bit-reproducible.
const CHUNK: usize = 4096;

/// Which classifier inputs a model was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub set: FeatureSet,
    #[serde(default)]
    pub with_hue: bool,
}

impl FeatureDescriptor {
    pub fn new(set: FeatureSet, with_hue: bool) -> Self {
        Self { set, with_hue }
    }

    pub fn dim(&self) -> usize {
        self.set.dim() + self.with_hue as usize
    }

    pub fn vector(&self, f: &FeatureVector) -> Vec<f64> {
        f.to_vec(self.set, self.with_hue)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    #[default]
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmTrainConfig {
    pub clusters: usize,
    pub covariance: CovarianceKind,
    /// Lower bound on every covariance eigenvalue.
    pub floor: f64,
    /// Stop once the relative log-likelihood change drops below this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self {
            clusters: 5,
            covariance: CovarianceKind::Full,
            floor: 1e-6,
            tolerance: 1e-6,
            max_iterations: 300,
        }
    }
}

impl GmmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::invalid("clusters", "must be at least 1"));
        }
        if !(self.floor > 0.0) {
            return Err(Error::invalid("floor", "must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance", "must be non-negative"));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
}

/// Training provenance stored with a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub config: GmmTrainConfig,
    pub seed: u64,
    pub samples: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihood: Vec<f64>,
}

/// Where a model came from, written next to the parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub class: String,
    /// SHA-256 of the pipeline configuration.
    pub config_hash: String,
    pub frames: usize,
}

#[derive(Clone, Debug)]
struct Factor {
    /// Lower Cholesky factor, row-major.
    chol: Vec<f64>,
    /// `ln(pi_k) - (d ln(2 pi) + ln|S_k|) / 2`
    log_norm: f64,
}

impl Factor {
    fn new(c: &Cluster, dim: usize, idx: usize) -> Result<Self> {
        let s = DMatrix::from_row_slice(dim, dim, &c.covariance);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::invalid(format!("clusters[{idx}].covariance"), "not positive-definite"))?;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mut flat = vec![0.0; dim * dim];
        for r in 0..dim {
            for col in 0..=r {
                flat[r * dim + col] = l[(r, col)];
            }
        }
        Ok(Self {
            chol: flat,
            log_norm: c.weight.ln() - 0.5 * (dim as f64 * LN_2PI + log_det),
        })
    }

    /// `ln(pi_k N(x; a_k, S_k))`
    #[inline]
    fn log_component(&self, mean: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = mean.len();
        let mut maha = 0.0;
        // forward substitution L z = x - a
        for r in 0..d {
            let row = &self.chol[r * d..r * d + r + 1];
            let mut acc = x[r] - mean[r];
            for (c, l) in row[..r].iter().enumerate() {
                acc -= l * scratch[c];
            }
            let z = acc / row[r];
            scratch[r] = z;
            maha += z * z;
        }
        self.log_norm - 0.5 * maha
    }
}

/// Weighted sum of Gaussians; serialized as a versioned JSON document.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub struct GmmModel {
    dim: usize,
    descriptor: Option<FeatureDescriptor>,
    clusters: Vec<Cluster>,
    training: Option<TrainingInfo>,
    provenance: Option<Provenance>,
    factors: Vec<Factor>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<FeatureDescriptor>,
    clusters: Vec<Cluster>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl TryFrom<ModelDocument> for GmmModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(
                "format_version",
                format!("unsupported version {}", doc.format_version),
            ));
        }
        let mut model = GmmModel::new(doc.dim, doc.features, doc.clusters)?;
        model.training = doc.training;
        model.provenance = doc.provenance;
        Ok(model)
    }
}

impl From<GmmModel> for ModelDocument {
    fn from(m: GmmModel) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            dim: m.dim,
            features: m.descriptor,
            clusters: m.clusters,
            training: m.training,
            provenance: m.provenance,
        }
    }
}

impl GmmModel {
    /// Validates weights (positive, summing to one) and covariances
    /// (symmetric positive-definite) and precomputes the factors.
    pub fn new(dim: usize, descriptor: Option<FeatureDescriptor>, clusters: Vec<Cluster>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if let Some(desc) = descriptor {
            if desc.dim() != dim {
                return Err(Error::invalid(
                    "dim",
                    format!("{dim} does not match feature descriptor ({})", desc.dim()),
                ));
            }
        }
        if clusters.is_empty() {
            return Err(Error::invalid("clusters", "empty mixture"));
        }
        let total: f64 = clusters.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("clusters.weight", format!("weights sum to {total}")));
        }
        let mut factors = Vec::with_capacity(clusters.len());
        for (i, c) in clusters.iter().enumerate() {
            if !(c.weight > 0.0) {
                return Err(Error::invalid(format!("clusters[{i}].weight"), "must be positive"));
            }
            if c.mean.len() != dim || c.covariance.len() != dim * dim {
                return Err(Error::invalid(format!("clusters[{i}]"), "wrong dimension"));
            }
            if c.mean.iter().chain(&c.covariance).any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("clusters[{i}]"), "non-finite value"));
            }
            for r in 0..dim {
                for col in 0..r {
                    let (a, b) = (c.covariance[r * dim + col], c.covariance[col * dim + r]);
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::invalid(format!("clusters[{i}].covariance"), "not symmetric"));
                    }
                }
            }
            factors.push(Factor::new(c, dim, i)?);
        }
        Ok(Self {
            dim,
            descriptor,
            clusters,
            training: None,
            provenance: None,
            factors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptor(&self) -> Option<FeatureDescriptor> {
        self.descriptor
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn training(&self) -> Option<&TrainingInfo> {
        self.training.as_ref()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "feature dimension");
        let mut scratch = [0.0; 16];
        let mut heap;
        let scratch: &mut [f64] = if self.dim <= 16 {
            &mut scratch[..self.dim]
        } else {
            heap = vec![0.0; self.dim];
            &mut heap
        };
        let mut terms = [0.0; 16];
        let mut heap_terms;
        let terms: &mut [f64] = if self.clusters.len() <= 16 {
            &mut terms[..self.clusters.len()]
        } else {
            heap_terms = vec![0.0; self.clusters.len()];
            &mut heap_terms
        };
        for ((t, f), c) in terms.iter_mut().zip(&self.factors).zip(&self.clusters) {
            *t = f.log_component(&c.mean, x, scratch);
        }
        log_sum_exp(terms)
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            path: "<model>".into(),
            message: e.to_string(),
        })
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Mixture density `sum_k pi_k N(x; a_k, S_k)`.
///
/// The value is `exp` of [`GmmModel::log_density`]; far outside the mixture
/// (beyond ~38 standard deviations) the `f64` result underflows, so use the
/// log form for ratios.
pub fn gmm_density(model: &GmmModel, x: &[f64]) -> f64 {
    model.log_density(x).exp()
}

/// Row-major sample matrix.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
}

impl SampleSet {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        let mut set = Self::new(dim);
        for r in rows {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::invalid("sample", format!("length {} != {}", row.len(), self.dim)));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &SampleSet) -> Result<()> {
        if other.dim != self.dim && !other.is_empty() {
            return Err(Error::invalid("sample", "dimension mismatch"));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Seeded subsample without replacement, keeping the original order.
    pub fn subsample(&self, max: usize, seed: u64) -> SampleSet {
        let n = self.len();
        if n <= max {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
        idx.sort_unstable();
        let mut out = SampleSet::new(self.dim);
        for i in idx {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding; stops early when every sample coincides with a
/// chosen center.
fn kmeans_pp(samples: &SampleSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = samples.len();
    let first = rng.random_range(0..n);
    let mut centers = vec![samples.row(first).to_vec()];
    let mut d2: Vec<f64> = samples.rows().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        let c = samples.row(pick).to_vec();
        for (i, x) in samples.rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Maximizes the Gaussian likelihood subject to every eigenvalue being at
/// least `floor` (eigenvalue clipping), which keeps EM monotone.
fn constrain_covariance(s: &mut [f64], dim: usize, kind: CovarianceKind, floor: f64) {
    match kind {
        CovarianceKind::Diagonal => {
            for r in 0..dim {
                for c in 0..dim {
                    if r != c {
                        s[r * dim + c] = 0.0;
                    }
                }
                s[r * dim + r] = s[r * dim + r].max(floor);
            }
        }
        CovarianceKind::Full => {
            let m = DMatrix::from_row_slice(dim, dim, s);
            let eig = SymmetricEigen::new(m);
            let vals = eig.eigenvalues.map(|l| l.max(floor));
            let rec = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
            for r in 0..dim {
                for c in 0..dim {
                    s[r * dim + c] = 0.5 * (rec[(r, c)] + rec[(c, r)]);
                }
            }
        }
    }
}

/// Weighted mean/covariance per cluster from responsibilities
/// `resp[i * k + j]`.
fn m_step(samples: &SampleSet, resp: &[f64], k: usize, cfg: &GmmTrainConfig) -> Vec<Cluster> {
    let d = samples.dim();
    let n = samples.len();
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut nk = vec![0.0; k];
            let mut sx = vec![0.0; k * d];
            for i in start..end {
                let x = samples.row(i);
                for j in 0..k {
                    let r = resp[i * k + j];
                    nk[j] += r;
                    for (s, xv) in sx[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *s += r * xv;
                    }
                }
            }
            (nk, sx)
        })
        .collect();
    let mut nk = vec![0.0; k];
    let mut means = vec![0.0; k * d];
    for (pn, ps) in &partial {
        nk.iter_mut().zip(pn).for_each(|(a, b)| *a += b);
        means.iter_mut().zip(ps).for_each(|(a, b)| *a += b);
    }
    for j in 0..k {
        if nk[j] > 0.0 {
            means[j * d..(j + 1) * d].iter_mut().for_each(|m| *m /= nk[j]);
        }
    }
    let partial: Vec<Vec<f64>> = (0..n)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(n);
            let mut cov = vec![0.0; k * d * d];
            let mut diff = vec![0.0; d];
            for i in start..end {
                let x = samples.row(i);
                for j in 0..k {
                    let r = resp[i * k + j];
                    if r == 0.0 {
                        continue;
                    }
                    for (t, (xv, mv)) in diff.iter_mut().zip(x.iter().zip(&means[j * d..(j + 1) * d])) {
                        *t = xv - mv;
                    }
                    let block = &mut cov[j * d * d..(j + 1) * d * d];
                    for a in 0..d {
                        let ra = r * diff[a];
                        for b in 0..=a {
                            block[a * d + b] += ra * diff[b];
                        }
                    }
                }
            }
            cov
        })
        .collect();
    let mut cov = vec![0.0; k * d * d];
    for p in &partial {
        cov.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    (0..k)
        .map(|j| {
            let mut s = cov[j * d * d..(j + 1) * d * d].to_vec();
            for a in 0..d {
                for b in 0..=a {
                    let v = if nk[j] > 0.0 { s[a * d + b] / nk[j] } else { 0.0 };
                    s[a * d + b] = v;
                    s[b * d + a] = v;
                }
            }
            constrain_covariance(&mut s, d, cfg.covariance, cfg.floor);
            Cluster {
                weight: nk[j] / n as f64,
                mean: means[j * d..(j + 1) * d].to_vec(),
                covariance: s,
            }
        })
        .collect()
}

/// Responsibilities and total log-likelihood under `model`.
fn e_step(model: &GmmModel, samples: &SampleSet, resp: &mut [f64]) -> f64 {
    let k = model.clusters.len();
    let d = samples.dim();
    let partial: Vec<f64> = resp
        .par_chunks_mut(CHUNK * k)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut scratch = vec![0.0; d];
            let mut ll = 0.0;
            for (off, r) in chunk.chunks_exact_mut(k).enumerate() {
                let x = samples.row(ci * CHUNK + off);
                for ((t, f), c) in r.iter_mut().zip(&model.factors).zip(&model.clusters) {
                    *t = f.log_component(&c.mean, x, &mut scratch);
                }
                let lse = log_sum_exp(r);
                ll += lse;
                r.iter_mut().for_each(|t| *t = (*t - lse).exp());
            }
            ll
        })
        .collect();
    partial.iter().sum()
}

/// EM fit of an `m`-cluster mixture, initialized by k-means++ and hard
/// assignment. Deterministic for a given seed and sample order.
pub fn train_gmm(
    samples: &SampleSet,
    descriptor: Option<FeatureDescriptor>,
    cfg: &GmmTrainConfig,
    seed: u64,
) -> Result<GmmModel> {
    cfg.validate()?;
    let d = samples.dim();
    let n = samples.len();
    let needed = 10 * cfg.clusters * d.max(1);
    if d == 0 || n < needed {
        return Err(Error::TooFewSamples { needed, got: n });
    }
    if samples.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("samples", "non-finite value"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp(samples, cfg.clusters, &mut rng);
    let mut k = centers.len();
    let mut resp = vec![0.0; n * k];
    for (i, x) in samples.rows().enumerate() {
        let best = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .unwrap();
        resp[i * k + best] = 1.0;
    }
    let mut clusters = prune(m_step(samples, &resp, k, cfg));
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let model = GmmModel::new(d, descriptor, clusters.clone())?;
        k = clusters.len();
        resp.resize(n * k, 0.0);
        let ll = e_step(&model, samples, &mut resp[..n * k]);
        let mean_ll = ll / n as f64;
        if let Some(&prev) = history.last() {
            let prev: f64 = prev;
            if ((mean_ll - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < cfg.tolerance {
                history.push(mean_ll);
                converged = true;
                break;
            }
        }
        history.push(mean_ll);
        if iterations == cfg.max_iterations {
            break;
        }
        clusters = prune(m_step(samples, &resp[..n * k], k, cfg));
        iterations += 1;
    }
    let mut model = GmmModel::new(d, descriptor, clusters)?;
    model.training = Some(TrainingInfo {
        config: cfg.clone(),
        seed,
        samples: n,
        iterations,
        converged,
        log_likelihood: history,
    });
    Ok(model)
}

/// Drops collapsed clusters and renormalizes the weights.
fn prune(mut clusters: Vec<Cluster>) -> Vec<Cluster> {
    let before = clusters.len();
    clusters.retain(|c| c.weight >= COLLAPSE_WEIGHT);
    if clusters.len() < before {
        log::warn!("removed {} collapsed GMM cluster(s)", before - clusters.len());
        let total: f64 = clusters.iter().map(|c| c.weight).sum();
        clusters.iter_mut().for_each(|c| c.weight /= total);
    }
    clusters
}

/// Per-pixel `ln p(x | water) - ln p(x | not water)` on valid pixels.
#[derive(Clone, Debug)]
pub struct LikelihoodRatioMap {
    pub log_ratio: Grid<f64>,
    pub valid: Mask,
}

impl LikelihoodRatioMap {
    pub fn ratio(&self, u: usize, v: usize) -> Option<f64> {
        self.valid.get(u, v).then(|| self.log_ratio.get(u, v).exp())
    }

    /// Pixels whose ratio strictly exceeds `threshold`.
    pub fn mask(&self, threshold: f64) -> Mask {
        let t = threshold.ln();
        Grid::from_fn(self.valid.width(), self.valid.height(), |u, v| {
            *self.valid.get(u, v) && *self.log_ratio.get(u, v) > t
        })
    }

    /// Ratio clamped to `[0, 255]`; invalid pixels are 0.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.valid.width() as u32, self.valid.height() as u32, |u, v| {
            let r = self.ratio(u as usize, v as usize).unwrap_or(0.0);
            image::Luma([r.clamp(0.0, 255.0).round() as u8])
        })
    }
}

#[derive(Clone, Debug)]
pub struct Classification {
    pub ratio: LikelihoodRatioMap,
    pub mask: Mask,
}

pub fn log_likelihood_ratio(water: &GmmModel, not_water: &GmmModel, x: &[f64]) -> f64 {
    water.log_density(x) - not_water.log_density(x)
}

/// Likelihood-ratio classification with uniform class priors.
pub fn classify(
    features: &FeatureMap,
    water: &GmmModel,
    not_water: &GmmModel,
    threshold: f64,
) -> Result<Classification> {
    if !(threshold >= 0.0) || !threshold.is_finite() {
        return Err(Error::invalid("threshold", "must be finite and non-negative"));
    }
    let (dw, dn) = match (water.descriptor, not_water.descriptor) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("model", "missing feature descriptor")),
    };
    if dw != dn {
        return Err(Error::FeatureSetMismatch(dw.set, dn.set));
    }
    let (w, h) = features.features.dims();
    features.valid.ensure_dims((w, h))?;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    if *features.valid.get(u, v) {
                        let x = dw.vector(features.features.get(u, v));
                        log_likelihood_ratio(water, not_water, &x)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let log_ratio = Grid::from_vec(w, h, rows.concat())?;
    let ratio = LikelihoodRatioMap {
        log_ratio,
        valid: features.valid.clone(),
    };
    let mask = ratio.mask(threshold);
    Ok(Classification { ratio, mask })
}

/// Naive density with an explicit inverse and determinant; test oracle.
#[doc(hidden)]
pub fn naive_density(model: &GmmModel, x: &[f64]) -> f64 {
    let d = model.dim;
    let xv = DVector::from_column_slice(x);
    model
        .clusters
        .iter()
        .map(|c| {
            let s = DMatrix::from_row_slice(d, d, &c.covariance);
            let inv = s.clone().try_inverse().expect("invertible");
            let diff = &xv - DVector::from_column_slice(&c.mean);
            let q = (diff.transpose() * inv * &diff)[(0, 0)];
            c.weight * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * s.determinant()).sqrt()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn iso(dim: usize, weight: f64, mean: Vec<f64>, var: f64) -> Cluster {
        let mut covariance = vec![0.0; dim * dim];
        for i in 0..dim {
            covariance[i * dim + i] = var;
        }
        Cluster { weight, mean, covariance }
    }

    #[test]
    fn standard_normal_peak() {
        let m = GmmModel::new(1, None, vec![iso(1, 1.0, vec![0.0], 1.0)]).unwrap();
        assert_relative_eq!(gmm_density(&m, &[0.0]), 0.398_942_280_401_432_7, max_relative = 1e-14);
    }

    #[test]
    fn symmetric_pair_at_origin() {
        let pair = GmmModel::new(
            1,
            None,
            vec![iso(1, 0.5, vec![-1.0], 1.0), iso(1, 0.5, vec![1.0], 1.0)],
        )
        .unwrap();
        let single = GmmModel::new(1, None, vec![iso(1, 1.0, vec![1.0], 1.0)]).unwrap();
        assert_relative_eq!(gmm_density(&pair, &[0.0]), gmm_density(&single, &[0.0]), max_relative = 1e-14);
    }

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let s = &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1;
        let mut out = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                out[r * dim + c] = 0.5 * (s[(r, c)] + s[(c, r)]);
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let k = rng.random_range(1..6);
            let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
            let t: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= t);
            let clusters = w
                .iter()
                .map(|&weight| Cluster {
                    weight,
                    mean: (0..5).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    covariance: random_spd(5, &mut rng),
                })
                .collect();
            let m = GmmModel::new(5, None, clusters).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert_relative_eq!(gmm_density(&m, &x), naive_density(&m, &x), max_relative = 1e-10);
        }
    }

    #[test]
    fn log_density_stays_finite_far_out() {
        let m = GmmModel::new(5, None, vec![iso(5, 1.0, vec![0.0; 5], 1.0)]).unwrap();
        for axis in 0..5 {
            let mut x = vec![0.0; 5];
            x[axis] = 40.0;
            let ld = m.log_density(&x);
            assert!(ld.is_finite());
            assert_relative_eq!(ld, -800.0 - 2.5 * LN_2PI, max_relative = 1e-12);
        }
        assert!(gmm_density(&m, &[30.0, 0.0, 0.0, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn monte_carlo_mass() {
        let m = GmmModel::new(
            2,
            None,
            vec![
                Cluster { weight: 0.3, mean: vec![-1.0, 0.5], covariance: vec![0.04, 0.01, 0.01, 0.09] },
                Cluster { weight: 0.7, mean: vec![1.0, -0.5], covariance: vec![0.09, 0.0, 0.0, 0.04] },
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (lo, hi) = (-3.0, 3.0);
        let n = 200_000;
        let sum: f64 = (0..n)
            .map(|_| gmm_density(&m, &[rng.random_range(lo..hi), rng.random_range(lo..hi)]))
            .sum();
        let mass = sum / n as f64 * (hi - lo) * (hi - lo);
        assert!(mass >= 0.99 - 0.02 && mass <= 1.02, "{mass}");
    }

    #[test]
    fn rejects_invalid_models() {
        assert!(GmmModel::new(1, None, vec![iso(1, 0.5, vec![0.0], 1.0)]).is_err());
        assert!(GmmModel::new(1, None, vec![iso(1, 1.0, vec![0.0], -1.0)]).is_err());
        assert!(GmmModel::new(1, None, vec![iso(1, 1.0, vec![0.0, 1.0], 1.0)]).is_err());
        let bad = Cluster { weight: 1.0, mean: vec![0.0; 2], covariance: vec![1.0, 0.5, 0.0, 1.0] };
        assert!(GmmModel::new(2, None, vec![bad]).is_err());
        let desc = FeatureDescriptor::new(FeatureSet::WithAzimuth, false);
        assert!(GmmModel::new(4, Some(desc), vec![iso(4, 1.0, vec![0.0; 4], 1.0)]).is_err());
    }

    fn two_cluster_samples(n: usize, seed: u64) -> (SampleSet, [Vec<f64>; 2]) {
        let truth = [vec![0.0, 0.2, 0.5, 1.0, 0.3], vec![1.0, 0.8, 0.1, 1.4, 1.2]];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SampleSet::new(5);
        for i in 0..n {
            let c = &truth[(i % 10 < 4) as usize];
            let row: Vec<f64> = c
                .iter()
                .map(|m| m + 0.05 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            set.push(&row).unwrap();
        }
        (set, truth)
    }

    #[test]
    fn recovers_two_clusters() {
        let (set, truth) = two_cluster_samples(10_000, 3);
        let cfg = GmmTrainConfig { clusters: 2, ..Default::default() };
        let m = train_gmm(&set, None, &cfg, 7).unwrap();
        let c = m.clusters();
        assert_eq!(c.len(), 2);
        let err = |p: [usize; 2]| {
            (0..2)
                .map(|i| c[p[i]].mean.iter().zip(&truth[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max)
        };
        assert!(err([0, 1]).min(err([1, 0])) < 0.05);
        let ll = &m.training().unwrap().log_likelihood;
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn em_is_monotone_and_deterministic() {
        let (set, _) = two_cluster_samples(3000, 9);
        let cfg = GmmTrainConfig { clusters: 5, ..Default::default() };
        let a = train_gmm(&set, None, &cfg, 1).unwrap();
        let b = train_gmm(&set, None, &cfg, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let ll = &a.training().unwrap().log_likelihood;
        assert!(ll.len() >= 2);
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{ll:?}");
        let diag = GmmTrainConfig { covariance: CovarianceKind::Diagonal, ..cfg };
        let d = train_gmm(&set, None, &diag, 1).unwrap();
        let ll = &d.training().unwrap().log_likelihood;
        assert!(ll.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!(d.clusters().iter().all(|c| c.covariance[1] == 0.0));
    }

    #[test]
    fn identical_samples_collapse_to_floor() {
        let mut set = SampleSet::new(3);
        for _ in 0..200 {
            set.push(&[0.5, 0.25, 1.0]).unwrap();
        }
        let cfg = GmmTrainConfig { clusters: 3, ..Default::default() };
        let m = train_gmm(&set, None, &cfg, 0).unwrap();
        assert_eq!(m.clusters().len(), 1);
        let c = &m.clusters()[0];
        assert_eq!(c.mean, vec![0.5, 0.25, 1.0]);
        for r in 0..3 {
            for col in 0..3 {
                let want = if r == col { 1e-6 } else { 0.0 };
                assert!((c.covariance[r * 3 + col] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let (set, _) = two_cluster_samples(99, 0);
        let cfg = GmmTrainConfig { clusters: 2, ..Default::default() };
        assert!(matches!(
            train_gmm(&set, None, &cfg, 0),
            Err(Error::TooFewSamples { needed: 100, got: 99 })
        ));
    }

    #[test]
    fn json_round_trip() {
        let (set, _) = two_cluster_samples(2000, 4);
        let desc = FeatureDescriptor::new(FeatureSet::WithAzimuth, false);
        let cfg = GmmTrainConfig { clusters: 2, ..Default::default() };
        let m = train_gmm(&set, Some(desc), &cfg, 3).unwrap();
        let json = m.to_json();
        assert!(json.contains("\"format_version\": 1"));
        let back = GmmModel::from_json(&json).unwrap();
        assert_eq!(back.clusters(), m.clusters());
        assert_eq!(back.descriptor(), Some(desc));
        assert_eq!(back.to_json(), json);
        let x = set.row(17);
        assert_eq!(back.log_density(x), m.log_density(x));
        assert!(GmmModel::from_json(&json.replace("\"format_version\": 1", "\"format_version\": 9")).is_err());
    }

    fn feature_map(values: &[f64]) -> FeatureMap {
        let features = Grid::from_fn(values.len(), 1, |u, _| FeatureVector {
            sat_left: values[u],
            ..Default::default()
        });
        FeatureMap { valid: Grid::new(values.len(), 1, true), features }
    }

    fn point_model(mean: f64) -> GmmModel {
        let desc = FeatureDescriptor::new(FeatureSet::WithoutAzimuth, false);
        let mut c = iso(4, 1.0, vec![mean, 0.0, 0.0, 0.0], 1.0);
        c.mean[0] = mean;
        GmmModel::new(4, Some(desc), vec![c]).unwrap()
    }

    #[test]
    fn identical_models_give_unit_ratio() {
        let f = feature_map(&[-3.0, 0.0, 0.5, 7.0]);
        let m = point_model(0.0);
        let out = classify(&f, &m, &m, 1.0).unwrap();
        assert_eq!(out.mask.count(), 0);
        for u in 0..4 {
            assert_eq!(out.ratio.ratio(u, 0), Some(1.0));
        }
    }

    #[test]
    fn boundary_halfway_between_means() {
        let f = feature_map(&[0.0, 0.999, 1.0, 1.001, 2.0]);
        let out = classify(&f, &point_model(0.0), &point_model(2.0), 1.0).unwrap();
        let mask: Vec<bool> = (0..5).map(|u| *out.mask.get(u, 0)).collect();
        assert_eq!(mask, vec![true, true, false, false, false]);
        assert_relative_eq!(out.ratio.ratio(2, 0).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn raising_threshold_never_adds_pixels() {
        let vals: Vec<f64> = (0..50).map(|i| i as f64 * 0.07 - 1.0).collect();
        let out = classify(&feature_map(&vals), &point_model(0.0), &point_model(2.0), 1.0).unwrap();
        let thresholds = [0.0, 0.1, 0.5, 1.0, 2.0, 10.0, 1e6];
        for w in thresholds.windows(2) {
            let (lo, hi) = (out.ratio.mask(w[0]), out.ratio.mask(w[1]));
            assert!(hi.as_slice().iter().zip(lo.as_slice()).all(|(&h, &l)| !h || l));
        }
    }

    #[test]
    fn invalid_pixels_and_png() {
        let mut f = feature_map(&[0.0, 0.0]);
        f.valid.set(1, 0, false);
        let out = classify(&f, &point_model(0.0), &point_model(2.0), 1.0).unwrap();
        assert_eq!(out.ratio.ratio(1, 0), None);
        assert!(!*out.mask.get(1, 0));
        let png = out.ratio.to_gray();
        // ratio at x = 0 is e^2
        assert_eq!(png.get_pixel(0, 0)[0], 7);
        assert_eq!(png.get_pixel(1, 0)[0], 0);
    }

    #[test]
    fn descriptor_mismatch_fails() {
        let f = feature_map(&[0.0]);
        let desc = FeatureDescriptor::new(FeatureSet::WithAzimuth, false);
        let other = GmmModel::new(5, Some(desc), vec![iso(5, 1.0, vec![0.0; 5], 1.0)]).unwrap();
        assert!(matches!(
            classify(&f, &point_model(0.0), &other, 1.0),
            Err(Error::FeatureSetMismatch(..))
        ));
        assert!(classify(&f, &point_model(0.0), &point_model(1.0), -1.0).is_err());
    }
}
