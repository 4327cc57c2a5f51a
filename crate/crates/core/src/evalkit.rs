//! Distribution metrics and accuracy sweeps.

use std::collections::{BTreeMap, HashSet};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::{embed_images, Adapted, TwoTowerClassifier};
use crate::datasets::{Image, LabeledImageDataset};
use crate::error::{Error, Result};

/// Row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::invalid(format!(
                "{} values do not form a {rows}x{dim} feature matrix",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Mean and unbiased covariance of a feature set.
pub fn gaussian_fit(f: &Features) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.rows as f64;
    let d = f.dim;
    let mut mu = DVector::zeros(d);
    for i in 0..f.rows {
        for (j, &v) in f.row(i).iter().enumerate() {
            mu[j] += v as f64;
        }
    }
    mu /= n;
    let centered = DMatrix::from_fn(f.rows, d, |i, j| f.data[i * d + j] as f64 - mu[j]);
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues from rounding are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_gaussians(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    let root_a = sqrtm_psd(cov_a);
    let inner = &root_a * cov_b * &root_a;
    let cross = sqrtm_psd(&inner).trace();
    let fd = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    fd.max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &Features, b: &Features) -> Result<f64> {
    if a.rows < 2 || b.rows < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 samples per side, got {} and {}",
            a.rows, b.rows
        )));
    }
    if a.dim != b.dim {
        return Err(Error::invalid(format!("feature dims differ: {} vs {}", a.dim, b.dim)));
    }
    if a.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let (ma, ca) = gaussian_fit(a);
    let (mb, cb) = gaussian_fit(b);
    // Both orders are computed so the result is exactly symmetric.
    let ab = frechet_gaussians(&ma, &ca, &mb, &cb);
    let ba = frechet_gaussians(&mb, &cb, &ma, &ca);
    Ok(0.5 * (ab + ba))
}

/// Frozen image tower used for distribution metrics.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    model: TwoTowerClassifier,
    hash: String,
}

impl FeatureExtractor {
    pub fn new(model: TwoTowerClassifier) -> Self {
        let hash = model.content_hash();
        Self { model, hash }
    }

    pub fn dim(&self) -> usize {
        self.model.arch.embed_dim
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn extract(&self, images: &[&Image]) -> Result<Features> {
        let data = embed_images(&self.model, &Adapted::base(&self.model), images)?;
        Features::new(images.len(), self.dim(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidRow {
    pub class: String,
    pub fid: f64,
    pub real_count: usize,
    pub synthetic_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub rows: Vec<FidRow>,
    pub extractor_hash: String,
    pub histogram: Histogram,
}

impl FidReport {
    pub fn mean(&self) -> f64 {
        self.rows.iter().map(|r| r.fid).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,fid,real_count,synthetic_count\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.class, r.fid, r.real_count, r.synthetic_count));
        }
        out
    }

    /// Errors unless both reports used the same extractor.
    pub fn comparable(&self, other: &FidReport) -> Result<()> {
        if self.extractor_hash != other.extractor_hash {
            return Err(Error::Compatibility(format!(
                "FID reports use different extractors ({} vs {})",
                &self.extractor_hash[..12.min(self.extractor_hash.len())],
                &other.extractor_hash[..12.min(other.extractor_hash.len())]
            )));
        }
        Ok(())
    }
}

/// Equal-width binned counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub const DEFAULT_BINS: usize = 10;

/// Histogram of `values` over `[lo, hi]`; the top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::invalid("histogram needs bins > 0 and hi > lo"));
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { edges, counts })
}

fn class_features(ds: &LabeledImageDataset, label: usize, ex: &FeatureExtractor) -> Result<Features> {
    let imgs: Vec<&Image> = ds.indices_of(label).iter().map(|&i| &ds.items()[i].image).collect();
    ex.extract(&imgs)
}

/// Fréchet distance per class between real and synthetic images.
pub fn per_class_fid(real: &LabeledImageDataset, synth: &LabeledImageDataset, ex: &FeatureExtractor) -> Result<FidReport> {
    if real.class_names() != synth.class_names() {
        let names: HashSet<&String> = synth.class_names().iter().collect();
        let missing = real
            .class_names()
            .iter()
            .find(|c| !names.contains(c))
            .or_else(|| synth.class_names().iter().find(|c| !real.class_names().contains(c)));
        return Err(Error::Data(format!(
            "class sets differ (first mismatch: {:?})",
            missing.map_or("<order>", |s| s.as_str())
        )));
    }
    let mut rows = Vec::with_capacity(real.num_classes());
    for (label, class) in real.class_names().iter().enumerate() {
        let a = class_features(real, label, ex)?;
        let b = class_features(synth, label, ex)?;
        for (side, f) in [("real", &a), ("synthetic", &b)] {
            if f.rows == 0 {
                return Err(Error::Data(format!("class {class:?} has no {side} images")));
            }
        }
        rows.push(FidRow {
            class: class.clone(),
            fid: frechet_distance(&a, &b)?,
            real_count: a.rows,
            synthetic_count: b.rows,
        });
    }
    let hi = rows.iter().map(|r| r.fid).fold(0.0f64, f64::max).max(1e-9);
    let values: Vec<f64> = rows.iter().map(|r| r.fid).collect();
    Ok(FidReport {
        rows,
        extractor_hash: ex.hash().to_string(),
        histogram: histogram(&values, DEFAULT_BINS, 0.0, hi)?,
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Synthetic images per class.
    M,
    /// Real shots per class.
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    SynthOnly,
    RealSynth,
}

/// Accuracies of one sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub synth_only: f64,
    pub real_synth: f64,
    /// Few-shot items used, as (class, source index); required on the K axis.
    pub shots: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub seed: u64,
    pub setting: Setting,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub seed: u64,
    pub setting: Setting,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub trends: Vec<TrendRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,seed,setting,accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                serde_json::to_value(self.axis).expect("axis").as_str().unwrap_or_default(),
                r.value,
                r.seed,
                serde_json::to_value(r.setting).expect("setting").as_str().unwrap_or_default(),
                r.accuracy
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .chain(self.trends.iter().map(|t| serde_json::to_string(t).expect("trend serializes") + "\n"))
            .collect()
    }

    /// Spearman correlations for one setting, in seed order.
    pub fn spearman_for(&self, setting: Setting) -> Vec<Option<f64>> {
        self.trends.iter().filter(|t| t.setting == setting).map(|t| t.spearman).collect()
    }
}

/// Runs `cell(value, seed)` over the grid and summarizes the trend along the
/// axis per seed and setting. On the K axis the reported shot sets must be
/// nested in increasing K for each seed.
pub fn run_sweep<F>(axis: SweepAxis, values: &[usize], seeds: &[u64], mut cell: F) -> Result<SweepResult>
where
    F: FnMut(usize, u64) -> Result<CellOutcome>,
{
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one value and one seed"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mut rows = Vec::new();
    let mut shots: BTreeMap<(u64, usize), HashSet<(usize, usize)>> = BTreeMap::new();
    for &seed in seeds {
        for &value in &sorted {
            let out = cell(value, seed)?;
            if axis == SweepAxis::K {
                let s = out
                    .shots
                    .ok_or_else(|| Error::Protocol(format!("K={value} cell did not report its shot set")))?;
                shots.insert((seed, value), s.into_iter().collect());
            }
            for (setting, accuracy) in [(Setting::SynthOnly, out.synth_only), (Setting::RealSynth, out.real_synth)] {
                rows.push(SweepRow {
                    value,
                    seed,
                    setting,
                    accuracy,
                });
            }
        }
        if axis == SweepAxis::K {
            for w in sorted.windows(2) {
                let small = &shots[&(seed, w[0])];
                let large = &shots[&(seed, w[1])];
                if !small.is_subset(large) {
                    return Err(Error::Protocol(format!(
                        "seed {seed}: {}-shot set is not contained in the {}-shot set",
                        w[0], w[1]
                    )));
                }
            }
        }
    }
    let mut trends = Vec::new();
    for &seed in seeds {
        for setting in [Setting::SynthOnly, Setting::RealSynth] {
            let (x, y): (Vec<f64>, Vec<f64>) = rows
                .iter()
                .filter(|r| r.seed == seed && r.setting == setting)
                .map(|r| (r.value as f64, r.accuracy))
                .unzip();
            trends.push(TrendRow {
                seed,
                setting,
                spearman: spearman(&x, &y),
            });
        }
    }
    Ok(SweepResult { axis, rows, trends })
}
