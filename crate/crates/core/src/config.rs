//! Experiment configuration: one TOML file plus dotted-path overrides.
//!
//! Missing keys take their defaults, unknown keys are rejected, and every
//! validation failure names the offending field path (e.g. `mixture.lambda`).

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::adapters::{Host, Regime};
use crate::classifier::{AugmentConfig, ClassifierArch};
use crate::datasets::procedural::{FineGrain, Style, MIN_RESOLUTION};
use crate::dream::Preservation;
use crate::error::{Error, Result};
use crate::generator::{GeneratorArch, ScheduleSpec};

/// Environment variable that replaces `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "DATADREAM_OUTPUT_ROOT";

/// A validation failure at a field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl From<FieldError> for Error {
    fn from(e: FieldError) -> Self {
        Error::Configuration(e.to_string())
    }
}

fn field(path: &str, message: impl Into<String>) -> FieldError {
    FieldError {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSection {
    pub classes: usize,
    pub per_class: usize,
    pub resolution: u32,
    pub fine_grain: FineGrain,
    pub style: Style,
    /// Real shots per class.
    pub shots: usize,
    /// Optional image-folder root; when set it replaces the procedural data.
    pub image_folder: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 400,
            resolution: 16,
            fine_grain: FineGrain::High,
            style: Style::Dusk,
            shots: 16,
            image_folder: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSection {
    pub arch: GeneratorArch,
    pub schedule: ScheduleSpec,
    /// Training images per attribute combination in the pretraining corpus.
    pub corpus_per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub p_uncond: f64,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            arch: GeneratorArch::default(),
            schedule: ScheduleSpec::default(),
            corpus_per_class: 40,
            steps: 12_000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            p_uncond: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSection {
    pub arch: ClassifierArch,
    /// Images per attribute combination in the contrastive corpus.
    pub corpus_per_class: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub allow_overlap: bool,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            arch: ClassifierArch::default(),
            corpus_per_class: 40,
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            allow_overlap: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamSection {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rank: usize,
    pub hosts: Vec<Host>,
    pub preservation: Preservation,
    pub weight_decay: f64,
}

impl Default for DreamSection {
    fn default() -> Self {
        Self {
            regime: Regime::Dset,
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            rank: 16,
            hosts: vec![Host::Denoiser, Host::TextEncoder],
            preservation: Preservation::default(),
            weight_decay: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMethod {
    Datadream,
    ZeroShot,
    NoisedReal,
}

impl SynthMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Datadream => "datadream",
            Self::ZeroShot => "zero_shot",
            Self::NoisedReal => "noised_real",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSection {
    pub method: SynthMethod,
    pub per_class: usize,
    pub steps: usize,
    pub guidance: f64,
    /// Fraction of the schedule used to noise real shots (noised_real only).
    pub noised_strength: f64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        Self {
            method: SynthMethod::Datadream,
            per_class: 500,
            steps: 50,
            guidance: 2.0,
            noised_strength: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSection {
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Runs the grid search before training when true.
    pub search: bool,
    pub lr_grid: Vec<f64>,
    pub weight_decay_grid: Vec<f64>,
    /// Real shots per class held out for the grid search.
    pub holdout: usize,
    pub rank: usize,
    pub epochs: usize,
    /// Epochs of runs without synthetic data; `0` matches the optimizer
    /// steps of the mixed run with the same settings.
    pub real_only_epochs: usize,
    pub augment: AugmentConfig,
}

impl Default for MixtureSection {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 5e-4,
            search: false,
            lr_grid: vec![1e-4, 1e-5, 1e-6, 1e-7],
            weight_decay_grid: vec![5e-4, 1e-4],
            holdout: 2,
            rank: 16,
            epochs: 10,
            real_only_epochs: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisName {
    M,
    K,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub fid_bins: usize,
    pub sweep_axis: AxisName,
    pub sweep_values: Vec<usize>,
    pub sweep_seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fid_bins: 10,
            sweep_axis: AxisName::M,
            sweep_values: vec![25, 50, 100, 200],
            sweep_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    /// Replicate index: selects the few-shot draw and every downstream
    /// stream while the pretrained base models stay shared.
    pub replicate: u64,
    pub output_root: PathBuf,
    pub dataset: DatasetSection,
    pub generator: GeneratorSection,
    pub classifier: ClassifierSection,
    pub dream: DreamSection,
    pub generation: GenerationSection,
    pub mixture: MixtureSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            replicate: 0,
            output_root: PathBuf::from("runs/default"),
            dataset: DatasetSection::default(),
            generator: GeneratorSection::default(),
            classifier: ClassifierSection::default(),
            dream: DreamSection::default(),
            generation: GenerationSection::default(),
            mixture: MixtureSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn default_tree() -> Table {
    match Value::try_from(ExperimentConfig::default()).expect("defaults serialize") {
        Value::Table(t) => t,
        _ => unreachable!("config serializes to a table"),
    }
}

/// Overlays `user` onto `base`, rejecting keys `base` does not have.
fn merge(base: &mut Table, user: Table, prefix: &str) -> std::result::Result<(), FieldError> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(field(&path, "unknown field")),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(Value::Table(_)), _) => return Err(field(&path, "expected a table")),
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of `key=value`: TOML syntax first, bare string
/// otherwise.
fn parse_override_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(tree: &mut Table, spec: &str) -> std::result::Result<(), FieldError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| field(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        if i + 1 == parts.len() {
            match node.get_mut(*part) {
                None => return Err(field(&here, "unknown field")),
                Some(Value::Table(_)) => return Err(field(&here, "cannot override a whole table")),
                Some(slot) => {
                    let mut v = parse_override_value(raw.trim());
                    // `lr=1` should still mean a float field.
                    if let (Value::Float(_), Value::Integer(n)) = (&*slot, &v) {
                        v = Value::Float(*n as f64);
                    }
                    *slot = v;
                }
            }
        } else {
            node = match node.get_mut(*part) {
                Some(Value::Table(t)) => t,
                Some(_) => return Err(field(&here, "not a table")),
                None => return Err(field(&here, "unknown field")),
            };
        }
    }
    Ok(())
}

/// Finds the first path at which `tree` fails to deserialize.
fn locate_type_error(tree: &Table) -> FieldError {
    let reference = default_tree();
    fn walk(user: &Table, reference: &Table, prefix: &str) -> Option<String> {
        for (k, v) in user {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            let Some(r) = reference.get(k) else { continue };
            match (v, r) {
                (Value::Table(u), Value::Table(rt)) => {
                    if let Some(p) = walk(u, rt, &path) {
                        return Some(p);
                    }
                }
                (u, r) if u.type_str() != r.type_str() => return Some(path),
                _ => {}
            }
        }
        None
    }
    let path = walk(tree, &reference, "").unwrap_or_else(|| "<root>".to_string());
    field(&path, "value has the wrong type or an unknown variant")
}

impl ExperimentConfig {
    /// Defaults overlaid with `text` and then `overrides`, validated.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Format(format!("config is not valid TOML: {e}")))?;
        let mut tree = default_tree();
        merge(&mut tree, user, "")?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: ExperimentConfig = Value::Table(tree.clone())
            .try_into()
            .map_err(|e: toml::de::Error| {
                let fe = locate_type_error(&tree);
                Error::Configuration(format!("{fe} ({})", e.message()))
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies overrides and the output-root variable.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.output_root = PathBuf::from(root);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> std::result::Result<(), FieldError> {
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(field("dataset.classes", "need at least 2 classes"));
        }
        if d.resolution < MIN_RESOLUTION {
            return Err(field("dataset.resolution", format!("must be at least {MIN_RESOLUTION}")));
        }
        if d.shots == 0 {
            return Err(field("dataset.shots", "must be at least 1"));
        }
        if d.per_class < 2 {
            return Err(field("dataset.per_class", "must be at least 2"));
        }
        let g = &self.generator;
        if g.arch.resolution != d.resolution as usize {
            return Err(field("generator.arch.resolution", "must equal dataset.resolution"));
        }
        if g.arch.patch == 0 || g.arch.resolution % g.arch.patch != 0 {
            return Err(field("generator.arch.patch", "must divide the resolution"));
        }
        if g.arch.depth % 2 == 0 {
            return Err(field("generator.arch.depth", "must be odd"));
        }
        if g.schedule.steps == 0 {
            return Err(field("generator.schedule.steps", "must be positive"));
        }
        if !(g.schedule.beta_min > 0.0 && g.schedule.beta_min < g.schedule.beta_max && g.schedule.beta_max < 1.0) {
            return Err(field("generator.schedule.beta_max", "need 0 < beta_min < beta_max < 1"));
        }
        if !(0.0..1.0).contains(&g.p_uncond) {
            return Err(field("generator.p_uncond", "must be in [0, 1)"));
        }
        if g.batch_size == 0 {
            return Err(field("generator.batch_size", "must be positive"));
        }
        if !(g.lr > 0.0) {
            return Err(field("generator.lr", "must be positive"));
        }
        let c = &self.classifier;
        if c.arch.resolution != d.resolution as usize {
            return Err(field("classifier.arch.resolution", "must equal dataset.resolution"));
        }
        if c.arch.patch == 0 || c.arch.resolution % c.arch.patch != 0 {
            return Err(field("classifier.arch.patch", "must divide the resolution"));
        }
        if c.batch_size < 2 {
            return Err(field("classifier.batch_size", "must be at least 2"));
        }
        let r = &self.dream;
        if r.epochs == 0 {
            return Err(field("dream.epochs", "must be positive"));
        }
        if r.batch_size == 0 {
            return Err(field("dream.batch_size", "must be positive"));
        }
        if !(r.lr > 0.0) {
            return Err(field("dream.lr", "must be positive"));
        }
        if r.rank == 0 {
            return Err(field("dream.rank", "must be positive"));
        }
        if r.hosts.is_empty() {
            return Err(field("dream.hosts", "need at least one host"));
        }
        if r.hosts.iter().any(|h| !matches!(h, Host::Denoiser | Host::TextEncoder)) {
            return Err(field("dream.hosts", "generator hosts are denoiser and text_encoder"));
        }
        if r.preservation.weight < 0.0 {
            return Err(field("dream.preservation.weight", "must be nonnegative"));
        }
        if r.preservation.enabled() && r.preservation.prior_per_class == 0 {
            return Err(field("dream.preservation.prior_per_class", "must be positive when preservation is on"));
        }
        let s = &self.generation;
        if s.per_class == 0 {
            return Err(field("generation.per_class", "must be positive"));
        }
        if s.steps == 0 || s.steps > g.schedule.steps {
            return Err(field("generation.steps", format!("must be in 1..={}", g.schedule.steps)));
        }
        if !(s.guidance >= 0.0) {
            return Err(field("generation.guidance", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&s.noised_strength) {
            return Err(field("generation.noised_strength", "must be in [0, 1]"));
        }
        let m = &self.mixture;
        if !(0.0..=1.0).contains(&m.lambda) {
            return Err(field("mixture.lambda", format!("{} is outside [0, 1]", m.lambda)));
        }
        if m.batch_size < 2 {
            return Err(field("mixture.batch_size", "must be at least 2"));
        }
        if !(m.lr > 0.0) {
            return Err(field("mixture.lr", "must be positive"));
        }
        if m.lr_grid.is_empty() {
            return Err(field("mixture.lr_grid", "must not be empty"));
        }
        if m.weight_decay_grid.is_empty() {
            return Err(field("mixture.weight_decay_grid", "must not be empty"));
        }
        if m.rank == 0 {
            return Err(field("mixture.rank", "must be positive"));
        }
        if m.epochs == 0 {
            return Err(field("mixture.epochs", "must be positive"));
        }
        if m.search && m.holdout >= d.shots {
            return Err(field("mixture.holdout", "must leave at least one training shot per class"));
        }
        let e = &self.eval;
        if e.fid_bins == 0 {
            return Err(field("eval.fid_bins", "must be positive"));
        }
        if e.sweep_values.is_empty() || e.sweep_values.contains(&0) {
            return Err(field("eval.sweep_values", "must be nonempty and positive"));
        }
        if e.sweep_seeds.is_empty() {
            return Err(field("eval.sweep_seeds", "must not be empty"));
        }
        Ok(())
    }
}
