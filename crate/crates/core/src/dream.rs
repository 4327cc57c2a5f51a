//! Adapter fine-tuning of the generator on few-shot data.
//!
//! `dset` trains one adapter set on every shot; `cls` trains one set per
//! class on that class's shots only. Epochs are counted over the data each
//! set sees, so with `steps = epochs * ceil(items / batch)` the per-class
//! runs together take as many steps as the shared run (up to ceiling slack).

use std::fmt::Write as _;
use std::path::Path;

use datadream_autograd::{cosine_lr, AdamW, AdamWConfig, Graph};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::adapters::{inject, AdapterBank, AdapterSet, Host, Regime};
use crate::datasets::FewShotDataset;
use crate::error::{Error, Result};
use crate::generator::{denoise_loss, draw_batch, sample, GeneratorModel, SampleConfig};
use crate::seed::{derive_seed, rng};
use crate::text::PromptTemplate;

/// Optional prior-preservation term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    /// `0` disables the term.
    pub weight: f64,
    /// Prior images generated per class by the frozen base model.
    pub prior_per_class: usize,
}

impl Default for Preservation {
    fn default() -> Self {
        Self {
            weight: 0.0,
            prior_per_class: 0,
        }
    }
}

impl Preservation {
    pub fn enabled(&self) -> bool {
        self.weight > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rank: usize,
    pub hosts: Vec<Host>,
    pub preservation: Preservation,
    /// Sampler used to draw prior images when preservation is on.
    pub prior_sampler: SampleConfig,
    pub adamw_beta1: f64,
    pub adamw_beta2: f64,
    pub adamw_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        let adamw = AdamWConfig::default();
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 1e-4,
            rank: 16,
            hosts: vec![Host::Denoiser, Host::TextEncoder],
            preservation: Preservation::default(),
            prior_sampler: SampleConfig::default(),
            adamw_beta1: adamw.beta1,
            adamw_beta2: adamw.beta2,
            adamw_eps: adamw.eps,
            weight_decay: adamw.weight_decay,
            seed: 0,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.rank == 0 {
            return Err(Error::config("batch_size and rank must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if self.hosts.is_empty() {
            return Err(Error::config("adapter target needs at least one host"));
        }
        if self.preservation.enabled() && self.preservation.prior_per_class == 0 {
            return Err(Error::config("preservation is on but the prior set is empty"));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.adamw_beta1,
            beta2: self.adamw_beta2,
            eps: self.adamw_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Optimizer steps for `items` examples: `epochs * ceil(items / batch)`.
pub fn steps_for(items: usize, batch: usize, epochs: usize) -> usize {
    epochs * items.div_ceil(batch)
}

/// Total steps of the shared regime.
pub fn dset_steps(class_counts: &[usize], batch: usize, epochs: usize) -> usize {
    steps_for(class_counts.iter().sum(), batch, epochs)
}

/// Total steps of the per-class regime.
pub fn cls_steps(class_counts: &[usize], batch: usize, epochs: usize) -> usize {
    class_counts.iter().map(|&k| steps_for(k, batch, epochs)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Adapter set index: 0 for `dset`, the class for `cls`.
    pub entry: usize,
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct DreamOutcome {
    pub bank: AdapterBank,
    pub losses: Vec<LossRecord>,
    /// Steps taken per adapter set.
    pub steps: Vec<usize>,
}

impl DreamOutcome {
    pub fn total_steps(&self) -> usize {
        self.steps.iter().sum()
    }

    /// `entry,step,loss,lr` lines with a header.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("entry,step,loss,lr\n");
        for r in &self.losses {
            let _ = writeln!(s, "{},{},{},{}", r.entry, r.step, r.loss, r.lr);
        }
        s
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.loss_csv()).map_err(|e| Error::io(path, e))
    }
}

struct Example {
    tokens: Vec<f32>,
    prompt: Vec<usize>,
}

fn examples(base: &GeneratorModel, fs: &FewShotDataset, template: &PromptTemplate, only: Option<usize>) -> Result<Vec<Example>> {
    fs.items()
        .iter()
        .filter(|it| only.is_none_or(|c| it.label == c))
        .map(|it| {
            Ok(Example {
                tokens: base.image_tokens(&it.image)?,
                prompt: base.encode_prompt(&template.prompt(it.label)?),
            })
        })
        .collect()
}

/// Prior images of the frozen base for `classes`, generated before training.
fn prior_examples(base: &GeneratorModel, template: &PromptTemplate, classes: &[usize], cfg: &DreamConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for &c in classes {
        let prompt = template.prompt(c)?;
        let seeds: Vec<u64> = (0..cfg.preservation.prior_per_class)
            .map(|i| derive_seed(cfg.seed, &format!("prior-{c}"), i as u64))
            .collect();
        for img in sample(base, &prompt, &seeds, &cfg.prior_sampler)? {
            out.push(Example {
                tokens: base.image_tokens(&img)?,
                prompt: base.encode_prompt(&prompt),
            });
        }
    }
    Ok(out)
}

/// Trains one adapter set; `stream` separates the seeds of different sets.
fn train_set(
    base: &GeneratorModel,
    data: &[Example],
    prior: &[Example],
    cfg: &DreamConfig,
    stream: usize,
    losses: &mut Vec<LossRecord>,
) -> Result<(AdapterSet, usize)> {
    let mut set = inject(base, &cfg.hosts, cfg.rank, derive_seed(cfg.seed, "dream-init", stream as u64))?;
    let total = steps_for(data.len(), cfg.batch_size, cfg.epochs);
    let mut opt = AdamW::new(cfg.adamw());
    let mut noise = rng(derive_seed(cfg.seed, "dream-noise", stream as u64));
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut shuffle = rng(derive_seed(
            derive_seed(cfg.seed, "dream-epoch", stream as u64),
            "epoch",
            epoch as u64,
        ));
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<(&[f32], &[usize])> = chunk
                .iter()
                .map(|&i| (data[i].tokens.as_slice(), data[i].prompt.as_slice()))
                .collect();
            let batch = draw_batch(base, &items, 0.0, &mut noise)?;
            let prior_batch = if cfg.preservation.enabled() {
                let picks: Vec<(&[f32], &[usize])> = (0..chunk.len())
                    .map(|_| {
                        let e = &prior[noise.random_range(0..prior.len())];
                        (e.tokens.as_slice(), e.prompt.as_slice())
                    })
                    .collect();
                Some(draw_batch(base, &picks, 0.0, &mut noise)?)
            } else {
                None
            };
            let lr = cosine_lr(cfg.lr, step as u64, total as u64);
            let (loss, vars, mut grads) = {
                let mut g = Graph::new();
                let p = base.params().bind(&mut g, false);
                let (lora, vars) = set.bind(&mut g, true);
                let mut loss = denoise_loss(base, &mut g, &p, &lora, &batch);
                if let Some(pb) = &prior_batch {
                    let pl = denoise_loss(base, &mut g, &p, &lora, pb);
                    let pl = g.scale(pl, cfg.preservation.weight as f32);
                    loss = g.add(loss, pl);
                }
                let grads = g.backward(loss);
                (g.scalar(loss), vars, grads)
            };
            set.apply_step(&mut opt, lr, &vars, &mut grads);
            losses.push(LossRecord {
                entry: stream,
                step,
                loss,
                lr,
            });
            step += 1;
        }
    }
    debug_assert_eq!(step, total);
    Ok((set, step))
}

/// One shared adapter set trained on all of `fs`.
pub fn train_dset(base: &GeneratorModel, fs: &FewShotDataset, template: &PromptTemplate, cfg: &DreamConfig) -> Result<DreamOutcome> {
    cfg.validate()?;
    if fs.is_empty() {
        return Err(Error::invalid("few-shot set is empty"));
    }
    let data = examples(base, fs, template, None)?;
    let prior = if cfg.preservation.enabled() {
        prior_examples(base, template, &(0..fs.num_classes()).collect::<Vec<_>>(), cfg)?
    } else {
        Vec::new()
    };
    let mut losses = Vec::new();
    let (set, steps) = train_set(base, &data, &prior, cfg, 0, &mut losses)?;
    Ok(DreamOutcome {
        bank: AdapterBank::new(Regime::Dset, cfg.rank, cfg.seed, fs.num_classes(), vec![set])?,
        losses,
        steps: vec![steps],
    })
}

/// One adapter set per class, each trained only on that class's shots.
pub fn train_cls(base: &GeneratorModel, fs: &FewShotDataset, template: &PromptTemplate, cfg: &DreamConfig) -> Result<DreamOutcome> {
    cfg.validate()?;
    let mut sets = Vec::with_capacity(fs.num_classes());
    let mut steps = Vec::with_capacity(fs.num_classes());
    let mut losses = Vec::new();
    for c in 0..fs.num_classes() {
        let data = examples(base, fs, template, Some(c))?;
        if data.is_empty() {
            return Err(Error::invalid(format!("class {c} ({}) has no shots", fs.class_names()[c])));
        }
        let prior = if cfg.preservation.enabled() {
            prior_examples(base, template, &[c], cfg)?
        } else {
            Vec::new()
        };
        let (set, n) = train_set(base, &data, &prior, cfg, c, &mut losses)?;
        sets.push(set);
        steps.push(n);
    }
    Ok(DreamOutcome {
        bank: AdapterBank::new(Regime::Cls, cfg.rank, cfg.seed, fs.num_classes(), sets)?,
        losses,
        steps,
    })
}

pub fn train(regime: Regime, base: &GeneratorModel, fs: &FewShotDataset, template: &PromptTemplate, cfg: &DreamConfig) -> Result<DreamOutcome> {
    match regime {
        Regime::Dset => train_dset(base, fs, template, cfg),
        Regime::Cls => train_cls(base, fs, template, cfg),
    }
}

/// `w * prior_loss` added to a data loss; `w = 0` returns `loss` unchanged.
pub fn preservation_term(loss: f32, prior_loss: f32, weight: f64) -> f32 {
    if weight == 0.0 {
        loss
    } else {
        loss + weight as f32 * prior_loss
    }
}
