//! Synthetic dataset generation from adapter banks, plus two baselines:
//! the unadapted generator, and denoising from partially noised real shots.

use std::path::Path;

use rand::Rng as _;

use crate::adapters::{check_compatible, AdapterBank};
use crate::datasets::manifest::{self, DatasetKind, ManifestHeader, ManifestRow, Provenance};
use crate::datasets::{FewShotDataset, Image, LabeledImageDataset, LabeledItem, Split};
use crate::error::{Error, Result};
use crate::generator::{ddim_from, forward_noise, sample, with_adapters, GeneratorModel, SampleConfig, SAMPLE_CHUNK};
use crate::seed::{derive_seed, normal_vec, rng};
use crate::text::PromptTemplate;

pub const METHOD_DATADREAM: &str = "datadream";
pub const METHOD_ZERO_SHOT: &str = "zero_shot";
pub const METHOD_NOISED_REAL: &str = "noised_real";
/// Placeholder for provenance fields that have no artifact (no adapters).
pub const NO_BANK: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub per_class: usize,
    pub sampler: SampleConfig,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            per_class: 500,
            sampler: SampleConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticItem {
    pub image: Image,
    pub label: usize,
    pub path: String,
    pub provenance: Provenance,
}

/// Generated images in `(class, index)` order with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    class_names: Vec<String>,
    per_class: usize,
    partial: bool,
    items: Vec<SyntheticItem>,
}

fn synth_path(label: usize, index: usize) -> String {
    format!("images/c{label:03}/{index:06}.png")
}

/// Seed of image `index` of class `label`; shared by every method so runs
/// that differ only in weights start from the same noise.
pub fn image_seed(seed: u64, label: usize, index: usize) -> u64 {
    derive_seed(derive_seed(seed, "generate", label as u64), "image", index as u64)
}

impl SyntheticDataset {
    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn is_partial(&self) -> bool {
        self.partial
    }

    pub fn items(&self) -> &[SyntheticItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn header(&self) -> ManifestHeader {
        ManifestHeader {
            format: manifest::FORMAT.into(),
            version: manifest::VERSION,
            kind: DatasetKind::Synthetic,
            split: None,
            class_names: self.class_names.clone(),
            rows: self.items.len(),
            per_class: Some(self.per_class),
            partial: self.partial,
            content_hash: String::new(),
        }
    }

    fn rows(&self) -> Vec<ManifestRow> {
        self.items
            .iter()
            .map(|it| ManifestRow {
                path: it.path.clone(),
                class: it.label,
                sha256: it.image.content_hash(),
                provenance: Some(it.provenance.clone()),
            })
            .collect()
    }

    pub fn content_hash(&self) -> String {
        manifest::content_hash(&self.header(), &self.rows())
    }

    pub fn save(&self, dir: &Path) -> Result<ManifestHeader> {
        for it in &self.items {
            manifest::write_image(dir, &it.path, &it.image)?;
        }
        manifest::write_manifest(dir, self.header(), &self.rows())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (header, rows) = manifest::read_manifest(dir)?;
        if header.kind != DatasetKind::Synthetic {
            return Err(Error::Format("expected a synthetic dataset manifest".into()));
        }
        let mut items = Vec::with_capacity(rows.len());
        for row in &rows {
            let provenance = match &row.provenance {
                Some(p) if p.is_complete() => p.clone(),
                _ => return Err(Error::integrity(&row.path, "incomplete provenance")),
            };
            items.push(SyntheticItem {
                image: manifest::read_image(dir, row)?,
                label: row.class,
                path: row.path.clone(),
                provenance,
            });
        }
        let ds = Self {
            class_names: header.class_names,
            per_class: header.per_class.unwrap_or(0),
            partial: header.partial,
            items,
        };
        ds.check_counts()?;
        Ok(ds)
    }

    fn check_counts(&self) -> Result<()> {
        if self.partial {
            return Ok(());
        }
        let mut counts = vec![0; self.num_classes()];
        for it in &self.items {
            *counts
                .get_mut(it.label)
                .ok_or_else(|| Error::integrity(&it.path, "class outside class table"))? += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n != self.per_class) {
            return Err(Error::integrity(
                "header",
                format!("class {c} has {} images, expected {}", counts[c], self.per_class),
            ));
        }
        Ok(())
    }

    /// The first `m` images of every class (a nested subset for smaller `m`).
    pub fn take_per_class(&self, m: usize) -> Result<Self> {
        if m > self.per_class {
            return Err(Error::invalid(format!("requested {m} per class, have {}", self.per_class)));
        }
        let mut seen = vec![0; self.num_classes()];
        let items = self
            .items
            .iter()
            .filter(|it| {
                seen[it.label] += 1;
                seen[it.label] <= m
            })
            .cloned()
            .collect();
        Ok(Self {
            class_names: self.class_names.clone(),
            per_class: m,
            partial: self.partial,
            items,
        })
    }

    pub fn to_labeled(&self) -> LabeledImageDataset {
        let mut ds = LabeledImageDataset::new(Split::Train, self.class_names.clone());
        for it in &self.items {
            ds.push_item(LabeledItem {
                image: it.image.clone(),
                label: it.label,
                path: it.path.clone(),
            });
        }
        ds
    }
}

fn provenance(model: &GeneratorModel, bank: Option<&AdapterBank>, cfg: &GenerationConfig, seed: u64, method: &str) -> Provenance {
    Provenance {
        generator_hash: model.content_hash(),
        bank_hash: bank.map_or_else(|| NO_BANK.to_string(), AdapterBank::content_hash),
        regime: bank.map_or(NO_BANK, |b| b.regime.as_str()).to_string(),
        guidance: cfg.sampler.guidance,
        steps: cfg.sampler.steps,
        seed,
        method: method.to_string(),
    }
}

fn generate(
    model: &GeneratorModel,
    bank: Option<&AdapterBank>,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
    method: &str,
) -> Result<SyntheticDataset> {
    let n = template.num_classes();
    if let Some(b) = bank {
        if b.num_classes != n {
            return Err(Error::Compatibility(format!(
                "bank covers {} classes, prompt set has {n}",
                b.num_classes
            )));
        }
        for e in b.entries() {
            check_compatible(model, e)?;
        }
    }
    let mut items = Vec::with_capacity(n * cfg.per_class);
    let shared = match bank {
        Some(b) if b.regime == crate::adapters::Regime::Dset => Some(with_adapters(model, Some(b.for_class(0)))?),
        _ => None,
    };
    for label in 0..n {
        let owned;
        let merged = match (bank, &shared) {
            (_, Some(m)) => m,
            (Some(b), None) => {
                owned = with_adapters(model, Some(b.for_class(label)))?;
                &owned
            }
            (None, None) => model,
        };
        let seeds: Vec<u64> = (0..cfg.per_class).map(|i| image_seed(cfg.seed, label, i)).collect();
        let images = sample(merged, &template.prompt(label)?, &seeds, &cfg.sampler)?;
        for (i, (image, seed)) in images.into_iter().zip(seeds).enumerate() {
            items.push(SyntheticItem {
                image,
                label,
                path: synth_path(label, i),
                provenance: provenance(model, bank, cfg, seed, method),
            });
        }
    }
    Ok(SyntheticDataset {
        class_names: template.class_names.clone(),
        per_class: cfg.per_class,
        partial: false,
        items,
    })
}

/// `M` images per class under the bank's adapters (merged before sampling).
pub fn generate_dataset(
    model: &GeneratorModel,
    bank: &AdapterBank,
    template: &PromptTemplate,
    cfg: &GenerationConfig,
) -> Result<SyntheticDataset> {
    generate(model, Some(bank), template, cfg, METHOD_DATADREAM)
}

/// The unadapted generator prompted with the class names.
pub fn baseline_zero_shot(model: &GeneratorModel, template: &PromptTemplate, cfg: &GenerationConfig) -> Result<SyntheticDataset> {
    generate(model, None, template, cfg, METHOD_ZERO_SHOT)
}

/// Start timestep `round(strength * T)` of the noised-real baseline.
pub fn start_timestep(strength: f64, t_max: usize) -> usize {
    (strength * t_max as f64).round() as usize
}

/// Denoises real shots noised to `round(strength * T)` with the standard prompt.
pub fn baseline_noised_real(
    model: &GeneratorModel,
    fs: &FewShotDataset,
    template: &PromptTemplate,
    strength: f64,
    cfg: &GenerationConfig,
) -> Result<SyntheticDataset> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::invalid(format!("strength {strength} outside [0, 1]")));
    }
    let n = template.num_classes();
    let t_star = start_timestep(strength, model.schedule.t_max());
    let mut ts = vec![t_star];
    ts.extend(
        model
            .schedule
            .ddim_timesteps(cfg.sampler.steps)
            .into_iter()
            .filter(|&t| t < t_star),
    );
    let per = model.arch.tokens() * model.arch.token_dim();
    let mut items = Vec::with_capacity(n * cfg.per_class);
    for label in 0..n {
        let shots = fs.class_subset(label);
        if shots.is_empty() {
            return Err(Error::invalid(format!("class {label} ({}) has no shots", template.class_names[label])));
        }
        let mut pick = rng(derive_seed(cfg.seed, "noised-real-pick", label as u64));
        let sources: Vec<&Image> = (0..cfg.per_class)
            .map(|_| &shots[pick.random_range(0..shots.len())].image)
            .collect();
        let seeds: Vec<u64> = (0..cfg.per_class).map(|i| image_seed(cfg.seed, label, i)).collect();
        let prompt = model.encode_prompt(&template.prompt(label)?);
        for (chunk_idx, chunk) in seeds.chunks(SAMPLE_CHUNK).enumerate() {
            let base = chunk_idx * SAMPLE_CHUNK;
            let images: Vec<Image> = if t_star == 0 {
                (0..chunk.len()).map(|j| sources[base + j].clone()).collect()
            } else {
                let mut x = Vec::with_capacity(chunk.len() * per);
                for (j, &s) in chunk.iter().enumerate() {
                    let x0 = model.image_tokens(sources[base + j])?;
                    let eps = normal_vec(&mut rng(s), per);
                    x.extend(forward_noise(&x0, t_star, &eps, &model.schedule)?);
                }
                let prompts: Vec<usize> = chunk.iter().flat_map(|_| prompt.iter().copied()).collect();
                let out = ddim_from(model, &prompts, x, &ts, cfg.sampler.guidance);
                out.chunks(per).map(|t| model.tokens_to_image(t)).collect()
            };
            for (j, image) in images.into_iter().enumerate() {
                items.push(SyntheticItem {
                    image,
                    label,
                    path: synth_path(label, base + j),
                    provenance: provenance(model, None, cfg, chunk[j], METHOD_NOISED_REAL),
                });
            }
        }
    }
    Ok(SyntheticDataset {
        class_names: template.class_names.clone(),
        per_class: cfg.per_class,
        partial: false,
        items,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_timestep_rounds() {
        assert_eq!(start_timestep(0.75, 1000), 750);
        assert_eq!(start_timestep(0.0, 1000), 0);
        assert_eq!(start_timestep(1.0, 1000), 1000);
    }

    #[test]
    fn image_seeds_are_distinct_per_class_and_index() {
        assert_ne!(image_seed(1, 0, 1), image_seed(1, 1, 0));
        assert_eq!(image_seed(1, 2, 3), image_seed(1, 2, 3));
    }
}
