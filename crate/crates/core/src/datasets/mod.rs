//! Labeled image datasets, few-shot sampling and on-disk manifests.
//!
//! Class labels are 0-based indices into the dataset's class-name table.

mod folder;
mod image;
pub mod manifest;
pub mod procedural;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::folder::load_image_folder;
pub use self::image::Image;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledItem {
    pub image: Image,
    pub label: usize,
    /// Relative path of the image inside a dataset directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImageDataset {
    pub split: Split,
    class_names: Vec<String>,
    items: Vec<LabeledItem>,
}

pub(crate) fn image_path(label: usize, index: usize) -> String {
    format!("images/c{label:03}/{index:06}.png")
}

impl LabeledImageDataset {
    pub fn new(split: Split, class_names: Vec<String>) -> Self {
        Self {
            split,
            class_names,
            items: Vec::new(),
        }
    }

    pub fn push(&mut self, image: Image, label: usize) {
        assert!(label < self.class_names.len(), "label {label} outside class table");
        let path = image_path(label, self.items.len());
        self.items.push(LabeledItem { image, label, path });
    }

    pub(crate) fn push_item(&mut self, item: LabeledItem) {
        self.items.push(item);
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }

    /// Items of one class, in dataset order.
    pub fn indices_of(&self, label: usize) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.label == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Hash over the class table and every (label, image) pair in order.
    pub fn content_hash(&self) -> String {
        manifest::content_hash(
            &manifest::ManifestHeader::labeled(self, String::new()),
            &manifest::labeled_rows(self),
        )
    }
}

/// Parameters of a K-shot draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub k: usize,
    pub seed: u64,
    pub split: Split,
}

/// `K` items per class drawn from a source split.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub k: usize,
    pub seed: u64,
    class_names: Vec<String>,
    items: Vec<LabeledItem>,
    /// Index of each item in the source dataset.
    source_indices: Vec<usize>,
    source_hash: String,
}

impl FewShotDataset {
    /// Wraps explicit items (e.g. a hand-built set); `k` is taken as the
    /// per-class count, which must be uniform.
    pub fn from_items(class_names: Vec<String>, items: Vec<LabeledItem>, seed: u64) -> Result<Self> {
        let mut counts = vec![0usize; class_names.len()];
        for it in &items {
            if it.label >= class_names.len() {
                return Err(Error::invalid(format!("label {} outside class table", it.label)));
            }
            counts[it.label] += 1;
        }
        let k = counts.first().copied().unwrap_or(0);
        if counts.iter().any(|&c| c != k) {
            return Err(Error::invalid(format!("unequal shots per class: {counts:?}")));
        }
        let n = items.len();
        Ok(Self {
            k,
            seed,
            class_names,
            items,
            source_indices: (0..n).collect(),
            source_hash: String::new(),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn items(&self) -> &[LabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    /// `D^fs_n`: the items of one class.
    pub fn class_subset(&self, label: usize) -> Vec<&LabeledItem> {
        self.items.iter().filter(|it| it.label == label).collect()
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.k.to_le_bytes());
        for name in &self.class_names {
            h.update(name.as_bytes());
            h.update([0]);
        }
        for it in &self.items {
            h.update(it.label.to_le_bytes());
            h.update(it.image.content_hash().as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Plain labeled view, e.g. for saving as a manifest.
    pub fn to_dataset(&self, split: Split) -> LabeledImageDataset {
        LabeledImageDataset {
            split,
            class_names: self.class_names.clone(),
            items: self.items.clone(),
        }
    }
}

/// Draws `K` items per class.
///
/// Each class gets a seeded permutation of its items and contributes the first
/// `K`; the permutation depends only on `(seed, class)`, so a smaller `K` with
/// the same seed always yields a prefix subset of a larger one.
pub fn sample_few_shot(ds: &LabeledImageDataset, spec: &FewShotSpec) -> Result<FewShotDataset> {
    if spec.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut items = Vec::with_capacity(spec.k * ds.num_classes());
    let mut source_indices = Vec::with_capacity(items.capacity());
    for label in 0..ds.num_classes() {
        let mut idx = ds.indices_of(label);
        if idx.len() < spec.k {
            return Err(Error::invalid(format!(
                "K={} exceeds the {} items of class {label} ({})",
                spec.k,
                idx.len(),
                ds.class_names[label]
            )));
        }
        let mut r = rng(derive_seed(spec.seed, "few-shot", label as u64));
        idx.shuffle(&mut r);
        for &i in &idx[..spec.k] {
            items.push(ds.items[i].clone());
            source_indices.push(i);
        }
    }
    Ok(FewShotDataset {
        k: spec.k,
        seed: spec.seed,
        class_names: ds.class_names.clone(),
        items,
        source_indices,
        source_hash: ds.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::procedural::{make_procedural, FineGrain, ProceduralSpec, Style};
    use super::*;
    use proptest::prelude::*;

    fn bench() -> LabeledImageDataset {
        make_procedural(&ProceduralSpec {
            classes: 3,
            per_class: 40,
            resolution: 8,
            seed: 5,
            fine_grain: FineGrain::High,
            style: Style::Varied,
        })
        .unwrap()
        .train
    }

    fn spec(k: usize, seed: u64) -> FewShotSpec {
        FewShotSpec {
            k,
            seed,
            split: Split::Train,
        }
    }

    #[test]
    fn counts_and_nesting() {
        let ds = bench();
        let two = sample_few_shot(&ds, &spec(2, 9)).unwrap();
        assert_eq!(two.len(), 6);
        assert!(two.class_subset(1).len() == 2);
        let one = sample_few_shot(&ds, &spec(1, 9)).unwrap();
        let sixteen = sample_few_shot(&ds, &spec(16, 9)).unwrap();
        for label in 0..3 {
            let big: Vec<usize> = sixteen
                .source_indices()
                .iter()
                .zip(sixteen.items())
                .filter(|(_, it)| it.label == label)
                .map(|(&i, _)| i)
                .collect();
            let small: Vec<usize> = one
                .source_indices()
                .iter()
                .zip(one.items())
                .filter(|(_, it)| it.label == label)
                .map(|(&i, _)| i)
                .collect();
            assert!(small.iter().all(|i| big.contains(i)));
        }
    }

    #[test]
    fn k_too_large_names_class() {
        let ds = bench();
        let err = sample_few_shot(&ds, &spec(1000, 0)).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn different_seeds_differ() {
        let ds = bench();
        let mut same = 0;
        for s in 0..20u64 {
            let a = sample_few_shot(&ds, &spec(4, s)).unwrap();
            let b = sample_few_shot(&ds, &spec(4, s + 1000)).unwrap();
            if a.source_indices() == b.source_indices() {
                same += 1;
            }
        }
        assert_eq!(same, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn nesting_holds_for_all_k(seed in any::<u64>(), k_small in 1usize..10, extra in 0usize..10) {
            let ds = bench();
            let k_big = k_small + extra;
            let a = sample_few_shot(&ds, &spec(k_small, seed)).unwrap();
            let b = sample_few_shot(&ds, &spec(k_big, seed)).unwrap();
            for label in 0..3 {
                let pa: Vec<usize> = a.source_indices()[label * k_small..(label + 1) * k_small].to_vec();
                let pb: Vec<usize> = b.source_indices()[label * k_big..label * k_big + k_small].to_vec();
                prop_assert_eq!(pa, pb);
            }
        }
    }
}
