//! Prompt template and the whitespace tokenizer shared by the generator and
//! classifier text encoders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLASS_SLOT: &str = "[CLS]";
pub const DEFAULT_TEMPLATE: &str = "a photo of a [CLS]";

/// Fixed word-level vocabulary. Id 0 is padding, id 1 is the unknown word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    max_len: usize,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>, max_len: usize) -> Self {
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Self { words: all, max_len }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Token ids padded to `max_len`; extra words are truncated.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(1))
            .take(self.max_len)
            .collect();
        ids.resize(self.max_len, 0);
        ids
    }
}

/// `C(y)`: maps a class index to its prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template: String,
    pub class_names: Vec<String>,
}

impl PromptTemplate {
    pub fn new(template: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains(CLASS_SLOT) {
            return Err(Error::config(format!("template {template:?} has no {CLASS_SLOT} slot")));
        }
        Ok(Self { template, class_names })
    }

    pub fn standard(class_names: Vec<String>) -> Self {
        Self {
            template: DEFAULT_TEMPLATE.into(),
            class_names,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn prompt(&self, class: usize) -> Result<String> {
        let name = self
            .class_names
            .get(class)
            .ok_or_else(|| Error::invalid(format!("class {class} outside 0..{}", self.class_names.len())))?;
        Ok(self.template.replace(CLASS_SLOT, name))
    }

    pub fn prompts(&self) -> Vec<String> {
        self.class_names
            .iter()
            .map(|n| self.template.replace(CLASS_SLOT, n))
            .collect()
    }
}
