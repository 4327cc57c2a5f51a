//! Two-tower image/text classifier.
//!
//! Both towers are small transformers whose pooled outputs are projected into
//! a shared embedding space. Classification scores are cosine similarities
//! between an image embedding and the embeddings of the class prompts,
//! multiplied by a learned temperature `exp(log_scale)` during training.

mod augment;

use std::collections::HashSet;
use std::path::Path;

use datadream_autograd::{cosine_lr, AdamW, AdamWConfig, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::augment::{augment, AugmentConfig};
use crate::adapters::{inject, AdapterSet, AttentionHost, Host, TargetId};
use crate::binfmt::Container;
use crate::datasets::{Image, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::nn::{patchify, EncoderBlock, LayerNorm, Linear, LoraVars};
use crate::seed::{derive_seed, rng, Rng};
use crate::text::{PromptTemplate, Vocabulary};

const CHECKPOINT_MAGIC: [u8; 8] = *b"DDCLF\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Upper bound on the temperature, as `ln(100)`.
const MAX_LOG_SCALE: f32 = 4.605_17;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub resolution: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub embed_dim: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            resolution: 16,
            patch: 4,
            width: 64,
            heads: 4,
            layers: 2,
            mlp_hidden: 128,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            embed_dim: 64,
        }
    }
}

impl ClassifierArch {
    pub fn tokens(&self) -> usize {
        (self.resolution / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::config("classifier resolution must be a multiple of its patch"));
        }
        if self.width % self.heads != 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::config("classifier widths must divide evenly into heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    patch_in: Linear,
    pos: ParamId,
    image_blocks: Vec<EncoderBlock>,
    image_ln: LayerNorm,
    image_proj: Linear,
    tok_emb: ParamId,
    text_pos: ParamId,
    text_blocks: Vec<EncoderBlock>,
    text_ln: LayerNorm,
    text_proj: Linear,
    log_scale: ParamId,
}

#[derive(Debug, Clone)]
pub struct TwoTowerClassifier {
    pub arch: ClassifierArch,
    pub vocab: Vocabulary,
    pub seed: u64,
    store: ParamStore,
    layout: Layout,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ClassifierArch,
    vocab: Vocabulary,
    seed: u64,
}

impl TwoTowerClassifier {
    pub fn new(arch: ClassifierArch, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng(derive_seed(seed, "classifier-init", 0));
        let mut s = ParamStore::new();
        let (w, tw, e) = (arch.width, arch.text_width, arch.embed_dim);
        let patch_in = Linear::new(&mut s, "image.patch_in", arch.token_dim(), w, true, &mut r);
        let pos = s.insert("image.pos", Tensor::randn([arch.tokens(), w], 0.1, &mut r));
        let image_blocks = (0..arch.layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("image.block{i}"),
                    Host::ImageTower,
                    i,
                    w,
                    arch.heads,
                    arch.mlp_hidden,
                    &mut r,
                )
            })
            .collect();
        let image_ln = LayerNorm::new(&mut s, "image.ln", w);
        let image_proj = Linear::new(&mut s, "image.proj", w, e, false, &mut r);
        let tok_emb = s.insert("text.tok_emb", Tensor::randn([vocab.len(), tw], 0.5, &mut r));
        let text_pos = s.insert("text.pos", Tensor::randn([vocab.max_len(), tw], 0.1, &mut r));
        let text_blocks = (0..arch.text_layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("text.block{i}"),
                    Host::TextTower,
                    i,
                    tw,
                    arch.text_heads,
                    2 * tw,
                    &mut r,
                )
            })
            .collect();
        let text_ln = LayerNorm::new(&mut s, "text.ln", tw);
        let text_proj = Linear::new(&mut s, "text.proj", tw, e, false, &mut r);
        let log_scale = s.insert("log_scale", Tensor::zeros([1, 1]));
        Ok(Self {
            arch,
            vocab,
            seed,
            store: s,
            layout: Layout {
                patch_in,
                pos,
                image_blocks,
                image_ln,
                image_proj,
                tok_emb,
                text_pos,
                text_blocks,
                text_ln,
                text_proj,
                log_scale,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn log_scale(&self) -> f32 {
        self.store.get(self.layout.log_scale).data()[0]
    }

    pub fn log_scale_id(&self) -> ParamId {
        self.layout.log_scale
    }

    /// Patch tokens of `image`, scaled to `[-1, 1]`.
    pub fn image_tokens(&self, image: &Image) -> Result<Vec<f32>> {
        let r = self.arch.resolution as u32;
        if image.width() != r || image.height() != r {
            return Err(Error::invalid(format!(
                "image is {}x{}, classifier works at {r}x{r}",
                image.width(),
                image.height()
            )));
        }
        Ok(self.chw_tokens(&image.to_chw()))
    }

    fn chw_tokens(&self, chw: &[f32]) -> Vec<f32> {
        let scaled: Vec<f32> = chw.iter().map(|v| v * 2.0 - 1.0).collect();
        patchify(&scaled, self.arch.resolution, self.arch.patch)
    }

    /// Pooled image features `(batch, width)` before the projection.
    pub fn image_pooled(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, tokens: Vec<f32>) -> Var {
        let l = &self.layout;
        let ntok = self.arch.tokens();
        let batch = tokens.len() / (ntok * self.arch.token_dim());
        let x = g.constant(tokens, batch * ntok, self.arch.token_dim());
        let h = l.patch_in.forward(g, p, x);
        let mut h = g.add_tiled(h, p[l.pos]);
        for b in &l.image_blocks {
            h = b.forward(g, p, lora, h, batch);
        }
        let h = l.image_ln.forward(g, p, h);
        g.mean_pool(h, ntok)
    }

    /// Image embeddings `(batch, embed_dim)`, not normalized.
    pub fn image_embed(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, tokens: Vec<f32>) -> Var {
        let pooled = self.image_pooled(g, p, lora, tokens);
        self.layout.image_proj.forward(g, p, pooled)
    }

    /// Text embeddings `(batch, embed_dim)` for token ids `batch * max_len`.
    pub fn text_embed(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, ids: &[usize]) -> Var {
        let l = &self.layout;
        let len = self.vocab.max_len();
        let batch = ids.len() / len;
        let emb = g.gather_rows(p[l.tok_emb], ids);
        let mut h = g.add_tiled(emb, p[l.text_pos]);
        for b in &l.text_blocks {
            h = b.forward(g, p, lora, h, batch);
        }
        let h = l.text_ln.forward(g, p, h);
        let pooled = g.mean_pool(h, len);
        l.text_proj.forward(g, p, pooled)
    }

    /// Temperature-scaled cosine logits `(images, prompts)`.
    pub fn logits(&self, g: &mut Graph<'_>, p: &Bound, img: Var, txt: Var) -> Var {
        let a = g.l2_normalize(img);
        let b = g.l2_normalize(txt);
        let sim = g.matmul_nt(a, b);
        let scale = g.exp(p[self.layout.log_scale]);
        g.scale_by(sim, scale)
    }

    pub fn prompt_ids(&self, prompts: &[String]) -> Vec<usize> {
        prompts.iter().flat_map(|s| self.vocab.encode(s)).collect()
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_container().encode()))
    }

    fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
        };
        Container {
            magic: CHECKPOINT_MAGIC,
            version: CHECKPOINT_VERSION,
            fixed: Vec::new(),
            meta: serde_json::to_string(&meta).expect("meta serializes"),
            records: self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let meta: CheckpointMeta =
            serde_json::from_str(&c.meta).map_err(|e| Error::integrity("header", format!("metadata: {e}")))?;
        let mut model = Self::new(meta.arch, meta.vocab, meta.seed)?;
        crate::generator::load_records(&mut model.store, c.records)?;
        Ok(model)
    }
}

impl AttentionHost for TwoTowerClassifier {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn projections(&self) -> Vec<(TargetId, ParamId)> {
        let l = &self.layout;
        l.image_blocks
            .iter()
            .chain(&l.text_blocks)
            .flat_map(|b| b.attn.projections())
            .collect()
    }
}

/// Adapters plus the fine-tuned temperature; `None` adapters means the base.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub adapters: Option<AdapterSet>,
    pub log_scale: f32,
}

impl Adapted {
    pub fn base(model: &TwoTowerClassifier) -> Self {
        Self {
            adapters: None,
            log_scale: model.log_scale(),
        }
    }
}

/// Contrastive pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerPretrainConfig {
    pub steps: usize,
    /// Distinct classes per batch, one image each.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    /// Permit corpus classes that also appear among the evaluation classes.
    pub allow_overlap: bool,
    pub seed: u64,
}

impl Default for TowerPretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
            allow_overlap: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TowerPretrainOutcome {
    pub model: TwoTowerClassifier,
    /// Mean of the image-to-text and text-to-image losses per step.
    pub losses: Vec<f32>,
    pub overlap: Vec<String>,
}

/// Symmetric contrastive loss for `n` matched (image, text) pairs, given
/// normalized embeddings and the temperature.
pub fn contrastive_loss(g: &mut Graph<'_>, img: Var, txt: Var, scale: Var, n: usize) -> Var {
    let labels: Vec<usize> = (0..n).collect();
    let i2t = g.matmul_nt(img, txt);
    let i2t = g.scale_by(i2t, scale);
    let t2i = g.matmul_nt(txt, img);
    let t2i = g.scale_by(t2i, scale);
    let a = g.cross_entropy(i2t, &labels);
    let b = g.cross_entropy(t2i, &labels);
    let sum = g.add(a, b);
    g.scale(sum, 0.5)
}

/// Contrastively trains both towers on `corpus` (one caption per class).
pub fn pretrain_towers(
    mut model: TwoTowerClassifier,
    corpus: &LabeledImageDataset,
    template: &PromptTemplate,
    eval_classes: &[String],
    cfg: &TowerPretrainConfig,
) -> Result<TowerPretrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty pretraining corpus"));
    }
    let eval: HashSet<&str> = eval_classes.iter().map(String::as_str).collect();
    let overlap: Vec<String> = corpus
        .class_names()
        .iter()
        .filter(|c| eval.contains(c.as_str()))
        .cloned()
        .collect();
    if !overlap.is_empty() && !cfg.allow_overlap {
        return Err(Error::config(format!(
            "pretraining corpus shares {} classes with the evaluation set (e.g. {:?})",
            overlap.len(),
            overlap[0]
        )));
    }
    let n_classes = corpus.num_classes();
    let batch = cfg.batch_size.min(n_classes);
    if batch < 2 {
        return Err(Error::invalid("contrastive pretraining needs at least two classes"));
    }
    let by_class: Vec<Vec<usize>> = (0..n_classes).map(|c| corpus.indices_of(c)).collect();
    let populated: Vec<usize> = (0..n_classes).filter(|&c| !by_class[c].is_empty()).collect();
    let prompts: Vec<Vec<usize>> = template.prompts().iter().map(|s| model.vocab.encode(s)).collect();
    let chws: Vec<Vec<f32>> = corpus.items().iter().map(|it| it.image.to_chw()).collect();
    let res = model.arch.resolution;
    let mut r = rng(derive_seed(cfg.seed, "pretrain-classifier", 0));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let classes: Vec<usize> = populated.choose_multiple(&mut r, batch.min(populated.len())).copied().collect();
        let n = classes.len();
        let mut tokens = Vec::new();
        let mut ids = Vec::new();
        for &c in &classes {
            let i = *by_class[c].choose(&mut r).expect("populated class");
            tokens.extend(model.chw_tokens(&augment(&chws[i], res, &cfg.augment, &mut r)));
            ids.extend_from_slice(&prompts[c]);
        }
        let lr = cosine_lr(cfg.lr, step as u64, cfg.steps as u64);
        let mut grads = {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let none = LoraVars::none();
            let img = model.image_embed(&mut g, &p, &none, tokens);
            let txt = model.text_embed(&mut g, &p, &none, &ids);
            let img = g.l2_normalize(img);
            let txt = g.l2_normalize(txt);
            let scale = g.exp(p[model.layout.log_scale]);
            let loss = contrastive_loss(&mut g, img, txt, scale, n);
            losses.push(g.scalar(loss));
            let mut grads = g.backward(loss);
            p.vars().iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
        };
        opt.step(lr, model.store.tensors_mut().zip(grads.iter_mut().map(|g| g.as_deref())));
        let ls = model.store.get_mut(model.layout.log_scale);
        ls.data_mut()[0] = ls.data()[0].min(MAX_LOG_SCALE);
    }
    Ok(TowerPretrainOutcome {
        model,
        losses,
        overlap,
    })
}

/// Normalized prompt embeddings for a class set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbeddings {
    pub dim: usize,
    /// `classes x dim`, unit rows.
    pub vectors: Vec<f32>,
}

impl PromptEmbeddings {
    pub fn num_classes(&self) -> usize {
        self.vectors.len() / self.dim
    }
}

fn normalize_rows(v: &mut [f32], dim: usize) {
    for row in v.chunks_mut(dim) {
        let n = (row.iter().map(|x| x * x).sum::<f32>() + 1e-12).sqrt();
        for x in row.iter_mut() {
            *x /= n;
        }
    }
}

pub fn prompt_embeddings(model: &TwoTowerClassifier, adapted: &Adapted, prompts: &[String]) -> PromptEmbeddings {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let lora = match &adapted.adapters {
        Some(s) => s.bind(&mut g, false).0,
        None => LoraVars::none(),
    };
    let ids = model.prompt_ids(prompts);
    let t = model.text_embed(&mut g, &p, &lora, &ids);
    let dim = model.arch.embed_dim;
    let mut vectors = g.value(t).to_vec();
    normalize_rows(&mut vectors, dim);
    PromptEmbeddings { dim, vectors }
}

/// Image embeddings, `images x embed_dim`, not normalized.
pub fn embed_images(model: &TwoTowerClassifier, adapted: &Adapted, images: &[&Image]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(images.len() * model.arch.embed_dim);
    for chunk in images.chunks(256) {
        let mut tokens = Vec::new();
        for img in chunk {
            tokens.extend(model.image_tokens(img)?);
        }
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let lora = match &adapted.adapters {
            Some(s) => s.bind(&mut g, false).0,
            None => LoraVars::none(),
        };
        let e = model.image_embed(&mut g, &p, &lora, tokens);
        out.extend_from_slice(g.value(e));
    }
    Ok(out)
}

/// Argmax of cosine similarity between one embedding and every prompt.
pub fn classify_embedding(embedding: &[f32], prompts: &PromptEmbeddings) -> (usize, Vec<f32>) {
    let n = (embedding.iter().map(|x| x * x).sum::<f32>() + 1e-12).sqrt();
    let scores: Vec<f32> = prompts
        .vectors
        .chunks(prompts.dim)
        .map(|p| p.iter().zip(embedding).map(|(a, b)| a * b).sum::<f32>() / n)
        .collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    (best, scores)
}

/// Class index and cosine scores for one image under the base model.
pub fn zero_shot_classify(model: &TwoTowerClassifier, prompts: &PromptEmbeddings, image: &Image) -> Result<(usize, Vec<f32>)> {
    let e = embed_images(model, &Adapted::base(model), &[image])?;
    Ok(classify_embedding(&e, prompts))
}

/// Predicted labels for every item of `ds`.
pub fn predict(model: &TwoTowerClassifier, adapted: &Adapted, prompts: &[String], ds: &LabeledImageDataset) -> Result<Vec<usize>> {
    let pe = prompt_embeddings(model, adapted, prompts);
    let images: Vec<&Image> = ds.items().iter().map(|it| &it.image).collect();
    let emb = embed_images(model, adapted, &images)?;
    Ok(emb.chunks(model.arch.embed_dim).map(|e| classify_embedding(e, &pe).0).collect())
}

/// Fine-tuning settings for the real/synthetic mixture objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    /// Weight of the real loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_grid: Vec<f64>,
    pub weight_decay_grid: Vec<f64>,
    pub rank: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 5e-4,
            lr_grid: vec![1e-4, 1e-5, 1e-6, 1e-7],
            weight_decay_grid: vec![5e-4, 1e-4],
            rank: 16,
            epochs: 10,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if self.lr_grid.is_empty() || self.weight_decay_grid.is_empty() {
            return Err(Error::config("hyperparameter grids must be nonempty"));
        }
        if self.rank == 0 {
            return Err(Error::config("rank must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MixtureOutcome {
    pub adapted: Adapted,
    pub losses: Vec<f32>,
    pub steps: usize,
}

/// One data source with its own shuffling stream.
struct Source {
    chws: Vec<Vec<f32>>,
    labels: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl Source {
    fn new(ds: &LabeledImageDataset, rng: Rng) -> Self {
        let mut s = Self {
            chws: ds.items().iter().map(|it| it.image.to_chw()).collect(),
            labels: ds.items().iter().map(|it| it.label).collect(),
            order: (0..ds.len()).collect(),
            cursor: usize::MAX,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next `n` examples, wrapping into a fresh permutation as needed.
    fn draw(&mut self, n: usize, model: &TwoTowerClassifier, aug: &AugmentConfig) -> (Vec<f32>, Vec<usize>) {
        let mut tokens = Vec::new();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor >= self.order.len() {
                self.reshuffle();
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            let a = augment(&self.chws[i], model.arch.resolution, aug, &mut self.rng);
            tokens.extend(model.chw_tokens(&a));
            labels.push(self.labels[i]);
        }
        (tokens, labels)
    }
}

/// A labelled batch as patch tokens plus labels.
pub type TokenBatch = (Vec<f32>, Vec<usize>);

/// Loss nodes of one mixture step.
#[derive(Debug, Clone, Copy)]
pub struct MixtureLoss {
    pub total: Var,
    /// Mean cross-entropy of each sub-batch, before weighting.
    pub real_ce: Option<Var>,
    pub synth_ce: Option<Var>,
}

/// `lambda * CE(real) + (1 - lambda) * CE(synth)` with temperature-scaled
/// cosine logits against the normalized prompt embeddings `txt`.
#[allow(clippy::too_many_arguments)]
pub fn mixture_loss(
    g: &mut Graph<'_>,
    model: &TwoTowerClassifier,
    p: &Bound,
    lora: &LoraVars,
    txt: Var,
    scale: Var,
    real: Option<TokenBatch>,
    synth: Option<TokenBatch>,
    lambda: f64,
) -> MixtureLoss {
    let ce = |g: &mut Graph<'_>, batch: Option<TokenBatch>| {
        batch.map(|(tokens, labels)| {
            let img = model.image_embed(g, p, lora, tokens);
            let img = g.l2_normalize(img);
            let sim = g.matmul_nt(img, txt);
            let logits = g.scale_by(sim, scale);
            g.cross_entropy(logits, &labels)
        })
    };
    let real_ce = ce(g, real);
    let synth_ce = ce(g, synth);
    let wr = real_ce.map(|v| g.scale(v, lambda as f32));
    let ws = synth_ce.map(|v| g.scale(v, (1.0 - lambda) as f32));
    let total = match (wr, ws) {
        (Some(a), Some(b)) => g.add(a, b),
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => panic!("mixture_loss needs at least one batch"),
    };
    MixtureLoss {
        total,
        real_ce,
        synth_ce,
    }
}

/// Number of optimizer steps: `epochs * ceil(largest participating source / its sub-batch)`.
pub fn mixture_steps(real: usize, synth: usize, lambda: f64, batch: usize, epochs: usize) -> usize {
    let (r, s) = (lambda > 0.0 && real > 0, lambda < 1.0 && synth > 0);
    let sub = if r && s { batch / 2 } else { batch };
    let largest = [(r, real), (s, synth)]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| n.div_ceil(sub))
        .max()
        .unwrap_or(0);
    epochs * largest
}

/// Fine-tunes adapters on both towers (and the temperature) with
/// `lambda * CE(real) + (1 - lambda) * CE(synthetic)`.
///
/// A source whose weight is zero is not drawn at all, so `lambda = 1`
/// reproduces a run without synthetic data and `lambda = 0` one without
/// real data.
pub fn train_mixture(
    model: &TwoTowerClassifier,
    real: Option<&LabeledImageDataset>,
    synth: Option<&LabeledImageDataset>,
    prompts: &[String],
    cfg: &MixtureConfig,
) -> Result<MixtureOutcome> {
    cfg.validate()?;
    let real = real.filter(|d| !d.is_empty());
    let synth = synth.filter(|d| !d.is_empty());
    if cfg.lambda < 1.0 && synth.is_none() {
        return Err(Error::config("synthetic set is empty but lambda < 1"));
    }
    if cfg.lambda > 0.0 && real.is_none() {
        return Err(Error::config("real set is empty but lambda > 0"));
    }
    for ds in [real, synth].into_iter().flatten() {
        if ds.num_classes() != prompts.len() {
            return Err(Error::invalid("dataset classes do not match the prompt set"));
        }
    }
    let use_real = cfg.lambda > 0.0;
    let use_synth = cfg.lambda < 1.0;
    let sub = if use_real && use_synth { cfg.batch_size / 2 } else { cfg.batch_size };
    let steps = mixture_steps(
        real.map_or(0, LabeledImageDataset::len),
        synth.map_or(0, LabeledImageDataset::len),
        cfg.lambda,
        cfg.batch_size,
        cfg.epochs,
    );
    let mut real_src = real
        .filter(|_| use_real)
        .map(|d| Source::new(d, rng(derive_seed(cfg.seed, "mixture-real", 0))));
    let mut synth_src = synth
        .filter(|_| use_synth)
        .map(|d| Source::new(d, rng(derive_seed(cfg.seed, "mixture-synth", 0))));
    let mut set = inject(
        model,
        &[Host::ImageTower, Host::TextTower],
        cfg.rank,
        derive_seed(cfg.seed, "mixture-init", 0),
    )?;
    let mut log_scale = Tensor::full([1, 1], model.log_scale());
    let ids = model.prompt_ids(prompts);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut scale_opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let real_batch = real_src.as_mut().map(|s| s.draw(sub, model, &cfg.augment));
        let synth_batch = synth_src.as_mut().map(|s| s.draw(sub, model, &cfg.augment));
        let lr = cosine_lr(cfg.lr, step as u64, steps as u64);
        let (vars, ls_var, mut grads) = {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, false);
            let (lora, vars) = set.bind(&mut g, true);
            let ls = g.param(&log_scale, true);
            let txt = model.text_embed(&mut g, &p, &lora, &ids);
            let txt = g.l2_normalize(txt);
            let scale = g.exp(ls);
            let loss = mixture_loss(&mut g, model, &p, &lora, txt, scale, real_batch, synth_batch, cfg.lambda).total;
            losses.push(g.scalar(loss));
            let grads = g.backward(loss);
            (vars, ls, grads)
        };
        let ls_grad = grads.take(ls_var);
        set.apply_step(&mut opt, lr, &vars, &mut grads);
        scale_opt.step(lr, [(&mut log_scale, ls_grad.as_deref())]);
        log_scale.data_mut()[0] = log_scale.data()[0].min(MAX_LOG_SCALE);
    }
    Ok(MixtureOutcome {
        adapted: Adapted {
            adapters: Some(set),
            log_scale: log_scale.data()[0],
        },
        losses,
        steps,
    })
}

/// Top-1 accuracy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub samples: usize,
}

/// Accuracy of `predictions` against `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<AccuracyReport> {
    if labels.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid("prediction count does not match labels"));
    }
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        tot[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let correct: usize = hit.iter().sum();
    Ok(AccuracyReport {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hit
            .iter()
            .zip(&tot)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
        samples: labels.len(),
    })
}

pub fn evaluate(
    model: &TwoTowerClassifier,
    adapted: &Adapted,
    prompts: &[String],
    test: &LabeledImageDataset,
) -> Result<AccuracyReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let preds = predict(model, adapted, prompts, test)?;
    let labels: Vec<usize> = test.items().iter().map(|it| it.label).collect();
    accuracy(&preds, &labels, test.num_classes())
}

/// Trainable parameters of a fine-tuned classifier: adapter factors plus the
/// temperature.
pub fn trainable_params(adapted: &Adapted) -> usize {
    adapted.adapters.as_ref().map_or(0, AdapterSet::num_params) + 1
}

/// Splits off the last `per_class` items of every class as a validation set.
pub fn split_holdout(ds: &LabeledImageDataset, per_class: usize) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
    let mut train = LabeledImageDataset::new(ds.split, ds.class_names().to_vec());
    let mut val = LabeledImageDataset::new(ds.split, ds.class_names().to_vec());
    for c in 0..ds.num_classes() {
        let idx = ds.indices_of(c);
        if idx.len() <= per_class {
            return Err(Error::config(format!(
                "class {:?} has {} items, cannot hold out {per_class}",
                ds.class_names()[c],
                idx.len()
            )));
        }
        let cut = idx.len() - per_class;
        for (n, &i) in idx.iter().enumerate() {
            let item = ds.items()[i].clone();
            if n < cut {
                train.push_item(item);
            } else {
                val.push_item(item);
            }
        }
    }
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub weight_decay: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterChoice {
    pub lr: f64,
    pub weight_decay: f64,
    pub cells: Vec<SweepCell>,
}

/// Grid search over `cfg.lr_grid x cfg.weight_decay_grid`, validating on
/// `holdout` real shots per class. Ties go to the earlier grid cell.
pub fn select_hyperparameters(
    model: &TwoTowerClassifier,
    real: &LabeledImageDataset,
    synth: Option<&LabeledImageDataset>,
    prompts: &[String],
    cfg: &MixtureConfig,
    holdout: usize,
) -> Result<HyperparameterChoice> {
    cfg.validate()?;
    let (train, val) = split_holdout(real, holdout)?;
    let mut cells = Vec::new();
    for &lr in &cfg.lr_grid {
        for &weight_decay in &cfg.weight_decay_grid {
            let run = MixtureConfig {
                lr,
                weight_decay,
                ..cfg.clone()
            };
            let out = train_mixture(model, Some(&train), synth, prompts, &run)?;
            let acc = evaluate(model, &out.adapted, prompts, &val)?.accuracy;
            cells.push(SweepCell {
                lr,
                weight_decay,
                val_accuracy: acc,
            });
        }
    }
    let best = cells
        .iter()
        .fold(&cells[0], |b, c| if c.val_accuracy > b.val_accuracy { c } else { b });
    Ok(HyperparameterChoice {
        lr: best.lr,
        weight_decay: best.weight_decay,
        cells: cells.clone(),
    })
}

/// Published averages kept alongside desk results for reference only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNumbers {
    pub synthetic_only_avg: f64,
    pub real_synthetic_avg: f64,
}

pub const REFERENCE: ReferenceNumbers = ReferenceNumbers {
    synthetic_only_avg: 83.4,
    real_synthetic_avg: 87.0,
};

/// One evaluated classifier, as emitted to the results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub dataset: String,
    pub method: String,
    pub real: bool,
    pub synthetic: bool,
    pub shots: usize,
    pub per_class_synthetic: usize,
    /// Real-loss weight; absent for the zero-shot classifier.
    pub lambda: Option<f64>,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub config_hash: String,
    pub reference: Option<ReferenceNumbers>,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

pub fn records_jsonl(records: &[ResultRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Fixed-width table with one row per record.
pub fn records_table(records: &[ResultRecord]) -> String {
    let mut out = format!(
        "{:<14} {:<12} {:>2} {:>2} {:>4} {:>5} {:>6} {:>6} {:>8}\n",
        "dataset", "method", "R", "S", "K", "M", "lambda", "seed", "acc(%)"
    );
    for r in records {
        out.push_str(&format!(
            "{:<14} {:<12} {:>2} {:>2} {:>4} {:>5} {:>6} {:>6} {:>8.2}\n",
            r.dataset,
            r.method,
            if r.real { "x" } else { "" },
            if r.synthetic { "x" } else { "" },
            r.shots,
            r.per_class_synthetic,
            r.lambda.map_or("-".to_string(), |l| format!("{l:.2}")),
            r.seed,
            r.accuracy * 100.0
        ));
    }
    out
}
