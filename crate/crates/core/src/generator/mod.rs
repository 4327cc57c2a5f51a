//! Pixel-space class-conditional diffusion model.
//!
//! The denoiser is a small U-shaped transformer over image patches. Each
//! block adds a per-block projection of the time/text embedding, then runs
//! self-attention, cross-attention to the prompt encoding and an MLP. Blocks
//! of the upper half receive the output of their mirror block through a long
//! skip projection. The prompt encoder is a two-layer transformer over word
//! tokens. A learned null context stands in for the prompt during
//! classifier-free guidance.

mod schedule;

use std::path::Path;

use datadream_autograd::{cosine_lr, AdamW, AdamWConfig, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use self::schedule::{build_schedule, forward_noise, NoiseSchedule, ScheduleKind, ScheduleSpec};
use crate::adapters::{AdapterSet, AttentionHost, Host, TargetId};
use crate::binfmt::Container;
use crate::datasets::{Image, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::nn::{patchify, sinusoidal, unpatchify, Attention, EncoderBlock, LayerNorm, Linear, LoraVars, Mlp};
use crate::seed::{derive_seed, normal_vec, rng, Rng};
use crate::text::{PromptTemplate, Vocabulary};

const CHECKPOINT_MAGIC: [u8; 8] = *b"DDGEN\0\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub resolution: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Number of denoiser blocks; must be odd (down half, middle, up half).
    pub depth: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub time_dim: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            resolution: 16,
            patch: 4,
            width: 64,
            heads: 4,
            mlp_hidden: 128,
            depth: 5,
            text_width: 64,
            text_layers: 2,
            text_heads: 4,
            time_dim: 64,
        }
    }
}

impl GeneratorArch {
    pub fn tokens(&self) -> usize {
        (self.resolution / self.patch).pow(2)
    }

    pub fn token_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Values per image.
    pub fn image_dim(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.resolution % self.patch != 0 {
            return Err(Error::config(format!(
                "resolution {} is not a multiple of patch {}",
                self.resolution, self.patch
            )));
        }
        if self.depth % 2 == 0 {
            return Err(Error::config("denoiser depth must be odd"));
        }
        if self.width % self.heads != 0 || self.text_width % self.text_heads != 0 {
            return Err(Error::config("widths must divide evenly into heads"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct DenoiserBlock {
    time: Linear,
    skip: Option<Linear>,
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    text_pos: ParamId,
    text_blocks: Vec<EncoderBlock>,
    text_ln: LayerNorm,
    null_ctx: ParamId,
    patch_in: Linear,
    pos: ParamId,
    time1: Linear,
    time2: Linear,
    text_pool: Linear,
    blocks: Vec<DenoiserBlock>,
    out_ln: LayerNorm,
    out: Linear,
}

/// Denoiser, prompt encoder, schedule and vocabulary.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub arch: GeneratorArch,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
    pub seed: u64,
    /// Whether the null context was trained (required for guidance).
    pub null_trained: bool,
    store: ParamStore,
    layout: Layout,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    arch: GeneratorArch,
    schedule: ScheduleSpec,
    vocab: Vocabulary,
    seed: u64,
    null_trained: bool,
}

impl GeneratorModel {
    pub fn new(arch: GeneratorArch, schedule: NoiseSchedule, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng(derive_seed(seed, "generator-init", 0));
        let mut s = ParamStore::new();
        let (w, tw, l) = (arch.width, arch.text_width, vocab.max_len());
        let tok_emb = s.insert("text.tok_emb", Tensor::randn([vocab.len(), tw], 0.5, &mut r));
        let text_pos = s.insert("text.pos", Tensor::randn([l, tw], 0.1, &mut r));
        let text_blocks = (0..arch.text_layers)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("text.block{i}"),
                    Host::TextEncoder,
                    i,
                    tw,
                    arch.text_heads,
                    2 * tw,
                    &mut r,
                )
            })
            .collect();
        let text_ln = LayerNorm::new(&mut s, "text.ln", tw);
        let null_ctx = s.insert("null_ctx", Tensor::randn([l, tw], 0.1, &mut r));
        let patch_in = Linear::new(&mut s, "patch_in", arch.token_dim(), w, true, &mut r);
        let pos = s.insert("pos", Tensor::randn([arch.tokens(), w], 0.1, &mut r));
        let time1 = Linear::new(&mut s, "time1", arch.time_dim, w, true, &mut r);
        let time2 = Linear::new(&mut s, "time2", w, w, true, &mut r);
        let text_pool = Linear::new(&mut s, "text_pool", tw, w, true, &mut r);
        let half = arch.depth / 2;
        let blocks = (0..arch.depth)
            .map(|i| {
                let n = format!("block{i}");
                DenoiserBlock {
                    time: Linear::new(&mut s, &format!("{n}.time"), w, w, true, &mut r),
                    skip: (i > half).then(|| Linear::new(&mut s, &format!("{n}.skip"), w, w, false, &mut r)),
                    ln1: LayerNorm::new(&mut s, &format!("{n}.ln1"), w),
                    self_attn: Attention::new(
                        &mut s,
                        &format!("{n}.self"),
                        Host::Denoiser,
                        2 * i,
                        w,
                        w,
                        arch.heads,
                        &mut r,
                    ),
                    ln2: LayerNorm::new(&mut s, &format!("{n}.ln2"), w),
                    cross_attn: Attention::new(
                        &mut s,
                        &format!("{n}.cross"),
                        Host::Denoiser,
                        2 * i + 1,
                        w,
                        tw,
                        arch.heads,
                        &mut r,
                    ),
                    ln3: LayerNorm::new(&mut s, &format!("{n}.ln3"), w),
                    mlp: Mlp::new(&mut s, &format!("{n}.mlp"), w, arch.mlp_hidden, &mut r),
                }
            })
            .collect();
        let out_ln = LayerNorm::new(&mut s, "out_ln", w);
        let out = Linear::zeros(&mut s, "out", w, arch.token_dim(), true);
        Ok(Self {
            arch,
            schedule,
            vocab,
            seed,
            null_trained: false,
            store: s,
            layout: Layout {
                tok_emb,
                text_pos,
                text_blocks,
                text_ln,
                null_ctx,
                patch_in,
                pos,
                time1,
                time2,
                text_pool,
                blocks,
                out_ln,
                out,
            },
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attention_layers(&self, host: Host) -> usize {
        match host {
            Host::Denoiser => 2 * self.layout.blocks.len(),
            Host::TextEncoder => self.layout.text_blocks.len(),
            _ => 0,
        }
    }

    pub fn encode_prompt(&self, prompt: &str) -> Vec<usize> {
        self.vocab.encode(prompt)
    }

    /// Prompt encodings `(batch * max_len, text_width)` for `tokens`.
    pub fn encode_text(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, tokens: &[usize]) -> Var {
        let l = &self.layout;
        let len = self.vocab.max_len();
        let batch = tokens.len() / len;
        let emb = g.gather_rows(p[l.tok_emb], tokens);
        let mut h = g.add_tiled(emb, p[l.text_pos]);
        for b in &l.text_blocks {
            h = b.forward(g, p, lora, h, batch);
        }
        l.text_ln.forward(g, p, h)
    }

    /// Replaces the context of items with `drop[i] == true` by the null context.
    pub fn select_context(&self, g: &mut Graph<'_>, p: &Bound, ctx: Var, drop: &[bool]) -> Var {
        if !drop.iter().any(|&d| d) {
            return ctx;
        }
        let len = self.vocab.max_len();
        let batch = drop.len();
        let all = g.concat_rows(ctx, p[self.layout.null_ctx]);
        let idx: Vec<usize> = (0..batch)
            .flat_map(|b| (0..len).map(move |j| if drop[b] { batch * len + j } else { b * len + j }))
            .collect();
        g.gather_rows(all, &idx)
    }

    /// The null context repeated for `batch` items.
    pub fn null_context(&self, g: &mut Graph<'_>, p: &Bound, batch: usize) -> Var {
        let len = self.vocab.max_len();
        let idx: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        g.gather_rows(p[self.layout.null_ctx], &idx)
    }

    /// Noise prediction for patch tokens `x: (batch * tokens, token_dim)`.
    pub fn denoise(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, x: Var, t: &[usize], ctx: Var) -> Var {
        let l = &self.layout;
        let batch = t.len();
        let ntok = self.arch.tokens();
        let tfeat: Vec<f32> = t.iter().flat_map(|&ti| sinusoidal(ti as f32, self.arch.time_dim)).collect();
        let tfeat = g.constant(tfeat, batch, self.arch.time_dim);
        let temb = l.time1.forward(g, p, tfeat);
        let temb = g.silu(temb);
        let temb = l.time2.forward(g, p, temb);
        let pooled = g.mean_pool(ctx, self.vocab.max_len());
        let pooled = l.text_pool.forward(g, p, pooled);
        let cond = g.add(temb, pooled);
        let cond = g.silu(cond);

        let h = l.patch_in.forward(g, p, x);
        let mut h = g.add_tiled(h, p[l.pos]);
        let half = l.blocks.len() / 2;
        let mut skips = Vec::with_capacity(half);
        for (i, b) in l.blocks.iter().enumerate() {
            if let Some(skip) = &b.skip {
                let s = skips.pop().expect("skip stack matches depth");
                let s = skip.forward(g, p, s);
                h = g.add(h, s);
            }
            let c = b.time.forward(g, p, cond);
            h = g.add_repeated(h, c, ntok);
            let a = b.ln1.forward(g, p, h);
            let a = b.self_attn.forward(g, p, lora, a, a, batch);
            h = g.add(h, a);
            let a = b.ln2.forward(g, p, h);
            let a = b.cross_attn.forward(g, p, lora, a, ctx, batch);
            h = g.add(h, a);
            let a = b.ln3.forward(g, p, h);
            let a = b.mlp.forward(g, p, a);
            h = g.add(h, a);
            if i < half {
                skips.push(h);
            }
        }
        let h = l.out_ln.forward(g, p, h);
        l.out.forward(g, p, h)
    }

    /// Maps an image to patch tokens scaled to `[-1, 1]`.
    pub fn image_tokens(&self, image: &Image) -> Result<Vec<f32>> {
        let r = self.arch.resolution as u32;
        if image.width() != r || image.height() != r {
            return Err(Error::invalid(format!(
                "image is {}x{}, generator works at {r}x{r}",
                image.width(),
                image.height()
            )));
        }
        let chw: Vec<f32> = image.to_chw().iter().map(|v| v * 2.0 - 1.0).collect();
        Ok(patchify(&chw, self.arch.resolution, self.arch.patch))
    }

    /// Inverse of [`Self::image_tokens`], clamping to the pixel range.
    pub fn tokens_to_image(&self, tokens: &[f32]) -> Image {
        let chw: Vec<f32> = unpatchify(tokens, self.arch.resolution, self.arch.patch)
            .iter()
            .map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        let r = self.arch.resolution as u32;
        Image::from_chw(r, r, &chw)
    }

    /// Hex sha256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_container().encode()))
    }

    fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            arch: self.arch.clone(),
            schedule: self.schedule.spec.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            null_trained: self.null_trained,
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
        let schedule = NoiseSchedule::from_spec(&meta.schedule)?;
        let mut model = Self::new(meta.arch, schedule, meta.vocab, meta.seed)?;
        model.null_trained = meta.null_trained;
        load_records(&mut model.store, c.records)?;
        Ok(model)
    }
}

/// Overwrites every parameter of `store` from named records.
pub(crate) fn load_records(store: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Compatibility(format!(
            "checkpoint holds {} tensors, architecture needs {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Compatibility(format!("unknown tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Compatibility(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

impl AttentionHost for GeneratorModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn projections(&self) -> Vec<(TargetId, ParamId)> {
        let l = &self.layout;
        let mut out = Vec::new();
        for b in &l.blocks {
            out.extend(b.self_attn.projections());
            out.extend(b.cross_attn.projections());
        }
        for b in &l.text_blocks {
            out.extend(b.attn.projections());
        }
        out
    }
}

/// Vocabulary covering the template words plus `extra` words.
pub fn build_vocabulary<S: AsRef<str>>(template: &str, extra: impl IntoIterator<Item = S>, max_len: usize) -> Vocabulary {
    let mut words: Vec<String> = template
        .split_whitespace()
        .filter(|w| *w != crate::text::CLASS_SLOT)
        .map(str::to_string)
        .collect();
    words.extend(extra.into_iter().map(|w| w.as_ref().to_string()));
    Vocabulary::new(words, max_len)
}

/// One training mini-batch for the denoising objective.
#[derive(Debug, Clone)]
pub struct DenoiseBatch {
    /// Clean patch tokens, `batch * tokens * token_dim`.
    pub x0: Vec<f32>,
    /// Prompt token ids, `batch * max_len`.
    pub prompts: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Vec<f32>,
    /// Items whose prompt is replaced by the null context.
    pub drop: Vec<bool>,
}

impl DenoiseBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Draws timesteps (uniform on `1..=T`), noise and condition dropout for
/// `(image tokens, prompt tokens)` pairs.
pub fn draw_batch(
    model: &GeneratorModel,
    items: &[(&[f32], &[usize])],
    p_uncond: f64,
    rng: &mut Rng,
) -> Result<DenoiseBatch> {
    if items.is_empty() {
        return Err(Error::invalid("empty denoising batch"));
    }
    let mut b = DenoiseBatch {
        x0: Vec::new(),
        prompts: Vec::new(),
        t: Vec::new(),
        eps: Vec::new(),
        drop: Vec::new(),
    };
    let t_max = model.schedule.t_max();
    for (x, prompt) in items {
        b.x0.extend_from_slice(x);
        b.prompts.extend_from_slice(prompt);
        b.t.push(rng.random_range(1..=t_max));
        b.eps.extend(normal_vec(rng, x.len()));
        b.drop.push(p_uncond > 0.0 && rng.random_bool(p_uncond));
    }
    Ok(b)
}

/// `sum ||eps - eps_hat(z_t, ctx, t)||^2 / batch` recorded on `g`.
pub fn denoise_loss<'a>(
    model: &GeneratorModel,
    g: &mut Graph<'a>,
    p: &Bound,
    lora: &LoraVars,
    batch: &DenoiseBatch,
) -> Var {
    let n = batch.len();
    let per = model.arch.tokens() * model.arch.token_dim();
    let mut zt = Vec::with_capacity(batch.x0.len());
    for i in 0..n {
        let ab = model.schedule.alpha_bar(batch.t[i]);
        zt.extend(schedule::noise_with(
            &batch.x0[i * per..(i + 1) * per],
            &batch.eps[i * per..(i + 1) * per],
            ab,
        ));
    }
    let x = g.constant(zt, n * model.arch.tokens(), model.arch.token_dim());
    let ctx = model.encode_text(g, p, lora, &batch.prompts);
    let ctx = model.select_context(g, p, ctx, &batch.drop);
    let pred = model.denoise(g, p, lora, x, &batch.t, ctx);
    g.squared_error(pred, batch.eps.clone(), n)
}

/// Base-model training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of replacing the prompt by the null context.
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: GeneratorModel,
    pub losses: Vec<f32>,
    pub null_conditioned: usize,
}

/// Trains every base parameter on `(image, prompt)` pairs drawn from `data`.
pub fn pretrain_base(
    mut model: GeneratorModel,
    data: &LabeledImageDataset,
    template: &PromptTemplate,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(Error::invalid("cannot pretrain on an empty dataset"));
    }
    if !(0.0..=1.0).contains(&cfg.p_uncond) {
        return Err(Error::invalid(format!("p_uncond {} outside [0, 1]", cfg.p_uncond)));
    }
    let prompts: Vec<Vec<usize>> = (0..data.num_classes())
        .map(|c| Ok(model.encode_prompt(&template.prompt(c)?)))
        .collect::<Result<_>>()?;
    let tokens: Vec<Vec<f32>> = data
        .items()
        .iter()
        .map(|it| model.image_tokens(&it.image))
        .collect::<Result<_>>()?;
    let mut r = rng(derive_seed(cfg.seed, "pretrain-generator", 0));
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut null_conditioned = 0;
    model.null_trained |= cfg.p_uncond > 0.0;
    for step in 0..cfg.steps {
        let items: Vec<(&[f32], &[usize])> = (0..cfg.batch_size)
            .map(|_| {
                let i = r.random_range(0..data.len());
                (tokens[i].as_slice(), prompts[data.items()[i].label].as_slice())
            })
            .collect();
        let batch = draw_batch(&model, &items, cfg.p_uncond, &mut r)?;
        null_conditioned += batch.drop.iter().filter(|&&d| d).count();
        let lr = cosine_lr(cfg.lr, step as u64, cfg.steps as u64);
        let mut grads = {
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true);
            let loss = denoise_loss(&model, &mut g, &p, &LoraVars::none(), &batch);
            losses.push(g.scalar(loss));
            let mut grads = g.backward(loss);
            p.vars().iter().map(|&v| grads.take(v)).collect::<Vec<_>>()
        };
        opt.step(lr, model.store.tensors_mut().zip(grads.iter_mut().map(|g| g.as_deref())));
    }
    Ok(PretrainOutcome {
        model,
        losses,
        null_conditioned,
    })
}

/// Sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 2.0,
        }
    }
}

/// `eps_u + s (eps_c - eps_u)`.
pub fn guide(eps_cond: &[f32], eps_uncond: &[f32], s: f64) -> Vec<f32> {
    let s = s as f32;
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| u + s * (c - u))
        .collect()
}

/// One guided noise prediction for a batch sharing timestep `t`.
fn predict(
    model: &GeneratorModel,
    prompts: &[usize],
    x: &[f32],
    t: usize,
    guidance: f64,
) -> Vec<f32> {
    let len = model.vocab.max_len();
    let batch = prompts.len() / len;
    let ntok = model.arch.tokens();
    let dim = model.arch.token_dim();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let none = LoraVars::none();
    let ctx = model.encode_text(&mut g, &p, &none, prompts);
    if guidance == 1.0 {
        let xv = g.constant(x.to_vec(), batch * ntok, dim);
        let out = model.denoise(&mut g, &p, &none, xv, &vec![t; batch], ctx);
        return g.value(out).to_vec();
    }
    let null = model.null_context(&mut g, &p, batch);
    let ctx = g.concat_rows(ctx, null);
    let mut xx = Vec::with_capacity(2 * x.len());
    xx.extend_from_slice(x);
    xx.extend_from_slice(x);
    let xv = g.constant(xx, 2 * batch * ntok, dim);
    let out = model.denoise(&mut g, &p, &none, xv, &vec![t; 2 * batch], ctx);
    let v = g.value(out);
    let (c, u) = v.split_at(x.len());
    guide(c, u, guidance)
}

/// Deterministic guided DDIM from the start state `x` at timestep list
/// `ts` (largest first). Returns clean tokens.
pub(crate) fn ddim_from(model: &GeneratorModel, prompts: &[usize], mut x: Vec<f32>, ts: &[usize], guidance: f64) -> Vec<f32> {
    for (i, &t) in ts.iter().enumerate() {
        let eps = predict(model, prompts, &x, t, guidance);
        let ab = model.schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| model.schedule.alpha_bar(tp));
        let (sa, s1a) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let (sp, s1p) = (ab_prev.sqrt() as f32, (1.0 - ab_prev).sqrt() as f32);
        for (xi, e) in x.iter_mut().zip(&eps) {
            let x0 = ((*xi - s1a * e) / sa).clamp(-1.0, 1.0);
            *xi = sp * x0 + s1p * e;
        }
    }
    x
}

/// Generates one image per seed for class prompt `prompt`.
///
/// Each image starts from Gaussian noise drawn from its own seed, so an image
/// depends only on its seed, never on what else is in the batch.
pub fn sample(model: &GeneratorModel, prompt: &str, seeds: &[u64], cfg: &SampleConfig) -> Result<Vec<Image>> {
    if cfg.steps == 0 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    if cfg.guidance != 1.0 && !model.null_trained {
        return Err(Error::config("guidance needs a null context trained with condition dropout"));
    }
    let per = model.arch.tokens() * model.arch.token_dim();
    let tokens = model.encode_prompt(prompt);
    let ts = model.schedule.ddim_timesteps(cfg.steps);
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(SAMPLE_CHUNK) {
        let prompts: Vec<usize> = chunk.iter().flat_map(|_| tokens.iter().copied()).collect();
        let x: Vec<f32> = chunk.iter().flat_map(|&s| normal_vec(&mut rng(s), per)).collect();
        let x0 = ddim_from(model, &prompts, x, &ts, cfg.guidance);
        out.extend(x0.chunks(per).map(|t| model.tokens_to_image(t)));
    }
    Ok(out)
}

pub(crate) const SAMPLE_CHUNK: usize = 50;

/// Copy of `model` with `set` merged, or a plain copy for `None`.
pub fn with_adapters(model: &GeneratorModel, set: Option<&AdapterSet>) -> Result<GeneratorModel> {
    match set {
        Some(s) => crate::adapters::merged(model, s),
        None => Ok(model.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::inject;

    pub(crate) fn tiny(depth: usize) -> GeneratorModel {
        let arch = GeneratorArch {
            resolution: 8,
            patch: 4,
            width: 16,
            heads: 2,
            mlp_hidden: 16,
            depth,
            text_width: 16,
            text_layers: 2,
            text_heads: 2,
            time_dim: 8,
        };
        let sched = build_schedule(100, ScheduleKind::Linear, 1e-3, 0.05).unwrap();
        let vocab = build_vocabulary("a photo of a [CLS]", ["red", "blue", "circle"], 6);
        GeneratorModel::new(arch, sched, vocab, 1).unwrap()
    }

    fn batch(model: &GeneratorModel, n: usize, seed: u64) -> DenoiseBatch {
        let mut r = rng(seed);
        let per = model.arch.tokens() * model.arch.token_dim();
        let xs: Vec<Vec<f32>> = (0..n).map(|_| normal_vec(&mut r, per)).collect();
        let prompt = model.encode_prompt("a photo of a red circle");
        let items: Vec<(&[f32], &[usize])> = xs.iter().map(|x| (x.as_slice(), prompt.as_slice())).collect();
        draw_batch(model, &items, 0.0, &mut r).unwrap()
    }

    #[test]
    fn fresh_model_predicts_zero_so_loss_is_noise_energy() {
        let m = tiny(3);
        let mut total = 0.0f64;
        let rounds = 40;
        for s in 0..rounds {
            let b = batch(&m, 32, s);
            let mut g = Graph::new();
            let p = m.params().bind(&mut g, false);
            let loss = denoise_loss(&m, &mut g, &p, &LoraVars::none(), &b);
            total += g.scalar(loss) as f64;
        }
        let mean = total / rounds as f64;
        let dim = m.arch.image_dim() as f64;
        // chi-square with dim * 1280 degrees of freedom: sd of the mean is tiny
        assert!((mean - dim).abs() < 0.02 * dim, "{mean} vs {dim}");
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut g = Graph::new();
        let eps = vec![0.3, -1.2, 0.7, 2.0];
        let pred = g.constant(eps.clone(), 2, 2);
        let loss = g.squared_error(pred, eps, 2);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn condition_dropout_counts() {
        let m = tiny(1);
        let per = m.arch.tokens() * m.arch.token_dim();
        let x = vec![0.0; per];
        let prompt = m.encode_prompt("a photo of a red circle");
        let items: Vec<(&[f32], &[usize])> = (0..1000).map(|_| (x.as_slice(), prompt.as_slice())).collect();
        let b = draw_batch(&m, &items, 0.1, &mut rng(0)).unwrap();
        let n = b.drop.iter().filter(|&&d| d).count();
        assert!((72..=130).contains(&n), "{n}");
        let b = draw_batch(&m, &items, 0.0, &mut rng(0)).unwrap();
        assert!(b.drop.iter().all(|&d| !d));
    }

    #[test]
    fn sampling_is_deterministic_and_guidance_one_is_conditional() {
        let mut m = tiny(3);
        // give the output layer weights so predictions are non-trivial
        let id = m.params().id("out.weight").unwrap();
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::randn(shape, 0.1, &mut rng(5));
        let cfg = SampleConfig { steps: 5, guidance: 2.0 };
        assert!(matches!(sample(&m, "a photo of a red circle", &[1], &cfg), Err(Error::Configuration(_))));
        m.null_trained = true;
        let a = sample(&m, "a photo of a red circle", &[1, 2], &cfg).unwrap();
        let b = sample(&m, "a photo of a red circle", &[1, 2], &cfg).unwrap();
        assert_eq!(a, b);
        let single = sample(&m, "a photo of a red circle", &[2], &cfg).unwrap();
        assert_eq!(single[0], a[1]);
        assert!(guide(&[1.0, 2.0], &[5.0, -1.0], 1.0) == vec![1.0, 2.0]);
        let g2 = guide(&[1.0], &[3.0], 2.0);
        assert_eq!(g2, vec![-1.0]);
    }

    #[test]
    fn injection_counts_and_identity() {
        let m = tiny(3);
        assert_eq!(m.attention_layers(Host::Denoiser), 6);
        let only = inject(&m, &[Host::Denoiser], 4, 0).unwrap();
        assert_eq!(only.len(), 24);
        let both = inject(&m, &[Host::Denoiser, Host::TextEncoder], 4, 0).unwrap();
        assert_eq!(both.len(), 32);
        assert!(inject(&m, &[Host::ImageTower], 4, 0).is_err());
        let merged = crate::adapters::merged(&m, &both).unwrap();
        assert!(merged.params().bitwise_eq(m.params()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        m.save(&path).unwrap();
        let back = GeneratorModel::load(&path).unwrap();
        assert!(back.params().bitwise_eq(m.params()));
        assert_eq!(back.content_hash(), m.content_hash());
        assert_eq!(back.vocab, m.vocab);
    }
}
