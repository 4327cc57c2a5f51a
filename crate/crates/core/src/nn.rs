//! Small transformer building blocks over the autograd tape.
//!
//! Layers hold [`ParamId`]s into a model's [`ParamStore`]; forward passes
//! take the store's [`Bound`] vars so the same layer works for frozen and
//! trainable bindings. Attention projections consult a [`LoraVars`] map and
//! add the low-rank branch for every projection it names.

use std::collections::HashMap;
use std::f32::consts::PI;

use datadream_autograd::{Bound, Graph, ParamId, ParamStore, Tensor, Var};

use crate::adapters::{Host, Proj, TargetId};
use crate::seed::Rng;

/// Adapter factors bound into a graph, keyed by the projection they wrap.
#[derive(Debug, Default, Clone)]
pub struct LoraVars {
    map: HashMap<TargetId, (Var, Var)>,
}

impl LoraVars {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, target: TargetId, a: Var, b: Var) {
        self.map.insert(target, (a, b));
    }

    pub fn get(&self, target: &TargetId) -> Option<(Var, Var)> {
        self.map.get(target).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight `[d_out, d_in]` uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        Self::with_weight(store, name, Tensor::uniform([d_out, d_in], bound, rng), bias)
    }

    /// All-zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::with_weight(store, name, Tensor::zeros([d_out, d_in]), bias)
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Self {
        let d_out = w.shape()[0];
        let d_in = w.shape()[1];
        let weight = store.insert(format!("{name}.weight"), w);
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros([1, d_out])));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Var {
        let y = g.matmul_nt(x, p[self.weight]);
        match self.bias {
            Some(b) => g.add_tiled(y, p[b]),
            None => y,
        }
    }

    /// Forward pass with an optional low-rank branch `B (A x)` added.
    pub fn forward_adapted(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, target: TargetId, x: Var) -> Var {
        let y = self.forward(g, p, x);
        match lora.get(&target) {
            Some((a, b)) => {
                let ax = g.matmul_nt(x, a);
                let bax = g.matmul_nt(ax, b);
                g.add(y, bax)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full([1, dim], 1.0)),
            beta: store.insert(format!("{name}.beta"), Tensor::zeros([1, dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Var {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Multi-head attention with `q, k, v, o` projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub host: Host,
    pub layer: usize,
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    /// `context_dim` is the width of keys/values (the query width for self-attention).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        host: Host,
        layer: usize,
        dim: usize,
        context_dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            host,
            layer,
            heads,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), context_dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), context_dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
        }
    }

    pub fn target(&self, proj: Proj) -> TargetId {
        TargetId {
            host: self.host,
            layer: self.layer,
            proj,
        }
    }

    pub fn projection(&self, proj: Proj) -> &Linear {
        match proj {
            Proj::Q => &self.q,
            Proj::K => &self.k,
            Proj::V => &self.v,
            Proj::O => &self.o,
        }
    }

    /// Attends from `x: (batch*tq, dim)` to `context: (batch*tk, context_dim)`.
    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, x: Var, context: Var, batch: usize) -> Var {
        let q = self.q.forward_adapted(g, p, lora, self.target(Proj::Q), x);
        let k = self.k.forward_adapted(g, p, lora, self.target(Proj::K), context);
        let v = self.v.forward_adapted(g, p, lora, self.target(Proj::V), context);
        let a = g.attention(q, k, v, batch, self.heads);
        self.o.forward_adapted(g, p, lora, self.target(Proj::O), a)
    }

    pub fn projections(&self) -> [(TargetId, ParamId); 4] {
        Proj::ALL.map(|proj| (self.target(proj), self.projection(proj).weight))
    }
}

/// Pre-norm encoder block: self-attention then MLP, both residual.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        host: Host,
        layer: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), host, layer, dim, dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Bound, lora: &LoraVars, x: Var, batch: usize) -> Var {
        let h = self.ln1.forward(g, p, x);
        let a = self.attn.forward(g, p, lora, h, h, batch);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, p, x);
        let m = self.mlp.forward(g, p, h);
        g.add(x, m)
    }
}

/// Splits channel-major images `[3, s, s]` into `(s/p)^2` tokens of `3*p*p` values.
pub fn patchify(chw: &[f32], size: usize, patch: usize) -> Vec<f32> {
    let grid = size / patch;
    let plane = size * size;
    let tok = 3 * patch * patch;
    let mut out = vec![0.0; grid * grid * tok];
    for gy in 0..grid {
        for gx in 0..grid {
            let t = &mut out[(gy * grid + gx) * tok..(gy * grid + gx + 1) * tok];
            let mut i = 0;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        t[i] = chw[c * plane + (gy * patch + py) * size + gx * patch + px];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[f32], size: usize, patch: usize) -> Vec<f32> {
    let grid = size / patch;
    let plane = size * size;
    let tok = 3 * patch * patch;
    let mut out = vec![0.0; 3 * plane];
    for gy in 0..grid {
        for gx in 0..grid {
            let t = &tokens[(gy * grid + gx) * tok..(gy * grid + gx + 1) * tok];
            let mut i = 0;
            for c in 0..3 {
                for py in 0..patch {
                    for px in 0..patch {
                        out[c * plane + (gy * patch + py) * size + gx * patch + px] = t[i];
                        i += 1;
                    }
                }
            }
        }
    }
    out
}

/// Sinusoidal features of a scalar position, `dim` values.
pub fn sinusoidal(pos: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f32).ln() * i as f32 / half as f32).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Fixed 2-D sinusoidal position table for a `grid x grid` token layout.
pub fn position_table(grid: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(grid * grid * dim);
    for y in 0..grid {
        for x in 0..grid {
            data.extend(sinusoidal(y as f32 * PI, dim / 2));
            data.extend(sinusoidal(x as f32 * PI, dim - dim / 2));
        }
    }
    Tensor::new([grid * grid, dim], data).expect("table size")
}
