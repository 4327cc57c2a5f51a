use std::f64::consts::PI;

use crate::tensor::Tensor;

/// AdamW hyper-parameters. Defaults follow the common library convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by slot order,
/// so callers must present parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. A `None` gradient leaves the slot
    /// untouched (no decay either), matching parameters that did not
    /// participate in the loss.
    pub fn step<'p>(&mut self, lr: f64, params: impl IntoIterator<Item = (&'p mut Tensor, Option<&'p [f32]>)>) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let eps = c.eps as f32;
        for (slot, (p, g)) in params.into_iter().enumerate() {
            if self.m.len() <= slot {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            assert_eq!(m.len(), p.numel(), "AdamW: slot {slot} changed size");
            assert_eq!(g.len(), p.numel(), "AdamW: gradient size mismatch");
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w *= decay;
                *w -= step_size * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Cosine-annealed learning rate for step `step` of `total`, without warmup:
/// `base` at step 0, decaying to 0 at the end of the final step.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-12);
        assert!(cosine_lr(1e-4, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = Tensor::new([2], vec![3.0, -2.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let g: Vec<f32> = p.data().iter().map(|x| 2.0 * x).collect();
            opt.step(0.1, [(&mut p, Some(g.as_slice()))]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p.data());
    }

    #[test]
    fn missing_gradient_leaves_parameter() {
        let mut p = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(0.1, [(&mut p, None)]);
        assert!(p.bitwise_eq(&before));
    }
}
