//! Training-time image augmentations on channel-major `[3, s, s]` arrays.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Minimum area fraction kept by the random resized crop (1 disables it).
    pub crop_min_scale: f32,
    pub flip_prob: f64,
    /// Brightness and contrast factors drawn from `1 ± jitter`.
    pub jitter: f32,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_min_scale: 0.7,
            flip_prob: 0.5,
            jitter: 0.2,
            grayscale_prob: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop_min_scale: 1.0,
            flip_prob: 0.0,
            jitter: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

fn bilinear(plane: &[f32], size: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (size - 1) as f32);
    let y = y.clamp(0.0, (size - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = plane[y0 * size + x0] * (1.0 - fx) + plane[y0 * size + x1] * fx;
    let bot = plane[y1 * size + x0] * (1.0 - fx) + plane[y1 * size + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies crop, flip, jitter and grayscale in that order; values stay in `[0, 1]`.
pub fn augment(chw: &[f32], size: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f32> {
    let plane = size * size;
    let mut out = chw.to_vec();
    if cfg.crop_min_scale < 1.0 {
        let area: f32 = rng.random_range(cfg.crop_min_scale..=1.0);
        let aspect: f32 = rng.random_range((3.0f32 / 4.0).ln()..=(4.0f32 / 3.0).ln()).exp();
        let w = ((area * aspect).sqrt() * size as f32).min(size as f32);
        let h = ((area / aspect).sqrt() * size as f32).min(size as f32);
        let x0: f32 = rng.random_range(0.0..=(size as f32 - w));
        let y0: f32 = rng.random_range(0.0..=(size as f32 - h));
        for c in 0..3 {
            let src = &chw[c * plane..(c + 1) * plane];
            for y in 0..size {
                for x in 0..size {
                    let sx = x0 + (x as f32 + 0.5) * w / size as f32 - 0.5;
                    let sy = y0 + (y as f32 + 0.5) * h / size as f32 - 0.5;
                    out[c * plane + y * size + x] = bilinear(src, size, sx, sy);
                }
            }
        }
    }
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        for c in 0..3 {
            for y in 0..size {
                out[c * plane + y * size..c * plane + (y + 1) * size].reverse();
            }
        }
    }
    if cfg.jitter > 0.0 {
        let b: f32 = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
        let k: f32 = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter);
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        for v in out.iter_mut() {
            *v = (((*v - mean) * k + mean) * b).clamp(0.0, 1.0);
        }
    }
    if cfg.grayscale_prob > 0.0 && rng.random_bool(cfg.grayscale_prob) {
        for i in 0..plane {
            let g = 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
            for c in 0..3 {
                out[c * plane + i] = g;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn disabled_is_identity_and_range_is_kept() {
        let img: Vec<f32> = (0..3 * 64).map(|i| (i % 17) as f32 / 16.0).collect();
        let mut r = rng(1);
        assert_eq!(augment(&img, 8, &AugmentConfig::none(), &mut r), img);
        for _ in 0..20 {
            let a = augment(&img, 8, &AugmentConfig::default(), &mut r);
            assert_eq!(a.len(), img.len());
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn certain_flip_mirrors_rows() {
        let img: Vec<f32> = (0..3 * 16).map(|i| i as f32 / 48.0).collect();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::none()
        };
        let a = augment(&img, 4, &cfg, &mut rng(3));
        assert_eq!(&a[..4], &[img[3], img[2], img[1], img[0]]);
    }
}
