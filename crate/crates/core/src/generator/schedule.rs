//! Diffusion noise schedules and closed-form forward noising.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Squared-cosine cumulative schedule; per-step betas clipped to the bounds.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: ScheduleKind::Linear,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

/// Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub spec: ScheduleSpec,
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

pub fn build_schedule(t_max: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_max < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| (((t / t_max as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
            (1..=t_max)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(beta_min, beta_max))
                .collect()
        }
    };
    let mut alphas_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alphas_bar.push(acc);
    }
    Ok(NoiseSchedule {
        spec: ScheduleSpec {
            steps: t_max,
            kind,
            beta_min,
            beta_max,
        },
        betas,
        alphas_bar,
    })
}

impl NoiseSchedule {
    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        build_schedule(spec.steps, spec.kind, spec.beta_min, spec.beta_max)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    /// `DDIM` timesteps for `steps` uniform strides, largest first.
    pub fn ddim_timesteps(&self, steps: usize) -> Vec<usize> {
        let t = self.t_max();
        let steps = steps.clamp(1, t);
        let mut ts: Vec<usize> = (1..=steps)
            .map(|i| ((i as f64 * t as f64 / steps as f64).round() as usize).clamp(1, t))
            .collect();
        ts.dedup();
        ts.reverse();
        ts
    }
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_noise(z0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    if t < 1 || t > schedule.t_max() {
        return Err(Error::invalid(format!("timestep {t} outside 1..={}", schedule.t_max())));
    }
    if z0.len() != eps.len() {
        return Err(Error::invalid("noise shape does not match latent"));
    }
    let ab = schedule.alpha_bar(t);
    Ok(noise_with(z0, eps, ab))
}

pub(crate) fn noise_with(z0: &[f32], eps: &[f32], alpha_bar: f64) -> Vec<f32> {
    let (a, s) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    z0.iter().zip(eps).map(|(z, e)| a * z + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{normal_vec, rng};

    #[test]
    fn linear_endpoints_and_monotone() {
        let s = build_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        let one = build_schedule(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1), 0.5);
        let c = build_schedule(1000, ScheduleKind::Cosine, 1e-4, 0.999).unwrap();
        assert!((1..1000).all(|t| c.alpha_bar(t + 1) < c.alpha_bar(t)));
        assert!(build_schedule(10, ScheduleKind::Linear, 0.1, 0.05).is_err());
        assert!(build_schedule(0, ScheduleKind::Linear, 0.1, 0.2).is_err());
        assert!(build_schedule(10, ScheduleKind::Linear, 0.1, 1.0).is_err());
    }

    #[test]
    fn forward_noise_plug_in() {
        let z = noise_with(&[2.0, -4.0], &[1.0, 1.0], 0.25);
        let s = 0.75f32.sqrt();
        assert!((z[0] - (1.0 + s)).abs() < 1e-6 && (z[1] - (-2.0 + s)).abs() < 1e-6);
        assert_eq!(noise_with(&[0.3, 0.7], &[5.0, -5.0], 1.0), vec![0.3, 0.7]);
        let s = build_schedule(10, ScheduleKind::Linear, 0.01, 0.2).unwrap();
        assert!(forward_noise(&[0.0], 0, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0], 11, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_noise_moments() {
        let s = build_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let t = 300;
        let ab = s.alpha_bar(t);
        let z0 = [0.8f32, -0.5];
        let n = 10_000;
        let mut r = rng(3);
        let mut sum = [0.0f64; 2];
        let mut sq = [0.0f64; 2];
        for _ in 0..n {
            let e = normal_vec(&mut r, 2);
            let z = forward_noise(&z0, t, &e, &s).unwrap();
            for i in 0..2 {
                sum[i] += z[i] as f64;
                sq[i] += (z[i] as f64).powi(2);
            }
        }
        let sd = (1.0 - ab).sqrt();
        for i in 0..2 {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((mean - ab.sqrt() * z0[i] as f64).abs() < 3.0 * sd / (n as f64).sqrt());
            assert!((var - (1.0 - ab)).abs() < 0.05 * (1.0 - ab));
        }
    }

    #[test]
    fn ddim_strides() {
        let s = build_schedule(1000, ScheduleKind::Linear, 1e-4, 0.02).unwrap();
        let ts = s.ddim_timesteps(50);
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (1000, 20));
        assert_eq!(s.ddim_timesteps(1), vec![1000]);
    }
}
