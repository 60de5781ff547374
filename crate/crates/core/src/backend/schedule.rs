//! DDPM noise schedule and the deterministic DDIM sampler with
//! classifier-free guidance.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn;

use super::Denoiser;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut acc = 1.0;
        let alphas_cumprod = (0..train_steps)
            .map(|i| {
                let t = if train_steps > 1 { i as f64 / (train_steps - 1) as f64 } else { 0.0 };
                acc *= 1.0 - (beta_start + t * (beta_end - beta_start));
                acc
            })
            .collect();
        NoiseSchedule {
            train_steps,
            beta_start,
            beta_end,
            alphas_cumprod,
        }
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t]
    }

    /// `sqrt(ᾱ_t) z0 + sqrt(1-ᾱ_t) ε`, with one timestep per batch element.
    pub fn add_noise(&self, z0: &Tensor, noise: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        let b = z0.dim(0)?;
        if timesteps.len() != b {
            return Err(input_err!("{} timesteps for a batch of {b}", timesteps.len()));
        }
        if let Some(t) = timesteps.iter().find(|&&t| t >= self.train_steps) {
            return Err(input_err!("timestep {t} outside the schedule"));
        }
        let a: Vec<f64> = timesteps.iter().map(|&t| self.alpha_bar(t).sqrt()).collect();
        let s: Vec<f64> = timesteps.iter().map(|&t| (1.0 - self.alpha_bar(t)).sqrt()).collect();
        let a = Tensor::from_vec(a, (b, 1, 1), &nn::device())?;
        let s = Tensor::from_vec(s, (b, 1, 1), &nn::device())?;
        Ok((z0.broadcast_mul(&a)? + noise.broadcast_mul(&s)?)?)
    }

    /// Descending sampling timesteps for `steps` DDIM steps.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.train_steps {
            return Err(input_err!("steps must be in 1..={} (got {steps})", self.train_steps));
        }
        let ratio = self.train_steps / steps;
        Ok((0..steps).rev().map(|i| i * ratio).collect())
    }
}

/// Standard-normal tensor from our own RNG so sampling is reproducible.
pub fn gaussian(rng: &mut impl Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &nn::device())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Clamp for the predicted clean latent; `None` disables it.
    pub clip_latent: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            guidance: 7.5,
            clip_latent: Some(3.0),
        }
    }
}

/// Deterministic DDIM from `noise` (B,N,C); `cond` and `uncond` are `(B,L,D)`.
pub fn ddim_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    uncond: &Tensor,
    noise: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let b = noise.dim(0)?;
    let ts = schedule.ddim_timesteps(cfg.steps)?;
    let ctx = Tensor::cat(&[uncond, cond], 0)?;
    let mut x = noise.clone();
    for (i, &t) in ts.iter().enumerate() {
        let input = Tensor::cat(&[&x, &x], 0)?;
        let eps = denoiser.predict(&input, &vec![t; 2 * b], &ctx)?.eps;
        let eps_u = eps.narrow(0, 0, b)?;
        let eps_c = eps.narrow(0, b, b)?;
        let eps = (&eps_u + ((eps_c - &eps_u)? * cfg.guidance)?)?;
        let a_t = schedule.alpha_bar(t);
        let a_prev = ts.get(i + 1).map_or(1.0, |&p| schedule.alpha_bar(p));
        let mut x0 = ((&x - (&eps * (1.0 - a_t).sqrt())?)? / a_t.sqrt())?;
        if let Some(c) = cfg.clip_latent {
            x0 = x0.clamp(-c, c)?;
            // Re-derive the noise consistent with the clamped estimate.
            let e = ((&x - (&x0 * a_t.sqrt())?)? / (1.0 - a_t).sqrt())?;
            x = ((&x0 * a_prev.sqrt())? + (e * (1.0 - a_prev).sqrt())?)?;
        } else {
            x = ((&x0 * a_prev.sqrt())? + (eps * (1.0 - a_prev).sqrt())?)?;
        }
    }
    Ok(x)
}
