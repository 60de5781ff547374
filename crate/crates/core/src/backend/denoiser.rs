//! Small transformer noise predictor over the latent patch grid, with
//! self-attention, cross-attention to the prompt, and optional low-rank
//! adapters on the cross-attention projections.

use std::sync::Arc;

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, TensorMap};

use super::{Denoiser, DenoiserOutput, NoiseSchedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub tokens: usize,
    pub latent_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub context_dim: usize,
    pub ff_mult: usize,
}

impl DenoiserConfig {
    pub fn cross_attention_layers(&self) -> Vec<String> {
        (0..self.blocks).map(|i| format!("blocks.{i}.attn2")).collect()
    }
}

/// Projection names inside a cross-attention layer that can carry adapters.
pub const LORA_TARGETS: [&str; 4] = ["to_q", "to_k", "to_v", "to_out"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            targets: LORA_TARGETS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets must not be empty".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| !LORA_TARGETS.contains(&t.as_str())) {
            return Err(Error::Config(format!(
                "unknown lora target {t:?} (expected one of {LORA_TARGETS:?})"
            )));
        }
        Ok(())
    }
}

/// Fresh base weights.
pub fn init_base(cfg: &DenoiserConfig, rng: &mut impl Rng) -> Result<TensorMap> {
    let d = cfg.width;
    let mut p = TensorMap::new();
    let mut lin = |p: &mut TensorMap, name: &str, out: usize, inp: usize, bias: bool| -> Result<()> {
        p.insert(format!("{name}.weight"), nn::fan_in_uniform(rng, out, inp)?);
        if bias {
            p.insert(format!("{name}.bias"), nn::zeros(&[out])?);
        }
        Ok(())
    };
    lin(&mut p, "conv_in", d, cfg.latent_channels, true)?;
    lin(&mut p, "time.linear_1", d, d, true)?;
    lin(&mut p, "time.linear_2", d, d, true)?;
    for i in 0..cfg.blocks {
        for (attn, kv) in [("attn1", d), ("attn2", cfg.context_dim)] {
            let pre = format!("blocks.{i}.{attn}");
            lin(&mut p, &format!("{pre}.to_q"), d, d, false)?;
            lin(&mut p, &format!("{pre}.to_k"), d, kv, false)?;
            lin(&mut p, &format!("{pre}.to_v"), d, kv, false)?;
            lin(&mut p, &format!("{pre}.to_out"), d, d, true)?;
        }
        lin(&mut p, &format!("blocks.{i}.ff.linear_1"), d * cfg.ff_mult, d, true)?;
        lin(&mut p, &format!("blocks.{i}.ff.linear_2"), d, d * cfg.ff_mult, true)?;
    }
    lin(&mut p, "conv_out", cfg.latent_channels, d, true)?;
    p.insert("pos".into(), nn::normal(rng, &[cfg.tokens, d], 0.1)?);
    Ok(p)
}

/// Adapter weights for every cross-attention layer: `down` is random, `up`
/// is zero so a fresh adapter leaves the base output unchanged.
pub fn init_lora(cfg: &DenoiserConfig, lora: &LoraConfig, rng: &mut impl Rng) -> Result<TensorMap> {
    lora.validate()?;
    let d = cfg.width;
    let mut p = TensorMap::new();
    for layer in cfg.cross_attention_layers() {
        for t in &lora.targets {
            let inp = if t == "to_k" || t == "to_v" { cfg.context_dim } else { d };
            p.insert(format!("{layer}.{t}.lora_down"), nn::fan_in_uniform(rng, lora.rank, inp)?);
            p.insert(format!("{layer}.{t}.lora_up"), nn::zeros(&[d, lora.rank])?);
        }
    }
    Ok(p)
}

/// A view over base weights plus (possibly empty) adapter weights.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    base: TensorMap,
    lora: TensorMap,
    /// When set, inputs and outputs are preconditioned for the noise level
    /// (see [`ToyDenoiser::with_preconditioning`]).
    precondition: Option<Precondition>,
}

#[derive(Debug, Clone)]
struct Precondition {
    alpha_bar: Arc<[f64]>,
    sigma_data: f64,
}

impl Precondition {
    /// `(c_in, eps_skip, eps_out)` per timestep, so that the network sees
    /// `c_in·x_t` and the noise estimate is `eps_skip·x_t + eps_out·o`.
    fn coefficients(&self, timesteps: &[usize]) -> Result<[Vec<f64>; 3]> {
        let sd2 = self.sigma_data * self.sigma_data;
        let mut out = [Vec::new(), Vec::new(), Vec::new()];
        for &t in timesteps {
            let a = *self
                .alpha_bar
                .get(t)
                .ok_or_else(|| Error::Input(format!("timestep {t} outside the schedule")))?;
            // Variance-exploding view: y = x_t/sqrt(a) = x0 + sigma·eps.
            let s2 = (1.0 - a) / a;
            let total = s2 + sd2;
            out[0].push(1.0 / (a.sqrt() * total.sqrt()));
            out[1].push(s2.sqrt() / (total * a.sqrt()));
            out[2].push(-self.sigma_data / total.sqrt());
        }
        Ok(out)
    }
}

impl ToyDenoiser {
    /// Plain noise-prediction head.
    pub fn new(cfg: DenoiserConfig, base: TensorMap, lora: TensorMap) -> Self {
        ToyDenoiser {
            cfg,
            base,
            lora,
            precondition: None,
        }
    }

    /// Scales the input to unit variance and reads the head output as a
    /// scaled clean-latent residual: `x0 = c_skip·y + c_out·o` with
    /// `y = x_t/sqrt(ᾱ_t)`, which keeps the regression target at unit scale
    /// across noise levels. `sigma_data` is the expected latent spread.
    pub fn with_preconditioning(mut self, schedule: &NoiseSchedule, sigma_data: f64) -> Self {
        self.precondition = Some(Precondition {
            alpha_bar: schedule.alphas_cumprod().into(),
            sigma_data,
        });
        self
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    fn proj(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = nn::get(&self.base, &format!("{name}.weight"))?;
        let b = self.base.get(&format!("{name}.bias"));
        let y = nn::linear(x, w, b)?;
        match (self.lora.get(&format!("{name}.lora_down")), self.lora.get(&format!("{name}.lora_up"))) {
            (Some(down), Some(up)) => Ok((y + nn::linear(&nn::linear(x, down, None)?, up, None)?)?),
            _ => Ok(y),
        }
    }

    fn attention(&self, x: &Tensor, kv: &Tensor, name: &str) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let l = kv.dim(1)?;
        let h = self.cfg.heads;
        let dh = d / h;
        let split = |t: Tensor, len: usize| -> Result<Tensor> {
            Ok(t.reshape((b, len, h, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.proj(x, &format!("{name}.to_q"))?, n)?;
        let k = split(self.proj(kv, &format!("{name}.to_k"))?, l)?;
        let v = split(self.proj(kv, &format!("{name}.to_v"))?, l)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let probs = nn::softmax_last(&scores)?;
        let out = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        Ok((self.proj(&out, &format!("{name}.to_out"))?, probs))
    }

    fn time_embedding(&self, timesteps: &[usize]) -> Result<Tensor> {
        let d = self.cfg.width;
        let half = d / 2;
        let mut data = Vec::with_capacity(timesteps.len() * d);
        for &t in timesteps {
            for i in 0..d {
                let freq = (-(10000f64).ln() * (i % half) as f64 / half as f64).exp();
                let a = t as f64 * freq;
                data.push(if i < half { a.sin() } else { a.cos() });
            }
        }
        let e = Tensor::from_vec(data, (timesteps.len(), d), &nn::device())?;
        let e = self.proj(&e, "time.linear_1")?.silu()?;
        Ok(self.proj(&e, "time.linear_2")?.unsqueeze(1)?)
    }
}

impl Denoiser for ToyDenoiser {
    fn cross_attention_layers(&self) -> Vec<String> {
        self.cfg.cross_attention_layers()
    }

    fn predict(&self, latents: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<DenoiserOutput> {
        let (b, n, c) = latents.dims3()?;
        if n != self.cfg.tokens || c != self.cfg.latent_channels {
            return Err(Error::Input(format!(
                "latents {:?} do not match denoiser ({} x {})",
                latents.dims(),
                self.cfg.tokens,
                self.cfg.latent_channels
            )));
        }
        if timesteps.len() != b || context.dim(0)? != b {
            return Err(Error::Input("batch sizes of latents, timesteps and context differ".into()));
        }
        let coeffs = match &self.precondition {
            Some(p) => {
                let col = |v: &Vec<f64>| Tensor::from_vec(v.clone(), (b, 1, 1), &nn::device());
                let [c_in, skip, out] = p.coefficients(timesteps)?;
                Some((col(&c_in)?, col(&skip)?, col(&out)?))
            }
            None => None,
        };
        let input = match &coeffs {
            Some((c_in, _, _)) => latents.broadcast_mul(c_in)?,
            None => latents.clone(),
        };
        let mut h = self
            .proj(&input, "conv_in")?
            .broadcast_add(nn::get(&self.base, "pos")?)?
            .broadcast_add(&self.time_embedding(timesteps)?)?;
        let mut cross = Vec::with_capacity(self.cfg.blocks);
        for i in 0..self.cfg.blocks {
            let x = nn::layer_norm(&h)?;
            h = (h + self.attention(&x, &x, &format!("blocks.{i}.attn1"))?.0)?;
            let (out, probs) = self.attention(&nn::layer_norm(&h)?, context, &format!("blocks.{i}.attn2"))?;
            h = (h + out)?;
            cross.push((format!("blocks.{i}.attn2"), probs));
            let f = self.proj(&nn::layer_norm(&h)?, &format!("blocks.{i}.ff.linear_1"))?.gelu()?;
            h = (h + self.proj(&f, &format!("blocks.{i}.ff.linear_2"))?)?;
        }
        let mut eps = self.proj(&nn::layer_norm(&h)?, "conv_out")?;
        if let Some((_, skip, out)) = &coeffs {
            eps = (latents.broadcast_mul(skip)? + eps.broadcast_mul(out)?)?;
        }
        Ok(DenoiserOutput {
            eps,
            cross_attention: cross,
        })
    }
}

/// Mean squared value, used for loss reporting.
pub fn mean_square(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.mean_all()?.to_scalar::<f64>()?)
}

/// Rows of the cross-attention map summed over context, for sanity checks.
pub fn attention_row_sums(probs: &Tensor) -> Result<Vec<f64>> {
    Ok(probs.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?)
}
