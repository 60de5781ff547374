//! Diffusion backend: the denoiser interface used by training and sampling,
//! and the bundled toy latent diffusion model.

pub mod autoencoder;
pub mod denoiser;
pub mod schedule;
pub mod text;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, TensorMap, TensorRecord};
use crate::optim::{self, AdamW, AdamWConfig};
use crate::token_codec::Vocabulary;

pub use autoencoder::{PatchAutoencoder, CELL_CHANNELS};
pub use denoiser::{DenoiserConfig, LoraConfig, ToyDenoiser, LORA_TARGETS};
pub use schedule::{ddim_sample, gaussian, NoiseSchedule, SamplerConfig};
pub use text::TextEncoder;

/// Result of one noise-prediction call.
#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    /// Predicted noise, same shape as the input latents.
    pub eps: Tensor,
    /// Cross-attention probabilities per layer, `(B, heads, N, L)`.
    pub cross_attention: Vec<(String, Tensor)>,
}

pub trait Denoiser {
    fn cross_attention_layers(&self) -> Vec<String>;
    fn predict(&self, latents: &Tensor, timesteps: &[usize], context: &Tensor) -> Result<DenoiserOutput>;
}

pub const TOY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLdmConfig {
    pub image_size: u32,
    pub patch_size: u32,
    /// Patches per latent token side.
    pub pack: u32,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
    pub context_len: usize,
    pub text_dim: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Expected spread of clean latents, used to precondition the denoiser.
    pub sigma_data: f64,
    pub seed: u64,
    pub words: Vec<String>,
}

impl Default for ToyLdmConfig {
    fn default() -> Self {
        ToyLdmConfig {
            image_size: 64,
            patch_size: 4,
            pack: 2,
            width: 96,
            heads: 4,
            blocks: 4,
            ff_mult: 2,
            context_len: 16,
            text_dim: 32,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_data: 0.5,
            seed: 0,
            words: Vocabulary::default().words()[3..].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prompt: String,
    pub empty_prompt_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            batch_size: 8,
            lr: 2e-3,
            prompt: "a photo of a bird".into(),
            empty_prompt_prob: 0.1,
            seed: 0,
        }
    }
}

/// Frozen autoencoder + text encoder + base denoiser weights.
#[derive(Debug, Clone)]
pub struct ToyLdm {
    pub config: ToyLdmConfig,
    pub autoencoder: PatchAutoencoder,
    pub text: TextEncoder,
    pub base: TensorMap,
    pub schedule: NoiseSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyLdmRecord {
    pub schema_version: u32,
    pub config: ToyLdmConfig,
    pub text: BTreeMap<String, TensorRecord>,
    pub base: BTreeMap<String, TensorRecord>,
}

impl ToyLdm {
    pub fn new(config: ToyLdmConfig) -> Result<Self> {
        let autoencoder = PatchAutoencoder::new(config.image_size, config.patch_size, config.pack)?;
        if config.width % config.heads != 0 || config.width % 2 != 0 {
            return Err(Error::Config("width must be even and divisible by heads".into()));
        }
        let vocab = Vocabulary::new(config.words.iter().cloned());
        let text = TextEncoder::new(vocab, config.context_len, config.text_dim, config.seed ^ 0x7e47)?;
        let mut ldm = ToyLdm {
            schedule: NoiseSchedule::linear(config.train_steps, config.beta_start, config.beta_end),
            autoencoder,
            text,
            base: TensorMap::new(),
            config,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(ldm.config.seed);
        ldm.base = denoiser::init_base(&ldm.denoiser_config(), &mut rng)?;
        Ok(ldm)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            tokens: self.autoencoder.tokens(),
            latent_channels: self.autoencoder.channels(),
            width: self.config.width,
            heads: self.config.heads,
            blocks: self.config.blocks,
            context_dim: self.config.text_dim,
            ff_mult: self.config.ff_mult,
        }
    }

    /// Side of the square cross-attention grid.
    pub fn attention_grid(&self) -> usize {
        self.autoencoder.grid()
    }

    pub fn denoiser(&self, lora: TensorMap) -> ToyDenoiser {
        ToyDenoiser::new(self.denoiser_config(), self.base.clone(), lora).with_preconditioning(&self.schedule, self.config.sigma_data)
    }

    pub fn encode_images(&self, images: &[RgbImage]) -> Result<Vec<Tensor>> {
        images.iter().map(|i| self.autoencoder.encode(i)).collect()
    }

    /// Fits the base denoiser on `images` with a fixed prompt (and a fraction
    /// of empty prompts for guidance). Returns the per-step loss.
    pub fn pretrain(&mut self, images: &[RgbImage], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::Input("pretraining needs at least one image".into()));
        }
        let latents = self.encode_images(images)?;
        let prompt = self.text.tokenize_text(&cfg.prompt)?;
        let empty = self.text.tokenize_text("")?;
        let vars = nn::tensors_to_vars(&self.base)?;
        let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut losses = Vec::with_capacity(cfg.steps);
        let dc = self.denoiser_config();
        for step in 0..cfg.steps {
            // Cosine decay to zero over the run.
            let progress = step as f64 / cfg.steps as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..latents.len())).collect();
            let z0 = Tensor::stack(&idx.iter().map(|&i| &latents[i]).collect::<Vec<_>>(), 0)?;
            let prompts: Vec<_> = idx
                .iter()
                .map(|_| if rng.gen_bool(cfg.empty_prompt_prob) { empty.clone() } else { prompt.clone() })
                .collect();
            let ts: Vec<usize> = idx.iter().map(|_| rng.gen_range(0..self.schedule.train_steps)).collect();
            let noise = gaussian(&mut rng, z0.dims())?;
            let zt = self.schedule.add_noise(&z0, &noise, &ts)?;
            let ctx = self.text.encode(&prompts, None)?;
            let den = ToyDenoiser::new(dc.clone(), nn::vars_to_tensors(&vars), TensorMap::new()).with_preconditioning(&self.schedule, self.config.sigma_data);
            let out = den.predict(&zt, &ts, &ctx)?;
            let loss = (out.eps - &noise)?.sqr()?.mean_all()?;
            let value = loss.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("pretraining loss is {value} at step {step}")));
            }
            losses.push(value);
            opt.step(&vars, &optim::gradients(&loss, &vars)?)?;
            if step % 100 == 0 {
                log::debug!("pretrain step {step}: loss {value:.5}");
            }
        }
        self.base = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect();
        Ok(losses)
    }

    pub fn to_record(&self) -> Result<ToyLdmRecord> {
        Ok(ToyLdmRecord {
            schema_version: TOY_SCHEMA_VERSION,
            config: self.config.clone(),
            text: nn::record_map(self.text.params())?,
            base: nn::record_map(&self.base)?,
        })
    }

    pub fn from_record(r: &ToyLdmRecord) -> Result<Self> {
        if r.schema_version != TOY_SCHEMA_VERSION {
            return Err(Error::Schema {
                what: "toy model",
                found: r.schema_version,
                expected: TOY_SCHEMA_VERSION,
            });
        }
        let mut ldm = ToyLdm::new(r.config.clone())?;
        let base = nn::restore_map(&r.base)?;
        for (k, t) in &ldm.base {
            let loaded = base
                .get(k)
                .ok_or_else(|| Error::Input(format!("toy model is missing parameter {k}")))?;
            if loaded.dims() != t.dims() {
                return Err(Error::Input(format!("parameter {k} has shape {:?}", loaded.dims())));
            }
        }
        ldm.base = base;
        let vocab = ldm.text.vocab().clone();
        ldm.text = TextEncoder::from_params(vocab, r.config.context_len, nn::restore_map(&r.text)?)?;
        Ok(ldm)
    }

    /// Content hash of the serialized model.
    pub fn id(&self) -> Result<String> {
        Ok(content_id(serde_json::to_string(&self.to_record()?)?.as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_record()?)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_record(&serde_json::from_str(&text)?)
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToyLdmConfig {
        ToyLdmConfig {
            image_size: 16,
            width: 16,
            heads: 2,
            blocks: 1,
            text_dim: 8,
            ..ToyLdmConfig::default()
        }
    }

    #[test]
    fn record_round_trip_keeps_id() {
        let ldm = ToyLdm::new(tiny()).unwrap();
        let back = ToyLdm::from_record(&ldm.to_record().unwrap()).unwrap();
        assert_eq!(ldm.id().unwrap(), back.id().unwrap());
        let mut rec = ldm.to_record().unwrap();
        rec.schema_version = 9;
        assert!(matches!(ToyLdm::from_record(&rec), Err(Error::Schema { .. })));
    }

    #[test]
    fn pretraining_reduces_loss() {
        let mut ldm = ToyLdm::new(tiny()).unwrap();
        let sprites = crate::sprites::generate_corpus(&Default::default(), 8, 0);
        let images: Vec<_> = sprites.into_iter().map(|s| s.image).collect();
        let cfg = PretrainConfig {
            steps: 200,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let losses = ldm.pretrain(&images, &cfg).unwrap();
        let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
        let tail: f64 = losses[160..].iter().sum::<f64>() / 40.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
