//! Sampling images from part compositions.

use candle_core::Tensor;
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ddim_sample, gaussian, SamplerConfig, ToyLdm};
use crate::error::{input_err, Error, Result};
use crate::part_discovery::PartComposition;
use crate::token_codec::{PromptSpec, TokenTable};
use crate::trainer::TrainState;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub composition: PartComposition,
    #[serde(default)]
    pub style_suffix: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

impl GenerationRequest {
    pub fn new(composition: PartComposition, seed: u64) -> Self {
        GenerationRequest {
            composition,
            style_suffix: None,
            seed,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }

    pub fn validate(&self, num_parts: usize, num_variants: usize) -> Result<()> {
        self.composition.validate(num_parts, num_variants)?;
        if self.steps == 0 {
            return Err(input_err!("steps must be at least 1"));
        }
        if !self.guidance.is_finite() {
            return Err(input_err!("guidance must be finite"));
        }
        Ok(())
    }
}

/// Where a generated image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub composition: PartComposition,
    pub style_suffix: Option<String>,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    pub checkpoint_id: String,
    /// Rendered prompt, one entry per word or pseudo-token.
    pub prompt_tokens: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub image: RgbImage,
    pub provenance: Provenance,
}

/// Anything that turns requests into images (the trained model, or stubs).
pub trait ImageGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedImage>;

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<GeneratedImage>> {
        requests.iter().map(|r| self.generate(r)).collect()
    }
}

/// Trained toy model ready for sampling.
#[derive(Debug, Clone)]
pub struct Generator {
    ldm: ToyLdm,
    table: TokenTable,
    lora: crate::nn::TensorMap,
    template: String,
    checkpoint_id: String,
    clip_latent: Option<f64>,
}

impl Generator {
    pub fn new(ldm: ToyLdm, state: &TrainState) -> Result<Self> {
        state.check_base(&ldm)?;
        Ok(Generator {
            table: state.table.clone(),
            lora: state.lora_tensors(),
            template: state.template.clone(),
            checkpoint_id: state.checkpoint_id()?,
            clip_latent: SamplerConfig::default().clip_latent,
            ldm,
        })
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn model(&self) -> &ToyLdm {
        &self.ldm
    }

    pub fn table(&self) -> &TokenTable {
        &self.table
    }

    fn spec(&self, r: &GenerationRequest) -> PromptSpec {
        PromptSpec {
            template: self.template.clone(),
            composition: r.composition.clone(),
            style_suffix: r.style_suffix.clone(),
        }
    }

    pub fn render(&self, r: &GenerationRequest) -> Result<Vec<String>> {
        crate::token_codec::render_prompt(&self.spec(r), self.table.space())
    }

    /// Requests sharing `steps` and `guidance` are sampled as one batch.
    fn sample_group(&self, requests: &[&GenerationRequest]) -> Result<Vec<GeneratedImage>> {
        let space = self.table.space();
        let mut prompts = Vec::with_capacity(requests.len());
        let mut words = Vec::with_capacity(requests.len());
        let mut noise = Vec::with_capacity(requests.len());
        let tokens = self.ldm.autoencoder.tokens();
        for r in requests {
            r.validate(space.num_parts, space.num_variants)?;
            let (w, p) = self.ldm.text.tokenize(&self.spec(r), space)?;
            words.push(w);
            prompts.push(p);
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            noise.push(gaussian(&mut rng, &[tokens, self.ldm.autoencoder.channels()])?);
        }
        let empty = self.ldm.text.tokenize_text("")?;
        let cond = self.ldm.text.encode(&prompts, Some(&self.table))?.detach();
        let uncond = self.ldm.text.encode(&vec![empty; requests.len()], None)?;
        let cfg = SamplerConfig {
            steps: requests[0].steps,
            guidance: requests[0].guidance,
            clip_latent: self.clip_latent,
        };
        let den = self.ldm.denoiser(self.lora.clone());
        let z = ddim_sample(&den, &self.ldm.schedule, &cond, &uncond, &Tensor::stack(&noise, 0)?, &cfg)
            .map_err(|e| Error::Backend(format!("sampling failed: {e}")))?;
        requests
            .iter()
            .zip(words)
            .enumerate()
            .map(|(i, (r, prompt_tokens))| {
                Ok(GeneratedImage {
                    image: self.ldm.autoencoder.decode(&z.get(i)?)?,
                    provenance: Provenance {
                        composition: r.composition.clone(),
                        style_suffix: r.style_suffix.clone(),
                        seed: r.seed,
                        steps: r.steps,
                        guidance: r.guidance,
                        checkpoint_id: self.checkpoint_id.clone(),
                        prompt_tokens,
                    },
                })
            })
            .collect()
    }
}

const MAX_BATCH: usize = 16;

impl ImageGenerator for Generator {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedImage> {
        Ok(self.sample_group(&[request])?.remove(0))
    }

    fn generate_batch(&self, requests: &[GenerationRequest]) -> Result<Vec<GeneratedImage>> {
        let mut out: Vec<Option<GeneratedImage>> = vec![None; requests.len()];
        let mut pending: Vec<usize> = (0..requests.len()).collect();
        while let Some(&first) = pending.first() {
            let key = (requests[first].steps, requests[first].guidance.to_bits());
            let (group, rest): (Vec<usize>, Vec<usize>) = pending
                .iter()
                .partition(|&&i| (requests[i].steps, requests[i].guidance.to_bits()) == key);
            pending = rest;
            for chunk in group.chunks(MAX_BATCH) {
                let reqs: Vec<&GenerationRequest> = chunk.iter().map(|&i| &requests[i]).collect();
                for (&i, img) in chunk.iter().zip(self.sample_group(&reqs)?) {
                    out[i] = Some(img);
                }
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every request sampled")).collect())
    }
}

/// Copy of `base` with `slot` taken from `donor`.
pub fn swap_part(base: &PartComposition, slot: usize, donor: &PartComposition) -> Result<PartComposition> {
    if base.num_slots() != donor.num_slots() {
        return Err(input_err!(
            "compositions have {} and {} slots",
            base.num_slots(),
            donor.num_slots()
        ));
    }
    let code = donor
        .get(slot)
        .ok_or_else(|| input_err!("slot {slot} out of range 0..={}", base.num_parts()))?;
    let variant = code
        .variant
        .ok_or_else(|| input_err!("donor slot {slot} is absent"))?;
    let mut out = base.clone();
    out.set(slot, Some(variant));
    Ok(out)
}
