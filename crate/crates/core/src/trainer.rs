//! Joint optimisation of part-token embeddings, the bottleneck projector and
//! cross-attention adapters against the diffusion loss plus the attention
//! regulariser.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention_loss::{collect_attention, AttentionLossKind, AttentionLossOp, DEFAULT_LAMBDA};
use crate::backend::{self, content_id, denoiser, gaussian, Denoiser, DenoiserOutput, LoraConfig, NoiseSchedule, ToyLdm};
use crate::error::{Error, Result};
use crate::nn::{self, TensorMap, TensorRecord, VarMap};
use crate::optim::{self, AdamW, AdamWConfig, AdamWState};
use crate::part_discovery::{tag_image, PartComposition, PartDictionary, PartHierarchy, PartMaskSet, PatchStatsExtractor};
use crate::token_codec::{EncodedPrompt, PartSpace, ProjectorMode, PromptSpec, TokenTable, TokenTableRecord, DEFAULT_TEMPLATE};

pub const TRAIN_STATE_SCHEMA_VERSION: u32 = 1;

/// The 16x16 cross-attention layers of an SD-1.5 UNet.
pub const SD_ATTENTION_LAYERS: [&str; 5] = [
    "down_blocks.2.attentions.0.transformer_blocks.0.attn2",
    "down_blocks.2.attentions.1.transformer_blocks.0.attn2",
    "up_blocks.1.attentions.0.transformer_blocks.0.attn2",
    "up_blocks.1.attentions.1.transformer_blocks.0.attn2",
    "up_blocks.1.attentions.2.transformer_blocks.0.attn2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub horizontal_flip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnConfig {
    pub layers: Vec<String>,
    pub lambda: f64,
    pub resolution: [usize; 2],
    #[serde(default)]
    pub kind: AttentionLossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenConfig {
    pub projector: ProjectorMode,
    /// Hidden width of the projector; defaults to the text embedding width.
    pub hidden: Option<usize>,
    /// Word whose embedding initialises every part token.
    pub init_word: String,
    pub init_noise: f64,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Effective batch size (split into `grad_accum` micro-batches).
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub image_resolution: u32,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub augmentation: Augmentation,
    pub lora: LoraConfig,
    pub attn: AttnConfig,
    pub tokens: TokenConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 2,
            grad_accum: 1,
            epochs: 100,
            max_steps: None,
            image_resolution: 512,
            seed: 0,
            checkpoint_every: 0,
            augmentation: Augmentation { horizontal_flip: true },
            lora: LoraConfig::default(),
            attn: AttnConfig {
                layers: SD_ATTENTION_LAYERS.iter().map(|s| s.to_string()).collect(),
                lambda: DEFAULT_LAMBDA,
                resolution: [16, 16],
                kind: AttentionLossKind::NormalizedEntropy,
            },
            tokens: TokenConfig {
                projector: ProjectorMode::Bottleneck,
                hidden: None,
                init_word: "bird".into(),
                init_noise: 0.01,
                template: DEFAULT_TEMPLATE.into(),
            },
        }
    }
}

impl TrainingConfig {
    /// Settings for the bundled toy backend.
    pub fn toy(ldm: &ToyLdm) -> Self {
        let g = ldm.attention_grid();
        let mut cfg = TrainingConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 100,
            image_resolution: ldm.config.image_size,
            augmentation: Augmentation { horizontal_flip: false },
            ..TrainingConfig::default()
        };
        cfg.attn.layers = ldm.denoiser_config().cross_attention_layers();
        cfg.attn.resolution = [g, g];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.grad_accum == 0 {
            return bad("batch_size, grad_accum and epochs must be positive");
        }
        if self.grad_accum > self.batch_size {
            return bad("grad_accum cannot exceed batch_size");
        }
        if self.image_resolution == 0 {
            return bad("image_resolution must be positive");
        }
        if !(self.attn.lambda >= 0.0 && self.attn.lambda.is_finite()) {
            return bad("attn.lambda must be finite and non-negative");
        }
        if self.attn.layers.is_empty() {
            return bad("attn.layers must not be empty");
        }
        if self.attn.resolution.contains(&0) {
            return bad("attn.resolution must be positive");
        }
        if self.tokens.init_noise < 0.0 || self.tokens.hidden == Some(0) {
            return bad("tokens.init_noise must be >= 0 and tokens.hidden > 0");
        }
        self.lora.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// One tagged training image in latent form.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub composition: PartComposition,
    pub latents: Tensor,
    /// Part masks at the attention resolution.
    pub masks: PartMaskSet,
    /// Mirrored latents and masks when flip augmentation is on.
    pub flipped: Option<(Tensor, PartMaskSet)>,
}

fn check_backend(ldm: &ToyLdm, cfg: &TrainingConfig) -> Result<()> {
    if cfg.image_resolution != ldm.config.image_size {
        return Err(Error::Config(format!(
            "image_resolution {} does not match the backend input size {}",
            cfg.image_resolution, ldm.config.image_size
        )));
    }
    let g = ldm.attention_grid();
    if cfg.attn.resolution != [g, g] {
        return Err(Error::Config(format!(
            "attn.resolution {:?} does not match the backend attention grid {g}x{g}",
            cfg.attn.resolution
        )));
    }
    let known = ldm.denoiser_config().cross_attention_layers();
    if let Some(l) = cfg.attn.layers.iter().find(|l| !known.contains(l)) {
        return Err(Error::Config(format!("unknown attention layer {l:?}; the backend has {known:?}")));
    }
    Ok(())
}

/// Encodes tagged images and brings their masks to the attention grid.
pub fn prepare_examples(
    ldm: &ToyLdm,
    dict: &PartDictionary,
    images: &[(String, RgbImage)],
    cfg: &TrainingConfig,
) -> Result<Vec<TrainingExample>> {
    check_backend(ldm, cfg)?;
    let [rows, cols] = cfg.attn.resolution;
    images
        .iter()
        .map(|(id, img)| {
            let tagged = dict
                .image(id)
                .ok_or_else(|| Error::Input(format!("image {id} is not in the part dictionary")))?;
            let masks = tagged.masks(dict.num_parts())?.downsample(rows, cols)?;
            let flipped = if cfg.augmentation.horizontal_flip {
                let mirror = image::imageops::flip_horizontal(img);
                Some((ldm.autoencoder.encode(&mirror)?, masks.flip_horizontal()))
            } else {
                None
            };
            Ok(TrainingExample {
                id: id.clone(),
                composition: tagged.composition.clone(),
                latents: ldm.autoencoder.encode(img)?,
                masks,
                flipped,
            })
        })
        .collect()
}

/// Tags images outside the dictionary (e.g. a held-out split) against its
/// hierarchy and wraps them as unflipped examples.
pub fn tag_examples(ldm: &ToyLdm, hierarchy: &PartHierarchy, images: &[(String, RgbImage)]) -> Result<Vec<TrainingExample>> {
    let extractor = PatchStatsExtractor::from_descriptor(&hierarchy.extractor)?;
    let g = ldm.attention_grid();
    images
        .iter()
        .map(|(id, img)| {
            let (composition, masks) = tag_image(img, &extractor, hierarchy, (g, g))?;
            Ok(TrainingExample {
                id: id.clone(),
                composition,
                latents: ldm.autoencoder.encode(img)?,
                masks,
                flipped: None,
            })
        })
        .collect()
}

/// Everything that is optimised, plus bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub table: TokenTable,
    pub lora: VarMap,
    pub lora_config: LoraConfig,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub base_id: String,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStateRecord {
    pub schema_version: u32,
    pub base_id: String,
    pub step: usize,
    pub epoch: usize,
    pub template: String,
    pub lora_config: LoraConfig,
    pub table: TokenTableRecord,
    pub lora: BTreeMap<String, TensorRecord>,
    pub optimizer: AdamWState,
}

impl TrainState {
    pub fn init(ldm: &ToyLdm, space: PartSpace, cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ldm.text.word_row(&cfg.tokens.init_word)?;
        let hidden = cfg.tokens.hidden.unwrap_or(init.len());
        let table = TokenTable::new(space, &init, hidden, cfg.tokens.projector, cfg.tokens.init_noise, rng.gen())?;
        let lora = nn::tensors_to_vars(&denoiser::init_lora(&ldm.denoiser_config(), &cfg.lora, &mut rng)?)?;
        Ok(TrainState {
            table,
            lora,
            lora_config: cfg.lora.clone(),
            optimizer: AdamW::new(AdamWConfig::new(cfg.learning_rate, cfg.weight_decay)),
            step: 0,
            epoch: 0,
            base_id: ldm.id()?,
            template: cfg.tokens.template.clone(),
        })
    }

    /// All trainable variables by name.
    pub fn vars(&self) -> VarMap {
        let mut vars: VarMap = self.lora.iter().map(|(k, v)| (format!("lora.{k}"), v.clone())).collect();
        vars.extend(self.table.vars());
        vars
    }

    /// Adapter weights detached from the graph, for inference.
    pub fn lora_tensors(&self) -> TensorMap {
        self.lora.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach())).collect()
    }

    pub fn space(&self) -> PartSpace {
        self.table.space()
    }

    pub fn to_record(&self) -> Result<TrainStateRecord> {
        Ok(TrainStateRecord {
            schema_version: TRAIN_STATE_SCHEMA_VERSION,
            base_id: self.base_id.clone(),
            step: self.step,
            epoch: self.epoch,
            template: self.template.clone(),
            lora_config: self.lora_config.clone(),
            table: self.table.to_record()?,
            lora: nn::record_map(&nn::vars_to_tensors(&self.lora))?,
            optimizer: self.optimizer.state()?,
        })
    }

    pub fn from_record(r: &TrainStateRecord) -> Result<Self> {
        if r.schema_version != TRAIN_STATE_SCHEMA_VERSION {
            return Err(Error::Schema {
                what: "training checkpoint",
                found: r.schema_version,
                expected: TRAIN_STATE_SCHEMA_VERSION,
            });
        }
        r.lora_config.validate()?;
        Ok(TrainState {
            table: TokenTable::from_record(&r.table)?,
            lora: nn::tensors_to_vars(&nn::restore_map(&r.lora)?)?,
            lora_config: r.lora_config.clone(),
            optimizer: AdamW::from_state(&r.optimizer)?,
            step: r.step,
            epoch: r.epoch,
            base_id: r.base_id.clone(),
            template: r.template.clone(),
        })
    }

    /// Content hash identifying this checkpoint.
    pub fn checkpoint_id(&self) -> Result<String> {
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

    /// Fails unless this state was trained on `ldm`.
    pub fn check_base(&self, ldm: &ToyLdm) -> Result<()> {
        let id = ldm.id()?;
        if id != self.base_id {
            return Err(Error::State(format!(
                "checkpoint was trained on base {} but the loaded base is {}",
                &self.base_id[..12.min(self.base_id.len())],
                &id[..12]
            )));
        }
        Ok(())
    }
}

/// Mean squared error between the sampled noise and the prediction.
pub fn ldm_loss(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    noise: &Tensor,
    timesteps: &[usize],
    context: &Tensor,
) -> Result<(Tensor, DenoiserOutput)> {
    let zt = schedule.add_noise(z0, noise, timesteps)?;
    let out = denoiser.predict(&zt, timesteps, context)?;
    let loss = (&out.eps - noise)?.sqr()?.mean_all()?;
    Ok((loss, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub ldm: f64,
    pub attn: f64,
    pub lambda: f64,
    pub total: f64,
    /// False when no example in the batch had a present part.
    pub supervised: bool,
    pub effective_batch: usize,
}

struct Forward {
    total: Tensor,
    ldm: f64,
    attn: f64,
    supervised: bool,
}

pub struct Trainer<'a> {
    ldm: &'a ToyLdm,
    cfg: TrainingConfig,
    pub state: TrainState,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(ldm: &'a ToyLdm, space: PartSpace, cfg: TrainingConfig) -> Result<Self> {
        let state = TrainState::init(ldm, space, &cfg)?;
        Self::resume(ldm, state, cfg)
    }

    pub fn resume(ldm: &'a ToyLdm, mut state: TrainState, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        check_backend(ldm, &cfg)?;
        state.check_base(ldm)?;
        state.optimizer.config.lr = cfg.learning_rate;
        state.optimizer.config.weight_decay = cfg.weight_decay;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (state.step as u64).wrapping_mul(0x9e37_79b9));
        Ok(Trainer { ldm, cfg, state, rng })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    fn prompts(&self, batch: &[&TrainingExample]) -> Result<Vec<EncodedPrompt>> {
        batch
            .iter()
            .map(|ex| {
                let spec = PromptSpec {
                    template: self.state.template.clone(),
                    composition: ex.composition.clone(),
                    style_suffix: None,
                };
                Ok(self.ldm.text.tokenize(&spec, self.state.space())?.1)
            })
            .collect()
    }

    fn forward(&self, batch: &[&TrainingExample], rng: &mut ChaCha8Rng, graph_attn: bool) -> Result<Forward> {
        let mut latents = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for ex in batch {
            let flip = ex.flipped.is_some() && rng.gen_bool(0.5);
            match (&ex.flipped, flip) {
                (Some((z, m)), true) => {
                    latents.push(z.clone());
                    masks.push(m.clone());
                }
                _ => {
                    latents.push(ex.latents.clone());
                    masks.push(ex.masks.clone());
                }
            }
        }
        let z0 = Tensor::stack(&latents, 0)?;
        let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(0..self.ldm.schedule.train_steps)).collect();
        let noise = gaussian(rng, z0.dims())?;
        let prompts = self.prompts(batch)?;
        let context = self.ldm.text.encode(&prompts, Some(&self.state.table))?;
        let den = self.ldm.denoiser(nn::vars_to_tensors(&self.state.lora));
        let (ldm_t, out) = ldm_loss(&den, &self.ldm.schedule, &z0, &noise, &ts, &context)
            .map_err(|e| Error::Backend(format!("batch {:?}: {e}", batch.iter().map(|b| &b.id).collect::<Vec<_>>())))?;
        let ldm = ldm_t.to_scalar::<f64>()?;
        if !ldm.is_finite() {
            return Err(Error::Numeric(format!("non-finite denoising loss at step {}", self.state.step)));
        }
        let mut attn_terms = Vec::new();
        for (b, (prompt, m)) in prompts.iter().zip(&masks).enumerate() {
            if prompt.part_columns.is_empty() {
                continue;
            }
            let (slots, cols): (Vec<usize>, Vec<usize>) = prompt.part_columns.iter().copied().unzip();
            let stack = collect_attention(&out.cross_attention, &self.cfg.attn.layers, b, &cols)?;
            let stack = if graph_attn { stack } else { stack.detach() };
            let op = AttentionLossOp {
                layer_ids: self.cfg.attn.layers.clone(),
                slots,
                masks: m.clone(),
                kind: self.cfg.attn.kind,
            };
            attn_terms.push(stack.apply_op1(op)?);
        }
        let supervised = !attn_terms.is_empty();
        let attn_t = if supervised {
            (Tensor::stack(&attn_terms, 0)?.sum_all()? / attn_terms.len() as f64)?
        } else {
            Tensor::new(0.0f64, &nn::device())?
        };
        let attn = attn_t.to_scalar::<f64>()?;
        let total = if graph_attn { (ldm_t + (attn_t * self.cfg.attn.lambda)?)? } else { ldm_t };
        Ok(Forward {
            total,
            ldm,
            attn,
            supervised,
        })
    }

    /// One optimiser update over `batch`, split into `grad_accum` micro-batches.
    pub fn step(&mut self, batch: &[&TrainingExample]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let vars = self.state.vars();
        let chunks = self.cfg.grad_accum.min(batch.len());
        let per = batch.len().div_ceil(chunks);
        let graph_attn = self.cfg.attn.lambda > 0.0;
        let mut grads = TensorMap::new();
        let (mut ldm, mut attn, mut total, mut supervised) = (0.0, 0.0, 0.0, false);
        let mut rng = self.rng.clone();
        let parts: Vec<_> = batch.chunks(per).collect();
        let n = parts.len() as f64;
        for micro in &parts {
            let f = self.forward(micro, &mut rng, graph_attn)?;
            let t = f.total.to_scalar::<f64>()?;
            if !t.is_finite() || !f.attn.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (ldm {}, attn {})",
                    self.state.step, f.ldm, f.attn
                )));
            }
            for (k, g) in optim::gradients(&(f.total / n)?, &vars)? {
                let g = match grads.remove(&k) {
                    Some(acc) => (acc + g)?,
                    None => g,
                };
                grads.insert(k, g);
            }
            ldm += f.ldm / n;
            attn += f.attn / n;
            total += t / n;
            supervised |= f.supervised;
        }
        self.state.optimizer.step(&vars, &grads)?;
        self.rng = rng;
        let log = StepLog {
            step: self.state.step,
            epoch: self.state.epoch,
            ldm,
            attn,
            lambda: self.cfg.attn.lambda,
            total,
            supervised,
            effective_batch: batch.len(),
        };
        self.state.step += 1;
        Ok(log)
    }

    /// Loss components on `batch` with a fixed noise seed and no update.
    pub fn probe(&self, batch: &[&TrainingExample], seed: u64) -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.forward(batch, &mut rng, false)?;
        Ok((f.ldm, f.attn))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for periodic checkpoints, the last-good checkpoint and the
    /// loss log.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub state: TrainState,
    pub log: Vec<StepLog>,
    /// Set when training stopped on a non-finite loss; `state` is then the
    /// last good state.
    pub aborted: Option<String>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn train(
    ldm: &ToyLdm,
    space: PartSpace,
    examples: &[TrainingExample],
    cfg: &TrainingConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let trainer = Trainer::new(ldm, space, cfg.clone())?;
    train_with(trainer, examples, opts)
}

/// Runs the epoch loop from whatever state `trainer` holds.
pub fn train_with(mut trainer: Trainer<'_>, examples: &[TrainingExample], opts: &TrainOptions) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    for ex in examples {
        trainer.state.space().validate(&ex.composition)?;
    }
    let cfg = trainer.cfg.clone();
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut aborted = None;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    'outer: while trainer.state.epoch < cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.state.step >= m) {
                break 'outer;
            }
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let entry = match trainer.step(&batch) {
                Ok(e) => e,
                Err(Error::Numeric(msg)) => {
                    log::warn!("aborting: {msg}");
                    if let Some(dir) = &opts.out_dir {
                        let p = dir.join("last-good.json");
                        trainer.state.save(&p)?;
                        checkpoints.push(p);
                    }
                    aborted = Some(msg);
                    break 'outer;
                }
                Err(e) => return Err(e),
            };
            if let Some((f, p)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p.clone(), e))?;
            }
            if entry.step % 50 == 0 {
                log::info!(
                    "step {} epoch {}: ldm {:.5} attn {:.5} total {:.5}",
                    entry.step,
                    entry.epoch,
                    entry.ldm,
                    entry.attn,
                    entry.total
                );
            }
            log.push(entry);
            if cfg.checkpoint_every > 0 && trainer.state.step % cfg.checkpoint_every == 0 {
                if let Some(dir) = &opts.out_dir {
                    let p = dir.join(format!("checkpoint-{:06}.json", trainer.state.step));
                    trainer.state.save(&p)?;
                    checkpoints.push(p);
                }
            }
        }
        trainer.state.epoch += 1;
    }
    Ok(TrainReport {
        state: trainer.state,
        log,
        aborted,
        checkpoints,
    })
}

/// Re-exported for callers building their own backends.
pub use backend::SamplerConfig;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = TrainingConfig::default();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("learning_rate = 0.0001"));
        assert!(text.contains("down_blocks.2.attentions.0.transformer_blocks.0.attn2"));
        assert_eq!(TrainingConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.lora.targets.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TrainingConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainingConfig::from_toml("learning_rate = 1\nbogus = 2").is_err());
    }
}
