mod common;

use candle_core::Tensor;
use partsmith::backend::{gaussian, Denoiser, DenoiserOutput, NoiseSchedule};
use partsmith::nn;
use partsmith::token_codec::ProjectorMode;
use partsmith::trainer::{
    ldm_loss, prepare_examples, train, train_with, TrainOptions, TrainState, Trainer, TrainingConfig,
    TrainingExample,
};
use partsmith::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Predicts the exact noise that produced `z_t` from known clean latents,
/// plus a constant offset.
struct OracleStub {
    schedule: NoiseSchedule,
    z0: Tensor,
    offset: f64,
}

impl Denoiser for OracleStub {
    fn cross_attention_layers(&self) -> Vec<String> {
        Vec::new()
    }

    fn predict(&self, zt: &Tensor, ts: &[usize], _ctx: &Tensor) -> partsmith::Result<DenoiserOutput> {
        let mut rows = Vec::new();
        for (b, &t) in ts.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let e = ((zt.get(b)? - (self.z0.get(b)? * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
            rows.push((e + self.offset)?);
        }
        Ok(DenoiserOutput {
            eps: Tensor::stack(&rows, 0)?,
            cross_attention: Vec::new(),
        })
    }
}

fn stub_inputs() -> (NoiseSchedule, Tensor, Tensor, Vec<usize>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02);
    let z0 = gaussian(&mut rng, &[3, 10, 12]).unwrap();
    let noise = gaussian(&mut rng, &[3, 10, 12]).unwrap();
    let ctx = nn::zeros(&[3, 4, 8]).unwrap();
    (schedule, z0, noise, vec![0, 400, 999], ctx)
}

#[test]
fn exact_noise_prediction_has_zero_loss() {
    let (schedule, z0, noise, ts, ctx) = stub_inputs();
    let stub = OracleStub { schedule: schedule.clone(), z0: z0.clone(), offset: 0.0 };
    let (loss, _) = ldm_loss(&stub, &schedule, &z0, &noise, &ts, &ctx).unwrap();
    assert!(loss.to_scalar::<f64>().unwrap() < 1e-12);
}

#[test]
fn constant_offset_costs_its_square() {
    let (schedule, z0, noise, ts, ctx) = stub_inputs();
    let stub = OracleStub { schedule: schedule.clone(), z0: z0.clone(), offset: 0.3 };
    let (loss, _) = ldm_loss(&stub, &schedule, &z0, &noise, &ts, &ctx).unwrap();
    assert!((loss.to_scalar::<f64>().unwrap() - 0.09).abs() < 1e-9);
}

#[test]
fn tiny_denoiser_loss_matches_plain_mse() {
    let world = common::tiny_world();
    let den = world.ldm.denoiser(Default::default());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z0 = Tensor::stack(&[&world.examples[0].latents, &world.examples[1].latents], 0).unwrap();
    let noise = gaussian(&mut rng, z0.dims()).unwrap();
    let ts = [17, 650];
    let ctx = world.ldm.text.encode(&vec![world.ldm.text.tokenize_text("a photo of a bird").unwrap(); 2], None).unwrap();
    let (loss, out) = ldm_loss(&den, &world.ldm.schedule, &z0, &noise, &ts, &ctx).unwrap();
    let pred = out.eps.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eps = noise.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut acc = 0.0;
    for i in 0..pred.len() {
        acc += (pred[i] - eps[i]) * (pred[i] - eps[i]);
    }
    assert!((loss.to_scalar::<f64>().unwrap() - acc / pred.len() as f64).abs() < 1e-6);
}

fn tiny_config(world: &partsmith::toy::ToyWorld) -> TrainingConfig {
    let mut cfg = world.training_config();
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 2;
    cfg.max_steps = Some(4);
    cfg
}

fn batch(examples: &[TrainingExample], n: usize) -> Vec<&TrainingExample> {
    examples.iter().take(n).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    cfg.learning_rate = 0.0;
    let mut t = Trainer::new(&world.ldm, world.space(), cfg).unwrap();
    let before = common::bits(&nn::vars_to_tensors(&t.state.vars()));
    t.step(&batch(&world.examples, 2)).unwrap();
    assert_eq!(before, common::bits(&nn::vars_to_tensors(&t.state.vars())));
}

#[test]
fn identical_seeds_give_identical_first_losses() {
    let world = common::tiny_world();
    let run = || {
        let mut t = Trainer::new(&world.ldm, world.space(), tiny_config(&world)).unwrap();
        let a = t.step(&batch(&world.examples, 2)).unwrap();
        let b = t.step(&batch(&world.examples[2..], 2)).unwrap();
        (a.total.to_bits(), b.total.to_bits(), a.attn.to_bits())
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_reproduces_losses() {
    let world = common::tiny_world();
    let cfg = tiny_config(&world);
    let report = train(&world.ldm, world.space(), &world.examples, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(report.state.step, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    report.state.save(&path).unwrap();
    let loaded = TrainState::load(&path).unwrap();
    assert_eq!(loaded.checkpoint_id().unwrap(), report.state.checkpoint_id().unwrap());
    let b = batch(&world.examples, 3);
    let a = Trainer::resume(&world.ldm, report.state, cfg.clone()).unwrap().probe(&b, 77).unwrap();
    let c = Trainer::resume(&world.ldm, loaded, cfg).unwrap().probe(&b, 77).unwrap();
    assert!((a.0 - c.0).abs() < 1e-6 && (a.1 - c.1).abs() < 1e-6, "{a:?} vs {c:?}");
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    let dir = tempfile::tempdir().unwrap();
    cfg.max_steps = Some(2);
    let first = train(&world.ldm, world.space(), &world.examples, &cfg, &TrainOptions::default()).unwrap();
    let path = dir.path().join("mid.json");
    first.state.save(&path).unwrap();
    cfg.max_steps = Some(4);
    let resumed = Trainer::resume(&world.ldm, TrainState::load(&path).unwrap(), cfg.clone()).unwrap();
    let rest = train_with(resumed, &world.examples, &TrainOptions::default()).unwrap();
    assert_eq!(rest.state.step, 4);
    assert_eq!(rest.log.first().unwrap().step, 2);
}

#[test]
fn sd_layer_names_are_unknown_to_the_toy_backend() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    cfg.attn.layers = TrainingConfig::default().attn.layers;
    assert!(matches!(Trainer::new(&world.ldm, world.space(), cfg), Err(Error::Config(_))));
}

#[test]
fn empty_corpus_is_an_input_error() {
    let world = common::tiny_world();
    let cfg = tiny_config(&world);
    let r = train(&world.ldm, world.space(), &[], &cfg, &TrainOptions::default());
    assert!(matches!(r, Err(Error::Input(_))));
}

#[test]
fn nan_loss_aborts_with_last_good_state() {
    let world = common::tiny_world();
    let cfg = tiny_config(&world);
    let mut bad = world.examples.clone();
    for ex in bad.iter_mut() {
        ex.latents = (ex.latents.clone() * f64::NAN).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()) };
    let report = train(&world.ldm, world.space(), &bad, &cfg, &opts).unwrap();
    assert!(report.aborted.is_some());
    assert_eq!(report.state.step, 0);
    assert!(report.log.is_empty());
    let saved = TrainState::load(&dir.path().join("last-good.json")).unwrap();
    assert_eq!(saved.checkpoint_id().unwrap(), report.state.checkpoint_id().unwrap());
}

#[test]
fn unused_codes_receive_no_update() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    cfg.weight_decay = 0.0;
    cfg.tokens.projector = ProjectorMode::Identity;
    let mut t = Trainer::new(&world.ldm, world.space(), cfg).unwrap();
    let b = batch(&world.examples, 2);
    let used: Vec<usize> = b
        .iter()
        .flat_map(|ex| ex.composition.present().filter_map(|c| c.row(4)).collect::<Vec<_>>())
        .collect();
    let before = t.state.table.embeddings().as_tensor().to_vec2::<f64>().unwrap();
    t.step(&b).unwrap();
    let after = t.state.table.embeddings().as_tensor().to_vec2::<f64>().unwrap();
    for row in 0..before.len() {
        let changed = before[row] != after[row];
        assert_eq!(changed, used.contains(&row), "row {row}");
    }
}

#[test]
fn flip_mirrors_latents_and_masks_together() {
    let world = common::tiny_world();
    let mut cfg = world.training_config();
    cfg.augmentation.horizontal_flip = true;
    let named: Vec<_> = world.train_sprites.iter().take(2).map(|s| (s.id.clone(), s.image.clone())).collect();
    let ex = prepare_examples(&world.ldm, &world.dictionary, &named, &cfg).unwrap();
    for (e, (_, img)) in ex.iter().zip(&named) {
        let (z, m) = e.flipped.as_ref().unwrap();
        let mirror = image::imageops::flip_horizontal(img);
        let expect = world.ldm.autoencoder.encode(&mirror).unwrap();
        assert_eq!(z.to_vec2::<f64>().unwrap(), expect.to_vec2::<f64>().unwrap());
        assert_eq!(m, &e.masks.flip_horizontal());
        let (rows, cols) = m.resolution();
        for slot in 0..m.num_slots() {
            for r in 0..rows {
                for c in 0..cols {
                    assert_eq!(m.mask(slot)[r * cols + c], e.masks.mask(slot)[r * cols + cols - 1 - c]);
                }
            }
        }
    }
}

#[test]
fn checkpoints_and_log_are_written() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    cfg.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()) };
    let report = train(&world.ldm, world.space(), &world.examples, &cfg, &opts).unwrap();
    assert_eq!(report.checkpoints.len(), 2);
    assert!(report.checkpoints.iter().all(|p| p.exists()));
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.contains("\"ldm\"") && l.contains("\"attn\"")));
}

#[test]
fn gradient_accumulation_logs_effective_batch() {
    let world = common::tiny_world();
    let mut cfg = tiny_config(&world);
    cfg.batch_size = 4;
    cfg.grad_accum = 2;
    let mut t = Trainer::new(&world.ldm, world.space(), cfg).unwrap();
    let log = t.step(&batch(&world.examples, 4)).unwrap();
    assert_eq!(log.effective_batch, 4);
    assert!(log.total.is_finite());
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    let cfg = TrainingConfig::default();
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let back = TrainingConfig::load(&path).unwrap();
    assert_eq!(back.learning_rate, 1e-4);
    assert_eq!(back.weight_decay, 0.01);
    assert_eq!(back.batch_size, 2);
    assert_eq!(back.epochs, 100);
    assert_eq!(back.image_resolution, 512);
    assert!(back.augmentation.horizontal_flip);
    assert_eq!(back.attn.lambda, 0.01);
    assert_eq!(back.attn.resolution, [16, 16]);
    assert_eq!(back.attn.layers.len(), 5);
    assert_eq!(back.lora.targets, ["to_q", "to_k", "to_v", "to_out"]);
}
