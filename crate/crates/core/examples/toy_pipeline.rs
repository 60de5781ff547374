//! Builds the toy world, trains with and without the attention loss and
//! prints reconstruction scores. Knobs via environment variables.

use std::time::Instant;

use partsmith::evaluation::{eval_reconstruction, on_mask_attention_mass};
use partsmith::generation::Generator;
use partsmith::toy::{ToyWorld, ToyWorldConfig};
use partsmith::trainer::{train, TrainOptions};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> partsmith::Result<()> {
    env_logger::init();
    let mut cfg = ToyWorldConfig::default();
    cfg.pretrain.steps = env("PRETRAIN_STEPS", cfg.pretrain.steps);
    cfg.pretrain.lr = env("PRETRAIN_LR", cfg.pretrain.lr);
    cfg.train_images = env("TRAIN_IMAGES", cfg.train_images);
    cfg.ldm.width = env("WIDTH", cfg.ldm.width);
    cfg.ldm.heads = env("HEADS", cfg.ldm.heads);
    cfg.ldm.blocks = env("BLOCKS", cfg.ldm.blocks);
    cfg.pretrain.batch_size = env("BATCH", cfg.pretrain.batch_size);
    let t0 = Instant::now();
    let cache = std::env::var("BASE_CACHE").ok();
    let cached = cache.as_ref().filter(|p| std::path::Path::new(p).exists());
    if cached.is_some() {
        cfg.pretrain.steps = 20;
    }
    let mut world = ToyWorld::build(&cfg)?;
    if let Some(p) = cached {
        world.replace_base(partsmith::backend::ToyLdm::load(p.as_ref())?)?;
    } else if let Some(p) = &cache {
        world.ldm.save(p.as_ref())?;
    }
    let pl = &world.pretrain_losses;
    println!(
        "world built in {:.1}s; pretrain loss {:.4} -> {:.4}",
        t0.elapsed().as_secs_f64(),
        pl[..20].iter().sum::<f64>() / 20.0,
        pl[pl.len() - 20..].iter().sum::<f64>() / 20.0
    );
    let mut eval = world.eval_settings();
    eval.steps = env("EVAL_STEPS", eval.steps);
    eval.guidance = env("GUIDANCE", eval.guidance);
    let heldout = if std::env::var("EVAL_TRAIN").is_ok() {
        world.examples.iter().take(24).map(|e| e.composition.clone()).collect()
    } else {
        world.heldout_compositions()
    };
    for lambda in std::env::var("LAMBDAS").unwrap_or("0,0.01".into()).split(',') {
        let lambda: f64 = lambda.parse().unwrap();
        let mut tcfg = world.training_config();
        tcfg.attn.lambda = lambda;
        tcfg.learning_rate = env("LR", tcfg.learning_rate);
        tcfg.epochs = env("EPOCHS", tcfg.epochs);
        tcfg.max_steps = std::env::var("MAX_STEPS").ok().and_then(|v| v.parse().ok());
        let t1 = Instant::now();
        let rep = train(&world.ldm, world.space(), &world.examples, &tcfg, &TrainOptions::default())?;
        let n = rep.log.len();
        let tail = &rep.log[n.saturating_sub(20)..];
        println!(
            "λ={lambda}: {} steps in {:.1}s, ldm {:.4} attn {:.4}",
            n,
            t1.elapsed().as_secs_f64(),
            tail.iter().map(|l| l.ldm).sum::<f64>() / tail.len() as f64,
            tail.iter().map(|l| l.attn).sum::<f64>() / tail.len() as f64
        );
        let t2 = Instant::now();
        let mass = on_mask_attention_mass(&world.ldm, &rep.state, &world.heldout_examples, &tcfg.attn.layers, &[250, 500, 750], 3)?;
        let g = Generator::new(world.ldm.clone(), &rep.state)?;
        let r = eval_reconstruction(&heldout, &g, &world.retagger, &eval)?;
        println!(
            "   EMR {:.3} CoSim {:.3} on-mask {:.3} per-slot {:?} ({:.1}s)",
            r.emr,
            r.cosim,
            mass,
            r.per_slot.iter().map(|s| s.emr.unwrap_or(f64::NAN)).collect::<Vec<_>>(),
            t2.elapsed().as_secs_f64()
        );
        if let Ok(dir) = std::env::var("SAVE") {
            std::fs::create_dir_all(&dir).unwrap();
            for (i, s) in r.samples.iter().take(6).enumerate() {
                println!("   {} -> {}", s.requested, s.retagged);
                let req = partsmith::generation::GenerationRequest {
                    steps: eval.steps,
                    guidance: eval.guidance,
                    ..partsmith::generation::GenerationRequest::new(s.requested.clone(), i as u64)
                };
                let img = partsmith::generation::ImageGenerator::generate(&g, &req)?.image;
                img.save(format!("{dir}/l{lambda}_{i}.png")).unwrap();
                world.heldout_sprites[i].image.save(format!("{dir}/ref_{i}.png")).unwrap();
            }
        }
    }
    Ok(())
}
