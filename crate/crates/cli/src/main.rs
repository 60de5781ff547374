use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use partsmith::backend::{PretrainConfig, ToyLdm, ToyLdmConfig};
use partsmith::evaluation::{eval_composition, eval_reconstruction, lambda_sweep, EvalSettings, Retagger, SweepSetup, DEFAULT_SWEEP};
use partsmith::generation::{GenerationRequest, Generator, ImageGenerator};
use partsmith::part_discovery::{discover, load_corpus, PartComposition, PartDictionary, PatchStatsExtractor};
use partsmith::sprites::{generate_corpus, SpriteConfig};
use partsmith::token_codec::PartSpace;
use partsmith::trainer::{prepare_examples, tag_examples, train, TrainOptions, TrainState, TrainingConfig};
use partsmith_service::{Catalog, ServiceConfig};

/// Final checkpoint file written by `train` inside its output directory.
const FINAL_CHECKPOINT: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "partsmith", version, about = "Discover object parts and compose new images from them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural sprite corpus to PNG files.
    Sprites {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 96)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Fit the part hierarchy on a directory of images and tag every image.
    Discover {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 3)]
        parts: usize,
        #[arg(long, default_value_t = 4)]
        variants: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        patch_size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the toy diffusion base on a directory of images.
    Pretrain {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Learn part tokens (and adapters) for a tagged corpus.
    Train {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// TOML training config; defaults to the toy settings for the base.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (checkpoints, loss log, final checkpoint.json).
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many optimiser steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Generate one image from a part composition.
    Generate {
        #[arg(long)]
        base: PathBuf,
        /// Checkpoint file or training output directory.
        #[arg(long)]
        ckpt: PathBuf,
        /// Composition such as "0:1,1:3,2:-,3:2" (`-` marks an absent slot).
        #[arg(long)]
        compose: String,
        #[arg(long)]
        style: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = partsmith::generation::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = partsmith::generation::DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint by regenerating and re-tagging compositions.
    Evaluate {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dict: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Recon)]
        protocol: ProtocolArg,
        /// Source images mixed per sample (composition protocol).
        #[arg(long, default_value_t = 2)]
        mix: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = partsmith::generation::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = partsmith::generation::DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train one model per λ and tabulate reconstruction scores.
    Sweep {
        #[arg(long)]
        dict: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Held-out images scored by reconstruction; defaults to the training set.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        guidance: f64,
        /// Markdown table output; the JSON table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the part catalog and generation jobs over HTTP.
    Serve {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Corpus directory used to render exemplar thumbnails.
        #[arg(long)]
        images: Option<PathBuf>,
        /// JSON object mapping codes ("1:3") to label hints.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "service-state")]
        state: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Print a training config as TOML.
    Config {
        /// Print the full-scale defaults instead of the toy settings.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Recon,
    Comp,
}

fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let file = if path.is_dir() { path.join(FINAL_CHECKPOINT) } else { path.to_path_buf() };
    TrainState::load(&file).with_context(|| format!("loading checkpoint {}", file.display()))
}

fn load_base(path: &Path) -> Result<ToyLdm> {
    ToyLdm::load(path).with_context(|| format!("loading base model {}", path.display()))
}

fn load_dict(path: &Path) -> Result<PartDictionary> {
    PartDictionary::load(path).with_context(|| format!("loading dictionary {}", path.display()))
}

fn training_config(path: Option<&Path>, ldm: &ToyLdm) -> Result<TrainingConfig> {
    Ok(match path {
        Some(p) => TrainingConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainingConfig::toy(ldm),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sprites { out, count, seed } => {
            std::fs::create_dir_all(&out)?;
            let sprites = generate_corpus(&SpriteConfig::default(), count, seed);
            for s in &sprites {
                s.image.save(out.join(&s.id))?;
            }
            let truth: HashMap<&str, String> = sprites.iter().map(|s| (s.id.as_str(), s.ground_truth().to_string())).collect();
            std::fs::write(out.join("ground_truth.json"), serde_json::to_string_pretty(&truth)?)?;
            println!("wrote {} sprites to {}", sprites.len(), out.display());
        }
        Command::Discover {
            images,
            parts,
            variants,
            seed,
            patch_size,
            out,
        } => {
            let corpus = load_corpus(&images)?;
            let Some((_, first)) = corpus.first() else {
                bail!("no images in {}", images.display());
            };
            let extractor = PatchStatsExtractor::new(first.width(), patch_size)?;
            let dict = discover(&corpus, &extractor, parts, variants, seed)?;
            dict.save(&out)?;
            println!("tagged {} images into {parts} parts x {variants} variants -> {}", dict.images.len(), out.display());
        }
        Command::Pretrain { images, out, steps, seed } => {
            let corpus = load_corpus(&images)?;
            let imgs: Vec<_> = corpus.into_iter().map(|(_, i)| i).collect();
            let mut ldm = ToyLdm::new(ToyLdmConfig {
                seed,
                ..ToyLdmConfig::default()
            })?;
            let mut cfg = PretrainConfig {
                seed,
                ..PretrainConfig::default()
            };
            cfg.steps = steps.unwrap_or(cfg.steps);
            let losses = ldm.pretrain(&imgs, &cfg)?;
            ldm.save(&out)?;
            let tail = &losses[losses.len().saturating_sub(50)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!("pretrained {} steps (final loss {mean:.4}) -> {} [{}]", losses.len(), out.display(), ldm.id()?);
        }
        Command::Train {
            dict,
            images,
            base,
            config,
            out,
            max_steps,
        } => {
            let ldm = load_base(&base)?;
            let dict = load_dict(&dict)?;
            let mut cfg = training_config(config.as_deref(), &ldm)?;
            cfg.max_steps = max_steps.or(cfg.max_steps);
            let corpus = load_corpus(&images)?;
            let examples = prepare_examples(&ldm, &dict, &corpus, &cfg)?;
            let space = PartSpace::new(dict.num_parts(), dict.num_variants());
            let report = train(&ldm, space, &examples, &cfg, &TrainOptions { out_dir: Some(out.clone()) })?;
            let path = out.join(FINAL_CHECKPOINT);
            report.state.save(&path)?;
            if let Some(msg) = report.aborted {
                bail!("training aborted at step {}: {msg} (last good state in {})", report.state.step, path.display());
            }
            let last = report.log.last();
            println!(
                "trained {} steps; ldm {:.4}, attn {:.4} -> {} [{}]",
                report.state.step,
                last.map_or(f64::NAN, |l| l.ldm),
                last.map_or(f64::NAN, |l| l.attn),
                path.display(),
                report.state.checkpoint_id()?
            );
        }
        Command::Generate {
            base,
            ckpt,
            compose,
            style,
            seed,
            steps,
            guidance,
            out,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let generator = Generator::new(load_base(&base)?, &state)?;
            let composition: PartComposition = compose.parse()?;
            let request = GenerationRequest {
                composition,
                style_suffix: style,
                seed,
                steps,
                guidance,
            };
            let g = generator.generate(&request)?;
            g.image.save(&out)?;
            let meta = out.with_extension("json");
            std::fs::write(&meta, serde_json::to_string_pretty(&g.provenance)?)?;
            println!("{} -> {} ({})", g.provenance.prompt_tokens.join(" "), out.display(), meta.display());
        }
        Command::Evaluate {
            base,
            ckpt,
            dict,
            protocol,
            mix,
            samples,
            seed,
            steps,
            guidance,
            report,
        } => {
            let state = load_checkpoint(&ckpt)?;
            let generator = Generator::new(load_base(&base)?, &state)?;
            let dict = load_dict(&dict)?;
            let corpus: Vec<PartComposition> = dict.images.iter().map(|t| t.composition.clone()).collect();
            let retagger = Retagger::new(dict.hierarchy)?;
            let settings = EvalSettings {
                n_samples: samples,
                seed,
                steps,
                guidance,
            };
            let r = match protocol {
                ProtocolArg::Recon => eval_reconstruction(&corpus, &generator, &retagger, &settings)?,
                ProtocolArg::Comp => eval_composition(&corpus, &generator, &retagger, &settings, mix)?,
            };
            r.save(&report)?;
            println!("EMR {:.3}  CoSim {:.3}  ({} samples) -> {}", r.emr, r.cosim, r.n_samples, report.display());
        }
        Command::Sweep {
            dict,
            images,
            heldout,
            base,
            config,
            lambdas,
            seed,
            steps,
            guidance,
            out,
        } => {
            let ldm = load_base(&base)?;
            let dict = load_dict(&dict)?;
            let cfg = training_config(config.as_deref(), &ldm)?;
            let corpus = load_corpus(&images)?;
            let examples = prepare_examples(&ldm, &dict, &corpus, &cfg)?;
            let eval_examples = match &heldout {
                Some(dir) => tag_examples(&ldm, &dict.hierarchy, &load_corpus(dir)?)?,
                None => tag_examples(&ldm, &dict.hierarchy, &corpus)?,
            };
            let eval_corpus: Vec<PartComposition> = eval_examples.iter().map(|e| e.composition.clone()).collect();
            let retagger = Retagger::new(dict.hierarchy.clone())?;
            let setup = SweepSetup {
                ldm: &ldm,
                space: PartSpace::new(dict.num_parts(), dict.num_variants()),
                examples: &examples,
                config: cfg,
                eval_corpus: &eval_corpus,
                eval_examples: &eval_examples,
                retagger: &retagger,
                eval: EvalSettings {
                    n_samples: eval_corpus.len(),
                    seed,
                    steps,
                    guidance,
                },
            };
            let table = lambda_sweep(&setup, lambdas.as_deref().unwrap_or(&DEFAULT_SWEEP))?;
            let md = table.to_markdown();
            std::fs::write(&out, &md)?;
            std::fs::write(out.with_extension("json"), serde_json::to_string_pretty(&table)?)?;
            print!("{md}");
        }
        Command::Serve {
            base,
            ckpt,
            dict,
            images,
            labels,
            state,
            addr,
            workers,
        } => {
            let ckpt_state = load_checkpoint(&ckpt)?;
            let generator = Generator::new(load_base(&base)?, &ckpt_state)?;
            let space = ckpt_state.space();
            let labels = match &labels {
                Some(p) => partsmith_service::catalog::load_labels(p)?,
                None => HashMap::new(),
            };
            let catalog = match &dict {
                Some(p) => Some(Catalog::new(load_dict(p)?, images, &labels)),
                None => None,
            };
            let checkpoint_id = generator.checkpoint_id().to_string();
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let cfg = ServiceConfig {
                    state_dir: state,
                    workers,
                    space,
                    checkpoint_id: Some(checkpoint_id),
                };
                let app = partsmith_service::start(cfg, catalog, Arc::new(generator))?;
                partsmith_service::serve(app, addr).await?;
                anyhow::Ok(())
            })?;
        }
        Command::Config { full } => {
            let cfg = if full {
                TrainingConfig::default()
            } else {
                TrainingConfig::toy(&ToyLdm::new(ToyLdmConfig::default())?)
            };
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
