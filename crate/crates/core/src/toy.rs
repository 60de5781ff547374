//! End-to-end toy setting: sprite corpus, part discovery, a pretrained toy
//! diffusion base, and tagged train / held-out splits ready for training
//! and evaluation.

use serde::{Deserialize, Serialize};

use crate::backend::{PretrainConfig, ToyLdm, ToyLdmConfig};
use crate::error::Result;
use crate::evaluation::{EvalSettings, Retagger};
use crate::part_discovery::{discover, PartComposition, PartDictionary, PatchStatsExtractor};
use crate::sprites::{generate_corpus, Sprite, SpriteConfig, SPRITE_PARTS, SPRITE_VARIANTS};
use crate::token_codec::PartSpace;
use crate::trainer::{prepare_examples, tag_examples, TrainingConfig, TrainingExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorldConfig {
    pub train_images: usize,
    pub heldout_images: usize,
    pub corpus_seed: u64,
    pub discovery_seed: u64,
    pub ldm: ToyLdmConfig,
    pub pretrain: PretrainConfig,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            train_images: 96,
            heldout_images: 24,
            corpus_seed: 11,
            discovery_seed: 5,
            ldm: ToyLdmConfig::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

pub struct ToyWorld {
    pub sprite_config: SpriteConfig,
    pub train_sprites: Vec<Sprite>,
    pub heldout_sprites: Vec<Sprite>,
    pub dictionary: PartDictionary,
    pub ldm: ToyLdm,
    pub pretrain_losses: Vec<f64>,
    pub retagger: Retagger,
    pub examples: Vec<TrainingExample>,
    pub heldout_examples: Vec<TrainingExample>,
}

impl ToyWorld {
    pub fn build(cfg: &ToyWorldConfig) -> Result<Self> {
        let sprite_config = SpriteConfig {
            image_size: cfg.ldm.image_size,
            patch_size: cfg.ldm.patch_size,
            ..SpriteConfig::default()
        };
        let all = generate_corpus(&sprite_config, cfg.train_images + cfg.heldout_images, cfg.corpus_seed);
        let (train, heldout) = all.split_at(cfg.train_images);
        let extractor = PatchStatsExtractor::new(sprite_config.image_size, sprite_config.patch_size)?;
        let named: Vec<_> = train.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
        let dictionary = discover(&named, &extractor, SPRITE_PARTS, SPRITE_VARIANTS, cfg.discovery_seed)?;
        let mut ldm = ToyLdm::new(cfg.ldm.clone())?;
        let images: Vec<_> = train.iter().map(|s| s.image.clone()).collect();
        let pretrain_losses = ldm.pretrain(&images, &cfg.pretrain)?;
        let tcfg = TrainingConfig::toy(&ldm);
        let examples = prepare_examples(&ldm, &dictionary, &named, &tcfg)?;
        let heldout_named: Vec<_> = heldout.iter().map(|s| (s.id.clone(), s.image.clone())).collect();
        let heldout_examples = tag_examples(&ldm, &dictionary.hierarchy, &heldout_named)?;
        let retagger = Retagger::new(dictionary.hierarchy.clone())?;
        Ok(ToyWorld {
            sprite_config,
            train_sprites: train.to_vec(),
            heldout_sprites: heldout.to_vec(),
            dictionary,
            ldm,
            pretrain_losses,
            retagger,
            examples,
            heldout_examples,
        })
    }

    /// Swaps in another base model with the same configuration (e.g. one
    /// loaded from disk instead of re-running pretraining).
    pub fn replace_base(&mut self, ldm: ToyLdm) -> Result<()> {
        if ldm.config != self.ldm.config {
            return Err(crate::Error::Config("replacement base has a different configuration".into()));
        }
        self.ldm = ldm;
        Ok(())
    }

    pub fn space(&self) -> PartSpace {
        PartSpace::new(SPRITE_PARTS, SPRITE_VARIANTS)
    }

    pub fn heldout_compositions(&self) -> Vec<PartComposition> {
        self.heldout_examples.iter().map(|e| e.composition.clone()).collect()
    }

    /// Training settings for this world.
    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig::toy(&self.ldm)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            n_samples: self.heldout_examples.len(),
            seed: 1,
            steps: 25,
            guidance: 3.0,
        }
    }
}
