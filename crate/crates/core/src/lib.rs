//! Part-level concept learning for text-to-image diffusion.
//!
//! Objects are parsed into parts without labels ([`part_discovery`]), every
//! (slot, variant) pair gets a learnable pseudo-token ([`token_codec`]), and
//! the tokens are trained jointly with low-rank adapters under a diffusion
//! loss plus a per-location normalised attention loss ([`attention_loss`],
//! [`trainer`]). Users then compose new objects part by part ([`generation`])
//! and part fidelity is scored with exact-match and centroid-cosine metrics
//! ([`evaluation`]).

pub mod attention_loss;
pub mod backend;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod nn;
pub mod optim;
pub mod part_discovery;
pub mod sprites;
pub mod token_codec;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use part_discovery::{PartCode, PartComposition, PartDictionary, PartHierarchy, PartMaskSet};
