//! Unsupervised part discovery: dense patch features, a three-level k-means
//! hierarchy (foreground/background, parts, variants), and per-image part
//! codes with segmentation masks.

mod codes;
mod dictionary;
mod features;
mod hierarchy;
pub mod kmeans;
mod masks;

pub use codes::{PartCode, PartComposition};
pub use dictionary::{
    discover, discover_dir, list_images, load_corpus, PartDictionary, TaggedImage,
    DICTIONARY_SCHEMA_VERSION,
};
pub use features::{
    cosine, decode_image, extract_features, load_image, ExtractorDescriptor, FeatureExtractor,
    FeatureGrid, PatchStatsExtractor, PATCH_STATS_DIM, PATCH_STATS_NAME,
};
pub use hierarchy::{fit_hierarchy, tag_features, tag_image, PartHierarchy, PatchTags};
pub use masks::PartMaskSet;
