use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::codes::{PartCode, PartComposition};
use super::features::{load_image, FeatureExtractor};
use super::hierarchy::{fit_hierarchy, PartHierarchy};
use super::masks::PartMaskSet;
use crate::error::{input_err, Error, Result};

pub const DICTIONARY_SCHEMA_VERSION: u32 = 1;

/// Persisted result of part discovery: the fitted hierarchy plus the tags of
/// every training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartDictionary {
    pub schema_version: u32,
    pub hierarchy: PartHierarchy,
    pub images: Vec<TaggedImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedImage {
    pub id: String,
    /// Image file, relative to the corpus directory when discovered from disk.
    pub path: String,
    pub composition: PartComposition,
    pub rows: usize,
    pub cols: usize,
    /// Native-resolution slot label per patch, one base-36 digit each.
    pub labels: String,
}

impl TaggedImage {
    pub fn slot_labels(&self) -> Result<Vec<usize>> {
        if self.labels.chars().count() != self.rows * self.cols {
            return Err(input_err!("label map of {} has the wrong length", self.id));
        }
        self.labels
            .chars()
            .map(|ch| {
                ch.to_digit(36)
                    .map(|d| d as usize)
                    .ok_or_else(|| input_err!("bad label {ch:?} in {}", self.id))
            })
            .collect()
    }

    pub fn masks(&self, num_parts: usize) -> Result<PartMaskSet> {
        let labels = self.slot_labels()?;
        if labels.iter().any(|&s| s > num_parts) {
            return Err(input_err!("label map of {} exceeds slot {num_parts}", self.id));
        }
        Ok(PartMaskSet::from_labels(num_parts, self.rows, self.cols, &labels))
    }

    /// Tight bounding box `(row0, col0, row1, col1)` (exclusive end) of a slot's patches.
    pub fn slot_bbox(&self, slot: usize) -> Option<(usize, usize, usize, usize)> {
        let labels = self.slot_labels().ok()?;
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for (i, &s) in labels.iter().enumerate() {
            if s != slot {
                continue;
            }
            let (r, c) = (i / self.cols, i % self.cols);
            bbox = Some(match bbox {
                None => (r, c, r + 1, c + 1),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r + 1), c1.max(c + 1)),
            });
        }
        bbox
    }
}

impl PartDictionary {
    pub fn num_parts(&self) -> usize {
        self.hierarchy.num_parts
    }

    pub fn num_variants(&self) -> usize {
        self.hierarchy.num_variants
    }

    pub fn image(&self, id: &str) -> Option<&TaggedImage> {
        self.images.iter().find(|t| t.id == id)
    }

    /// Training images whose composition carries `code`.
    pub fn exemplars(&self, code: PartCode) -> impl Iterator<Item = &TaggedImage> {
        self.images
            .iter()
            .filter(move |t| t.composition.get(code.slot) == Some(&code))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Version {
            schema_version: u32,
        }
        let v: Version = serde_json::from_str(text)?;
        if v.schema_version != DICTIONARY_SCHEMA_VERSION {
            return Err(Error::Schema {
                what: "part dictionary",
                found: v.schema_version,
                expected: DICTIONARY_SCHEMA_VERSION,
            });
        }
        let dict: PartDictionary = serde_json::from_str(text)?;
        dict.hierarchy.validate()?;
        for t in &dict.images {
            t.composition
                .validate(dict.num_parts(), dict.num_variants())?;
        }
        Ok(dict)
    }
}

/// Fits the hierarchy on a corpus and tags every image.
pub fn discover(
    images: &[(String, RgbImage)],
    extractor: &dyn FeatureExtractor,
    num_parts: usize,
    num_variants: usize,
    seed: u64,
) -> Result<PartDictionary> {
    if images.is_empty() {
        return Err(input_err!("cannot discover parts in an empty corpus"));
    }
    let grids = images
        .iter()
        .map(|(id, img)| extractor.extract(img, id))
        .collect::<Result<Vec<_>>>()?;
    let hierarchy = fit_hierarchy(&grids, num_parts, num_variants, seed, extractor.descriptor())?;
    let mut tagged = Vec::with_capacity(images.len());
    for ((id, _), grid) in images.iter().zip(&grids) {
        let tags = hierarchy.tag_patches(grid)?;
        tagged.push(TaggedImage {
            id: id.clone(),
            path: id.clone(),
            composition: tags.composition(num_parts, num_variants),
            rows: tags.rows,
            cols: tags.cols,
            labels: tags.encode_labels(),
        });
    }
    Ok(PartDictionary {
        schema_version: DICTIONARY_SCHEMA_VERSION,
        hierarchy,
        images: tagged,
    })
}

/// Image files (png/jpg) of a directory in name order, ids = file names.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_corpus(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let id = p
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            load_image(&p).map(|img| (id, img))
        })
        .collect()
}

pub fn discover_dir(
    dir: &Path,
    extractor: &dyn FeatureExtractor,
    num_parts: usize,
    num_variants: usize,
    seed: u64,
) -> Result<PartDictionary> {
    let corpus = load_corpus(dir)?;
    discover(&corpus, extractor, num_parts, num_variants, seed)
}
