//! Browsable view of a part dictionary: one entry per (slot, variant) code
//! with the training images that carry it, plus exemplar thumbnails.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use partsmith::part_discovery::{load_image, PartCode, PartDictionary};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const CATALOG_SCHEMA_VERSION: u32 = 1;
pub const THUMBNAIL_SIZE: u32 = 128;
pub const DEFAULT_PAGE_SIZE: usize = 64;
pub const MAX_PAGE_SIZE: usize = 1024;
/// Thumbnails listed per entry; the full exemplar list is always returned.
pub const THUMBNAILS_PER_ENTRY: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartCatalogEntry {
    pub code: PartCode,
    pub exemplar_image_ids: Vec<String>,
    pub thumbnails: Vec<String>,
    pub label_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogPage {
    pub schema_version: u32,
    pub slot: Option<usize>,
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub entries: Vec<PartCatalogEntry>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct CatalogQuery {
    pub slot: Option<usize>,
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

pub struct Catalog {
    dict: PartDictionary,
    corpus_dir: Option<PathBuf>,
    entries: Vec<PartCatalogEntry>,
}

/// Thumbnail ids are `thumb-{slot}-{image index}`.
pub fn thumbnail_id(slot: usize, index: usize) -> String {
    format!("thumb-{slot}-{index}")
}

fn parse_thumbnail_id(id: &str) -> Option<(usize, usize)> {
    let rest = id.strip_prefix("thumb-")?;
    let (slot, index) = rest.split_once('-')?;
    Some((slot.parse().ok()?, index.parse().ok()?))
}

impl Catalog {
    /// `labels` maps code strings such as `"1:3"` to human label hints.
    pub fn new(dict: PartDictionary, corpus_dir: Option<PathBuf>, labels: &HashMap<String, String>) -> Self {
        let (m, k) = (dict.num_parts(), dict.num_variants());
        let mut entries = Vec::with_capacity((m + 1) * k);
        for slot in 0..=m {
            for variant in 1..=k {
                let code = PartCode::new(slot, variant);
                let indices: Vec<usize> = dict
                    .images
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.composition.get(slot) == Some(&code))
                    .map(|(i, _)| i)
                    .collect();
                let thumbnails = if corpus_dir.is_some() {
                    indices
                        .iter()
                        .take(THUMBNAILS_PER_ENTRY)
                        .map(|&i| format!("/api/images/{}", thumbnail_id(slot, i)))
                        .collect()
                } else {
                    Vec::new()
                };
                entries.push(PartCatalogEntry {
                    code,
                    exemplar_image_ids: indices.iter().map(|&i| dict.images[i].id.clone()).collect(),
                    thumbnails,
                    label_hint: labels.get(&code.to_string()).cloned(),
                });
            }
        }
        Catalog {
            dict,
            corpus_dir,
            entries,
        }
    }

    pub fn dictionary(&self) -> &PartDictionary {
        &self.dict
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn page(&self, q: &CatalogQuery) -> Result<CatalogPage> {
        if let Some(s) = q.slot {
            if s > self.dict.num_parts() {
                return Err(ServiceError::BadRequest(format!(
                    "slot {s} out of range 0..={}",
                    self.dict.num_parts()
                )));
            }
        }
        let page_size = q.page_size.unwrap_or(DEFAULT_PAGE_SIZE);
        if page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(ServiceError::BadRequest(format!("page_size must be in 1..={MAX_PAGE_SIZE}")));
        }
        let page = q.page.unwrap_or(0);
        let matching: Vec<&PartCatalogEntry> = self
            .entries
            .iter()
            .filter(|e| q.slot.is_none_or(|s| e.code.slot == s))
            .collect();
        Ok(CatalogPage {
            schema_version: CATALOG_SCHEMA_VERSION,
            slot: q.slot,
            page,
            page_size,
            total: matching.len(),
            entries: matching
                .into_iter()
                .skip(page.saturating_mul(page_size))
                .take(page_size)
                .cloned()
                .collect(),
        })
    }

    /// PNG bytes of a thumbnail id, or `None` if the id is not a thumbnail.
    pub fn thumbnail_png(&self, id: &str) -> Option<Result<Vec<u8>>> {
        let (slot, index) = parse_thumbnail_id(id)?;
        Some(self.render_thumbnail(id, slot, index))
    }

    fn render_thumbnail(&self, id: &str, slot: usize, index: usize) -> Result<Vec<u8>> {
        let missing = || ServiceError::NotFound(format!("image {id}"));
        let dir = self.corpus_dir.as_ref().ok_or_else(missing)?;
        let tagged = self.dict.images.get(index).ok_or_else(missing)?;
        let bbox = tagged.slot_bbox(slot).ok_or_else(missing)?;
        let image = load_image(&dir.join(&tagged.path))?;
        let thumb = crop_thumbnail(&image, tagged.rows, tagged.cols, bbox);
        let mut out = Vec::new();
        thumb.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
        Ok(out)
    }
}

/// Crops a patch-unit bounding box `(row0, col0, row1, col1)` and scales it
/// so its longer side is [`THUMBNAIL_SIZE`].
pub fn crop_thumbnail(image: &RgbImage, rows: usize, cols: usize, bbox: (usize, usize, usize, usize)) -> RgbImage {
    let (r0, c0, r1, c1) = bbox;
    let ph = image.height() as f64 / rows as f64;
    let pw = image.width() as f64 / cols as f64;
    let y0 = (r0 as f64 * ph).floor() as u32;
    let x0 = (c0 as f64 * pw).floor() as u32;
    let y1 = ((r1 as f64 * ph).ceil() as u32).min(image.height());
    let x1 = ((c1 as f64 * pw).ceil() as u32).min(image.width());
    let (w, h) = ((x1 - x0).max(1), (y1 - y0).max(1));
    let crop = image::imageops::crop_imm(image, x0, y0, w, h).to_image();
    let scale = THUMBNAIL_SIZE as f64 / w.max(h) as f64;
    let tw = ((w as f64 * scale).round() as u32).clamp(1, THUMBNAIL_SIZE);
    let th = ((h as f64 * scale).round() as u32).clamp(1, THUMBNAIL_SIZE);
    image::imageops::resize(&crop, tw, th, FilterType::Nearest)
}

pub fn load_labels(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thumbnail_ids_round_trip() {
        assert_eq!(parse_thumbnail_id(&thumbnail_id(3, 41)), Some((3, 41)));
        assert_eq!(parse_thumbnail_id("3f2a"), None);
        assert_eq!(parse_thumbnail_id("thumb-x-1"), None);
    }

    #[test]
    fn crop_is_scaled_to_the_longer_side() {
        let mut img = RgbImage::new(64, 64);
        img.put_pixel(8, 4, image::Rgb([255, 0, 0]));
        // 16x16 grid of 4 px patches; box covers rows 1..2, cols 2..6.
        let t = crop_thumbnail(&img, 16, 16, (1, 2, 2, 6));
        assert_eq!((t.width(), t.height()), (128, 32));
        assert_eq!(t.get_pixel(0, 0), &image::Rgb([255, 0, 0]));
    }
}
