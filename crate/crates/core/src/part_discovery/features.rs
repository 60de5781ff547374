use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// Dense per-patch feature map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub source_image_id: String,
    pub patch_size: u32,
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        source_image_id: impl Into<String>,
        patch_size: u32,
        rows: usize,
        cols: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            return Err(input_err!("feature grid must be non-empty ({rows}x{cols}x{dim})"));
        }
        if data.len() != rows * cols * dim {
            return Err(input_err!(
                "feature grid data has {} values, expected {}",
                data.len(),
                rows * cols * dim
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(FeatureGrid {
            source_image_id: source_image_id.into(),
            patch_size,
            rows,
            cols,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn patch_at(&self, row: usize, col: usize) -> &[f32] {
        self.patch(row * self.cols + col)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn is_border(&self, index: usize) -> bool {
        let (r, c) = (index / self.cols, index % self.cols);
        r == 0 || c == 0 || r + 1 == self.rows || c + 1 == self.cols
    }
}

/// Identity of a feature extractor. Persisted next to every fitted hierarchy so
/// generated images can be re-tagged with exactly the same features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub name: String,
    pub input_resolution: u32,
    pub patch_size: u32,
}

impl ExtractorDescriptor {
    pub fn grid_side(&self) -> usize {
        (self.input_resolution / self.patch_size) as usize
    }
}

pub trait FeatureExtractor: Send + Sync {
    fn descriptor(&self) -> ExtractorDescriptor;

    fn extract(&self, image: &RgbImage, image_id: &str) -> Result<FeatureGrid>;
}

pub fn extract_features(
    image: &RgbImage,
    image_id: &str,
    extractor: &dyn FeatureExtractor,
) -> Result<FeatureGrid> {
    extractor.extract(image, image_id)
}

pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory(bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| input_err!("cannot decode image: {e}"))
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| input_err!("{}: {e}", path.display()))
}

/// Hand-crafted dense extractor used with the procedural sprite corpus and in
/// tests. Per patch it measures how much of the luminance lies on three
/// alternating (period-2) patterns relative to the patch mean, which separates
/// textured object regions from flat backgrounds and the parts from each other,
/// and appends the mean colour at a small weight.
///
/// Layout: `[texture energy, |row pattern|, |column pattern|, |checker|, r, g, b]`.
#[derive(Debug, Clone)]
pub struct PatchStatsExtractor {
    pub input_resolution: u32,
    pub patch_size: u32,
    pub energy_weight: f32,
    pub pattern_weight: f32,
    pub color_weight: f32,
}

pub const PATCH_STATS_NAME: &str = "patch-stats-v1";
pub const PATCH_STATS_DIM: usize = 7;

impl PatchStatsExtractor {
    pub fn new(input_resolution: u32, patch_size: u32) -> Result<Self> {
        if patch_size < 2 || input_resolution < patch_size || input_resolution % patch_size != 0 {
            return Err(Error::Config(format!(
                "input resolution {input_resolution} must be a positive multiple of patch size {patch_size} (>= 2)"
            )));
        }
        Ok(PatchStatsExtractor {
            input_resolution,
            patch_size,
            energy_weight: 30.0,
            pattern_weight: 15.0,
            color_weight: 1.0,
        })
    }

    pub fn from_descriptor(d: &ExtractorDescriptor) -> Result<Self> {
        if d.name != PATCH_STATS_NAME {
            return Err(Error::Config(format!("unknown feature extractor {:?}", d.name)));
        }
        Self::new(d.input_resolution, d.patch_size)
    }
}

impl FeatureExtractor for PatchStatsExtractor {
    fn descriptor(&self) -> ExtractorDescriptor {
        ExtractorDescriptor {
            name: PATCH_STATS_NAME.to_string(),
            input_resolution: self.input_resolution,
            patch_size: self.patch_size,
        }
    }

    fn extract(&self, image: &RgbImage, image_id: &str) -> Result<FeatureGrid> {
        if image.width() == 0 || image.height() == 0 {
            return Err(input_err!("image {image_id} is empty"));
        }
        let side = self.input_resolution;
        let resized;
        let img = if image.width() != side || image.height() != side {
            resized = image::imageops::resize(image, side, side, FilterType::Triangle);
            &resized
        } else {
            image
        };
        let ps = self.patch_size as usize;
        let grid = side as usize / ps;
        let mut data = Vec::with_capacity(grid * grid * PATCH_STATS_DIM);
        let n = (ps * ps) as f32;
        for pr in 0..grid {
            for pc in 0..grid {
                let (mut sum, mut row, mut col, mut chk) = (0f32, 0f32, 0f32, 0f32);
                let mut rgb = [0f32; 3];
                for y in 0..ps {
                    for x in 0..ps {
                        let p = img.get_pixel((pc * ps + x) as u32, (pr * ps + y) as u32);
                        let c = [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0];
                        let lum = (c[0] + c[1] + c[2]) / 3.0;
                        let sy = if y % 2 == 0 { 1.0 } else { -1.0 };
                        let sx = if x % 2 == 0 { 1.0 } else { -1.0 };
                        sum += lum;
                        row += lum * sy;
                        col += lum * sx;
                        chk += lum * sx * sy;
                        for k in 0..3 {
                            rgb[k] += c[k];
                        }
                    }
                }
                let mean = sum / n;
                let denom = mean.max(0.05);
                let (row, col, chk) = (
                    (row / n / denom).abs(),
                    (col / n / denom).abs(),
                    (chk / n / denom).abs(),
                );
                let energy = (row * row + col * col + chk * chk).sqrt();
                data.push(self.energy_weight * energy);
                data.push(self.pattern_weight * row);
                data.push(self.pattern_weight * col);
                data.push(self.pattern_weight * chk);
                data.extend(rgb.iter().map(|v| self.color_weight * v / n));
            }
        }
        FeatureGrid::new(image_id, self.patch_size, grid, grid, PATCH_STATS_DIM, data)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
