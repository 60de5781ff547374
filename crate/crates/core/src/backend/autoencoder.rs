//! Fixed per-cell Walsh transform used as the toy latent autoencoder.
//!
//! Each `p x p` cell of each colour channel is projected onto four
//! alternating patterns (flat, row stripes, column stripes, checker). A
//! latent token packs `pack x pack` neighbouring cells, so it carries
//! `12 · pack²` channels. It has no parameters, so it is frozen by
//! construction.

use candle_core::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn;

pub const PATTERNS: usize = 4;
/// Channels contributed by one cell.
pub const CELL_CHANNELS: usize = 3 * PATTERNS;
/// Per-pattern multipliers that bring latents to roughly unit range; the
/// striped patterns carry little energy in natural-ish images, so they are
/// amplified to keep every channel on a comparable scale for the denoiser.
const GAINS: [f64; PATTERNS] = [3.0, 12.0, 12.0, 12.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchAutoencoder {
    pub image_size: u32,
    /// Cell side in pixels.
    pub patch_size: u32,
    /// Cells per latent token side.
    pub pack: u32,
}

fn pattern(k: usize, dx: u32, dy: u32) -> f64 {
    let sy = if dy % 2 == 0 { 1.0 } else { -1.0 };
    let sx = if dx % 2 == 0 { 1.0 } else { -1.0 };
    match k {
        0 => 1.0,
        1 => sy,
        2 => sx,
        _ => sx * sy,
    }
}

impl PatchAutoencoder {
    pub fn new(image_size: u32, patch_size: u32, pack: u32) -> Result<Self> {
        if patch_size < 2 || patch_size % 2 != 0 || pack == 0 || image_size % (patch_size * pack) != 0 {
            return Err(crate::Error::Config(format!(
                "autoencoder needs an even cell size whose {pack}x{pack} packs tile the image (got {patch_size} / {image_size})"
            )));
        }
        Ok(PatchAutoencoder {
            image_size,
            patch_size,
            pack,
        })
    }

    /// Latent tokens per side.
    pub fn grid(&self) -> usize {
        (self.image_size / (self.patch_size * self.pack)) as usize
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn channels(&self) -> usize {
        CELL_CHANNELS * (self.pack * self.pack) as usize
    }

    /// Channel offset of cell `(cy, cx)` (in cell units) and its token index.
    fn locate(&self, cy: u32, cx: u32) -> (usize, usize) {
        let g = self.grid();
        let token = (cy / self.pack) as usize * g + (cx / self.pack) as usize;
        let sub = ((cy % self.pack) * self.pack + cx % self.pack) as usize;
        (token, sub * CELL_CHANNELS)
    }

    /// `(tokens, channels)` latent of an image; resized first when needed.
    pub fn encode(&self, image: &RgbImage) -> Result<Tensor> {
        let data = self.encode_vec(image);
        Ok(Tensor::from_vec(data, (self.tokens(), self.channels()), &nn::device())?)
    }

    pub fn encode_vec(&self, image: &RgbImage) -> Vec<f64> {
        let resized;
        let img = if image.dimensions() == (self.image_size, self.image_size) {
            image
        } else {
            resized = image::imageops::resize(
                image,
                self.image_size,
                self.image_size,
                image::imageops::FilterType::Triangle,
            );
            &resized
        };
        let p = self.patch_size;
        let cells = self.image_size / p;
        let c = self.channels();
        let norm = 1.0 / f64::from(p * p);
        let mut out = vec![0.0; self.tokens() * c];
        for cy in 0..cells {
            for cx in 0..cells {
                let (token, off) = self.locate(cy, cx);
                let base = token * c + off;
                for dy in 0..p {
                    for dx in 0..p {
                        let px = img.get_pixel(cx * p + dx, cy * p + dy);
                        for ch in 0..3 {
                            let v = f64::from(px[ch]) / 255.0 - 0.5;
                            for k in 0..PATTERNS {
                                out[base + ch * PATTERNS + k] += v * pattern(k, dx, dy) * norm * GAINS[k];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, latent: &Tensor) -> Result<RgbImage> {
        let dims = latent.dims();
        if dims != [self.tokens(), self.channels()] {
            return Err(input_err!(
                "latent shape {dims:?} does not match [{}, {}]",
                self.tokens(),
                self.channels()
            ));
        }
        self.decode_vec(&latent.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn decode_vec(&self, latent: &[f64]) -> Result<RgbImage> {
        let c = self.channels();
        if latent.len() != self.tokens() * c {
            return Err(input_err!("latent has {} values", latent.len()));
        }
        let p = self.patch_size;
        let cells = self.image_size / p;
        let mut img = RgbImage::new(self.image_size, self.image_size);
        for cy in 0..cells {
            for cx in 0..cells {
                let (token, off) = self.locate(cy, cx);
                let z = &latent[token * c + off..][..CELL_CHANNELS];
                for dy in 0..p {
                    for dx in 0..p {
                        let mut px = [0u8; 3];
                        for (ch, out) in px.iter_mut().enumerate() {
                            let v: f64 = (0..PATTERNS)
                                .map(|k| z[ch * PATTERNS + k] / GAINS[k] * pattern(k, dx, dy))
                                .sum::<f64>()
                                + 0.5;
                            *out = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                        img.put_pixel(cx * p + dx, cy * p + dy, Rgb(px));
                    }
                }
            }
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sprites::{generate_corpus, SpriteConfig};

    #[test]
    fn sprites_round_trip_nearly_exactly() {
        let cfg = SpriteConfig {
            pixel_noise: 0.0,
            ..SpriteConfig::default()
        };
        for pack in [1, 2] {
        let ae = PatchAutoencoder::new(64, 4, pack).unwrap();
        for s in generate_corpus(&cfg, 3, 1) {
            let back = ae.decode(&ae.encode(&s.image).unwrap()).unwrap();
            let max = s
                .image
                .pixels()
                .zip(back.pixels())
                .flat_map(|(a, b)| (0..3).map(move |i| (i32::from(a[i]) - i32::from(b[i])).abs()))
                .max()
                .unwrap();
            assert!(max <= 1, "max pixel error {max}");
        }
        }
    }

    #[test]
    fn packing_regroups_cells() {
        let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, 7]));
        let flat = PatchAutoencoder::new(16, 4, 1).unwrap().encode_vec(&img);
        let packed = PatchAutoencoder::new(16, 4, 2).unwrap();
        assert_eq!((packed.grid(), packed.channels()), (2, 48));
        let z = packed.encode_vec(&img);
        // Cell (row 1, col 2) lives in token (0, 1), sub-cell (1, 0).
        let cell = &flat[(4 + 2) * 12..][..12];
        assert_eq!(&z[48 + 2 * 12..][..12], cell);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(PatchAutoencoder::new(64, 3, 1).is_err());
        assert!(PatchAutoencoder::new(66, 4, 1).is_err());
        assert!(PatchAutoencoder::new(24, 4, 4).is_err());
    }
}
