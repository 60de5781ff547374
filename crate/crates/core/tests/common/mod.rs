#![allow(dead_code)]

use partsmith::attention_loss::AttentionStack;
use partsmith::part_discovery::{PartComposition, PartDictionary, PartMaskSet};
use partsmith::sprites::{Sprite, SPRITE_PARTS};
use partsmith::token_codec::{PartSpace, ProjectorMode, TokenTable};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Fraction of ground-truth foreground patches whose discovered part cluster
/// agrees with that cluster's majority ground-truth part.
pub fn part_purity(dict: &PartDictionary, sprites: &[Sprite]) -> f64 {
    let m = dict.num_parts();
    let mut counts = vec![vec![0usize; SPRITE_PARTS + 1]; m + 1];
    for (tagged, sprite) in dict.images.iter().zip(sprites) {
        assert_eq!(tagged.id, sprite.id);
        for (&found, &truth) in tagged.slot_labels().unwrap().iter().zip(&sprite.labels) {
            if truth > 0 {
                counts[found][truth] += 1;
            }
        }
    }
    let total: usize = counts.iter().flatten().sum();
    // Foreground patches tagged as background count against purity.
    let majority: usize = counts.iter().skip(1).map(|c| *c.iter().max().unwrap()).sum();
    majority as f64 / total as f64
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x == 1 && y == 1).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x == 1 || y == 1).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU per ground-truth part under the best slot matching, computed over
/// the whole corpus.
pub fn best_match_iou(dict: &PartDictionary, sprites: &[Sprite]) -> Vec<f64> {
    let m = dict.num_parts();
    assert_eq!(m, SPRITE_PARTS);
    let found: Vec<PartMaskSet> = dict.images.iter().map(|t| t.masks(m).unwrap()).collect();
    let truth: Vec<PartMaskSet> = sprites
        .iter()
        .map(|s| PartMaskSet::from_labels(SPRITE_PARTS, 16, 16, &s.labels))
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for perm in permutations(m) {
        let per_part: Vec<f64> = (0..m)
            .map(|gt| {
                let slot = perm[gt] + 1;
                found
                    .iter()
                    .zip(&truth)
                    .map(|(f, t)| iou(f.mask(slot), t.mask(gt + 1)))
                    .sum::<f64>()
                    / sprites.len() as f64
            })
            .collect();
        let mean = per_part.iter().sum::<f64>() / m as f64;
        if best.as_ref().map_or(true, |(b, _)| mean > *b) {
            best = Some((mean, per_part));
        }
    }
    best.unwrap().1
}

use partsmith::backend::{PretrainConfig, ToyLdmConfig};
use partsmith::toy::{ToyWorld, ToyWorldConfig};

/// A small world (32 px sprites, 2 px patches, narrow denoiser, no
/// pretraining) for fast pipeline tests.
pub fn tiny_world_config() -> ToyWorldConfig {
    ToyWorldConfig {
        train_images: 16,
        heldout_images: 4,
        corpus_seed: 3,
        discovery_seed: 5,
        ldm: ToyLdmConfig {
            image_size: 32,
            patch_size: 2,
            width: 8,
            blocks: 1,
            text_dim: 8,
            ..ToyLdmConfig::default()
        },
        pretrain: PretrainConfig {
            steps: 0,
            ..PretrainConfig::default()
        },
    }
}

pub fn tiny_world() -> ToyWorld {
    ToyWorld::build(&tiny_world_config()).expect("tiny world")
}

/// Bit patterns of every value in a tensor map.
pub fn bits(map: &partsmith::nn::TensorMap) -> Vec<(String, Vec<u64>)> {
    map.iter()
        .map(|(k, t)| {
            let v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            (k.clone(), v.into_iter().map(f64::to_bits).collect())
        })
        .collect()
}

/// Relative comparison used by the finite-difference checks.
pub fn close_rel(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + 1e-9
}

/// Random attention stack with values in (0.05, 0.95) and a one-hot mask
/// per cell.
pub fn random_attention_case(rng: &mut impl Rng, layers: usize, parts: usize, cells: usize) -> (AttentionStack, PartMaskSet) {
    let values: Vec<f64> = (0..layers * parts * cells).map(|_| rng.gen_range(0.05..0.95)).collect();
    let ids = (0..layers).map(|l| format!("l{l}")).collect();
    let stack = AttentionStack::new(ids, (0..parts).collect(), cells, values).unwrap();
    let mut masks = vec![0u8; parts * cells];
    for c in 0..cells {
        masks[rng.gen_range(0..parts) * cells + c] = 1;
    }
    let m = PartMaskSet::new(parts, 1, cells, masks, vec![true; parts]).unwrap();
    (stack, m)
}

/// Direct evaluation: layer mean, divide by the column sum, clamp, BCE.
pub fn oracle_loss(stack: &AttentionStack, masks: &PartMaskSet) -> f64 {
    let (p, n, l) = (stack.slots().len(), stack.cells(), stack.num_layers());
    let mut total = 0.0;
    for x in 0..n {
        let mean: Vec<f64> = (0..p)
            .map(|j| (0..l).map(|k| stack.get(k, j, x)).sum::<f64>() / l as f64)
            .collect();
        let denom: f64 = mean.iter().sum::<f64>().max(1e-8);
        for (j, &slot) in stack.slots().iter().enumerate() {
            let a = (mean[j] / denom).clamp(1e-6, 1.0 - 1e-6);
            let s = f64::from(masks.mask(slot)[x]);
            total += -(s * a.ln() + (1.0 - s) * (1.0 - a).ln());
        }
    }
    total / (p * n) as f64
}

pub fn random_table(rng: &mut ChaCha8Rng, mode: ProjectorMode) -> TokenTable {
    let dim = rng.gen_range(2..6);
    let init: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TokenTable::new(PartSpace::new(2, 3), &init, rng.gen_range(2..6), mode, 0.5, rng.gen()).unwrap()
}

/// Composition over the 2-part, 3-variant space of [`random_table`].
pub fn random_table_composition(rng: &mut ChaCha8Rng) -> PartComposition {
    let v: Vec<Option<usize>> = (0..3)
        .map(|_| if rng.gen_bool(0.8) { Some(rng.gen_range(1..=3)) } else { None })
        .collect();
    PartComposition::from_variants(&v).unwrap()
}
