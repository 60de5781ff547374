mod common;

use std::collections::HashMap;

use image::RgbImage;
use partsmith::evaluation::{cosim, emr, eval_composition, eval_reconstruction, EvalSettings, Retagger};
use partsmith::generation::{GeneratedImage, GenerationRequest, ImageGenerator, Provenance};
use partsmith::part_discovery::{PartComposition, PartHierarchy};

/// Returns a real corpus image carrying the requested composition.
struct Lookup(HashMap<String, RgbImage>);

impl ImageGenerator for Lookup {
    fn generate(&self, r: &GenerationRequest) -> partsmith::Result<GeneratedImage> {
        let image = self.0[&r.composition.to_string()].clone();
        Ok(GeneratedImage {
            image,
            provenance: Provenance {
                composition: r.composition.clone(),
                style_suffix: None,
                seed: r.seed,
                steps: r.steps,
                guidance: r.guidance,
                checkpoint_id: "lookup".into(),
                prompt_tokens: Vec::new(),
            },
        })
    }
}

fn lookup_setup() -> (Vec<PartComposition>, Lookup, Retagger) {
    let world = common::tiny_world();
    let mut map = HashMap::new();
    let mut corpus = Vec::new();
    for (t, s) in world.dictionary.images.iter().zip(&world.train_sprites) {
        map.entry(t.composition.to_string()).or_insert_with(|| s.image.clone());
        corpus.push(t.composition.clone());
    }
    let retagger = Retagger::new(world.dictionary.hierarchy.clone()).unwrap();
    (corpus, Lookup(map), retagger)
}

fn settings(n: usize) -> EvalSettings {
    EvalSettings { n_samples: n, seed: 4, steps: 1, guidance: 1.0 }
}

#[test]
fn identity_generator_scores_one() {
    let (corpus, lookup, retagger) = lookup_setup();
    let r = eval_reconstruction(&corpus, &lookup, &retagger, &settings(10)).unwrap();
    assert_eq!(r.n_samples, 10);
    assert!((r.emr - 1.0).abs() < 1e-12);
    assert!((r.cosim - 1.0).abs() < 1e-6);
    assert!(r.per_slot.iter().all(|s| s.emr.is_none_or(|e| e == 1.0)));
}

#[test]
fn one_part_composition_equals_reconstruction() {
    let (corpus, lookup, retagger) = lookup_setup();
    let a = eval_reconstruction(&corpus, &lookup, &retagger, &settings(8)).unwrap();
    let b = eval_composition(&corpus, &lookup, &retagger, &settings(8), 1).unwrap();
    assert_eq!(a.emr, b.emr);
    assert_eq!(a.cosim, b.cosim);
    assert_eq!(a.per_slot, b.per_slot);
    assert_eq!(a.samples, b.samples);
}

#[test]
fn report_serialises_with_schema_version() {
    let (corpus, lookup, retagger) = lookup_setup();
    let r = eval_reconstruction(&corpus, &lookup, &retagger, &settings(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    r.save(&p).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["protocol"], "reconstruction");
}

fn hierarchy_with(centroids: Vec<Vec<Vec<f32>>>) -> PartHierarchy {
    let world = common::tiny_world();
    let mut h = world.dictionary.hierarchy.clone();
    h.num_parts = centroids.len() - 1;
    h.num_variants = centroids[0].len();
    h.dim = centroids[0][0].len();
    h.sub_centroids = centroids;
    h
}

#[test]
fn one_orthogonal_slot_in_five_gives_point_eight() {
    let e = |i: usize| {
        let mut v = vec![0.0f32; 3];
        v[i] = 1.0;
        v
    };
    let h = hierarchy_with(vec![vec![e(0), e(1)]; 5]);
    let reference: PartComposition = "0:1,1:1,2:1,3:1,4:1".parse().unwrap();
    let pred: PartComposition = "0:1,1:1,2:2,3:1,4:1".parse().unwrap();
    assert!((cosim(&pred, &reference, &h).unwrap() - 0.8).abs() < 1e-12);
    assert!((emr(&pred, &reference).unwrap() - 0.8).abs() < 1e-12);
}

#[test]
fn cosim_ignores_a_common_rescale() {
    let h = hierarchy_with(vec![vec![vec![1.0, 2.0], vec![-0.5, 3.0]]; 3]);
    let mut scaled = h.clone();
    for g in scaled.sub_centroids.iter_mut() {
        for c in g.iter_mut() {
            for x in c.iter_mut() {
                *x *= 7.5;
            }
        }
    }
    let a: PartComposition = "0:1,1:2,2:1".parse().unwrap();
    let b: PartComposition = "0:2,1:2,2:1".parse().unwrap();
    assert!((cosim(&a, &b, &h).unwrap() - cosim(&a, &b, &scaled).unwrap()).abs() < 1e-6);
}

#[test]
fn emr_is_invariant_to_consistent_relabelling() {
    let perm = [0usize, 3, 1, 4, 2];
    let relabel = |c: &PartComposition| {
        let v: Vec<Option<usize>> = c.variants().iter().map(|v| v.map(|x| perm[x])).collect();
        PartComposition::from_variants(&v).unwrap()
    };
    let a: PartComposition = "0:1,1:2,2:-,3:4".parse().unwrap();
    let b: PartComposition = "0:1,1:3,2:2,3:4".parse().unwrap();
    assert_eq!(emr(&a, &b).unwrap(), emr(&relabel(&a), &relabel(&b)).unwrap());
}

#[test]
fn retagger_rejects_a_mismatched_extractor() {
    let world = common::tiny_world();
    let other = partsmith::part_discovery::PatchStatsExtractor::new(64, 4).unwrap();
    assert!(Retagger::with_extractor(world.dictionary.hierarchy.clone(), Box::new(other)).is_err());
}
