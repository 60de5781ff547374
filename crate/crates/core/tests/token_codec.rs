mod common;

use candle_core::Tensor;
use partsmith::nn;
use partsmith::part_discovery::PartComposition;
use partsmith::token_codec::{embed_tokens, ProjectorMode, TokenTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_table, random_table_composition as random_composition};

/// Scalar probe `Σ w ⊙ embed(c)` and its gradient checked against central
/// differences on every table and projector entry.
#[test]
fn embedding_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 20 {
        let mode = if checked % 2 == 0 { ProjectorMode::Bottleneck } else { ProjectorMode::Identity };
        let table = random_table(&mut rng, mode);
        let comp = random_composition(&mut rng);
        let present = comp.present().count();
        if present == 0 {
            continue;
        }
        let w: Vec<f64> = (0..present * table.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(w.clone(), (present, table.dim()), &nn::device()).unwrap();
        let probe = |t: &TokenTable| -> f64 {
            embed_tokens(&comp, t).unwrap().iter().flatten().zip(&w).map(|(a, b)| a * b).sum()
        };
        let out = (table.embed(&comp).unwrap() * &wt).unwrap().sum_all().unwrap();
        let grads = out.backward().unwrap();
        for (name, var) in table.vars() {
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                None => vec![0.0; var.as_tensor().elem_count()],
            };
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().shape().clone();
            let h = 1e-6;
            for i in 0..base.len() {
                let eval = |d: f64| {
                    let mut v = base.clone();
                    v[i] += d;
                    var.set(&Tensor::from_vec(v, shape.clone(), &nn::device()).unwrap()).unwrap();
                    let r = probe(&table);
                    var.set(&Tensor::from_vec(base.clone(), shape.clone(), &nn::device()).unwrap()).unwrap();
                    r
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!(common::close_rel(analytic[i], fd, 1e-4), "{name}[{i}]: {} vs {fd}", analytic[i]);
            }
        }
        checked += 1;
    }
}

#[test]
fn identity_mode_is_bit_identical_to_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let table = random_table(&mut rng, ProjectorMode::Identity);
        let comp = random_composition(&mut rng);
        let out = embed_tokens(&comp, &table).unwrap();
        let raw = table.embeddings().as_tensor().to_vec2::<f64>().unwrap();
        let expect: Vec<Vec<f64>> = comp.present().map(|c| raw[c.row(3).unwrap()].clone()).collect();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&expect));
    }
}

#[test]
fn save_and_load_preserve_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = random_table(&mut rng, ProjectorMode::Bottleneck);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tokens.json");
    table.save(&p).unwrap();
    let back = TokenTable::load(&p).unwrap();
    let c: PartComposition = "0:1,1:3,2:2".parse().unwrap();
    assert_eq!(embed_tokens(&c, &table).unwrap(), embed_tokens(&c, &back).unwrap());
}
