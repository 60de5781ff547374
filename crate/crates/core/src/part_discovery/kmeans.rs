//! Seeded Lloyd's k-means with k-means++ seeding over row-major `f32` points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{input_err, Result};

#[derive(Debug, Clone, Copy)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the relative inertia improvement falls below this.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: 300,
            tol: 1e-4,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub dim: usize,
    /// `k * dim` row-major centroids.
    pub centroids: Vec<f32>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }
}

pub fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

pub fn kmeans(points: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(input_err!("point buffer is not a multiple of dim {dim}"));
    }
    let n = points.len() / dim;
    if cfg.k == 0 {
        return Err(input_err!("k must be at least 1"));
    }
    if n < cfg.k {
        return Err(input_err!("{n} points cannot form {} clusters", cfg.k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(points, dim, cfg.k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0f64; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..cfg.max_iter {
        iterations += 1;
        assign(points, dim, &centroids, &mut assignments, &mut dists);
        inertia = dists.iter().sum();

        let mut sums = vec![0f64; cfg.k * dim];
        let mut counts = vec![0usize; cfg.k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim]
                .iter_mut()
                .zip(&points[i * dim..(i + 1) * dim])
            {
                *s += x as f64;
            }
        }
        for c in 0..cfg.k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the worst-served point.
                let (far, _) = dists
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
                dists[far] = 0.0;
            } else {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }

        if prev_inertia.is_finite() {
            let rel = (prev_inertia - inertia) / prev_inertia.max(f64::MIN_POSITIVE);
            if rel.abs() < cfg.tol {
                break;
            }
        }
        if inertia == 0.0 {
            break;
        }
        prev_inertia = inertia;
    }
    assign(points, dim, &centroids, &mut assignments, &mut dists);
    let final_inertia: f64 = dists.iter().sum();

    Ok(KMeansFit {
        dim,
        centroids,
        assignments,
        inertia: final_inertia.min(inertia),
        iterations,
    })
}

fn assign(points: &[f32], dim: usize, centroids: &[f32], out: &mut [usize], dists: &mut [f64]) {
    points
        .par_chunks_exact(dim)
        .zip(out.par_iter_mut().zip(dists.par_iter_mut()))
        .for_each(|(p, (a, d))| {
            let (i, dist) = nearest(p, centroids, dim);
            *a = i;
            *d = dist;
        });
}

fn plus_plus_init(points: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass sits on existing centroids (duplicate points).
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[next * dim..(next + 1) * dim]);
        let c = centroids[start..].to_vec();
        for (p, d) in points.chunks_exact(dim).zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
    }
    centroids
}
