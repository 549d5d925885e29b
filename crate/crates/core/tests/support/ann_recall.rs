// Recall of graph search against an exhaustive cosine scan on random unit
// vectors. Shared by the core ANN tests and the acceptance suite.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use textgnn::ann::AnnIndex;
use textgnn::autodiff::Real;

pub const ITEMS: usize = 5000;
pub const PROBES: usize = 500;
pub const DIM: usize = 32;

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn exhaustive_best(items: &[Vec<f64>], probe: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in items.iter().enumerate() {
        let c: f64 = v.iter().zip(probe).map(|(a, b)| a * b).sum();
        if c > best.1 {
            best = (i, c);
        }
    }
    best.0
}

/// Share of probes whose graph-search answer is the exhaustive nearest item.
pub fn recall_at_1(seed: u64, dim: usize, ef: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<Vec<f64>> = (0..ITEMS).map(|_| unit(&mut rng, dim)).collect();
    let index = AnnIndex::build(
        items
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("item{i}"), v.iter().map(|&x| x as Real).collect()))
            .collect(),
        textgnn::ann::DEFAULT_M,
    )
    .unwrap();
    // compare against the vectors as stored, so rounding to Real cannot
    // decide near-ties differently on the two sides
    let stored: Vec<Vec<f64>> = (0..index.len())
        .map(|i| index.vector(i).iter().map(|&x| x as f64).collect())
        .collect();
    let mut hits = 0;
    for _ in 0..PROBES {
        let probe = unit(&mut rng, dim);
        let p: Vec<Real> = probe.iter().map(|&x| x as Real).collect();
        let p64: Vec<f64> = p.iter().map(|&x| x as f64).collect();
        if index.search(&p, ef).unwrap().id == exhaustive_best(&stored, &p64) {
            hits += 1;
        }
    }
    hits as f64 / PROBES as f64
}
