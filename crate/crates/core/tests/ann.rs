#[path = "support/ann_recall.rs"]
mod ann_recall;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use textgnn::ann::{AnnIndex, DEFAULT_EF, DEFAULT_M};
use textgnn::autodiff::Real;

#[test]
fn recall_against_exhaustive_scan() {
    let recall = ann_recall::recall_at_1(1, ann_recall::DIM, DEFAULT_EF);
    assert!(recall >= 0.95, "recall@1 = {recall}");
}

fn random_items(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<Real>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| (format!("t{i}"), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

#[test]
fn beam_as_wide_as_the_index_is_exact() {
    let items = random_items(400, 12, 2);
    let index = AnnIndex::build(items, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let probe: Vec<Real> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(
            index.search(&probe, index.len()).unwrap().id,
            index.search_exhaustive(&probe).unwrap().id
        );
    }
}

#[test]
fn stored_vectors_find_themselves() {
    let items = random_items(1000, 8, 4);
    let index = AnnIndex::build(items.clone(), DEFAULT_M).unwrap();
    for (i, (text, v)) in items.iter().enumerate().step_by(7) {
        let hit = index.search(v, DEFAULT_EF).unwrap();
        assert_eq!((hit.id, &hit.text), (i, text));
        assert!((hit.cosine - 1.0).abs() < 1e-6);
    }
}

#[test]
fn build_is_deterministic() {
    let a = AnnIndex::build(random_items(300, 6, 5), 6).unwrap();
    let b = AnnIndex::build(random_items(300, 6, 5), 6).unwrap();
    for i in 0..a.len() {
        assert_eq!(a.links(i), b.links(i));
    }
}
