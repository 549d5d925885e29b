// Brute-force ranking metrics and random tie-heavy datasets. Shared by the
// core metric tests and the acceptance suite.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use textgnn::metrics::LabeledScore;

/// P(score⁺ > score⁻) + ½ P(tie) by counting every positive/negative pair.
pub fn pairwise_auc(items: &[LabeledScore]) -> f64 {
    let pos: Vec<f64> = items.iter().filter(|x| x.label).map(|x| x.score).collect();
    let neg: Vec<f64> = items.iter().filter(|x| !x.label).map(|x| x.score).collect();
    let (mut wins, mut ties) = (0u64, 0u64);
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1;
            } else if p == n {
                ties += 1;
            }
        }
    }
    (2 * wins + ties) as f64 / (2 * pos.len() * neg.len()) as f64
}

/// Average precision recounted from scratch at every distinct threshold.
pub fn stepwise_ap(items: &[LabeledScore]) -> f64 {
    let total_pos = items.iter().filter(|x| x.label).count() as f64;
    let thresholds: BTreeSet<u64> = items.iter().map(|x| x.score.to_bits()).collect();
    let mut thresholds: Vec<f64> = thresholds.into_iter().map(f64::from_bits).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    let mut ap = 0.0;
    let mut prev_tp = 0usize;
    for t in thresholds {
        let above: Vec<&LabeledScore> = items.iter().filter(|x| x.score >= t).collect();
        let tp = above.iter().filter(|x| x.label).count();
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / total_pos) * (tp as f64 / above.len() as f64);
        }
        prev_tp = tp;
    }
    ap
}

/// Dataset `index` of a fixed family: up to 1,000 items with both classes.
/// Every third dataset draws scores from at most five values.
pub fn random_dataset(index: u64) -> Vec<LabeledScore> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_7472 + index);
    let n = rng.random_range(2..=1000);
    let levels = rng.random_range(1..=5);
    let heavy_ties = index % 3 == 0;
    let bias = rng.random_range(0.05..0.95);
    let mut items: Vec<LabeledScore> = (0..n)
        .map(|_| {
            let label = rng.random_bool(bias);
            let score = if heavy_ties {
                rng.random_range(0..levels) as f64 / 4.0
            } else {
                rng.random::<f64>() + if label { 0.3 } else { 0.0 }
            };
            LabeledScore::new(score, label)
        })
        .collect();
    items[0].label = true;
    items[1].label = false;
    items
}
