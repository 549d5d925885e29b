//! Ranking metrics for binary relevance: ROC-AUC with average-rank ties,
//! step-wise average precision, and AUC split by keyword frequency.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub label: bool,
    pub group: Option<String>,
}

impl LabeledScore {
    pub fn new(score: f64, label: bool) -> Self {
        LabeledScore {
            score,
            label,
            group: None,
        }
    }

    pub fn grouped(score: f64, label: bool, group: impl Into<String>) -> Self {
        LabeledScore {
            score,
            label,
            group: Some(group.into()),
        }
    }
}

pub const LABEL_LEVELS: [&str; 5] = ["excellent", "perfect", "good", "fair", "bad"];

/// `bad` is the only negative grade.
pub fn map_labels(raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "excellent" | "perfect" | "good" | "fair" => Ok(true),
        "bad" => Ok(false),
        other => Err(Error::Data(format!("unknown relevance label {other:?}"))),
    }
}

fn check(items: &[LabeledScore]) -> Result<(usize, usize)> {
    if let Some(i) = items.iter().position(|x| !x.score.is_finite()) {
        return Err(Error::InvalidInput(format!("score at index {i} is not finite")));
    }
    let pos = items.iter().filter(|x| x.label).count();
    let neg = items.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

fn sorted_by_score(items: &[LabeledScore]) -> Vec<&LabeledScore> {
    let mut v: Vec<&LabeledScore> = items.iter().collect();
    v.sort_by(|a, b| a.score.total_cmp(&b.score));
    v
}

/// Mann–Whitney U over average ranks.
pub fn roc_auc(items: &[LabeledScore]) -> Result<f64> {
    let (pos, neg) = check(items)?;
    let sorted = sorted_by_score(items);
    // Sum of doubled ranks keeps every intermediate an exact integer.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let tied_pos = sorted[i..j].iter().filter(|x| x.label).count() as u128;
        // ranks i+1..=j average to (i+1+j)/2
        rank2_sum += tied_pos * (i + 1 + j) as u128;
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: precision summed at each distinct threshold, weighted
/// by the recall gained there.
pub fn pr_auc(items: &[LabeledScore]) -> Result<f64> {
    let (pos, _) = check(items)?;
    let mut sorted = sorted_by_score(items);
    sorted.reverse();
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let gained = sorted[i..j].iter().filter(|x| x.label).count();
        tp += gained;
        seen += j - i;
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum FrequencyBin {
    #[serde(rename = "1")]
    Once,
    #[serde(rename = "2")]
    Twice,
    #[serde(rename = ">=3")]
    ThreePlus,
}

impl FrequencyBin {
    pub const ALL: [FrequencyBin; 3] = [FrequencyBin::Once, FrequencyBin::Twice, FrequencyBin::ThreePlus];

    pub fn of(count: usize) -> Self {
        match count {
            0 | 1 => FrequencyBin::Once,
            2 => FrequencyBin::Twice,
            _ => FrequencyBin::ThreePlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FrequencyBin::Once => "1",
            FrequencyBin::Twice => "2",
            FrequencyBin::ThreePlus => ">=3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinReport {
    pub bin: FrequencyBin,
    pub samples: usize,
    pub share: f64,
    /// `None` when the bin is empty or holds a single class.
    pub roc_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubgroupReport {
    pub overall_roc_auc: Option<f64>,
    pub bins: Vec<BinReport>,
}

impl SubgroupReport {
    pub fn bin(&self, bin: FrequencyBin) -> &BinReport {
        &self.bins[bin as usize]
    }
}

/// Bins items by how often their group key occurs in `items`. Items without
/// a key count as occurring once.
pub fn subgroup_auc(items: &[LabeledScore]) -> SubgroupReport {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for g in items.iter().filter_map(|x| x.group.as_deref()) {
        *freq.entry(g).or_default() += 1;
    }
    let mut per_bin: [Vec<LabeledScore>; 3] = Default::default();
    for x in items {
        let count = x.group.as_deref().map_or(1, |g| freq[g]);
        per_bin[FrequencyBin::of(count) as usize].push(x.clone());
    }
    let total = items.len();
    let bins = FrequencyBin::ALL
        .iter()
        .zip(per_bin.iter())
        .map(|(&bin, members)| BinReport {
            bin,
            samples: members.len(),
            share: if total == 0 { 0.0 } else { members.len() as f64 / total as f64 },
            roc_auc: roc_auc(members).ok(),
        })
        .collect();
    SubgroupReport {
        overall_roc_auc: roc_auc(items).ok(),
        bins,
    }
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

impl fmt::Display for SubgroupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>8} {:>10}", "frequency", "samples", "share", "roc_auc")?;
        for b in &self.bins {
            writeln!(
                f,
                "{:<10} {:>8} {:>7.2}% {:>10}",
                b.bin.label(),
                b.samples,
                100.0 * b.share,
                fmt_auc(b.roc_auc)
            )?;
        }
        writeln!(f, "{:<10} {:>8} {:>8} {:>10}", "all", "", "", fmt_auc(self.overall_roc_auc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(pairs: &[(f64, bool)]) -> Vec<LabeledScore> {
        pairs.iter().map(|&(s, l)| LabeledScore::new(s, l)).collect()
    }

    #[test]
    fn label_mapping() {
        assert!(map_labels("fair").unwrap());
        assert!(map_labels("excellent").unwrap());
        assert!(!map_labels("bad").unwrap());
        assert!(matches!(map_labels("meh"), Err(Error::Data(_))));
    }

    #[test]
    fn separated_and_tied() {
        let sep = items(&[(0.1, false), (0.2, false), (0.8, true), (0.9, true)]);
        assert_eq!(roc_auc(&sep).unwrap(), 1.0);
        assert_eq!(pr_auc(&sep).unwrap(), 1.0);
        let tied = items(&[(0.5, false), (0.5, true), (0.5, true), (0.5, false)]);
        assert_eq!(roc_auc(&tied).unwrap(), 0.5);
        assert_eq!(pr_auc(&tied).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        let one = items(&[(0.1, true), (0.2, true)]);
        assert!(matches!(roc_auc(&one), Err(Error::UndefinedMetric(_))));
        assert!(matches!(pr_auc(&one), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn average_precision_by_hand() {
        // ranked: + - + -  → AP = ½·1 + ½·⅔
        let v = items(&[(0.9, true), (0.8, false), (0.7, true), (0.1, false)]);
        assert!((pr_auc(&v).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn unique_keywords_fill_the_first_bin() {
        let v: Vec<LabeledScore> = (0..6)
            .map(|i| LabeledScore::grouped(i as f64, i % 2 == 0, format!("k{i}")))
            .collect();
        let r = subgroup_auc(&v);
        assert_eq!(r.bin(FrequencyBin::Once).share, 1.0);
        assert_eq!(r.bin(FrequencyBin::Twice).roc_auc, None);
        assert_eq!(r.overall_roc_auc, roc_auc(&v).ok());
    }
}
