//! End-to-end comparison on a synthetic world: an encoder-only baseline
//! against the graph model trained on the ANN-completed click graph.

use std::time::Instant;

use serde::Serialize;

use crate::ann::{complete_graph, trigram_embedding, CompletionOptions};
use crate::error::Result;
use crate::graph::{BehaviorGraph, CoverageReport};
use crate::metrics::{roc_auc, subgroup_auc, FrequencyBin, LabeledScore, SubgroupReport};
use crate::model::{ModelConfig, TextGnn};
use crate::pairs::{examples_from_rows, PairRow};
use crate::train::{predict, train, TrainConfig};
use crate::world::{generate_world, WorldConfig};

#[derive(Clone, Debug, Serialize)]
pub struct ModelResult {
    pub roc_auc: f64,
    pub subgroups: SubgroupReport,
    pub epoch_losses: Vec<f64>,
}

impl ModelResult {
    pub fn bin_auc(&self, bin: FrequencyBin) -> Option<f64> {
        self.subgroups.bin(bin).roc_auc
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub seed: u64,
    pub coverage_click: CoverageReport,
    pub coverage_ann: CoverageReport,
    pub oracle_auc: f64,
    pub baseline: ModelResult,
    pub graph_model: ModelResult,
    pub seconds: f64,
}

/// Scores eval rows and reports AUC overall and by keyword frequency.
pub fn evaluate(model: &TextGnn, rows: &[PairRow], graph: &BehaviorGraph, batch_size: usize) -> Result<(f64, SubgroupReport)> {
    let examples = examples_from_rows(rows, graph)?;
    let scores = predict(model, &examples, batch_size)?;
    let items = labeled(rows, scores.iter().map(|&s| s as f64))?;
    Ok((roc_auc(&items)?, subgroup_auc(&items)))
}

/// Pairs scores with binary labels, grouped by keyword.
pub fn labeled(rows: &[PairRow], scores: impl Iterator<Item = f64>) -> Result<Vec<LabeledScore>> {
    rows.iter()
        .zip(scores)
        .map(|(r, s)| {
            let label = r.binary()?.unwrap_or(false);
            Ok(LabeledScore::grouped(s, label, r.keyword.clone()))
        })
        .collect()
}

/// Where ANN completion gets its text vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyEmbedding {
    /// Center-encoder output of the trained baseline.
    Baseline,
    /// Hashed letter-trigram bag with this many buckets.
    Trigram(usize),
}

pub fn compare(
    world_cfg: &WorldConfig,
    baseline_cfg: &ModelConfig,
    graph_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    proxy: ProxyEmbedding,
) -> Result<Comparison> {
    let start = Instant::now();
    let world = generate_world(world_cfg)?;
    let graph = BehaviorGraph::from_logs(world.click_log.iter().cloned(), world_cfg.impression_threshold, 3)?;

    let oracle = labeled(
        &world.eval,
        world.eval.iter().map(|r| world.teacher.score(&r.query, &r.keyword).unwrap_or(0.5)),
    )?;
    let oracle_auc = roc_auc(&oracle)?;

    let mut baseline_cfg = baseline_cfg.clone();
    baseline_cfg.use_graph = false;
    let empty = BehaviorGraph::default();
    let mut baseline = TextGnn::new(baseline_cfg, None, world_cfg.seed)?;
    let base_examples = examples_from_rows(&world.train, &empty)?;
    let base_report = train(&mut baseline, &base_examples, train_cfg)?;
    let (base_auc, base_groups) = evaluate(&baseline, &world.eval, &empty, 256)?;

    let (completed, _) = complete_graph(
        &graph,
        |side, texts| match proxy {
            ProxyEmbedding::Baseline => baseline.encode_texts(side, texts, 256),
            ProxyEmbedding::Trigram(b) => Ok(texts.iter().map(|t| trigram_embedding(t, b)).collect()),
        },
        CompletionOptions::default(),
    )?;

    let mut model = TextGnn::new(graph_cfg.clone(), None, world_cfg.seed)?;
    let examples = examples_from_rows(&world.train, &completed)?;
    let report = train(&mut model, &examples, train_cfg)?;
    let (auc, groups) = evaluate(&model, &world.eval, &completed, 256)?;

    Ok(Comparison {
        seed: world_cfg.seed,
        coverage_click: graph.coverage(),
        coverage_ann: completed.coverage(),
        oracle_auc,
        baseline: ModelResult {
            roc_auc: base_auc,
            subgroups: base_groups,
            epoch_losses: base_report.epoch_losses,
        },
        graph_model: ModelResult {
            roc_auc: auc,
            subgroups: groups,
            epoch_losses: report.epoch_losses,
        },
        seconds: start.elapsed().as_secs_f64(),
    })
}
