// Small hand-written click logs with known neighbor lists. Shared by the
// core graph tests and the acceptance suite.

use textgnn::ann::{complete_graph, trigram_embedding, CompletionOptions, CompletionRecord};
use textgnn::graph::{BehaviorGraph, ClickLogEntry, DEFAULT_K, DEFAULT_THRESHOLD};
use textgnn::Result;

pub const CAREERS_QUERY: &str = "usps com careers login";

/// `(keyword, impressions, clicks)` clicked from [`CAREERS_QUERY`], listed in
/// the expected CTR order: 18/59 > 92/344 > 384/1721.
pub const CAREERS_CANDIDATES: [(&str, u64, u64); 3] = [
    ("united state postal service jobs", 59, 18),
    ("usps com employment", 344, 92),
    ("postal service hiring", 1721, 384),
];

pub const ORPHAN_QUERY: &str = "video games computers free";
pub const PROXY_QUERY: &str = "no internet games";
pub const PROXY_NEIGHBORS: [&str; 3] = ["free games", "online games", "online computer games"];

fn entry(q: &str, k: &str, impressions: u64, clicks: u64) -> ClickLogEntry {
    ClickLogEntry {
        query: q.into(),
        keyword: k.into(),
        impressions,
        clicks,
    }
}

/// A log where [`ORPHAN_QUERY`] was clicked only on pairs shown too rarely
/// to count, while [`PROXY_QUERY`] has three eligible clicked keywords.
pub fn orphan_log() -> Vec<ClickLogEntry> {
    let mut log = vec![
        entry(PROXY_QUERY, PROXY_NEIGHBORS[0], 400, 120),
        entry(PROXY_QUERY, PROXY_NEIGHBORS[1], 500, 100),
        entry(PROXY_QUERY, PROXY_NEIGHBORS[2], 300, 45),
        entry(ORPHAN_QUERY, "free pc games download", 31, 9),
        entry(ORPHAN_QUERY, PROXY_NEIGHBORS[0], 12, 4),
        entry("cheap flights to paris", "paris airfare deals", 220, 31),
        entry("cheap flights to paris", "discount flights europe", 140, 12),
    ];
    log.extend(CAREERS_CANDIDATES.iter().map(|&(k, i, c)| entry(CAREERS_QUERY, k, i, c)));
    log
}

pub fn orphan_graph() -> Result<BehaviorGraph> {
    BehaviorGraph::from_logs(orphan_log(), DEFAULT_THRESHOLD, DEFAULT_K)
}

/// Completes `graph` with letter-trigram proxy embeddings.
pub fn complete_with_trigrams(graph: &BehaviorGraph) -> Result<(BehaviorGraph, Vec<CompletionRecord>)> {
    complete_graph(
        graph,
        |_, texts| Ok(texts.iter().map(|t| trigram_embedding(t, 4096)).collect()),
        CompletionOptions::default(),
    )
}
