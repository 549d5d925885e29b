//! Click behavior graph: aggregate raw query/keyword click logs, keep
//! clicked pairs shown at least `threshold` times, and rank each node's
//! neighbors by click-through rate.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::aggregate::NEIGHBOR_SLOTS;
use crate::error::{Error, Result};
use crate::model::{NodeInput, Side};
use crate::tokenize::normalize_text;

pub const DEFAULT_THRESHOLD: u64 = 50;
pub const DEFAULT_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClickLogEntry {
    pub query: String,
    pub keyword: String,
    pub impressions: u64,
    pub clicks: u64,
}

/// Summed `(impressions, clicks)` per normalized `(query, keyword)`.
pub type PairCounts = BTreeMap<(String, String), (u64, u64)>;

/// Parses the 4-column TSV click log. Line numbers in errors are 1-based.
pub fn read_click_log<R: BufRead>(reader: R) -> Result<Vec<ClickLogEntry>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        out.push(parse_click_line(&line?, i + 1)?);
    }
    Ok(out)
}

fn parse_click_line(line: &str, lineno: usize) -> Result<ClickLogEntry> {
    let bad = |reason: String| Error::MalformedRow { line: lineno, reason };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 {
        return Err(bad(format!("expected 4 tab-separated columns, found {}", cols.len())));
    }
    let count = |s: &str, what: &str| {
        s.trim()
            .parse::<u64>()
            .map_err(|_| bad(format!("{what} is not a non-negative integer: {s:?}")))
    };
    let entry = ClickLogEntry {
        query: cols[0].to_string(),
        keyword: cols[1].to_string(),
        impressions: count(cols[2], "impressions")?,
        clicks: count(cols[3], "clicks")?,
    };
    if entry.clicks > entry.impressions {
        return Err(bad(format!("clicks {} exceed impressions {}", entry.clicks, entry.impressions)));
    }
    Ok(entry)
}

pub fn write_click_log<W: Write>(mut w: W, entries: &[ClickLogEntry]) -> Result<()> {
    for e in entries {
        writeln!(w, "{}\t{}\t{}\t{}", e.query, e.keyword, e.impressions, e.clicks)?;
    }
    Ok(())
}

/// Sums counts per normalized pair. The n-th entry is reported as line n.
pub fn aggregate_logs<I>(entries: I) -> Result<PairCounts>
where
    I: IntoIterator<Item = ClickLogEntry>,
{
    let mut counts = PairCounts::new();
    for (i, e) in entries.into_iter().enumerate() {
        if e.clicks > e.impressions {
            return Err(Error::MalformedRow {
                line: i + 1,
                reason: format!("clicks {} exceed impressions {}", e.clicks, e.impressions),
            });
        }
        let slot = counts
            .entry((normalize_text(&e.query), normalize_text(&e.keyword)))
            .or_insert((0, 0));
        slot.0 += e.impressions;
        slot.1 += e.clicks;
    }
    Ok(counts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborSource {
    Click,
    Ann,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Neighbor {
    pub text: String,
    pub impressions: u64,
    pub clicks: u64,
    pub source: NeighborSource,
}

impl Neighbor {
    pub fn ctr(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }
}

/// CTR descending, then impressions descending, then text ascending. CTRs
/// are compared by cross-multiplication so equal ratios tie exactly.
fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    let lhs = a.clicks as u128 * b.impressions as u128;
    let rhs = b.clicks as u128 * a.impressions as u128;
    rhs.cmp(&lhs)
        .then(b.impressions.cmp(&a.impressions))
        .then_with(|| a.text.cmp(&b.text))
}

/// Keeps candidates with `impressions ≥ threshold` and at least one click,
/// ranked by CTR, truncated to `k`.
pub fn select_neighbors<'a, I>(candidates: I, threshold: u64, k: usize) -> Vec<Neighbor>
where
    I: IntoIterator<Item = (&'a str, u64, u64)>,
{
    let mut kept: Vec<Neighbor> = candidates
        .into_iter()
        .filter(|&(_, imp, clk)| imp >= threshold.max(1) && clk >= 1)
        .map(|(text, impressions, clicks)| Neighbor {
            text: text.to_string(),
            impressions,
            clicks,
            source: NeighborSource::Click,
        })
        .collect();
    kept.sort_by(rank_order);
    kept.truncate(k);
    kept
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub text: String,
    pub side: Side,
    pub neighbors: Vec<Neighbor>,
}

impl NodeRecord {
    pub fn node_input(&self) -> NodeInput {
        NodeInput::new(
            self.text.clone(),
            self.neighbors.iter().take(NEIGHBOR_SLOTS).map(|n| n.text.clone()).collect(),
        )
    }

    pub fn has_click_neighbors(&self) -> bool {
        self.neighbors.iter().any(|n| n.source == NeighborSource::Click)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BehaviorGraph {
    pub threshold: u64,
    pub queries: BTreeMap<String, Vec<Neighbor>>,
    pub keywords: BTreeMap<String, Vec<Neighbor>>,
}

impl BehaviorGraph {
    /// Every query and keyword seen in `counts` becomes a node, including
    /// those left without eligible neighbors.
    pub fn build(counts: &PairCounts, threshold: u64, k: usize) -> Result<Self> {
        if threshold == 0 {
            return Err(Error::Config("threshold must be at least 1".into()));
        }
        let mut by_query: BTreeMap<&str, Vec<(&str, u64, u64)>> = BTreeMap::new();
        let mut by_keyword: BTreeMap<&str, Vec<(&str, u64, u64)>> = BTreeMap::new();
        for ((q, kw), &(imp, clk)) in counts {
            by_query.entry(q).or_default().push((kw, imp, clk));
            by_keyword.entry(kw).or_default().push((q, imp, clk));
        }
        let select = |m: BTreeMap<&str, Vec<(&str, u64, u64)>>| {
            m.into_iter()
                .map(|(text, cands)| (text.to_string(), select_neighbors(cands, threshold, k)))
                .collect()
        };
        Ok(BehaviorGraph {
            threshold,
            queries: select(by_query),
            keywords: select(by_keyword),
        })
    }

    pub fn from_logs<I>(entries: I, threshold: u64, k: usize) -> Result<Self>
    where
        I: IntoIterator<Item = ClickLogEntry>,
    {
        BehaviorGraph::build(&aggregate_logs(entries)?, threshold, k)
    }

    pub fn side(&self, side: Side) -> &BTreeMap<String, Vec<Neighbor>> {
        match side {
            Side::Query => &self.queries,
            Side::Keyword => &self.keywords,
        }
    }

    pub fn side_mut(&mut self, side: Side) -> &mut BTreeMap<String, Vec<Neighbor>> {
        match side {
            Side::Query => &mut self.queries,
            Side::Keyword => &mut self.keywords,
        }
    }

    pub fn neighbors(&self, side: Side, text: &str) -> Option<&[Neighbor]> {
        self.side(side).get(&normalize_text(text)).map(Vec::as_slice)
    }

    /// Model input for `text`; unknown texts get no neighbors.
    pub fn node_input(&self, side: Side, text: &str) -> NodeInput {
        let key = normalize_text(text);
        let neighbors = self
            .side(side)
            .get(&key)
            .map(|ns| ns.iter().take(NEIGHBOR_SLOTS).map(|n| n.text.clone()).collect())
            .unwrap_or_default();
        NodeInput::new(key, neighbors)
    }

    /// Queries first, then keywords, each in text order.
    pub fn records(&self) -> Vec<NodeRecord> {
        [Side::Query, Side::Keyword]
            .into_iter()
            .flat_map(|side| {
                self.side(side).iter().map(move |(text, ns)| NodeRecord {
                    text: text.clone(),
                    side,
                    neighbors: ns.clone(),
                })
            })
            .collect()
    }

    pub fn from_records(records: impl IntoIterator<Item = NodeRecord>, threshold: u64) -> Result<Self> {
        let mut g = BehaviorGraph {
            threshold,
            ..Default::default()
        };
        for r in records {
            if r.neighbors.len() > NEIGHBOR_SLOTS {
                return Err(Error::Data(format!(
                    "node {:?} lists {} neighbors, at most {NEIGHBOR_SLOTS} allowed",
                    r.text,
                    r.neighbors.len()
                )));
            }
            if g.side_mut(r.side).insert(r.text.clone(), r.neighbors).is_some() {
                return Err(Error::Data(format!("duplicate {} node {:?}", r.side.as_str(), r.text)));
            }
        }
        Ok(g)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R, threshold: u64) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: NodeRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
                line: i + 1,
                reason: e.to_string(),
            })?;
            records.push(r);
        }
        BehaviorGraph::from_records(records, threshold)
    }

    pub fn coverage(&self) -> CoverageReport {
        coverage_report(&self.records())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SideCoverage {
    pub nodes: usize,
    /// Node counts with 0, 1, 2 and 3+ neighbors.
    pub buckets: [usize; 4],
}

impl SideCoverage {
    pub fn share(&self, bucket: usize) -> f64 {
        if self.nodes == 0 {
            0.0
        } else {
            self.buckets[bucket] as f64 / self.nodes as f64
        }
    }

    /// Share of nodes with at least one neighbor.
    pub fn coverage(&self) -> f64 {
        if self.nodes == 0 {
            0.0
        } else {
            1.0 - self.share(0)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CoverageReport {
    pub query: SideCoverage,
    pub keyword: SideCoverage,
}

impl CoverageReport {
    pub fn side(&self, side: Side) -> &SideCoverage {
        match side {
            Side::Query => &self.query,
            Side::Keyword => &self.keyword,
        }
    }
}

pub fn coverage_report(records: &[NodeRecord]) -> CoverageReport {
    let mut report = CoverageReport::default();
    for r in records {
        let s = match r.side {
            Side::Query => &mut report.query,
            Side::Keyword => &mut report.keyword,
        };
        s.nodes += 1;
        s.buckets[r.neighbors.len().min(3)] += 1;
    }
    report
}

impl fmt::Display for CoverageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
            "side", "nodes", "0", "1", "2", "3", "coverage"
        )?;
        for (name, s) in [("query", &self.query), ("keyword", &self.keyword)] {
            writeln!(
                f,
                "{:<8} {:>8} {:>7.2}% {:>7.2}% {:>7.2}% {:>7.2}% {:>8.2}%",
                name,
                s.nodes,
                100.0 * s.share(0),
                100.0 * s.share(1),
                100.0 * s.share(2),
                100.0 * s.share(3),
                100.0 * s.coverage()
            )?;
        }
        Ok(())
    }
}
