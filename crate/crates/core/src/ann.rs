//! Approximate nearest-neighbor search over unit vectors with a single-layer
//! navigable small-world graph, and neighbor completion for graph nodes that
//! have no click neighbors of their own.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};

use log::warn;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::graph::{BehaviorGraph, Neighbor, NeighborSource};
use crate::model::Side;
use crate::tokenize::trigram_hash;

pub const DEFAULT_M: usize = 16;
pub const DEFAULT_EF: usize = 64;
const EF_CONSTRUCTION: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Scored {
    sim: f64,
    id: usize,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then(other.id.cmp(&self.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug)]
pub struct AnnIndex {
    texts: Vec<String>,
    vectors: Vec<Vec<Real>>,
    adjacency: Vec<Vec<usize>>,
    entry: usize,
    m: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: usize,
    pub text: String,
    pub cosine: f64,
}

fn unit(v: &[Real]) -> Result<Vec<Real>> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(Error::InvalidInput("cannot index a zero or non-finite vector".into()));
    }
    Ok(v.iter().map(|&x| (x as f64 / norm) as Real).collect())
}

fn cosine(a: &[Real], b: &[Real]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

impl AnnIndex {
    /// Inserts items in order, linking each to the `m` nearest nodes found by
    /// a beam search over the graph built so far. Neighbor lists that grow
    /// past `2m` are pruned to their closest members, then every edge is made
    /// bidirectional.
    pub fn build(items: Vec<(String, Vec<Real>)>, m: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidInput("cannot build an index over zero items".into()));
        }
        if m == 0 {
            return Err(Error::Config("m must be positive".into()));
        }
        let dim = items[0].1.len();
        let mut index = AnnIndex {
            texts: Vec::with_capacity(items.len()),
            vectors: Vec::with_capacity(items.len()),
            adjacency: Vec::with_capacity(items.len()),
            entry: 0,
            m,
        };
        for (text, v) in items {
            if v.len() != dim {
                return Err(Error::shape("ann build", &[dim], &[v.len()]));
            }
            let v = unit(&v)?;
            let id = index.vectors.len();
            let links: Vec<usize> = if id == 0 {
                Vec::new()
            } else {
                index.beam(&v, EF_CONSTRUCTION.max(m)).into_iter().take(m).map(|s| s.id).collect()
            };
            index.texts.push(text);
            index.vectors.push(v);
            index.adjacency.push(links.clone());
            for &j in &links {
                index.adjacency[j].push(id);
                if index.adjacency[j].len() > 2 * m {
                    index.prune(j, 2 * m);
                }
            }
        }
        index.symmetrize();
        Ok(index)
    }

    fn prune(&mut self, node: usize, keep: usize) {
        let base = &self.vectors[node];
        let mut scored: Vec<Scored> = self.adjacency[node]
            .iter()
            .map(|&id| Scored {
                sim: cosine(base, &self.vectors[id]),
                id,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        scored.truncate(keep);
        self.adjacency[node] = scored.into_iter().map(|s| s.id).collect();
    }

    fn symmetrize(&mut self) {
        let n = self.adjacency.len();
        let mut sets: Vec<HashSet<usize>> = self.adjacency.iter().map(|l| l.iter().copied().collect()).collect();
        for a in 0..n {
            for &b in &self.adjacency[a] {
                sets[b].insert(a);
            }
        }
        for (a, set) in sets.into_iter().enumerate() {
            let mut l: Vec<usize> = set.into_iter().filter(|&b| b != a).collect();
            l.sort_unstable();
            self.adjacency[a] = l;
        }
    }

    /// Best-first traversal from the entry point keeping `ef` results,
    /// returned best first.
    fn beam(&self, probe: &[Real], ef: usize) -> Vec<Scored> {
        let ef = ef.max(1);
        let start = Scored {
            sim: cosine(probe, &self.vectors[self.entry]),
            id: self.entry,
        };
        let mut visited = HashSet::from([self.entry]);
        let mut frontier = BinaryHeap::from([start]);
        let mut results = BinaryHeap::from([Reverse(start)]);
        while let Some(cur) = frontier.pop() {
            let worst = results.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
            if results.len() >= ef && cur.sim < worst {
                break;
            }
            for &nb in &self.adjacency[cur.id] {
                if !visited.insert(nb) {
                    continue;
                }
                let s = Scored {
                    sim: cosine(probe, &self.vectors[nb]),
                    id: nb,
                };
                let worst = results.peek().map(|r| r.0.sim).unwrap_or(f64::NEG_INFINITY);
                if results.len() < ef || s.sim > worst {
                    frontier.push(s);
                    results.push(Reverse(s));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Scored> = results.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    fn check_probe(&self, probe: &[Real]) -> Result<Vec<Real>> {
        if probe.len() != self.dim() {
            return Err(Error::shape("ann search", &[self.dim()], &[probe.len()]));
        }
        unit(probe)
    }

    fn hit(&self, s: Scored) -> Hit {
        Hit {
            id: s.id,
            text: self.texts[s.id].clone(),
            cosine: s.sim,
        }
    }

    /// Highest-cosine item reached by a beam search of width `ef`.
    pub fn search(&self, probe: &[Real], ef: usize) -> Result<Hit> {
        let probe = self.check_probe(probe)?;
        Ok(self.hit(self.beam(&probe, ef)[0]))
    }

    /// Exact nearest item by a full cosine scan.
    pub fn search_exhaustive(&self, probe: &[Real]) -> Result<Hit> {
        let probe = self.check_probe(probe)?;
        let best = (0..self.len())
            .map(|id| Scored {
                sim: cosine(&probe, &self.vectors[id]),
                id,
            })
            .max()
            .expect("index is never empty");
        Ok(self.hit(best))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn vector(&self, id: usize) -> &[Real] {
        &self.vectors[id]
    }

    pub fn links(&self, id: usize) -> &[usize] {
        &self.adjacency[id]
    }
}

/// Dense bag of hashed letter trigrams, the input representation of the
/// C-DSSM encoder. Texts sharing words share coordinates.
pub fn trigram_embedding(text: &str, buckets: usize) -> Vec<Real> {
    let mut v = vec![0.0; buckets];
    for (i, x) in trigram_hash(text, buckets) {
        v[i] += x;
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompletionOptions {
    pub m: usize,
    pub ef: usize,
    pub exhaustive: bool,
    /// Subtract the mean indexed vector from every vector before search, so
    /// cosine reflects how texts differ rather than what they all share.
    pub center: bool,
}

impl Default for CompletionOptions {
    fn default() -> Self {
        CompletionOptions {
            m: DEFAULT_M,
            ef: DEFAULT_EF,
            exhaustive: false,
            center: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionRecord {
    pub side: Side,
    pub text: String,
    pub proxy: String,
    pub similarity: f64,
    pub borrowed: Vec<Neighbor>,
}

/// Gives every neighborless node the click neighbors of its nearest
/// same-side node that has some, marked `source = ann`. `embed` maps a batch
/// of texts on one side to vectors.
pub fn complete_graph<F>(
    graph: &BehaviorGraph,
    mut embed: F,
    opts: CompletionOptions,
) -> Result<(BehaviorGraph, Vec<CompletionRecord>)>
where
    F: FnMut(Side, &[&str]) -> Result<Vec<Vec<Real>>>,
{
    let mut out = graph.clone();
    let mut log = Vec::new();
    for side in [Side::Query, Side::Keyword] {
        let nodes = graph.side(side);
        let indexed: Vec<(&str, Vec<Neighbor>)> = nodes
            .iter()
            .filter_map(|(text, ns)| {
                let clicks: Vec<Neighbor> = ns.iter().filter(|n| n.source == NeighborSource::Click).cloned().collect();
                (!clicks.is_empty()).then_some((text.as_str(), clicks))
            })
            .collect();
        let missing: Vec<&str> = nodes
            .iter()
            .filter(|(_, ns)| ns.is_empty())
            .map(|(t, _)| t.as_str())
            .collect();
        if missing.is_empty() {
            continue;
        }
        if indexed.is_empty() {
            warn!("no {} nodes have click neighbors; skipping completion for that side", side.as_str());
            continue;
        }
        let texts: Vec<&str> = indexed.iter().map(|(t, _)| *t).collect();
        let mut vectors = embed(side, &texts)?;
        let mut probes = embed(side, &missing)?;
        if vectors.len() != texts.len() || probes.len() != missing.len() {
            return Err(Error::Contract("embedding function returned the wrong number of vectors".into()));
        }
        if opts.center {
            let mean = mean_vector(&vectors)?;
            let centered = vectors
                .iter()
                .chain(&probes)
                .map(|v| {
                    if v.len() != mean.len() {
                        return Err(Error::shape("complete_graph", &[mean.len()], &[v.len()]));
                    }
                    Ok(v.iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<Real>>())
                })
                .collect::<Result<Vec<_>>>()?;
            // a vector equal to the mean has no direction left to compare
            if centered.iter().all(|v| v.iter().any(|&x| x != 0.0)) {
                let mut it = centered.into_iter();
                vectors = it.by_ref().take(vectors.len()).collect();
                probes = it.collect();
            }
        }
        let items = texts.iter().map(|t| t.to_string()).zip(vectors).collect();
        let index = AnnIndex::build(items, opts.m)?;
        for (text, probe) in missing.iter().zip(&probes) {
            let hit = if opts.exhaustive {
                index.search_exhaustive(probe)?
            } else {
                index.search(probe, opts.ef)?
            };
            let borrowed: Vec<Neighbor> = indexed[hit.id]
                .1
                .iter()
                .map(|n| Neighbor {
                    source: NeighborSource::Ann,
                    ..n.clone()
                })
                .collect();
            out.side_mut(side).insert(text.to_string(), borrowed.clone());
            log.push(CompletionRecord {
                side,
                text: text.to_string(),
                proxy: hit.text,
                similarity: hit.cosine,
                borrowed,
            });
        }
    }
    Ok((out, log))
}

fn mean_vector(vectors: &[Vec<Real>]) -> Result<Vec<Real>> {
    let dim = vectors[0].len();
    let mut sum = vec![0.0f64; dim];
    for v in vectors {
        if v.len() != dim {
            return Err(Error::shape("complete_graph", &[dim], &[v.len()]));
        }
        for (s, &x) in sum.iter_mut().zip(v) {
            *s += x as f64;
        }
    }
    Ok(sum.into_iter().map(|s| (s / vectors.len() as f64) as Real).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ClickLogEntry;

    #[test]
    fn single_item_answers_every_probe() {
        let idx = AnnIndex::build(vec![("only".into(), vec![1.0, 2.0])], DEFAULT_M).unwrap();
        assert_eq!(idx.search(&[-3.0, 0.5], DEFAULT_EF).unwrap().text, "only");
    }

    #[test]
    fn orthogonal_items() {
        let items = vec![
            ("a".to_string(), vec![1.0, 0.0, 0.0]),
            ("b".to_string(), vec![0.0, 1.0, 0.0]),
            ("c".to_string(), vec![0.0, 0.0, 1.0]),
        ];
        let idx = AnnIndex::build(items, DEFAULT_M).unwrap();
        let hit = idx.search(&[1.0, 0.0, 0.0], DEFAULT_EF).unwrap();
        assert_eq!(hit.text, "a");
        assert!((hit.cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stored_vectors_are_unit_and_links_symmetric() {
        let items: Vec<(String, Vec<Real>)> = (0..60)
            .map(|i| (format!("t{i}"), vec![(i as Real).sin(), (i as Real * 0.7).cos(), 1.0 + i as Real * 0.01]))
            .collect();
        let idx = AnnIndex::build(items, 4).unwrap();
        for i in 0..idx.len() {
            let n: f64 = idx.vector(i).iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
            for &j in idx.links(i) {
                assert!(idx.links(j).contains(&i));
            }
        }
    }

    #[test]
    fn lone_indexed_node_is_the_proxy() {
        // centering would zero the lone indexed vector, so it is skipped
        let graph = BehaviorGraph::from_logs(
            vec![
                ClickLogEntry {
                    query: "red shoes".into(),
                    keyword: "shoe sale".into(),
                    impressions: 80,
                    clicks: 5,
                },
                ClickLogEntry {
                    query: "blue shoes".into(),
                    keyword: "shoe sale".into(),
                    impressions: 3,
                    clicks: 1,
                },
            ],
            50,
            3,
        )
        .unwrap();
        let (done, log) = complete_graph(
            &graph,
            |_, texts| Ok(texts.iter().map(|t| trigram_embedding(t, 64)).collect()),
            CompletionOptions::default(),
        )
        .unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].proxy, "red shoes");
        assert_eq!(done.neighbors(Side::Query, "blue shoes").unwrap()[0].text, "shoe sale");
    }

    #[test]
    fn dim_mismatch_and_empty_are_errors() {
        assert!(AnnIndex::build(vec![("a".into(), vec![1.0]), ("b".into(), vec![1.0, 0.0])], 4).is_err());
        assert!(AnnIndex::build(Vec::new(), 4).is_err());
        let idx = AnnIndex::build(vec![("a".into(), vec![1.0, 0.0])], 4).unwrap();
        assert!(idx.search(&[1.0], 8).is_err());
    }
}
