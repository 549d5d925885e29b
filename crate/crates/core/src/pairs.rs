//! Query/keyword pair files. Each is a TSV whose header names the third
//! column, which fixes how it is read:
//!
//! | header                          | third column                  |
//! |---------------------------------|-------------------------------|
//! | `query\tkeyword\tteacher_score` | float in `[0, 1]`             |
//! | `query\tkeyword\tbinary_label`  | `0` or `1`                    |
//! | `query\tkeyword\tgrade`         | excellent/perfect/good/fair/bad |

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::graph::BehaviorGraph;
use crate::metrics::map_labels;
use crate::model::{NodeInput, Side};

#[derive(Clone, Debug, PartialEq)]
pub enum PairTarget {
    Teacher(f64),
    Binary(bool),
    Grade(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    Teacher,
    Binary,
    Grade,
}

impl PairKind {
    fn column(self) -> &'static str {
        match self {
            PairKind::Teacher => "teacher_score",
            PairKind::Binary => "binary_label",
            PairKind::Grade => "grade",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRow {
    pub query: String,
    pub keyword: String,
    pub target: PairTarget,
}

impl PairRow {
    pub fn kind(&self) -> PairKind {
        match self.target {
            PairTarget::Teacher(_) => PairKind::Teacher,
            PairTarget::Binary(_) => PairKind::Binary,
            PairTarget::Grade(_) => PairKind::Grade,
        }
    }

    /// Binary relevance where one is defined (teacher scores have none).
    pub fn binary(&self) -> Result<Option<bool>> {
        match &self.target {
            PairTarget::Teacher(_) => Ok(None),
            PairTarget::Binary(b) => Ok(Some(*b)),
            PairTarget::Grade(g) => map_labels(g).map(Some),
        }
    }
}

pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<PairRow>> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Data("pair file is empty".into()))??;
    let cols: Vec<&str> = header.split('\t').collect();
    let kind = match cols.as_slice() {
        ["query", "keyword", "teacher_score"] => PairKind::Teacher,
        ["query", "keyword", "binary_label"] => PairKind::Binary,
        ["query", "keyword", "grade"] => PairKind::Grade,
        _ => {
            return Err(Error::MalformedRow {
                line: 1,
                reason: format!("unrecognized pair header {header:?}"),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        let bad = |reason: String| Error::MalformedRow { line: lineno, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let raw = cols[2].trim();
        let target = match kind {
            PairKind::Teacher => {
                let v: f64 = raw.parse().map_err(|_| bad(format!("bad teacher score {raw:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(bad(format!("teacher score {v} outside [0, 1]")));
                }
                PairTarget::Teacher(v)
            }
            PairKind::Binary => match raw {
                "0" => PairTarget::Binary(false),
                "1" => PairTarget::Binary(true),
                _ => return Err(bad(format!("binary label must be 0 or 1, got {raw:?}"))),
            },
            PairKind::Grade => {
                map_labels(raw).map_err(|e| bad(e.to_string()))?;
                PairTarget::Grade(raw.to_ascii_lowercase())
            }
        };
        rows.push(PairRow {
            query: cols[0].to_string(),
            keyword: cols[1].to_string(),
            target,
        });
    }
    Ok(rows)
}

pub fn write_pairs<W: Write>(mut w: W, rows: &[PairRow]) -> Result<()> {
    let kind = rows.first().map_or(PairKind::Teacher, PairRow::kind);
    writeln!(w, "query\tkeyword\t{}", kind.column())?;
    for r in rows {
        if r.kind() != kind {
            return Err(Error::Contract("mixed target kinds in one pair file".into()));
        }
        let target = match &r.target {
            PairTarget::Teacher(v) => format!("{v:.6}"),
            PairTarget::Binary(b) => u8::from(*b).to_string(),
            PairTarget::Grade(g) => g.clone(),
        };
        writeln!(w, "{}\t{}\t{}", r.query, r.keyword, target)?;
    }
    Ok(())
}

/// A scored pair with each side's graph neighbors attached.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceExample {
    pub query: NodeInput,
    pub keyword: NodeInput,
    pub teacher_score: Option<f64>,
    pub binary_label: Option<bool>,
}

impl RelevanceExample {
    pub fn from_row(row: &PairRow, graph: &BehaviorGraph) -> Result<Self> {
        let teacher_score = match row.target {
            PairTarget::Teacher(v) => Some(v),
            _ => None,
        };
        Ok(RelevanceExample {
            query: graph.node_input(Side::Query, &row.query),
            keyword: graph.node_input(Side::Keyword, &row.keyword),
            teacher_score,
            binary_label: row.binary()?,
        })
    }
}

pub fn examples_from_rows(rows: &[PairRow], graph: &BehaviorGraph) -> Result<Vec<RelevanceExample>> {
    rows.iter().map(|r| RelevanceExample::from_row(r, graph)).collect()
}
