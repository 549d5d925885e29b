//! The twin-tower TextGNN model. Each tower encodes a center text and its
//! neighbor texts with one shared encoder block, aggregates them with a GNN
//! layer, and joins the result to the center encoding through a skip
//! connection. A residual crossing layer followed by logistic regression
//! turns the two tower outputs into a relevance probability.
//!
//! With `use_graph = false` the towers reduce to the plain encoder-only
//! baseline.

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{Aggregator, AggregatorConfig, NEIGHBOR_SLOTS};
use crate::autodiff::{ParamStore, Real, Scope, Tensor, Var};
use crate::encoders::{EncoderConfig, EncoderInput, TextEncoder};
use crate::error::{Error, Result};
use crate::layers::{init_linear, linear};
use crate::tokenize::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Keyword,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Query => "query",
            Side::Keyword => "keyword",
        }
    }

    pub fn other(self) -> Side {
        match self {
            Side::Query => Side::Keyword,
            Side::Keyword => Side::Query,
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Side::Query),
            "keyword" => Ok(Side::Keyword),
            other => Err(Error::InvalidInput(format!("unknown side {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    pub skip_mode: SkipMode,
    pub share_across_towers: bool,
    pub use_graph: bool,
    pub crossing_hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            skip_mode: SkipMode::Concat,
            share_across_towers: true,
            use_graph: true,
            crossing_hidden_dim: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.aggregator.validate(self.encoder.output_dim)?;
        if self.crossing_hidden_dim == 0 {
            return Err(Error::Config("crossing_hidden_dim must be positive".into()));
        }
        Ok(())
    }

    fn gnn_dim(&self) -> usize {
        self.aggregator.out_dim(self.encoder.output_dim)
    }

    fn needs_rescale(&self) -> bool {
        self.use_graph && self.skip_mode == SkipMode::Add && self.gnn_dim() != self.encoder.output_dim
    }

    /// Width of one tower's output vector.
    pub fn tower_dim(&self) -> usize {
        let d = self.encoder.output_dim;
        match (self.use_graph, self.skip_mode) {
            (false, _) | (true, SkipMode::Add) => d,
            (true, SkipMode::Concat) => d + self.gnn_dim(),
        }
    }
}

/// One center text with up to three neighbor texts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NodeInput {
    pub text: String,
    pub neighbors: Vec<String>,
}

impl NodeInput {
    pub fn new(text: impl Into<String>, neighbors: Vec<String>) -> Self {
        NodeInput {
            text: text.into(),
            neighbors,
        }
    }

    pub fn bare(text: impl Into<String>) -> Self {
        NodeInput::new(text, Vec::new())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextGnn {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub vocab: Option<Vocabulary>,
}

impl TextGnn {
    /// Fresh model with Xavier-initialized weights drawn from `seed`.
    pub fn new(cfg: ModelConfig, vocab: Option<Vocabulary>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let model = TextGnn {
            cfg,
            params: ParamStore::new(),
            vocab,
        };
        let sides: &[Side] = if model.cfg.share_across_towers {
            &[Side::Query]
        } else {
            &[Side::Query, Side::Keyword]
        };
        for &side in sides {
            model.encoder(side).init_params(&mut params, model.vocab.as_ref(), &mut rng)?;
            if model.cfg.use_graph {
                model.aggregator(side).init_params(&mut params, &mut rng)?;
                if model.cfg.needs_rescale() {
                    let p = model.prefix(side);
                    init_linear(
                        &mut params,
                        &format!("{p}rescale"),
                        model.cfg.gnn_dim(),
                        model.cfg.encoder.output_dim,
                        &mut rng,
                    );
                }
            }
        }
        let x = 2 * model.cfg.tower_dim();
        init_linear(&mut params, "cross.f1", x, model.cfg.crossing_hidden_dim, &mut rng);
        init_linear(&mut params, "cross.f2", model.cfg.crossing_hidden_dim, x, &mut rng);
        init_linear(&mut params, "cross.out", x, 1, &mut rng);
        Ok(TextGnn { params, ..model })
    }

    /// Reassembles a model from stored parameters, checking every expected
    /// tensor is present with the expected shape.
    pub fn from_parts(cfg: ModelConfig, vocab: Option<Vocabulary>, params: ParamStore) -> Result<Self> {
        let reference = TextGnn::new(cfg.clone(), vocab.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("checkpoint tensor", t.shape(), got.shape()));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(TextGnn { cfg, params, vocab })
    }

    fn prefix(&self, side: Side) -> &'static str {
        match (self.cfg.share_across_towers, side) {
            (true, _) => "",
            (false, Side::Query) => "q.",
            (false, Side::Keyword) => "k.",
        }
    }

    pub fn encoder(&self, side: Side) -> TextEncoder {
        TextEncoder::new(self.cfg.encoder.clone(), format!("{}enc", self.prefix(side)))
    }

    pub fn aggregator(&self, side: Side) -> Aggregator {
        Aggregator::new(
            self.cfg.aggregator.clone(),
            format!("{}gnn", self.prefix(side)),
            self.cfg.encoder.output_dim,
        )
    }

    pub fn tower_dim(&self) -> usize {
        self.cfg.tower_dim()
    }

    pub fn featurize(&self, side: Side, text: &str) -> Result<EncoderInput> {
        self.encoder(side).featurize(text, self.vocab.as_ref())
    }

    /// Tower outputs `[N × tower_dim]`. Each distinct text in the batch is
    /// encoded once; masked neighbor slots are zero rows.
    pub fn tower_forward(&self, scope: &mut Scope<'_>, side: Side, nodes: &[&NodeInput]) -> Result<Var> {
        if nodes.is_empty() {
            return Err(Error::Contract("empty tower batch".into()));
        }
        let mut unique: Vec<&str> = Vec::new();
        let mut lookup: HashMap<&str, usize> = HashMap::new();
        let mut center_idx = Vec::with_capacity(nodes.len());
        for node in nodes {
            center_idx.push(intern_text(&node.text, &mut unique, &mut lookup));
        }
        let mut neighbor_idx = Vec::new();
        let mut mask = Vec::new();
        if self.cfg.use_graph {
            for node in nodes {
                if node.neighbors.len() > NEIGHBOR_SLOTS {
                    return Err(Error::InvalidInput(format!(
                        "node {:?} has {} neighbors, at most {NEIGHBOR_SLOTS} allowed",
                        node.text,
                        node.neighbors.len()
                    )));
                }
                for j in 0..NEIGHBOR_SLOTS {
                    match node.neighbors.get(j) {
                        Some(t) => {
                            neighbor_idx.push(Some(intern_text(t, &mut unique, &mut lookup)));
                            mask.push(true);
                        }
                        None => {
                            neighbor_idx.push(None);
                            mask.push(false);
                        }
                    }
                }
            }
        }

        let encoder = self.encoder(side);
        let inputs = unique
            .iter()
            .map(|t| encoder.featurize(t, self.vocab.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&EncoderInput> = inputs.iter().collect();
        let encoded = encoder.encode(scope, &refs)?;

        let center = scope
            .tape
            .gather_rows(encoded, Rc::new(center_idx.into_iter().map(Some).collect()))?;
        if !self.cfg.use_graph {
            return Ok(center);
        }
        let neighbors = scope.tape.gather_rows(encoded, Rc::new(neighbor_idx))?;
        let mut gnn = self.aggregator(side).forward(scope, center, neighbors, &mask)?;
        match self.cfg.skip_mode {
            SkipMode::Concat => scope.tape.concat_cols(&[center, gnn]),
            SkipMode::Add => {
                if self.cfg.needs_rescale() {
                    gnn = linear(scope, gnn, &format!("{}rescale", self.prefix(side)))?;
                }
                scope.tape.add(center, gnn)
            }
        }
    }

    /// Residual crossing `y = F(x) + x` over `x = [q ‖ k]`, then
    /// `sigmoid(wᵀy + c)`. Returns probabilities `[N × 1]`.
    pub fn crossing(&self, scope: &mut Scope<'_>, q: Var, k: Var) -> Result<Var> {
        let y = self.crossing_residual(scope, q, k)?;
        let logit = linear(scope, y, "cross.out")?;
        Ok(scope.tape.sigmoid(logit))
    }

    /// The residual output `y` of the crossing layer.
    pub fn crossing_residual(&self, scope: &mut Scope<'_>, q: Var, k: Var) -> Result<Var> {
        let x = scope.tape.concat_cols(&[q, k])?;
        let h = linear(scope, x, "cross.f1")?;
        let h = scope.tape.relu(h);
        let f = linear(scope, h, "cross.f2")?;
        scope.tape.add(f, x)
    }

    /// End-to-end relevance probabilities `[N × 1]` for aligned batches.
    pub fn forward(&self, scope: &mut Scope<'_>, queries: &[&NodeInput], keywords: &[&NodeInput]) -> Result<Var> {
        if queries.len() != keywords.len() {
            return Err(Error::shape("forward", &[queries.len()], &[keywords.len()]));
        }
        let q = self.tower_forward(scope, Side::Query, queries)?;
        let k = self.tower_forward(scope, Side::Keyword, keywords)?;
        self.crossing(scope, q, k)
    }

    /// Scores pairs in inference mode, `batch_size` pairs per tape.
    pub fn score_pairs(&self, pairs: &[(&NodeInput, &NodeInput)], batch_size: usize) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let qs: Vec<&NodeInput> = chunk.iter().map(|p| p.0).collect();
            let ks: Vec<&NodeInput> = chunk.iter().map(|p| p.1).collect();
            let mut scope = Scope::inference(&self.params);
            let p = self.forward(&mut scope, &qs, &ks)?;
            let v = scope.tape.value(p);
            if !v.is_finite() {
                return Err(Error::Divergence("non-finite score".into()));
            }
            out.extend_from_slice(v.data());
        }
        Ok(out)
    }

    /// Tower output vectors for one side, in input order.
    pub fn tower_vectors(&self, side: Side, nodes: &[&NodeInput], batch_size: usize) -> Result<Vec<Vec<Real>>> {
        let d = self.tower_dim();
        let mut out = Vec::with_capacity(nodes.len());
        for chunk in nodes.chunks(batch_size.max(1)) {
            let mut scope = Scope::inference(&self.params);
            let v = self.tower_forward(&mut scope, side, chunk)?;
            out.extend(scope.tape.value(v).data().chunks(d).map(<[Real]>::to_vec));
        }
        Ok(out)
    }

    /// Center-encoder sentence vectors (no graph), e.g. for ANN lookup.
    pub fn encode_texts(&self, side: Side, texts: &[&str], batch_size: usize) -> Result<Vec<Vec<Real>>> {
        let encoder = self.encoder(side);
        let d = self.cfg.encoder.output_dim;
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(batch_size.max(1)) {
            let inputs = chunk
                .iter()
                .map(|t| encoder.featurize(t, self.vocab.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&EncoderInput> = inputs.iter().collect();
            let mut scope = Scope::inference(&self.params);
            let v = encoder.encode(&mut scope, &refs)?;
            out.extend(scope.tape.value(v).data().chunks(d).map(<[Real]>::to_vec));
        }
        Ok(out)
    }

    /// Scores precomputed tower vectors (row-aligned).
    pub fn score_vectors(&self, q: &[Vec<Real>], k: &[Vec<Real>]) -> Result<Vec<Real>> {
        let d = self.tower_dim();
        if q.len() != k.len() || q.is_empty() {
            return Err(Error::shape("score_vectors", &[q.len()], &[k.len()]));
        }
        if q.iter().chain(k).any(|v| v.len() != d) {
            return Err(Error::InvalidInput(format!("tower vectors must have dim {d}")));
        }
        let mut scope = Scope::inference(&self.params);
        let qv = scope.tape.constant(Tensor::matrix(q.len(), d, q.concat())?);
        let kv = scope.tape.constant(Tensor::matrix(k.len(), d, k.concat())?);
        let p = self.crossing(&mut scope, qv, kv)?;
        Ok(scope.tape.value(p).data().to_vec())
    }
}

fn intern_text<'a>(t: &'a str, unique: &mut Vec<&'a str>, lookup: &mut HashMap<&'a str, usize>) -> usize {
    *lookup.entry(t).or_insert_with(|| {
        unique.push(t);
        unique.len() - 1
    })
}
