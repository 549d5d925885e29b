//! Text encoder blocks: a convolutional letter-trigram encoder (C-DSSM
//! family) and a small transformer encoder with weighted-average pooling.
//! Both map a batch of texts to one `[N × output_dim]` matrix.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Scope, SparseRows, Var};
use crate::error::{Error, Result};
use crate::layers::{init_layer_norm, init_linear, layer_norm, linear};
use crate::tokenize::{word_trigrams, SparseVector, TokenSequence, Vocabulary, DEFAULT_MAX_SEQ_LEN};
use crate::autodiff::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Cdssm,
    MiniTransformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub embed_dim: usize,
    /// Conv channels for C-DSSM, feed-forward width for the transformer.
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub conv_window: usize,
    pub trigram_buckets: usize,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::MiniTransformer,
            embed_dim: 64,
            hidden_dim: 128,
            output_dim: 64,
            n_layers: 3,
            n_heads: 4,
            conv_window: 3,
            trigram_buckets: 4096,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("output_dim", self.output_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("conv_window", self.conv_window),
            ("trigram_buckets", self.trigram_buckets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder {name} must be positive")));
            }
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("encoder max_seq_len must be at least 2".into()));
        }
        if self.kind == EncoderKind::MiniTransformer && self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide embed_dim {}",
                self.n_heads, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Encoder-ready form of one text.
#[derive(Clone, Debug, PartialEq)]
pub enum EncoderInput {
    /// One sparse trigram vector per word.
    Trigrams(Vec<SparseVector>),
    Tokens(TokenSequence),
}

/// A text encoder block bound to a parameter prefix.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    pub prefix: String,
}

impl TextEncoder {
    pub fn new(cfg: EncoderConfig, prefix: impl Into<String>) -> Self {
        TextEncoder {
            cfg,
            prefix: prefix.into(),
        }
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, vocab: Option<&Vocabulary>, rng: &mut R) -> Result<()> {
        self.cfg.validate()?;
        let c = &self.cfg;
        let p = &self.prefix;
        match c.kind {
            EncoderKind::Cdssm => {
                store.insert_xavier(&format!("{p}.emb"), c.trigram_buckets, c.embed_dim, rng);
                init_linear(store, &format!("{p}.conv"), c.conv_window * c.embed_dim, c.hidden_dim, rng);
                init_linear(store, &format!("{p}.out"), c.hidden_dim, c.output_dim, rng);
            }
            EncoderKind::MiniTransformer => {
                let vocab = vocab.ok_or_else(|| {
                    Error::Config("the transformer encoder needs a vocabulary".into())
                })?;
                let e = c.embed_dim;
                store.insert_xavier(&format!("{p}.tok_emb"), vocab.len(), e, rng);
                store.insert_xavier(&format!("{p}.pos_emb"), c.max_seq_len, e, rng);
                init_layer_norm(store, &format!("{p}.emb_ln"), e);
                for l in 0..c.n_layers {
                    for part in ["q", "k", "v", "o"] {
                        init_linear(store, &format!("{p}.l{l}.{part}"), e, e, rng);
                    }
                    init_layer_norm(store, &format!("{p}.l{l}.ln1"), e);
                    init_linear(store, &format!("{p}.l{l}.ff1"), e, c.hidden_dim, rng);
                    init_linear(store, &format!("{p}.l{l}.ff2"), c.hidden_dim, e, rng);
                    init_layer_norm(store, &format!("{p}.l{l}.ln2"), e);
                }
                init_linear(store, &format!("{p}.pool"), e, 1, rng);
                if e != c.output_dim {
                    init_linear(store, &format!("{p}.proj"), e, c.output_dim, rng);
                }
            }
        }
        Ok(())
    }

    pub fn featurize(&self, text: &str, vocab: Option<&Vocabulary>) -> Result<EncoderInput> {
        match self.cfg.kind {
            EncoderKind::Cdssm => Ok(EncoderInput::Trigrams(word_trigrams(
                text,
                self.cfg.trigram_buckets,
                self.cfg.max_seq_len,
            ))),
            EncoderKind::MiniTransformer => {
                let vocab = vocab.ok_or_else(|| {
                    Error::Config("the transformer encoder needs a vocabulary".into())
                })?;
                Ok(EncoderInput::Tokens(vocab.tokenize(text, true)))
            }
        }
    }

    /// Encodes a batch; row `i` of the result depends only on `inputs[i]`.
    pub fn encode(&self, scope: &mut Scope<'_>, inputs: &[&EncoderInput]) -> Result<Var> {
        match self.cfg.kind {
            EncoderKind::Cdssm => {
                let seqs = inputs
                    .iter()
                    .map(|i| match i {
                        EncoderInput::Trigrams(t) => Ok(t.as_slice()),
                        EncoderInput::Tokens(_) => Err(Error::Contract("C-DSSM encoder got token ids".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                encode_cdssm(scope, &self.prefix, &self.cfg, &seqs)
            }
            EncoderKind::MiniTransformer => {
                let seqs = inputs
                    .iter()
                    .map(|i| match i {
                        EncoderInput::Tokens(t) => Ok(t),
                        EncoderInput::Trigrams(_) => {
                            Err(Error::Contract("transformer encoder got trigram vectors".into()))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                encode_transformer(scope, &self.prefix, &self.cfg, &seqs)
            }
        }
    }
}

/// Convolutional trigram encoder: projection of each word's trigram counts,
/// a `conv_window`-wide tanh convolution with zero padding at the edges,
/// max-pooling over positions and a dense tanh output layer.
///
/// A text with no words is encoded as a single all-zero position.
pub fn encode_cdssm(
    scope: &mut Scope<'_>,
    prefix: &str,
    cfg: &EncoderConfig,
    batch: &[&[SparseVector]],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty encoder batch".into()));
    }
    let empty: SparseVector = Vec::new();
    let mut rows: SparseRows = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    for words in batch {
        let start = rows.len();
        if words.is_empty() {
            rows.push(empty.clone());
        } else {
            rows.extend(words.iter().take(cfg.max_seq_len).cloned());
        }
        segments.push((start, rows.len() - start));
    }

    let emb = scope.param(&format!("{prefix}.emb"))?;
    let e = scope.tape.sparse_matmul(Rc::new(rows), emb)?;

    let half = (cfg.conv_window - 1) / 2;
    let mut windows = Vec::with_capacity(cfg.conv_window);
    for offset in 0..cfg.conv_window {
        let mut idx = Vec::new();
        for &(start, len) in &segments {
            for p in 0..len {
                let src = p as isize + offset as isize - half as isize;
                idx.push((src >= 0 && (src as usize) < len).then(|| start + src as usize));
            }
        }
        windows.push(scope.tape.gather_rows(e, Rc::new(idx))?);
    }
    let unfolded = if windows.len() == 1 {
        windows[0]
    } else {
        scope.tape.concat_cols(&windows)?
    };
    let conv = linear(scope, unfolded, &format!("{prefix}.conv"))?;
    let conv = scope.tape.tanh(conv);
    let pooled = scope.tape.segment_max(conv, &segments)?;
    let out = linear(scope, pooled, &format!("{prefix}.out"))?;
    Ok(scope.tape.tanh(out))
}

/// Transformer encoder: token plus learned positional embeddings, then
/// `n_layers` post-norm blocks of masked multi-head self-attention and a GELU
/// feed-forward, then weighted-average pooling over real tokens.
pub fn encode_transformer(
    scope: &mut Scope<'_>,
    prefix: &str,
    cfg: &EncoderConfig,
    batch: &[&TokenSequence],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty encoder batch".into()));
    }
    let n = batch.len();
    let mut len = 0;
    for (i, s) in batch.iter().enumerate() {
        let real = s.real_len();
        if real == 0 {
            return Err(Error::InvalidInput(format!("sequence {i} has no real tokens")));
        }
        if s.ids.len() > cfg.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence {i} is longer than max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        len = len.max(real);
    }
    let e = cfg.embed_dim;
    let heads = cfg.n_heads;
    let dh = e / heads;

    let mut ids = Vec::with_capacity(n * len);
    let mut pos = Vec::with_capacity(n * len);
    let mut mask = Vec::with_capacity(n * len);
    for s in batch {
        for p in 0..len {
            ids.push(Some(s.ids.get(p).copied().unwrap_or(0) as usize));
            pos.push(Some(p));
            mask.push(s.attention_mask.get(p).copied().unwrap_or(false));
        }
    }

    let tok_emb = scope.param(&format!("{prefix}.tok_emb"))?;
    let pos_emb = scope.param(&format!("{prefix}.pos_emb"))?;
    let t = scope.tape.gather_rows(tok_emb, Rc::new(ids))?;
    let p = scope.tape.gather_rows(pos_emb, Rc::new(pos))?;
    let x = scope.tape.add(t, p)?;
    let mut x = layer_norm(scope, x, &format!("{prefix}.emb_ln"))?;

    // attention mask: row (b, h, i) may attend to key j iff token j is real
    let mut att_mask = Vec::with_capacity(n * heads * len * len);
    for b in 0..n {
        let keys = &mask[b * len..(b + 1) * len];
        for _ in 0..heads * len {
            att_mask.extend_from_slice(keys);
        }
    }
    let att_mask = Rc::new(att_mask);
    let (split, merge) = head_permutations(n, len, heads, dh);
    let scale = 1.0 / (dh as Real).sqrt();

    for l in 0..cfg.n_layers {
        let lp = format!("{prefix}.l{l}");
        let q = linear(scope, x, &format!("{lp}.q"))?;
        let k = linear(scope, x, &format!("{lp}.k"))?;
        let v = linear(scope, x, &format!("{lp}.v"))?;
        let shape = vec![n * heads, len, dh];
        let q = scope.tape.permute(q, split.clone(), shape.clone())?;
        let k = scope.tape.permute(k, split.clone(), shape.clone())?;
        let v = scope.tape.permute(v, split.clone(), shape)?;
        let scores = scope.tape.batched_matmul(q, k, true)?;
        let scores = scope.tape.scale(scores, scale);
        let probs = scope.tape.masked_softmax(scores, att_mask.clone())?;
        let ctx = scope.tape.batched_matmul(probs, v, false)?;
        let ctx = scope.tape.permute(ctx, merge.clone(), vec![n * len, e])?;
        let attn = linear(scope, ctx, &format!("{lp}.o"))?;
        let res = scope.tape.add(x, attn)?;
        x = layer_norm(scope, res, &format!("{lp}.ln1"))?;

        let h = linear(scope, x, &format!("{lp}.ff1"))?;
        let h = scope.tape.gelu(h);
        let h = linear(scope, h, &format!("{lp}.ff2"))?;
        let res = scope.tape.add(x, h)?;
        x = layer_norm(scope, res, &format!("{lp}.ln2"))?;
    }

    let pooled = weighted_average_pool_batch(scope, x, &mask, len, &format!("{prefix}.pool"))?;
    if e != cfg.output_dim {
        linear(scope, pooled, &format!("{prefix}.proj"))
    } else {
        Ok(pooled)
    }
}

/// Flat-index permutations between `[N·L × H·dh]` and `[N·H × L × dh]`.
fn head_permutations(n: usize, len: usize, heads: usize, dh: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let e = heads * dh;
    let total = n * len * e;
    let mut split = vec![0; total];
    let mut merge = vec![0; total];
    for b in 0..n {
        for h in 0..heads {
            for l in 0..len {
                for d in 0..dh {
                    let headed = ((b * heads + h) * len + l) * dh + d;
                    let flat = (b * len + l) * e + h * dh + d;
                    split[headed] = flat;
                    merge[flat] = headed;
                }
            }
        }
    }
    (Rc::new(split), Rc::new(merge))
}

/// Pools `x: [N·L × d]` into `[N × d]`: a linear score per token, softmax
/// over the real tokens of each sequence, then the weighted sum.
pub fn weighted_average_pool_batch(
    scope: &mut Scope<'_>,
    x: Var,
    mask: &[bool],
    len: usize,
    name: &str,
) -> Result<Var> {
    let rows = scope.tape.shape(x)[0];
    if len == 0 || rows % len != 0 || mask.len() != rows {
        return Err(Error::shape("weighted_average_pool", scope.tape.shape(x), &[mask.len(), len]));
    }
    let n = rows / len;
    let scores = linear(scope, x, name)?;
    let scores = scope.tape.reshape(scores, vec![n, len])?;
    let weights = scope.tape.masked_softmax(scores, Rc::new(mask.to_vec()))?;
    scope.tape.group_weighted_sum(weights, x)
}

/// Single-sequence pooling of `token_vectors: [n × d]`.
pub fn weighted_average_pool(scope: &mut Scope<'_>, token_vectors: Var, mask: &[bool], name: &str) -> Result<Var> {
    weighted_average_pool_batch(scope, token_vectors, mask, mask.len(), name)
}
