// Random layer configurations for finite-difference gradient checks. Shared
// by the core gradient tests and the acceptance suite.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use textgnn::aggregate::{Aggregator, AggregatorConfig, AggregatorKind, NEIGHBOR_SLOTS};
use textgnn::autodiff::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use textgnn::autodiff::{ParamStore, Real, Tensor};
use textgnn::encoders::{weighted_average_pool_batch, EncoderConfig, EncoderInput, EncoderKind, TextEncoder};
use textgnn::layers::init_linear;
use textgnn::model::{ModelConfig, TextGnn};
use textgnn::tokenize::Vocabulary;
use textgnn::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    ConvEncoder,
    TransformerEncoder,
    Gat,
    Gcn,
    Mean,
    Pooling,
    Crossing,
}

pub const LAYERS: [Layer; 7] = [
    Layer::ConvEncoder,
    Layer::TransformerEncoder,
    Layer::Gat,
    Layer::Gcn,
    Layer::Mean,
    Layer::Pooling,
    Layer::Crossing,
];

pub const CONFIGS_PER_LAYER: u64 = 10;

/// Largest relative error accepted for the scalar type in use.
pub fn tolerance() -> f64 {
    if cfg!(feature = "f64") {
        1e-4
    } else {
        1e-2
    }
}

const WORDS: [&str; 12] = [
    "cheap", "flights", "paris", "hotel", "deals", "free", "games", "online", "usps", "jobs", "postal", "login",
];

fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn random_input(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    let n: usize = shape.iter().product();
    let data: Vec<Real> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.insert(name, Tensor::new(shape.to_vec(), data).unwrap());
}

fn encoder_check(kind: EncoderKind, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let heads = rng.random_range(1..=2);
    let cfg = EncoderConfig {
        kind,
        embed_dim: heads * rng.random_range(2..=4),
        hidden_dim: rng.random_range(3..=8),
        output_dim: rng.random_range(3..=6),
        n_layers: rng.random_range(1..=2),
        n_heads: heads,
        conv_window: rng.random_range(1..=3),
        trigram_buckets: rng.random_range(24..=64),
        max_seq_len: rng.random_range(6..=9),
    };
    let texts: Vec<String> = (0..rng.random_range(1..=3)).map(|_| random_text(rng, 4)).collect();
    let vocab = match kind {
        EncoderKind::Cdssm => None,
        EncoderKind::MiniTransformer => Some(Vocabulary::build(WORDS, 1, 64, cfg.max_seq_len)?),
    };
    let enc = TextEncoder::new(cfg, "enc");
    let mut store = ParamStore::new();
    enc.init_params(&mut store, vocab.as_ref(), rng)?;
    perturb_all(&mut store, rng);
    let inputs: Vec<EncoderInput> = texts.iter().map(|t| enc.featurize(t, vocab.as_ref())).collect::<Result<_>>()?;
    check_gradients(
        &mut store,
        |scope| {
            let refs: Vec<&EncoderInput> = inputs.iter().collect();
            enc.encode(scope, &refs)
        },
        GradCheckConfig::default(),
        rng,
    )
}

/// Moves every parameter off its initial value so biases, LayerNorm gains
/// and zero-initialized tensors are checked at a generic point.
fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, need_one: bool) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n * NEIGHBOR_SLOTS).map(|_| rng.random_bool(0.6)).collect();
    if need_one {
        for row in mask.chunks_mut(NEIGHBOR_SLOTS) {
            if !row.iter().any(|&b| b) {
                row[rng.random_range(0..NEIGHBOR_SLOTS)] = true;
            }
        }
    }
    mask
}

fn aggregator_check(kind: AggregatorKind, rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let d = rng.random_range(2..=6);
    let heads = if kind == AggregatorKind::Gat { rng.random_range(1..=2) } else { 1 };
    let out = heads * rng.random_range(1..=4);
    let include_self = kind != AggregatorKind::Gcn || rng.random_bool(0.5);
    let cfg = AggregatorConfig {
        kind,
        gat_heads: heads,
        leaky_relu_slope: 0.2,
        include_self,
        output_dim: Some(out),
    };
    let n = rng.random_range(1..=3);
    let mask = random_mask(rng, n, !include_self);
    let agg = Aggregator::new(cfg, "gnn", d);
    let mut store = ParamStore::new();
    agg.init_params(&mut store, rng)?;
    perturb_all(&mut store, rng);
    random_input(&mut store, "input.center", &[n, d], rng);
    random_input(&mut store, "input.neighbors", &[n * NEIGHBOR_SLOTS, d], rng);
    // masked slots hold zeros, as the tower builds them
    {
        let nb = store.get_mut("input.neighbors")?;
        for (row, &m) in nb.data_mut().chunks_mut(d).zip(&mask) {
            if !m {
                row.fill(0.0);
            }
        }
    }
    check_gradients(
        &mut store,
        |scope| {
            let c = scope.param("input.center")?;
            let nb = scope.param("input.neighbors")?;
            agg.forward(scope, c, nb, &mask)
        },
        GradCheckConfig::default(),
        rng,
    )
}

fn pooling_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let d = rng.random_range(2..=6);
    let len = rng.random_range(1..=5);
    let n = rng.random_range(1..=3);
    let mut mask: Vec<bool> = (0..n * len).map(|_| rng.random_bool(0.7)).collect();
    for row in mask.chunks_mut(len) {
        row[0] = true;
    }
    let mut store = ParamStore::new();
    init_linear(&mut store, "pool", d, 1, rng);
    perturb_all(&mut store, rng);
    random_input(&mut store, "input.tokens", &[n * len, d], rng);
    check_gradients(
        &mut store,
        |scope| {
            let x = scope.param("input.tokens")?;
            weighted_average_pool_batch(scope, x, &mask, len, "pool")
        },
        GradCheckConfig::default(),
        rng,
    )
}

fn crossing_check(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let mut cfg = ModelConfig::default();
    cfg.encoder.kind = EncoderKind::Cdssm;
    cfg.encoder.embed_dim = 3;
    cfg.encoder.hidden_dim = 3;
    cfg.encoder.output_dim = rng.random_range(2..=5);
    cfg.encoder.trigram_buckets = 8;
    cfg.use_graph = false;
    cfg.crossing_hidden_dim = rng.random_range(2..=8);
    let model = TextGnn::new(cfg, None, rng.random())?;
    let d = model.tower_dim();
    let n = rng.random_range(1..=4);
    let mut store = ParamStore::new();
    for (name, t) in model.params.iter().filter(|(name, _)| name.starts_with("cross.")) {
        store.insert(name, t.clone());
    }
    perturb_all(&mut store, rng);
    random_input(&mut store, "input.q", &[n, d], rng);
    random_input(&mut store, "input.k", &[n, d], rng);
    check_gradients(
        &mut store,
        |scope| {
            let q = scope.param("input.q")?;
            let k = scope.param("input.k")?;
            model.crossing(scope, q, k)
        },
        GradCheckConfig::default(),
        rng,
    )
}

/// Gradient check of configuration `index` of `layer`.
pub fn run(layer: Layer, index: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ (index * 7919) ^ ((layer as u64) << 32));
    match layer {
        Layer::ConvEncoder => encoder_check(EncoderKind::Cdssm, &mut rng),
        Layer::TransformerEncoder => encoder_check(EncoderKind::MiniTransformer, &mut rng),
        Layer::Gat => aggregator_check(AggregatorKind::Gat, &mut rng),
        Layer::Gcn => aggregator_check(AggregatorKind::Gcn, &mut rng),
        Layer::Mean => aggregator_check(AggregatorKind::Mean, &mut rng),
        Layer::Pooling => pooling_check(&mut rng),
        Layer::Crossing => crossing_check(&mut rng),
    }
}
