use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use textgnn::ann::{complete_graph, trigram_embedding, CompletionOptions};
use textgnn::checkpoint;
use textgnn::config::{self, ExperimentConfig};
use textgnn::embeddings::export_tower_embeddings;
use textgnn::encoders::EncoderKind;
use textgnn::graph::{read_click_log, BehaviorGraph, DEFAULT_THRESHOLD};
use textgnn::metrics::{pr_auc, roc_auc, subgroup_auc, LabeledScore, SubgroupReport};
use textgnn::model::{NodeInput, Side, TextGnn};
use textgnn::pairs::{examples_from_rows, read_pairs, PairRow};
use textgnn::tokenize::Vocabulary;
use textgnn::train::{predict, train_with, TrainConfig};
use textgnn::world::{generate_world, WorldConfig};
use textgnn::Error;

use crate::{AnnComplete, BuildGraph, EmbeddingSource, Eval, ExportEmbeddings, GenData, Infer, Train};

/// Written next to the generated files so `eval --oracle` can rebuild the
/// same world.
pub const WORLD_CONFIG_FILE: &str = "world.json";
const VOCAB_MAX_SIZE: usize = 30_000;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_numeric() {
            CliError::Numeric(msg)
        } else if matches!(e, Error::Config(_)) {
            CliError::Usage(msg)
        } else {
            CliError::Data(msg)
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::Data(format!("cannot create {}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

fn in_file<T>(path: &Path, r: textgnn::Result<T>) -> Result<T> {
    r.map_err(|e| {
        let numeric = e.is_numeric();
        let msg = format!("{}: {e}", path.display());
        if numeric {
            CliError::Numeric(msg)
        } else {
            CliError::Data(msg)
        }
    })
}

fn read_graph(path: &Path) -> Result<BehaviorGraph> {
    in_file(path, BehaviorGraph::read_jsonl(open(path)?, DEFAULT_THRESHOLD))
}

fn read_graph_or_empty(path: Option<&Path>) -> Result<BehaviorGraph> {
    path.map_or_else(|| Ok(BehaviorGraph::default()), read_graph)
}

fn read_pair_file(path: &Path) -> Result<Vec<PairRow>> {
    let rows = in_file(path, read_pairs(open(path)?))?;
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: no pairs", path.display())));
    }
    Ok(rows)
}

fn write_graph(graph: &BehaviorGraph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    graph.write_jsonl(&mut w)?;
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<TextGnn> {
    Ok(in_file(path, checkpoint::load(path))?.0)
}

fn resolve_seed(flag: Option<u64>, fallback: u64) -> u64 {
    flag.unwrap_or_else(|| {
        eprintln!("no --seed given, using seed {fallback}");
        fallback
    })
}

pub fn gen_data(args: GenData) -> Result<()> {
    let mut cfg: WorldConfig = match &args.config {
        Some(p) => config::load(p)?,
        None => WorldConfig::default(),
    };
    cfg.seed = resolve_seed(args.seed, cfg.seed);
    let world = generate_world(&cfg)?;
    world.write_to_dir(&args.out)?;
    fs::write(args.out.join(WORLD_CONFIG_FILE), config::to_json_string(&cfg)?).map_err(Error::from)?;
    let rare = world.keywords.iter().filter(|k| k.rare).count();
    println!("seed            {}", cfg.seed);
    println!("queries         {}", world.queries.len());
    println!("keywords        {} ({rare} rare)", world.keywords.len());
    println!("click log rows  {}", world.click_log.len());
    println!("train pairs     {}", world.train.len());
    println!("finetune pairs  {}", world.finetune.len());
    println!("eval pairs      {}", world.eval.len());
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn build_graph(args: BuildGraph) -> Result<()> {
    if args.k == 0 || args.k > textgnn::aggregate::NEIGHBOR_SLOTS {
        return Err(CliError::Usage(format!(
            "--k must be between 1 and {}",
            textgnn::aggregate::NEIGHBOR_SLOTS
        )));
    }
    let log = in_file(&args.logs, read_click_log(open(&args.logs)?))?;
    let graph = BehaviorGraph::from_logs(log, args.threshold, args.k)?;
    write_graph(&graph, &args.out)?;
    print!("{}", graph.coverage());
    Ok(())
}

pub fn ann_complete(args: AnnComplete) -> Result<()> {
    let graph = read_graph(&args.graph)?;
    let opts = CompletionOptions {
        m: args.m,
        ef: args.ef,
        exhaustive: args.exhaustive,
        ..CompletionOptions::default()
    };
    let (completed, log) = match args.embedding {
        EmbeddingSource::Model => {
            let path = args
                .model
                .as_deref()
                .ok_or_else(|| CliError::Usage("--embedding model needs --model".into()))?;
            let model = load_model(path)?;
            complete_graph(&graph, |side, texts| model.encode_texts(side, texts, 256), opts)?
        }
        EmbeddingSource::Trigram => {
            if args.trigram_buckets == 0 {
                return Err(CliError::Usage("--trigram-buckets must be positive".into()));
            }
            let b = args.trigram_buckets;
            complete_graph(&graph, |_, texts| Ok(texts.iter().map(|t| trigram_embedding(t, b)).collect()), opts)?
        }
    };
    write_graph(&completed, &args.out)?;
    println!("before completion");
    print!("{}", graph.coverage());
    println!("after completion ({} nodes filled)", log.len());
    print!("{}", completed.coverage());
    Ok(())
}

fn build_vocab(rows: &[PairRow], graph: &BehaviorGraph, max_seq_len: usize) -> Result<Vocabulary> {
    let mut corpus: Vec<&str> = Vec::new();
    for r in rows {
        corpus.push(&r.query);
        corpus.push(&r.keyword);
        for (side, text) in [(Side::Query, &r.query), (Side::Keyword, &r.keyword)] {
            for n in graph.neighbors(side, text).unwrap_or_default() {
                corpus.push(&n.text);
            }
        }
    }
    Ok(Vocabulary::build(corpus, 1, VOCAB_MAX_SIZE, max_seq_len)?)
}

pub fn train(args: Train) -> Result<()> {
    let exp: ExperimentConfig = match &args.model_config {
        Some(p) => config::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut tcfg: TrainConfig = exp.train;
    if let Some(s) = args.stage {
        tcfg.stage = s.into();
    }
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        tcfg.learning_rate = lr;
    }
    tcfg.seed = resolve_seed(args.seed, tcfg.seed);
    tcfg.validate()?;

    let rows = read_pair_file(&args.pairs)?;
    let graph = read_graph_or_empty(args.graph.as_deref())?;
    let mut model = match &args.init {
        Some(p) => {
            if args.model_config.is_some() {
                log::warn!("--init given: the model section of --model-config is ignored");
            }
            load_model(p)?
        }
        None => {
            let vocab = match exp.model.encoder.kind {
                EncoderKind::MiniTransformer => Some(build_vocab(&rows, &graph, exp.model.encoder.max_seq_len)?),
                EncoderKind::Cdssm => None,
            };
            TextGnn::new(exp.model, vocab, tcfg.seed)?
        }
    };
    let examples = in_file(&args.pairs, examples_from_rows(&rows, &graph))?;

    let metadata = |epoch: usize, losses: &[f64]| -> BTreeMap<String, serde_json::Value> {
        BTreeMap::from([
            ("epoch".to_string(), json!(epoch)),
            ("epoch_losses".to_string(), json!(losses)),
            ("train".to_string(), json!(tcfg)),
        ])
    };
    let mut losses = Vec::with_capacity(tcfg.epochs);
    train_with(&mut model, &examples, &tcfg, |epoch, m, loss| {
        losses.push(loss);
        eprintln!("epoch {}/{}  loss {loss:.6}", epoch + 1, tcfg.epochs);
        checkpoint::save(m, tcfg.seed, metadata(epoch + 1, &losses), &args.out.join(format!("epoch-{:03}", epoch + 1)))
    })?;
    checkpoint::save(&model, tcfg.seed, metadata(tcfg.epochs, &losses), &args.out)?;
    println!("examples     {}", examples.len());
    println!("seed         {}", tcfg.seed);
    if let Some(last) = losses.last() {
        println!("final loss   {last:.6}");
    }
    println!("checkpoint   {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    scorer: &'static str,
    pairs: usize,
    positives: usize,
    roc_auc: f64,
    pr_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    subgroups: Option<SubgroupReport>,
}

pub fn eval(args: Eval) -> Result<()> {
    let rows = read_pair_file(&args.pairs)?;
    let labels = rows
        .iter()
        .enumerate()
        .map(|(i, r)| match r.binary() {
            Ok(Some(b)) => Ok(b),
            Ok(None) => Err(CliError::Data(format!(
                "{}: line {} has a teacher score, eval needs a grade or binary label",
                args.pairs.display(),
                i + 2
            ))),
            Err(e) => Err(CliError::Data(format!("{}: line {}: {e}", args.pairs.display(), i + 2))),
        })
        .collect::<Result<Vec<bool>>>()?;

    let (scorer, scores): (&'static str, Vec<f64>) = if let Some(world_cfg) = &args.oracle {
        let cfg: WorldConfig = config::load(world_cfg)?;
        let world = generate_world(&cfg)?;
        let scores = rows
            .iter()
            .map(|r| world.teacher.score(&r.query, &r.keyword))
            .collect::<textgnn::Result<Vec<f64>>>();
        ("oracle", in_file(&args.pairs, scores)?)
    } else {
        let model = load_model(args.model.as_deref().expect("clap enforces a scorer"))?;
        let graph = read_graph_or_empty(args.graph.as_deref())?;
        let examples = in_file(&args.pairs, examples_from_rows(&rows, &graph))?;
        let scores = predict(&model, &examples, args.batch_size)?;
        ("model", scores.into_iter().map(f64::from).collect())
    };

    let items: Vec<LabeledScore> = rows
        .iter()
        .zip(&scores)
        .zip(&labels)
        .map(|((r, &s), &l)| LabeledScore::grouped(s, l, r.keyword.clone()))
        .collect();
    let report = EvalReport {
        scorer,
        pairs: items.len(),
        positives: labels.iter().filter(|&&l| l).count(),
        roc_auc: roc_auc(&items)?,
        pr_auc: pr_auc(&items)?,
        subgroups: args.subgroups.then(|| subgroup_auc(&items)),
    };

    println!("scorer     {}", report.scorer);
    println!("pairs      {}", report.pairs);
    println!("positives  {}", report.positives);
    println!("roc_auc    {:.6}", report.roc_auc);
    println!("pr_auc     {:.6}", report.pr_auc);
    if let Some(s) = &report.subgroups {
        println!();
        print!("{s}");
    }
    if let Some(path) = &args.report {
        let mut w = create(path)?;
        serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
        w.write_all(b"\n").and_then(|_| w.flush()).map_err(Error::from)?;
    }
    Ok(())
}

pub fn infer(args: Infer) -> Result<()> {
    let model = load_model(&args.model)?;
    let graph = read_graph_or_empty(args.graph.as_deref())?;
    let node = |side: Side, text: &str| -> NodeInput { graph.node_input(side, text) };
    let q = node(Side::Query, &args.query);
    let k = node(Side::Keyword, &args.keyword);
    let score = model.score_pairs(&[(&q, &k)], 1)?[0];
    println!("{score}");
    Ok(())
}

pub fn export_embeddings(args: ExportEmbeddings) -> Result<()> {
    let model = load_model(&args.model)?;
    let graph = read_graph(&args.graph)?;
    let side: Side = args.side.into();
    let nodes: Vec<NodeInput> = graph.side(side).keys().map(|t| graph.node_input(side, t)).collect();
    if nodes.is_empty() {
        return Err(CliError::Data(format!("{}: no {} nodes", args.graph.display(), side.as_str())));
    }
    let table = export_tower_embeddings(&model, side, &nodes, args.batch_size)?;
    let mut w = create(&args.out)?;
    table.write(&mut w)?;
    println!("wrote {} {} vectors of dim {} to {}", table.len(), side.as_str(), table.dim, args.out.display());
    Ok(())
}
