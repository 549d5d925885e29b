use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Click-graph-aware twin-tower relevance models: data generation, graph
/// building, training, evaluation and export.
#[derive(Parser, Debug)]
#[command(name = "textgnn", version)]
struct Cli {
    /// Log level for diagnostics on stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: click log, training, fine-tuning and eval pairs.
    GenData(GenData),
    /// Aggregate a click log into a query-keyword behavior graph.
    BuildGraph(BuildGraph),
    /// Give neighborless nodes the click neighbors of their nearest embedded node.
    AnnComplete(AnnComplete),
    /// Train a model by distillation or fine-tuning.
    Train(Train),
    /// Score labeled pairs and report ROC-AUC, PR-AUC and frequency subgroups.
    Eval(Eval),
    /// Score a single query-keyword pair.
    Infer(Infer),
    /// Write tower vectors for every node on one side of a graph.
    ExportEmbeddings(ExportEmbeddings),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// World config JSON; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BuildGraph {
    /// Click log TSV: query, keyword, impressions, clicks.
    #[arg(long)]
    pub logs: PathBuf,
    #[arg(long, default_value_t = textgnn::graph::DEFAULT_THRESHOLD)]
    pub threshold: u64,
    #[arg(long, default_value_t = textgnn::graph::DEFAULT_K)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingSource {
    /// Center-encoder vectors of a trained checkpoint.
    Model,
    /// Hashed letter-trigram bags; needs no model.
    Trigram,
}

#[derive(Args, Debug)]
pub struct AnnComplete {
    #[arg(long)]
    pub graph: PathBuf,
    /// Checkpoint directory, required with `--embedding model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = EmbeddingSource::Model)]
    pub embedding: EmbeddingSource,
    #[arg(long, default_value_t = 4096)]
    pub trigram_buckets: usize,
    #[arg(long, default_value_t = textgnn::ann::DEFAULT_M)]
    pub m: usize,
    #[arg(long, default_value_t = textgnn::ann::DEFAULT_EF)]
    pub ef: usize,
    /// Scan every indexed node instead of searching the graph index.
    #[arg(long)]
    pub exhaustive: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Distill,
    Finetune,
}

#[derive(Args, Debug)]
pub struct Train {
    /// Pair TSV with a `teacher_score`, `binary_label` or `grade` column.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Behavior graph JSONL; without it every node is neighborless.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// JSON with `model` and `train` sections.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Continue from this checkpoint; its architecture and vocabulary win.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Checkpoint directory; per-epoch checkpoints go in `epoch-NNN` below it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("scorer").required(true).args(["model", "oracle"]))]
pub struct Eval {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Score with the teacher of the world described by this config
    /// (the `world.json` written by gen-data).
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Add the keyword-frequency subgroup table.
    #[arg(long)]
    pub subgroups: bool,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct Infer {
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub keyword: String,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Query,
    Keyword,
}

#[derive(Args, Debug)]
pub struct ExportEmbeddings {
    #[arg(long, value_enum, default_value_t = SideArg::Keyword)]
    pub side: SideArg,
    #[arg(long)]
    pub model: PathBuf,
    /// Graph whose nodes on `--side` are exported, with their neighbors.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::BuildGraph(a) => commands::build_graph(a),
        Command::AnnComplete(a) => commands::ann_complete(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<StageArg> for textgnn::train::Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Distill => textgnn::train::Stage::Distill,
            StageArg::Finetune => textgnn::train::Stage::Finetune,
        }
    }
}

impl From<SideArg> for textgnn::model::Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Query => textgnn::model::Side::Query,
            SideArg::Keyword => textgnn::model::Side::Keyword,
        }
    }
}
