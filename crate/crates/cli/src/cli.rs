//! Command-line grammar. Every option that mirrors a config field is
//! optional here; `None` keeps the config value.

use std::net::IpAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rrsearch::cascade::{Fusion, SearchMode};

use crate::config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "rrsearch", version, about = "Retriever-ranker neural code search")]
pub struct Cli {
    /// JSON config file. Flags override its fields.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/test/codebase corpus.
    Synth(SynthArgs),
    /// Build a vocabulary from the training pairs.
    BuildVocab(CommonArgs),
    /// Train the dual encoder with in-batch negatives.
    TrainDual(TrainArgs),
    /// Train dual and cross encoders together with in-batch negatives.
    TrainRr(TrainArgs),
    /// Embed the codebase with the dual encoder.
    BuildIndex(CommonArgs),
    /// Train the cross encoder on rank-window negatives from the dual encoder.
    TrainCross(TrainCrossArgs),
    /// Answer one query.
    Search(SearchArgs),
    /// Mean reciprocal rank over a test set.
    Eval(EvalArgs),
    /// MRR and latency for several retrieval depths.
    SweepK(SweepArgs),
    /// Latency scaling benchmark with untrained toy encoders.
    Bench(BenchArgs),
    /// HTTP search endpoint.
    Serve(ServeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::BuildVocab(_) => "build-vocab",
            Command::TrainDual(_) => "train-dual",
            Command::TrainRr(_) => "train-rr",
            Command::BuildIndex(_) => "build-index",
            Command::TrainCross(_) => "train-cross",
            Command::Search(_) => "search",
            Command::Eval(_) => "eval",
            Command::SweepK(_) => "sweep-k",
            Command::Bench(_) => "bench",
            Command::Serve(_) => "serve",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Receives train.jsonl, test.jsonl and codebase.jsonl.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub query_len: Option<usize>,
    /// Fraction of query tokens copied into the gold code.
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub distractor_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PathArgs {
    /// Training pairs (JSONL).
    #[arg(long, value_name = "FILE")]
    pub train: Option<PathBuf>,
    /// Held-out pairs (JSONL).
    #[arg(long, value_name = "FILE")]
    pub test: Option<PathBuf>,
    /// Searchable codes (JSONL with id and code).
    #[arg(long, value_name = "FILE")]
    pub codebase: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    /// Dual-encoder checkpoint.
    #[arg(long, value_name = "FILE")]
    pub dual: Option<PathBuf>,
    /// Cross-encoder checkpoint.
    #[arg(long, value_name = "FILE")]
    pub cross: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub index: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    /// Parameter initialization seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub min_freq: Option<usize>,
    #[arg(long)]
    pub max_query_len: Option<usize>,
    #[arg(long)]
    pub max_code_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Negatives per query.
    #[arg(long)]
    pub n_neg: Option<usize>,
    /// Shuffling and sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainCrossArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// First rank (1-based, gold removed) of the sampling window.
    #[arg(long)]
    pub ps_start: Option<usize>,
    #[arg(long)]
    pub ps_window: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CascadeArgs {
    /// Codes passed to the cross encoder. 0 ranks with the dual encoder only.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub cascade: CascadeArgs,
    /// Results to print. Never fewer than k.
    #[arg(long, short = 'n')]
    pub limit: Option<usize>,
    #[arg(long, default_value = "rr")]
    pub mode: SearchMode,
    /// Print the same JSON body the HTTP endpoint returns.
    #[arg(long)]
    pub json: bool,
    pub query: String,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub cascade: CascadeArgs,
    /// Defaults to rr when a cross encoder is configured, dual otherwise.
    #[arg(long)]
    pub mode: Option<SearchMode>,
    /// Write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_delimiter = ',', default_value = "0,1,5,10,20,50,100")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    /// CSV destination. Printed to stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination. Printed to stdout when absent.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub cascade: CascadeArgs,
    #[arg(long)]
    pub bind: Option<IpAddr>,
    #[arg(long)]
    pub port: Option<u16>,
}

impl PathArgs {
    pub fn apply(&self, cfg: &mut AppConfig) {
        let p = &mut cfg.paths;
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut p.train, &self.train);
        set(&mut p.test, &self.test);
        set(&mut p.codebase, &self.codebase);
        set(&mut p.vocab, &self.vocab);
        set(&mut p.dual, &self.dual);
        set(&mut p.cross, &self.cross);
        set(&mut p.index, &self.index);
    }
}

impl CommonArgs {
    pub fn apply(&self, cfg: &mut AppConfig) {
        self.paths.apply(cfg);
        let m = &self.model;
        if let Some(v) = m.dim {
            cfg.model.dim = v;
        }
        if let Some(v) = m.init_seed {
            cfg.model.seed = v;
        }
        if let Some(v) = m.min_freq {
            cfg.model.min_freq = v;
        }
        if let Some(v) = m.max_query_len {
            cfg.limits.query = v;
        }
        if let Some(v) = m.max_code_len {
            cfg.limits.code = v;
        }
    }
}

impl OptimArgs {
    pub fn apply(&self, t: &mut rrsearch::training::TrainingConfig) {
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.temperature {
            t.temperature = v;
        }
        if let Some(v) = self.n_neg {
            t.n_neg = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
    }
}

impl CascadeArgs {
    pub fn apply(&self, cfg: &mut AppConfig) {
        if let Some(k) = self.k {
            cfg.cascade.k = k;
        }
        if let Some(f) = self.fusion {
            cfg.cascade.fusion = f;
        }
    }
}
