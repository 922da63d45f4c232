use std::fs;
use std::path::Path;

use rrsearch::cascade::{CascadeConfig, Codebase, SearchEngine, SearchMode};
use rrsearch::corpus::{
    build_vocab, load_codebase, load_dataset, tokenize, write_codebase, write_dataset, RawPair, TokenKind, Vocabulary,
};
use rrsearch::encoders::{CrossEncoder, DualEncoder};
use rrsearch::eval::{bench_latency, evaluate, k_sweep, sweep_csv, synth_corpus, BenchSpec, SyntheticSpec};
use rrsearch::index::{build_index, EmbeddingIndex};
use rrsearch::training::{encode_pairs, train_cross, train_dual, train_rr_joint, EncodedPair, TrainingReport};
use serde::{Deserialize, Serialize};

use crate::cli::{BenchArgs, Command, EvalArgs, SearchArgs, SweepArgs, SynthArgs, TrainArgs, TrainCrossArgs};
use crate::config::{require, AppConfig};
use crate::error::CliError;

pub type CliResult<T = ()> = Result<T, CliError>;

/// Runs one parsed subcommand against `cfg`, which already holds the
/// contents of `--config` (or defaults).
pub fn run(command: Command, mut cfg: AppConfig) -> CliResult {
    match command {
        Command::Synth(args) => synth(&args),
        Command::BuildVocab(args) => {
            args.apply(&mut cfg);
            cfg.validate()?;
            build_vocab_cmd(&cfg)
        }
        Command::TrainDual(args) => {
            apply_train(&args, &mut cfg);
            cfg.validate()?;
            train_dual_cmd(&cfg)
        }
        Command::TrainRr(args) => {
            apply_train(&args, &mut cfg);
            cfg.validate()?;
            train_rr_cmd(&cfg)
        }
        Command::BuildIndex(args) => {
            args.apply(&mut cfg);
            cfg.validate()?;
            build_index_cmd(&cfg)
        }
        Command::TrainCross(args) => {
            apply_train_cross(&args, &mut cfg);
            cfg.validate()?;
            train_cross_cmd(&cfg)
        }
        Command::Search(args) => {
            args.common.apply(&mut cfg);
            args.cascade.apply(&mut cfg);
            if let Some(n) = args.limit {
                cfg.cascade.limit = Some(n);
            }
            cfg.validate()?;
            search_cmd(&cfg, &args)
        }
        Command::Eval(args) => {
            args.common.apply(&mut cfg);
            args.cascade.apply(&mut cfg);
            cfg.validate()?;
            eval_cmd(&cfg, &args)
        }
        Command::SweepK(args) => {
            args.common.apply(&mut cfg);
            if let Some(f) = args.fusion {
                cfg.cascade.fusion = f;
            }
            cfg.validate()?;
            sweep_cmd(&cfg, &args)
        }
        Command::Bench(args) => bench_cmd(&args),
        Command::Serve(args) => {
            args.common.apply(&mut cfg);
            args.cascade.apply(&mut cfg);
            if let Some(b) = args.bind {
                cfg.bind = b;
            }
            if let Some(p) = args.port {
                cfg.port = p;
            }
            cfg.validate()?;
            crate::server::serve(&cfg)
        }
    }
}

fn apply_train(args: &TrainArgs, cfg: &mut AppConfig) {
    args.common.apply(cfg);
    args.optim.apply(&mut cfg.training);
    if let Some(c) = cfg.cross_training.as_mut() {
        args.optim.apply(c);
    }
}

fn apply_train_cross(args: &TrainCrossArgs, cfg: &mut AppConfig) {
    args.common.apply(cfg);
    let mut t = *cfg.cross_training();
    args.optim.apply(&mut t);
    cfg.cross_training = Some(t);
    if let Some(v) = args.optim.n_neg {
        cfg.ps.n_neg = v;
    }
    if let Some(v) = args.ps_start {
        cfg.ps.start_rank = v;
    }
    if let Some(v) = args.ps_window {
        cfg.ps.window = v;
    }
}

fn synth(args: &SynthArgs) -> CliResult {
    let spec = args.spec();
    let corpus = synth_corpus(&spec)?;
    fs::create_dir_all(&args.out_dir).map_err(rrsearch::Error::from)?;
    write_dataset(&args.out_dir.join("train.jsonl"), &corpus.train)?;
    write_dataset(&args.out_dir.join("test.jsonl"), &corpus.test)?;
    write_codebase(&args.out_dir.join("codebase.jsonl"), &corpus.codebase)?;
    println!(
        "wrote {} train, {} test, {} codes to {}",
        corpus.train.len(),
        corpus.test.len(),
        corpus.codebase.len(),
        args.out_dir.display()
    );
    Ok(())
}

pub fn load_vocab(cfg: &AppConfig) -> CliResult<Vocabulary> {
    Ok(Vocabulary::load(require(&cfg.paths.vocab, "vocab")?)?)
}

fn load_pairs(path: &Path, vocab: &Vocabulary, cfg: &AppConfig) -> CliResult<Vec<EncodedPair>> {
    Ok(encode_pairs(&load_dataset(path)?, vocab, &cfg.limits)?)
}

fn build_vocab_cmd(cfg: &AppConfig) -> CliResult {
    let train = require(&cfg.paths.train, "train")?;
    let out = require(&cfg.paths.vocab, "vocab")?;
    let pairs = load_dataset(train)?;
    let vocab = vocab_from_pairs(&pairs, cfg.model.min_freq)?;
    vocab.save(out)?;
    println!("vocabulary of {} entries written to {}", vocab.len(), out.display());
    Ok(())
}

/// Queries and codes of the training pairs. Pairs whose text yields no
/// tokens are skipped, as they would be at encoding time.
pub fn vocab_from_pairs(pairs: &[RawPair], min_freq: usize) -> CliResult<Vocabulary> {
    let mut seqs = Vec::with_capacity(pairs.len() * 2);
    for p in pairs {
        if let (Ok(q), Ok(c)) = (tokenize(&p.query, TokenKind::Query), tokenize(&p.code, TokenKind::Code)) {
            seqs.push(q);
            seqs.push(c);
        }
    }
    Ok(build_vocab(&seqs, min_freq)?)
}

fn print_report(label: &str, report: &TrainingReport) {
    for (epoch, loss) in report.epoch_losses.iter().enumerate() {
        println!("{label} epoch {} loss {loss:.6}", epoch + 1);
    }
}

fn train_dual_cmd(cfg: &AppConfig) -> CliResult {
    let train = require(&cfg.paths.train, "train")?;
    let out = require(&cfg.paths.dual, "dual")?;
    let vocab = load_vocab(cfg)?;
    let pairs = load_pairs(train, &vocab, cfg)?;
    let init = DualEncoder::new(cfg.model_config(vocab.len(), cfg.model.seed), cfg.model.normalize)?;
    let (dual, report) = train_dual(&pairs, init, &cfg.training)?;
    print_report("dual", &report);
    dual.save(out)?;
    println!("dual encoder written to {}", out.display());
    Ok(())
}

fn train_rr_cmd(cfg: &AppConfig) -> CliResult {
    let train = require(&cfg.paths.train, "train")?;
    let dual_out = require(&cfg.paths.dual, "dual")?;
    let cross_out = require(&cfg.paths.cross, "cross")?;
    let vocab = load_vocab(cfg)?;
    let pairs = load_pairs(train, &vocab, cfg)?;
    let dual = DualEncoder::new(cfg.model_config(vocab.len(), cfg.model.seed), cfg.model.normalize)?;
    let cross = CrossEncoder::new(cfg.model_config(vocab.len(), cfg.model.seed + 1))?;
    let (dual, cross, report) = train_rr_joint(&pairs, dual, cross, &cfg.training)?;
    print_report("dual", &report.dual);
    print_report("cross", &report.cross);
    dual.save(dual_out)?;
    cross.save(cross_out)?;
    println!("dual encoder written to {}, cross encoder to {}", dual_out.display(), cross_out.display());
    Ok(())
}

fn build_index_cmd(cfg: &AppConfig) -> CliResult {
    let codes = require(&cfg.paths.codebase, "codebase")?;
    let out = require(&cfg.paths.index, "index")?;
    let vocab = load_vocab(cfg)?;
    let dual = DualEncoder::load(require(&cfg.paths.dual, "dual")?)?;
    let codebase = Codebase::from_text(&load_codebase(codes)?, &vocab, &cfg.limits)?;
    let index = build_index(codebase.entries(), &dual)?;
    index.save(out)?;
    println!("index of {} codes written to {}", index.len(), out.display());
    Ok(())
}

fn train_cross_cmd(cfg: &AppConfig) -> CliResult {
    let train = require(&cfg.paths.train, "train")?;
    let out = require(&cfg.paths.cross, "cross")?;
    let vocab = load_vocab(cfg)?;
    let dual = DualEncoder::load(require(&cfg.paths.dual, "dual")?)?;
    let pairs = load_pairs(train, &vocab, cfg)?;
    let codes: Vec<_> = pairs.iter().map(|p| (p.id, p.code.clone())).collect();
    let index = build_index(&codes, &dual)?;
    let init = CrossEncoder::new(cfg.model_config(vocab.len(), cfg.model.seed + 1))?;
    let (cross, report) = train_cross(&pairs, &dual, &index, init, cfg.cross_training(), &cfg.ps)?;
    print_report("cross", &report);
    cross.save(out)?;
    println!("cross encoder written to {}", out.display());
    Ok(())
}

/// Loads vocabulary, encoders, index and codebase. The cross encoder is
/// optional; without one only `k = 0` cascades and dual mode work.
pub fn load_engine(cfg: &AppConfig) -> CliResult<SearchEngine> {
    let index_path = require(&cfg.paths.index, "index")?;
    let codes_path = require(&cfg.paths.codebase, "codebase")?;
    let dual_path = require(&cfg.paths.dual, "dual")?;
    let vocab = load_vocab(cfg)?;
    let dual = DualEncoder::load(dual_path)?;
    let cross = cfg.paths.cross.as_deref().map(CrossEncoder::load).transpose()?;
    let index = EmbeddingIndex::load(index_path)?;
    index.check_fingerprint(&dual)?;
    let codes = Codebase::from_text(&load_codebase(codes_path)?, &vocab, &cfg.limits)?;
    Ok(SearchEngine::new(vocab, cfg.limits, dual, cross, index, codes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitBody {
    pub id: u64,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingsBody {
    pub retrieve: f64,
    pub rank: f64,
}

/// JSON body shared by `search --json` and `GET /search`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBody {
    pub query: String,
    pub results: Vec<HitBody>,
    pub timings_ms: TimingsBody,
}

/// Default number of results when neither the request nor the config sets one.
pub const DEFAULT_RESULTS: usize = 10;

/// Cascade settings for one request: at least `k` results, and
/// `DEFAULT_RESULTS` unless a limit is given.
pub fn request_config(base: &CascadeConfig, k: Option<usize>, limit: Option<usize>) -> CascadeConfig {
    let k = k.unwrap_or(base.k);
    let n = limit.or(base.limit).unwrap_or(DEFAULT_RESULTS);
    CascadeConfig {
        k,
        fusion: base.fusion,
        limit: Some(n.max(k)),
    }
}

pub fn search_body(engine: &SearchEngine, mode: SearchMode, query: &str, cfg: &CascadeConfig) -> CliResult<SearchBody> {
    let ids = engine.encode_query(query)?;
    let (result, _) = engine.run(mode, &ids, cfg)?;
    Ok(SearchBody {
        query: query.to_owned(),
        results: result
            .hits
            .iter()
            .map(|h| HitBody {
                id: h.id,
                score: h.score,
                rank: h.rank,
            })
            .collect(),
        timings_ms: TimingsBody {
            retrieve: result.timings.retrieve,
            rank: result.timings.rank,
        },
    })
}

fn search_cmd(cfg: &AppConfig, args: &SearchArgs) -> CliResult {
    let engine = load_engine(cfg)?;
    let req = request_config(&cfg.cascade, None, None);
    let body = search_body(&engine, args.mode, &args.query, &req)?;
    if args.json {
        println!("{}", serde_json::to_string(&body).map_err(rrsearch::Error::from)?);
    } else {
        for h in &body.results {
            println!("{}\t{}\t{:.6}", h.rank, h.id, h.score);
        }
    }
    Ok(())
}

fn eval_cmd(cfg: &AppConfig, args: &EvalArgs) -> CliResult {
    let engine = load_engine(cfg)?;
    let test = load_pairs(require(&cfg.paths.test, "test")?, &engine.vocab, cfg)?;
    let mode = args.mode.unwrap_or(if engine.cross.is_some() {
        SearchMode::Rr
    } else {
        SearchMode::Dual
    });
    let report = evaluate(&engine, &test, mode, &cfg.cascade)?;
    if let Some(out) = &args.out {
        let json = serde_json::to_string_pretty(&report).map_err(rrsearch::Error::from)?;
        fs::write(out, json).map_err(rrsearch::Error::from)?;
    }
    println!(
        "MRR {:.6} ({mode}, k={}, {} queries over {} codes)",
        report.mrr, report.k, report.queries, report.codebase_size
    );
    Ok(())
}

fn sweep_cmd(cfg: &AppConfig, args: &SweepArgs) -> CliResult {
    let engine = load_engine(cfg)?;
    let test = load_pairs(require(&cfg.paths.test, "test")?, &engine.vocab, cfg)?;
    let rows = k_sweep(&engine, &test, &args.ks, cfg.cascade.fusion, args.repetitions)?;
    emit_csv(&sweep_csv(&rows), args.out.as_deref())
}

fn bench_cmd(args: &BenchArgs) -> CliResult {
    let mut spec = BenchSpec::default();
    if let Some(s) = &args.sizes {
        spec.sizes.clone_from(s);
    }
    if let Some(v) = args.queries {
        spec.queries = v;
    }
    if let Some(v) = args.repetitions {
        spec.repetitions = v;
    }
    if let Some(v) = args.k {
        spec.k = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let report = bench_latency(&spec)?;
    eprintln!("{}", report.machine);
    emit_csv(&report.to_csv(), args.out.as_deref())
}

fn emit_csv(csv: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => fs::write(path, csv).map_err(rrsearch::Error::from)?,
        None => print!("{csv}"),
    }
    Ok(())
}

impl SynthArgs {
    pub fn spec(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            pairs: self.pairs.unwrap_or(d.pairs),
            vocab_size: self.vocab_size.unwrap_or(d.vocab_size),
            query_len: self.query_len.unwrap_or(d.query_len),
            overlap: self.overlap.unwrap_or(d.overlap),
            distractor_len: self.distractor_len.unwrap_or(d.distractor_len),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}
