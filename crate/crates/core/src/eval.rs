//! Mean reciprocal rank evaluation, the synthetic corpus used for desk-scale
//! checks, k sweeps and the single-query latency benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, Codebase, Fusion, SearchEngine, SearchMode};
use crate::corpus::{build_vocab, CodeId, IdSequence, RawPair, SequenceLimits, TokenKind, TokenSequence};
use crate::encoders::{CrossEncoder, DualEncoder};
use crate::error::{Error, Result};
use crate::index::build_index;
use crate::neural::ModelConfig;
use crate::training::EncodedPair;

/// Mean of `1/rank` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Expected MRR when the gold rank is uniform over `1..=n`.
pub fn random_mrr(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRank {
    pub id: CodeId,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: SearchMode,
    /// Ranker depth; only meaningful for `rr`.
    pub k: usize,
    pub fusion: Fusion,
    pub queries: usize,
    pub codebase_size: usize,
    /// In [0, 1].
    pub mrr: f64,
    pub ranks: Vec<QueryRank>,
}

impl EvalReport {
    /// MRR as a percentage, the usual way results are quoted.
    pub fn mrr_percent(&self) -> f64 {
        self.mrr * 100.0
    }
}

/// Gold rank of every query in the full ordering of `mode`.
pub fn evaluate(engine: &SearchEngine, test: &[EncodedPair], mode: SearchMode, cfg: &CascadeConfig) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(p) = test
        .iter()
        .find(|p| !engine.index.contains(p.id) || engine.codes.get(p.id).is_none())
    {
        return Err(Error::MissingGold(p.id));
    }
    let full = CascadeConfig { limit: None, ..*cfg };
    let ranks = test
        .par_iter()
        .map(|p| {
            let (res, _) = engine.run(mode, &p.query, &full)?;
            let rank = res.rank_of(p.id).ok_or(Error::MissingGold(p.id))?;
            Ok(QueryRank { id: p.id, rank })
        })
        .collect::<Result<Vec<_>>>()?;
    let value = mrr(&ranks.iter().map(|r| r.rank).collect::<Vec<_>>())?;
    Ok(EvalReport {
        mode,
        k: if mode == SearchMode::Rr { cfg.k } else { 0 },
        fusion: cfg.fusion,
        queries: ranks.len(),
        codebase_size: engine.index.len(),
        mrr: value,
        ranks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub vocab_size: usize,
    pub query_len: usize,
    /// Fraction of query tokens copied into the gold code.
    pub overlap: f64,
    /// Random tokens added to every code.
    pub distractor_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            pairs: 300,
            vocab_size: 1000,
            query_len: 8,
            overlap: 0.8,
            distractor_len: 8,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<RawPair>,
    pub test: Vec<RawPair>,
    /// Every code, train and test.
    pub codebase: Vec<(CodeId, String)>,
}

pub fn synthetic_token(i: usize) -> String {
    format!("t{i}")
}

/// Random token-string queries; each gold code holds `round(overlap·len)`
/// of its query's tokens plus `distractor_len` random ones, shuffled. Ids
/// are `0..pairs`; the last tenth (rounded) is the test split.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&spec.overlap) {
        return Err(Error::InvalidArgument(format!("overlap {} outside [0, 1]", spec.overlap)));
    }
    if spec.pairs == 0 || spec.vocab_size == 0 || spec.query_len == 0 {
        return Err(Error::InvalidArgument(
            "pairs, vocab size and query length must be positive".into(),
        ));
    }
    let copied = (spec.overlap * spec.query_len as f64).round() as usize;
    if copied + spec.distractor_len == 0 {
        return Err(Error::InvalidArgument("generated codes would be empty".into()));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.pairs);
    for id in 0..spec.pairs as CodeId {
        let query: Vec<usize> = (0..spec.query_len).map(|_| rng.random_range(0..spec.vocab_size)).collect();
        let mut code: Vec<usize> = index::sample(&mut rng, spec.query_len, copied)
            .into_iter()
            .map(|i| query[i])
            .collect();
        code.extend((0..spec.distractor_len).map(|_| rng.random_range(0..spec.vocab_size)));
        code.shuffle(&mut rng);
        let text = |toks: &[usize]| toks.iter().map(|&t| synthetic_token(t)).collect::<Vec<_>>().join(" ");
        pairs.push(RawPair {
            id,
            query: text(&query),
            code: text(&code),
        });
    }
    let n_test = ((spec.pairs as f64) * 0.1).round() as usize;
    let codebase = pairs.iter().map(|p| (p.id, p.code.clone())).collect();
    let test = pairs.split_off(spec.pairs - n_test);
    Ok(SyntheticCorpus {
        train: pairs,
        test,
        codebase,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub mrr: f64,
    pub mean_latency_ms: f64,
}

/// MRR and mean per-query latency for each `k`. Queries run one at a time;
/// the latency is the median over `repetitions` passes of the per-pass mean.
pub fn k_sweep(
    engine: &SearchEngine,
    test: &[EncodedPair],
    ks: &[usize],
    fusion: Fusion,
    repetitions: usize,
) -> Result<Vec<SweepRow>> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no k values to sweep".into()));
    }
    if test.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let repetitions = repetitions.max(1);
    ks.iter()
        .map(|&k| {
            let cfg = CascadeConfig { k, fusion, limit: None };
            let report = evaluate(engine, test, SearchMode::Rr, &cfg)?;
            let mut means = Vec::with_capacity(repetitions);
            for _ in 0..repetitions {
                let start = Instant::now();
                for p in test {
                    engine.search(&p.query, &cfg)?;
                }
                means.push(start.elapsed().as_secs_f64() * 1e3 / test.len() as f64);
            }
            Ok(SweepRow {
                k,
                mrr: report.mrr,
                mean_latency_ms: median(&mut means),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,mrr,mean_latency_ms\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.k, r.mrr, r.mean_latency_ms).expect("writing to a String");
    }
    out
}

fn median(xs: &mut [f64]) -> f64 {
    percentile(xs, 0.5)
}

/// Linear interpolation between closest ranks.
fn percentile(xs: &mut [f64], p: f64) -> f64 {
    xs.sort_unstable_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
}

/// Latency benchmark setup. The defaults use tiny untrained encoders with
/// long queries and short codes, so one query encoding costs about as much
/// as scanning 10,000 index rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub sizes: Vec<usize>,
    pub modes: Vec<SearchMode>,
    pub queries: usize,
    pub repetitions: usize,
    pub k: usize,
    /// Results returned per query.
    pub limit: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub query_len: usize,
    pub code_len: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            sizes: vec![1000, 10_000],
            modes: vec![SearchMode::Dual, SearchMode::Rr, SearchMode::CrossExhaustive],
            queries: 100,
            repetitions: 3,
            k: 10,
            limit: 10,
            dim: 4,
            vocab_size: 2000,
            query_len: 24,
            code_len: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size: usize,
    pub mode: SearchMode,
    pub queries: usize,
    pub repetitions: usize,
    /// Medians over repetitions of the per-pass statistic, milliseconds.
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Spread of the per-pass medians.
    pub median_min_ms: f64,
    pub median_max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub machine: String,
    pub spec: BenchSpec,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, size: usize, mode: SearchMode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.size == size && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "size,mode,queries,repetitions,mean_ms,median_ms,p95_ms,median_min_ms,median_max_ms\n",
        );
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.size, r.mode, r.queries, r.repetitions, r.mean_ms, r.median_ms, r.p95_ms, r.median_min_ms, r.median_max_ms
            )
            .expect("writing to a String");
        }
        out
    }
}

/// OS, architecture, logical CPUs and the CPU model when it can be read.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_owned())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} | {cpu} | {threads} logical cpus", std::env::consts::OS, std::env::consts::ARCH)
}

fn random_ids(rng: &mut Xoshiro256PlusPlus, len: usize, vocab_len: usize, kind: TokenKind) -> IdSequence {
    IdSequence {
        ids: (0..len).map(|_| rng.random_range(4..vocab_len as u32)).collect(),
        kind,
    }
}

/// Untrained toy encoders over random codebases of each size. Index
/// construction is excluded; queries run one at a time on a single thread.
pub fn bench_latency(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.sizes.is_empty() || spec.modes.is_empty() || spec.queries == 0 {
        return Err(Error::InvalidArgument("bench needs sizes, modes and queries".into()));
    }
    let tokens = TokenSequence {
        tokens: (0..spec.vocab_size).map(synthetic_token).collect(),
        kind: TokenKind::Code,
    };
    let vocab = build_vocab([&tokens], 1)?;
    let model = ModelConfig {
        dim: spec.dim,
        vocab_size: vocab.len(),
        max_pos: spec.query_len + spec.code_len + 2,
        seed: spec.seed,
    };
    let dual = DualEncoder::new(model, true)?;
    let cross = CrossEncoder::new(ModelConfig {
        seed: spec.seed.wrapping_add(1),
        ..model
    })?;
    let limits = SequenceLimits {
        query: spec.query_len,
        code: spec.code_len,
    };
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let queries: Vec<IdSequence> = (0..spec.queries)
        .map(|_| random_ids(&mut rng, spec.query_len, vocab.len(), TokenKind::Query))
        .collect();
    let mut engines = Vec::with_capacity(spec.sizes.len());
    for &size in &spec.sizes {
        let codes: Vec<(CodeId, IdSequence)> = (0..size as CodeId)
            .map(|id| (id, random_ids(&mut rng, spec.code_len, vocab.len(), TokenKind::Code)))
            .collect();
        let index = build_index(&codes, &dual)?;
        engines.push(SearchEngine::new(
            vocab.clone(),
            limits,
            dual.clone(),
            Some(cross.clone()),
            index,
            Codebase::new(codes)?,
        )?);
    }
    let cfg = CascadeConfig {
        k: spec.k,
        fusion: Fusion::CrossOnly,
        limit: Some(spec.limit),
    };
    let repetitions = spec.repetitions.max(1);
    // times[mode][size][pass][query]. Each query visits every mode and size
    // back to back so slow drift in machine speed hits all cells alike.
    let mut times = vec![vec![vec![Vec::with_capacity(queries.len()); repetitions]; engines.len()]; spec.modes.len()];
    single.install(|| -> Result<()> {
        for pass in 0..repetitions {
            for q in &queries {
                for (m, &mode) in spec.modes.iter().enumerate() {
                    for (e, engine) in engines.iter().enumerate() {
                        let start = Instant::now();
                        engine.run(mode, q, &cfg)?;
                        times[m][e][pass].push(start.elapsed().as_secs_f64() * 1e3);
                    }
                }
            }
        }
        Ok(())
    })?;

    let mut rows = Vec::new();
    for (e, &size) in spec.sizes.iter().enumerate() {
        for (m, &mode) in spec.modes.iter().enumerate() {
            let (mut means, mut medians, mut p95s) = (Vec::new(), Vec::new(), Vec::new());
            for pass in &mut times[m][e] {
                means.push(pass.iter().sum::<f64>() / pass.len() as f64);
                medians.push(median(pass));
                p95s.push(percentile(pass, 0.95));
            }
            rows.push(BenchRow {
                size,
                mode,
                queries: spec.queries,
                repetitions,
                mean_ms: median(&mut means),
                median_ms: median(&mut medians),
                p95_ms: median(&mut p95s),
                median_min_ms: medians[0],
                median_max_ms: medians[medians.len() - 1],
            });
        }
    }
    Ok(BenchReport {
        machine: machine_descriptor(),
        spec: spec.clone(),
        rows,
    })
}
