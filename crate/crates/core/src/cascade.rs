//! Retriever–ranker inference: the dual encoder retrieves `k` candidates from
//! the precomputed index and the cross encoder reorders them.

use std::collections::HashMap;
use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{text_to_ids, CodeId, IdSequence, SequenceLimits, TokenKind, Vocabulary};
use crate::encoders::{CrossEncoder, DualEncoder};
use crate::error::{Error, Result};
use crate::index::{hit_order, rank_scores, EmbeddingIndex, RankedHit};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Rank candidates by the cross-encoder score alone.
    #[default]
    CrossOnly,
    /// Average of min-max normalized dual and cross scores over the candidates.
    MeanDualCross,
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_only" | "cross-only" => Ok(Self::CrossOnly),
            "mean_dual_cross" | "mean-dual-cross" | "mean" => Ok(Self::MeanDualCross),
            other => Err(Error::InvalidArgument(format!("unknown fusion {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Number of retrieved candidates handed to the ranker.
    pub k: usize,
    pub fusion: Fusion,
    /// Length of the returned list; `None` ranks the whole codebase.
    pub limit: Option<usize>,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            fusion: Fusion::default(),
            limit: None,
        }
    }
}

/// Search strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Dual encoder over the precomputed index only.
    Dual,
    /// Dual retrieval followed by cross-encoder ranking of the top `k`.
    Rr,
    /// Cross encoder over every code.
    CrossExhaustive,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "rr" | "r2ps" => Ok(Self::Rr),
            "cross" | "cross_exhaustive" | "cross-exhaustive" => Ok(Self::CrossExhaustive),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Dual => "dual",
            Self::Rr => "rr",
            Self::CrossExhaustive => "cross_exhaustive",
        })
    }
}

/// Encoder forward-pass counters. Safe to share across threads.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    dual_query: AtomicU64,
    dual_code: AtomicU64,
    cross: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ForwardCounts {
    pub dual_query_forwards: u64,
    pub dual_code_forwards: u64,
    pub cross_forwards: u64,
}

impl ForwardCounts {
    pub fn dual_total(&self) -> u64 {
        self.dual_query_forwards + self.dual_code_forwards
    }
}

impl Sub for ForwardCounts {
    type Output = ForwardCounts;
    fn sub(self, rhs: Self) -> Self {
        Self {
            dual_query_forwards: self.dual_query_forwards - rhs.dual_query_forwards,
            dual_code_forwards: self.dual_code_forwards - rhs.dual_code_forwards,
            cross_forwards: self.cross_forwards - rhs.cross_forwards,
        }
    }
}

impl std::ops::Add for ForwardCounts {
    type Output = ForwardCounts;
    fn add(self, rhs: Self) -> Self {
        Self {
            dual_query_forwards: self.dual_query_forwards + rhs.dual_query_forwards,
            dual_code_forwards: self.dual_code_forwards + rhs.dual_code_forwards,
            cross_forwards: self.cross_forwards + rhs.cross_forwards,
        }
    }
}

impl ForwardCounters {
    pub fn add_dual_query(&self, n: u64) {
        self.dual_query.fetch_add(n, AtomicOrdering::Relaxed);
    }

    pub fn add_dual_code(&self, n: u64) {
        self.dual_code.fetch_add(n, AtomicOrdering::Relaxed);
    }

    pub fn add_cross(&self, n: u64) {
        self.cross.fetch_add(n, AtomicOrdering::Relaxed);
    }

    pub fn add(&self, counts: ForwardCounts) {
        self.add_dual_query(counts.dual_query_forwards);
        self.add_dual_code(counts.dual_code_forwards);
        self.add_cross(counts.cross_forwards);
    }

    pub fn snapshot(&self) -> ForwardCounts {
        ForwardCounts {
            dual_query_forwards: self.dual_query.load(AtomicOrdering::Relaxed),
            dual_code_forwards: self.dual_code.load(AtomicOrdering::Relaxed),
            cross_forwards: self.cross.load(AtomicOrdering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.dual_query.store(0, AtomicOrdering::Relaxed);
        self.dual_code.store(0, AtomicOrdering::Relaxed);
        self.cross.store(0, AtomicOrdering::Relaxed);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub retrieve: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub hits: Vec<RankedHit>,
    /// Milliseconds.
    pub timings: StageTimings,
}

impl SearchResult {
    pub fn rank_of(&self, id: CodeId) -> Option<usize> {
        self.hits.iter().find(|h| h.id == id).map(|h| h.rank)
    }
}

fn min_max(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    xs.iter()
        .map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

/// Final ranking scores for the candidates.
pub fn fuse(dual: &[f64], cross: &[f64], fusion: Fusion) -> Vec<f64> {
    match fusion {
        Fusion::CrossOnly => cross.to_vec(),
        Fusion::MeanDualCross => min_max(dual)
            .into_iter()
            .zip(min_max(cross))
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
    }
}

/// Reorders the first `cross_scores.len()` hits by fused score (ties by
/// ascending id) and keeps the remaining hits in dual order. Ranks are
/// reassigned from 1.
pub fn rerank(mut hits: Vec<RankedHit>, cross_scores: &[f64], fusion: Fusion) -> Vec<RankedHit> {
    let k = cross_scores.len().min(hits.len());
    let dual: Vec<f64> = hits[..k].iter().map(|h| h.score).collect();
    let fused = fuse(&dual, &cross_scores[..k], fusion);
    let mut head: Vec<(f64, CodeId)> = fused.into_iter().zip(hits[..k].iter().map(|h| h.id)).collect();
    head.sort_unstable_by(hit_order);
    for (slot, (score, id)) in hits.iter_mut().zip(head) {
        slot.id = id;
        slot.score = score;
    }
    for (i, h) in hits.iter_mut().enumerate() {
        h.rank = i + 1;
    }
    hits
}

/// Tokenized codes addressable by id.
#[derive(Debug, Clone, Default)]
pub struct Codebase {
    entries: Vec<(CodeId, IdSequence)>,
    rows: HashMap<CodeId, usize>,
}

impl Codebase {
    pub fn new(entries: Vec<(CodeId, IdSequence)>) -> Result<Self> {
        let mut rows = HashMap::with_capacity(entries.len());
        for (i, (id, _)) in entries.iter().enumerate() {
            if rows.insert(*id, i).is_some() {
                return Err(Error::DuplicateId(*id));
            }
        }
        Ok(Self { entries, rows })
    }

    /// Tokenizes and encodes raw `(id, code)` text.
    pub fn from_text(codes: &[(CodeId, String)], vocab: &Vocabulary, limits: &SequenceLimits) -> Result<Self> {
        let entries = codes
            .iter()
            .map(|(id, text)| {
                text_to_ids(text, TokenKind::Code, vocab, limits)
                    .map(|seq| (*id, seq))
                    .map_err(|e| Error::Unencodable {
                        id: *id,
                        source: Box::new(e),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn get(&self, id: CodeId) -> Option<&IdSequence> {
        self.rows.get(&id).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(CodeId, IdSequence)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Models, index and codebase wired together for query-time search.
/// Immutable after construction apart from the atomic counters.
#[derive(Debug)]
pub struct SearchEngine {
    pub vocab: Vocabulary,
    pub limits: SequenceLimits,
    pub dual: DualEncoder,
    pub cross: Option<CrossEncoder>,
    pub index: EmbeddingIndex,
    pub codes: Codebase,
    counters: ForwardCounters,
}

impl SearchEngine {
    pub fn new(
        vocab: Vocabulary,
        limits: SequenceLimits,
        dual: DualEncoder,
        cross: Option<CrossEncoder>,
        index: EmbeddingIndex,
        codes: Codebase,
    ) -> Result<Self> {
        if index.dim() != dual.dim() {
            return Err(Error::DimensionMismatch {
                expected: dual.dim(),
                actual: index.dim(),
            });
        }
        for model in [Some(&dual.params), cross.as_ref().map(|c| &c.params)].into_iter().flatten() {
            if model.config.vocab_size != vocab.len() {
                return Err(Error::InvalidArgument(format!(
                    "model vocabulary size {} differs from vocabulary file ({})",
                    model.config.vocab_size,
                    vocab.len()
                )));
            }
        }
        if let Some(c) = &cross {
            if c.dim() != dual.dim() {
                return Err(Error::DimensionMismatch {
                    expected: dual.dim(),
                    actual: c.dim(),
                });
            }
        }
        if let Some(&missing) = index.ids().iter().find(|id| codes.get(**id).is_none()) {
            return Err(Error::InvalidArgument(format!("index id {missing} has no code in the codebase")));
        }
        Ok(Self {
            vocab,
            limits,
            dual,
            cross,
            index,
            codes,
            counters: ForwardCounters::default(),
        })
    }

    /// Cumulative counters over every search served by this engine.
    pub fn counters(&self) -> &ForwardCounters {
        &self.counters
    }

    pub fn encode_query(&self, text: &str) -> Result<IdSequence> {
        text_to_ids(text, TokenKind::Query, &self.vocab, &self.limits)
    }

    fn require_cross(&self) -> Result<&CrossEncoder> {
        self.cross
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this search needs a cross-encoder checkpoint".into()))
    }

    /// Retrieve with the dual encoder, rank the top `k` with the cross
    /// encoder, keep the tail in dual order. `k = 0` is the pure dual ranking.
    pub fn search(&self, query: &IdSequence, cfg: &CascadeConfig) -> Result<SearchResult> {
        Ok(self.counted_search(query, cfg)?.0)
    }

    pub fn search_text(&self, text: &str, cfg: &CascadeConfig) -> Result<SearchResult> {
        self.search(&self.encode_query(text)?, cfg)
    }

    /// As [`search`](Self::search), also returning the forward passes this
    /// call performed.
    pub fn counted_search(&self, query: &IdSequence, cfg: &CascadeConfig) -> Result<(SearchResult, ForwardCounts)> {
        let n = self.index.len();
        let k = cfg.k.min(n);
        let depth = cfg.limit.map_or(n, |l| l.max(k));
        let mut counts = ForwardCounts::default();

        let start = Instant::now();
        let q = self.dual.encode(query)?;
        counts.dual_query_forwards += 1;
        let hits = self.index.top_k(&q, depth)?;
        let retrieve = start.elapsed();

        let start = Instant::now();
        let hits = if k > 0 {
            let cross = self.require_cross()?;
            let scores = hits[..k]
                .iter()
                .map(|h| {
                    let code = self.codes.get(h.id).expect("index ids are checked at construction");
                    cross.score(query, code)
                })
                .collect::<Result<Vec<_>>>()?;
            counts.cross_forwards += k as u64;
            let mut hits = rerank(hits, &scores, cfg.fusion);
            hits.truncate(cfg.limit.unwrap_or(n));
            hits
        } else {
            hits
        };
        let rank = start.elapsed();
        self.counters.add(counts);
        Ok((
            SearchResult {
                hits,
                timings: StageTimings {
                    retrieve: retrieve.as_secs_f64() * 1e3,
                    rank: rank.as_secs_f64() * 1e3,
                },
            },
            counts,
        ))
    }

    /// Scores every code in the codebase with the cross encoder.
    pub fn search_cross_exhaustive(&self, query: &IdSequence, limit: Option<usize>) -> Result<SearchResult> {
        Ok(self.counted_cross_exhaustive(query, limit)?.0)
    }

    pub fn counted_cross_exhaustive(
        &self,
        query: &IdSequence,
        limit: Option<usize>,
    ) -> Result<(SearchResult, ForwardCounts)> {
        let cross = self.require_cross()?;
        let start = Instant::now();
        let scored = self
            .codes
            .entries()
            .iter()
            .map(|(id, code)| cross.score(query, code).map(|s| (s, *id)))
            .collect::<Result<Vec<_>>>()?;
        let counts = ForwardCounts {
            cross_forwards: scored.len() as u64,
            ..Default::default()
        };
        let depth = limit.unwrap_or(scored.len());
        let hits = rank_scores(scored, depth);
        self.counters.add(counts);
        Ok((
            SearchResult {
                hits,
                timings: StageTimings {
                    retrieve: 0.0,
                    rank: start.elapsed().as_secs_f64() * 1e3,
                },
            },
            counts,
        ))
    }

    /// Dispatches on `mode`; `cfg.k` only matters for [`SearchMode::Rr`].
    pub fn run(&self, mode: SearchMode, query: &IdSequence, cfg: &CascadeConfig) -> Result<(SearchResult, ForwardCounts)> {
        match mode {
            SearchMode::Dual => self.counted_search(query, &CascadeConfig { k: 0, ..*cfg }),
            SearchMode::Rr => self.counted_search(query, cfg),
            SearchMode::CrossExhaustive => self.counted_cross_exhaustive(query, cfg.limit),
        }
    }
}
