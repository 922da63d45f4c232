//! Precomputed code-embedding matrix with exact brute-force retrieval.
//!
//! File layout:
//!
//! ```text
//! b"R2PSIDX1"
//! u32 LE   header length
//! JSON     {"dim", "count", "normalized", "fingerprint", "ids": [...]}
//! f32 LE   count × dim, row-major
//! ```

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::ForwardCounters;
use crate::corpus::{CodeId, IdSequence};
use crate::encoders::{DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::neural::split_container;

pub const INDEX_MAGIC: &[u8; 8] = b"R2PSIDX1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankedHit {
    pub id: CodeId,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Descending score, then ascending id.
pub fn hit_order(a: &(f64, CodeId), b: &(f64, CodeId)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Sorts `(score, id)` pairs best-first and keeps the first `k`.
pub fn rank_scores(mut scored: Vec<(f64, CodeId)>, k: usize) -> Vec<RankedHit> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, hit_order);
        scored.truncate(k);
    }
    scored.sort_unstable_by(hit_order);
    scored
        .into_iter()
        .enumerate()
        .map(|(i, (score, id))| RankedHit { id, score, rank: i + 1 })
        .collect()
}

/// Maximum over eight independent lanes so the loop vectorizes.
fn block_max(xs: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for j in 0..8 {
            if c[j] > lanes[j] {
                lanes[j] = c[j];
            }
        }
    }
    chunks
        .remainder()
        .iter()
        .chain(&lanes)
        .fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    dim: usize,
    count: usize,
    normalized: bool,
    fingerprint: String,
    ids: Vec<CodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<CodeId>,
    dim: usize,
    /// Row-major f32 rows exactly as persisted; scoring widens to f64.
    data: Vec<f32>,
    /// The same values dimension-major, for scanning.
    columns: Vec<f32>,
    normalized: bool,
    fingerprint: String,
    rows: HashMap<CodeId, usize>,
}

impl EmbeddingIndex {
    pub fn from_embeddings(
        ids: Vec<CodeId>,
        embeddings: &[Embedding],
        normalized: bool,
        fingerprint: String,
    ) -> Result<Self> {
        let dim = embeddings.first().map_or(0, Embedding::dim);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for e in embeddings {
            if e.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: e.dim(),
                });
            }
            data.extend(e.0.iter().map(|&x| x as f32));
        }
        Self::from_parts(ids, dim, data, normalized, fingerprint)
    }

    fn from_parts(ids: Vec<CodeId>, dim: usize, data: Vec<f32>, normalized: bool, fingerprint: String) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::Format(format!(
                "{} values for {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        let mut rows = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if rows.insert(id, row).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        let n = ids.len();
        let mut columns = vec![0.0; data.len()];
        for (i, row) in data.chunks_exact(dim.max(1)).enumerate() {
            for (j, &x) in row.iter().enumerate() {
                columns[j * n + i] = x;
            }
        }
        Ok(Self {
            ids,
            dim,
            data,
            columns,
            normalized,
            fingerprint,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[CodeId] {
        &self.ids
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn row_of(&self, id: CodeId) -> Option<usize> {
        self.rows.get(&id).copied()
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn contains(&self, id: CodeId) -> bool {
        self.rows.contains_key(&id)
    }

    /// Dot product of `q` with every row, in row order.
    pub fn scores(&self, q: &Embedding) -> Result<Vec<f64>> {
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        // Accumulate one dimension at a time over all rows. Each row is still
        // summed in dimension order from -0.0, like an iterator sum, so the
        // result is bit-identical to a per-row dot product.
        let n = self.len();
        let mut out = vec![-0.0f64; n];
        for (column, &x) in self.columns.chunks_exact(n.max(1)).zip(q.as_slice()) {
            for (o, &c) in out.iter_mut().zip(column) {
                *o += c as f64 * x;
            }
        }
        Ok(out)
    }

    /// Exact top `min(k, N)` rows by descending score, ties by ascending id.
    pub fn top_k(&self, q: &Embedding, k: usize) -> Result<Vec<RankedHit>> {
        let scores = self.scores(q)?;
        let k = k.min(scores.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k.saturating_mul(16) >= scores.len() {
            let scored = scores.into_iter().zip(self.ids.iter().copied()).collect();
            return Ok(rank_scores(scored, k));
        }
        // Few hits wanted: keep a sorted buffer of the best so far. Blocks
        // whose maximum falls below the current k-th best are skipped whole.
        const BLOCK: usize = 64;
        let mut best: Vec<(f64, CodeId)> = Vec::with_capacity(k + 1);
        let mut floor = f64::NEG_INFINITY;
        for (b, block) in scores.chunks(BLOCK).enumerate() {
            if block_max(block) < floor {
                continue;
            }
            for (i, &s) in block.iter().enumerate() {
                if s < floor {
                    continue;
                }
                let hit = (s, self.ids[b * BLOCK + i]);
                let at = best.partition_point(|h| hit_order(h, &hit) == Ordering::Less);
                if at == k {
                    continue;
                }
                best.insert(at, hit);
                best.truncate(k);
                if best.len() == k {
                    floor = best[k - 1].0;
                }
            }
        }
        Ok(best
            .into_iter()
            .enumerate()
            .map(|(i, (score, id))| RankedHit { id, score, rank: i + 1 })
            .collect())
    }

    /// Every code, best first.
    pub fn full_ranking(&self, q: &Embedding) -> Result<Vec<RankedHit>> {
        self.top_k(q, self.len())
    }

    /// Errors with [`Error::FingerprintMismatch`] when `dual` is not the
    /// checkpoint this index was built from.
    pub fn check_fingerprint(&self, dual: &DualEncoder) -> Result<()> {
        let model = dual.fingerprint()?;
        if model != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                index: self.fingerprint.clone(),
                model,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&IndexHeader {
            dim: self.dim,
            count: self.ids.len(),
            normalized: self.normalized,
            fingerprint: self.fingerprint.clone(),
            ids: self.ids.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + self.data.len() * 4);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_container(bytes, INDEX_MAGIC)?;
        let header: IndexHeader =
            serde_json::from_slice(header).map_err(|e| Error::Format(format!("index header: {e}")))?;
        if header.count != header.ids.len() {
            return Err(Error::Format(format!(
                "header count {} but {} ids",
                header.count,
                header.ids.len()
            )));
        }
        let expected = header
            .count
            .checked_mul(header.dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("index size overflows".into()))?;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "expected {expected} bytes of rows, found {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect::<Vec<_>>();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite embedding value".into()));
        }
        Self::from_parts(header.ids, header.dim, data, header.normalized, header.fingerprint).map_err(|e| match e {
            Error::DuplicateId(id) => Error::Format(format!("duplicate id {id}")),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Encodes every code with the dual encoder. Rows follow input order.
pub fn build_index(codebase: &[(CodeId, IdSequence)], dual: &DualEncoder) -> Result<EmbeddingIndex> {
    build_index_counted(codebase, dual, &ForwardCounters::default())
}

pub fn build_index_counted(
    codebase: &[(CodeId, IdSequence)],
    dual: &DualEncoder,
    counters: &ForwardCounters,
) -> Result<EmbeddingIndex> {
    if codebase.is_empty() {
        return Err(Error::EmptyCodebase);
    }
    let embeddings = codebase
        .par_iter()
        .map(|(id, seq)| {
            counters.add_dual_code(1);
            dual.encode(seq).map_err(|e| Error::Unencodable {
                id: *id,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EmbeddingIndex::from_embeddings(
        codebase.iter().map(|(id, _)| *id).collect(),
        &embeddings,
        dual.normalize,
        dual.fingerprint()?,
    )
}
