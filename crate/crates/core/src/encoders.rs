//! Dual-encoder (separate embeddings, dot-product score) and cross-encoder
//! (joint attention over the concatenation, scalar head) scoring functions.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::corpus::{IdSequence, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::neural::{
    attention_backward, attention_forward, checkpoint_bytes, embed, embed_backward, parse_checkpoint,
    segment_positions, sha256_hex, AttentionWorkspace, EncoderParams, GradientSet, ModelConfig,
};

pub const DUAL_COMPONENT: &str = "dual";
pub const CROSS_COMPONENT: &str = "cross";

/// Output of the dual encoder for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `⟨eq, ec⟩`
pub fn score_dual(eq: &Embedding, ec: &Embedding) -> Result<f64> {
    if eq.dim() != ec.dim() {
        return Err(Error::DimensionMismatch {
            expected: eq.dim(),
            actual: ec.dim(),
        });
    }
    Ok(eq.0.iter().zip(&ec.0).map(|(a, b)| a * b).sum())
}

/// Everything the backward pass needs from one encoder forward.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    ids: Vec<u32>,
    positions: Vec<usize>,
    inputs: Array2<f64>,
    workspace: AttentionWorkspace,
    pooled: Array1<f64>,
    /// L2 norm of `pooled` when the output was normalized.
    norm: Option<f64>,
}

impl EncoderTrace {
    pub fn workspace(&self) -> &AttentionWorkspace {
        &self.workspace
    }

    pub fn pooled(&self) -> &Array1<f64> {
        &self.pooled
    }
}

fn forward_pooled(params: &EncoderParams, ids: Vec<u32>, positions: Vec<usize>) -> Result<EncoderTrace> {
    if ids.is_empty() {
        return Err(Error::EmptySequence);
    }
    let inputs = embed(params, &ids, &positions)?;
    let workspace = attention_forward(&inputs, params, None)?;
    let pooled = workspace
        .hidden
        .mean_axis(Axis(0))
        .expect("non-empty sequence");
    Ok(EncoderTrace {
        ids,
        positions,
        inputs,
        workspace,
        pooled,
        norm: None,
    })
}

fn backward_pooled(params: &EncoderParams, trace: &EncoderTrace, d_pooled: &Array1<f64>, grads: &mut GradientSet) {
    let t = trace.ids.len();
    let row = d_pooled / t as f64;
    let d_hidden = row.broadcast((t, row.len())).expect("row broadcasts over tokens");
    let d_inputs = attention_backward(&trace.inputs, params, &trace.workspace, d_hidden, grads);
    embed_backward(&trace.ids, &trace.positions, &d_inputs, grads);
}

/// Shared-parameter bi-encoder: `score(q, c) = ⟨E(q), E(c)⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub params: EncoderParams,
    /// L2-normalize embeddings (default). Disable for a raw dot product.
    pub normalize: bool,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, normalize: bool) -> Result<Self> {
        Ok(Self {
            params: EncoderParams::init(config, false)?,
            normalize,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    /// Token + position embeddings, unmasked attention, mean pooling and
    /// optional L2 normalization.
    pub fn encode(&self, seq: &IdSequence) -> Result<Embedding> {
        Ok(self.encode_traced(seq)?.0)
    }

    pub fn encode_traced(&self, seq: &IdSequence) -> Result<(Embedding, EncoderTrace)> {
        let positions = (0..seq.len()).collect();
        let mut trace = forward_pooled(&self.params, seq.ids.clone(), positions)?;
        let mut out = trace.pooled.to_vec();
        if self.normalize {
            let norm = trace.pooled.dot(&trace.pooled).sqrt();
            // A zero vector has no direction; it is returned as is.
            if norm > 0.0 {
                out.iter_mut().for_each(|x| *x /= norm);
                trace.norm = Some(norm);
            }
        }
        Ok((Embedding(out), trace))
    }

    /// Adds `∂L/∂θ` to `grads` given `∂L/∂E` for the traced sequence.
    pub fn backward(&self, trace: &EncoderTrace, d_embedding: &[f64], grads: &mut GradientSet) {
        let d_out = Array1::from(d_embedding.to_vec());
        let d_pooled = match trace.norm {
            Some(norm) => {
                let e = &trace.pooled / norm;
                let proj = e.dot(&d_out);
                (&d_out - &(e * proj)) / norm
            }
            None => d_out,
        };
        backward_pooled(&self.params, trace, &d_pooled, grads);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(DUAL_COMPONENT, Some(self.normalize), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = parse_checkpoint(bytes)?;
        if header.component != DUAL_COMPONENT || params.head.is_some() {
            return Err(Error::Format(format!(
                "expected a dual checkpoint, found {:?}",
                header.component
            )));
        }
        Ok(Self {
            params,
            normalize: header.normalize.unwrap_or(true),
        })
    }

    /// SHA-256 of the checkpoint serialization.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Joint encoder over `[CLS] q [SEP] c` with a linear relevance head.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    pub params: EncoderParams,
}

/// Token ids and segment-relative positions of `[CLS] q [SEP] c`.
pub fn cross_input(q: &IdSequence, c: &IdSequence) -> (Vec<u32>, Vec<usize>) {
    let mut ids = Vec::with_capacity(q.len() + c.len() + 2);
    ids.push(CLS_ID);
    ids.extend_from_slice(&q.ids);
    ids.push(SEP_ID);
    ids.extend_from_slice(&c.ids);
    (ids, segment_positions(&[q.len() + 2, c.len()]))
}

impl CrossEncoder {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            params: EncoderParams::init(config, true)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn score(&self, q: &IdSequence, c: &IdSequence) -> Result<f64> {
        Ok(self.score_traced(q, c)?.0)
    }

    /// `w · mean_pool(attention([CLS] q [SEP] c)) + b`
    pub fn score_traced(&self, q: &IdSequence, c: &IdSequence) -> Result<(f64, EncoderTrace)> {
        if q.is_empty() || c.is_empty() {
            return Err(Error::EmptySequence);
        }
        let len = q.len() + c.len() + 2;
        if len > self.params.config.max_pos {
            return Err(Error::SequenceTooLong {
                len,
                limit: self.params.config.max_pos,
            });
        }
        let (ids, positions) = cross_input(q, c);
        let trace = forward_pooled(&self.params, ids, positions)?;
        let head = self.params.head.as_ref().expect("cross encoder has a head");
        Ok((head.w.dot(&trace.pooled) + head.bias, trace))
    }

    /// Adds `∂L/∂θ` to `grads` given `∂L/∂score`.
    pub fn backward(&self, trace: &EncoderTrace, d_score: f64, grads: &mut GradientSet) {
        let head = self.params.head.as_ref().expect("cross encoder has a head");
        let gh = grads.head.as_mut().expect("gradient set mirrors the head");
        gh.w.scaled_add(d_score, &trace.pooled);
        gh.bias += d_score;
        let d_pooled = &head.w * d_score;
        backward_pooled(&self.params, trace, &d_pooled, grads);
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(CROSS_COMPONENT, None, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = parse_checkpoint(bytes)?;
        if header.component != CROSS_COMPONENT || params.head.is_none() {
            return Err(Error::Format(format!(
                "expected a cross checkpoint, found {:?}",
                header.component
            )));
        }
        Ok(Self { params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
