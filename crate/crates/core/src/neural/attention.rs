//! Single-head scaled dot-product self-attention with hand-written gradients.

use ndarray::{Array2, ArrayView2, Axis};

use super::params::{EncoderParams, GradientSet};
use crate::error::{Error, Result};

/// Intermediate values of one attention pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionWorkspace {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Row-stochastic attention matrix; masked entries are exactly zero.
    pub attn: Array2<f64>,
    pub hidden: Array2<f64>,
    pub mask: Option<Array2<f64>>,
}

/// Sums token and position embeddings row by row.
pub fn embed(params: &EncoderParams, ids: &[u32], positions: &[usize]) -> Result<Array2<f64>> {
    debug_assert_eq!(ids.len(), positions.len());
    let d = params.dim();
    let mut x = Array2::zeros((ids.len(), d));
    for (t, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
        if id as usize >= params.config.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                params.config.vocab_size
            )));
        }
        if pos >= params.config.max_pos {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                limit: params.config.max_pos,
            });
        }
        let mut row = x.row_mut(t);
        row += &params.token_emb.row(id as usize);
        row += &params.pos_emb.row(pos);
    }
    Ok(x)
}

/// Scatters input gradients back into the embedding tables.
pub fn embed_backward(ids: &[u32], positions: &[usize], d_inputs: &Array2<f64>, grads: &mut GradientSet) {
    for (t, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
        let g = d_inputs.row(t);
        let mut tok = grads.token_emb.row_mut(id as usize);
        tok += &g;
        let mut p = grads.pos_emb.row_mut(pos);
        p += &g;
    }
}

/// `Q = X·W_Q`, `K = X·W_K`, `V = X·W_V`,
/// `A = softmax_rows(Q·Kᵀ/√d + mask)`, `H = A·V`.
pub fn attention_forward(
    inputs: &Array2<f64>,
    params: &EncoderParams,
    mask: Option<&Array2<f64>>,
) -> Result<AttentionWorkspace> {
    let t = inputs.nrows();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if inputs.ncols() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: inputs.ncols(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != [t, t] {
            return Err(Error::DimensionMismatch {
                expected: t,
                actual: m.nrows(),
            });
        }
    }
    let q = inputs.dot(&params.w_q);
    let k = inputs.dot(&params.w_k);
    let v = inputs.dot(&params.w_v);
    let scale = 1.0 / (params.dim() as f64).sqrt();
    let mut attn = q.dot(&k.t());
    attn.mapv_inplace(|s| s * scale);
    if let Some(m) = mask {
        attn += m;
    }
    for (i, mut row) in attn.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::AllMaskedRow(i));
        }
        let mut sum = 0.0;
        row.mapv_inplace(|s| {
            let e = (s - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|e| e / sum);
    }
    let hidden = attn.dot(&v);
    Ok(AttentionWorkspace {
        q,
        k,
        v,
        attn,
        hidden,
        mask: mask.cloned(),
    })
}

/// Backpropagates `d_hidden` through one attention pass. Projection-weight
/// gradients are added to `grads`; the gradient with respect to the inputs is
/// returned.
pub fn attention_backward(
    inputs: &Array2<f64>,
    params: &EncoderParams,
    ws: &AttentionWorkspace,
    d_hidden: ArrayView2<f64>,
    grads: &mut GradientSet,
) -> Array2<f64> {
    let scale = 1.0 / (params.dim() as f64).sqrt();
    // H = A V
    let d_attn = d_hidden.dot(&ws.v.t());
    let d_v = ws.attn.t().dot(&d_hidden);
    // softmax rows: dS_ij = A_ij (dA_ij - Σ_k A_ik dA_ik)
    let mut d_scores = d_attn;
    for (mut ds, a) in d_scores.axis_iter_mut(Axis(0)).zip(ws.attn.axis_iter(Axis(0))) {
        let inner: f64 = ds.iter().zip(a.iter()).map(|(g, p)| g * p).sum();
        ds.zip_mut_with(&a, |g, &p| *g = p * (*g - inner) * scale);
    }
    let d_q = d_scores.dot(&ws.k);
    let d_k = d_scores.t().dot(&ws.q);

    grads.w_q += &inputs.t().dot(&d_q);
    grads.w_k += &inputs.t().dot(&d_k);
    grads.w_v += &inputs.t().dot(&d_v);

    let mut d_inputs = d_q.dot(&params.w_q.t());
    d_inputs += &d_k.dot(&params.w_k.t());
    d_inputs += &d_v.dot(&params.w_v.t());
    d_inputs
}

/// Positions that restart at zero at the start of every segment.
pub fn segment_positions(segment_lens: &[usize]) -> Vec<usize> {
    segment_lens.iter().flat_map(|&n| 0..n).collect()
}

/// Additive mask that only lets tokens attend within their own segment.
pub fn block_diagonal_mask(segment_lens: &[usize]) -> Array2<f64> {
    let total: usize = segment_lens.iter().sum();
    let mut mask = Array2::from_elem((total, total), f64::NEG_INFINITY);
    let mut start = 0;
    for &n in segment_lens {
        mask.slice_mut(ndarray::s![start..start + n, start..start + n]).fill(0.0);
        start += n;
    }
    mask
}
