use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding / model dimension.
    pub dim: usize,
    pub vocab_size: usize,
    /// Rows in the position table. Positions are segment-relative, so this
    /// bounds the longest single segment.
    pub max_pos: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.vocab_size == 0 || self.max_pos == 0 {
            return Err(Error::InvalidArgument(format!(
                "model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scalar relevance head `w·x + b`, used by the cross encoder only.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Array1<f64>,
    pub bias: f64,
}

/// Every learnable tensor of one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub head: Option<Head>,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "token_embedding",
    "position_embedding",
    "w_q",
    "w_k",
    "w_v",
    "head_w",
    "head_b",
];

impl EncoderParams {
    /// Draws every entry i.i.d. from U[-0.1, 0.1] with xoshiro256++ seeded
    /// from `config.seed`. The head bias starts at zero.
    pub fn init(config: ModelConfig, with_head: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
        let d = config.dim;
        let mut draw = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
        };
        let token_emb = draw(config.vocab_size, d);
        let pos_emb = draw(config.max_pos, d);
        let w_q = draw(d, d);
        let w_k = draw(d, d);
        let w_v = draw(d, d);
        let head = with_head.then(|| Head {
            w: draw(1, d).into_shape_with_order(d).expect("1×d reshapes to d"),
            bias: 0.0,
        });
        Ok(Self {
            config,
            token_emb,
            pos_emb,
            w_q,
            w_k,
            w_v,
            head,
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            config: self.config,
            token_emb: z(&self.token_emb),
            pos_emb: z(&self.pos_emb),
            w_q: z(&self.w_q),
            w_k: z(&self.w_k),
            w_v: z(&self.w_v),
            head: self.head.as_ref().map(|h| Head {
                w: Array1::zeros(h.w.len()),
                bias: 0.0,
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// `(name, shape, values)` for every tensor, in checkpoint order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut out: Vec<(&'static str, Vec<usize>, &[f64])> = vec![
            (TENSOR_NAMES[0], self.token_emb.shape().to_vec(), std_slice(&self.token_emb)),
            (TENSOR_NAMES[1], self.pos_emb.shape().to_vec(), std_slice(&self.pos_emb)),
            (TENSOR_NAMES[2], self.w_q.shape().to_vec(), std_slice(&self.w_q)),
            (TENSOR_NAMES[3], self.w_k.shape().to_vec(), std_slice(&self.w_k)),
            (TENSOR_NAMES[4], self.w_v.shape().to_vec(), std_slice(&self.w_v)),
        ];
        if let Some(h) = &self.head {
            out.push((TENSOR_NAMES[5], vec![h.w.len()], h.w.as_slice().expect("contiguous")));
            out.push((TENSOR_NAMES[6], vec![1], std::slice::from_ref(&h.bias)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = vec![
            (TENSOR_NAMES[0], std_slice_mut(&mut self.token_emb)),
            (TENSOR_NAMES[1], std_slice_mut(&mut self.pos_emb)),
            (TENSOR_NAMES[2], std_slice_mut(&mut self.w_q)),
            (TENSOR_NAMES[3], std_slice_mut(&mut self.w_k)),
            (TENSOR_NAMES[4], std_slice_mut(&mut self.w_v)),
        ];
        if let Some(h) = &mut self.head {
            out.push((TENSOR_NAMES[5], h.w.as_slice_mut().expect("contiguous")));
            out.push((TENSOR_NAMES[6], std::slice::from_mut(&mut h.bias)));
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        let src = other.tensors();
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

fn std_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are in standard layout")
}

fn std_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are in standard layout")
}

/// Gradients of a scalar objective, one tensor per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub EncoderParams);

impl GradientSet {
    pub fn zeros_for(params: &EncoderParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn accumulate(&mut self, other: &GradientSet) {
        self.0.add_scaled(&other.0, 1.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.scale(factor);
    }
}

impl std::ops::Deref for GradientSet {
    type Target = EncoderParams;
    fn deref(&self) -> &EncoderParams {
        &self.0
    }
}

impl std::ops::DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut EncoderParams {
        &mut self.0
    }
}
