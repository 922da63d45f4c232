//! Contrastive training: InfoNCE, in-batch and rank-window negative
//! sampling, Adam with linear learning-rate decay, and the training loops for
//! the dual encoder, the cross encoder and their joint baseline.

use std::collections::HashMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{text_to_ids, CodeId, IdSequence, RawPair, SequenceLimits, TokenKind, Vocabulary};
use crate::encoders::{CrossEncoder, DualEncoder, Embedding};
use crate::error::{Error, Result};
use crate::index::EmbeddingIndex;
use crate::neural::{EncoderParams, GradientSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub temperature: f64,
    /// Upper bound on negatives per query. In-batch training uses
    /// `min(n_neg, batch_size - 1)` of the other codes in the batch.
    pub n_neg: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            n_neg: 32,
            batch_size: 32,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 42,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(())
    }

    fn validate_in_batch(&self) -> Result<()> {
        self.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "in-batch negatives need a batch size of at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Rank-window hard negative sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsConfig {
    /// First rank of the window, 1-based, counted after the gold is removed.
    pub start_rank: usize,
    /// Number of ranks in the window.
    pub window: usize,
    pub n_neg: usize,
}

impl Default for PsConfig {
    fn default() -> Self {
        Self {
            start_rank: 1,
            window: 100,
            n_neg: 32,
        }
    }
}

impl PsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.start_rank == 0 {
            return Err(Error::InvalidArgument("start rank is 1-based".into()));
        }
        if self.window < self.n_neg {
            return Err(Error::InvalidArgument(format!(
                "window {} is smaller than n_neg {}",
                self.window, self.n_neg
            )));
        }
        Ok(())
    }
}

/// A query and its gold code, both tokenized and mapped to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub id: CodeId,
    pub query: IdSequence,
    pub code: IdSequence,
}

pub fn encode_pairs(pairs: &[RawPair], vocab: &Vocabulary, limits: &SequenceLimits) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|p| {
            let wrap = |e| Error::Unencodable {
                id: p.id,
                source: Box::new(e),
            };
            Ok(EncodedPair {
                id: p.id,
                query: text_to_ids(&p.query, TokenKind::Query, vocab, limits).map_err(wrap)?,
                code: text_to_ids(&p.code, TokenKind::Code, vocab, limits).map_err(wrap)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub query: IdSequence,
    pub positive_id: CodeId,
    pub positive: IdSequence,
    pub negatives: Vec<(CodeId, IdSequence)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBatch {
    pub examples: Vec<TrainingExample>,
}

fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteScore(x))
    }
}

/// `−log softmax(pos/τ)` over `[pos, negs…]`, computed with the max logit
/// subtracted.
pub fn info_nce(pos: f64, negs: &[f64], temperature: f64) -> Result<f64> {
    Ok(info_nce_grad(pos, negs, temperature)?.0)
}

/// Loss and its gradient with respect to `[pos, negs…]`.
pub fn info_nce_grad(pos: f64, negs: &[f64], temperature: f64) -> Result<(f64, Vec<f64>)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = std::iter::once(pos)
        .chain(negs.iter().copied())
        .map(|s| check_finite(s).map(|s| s / temperature))
        .collect::<Result<Vec<f64>>>()?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (max + sum.ln() - logits[0]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum / temperature).collect();
    grad[0] -= 1.0 / temperature;
    Ok((loss, grad))
}

/// Indices of the in-batch negatives of query `j`: the next `m` codes in
/// batch order, wrapping around.
fn in_batch_neighbours(j: usize, b: usize, m: usize) -> impl Iterator<Item = usize> {
    (1..=m).map(move |t| (j + t) % b)
}

/// Every other code in the batch becomes a negative of each query (m = b−1).
/// Exclusion is by id position only, so duplicate code text is still used.
pub fn in_batch_negatives(pairs: &[EncodedPair]) -> Result<TrainingBatch> {
    in_batch_negatives_limited(pairs, usize::MAX)
}

/// As [`in_batch_negatives`] with at most `limit` negatives per query.
pub fn in_batch_negatives_limited(pairs: &[EncodedPair], limit: usize) -> Result<TrainingBatch> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "in-batch negatives need at least 2 pairs, got {b}"
        )));
    }
    let m = limit.min(b - 1);
    let examples = pairs
        .iter()
        .enumerate()
        .map(|(j, p)| TrainingExample {
            query: p.query.clone(),
            positive_id: p.id,
            positive: p.code.clone(),
            negatives: in_batch_neighbours(j, b, m)
                .map(|i| (pairs[i].id, pairs[i].code.clone()))
                .collect(),
        })
        .collect();
    Ok(TrainingBatch { examples })
}

/// Draws `cfg.n_neg` distinct negatives uniformly from the rank window
/// `[s, s+W)` of `ranking` after removing `gold`. The result follows rank
/// order.
pub fn ps_sample<R: Rng + ?Sized>(gold: CodeId, ranking: &[CodeId], cfg: &PsConfig, rng: &mut R) -> Result<Vec<CodeId>> {
    cfg.validate()?;
    let candidates: Vec<CodeId> = ranking.iter().copied().filter(|&id| id != gold).collect();
    if cfg.start_rank > candidates.len() {
        return Err(Error::StartBeyondCorpus {
            start: cfg.start_rank,
            available: candidates.len(),
        });
    }
    let lo = cfg.start_rank - 1;
    let hi = lo.saturating_add(cfg.window).min(candidates.len());
    let window = &candidates[lo..hi];
    if window.len() < cfg.n_neg {
        return Err(Error::InsufficientCandidates {
            needed: cfg.n_neg,
            available: window.len(),
        });
    }
    let mut picked = index::sample(rng, window.len(), cfg.n_neg).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| window[i]).collect())
}

/// Sums per-item gradients in item order, independent of the thread count.
fn reduce_in_order(params: &EncoderParams, parts: Vec<GradientSet>) -> GradientSet {
    let mut total = GradientSet::zeros_for(params);
    for g in &parts {
        total.accumulate(g);
    }
    total
}

/// Mean in-batch InfoNCE over dual scores, with `min(n_neg, b−1)` negatives
/// per query.
pub fn dual_in_batch_loss(
    dual: &DualEncoder,
    pairs: &[EncodedPair],
    temperature: f64,
    n_neg: usize,
) -> Result<(f64, GradientSet)> {
    let b = pairs.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "in-batch negatives need at least 2 pairs, got {b}"
        )));
    }
    let m = n_neg.min(b - 1);
    let encoded = pairs
        .par_iter()
        .map(|p| Ok((dual.encode_traced(&p.query)?, dual.encode_traced(&p.code)?)))
        .collect::<Result<Vec<_>>>()?;
    let q: Vec<&Embedding> = encoded.iter().map(|((e, _), _)| e).collect();
    let c: Vec<&Embedding> = encoded.iter().map(|(_, (e, _))| e).collect();
    let dot = |a: &Embedding, b: &Embedding| a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum::<f64>();

    let d = dual.dim();
    let mut d_q = vec![vec![0.0; d]; b];
    let mut d_c = vec![vec![0.0; d]; b];
    let mut total = 0.0;
    let scale = 1.0 / b as f64;
    for j in 0..b {
        let negs: Vec<usize> = in_batch_neighbours(j, b, m).collect();
        let neg_scores: Vec<f64> = negs.iter().map(|&i| dot(q[j], c[i])).collect();
        let (loss, grad) = info_nce_grad(dot(q[j], c[j]), &neg_scores, temperature)?;
        total += loss;
        for (&i, &g) in std::iter::once(&j).chain(&negs).zip(&grad) {
            let g = g * scale;
            for t in 0..d {
                d_q[j][t] += g * c[i].0[t];
                d_c[i][t] += g * q[j].0[t];
            }
        }
    }
    let parts: Vec<GradientSet> = encoded
        .par_iter()
        .enumerate()
        .map(|(j, ((_, qt), (_, ct)))| {
            let mut g = GradientSet::zeros_for(&dual.params);
            dual.backward(qt, &d_q[j], &mut g);
            dual.backward(ct, &d_c[j], &mut g);
            g
        })
        .collect();
    Ok((total * scale, reduce_in_order(&dual.params, parts)))
}

/// Mean InfoNCE over cross scores of `(q, c⁺)` and `(q, c⁻_i)`.
pub fn cross_batch_loss(cross: &CrossEncoder, batch: &TrainingBatch, temperature: f64) -> Result<(f64, GradientSet)> {
    let n = batch.examples.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    let scale = 1.0 / n as f64;
    let parts = batch
        .examples
        .par_iter()
        .map(|ex| {
            let mut g = GradientSet::zeros_for(&cross.params);
            let (pos, pos_trace) = cross.score_traced(&ex.query, &ex.positive)?;
            let negs = ex
                .negatives
                .iter()
                .map(|(_, code)| cross.score_traced(&ex.query, code))
                .collect::<Result<Vec<_>>>()?;
            let neg_scores: Vec<f64> = negs.iter().map(|(s, _)| *s).collect();
            let (loss, grad) = info_nce_grad(pos, &neg_scores, temperature)?;
            cross.backward(&pos_trace, grad[0] * scale, &mut g);
            for ((_, trace), &dz) in negs.iter().zip(&grad[1..]) {
                cross.backward(trace, dz * scale, &mut g);
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = parts.iter().map(|(l, _)| l).sum();
    let grads = reduce_in_order(&cross.params, parts.into_iter().map(|(_, g)| g).collect());
    Ok((total * scale, grads))
}

/// Adam with a learning rate decaying linearly to zero over `total_steps`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    total_steps: usize,
    step: usize,
    m: EncoderParams,
    v: EncoderParams,
}

impl Adam {
    pub fn new(params: &EncoderParams, learning_rate: f64, total_steps: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// Learning rate applied by the next step.
    pub fn current_rate(&self) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.learning_rate * (1.0 - self.step as f64 / self.total_steps as f64).max(0.0)
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &GradientSet) {
        let lr = self.current_rate();
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads.tensors());
        for ((((_, p), (_, m)), (_, v)), (_, _, g)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Mean loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
}

fn require_pairs(pairs: &[EncodedPair], min: usize) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if pairs.len() < min {
        return Err(Error::InvalidArgument(format!(
            "training needs at least {min} pairs, got {}",
            pairs.len()
        )));
    }
    Ok(())
}

/// Shuffled batch schedule. The RNG is consumed exactly once per epoch, by the
/// shuffle; batches shorter than `min_len` are dropped.
struct Schedule {
    rng: Xoshiro256PlusPlus,
    order: Vec<usize>,
    batch_size: usize,
    min_len: usize,
}

impl Schedule {
    fn new(n: usize, batch_size: usize, min_len: usize, seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            order: (0..n).collect(),
            batch_size,
            min_len,
        }
    }

    fn batches_per_epoch(&self) -> usize {
        let n = self.order.len();
        let full = n / self.batch_size;
        full + usize::from(n % self.batch_size >= self.min_len && n % self.batch_size > 0)
    }

    fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order
            .chunks(self.batch_size)
            .filter(|c| c.len() >= self.min_len)
            .map(<[usize]>::to_vec)
            .collect()
    }
}

fn gather(pairs: &[EncodedPair], idx: &[usize]) -> Vec<EncodedPair> {
    idx.iter().map(|&i| pairs[i].clone()).collect()
}

/// In-batch contrastive training of the dual encoder, starting from `init`.
pub fn train_dual(pairs: &[EncodedPair], init: DualEncoder, cfg: &TrainingConfig) -> Result<(DualEncoder, TrainingReport)> {
    cfg.validate_in_batch()?;
    require_pairs(pairs, 2)?;
    let mut dual = init;
    let mut schedule = Schedule::new(pairs.len(), cfg.batch_size, 2, cfg.seed);
    let mut adam = Adam::new(&dual.params, cfg.learning_rate, cfg.epochs * schedule.batches_per_epoch());
    let mut report = TrainingReport::default();
    for _ in 0..cfg.epochs {
        let mut losses = Vec::new();
        for batch in schedule.next_epoch() {
            let (loss, grads) = dual_in_batch_loss(&dual, &gather(pairs, &batch), cfg.temperature, cfg.n_neg)?;
            adam.step(&mut dual.params, &grads);
            losses.push(loss);
        }
        report.epoch_losses.push(mean(&losses));
    }
    Ok((dual, report))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Dual rankings of the training codes for every query, truncated to the
/// depth the rank window can reach.
pub fn ps_rankings(pairs: &[EncodedPair], dual: &DualEncoder, index: &EmbeddingIndex, ps: &PsConfig) -> Result<Vec<Vec<CodeId>>> {
    let depth = ps.start_rank.saturating_add(ps.window);
    pairs
        .par_iter()
        .map(|p| {
            let q = dual.encode(&p.query)?;
            Ok(index.top_k(&q, depth)?.into_iter().map(|h| h.id).collect())
        })
        .collect()
}

/// Cross-encoder training on rank-window negatives. Rankings come once from
/// the frozen `dual`; fresh negatives are drawn every epoch.
pub fn train_cross(
    pairs: &[EncodedPair],
    dual: &DualEncoder,
    index: &EmbeddingIndex,
    init: CrossEncoder,
    cfg: &TrainingConfig,
    ps: &PsConfig,
) -> Result<(CrossEncoder, TrainingReport)> {
    cfg.validate()?;
    ps.validate()?;
    require_pairs(pairs, 1)?;
    index.check_fingerprint(dual)?;
    let codes: HashMap<CodeId, &IdSequence> = pairs.iter().map(|p| (p.id, &p.code)).collect();
    if let Some(id) = index.ids().iter().find(|id| !codes.contains_key(id)) {
        return Err(Error::InvalidArgument(format!(
            "index id {id} is not a training code"
        )));
    }
    if ps.start_rank > index.len().saturating_sub(1) {
        return Err(Error::StartBeyondCorpus {
            start: ps.start_rank,
            available: index.len().saturating_sub(1),
        });
    }
    let rankings = ps_rankings(pairs, dual, index, ps)?;

    let mut cross = init;
    let mut schedule = Schedule::new(pairs.len(), cfg.batch_size, 1, cfg.seed);
    let mut adam = Adam::new(&cross.params, cfg.learning_rate, cfg.epochs * schedule.batches_per_epoch());
    let mut report = TrainingReport::default();
    for _ in 0..cfg.epochs {
        let mut losses = Vec::new();
        for batch in schedule.next_epoch() {
            let examples = batch
                .iter()
                .map(|&i| {
                    let p = &pairs[i];
                    let negatives = ps_sample(p.id, &rankings[i], ps, &mut schedule.rng)?
                        .into_iter()
                        .map(|id| (id, codes[&id].clone()))
                        .collect();
                    Ok(TrainingExample {
                        query: p.query.clone(),
                        positive_id: p.id,
                        positive: p.code.clone(),
                        negatives,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = cross_batch_loss(&cross, &TrainingBatch { examples }, cfg.temperature)?;
            adam.step(&mut cross.params, &grads);
            losses.push(loss);
        }
        report.epoch_losses.push(mean(&losses));
    }
    Ok((cross, report))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub dual: TrainingReport,
    pub cross: TrainingReport,
}

/// The retriever–ranker baseline: both models see the same in-batch
/// negatives and are updated from the summed loss. The parameter sets are
/// disjoint, so each model's update uses only its own term, and the cross
/// half draws no random numbers. The dual half therefore matches
/// [`train_dual`] under the same config.
pub fn train_rr_joint(
    pairs: &[EncodedPair],
    dual_init: DualEncoder,
    cross_init: CrossEncoder,
    cfg: &TrainingConfig,
) -> Result<(DualEncoder, CrossEncoder, JointReport)> {
    cfg.validate_in_batch()?;
    require_pairs(pairs, 2)?;
    let (mut dual, mut cross) = (dual_init, cross_init);
    let mut schedule = Schedule::new(pairs.len(), cfg.batch_size, 2, cfg.seed);
    let steps = cfg.epochs * schedule.batches_per_epoch();
    let mut dual_adam = Adam::new(&dual.params, cfg.learning_rate, steps);
    let mut cross_adam = Adam::new(&cross.params, cfg.learning_rate, steps);
    let mut report = JointReport::default();
    for _ in 0..cfg.epochs {
        let (mut dl, mut cl) = (Vec::new(), Vec::new());
        for batch in schedule.next_epoch() {
            let chunk = gather(pairs, &batch);
            let (d_loss, d_grads) = dual_in_batch_loss(&dual, &chunk, cfg.temperature, cfg.n_neg)?;
            let examples = in_batch_negatives_limited(&chunk, cfg.n_neg)?;
            let (c_loss, c_grads) = cross_batch_loss(&cross, &examples, cfg.temperature)?;
            dual_adam.step(&mut dual.params, &d_grads);
            cross_adam.step(&mut cross.params, &c_grads);
            dl.push(d_loss);
            cl.push(c_loss);
        }
        report.dual.epoch_losses.push(mean(&dl));
        report.cross.epoch_losses.push(mean(&cl));
    }
    Ok((dual, cross, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::build_index;
    use crate::neural::{grad_check, ModelConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn info_nce_examples() {
        assert_abs_diff_eq!(info_nce(0.0, &[0.0; 3], 1.0).unwrap(), 4f64.ln(), epsilon = 1e-12);
        assert_eq!(info_nce(5.0, &[], 1.0).unwrap(), 0.0);
        // ln(1 + e^{-2})
        let direct = -((2.0f64).exp() / ((2.0f64).exp() + 1.0)).ln();
        assert_abs_diff_eq!(info_nce(1.0, &[0.0], 0.5).unwrap(), direct, epsilon = 1e-12);
        assert_abs_diff_eq!(direct, 0.126928, epsilon = 1e-6);
    }

    #[test]
    fn info_nce_rejects_bad_input() {
        assert!(matches!(info_nce(f64::NAN, &[0.0], 1.0), Err(Error::NonFiniteScore(_))));
        assert!(matches!(info_nce(0.0, &[f64::INFINITY], 1.0), Err(Error::NonFiniteScore(_))));
        assert!(info_nce(0.0, &[0.0], 0.0).is_err());
    }

    #[test]
    fn info_nce_is_stable_for_large_logits() {
        let l = info_nce(1000.0, &[999.0], 0.01).unwrap();
        assert!(l.is_finite());
        assert_abs_diff_eq!(l, (1.0 + (-100f64).exp()).ln(), epsilon = 1e-12);
    }

    #[test]
    fn info_nce_gradient_matches_differences() {
        let (pos, negs, tau) = (0.3, [0.1, -0.4, 0.25], 0.2);
        let (_, g) = info_nce_grad(pos, &negs, tau).unwrap();
        let h = 1e-6;
        let f = |x: &[f64]| info_nce(x[0], &x[1..], tau).unwrap();
        let base = [pos, negs[0], negs[1], negs[2]];
        for i in 0..4 {
            let (mut up, mut down) = (base, base);
            up[i] += h;
            down[i] -= h;
            assert_abs_diff_eq!(g[i], (f(&up) - f(&down)) / (2.0 * h), epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn info_nce_properties(
            pos in -5.0f64..5.0,
            negs in prop::collection::vec(-5.0f64..5.0, 0..10),
            tau in 0.05f64..2.0,
            shift in -50.0f64..50.0,
        ) {
            let l = info_nce(pos, &negs, tau).unwrap();
            prop_assert!(l >= 0.0);
            let shifted: Vec<f64> = negs.iter().map(|x| x + shift).collect();
            prop_assert!((info_nce(pos + shift, &shifted, tau).unwrap() - l).abs() < 1e-12 * (1.0 + l));
            if !negs.is_empty() {
                prop_assert!(info_nce(pos + 0.5, &negs, tau).unwrap() < l || l < 1e-12);
            }
            let uniform = vec![pos; negs.len()];
            let expected = ((negs.len() + 1) as f64).ln();
            prop_assert!((info_nce(pos, &uniform, tau).unwrap() - expected).abs() < 1e-12);
        }
    }

    fn seq(ids: &[u32], kind: TokenKind) -> IdSequence {
        IdSequence {
            ids: ids.to_vec(),
            kind,
        }
    }

    fn pair(id: CodeId, q: &[u32], c: &[u32]) -> EncodedPair {
        EncodedPair {
            id,
            query: seq(q, TokenKind::Query),
            code: seq(c, TokenKind::Code),
        }
    }

    #[test]
    fn in_batch_shapes() {
        let pairs = vec![pair(1, &[4], &[5]), pair(2, &[6], &[7]), pair(3, &[8], &[5])];
        let batch = in_batch_negatives(&pairs).unwrap();
        for ex in &batch.examples {
            assert_eq!(ex.negatives.len(), 2);
            assert!(ex.negatives.iter().all(|(id, _)| *id != ex.positive_id));
        }
        // Same code text as the positive, different id: still a negative.
        assert!(batch.examples[0].negatives.iter().any(|(id, c)| *id == 3 && c.ids == [5]));
        assert!(in_batch_negatives(&pairs[..1]).is_err());
        let limited = in_batch_negatives_limited(&pairs, 1).unwrap();
        assert!(limited.examples.iter().all(|ex| ex.negatives.len() == 1));
    }

    #[test]
    fn ps_window_enumeration() {
        let ranking = [7, 2, 9, 1, 4];
        let cfg = PsConfig {
            start_rank: 1,
            window: 3,
            n_neg: 2,
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let s = ps_sample(9, &ranking, &cfg, &mut rng).unwrap();
            assert_eq!(s.len(), 2);
            assert_ne!(s[0], s[1]);
            seen.extend(s);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![1, 2, 7]);
    }

    #[test]
    fn ps_full_window_is_deterministic() {
        let cfg = PsConfig {
            start_rank: 2,
            window: 2,
            n_neg: 2,
        };
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        assert_eq!(ps_sample(9, &[7, 2, 9, 1, 4], &cfg, &mut rng).unwrap(), vec![2, 1]);
    }

    #[test]
    fn ps_errors() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let far = PsConfig {
            start_rank: 10,
            window: 3,
            n_neg: 1,
        };
        assert!(matches!(
            ps_sample(1, &[1, 2, 3, 4, 5], &far, &mut rng),
            Err(Error::StartBeyondCorpus { .. })
        ));
        let tail = PsConfig {
            start_rank: 4,
            window: 3,
            n_neg: 2,
        };
        assert!(matches!(
            ps_sample(1, &[1, 2, 3, 4, 5], &tail, &mut rng),
            Err(Error::InsufficientCandidates { needed: 2, available: 1 })
        ));
        let bad = PsConfig {
            start_rank: 1,
            window: 1,
            n_neg: 2,
        };
        assert!(ps_sample(1, &[1, 2, 3], &bad, &mut rng).is_err());
    }

    #[test]
    fn ps_selection_is_uniform() {
        let ranking: Vec<CodeId> = (0..30).collect();
        let cfg = PsConfig {
            start_rank: 3,
            window: 10,
            n_neg: 3,
        };
        let draws = 10_000;
        let mut counts = HashMap::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(17);
        for _ in 0..draws {
            for id in ps_sample(5, &ranking, &cfg, &mut rng).unwrap() {
                *counts.entry(id).or_insert(0usize) += 1;
            }
        }
        // Gold 5 removed: window is ranks 3..12 of [0,1,2,3,4,6,...] = {2,3,4,6,...,11}.
        let window: Vec<CodeId> = vec![2, 3, 4, 6, 7, 8, 9, 10, 11, 12];
        assert_eq!(counts.len(), window.len());
        let p = 3.0 / 10.0;
        let expected = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for id in window {
            let c = counts[&id] as f64;
            assert!((c - expected).abs() < 3.0 * sigma, "id {id}: {c} vs {expected}±{sigma}");
        }
    }

    proptest! {
        #[test]
        fn ps_outputs_stay_in_window(
            n in 2usize..40,
            gold_pos in 0usize..40,
            start in 1usize..10,
            window in 0usize..15,
            seed in any::<u64>(),
        ) {
            let ranking: Vec<CodeId> = (0..n as u64).map(|i| i * 3 + 1).collect();
            let gold = ranking[gold_pos % n];
            let n_neg = window / 2;
            let cfg = PsConfig { start_rank: start, window, n_neg };
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let rest: Vec<CodeId> = ranking.iter().copied().filter(|&x| x != gold).collect();
            match ps_sample(gold, &ranking, &cfg, &mut rng) {
                Ok(out) => {
                    prop_assert_eq!(out.len(), n_neg);
                    let lo = start - 1;
                    let hi = (lo + window).min(rest.len());
                    for id in &out {
                        prop_assert!(*id != gold);
                        prop_assert!(rest[lo..hi].contains(id));
                    }
                    let mut sorted = out.clone();
                    sorted.dedup();
                    prop_assert_eq!(sorted.len(), out.len());
                }
                Err(Error::StartBeyondCorpus { .. }) => prop_assert!(start > rest.len()),
                Err(Error::InsufficientCandidates { .. }) => {
                    prop_assert!(start <= rest.len());
                    prop_assert!(rest.len() - (start - 1) < n_neg);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }
    }

    fn toy_config(vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            dim: 8,
            vocab_size: vocab,
            max_pos: 32,
            seed,
        }
    }

    fn random_pairs(n: usize, vocab: u32, seed: u64) -> Vec<EncodedPair> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..n as u64)
            .map(|i| {
                let q: Vec<u32> = (0..rng.random_range(1..6)).map(|_| rng.random_range(4..vocab)).collect();
                let c: Vec<u32> = (0..rng.random_range(1..8)).map(|_| rng.random_range(4..vocab)).collect();
                pair(100 + i, &q, &c)
            })
            .collect()
    }

    /// Gradients are checked at parameters drawn from U[-0.3, 0.3]. At the
    /// ±0.1 initialization attention is nearly uniform and the attention
    /// weight gradients sit near the finite-difference noise floor.
    const SCALE: f64 = 3.0;

    #[test]
    fn dual_loss_gradient_check() {
        let pairs = random_pairs(4, 50, 1);
        for normalize in [true, false] {
            let mut dual = DualEncoder::new(toy_config(50, 2), normalize).unwrap();
            dual.params.scale(SCALE);
            let objective = |p: &EncoderParams| {
                let d = DualEncoder {
                    params: p.clone(),
                    normalize,
                };
                dual_in_batch_loss(&d, &pairs, 0.05, 32)
            };
            let r = grad_check(&dual.params, objective, 1e-5, 400, 3).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn cross_loss_gradient_check() {
        let pairs = random_pairs(4, 50, 4);
        let batch = in_batch_negatives(&pairs).unwrap();
        let mut cross = CrossEncoder::new(toy_config(50, 5)).unwrap();
        cross.params.scale(SCALE);
        let objective = |p: &EncoderParams| cross_batch_loss(&CrossEncoder { params: p.clone() }, &batch, 0.05);
        let r = grad_check(&cross.params, objective, 1e-5, 400, 6).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn dual_loss_matches_info_nce_per_query() {
        let pairs = random_pairs(5, 30, 8);
        let dual = DualEncoder::new(toy_config(30, 1), true).unwrap();
        let (loss, _) = dual_in_batch_loss(&dual, &pairs, 0.1, 2).unwrap();
        let e: Vec<_> = pairs
            .iter()
            .map(|p| (dual.encode(&p.query).unwrap(), dual.encode(&p.code).unwrap()))
            .collect();
        let dot = |a: &Embedding, b: &Embedding| crate::encoders::score_dual(a, b).unwrap();
        let mut expected = 0.0;
        for j in 0..5 {
            let negs = [dot(&e[j].0, &e[(j + 1) % 5].1), dot(&e[j].0, &e[(j + 2) % 5].1)];
            expected += info_nce(dot(&e[j].0, &e[j].1), &negs, 0.1).unwrap();
        }
        assert_abs_diff_eq!(loss, expected / 5.0, epsilon = 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let dual = DualEncoder::new(toy_config(10, 1), true).unwrap();
        let mut p = dual.params.clone();
        let mut g = GradientSet::zeros_for(&p);
        g.w_q[[0, 0]] = 3.0;
        g.w_q[[0, 1]] = -0.5;
        let mut adam = Adam::new(&p, 0.01, 4);
        adam.step(&mut p, &g);
        assert_abs_diff_eq!(p.w_q[[0, 0]], dual.params.w_q[[0, 0]] - 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p.w_q[[0, 1]], dual.params.w_q[[0, 1]] + 0.01, epsilon = 1e-9);
        assert_eq!(p.w_k, dual.params.w_k);
        assert_abs_diff_eq!(adam.current_rate(), 0.0075, epsilon = 1e-15);
    }

    /// Query token `t` pairs with code token `t + 20` plus noise.
    fn separable(n: usize, seed: u64) -> Vec<EncodedPair> {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        (0..n as u64)
            .map(|i| {
                let t = 4 + (i as u32 % 16);
                let noise: u32 = rng.random_range(40..60);
                pair(i, &[t, t], &[t + 20, noise])
            })
            .collect()
    }

    fn small_cfg(epochs: usize) -> TrainingConfig {
        TrainingConfig {
            temperature: 0.1,
            batch_size: 8,
            epochs,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let pairs = separable(16, 0);
        let init = DualEncoder::new(toy_config(60, 1), true).unwrap();
        let (out, report) = train_dual(&pairs, init.clone(), &small_cfg(0)).unwrap();
        assert_eq!(out, init);
        assert!(report.epoch_losses.is_empty());
        let cross = CrossEncoder::new(toy_config(60, 2)).unwrap();
        let (d, c, _) = train_rr_joint(&pairs, init.clone(), cross.clone(), &small_cfg(0)).unwrap();
        assert_eq!((d, c), (init, cross));
    }

    #[test]
    fn dual_training_learns_and_is_deterministic() {
        let pairs = separable(48, 1);
        let init = DualEncoder::new(toy_config(60, 1), true).unwrap();
        let (a, report) = train_dual(&pairs, init.clone(), &small_cfg(10)).unwrap();
        let (b, _) = train_dual(&pairs, init, &small_cfg(10)).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let l = &report.epoch_losses;
        assert_eq!(l.len(), 10);
        assert!(l[9] < l[0], "{l:?}");
    }

    #[test]
    fn joint_dual_half_matches_dual_training() {
        let pairs = separable(20, 2);
        let init = DualEncoder::new(toy_config(60, 1), true).unwrap();
        let cross = CrossEncoder::new(toy_config(60, 9)).unwrap();
        let cfg = small_cfg(2);
        let (solo, solo_report) = train_dual(&pairs, init.clone(), &cfg).unwrap();
        let (joint, c, report) = train_rr_joint(&pairs, init, cross.clone(), &cfg).unwrap();
        assert_eq!(solo, joint);
        assert_eq!(solo_report, report.dual);
        assert_ne!(c, cross);
        let (_, c2, _) = train_rr_joint(&pairs, joint.clone(), cross, &cfg).unwrap();
        assert!(c2.params.all_finite());
    }

    fn cross_fixture() -> (Vec<EncodedPair>, DualEncoder, EmbeddingIndex) {
        let pairs = separable(32, 3);
        let init = DualEncoder::new(toy_config(60, 1), true).unwrap();
        let (dual, _) = train_dual(&pairs, init, &small_cfg(3)).unwrap();
        let codes: Vec<_> = pairs.iter().map(|p| (p.id, p.code.clone())).collect();
        let index = build_index(&codes, &dual).unwrap();
        (pairs, dual, index)
    }

    #[test]
    fn cross_training_without_negatives_is_a_no_op() {
        let (pairs, dual, index) = cross_fixture();
        let init = CrossEncoder::new(toy_config(60, 7)).unwrap();
        let ps = PsConfig {
            n_neg: 0,
            ..Default::default()
        };
        let (out, report) = train_cross(&pairs, &dual, &index, init.clone(), &small_cfg(2), &ps).unwrap();
        assert_eq!(out, init);
        assert!(report.epoch_losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn cross_training_reduces_loss() {
        let (pairs, dual, index) = cross_fixture();
        let init = CrossEncoder::new(toy_config(60, 7)).unwrap();
        let ps = PsConfig {
            start_rank: 1,
            window: 10,
            n_neg: 4,
        };
        let (a, report) = train_cross(&pairs, &dual, &index, init.clone(), &small_cfg(8), &ps).unwrap();
        let l = &report.epoch_losses;
        assert!(l[7] < l[0], "{l:?}");
        let (b, _) = train_cross(&pairs, &dual, &index, init, &small_cfg(8), &ps).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cross_training_checks_inputs() {
        let (pairs, dual, index) = cross_fixture();
        let init = CrossEncoder::new(toy_config(60, 7)).unwrap();
        let far = PsConfig {
            start_rank: 40,
            window: 10,
            n_neg: 1,
        };
        assert!(matches!(
            train_cross(&pairs, &dual, &index, init.clone(), &small_cfg(1), &far),
            Err(Error::StartBeyondCorpus { .. })
        ));
        let other = DualEncoder::new(toy_config(60, 99), true).unwrap();
        assert!(matches!(
            train_cross(&pairs, &other, &index, init.clone(), &small_cfg(1), &PsConfig::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(train_cross(&pairs[..10], &dual, &index, init, &small_cfg(1), &PsConfig::default()).is_err());
    }

    #[test]
    fn parallel_reduction_is_thread_count_independent() {
        let pairs = random_pairs(12, 50, 3);
        let dual = DualEncoder::new(toy_config(50, 2), true).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| dual_in_batch_loss(&dual, &pairs, 0.05, 32).unwrap())
        };
        let (l1, g1) = run(1);
        let (l4, g4) = run(4);
        assert_eq!(l1.to_bits(), l4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn config_json_defaults() {
        let cfg: TrainingConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.temperature, 0.05);
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"epoch": 3}"#).is_err());
        let ps: PsConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(ps, PsConfig::default());
    }
}
