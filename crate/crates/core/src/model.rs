//! Model parameters, forward loss and SGD steps.
//!
//! Two training paths share one parameter layout:
//!
//! * the attention model: the hidden state is an attention-weighted sum of
//!   context input vectors, where the weight of a context occurrence at
//!   relative time offset Δ is a softmax over per-(target, offset) scores
//!   `m[target, Δ+S] + b[Δ+S]`;
//! * the plain CBOW baseline: uniform 1/|ctx| averaging, attention ignored.
//!
//! Both optimize the negative-sampling objective
//! `-log σ(v'ₜ·h) - Σ log σ(-v'ₓ·h)` by SGD. With attention scores frozen
//! at zero the attention path reduces to CBOW bit-for-bit, which the tests
//! rely on.
//!
//! Arithmetic is generic over [`Real`]: `f32` for production training,
//! `f64` for the finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::io::{BufRead, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Vocabulary;
use crate::CodeId;

/// Scalar type for model arithmetic.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + FromPrimitive
    + Display
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Logistic arguments are clamped to this magnitude before exp/log.
const SIGMOID_CLAMP: f64 = 30.0;

fn c<F: Real>(x: f64) -> F {
    F::from(x).expect("constant representable in scalar type")
}

fn clamp_arg<F: Real>(x: F) -> F {
    let lim = c::<F>(SIGMOID_CLAMP);
    x.min(lim).max(-lim)
}

fn sigmoid<F: Real>(x: F) -> F {
    let x = clamp_arg(x);
    F::one() / (F::one() + (-x).exp())
}

fn log_sigmoid<F: Real>(x: F) -> F {
    let x = clamp_arg(x);
    -(-x).exp().ln_1p()
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("context set must contain at least one entry")]
    EmptyContext,
    #[error("embedding file, line {line}: {reason}")]
    InvalidEmbeddingFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One context occurrence: a code at a signed time-unit offset from the
/// target's bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextEntry {
    pub code: CodeId,
    pub offset: i32,
}

/// The assembled temporal context of one target occurrence.
///
/// Construction rejects empty entry lists; the trainer additionally
/// guarantees `|offset| <= S`, at most Γ entries, and that the target
/// occurrence itself is excluded (other occurrences of the same code may
/// appear).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextSet {
    target: CodeId,
    entries: Vec<ContextEntry>,
}

impl ContextSet {
    pub fn new(target: CodeId, entries: Vec<ContextEntry>) -> Result<Self, ModelError> {
        if entries.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        Ok(ContextSet { target, entries })
    }

    pub fn target(&self) -> CodeId {
        self.target
    }

    pub fn entries(&self) -> &[ContextEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Normalized per-code attention over the `2S+1` offset slots.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    pub code: CodeId,
    /// Non-negative, sums to 1; index `k` is offset `Δ = k - S`.
    pub weights: Vec<f64>,
}

/// Which of the two embedding matrices an export refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorKind {
    /// Context ("input") vectors `v` — the default export.
    Input,
    /// Target ("output") vectors `v'`.
    Output,
}

/// Which update rule a training step applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    /// Attention-weighted hidden state, all of v, v', m, b updated.
    Mce,
    /// Attention-weighted hidden state, but m and b left untouched.
    MceFrozen,
    /// Uniform averaging; attention neither read nor written.
    Cbow,
}

/// All learnable parameters.
///
/// `input`/`output` are |C|×d row-major; `attn` is |C|×(2S+1) row-major
/// with column `k` holding the score for offset `Δ = k - S`; `bias` has one
/// entry per offset slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Real = f32> {
    vocab_size: usize,
    dim: usize,
    scope: usize,
    input: Vec<F>,
    output: Vec<F>,
    attn: Vec<F>,
    bias: Vec<F>,
}

/// Reusable buffers for the SGD hot loop.
#[derive(Debug, Default)]
pub struct StepScratch<F: Real> {
    weights: Vec<F>,
    hidden: Vec<F>,
    grad_h: Vec<F>,
    neg_coef: Vec<F>,
    entry_dot: Vec<F>,
}

impl<F: Real> StepScratch<F> {
    pub fn new() -> Self {
        StepScratch {
            weights: Vec::new(),
            hidden: Vec::new(),
            grad_h: Vec::new(),
            neg_coef: Vec::new(),
            entry_dot: Vec::new(),
        }
    }
}

impl<F: Real> ModelParams<F> {
    /// Initialize: input vectors i.i.d. uniform in [-0.5/d, 0.5/d], output
    /// vectors zero, attention scores and bias zero (so attention starts
    /// exactly uniform and training starts at the CBOW baseline).
    pub fn init(vocab_size: usize, dim: usize, scope: usize, seed: u64) -> Self {
        assert!(vocab_size >= 1 && dim >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = (0..vocab_size * dim)
            .map(|_| c::<F>((rng.random::<f64>() - 0.5) / dim as f64))
            .collect();
        let slots = 2 * scope + 1;
        ModelParams {
            vocab_size,
            dim,
            scope,
            input,
            output: vec![F::zero(); vocab_size * dim],
            attn: vec![F::zero(); vocab_size * slots],
            bias: vec![F::zero(); slots],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Temporal scope S; offsets run in [-S, S].
    pub fn scope(&self) -> usize {
        self.scope
    }

    /// Number of offset slots, 2S+1.
    pub fn slots(&self) -> usize {
        2 * self.scope + 1
    }

    fn slot(&self, offset: i32) -> usize {
        let k = offset + self.scope as i32;
        debug_assert!(
            k >= 0 && (k as usize) < self.slots(),
            "offset {offset} outside scope ±{}",
            self.scope
        );
        k as usize
    }

    pub fn input_vector(&self, code: CodeId) -> &[F] {
        &self.input[code as usize * self.dim..(code as usize + 1) * self.dim]
    }

    pub fn output_vector(&self, code: CodeId) -> &[F] {
        &self.output[code as usize * self.dim..(code as usize + 1) * self.dim]
    }

    pub fn input_vectors(&self) -> &[F] {
        &self.input
    }

    pub fn output_vectors(&self) -> &[F] {
        &self.output
    }

    pub fn attention_scores(&self) -> &[F] {
        &self.attn
    }

    pub fn attention_bias(&self) -> &[F] {
        &self.bias
    }

    pub fn input_vectors_mut(&mut self) -> &mut [F] {
        &mut self.input
    }

    pub fn output_vectors_mut(&mut self) -> &mut [F] {
        &mut self.output
    }

    pub fn attention_scores_mut(&mut self) -> &mut [F] {
        &mut self.attn
    }

    pub fn attention_bias_mut(&mut self) -> &mut [F] {
        &mut self.bias
    }

    /// True if every parameter is finite.
    pub fn all_finite(&self) -> bool {
        self.input
            .iter()
            .chain(&self.output)
            .chain(&self.attn)
            .chain(&self.bias)
            .all(|x| x.is_finite())
    }

    /// Attention weights over the context occurrences: a softmax (with
    /// max-score subtraction) of `m[target, Δ_j+S] + b[Δ_j+S]` across the
    /// entries. The softmax runs over occurrences, so a bucket contributing
    /// more codes receives proportionally more total mass.
    pub fn attention_weights(&self, ctx: &ContextSet) -> Vec<F> {
        let mut out = Vec::new();
        self.attention_weights_into(ctx, &mut out);
        out
    }

    fn attention_weights_into(&self, ctx: &ContextSet, out: &mut Vec<F>) {
        let row = ctx.target as usize * self.slots();
        out.clear();
        let mut max = F::neg_infinity();
        for entry in ctx.entries() {
            let k = self.slot(entry.offset);
            let score = self.attn[row + k] + self.bias[k];
            out.push(score);
            if score > max {
                max = score;
            }
        }
        let mut denom = F::zero();
        for s in out.iter_mut() {
            *s = (*s - max).exp();
            denom += *s;
        }
        for s in out.iter_mut() {
            *s = *s / denom;
        }
    }

    /// Hidden state: the weighted sum of context input vectors.
    pub fn hidden(&self, ctx: &ContextSet, weights: &[F]) -> Vec<F> {
        assert_eq!(weights.len(), ctx.len());
        let mut h = vec![F::zero(); self.dim];
        self.hidden_into(ctx, weights, &mut h);
        h
    }

    fn hidden_into(&self, ctx: &ContextSet, weights: &[F], h: &mut [F]) {
        for x in h.iter_mut() {
            *x = F::zero();
        }
        for (entry, &w) in ctx.entries().iter().zip(weights) {
            let v = self.input_vector(entry.code);
            for (hk, &vk) in h.iter_mut().zip(v) {
                *hk += w * vk;
            }
        }
    }

    fn dot(a: &[F], b: &[F]) -> F {
        let mut acc = F::zero();
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
        acc
    }

    /// Negative-sampling loss of one target-context pair with attention
    /// weighting: `-log σ(v'ₜ·h) - Σ_x log σ(-v'ₓ·h)`.
    pub fn forward_loss(&self, ctx: &ContextSet, negatives: &[CodeId]) -> F {
        let weights = self.attention_weights(ctx);
        let h = self.hidden(ctx, &weights);
        self.loss_at(ctx.target, negatives, &h)
    }

    fn loss_at(&self, target: CodeId, negatives: &[CodeId], h: &[F]) -> F {
        let mut loss = -log_sigmoid(Self::dot(self.output_vector(target), h));
        for &neg in negatives {
            loss -= log_sigmoid(-Self::dot(self.output_vector(neg), h));
        }
        loss
    }

    /// One attention-model SGD step; updates v, v', m and b. Returns the
    /// loss at the pre-step parameters.
    pub fn train_step(&mut self, ctx: &ContextSet, negatives: &[CodeId], lr: F) -> F {
        self.step(ctx, negatives, lr, StepKind::Mce, &mut StepScratch::new())
    }

    /// Attention-model step with m and b frozen (their gradients dropped).
    pub fn train_step_frozen(&mut self, ctx: &ContextSet, negatives: &[CodeId], lr: F) -> F {
        self.step(
            ctx,
            negatives,
            lr,
            StepKind::MceFrozen,
            &mut StepScratch::new(),
        )
    }

    /// One baseline CBOW step: uniform 1/|ctx| averaging over the assembled
    /// temporal context set, no attention read or update.
    pub fn cbow_train_step(&mut self, ctx: &ContextSet, negatives: &[CodeId], lr: F) -> F {
        self.step(ctx, negatives, lr, StepKind::Cbow, &mut StepScratch::new())
    }

    /// The shared SGD step. All gradients are evaluated at the pre-step
    /// parameters and applied afterwards, so the update is an exact SGD
    /// step on the joint loss (duplicated negatives accumulate).
    ///
    /// Gradient structure, with `g = ∂loss/∂h` and `a` the weights:
    /// `∂loss/∂v[c_j] = a_j·g`; `v'` as in plain CBOW with `h` fixed; for
    /// the attention scores, `∂loss/∂s_j = a_j·(g·v[c_j] - Σ_k a_k·(g·v[c_k]))`,
    /// accumulated into `m[target, Δ_j+S]` and `b[Δ_j+S]` (entries sharing
    /// an offset slot accumulate into the same cells).
    pub fn step(
        &mut self,
        ctx: &ContextSet,
        negatives: &[CodeId],
        lr: F,
        kind: StepKind,
        scratch: &mut StepScratch<F>,
    ) -> F {
        let n = ctx.len();
        let dim = self.dim;

        match kind {
            StepKind::Cbow => {
                let inv = F::one() / c::<F>(n as f64);
                scratch.weights.clear();
                scratch.weights.resize(n, inv);
            }
            StepKind::Mce | StepKind::MceFrozen => {
                self.attention_weights_into(ctx, &mut scratch.weights);
            }
        }

        scratch.hidden.resize(dim, F::zero());
        self.hidden_into(ctx, &scratch.weights, &mut scratch.hidden);

        // Dots and coefficients against the pre-step output vectors.
        let pos_dot = Self::dot(self.output_vector(ctx.target), &scratch.hidden);
        let pos_coef = sigmoid(pos_dot) - F::one();
        let mut loss = -log_sigmoid(pos_dot);
        scratch.neg_coef.clear();
        for &neg in negatives {
            let d = Self::dot(self.output_vector(neg), &scratch.hidden);
            scratch.neg_coef.push(sigmoid(d));
            loss -= log_sigmoid(-d);
        }

        // g = ∂loss/∂h, from pre-step v'.
        scratch.grad_h.resize(dim, F::zero());
        for x in scratch.grad_h.iter_mut() {
            *x = F::zero();
        }
        {
            let vt = self.output_vector(ctx.target);
            for (gk, &vk) in scratch.grad_h.iter_mut().zip(vt) {
                *gk += pos_coef * vk;
            }
        }
        for (&neg, &coef) in negatives.iter().zip(&scratch.neg_coef) {
            let vx = self.output_vector(neg);
            for (gk, &vk) in scratch.grad_h.iter_mut().zip(vx) {
                *gk += coef * vk;
            }
        }

        // Attention score gradients need g·v[c_j] at the pre-step v.
        if kind == StepKind::Mce {
            scratch.entry_dot.clear();
            for entry in ctx.entries() {
                scratch
                    .entry_dot
                    .push(Self::dot(&scratch.grad_h, self.input_vector(entry.code)));
            }
        }

        // Apply: output vectors (h fixed).
        {
            let row = ctx.target as usize * dim;
            for (vk, &hk) in self.output[row..row + dim].iter_mut().zip(&scratch.hidden) {
                *vk -= lr * pos_coef * hk;
            }
        }
        for (&neg, &coef) in negatives.iter().zip(&scratch.neg_coef) {
            let row = neg as usize * dim;
            for (vk, &hk) in self.output[row..row + dim].iter_mut().zip(&scratch.hidden) {
                *vk -= lr * coef * hk;
            }
        }

        // Apply: input vectors.
        for (entry, &w) in ctx.entries().iter().zip(&scratch.weights) {
            let row = entry.code as usize * dim;
            for (vk, &gk) in self.input[row..row + dim].iter_mut().zip(&scratch.grad_h) {
                *vk -= lr * w * gk;
            }
        }

        // Apply: attention scores and bias.
        if kind == StepKind::Mce {
            let mut weighted_mean = F::zero();
            for (&w, &d) in scratch.weights.iter().zip(&scratch.entry_dot) {
                weighted_mean += w * d;
            }
            let row = ctx.target as usize * self.slots();
            for ((entry, &w), &d) in ctx
                .entries()
                .iter()
                .zip(&scratch.weights)
                .zip(&scratch.entry_dot)
            {
                let k = self.slot(entry.offset);
                let grad_score = w * (d - weighted_mean);
                self.attn[row + k] -= lr * grad_score;
                self.bias[k] -= lr * grad_score;
            }
        }

        loss
    }

    /// Per-code attention profile: the softmax of `m[c,·] + b` over all
    /// 2S+1 slots (the canonical one-occurrence-per-bucket normalization).
    pub fn export_profiles(&self) -> Vec<AttentionProfile> {
        (0..self.vocab_size as CodeId)
            .map(|code| self.profile(code))
            .collect()
    }

    pub fn profile(&self, code: CodeId) -> AttentionProfile {
        let slots = self.slots();
        let row = code as usize * slots;
        let scores: Vec<f64> = (0..slots)
            .map(|k| (self.attn[row + k] + self.bias[k]).to_f64().unwrap())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        AttentionProfile {
            code,
            weights: exps.iter().map(|e| e / denom).collect(),
        }
    }
}

/// Embeddings read back from the text format.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub codes: Vec<String>,
    pub dim: usize,
    data: Vec<f32>,
}

impl EmbeddingSet {
    pub fn new(codes: Vec<String>, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(codes.len() * dim, data.len());
        EmbeddingSet { codes, dim, data }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Write embeddings as text: header `|C| d`, then one
/// `code v1 ... vd` line per code in vocabulary order.
pub fn write_embeddings<F: Real, W: Write>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    kind: VectorKind,
    mut w: W,
) -> Result<(), ModelError> {
    assert_eq!(vocab.len(), params.vocab_size());
    writeln!(w, "{} {}", vocab.len(), params.dim())?;
    for (id, code, _) in vocab.iter() {
        write!(w, "{code}")?;
        let row = match kind {
            VectorKind::Input => params.input_vector(id),
            VectorKind::Output => params.output_vector(id),
        };
        for x in row {
            write!(w, " {x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Read the format written by [`write_embeddings`].
pub fn read_embeddings<R: BufRead>(reader: R) -> Result<EmbeddingSet, ModelError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let mut parts = header.split_whitespace();
    let (n, dim): (usize, usize) = match (
        parts.next().and_then(|s| s.parse().ok()),
        parts.next().and_then(|s| s.parse().ok()),
    ) {
        (Some(n), Some(d)) => (n, d),
        _ => {
            return Err(ModelError::InvalidEmbeddingFile {
                line: 1,
                reason: format!("bad header `{header}`"),
            })
        }
    };
    let mut codes = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * dim);
    for (i, line) in lines.enumerate() {
        let line = line?;
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let code = fields
            .next()
            .ok_or_else(|| ModelError::InvalidEmbeddingFile {
                line: lineno,
                reason: "missing code".into(),
            })?;
        let row: Result<Vec<f32>, _> = fields.map(|f| f.parse::<f32>()).collect();
        let row = row.map_err(|e| ModelError::InvalidEmbeddingFile {
            line: lineno,
            reason: e.to_string(),
        })?;
        if row.len() != dim {
            return Err(ModelError::InvalidEmbeddingFile {
                line: lineno,
                reason: format!("expected {dim} components, found {}", row.len()),
            });
        }
        codes.push(code.to_string());
        data.extend(row);
    }
    if codes.len() != n {
        return Err(ModelError::InvalidEmbeddingFile {
            line: 1,
            reason: format!("header says {n} rows, file has {}", codes.len()),
        });
    }
    Ok(EmbeddingSet::new(codes, dim, data))
}

/// Write normalized attention profiles as CSV with header
/// `code,delta_-S,...,delta_S`.
pub fn write_attention_csv<F: Real, W: Write>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    mut w: W,
) -> Result<(), ModelError> {
    assert_eq!(vocab.len(), params.vocab_size());
    let scope = params.scope() as i64;
    write!(w, "code")?;
    for delta in -scope..=scope {
        write!(w, ",delta_{delta}")?;
    }
    writeln!(w)?;
    for (id, code, _) in vocab.iter() {
        let profile = params.profile(id);
        write!(w, "{code}")?;
        for x in &profile.weights {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ctx(target: CodeId, entries: &[(CodeId, i32)]) -> ContextSet {
        ContextSet::new(
            target,
            entries
                .iter()
                .map(|&(code, offset)| ContextEntry { code, offset })
                .collect(),
        )
        .unwrap()
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn empty_context_is_error() {
        assert!(matches!(
            ContextSet::new(0, vec![]),
            Err(ModelError::EmptyContext)
        ));
    }

    #[test]
    fn init_attention_starts_uniform() {
        let params = ModelParams::<f64>::init(5, 4, 2, 1);
        let ctx = ctx(0, &[(1, -2), (2, 0), (3, 1)]);
        for w in params.attention_weights(&ctx) {
            assert_close(w, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::<f32>::init(20, 8, 2, 42);
        let b = ModelParams::<f32>::init(20, 8, 2, 42);
        let c = ModelParams::<f32>::init(20, 8, 2, 43);
        assert_eq!(a.input_vectors(), b.input_vectors());
        assert_ne!(a.input_vectors(), c.input_vectors());
    }

    #[test]
    fn init_bounds_hold_at_scale() {
        let params = ModelParams::<f32>::init(13382, 100, 1, 7);
        assert_eq!(params.input_vectors().len(), 1_338_200);
        assert!(params.input_vectors().iter().all(|&x| x.abs() <= 0.005));
        assert!(params.output_vectors().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn attention_follows_scores() {
        let mut params = ModelParams::<f64>::init(4, 2, 2, 1);
        // Target 0, entries at offsets -1, 0, +1 with scores 0, 0, ln 2;
        // slot for Δ=+1 on row 0 is index 3.
        params.attention_scores_mut()[3] = 2f64.ln();
        let ctx = ctx(0, &[(1, -1), (2, 0), (3, 1)]);
        let w = params.attention_weights(&ctx);
        assert_close(w[0], 0.25, 1e-15);
        assert_close(w[1], 0.25, 1e-15);
        assert_close(w[2], 0.5, 1e-15);
    }

    #[test]
    fn attention_is_per_occurrence() {
        let params = ModelParams::<f64>::init(4, 2, 2, 1);
        // Two entries share Δ=0; with all scores zero the shared bucket
        // collects 2/3 of the mass.
        let ctx = ctx(0, &[(1, 0), (2, 0), (3, 1)]);
        let w = params.attention_weights(&ctx);
        assert_close(w[0] + w[1], 2.0 / 3.0, 1e-15);
    }

    #[test]
    fn bias_shift_leaves_attention_unchanged() {
        let mut params = ModelParams::<f64>::init(6, 3, 2, 9);
        for (i, x) in params.attention_scores_mut().iter_mut().enumerate() {
            *x = (i as f64 * 0.37).sin();
        }
        let ctx = ctx(2, &[(1, -2), (3, 0), (4, 1), (5, 2)]);
        let before = params.attention_weights(&ctx);
        for b in params.attention_bias_mut() {
            *b += 3.25;
        }
        let after = params.attention_weights(&ctx);
        for (x, y) in before.iter().zip(&after) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn hidden_single_context_is_that_vector() {
        let params = ModelParams::<f64>::init(4, 3, 1, 5);
        let cs = ctx(0, &[(2, 0)]);
        let w = params.attention_weights(&cs);
        assert_eq!(params.hidden(&cs, &w), params.input_vector(2).to_vec());
    }

    #[test]
    fn hidden_uniform_weights_is_mean() {
        let params = ModelParams::<f64>::init(4, 3, 1, 5);
        let cs = ctx(0, &[(1, -1), (2, 0)]);
        let h = params.hidden(&cs, &[0.5, 0.5]);
        for ((hk, a), b) in h
            .iter()
            .zip(params.input_vector(1))
            .zip(params.input_vector(2))
        {
            assert_close(*hk, (a + b) / 2.0, 1e-15);
        }
    }

    #[test]
    fn hidden_zero_vectors_give_zero() {
        let mut params = ModelParams::<f64>::init(4, 3, 1, 5);
        params.input_vectors_mut().fill(0.0);
        let cs = ctx(0, &[(1, -1), (2, 1)]);
        let w = params.attention_weights(&cs);
        assert!(params.hidden(&cs, &w).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn loss_with_zero_outputs_is_ln2_per_term() {
        let params = ModelParams::<f64>::init(10, 4, 2, 3);
        let cs = ctx(0, &[(1, 0), (2, 1)]);
        let loss = params.forward_loss(&cs, &[3, 4, 5, 6, 7]);
        assert_close(loss, 6.0 * 2f64.ln(), 1e-12);
    }

    #[test]
    fn loss_vanishes_in_the_separable_limit() {
        let mut params = ModelParams::<f64>::init(4, 2, 1, 3);
        params.input_vectors_mut().fill(0.0);
        params.input_vectors_mut()[2] = 1.0; // v[1] = (1, 0)
        let out = params.output_vectors_mut();
        out[0] = 100.0; // v'[0] · h -> clamped +30
        out[2 * 2] = -100.0; // v'[2] · h -> clamped -30
        let cs = ctx(0, &[(1, 0)]);
        let loss = params.forward_loss(&cs, &[2]);
        assert!((0.0..1e-10).contains(&loss), "loss = {loss}");
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut params = ModelParams::<f64>::init(8, 3, 2, 17);
        for (i, x) in params.output_vectors_mut().iter_mut().enumerate() {
            *x = (i as f64 * 0.61).cos() * 2.0;
        }
        let cs = ctx(1, &[(2, -2), (3, 0), (4, 2)]);
        assert!(params.forward_loss(&cs, &[5, 6]) >= 0.0);
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut params = ModelParams::<f64>::init(8, 3, 2, 17);
        let before = params.clone();
        let cs = ctx(1, &[(2, -2), (3, 0)]);
        let loss = params.train_step(&cs, &[4, 5], 0.0);
        assert_eq!(params, before);
        assert_close(loss, before.forward_loss(&cs, &[4, 5]), 1e-15);
    }

    /// Randomized parameters for gradient checking.
    fn random_params(seed: u64, vocab: usize, dim: usize, scope: usize) -> ModelParams<f64> {
        let mut params = ModelParams::<f64>::init(vocab, dim, scope, seed);
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for x in params.input_vectors_mut() {
            *x = next();
        }
        for x in params.output_vectors_mut() {
            *x = next();
        }
        for x in params.attention_scores_mut() {
            *x = next();
        }
        for x in params.attention_bias_mut() {
            *x = next();
        }
        params
    }

    /// Analytic gradients via a lr=1 step (grad = old - new), checked
    /// against central finite differences of the forward loss.
    pub(crate) fn check_gradients(seed: u64, kind: StepKind) {
        let vocab = 20;
        let (dim, scope) = (8, 2);
        let params = random_params(seed, vocab, dim, scope);

        let n_ctx = 1 + (seed as usize % 6);
        let entries: Vec<ContextEntry> = (0..n_ctx)
            .map(|j| ContextEntry {
                code: ((seed as usize + 3 * j + 1) % vocab) as CodeId,
                offset: ((seed as usize + j) % (2 * scope + 1)) as i32 - scope as i32,
            })
            .collect();
        let target = (seed % vocab as u64) as CodeId;
        let cs = ContextSet::new(target, entries).unwrap();
        let negatives: Vec<CodeId> = (0..3)
            .map(|x| ((seed as usize + 7 * x + 5) % vocab) as CodeId)
            .collect();

        let loss_of = |p: &ModelParams<f64>| match kind {
            StepKind::Cbow => {
                let n = cs.len();
                let w = vec![1.0 / n as f64; n];
                let h = p.hidden(&cs, &w);
                p.loss_at(cs.target(), &negatives, &h)
            }
            _ => p.forward_loss(&cs, &negatives),
        };

        let mut stepped = params.clone();
        stepped.step(&cs, &negatives, 1.0, kind, &mut StepScratch::new());

        let view = |p: &ModelParams<f64>, i: usize| -> f64 {
            let mut idx = i;
            for part in [&p.input, &p.output, &p.attn, &p.bias] {
                if idx < part.len() {
                    return part[idx];
                }
                idx -= part.len();
            }
            unreachable!()
        };
        fn view_mut(p: &mut ModelParams<f64>, i: usize) -> &mut f64 {
            let mut idx = i;
            if idx < p.input.len() {
                return &mut p.input[idx];
            }
            idx -= p.input.len();
            if idx < p.output.len() {
                return &mut p.output[idx];
            }
            idx -= p.output.len();
            if idx < p.attn.len() {
                return &mut p.attn[idx];
            }
            idx -= p.attn.len();
            &mut p.bias[idx]
        }

        let total =
            params.input.len() + params.output.len() + params.attn.len() + params.bias.len();
        let eps = 1e-5;
        let mut checked = 0usize;
        for i in 0..total {
            let analytic = view(&params, i) - view(&stepped, i);
            let mut plus = params.clone();
            *view_mut(&mut plus, i) += eps;
            let mut minus = params.clone();
            *view_mut(&mut minus, i) -= eps;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-7 {
                continue; // both effectively zero
            }
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-4,
                "seed {seed} {kind:?}: param {i} analytic {analytic} vs numeric {numeric} (rel {rel})"
            );
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn gradients_match_finite_differences_mce() {
        for seed in 0..8 {
            check_gradients(seed, StepKind::Mce);
        }
    }

    #[test]
    fn gradients_match_finite_differences_cbow() {
        for seed in 0..8 {
            check_gradients(seed, StepKind::Cbow);
        }
    }

    #[test]
    fn frozen_step_equals_cbow_step() {
        // With m = b = 0 the frozen attention step must produce the exact
        // same parameter updates as the CBOW step, bit for bit.
        let mut a = ModelParams::<f32>::init(12, 6, 2, 11);
        let mut b = a.clone();
        let cs = ctx(3, &[(1, -2), (2, 0), (2, 0), (5, 1)]);
        let negs = [7, 8, 9];
        for _ in 0..25 {
            let la = a.train_step_frozen(&cs, &negs, 0.05);
            let lb = b.cbow_train_step(&cs, &negs, 0.05);
            assert_eq!(la, lb);
        }
        assert_eq!(a.input_vectors(), b.input_vectors());
        assert_eq!(a.output_vectors(), b.output_vectors());
        assert_eq!(a.attention_scores(), b.attention_scores());
    }

    #[test]
    fn cbow_single_context_loss() {
        let mut params = ModelParams::<f64>::init(4, 3, 1, 2);
        let cs = ctx(0, &[(1, 0)]);
        let loss = params.cbow_train_step(&cs, &[2], 0.0);
        assert_close(loss, 2.0 * 2f64.ln(), 1e-12);
    }

    #[test]
    fn one_step_decreases_loss() {
        for seed in 0..20 {
            let params = random_params(seed + 100, 16, 6, 2);
            let cs = ctx(
                (seed % 16) as CodeId,
                &[
                    ((seed % 15 + 1) as CodeId, -1),
                    ((seed % 13 + 2) as CodeId, 1),
                ],
            );
            let negs = [(seed % 11 + 3) as CodeId, (seed % 7 + 4) as CodeId];
            let mut ok = false;
            for lr in [1e-3, 1e-4] {
                let mut p = params.clone();
                let before = p.forward_loss(&cs, &negs);
                p.train_step(&cs, &negs, lr);
                let after = p.forward_loss(&cs, &negs);
                if after < before {
                    ok = true;
                    break;
                }
            }
            assert!(ok, "loss did not decrease for seed {seed}");
        }
    }

    #[test]
    fn profiles_start_uniform_and_normalized() {
        let params = ModelParams::<f32>::init(6, 4, 3, 1);
        let profiles = params.export_profiles();
        assert_eq!(profiles.len(), 6);
        for p in &profiles {
            assert_eq!(p.weights.len(), 7);
            for &w in &p.weights {
                assert_close(w, 1.0 / 7.0, 1e-9);
            }
            assert_close(p.weights.iter().sum::<f64>(), 1.0, 1e-12);
        }
    }

    #[test]
    fn embedding_file_round_trip() {
        let params = ModelParams::<f32>::init(3, 4, 1, 5);
        let vocab = Vocabulary::from_counts([
            ("A".to_string(), 9),
            ("B".to_string(), 6),
            ("C".to_string(), 5),
        ]);
        let mut buf = Vec::new();
        write_embeddings(&params, &vocab, VectorKind::Input, &mut buf).unwrap();
        let set = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(set.codes, vec!["A", "B", "C"]);
        assert_eq!(set.dim, 4);
        for (i, (id, _, _)) in vocab.iter().enumerate() {
            assert_eq!(set.vector(i), params.input_vector(id));
        }
    }

    #[test]
    fn attention_csv_header_and_rows() {
        let params = ModelParams::<f32>::init(2, 2, 2, 5);
        let vocab = Vocabulary::from_counts([("A".to_string(), 9), ("B".to_string(), 6)]);
        let mut buf = Vec::new();
        write_attention_csv(&params, &vocab, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "code,delta_-2,delta_-1,delta_0,delta_1,delta_2"
        );
        assert_eq!(lines.clone().count(), 2);
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 6);
            let total: f64 = fields[1..].iter().map(|f| f.parse::<f64>().unwrap()).sum();
            assert_close(total, 1.0, 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_weights_form_a_distribution(
            seed in 0u64..1000,
            scores in prop::collection::vec(-8.0f64..8.0, 1..12),
        ) {
            let scope = 3usize;
            let mut params = ModelParams::<f64>::init(4, 2, scope, seed);
            let entries: Vec<ContextEntry> = scores
                .iter()
                .enumerate()
                .map(|(j, _)| ContextEntry {
                    code: (j % 4) as CodeId,
                    offset: (j % (2 * scope + 1)) as i32 - scope as i32,
                })
                .collect();
            // Scatter the scores into the slots the entries touch.
            for (j, entry) in entries.iter().enumerate() {
                let k = (entry.offset + scope as i32) as usize;
                params.attention_scores_mut()[k] = scores[j];
            }
            let cs = ContextSet::new(0, entries).unwrap();
            let w = params.attention_weights(&cs);
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn steps_never_produce_non_finite_params(
            seed in 0u64..500,
            lr in 0.001f64..0.5,
            n_steps in 1usize..30,
        ) {
            let mut params = random_params(seed, 10, 4, 2);
            let cs = ctx(
                (seed % 10) as CodeId,
                &[(((seed + 1) % 10) as CodeId, -1), (((seed + 2) % 10) as CodeId, 2)],
            );
            let negs = [((seed + 3) % 10) as CodeId];
            for _ in 0..n_steps {
                let loss = params.train_step(&cs, &negs, lr);
                prop_assert!(loss.is_finite() && loss >= 0.0);
            }
            prop_assert!(params.all_finite());
        }
    }
}
