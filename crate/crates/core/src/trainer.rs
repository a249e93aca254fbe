//! Epoch orchestration: temporal context assembly, learning-rate schedule,
//! subsampling, and single- or multi-worker SGD over a corpus.
//!
//! Multi-worker training is asynchronous and lock-free: workers partition
//! entities and update the shared parameter matrices without coordination,
//! so races only cost stochastic staleness. Bit-for-bit reproducibility is
//! guaranteed in single-worker mode only.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{bucketize, Bucket, BucketedSequence, Corpus};
use crate::model::{ContextEntry, ContextSet, ModelParams, StepKind, StepScratch};
use crate::negsample::NegSampler;
use crate::CodeId;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus has no records")]
    EmptyCorpus,
    #[error("negative sampling needs a vocabulary of at least two codes")]
    VocabularyTooSmall,
    #[error("corpus has no trainable targets (every occurrence is isolated)")]
    NoTrainableTargets,
}

/// Which objective the trainer drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Time-aware attention model.
    Mce,
    /// Plain CBOW baseline over the same assembled temporal contexts.
    Cbow,
}

/// All training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Embedding dimension d.
    pub dim: usize,
    /// Temporal scope S in time units; contexts live at offsets in [-S, S].
    pub scope: usize,
    /// Context threshold Γ: cap on context occurrences per target.
    pub gamma: usize,
    /// Negative samples per target.
    pub negatives: usize,
    /// Starting learning rate α₀.
    pub alpha: f64,
    pub epochs: usize,
    /// Minimum raw count for vocabulary membership (used at corpus build).
    pub min_count: u64,
    /// Frequency-subsampling rejection threshold t.
    pub sample_threshold: f64,
    /// Days per time unit.
    pub time_unit_days: u32,
    pub workers: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Keep attention scores frozen at their initial zeros (Mce mode only);
    /// the resulting updates match the Cbow baseline exactly.
    pub freeze_attention: bool,
    /// Shuffle entity order each epoch (off by default: fixed order keeps
    /// runs reproducible and comparable).
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 100,
            scope: 20,
            gamma: 60,
            negatives: 5,
            alpha: 0.025,
            epochs: 5,
            min_count: 5,
            sample_threshold: 1e-4,
            time_unit_days: 7,
            workers: 1,
            seed: 1,
            mode: TrainMode::Mce,
            freeze_attention: false,
            shuffle: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.dim < 1 {
            return fail("dim must be >= 1");
        }
        if self.gamma < 1 {
            return fail("gamma must be >= 1");
        }
        if self.negatives < 1 {
            return fail("negatives must be >= 1");
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return fail("alpha must be > 0");
        }
        if self.epochs < 1 {
            return fail("epochs must be >= 1");
        }
        if self.sample_threshold.is_nan() || self.sample_threshold <= 0.0 {
            return fail("sample threshold must be > 0");
        }
        if self.time_unit_days < 1 {
            return fail("time unit must be >= 1 day");
        }
        if self.workers < 1 {
            return fail("workers must be >= 1");
        }
        Ok(())
    }

    fn step_kind(&self) -> StepKind {
        match (self.mode, self.freeze_attention) {
            (TrainMode::Cbow, _) => StepKind::Cbow,
            (TrainMode::Mce, true) => StepKind::MceFrozen,
            (TrainMode::Mce, false) => StepKind::Mce,
        }
    }
}

/// Training summary, serialized as the JSON report.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    /// Total target budget: eligible occurrences × epochs.
    pub targets: u64,
    /// SGD steps actually performed (post subsampling and isolation skips).
    pub steps: u64,
    pub epochs: usize,
    pub final_lr: f64,
    pub mean_loss_per_epoch: Vec<f64>,
    pub wall_seconds: f64,
    /// Attention-score computations performed; zero in Cbow mode. Bounded
    /// by `steps × gamma`.
    pub attention_ops: u64,
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub report: TrainReport,
}

/// Assemble the temporal context of the occurrence at
/// `(bucket_pos, code_pos)`: every code occurrence in buckets within ±S
/// time units, excluding the target occurrence itself, each entry carrying
/// its signed offset. When more than `gamma` occurrences qualify, entries
/// are kept by ascending |Δ|, preferring past over future at equal |Δ| and
/// record order within a bucket. Returns `None` when no context survives.
pub fn assemble_contexts(
    seq: &BucketedSequence,
    bucket_pos: usize,
    code_pos: usize,
    scope: usize,
    gamma: usize,
) -> Option<ContextSet> {
    let buckets = &seq.buckets;
    let t_index = buckets[bucket_pos].index as i64;
    let target = buckets[bucket_pos].codes[code_pos];
    let scope = scope as i64;

    let lo = buckets.partition_point(|b| (b.index as i64) < t_index - scope);
    let hi = buckets.partition_point(|b| (b.index as i64) <= t_index + scope);

    let mut entries: Vec<ContextEntry> = Vec::new();
    for (bpos, bucket) in buckets.iter().enumerate().take(hi).skip(lo) {
        let offset = (bucket.index as i64 - t_index) as i32;
        for (cpos, &code) in bucket.codes.iter().enumerate() {
            if bpos == bucket_pos && cpos == code_pos {
                continue;
            }
            entries.push(ContextEntry { code, offset });
        }
    }
    if entries.len() > gamma {
        entries.sort_by_key(|e| (e.offset.unsigned_abs(), e.offset > 0));
        entries.truncate(gamma);
    }
    ContextSet::new(target, entries).ok()
}

/// Linearly decayed learning rate with a 1e-4·α₀ floor.
pub fn lr_schedule(processed_targets: u64, total_targets: u64, alpha0: f64) -> f64 {
    let frac = if total_targets == 0 {
        0.0
    } else {
        1.0 - processed_targets as f64 / total_targets as f64
    };
    alpha0 * frac.max(1e-4)
}

/// Occurrences with at least one other occurrence within ±S time units;
/// only these can ever become training targets.
fn count_eligible_targets(sequences: &[BucketedSequence], scope: usize) -> u64 {
    let scope = scope as i64;
    let mut eligible = 0u64;
    for seq in sequences {
        let buckets = &seq.buckets;
        let mut prefix = Vec::with_capacity(buckets.len() + 1);
        prefix.push(0u64);
        for b in buckets {
            prefix.push(prefix.last().unwrap() + b.codes.len() as u64);
        }
        for b in buckets {
            let idx = b.index as i64;
            let lo = buckets.partition_point(|x| (x.index as i64) < idx - scope);
            let hi = buckets.partition_point(|x| (x.index as i64) <= idx + scope);
            if prefix[hi] - prefix[lo] >= 2 {
                eligible += b.codes.len() as u64;
            }
        }
    }
    eligible
}

fn mix_seed(seed: u64, epoch: u64, worker: u64) -> u64 {
    let mut z = seed
        ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ worker.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Walk one epoch's targets in traversal order, calling `on_target` with
/// each assembled context and its freshly drawn negatives.
///
/// Subsampling is applied per occurrence before target enumeration, so it
/// filters targets and contexts alike; the generator is re-seeded from
/// `(seed, epoch, worker)` so every epoch re-draws.
fn traverse_epoch<F>(
    sequences: &[BucketedSequence],
    entity_order: &[usize],
    config: &TrainConfig,
    rng_seed: u64,
    sampler: &NegSampler,
    keep: &[f64],
    mut on_target: F,
) where
    F: FnMut(ContextSet, &[CodeId]),
{
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut negatives: Vec<CodeId> = Vec::with_capacity(config.negatives);
    let mut filtered = BucketedSequence {
        buckets: Vec::new(),
    };

    for &ent in entity_order {
        let seq = &sequences[ent];

        filtered.buckets.clear();
        for bucket in &seq.buckets {
            let mut codes: Vec<CodeId> = Vec::with_capacity(bucket.codes.len());
            for &code in &bucket.codes {
                let p = keep[code as usize];
                if p >= 1.0 || rng.random::<f64>() < p {
                    codes.push(code);
                }
            }
            if !codes.is_empty() {
                filtered.buckets.push(Bucket {
                    index: bucket.index,
                    codes,
                });
            }
        }

        for bpos in 0..filtered.buckets.len() {
            for cpos in 0..filtered.buckets[bpos].codes.len() {
                let Some(ctx) =
                    assemble_contexts(&filtered, bpos, cpos, config.scope, config.gamma)
                else {
                    continue;
                };
                negatives.clear();
                for _ in 0..config.negatives {
                    let neg = sampler
                        .draw_excluding(&mut rng, ctx.target())
                        .expect("vocabulary size checked >= 2 before training");
                    negatives.push(neg);
                }
                on_target(ctx, &negatives);
            }
        }
    }
}

/// Shared-parameter cell for lock-free multi-worker SGD. Workers race on
/// element-wise float writes; a lost update costs stochastic staleness,
/// never structural corruption.
struct HogwildCell<T>(UnsafeCell<T>);

unsafe impl<T: Send> Sync for HogwildCell<T> {}

impl<T> HogwildCell<T> {
    fn new(value: T) -> Self {
        HogwildCell(UnsafeCell::new(value))
    }

    /// Safety: callers must only perform element-wise numeric writes that
    /// tolerate interleaving; no structural mutation (resizing) is allowed.
    #[allow(clippy::mut_from_ref)]
    unsafe fn get_mut(&self) -> &mut T {
        &mut *self.0.get()
    }

    fn into_inner(self) -> T {
        self.0.into_inner()
    }
}

fn entity_order(n: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, u64::MAX));
        // Fisher-Yates.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

/// Train a model over the corpus.
///
/// Per epoch, per entity, per bucket, each code occurrence surviving
/// subsampling becomes a target: contexts are assembled from the surviving
/// occurrences, `negatives` samples are drawn, and one SGD step runs at the
/// current scheduled rate. Entity order is fixed across epochs unless
/// `shuffle` is set; with `workers == 1` the whole run is deterministic
/// given the seed.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if corpus.records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if corpus.vocab.len() < 2 {
        return Err(TrainError::VocabularyTooSmall);
    }

    let sequences: Vec<BucketedSequence> = corpus
        .records
        .iter()
        .map(|r| bucketize(r, config.time_unit_days))
        .collect();
    let eligible = count_eligible_targets(&sequences, config.scope);
    if eligible == 0 {
        return Err(TrainError::NoTrainableTargets);
    }
    let total_targets = eligible * config.epochs as u64;

    let sampler = NegSampler::from_vocab(&corpus.vocab).expect("vocabulary is non-empty");
    let keep = corpus.vocab.keep_probabilities(config.sample_threshold);
    let kind = config.step_kind();
    let count_attention = config.mode == TrainMode::Mce;

    let params =
        ModelParams::<f32>::init(corpus.vocab.len(), config.dim, config.scope, config.seed);
    let shared = HogwildCell::new(params);
    let progress = AtomicU64::new(0);
    let attention_ops = AtomicU64::new(0);
    let mut mean_loss_per_epoch = Vec::with_capacity(config.epochs);
    let mut steps_total = 0u64;
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let order = entity_order(sequences.len(), config.shuffle, config.seed, epoch);
        let chunk_size = order.len().div_ceil(config.workers);

        let run_chunk = |worker: usize, chunk: &[usize]| -> (f64, u64) {
            // Safety: element-wise float updates only; see HogwildCell.
            let params = unsafe { shared.get_mut() };
            let mut scratch = StepScratch::new();
            let mut loss_sum = 0.0f64;
            let mut steps = 0u64;
            let mut ops = 0u64;
            traverse_epoch(
                &sequences,
                chunk,
                config,
                mix_seed(config.seed, epoch as u64, worker as u64),
                &sampler,
                &keep,
                |ctx, negatives| {
                    let done = progress.fetch_add(1, Ordering::Relaxed);
                    let lr = lr_schedule(done, total_targets, config.alpha) as f32;
                    if count_attention {
                        ops += ctx.len() as u64;
                    }
                    let loss = params.step(&ctx, negatives, lr, kind, &mut scratch);
                    loss_sum += loss as f64;
                    steps += 1;
                },
            );
            attention_ops.fetch_add(ops, Ordering::Relaxed);
            (loss_sum, steps)
        };

        let (epoch_loss, epoch_steps) = if config.workers == 1 {
            run_chunk(0, &order)
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = order
                    .chunks(chunk_size)
                    .enumerate()
                    .map(|(w, chunk)| scope.spawn(move || run_chunk(w, chunk)))
                    .collect();
                let mut loss = 0.0;
                let mut steps = 0;
                for handle in handles {
                    let (l, s) = handle.join().expect("training worker panicked");
                    loss += l;
                    steps += s;
                }
                (loss, steps)
            })
        };

        steps_total += epoch_steps;
        mean_loss_per_epoch.push(epoch_loss / epoch_steps.max(1) as f64);
    }

    let wall_seconds = start.elapsed().as_secs_f64();
    let processed = progress.load(Ordering::Relaxed);
    let report = TrainReport {
        targets: total_targets,
        steps: steps_total,
        epochs: config.epochs,
        final_lr: lr_schedule(processed.saturating_sub(1), total_targets, config.alpha),
        mean_loss_per_epoch,
        wall_seconds,
        attention_ops: attention_ops.load(Ordering::Relaxed),
    };
    Ok(TrainOutput {
        params: shared.into_inner(),
        report,
    })
}

/// Attention-score computations one training epoch would perform: the sum
/// of assembled context sizes over the epoch-0 single-worker traversal
/// (zero in Cbow mode). Mirrors `train`'s instrumented counter and is
/// bounded by `targets × gamma`.
pub fn count_attention_ops(corpus: &Corpus, config: &TrainConfig) -> Result<u64, TrainError> {
    config.validate()?;
    if corpus.records.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if corpus.vocab.len() < 2 {
        return Err(TrainError::VocabularyTooSmall);
    }
    if config.mode == TrainMode::Cbow {
        return Ok(0);
    }
    let sequences: Vec<BucketedSequence> = corpus
        .records
        .iter()
        .map(|r| bucketize(r, config.time_unit_days))
        .collect();
    let sampler = NegSampler::from_vocab(&corpus.vocab).expect("vocabulary is non-empty");
    let keep = corpus.vocab.keep_probabilities(config.sample_threshold);
    let order = entity_order(sequences.len(), config.shuffle, config.seed, 0);
    let mut ops = 0u64;
    traverse_epoch(
        &sequences,
        &order,
        config,
        mix_seed(config.seed, 0, 0),
        &sampler,
        &keep,
        |ctx, _| {
            ops += ctx.len() as u64;
        },
    );
    Ok(ops)
}
