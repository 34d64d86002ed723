//! Adam and the minibatch training loop.
//!
//! Training ascends the ELBO. Each step averages single-sample gradients over
//! the documents of a batch. All randomness derives from `TrainConfig::seed`
//! through keyed substreams:
//!
//! - parameter init: `[INIT]`
//! - epoch document order: `[ORDER, epoch]`
//! - noise for the document at position `p` of an epoch: `[NOISE, epoch, p]`
//!
//! so results do not depend on how work is split across threads. With
//! `deterministic` set, per-document gradients are also summed in document
//! order, which makes the final parameters bit-reproducible.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{CorpusSplit, Document};
use crate::model::{
    accumulate_elbo_gradients, ModelConfig, ModelError, ModelMode, ModelParams, ParamGrads, ParamSet,
    PerplexityAccumulator,
};
use crate::numerics::Rng;

const INIT_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("empty corpus: no trainable documents")]
    EmptyCorpus,
    #[error("non-finite gradient in '{parameter}'{}", context_suffix(*.epoch, *.batch))]
    NonFiniteGradient {
        parameter: String,
        epoch: Option<usize>,
        batch: Option<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

fn context_suffix(epoch: Option<usize>, batch: Option<usize>) -> String {
    match (epoch, batch) {
        (Some(e), Some(b)) => format!(" at epoch {e}, batch {b}"),
        _ => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub deterministic: bool,
    /// Save a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Defaults for `mode`: learning rate 1e-5 (SAVAE) or 1e-4 (NVDM),
    /// 1000 epochs, batches of 64.
    pub fn for_mode(mode: ModelMode) -> Self {
        Self {
            learning_rate: match mode {
                ModelMode::Savae => 1e-5,
                ModelMode::Nvdm => 1e-4,
            },
            epochs: 1000,
            batch_size: 64,
            seed: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            deterministic: true,
            checkpoint_every: 100,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push("train.lr must be a positive finite number".to_string());
        }
        if self.epochs == 0 {
            v.push("train.epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            v.push("train.beta1 must be in [0, 1)".to_string());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            v.push("train.beta2 must be in [0, 1)".to_string());
        }
        if !(self.eps_adam > 0.0) {
            v.push("train.eps must be > 0".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(v))
        }
    }
}

/// First and second moment estimates, one buffer per parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One Adam update that *ascends* along `grads`. Rejects the whole step,
/// leaving params and state untouched, if any gradient entry is not finite.
pub fn adam_step<P, G>(params: &mut P, grads: &G, state: &mut AdamState, config: &AdamConfig) -> Result<(), TrainError>
where
    P: ParamSet + ?Sized,
    G: ParamSet + ?Sized,
{
    let grad_tensors = grads.tensors();
    for (name, g) in &grad_tensors {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                parameter: name.clone(),
                epoch: None,
                batch: None,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, lr, eps) = (config.beta1, config.beta2, config.learning_rate, config.eps);
    for (((_, theta), (_, g)), (m, v)) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_tensors)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        assert_eq!(theta.len(), g.len(), "gradient shape mismatch");
        for i in 0..theta.len() {
            let gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] += lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_kl: f64,
    /// Bound-based perplexity over the training documents of this epoch.
    pub perplexity: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Empty documents excluded from training.
    pub skipped_documents: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,elbo,kl,perplexity,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}", Self::csv_line(r));
        }
        out
    }

    pub fn csv_line(r: &EpochRecord) -> String {
        format!(
            "{},{},{},{},{:.3}",
            r.epoch, r.mean_elbo, r.mean_kl, r.perplexity, r.seconds
        )
    }
}

pub fn train(
    corpus: &CorpusSplit,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(ModelParams, TrainLog), TrainError> {
    train_documents(&corpus.train, model_config, train_config, |_, _| Ok(()))
}

/// Trains on `docs` (empty ones are skipped and counted), calling
/// `on_epoch` after every epoch with the record and current parameters.
pub fn train_documents<F>(
    docs: &[Document],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, TrainLog), TrainError>
where
    F: FnMut(&EpochRecord, &ModelParams) -> Result<(), String>,
{
    let mut problems = model_config.violations();
    problems.extend(train_config.violations());
    if !problems.is_empty() {
        return Err(TrainError::InvalidConfig(problems));
    }
    let trainable: Vec<&Document> = docs.iter().filter(|d| d.is_trainable()).collect();
    if trainable.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    if let Some(bad) = trainable
        .iter()
        .flat_map(|d| d.ids.iter())
        .find(|&&id| id as usize >= model_config.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange {
            id: *bad,
            vocab_size: model_config.vocab_size,
        }
        .into());
    }

    let seed = train_config.seed;
    let mut params = ModelParams::init(model_config, &mut Rng::substream(seed, &[INIT_STREAM]));
    let mut adam = AdamState::new(&params);
    let adam_config = train_config.adam();
    let mut log = TrainLog {
        records: Vec::with_capacity(train_config.epochs),
        skipped_documents: docs.len() - trainable.len(),
    };
    let mut grads = ParamGrads::zeros_like(&params);

    for epoch in 1..=train_config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..trainable.len()).collect();
        Rng::substream(seed, &[ORDER_STREAM, epoch as u64]).shuffle(&mut order);

        let mut sum_total = 0.0;
        let mut sum_kl = 0.0;
        let mut words = 0usize;
        for (batch_idx, batch) in order.chunks(train_config.batch_size).enumerate() {
            let batch_start = batch_idx * train_config.batch_size;
            let scale = 1.0 / batch.len() as f64;
            let stats = batch_gradient(
                &trainable,
                batch,
                batch_start,
                epoch,
                &params,
                model_config,
                seed,
                scale,
                train_config.deterministic,
                &mut grads,
            )?;
            sum_total += stats.total;
            sum_kl += stats.kl;
            words += stats.words;
            adam_step(&mut params, &grads, &mut adam, &adam_config).map_err(|e| match e {
                TrainError::NonFiniteGradient { parameter, .. } => TrainError::NonFiniteGradient {
                    parameter,
                    epoch: Some(epoch),
                    batch: Some(batch_idx + 1),
                },
                other => other,
            })?;
        }
        let n = trainable.len() as f64;
        let record = EpochRecord {
            epoch,
            mean_elbo: sum_total / n,
            mean_kl: sum_kl / n,
            perplexity: {
                let mut ppl = PerplexityAccumulator::new(model_config.vocab_size);
                ppl.push(sum_total, words);
                ppl.perplexity().unwrap_or(f64::NAN)
            },
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &params).map_err(TrainError::Callback)?;
        log.records.push(record);
    }
    Ok((params, log))
}

#[derive(Debug, Default, Clone, Copy)]
struct BatchStats {
    total: f64,
    kl: f64,
    words: usize,
}

impl BatchStats {
    fn merge(self, other: Self) -> Self {
        Self {
            total: self.total + other.total,
            kl: self.kl + other.kl,
            words: self.words + other.words,
        }
    }
}

/// Noise vectors for the document at position `position` of `epoch`.
pub fn training_noise(seed: u64, epoch: usize, position: usize, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = Rng::substream(seed, &[NOISE_STREAM, epoch as u64, position as u64]);
    (0..samples).map(|_| rng.normals(dim)).collect()
}

fn document_gradient(
    doc: &Document,
    position: usize,
    epoch: usize,
    params: &ModelParams,
    config: &ModelConfig,
    seed: u64,
    scale: f64,
    grads: &mut ParamGrads,
) -> Result<BatchStats, ModelError> {
    let samples = config.train_samples.max(1);
    let per_sample = scale / samples as f64;
    let mut stats = BatchStats {
        words: doc.len(),
        ..Default::default()
    };
    for eps in training_noise(seed, epoch, position, samples, config.latent_dim) {
        let est = accumulate_elbo_gradients(doc, params, config, &eps, per_sample, grads)?;
        stats.total += est.total / samples as f64;
        stats.kl += est.kl / samples as f64;
    }
    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    docs: &[&Document],
    batch: &[usize],
    batch_start: usize,
    epoch: usize,
    params: &ModelParams,
    config: &ModelConfig,
    seed: u64,
    scale: f64,
    deterministic: bool,
    grads: &mut ParamGrads,
) -> Result<BatchStats, ModelError> {
    grads.fill(0.0);
    if deterministic {
        let mut stats = BatchStats::default();
        for (offset, &i) in batch.iter().enumerate() {
            let s = document_gradient(docs[i], batch_start + offset, epoch, params, config, seed, scale, grads)?;
            stats = stats.merge(s);
        }
        return Ok(stats);
    }
    let (partial, stats) = batch
        .par_iter()
        .enumerate()
        .try_fold(
            || (ParamGrads::zeros_like(params), BatchStats::default()),
            |(mut g, stats), (offset, &i)| {
                let s = document_gradient(docs[i], batch_start + offset, epoch, params, config, seed, scale, &mut g)?;
                Ok::<_, ModelError>((g, stats.merge(s)))
            },
        )
        .try_reduce(
            || (ParamGrads::zeros_like(params), BatchStats::default()),
            |(mut a, sa), (b, sb)| {
                a.add_scaled(1.0, &b);
                Ok((a, sa.merge(sb)))
            },
        )?;
    grads.add_scaled(1.0, &partial);
    Ok(stats)
}
