//! Minibatch training and evaluation loops shared by centralized and
//! federated runs.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, forward, loss_and_grads, ForwardOptions, ModelWeights};
use crate::rng::{epoch_rng, rng_for, SimRng};
use crate::tensor::{AdamConfig, AdamState, Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Running statistics of one pass over the training data (dropout active).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// One shuffled pass over `examples` with an optimizer step per batch.
/// `rng` drives both the shuffle and dropout.
pub fn train_epoch<T: Real>(
    weights: &mut ModelWeights<T>,
    optimizer: &mut AdamState<T>,
    examples: &[LabeledExample],
    batch_size: usize,
    rng: &mut SimRng,
) -> Result<EpochStats> {
    if examples.is_empty() {
        return Err(Error::Empty("training examples"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&LabeledExample> = chunk.iter().map(|&i| &examples[i]).collect();
        let step = loss_and_grads(weights, &batch, ForwardOptions::train(), rng)?;
        if !step.loss.as_f64().is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        loss_sum += step.loss.as_f64() * batch.len() as f64;
        correct += step
            .predictions
            .iter()
            .zip(&batch)
            .filter(|(p, e)| **p == e.label)
            .count();
        optimizer.step(&mut weights.tensors, &step.grads)?;
    }
    let n = examples.len() as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

/// Trains `weights` for `cfg.epochs` epochs. Epoch `e` draws its randomness
/// from `epoch_rng(cfg.seed, 0, e)`, the same stream a lone federated client
/// uses, so both paths produce identical weights.
pub fn train_centralized<T: Real>(
    weights: &mut ModelWeights<T>,
    optimizer: &mut AdamState<T>,
    examples: &[LabeledExample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &EpochStats, &ModelWeights<T>) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, 0, e);
        let s = train_epoch(weights, optimizer, examples, cfg.batch_size, &mut rng)?;
        on_epoch(e, &s, weights)?;
        stats.push(s);
    }
    Ok(stats)
}

pub fn new_optimizer<T: Real>(weights: &ModelWeights<T>, config: &AdamConfig) -> AdamState<T> {
    AdamState::for_params(*config, weights.tensors.iter())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy over all examples.
    pub loss: f64,
    pub predictions: Vec<usize>,
}

pub const EVAL_BATCH: usize = 64;

/// Inference over `examples` in fixed-size batches (dropout off). Batches
/// are independent, so they run in parallel without affecting the result.
pub fn evaluate<T: Real>(
    weights: &ModelWeights<T>,
    examples: &[LabeledExample],
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation examples"));
    }
    let per_batch: Vec<(f64, Vec<usize>)> = examples
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let batch: Vec<&LabeledExample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let params = weights.to_tape(&mut tape, false);
            let mut rng = rng_for(0, &[]);
            let out = forward(
                &mut tape,
                &params,
                &weights.config,
                &batch,
                ForwardOptions::eval(),
                &mut rng,
            )?;
            let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
            let loss = tape.cross_entropy(out.logits, &labels)?;
            let l = tape.value(loss).data()[0].as_f64() * chunk.len() as f64;
            Ok((l, argmax_rows(tape.value(out.logits))))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(examples.len());
    for (l, p) in per_batch {
        loss += l;
        predictions.extend(p);
    }
    Ok(Evaluation {
        loss: loss / examples.len() as f64,
        predictions,
    })
}
