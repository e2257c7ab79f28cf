//! Optimization loop for base pretraining and prompt-strategy training.

pub mod checkpoint;
mod optim;

pub use checkpoint::{
    decode_container, encode_container, fingerprint, store_bytes, Checkpoint, CheckpointKind, CheckpointMeta, Container,
};
pub use optim::{clip_grad_norm, global_norm, AdamWConfig, AdamWState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DialogueSample;
use crate::error::{Error, Result};
use crate::prompt::{assemble_input, sample_loss, AssembledInput, PromptConfig, PromptModule, Template};
use crate::tensor::{ParamStore, Tape};
use crate::transformer::{LmParams, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Training samples re-scored before training and after every epoch.
    pub probe_size: usize,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-4,
            grad_clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 42,
            probe_size: 256,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Token-weighted validation NLL per epoch.
    pub val_loss: Vec<f64>,
    /// Probe-set loss before training, then after each epoch.
    pub probe_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were retained.
    pub best_epoch: Option<usize>,
    pub steps: u64,
    /// Reason training stopped early on a non-finite value.
    pub aborted: Option<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: History,
    pub optimizer: AdamWState,
}

/// Assembles every sample that fits the context window; returns the inputs
/// and the number of samples skipped for length.
pub fn assemble_split(
    config: &PromptConfig,
    model: &ModelConfig,
    template: &Template,
    samples: &[DialogueSample],
) -> Result<(Vec<AssembledInput>, usize)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        match assemble_input(config, model, template, s) {
            Ok(a) => out.push(a),
            Err(Error::Length { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

fn masked_count(s: &AssembledInput) -> usize {
    s.mask.iter().filter(|&&m| m).count()
}

/// Mean masked NLL over a split, weighting each sample by its number of
/// scored tokens. Deterministic.
pub fn validate(base: &LmParams<f32>, module: &PromptModule<f32>, split: &[AssembledInput]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let per: Vec<(f64, usize)> = split
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let bb = base.store().bind(&mut tape, false);
            let pb = module.store().bind(&mut tape, false);
            let l = sample_loss(&mut tape, base, &bb, module, &pb, s)?;
            let n = masked_count(s);
            Ok((tape.value(l).data()[0] as f64 * n as f64, n))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = per.iter().fold((0.0, 0), |(a, b), &(x, k)| (a + x, b + k));
    Ok(sum / n as f64)
}

/// Loss and gradients of the trainable set for one batch: per-sample tapes,
/// gradients summed in sample order and divided by the batch size.
fn batch_gradients(
    base: &LmParams<f32>,
    module: &PromptModule<f32>,
    batch: &[&AssembledInput],
    trains_base: bool,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let per: Vec<(f64, Vec<Vec<f32>>)> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let bb = base.store().bind(&mut tape, trains_base);
            let pb = module.store().bind(&mut tape, !trains_base);
            let l = sample_loss(&mut tape, base, &bb, module, &pb, s)?;
            let loss = tape.value(l).data()[0] as f64;
            tape.backward(l)?;
            let g = if trains_base {
                base.store().collect_grads(&tape, &bb)
            } else {
                module.store().collect_grads(&tape, &pb)
            };
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f32;
    let mut iter = per.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in acc.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    acc.iter_mut().flatten().for_each(|x| *x *= inv);
    Ok((loss / batch.len() as f64, acc))
}

fn trainable<'a>(base: &'a LmParams<f32>, module: &'a PromptModule<f32>, trains_base: bool) -> &'a ParamStore<f32> {
    if trains_base {
        base.store()
    } else {
        module.store()
    }
}

fn trainable_mut<'a>(
    base: &'a mut LmParams<f32>,
    module: &'a mut PromptModule<f32>,
    trains_base: bool,
) -> &'a mut ParamStore<f32> {
    if trains_base {
        base.store_mut()
    } else {
        module.store_mut()
    }
}

/// Trains the strategy's trainable set (the base for fine-tuning, the
/// prompt module otherwise) and leaves the lowest-validation-loss
/// parameters in place. A non-finite loss or gradient stops training and
/// restores the best parameters seen so far; the reason is recorded in
/// [`History::aborted`].
pub fn train(
    base: &mut LmParams<f32>,
    module: &mut PromptModule<f32>,
    train_set: &[AssembledInput],
    valid_set: &[AssembledInput],
    cfg: &TrainConfig,
    optimizer: Option<AdamWState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training corpus is empty"));
    }
    if valid_set.is_empty() {
        return Err(Error::data("validation split is empty"));
    }
    let strategy = module.strategy();
    let trains_base = strategy.trains_base();
    let mut history = History::default();
    let mut opt = match optimizer {
        Some(s) => s,
        None => AdamWState::new(trainable(base, module, trains_base)),
    };
    if !strategy.has_trainable_params() {
        history.val_loss.push(validate(base, module, valid_set)?);
        return Ok(TrainOutcome {
            history,
            optimizer: opt,
        });
    }
    let adam = cfg.adamw();
    let probe: Vec<AssembledInput> = train_set.iter().take(cfg.probe_size.max(1)).cloned().collect();
    match validate(base, module, &probe) {
        Ok(l) => history.probe_loss.push(l),
        Err(Error::Numeric(m)) => {
            history.aborted = Some(format!("{m} before training"));
            return Ok(TrainOutcome {
                history,
                optimizer: opt,
            });
        }
        Err(e) => return Err(e),
    }
    let mut best: Option<(f64, ParamStore<f32>, AdamWState)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| history.steps >= m) {
                break;
            }
            let batch: Vec<&AssembledInput> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = match batch_gradients(base, module, &batch, trains_base) {
                Ok(x) => x,
                Err(Error::Numeric(m)) => {
                    history.aborted = Some(format!("{m} at epoch {epoch}, step {}", history.steps));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let norm = global_norm(&grads);
            if !loss.is_finite() || !norm.is_finite() {
                history.aborted = Some(format!(
                    "non-finite {} at epoch {epoch}, step {}",
                    if loss.is_finite() { "gradient" } else { "loss" },
                    history.steps
                ));
                break 'epochs;
            }
            clip_grad_norm(&mut grads, cfg.grad_clip_norm);
            opt.step(trainable_mut(base, module, trains_base), &grads, &adam)?;
            history.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let (val, probe_loss) = match (validate(base, module, valid_set), validate(base, module, &probe)) {
            (Ok(v), Ok(p)) => (v, p),
            (Err(Error::Numeric(m)), _) | (_, Err(Error::Numeric(m))) => {
                history.aborted = Some(format!("{m} in validation at epoch {epoch}"));
                break;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        history.train_loss.push(epoch_loss / batches as f64);
        history.probe_loss.push(probe_loss);
        history.val_loss.push(val);
        log::info!(
            "epoch {} train {:.4} val {:.4} probe {:.4} steps {}",
            epoch + 1,
            epoch_loss / batches as f64,
            val,
            probe_loss,
            history.steps
        );
        if !val.is_finite() {
            history.aborted = Some(format!("non-finite validation loss at epoch {epoch}"));
            break;
        }
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, trainable(base, module, trains_base).clone(), opt.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, store, state)) = best {
        *trainable_mut(base, module, trains_base) = store;
        opt = state;
    } else if history.aborted.is_some() {
        log::warn!("training aborted before the first epoch completed; parameters are from the last finite step");
    }
    Ok(TrainOutcome {
        history,
        optimizer: opt,
    })
}
