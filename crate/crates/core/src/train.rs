//! Mini-batch language-model training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PackedInput, Trainable, TransformerLM};
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::trace::{mean_nll_batch, weighted_logprob, WeightedTargets};
use crate::vocab::{with_bos, Token};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Texts are truncated to this many bytes.
    pub max_len: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch_size: 16,
            weight_decay: 0.0,
            max_len: 128,
            grad_clip: Some(1.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if self.max_len == 0 {
            return Err(Error::config("train.max_len", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a positive number"));
        }
        Ok(())
    }

    pub(crate) fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-token NLL of the corpus before the first update.
    pub initial_nll: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// One training sequence together with the predictions it is scored on.
#[derive(Debug, Clone)]
pub struct Example<S> {
    pub tokens: Vec<Token>,
    pub targets: WeightedTargets<S>,
}

/// Trains on `[BOS; text]` sequences, each weighted by its mean token NLL.
pub fn train_lm<S: Scalar>(
    model: &mut TransformerLM<S>,
    corpus: &[Vec<u8>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Insufficient("training corpus is empty".into()));
    }
    let texts: Vec<&[u8]> = corpus
        .iter()
        .map(|t| &t[..t.len().min(cfg.max_len)])
        .collect();
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::Invalid(format!("training text #{i} is empty")));
    }
    let examples: Vec<Example<S>> = texts
        .iter()
        .map(|t| {
            let tokens = with_bos(t);
            let targets = WeightedTargets::mean_over(&tokens);
            Example { tokens, targets }
        })
        .collect();
    let nll = mean_nll_batch(model, None, &texts)?;
    let initial_nll = nll.iter().sum::<f64>() / nll.len() as f64;
    let mut report = fit_examples(model, &examples, cfg, Trainable::All)?;
    report.initial_nll = initial_nll;
    Ok(report)
}

/// Generic weighted next-token training; the batch loss is the mean over
/// examples of their weighted log-likelihood, negated.
pub fn fit_examples<S: Scalar>(
    model: &mut TransformerLM<S>,
    examples: &[Example<S>],
    cfg: &TrainConfig,
    mode: Trainable,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = AdamW::<S>::new(cfg.adamw());
    let mut rng = Pcg64::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            tape.clear();
            let vars = model.bind(&mut tape, mode);
            let inputs: Vec<PackedInput<'_>> = chunk
                .iter()
                .map(|&i| PackedInput {
                    prompt: None,
                    tokens: &examples[i].tokens,
                })
                .collect();
            let out = model.forward_packed(&mut tape, &vars, &inputs)?;
            let targets: Vec<WeightedTargets<S>> =
                chunk.iter().map(|&i| examples[i].targets.clone()).collect();
            let lp = weighted_logprob(&mut tape, out.logits, &out.token_rows, &targets)?;
            let loss = tape.mean(lp);
            let loss = tape.neg(loss);
            let value = tape.item(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("in training loss at epoch {epoch}, step {}", opt.steps()),
                });
            }
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &vars)?;
            let mut params = model.trainable_params_mut(mode);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut params, c);
            }
            opt.step(&mut params)?;
            total += value;
            batches += 1;
        }
        report.epoch_losses.push(total / batches.max(1) as f64);
    }
    report.steps = opt.steps();
    Ok(report)
}
