//! Fine-tuning defenses that reverse the attack objectives.
//!
//! The unaligned defense drives every anchor's contrastive loss to the value
//! it takes when all losses are equal, so member and non-member losses
//! become indistinguishable. The aligned defense moves the answer-slot mass
//! away from both YES and NO, so the model declines to give a valid answer.
//! There is deliberately no label-flipping mode: teaching the model to give
//! the opposite answer still leaks membership through the answer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PackedInput, Trainable, TransformerLM};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::template::ChatTemplate;
use crate::trace::{mean_nll_batch, weighted_logprob, WeightedTargets};
use crate::tuner::{
    contrastive_equal_value, contrastive_per_anchor, DistanceMode, Sample, ANSWER_MASS_FLOOR,
};
use crate::vocab::{with_bos, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMode {
    UnalignedDefense,
    AlignedDefense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub mode: DefenseMode,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub distance_mode: DistanceMode,
    /// Which parameters the defense may change.
    pub trainable: Trainable,
    /// Largest tolerated relative rise of held-out mean NLL.
    pub utility_bound: f64,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            mode: DefenseMode::UnalignedDefense,
            epochs: 20,
            lr: 5e-5,
            batch_size: 16,
            temperature: 10.0,
            distance_mode: DistanceMode::Absolute,
            trainable: Trainable::All,
            utility_bound: 0.15,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("defense.lr", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("defense.batch_size", "must be at least 2"));
        }
        if self.mode == DefenseMode::UnalignedDefense && self.batch_size % 2 != 0 {
            return Err(Error::config("defense.batch_size", "must be even for the unaligned defense"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("defense.temperature", "must be positive"));
        }
        if self.trainable == Trainable::None {
            return Err(Error::config("defense.trainable", "a defense must train something"));
        }
        Ok(())
    }
}

/// Per-anchor `|L_ctr + log((N-1)/(2N-1))|`, averaged.
pub fn defense_loss_unaligned_node<S: Scalar>(
    tape: &mut Tape<S>,
    losses: Var,
    labels: &[crate::datasets::Label],
    temperature: f64,
    mode: DistanceMode,
) -> Result<Var> {
    let per = contrastive_per_anchor(tape, losses, labels, temperature, mode)?;
    let n = labels.len() / 2;
    let shifted = tape.add_scalar(per, S::c(-contrastive_equal_value(n)));
    let dev = tape.abs(shifted);
    Ok(tape.mean(dev))
}

pub fn defense_loss_unaligned(
    losses: &[f64],
    labels: &[crate::datasets::Label],
    temperature: f64,
    mode: DistanceMode,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![losses.len().max(1)], losses.to_vec())?;
    let out = defense_loss_unaligned_node(&mut tape, l, labels, temperature, mode)?;
    Ok(tape.item(out))
}

/// `[B]` values of `-log P(others)` at the given logit rows, floored at
/// `log 1e-12` inside the logarithm.
pub fn defense_loss_aligned_rows<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    rows: &[usize],
) -> Result<Var> {
    let picked = tape.gather(logits, rows)?;
    let ls = tape.log_softmax(picked)?;
    let v = tape.shape(ls)[1];
    let mut mask = Vec::with_capacity(rows.len() * v);
    for _ in rows {
        mask.extend((0..v).map(|i| i != Token::YES.index() && i != Token::NO.index()));
    }
    let others = tape.logsumexp(ls, Some(mask))?;
    let others = tape.clamp(others, Some(S::c(ANSWER_MASS_FLOOR.ln())), None);
    Ok(tape.neg(others))
}

/// `-log P(others)` at the answer slot of one rendering.
pub fn defense_loss_aligned<S: Scalar>(
    model: &TransformerLM<S>,
    template: &ChatTemplate,
    text: &[u8],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Trainable::None);
    let r = template.render(text, None);
    let out = model.forward_packed(
        &mut tape,
        &vars,
        &[PackedInput {
            prompt: None,
            tokens: &r.tokens,
        }],
    )?;
    let l = defense_loss_aligned_rows(&mut tape, out.logits, &[out.token_rows[0] + r.answer_pos])?;
    Ok(tape.item(l).to_f64_lossy())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DefenseReport {
    pub epoch_losses: Vec<f64>,
    /// Held-out mean NLL before and after the defense.
    pub utility_before: f64,
    pub utility_after: f64,
    /// `after / before - 1`.
    pub utility_rise: f64,
    /// Set when the rise exceeds the configured bound.
    pub utility_flagged: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Fine-tunes `model` in place with the selected defense loss.
///
/// The unaligned defense uses balanced batches from `data`; the aligned one
/// uses the member samples of `data` rendered through `template`.
/// `held_out` texts measure utility before and after.
pub fn apply_defense<S: Scalar>(
    model: &mut TransformerLM<S>,
    data: &[Sample<'_>],
    template: &ChatTemplate,
    held_out: &[&[u8]],
    cfg: &DefenseConfig,
) -> Result<DefenseReport> {
    cfg.validate()?;
    if held_out.is_empty() {
        return Err(Error::Insufficient("utility guard needs held-out texts".into()));
    }
    let before = mean(&mean_nll_batch(model, None, held_out)?);
    let mem: Vec<usize> = (0..data.len()).filter(|&i| data[i].label.is_member()).collect();
    let non: Vec<usize> = (0..data.len()).filter(|&i| !data[i].label.is_member()).collect();
    let (seqs, answer_pos): (Vec<Vec<Token>>, Vec<usize>) = match cfg.mode {
        DefenseMode::UnalignedDefense => {
            if mem.len().min(non.len()) < 2 {
                return Err(Error::Insufficient(
                    "unaligned defense needs at least two samples per class".into(),
                ));
            }
            (data.iter().map(|s| with_bos(s.text)).collect(), Vec::new())
        }
        DefenseMode::AlignedDefense => {
            if mem.is_empty() {
                return Err(Error::Insufficient("aligned defense needs member samples".into()));
            }
            data.iter()
                .map(|s| {
                    let r = template.render(s.text, None);
                    (r.tokens, r.answer_pos)
                })
                .unzip()
        }
    };
    let mut opt = AdamW::<S>::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0xdef_e45e);
    let mut report = DefenseReport::default();
    let mut tape = Tape::new();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = match cfg.mode {
            DefenseMode::UnalignedDefense => {
                let (mut m, mut n) = (mem.clone(), non.clone());
                m.shuffle(&mut rng);
                n.shuffle(&mut rng);
                let half = cfg.batch_size / 2;
                let usable = m.len().min(n.len());
                (0..usable)
                    .step_by(half)
                    .map(|s| (s, (s + half).min(usable)))
                    .filter(|(s, e)| e - s >= 2)
                    .map(|(s, e)| m[s..e].iter().chain(&n[s..e]).copied().collect())
                    .collect()
            }
            DefenseMode::AlignedDefense => {
                let mut m = mem.clone();
                m.shuffle(&mut rng);
                m.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
            }
        };
        let mut total = 0.0;
        for b in &batches {
            tape.clear();
            let vars = model.bind(&mut tape, cfg.trainable);
            let inputs: Vec<PackedInput<'_>> = b
                .iter()
                .map(|&i| PackedInput {
                    prompt: None,
                    tokens: &seqs[i],
                })
                .collect();
            let fwd = model.forward_packed(&mut tape, &vars, &inputs)?;
            let loss = match cfg.mode {
                DefenseMode::UnalignedDefense => {
                    let targets: Vec<WeightedTargets<S>> =
                        b.iter().map(|&i| WeightedTargets::mean_over(&seqs[i])).collect();
                    let lp = weighted_logprob(&mut tape, fwd.logits, &fwd.token_rows, &targets)?;
                    let l = tape.neg(lp);
                    let labels: Vec<_> = b.iter().map(|&i| data[i].label).collect();
                    defense_loss_unaligned_node(&mut tape, l, &labels, cfg.temperature, cfg.distance_mode)?
                }
                DefenseMode::AlignedDefense => {
                    let rows: Vec<usize> = b
                        .iter()
                        .zip(&fwd.token_rows)
                        .map(|(&i, &t)| t + answer_pos[i])
                        .collect();
                    let per = defense_loss_aligned_rows(&mut tape, fwd.logits, &rows)?;
                    tape.mean(per)
                }
            };
            let value = tape.item(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("in defense loss at step {step}"),
                });
            }
            tape.backward(loss)?;
            model.accumulate_grads(&tape, &vars)?;
            opt.step(&mut model.trainable_params_mut(cfg.trainable))?;
            total += value;
            step += 1;
        }
        report.epoch_losses.push(total / batches.len().max(1) as f64);
    }
    let after = mean(&mean_nll_batch(model, None, held_out)?);
    report.utility_before = before;
    report.utility_after = after;
    report.utility_rise = after / before - 1.0;
    report.utility_flagged = report.utility_rise > cfg.utility_bound;
    Ok(report)
}
