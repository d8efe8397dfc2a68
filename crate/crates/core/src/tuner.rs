//! Soft-prompt attack tuning against a frozen model.
//!
//! Aligned mode asks the model a yes/no question through a [`ChatTemplate`]
//! and trains the prompt with a hybrid of weighted language modeling, a
//! renormalized yes/no classification term and a penalty on mass outside
//! the two answers. Unaligned mode trains the prompt so that per-sample
//! losses of the same class cluster together (a supervised contrastive loss
//! over loss distances).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::datasets::Label;
use crate::error::{Error, Result};
use crate::model::{PackedInput, SoftPrompt, Trainable, TransformerLM};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::template::{answer_distribution_batch, ChatTemplate, Rendered};
use crate::trace::{mean_nll_batch, weighted_logprob, WeightedTargets};
use crate::vocab::{with_bos, Token};

/// Floor on `P(YES) + P(NO)` inside the logarithms.
pub const ANSWER_MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Aligned,
    Unaligned,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Aligned => "aligned",
            AttackMode::Unaligned => "unaligned",
        }
    }
}

/// How two samples' losses are turned into a similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `exp(-(L_m - L_n))`, signed.
    Signed,
    /// `exp(-|L_m - L_n|)`, symmetric.
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub distance_mode: DistanceMode,
    pub lr: f64,
    pub epochs: usize,
    /// Samples per batch; in unaligned mode half come from each class.
    pub batch_size: usize,
    pub n_prompt: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::Unaligned,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            temperature: 10.0,
            distance_mode: DistanceMode::Absolute,
            lr: 5e-4,
            epochs: 20,
            batch_size: 16,
            n_prompt: 8,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("attack.{k}"), "must be a finite value >= 0"));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("attack.temperature", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("attack.lr", "must be positive"));
        }
        if self.batch_size < 2 || (self.mode == AttackMode::Unaligned && self.batch_size % 2 != 0)
        {
            return Err(Error::config(
                "attack.batch_size",
                "must be at least 2 (and even in unaligned mode)",
            ));
        }
        if self.n_prompt == 0 {
            return Err(Error::config("attack.n_prompt", "must be positive"));
        }
        Ok(())
    }
}

/// The three parts of the aligned-mode objective and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HybridLossBreakdown {
    pub lm: f64,
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

impl HybridLossBreakdown {
    pub fn new(lm: f64, cls: f64, reg: f64, cfg: &AttackConfig) -> Self {
        Self {
            lm,
            cls,
            reg,
            total: cfg.alpha * lm + cfg.beta * cls + cfg.gamma * reg,
        }
    }
}

pub fn answer_token(label: Label) -> Token {
    if label.is_member() {
        Token::YES
    } else {
        Token::NO
    }
}

/// Tape nodes of the hybrid loss for a batch of renderings.
pub struct HybridNodes {
    /// `[1, B]` weighted LM loss per sample.
    pub lm: Var,
    /// `[B]` classification loss.
    pub cls: Var,
    /// `[B]` answer-mass penalty.
    pub reg: Var,
    /// Number of samples whose answer mass hit the floor.
    pub clamped: usize,
}

/// Builds the hybrid-loss parts for `rendered` (answers included) on `tape`.
pub fn hybrid_nodes<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    token_rows: &[usize],
    rendered: &[Rendered],
    labels: &[Label],
    template: &ChatTemplate,
) -> Result<HybridNodes> {
    let targets: Vec<WeightedTargets<S>> = rendered.iter().map(|r| template.lm_targets(r)).collect();
    let lp = weighted_logprob(tape, logits, token_rows, &targets)?;
    let lm = tape.neg(lp);
    let rows: Vec<usize> = rendered
        .iter()
        .zip(token_rows)
        .map(|(r, &t)| t + r.answer_pos)
        .collect();
    let (ly, ln, lse) = answer_logprobs(tape, logits, &rows)?;
    // classification: -(log p_label - logaddexp(log p_yes, log p_no))
    let both = tape.concat(&[ly, ln], 1)?;
    let idx: Vec<usize> = labels.iter().map(|l| usize::from(!l.is_member())).collect();
    let label_lp = tape.select(both, &idx)?;
    let cls = tape.sub(lse, label_lp)?;
    let floor = S::c(ANSWER_MASS_FLOOR.ln());
    let clamped = tape.value(lse).iter().filter(|&&v| v < floor).count();
    let lse_c = tape.clamp(lse, Some(floor), None);
    let reg = tape.neg(lse_c);
    Ok(HybridNodes {
        lm,
        cls,
        reg,
        clamped,
    })
}

/// `([B,1] log P(YES), [B,1] log P(NO), [B] log(P(YES)+P(NO)))` at `rows`.
pub fn answer_logprobs<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    rows: &[usize],
) -> Result<(Var, Var, Var)> {
    let b = rows.len();
    let picked = tape.gather(logits, rows)?;
    let ls = tape.log_softmax(picked)?;
    let ly = tape.select(ls, &vec![Token::YES.index(); b])?;
    let ly = tape.reshape(ly, vec![b, 1])?;
    let ln = tape.select(ls, &vec![Token::NO.index(); b])?;
    let ln = tape.reshape(ln, vec![b, 1])?;
    let both = tape.concat(&[ly, ln], 1)?;
    let lse = tape.logsumexp(both, None)?;
    Ok((ly, ln, lse))
}

/// Hybrid loss of one sample under the current prompt.
pub fn hybrid_loss<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: &SoftPrompt<S>,
    template: &ChatTemplate,
    text: &[u8],
    label: Label,
    cfg: &AttackConfig,
) -> Result<HybridLossBreakdown> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Trainable::None);
    let pv = prompt.bind(&mut tape, false);
    let r = template.render(text, Some(answer_token(label)));
    let out = model.forward_packed(
        &mut tape,
        &vars,
        &[PackedInput {
            prompt: pv,
            tokens: &r.tokens,
        }],
    )?;
    let n = hybrid_nodes(&mut tape, out.logits, &out.token_rows, &[r], &[label], template)?;
    let v = |x: Var| tape.value(x)[0].to_f64_lossy();
    Ok(HybridLossBreakdown::new(v(n.lm), v(n.cls), v(n.reg), cfg))
}

fn check_balanced(labels: &[Label]) -> Result<usize> {
    let n_mem = labels.iter().filter(|l| l.is_member()).count();
    let n_non = labels.len() - n_mem;
    if n_mem != n_non {
        return Err(Error::Invalid(format!(
            "contrastive batch needs equal classes, got {n_mem} members and {n_non} non-members"
        )));
    }
    if n_mem < 2 {
        return Err(Error::Invalid(
            "contrastive batch needs at least two samples per class".into(),
        ));
    }
    Ok(n_mem)
}

/// Per-anchor contrastive loss `[2N]` over the loss vector `losses` (any
/// shape with 2N elements).
pub fn contrastive_per_anchor<S: Scalar>(
    tape: &mut Tape<S>,
    losses: Var,
    labels: &[Label],
    temperature: f64,
    mode: DistanceMode,
) -> Result<Var> {
    let n2 = labels.len();
    check_balanced(labels)?;
    if tape.value(losses).len() != n2 {
        return Err(Error::Invalid(format!(
            "{} losses for {n2} labels",
            tape.value(losses).len()
        )));
    }
    let col = tape.reshape(losses, vec![n2, 1])?;
    let row = tape.reshape(losses, vec![1, n2])?;
    let mut diff = tape.sub(col, row)?;
    if mode == DistanceMode::Absolute {
        diff = tape.abs(diff);
    }
    let neg = tape.neg(diff);
    let d = tape.exp(neg);
    let d = tape.clamp(d, None, Some(S::c(30.0 * temperature)));
    let s = tape.scale(d, S::c(1.0 / temperature));
    let mut others = vec![true; n2 * n2];
    let mut positives = vec![false; n2 * n2];
    for m in 0..n2 {
        others[m * n2 + m] = false;
        for k in 0..n2 {
            positives[m * n2 + k] = k != m && labels[k] == labels[m];
        }
    }
    let den = tape.logsumexp(s, Some(others))?;
    let num = tape.logsumexp(s, Some(positives))?;
    Ok(tape.sub(den, num)?)
}

/// Batch contrastive loss: mean over all anchors.
pub fn contrastive_loss_node<S: Scalar>(
    tape: &mut Tape<S>,
    losses: Var,
    labels: &[Label],
    temperature: f64,
    mode: DistanceMode,
) -> Result<Var> {
    let per = contrastive_per_anchor(tape, losses, labels, temperature, mode)?;
    Ok(tape.mean(per))
}

/// Contrastive loss of given per-sample losses.
pub fn contrastive_loss(
    losses: &[f64],
    labels: &[Label],
    temperature: f64,
    mode: DistanceMode,
) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(vec![losses.len().max(1)], losses.to_vec())?;
    let out = contrastive_loss_node(&mut tape, l, labels, temperature, mode)?;
    Ok(tape.item(out))
}

/// Value every anchor takes when all losses are equal: `-log((N-1)/(2N-1))`.
pub fn contrastive_equal_value(n_per_class: usize) -> f64 {
    let n = n_per_class as f64;
    -((n - 1.0) / (2.0 * n - 1.0)).ln()
}

/// Outcome of a tuning run.
#[derive(Debug, Clone)]
pub struct TunedPrompt<S> {
    pub prompt: SoftPrompt<S>,
    pub epoch_losses: Vec<f64>,
    /// Count of answer-mass floor hits (aligned mode).
    pub clamp_warnings: usize,
}

/// A labeled text used for tuning.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub text: &'a [u8],
    pub label: Label,
}

fn batches(
    samples: &[Sample<'_>],
    cfg: &AttackConfig,
    rng: &mut Pcg64,
) -> Vec<Vec<usize>> {
    match cfg.mode {
        AttackMode::Aligned => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(rng);
            order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
        }
        AttackMode::Unaligned => {
            let mut mem: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label.is_member()).collect();
            let mut non: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].label.is_member()).collect();
            mem.shuffle(rng);
            non.shuffle(rng);
            let half = cfg.batch_size / 2;
            let usable = mem.len().min(non.len());
            let mut out = Vec::new();
            let mut start = 0;
            while start < usable {
                let end = (start + half).min(usable);
                if end - start < 2 {
                    break;
                }
                let mut b = mem[start..end].to_vec();
                b.extend_from_slice(&non[start..end]);
                out.push(b);
                start = end;
            }
            out
        }
    }
}

/// Trains a fresh soft prompt against the frozen `model`.
pub fn tune_soft_prompt<S: Scalar>(
    model: &TransformerLM<S>,
    samples: &[Sample<'_>],
    template: Option<&ChatTemplate>,
    cfg: &AttackConfig,
) -> Result<TunedPrompt<S>> {
    cfg.validate()?;
    let n_mem = samples.iter().filter(|s| s.label.is_member()).count();
    if n_mem == 0 || n_mem == samples.len() {
        return Err(Error::Insufficient("tuning set needs both members and non-members".into()));
    }
    if cfg.mode == AttackMode::Unaligned && n_mem.min(samples.len() - n_mem) < 2 {
        return Err(Error::Insufficient("unaligned tuning needs at least two samples per class".into()));
    }
    let template = match (cfg.mode, template) {
        (AttackMode::Aligned, None) => {
            return Err(Error::config("attack.mode", "aligned mode needs a chat template"))
        }
        (_, t) => t.cloned().unwrap_or_default(),
    };
    let d = model.config().d_model;
    let mut prompt = SoftPrompt::<S>::init(cfg.n_prompt, d, cfg.seed);
    let mut opt = AdamW::<S>::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ 0x5eed_0f_70_7e);
    let rendered: Vec<Vec<Token>>;
    let aligned_r: Vec<Rendered>;
    match cfg.mode {
        AttackMode::Aligned => {
            aligned_r = samples
                .iter()
                .map(|s| template.render(s.text, Some(answer_token(s.label))))
                .collect();
            rendered = aligned_r.iter().map(|r| r.tokens.clone()).collect();
        }
        AttackMode::Unaligned => {
            aligned_r = Vec::new();
            rendered = samples.iter().map(|s| with_bos(s.text)).collect();
        }
    }
    let mut out = TunedPrompt {
        prompt: prompt.clone(),
        epoch_losses: Vec::new(),
        clamp_warnings: 0,
    };
    let mut tape = Tape::new();
    let mut batch_id = 0usize;
    for _epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let bs = batches(samples, cfg, &mut rng);
        for b in &bs {
            tape.clear();
            let vars = model.bind(&mut tape, Trainable::None);
            let pv = prompt.bind(&mut tape, true);
            let inputs: Vec<PackedInput<'_>> = b
                .iter()
                .map(|&i| PackedInput {
                    prompt: pv,
                    tokens: &rendered[i],
                })
                .collect();
            let fwd = model.forward_packed(&mut tape, &vars, &inputs)?;
            let labels: Vec<Label> = b.iter().map(|&i| samples[i].label).collect();
            let loss = match cfg.mode {
                AttackMode::Aligned => {
                    let rs: Vec<Rendered> = b.iter().map(|&i| aligned_r[i].clone()).collect();
                    let h = hybrid_nodes(&mut tape, fwd.logits, &fwd.token_rows, &rs, &labels, &template)?;
                    out.clamp_warnings += h.clamped;
                    let lm = tape.mean(h.lm);
                    let cls = tape.mean(h.cls);
                    let reg = tape.mean(h.reg);
                    let lm = tape.scale(lm, S::c(cfg.alpha));
                    let cls = tape.scale(cls, S::c(cfg.beta));
                    let reg = tape.scale(reg, S::c(cfg.gamma));
                    let t = tape.add(lm, cls)?;
                    tape.add(t, reg)?
                }
                AttackMode::Unaligned => {
                    let targets: Vec<WeightedTargets<S>> =
                        b.iter().map(|&i| WeightedTargets::mean_over(&rendered[i])).collect();
                    let lp = weighted_logprob(&mut tape, fwd.logits, &fwd.token_rows, &targets)?;
                    let l = tape.neg(lp);
                    contrastive_loss_node(&mut tape, l, &labels, cfg.temperature, cfg.distance_mode)?
                }
            };
            let value = tape.item(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    value,
                    context: format!("in attack loss of batch {batch_id}"),
                });
            }
            tape.backward(loss)?;
            let pv = pv.expect("prompt has positive length");
            let t = prompt.tensor_mut().expect("prompt has positive length");
            tape.accumulate_into(pv, t)?;
            opt.step(&mut [t])?;
            total += value;
            batch_id += 1;
        }
        out.epoch_losses.push(total / bs.len().max(1) as f64);
    }
    out.prompt = prompt;
    Ok(out)
}

/// `log P(YES) − log P(NO)` at the answer slot for each text.
pub fn score_tuned_aligned<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: &SoftPrompt<S>,
    template: &ChatTemplate,
    texts: &[&[u8]],
) -> Result<Vec<f64>> {
    Ok(answer_distribution_batch(model, Some(prompt), template, texts)?
        .iter()
        .map(|d| d.log_ratio())
        .collect())
}

/// Negated mean NLL of each text behind the prompt.
pub fn score_tuned_unaligned<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: &SoftPrompt<S>,
    texts: &[&[u8]],
) -> Result<Vec<f64>> {
    Ok(mean_nll_batch(model, Some(prompt), texts)?
        .into_iter()
        .map(|v| -v)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<Label> {
        let mut v = vec![Label::Member; n];
        v.extend(vec![Label::NonMember; n]);
        v
    }

    #[test]
    fn equal_losses_give_the_closed_form() {
        for n in [2, 4, 8] {
            for mode in [DistanceMode::Signed, DistanceMode::Absolute] {
                let v = contrastive_loss(&vec![0.7; 2 * n], &labels(n), 10.0, mode).unwrap();
                assert!((v - contrastive_equal_value(n)).abs() < 1e-9);
            }
        }
        assert!((contrastive_equal_value(2) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unbalanced_batches_are_rejected() {
        let l = [Label::Member, Label::Member, Label::NonMember];
        assert!(contrastive_loss(&[1.0, 2.0, 3.0], &l, 10.0, DistanceMode::Absolute).is_err());
    }

    #[test]
    fn breakdown_total() {
        let b = HybridLossBreakdown::new(0.1, 0.2, 0.3, &AttackConfig::default());
        assert!((b.total - 0.6).abs() < 1e-12);
    }

    #[test]
    fn config_rejects_bad_values() {
        let c = AttackConfig {
            temperature: 0.0,
            ..AttackConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AttackConfig {
            batch_size: 15,
            ..AttackConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
