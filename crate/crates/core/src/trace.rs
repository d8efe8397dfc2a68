//! Per-token probability traces and sequence likelihoods.
//!
//! A scored text `x` is always fed as `[prompt?; BOS; x]`; the prediction of
//! `x[i]` is read from the row of the token just before it, so neither the
//! prompt nor BOS is ever scored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PackedInput, SoftPrompt, TransformerLM, Trainable};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::vocab::{with_bos, Token, VOCAB_SIZE};

/// Upper bound on packed rows per inference pass.
pub(crate) const MAX_PACKED_ROWS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Target log-probabilities and next-token distribution statistics for each
/// scored position.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LogProbTrace {
    pub target_logp: Vec<f64>,
    /// `E_v[log p(v)]`
    pub mean: Vec<f64>,
    /// Standard deviation of `log p(v)` under `p`.
    pub std: Vec<f64>,
}

impl LogProbTrace {
    pub fn len(&self) -> usize {
        self.target_logp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_logp.is_empty()
    }

    pub fn nll(&self, reduction: Reduction) -> f64 {
        let s: f64 = -self.target_logp.iter().sum::<f64>();
        match reduction {
            Reduction::Sum => s,
            Reduction::Mean => s / self.len().max(1) as f64,
        }
    }
}

/// Log-softmax of one logit row, in f64.
pub(crate) fn log_softmax_row<S: Scalar>(row: &[S]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
    let lse = m + row.iter().map(|v| (v.to_f64_lossy() - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.to_f64_lossy() - lse).collect()
}

/// `(mean, std)` of `log p` under `p`, computed in centered form.
pub(crate) fn distribution_stats(logp: &[f64]) -> (f64, f64) {
    let mu: f64 = logp.iter().map(|&l| l.exp() * l).sum();
    let var: f64 = logp.iter().map(|&l| l.exp() * (l - mu) * (l - mu)).sum();
    (mu, var.max(0.0).sqrt())
}

/// Groups items into packed passes of at most `MAX_PACKED_ROWS` rows.
pub(crate) fn pack_groups(lengths: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut groups = Vec::new();
    let mut start = 0;
    let mut rows = 0;
    for (i, &l) in lengths.iter().enumerate() {
        if i > start && rows + l > MAX_PACKED_ROWS {
            groups.push(start..i);
            start = i;
            rows = 0;
        }
        rows += l;
    }
    if start < lengths.len() {
        groups.push(start..lengths.len());
    }
    groups
}

/// Runs frozen forward passes over `seqs` and hands each sequence's logit
/// rows (token positions only, `len x V`) to `visit`.
pub(crate) fn for_each_logits<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    seqs: &[Vec<Token>],
    mut visit: impl FnMut(usize, &[S]) -> Result<()>,
) -> Result<()> {
    let n_p = prompt.map_or(0, |p| p.len());
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len() + n_p).collect();
    let mut tape = Tape::new();
    for group in pack_groups(&lengths) {
        tape.clear();
        let vars = model.bind(&mut tape, Trainable::None);
        let pv = prompt.and_then(|p| p.bind(&mut tape, false));
        let inputs: Vec<PackedInput<'_>> = seqs[group.clone()]
            .iter()
            .map(|s| PackedInput { prompt: pv, tokens: s })
            .collect();
        let out = model.forward_packed(&mut tape, &vars, &inputs)?;
        let all = tape.value(out.logits);
        for (k, i) in group.enumerate() {
            let start = out.token_rows[k] * VOCAB_SIZE;
            visit(i, &all[start..start + seqs[i].len() * VOCAB_SIZE])?;
        }
    }
    Ok(())
}

/// Traces for many texts, batched into packed passes.
pub fn trace_batch<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    texts: &[&[u8]],
) -> Result<Vec<LogProbTrace>> {
    if let Some(i) = texts.iter().position(|t| t.is_empty()) {
        return Err(Error::Invalid(format!("text #{i} is empty; nothing to score")));
    }
    let seqs: Vec<Vec<Token>> = texts.iter().map(|t| with_bos(t)).collect();
    let mut out = vec![LogProbTrace::default(); texts.len()];
    for_each_logits(model, prompt, &seqs, |i, logits| {
        let targets: Vec<usize> = seqs[i][1..].iter().map(|t| t.index()).collect();
        out[i] = trace_from_logits(&logits[..targets.len() * VOCAB_SIZE], VOCAB_SIZE, &targets);
        Ok(())
    })?;
    Ok(out)
}

/// Trace of `targets` under row-major `logits` with `vocab` columns; row
/// `i` is the distribution that predicts `targets[i]`.
pub fn trace_from_logits<S: Scalar>(logits: &[S], vocab: usize, targets: &[usize]) -> LogProbTrace {
    let mut tr = LogProbTrace::default();
    for (pos, &tok) in targets.iter().enumerate() {
        let lp = log_softmax_row(&logits[pos * vocab..(pos + 1) * vocab]);
        let (mu, sd) = distribution_stats(&lp);
        tr.target_logp.push(lp[tok]);
        tr.mean.push(mu);
        tr.std.push(sd);
    }
    tr
}

pub fn trace<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    text: &[u8],
) -> Result<LogProbTrace> {
    Ok(trace_batch(model, prompt, &[text])?.remove(0))
}

pub fn sequence_nll<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    text: &[u8],
    reduction: Reduction,
) -> Result<f64> {
    Ok(trace(model, prompt, text)?.nll(reduction))
}

/// Mean per-token NLL of each text (batched).
pub fn mean_nll_batch<S: Scalar>(
    model: &TransformerLM<S>,
    prompt: Option<&SoftPrompt<S>>,
    texts: &[&[u8]],
) -> Result<Vec<f64>> {
    Ok(trace_batch(model, prompt, texts)?
        .iter()
        .map(|t| t.nll(Reduction::Mean))
        .collect())
}

/// Position weights of one sequence inside a packed differentiable pass.
#[derive(Debug, Clone)]
pub struct WeightedTargets<S> {
    /// `(position in the token sequence, target token, weight)`; position
    /// `p` predicts the token at `p + 1`.
    pub entries: Vec<(usize, Token, S)>,
}

impl<S: Scalar> WeightedTargets<S> {
    /// Every next-token prediction of `tokens` with weight `1 / (len - 1)`.
    pub fn mean_over(tokens: &[Token]) -> Self {
        let n = tokens.len().saturating_sub(1);
        let w = S::one() / S::from_usize_lossy(n.max(1));
        Self {
            entries: (0..n).map(|p| (p, tokens[p + 1], w)).collect(),
        }
    }
}

/// Differentiable `[1, n]` vector whose entry `k` is
/// `Σ_j w_kj · log p(target_kj)` for packed sequence `k`.
pub fn weighted_logprob<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    token_rows: &[usize],
    targets: &[WeightedTargets<S>],
) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    let n = targets.len();
    let mut idx = vec![0usize; rows];
    let mut w = vec![S::zero(); rows * n];
    for (k, t) in targets.iter().enumerate() {
        for &(p, tok, wt) in &t.entries {
            let r = token_rows[k] + p;
            idx[r] = tok.index();
            w[r * n + k] += wt;
        }
    }
    let picked = tape.log_softmax_select(logits, &idx)?;
    let picked = tape.reshape(picked, vec![1, rows])?;
    let wv = tape.constant(vec![rows, n], w)?;
    Ok(tape.matmul(picked, wv)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_ratio: 2,
            context_length: 64,
            seed: 9,
        }
    }

    #[test]
    fn uniform_model_trace() {
        let mut m = TransformerLM::<f64>::new(cfg()).unwrap();
        m.zero_output_projection();
        let t = trace(&m, None, b"0123456789").unwrap();
        let lv = -(VOCAB_SIZE as f64).ln();
        assert_eq!(t.len(), 10);
        for i in 0..10 {
            assert!((t.target_logp[i] - lv).abs() < 1e-12);
            assert!((t.mean[i] - lv).abs() < 1e-12);
            assert!(t.std[i].abs() < 1e-12);
        }
        assert!((t.nll(Reduction::Sum) - 10.0 * (263f64).ln()).abs() < 1e-10);
        assert!((t.nll(Reduction::Mean) - 5.572).abs() < 1e-3);
    }

    #[test]
    fn packing_groups_respect_the_row_budget() {
        let g = pack_groups(&[1000, 1000, 100, 2000, 3000]);
        assert_eq!(g, vec![0..2, 2..3, 3..4, 4..5]);
        assert!(pack_groups(&[]).is_empty());
    }

    #[test]
    fn batch_matches_single() {
        let m = TransformerLM::<f64>::new(cfg()).unwrap();
        let texts: [&[u8]; 3] = [b"alpha", b"beta gamma", b"d"];
        let b = trace_batch(&m, None, &texts).unwrap();
        for (t, tr) in texts.iter().zip(&b) {
            let s = trace(&m, None, t).unwrap();
            for (x, y) in s.target_logp.iter().zip(&tr.target_logp) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_text_is_rejected() {
        let m = TransformerLM::<f64>::new(cfg()).unwrap();
        assert!(matches!(trace(&m, None, b""), Err(Error::Invalid(_))));
    }
}
