//! Reference membership scores. Every score is oriented so that a higher
//! value means "more likely a member".

use std::fmt;
use std::io::Write as _;
use std::str::FromStr;

use flate2::write::ZlibEncoder;
use flate2::Compression;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::scalar::Scalar;
use crate::trace::{log_softmax_row, mean_nll_batch, trace_batch, LogProbTrace, Reduction};
use crate::vocab::{Token, BYTE_TOKENS};

/// Floor on the per-position standard deviation in Min-K%++.
pub const MIN_K_PP_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ppl,
    MinK,
    MinKPp,
    Zlib,
    Lowercase,
    Neighbor,
    SmallerRef,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ppl,
        Method::MinK,
        Method::MinKPp,
        Method::Zlib,
        Method::Lowercase,
        Method::Neighbor,
        Method::SmallerRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ppl => "ppl",
            Method::MinK => "min_k",
            Method::MinKPp => "min_k_pp",
            Method::Zlib => "zlib",
            Method::Lowercase => "lowercase",
            Method::Neighbor => "neighbor",
            Method::SmallerRef => "smaller_ref",
        }
    }

    /// Whether the method needs a second, smaller model.
    pub fn needs_reference(self) -> bool {
        self == Method::SmallerRef
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineParams {
    /// Percentage of positions kept by both Min-K variants.
    pub k_percent: f64,
    pub n_neighbors: usize,
    pub substitution_rate: f64,
    pub seed: u64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            k_percent: 20.0,
            n_neighbors: 5,
            substitution_rate: 0.15,
            seed: 0,
        }
    }
}

impl BaselineParams {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k_percent)?;
        if self.n_neighbors == 0 {
            return Err(Error::config("baselines.n_neighbors", "must be at least 1"));
        }
        check_rate(self.substitution_rate)
    }
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k <= 100.0 {
        Ok(())
    } else {
        Err(Error::config("baselines.k_percent", format!("{k} is outside (0, 100]")))
    }
}

// A rate of exactly zero is accepted as the degenerate no-substitution case.
fn check_rate(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::config("baselines.substitution_rate", format!("{r} is outside [0, 1)")))
    }
}

fn nonempty(t: &LogProbTrace) -> Result<()> {
    if t.is_empty() {
        Err(Error::Invalid("empty trace".into()))
    } else {
        Ok(())
    }
}

/// Mean of the `⌈k% · n⌉` smallest values.
fn mean_of_smallest(values: &[f64], k_percent: f64) -> f64 {
    let keep = ((k_percent / 100.0 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[..keep].iter().sum::<f64>() / keep as f64
}

pub fn score_ppl(trace: &LogProbTrace) -> Result<f64> {
    nonempty(trace)?;
    Ok(-trace.nll(Reduction::Mean))
}

pub fn score_min_k(trace: &LogProbTrace, k_percent: f64) -> Result<f64> {
    check_k(k_percent)?;
    nonempty(trace)?;
    if k_percent == 100.0 {
        return score_ppl(trace);
    }
    Ok(mean_of_smallest(&trace.target_logp, k_percent))
}

pub fn score_min_k_pp(trace: &LogProbTrace, k_percent: f64) -> Result<f64> {
    check_k(k_percent)?;
    nonempty(trace)?;
    let s: Vec<f64> = (0..trace.len())
        .map(|i| (trace.target_logp[i] - trace.mean[i]) / trace.std[i].max(MIN_K_PP_EPS))
        .collect();
    Ok(mean_of_smallest(&s, k_percent))
}

/// Length in bytes of `text` after zlib compression at the default level.
pub fn zlib_len(text: &[u8]) -> Result<usize> {
    let mut enc = ZlibEncoder::new(Vec::new(), Compression::default());
    enc.write_all(text)
        .and_then(|_| enc.finish())
        .map(|v| v.len())
        .map_err(|e| Error::Invalid(format!("zlib compression failed: {e}")))
}

pub fn score_zlib(trace: &LogProbTrace, text: &[u8]) -> Result<f64> {
    nonempty(trace)?;
    if text.is_empty() {
        return Err(Error::Invalid("empty text".into()));
    }
    let total: f64 = trace.target_logp.iter().sum();
    Ok(total / zlib_len(text)? as f64)
}

pub fn score_lowercase<S: Scalar>(model: &TransformerLM<S>, text: &[u8]) -> Result<f64> {
    Ok(lowercase_batch(model, &[text])?[0])
}

fn lowercase_batch<S: Scalar>(model: &TransformerLM<S>, texts: &[&[u8]]) -> Result<Vec<f64>> {
    let lowered: Vec<Vec<u8>> = texts.iter().map(|t| t.to_ascii_lowercase()).collect();
    let changed: Vec<usize> = (0..texts.len()).filter(|&i| lowered[i] != texts[i]).collect();
    let mut out = vec![0.0; texts.len()];
    if changed.is_empty() {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(Error::Invalid(format!("text #{i} is empty")));
        }
        return Ok(out);
    }
    let mut batch: Vec<&[u8]> = changed.iter().map(|&i| texts[i]).collect();
    batch.extend(changed.iter().map(|&i| lowered[i].as_slice()));
    let nll = mean_nll_batch(model, None, &batch)?;
    let n = changed.len();
    for (j, &i) in changed.iter().enumerate() {
        out[i] = nll[n + j] - nll[j];
    }
    Ok(out)
}

/// Next-byte distribution right after BOS, used as the model's own
/// unigram proposal for neighbor substitutions. Special tokens are
/// excluded so neighbors stay plain text.
pub fn unigram_proposal<S: Scalar>(model: &TransformerLM<S>) -> Result<Vec<f64>> {
    let logits = model.forward(&[Token::BOS], None)?;
    let lp = log_softmax_row(&logits);
    Ok(lp[..BYTE_TOKENS].iter().map(|l| l.exp()).collect())
}

fn text_seed(seed: u64, text: &[u8]) -> u64 {
    // FNV-1a keeps neighbor draws independent of batch order.
    let h = text.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    seed ^ h
}

/// Draws `n` neighbors of `text`, each with `⌈rate · T⌉` positions
/// replaced by draws from `proposal`.
pub fn neighbors(
    text: &[u8],
    proposal: &[f64],
    n: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<Vec<u8>>> {
    check_rate(rate)?;
    if text.len() < 2 {
        return Err(Error::Invalid(format!(
            "neighbor scoring needs at least 2 tokens, got {}",
            text.len()
        )));
    }
    let dist = WeightedIndex::new(proposal)
        .map_err(|e| Error::Invalid(format!("unusable unigram proposal: {e}")))?;
    let swaps = (rate * text.len() as f64).ceil() as usize;
    let mut rng = Pcg64::seed_from_u64(text_seed(seed, text));
    Ok((0..n)
        .map(|_| {
            let mut t = text.to_vec();
            for p in sample(&mut rng, text.len(), swaps) {
                t[p] = dist.sample(&mut rng) as u8;
            }
            t
        })
        .collect())
}

pub fn score_neighbor<S: Scalar>(
    model: &TransformerLM<S>,
    text: &[u8],
    n_neighbors: usize,
    rate: f64,
    seed: u64,
) -> Result<f64> {
    let proposal = unigram_proposal(model)?;
    Ok(neighbor_batch(model, &proposal, &[text], n_neighbors, rate, seed)?[0])
}

fn neighbor_batch<S: Scalar>(
    model: &TransformerLM<S>,
    proposal: &[f64],
    texts: &[&[u8]],
    n: usize,
    rate: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("baselines.n_neighbors", "must be at least 1"));
    }
    let mut all: Vec<Vec<u8>> = Vec::with_capacity(texts.len() * (n + 1));
    for t in texts {
        all.push(t.to_vec());
        all.extend(neighbors(t, proposal, n, rate, seed)?);
    }
    let refs: Vec<&[u8]> = all.iter().map(|v| v.as_slice()).collect();
    let nll = mean_nll_batch(model, None, &refs)?;
    Ok(nll
        .chunks(n + 1)
        .map(|c| c[1..].iter().map(|v| v - c[0]).sum::<f64>() / n as f64)
        .collect())
}

pub fn score_smaller_ref<S: Scalar>(
    target: &TransformerLM<S>,
    reference: &TransformerLM<S>,
    text: &[u8],
) -> Result<f64> {
    Ok(smaller_ref_batch(target, reference, &[text])?[0])
}

fn smaller_ref_batch<S: Scalar>(
    target: &TransformerLM<S>,
    reference: &TransformerLM<S>,
    texts: &[&[u8]],
) -> Result<Vec<f64>> {
    // Both models share the fixed byte vocabulary; a mismatch can only
    // come from an unrelated checkpoint with a different output width.
    let vt = target.named_params().last().map(|(_, t)| t.shape().to_vec());
    let vr = reference.named_params().last().map(|(_, t)| t.shape().to_vec());
    if vt.as_ref().and_then(|s| s.last()) != vr.as_ref().and_then(|s| s.last()) {
        return Err(Error::Invalid("target and reference vocabularies differ".into()));
    }
    let t = mean_nll_batch(target, None, texts)?;
    let r = mean_nll_batch(reference, None, texts)?;
    Ok(r.iter().zip(&t).map(|(r, t)| r - t).collect())
}

/// Scores `texts` with one method. `reference` is required for
/// [`Method::SmallerRef`] and ignored otherwise.
pub fn score_batch<S: Scalar>(
    method: Method,
    target: &TransformerLM<S>,
    reference: Option<&TransformerLM<S>>,
    texts: &[&[u8]],
    params: &BaselineParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let scores = match method {
        Method::Ppl | Method::MinK | Method::MinKPp | Method::Zlib => {
            let traces = trace_batch(target, None, texts)?;
            traces
                .iter()
                .zip(texts)
                .map(|(t, x)| match method {
                    Method::Ppl => score_ppl(t),
                    Method::MinK => score_min_k(t, params.k_percent),
                    Method::MinKPp => score_min_k_pp(t, params.k_percent),
                    _ => score_zlib(t, x),
                })
                .collect::<Result<Vec<_>>>()?
        }
        Method::Lowercase => lowercase_batch(target, texts)?,
        Method::Neighbor => {
            let proposal = unigram_proposal(target)?;
            neighbor_batch(
                target,
                &proposal,
                texts,
                params.n_neighbors,
                params.substitution_rate,
                params.seed,
            )?
        }
        Method::SmallerRef => {
            let r = reference.ok_or_else(|| {
                Error::MissingArtifact("smaller_ref needs a reference model".into())
            })?;
            smaller_ref_batch(target, r, texts)?
        }
    };
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            value: scores[i],
            context: format!("{method} score of text #{i}"),
        });
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(lp: &[f64]) -> LogProbTrace {
        LogProbTrace {
            target_logp: lp.to_vec(),
            mean: vec![0.0; lp.len()],
            std: vec![1.0; lp.len()],
        }
    }

    #[test]
    fn ppl_and_min_k_by_hand() {
        assert_eq!(score_ppl(&tr(&[-1.0, -2.0, -3.0])).unwrap(), -2.0);
        let t = tr(&[-0.1, -5.0, -0.2, -4.0]);
        assert_eq!(score_min_k(&t, 50.0).unwrap(), -4.5);
        assert_eq!(score_min_k(&t, 25.0).unwrap(), -5.0);
        assert_eq!(score_min_k(&t, 100.0).unwrap(), score_ppl(&t).unwrap());
        assert!(score_min_k(&t, 0.0).is_err());
        assert!(score_min_k(&t, 100.5).is_err());
        assert!(score_ppl(&tr(&[])).is_err());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn zlib_linearity_and_zero() {
        let text = b"abcabcabcabc";
        assert_eq!(score_zlib(&tr(&[0.0; 12]), text).unwrap(), 0.0);
        let a = score_zlib(&tr(&[-1.0; 12]), text).unwrap();
        let b = score_zlib(&tr(&[-2.0; 12]), text).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_neighbors_are_copies() {
        let p = vec![1.0; BYTE_TOKENS];
        let n = neighbors(b"hello", &p, 3, 0.0, 1).unwrap();
        assert!(n.iter().all(|x| x == b"hello"));
        assert!(neighbors(b"h", &p, 3, 0.1, 1).is_err());
        let a = neighbors(b"hello world", &p, 3, 0.3, 9).unwrap();
        assert_eq!(a, neighbors(b"hello world", &p, 3, 0.3, 9).unwrap());
        for x in &a {
            let diff = x.iter().zip(b"hello world").filter(|(u, v)| u != v).count();
            assert!(diff <= 4);
        }
    }
}
