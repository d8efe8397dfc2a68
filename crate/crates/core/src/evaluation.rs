//! ROC/AUC computation and attack reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::{score_batch, BaselineParams, Method};
use crate::datasets::{Label, TextRecord};
use crate::error::{Error, Result};
use crate::model::{SoftPrompt, TransformerLM};
use crate::scalar::Scalar;
use crate::template::ChatTemplate;
use crate::tuner::{score_tuned_aligned, score_tuned_unaligned, AttackMode};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// False-positive rates at which reports list the achieved TPR.
pub const REPORT_FPRS: [f64; 3] = [0.01, 0.05, 0.1];

fn class_counts(labels: &[Label]) -> (usize, usize) {
    let m = labels.iter().filter(|l| l.is_member()).count();
    (m, labels.len() - m)
}

fn check_inputs(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score #{i} is NaN")));
    }
    let (m, n) = class_counts(labels);
    if m == 0 || n == 0 {
        return Err(Error::Insufficient("AUC needs both members and non-members".into()));
    }
    Ok((m, n))
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random member outscores a random non-member, ties
/// counted half. Computed from exact pair counts, so the result is
/// bit-identical to counting all pairs.
pub fn compute_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (m, n) = check_inputs(scores, labels)?;
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u: u128 = 0;
    let mut non_above: u128 = 0;
    for g in tie_groups(scores) {
        let gm = g.iter().filter(|&&i| labels[i].is_member()).count() as u128;
        let gn = g.len() as u128 - gm;
        let non_below = n as u128 - non_above - gn;
        twice_u += 2 * gm * non_below + gm * gn;
        non_above += gn;
    }
    Ok(twice_u as f64 / (2 * m as u128 * n as u128) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct
    /// threshold.
    pub points: Vec<(f64, f64)>,
    /// Threshold that produces each point (predict member when
    /// `score >= threshold`); the first point uses `+inf`.
    pub thresholds: Vec<f64>,
}

impl RocCurve {
    pub fn new(scores: &[f64], labels: &[Label]) -> Result<Self> {
        let (m, n) = check_inputs(scores, labels)?;
        let mut points = vec![(0.0, 0.0)];
        let mut thresholds = vec![f64::INFINITY];
        let (mut tp, mut fp) = (0usize, 0usize);
        for g in tie_groups(scores) {
            for &i in &g {
                if labels[i].is_member() {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            points.push((fp as f64 / n as f64, tp as f64 / m as f64));
            thresholds.push(scores[g[0]]);
        }
        Ok(Self { points, thresholds })
    }

    /// Trapezoidal area under the curve.
    pub fn auc(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// Highest TPR among operating points with FPR at most `fpr`.
    pub fn tpr_at_fpr(&self, fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.0 <= fpr + 1e-12)
            .map(|p| p.1)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ScoreStats {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            count: v.len(),
            mean,
            std: var.sqrt(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// `None` when too few samples were scored to compute it.
    pub auc: Option<f64>,
    pub n_scored: usize,
    pub members: ScoreStats,
    pub non_members: ScoreStats,
    /// `(fpr, tpr)` pairs at [`REPORT_FPRS`].
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub failures: Vec<SampleFailure>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seeds: BTreeMap<String, u64>,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
    /// SHA-256 of every checkpoint involved, by role.
    pub checkpoints: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub schema_version: u32,
    pub methods: Vec<MethodReport>,
    pub metadata: RunMetadata,
    /// Present when the evaluated model was defended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<crate::defenses::DefenseReport>,
}

impl AttackReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn auc(&self, name: &str) -> Option<f64> {
        self.method(name).and_then(|m| m.auc)
    }

    pub fn total_failures(&self) -> usize {
        self.methods.iter().map(|m| m.failures.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "report schema {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// One scoring method: maps texts to membership scores, higher meaning
/// member.
pub trait Scorer {
    fn name(&self) -> String;
    fn score(&self, texts: &[&[u8]]) -> Result<Vec<f64>>;
}

pub struct BaselineScorer<'a, S> {
    pub method: Method,
    pub target: &'a TransformerLM<S>,
    pub reference: Option<&'a TransformerLM<S>>,
    pub params: &'a BaselineParams,
}

impl<S: Scalar> Scorer for BaselineScorer<'_, S> {
    fn name(&self) -> String {
        self.method.name().to_string()
    }

    fn score(&self, texts: &[&[u8]]) -> Result<Vec<f64>> {
        score_batch(self.method, self.target, self.reference, texts, self.params)
    }
}

/// Name under which a tuned attack appears in reports.
pub fn tuned_method_name(mode: AttackMode) -> String {
    format!("mia_tuner_{}", mode.name())
}

pub struct TunedScorer<'a, S> {
    pub mode: AttackMode,
    pub model: &'a TransformerLM<S>,
    pub prompt: &'a SoftPrompt<S>,
    pub template: &'a ChatTemplate,
    /// Overrides the report name (e.g. for an untuned control).
    pub label: Option<String>,
}

impl<S: Scalar> Scorer for TunedScorer<'_, S> {
    fn name(&self) -> String {
        self.label.clone().unwrap_or_else(|| tuned_method_name(self.mode))
    }

    fn score(&self, texts: &[&[u8]]) -> Result<Vec<f64>> {
        match self.mode {
            AttackMode::Aligned => score_tuned_aligned(self.model, self.prompt, self.template, texts),
            AttackMode::Unaligned => score_tuned_unaligned(self.model, self.prompt, texts),
        }
    }
}

/// Scores the batch at once; if that fails, falls back to one sample at a
/// time so a bad sample only costs itself.
fn score_with_failures(
    scorer: &dyn Scorer,
    samples: &[&TextRecord],
) -> (Vec<Option<f64>>, Vec<SampleFailure>) {
    let texts: Vec<&[u8]> = samples.iter().map(|r| r.text.as_bytes()).collect();
    let check = |v: Vec<f64>| -> Result<Vec<f64>> {
        match v.iter().position(|s| !s.is_finite()) {
            Some(i) => Err(Error::NonFinite {
                value: v[i],
                context: format!("score of `{}`", samples[i].id),
            }),
            None => Ok(v),
        }
    };
    if let Ok(v) = scorer.score(&texts).and_then(check) {
        return (v.into_iter().map(Some).collect(), Vec::new());
    }
    let mut failures = Vec::new();
    let scores = samples
        .iter()
        .zip(&texts)
        .map(|(r, t)| match scorer.score(&[t]).and_then(check) {
            Ok(v) => Some(v[0]),
            Err(e) => {
                failures.push(SampleFailure {
                    id: r.id.clone(),
                    error: e.to_string(),
                });
                None
            }
        })
        .collect();
    (scores, failures)
}

pub fn method_report(scorer: &dyn Scorer, samples: &[&TextRecord]) -> MethodReport {
    let (scores, failures) = score_with_failures(scorer, samples);
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (v, r) in scores.iter().zip(samples) {
        if let Some(v) = v {
            s.push(*v);
            l.push(r.label);
        }
    }
    let pick = |member: bool| -> Vec<f64> {
        s.iter()
            .zip(&l)
            .filter(|(_, l)| l.is_member() == member)
            .map(|(v, _)| *v)
            .collect()
    };
    let auc = compute_auc(&s, &l).ok();
    let tpr_at_fpr = RocCurve::new(&s, &l)
        .map(|roc| REPORT_FPRS.iter().map(|&f| (f, roc.tpr_at_fpr(f))).collect())
        .unwrap_or_default();
    MethodReport {
        method: scorer.name(),
        auc,
        n_scored: s.len(),
        members: ScoreStats::of(&pick(true)),
        non_members: ScoreStats::of(&pick(false)),
        tpr_at_fpr,
        failures,
    }
}

/// Scores every sample under every scorer. Per-sample failures are
/// recorded in the report instead of aborting the run.
pub fn run_attack_suite(
    scorers: &[&dyn Scorer],
    samples: &[&TextRecord],
    metadata: RunMetadata,
) -> Result<AttackReport> {
    if samples.is_empty() {
        return Err(Error::Insufficient("evaluation set is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for s in scorers {
        if !seen.insert(s.name()) {
            return Err(Error::Invalid(format!("method `{}` requested twice", s.name())));
        }
    }
    let start = std::time::Instant::now();
    let methods = scorers.iter().map(|s| method_report(*s, samples)).collect();
    let mut metadata = metadata;
    metadata.wall_clock_secs += start.elapsed().as_secs_f64();
    Ok(AttackReport {
        schema_version: REPORT_SCHEMA_VERSION,
        methods,
        metadata,
        utility: None,
    })
}
