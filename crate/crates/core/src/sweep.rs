//! Parameter sweeps producing long-form AUC tables.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::datasets::{generate_synthetic_corpus, sample_tuning_set, BenchmarkSplit, TextRecord};
use crate::error::{Error, Result};
use crate::evaluation::{AttackReport, RunMetadata};
use crate::model::{ModelConfig, TransformerLM};
use crate::pipeline::{
    attack_model, defend, derive_seed, eval_records, evaluate, held_out_texts, reserve_tuning,
    train_reference, train_target, tune_attack, DataSource, EvalModels, MethodChoice, RunConfig,
    TunedAttack,
};
use crate::scalar::Scalar;
use crate::train::{train_lm, TrainConfig};
use crate::tuner::{AttackMode, TunedPrompt};

pub const CSV_HEADER: &str = "sweep_kind,setting,method,auc,n_eval,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    FewShot,
    TextLength,
    ModelSize,
    DefenseStages,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [
        SweepKind::FewShot,
        SweepKind::TextLength,
        SweepKind::ModelSize,
        SweepKind::DefenseStages,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::FewShot => "few_shot",
            SweepKind::TextLength => "text_length",
            SweepKind::ModelSize => "model_size",
            SweepKind::DefenseStages => "defense_stages",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown sweep kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_kind: SweepKind,
    pub setting: String,
    pub method: String,
    pub auc: f64,
    pub n_eval: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub setting: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<GridFailure>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.sweep_kind, r.setting, r.method, r.auc, r.n_eval, r.seed
            ));
        }
        s
    }

    pub fn auc(&self, setting: &str, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.method == method)
            .map(|r| r.auc)
    }

    fn push_report(&mut self, kind: SweepKind, setting: &str, seed: u64, report: &AttackReport) {
        for m in &report.methods {
            if let Some(auc) = m.auc {
                self.rows.push(SweepRow {
                    sweep_kind: kind,
                    setting: setting.to_string(),
                    method: m.method.clone(),
                    auc,
                    n_eval: m.n_scored,
                    seed,
                });
            }
        }
    }
}

fn sweep_methods(cfg: &RunConfig) -> Result<Vec<MethodChoice>> {
    let names = cfg.sweep.methods.as_ref().unwrap_or(&cfg.evaluation.methods);
    MethodChoice::parse_all(names, cfg.attack.mode)
}

fn needs_reference(methods: &[MethodChoice]) -> bool {
    methods.iter().any(|m| matches!(m, MethodChoice::Baseline(b) if b.needs_reference()))
}

fn tuned_modes(methods: &[MethodChoice]) -> Vec<AttackMode> {
    methods
        .iter()
        .filter_map(|m| match m {
            MethodChoice::Tuned(mode) => Some(*mode),
            _ => None,
        })
        .collect()
}

/// Tunes every requested attack mode against `target` and evaluates.
fn tune_and_evaluate<S: Scalar>(
    cfg: &RunConfig,
    target: &TransformerLM<S>,
    reference: Option<&TransformerLM<S>>,
    split: &BenchmarkSplit,
    records: &[&TextRecord],
    methods: &[MethodChoice],
    seed: u64,
) -> Result<AttackReport> {
    let modes = tuned_modes(methods);
    let mut aligned_models = Vec::new();
    for &mode in &modes {
        aligned_models.push(attack_model(cfg, target, split, mode)?);
    }
    let mut prompts: Vec<TunedPrompt<S>> = Vec::new();
    for (&mode, am) in modes.iter().zip(&aligned_models) {
        prompts.push(tune_attack(cfg, am.as_ref().unwrap_or(target), split, mode, seed)?);
    }
    let attacks = modes
        .iter()
        .zip(&aligned_models)
        .zip(&prompts)
        .map(|((&mode, am), p)| TunedAttack {
            mode,
            model: am.as_ref().unwrap_or(target),
            prompt: &p.prompt,
        })
        .collect();
    let models = EvalModels {
        target,
        reference,
        attacks,
    };
    let meta = RunMetadata {
        seeds: cfg.seeds(),
        ..RunMetadata::default()
    };
    evaluate(cfg, &models, methods, records, meta)
}

fn train_pair<S: Scalar>(
    cfg: &RunConfig,
    split: &BenchmarkSplit,
    methods: &[MethodChoice],
) -> Result<(TransformerLM<S>, Option<TransformerLM<S>>)> {
    let target = train_target(cfg, split)?.0;
    let reference = if needs_reference(methods) {
        Some(train_reference(cfg, split)?.0)
    } else {
        None
    };
    Ok((target, reference))
}

/// Pre-trained models of the base configuration, reused by sweeps whose
/// grid does not change them.
pub struct BaseModels<'a, S> {
    pub target: &'a TransformerLM<S>,
    pub reference: Option<&'a TransformerLM<S>>,
}

/// Runs one sweep. Grid points that fail are recorded and skipped.
pub fn run_sweep<S: Scalar>(
    cfg: &RunConfig,
    kind: SweepKind,
    base: Option<BaseModels<'_, S>>,
) -> Result<SweepTable> {
    let methods = sweep_methods(cfg)?;
    let grid_len = match kind {
        SweepKind::FewShot => cfg.sweep.few_shot.len(),
        SweepKind::TextLength => cfg.sweep.text_length.len(),
        SweepKind::ModelSize => cfg.sweep.model_size.len(),
        SweepKind::DefenseStages => 3,
    };
    if grid_len == 0 {
        return Err(Error::config(format!("sweep.{kind}"), "grid is empty"));
    }
    let pools = crate::pipeline::load_dataset(cfg)?;
    let mut table = SweepTable::default();
    let stage = format!("sweep/{kind}");
    match kind {
        SweepKind::FewShot => {
            let owned;
            let (target, reference) = match base {
                Some(b) => (b.target, b.reference),
                None => {
                    let split = reserve_tuning(cfg, &pools)?;
                    owned = train_pair::<S>(cfg, &split, &methods)?;
                    (&owned.0, owned.1.as_ref())
                }
            };
            few_shot(cfg, &pools, target, reference, &methods, &stage, &mut table)?;
        }
        SweepKind::TextLength => text_length::<S>(cfg, &pools, &methods, &stage, &mut table)?,
        SweepKind::ModelSize => {
            let split = reserve_tuning(cfg, &pools)?;
            let records = eval_records(cfg, &split);
            for (i, &d) in cfg.sweep.model_size.iter().enumerate() {
                let setting = d.to_string();
                let seed = derive_seed(cfg.seed, &stage, i as u64);
                let run = || -> Result<AttackReport> {
                    let mut c = cfg.clone();
                    c.model = ModelConfig {
                        d_model: d,
                        seed: derive_seed(cfg.seed, "model", i as u64 + 1),
                        ..cfg.model.clone()
                    };
                    c.model.validate()?;
                    c.reference.model = None;
                    let (t, r) = train_pair::<S>(&c, &split, &methods)?;
                    tune_and_evaluate(&c, &t, r.as_ref(), &split, &records, &methods, seed)
                };
                record(&mut table, kind, &setting, seed, run());
            }
        }
        SweepKind::DefenseStages => {
            let split = reserve_tuning(cfg, &pools)?;
            let owned;
            let (target, reference) = match base {
                Some(b) => (b.target, b.reference),
                None => {
                    owned = train_pair::<S>(cfg, &split, &methods)?;
                    (&owned.0, owned.1.as_ref())
                }
            };
            defense_stages(cfg, &split, target, reference, &methods, &stage, &mut table)?;
        }
    }
    Ok(table)
}

fn record(table: &mut SweepTable, kind: SweepKind, setting: &str, seed: u64, r: Result<AttackReport>) {
    match r {
        Ok(report) => table.push_report(kind, setting, seed, &report),
        Err(e) => table.failures.push(GridFailure {
            setting: setting.to_string(),
            error: format!("{}: {e}", e.class()),
        }),
    }
}

/// Nested tuning sets drawn from one reservation of the largest size, so
/// every grid point is scored on the same evaluation records.
fn few_shot<S: Scalar>(
    cfg: &RunConfig,
    pools: &BenchmarkSplit,
    target: &TransformerLM<S>,
    reference: Option<&TransformerLM<S>>,
    methods: &[MethodChoice],
    stage: &str,
    table: &mut SweepTable,
) -> Result<()> {
    let largest = *cfg.sweep.few_shot.iter().max().expect("grid is non-empty");
    let half = largest / 2;
    let widest = sample_tuning_set(pools, half, largest - half, derive_seed(cfg.seed, stage, u64::MAX))?;
    let records = eval_records(cfg, &widest);
    let mut rng = Pcg64::seed_from_u64(derive_seed(cfg.seed, stage, u64::MAX - 1));
    let mut mem = widest.tuning_members.clone();
    let mut non = widest.tuning_non_members.clone();
    mem.shuffle(&mut rng);
    non.shuffle(&mut rng);
    for (i, &g) in cfg.sweep.few_shot.iter().enumerate() {
        let seed = derive_seed(cfg.seed, stage, i as u64);
        let mut split = widest.clone();
        split.tuning_members = mem[..g / 2].to_vec();
        split.tuning_non_members = non[..g - g / 2].to_vec();
        split.tuning_members.sort_unstable();
        split.tuning_non_members.sort_unstable();
        let r = tune_and_evaluate(cfg, target, reference, &split, &records, methods, seed);
        record(table, SweepKind::FewShot, &g.to_string(), seed, r);
    }
    Ok(())
}

/// One model trained on documents as long as the largest grid length;
/// each grid point scores prefixes of the evaluation texts with the same
/// tuned prompt.
fn text_length<S: Scalar>(
    cfg: &RunConfig,
    pools: &BenchmarkSplit,
    methods: &[MethodChoice],
    stage: &str,
    table: &mut SweepTable,
) -> Result<()> {
    let longest = *cfg.sweep.text_length.iter().max().expect("grid is non-empty");
    if cfg.sweep.text_length.contains(&0) {
        return Err(Error::config("sweep.text_length", "lengths must be positive"));
    }
    let mut c = cfg.clone();
    let pools = if cfg.data.source == DataSource::Synthetic {
        c.data.synthetic.doc_len = longest;
        generate_synthetic_corpus(&c.data.synthetic)?
    } else {
        pools.clone()
    };
    c.train.max_len = c.train.max_len.max(longest);
    let needed = longest + cfg.template.overhead() + cfg.attack.n_prompt;
    c.model.context_length = c.model.context_length.max(needed);
    if let Some(r) = c.reference.model.as_mut() {
        r.context_length = r.context_length.max(needed);
    }
    let split = reserve_tuning(&c, &pools)?;
    let (target, reference) = train_pair::<S>(&c, &split, methods)?;
    let seed = derive_seed(cfg.seed, stage, 0);
    let modes = tuned_modes(methods);
    let mut aligned = Vec::new();
    let mut prompts = Vec::new();
    for &mode in &modes {
        let am = attack_model(&c, &target, &split, mode)?;
        prompts.push(tune_attack(&c, am.as_ref().unwrap_or(&target), &split, mode, seed)?);
        aligned.push(am);
    }
    let full = eval_records(&c, &split);
    for &len in &cfg.sweep.text_length {
        let truncated: Vec<TextRecord> = full
            .iter()
            .map(|r| {
                let mut r = (*r).clone();
                let cut = (0..=len.min(r.text.len()))
                    .rev()
                    .find(|&i| r.text.is_char_boundary(i))
                    .unwrap_or(0);
                r.text.truncate(cut);
                r
            })
            .collect();
        let records: Vec<&TextRecord> = truncated.iter().collect();
        let attacks = modes
            .iter()
            .zip(&aligned)
            .zip(&prompts)
            .map(|((&mode, am), p)| TunedAttack {
                mode,
                model: am.as_ref().unwrap_or(&target),
                prompt: &p.prompt,
            })
            .collect();
        let models = EvalModels {
            target: &target,
            reference: reference.as_ref(),
            attacks,
        };
        let meta = RunMetadata {
            seeds: c.seeds(),
            ..RunMetadata::default()
        };
        let r = evaluate(&c, &models, methods, &records, meta);
        record(table, SweepKind::TextLength, &len.to_string(), seed, r);
    }
    Ok(())
}

/// Before user fine-tuning, after it, and after the provider's defense on
/// top of it. The attacker re-tunes against each stage's model.
fn defense_stages<S: Scalar>(
    cfg: &RunConfig,
    split: &BenchmarkSplit,
    target: &TransformerLM<S>,
    reference: Option<&TransformerLM<S>>,
    methods: &[MethodChoice],
    stage: &str,
    table: &mut SweepTable,
) -> Result<()> {
    let records = eval_records(cfg, split);
    let seed = |i: u64| derive_seed(cfg.seed, stage, i);
    let r = tune_and_evaluate(cfg, target, reference, split, &records, methods, seed(0));
    record(table, SweepKind::DefenseStages, "before_ft", seed(0), r);

    let user_docs = match cfg.data.source {
        DataSource::Synthetic => {
            let mut c = cfg.data.synthetic.clone();
            c.seed = derive_seed(cfg.seed, "user_ft", 0);
            c.n_members = cfg.sweep.ft_docs.max(1);
            c.n_non_members = 1;
            generate_synthetic_corpus(&c)?
                .members
                .into_iter()
                .map(|r| r.text.into_bytes())
                .collect::<Vec<_>>()
        }
        DataSource::Jsonl => held_out_texts(cfg, split)?.into_iter().map(String::into_bytes).collect(),
    };
    let mut tuned = target.clone();
    let ft = TrainConfig {
        epochs: cfg.sweep.ft_epochs,
        seed: derive_seed(cfg.seed, "user_ft", 1),
        ..cfg.train.clone()
    };
    let after_ft = train_lm(&mut tuned, &user_docs, &ft)
        .and_then(|_| tune_and_evaluate(cfg, &tuned, reference, split, &records, methods, seed(1)));
    let ft_ok = after_ft.is_ok();
    record(table, SweepKind::DefenseStages, "after_ft", seed(1), after_ft);
    if !ft_ok {
        return Ok(());
    }
    let mut defended = tuned;
    let r = defend(cfg, &mut defended, split)
        .and_then(|_| tune_and_evaluate(cfg, &defended, reference, split, &records, methods, seed(2)));
    record(table, SweepKind::DefenseStages, "after_ft_defended", seed(2), r);
    Ok(())
}
