//! Run configuration and the end-to-end stages shared by the command line
//! and the test suites.
//!
//! Every stage seed is derived from the single global seed, so a resolved
//! configuration fully determines a run.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::{align_model, AlignmentConfig};
use crate::baselines::{BaselineParams, Method};
use crate::datasets::{
    generate_synthetic_corpus, load_jsonl, sample_tuning_set, split_by_cutoff, BenchmarkSplit,
    SyntheticCorpusSpec, TextRecord, DEFAULT_CUTOFF, DEFAULT_MEMBER_BOUND,
};
use crate::defenses::{apply_defense, DefenseConfig, DefenseReport};
use crate::error::{Error, Result};
use crate::evaluation::{
    run_attack_suite, tuned_method_name, AttackReport, BaselineScorer, RunMetadata, Scorer,
    TunedScorer,
};
use crate::model::{ModelConfig, SoftPrompt, TransformerLM};
use crate::scalar::Scalar;
use crate::template::ChatTemplate;
use crate::train::{train_lm, TrainConfig, TrainReport};
use crate::tuner::{tune_soft_prompt, AttackConfig, AttackMode, Sample, TunedPrompt};

/// Child seed for `stage` (and grid point `index`): a PCG64 stream keyed by
/// the global seed and an FNV-1a hash of the stage name.
pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let h = stage.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    let key = global ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    Pcg64::seed_from_u64(key).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffConfig {
    pub cutoff: chrono::NaiveDate,
    pub member_bound: chrono::NaiveDate,
}

impl Default for CutoffConfig {
    fn default() -> Self {
        Self {
            cutoff: DEFAULT_CUTOFF,
            member_bound: DEFAULT_MEMBER_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticCorpusSpec,
    /// Labeled (or, with `cutoff`, timestamped) records for `source: jsonl`.
    pub jsonl: Option<PathBuf>,
    /// Relabel JSONL records by date before use.
    pub cutoff: Option<CutoffConfig>,
    pub n_tuning_members: usize,
    pub n_tuning_non_members: usize,
    /// Evaluation samples per class; `None` uses everything not tuned on.
    pub eval_per_class: Option<usize>,
    /// Fresh texts measuring utility before and after a defense.
    pub n_held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SyntheticCorpusSpec::default(),
            jsonl: None,
            cutoff: None,
            n_tuning_members: 80,
            n_tuning_non_members: 80,
            eval_per_class: Some(128),
            n_held_out: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    /// Train the smaller reference model alongside the target.
    pub enabled: bool,
    /// Shape of the reference; `None` halves the target's width and depth.
    pub model: Option<ModelConfig>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Baseline names plus `mia_tuner` (the configured attack mode) or an
    /// explicit `mia_tuner_aligned` / `mia_tuner_unaligned`.
    pub methods: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut methods: Vec<String> = Method::ALL.iter().map(|m| m.name().to_string()).collect();
        methods.push("mia_tuner".into());
        Self { methods }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Total tuning-set sizes (split evenly between classes).
    pub few_shot: Vec<usize>,
    /// Scored prefix lengths in bytes.
    pub text_length: Vec<usize>,
    /// Target `d_model` values.
    pub model_size: Vec<usize>,
    /// Methods reported by sweeps; `None` reuses `evaluation.methods`.
    pub methods: Option<Vec<String>>,
    /// User fine-tuning stage of the defense-stages sweep.
    pub ft_epochs: usize,
    pub ft_docs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            few_shot: vec![60, 160],
            text_length: vec![32, 64, 128, 256],
            model_size: vec![32, 64, 96],
            methods: None,
            ft_epochs: 2,
            ft_docs: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reference: ReferenceConfig,
    pub template: ChatTemplate,
    pub align: AlignmentConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub baselines: BaselineParams,
    pub evaluation: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reference: ReferenceConfig::default(),
            template: ChatTemplate::default(),
            align: AlignmentConfig::default(),
            attack: AttackConfig::default(),
            defense: DefenseConfig::default(),
            baselines: BaselineParams::default(),
            evaluation: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
        .resolved()
    }
}

/// First key path of `user` that does not exist in `schema`.
fn unknown_key(user: &Value, schema: &Value, prefix: &str) -> Option<String> {
    let (Value::Object(u), Value::Object(s)) = (user, schema) else {
        return None;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => return Some(path),
            Some(sv) => {
                if let Some(p) = unknown_key(v, sv, &path) {
                    return Some(p);
                }
            }
        }
    }
    None
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses a JSON document; unknown keys are rejected with their path.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", format!("not valid JSON: {e}")))?;
        Self::from_value(user, &[])
    }

    /// Builds a config from a JSON value plus `key.path=value` overrides.
    pub fn from_value(mut user: Value, overrides: &[(String, String)]) -> Result<Self> {
        if user.is_null() {
            user = Value::Object(Default::default());
        }
        if !user.is_object() {
            return Err(Error::config("<root>", "config must be a JSON object"));
        }
        let schema = serde_json::to_value(RunConfig::default())?;
        if let Some(k) = unknown_key(&user, &schema, "") {
            return Err(Error::config(k, "unknown key"));
        }
        for (path, raw) in overrides {
            set_path(&mut user, &schema, path, parse_value(raw))?;
        }
        let cfg: RunConfig = serde_json::from_value(user).map_err(|e| {
            Error::config(
                overrides.last().map_or("<root>".into(), |o| o.0.clone()),
                e.to_string(),
            )
        })?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overwrites every stage seed with the one derived from `seed`.
    pub fn resolved(mut self) -> Self {
        let g = self.seed;
        self.data.synthetic.seed = derive_seed(g, "data", 0);
        self.model.seed = derive_seed(g, "model", 0);
        self.train.seed = derive_seed(g, "train", 0);
        if let Some(r) = self.reference.model.as_mut() {
            r.seed = derive_seed(g, "reference_model", 0);
        }
        self.align.seed = derive_seed(g, "align", 0);
        self.attack.seed = derive_seed(g, "attack", 0);
        self.defense.seed = derive_seed(g, "defense", 0);
        self.baselines.seed = derive_seed(g, "baselines", 0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.attack.validate()?;
        self.defense.validate()?;
        self.baselines.validate()?;
        if let Some(r) = &self.reference.model {
            r.validate()?;
        }
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        } else if self.data.jsonl.is_none() {
            return Err(Error::config("data.jsonl", "required when data.source is jsonl"));
        }
        for (i, m) in self.evaluation.methods.iter().enumerate() {
            MethodChoice::parse(m, self.attack.mode)
                .map_err(|_| Error::config(format!("evaluation.methods.{i}"), format!("unknown method `{m}`")))?;
        }
        if self.evaluation.methods.is_empty() {
            return Err(Error::config("evaluation.methods", "at least one method is required"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Named stage seeds, as recorded in reports.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("global".into(), self.seed),
            ("data".into(), self.data.synthetic.seed),
            ("model".into(), self.model.seed),
            ("train".into(), self.train.seed),
            ("tuning_split".into(), derive_seed(self.seed, "tuning_split", 0)),
            ("attack".into(), self.attack.seed),
            ("align".into(), self.align.seed),
            ("defense".into(), self.defense.seed),
            ("baselines".into(), self.baselines.seed),
        ])
    }

    /// Config of the smaller reference model.
    pub fn reference_model(&self) -> ModelConfig {
        self.reference.model.clone().unwrap_or_else(|| {
            let mut c = self.model.halved();
            c.seed = derive_seed(self.seed, "reference_model", 0);
            c
        })
    }
}

fn set_path(root: &mut Value, schema: &Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "malformed key path"));
    }
    let mut node = root;
    let mut sch = Some(schema);
    for (i, k) in keys.iter().enumerate() {
        let known = sch.and_then(|s| s.get(*k));
        // Paths below a `null` default (an unset optional section) cannot
        // be checked against the schema.
        if known.is_none() && sch.is_some_and(|s| !s.is_null()) {
            return Err(Error::config(path, "unknown key"));
        }
        sch = known.filter(|v| !v.is_null());
        let obj = match node {
            Value::Object(o) => o,
            _ => return Err(Error::config(path, "parent is not an object")),
        };
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        let next = obj.entry(k.to_string()).or_insert_with(|| match known {
            Some(v) if !v.is_null() => v.clone(),
            _ => Value::Object(Default::default()),
        });
        node = next;
    }
    unreachable!("loop returns on the last key")
}

/// A method requested in the evaluation list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Baseline(Method),
    Tuned(AttackMode),
}

impl MethodChoice {
    pub fn parse(name: &str, default_mode: AttackMode) -> Result<Self> {
        match name {
            "mia_tuner" => Ok(MethodChoice::Tuned(default_mode)),
            "mia_tuner_aligned" => Ok(MethodChoice::Tuned(AttackMode::Aligned)),
            "mia_tuner_unaligned" => Ok(MethodChoice::Tuned(AttackMode::Unaligned)),
            other => other.parse().map(MethodChoice::Baseline),
        }
    }

    pub fn parse_all(names: &[String], default_mode: AttackMode) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = Vec::new();
        for n in names {
            let c = Self::parse(n, default_mode)?;
            if !out.contains(&c) {
                out.push(c);
            }
        }
        Ok(out)
    }

    pub fn name(self) -> String {
        match self {
            MethodChoice::Baseline(m) => m.name().to_string(),
            MethodChoice::Tuned(mode) => tuned_method_name(mode),
        }
    }
}

/// Loads the two pools (no tuning reservation yet).
pub fn load_dataset(cfg: &RunConfig) -> Result<BenchmarkSplit> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic_corpus(&cfg.data.synthetic),
        DataSource::Jsonl => {
            let path = cfg
                .data
                .jsonl
                .as_ref()
                .ok_or_else(|| Error::config("data.jsonl", "required when data.source is jsonl"))?;
            let records = load_jsonl(path)?;
            let split = match &cfg.data.cutoff {
                Some(c) => split_by_cutoff(&records, c.cutoff, c.member_bound)?.split,
                None => BenchmarkSplit::from_records(records),
            };
            if split.members.is_empty() || split.non_members.is_empty() {
                return Err(Error::Insufficient(format!(
                    "{} needs both members and non-members",
                    path.display()
                )));
            }
            Ok(split)
        }
    }
}

/// Reserves the configured tuning set.
pub fn reserve_tuning(cfg: &RunConfig, split: &BenchmarkSplit) -> Result<BenchmarkSplit> {
    sample_tuning_set(
        split,
        cfg.data.n_tuning_members,
        cfg.data.n_tuning_non_members,
        derive_seed(cfg.seed, "tuning_split", 0),
    )
}

pub fn eval_records<'a>(cfg: &RunConfig, split: &'a BenchmarkSplit) -> Vec<&'a TextRecord> {
    split.eval(cfg.data.eval_per_class)
}

pub fn tuning_samples(split: &BenchmarkSplit) -> Vec<Sample<'_>> {
    split
        .tuning()
        .into_iter()
        .map(|r| Sample {
            text: r.text.as_bytes(),
            label: r.label,
        })
        .collect()
}

fn member_corpus(split: &BenchmarkSplit) -> Vec<Vec<u8>> {
    split.members.iter().map(|r| r.text.clone().into_bytes()).collect()
}

pub fn train_target<S: Scalar>(
    cfg: &RunConfig,
    split: &BenchmarkSplit,
) -> Result<(TransformerLM<S>, TrainReport)> {
    let mut m = TransformerLM::new(cfg.model.clone())?;
    let r = train_lm(&mut m, &member_corpus(split), &cfg.train)?;
    Ok((m, r))
}

/// Trains the smaller reference model on the same member corpus.
pub fn train_reference<S: Scalar>(
    cfg: &RunConfig,
    split: &BenchmarkSplit,
) -> Result<(TransformerLM<S>, TrainReport)> {
    let rc = cfg.reference_model();
    let target = TransformerLM::<f64>::new(cfg.model.clone())?;
    let mut m = TransformerLM::new(rc)?;
    if m.num_params() >= target.num_params() {
        return Err(Error::config(
            "reference.model",
            "reference model must have fewer parameters than the target",
        ));
    }
    let train = TrainConfig {
        seed: derive_seed(cfg.seed, "reference_train", 0),
        ..cfg.train.clone()
    };
    let r = train_lm(&mut m, &member_corpus(split), &train)?;
    Ok((m, r))
}

/// Every text of either pool, which the alignment pass must never see.
fn pool_texts(split: &BenchmarkSplit) -> HashSet<&str> {
    split
        .members
        .iter()
        .chain(&split.non_members)
        .map(|r| r.text.as_str())
        .collect()
}

/// The model the attack runs against: the target itself, or in aligned
/// mode with the pre-pass enabled, an aligned copy of it.
pub fn attack_model<S: Scalar>(
    cfg: &RunConfig,
    target: &TransformerLM<S>,
    split: &BenchmarkSplit,
    mode: AttackMode,
) -> Result<Option<TransformerLM<S>>> {
    if mode != AttackMode::Aligned || !cfg.align.enabled {
        return Ok(None);
    }
    let mut m = target.clone();
    let generator = SyntheticCorpusSpec {
        doc_len: cfg.data.synthetic.doc_len,
        ..SyntheticCorpusSpec::default()
    };
    align_model(&mut m, &cfg.template, &generator, &pool_texts(split), &cfg.align)?;
    Ok(Some(m))
}

pub fn tune_attack<S: Scalar>(
    cfg: &RunConfig,
    model: &TransformerLM<S>,
    split: &BenchmarkSplit,
    mode: AttackMode,
    seed: u64,
) -> Result<TunedPrompt<S>> {
    let attack = AttackConfig {
        mode,
        seed,
        ..cfg.attack.clone()
    };
    tune_soft_prompt(model, &tuning_samples(split), Some(&cfg.template), &attack)
}

/// Fresh benign texts for the utility guard: newly generated documents for
/// synthetic data, the tuning non-members otherwise.
pub fn held_out_texts(cfg: &RunConfig, split: &BenchmarkSplit) -> Result<Vec<String>> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let spec = SyntheticCorpusSpec {
                seed: derive_seed(cfg.seed, "held_out", 0),
                n_members: cfg.data.n_held_out.max(1),
                n_non_members: 1,
                ..cfg.data.synthetic.clone()
            };
            let pools = pool_texts(split);
            Ok(generate_synthetic_corpus(&spec)?
                .members
                .into_iter()
                .map(|r| r.text)
                .filter(|t| !pools.contains(t.as_str()))
                .collect())
        }
        DataSource::Jsonl => Ok(split.tuning().iter().filter(|r| !r.label.is_member()).map(|r| r.text.clone()).collect()),
    }
}

/// Defense training data: every member plus the non-members kept out of
/// evaluation.
pub fn defense_samples<'a>(cfg: &RunConfig, split: &'a BenchmarkSplit) -> Vec<Sample<'a>> {
    let eval: HashSet<&str> = eval_records(cfg, split)
        .into_iter()
        .filter(|r| !r.label.is_member())
        .map(|r| r.id.as_str())
        .collect();
    split
        .members
        .iter()
        .chain(split.non_members.iter().filter(|r| !eval.contains(r.id.as_str())))
        .map(|r| Sample {
            text: r.text.as_bytes(),
            label: r.label,
        })
        .collect()
}

pub fn defend<S: Scalar>(
    cfg: &RunConfig,
    model: &mut TransformerLM<S>,
    split: &BenchmarkSplit,
) -> Result<DefenseReport> {
    let held = held_out_texts(cfg, split)?;
    let held: Vec<&[u8]> = held.iter().map(|t| t.as_bytes()).collect();
    apply_defense(model, &defense_samples(cfg, split), &cfg.template, &held, &cfg.defense)
}

/// A tuned prompt together with the model it was tuned against.
pub struct TunedAttack<'a, S> {
    pub mode: AttackMode,
    pub model: &'a TransformerLM<S>,
    pub prompt: &'a SoftPrompt<S>,
}

/// Models available to an evaluation run.
pub struct EvalModels<'a, S> {
    pub target: &'a TransformerLM<S>,
    pub reference: Option<&'a TransformerLM<S>>,
    pub attacks: Vec<TunedAttack<'a, S>>,
}

/// Scores the evaluation records with the requested methods.
pub fn evaluate<S: Scalar>(
    cfg: &RunConfig,
    models: &EvalModels<'_, S>,
    methods: &[MethodChoice],
    records: &[&TextRecord],
    metadata: RunMetadata,
) -> Result<AttackReport> {
    let mut baseline = Vec::new();
    let mut tuned = Vec::new();
    for &m in methods {
        match m {
            MethodChoice::Baseline(method) => {
                if method.needs_reference() && models.reference.is_none() {
                    return Err(Error::MissingArtifact(PathBuf::from("reference model")));
                }
                baseline.push(BaselineScorer {
                    method,
                    target: models.target,
                    reference: models.reference,
                    params: &cfg.baselines,
                });
            }
            MethodChoice::Tuned(mode) => {
                let a = models.attacks.iter().find(|a| a.mode == mode).ok_or_else(|| {
                    Error::MissingArtifact(PathBuf::from(format!("{} soft prompt", mode.name())))
                })?;
                tuned.push(TunedScorer {
                    mode,
                    model: a.model,
                    prompt: a.prompt,
                    template: &cfg.template,
                    label: None,
                });
            }
        }
    }
    let mut scorers: Vec<&dyn Scorer> = Vec::new();
    scorers.extend(baseline.iter().map(|s| s as &dyn Scorer));
    scorers.extend(tuned.iter().map(|s| s as &dyn Scorer));
    run_attack_suite(&scorers, records, metadata)
}
