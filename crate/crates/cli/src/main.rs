use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use mia_workbench::artifact::{
    load_model, load_prompt, save_model, save_prompt, sha256_hex, write_atomic,
};
use mia_workbench::datasets::{load_jsonl, save_jsonl, split_by_cutoff, BenchmarkSplit, TextRecord};
use mia_workbench::evaluation::RunMetadata;
use mia_workbench::model::{SoftPrompt, TransformerLM};
use mia_workbench::pipeline::{
    attack_model, defend, eval_records, evaluate, load_dataset, reserve_tuning, train_reference,
    train_target, tune_attack, EvalModels, MethodChoice, Precision, TunedAttack,
};
use mia_workbench::sweep::{run_sweep, BaseModels, SweepKind};
use mia_workbench::tuner::AttackMode;
use mia_workbench::{Error, Result, RunConfig, Scalar};

#[derive(Parser)]
#[command(name = "mia-workbench", version, about = "Membership inference workbench for a toy language model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    /// Override one config key, e.g. `--set attack.lr=1e-3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Aligned,
    Unaligned,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Aligned => AttackMode::Aligned,
            ModeArg::Unaligned => AttackMode::Unaligned,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark dataset (`dataset.jsonl`).
    GenData,
    /// Train the target (and smaller reference) model.
    TrainLm,
    /// Tune a soft prompt against the target.
    TuneAttack {
        /// Attack mode; defaults to `attack.mode`.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Model to attack instead of `target.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Fine-tune a defended copy of the target.
    Defend {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score the evaluation split and write `report.json`.
    Evaluate {
        /// Model to evaluate instead of `target.ckpt`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Report file name inside the output directory.
        #[arg(long, default_value = "report.json")]
        report: String,
    },
    /// Run a parameter sweep and write `sweep_<kind>.csv`.
    Sweep {
        #[arg(long)]
        kind: String,
    },
    /// Label timestamped records by date.
    SplitCutoff {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Records after this date are non-members.
        #[arg(long)]
        cutoff: Option<chrono::NaiveDate>,
        /// Records before this date are members.
        #[arg(long)]
        member_bound: Option<chrono::NaiveDate>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainLm => "train-lm",
            Command::TuneAttack { .. } => "tune-attack",
            Command::Defend { .. } => "defend",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep { .. } => "sweep",
            Command::SplitCutoff { .. } => "split-cutoff",
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut user = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config("<root>", format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if let (Some(seed), Value::Object(o)) = (c.seed, &mut user) {
        o.insert("seed".into(), seed.into());
    }
    let overrides = c
        .overrides
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| Error::config(s.clone(), "override must look like key=value"))
        })
        .collect::<Result<Vec<_>>>()?;
    RunConfig::from_value(user, &overrides)
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json(&self, name: &str, v: &impl Serialize) -> Result<()> {
        write_atomic(&self.path(name), serde_json::to_string_pretty(v)?.as_bytes())
    }

    fn dataset(&self) -> Result<BenchmarkSplit> {
        let records = load_jsonl(&self.path("dataset.jsonl"))?;
        reserve_tuning(&self.cfg, &BenchmarkSplit::from_records(records))
    }

    fn model<S: Scalar>(&self, explicit: &Option<PathBuf>) -> Result<(TransformerLM<S>, PathBuf)> {
        let p = explicit.clone().unwrap_or_else(|| self.path("target.ckpt"));
        Ok((load_model(&p)?, p))
    }
}

fn file_hash(p: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(p).map_err(|e| Error::io(p, e))?))
}

fn prompt_name(mode: AttackMode) -> String {
    format!("prompt_{}.sp", mode.name())
}

fn attack_model_name(mode: AttackMode) -> String {
    format!("attack_model_{}.ckpt", mode.name())
}

fn run<S: Scalar>(ctx: &Ctx, cmd: &Command) -> Result<String> {
    let cfg = &ctx.cfg;
    match cmd {
        Command::GenData => {
            let split = load_dataset(cfg)?;
            let records: Vec<TextRecord> =
                split.members.iter().chain(&split.non_members).cloned().collect();
            save_jsonl(&records, &ctx.path("dataset.jsonl"))?;
            Ok(format!(
                "wrote {} members and {} non-members",
                split.members.len(),
                split.non_members.len()
            ))
        }
        Command::TrainLm => {
            let split = ctx.dataset()?;
            let (target, tr) = train_target::<S>(cfg, &split)?;
            save_model(&target, &ctx.path("target.ckpt"))?;
            let mut report = serde_json::json!({ "target": tr });
            if cfg.reference.enabled {
                let (reference, rr) = train_reference::<S>(cfg, &split)?;
                save_model(&reference, &ctx.path("reference.ckpt"))?;
                report["reference"] = serde_json::to_value(rr)?;
            }
            ctx.write_json("train_report.json", &report)?;
            Ok(format!("final training loss {:.4}", tr.final_loss().unwrap_or(f64::NAN)))
        }
        Command::TuneAttack { mode, model } => {
            let mode = mode.map(AttackMode::from).unwrap_or(cfg.attack.mode);
            let split = ctx.dataset()?;
            let (target, _) = ctx.model::<S>(model)?;
            let aligned = attack_model(cfg, &target, &split, mode)?;
            if let Some(m) = &aligned {
                save_model(m, &ctx.path(&attack_model_name(mode)))?;
            }
            let attacked = aligned.as_ref().unwrap_or(&target);
            let tuned = tune_attack(cfg, attacked, &split, mode, cfg.attack.seed)?;
            save_prompt(
                &tuned.prompt,
                mode.name(),
                attacked.config(),
                cfg.attack.seed,
                &ctx.path(&prompt_name(mode)),
            )?;
            ctx.write_json(
                &format!("tune_report_{}.json", mode.name()),
                &serde_json::json!({
                    "mode": mode.name(),
                    "epoch_losses": tuned.epoch_losses,
                    "clamp_warnings": tuned.clamp_warnings,
                }),
            )?;
            Ok(format!(
                "{} prompt tuned, final loss {:.4}",
                mode.name(),
                tuned.epoch_losses.last().copied().unwrap_or(f64::NAN)
            ))
        }
        Command::Defend { model } => {
            let split = ctx.dataset()?;
            let (mut m, _) = ctx.model::<S>(model)?;
            let report = defend(cfg, &mut m, &split)?;
            save_model(&m, &ctx.path("defended.ckpt"))?;
            ctx.write_json("defense_report.json", &report)?;
            Ok(format!(
                "held-out NLL {:.4} -> {:.4}{}",
                report.utility_before,
                report.utility_after,
                if report.utility_flagged { " (utility guard exceeded)" } else { "" }
            ))
        }
        Command::Evaluate { model, report } => {
            let split = ctx.dataset()?;
            let (target, target_path) = ctx.model::<S>(model)?;
            let methods = MethodChoice::parse_all(&cfg.evaluation.methods, cfg.attack.mode)?;
            let mut meta = RunMetadata {
                seeds: cfg.seeds(),
                config: serde_json::to_value(cfg)?,
                ..RunMetadata::default()
            };
            meta.checkpoints.insert("target".into(), file_hash(&target_path)?);
            let needs_ref = methods
                .iter()
                .any(|m| matches!(m, MethodChoice::Baseline(b) if b.needs_reference()));
            let reference: Option<TransformerLM<S>> = if needs_ref {
                let p = ctx.path("reference.ckpt");
                let r = load_model(&p)?;
                meta.checkpoints.insert("reference".into(), file_hash(&p)?);
                Some(r)
            } else {
                None
            };
            let mut attack_models: Vec<(AttackMode, Option<TransformerLM<S>>, SoftPrompt<S>)> =
                Vec::new();
            for m in &methods {
                if let MethodChoice::Tuned(mode) = *m {
                    let am_path = ctx.path(&attack_model_name(mode));
                    let am = if model.is_none() && am_path.exists() {
                        Some(load_model::<S>(&am_path)?)
                    } else {
                        None
                    };
                    let cfg_for = am.as_ref().unwrap_or(&target).config().clone();
                    let pp = ctx.path(&prompt_name(mode));
                    let (prompt, _) = load_prompt::<S>(&pp, &cfg_for)?;
                    meta.checkpoints.insert(format!("prompt_{}", mode.name()), file_hash(&pp)?);
                    attack_models.push((mode, am, prompt));
                }
            }
            let attacks = attack_models
                .iter()
                .map(|(mode, am, p)| TunedAttack {
                    mode: *mode,
                    model: am.as_ref().unwrap_or(&target),
                    prompt: p,
                })
                .collect();
            let models = EvalModels {
                target: &target,
                reference: reference.as_ref(),
                attacks,
            };
            let records = eval_records(cfg, &split);
            let mut rep = evaluate(cfg, &models, &methods, &records, meta)?;
            let defense_report = ctx.path("defense_report.json");
            if model.as_deref() == Some(ctx.path("defended.ckpt").as_path()) && defense_report.exists() {
                let text = std::fs::read_to_string(&defense_report).map_err(|e| Error::io(&defense_report, e))?;
                rep.utility = Some(serde_json::from_str(&text)?);
            }
            write_atomic(&ctx.path(report), rep.to_json()?.as_bytes())?;
            let summary: Vec<String> = rep
                .methods
                .iter()
                .map(|m| format!("{}={}", m.method, m.auc.map_or("n/a".into(), |a| format!("{a:.3}"))))
                .collect();
            Ok(summary.join(" "))
        }
        Command::Sweep { kind } => {
            let kind: SweepKind = kind.parse()?;
            let base_target = ctx.path("target.ckpt");
            let loaded: Option<(TransformerLM<S>, Option<TransformerLM<S>>)> =
                if base_target.exists() && matches!(kind, SweepKind::FewShot | SweepKind::DefenseStages) {
                    let r = ctx.path("reference.ckpt");
                    Some((load_model(&base_target)?, if r.exists() { Some(load_model(&r)?) } else { None }))
                } else {
                    None
                };
            let base = loaded.as_ref().map(|(t, r)| BaseModels {
                target: t,
                reference: r.as_ref(),
            });
            let table = run_sweep::<S>(cfg, kind, base)?;
            write_atomic(&ctx.path(&format!("sweep_{kind}.csv")), table.to_csv().as_bytes())?;
            if !table.failures.is_empty() {
                ctx.write_json(&format!("sweep_{kind}_failures.json"), &table.failures)?;
            }
            Ok(format!("{} rows, {} failed grid points", table.rows.len(), table.failures.len()))
        }
        Command::SplitCutoff {
            input,
            output,
            cutoff,
            member_bound,
        } => {
            let records = load_jsonl(input)?;
            let c = cfg.data.cutoff.clone().unwrap_or_default();
            let s = split_by_cutoff(
                &records,
                cutoff.unwrap_or(c.cutoff),
                member_bound.unwrap_or(c.member_bound),
            )?;
            let labeled: Vec<TextRecord> =
                s.split.members.iter().chain(&s.split.non_members).cloned().collect();
            save_jsonl(&labeled, output)?;
            Ok(format!(
                "{} members, {} non-members, {} excluded",
                s.split.members.len(),
                s.split.non_members.len(),
                s.excluded.len()
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let result = load_config(&cli.common).and_then(|cfg| {
        let ctx = Ctx {
            cfg,
            out: cli.common.out_dir.clone(),
        };
        ctx.write_json(&format!("{}.config.json", cli.command.name()), &ctx.cfg)?;
        match ctx.cfg.precision {
            Precision::F32 => run::<f32>(&ctx, &cli.command),
            Precision::F64 => run::<f64>(&ctx, &cli.command),
        }
    });
    match result {
        Ok(msg) => {
            println!("{}: {msg} ({:.1}s)", cli.command.name(), start.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {line}", e.class());
            ExitCode::FAILURE
        }
    }
}

