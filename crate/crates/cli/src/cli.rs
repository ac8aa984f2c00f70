//! Argument parsing and subcommand dispatch.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use unidec_core::decoder::{DecoderModel, ModelKind};
use unidec_core::trainer::{CheckpointBundle, Stage};

use crate::ablate::{run_preset, Preset};
use crate::bench::compare;
use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::gen_data;
use crate::error::{CliError, CliResult};
use crate::pipeline::{bench_sequence, initial_model, prepare, pretrain_source, run_chain, stage_loss, test_metrics};
use crate::report::{create_run_dir, render, write_curve, write_json, CheckpointRef, ExperimentReport, StageLoss, REPORT_FILE};

#[derive(Debug, Parser)]
#[command(name = "unidec", version, about = "Unified decoder experiments on synthetic driving scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed and every stage's optimizer seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/val/test scene splits as JSON lines.
    GenData(Common),
    /// Train the captioning source model.
    Pretrain(Common),
    /// Run the configured training stages and evaluate on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run only this stage (PRETRAIN_PERC_LANG, PLAN_ADAPT or JOINT).
        #[arg(long)]
        stage: Option<String>,
        /// Start from this checkpoint; a captioning source is transferred, a unified model resumed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Planning and detection metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Median latency of full and truncated forwards.
    BenchLatency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation preset grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// token-order, lambda-plan, text-supervision or transfer-policy.
        #[arg(long)]
        preset: String,
        /// List the planned runs without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Render loss curves, metric bars and latency plots for a run directory.
    Report {
        /// Directory holding run subdirectories or a single run.
        dir: PathBuf,
    },
}

fn resolve(common: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.stages.iter_mut().for_each(|s| s.optim.seed = seed);
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save_checkpoint(dir: &Path, name: &str, bundle: &CheckpointBundle, report: &mut ExperimentReport) -> CliResult<()> {
    let path = dir.join(format!("{name}.ckpt"));
    let sha256 = checkpoint::save(bundle, &path)?;
    report.checkpoints.push(CheckpointRef { path, sha256 });
    Ok(())
}

/// The model a command starts from: a checkpoint when given, else a fresh initialization.
fn starting_model(cfg: &ExperimentConfig, ckpt: Option<&Path>) -> CliResult<DecoderModel> {
    let Some(path) = ckpt else {
        return initial_model(cfg, None);
    };
    let bundle = checkpoint::load(path)?;
    match bundle.model.kind {
        ModelKind::Plain => initial_model(cfg, Some(&bundle.model)),
        ModelKind::Unified => {
            if bundle.model.shape != cfg.task_shape()? || bundle.model.config != cfg.model {
                return Err(CliError::Config(format!("{} does not match the configured model and layout", path.display())));
            }
            Ok(bundle.model)
        }
    }
}

fn finish(dir: &Path, mut report: ExperimentReport, t0: Instant) -> CliResult<PathBuf> {
    report.runtime_s = t0.elapsed().as_secs_f64();
    let path = dir.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(path)
}

/// Runs one parsed invocation and returns a line to print on success.
pub fn execute(cli: Cli) -> CliResult<String> {
    let t0 = Instant::now();
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve(&common)?;
            let dir = cfg.output_dir.join("data");
            let m = gen_data(&cfg, &dir)?;
            let sizes: Vec<String> = m.splits.iter().map(|s| format!("{} {}", s.name, s.n)).collect();
            Ok(format!("wrote {} to {}", sizes.join(", "), dir.display()))
        }
        Command::Pretrain(common) => {
            let cfg = resolve(&common)?;
            let dir = create_run_dir(&cfg.output_dir, "pretrain")?;
            let prepared = prepare(&cfg)?;
            let (bundle, curve) = pretrain_source(&cfg, &prepared)?;
            write_curve(&dir, "pretrain", &curve)?;
            let mut report = ExperimentReport::new(&cfg);
            let last = curve.last();
            report.stage_losses.push(StageLoss {
                stage: "CAPTION_PRETRAIN".into(),
                steps: curve.len(),
                final_train: last.map(|s| s.components),
                final_train_total: last.map(|s| s.total),
                val: None,
                val_total: None,
                diverged_at: None,
            });
            save_checkpoint(&dir, "source", &bundle, &mut report)?;
            Ok(format!("report: {}", finish(&dir, report, t0)?.display()))
        }
        Command::Train { common, stage, checkpoint } => {
            let cfg = resolve(&common)?;
            let stages = match &stage {
                None => cfg.stages.clone(),
                Some(name) => {
                    let s = Stage::from_name(name).ok_or_else(|| CliError::Config(format!("unknown stage {name:?}")))?;
                    let sc = cfg.stage(s).ok_or_else(|| CliError::Config(format!("stage {name} is not in the config")))?;
                    vec![sc.clone()]
                }
            };
            let prepared = prepare(&cfg)?;
            let mut model = starting_model(&cfg, checkpoint.as_deref())?;
            let dir = create_run_dir(&cfg.output_dir, "train")?;
            let mut report = ExperimentReport::new(&cfg);
            // Stages run one at a time so each checkpoint is written as soon as it exists.
            for sc in &stages {
                let rec = run_chain(&cfg, &mut model, &prepared, std::slice::from_ref(sc))?.remove(0);
                let name = format!("stage{}_{}", sc.stage.id(), sc.stage.name().to_lowercase());
                write_curve(&dir, &name, &rec.outcome.curve)?;
                save_checkpoint(&dir, &name, &rec.outcome.checkpoint, &mut report)?;
                report.stage_losses.push(stage_loss(&rec));
            }
            if let Some(s) = test_metrics(&cfg, &model, &prepared)? {
                report.plan_metrics = Some(s.plan);
                report.det_metrics = Some(s.det);
            }
            Ok(format!("report: {}", finish(&dir, report, t0)?.display()))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let model = starting_model(&cfg, checkpoint.as_deref())?;
            let prepared = prepare(&cfg)?;
            let dir = create_run_dir(&cfg.output_dir, "eval")?;
            let mut report = ExperimentReport::new(&cfg);
            if let Some(s) = test_metrics(&cfg, &model, &prepared)? {
                report.plan_metrics = Some(s.plan);
                report.det_metrics = Some(s.det);
            }
            Ok(format!("report: {}", finish(&dir, report, t0)?.display()))
        }
        Command::BenchLatency { common, checkpoint } => {
            let cfg = resolve(&common)?;
            let model = starting_model(&cfg, checkpoint.as_deref())?;
            let seq = bench_sequence(&cfg)?;
            let dir = create_run_dir(&cfg.output_dir, "bench")?;
            let cmp = compare(&model, &seq, cfg.bench.n_runs)?;
            let line = format!(
                "L={} full {:.2} ms, truncated {:.2} ms, ratio {:.3}",
                cmp.seq_len, cmp.full.median_ms, cmp.truncated.median_ms, cmp.ratio
            );
            let mut report = ExperimentReport::new(&cfg);
            report.latency = Some(cmp);
            finish(&dir, report, t0)?;
            Ok(line)
        }
        Command::Ablate { common, preset, dry_run } => {
            let preset: Preset = preset.parse()?;
            let cfg = resolve(&common)?;
            let dir = create_run_dir(&cfg.output_dir, &format!("ablate-{}", preset.name()))?;
            let rep = run_preset(preset, &cfg, &dir, dry_run)?;
            let verb = if dry_run { "planned" } else { "ran" };
            Ok(format!("{verb} {} runs; comparison: {}", rep.n_runs, dir.join("comparison.json").display()))
        }
        Command::Report { dir } => {
            let written = render(&dir)?;
            Ok(written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
