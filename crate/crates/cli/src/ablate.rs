//! Ablation presets: fixed variant grids run under one shared budget.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unidec_core::metrics::{DetMetrics, PlanMetrics};
use unidec_core::tokens::TokenOrder;
use unidec_core::trainer::{Stage, TransferPolicy};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{initial_model, prepare, pretrain_source, run_chain, stage_loss, test_metrics, val_perception};
use crate::report::{write_json, StageLoss};

pub const LAMBDA_PLAN_GRID: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const TRANSFER_SEEDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TokenOrder,
    LambdaPlan,
    TextSupervision,
    TransferPolicy,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::TokenOrder, Preset::LambdaPlan, Preset::TextSupervision, Preset::TransferPolicy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TokenOrder => "token-order",
            Preset::LambdaPlan => "lambda-plan",
            Preset::TextSupervision => "text-supervision",
            Preset::TransferPolicy => "transfer-policy",
        }
    }
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
            CliError::Config(format!("unknown preset {s:?}; valid presets: {}", valid.join(", ")))
        })
    }
}

/// How far down the stage pipeline a run goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Perception pretraining then planning adaptation.
    Adaptation,
    /// All three stages.
    Joint,
    /// Perception pretraining only; scored on detection.
    DetectionOnly,
    EndToEnd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Variant {
    TokenOrder { order: TokenOrder, regime: Regime },
    LambdaPlan { lambda_plan: f64 },
    TextSupervision { text_loss: bool, regime: Regime },
    TransferPolicy { policy: TransferPolicy, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub variant: Variant,
    pub config: ExperimentConfig,
}

fn stages_upto(base: &ExperimentConfig, last: Stage) -> Vec<unidec_core::trainer::StageConfig> {
    Stage::ALL
        .iter()
        .filter(|s| s.id() <= last.id())
        .map(|&s| base.stage(s).cloned().unwrap_or_else(|| unidec_core::trainer::StageConfig::new(s)))
        .collect()
}

/// The exact variant grid of a preset; every run shares the base budget.
pub fn plan_grid(preset: Preset, base: &ExperimentConfig) -> CliResult<Vec<PlannedRun>> {
    base.validate()?;
    let mut runs = Vec::new();
    let mut push = |label: String, variant: Variant, mut cfg: ExperimentConfig| -> CliResult<()> {
        cfg.ablation = true;
        cfg.validate()?;
        runs.push(PlannedRun { label, variant, config: cfg });
        Ok(())
    };
    match preset {
        Preset::TokenOrder => {
            for order in [TokenOrder::DetLanePlan, TokenOrder::LaneDetPlan] {
                for regime in [Regime::Adaptation, Regime::Joint] {
                    let mut cfg = base.clone();
                    cfg.layout.order = order;
                    cfg.stages = stages_upto(base, if regime == Regime::Joint { Stage::Joint } else { Stage::PlanAdapt });
                    push(format!("{order:?}/{regime:?}"), Variant::TokenOrder { order, regime }, cfg)?;
                }
            }
        }
        Preset::LambdaPlan => {
            for lambda_plan in LAMBDA_PLAN_GRID {
                let mut cfg = base.clone();
                cfg.stages = stages_upto(base, Stage::Joint);
                cfg.stages.iter_mut().for_each(|s| s.lambda_plan = lambda_plan);
                push(format!("lambda_plan={lambda_plan}"), Variant::LambdaPlan { lambda_plan }, cfg)?;
            }
        }
        Preset::TextSupervision => {
            for text_loss in [true, false] {
                for regime in [Regime::DetectionOnly, Regime::EndToEnd] {
                    let mut cfg = base.clone();
                    cfg.stages = stages_upto(base, if regime == Regime::EndToEnd { Stage::Joint } else { Stage::PretrainPercLang });
                    cfg.stages.iter_mut().for_each(|s| s.text_supervision = text_loss);
                    push(format!("text={}/{regime:?}", if text_loss { "on" } else { "off" }), Variant::TextSupervision { text_loss, regime }, cfg)?;
                }
            }
        }
        Preset::TransferPolicy => {
            for policy in TransferPolicy::ALL {
                for k in 0..TRANSFER_SEEDS as u64 {
                    let mut cfg = base.clone();
                    let seed = base.seed + k;
                    cfg.seed = seed;
                    cfg.transfer = policy;
                    cfg.stages = stages_upto(base, Stage::PretrainPercLang);
                    cfg.stages.iter_mut().for_each(|s| s.optim.seed = seed);
                    push(format!("{}/seed={seed}", policy.label()), Variant::TransferPolicy { policy, seed }, cfg)?;
                }
            }
        }
    }
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub stage_losses: Vec<StageLoss>,
    pub val_perception: f64,
    pub plan_metrics: Option<PlanMetrics>,
    pub det_metrics: Option<DetMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub label: String,
    pub variant: Variant,
    /// `None` in dry-run mode.
    pub metrics: Option<RunMetrics>,
}

/// Side-by-side table written as `comparison.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonReport {
    pub preset: Preset,
    pub dry_run: bool,
    pub n_runs: usize,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
    pub runtime_s: f64,
}

pub fn run_preset(preset: Preset, base: &ExperimentConfig, out_dir: &Path, dry_run: bool) -> CliResult<ComparisonReport> {
    let t0 = std::time::Instant::now();
    let plan = plan_grid(preset, base)?;
    let mut runs = Vec::with_capacity(plan.len());
    if dry_run {
        runs.extend(plan.into_iter().map(|p| RunResult { label: p.label, variant: p.variant, metrics: None }));
    } else {
        // One captioning source serves every variant.
        let source = pretrain_source(base, &prepare(base)?)?.0.model;
        for p in plan {
            let prepared = prepare(&p.config)?;
            let mut model = initial_model(&p.config, Some(&source))?;
            let records = run_chain(&p.config, &mut model, &prepared, &p.config.stages)?;
            let summary = test_metrics(&p.config, &model, &prepared)?;
            let metrics = RunMetrics {
                stage_losses: records.iter().map(stage_loss).collect(),
                val_perception: val_perception(&p.config, &model, &prepared)?,
                plan_metrics: summary.as_ref().map(|s| s.plan.clone()),
                det_metrics: summary.map(|s| s.det),
            };
            runs.push(RunResult { label: p.label, variant: p.variant, metrics: Some(metrics) });
        }
    }
    let report = ComparisonReport { preset, dry_run, n_runs: runs.len(), config: base.clone(), runs, runtime_s: t0.elapsed().as_secs_f64() };
    write_json(&out_dir.join("comparison.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let base = ExperimentConfig::default();
        let sizes: Vec<usize> = Preset::ALL.iter().map(|&p| plan_grid(p, &base).unwrap().len()).collect();
        assert_eq!(sizes, vec![4, 4, 4, 12]);
    }

    #[test]
    fn lambda_grid_is_exact() {
        let runs = plan_grid(Preset::LambdaPlan, &ExperimentConfig::default()).unwrap();
        let lambdas: Vec<f64> = runs
            .iter()
            .map(|r| match r.variant {
                Variant::LambdaPlan { lambda_plan } => lambda_plan,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(lambdas, LAMBDA_PLAN_GRID.to_vec());
        for r in &runs {
            let Variant::LambdaPlan { lambda_plan } = r.variant else { unreachable!() };
            assert!(r.config.stages.iter().all(|s| s.lambda_plan == lambda_plan));
        }
    }

    #[test]
    fn unknown_preset_lists_valid_ones() {
        let err = "table-9".parse::<Preset>().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        for p in Preset::ALL {
            assert!(err.to_string().contains(p.name()));
        }
    }

    #[test]
    fn transfer_grid_covers_policies_and_seeds() {
        let runs = plan_grid(Preset::TransferPolicy, &ExperimentConfig::default()).unwrap();
        for policy in TransferPolicy::ALL {
            let seeds: Vec<u64> = runs
                .iter()
                .filter_map(|r| match r.variant {
                    Variant::TransferPolicy { policy: p, seed } if p == policy => Some(seed),
                    _ => None,
                })
                .collect();
            assert_eq!(seeds, vec![0, 1, 2]);
        }
        assert!(runs.iter().all(|r| r.config.stages.len() == 1 && r.config.stages[0].stage == Stage::PretrainPercLang));
    }

    #[test]
    fn dry_run_writes_parseable_comparison() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_preset(Preset::TokenOrder, &ExperimentConfig::default(), dir.path(), true).unwrap();
        let text = std::fs::read_to_string(dir.path().join("comparison.json")).unwrap();
        let back: ComparisonReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.n_runs, 4);
        assert!(back.runs.iter().all(|r| r.metrics.is_none()));
    }
}
