//! Shared steps behind the subcommands: data preparation, source pretraining, stage chains.

use unidec_core::decoder::{DecoderModel, ModelKind};
use unidec_core::eval::{evaluate, validation_losses, EvalSummary};
use unidec_core::heads::Components;
use unidec_core::scene::{generate_scene, generate_split, rasterize};
use unidec_core::tokens::{assemble_sequence, encode_text, AnchorSet, TokenSequence, Vocab};
use unidec_core::trainer::{
    init_from_pretrained, prepare_samples, pretrain_toy_vlm, run_stage, CheckpointBundle, LossComponents, StageConfig,
    StageOutcome, StepLog, TrainSample,
};

use crate::config::ExperimentConfig;
use crate::dataset::{load_splits, Splits};
use crate::error::CliResult;

pub struct Prepared {
    pub vocab: Vocab,
    pub anchors: AnchorSet,
    pub splits: Splits,
    pub train: Vec<TrainSample>,
    pub val: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let splits = load_splits(cfg)?;
    let vocab = cfg.vocab()?;
    let anchors = AnchorSet::from_training_set(&splits.train, &cfg.world);
    let layout = cfg.sequence_layout();
    let prep = |s| prepare_samples(s, &cfg.world, &layout, &vocab, &anchors);
    let (train, val, test) = (prep(&splits.train)?, prep(&splits.val)?, prep(&splits.test)?);
    Ok(Prepared { vocab, anchors, splits, train, val, test })
}

/// One full-length sequence for timing, built from the first test seed.
pub fn bench_sequence(cfg: &ExperimentConfig) -> CliResult<TokenSequence> {
    let scene = generate_scene(cfg.data.test_seed, &cfg.world)?;
    let vocab = cfg.vocab()?;
    let anchors = AnchorSet::from_training_set(std::slice::from_ref(&scene), &cfg.world);
    let ids = encode_text(&scene.caption, &vocab)?;
    Ok(assemble_sequence(&rasterize(&scene, &cfg.world), &cfg.sequence_layout(), &scene, &ids, &anchors, &cfg.world)?)
}

/// Trains the captioning source model the transfer policies copy from.
pub fn pretrain_source(cfg: &ExperimentConfig, prepared: &Prepared) -> CliResult<(CheckpointBundle, Vec<StepLog>)> {
    let scenes = generate_split(cfg.pretrain.n_scenes, cfg.pretrain.base_seed, &cfg.world)?;
    let layout = cfg.caption_layout();
    let corpus: Vec<TokenSequence> =
        prepare_samples(&scenes, &cfg.world, &layout, &prepared.vocab, &prepared.anchors)?.into_iter().map(|s| s.seq).collect();
    let shape = unidec_core::decoder::TaskShape::new(&cfg.world, &layout, prepared.vocab.len());
    Ok(pretrain_toy_vlm(&corpus, &cfg.model, &shape, &cfg.pretrain.optim)?)
}

/// A unified model, warm-started from `source` under the configured transfer policy when given.
pub fn initial_model(cfg: &ExperimentConfig, source: Option<&DecoderModel>) -> CliResult<DecoderModel> {
    let shape = cfg.task_shape()?;
    Ok(match source {
        Some(src) => init_from_pretrained(src, cfg.transfer, &cfg.model, &shape, cfg.seed)?,
        None => DecoderModel::new(cfg.model.clone(), shape, ModelKind::Unified, cfg.seed)?,
    })
}

pub struct StageRecord {
    pub config: StageConfig,
    pub outcome: StageOutcome,
    /// Unweighted validation components of the stage's objective.
    pub val: LossComponents,
}

impl StageRecord {
    pub fn final_train(&self) -> Option<&StepLog> {
        self.outcome.curve.last()
    }

    /// Weighted validation total under the stage's objective.
    pub fn val_total(&self) -> Option<f64> {
        self.config.objective().total(&self.val).ok()
    }
}

pub fn run_chain(cfg: &ExperimentConfig, model: &mut DecoderModel, prepared: &Prepared, stages: &[StageConfig]) -> CliResult<Vec<StageRecord>> {
    let mut out = Vec::with_capacity(stages.len());
    for sc in stages {
        let outcome = run_stage(sc, model, &prepared.train, &cfg.loss)?;
        let val = if prepared.val.is_empty() {
            LossComponents::default()
        } else {
            validation_losses(model, &prepared.val, sc.objective().components(), &cfg.loss)?
        };
        out.push(StageRecord { config: sc.clone(), outcome, val });
    }
    Ok(out)
}

/// Metrics on the test split, or `None` when it is empty.
pub fn test_metrics(cfg: &ExperimentConfig, model: &DecoderModel, prepared: &Prepared) -> CliResult<Option<EvalSummary>> {
    if prepared.test.is_empty() {
        return Ok(None);
    }
    Ok(Some(evaluate(model, &prepared.test, &prepared.splits.test, &cfg.eval)?))
}

/// Mean perception loss on the validation split.
pub fn val_perception(cfg: &ExperimentConfig, model: &DecoderModel, prepared: &Prepared) -> CliResult<f64> {
    let which = Components { perc: true, plan: false, text: false };
    Ok(validation_losses(model, &prepared.val, which, &cfg.loss)?.perc.unwrap_or(f64::NAN))
}

pub fn stage_loss(rec: &StageRecord) -> crate::report::StageLoss {
    let last = rec.final_train();
    crate::report::StageLoss {
        stage: rec.config.stage.name().to_string(),
        steps: rec.outcome.curve.len(),
        final_train: last.map(|s| s.components),
        final_train_total: last.map(|s| s.total),
        val: Some(rec.val),
        val_total: rec.val_total(),
        diverged_at: rec.outcome.diverged_at,
    }
}
