//! Optimization: the captioning pretraining source, weight transfer, adapters and the
//! three training stages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{forward, layer_name, DecoderConfig, DecoderModel, LoraSpec, Mode, ModelKind, TaskShape};
use crate::error::{Error, Result};
use crate::heads::{lm_loss, sample_losses, Components, LossConfig, SceneTargets};
use crate::params::{Grads, ParamGroup, ParamStore};
use crate::scene::{SceneSample, WorldConfig};
use crate::tape::{NodeId, Tape};
use crate::tokens::{assemble_sequence, encode_text, AnchorSet, SequenceLayout, TokenSequence, Vocab};
use crate::scene::rasterize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Stage {
    PretrainPercLang,
    PlanAdapt,
    Joint,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::PretrainPercLang, Stage::PlanAdapt, Stage::Joint];

    pub fn id(self) -> u8 {
        match self {
            Stage::PretrainPercLang => 1,
            Stage::PlanAdapt => 2,
            Stage::Joint => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainPercLang => "PRETRAIN_PERC_LANG",
            Stage::PlanAdapt => "PLAN_ADAPT",
            Stage::Joint => "JOINT",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Stage::ALL.into_iter().find(|st| st.name().eq_ignore_ascii_case(s) || format!("{}", st.id()) == s)
    }

    /// Default trainable groups. The raster map stays frozen until the joint stage.
    pub fn default_trainable(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            Stage::PretrainPercLang => {
                vec![BackboneAttn, Lora, E3dMap, GroupAttn, DetQuery, LaneQuery, DetFfn, LaneFfn, DetHead, LaneHead]
            }
            Stage::PlanAdapt => vec![PlanQuery, EgoEmbed, PlanFfn, PlanHead, Lora, BackboneAttn, E3dMap],
            Stage::Joint => ParamGroup::ALL.to_vec(),
        }
    }

    fn uses_perc(self) -> bool {
        self != Stage::PlanAdapt
    }

    fn uses_plan(self) -> bool {
        self != Stage::PretrainPercLang
    }
}

/// Scalar loss components of one step or one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossComponents {
    pub perc: Option<f64>,
    pub plan: Option<f64>,
    pub text: Option<f64>,
}

/// A stage's weighted objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub stage: Stage,
    pub lambda_perc: f64,
    pub lambda_plan: f64,
    /// Whether the language-modeling term is part of the objective.
    pub text: bool,
}

impl Objective {
    pub fn components(&self) -> Components {
        Components { perc: self.stage.uses_perc(), plan: self.stage.uses_plan(), text: self.text }
    }

    /// The stage's weighted sum. Components the stage does not use are rejected, as are
    /// missing ones.
    pub fn total(&self, c: &LossComponents) -> Result<f64> {
        let need = self.components();
        let check = |used: bool, v: Option<f64>, name: &'static str| -> Result<f64> {
            match (used, v) {
                (true, Some(x)) if x.is_finite() => Ok(x),
                (true, Some(_)) => Err(Error::Contract(format!("component {name} is not finite"))),
                (true, None) => Err(Error::MissingComponent(name)),
                (false, Some(_)) => Err(Error::UnexpectedComponent(name)),
                (false, None) => Ok(0.0),
            }
        };
        let perc = check(need.perc, c.perc, "L_perc")?;
        let plan = check(need.plan, c.plan, "L_plan")?;
        let text = check(need.text, c.text, "L_text")?;
        Ok(self.lambda_perc * perc + self.lambda_plan * plan + text)
    }
}

/// Weighted total with the language-modeling term included.
pub fn total_loss(stage: Stage, components: &LossComponents, lambda_perc: f64, lambda_plan: f64) -> Result<f64> {
    Objective { stage, lambda_perc, lambda_plan, text: true }.total(components)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OptimConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { steps: 200, lr: 1e-3, batch_size: 4, seed: 0, warmup_frac: 0.05, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bad optimizer settings: lr {}, warmup {}, decay {}, clip {}",
                self.lr, self.warmup_frac, self.weight_decay, self.clip_norm
            )));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = libm::ceil(self.warmup_frac * self.steps as f64) as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let progress = (step - warm) as f64 / span;
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StageConfig {
    pub stage: Stage,
    pub lambda_perc: f64,
    pub lambda_plan: f64,
    /// Overrides the stage's default trainable groups.
    pub trainable: Option<Vec<ParamGroup>>,
    /// Adapters added to the deep layers before the stage if the model has none.
    /// An omitted key in a serialized config means no adapters.
    #[cfg_attr(feature = "serde", serde(default))]
    pub lora: Option<LoraSpec>,
    pub text_supervision: bool,
    pub optim: OptimConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::new(Stage::PretrainPercLang)
    }
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lambda_perc: 1.0,
            lambda_plan: 1.0,
            trainable: None,
            lora: Some(LoraSpec::default()),
            text_supervision: true,
            optim: OptimConfig::default(),
        }
    }

    pub fn objective(&self) -> Objective {
        Objective { stage: self.stage, lambda_perc: self.lambda_perc, lambda_plan: self.lambda_plan, text: self.text_supervision }
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        self.trainable.clone().unwrap_or_else(|| self.stage.default_trainable())
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        for (name, v) in [("lambda_perc", self.lambda_perc), ("lambda_plan", self.lambda_plan)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.trainable_groups().is_empty() {
            return Err(Error::InvalidConfig("stage trains nothing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub components: LossComponents,
    pub grad_norm: f64,
}

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

fn decays(name: &str, rows: usize, cols: usize) -> bool {
    rows > 1 && cols > 1 && !name.contains("embed") && !name.contains("anchor")
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (id, g) in grads.iter() {
            let i = id.0;
            let p = store.param(id);
            let decay = decays(&p.name, g.rows(), g.cols());
            let m = self.m[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; g.len()]);
            let w = store.get_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / (libm::sqrt(v[k] / bc2) + self.eps);
                if decay {
                    w[k] -= lr * self.weight_decay * w[k];
                }
                w[k] -= lr * update;
            }
        }
    }
}

/// A prepared training example.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub seq: TokenSequence,
    pub targets: SceneTargets,
}

/// Rasterizes, captions and assembles each scene.
pub fn prepare_samples(
    scenes: &[SceneSample],
    world: &WorldConfig,
    layout: &SequenceLayout,
    vocab: &Vocab,
    anchors: &AnchorSet,
) -> Result<Vec<TrainSample>> {
    scenes
        .iter()
        .map(|s| {
            let grid = rasterize(s, world);
            let ids = encode_text(&s.caption, vocab)?;
            let seq = assemble_sequence(&grid, layout, s, &ids, anchors, world)?;
            Ok(TrainSample { seq, targets: SceneTargets::from_scene(s, world) })
        })
        .collect()
}

/// The weighted loss of one batch plus the batch-mean components.
pub fn batch_loss(
    tape: &mut Tape<'_>,
    model: &DecoderModel,
    batch: &[&TrainSample],
    objective: &Objective,
    loss_cfg: &LossConfig,
) -> Result<(NodeId, LossComponents)> {
    let which = objective.components();
    let mode = if which.text { Mode::Full } else { Mode::Truncated };
    let inv = 1.0 / batch.len() as f64;
    let mut terms = Vec::with_capacity(batch.len());
    let (mut perc, mut plan, mut text) = (0.0, 0.0, 0.0);
    for s in batch {
        let trace = forward(tape, model, &s.seq, mode)?;
        let l = sample_losses(tape, model, &trace, &s.targets, &s.seq.text_ids, &s.seq.plan_anchor, which, loss_cfg)?;
        let mut parts = Vec::with_capacity(3);
        if let Some(n) = l.perc {
            perc += tape.value(n).scalar();
            parts.push(tape.scale(n, objective.lambda_perc));
        }
        if let Some(n) = l.plan {
            plan += tape.value(n).scalar();
            parts.push(tape.scale(n, objective.lambda_plan));
        }
        if let Some(n) = l.text {
            text += tape.value(n).scalar();
            parts.push(n);
        }
        terms.push(tape.sum_scalars(&parts));
    }
    let sum = tape.sum_scalars(&terms);
    let total = tape.scale(sum, inv);
    let comps = LossComponents {
        perc: which.perc.then_some(perc * inv),
        plan: which.plan.then_some(plan * inv),
        text: which.text.then_some(text * inv),
    };
    Ok((total, comps))
}

/// Runs the optimizer loop; `loss` builds the scalar loss of a batch of indices.
/// On a non-finite loss the parameters are left at the last finite step.
fn optimize<F>(
    model: &mut DecoderModel,
    trainable: &[ParamGroup],
    opts: &OptimConfig,
    n_samples: usize,
    mut loss: F,
) -> Result<(Vec<StepLog>, Option<usize>)>
where
    F: for<'a> FnMut(&mut Tape<'a>, &'a DecoderModel, &[usize]) -> Result<(NodeId, LossComponents)>,
{
    opts.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mask = model.store.mask_for(trainable);
    let mut adam = AdamW::new(model.store.len(), opts.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(opts.steps);
    let bs = opts.batch_size.min(n_samples);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor == order.len() {
                order = (0..n_samples).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (total, comps, mut grads) = {
            let mut tape = Tape::new(&model.store, &mask);
            let (node, comps) = loss(&mut tape, model, &batch)?;
            let total = tape.value(node).scalar();
            if !total.is_finite() {
                return Ok((curve, Some(step)));
            }
            (total, comps, tape.backward(node))
        };
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Ok((curve, Some(step)));
        }
        if norm > opts.clip_norm {
            grads.scale(opts.clip_norm / norm);
        }
        let lr = opts.lr_at(step);
        adam.step(&mut model.store, &grads, lr);
        curve.push(StepLog { step, lr, total, components: comps, grad_norm: norm });
    }
    Ok((curve, None))
}

/// Model snapshot with its provenance.
#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub model: DecoderModel,
    /// `None` for the captioning source model.
    pub stage: Option<Stage>,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: CheckpointBundle,
    pub curve: Vec<StepLog>,
    /// Step at which the loss became non-finite; the checkpoint holds the last finite step.
    pub diverged_at: Option<usize>,
}

/// Trains exactly the stage's trainable groups on its objective.
pub fn run_stage(cfg: &StageConfig, model: &mut DecoderModel, train: &[TrainSample], loss_cfg: &LossConfig) -> Result<StageOutcome> {
    cfg.validate()?;
    if model.kind != ModelKind::Unified {
        return Err(Error::Contract("stages train the unified model".into()));
    }
    if let (Some(spec), None) = (&cfg.lora, &model.lora) {
        if model.config.n_mixed < model.config.n_layers {
            model.apply_lora(spec, cfg.optim.seed ^ 0x10a)?;
        }
    }
    let objective = cfg.objective();
    let (curve, diverged_at) = optimize(model, &cfg.trainable_groups(), &cfg.optim, train.len(), |tape, m, idx| {
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &train[i]).collect();
        batch_loss(tape, m, &batch, &objective, loss_cfg)
    })?;
    let steps = curve.len();
    Ok(StageOutcome {
        checkpoint: CheckpointBundle { model: model.clone(), stage: Some(cfg.stage), steps, seed: cfg.optim.seed },
        curve,
        diverged_at,
    })
}

/// Trains a plain decoder on next-word prediction over `[IMG; caption]`.
pub fn pretrain_toy_vlm(
    corpus: &[TokenSequence],
    config: &DecoderConfig,
    shape: &TaskShape,
    opts: &OptimConfig,
) -> Result<(CheckpointBundle, Vec<StepLog>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("captioning corpus is empty".into()));
    }
    let mut model = DecoderModel::new(config.clone(), shape.clone(), ModelKind::Plain, opts.seed)?;
    let groups = ParamGroup::ALL.to_vec();
    let (curve, diverged) = optimize(&mut model, &groups, opts, corpus.len(), |tape, m, idx| {
        let mut terms = Vec::with_capacity(idx.len());
        let mut text = 0.0;
        for &i in idx {
            let trace = forward(tape, m, &corpus[i], Mode::Full)?;
            let l = lm_loss(tape, trace.text_logits()?, &corpus[i].text_ids)?;
            text += tape.value(l).scalar();
            terms.push(l);
        }
        let sum = tape.sum_scalars(&terms);
        let inv = 1.0 / idx.len() as f64;
        Ok((tape.scale(sum, inv), LossComponents { text: Some(text * inv), ..Default::default() }))
    })?;
    if let Some(step) = diverged {
        return Err(Error::Diverged { step });
    }
    Ok((CheckpointBundle { model, stage: None, steps: curve.len(), seed: opts.seed }, curve))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum InitSource {
    Pretrained,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TransferPolicy {
    pub attn: InitSource,
    pub ffn: InitSource,
}

impl TransferPolicy {
    pub const ALL: [TransferPolicy; 4] = [
        TransferPolicy { attn: InitSource::Pretrained, ffn: InitSource::Pretrained },
        TransferPolicy { attn: InitSource::Pretrained, ffn: InitSource::Random },
        TransferPolicy { attn: InitSource::Random, ffn: InitSource::Pretrained },
        TransferPolicy { attn: InitSource::Random, ffn: InitSource::Random },
    ];

    pub fn label(&self) -> String {
        let s = |x: InitSource| if x == InitSource::Pretrained { "pretrained" } else { "random" };
        format!("attn={},ffn={}", s(self.attn), s(self.ffn))
    }
}

/// A fresh unified model with the source's embeddings and norms, plus its attention
/// and text FFN weights where the policy asks for them.
pub fn init_from_pretrained(
    source: &DecoderModel,
    policy: TransferPolicy,
    config: &DecoderConfig,
    shape: &TaskShape,
    seed: u64,
) -> Result<DecoderModel> {
    let sc = &source.config;
    if sc.d_model != config.d_model || sc.n_heads != config.n_heads || sc.d_ffn != config.d_ffn {
        return Err(Error::InvalidConfig(format!(
            "source dims (d_model {}, heads {}, ffn {}) differ from target ({}, {}, {})",
            sc.d_model, sc.n_heads, sc.d_ffn, config.d_model, config.n_heads, config.d_ffn
        )));
    }
    if sc.n_layers < config.n_mixed {
        return Err(Error::InvalidConfig(format!("source has {} layers, target mixes {}", sc.n_layers, config.n_mixed)));
    }
    if source.shape.vocab_size != shape.vocab_size || source.shape.img_features != shape.img_features {
        return Err(Error::InvalidConfig("source vocabulary or image feature width differs".into()));
    }
    let mut model = DecoderModel::new(config.clone(), shape.clone(), ModelKind::Unified, seed)?;
    let mut names: Vec<String> = ["raster_embed.w", "raster_embed.b", "text_embed", "final_norm", "e3d.map"].map(String::from).to_vec();
    for i in 0..config.n_layers.min(sc.n_layers) {
        names.push(layer_name(i, "attn_norm"));
        names.push(layer_name(i, "ffn_norm"));
        if policy.attn == InitSource::Pretrained {
            names.extend(["wq", "wk", "wv", "wo"].map(|w| layer_name(i, &format!("attn.{w}"))));
        }
        if policy.ffn == InitSource::Pretrained {
            names.extend(["w1", "b1", "w2", "b2"].map(|w| layer_name(i, &format!("ffn.{w}"))));
        }
    }
    for name in names {
        if let (Some(src), Ok(id)) = (source.store.by_name(&name), model.store.id(&name)) {
            *model.store.get_mut(id) = src.clone();
        }
    }
    Ok(model)
}

/// Adds adapters to `model` (see [`DecoderModel::apply_lora`]).
pub fn apply_lora(model: &mut DecoderModel, spec: &LoraSpec, seed: u64) -> Result<()> {
    model.apply_lora(spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::scene::{caption_vocabulary, generate_split};
    use crate::tokens::{build_vocab, TokenOrder};
    use sha2::{Digest, Sha256};

    fn fixture(n: usize) -> (WorldConfig, SequenceLayout, Vec<TrainSample>, TaskShape) {
        let world = WorldConfig { grid_hw: (4, 4), ..WorldConfig::default() };
        let layout = SequenceLayout::new(TokenOrder::DetLanePlan, 16, 4, 3, world.horizon_t, 12);
        let vocab = build_vocab(&caption_vocabulary()).unwrap();
        let scenes = generate_split(n, 0, &world).unwrap();
        let anchors = AnchorSet::from_training_set(&scenes, &world);
        let samples = prepare_samples(&scenes, &world, &layout, &vocab, &anchors).unwrap();
        let shape = TaskShape::new(&world, &layout, vocab.len());
        (world, layout, samples, shape)
    }

    #[test]
    fn total_loss_examples() {
        let c = LossComponents { perc: Some(0.5), plan: Some(0.3), text: Some(0.2) };
        assert!((total_loss(Stage::Joint, &c, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((total_loss(Stage::Joint, &c, 1.0, 2.0).unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(total_loss(Stage::PretrainPercLang, &c, 1.0, 1.0), Err(Error::UnexpectedComponent("L_plan")));
        let no_plan = LossComponents { plan: None, ..c };
        assert_eq!(total_loss(Stage::Joint, &no_plan, 1.0, 1.0), Err(Error::MissingComponent("L_plan")));
        for l in [0.25, 0.5, 1.0, 2.0] {
            assert!(StageConfig { lambda_plan: l, ..StageConfig::new(Stage::PlanAdapt) }.validate().is_ok());
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let o = OptimConfig { steps: 100, lr: 1e-3, ..Default::default() };
        assert!(o.lr_at(0) < o.lr_at(4));
        assert!((o.lr_at(4) - 1e-3).abs() < 1e-3 * 0.05);
        assert!(o.lr_at(99) < 1e-5);
    }

    fn digest(store: &ParamStore, groups: &[ParamGroup]) -> Vec<u8> {
        Sha256::digest(store.group_bytes(groups)).to_vec()
    }

    #[test]
    fn plan_stage_freezes_perception_and_losses_compose() {
        let (_, _, samples, shape) = fixture(6);
        let mut model = DecoderModel::new(DecoderConfig::default(), shape, ModelKind::Unified, 3).unwrap();
        let before = digest(&model.store, &ParamGroup::PERCEPTION_EXCLUSIVE);
        let plan_before = digest(&model.store, &[ParamGroup::PlanHead]);
        let cfg = StageConfig { optim: OptimConfig { steps: 4, batch_size: 2, ..Default::default() }, ..StageConfig::new(Stage::PlanAdapt) };
        let out = run_stage(&cfg, &mut model, &samples, &LossConfig::default()).unwrap();
        assert_eq!(digest(&model.store, &ParamGroup::PERCEPTION_EXCLUSIVE), before);
        assert_ne!(digest(&model.store, &[ParamGroup::PlanHead]), plan_before);
        for log in &out.curve {
            let expect = cfg.objective().total(&log.components).unwrap();
            assert!((log.total - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (_, _, samples, shape) = fixture(4);
        let cfg = StageConfig { optim: OptimConfig { steps: 3, batch_size: 2, ..Default::default() }, ..StageConfig::new(Stage::Joint) };
        let run = || {
            let mut m = DecoderModel::new(DecoderConfig::default(), shape.clone(), ModelKind::Unified, 1).unwrap();
            run_stage(&cfg, &mut m, &samples, &LossConfig::default()).unwrap().curve
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn transfer_copies_attention_only() {
        let (_, _, _, shape) = fixture(1);
        let cfg = DecoderConfig::default();
        let src = DecoderModel::new(cfg.clone(), shape.clone(), ModelKind::Plain, 100).unwrap();
        let policy = TransferPolicy { attn: InitSource::Pretrained, ffn: InitSource::Random };
        let m = init_from_pretrained(&src, policy, &cfg, &shape, 7).unwrap();
        for i in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let n = layer_name(i, &format!("attn.{w}"));
                assert_eq!(m.store.by_name(&n), src.store.by_name(&n));
            }
            for w in ["w1", "w2"] {
                let n = layer_name(i, &format!("ffn.{w}"));
                assert_ne!(m.store.by_name(&n), src.store.by_name(&n));
            }
        }
        let rr = TransferPolicy { attn: InitSource::Random, ffn: InitSource::Random };
        let a = init_from_pretrained(&src, rr, &cfg, &shape, 1).unwrap();
        let b = init_from_pretrained(&src, rr, &cfg, &shape, 2).unwrap();
        assert_ne!(a.store.by_name("layers.0.attn.wq"), b.store.by_name("layers.0.attn.wq"));
        let wrong = DecoderConfig { d_model: 16, ..cfg };
        assert!(init_from_pretrained(&src, rr, &wrong, &shape, 1).is_err());
    }

    #[test]
    fn pretraining_starts_near_uniform() {
        let world = WorldConfig { grid_hw: (4, 4), ..WorldConfig::default() };
        let layout = SequenceLayout::vision_language(16, 12);
        let vocab = build_vocab(&caption_vocabulary()).unwrap();
        let scenes = generate_split(2, 0, &world).unwrap();
        let corpus: Vec<TokenSequence> =
            prepare_samples(&scenes, &world, &layout, &vocab, &AnchorSet::from_training_set(&scenes, &world))
                .unwrap()
                .into_iter()
                .map(|s| s.seq)
                .collect();
        let shape = TaskShape::new(&world, &layout, vocab.len());
        let opts = OptimConfig { steps: 2, batch_size: 2, ..Default::default() };
        let (_, curve) = pretrain_toy_vlm(&corpus, &DecoderConfig::default(), &shape, &opts).unwrap();
        let ln_v = libm::log(vocab.len() as f64);
        assert!((curve[0].components.text.unwrap() - ln_v).abs() < 0.1 * ln_v);
        assert!(pretrain_toy_vlm(&[], &DecoderConfig::default(), &shape, &opts).is_err());
    }
}
