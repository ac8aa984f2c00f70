//! Evaluation over prepared splits and the truncation-equivalence check.

use alloc::format;
use alloc::vec::Vec;

use crate::decoder::{forward, DecoderModel, Mode};
use crate::error::{Error, Result};
use crate::heads::{decode_outputs, sample_losses, Components, LossConfig, StructuredOutputs};
use crate::metrics::{collision_rate, default_horizons, detection_metrics, l2_error_set, DetMetrics, GtBox, PlanMetrics};
use crate::scene::SceneSample;
use crate::tape::Tape;
use crate::tokens::TokenSequence;
use crate::trainer::{LossComponents, TrainSample};

/// Max absolute difference between FULL and TRUNCATED query states over all mixed layers.
pub fn truncation_check(model: &DecoderModel, batch: &[TokenSequence]) -> Result<f64> {
    let mut worst = 0.0f64;
    for seq in batch {
        let mut tf = Tape::inference(&model.store);
        let full = forward(&mut tf, model, seq, Mode::Full)?;
        let mut tt = Tape::inference(&model.store);
        let trunc = forward(&mut tt, model, seq, Mode::Truncated)?;
        if full.queries.len() != trunc.queries.len() {
            return Err(Error::Contract("mode traces hold different layer counts".into()));
        }
        for (a, b) in full.queries.iter().zip(&trunc.queries) {
            for (x, y) in [(a.det, b.det), (a.lane, b.lane), (a.plan, b.plan)] {
                match (x, y) {
                    (Some(x), Some(y)) => worst = worst.max(tf.value(x).max_abs_diff(tt.value(y))),
                    (None, None) => {}
                    _ => return Err(Error::Contract("query groups differ between modes".into())),
                }
            }
        }
    }
    Ok(worst)
}

/// Structured predictions from the last mixed layer, computed in truncated mode.
pub fn predict(model: &DecoderModel, seq: &TokenSequence) -> Result<StructuredOutputs> {
    let mut tape = Tape::inference(&model.store);
    let trace = forward(&mut tape, model, seq, Mode::Truncated)?;
    let last = *trace.queries.last().ok_or_else(|| Error::Contract("no mixed layers".into()))?;
    decode_outputs(&mut tape, model, &last, &seq.plan_anchor)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    /// Waypoint indices to report; defaults to thirds of the horizon.
    pub horizons: Option<Vec<usize>>,
    pub ego_radius: f64,
    pub match_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizons: None, ego_radius: 0.5, match_radius: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalSummary {
    pub plan: PlanMetrics,
    pub det: DetMetrics,
}

/// Planning and detection metrics over a split; `scenes[i]` must describe `samples[i]`.
pub fn evaluate(model: &DecoderModel, samples: &[TrainSample], scenes: &[SceneSample], cfg: &EvalConfig) -> Result<EvalSummary> {
    if samples.len() != scenes.len() {
        return Err(Error::Shape(format!("{} samples for {} scenes", samples.len(), scenes.len())));
    }
    let horizons = cfg.horizons.clone().unwrap_or_else(|| default_horizons(model.shape.horizon_t));
    let mut pairs = Vec::new();
    let mut world_plans = Vec::new();
    let mut frames = Vec::new();
    for (s, scene) in samples.iter().zip(scenes) {
        let out = predict(model, &s.seq)?;
        if let Some(plan) = out.plan {
            let pose = scene.ego.pose();
            world_plans.push((plan.waypoints.iter().map(|&p| pose.to_world(p)).collect::<Vec<_>>(), scene.footprints()));
            pairs.push((plan.waypoints, scene.gt_trajectory.clone()));
        }
        if let Some(det) = out.det {
            let gts = scene.objects.iter().map(|o| GtBox { center: [o.x, o.y], class: o.class }).collect();
            frames.push((det.detections(), gts));
        }
    }
    let mut plan = l2_error_set(&pairs, &horizons)?;
    let coll = collision_rate(&world_plans, cfg.ego_radius, &horizons)?;
    plan.collision_per_horizon = coll.collision_per_horizon;
    plan.collision_avg = coll.collision_avg;
    let det = detection_metrics(&frames, cfg.match_radius)?;
    Ok(EvalSummary { plan, det })
}

/// Mean unweighted loss components over a split.
pub fn validation_losses(model: &DecoderModel, samples: &[TrainSample], which: Components, loss_cfg: &LossConfig) -> Result<LossComponents> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("validation split is empty".into()));
    }
    let mode = if which.text { Mode::Full } else { Mode::Truncated };
    let (mut perc, mut plan, mut text) = (0.0, 0.0, 0.0);
    for s in samples {
        let mut tape = Tape::inference(&model.store);
        let trace = forward(&mut tape, model, &s.seq, mode)?;
        let l = sample_losses(&mut tape, model, &trace, &s.targets, &s.seq.text_ids, &s.seq.plan_anchor, which, loss_cfg)?;
        perc += l.perc.map_or(0.0, |n| tape.value(n).scalar());
        plan += l.plan.map_or(0.0, |n| tape.value(n).scalar());
        text += l.text.map_or(0.0, |n| tape.value(n).scalar());
    }
    let n = samples.len() as f64;
    Ok(LossComponents {
        perc: which.perc.then_some(perc / n),
        plan: which.plan.then_some(plan / n),
        text: which.text.then_some(text / n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{layer_name, DecoderConfig, ModelKind, TaskShape};
    use crate::scene::{caption_vocabulary, generate_split, WorldConfig};
    use crate::tokens::{build_vocab, AnchorSet, SequenceLayout, TokenOrder};
    use crate::trainer::prepare_samples;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (DecoderModel, Vec<TrainSample>, Vec<SceneSample>) {
        let world = WorldConfig { grid_hw: (4, 4), ..WorldConfig::default() };
        let layout = SequenceLayout::new(TokenOrder::DetLanePlan, 16, 4, 3, world.horizon_t, 12);
        let vocab = build_vocab(&caption_vocabulary()).unwrap();
        let scenes = generate_split(4, 50, &world).unwrap();
        let anchors = AnchorSet::from_training_set(&scenes, &world);
        let samples = prepare_samples(&scenes, &world, &layout, &vocab, &anchors).unwrap();
        let cfg = DecoderConfig { n_layers: 4, n_mixed: 2, ..Default::default() };
        let model = DecoderModel::new(cfg, TaskShape::new(&world, &layout, vocab.len()), ModelKind::Unified, 0).unwrap();
        (model, samples, scenes)
    }

    fn perturb(model: &mut DecoderModel, name: &str, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let id = model.store.id(name).unwrap();
        model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }

    #[test]
    fn truncation_is_lossless_and_ignores_deep_layers() {
        let (mut model, samples, _) = fixture();
        let seqs: Vec<_> = samples.iter().map(|s| s.seq.clone()).collect();
        assert_eq!(truncation_check(&model, &seqs).unwrap(), 0.0);
        perturb(&mut model, &layer_name(3, "attn.wq"), 1);
        perturb(&mut model, &layer_name(2, "ffn.w1"), 2);
        assert_eq!(truncation_check(&model, &seqs).unwrap(), 0.0);
    }

    #[test]
    fn untrained_model_gives_finite_metrics() {
        let (model, samples, scenes) = fixture();
        let s = evaluate(&model, &samples, &scenes, &EvalConfig::default()).unwrap();
        assert!(s.plan.l2_avg.is_finite() && (0.0..=1.0).contains(&s.plan.collision_avg));
        assert!((0.0..=1.0).contains(&s.det.recall));
        let all = Components { perc: true, plan: true, text: true };
        let l = validation_losses(&model, &samples, all, &LossConfig::default()).unwrap();
        assert!(l.perc.unwrap().is_finite() && l.plan.unwrap() >= 0.0);
    }
}
