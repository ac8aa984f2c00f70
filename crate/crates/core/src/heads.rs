//! Task heads, set matching and the training losses.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::decoder::{DecoderModel, ForwardTrace, QueryStates};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::metrics::Detection;
use crate::scene::{SceneSample, WorldConfig};
use crate::tape::{log_sum_exp, sigmoid, NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::PAD;

/// Box regression target: `(cx/E, cy/E, ln w, ln l, sin, cos)`.
pub type BoxParams = [f64; 6];

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTarget {
    pub class: usize,
    pub params: BoxParams,
}

/// Per-scene supervision for the structured heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTargets {
    pub objects: Vec<ObjectTarget>,
    /// Canonicalized world-frame polylines.
    pub lanes: Vec<Vec<Point>>,
    /// Ego-frame waypoints.
    pub trajectory: Vec<Point>,
}

pub fn box_params(x: f64, y: f64, w: f64, l: f64, heading: f64, extent: f64) -> BoxParams {
    [x / extent, y / extent, libm::log(w), libm::log(l), libm::sin(heading), libm::cos(heading)]
}

/// Orders a polyline so its first point has the smaller x (then the smaller y).
pub fn canonical_polyline(line: &[Point]) -> Vec<Point> {
    match (line.first(), line.last()) {
        (Some(a), Some(b)) if (b[0], b[1]) < (a[0], a[1]) => line.iter().rev().copied().collect(),
        _ => line.to_vec(),
    }
}

impl SceneTargets {
    pub fn from_scene(scene: &SceneSample, world: &WorldConfig) -> Self {
        let e = world.world_extent;
        Self {
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectTarget { class: o.class, params: box_params(o.x, o.y, o.w, o.l, o.heading, e) })
                .collect(),
            lanes: scene.lanes.iter().map(|l| canonical_polyline(l)).collect(),
            trajectory: scene.gt_trajectory.clone(),
        }
    }
}

fn head_mlp(tape: &mut Tape<'_>, model: &DecoderModel, prefix: &str, states: NodeId) -> Result<NodeId> {
    let node = |tape: &mut Tape<'_>, s: &str| -> Result<NodeId> { Ok(tape.param(model.store.id(&format!("{prefix}.{s}"))?)) };
    let norm = node(tape, "norm")?;
    let h = tape.rms_norm(states, norm);
    let w1 = node(tape, "w1")?;
    let b1 = node(tape, "b1")?;
    let z = tape.matmul(h, w1);
    let z = tape.add_row(z, b1);
    let z = tape.silu(z);
    let w2 = node(tape, "w2")?;
    let b2 = node(tape, "b2")?;
    let z = tape.matmul(z, w2);
    Ok(tape.add_row(z, b2))
}

/// Raw detection head output: `n_det x (C + 1 + 6)`, class logits then normalized box.
pub fn det_decode(tape: &mut Tape<'_>, model: &DecoderModel, states: NodeId) -> Result<NodeId> {
    head_mlp(tape, model, "det_head", states)
}

/// Raw lane head output: `n_lane x (2K + 1)`, normalized points then the existence logit.
pub fn lane_decode(tape: &mut Tape<'_>, model: &DecoderModel, states: NodeId) -> Result<NodeId> {
    head_mlp(tape, model, "lane_head", states)
}

/// Ego-frame waypoints `T x 2`: the anchor plus the predicted offsets.
pub fn plan_decode(tape: &mut Tape<'_>, model: &DecoderModel, states: NodeId, anchor: &[Point]) -> Result<NodeId> {
    let offsets = head_mlp(tape, model, "plan_head", states)?;
    if tape.value(offsets).rows() != anchor.len() {
        return Err(Error::Shape(format!("{} plan states for {} anchor waypoints", tape.value(offsets).rows(), anchor.len())));
    }
    let a = tape.input(Tensor::from_vec(anchor.len(), 2, anchor.iter().flatten().copied().collect()));
    Ok(tape.add(offsets, a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetPrediction {
    pub class_logits: Vec<Vec<f64>>,
    /// Denormalized `(cx, cy, w, l, sin, cos)` with the angle pair on the unit circle.
    pub boxes: Vec<BoxParams>,
}

impl DetPrediction {
    pub fn from_raw(raw: &Tensor, n_classes: usize, extent: f64) -> Self {
        let mut class_logits = Vec::with_capacity(raw.rows());
        let mut boxes = Vec::with_capacity(raw.rows());
        for r in 0..raw.rows() {
            let row = raw.row(r);
            class_logits.push(row[..=n_classes].to_vec());
            let b = &row[n_classes + 1..];
            let norm = libm::hypot(b[4], b[5]);
            let (s, c) = if norm > 0.0 { (b[4] / norm, b[5] / norm) } else { (0.0, 1.0) };
            boxes.push([b[0] * extent, b[1] * extent, libm::exp(b[2]), libm::exp(b[3]), s, c]);
        }
        Self { class_logits, boxes }
    }

    /// Queries whose most likely class is a real class, scored by that class probability.
    pub fn detections(&self) -> Vec<Detection> {
        let mut out = Vec::new();
        for (logits, b) in self.class_logits.iter().zip(&self.boxes) {
            let lse = log_sum_exp(logits);
            let (best, &val) = logits.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty logits");
            if best + 1 < logits.len() {
                out.push(Detection { center: [b[0], b[1]], class: best, score: libm::exp(val - lse) });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanePrediction {
    pub points: Vec<Vec<Point>>,
    pub exist_logit: Vec<f64>,
}

impl LanePrediction {
    pub fn from_raw(raw: &Tensor, lane_points: usize, extent: f64) -> Self {
        let mut points = Vec::with_capacity(raw.rows());
        let mut exist_logit = Vec::with_capacity(raw.rows());
        for r in 0..raw.rows() {
            let row = raw.row(r);
            points.push((0..lane_points).map(|k| [row[2 * k] * extent, row[2 * k + 1] * extent]).collect());
            exist_logit.push(row[2 * lane_points]);
        }
        Self { points, exist_logit }
    }

    pub fn present(&self) -> Vec<Vec<Point>> {
        self.points.iter().zip(&self.exist_logit).filter(|(_, &e)| e > 0.0).map(|(p, _)| p.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanPrediction {
    pub offsets: Vec<Point>,
    pub waypoints: Vec<Point>,
}

impl PlanPrediction {
    pub fn from_waypoints(waypoints: &Tensor, anchor: &[Point]) -> Self {
        let wps: Vec<Point> = (0..waypoints.rows()).map(|r| [waypoints.get(r, 0), waypoints.get(r, 1)]).collect();
        let offsets = wps.iter().zip(anchor).map(|(w, a)| [w[0] - a[0], w[1] - a[1]]).collect();
        Self { offsets, waypoints: wps }
    }
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`, sorted by row.
pub fn hungarian_match(cost: &Tensor) -> Result<Vec<(usize, usize)>> {
    for r in 0..cost.rows() {
        for c in 0..cost.cols() {
            if !cost.get(r, c).is_finite() {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
        }
    }
    if cost.is_empty() {
        return Ok(Vec::new());
    }
    let transposed = cost.rows() > cost.cols();
    let c = if transposed { cost.transpose() } else { cost.clone() };
    let (n, m) = c.shape();
    // Shortest augmenting paths with potentials; 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) })
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LossConfig {
    /// Box term weight in both the matching cost and the loss.
    pub box_beta: f64,
    /// Cross-entropy weight of queries matched to no object.
    pub no_object_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { box_beta: 5.0, no_object_weight: 0.1 }
    }
}

fn l1_row(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum()
}

/// Detection loss of one layer's raw head output.
pub fn detection_loss_layer(tape: &mut Tape<'_>, raw: NodeId, targets: &[ObjectTarget], n_classes: usize, cfg: &LossConfig) -> Result<NodeId> {
    let rv = tape.value(raw);
    let n = rv.rows();
    if targets.len() > n {
        return Err(Error::InvalidConfig(format!("{} objects exceed {} detection queries", targets.len(), n)));
    }
    let mut cost = Tensor::zeros(n, targets.len());
    for i in 0..n {
        let row = rv.row(i);
        let lse = log_sum_exp(&row[..=n_classes]);
        for (j, t) in targets.iter().enumerate() {
            cost.set(i, j, lse - row[t.class] + cfg.box_beta * l1_row(&row[n_classes + 1..], &t.params));
        }
    }
    let pairs = hungarian_match(&cost)?;
    let mut class_t = vec![n_classes; n];
    let mut ce_w = vec![cfg.no_object_weight; n];
    for &(i, j) in &pairs {
        class_t[i] = targets[j].class;
        ce_w[i] = 1.0;
    }
    let total_w: f64 = ce_w.iter().sum();
    ce_w.iter_mut().for_each(|w| *w /= total_w);
    let logits = tape.gather_cols(raw, 0, n_classes + 1);
    let ce = tape.softmax_xent(logits, class_t, ce_w);
    if pairs.is_empty() {
        return Ok(ce);
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let matched = tape.gather(raw, rows);
    let boxes = tape.gather_cols(matched, n_classes + 1, 6);
    let target = Tensor::from_vec(pairs.len(), 6, pairs.iter().flat_map(|&(_, j)| targets[j].params).collect());
    let scale = cfg.box_beta / targets.len().max(1) as f64;
    let l1 = tape.l1(boxes, target, vec![scale; pairs.len()]);
    Ok(tape.add(ce, l1))
}

/// Mean of `|dx| + |dy|` over the points of two equal-length polylines.
pub fn polyline_l1(a: &[Point], b: &[Point]) -> f64 {
    a.iter().zip(b).map(|(p, q)| libm::fabs(p[0] - q[0]) + libm::fabs(p[1] - q[1])).sum::<f64>() / a.len().max(1) as f64
}

/// Lane loss of one layer: matched mean-point L1 (world units) plus existence BCE.
pub fn lane_loss_layer(tape: &mut Tape<'_>, raw: NodeId, gt: &[Vec<Point>], lane_points: usize, extent: f64) -> Result<NodeId> {
    let rv = tape.value(raw).clone();
    let n = rv.rows();
    if gt.len() > n {
        return Err(Error::InvalidConfig(format!("{} lanes exceed {} lane queries", gt.len(), n)));
    }
    if let Some(bad) = gt.iter().find(|l| l.len() != lane_points) {
        return Err(Error::Shape(format!("lane with {} points, expected {lane_points}", bad.len())));
    }
    let gt: Vec<Vec<Point>> = gt.iter().map(|l| canonical_polyline(l)).collect();
    let pred = LanePrediction::from_raw(&rv, lane_points, extent);
    let mut cost = Tensor::zeros(n, gt.len());
    for i in 0..n {
        for (j, g) in gt.iter().enumerate() {
            cost.set(i, j, polyline_l1(&pred.points[i], g));
        }
    }
    let pairs = hungarian_match(&cost)?;
    let mut exist_t = vec![0.0; n];
    for &(i, _) in &pairs {
        exist_t[i] = 1.0;
    }
    let exist = tape.gather_cols(raw, 2 * lane_points, 1);
    let bce = tape.bce_logits(exist, exist_t, vec![1.0 / n as f64; n]);
    if pairs.is_empty() {
        return Ok(bce);
    }
    let matched = tape.gather(raw, pairs.iter().map(|p| p.0).collect());
    let pts = tape.gather_cols(matched, 0, 2 * lane_points);
    let target = Tensor::from_vec(
        pairs.len(),
        2 * lane_points,
        pairs.iter().flat_map(|&(_, j)| gt[j].iter().flat_map(|p| [p[0] / extent, p[1] / extent])).collect(),
    );
    // Normalized outputs: scale back to world units and average over points.
    let w = extent / lane_points as f64 / gt.len().max(1) as f64;
    let l1 = tape.l1(pts, target, vec![w; pairs.len()]);
    Ok(tape.add(l1, bce))
}

/// Mean over timesteps of `|dx| + |dy|`.
pub fn planning_loss_layer(tape: &mut Tape<'_>, waypoints: NodeId, gt: &[Point]) -> Result<NodeId> {
    let t = tape.value(waypoints).rows();
    if t != gt.len() {
        return Err(Error::Shape(format!("{t} predicted waypoints against {} targets", gt.len())));
    }
    let target = Tensor::from_vec(t, 2, gt.iter().flatten().copied().collect());
    Ok(tape.l1(waypoints, target, vec![1.0 / t as f64; t]))
}

/// Mean next-token cross-entropy over non-pad targets. Row `p` of `logits` predicts `ids[p + 1]`.
pub fn lm_loss(tape: &mut Tape<'_>, logits: NodeId, ids: &[u32]) -> Result<NodeId> {
    let n = tape.value(logits).rows();
    if n != ids.len() {
        return Err(Error::Shape(format!("{n} logit rows for {} text ids", ids.len())));
    }
    let targets: Vec<usize> = (0..n).map(|p| ids.get(p + 1).map_or(PAD, |&t| t) as usize).collect();
    let count = targets.iter().filter(|&&t| t != PAD as usize).count();
    if count == 0 {
        return Err(Error::AllPadded);
    }
    let weights = targets.iter().map(|&t| if t == PAD as usize { 0.0 } else { 1.0 / count as f64 }).collect();
    Ok(tape.softmax_xent(logits, targets, weights))
}

/// Which loss components to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Components {
    pub perc: bool,
    pub plan: bool,
    pub text: bool,
}

/// Per-sample loss nodes; each task loss is the mean over mixed layers.
#[derive(Clone, Debug, Default)]
pub struct SampleLosses {
    pub perc: Option<NodeId>,
    pub plan: Option<NodeId>,
    pub text: Option<NodeId>,
    /// Per-layer values, for the deep-supervision bookkeeping.
    pub det_layers: Vec<f64>,
    pub lane_layers: Vec<f64>,
    pub plan_layers: Vec<f64>,
}

fn layer_mean(tape: &mut Tape<'_>, parts: &[NodeId]) -> NodeId {
    let sum = tape.sum_scalars(parts);
    tape.scale(sum, 1.0 / parts.len() as f64)
}

pub fn sample_losses(
    tape: &mut Tape<'_>,
    model: &DecoderModel,
    trace: &ForwardTrace,
    targets: &SceneTargets,
    text_ids: &[u32],
    plan_anchor: &[Point],
    which: Components,
    cfg: &LossConfig,
) -> Result<SampleLosses> {
    if trace.queries.is_empty() {
        return Err(Error::Contract("trace holds no mixed-layer states".into()));
    }
    let shape = &model.shape;
    let mut out = SampleLosses::default();
    if which.perc {
        let mut per_layer = Vec::new();
        for q in &trace.queries {
            let QueryStates { det, lane, .. } = *q;
            let det = det.ok_or(Error::MissingComponent("detection queries"))?;
            let lane = lane.ok_or(Error::MissingComponent("lane queries"))?;
            let d_raw = det_decode(tape, model, det)?;
            let d = detection_loss_layer(tape, d_raw, &targets.objects, shape.n_classes, cfg)?;
            let l_raw = lane_decode(tape, model, lane)?;
            let l = lane_loss_layer(tape, l_raw, &targets.lanes, shape.lane_points, shape.world_extent)?;
            out.det_layers.push(tape.value(d).scalar());
            out.lane_layers.push(tape.value(l).scalar());
            per_layer.push(tape.add(d, l));
        }
        out.perc = Some(layer_mean(tape, &per_layer));
    }
    if which.plan {
        let mut per_layer = Vec::new();
        for q in &trace.queries {
            let plan = q.plan.ok_or(Error::MissingComponent("planning queries"))?;
            let wps = plan_decode(tape, model, plan, plan_anchor)?;
            let l = planning_loss_layer(tape, wps, &targets.trajectory)?;
            out.plan_layers.push(tape.value(l).scalar());
            per_layer.push(l);
        }
        out.plan = Some(layer_mean(tape, &per_layer));
    }
    if which.text {
        let logits = trace.text_logits()?;
        out.text = Some(lm_loss(tape, logits, text_ids)?);
    }
    Ok(out)
}

/// Mean of per-layer losses.
pub fn deep_supervision_total(per_layer: &[f64]) -> f64 {
    per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64
}

/// Decoded structured outputs of the last mixed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredOutputs {
    pub det: Option<DetPrediction>,
    pub lanes: Option<LanePrediction>,
    pub plan: Option<PlanPrediction>,
}

pub fn decode_outputs(tape: &mut Tape<'_>, model: &DecoderModel, q: &QueryStates, plan_anchor: &[Point]) -> Result<StructuredOutputs> {
    let s = &model.shape;
    let det = match q.det {
        Some(n) => {
            let raw = det_decode(tape, model, n)?;
            Some(DetPrediction::from_raw(tape.value(raw), s.n_classes, s.world_extent))
        }
        None => None,
    };
    let lanes = match q.lane {
        Some(n) => {
            let raw = lane_decode(tape, model, n)?;
            Some(LanePrediction::from_raw(tape.value(raw), s.lane_points, s.world_extent))
        }
        None => None,
    };
    let plan = match q.plan {
        Some(n) => {
            let w = plan_decode(tape, model, n, plan_anchor)?;
            Some(PlanPrediction::from_waypoints(tape.value(w), plan_anchor))
        }
        None => None,
    };
    Ok(StructuredOutputs { det, lanes, plan })
}

pub fn existence_probability(logit: f64) -> f64 {
    sigmoid(logit)
}
