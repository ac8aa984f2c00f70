//! The unified decoder.
//!
//! Every layer runs pre-norm causal attention over the whole sequence with rotary
//! positions plus an additive spatial embedding on non-text rows; query-role rows drop
//! the attention residual. The first `n_mixed` layers additionally run a bidirectional
//! block over the perception queries and route rows to task FFNs by role. Deep layers
//! are plain decoder layers, so structured outputs can be read after the mixed layers
//! without running the rest of the stack.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::params::{ParamGroup, ParamStore};
use crate::scene::WorldConfig;
use crate::tape::{rope_forward, sinusoid_slot, AttnMask, NodeId, RopeTable, Tape};
use crate::tensor::Tensor;
use crate::tokens::{
    build_backbone_mask, build_group_mask, GroupMode, RefPoint, Segment, SequenceLayout, TokenSequence, BOS, EGO_FEATURES,
    EOS, PAD,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum E3dMode {
    /// Parameter-free sinusoid shared by all layers.
    #[default]
    Sinusoid,
    /// The sinusoid followed by a learned `d_head x d_head` map (identity at init).
    Learned,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_mixed: usize,
    pub d_ffn: usize,
    pub rotary_base: f64,
    pub e3d_scale: f64,
    pub e3d_mode: E3dMode,
    pub group_mode: GroupMode,
    /// Hidden width of the task heads.
    pub head_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_layers: 4,
            n_mixed: 2,
            d_ffn: 64,
            rotary_base: 10000.0,
            e3d_scale: 8.0,
            e3d_mode: E3dMode::Sinusoid,
            group_mode: GroupMode::Joint,
            head_hidden: 64,
        }
    }
}

impl DecoderConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// The configuration used for the full-versus-truncated latency comparison.
    pub fn latency_reference() -> Self {
        Self { d_model: 256, n_heads: 8, n_layers: 8, n_mixed: 4, d_ffn: 1024, head_hidden: 256, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 {
            return bad(format!("d_model ({}) and n_heads ({}) must be positive", self.d_model, self.n_heads));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_head() % 2 != 0 {
            return bad(format!("d_head {} must be even for rotary pairs", self.d_head()));
        }
        if self.n_mixed == 0 || self.n_mixed > self.n_layers {
            return bad(format!("n_mixed {} must lie in 1..={}", self.n_mixed, self.n_layers));
        }
        if self.d_ffn == 0 || self.head_hidden == 0 {
            return bad("d_ffn and head_hidden must be positive".into());
        }
        if !(self.rotary_base > 1.0) || !(self.e3d_scale > 0.0) {
            return bad("rotary_base must exceed 1 and e3d_scale must be positive".into());
        }
        Ok(())
    }
}

/// Problem-side dimensions the model is built for.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskShape {
    pub vocab_size: usize,
    pub img_features: usize,
    pub n_det: usize,
    pub n_lane: usize,
    pub n_classes: usize,
    pub lane_points: usize,
    pub horizon_t: usize,
    pub world_extent: f64,
}

impl TaskShape {
    pub fn new(world: &WorldConfig, layout: &SequenceLayout, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            img_features: world.grid_c + 2,
            n_det: layout.n_det,
            n_lane: layout.n_lane,
            n_classes: world.n_classes,
            lane_points: world.lane_points,
            horizon_t: world.horizon_t,
            world_extent: world.world_extent,
        }
    }

    pub fn det_out(&self) -> usize {
        self.n_classes + 1 + 6
    }

    pub fn lane_out(&self) -> usize {
        self.lane_points * 2 + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ModelKind {
    /// Attention and text FFNs only: the captioning model used as the transfer source.
    Plain,
    Unified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LoraTarget {
    Q,
    V,
}

impl LoraTarget {
    fn weight(self) -> &'static str {
        match self {
            LoraTarget::Q => "wq",
            LoraTarget::V => "wv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0, targets: vec![LoraTarget::Q, LoraTarget::V] }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Mode {
    Full,
    Truncated,
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub shape: TaskShape,
    pub kind: ModelKind,
    pub lora: Option<LoraSpec>,
    pub store: ParamStore,
}

/// Parameter name of `suffix` inside layer `layer`.
pub fn layer_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// Names of the `(A, B)` adapter factors on `target` in `layer`.
pub fn lora_names(layer: usize, target: LoraTarget) -> (String, String) {
    let w = target.weight();
    (layer_name(layer, &format!("attn.lora_{w}_a")), layer_name(layer, &format!("attn.lora_{w}_b")))
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn uniform(&mut self, rows: usize, cols: usize, half: f64) -> Tensor {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-half..=half)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        self.normal(fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64))
    }
}

fn insert_ffn(store: &mut ParamStore, init: &mut Init, prefix: &str, group: ParamGroup, d: usize, f: usize) {
    store.insert(&format!("{prefix}.w1"), group, init.linear(d, f));
    store.insert(&format!("{prefix}.b1"), group, Tensor::zeros(1, f));
    store.insert(&format!("{prefix}.w2"), group, init.linear(f, d));
    store.insert(&format!("{prefix}.b2"), group, Tensor::zeros(1, d));
}

fn insert_head(store: &mut ParamStore, init: &mut Init, prefix: &str, group: ParamGroup, d: usize, h: usize, out: usize) {
    store.insert(&format!("{prefix}.norm"), group, Tensor::filled(1, d, 1.0));
    store.insert(&format!("{prefix}.w1"), group, init.linear(d, h));
    store.insert(&format!("{prefix}.b1"), group, Tensor::zeros(1, h));
    store.insert(&format!("{prefix}.w2"), group, init.normal(h, out, 0.1 / libm::sqrt(h as f64)));
    store.insert(&format!("{prefix}.b2"), group, Tensor::zeros(1, out));
}

fn insert_attn(store: &mut ParamStore, init: &mut Init, prefix: &str, group: ParamGroup, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(&format!("{prefix}.{w}"), group, init.linear(d, d));
    }
}

impl DecoderModel {
    pub fn new(config: DecoderConfig, shape: TaskShape, kind: ModelKind, seed: u64) -> Result<Self> {
        config.validate()?;
        if shape.vocab_size < 4 || shape.img_features == 0 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} and img_features {} too small",
                shape.vocab_size, shape.img_features
            )));
        }
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut store = ParamStore::new();
        let (d, f) = (config.d_model, config.d_ffn);
        store.insert("raster_embed.w", ParamGroup::RasterEmbed, init.linear(shape.img_features, d));
        store.insert("raster_embed.b", ParamGroup::RasterEmbed, Tensor::zeros(1, d));
        store.insert("text_embed", ParamGroup::TextEmbed, init.normal(shape.vocab_size, d, 0.02));
        store.insert("final_norm", ParamGroup::FinalNorm, Tensor::filled(1, d, 1.0));
        if config.e3d_mode == E3dMode::Learned {
            store.insert("e3d.map", ParamGroup::E3dMap, Tensor::identity(config.d_head()));
        }
        for i in 0..config.n_layers {
            let mixed = i < config.n_mixed;
            let attn_group = if mixed { ParamGroup::BackboneAttn } else { ParamGroup::DeepBase };
            let ffn_group = if mixed { ParamGroup::TextFfn } else { ParamGroup::DeepBase };
            store.insert(&layer_name(i, "attn_norm"), attn_group, Tensor::filled(1, d, 1.0));
            insert_attn(&mut store, &mut init, &layer_name(i, "attn"), attn_group, d);
            store.insert(&layer_name(i, "ffn_norm"), ffn_group, Tensor::filled(1, d, 1.0));
            insert_ffn(&mut store, &mut init, &layer_name(i, "ffn"), ffn_group, d, f);
            if mixed && kind == ModelKind::Unified {
                store.insert(&layer_name(i, "group_norm"), ParamGroup::GroupAttn, Tensor::filled(1, d, 1.0));
                insert_attn(&mut store, &mut init, &layer_name(i, "group"), ParamGroup::GroupAttn, d);
                insert_ffn(&mut store, &mut init, &layer_name(i, "det_ffn"), ParamGroup::DetFfn, d, f);
                insert_ffn(&mut store, &mut init, &layer_name(i, "lane_ffn"), ParamGroup::LaneFfn, d, f);
                insert_ffn(&mut store, &mut init, &layer_name(i, "plan_ffn"), ParamGroup::PlanFfn, d, f);
            }
        }
        if kind == ModelKind::Unified {
            let e = shape.world_extent;
            store.insert("det_query.embed", ParamGroup::DetQuery, init.normal(shape.n_det, d, 1.0));
            store.insert("det_query.anchor", ParamGroup::DetQuery, init.uniform(shape.n_det, 2, e));
            store.insert("lane_query.embed", ParamGroup::LaneQuery, init.normal(shape.n_lane, d, 1.0));
            store.insert("lane_query.anchor", ParamGroup::LaneQuery, init.uniform(shape.n_lane, 2, e));
            store.insert("ego_embed.w", ParamGroup::EgoEmbed, init.linear(EGO_FEATURES, d));
            store.insert("ego_embed.b", ParamGroup::EgoEmbed, Tensor::zeros(1, d));
            store.insert("plan_query.embed", ParamGroup::PlanQuery, init.normal(shape.horizon_t, d, 1.0));
            let h = config.head_hidden;
            insert_head(&mut store, &mut init, "det_head", ParamGroup::DetHead, d, h, shape.det_out());
            insert_head(&mut store, &mut init, "lane_head", ParamGroup::LaneHead, d, h, shape.lane_out());
            insert_head(&mut store, &mut init, "plan_head", ParamGroup::PlanHead, d, h, 2);
        }
        Ok(Self { config, shape, kind, lora: None, store })
    }

    pub fn is_mixed(&self, layer: usize) -> bool {
        layer < self.config.n_mixed
    }

    /// Adds zero-initialized low-rank adapters to the deep layers' target projections.
    pub fn apply_lora(&mut self, spec: &LoraSpec, seed: u64) -> Result<()> {
        let d = self.config.d_model;
        if spec.rank == 0 || spec.rank > d {
            return Err(Error::InvalidConfig(format!("LoRA rank {} must lie in 1..={d}", spec.rank)));
        }
        if spec.targets.is_empty() || !(spec.alpha > 0.0) {
            return Err(Error::InvalidConfig("LoRA needs a target and alpha > 0".into()));
        }
        if self.lora.is_some() {
            return Err(Error::Contract("adapters already applied".into()));
        }
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        for layer in self.config.n_mixed..self.config.n_layers {
            for &t in &spec.targets {
                let (a, b) = lora_names(layer, t);
                self.store.insert(&a, ParamGroup::Lora, init.normal(spec.rank, d, 1.0 / libm::sqrt(d as f64)));
                self.store.insert(&b, ParamGroup::Lora, Tensor::zeros(d, spec.rank));
            }
        }
        self.lora = Some(spec.clone());
        Ok(())
    }

    /// Folds `scale * B * A` into each target weight and returns a model without adapters.
    pub fn merge_lora(&self) -> Result<DecoderModel> {
        let Some(spec) = &self.lora else {
            return Err(Error::Contract("no adapters to merge".into()));
        };
        let mut merged = ParamStore::new();
        let mut folded: Vec<(String, Tensor)> = Vec::new();
        for layer in self.config.n_mixed..self.config.n_layers {
            for &t in &spec.targets {
                let (a, b) = lora_names(layer, t);
                let a = self.store.by_name(&a).ok_or(Error::MissingParam(a))?;
                let b = self.store.by_name(&b).ok_or(Error::MissingParam(b))?;
                let mut delta = b.matmul(a);
                delta.scale_assign(spec.scale());
                let w = layer_name(layer, &format!("attn.{}", t.weight()));
                let mut base = self.store.by_name(&w).ok_or_else(|| Error::MissingParam(w.clone()))?.clone();
                base.add_assign(&delta);
                folded.push((w, base));
            }
        }
        for (_, p) in self.store.iter() {
            if p.group == ParamGroup::Lora {
                continue;
            }
            let value = folded.iter().find(|(n, _)| *n == p.name).map_or_else(|| p.value.clone(), |(_, v)| v.clone());
            merged.insert(&p.name, p.group, value);
        }
        Ok(DecoderModel { config: self.config.clone(), shape: self.shape.clone(), kind: self.kind, lora: None, store: merged })
    }

    fn node(&self, tape: &mut Tape<'_>, name: &str) -> Result<NodeId> {
        Ok(tape.param(self.store.id(name)?))
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let l = &seq.layout;
        let mismatch = |what: &str, a: usize, b: usize| Err(Error::Shape(format!("{what}: sequence has {a}, model expects {b}")));
        if self.kind == ModelKind::Plain {
            if l.n_det + l.n_lane + l.n_ego + l.n_plan > 0 {
                return Err(Error::Contract("plain model cannot process query tokens".into()));
            }
        } else {
            if l.n_det != self.shape.n_det {
                return mismatch("det queries", l.n_det, self.shape.n_det);
            }
            if l.n_lane != self.shape.n_lane {
                return mismatch("lane queries", l.n_lane, self.shape.n_lane);
            }
            if l.n_plan != 0 && l.n_plan != self.shape.horizon_t {
                return mismatch("plan queries", l.n_plan, self.shape.horizon_t);
            }
        }
        if seq.img_features.cols() != self.shape.img_features && l.n_img > 0 {
            return mismatch("image feature width", seq.img_features.cols(), self.shape.img_features);
        }
        if let Some(&bad) = seq.text_ids.iter().find(|&&t| t as usize >= self.shape.vocab_size) {
            return Err(Error::Shape(format!("text id {bad} outside vocabulary of {}", self.shape.vocab_size)));
        }
        Ok(())
    }
}

/// Rotates each consecutive pair inside every head by `pos * base^(-2k/d_head)`.
pub fn rotary_apply(x: &Tensor, pos: &[usize], n_heads: usize, base: f64) -> Tensor {
    let table = RopeTable::new(pos, x.cols() / n_heads, base);
    rope_forward(x, &table, n_heads, false)
}

/// Per-head spatial embedding of a reference point. The first half of the head encodes
/// `x / scale`, the second `y / scale`, alternating sin and cos at octave frequencies.
pub fn e3d_embed(ref_point: Option<Point>, d_head: usize, scale: f64) -> Result<Vec<f64>> {
    let p = ref_point.ok_or_else(|| Error::Contract("text tokens carry no spatial embedding".into()))?;
    Ok((0..d_head)
        .map(|j| {
            let (coord, freq, is_cos) = sinusoid_slot(j, d_head);
            let a = freq * p[coord] / scale;
            if is_cos {
                libm::cos(a)
            } else {
                libm::sin(a)
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FfnRoute {
    Text,
    Det,
    Lane,
    Plan,
}

impl FfnRoute {
    fn of(role: Segment) -> Self {
        match role {
            Segment::DetQ => FfnRoute::Det,
            Segment::LaneQ => FfnRoute::Lane,
            Segment::Ego | Segment::PlanQ => FfnRoute::Plan,
            Segment::Img | Segment::Text => FfnRoute::Text,
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            FfnRoute::Text => "ffn",
            FfnRoute::Det => "det_ffn",
            FfnRoute::Lane => "lane_ffn",
            FfnRoute::Plan => "plan_ffn",
        }
    }
}

/// Per-sequence state shared by all layers of one forward pass.
pub struct ForwardContext {
    pub roles: Vec<Segment>,
    rope: Rc<RopeTable>,
    causal: Rc<AttnMask>,
    /// 0 on query-role rows (residual removed), 1 elsewhere.
    keep: Vec<f64>,
    e3d: Option<(Vec<usize>, NodeId)>,
    group_rows: Vec<usize>,
    group_mask: Rc<AttnMask>,
    routes: Vec<(FfnRoute, Vec<usize>)>,
    text_rows: Vec<usize>,
}

impl ForwardContext {
    pub fn new(tape: &mut Tape<'_>, model: &DecoderModel, seq: &TokenSequence) -> Result<Self> {
        let cfg = &model.config;
        let n = seq.len();
        let roles = seq.roles.clone();
        let rope = Rc::new(RopeTable::new(&seq.rotary_pos, cfg.d_head(), cfg.rotary_base));
        let causal = Rc::new(build_backbone_mask(seq));
        let keep = roles.iter().map(|r| if r.is_query() { 0.0 } else { 1.0 }).collect();

        let mut rows = Vec::new();
        let mut fixed_slots = Vec::new();
        let mut fixed_pts = Vec::new();
        let (mut det_slots, mut det_idx, mut lane_slots, mut lane_idx) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, rp) in seq.ref_points.iter().enumerate() {
            let Some(rp) = rp else { continue };
            let slot = rows.len();
            rows.push(i);
            match *rp {
                RefPoint::Fixed(p) => {
                    fixed_slots.push(slot);
                    fixed_pts.extend_from_slice(&p);
                }
                RefPoint::DetAnchor(k) => {
                    det_slots.push(slot);
                    det_idx.push(k);
                }
                RefPoint::LaneAnchor(k) => {
                    lane_slots.push(slot);
                    lane_idx.push(k);
                }
            }
        }
        let e3d = if rows.is_empty() {
            None
        } else {
            let mut parts = Vec::new();
            if !fixed_slots.is_empty() {
                let pts = tape.input(Tensor::from_vec(fixed_slots.len(), 2, fixed_pts));
                parts.push((fixed_slots, pts));
            }
            if !det_slots.is_empty() {
                let a = model.node(tape, "det_query.anchor")?;
                parts.push((det_slots, tape.gather(a, det_idx)));
            }
            if !lane_slots.is_empty() {
                let a = model.node(tape, "lane_query.anchor")?;
                parts.push((lane_slots, tape.gather(a, lane_idx)));
            }
            let points = tape.assemble(rows.len(), 2, parts);
            let mut e = tape.sinusoid(points, cfg.e3d_scale, cfg.d_head());
            if cfg.e3d_mode == E3dMode::Learned {
                let map = model.node(tape, "e3d.map")?;
                e = tape.matmul(e, map);
            }
            Some((rows, tape.tile_cols(e, cfg.n_heads)))
        };

        let full_group = build_group_mask(seq, cfg.group_mode);
        let group_rows: Vec<usize> = (0..n).filter(|&i| roles[i].is_perception()).collect();
        let g = group_rows.len();
        let mut allowed = vec![false; g * g];
        for (a, &i) in group_rows.iter().enumerate() {
            for (b, &j) in group_rows.iter().enumerate() {
                allowed[a * g + b] = full_group.get(i, j);
            }
        }
        let group_mask = Rc::new(AttnMask { n: g, allowed });

        let mut routes: Vec<(FfnRoute, Vec<usize>)> = Vec::new();
        for (i, &r) in roles.iter().enumerate() {
            let route = FfnRoute::of(r);
            match routes.iter_mut().find(|(k, _)| *k == route) {
                Some((_, v)) => v.push(i),
                None => routes.push((route, vec![i])),
            }
        }
        let text_rows = (0..n).filter(|&i| roles[i] == Segment::Text).collect();
        Ok(Self { roles, rope, causal, keep, e3d, group_rows, group_mask, routes, text_rows })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    fn rows_of(&self, seg: Segment) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == seg).collect()
    }
}

fn project(tape: &mut Tape<'_>, model: &DecoderModel, layer: usize, h: NodeId, target: Option<LoraTarget>, w: &str) -> Result<NodeId> {
    let wn = model.node(tape, &layer_name(layer, w))?;
    let mut out = tape.matmul(h, wn);
    if let (Some(t), Some(spec)) = (target, &model.lora) {
        if spec.targets.contains(&t) && !model.is_mixed(layer) {
            let (a, b) = lora_names(layer, t);
            let (a, b) = (model.node(tape, &a)?, model.node(tape, &b)?);
            let hb = tape.matmul(h, b);
            let delta = tape.matmul(hb, a);
            let delta = tape.scale(delta, spec.scale());
            out = tape.add(out, delta);
        }
    }
    Ok(out)
}

/// Pre-norm causal attention with rotary and spatial terms on Q and K. Query-role rows
/// return the attention output alone; other rows keep the residual.
pub fn backbone_attention(tape: &mut Tape<'_>, model: &DecoderModel, layer: usize, x: NodeId, ctx: &ForwardContext) -> Result<NodeId> {
    let rows = tape.value(x).rows();
    if rows != ctx.causal.n || rows != ctx.len() {
        return Err(Error::Shape(format!("{rows} states against a mask over {} tokens", ctx.causal.n)));
    }
    let norm = model.node(tape, &layer_name(layer, "attn_norm"))?;
    let h = tape.rms_norm(x, norm);
    let mut q = project(tape, model, layer, h, Some(LoraTarget::Q), "attn.wq")?;
    let mut k = project(tape, model, layer, h, None, "attn.wk")?;
    let v = project(tape, model, layer, h, Some(LoraTarget::V), "attn.wv")?;
    q = tape.rope(q, ctx.rope.clone(), model.config.n_heads);
    k = tape.rope(k, ctx.rope.clone(), model.config.n_heads);
    if let Some((idx, e)) = &ctx.e3d {
        q = tape.scatter_add(q, idx.clone(), *e);
        k = tape.scatter_add(k, idx.clone(), *e);
    }
    let a = tape.attention(q, k, v, ctx.causal.clone(), model.config.n_heads);
    let wo = model.node(tape, &layer_name(layer, "attn.wo"))?;
    let o = tape.matmul(a, wo);
    let base = if ctx.keep.iter().all(|&k| k == 1.0) { x } else { tape.row_scale(x, ctx.keep.clone()) };
    Ok(tape.add(base, o))
}

/// Bidirectional attention among the perception queries, residual kept. Other rows pass through.
pub fn group_self_attention(tape: &mut Tape<'_>, model: &DecoderModel, layer: usize, x: NodeId, ctx: &ForwardContext) -> Result<NodeId> {
    if !model.is_mixed(layer) {
        return Err(Error::Contract(format!("group attention requested on deep layer {layer}")));
    }
    if ctx.group_rows.is_empty() {
        return Ok(x);
    }
    let g = tape.gather(x, ctx.group_rows.clone());
    let norm = model.node(tape, &layer_name(layer, "group_norm"))?;
    let h = tape.rms_norm(g, norm);
    let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|w| model.node(tape, &layer_name(layer, &format!("group.{w}"))));
    let (q, k, v) = (tape.matmul(h, wq?), tape.matmul(h, wk?), tape.matmul(h, wv?));
    let a = tape.attention(q, k, v, ctx.group_mask.clone(), model.config.n_heads);
    let o = tape.matmul(a, wo?);
    Ok(tape.scatter_add(x, ctx.group_rows.clone(), o))
}

fn ffn(tape: &mut Tape<'_>, model: &DecoderModel, prefix: &str, h: NodeId) -> Result<NodeId> {
    let [w1, b1, w2, b2] = ["w1", "b1", "w2", "b2"].map(|s| model.node(tape, &format!("{prefix}.{s}")));
    let z = tape.matmul(h, w1?);
    let z = tape.add_row(z, b1?);
    let z = tape.silu(z);
    let z = tape.matmul(z, w2?);
    Ok(tape.add_row(z, b2?))
}

/// Pre-norm FFN with residual; mixed layers route rows to task FFNs by role.
pub fn ffn_dispatch(tape: &mut Tape<'_>, model: &DecoderModel, layer: usize, x: NodeId, ctx: &ForwardContext) -> Result<NodeId> {
    let norm = model.node(tape, &layer_name(layer, "ffn_norm"))?;
    let h = tape.rms_norm(x, norm);
    let routed = model.is_mixed(layer) && model.kind == ModelKind::Unified && ctx.routes.len() > 1;
    let y = if routed {
        let mut parts = Vec::with_capacity(ctx.routes.len());
        for (route, rows) in &ctx.routes {
            let hs = tape.gather(h, rows.clone());
            parts.push((rows.clone(), ffn(tape, model, &layer_name(layer, route.prefix()), hs)?));
        }
        tape.assemble(ctx.len(), model.config.d_model, parts)
    } else if model.is_mixed(layer) && model.kind == ModelKind::Unified {
        let route = ctx.routes.first().map_or(FfnRoute::Text, |r| r.0);
        ffn(tape, model, &layer_name(layer, route.prefix()), h)?
    } else {
        ffn(tape, model, &layer_name(layer, "ffn"), h)?
    };
    Ok(tape.add(x, y))
}

fn embed_inputs(tape: &mut Tape<'_>, model: &DecoderModel, seq: &TokenSequence) -> Result<NodeId> {
    let l = &seq.layout;
    let mut parts = Vec::new();
    for &seg in &l.order {
        let rows: Vec<usize> = l.range(seg).collect();
        if rows.is_empty() {
            continue;
        }
        let node = match seg {
            Segment::Img => {
                let f = tape.input(seq.img_features.clone());
                let w = model.node(tape, "raster_embed.w")?;
                let b = model.node(tape, "raster_embed.b")?;
                let z = tape.matmul(f, w);
                tape.add_row(z, b)
            }
            Segment::DetQ => model.node(tape, "det_query.embed")?,
            Segment::LaneQ => model.node(tape, "lane_query.embed")?,
            Segment::Ego => {
                let f = tape.input(Tensor::from_vec(1, EGO_FEATURES, seq.ego_features.clone()));
                let w = model.node(tape, "ego_embed.w")?;
                let b = model.node(tape, "ego_embed.b")?;
                let z = tape.matmul(f, w);
                tape.add_row(z, b)
            }
            Segment::PlanQ => model.node(tape, "plan_query.embed")?,
            Segment::Text => {
                let table = model.node(tape, "text_embed")?;
                tape.gather(table, seq.text_ids.iter().map(|&t| t as usize).collect())
            }
        };
        parts.push((rows, node));
    }
    Ok(tape.assemble(seq.len(), model.config.d_model, parts))
}

/// Query-row states after one mixed layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryStates {
    pub det: Option<NodeId>,
    pub lane: Option<NodeId>,
    pub plan: Option<NodeId>,
}

#[derive(Debug)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub layers_executed: usize,
    /// One entry per mixed layer.
    pub queries: Vec<QueryStates>,
    text_logits: Option<NodeId>,
}

impl ForwardTrace {
    /// `n_text x V` logits over the TEXT positions; row `p` predicts text token `p + 1`.
    pub fn text_logits(&self) -> Result<NodeId> {
        match self.mode {
            Mode::Truncated => Err(Error::Contract("text logits are not produced in truncated mode".into())),
            Mode::Full => self.text_logits.ok_or_else(|| Error::Contract("sequence has no text segment".into())),
        }
    }
}

pub fn forward(tape: &mut Tape<'_>, model: &DecoderModel, seq: &TokenSequence, mode: Mode) -> Result<ForwardTrace> {
    model.check_sequence(seq)?;
    let ctx = ForwardContext::new(tape, model, seq)?;
    let mut x = embed_inputs(tape, model, seq)?;
    let n_run = match mode {
        Mode::Full => model.config.n_layers,
        Mode::Truncated => model.config.n_mixed,
    };
    let capture = |tape: &mut Tape<'_>, x: NodeId, seg: Segment| {
        let rows = ctx.rows_of(seg);
        (!rows.is_empty()).then(|| tape.gather(x, rows))
    };
    let mut queries = Vec::with_capacity(model.config.n_mixed);
    for layer in 0..n_run {
        x = backbone_attention(tape, model, layer, x, &ctx)?;
        if model.is_mixed(layer) && model.kind == ModelKind::Unified {
            x = group_self_attention(tape, model, layer, x, &ctx)?;
        }
        x = ffn_dispatch(tape, model, layer, x, &ctx)?;
        if model.is_mixed(layer) {
            queries.push(QueryStates {
                det: capture(tape, x, Segment::DetQ),
                lane: capture(tape, x, Segment::LaneQ),
                plan: capture(tape, x, Segment::PlanQ),
            });
        }
    }
    let text_logits = if mode == Mode::Full && !ctx.text_rows.is_empty() {
        let t = tape.gather(x, ctx.text_rows.clone());
        let norm = model.node(tape, "final_norm")?;
        let t = tape.rms_norm(t, norm);
        let table = model.node(tape, "text_embed")?;
        Some(tape.matmul_nt(t, table))
    } else {
        None
    };
    Ok(ForwardTrace { mode, layers_executed: n_run, queries, text_logits })
}

/// Greedy decoding from BOS; the returned ids exclude BOS and EOS.
pub fn generate_text(model: &DecoderModel, seq: &TokenSequence, max_len: usize) -> Result<Vec<u32>> {
    let n_text = seq.layout.n_text_max;
    let max_len = max_len.min(n_text.saturating_sub(1));
    let mut s = seq.clone();
    s.text_ids = vec![PAD; n_text];
    s.text_ids[0] = BOS;
    let mut out = Vec::new();
    for step in 0..max_len {
        let mut tape = Tape::inference(&model.store);
        let trace = forward(&mut tape, model, &s, Mode::Full)?;
        let logits = tape.value(trace.text_logits()?);
        let row = logits.row(step);
        let next = (0..row.len() as u32)
            .filter(|&t| t != PAD && t != BOS)
            .fold(None, |best: Option<u32>, t| match best {
                Some(b) if row[b as usize] >= row[t as usize] => Some(b),
                _ => Some(t),
            })
            .unwrap_or(EOS);
        if next == EOS {
            break;
        }
        out.push(next);
        s.text_ids[step + 1] = next;
    }
    Ok(out)
}
