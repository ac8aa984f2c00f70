//! The unified token sequence: vocabulary, segment layout, reference points and masks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::scene::{oracle_plan, Command, EgoState, GridFeatures, SceneSample, WorldConfig};
use crate::tape::AttnMask;
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Allowed-pair matrix over a token sequence.
pub type MaskSpec = AttnMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Specials take ids 0..3, then the words in sorted order.
pub fn build_vocab<S: AsRef<str>>(words: &[S]) -> Result<Vocab> {
    if words.is_empty() {
        return Err(Error::InvalidConfig("vocabulary word set is empty".to_string()));
    }
    let mut sorted: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    all.extend(sorted.into_iter().filter(|w| !SPECIALS.contains(w)).map(str::to_string));
    let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    Ok(Vocab { words: all, index })
}

/// `[BOS, ids..., EOS]`.
pub fn encode_text<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(words.len() + 2);
    out.push(BOS);
    for w in words {
        let w = w.as_ref();
        out.push(vocab.id(w).ok_or_else(|| Error::UnknownWord(w.to_string()))?);
    }
    out.push(EOS);
    Ok(out)
}

/// Inverse of [`encode_text`]: drops specials, stopping at the first EOS.
pub fn decode_text(ids: &[u32], vocab: &Vocab) -> Vec<String> {
    ids.iter()
        .skip_while(|&&i| i == BOS)
        .take_while(|&&i| i != EOS)
        .filter(|&&i| i != PAD && i != BOS)
        .filter_map(|&i| vocab.word(i).map(str::to_string))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "SCREAMING_SNAKE_CASE"))]
pub enum Segment {
    Img,
    DetQ,
    LaneQ,
    Ego,
    PlanQ,
    Text,
}

impl Segment {
    pub fn is_query(self) -> bool {
        matches!(self, Segment::DetQ | Segment::LaneQ | Segment::Ego | Segment::PlanQ)
    }

    pub fn is_perception(self) -> bool {
        matches!(self, Segment::DetQ | Segment::LaneQ)
    }
}

/// Order of the perception query groups ahead of planning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TokenOrder {
    #[default]
    DetLanePlan,
    LaneDetPlan,
}

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SequenceLayout {
    pub order: Vec<Segment>,
    pub n_img: usize,
    pub n_det: usize,
    pub n_lane: usize,
    /// 0 or 1.
    pub n_ego: usize,
    pub n_plan: usize,
    pub n_text_max: usize,
}

impl SequenceLayout {
    pub fn new(order: TokenOrder, n_img: usize, n_det: usize, n_lane: usize, n_plan: usize, n_text_max: usize) -> Self {
        let perception = match order {
            TokenOrder::DetLanePlan => [Segment::DetQ, Segment::LaneQ],
            TokenOrder::LaneDetPlan => [Segment::LaneQ, Segment::DetQ],
        };
        Self {
            order: vec![Segment::Img, perception[0], perception[1], Segment::Ego, Segment::PlanQ, Segment::Text],
            n_img,
            n_det,
            n_lane,
            n_ego: 1,
            n_plan,
            n_text_max,
        }
    }

    /// Image tokens followed by text only, as used by the plain language-model pretraining.
    pub fn vision_language(n_img: usize, n_text_max: usize) -> Self {
        Self { n_det: 0, n_lane: 0, n_ego: 0, n_plan: 0, ..Self::new(TokenOrder::DetLanePlan, n_img, 0, 0, 0, n_text_max) }
    }

    pub fn count(&self, seg: Segment) -> usize {
        match seg {
            Segment::Img => self.n_img,
            Segment::DetQ => self.n_det,
            Segment::LaneQ => self.n_lane,
            Segment::Ego => self.n_ego,
            Segment::PlanQ => self.n_plan,
            Segment::Text => self.n_text_max,
        }
    }

    pub fn total_len(&self) -> usize {
        self.order.iter().map(|&s| self.count(s)).sum()
    }

    pub fn range(&self, seg: Segment) -> Range<usize> {
        let mut start = 0;
        for &s in &self.order {
            let n = self.count(s);
            if s == seg {
                return start..start + n;
            }
            start += n;
        }
        0..0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("layout: {m}")));
        let all = [Segment::Img, Segment::DetQ, Segment::LaneQ, Segment::Ego, Segment::PlanQ, Segment::Text];
        if self.order.len() != all.len() || !all.iter().all(|s| self.order.contains(s)) {
            return bad("order must list every segment exactly once");
        }
        let pos = |s: Segment| self.order.iter().position(|&o| o == s).unwrap_or(usize::MAX);
        if pos(Segment::Img) != 0 {
            return bad("IMG must come first");
        }
        if pos(Segment::Text) != self.order.len() - 1 {
            return bad("TEXT must come last");
        }
        if pos(Segment::Ego) + 1 != pos(Segment::PlanQ) {
            return bad("EGO must immediately precede PLAN_Q");
        }
        if pos(Segment::DetQ) > pos(Segment::PlanQ) || pos(Segment::LaneQ) > pos(Segment::PlanQ) {
            return bad("DET_Q and LANE_Q must precede PLAN_Q");
        }
        if self.n_ego > 1 {
            return bad("at most one EGO token");
        }
        if self.n_plan > 0 && self.n_ego == 0 {
            return bad("planning queries need the EGO token");
        }
        if self.n_text_max < 2 {
            return bad("text capacity must hold BOS and EOS");
        }
        Ok(())
    }
}

/// A token's spatial reference for the additive position embedding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RefPoint {
    Fixed(Point),
    /// Learnable detection anchor owned by the decoder, by query index.
    DetAnchor(usize),
    LaneAnchor(usize),
}

/// Command-conditioned reference trajectories (ego frame).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorSet {
    /// Indexed by `Command::index()`.
    pub trajectories: [Vec<Point>; 3],
}

impl AnchorSet {
    /// Per-command mean of the training trajectories; commands absent from the set fall
    /// back to the obstacle-free plan at the mean training speed.
    pub fn from_training_set(samples: &[SceneSample], cfg: &WorldConfig) -> Self {
        let t = cfg.horizon_t;
        let mean_speed = if samples.is_empty() {
            let (lo, hi) = cfg.speed_range();
            (lo + hi) / 2.0
        } else {
            samples.iter().map(|s| s.ego.speed).sum::<f64>() / samples.len() as f64
        };
        let trajectories = Command::ALL.map(|cmd| {
            let sel: Vec<&SceneSample> = samples.iter().filter(|s| s.ego.command == cmd).collect();
            if sel.is_empty() {
                let ego = EgoState { x: 0.0, y: 0.0, heading: 0.0, speed: mean_speed, accel: 0.0, yaw_rate: 0.0, command: cmd };
                return oracle_plan(&ego, &[], &[], cfg);
            }
            let mut acc = vec![[0.0, 0.0]; t];
            for s in &sel {
                for (a, p) in acc.iter_mut().zip(&s.gt_trajectory) {
                    a[0] += p[0];
                    a[1] += p[1];
                }
            }
            let n = sel.len() as f64;
            acc.iter().map(|a| [a[0] / n, a[1] / n]).collect()
        });
        Self { trajectories }
    }

    pub fn for_command(&self, cmd: Command) -> &[Point] {
        &self.trajectories[cmd.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub layout: SequenceLayout,
    pub roles: Vec<Segment>,
    pub rotary_pos: Vec<usize>,
    /// `None` exactly on TEXT tokens.
    pub ref_points: Vec<Option<RefPoint>>,
    /// `n_text_max` ids: BOS, caption, EOS, then PAD.
    pub text_ids: Vec<u32>,
    /// Per-IMG-token input features: raster channels then the normalized cell center.
    pub img_features: Tensor,
    pub ego_features: Vec<f64>,
    /// Anchor trajectory selected by the command (ego frame), one waypoint per PLAN_Q.
    pub plan_anchor: Vec<Point>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn positions_of(&self, seg: Segment) -> Vec<usize> {
        self.layout.range(seg).collect()
    }

    /// Number of non-pad text tokens (BOS..=EOS).
    pub fn text_len(&self) -> usize {
        self.text_ids.iter().take_while(|&&i| i != PAD).count()
    }
}

/// Ego features: speed, accel, heading (cos, sin), normalized position, yaw rate, command one-hot.
pub const EGO_FEATURES: usize = 10;

pub fn ego_features(ego: &EgoState, cfg: &WorldConfig) -> Vec<f64> {
    let (_, v_hi) = cfg.speed_range();
    let mut f = vec![
        ego.speed / v_hi,
        ego.accel,
        libm::cos(ego.heading),
        libm::sin(ego.heading),
        ego.x / cfg.world_extent,
        ego.y / cfg.world_extent,
        ego.yaw_rate,
        0.0,
        0.0,
        0.0,
    ];
    f[7 + ego.command.index()] = 1.0;
    f
}

pub fn img_feature_width(cfg: &WorldConfig) -> usize {
    cfg.grid_c + 2
}

/// Builds the unified sequence for one scene.
pub fn assemble_sequence(
    grid: &GridFeatures,
    layout: &SequenceLayout,
    scene: &SceneSample,
    caption_ids: &[u32],
    anchors: &AnchorSet,
    cfg: &WorldConfig,
) -> Result<TokenSequence> {
    layout.validate()?;
    if layout.n_img != grid.n_cells() {
        return Err(Error::Shape(format!("layout has {} IMG tokens but grid has {} cells", layout.n_img, grid.n_cells())));
    }
    if caption_ids.len() > layout.n_text_max {
        return Err(Error::CaptionOverflow { len: caption_ids.len(), max: layout.n_text_max });
    }
    let anchor = anchors.for_command(scene.ego.command);
    if layout.n_plan > 0 && anchor.len() != layout.n_plan {
        return Err(Error::Shape(format!("anchor has {} waypoints, layout expects {}", anchor.len(), layout.n_plan)));
    }
    let pose = scene.ego.pose();
    let total = layout.total_len();
    let mut roles = Vec::with_capacity(total);
    let mut ref_points = Vec::with_capacity(total);
    for &seg in &layout.order {
        for i in 0..layout.count(seg) {
            roles.push(seg);
            ref_points.push(match seg {
                Segment::Img => Some(RefPoint::Fixed(grid.cell_centers[i])),
                Segment::DetQ => Some(RefPoint::DetAnchor(i)),
                Segment::LaneQ => Some(RefPoint::LaneAnchor(i)),
                Segment::Ego => Some(RefPoint::Fixed([scene.ego.x, scene.ego.y])),
                Segment::PlanQ => Some(RefPoint::Fixed(pose.to_world(anchor[i]))),
                Segment::Text => None,
            });
        }
    }
    let mut text_ids = caption_ids.to_vec();
    text_ids.resize(layout.n_text_max, PAD);

    let width = grid.channels + 2;
    let mut img = Tensor::zeros(grid.n_cells(), width);
    for cell in 0..grid.n_cells() {
        let row = img.row_mut(cell);
        row[..grid.channels].copy_from_slice(&grid.cell_features(cell));
        row[grid.channels] = grid.cell_centers[cell][0] / cfg.world_extent;
        row[grid.channels + 1] = grid.cell_centers[cell][1] / cfg.world_extent;
    }

    Ok(TokenSequence {
        layout: layout.clone(),
        roles,
        rotary_pos: (0..total).collect(),
        ref_points,
        text_ids,
        img_features: img,
        ego_features: ego_features(&scene.ego, cfg),
        plan_anchor: if layout.n_plan > 0 { anchor.to_vec() } else { Vec::new() },
    })
}

/// Plain lower-triangular causal mask, independent of roles.
pub fn build_backbone_mask(seq: &TokenSequence) -> MaskSpec {
    AttnMask::causal(seq.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum GroupMode {
    /// One bidirectional block over DET_Q and LANE_Q together.
    #[default]
    Joint,
    /// Separate DET_Q and LANE_Q blocks.
    PerGroup,
}

/// Bidirectional mask over the perception queries; every other row and column is false.
pub fn build_group_mask(seq: &TokenSequence, mode: GroupMode) -> MaskSpec {
    let n = seq.len();
    let mut allowed = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (seq.roles[i], seq.roles[j]);
            allowed[i * n + j] = a.is_perception()
                && b.is_perception()
                && match mode {
                    GroupMode::Joint => true,
                    GroupMode::PerGroup => a == b,
                };
        }
    }
    AttnMask { n, allowed }
}
