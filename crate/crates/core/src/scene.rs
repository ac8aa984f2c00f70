//! Deterministic synthetic driving scenes.
//!
//! A scene is a square world holding oriented object boxes, straight lane polylines and
//! an ego vehicle. A rule-based planner produces a collision-free ground-truth
//! trajectory in the ego frame, and a fixed template produces a caption. Everything is a
//! pure function of `(seed, WorldConfig)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{point_polyline_distance, wrap_angle, OrientedBox, Point, Pose};
use crate::metrics::disc_hits_any;

/// Placement attempts per object before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Curvature magnitude applied for LEFT/RIGHT commands.
pub const TURN_CURVATURE: f64 = 0.1;
/// Lateral half-width of the slowdown corridor ahead of the ego.
pub const CORRIDOR_HALF_WIDTH: f64 = 1.5;
/// Extra gap kept before a blocking object when stopping.
pub const STOP_MARGIN: f64 = 0.3;
/// Clearance between the ego start disc and any object.
pub const START_CLEARANCE: f64 = 0.5;
pub const MIN_OBJECT_SIZE: f64 = 0.8;
pub const MAX_OBJECT_SIZE: f64 = 2.6;
pub const MAX_OBJECT_SPEED: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "UPPERCASE"))]
pub enum Command {
    Left,
    Straight,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Left, Command::Straight, Command::Right];

    pub fn index(self) -> usize {
        match self {
            Command::Left => 0,
            Command::Straight => 1,
            Command::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Signed path curvature; left is +y.
    pub fn curvature(self) -> f64 {
        match self {
            Command::Left => TURN_CURVATURE,
            Command::Straight => 0.0,
            Command::Right => -TURN_CURVATURE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct WorldConfig {
    /// Half-width of the square world.
    pub world_extent: f64,
    pub n_objects_range: (usize, usize),
    pub n_lanes_range: (usize, usize),
    pub horizon_t: usize,
    pub dt: f64,
    /// Raster height and width in cells.
    pub grid_hw: (usize, usize),
    pub grid_c: usize,
    /// Points per lane polyline.
    pub lane_points: usize,
    pub n_classes: usize,
    /// Ego footprint radius used by the collision predicate.
    pub ego_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            world_extent: 8.0,
            n_objects_range: (0, 4),
            n_lanes_range: (1, 3),
            horizon_t: 6,
            dt: 0.5,
            grid_hw: (8, 8),
            grid_c: 13,
            lane_points: 8,
            n_classes: 3,
            ego_radius: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.world_extent > 0.0) {
            return bad(format!("world_extent must be > 0, got {}", self.world_extent));
        }
        if self.n_objects_range.0 > self.n_objects_range.1 {
            return bad("n_objects_range min exceeds max".to_string());
        }
        if self.n_lanes_range.0 > self.n_lanes_range.1 {
            return bad("n_lanes_range min exceeds max".to_string());
        }
        if self.horizon_t < 1 {
            return bad("horizon_t must be >= 1".to_string());
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0".to_string());
        }
        if self.grid_hw.0 < 4 || self.grid_hw.1 < 4 {
            return bad(format!("grid dims must be >= 4, got {:?}", self.grid_hw));
        }
        if self.grid_c < 3 {
            return bad(format!("grid_c must be >= 3, got {}", self.grid_c));
        }
        if self.lane_points < 2 {
            return bad("lane_points must be >= 2".to_string());
        }
        if self.n_classes < 1 {
            return bad("n_classes must be >= 1".to_string());
        }
        if !(self.ego_radius > 0.0) {
            return bad("ego_radius must be > 0".to_string());
        }
        Ok(())
    }

    /// Ego speed range; keeps every trajectory well inside the world.
    pub fn speed_range(&self) -> (f64, f64) {
        let horizon_s = self.horizon_t as f64 * self.dt;
        (0.2 * self.world_extent / horizon_s, 0.55 * self.world_extent / horizon_s)
    }

    pub fn cell_size(&self) -> (f64, f64) {
        let w = 2.0 * self.world_extent;
        (w / self.grid_hw.1 as f64, w / self.grid_hw.0 as f64)
    }

    /// Full channel count of the raster layout; channels beyond `grid_c` are dropped.
    pub fn full_channel_count(&self) -> usize {
        channel::CLASS_BASE + self.n_classes
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneObject {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub l: f64,
    pub heading: f64,
    pub class: usize,
    pub speed: f64,
}

impl SceneObject {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox { center: [self.x, self.y], width: self.w, length: self.l, heading: self.heading }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EgoState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    /// Yaw rate implied by the command curvature at the current speed.
    pub yaw_rate: f64,
    pub command: Command,
}

impl EgoState {
    pub fn pose(&self) -> Pose {
        Pose { x: self.x, y: self.y, heading: self.heading }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSample {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub lanes: Vec<Vec<Point>>,
    pub ego: EgoState,
    /// Ego-frame waypoints at `dt` spacing.
    pub gt_trajectory: Vec<Point>,
    pub caption: Vec<String>,
}

impl SceneSample {
    pub fn footprints(&self) -> Vec<OrientedBox> {
        self.objects.iter().map(SceneObject::footprint).collect()
    }

    /// Ground-truth trajectory in the world frame.
    pub fn gt_world(&self) -> Vec<Point> {
        let pose = self.ego.pose();
        self.gt_trajectory.iter().map(|&p| pose.to_world(p)).collect()
    }
}

pub mod channel {
    pub const OCCUPANCY: usize = 0;
    pub const LANE: usize = 1;
    pub const EGO_HEADING: usize = 2;
    /// 1 on the cell holding an object center.
    pub const CENTER: usize = 3;
    /// Sub-cell offset of the center, mapped to [0, 1].
    pub const OFFSET_X: usize = 4;
    pub const OFFSET_Y: usize = 5;
    /// (sin + 1) / 2 and (cos + 1) / 2 of the object heading.
    pub const HEADING_SIN: usize = 6;
    pub const HEADING_COS: usize = 7;
    /// Object extents divided by the maximum size.
    pub const WIDTH: usize = 8;
    pub const LENGTH: usize = 9;
    /// One-hot object class, starting here.
    pub const CLASS_BASE: usize = 10;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major `channels x height x width` values in [0, 1].
    pub raster: Vec<f64>,
    /// Row-major cell centers, one per token.
    pub cell_centers: Vec<Point>,
}

impl GridFeatures {
    #[inline]
    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.raster[(c * self.height + row) * self.width + col]
    }

    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    /// Channel values of one cell (token order is row-major).
    pub fn cell_features(&self, cell: usize) -> Vec<f64> {
        let (row, col) = (cell / self.width, cell % self.width);
        (0..self.channels).map(|c| self.at(c, row, col)).collect()
    }
}

/// Generates one scene; identical `(seed, cfg)` yields an identical sample.
pub fn generate_scene(seed: u64, cfg: &WorldConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.world_extent;
    let (v_lo, v_hi) = cfg.speed_range();
    let command = Command::ALL[rng.random_range(0..3)];
    let speed = rng.random_range(v_lo..=v_hi);
    let ego = EgoState {
        x: rng.random_range(-0.1 * e..=0.1 * e),
        y: rng.random_range(-0.1 * e..=0.1 * e),
        heading: rng.random_range(-0.3..=0.3),
        speed,
        accel: rng.random_range(-0.5..=0.5),
        yaw_rate: command.curvature() * speed,
        command,
    };

    let n_lanes = rng.random_range(cfg.n_lanes_range.0..=cfg.n_lanes_range.1);
    let lanes: Vec<Vec<Point>> = (0..n_lanes).map(|_| sample_lane(&mut rng, cfg)).collect();

    let n_objects = rng.random_range(cfg.n_objects_range.0..=cfg.n_objects_range.1);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    for index in 0..n_objects {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let cand = sample_object(&mut rng, cfg);
            if !placement_ok(&cand, &objects, &ego, cfg) {
                continue;
            }
            objects.push(cand);
            let plan = oracle_plan(&ego, &lanes, &objects, cfg);
            if trajectory_collides(&ego, &plan, &objects, cfg.ego_radius) {
                objects.pop();
                continue;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::PlacementFailed { index, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
    }

    let gt_trajectory = oracle_plan(&ego, &lanes, &objects, cfg);
    let mut sample = SceneSample { seed, objects, lanes, ego, gt_trajectory, caption: Vec::new() };
    sample.caption = caption_scene(&sample);
    Ok(sample)
}

/// Samples `n` scenes with seeds `base_seed..base_seed + n`.
pub fn generate_split(n: usize, base_seed: u64, cfg: &WorldConfig) -> Result<Vec<SceneSample>> {
    (0..n as u64).map(|i| generate_scene(base_seed + i, cfg)).collect()
}

fn sample_lane(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> Vec<Point> {
    let e = cfg.world_extent;
    let angle: f64 = rng.random_range(-0.35..=0.35);
    let offset: f64 = rng.random_range(-0.7 * e..=0.7 * e);
    let dir = [libm::cos(angle), libm::sin(angle)];
    let normal = [-dir[1], dir[0]];
    let origin = [offset * normal[0], offset * normal[1]];
    // Clip the line to the inner box |x|, |y| <= 0.95 e.
    let lim = 0.95 * e;
    let (mut s_lo, mut s_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..2 {
        if libm::fabs(dir[k]) > 1e-12 {
            let a = (-lim - origin[k]) / dir[k];
            let b = (lim - origin[k]) / dir[k];
            s_lo = s_lo.max(a.min(b));
            s_hi = s_hi.min(a.max(b));
        }
    }
    let k = cfg.lane_points;
    (0..k)
        .map(|i| {
            let s = s_lo + (s_hi - s_lo) * i as f64 / (k - 1) as f64;
            [origin[0] + s * dir[0], origin[1] + s * dir[1]]
        })
        .collect()
}

fn sample_object(rng: &mut ChaCha8Rng, cfg: &WorldConfig) -> SceneObject {
    let e = cfg.world_extent;
    SceneObject {
        x: rng.random_range(-0.9 * e..=0.9 * e),
        y: rng.random_range(-0.9 * e..=0.9 * e),
        w: rng.random_range(MIN_OBJECT_SIZE..=1.6),
        l: rng.random_range(1.2..=MAX_OBJECT_SIZE),
        heading: rng.random_range(-PI..PI),
        class: rng.random_range(0..cfg.n_classes),
        speed: rng.random_range(0.0..=MAX_OBJECT_SPEED),
    }
}

fn placement_ok(cand: &SceneObject, others: &[SceneObject], ego: &EgoState, cfg: &WorldConfig) -> bool {
    let fp = cand.footprint();
    let e = cfg.world_extent;
    if fp.corners().iter().any(|c| libm::fabs(c[0]) > e || libm::fabs(c[1]) > e) {
        return false;
    }
    if fp.distance([ego.x, ego.y]) <= cfg.ego_radius + START_CLEARANCE {
        return false;
    }
    others.iter().all(|o| {
        let ofp = o.footprint();
        libm::hypot(o.x - cand.x, o.y - cand.y) > ofp.half_diagonal() + fp.half_diagonal()
    })
}

fn trajectory_collides(ego: &EgoState, plan: &[Point], objects: &[SceneObject], radius: f64) -> bool {
    let pose = ego.pose();
    let boxes: Vec<OrientedBox> = objects.iter().map(SceneObject::footprint).collect();
    plan.iter().any(|&p| disc_hits_any(pose.to_world(p), radius, &boxes))
}

/// Direction of the lane nearest to the ego, relative to the ego heading and folded
/// into `[-pi/2, pi/2]`; zero without lanes.
pub fn nearest_lane_direction(ego: &EgoState, lanes: &[Vec<Point>]) -> f64 {
    let pos = [ego.x, ego.y];
    let mut best: Option<(f64, f64)> = None;
    for lane in lanes {
        for w in lane.windows(2) {
            let d = crate::geometry::point_segment_distance(pos, w[0], w[1]);
            if best.map_or(true, |(bd, _)| d < bd) {
                let dir = libm::atan2(w[1][1] - w[0][1], w[1][0] - w[0][0]);
                best = Some((d, dir));
            }
        }
    }
    let Some((_, dir)) = best else { return 0.0 };
    let mut rel = wrap_angle(dir - ego.heading);
    if rel > PI / 2.0 {
        rel -= PI;
    } else if rel < -PI / 2.0 {
        rel += PI;
    }
    rel
}

/// Rule-based planner: follow the nearest lane direction at constant speed, bend by the
/// command curvature, and decelerate linearly to a stop when an object sits in the
/// corridor ahead. Returns `horizon_t` ego-frame waypoints.
pub fn oracle_plan(ego: &EgoState, lanes: &[Vec<Point>], objects: &[SceneObject], cfg: &WorldConfig) -> Vec<Point> {
    let t = cfg.horizon_t;
    let base_step = ego.speed * cfg.dt;
    let nominal = base_step * t as f64;
    let pose = ego.pose();

    let mut blocking = f64::INFINITY;
    for o in objects {
        let c = pose.to_local([o.x, o.y]);
        let r = o.footprint().half_diagonal();
        if c[0] > 0.0 && c[0] - r <= nominal + 2.0 && libm::fabs(c[1]) <= CORRIDOR_HALF_WIDTH + r {
            blocking = blocking.min(c[0] - r);
        }
    }

    let steps: Vec<f64> = if blocking.is_finite() {
        // Speed falls linearly and would reach zero one step past the horizon.
        let shape: Vec<f64> = (1..=t).map(|k| (t + 1 - k) as f64 / (t + 1) as f64).collect();
        let full: f64 = shape.iter().sum::<f64>() * base_step;
        let free = blocking - cfg.ego_radius - STOP_MARGIN;
        let scale = if free >= full { 1.0 } else { f64::max(free, 0.02 * full) / full };
        shape.iter().map(|s| s * base_step * scale).collect()
    } else {
        alloc::vec![base_step; t]
    };

    let delta = nearest_lane_direction(ego, lanes);
    let kappa = ego.command.curvature();
    let mut out = Vec::with_capacity(t);
    let (mut x, mut y, mut s) = (0.0, 0.0, 0.0);
    for step in steps {
        let psi = delta + kappa * (s + step / 2.0);
        x += step * libm::cos(psi);
        y += step * libm::sin(psi);
        s += step;
        out.push([x, y]);
    }
    out
}

/// Rasterizes the scene onto the `grid_hw` lattice.
pub fn rasterize(scene: &SceneSample, cfg: &WorldConfig) -> GridFeatures {
    let (h, w) = cfg.grid_hw;
    let c = cfg.grid_c;
    let e = cfg.world_extent;
    let (cw, ch) = cfg.cell_size();
    let half_cell = f64::min(cw, ch) / 2.0;
    let mut raster = alloc::vec![0.0; c * h * w];
    let mut cell_centers = Vec::with_capacity(h * w);
    let boxes = scene.footprints();
    let heading_val = (libm::cos(scene.ego.heading) + 1.0) / 2.0;
    let mut put = |ch_idx: usize, row: usize, col: usize, v: f64| {
        if ch_idx < c {
            raster[(ch_idx * h + row) * w + col] = v;
        }
    };
    for row in 0..h {
        for col in 0..w {
            let p = [-e + (col as f64 + 0.5) * cw, -e + (row as f64 + 0.5) * ch];
            cell_centers.push(p);
            if boxes.iter().any(|b| b.contains(p)) {
                put(channel::OCCUPANCY, row, col, 1.0);
            }
            if scene.lanes.iter().any(|l| point_polyline_distance(p, l) <= half_cell) {
                put(channel::LANE, row, col, 1.0);
            }
            put(channel::EGO_HEADING, row, col, heading_val);
        }
    }
    for o in &scene.objects {
        let col = (((o.x + e) / cw) as usize).min(w - 1);
        let row = (((o.y + e) / ch) as usize).min(h - 1);
        let center = cell_centers[row * w + col];
        put(channel::CENTER, row, col, 1.0);
        put(channel::OFFSET_X, row, col, ((o.x - center[0]) / cw + 0.5).clamp(0.0, 1.0));
        put(channel::OFFSET_Y, row, col, ((o.y - center[1]) / ch + 0.5).clamp(0.0, 1.0));
        put(channel::HEADING_SIN, row, col, (libm::sin(o.heading) + 1.0) / 2.0);
        put(channel::HEADING_COS, row, col, (libm::cos(o.heading) + 1.0) / 2.0);
        put(channel::WIDTH, row, col, o.w / MAX_OBJECT_SIZE);
        put(channel::LENGTH, row, col, o.l / MAX_OBJECT_SIZE);
        put(channel::CLASS_BASE + o.class, row, col, 1.0);
    }
    GridFeatures { channels: c, height: h, width: w, raster, cell_centers }
}

const COUNT_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Every word a caption can contain.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut words = alloc::vec!["there", "are", "objects", "ahead", "ego", "goes", "turns", "straight", "left", "right", "many"];
    words.extend_from_slice(&COUNT_WORDS);
    words
}

/// Template caption: "there are <N> objects ahead ego <goes straight | turns left | turns right>".
pub fn caption_scene(scene: &SceneSample) -> Vec<String> {
    let pose = scene.ego.pose();
    let ahead = scene.objects.iter().filter(|o| pose.to_local([o.x, o.y])[0] > 0.0).count();
    let count = COUNT_WORDS.get(ahead).copied().unwrap_or("many");
    let (verb, dir) = match scene.ego.command {
        Command::Left => ("turns", "left"),
        Command::Straight => ("goes", "straight"),
        Command::Right => ("turns", "right"),
    };
    ["there", "are", count, "objects", "ahead", "ego", verb, dir].iter().map(|w| w.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::collision_rate;
    use alloc::vec;

    fn bare_ego(command: Command, speed: f64) -> EgoState {
        EgoState { x: 0.0, y: 0.0, heading: 0.0, speed, accel: 0.0, yaw_rate: 0.0, command }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = WorldConfig::default();
        assert_eq!(generate_scene(7, &cfg).unwrap(), generate_scene(7, &cfg).unwrap());
        assert_ne!(generate_scene(7, &cfg).unwrap(), generate_scene(8, &cfg).unwrap());
    }

    #[test]
    fn zero_object_range_gives_empty_scene() {
        let cfg = WorldConfig { n_objects_range: (0, 0), ..WorldConfig::default() };
        assert!(generate_scene(1, &cfg).unwrap().objects.is_empty());
    }

    #[test]
    fn ground_truth_passes_independent_collision_check() {
        let cfg = WorldConfig::default();
        let s = generate_scene(3, &cfg).unwrap();
        let all: Vec<usize> = (0..cfg.horizon_t).collect();
        let rate = collision_rate(&[(s.gt_world(), s.footprints())], cfg.ego_radius, &all).unwrap();
        assert_eq!(rate.collision_avg, 0.0);
    }

    #[test]
    fn over_dense_config_fails_placement() {
        let cfg = WorldConfig { world_extent: 2.0, n_objects_range: (30, 30), ..WorldConfig::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(Error::PlacementFailed { .. })));
    }

    #[test]
    fn empty_scene_straight_is_constant_speed_line() {
        let cfg = WorldConfig::default();
        let v = 1.3;
        let plan = oracle_plan(&bare_ego(Command::Straight, v), &[], &[], &cfg);
        assert_eq!(plan.len(), cfg.horizon_t);
        for (k, p) in plan.iter().enumerate() {
            assert!((p[0] - (k + 1) as f64 * v * cfg.dt).abs() < 1e-12);
            assert_eq!(p[1], 0.0);
        }
    }

    #[test]
    fn left_command_strictly_increases_y() {
        let cfg = WorldConfig::default();
        let plan = oracle_plan(&bare_ego(Command::Left, 1.2), &[], &[], &cfg);
        assert!(plan[0][1] > 0.0);
        assert!(plan.windows(2).all(|w| w[1][1] > w[0][1]));
    }

    #[test]
    fn object_ahead_makes_spacing_strictly_decrease() {
        let cfg = WorldConfig::default();
        let obstacle = SceneObject { x: 3.0, y: 0.0, w: 1.0, l: 1.0, heading: 0.0, class: 0, speed: 0.0 };
        let plan = oracle_plan(&bare_ego(Command::Straight, 1.2), &[], &[obstacle], &cfg);
        let mut prev = [0.0, 0.0];
        let spacing: Vec<f64> = plan
            .iter()
            .map(|p| {
                let d = crate::geometry::dist(*p, prev);
                prev = *p;
                d
            })
            .collect();
        assert!(spacing.windows(2).all(|w| w[1] < w[0]), "{spacing:?}");
    }

    fn scene_with(objects: Vec<SceneObject>, lanes: Vec<Vec<Point>>) -> SceneSample {
        let cfg = WorldConfig::default();
        let ego = bare_ego(Command::Straight, 1.0);
        let gt = oracle_plan(&ego, &lanes, &objects, &cfg);
        let mut s = SceneSample { seed: 0, objects, lanes, ego, gt_trajectory: gt, caption: vec![] };
        s.caption = caption_scene(&s);
        s
    }

    #[test]
    fn empty_scene_has_no_occupancy() {
        let cfg = WorldConfig::default();
        let g = rasterize(&scene_with(vec![], vec![]), &cfg);
        assert!((0..8).all(|r| (0..8).all(|c| g.at(channel::OCCUPANCY, r, c) == 0.0)));
    }

    #[test]
    fn small_box_marks_exactly_its_cell() {
        let cfg = WorldConfig::default();
        // Cell (row 5, col 6) has center (5, 3) on the default 8x8 lattice over [-8, 8].
        let o = SceneObject { x: 5.0, y: 3.0, w: 0.5, l: 0.5, heading: 0.0, class: 1, speed: 0.0 };
        let g = rasterize(&scene_with(vec![o], vec![]), &cfg);
        for r in 0..8 {
            for c in 0..8 {
                let expected = if (r, c) == (5, 6) { 1.0 } else { 0.0 };
                assert_eq!(g.at(channel::OCCUPANCY, r, c), expected);
            }
        }
        assert_eq!(g.at(channel::CLASS_BASE + 1, 5, 6), 1.0);
    }

    #[test]
    fn straight_lane_lights_the_nearest_row() {
        let cfg = WorldConfig::default();
        let lane: Vec<Point> = (0..8).map(|i| [-7.6 + i as f64 * 15.2 / 7.0, 0.1]).collect();
        let g = rasterize(&scene_with(vec![], vec![lane.clone()]), &cfg);
        // Brute force: half-cell is 1.0; rows at y = +1 (distance 0.9) qualify, y = -1 (1.1) do not.
        for r in 0..8 {
            for c in 0..8 {
                let p = g.cell_centers[r * 8 + c];
                let d = lane
                    .windows(2)
                    .map(|w| crate::geometry::point_segment_distance(p, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min);
                let lit = g.at(channel::LANE, r, c) == 1.0;
                assert_eq!(lit, d <= 1.0);
                assert_eq!(lit, r == 4, "row {r} col {c}");
            }
        }
    }

    #[test]
    fn caption_templates() {
        let s = scene_with(vec![], vec![]);
        assert_eq!(s.caption.join(" "), "there are zero objects ahead ego goes straight");
        let mut s2 = scene_with(vec![], vec![]);
        s2.ego.command = Command::Left;
        s2.objects = vec![
            SceneObject { x: 4.0, y: 2.0, w: 1.0, l: 1.0, heading: 0.0, class: 0, speed: 0.0 },
            SceneObject { x: 5.0, y: -3.0, w: 1.0, l: 1.0, heading: 0.0, class: 0, speed: 0.0 },
        ];
        let c = caption_scene(&s2);
        assert!(c.contains(&"two".to_string()) && c.contains(&"left".to_string()));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = WorldConfig { grid_hw: (3, 8), ..WorldConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = WorldConfig { n_objects_range: (3, 2), ..WorldConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
