//! Experiment configuration: one TOML file, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unidec_core::decoder::{DecoderConfig, TaskShape};
use unidec_core::eval::EvalConfig;
use unidec_core::heads::LossConfig;
use unidec_core::scene::{caption_scene, generate_scene, WorldConfig};
use unidec_core::tokens::{build_vocab, SequenceLayout, TokenOrder, Vocab};
use unidec_core::trainer::{InitSource, OptimConfig, Stage, StageConfig, TransferPolicy};

use crate::error::{CliError, CliResult};

/// Query counts and segment order; IMG and PLAN lengths follow from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutConfig {
    pub order: TokenOrder,
    pub n_det: usize,
    pub n_lane: usize,
    pub n_text_max: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self { order: TokenOrder::DetLanePlan, n_det: 5, n_lane: 3, n_text_max: 12 }
    }
}

/// Split sizes and base seeds. Split `s` uses seeds `[s_seed, s_seed + n_s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub test_seed: u64,
    /// Read splits written by `gen-data` from here instead of regenerating them.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_train: 64, n_val: 16, n_test: 16, train_seed: 0, val_seed: 10_000, test_seed: 20_000, dir: None }
    }
}

impl DataConfig {
    pub fn ranges(&self) -> [(&'static str, u64, usize); 3] {
        [("train", self.train_seed, self.n_train), ("val", self.val_seed, self.n_val), ("test", self.test_seed, self.n_test)]
    }
}

/// Captioning corpus and budget for the toy vision-language source model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_scenes: usize,
    pub base_seed: u64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_scenes: 256,
            base_seed: 100_000,
            optim: OptimConfig { steps: 1500, lr: 2e-3, batch_size: 8, seed: 7, ..OptimConfig::default() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub n_runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { n_runs: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Lifts the stage-ordering rule so single stages or reorderings can run.
    pub ablation: bool,
    /// Which source weights a pretrained checkpoint contributes to a fresh model.
    pub transfer: TransferPolicy,
    pub world: WorldConfig,
    pub model: DecoderConfig,
    pub layout: LayoutConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub loss: LossConfig,
    pub stages: Vec<StageConfig>,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            ablation: false,
            transfer: TransferPolicy { attn: InitSource::Pretrained, ffn: InitSource::Random },
            world: WorldConfig::default(),
            model: DecoderConfig::default(),
            layout: LayoutConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            loss: LossConfig::default(),
            stages: Stage::ALL.iter().map(|&s| StageConfig::new(s)).collect(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Format { what: "config", msg: e.to_string() })
    }

    pub fn vocab(&self) -> CliResult<Vocab> {
        Ok(build_vocab(&unidec_core::scene::caption_vocabulary())?)
    }

    pub fn sequence_layout(&self) -> SequenceLayout {
        let (h, w) = self.world.grid_hw;
        let l = &self.layout;
        SequenceLayout::new(l.order, h * w, l.n_det, l.n_lane, self.world.horizon_t, l.n_text_max)
    }

    /// Layout of the captioning corpus: image tokens then text, no queries.
    pub fn caption_layout(&self) -> SequenceLayout {
        let (h, w) = self.world.grid_hw;
        SequenceLayout::vision_language(h * w, self.layout.n_text_max)
    }

    pub fn task_shape(&self) -> CliResult<TaskShape> {
        Ok(TaskShape::new(&self.world, &self.sequence_layout(), self.vocab()?.len()))
    }

    /// Checks every module's preconditions before any work starts.
    pub fn validate(&self) -> CliResult<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.sequence_layout().validate()?;
        let l = &self.layout;
        if l.n_det < self.world.n_objects_range.1 {
            return bad(format!("n_det {} cannot cover up to {} objects", l.n_det, self.world.n_objects_range.1));
        }
        if l.n_lane < self.world.n_lanes_range.1 {
            return bad(format!("n_lane {} cannot cover up to {} lanes", l.n_lane, self.world.n_lanes_range.1));
        }
        // Captions share one template, so any scene gives the token count.
        let probe = caption_scene(&generate_scene(0, &self.world)?).len() + 2;
        if l.n_text_max < probe {
            return bad(format!("n_text_max {} is below the caption length {probe}", l.n_text_max));
        }
        self.check_seed_ranges()?;
        if self.data.n_train == 0 {
            return bad("n_train must be > 0");
        }
        self.pretrain.optim.validate()?;
        if self.stages.is_empty() {
            return bad("no stages configured");
        }
        for s in &self.stages {
            s.validate()?;
            if let Some(spec) = &s.lora {
                if spec.rank == 0 || spec.rank > self.model.d_model {
                    return bad(format!("lora rank {} outside 1..={}", spec.rank, self.model.d_model));
                }
            }
        }
        if !self.ablation {
            let order: Vec<Stage> = self.stages.iter().map(|s| s.stage).collect();
            if order != Stage::ALL {
                let names: Vec<_> = order.iter().map(|s| s.name()).collect();
                return bad(format!(
                    "stages must run PRETRAIN_PERC_LANG, PLAN_ADAPT, JOINT in order (got {names:?}); set ablation = true for partial or reordered pipelines"
                ));
            }
        }
        if !(self.eval.ego_radius > 0.0 && self.eval.match_radius > 0.0) {
            return bad("eval radii must be > 0");
        }
        if let Some(h) = &self.eval.horizons {
            if let Some(&k) = h.iter().find(|&&k| k >= self.world.horizon_t) {
                return bad(format!("eval horizon index {k} beyond horizon_t {}", self.world.horizon_t));
            }
        }
        if self.bench.n_runs < crate::bench::MIN_RUNS {
            return bad(format!("bench.n_runs must be >= {}", crate::bench::MIN_RUNS));
        }
        Ok(())
    }

    /// Splits and the captioning corpus must draw from disjoint seed ranges.
    pub fn check_seed_ranges(&self) -> CliResult<()> {
        let mut ranges: Vec<(&str, u64, usize)> = self.data.ranges().to_vec();
        ranges.push(("pretrain", self.pretrain.base_seed, self.pretrain.n_scenes));
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.2 > 0 && b.2 > 0 && a.1 < b.1 + b.2 as u64 && b.1 < a.1 + a.2 as u64 {
                    return bad(format!(
                        "seed ranges overlap: {} [{}, {}) and {} [{}, {})",
                        a.0,
                        a.1,
                        a.1 + a.2 as u64,
                        b.0,
                        b.1,
                        b.1 + b.2 as u64
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage == stage)
    }
}
