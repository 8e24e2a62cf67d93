use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::AlignConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::pfu::PfuConfig;
use crate::sgtm::SgtmConfig;
use crate::skeleton::SgtConfig;
use crate::visual::VisualConfig;

/// Which encoder carries the identity at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Images at test time; the skeleton encoder is the frozen helper.
    Video,
    /// Skeletons at test time; the visual encoder is the frozen helper.
    Skeleton,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalFeature {
    /// Mean of the aggregated temporal-model tokens.
    Sgtm,
    /// Mean of the visual encoder tokens.
    Visual,
}

/// Linear warmup from `start` to `peak` over `warmup_epochs`, then
/// multiplication by `factor` at each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_epochs: usize,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            start: 5e-7,
            peak: 5e-6,
            warmup_epochs: 10,
            factor: 0.1,
            milestones: vec![30, 50, 70],
        }
    }
}

/// Rounds to 15 significant digits so that schedule values print as the
/// decimal literals they denote.
fn tidy(x: f64) -> f64 {
    format!("{x:.14e}").parse().expect("formatted float parses")
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start >= 0.0 && self.peak > 0.0 && self.factor > 0.0) {
            return Err(Error::Config("learning rates and decay factor must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("milestones {:?} must be strictly increasing", self.milestones)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = if epoch < self.warmup_epochs {
            self.start + (self.peak - self.start) * epoch as f64 / self.warmup_epochs as f64
        } else {
            self.peak
        };
        let decays = self.milestones.iter().filter(|&&m| epoch >= m).count();
        tidy(base * self.factor.powi(decays as i32))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub skeleton: SgtConfig,
    pub align: AlignConfig,
    pub pfu: PfuConfig,
    pub sgtm: SgtmConfig,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    /// Identities per batch.
    pub p: usize,
    /// Tracklets per identity per batch.
    pub k: usize,
    pub mode: TrainMode,
    pub lr: LrSchedule,
    /// Epochs of skeleton self-training run before alignment; 0 skips it.
    pub sgt_epochs: usize,
    pub sgt_lr: LrSchedule,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 20,
            p: 4,
            k: 4,
            mode: TrainMode::Video,
            lr: LrSchedule::default(),
            sgt_epochs: 0,
            sgt_lr: LrSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    pub mode: TrainMode,
    pub lr: LrSchedule,
    /// Weight of the prototype classification loss.
    pub lambda_csip: f64,
    /// Weight of the frame-level loss.
    pub lambda_frame: f64,
    pub margin: f64,
    pub smoothing: f64,
    /// Prototype classification loss on or off.
    pub use_pfu: bool,
    /// Fuse skeleton prototypes into the visual ones; otherwise the visual
    /// prototypes are used alone.
    pub use_fusion: bool,
    pub use_pfu_update: bool,
    pub use_sgtm: bool,
    pub retrieval_feature: RetrievalFeature,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 20,
            p: 4,
            k: 4,
            mode: TrainMode::Video,
            lr: LrSchedule::default(),
            lambda_csip: 1.0,
            lambda_frame: 1.3,
            margin: 0.3,
            smoothing: 0.1,
            use_pfu: true,
            use_fusion: true,
            use_pfu_update: true,
            use_sgtm: true,
            retrieval_feature: RetrievalFeature::Sgtm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub exclude_same_camera: bool,
    /// L2-normalise features before Euclidean ranking.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { exclude_same_camera: true, normalize: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Settings sized for a desktop CPU: the default schedule shape with
    /// learning rates raised for training from scratch in few epochs.
    pub fn desk() -> Self {
        let fast = |peak: f64| LrSchedule {
            start: peak / 10.0,
            peak,
            warmup_epochs: 2,
            factor: 0.1,
            milestones: vec![],
        };
        let mut cfg = PipelineConfig::default();
        cfg.stage1.lr = fast(1e-3);
        cfg.stage1.k = 2;
        cfg.stage1.sgt_lr = fast(1e-3);
        cfg.stage2.lr = fast(1e-3);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.visual.validate()?;
        self.model.skeleton.validate()?;
        if self.model.visual.dim != self.model.skeleton.dim {
            return Err(Error::Config(format!(
                "model.visual.dim = {} and model.skeleton.dim = {} must agree",
                self.model.visual.dim, self.model.skeleton.dim
            )));
        }
        if self.model.align.tau <= 0.0 {
            return Err(Error::Config("model.align.tau must be positive".into()));
        }
        if (self.data.height, self.data.width) != (self.model.visual.height, self.model.visual.width) {
            return Err(Error::Config(format!(
                "data images are {}x{} but the visual encoder expects {}x{}",
                self.data.height, self.data.width, self.model.visual.height, self.model.visual.width
            )));
        }
        for (name, s) in [("stage1.lr", &self.stage1.lr), ("stage1.sgt_lr", &self.stage1.sgt_lr), ("stage2.lr", &self.stage2.lr)] {
            s.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        let s2 = &self.stage2;
        if s2.lambda_csip < 0.0 || s2.lambda_frame < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.stage1.p < 2 || self.stage1.k < 2 || s2.p < 2 || s2.k < 2 {
            return Err(Error::Config("PK sampling needs p >= 2 and k >= 2".into()));
        }
        if !(0.0..1.0).contains(&s2.smoothing) {
            return Err(Error::Config(format!("stage2.smoothing = {} outside [0, 1)", s2.smoothing)));
        }
        if s2.mode == TrainMode::Skeleton && s2.use_sgtm {
            return Err(Error::Config("the temporal model needs images; set stage2.use_sgtm=false in skeleton mode".into()));
        }
        if s2.mode != self.stage1.mode {
            return Err(Error::Config("stage1.mode and stage2.mode must agree".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(path, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` with a dotted key such as `stage2.use_sgtm`.
    /// Values parse as JSON when possible and as strings otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }
}
