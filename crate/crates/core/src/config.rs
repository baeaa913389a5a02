//! Run configuration shared by every command. Sections are flat groups of
//! scalar keys so the whole thing maps onto a simple key=value text file;
//! every field has a default.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::error::{Error, Result};
use crate::eval::{
    EvalOptions, StratifyMode, DEFAULT_FP_BUDGET, DEFAULT_IOU_MIN, DEFAULT_THRESHOLD_STEPS,
};
use crate::optim::RmspropConfig;
use crate::segnet::{UNetConfig, UpsampleMode};
use crate::synth::{SynthConfig, DEFAULT_VOXEL_VOLUME_MM3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub upsample: UpsampleMode,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let u = UNetConfig::default();
        Self {
            levels: u.levels,
            channels: u.channels,
            in_channels: u.in_channels,
            out_channels: u.out_channels,
            upsample: u.upsample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    /// RMSprop rate for Euclidean parameters.
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Step size of Riemannian descent for BiMap weights.
    pub stiefel_lr: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let r = RmspropConfig::default();
        Self {
            lr: r.lr,
            alpha: r.alpha,
            eps: r.eps,
            stiefel_lr: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct DataSection {
    /// The last `holdout` cases of a dataset are used for evaluation only.
    pub holdout: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_cases: usize,
    pub prevalence: f64,
    pub size_mix: [f64; 3],
    pub shape: [usize; 3],
    pub max_lesions: usize,
    pub voxel_volume_mm3: f64,
    pub contrast: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_cases: s.n_cases,
            prevalence: s.prevalence,
            size_mix: s.size_mix,
            shape: s.shape,
            max_lesions: s.max_lesions,
            voxel_volume_mm3: DEFAULT_VOXEL_VOLUME_MM3,
            contrast: s.contrast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold_steps: usize,
    pub iou_min: f64,
    pub fp_budget: f64,
    pub stratify: StratifyMode,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            threshold_steps: DEFAULT_THRESHOLD_STEPS,
            iou_min: DEFAULT_IOU_MIN,
            fp_budget: DEFAULT_FP_BUDGET,
            stratify: StratifyMode::Percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Disable every choice not stated by the original method description:
    /// no ReLU inside the attention bottleneck, plain (non-isometric)
    /// vectorization, and fixed mm³ size classes.
    pub strict_paper: bool,
    pub network: NetworkSection,
    pub attention: AttentionConfig,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub synth: SynthSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Applies `strict_paper`; idempotent.
    pub fn resolved(mut self) -> Self {
        if self.strict_paper {
            self.attention = self.attention.strict_paper();
            self.eval.stratify = StratifyMode::Fixed;
        }
        self
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            levels: self.network.levels,
            channels: self.network.channels.clone(),
            in_channels: self.network.in_channels,
            out_channels: self.network.out_channels,
            attention: self.attention.clone(),
            upsample: self.network.upsample,
        }
    }

    pub fn rmsprop(&self) -> RmspropConfig {
        RmspropConfig {
            lr: self.optim.lr,
            alpha: self.optim.alpha,
            eps: self.optim.eps,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_cases: self.synth.n_cases,
            prevalence: self.synth.prevalence,
            size_mix: self.synth.size_mix,
            shape: self.synth.shape,
            max_lesions: self.synth.max_lesions,
            voxel_volume_mm3: self.synth.voxel_volume_mm3,
            seed: self.seed,
            contrast: self.synth.contrast,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            threshold_steps: self.eval.threshold_steps,
            iou_min: self.eval.iou_min,
            fp_budget: self.eval.fp_budget,
            stratify: self.eval.stratify,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet().validate()?;
        self.synth_config().validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.stiefel_lr >= 0.0 && (0.0..1.0).contains(&o.alpha) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.eval.threshold_steps < 2 {
            return Err(Error::Config("threshold_steps must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
