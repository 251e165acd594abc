//! The JSON run configuration: sections `data`, `fcn`, `rnn`, `pipeline`,
//! `training`, `metrics` plus a top-level `seed`. Unknown keys are rejected
//! for typo safety; every field has a documented default and the full
//! effective configuration is echoed into the run manifest.

use std::path::PathBuf;

use ansg_core::data::PhantomConfig;
use ansg_core::fcn::{FusionMode, KUNetConfig, UNetConfig};
use ansg_core::pipeline::{InferencePath, PipelineConfig, SequenceMode};
use ansg_core::recurrent::BdcLstmStackConfig;
use ansg_core::tensor::Padding;
use ansg_core::training::{
    LrSchedule, OptimizerHyper, OptimizerKind, TrainConfig, TrainMode, WeightMapParams,
};
use ansg_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub fcn: FcnSection,
    pub rnn: RnnSection,
    pub pipeline: PipelineSection,
    pub training: TrainingSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataSection::default(),
            fcn: FcnSection::default(),
            rnn: RnnSection::default(),
            pipeline: PipelineSection::default(),
            training: TrainingSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DataSection {
    /// Stack used for training; synthesized from `phantom` when absent.
    pub train_stack: Option<PathBuf>,
    /// Stack used for evaluation/inference when no explicit path is given.
    pub eval_stack: Option<PathBuf>,
    pub phantom: PhantomSection,
}


#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub n_z: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub anisotropy: f64,
    pub tubes: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub noise: f64,
    pub illumination: f64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        PhantomSection {
            n_z: 12,
            n_x: 48,
            n_y: 48,
            anisotropy: 4.0,
            tubes: 3,
            radius_min: 2.5,
            radius_max: 4.5,
            noise: 0.05,
            illumination: 0.15,
        }
    }
}

impl PhantomSection {
    pub fn to_config(&self, seed: u64) -> PhantomConfig {
        PhantomConfig {
            n_z: self.n_z,
            n_x: self.n_x,
            n_y: self.n_y,
            anisotropy: self.anisotropy,
            tubes: self.tubes,
            radius: (self.radius_min, self.radius_max),
            noise: self.noise,
            illumination: self.illumination,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcnSection {
    /// Number of submodules in the multi-scale chain.
    pub k: usize,
    /// Fusion topology: "A", "B", "C" or "D".
    pub fusion: String,
    pub depth: usize,
    pub base_channels: usize,
    pub kernel: usize,
    /// Feature channels handed to the recurrent stack.
    pub out_channels: usize,
}

impl Default for FcnSection {
    fn default() -> Self {
        FcnSection {
            k: 2,
            fusion: "A".into(),
            depth: 2,
            base_channels: 8,
            kernel: 3,
            out_channels: 64,
        }
    }
}

impl FcnSection {
    pub fn to_config(&self) -> Result<KUNetConfig> {
        let fusion = match self.fusion.as_str() {
            "A" | "a" => FusionMode::A,
            "B" | "b" => FusionMode::B,
            "C" | "c" => FusionMode::C,
            "D" | "d" => FusionMode::D,
            other => {
                return Err(Error::Config(format!(
                    "unknown fusion mode `{other}` (expected A, B, C or D)"
                )))
            }
        };
        let unet = UNetConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            kernel: self.kernel,
            padding: Padding::Same,
            out_channels: self.out_channels,
        };
        let mut cfg = KUNetConfig::uniform(self.k, unet);
        cfg.fusion = fusion;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RnnSection {
    /// "full" selects the full-scale 5x5/64-channel stack; "custom" builds
    /// from the fields below.
    pub preset: String,
    /// Hidden channels per direction.
    pub hidden: usize,
    pub kernel: usize,
    /// Channels of the 3x3 tail convolution.
    pub conv_channels: usize,
    /// Stack weight initialization: "uniform" (fixed [-0.02, 0.02]) or
    /// "scaled" (fan-in-scaled, needed at reduced widths). "auto" picks
    /// "uniform" for the full preset and "scaled" otherwise.
    pub init: String,
}

impl Default for RnnSection {
    fn default() -> Self {
        RnnSection {
            preset: "custom".into(),
            hidden: 8,
            kernel: 3,
            conv_channels: 16,
            init: "auto".into(),
        }
    }
}

impl RnnSection {
    pub fn to_config(&self, in_channels: usize) -> Result<BdcLstmStackConfig> {
        match self.preset.as_str() {
            "full" => {
                if in_channels != 64 {
                    return Err(Error::Config(format!(
                        "the full-scale stack expects 64 feature channels, the fcn emits {in_channels}"
                    )));
                }
                Ok(BdcLstmStackConfig::reference())
            }
            "custom" => Ok(BdcLstmStackConfig::with_widths(
                in_channels,
                self.hidden,
                self.kernel,
                self.conv_channels,
            )),
            other => Err(Error::Config(format!(
                "unknown rnn preset `{other}` (expected \"full\" or \"custom\")"
            ))),
        }
    }

    pub fn init_scheme(&self) -> Result<ansg_core::recurrent::InitScheme> {
        use ansg_core::recurrent::InitScheme;
        match self.init.as_str() {
            "uniform" => Ok(InitScheme::Uniform(0.02)),
            "scaled" => Ok(InitScheme::FanInUniform),
            "auto" => Ok(if self.preset == "full" {
                InitScheme::Uniform(0.02)
            } else {
                InitScheme::FanInUniform
            }),
            other => Err(Error::Config(format!(
                "unknown rnn init `{other}` (expected \"uniform\", \"scaled\" or \"auto\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub rho: usize,
    pub tile: usize,
    pub margin: usize,
    /// "window" or "full".
    pub sequence_mode: String,
    pub feature_working: usize,
    pub feature_context: usize,
    /// Inference head: "rnn" (context stack) or "fcn" (per-slice only).
    pub path: String,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            rho: 1,
            tile: 48,
            margin: 14,
            sequence_mode: "window".into(),
            feature_working: 256,
            feature_context: 32,
            path: "rnn".into(),
        }
    }
}

impl PipelineSection {
    pub fn to_config(&self) -> Result<PipelineConfig> {
        let sequence_mode = match self.sequence_mode.as_str() {
            "window" => SequenceMode::Window,
            "full" => SequenceMode::Full,
            other => {
                return Err(Error::Config(format!(
                    "unknown sequence mode `{other}` (expected \"window\" or \"full\")"
                )))
            }
        };
        Ok(PipelineConfig {
            rho: self.rho,
            tile: self.tile,
            margin: self.margin,
            sequence_mode,
            feature_working: self.feature_working,
            feature_context: self.feature_context,
        })
    }

    pub fn inference_path(&self) -> Result<InferencePath> {
        match self.path.as_str() {
            "rnn" => Ok(InferencePath::WithContext),
            "fcn" => Ok(InferencePath::FcnOnly),
            other => Err(Error::Config(format!(
                "unknown inference path `{other}` (expected \"rnn\" or \"fcn\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamSection {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl Default for AdamSection {
    fn default() -> Self {
        AdamSection {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-10,
            lr: 5e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmsPropSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub halve_every: u64,
    pub floor: f64,
}

impl Default for RmsPropSection {
    fn default() -> Self {
        RmsPropSection {
            alpha: 0.9,
            epsilon: 1e-5,
            base_lr: 1e-3,
            halve_every: 2000,
            floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// "fcn_only", "rnn_only" or "end_to_end".
    pub mode: String,
    pub iterations: u64,
    pub fcn_tile: usize,
    pub rnn_tile: usize,
    pub augment: bool,
    pub clip: f64,
    pub checkpoint_every: u64,
    pub w0: f64,
    pub sigma: f64,
    pub class_balance: bool,
    pub adam: AdamSection,
    pub rmsprop: RmsPropSection,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            mode: "fcn_only".into(),
            iterations: 200,
            fcn_tile: 48,
            rnn_tile: 18,
            augment: true,
            clip: 5.0,
            checkpoint_every: 0,
            w0: 10.0,
            sigma: 5.0,
            class_balance: true,
            adam: AdamSection::default(),
            rmsprop: RmsPropSection::default(),
        }
    }
}

pub fn parse_mode(mode: &str) -> Result<TrainMode> {
    match mode {
        "fcn_only" => Ok(TrainMode::FcnOnly),
        "rnn_only" => Ok(TrainMode::RnnOnly),
        "end_to_end" => Ok(TrainMode::EndToEnd),
        other => Err(Error::Config(format!(
            "unknown training mode `{other}` (expected fcn_only, rnn_only or end_to_end)"
        ))),
    }
}

impl TrainingSection {
    pub fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(parse_mode(&self.mode)?, self.iterations, seed);
        cfg.fcn_tile = self.fcn_tile;
        cfg.rnn_tile = self.rnn_tile;
        cfg.augment = self.augment;
        cfg.clip_bound = self.clip;
        cfg.checkpoint_every = self.checkpoint_every;
        cfg.weight_map = WeightMapParams {
            w0: self.w0,
            sigma: self.sigma,
            class_balance: self.class_balance,
        };
        cfg.fcn_opt = OptimizerHyper {
            kind: OptimizerKind::Adam,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            epsilon: self.adam.epsilon,
            alpha: 0.9,
            schedule: LrSchedule::Constant(self.adam.lr),
        };
        cfg.rnn_opt = OptimizerHyper {
            kind: OptimizerKind::RmsProp,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: self.rmsprop.epsilon,
            alpha: self.rmsprop.alpha,
            schedule: LrSchedule::HalveEvery {
                base: self.rmsprop.base_lr,
                every: self.rmsprop.halve_every,
                floor: self.rmsprop.floor,
            },
        };
        cfg.fcn_opt.validate()?;
        cfg.rnn_opt.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Evaluate every n-th slice (1-based multiples); 0 evaluates all.
    pub mask_stride: usize,
    /// Component connectivity: 4 or 8.
    pub connectivity: u8,
    /// Foreground threshold on the probability maps.
    pub threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            mask_stride: 0,
            connectivity: 8,
            threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Feature extractor, recurrent stack and head, registered in one
    /// parameter set.
    pub fn build_model<T: ansg_core::Scalar>(
        &self,
        ps: &mut ansg_core::autograd::ParamSet<T>,
    ) -> Result<ansg_core::pipeline::SegModel> {
        let kunet = self.fcn.to_config()?;
        let stack = self.rnn.to_config(kunet.out_channels())?;
        ansg_core::pipeline::SegModel::init_with_stack_scheme(
            ps,
            kunet,
            stack,
            self.seed,
            self.rnn.init_scheme()?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.pipeline.tile, cfg.pipeline.tile);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{ "seed": 1, "pipeline": { "tiel": 100 } }"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("tiel"), "{err}");
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let text = r#"{ "seed": 7 }"#;
        let cfg: RunConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fcn.k, 2);
        assert_eq!(cfg.training.adam.lr, 5e-5);
    }

    #[test]
    fn full_preset_requires_64_channels() {
        let mut cfg = RunConfig::default();
        cfg.rnn.preset = "full".into();
        assert!(cfg.rnn.to_config(64).is_ok());
        assert!(cfg.rnn.to_config(16).is_err());
    }
}
