//! Browser demo: generate a tubular phantom stack, train the small two-stage
//! model right in the page, and watch per-slice probability maps sharpen.
//!
//! Everything runs single-threaded in wasm; the model is deliberately small
//! (two-scale extractor at base 4, 16 feature channels, 4 hidden channels per
//! direction) so a few hundred training iterations stay interactive.

use ansg_core::autograd::ParamSet;
use ansg_core::data::{generate_phantom, ImageStack, PhantomConfig};
use ansg_core::fcn::{KUNetConfig, UNetConfig};
use ansg_core::pipeline::{
    segment_stack, InferencePath, PipelineConfig, SegModel, SequenceMode,
};
use ansg_core::recurrent::BdcLstmStackConfig;
use ansg_core::tensor::Padding;
use ansg_core::training::{train_loop, TrainConfig, TrainMode, TrainState};
use wasm_bindgen::prelude::*;

fn err(e: ansg_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

struct ModelState {
    model: SegModel,
    state: TrainState<f32>,
    phases: u64,
}

/// The page-side handle: one phantom, one model, one probability stack.
#[wasm_bindgen]
pub struct Demo {
    stack: Option<ImageStack>,
    model: Option<ModelState>,
    probs: Vec<Vec<f32>>,
    seed: u64,
}

impl Default for Demo {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Demo {
        Demo {
            stack: None,
            model: None,
            probs: Vec::new(),
            seed: 42,
        }
    }

    /// Generates a labeled phantom. Extents are clamped to multiples of 8 in
    /// the plane (the extractor's divisibility) and the model is reset.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &mut self,
        extent: usize,
        n_z: usize,
        tubes: usize,
        radius: f64,
        noise: f64,
        illumination: f64,
        anisotropy: f64,
        seed: u64,
    ) -> Result<(), JsError> {
        let extent = (extent.clamp(24, 96) / 8) * 8;
        let config = PhantomConfig {
            n_z: n_z.clamp(3, 24),
            n_x: extent,
            n_y: extent,
            anisotropy: anisotropy.max(1.0),
            tubes: tubes.min(12),
            radius: (radius.max(1.5) * 0.7, radius.max(1.5)),
            noise: noise.clamp(0.0, 0.5),
            illumination: illumination.clamp(0.0, 0.8),
            seed,
        };
        self.stack = Some(generate_phantom(&config).map_err(err)?);
        self.seed = seed;
        self.model = None;
        self.probs.clear();
        Ok(())
    }

    pub fn n_slices(&self) -> usize {
        self.stack.as_ref().map_or(0, |s| s.n_z)
    }

    pub fn extent(&self) -> usize {
        self.stack.as_ref().map_or(0, |s| s.n_x)
    }

    /// Grayscale RGBA pixels of one slice.
    pub fn slice_rgba(&self, z: usize) -> Vec<u8> {
        let Some(stack) = &self.stack else {
            return Vec::new();
        };
        let z = z.min(stack.n_z - 1);
        stack.slices[z]
            .iter()
            .flat_map(|&v| {
                let g = (v.clamp(0.0, 1.0) * 255.0) as u8;
                [g, g, g, 255]
            })
            .collect()
    }

    /// Ground truth as a green overlay on the image.
    pub fn label_rgba(&self, z: usize) -> Vec<u8> {
        let Some(stack) = &self.stack else {
            return Vec::new();
        };
        let z = z.min(stack.n_z - 1);
        let labels = stack.labels.as_ref();
        stack.slices[z]
            .iter()
            .enumerate()
            .flat_map(|(i, &v)| {
                let g = (v.clamp(0.0, 1.0) * 200.0) as u8;
                if labels.is_some_and(|l| l[z][i] != 0) {
                    [40, 220, 90, 255]
                } else {
                    [g, g, g, 255]
                }
            })
            .collect()
    }

    /// Predicted foreground probability as a blue-to-red map; empty until
    /// `segment` ran.
    pub fn prob_rgba(&self, z: usize) -> Vec<u8> {
        let Some(slice) = self.probs.get(z.min(self.probs.len().saturating_sub(1))) else {
            return Vec::new();
        };
        slice
            .iter()
            .flat_map(|&p| {
                let p = p.clamp(0.0, 1.0);
                [
                    (p * 255.0) as u8,
                    (40.0 + 40.0 * (1.0 - (2.0 * p - 1.0).abs())) as u8,
                    ((1.0 - p) * 255.0) as u8,
                    255,
                ]
            })
            .collect()
    }

    fn ensure_model(&mut self) -> Result<(), JsError> {
        if self.model.is_some() {
            return Ok(());
        }
        let unet = UNetConfig {
            depth: 2,
            base_channels: 4,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 16,
        };
        let mut ps = ParamSet::new();
        let model = SegModel::init_with_stack_scheme(
            &mut ps,
            KUNetConfig::uniform(2, unet),
            BdcLstmStackConfig::with_widths(16, 4, 3, 8),
            self.seed,
            ansg_core::recurrent::InitScheme::FanInUniform,
        )
        .map_err(err)?;
        self.model = Some(ModelState {
            model,
            state: TrainState::new(ps, self.seed),
            phases: 0,
        });
        Ok(())
    }

    fn run_training(&mut self, mode: TrainMode, iterations: u64) -> Result<Vec<f32>, JsError> {
        self.ensure_model()?;
        let stack = self
            .stack
            .clone()
            .ok_or_else(|| JsError::new("generate a phantom first"))?;
        let ms = self.model.as_mut().expect("ensured above");

        let fcn_tile = ((stack.n_x.min(48)) / 8) * 8;
        // Each click continues with fresh sample draws.
        let mut cfg = TrainConfig::new(mode, iterations, self.seed ^ (ms.phases << 8));
        cfg.fcn_tile = fcn_tile;
        cfg.rnn_tile = 10.min(stack.n_x);
        ms.phases += 1;

        let trace = train_loop(&ms.model, &mut ms.state, &stack, &cfg, |_, _| Ok(()))
            .map_err(err)?;
        Ok(trace.iter().map(|r| r.loss as f32).collect())
    }

    /// Runs feature-extractor training iterations; returns per-iteration
    /// losses.
    pub fn train_fcn(&mut self, iterations: u64) -> Result<Vec<f32>, JsError> {
        self.run_training(TrainMode::FcnOnly, iterations)
    }

    /// Runs recurrent-stack training iterations on frozen features.
    pub fn train_rnn(&mut self, iterations: u64) -> Result<Vec<f32>, JsError> {
        self.run_training(TrainMode::RnnOnly, iterations)
    }

    /// Segments the phantom with the current parameters. `use_context`
    /// routes through the bi-directional stack, otherwise the per-slice head.
    pub fn segment(&mut self, use_context: bool) -> Result<(), JsError> {
        self.ensure_model()?;
        let stack = self
            .stack
            .as_ref()
            .ok_or_else(|| JsError::new("generate a phantom first"))?;
        let ms = self.model.as_ref().expect("ensured above");
        let config = PipelineConfig {
            rho: 1,
            tile: stack.n_x,
            margin: 14,
            sequence_mode: SequenceMode::Window,
            feature_working: 128,
            feature_context: 16,
        };
        let path = if use_context {
            InferencePath::WithContext
        } else {
            InferencePath::FcnOnly
        };
        let probs =
            segment_stack(stack, &ms.state.params, &ms.model, &config, path).map_err(err)?;
        let plane = stack.n_x * stack.n_y;
        self.probs = probs
            .iter()
            .map(|p| p.data()[plane..2 * plane].to_vec())
            .collect();
        Ok(())
    }

    /// Mean absolute error between predicted probabilities and the labels.
    pub fn pixel_error(&self) -> f64 {
        let (Some(stack), false) = (&self.stack, self.probs.is_empty()) else {
            return f64::NAN;
        };
        let Some(labels) = &stack.labels else {
            return f64::NAN;
        };
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (slice, lab) in self.probs.iter().zip(labels.iter()) {
            for (&p, &y) in slice.iter().zip(lab.iter()) {
                total += (f64::from(p) - f64::from(y)).abs();
                count += 1;
            }
        }
        total / count as f64
    }
}
