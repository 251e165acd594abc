//! End-to-end 3D inference: per-slice multi-scale features, context
//! propagation across a window of neighboring slices through the deep
//! bi-directional stack, and per-pixel softmax probability maps — with
//! overlapping-tile processing so arbitrarily large slices fit.
//!
//! Tiling pads the feature maps with zeros by `margin/2` per border and runs
//! `(tile + margin)`-sized input windows on a `tile`-sized output grid. The
//! deep stack uses valid convolutions, so stitched outputs are seamless:
//! overlapping regions agree (asserted in debug builds) and tiled equals
//! whole-image application.

use crate::autograd::{NodeId, ParamId, ParamSet, Tape};
use crate::data::ImageStack;
use crate::error::{Error, Result};
use crate::fcn::{kunet_forward, KUNetConfig, KUNetParams};
use crate::parallel::parallel_map;
use crate::recurrent::{deep_forward, BdcLstmStackConfig, BdcLstmStackParams, InitScheme};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, crop_padded, Padding, Tensor};

/// Ordered sequence of per-slice feature maps with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    slices: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn new(slices: Vec<Tensor<T>>) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Usage("feature stack must be nonempty".into()));
        }
        let shape = slices[0].shape().to_vec();
        if slices.iter().any(|s| s.shape() != shape) {
            return Err(Error::Dimension(
                "feature stack slices must share one shape".into(),
            ));
        }
        Ok(FeatureStack { slices })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slice(&self, z: usize) -> &Tensor<T> {
        &self.slices[z]
    }

    pub fn slices(&self) -> &[Tensor<T>] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<Tensor<T>> {
        self.slices
    }

    pub fn slice_shape(&self) -> &[usize] {
        self.slices[0].shape()
    }
}

/// How the z-sequence feeds the recurrent stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceMode {
    /// Each output slice is computed from the `2*rho + 1` window centered on
    /// it, with edge slices replicated where the window leaves the stack.
    Window,
    /// One pass over the whole sequence (the stack is fully convolutional
    /// along z).
    Full,
}

/// Tiling and context geometry of the inference pipeline.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Context radius of the slice window.
    pub rho: usize,
    /// Output tile extent of the deep-stack tiling.
    pub tile: usize,
    /// Input surplus per axis; must equal the deep stack's total shrinkage
    /// for the `tile + margin` input window.
    pub margin: usize,
    pub sequence_mode: SequenceMode,
    /// Slices larger than this are feature-extracted tile-wise.
    pub feature_working: usize,
    /// Context border around feature-extraction tiles.
    pub feature_context: usize,
}

impl PipelineConfig {
    /// The full-scale geometry: rho 1, 100x100 output tiles from 126x126
    /// windows (margin 26).
    pub fn full_scale() -> Self {
        PipelineConfig {
            rho: 1,
            tile: 100,
            margin: 26,
            sequence_mode: SequenceMode::Window,
            feature_working: 512,
            feature_context: 32,
        }
    }

    /// Geometry matching a 3x3-kernel stack (margin 14).
    pub fn desk(tile: usize) -> Self {
        PipelineConfig {
            rho: 1,
            tile,
            margin: 14,
            sequence_mode: SequenceMode::Window,
            feature_working: 256,
            feature_context: 32,
        }
    }

    /// Checks the margin against the deep stack's actual shrinkage.
    pub fn validate_for(&self, stack: &BdcLstmStackConfig) -> Result<()> {
        if !self.margin.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "margin {} must be even (margin/2 padding per border)",
                self.margin
            )));
        }
        if !self.tile.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "tile {} must be even so all window origins share the pooling grid parity",
                self.tile
            )));
        }
        let window = self.tile + self.margin;
        let out = stack.output_extent(window)?;
        if out != self.tile {
            return Err(Error::Config(format!(
                "margin {} does not match the stack: window {window} yields {out}, expected tile {}",
                self.margin, self.tile
            )));
        }
        Ok(())
    }
}

/// Which head turns features into class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferencePath {
    /// Per-slice 1x1 classifier on the 2D features (no inter-slice context).
    FcnOnly,
    /// Deep bi-directional stack over the slice window.
    WithContext,
}

/// The full segmentation model: multi-scale feature extractor, a 1x1
/// two-class head for feature-only inference, and the deep recurrent stack.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub kunet_cfg: KUNetConfig,
    pub kunet: KUNetParams,
    pub head_w: ParamId,
    pub head_b: ParamId,
    pub stack_cfg: BdcLstmStackConfig,
    pub stack: BdcLstmStackParams,
}

impl SegModel {
    /// Registers all parameters: feature extractor and head with the
    /// fan-in-scaled normal scheme, recurrent stack uniformly in
    /// [-0.02, 0.02] (the reference scheme, sized for the full-scale
    /// fan-ins). Fully determined by `seed`.
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        kunet_cfg: KUNetConfig,
        stack_cfg: BdcLstmStackConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::init_with_stack_scheme(ps, kunet_cfg, stack_cfg, seed, InitScheme::Uniform(0.02))
    }

    /// Like [`SegModel::init`] with an explicit recurrent-stack scheme.
    /// Reduced-width stacks need `InitScheme::FanInUniform`: the fixed
    /// 0.02 bound attenuates activations at small fan-ins until nothing
    /// reaches the tail of the stack.
    pub fn init_with_stack_scheme<T: Scalar>(
        ps: &mut ParamSet<T>,
        kunet_cfg: KUNetConfig,
        stack_cfg: BdcLstmStackConfig,
        seed: u64,
        stack_scheme: InitScheme,
    ) -> Result<Self> {
        if stack_cfg.in_channels != kunet_cfg.out_channels() {
            return Err(Error::Config(format!(
                "stack expects {} input channels but the feature extractor emits {}",
                stack_cfg.in_channels,
                kunet_cfg.out_channels()
            )));
        }
        if stack_cfg.out_channels() != 2 {
            return Err(Error::Config(format!(
                "deep stack must end in 2 channels for two-class softmax, got {}",
                stack_cfg.out_channels()
            )));
        }
        let mut fcn_rng = Rng::substream(seed, "init.fcn");
        let kunet = KUNetParams::init(ps, "kunet", &kunet_cfg, 1, &mut fcn_rng)?;
        let feat = kunet_cfg.out_channels();
        let head_w = ps.register(
            "head.w",
            crate::recurrent::init_tensor(&[2, feat, 1, 1], feat, InitScheme::HeNormal, &mut fcn_rng),
        )?;
        let head_b = ps.register(
            "head.b",
            crate::recurrent::init_bias(2, InitScheme::HeNormal, &mut fcn_rng),
        )?;
        let mut rnn_rng = Rng::substream(seed, "init.rnn");
        let stack = BdcLstmStackParams::init(ps, "deep", &stack_cfg, stack_scheme, &mut rnn_rng)?;
        Ok(SegModel {
            kunet_cfg,
            kunet,
            head_w,
            head_b,
            stack_cfg,
            stack,
        })
    }
}

/// Feature map of one slice through the extractor in evaluation mode.
pub fn slice_features<T: Scalar>(
    ps: &ParamSet<T>,
    kunet: &KUNetParams,
    slice: &Tensor<T>,
    config: &PipelineConfig,
) -> Result<Tensor<T>> {
    let (_, h, w) = slice.dims3()?;
    let working = config.feature_working.max(1);
    if h <= working && w <= working {
        return whole_slice_features(ps, kunet, slice);
    }

    // Overlapping-tile extraction: context borders absorb the same-padding
    // edge effects; interior outputs equal whole-image outputs once the
    // context exceeds the receptive field radius.
    let div = kunet.config().required_divisor();
    let ctx = config.feature_context.div_ceil(div) * div;
    let tile = (working.saturating_sub(2 * ctx)).max(div) / div * div;
    let out_c = kunet.config().out_channels();
    let mut features = Tensor::zeros(&[out_c, h, w]);
    let mut jobs = Vec::new();
    for oy in (0..h).step_by(tile) {
        for ox in (0..w).step_by(tile) {
            jobs.push((oy, ox));
        }
    }
    let results = parallel_map(jobs, |(oy, ox)| -> Result<_> {
        let window = crop_padded(
            slice,
            oy as isize - ctx as isize,
            ox as isize - ctx as isize,
            tile + 2 * ctx,
            tile + 2 * ctx,
        );
        let out = whole_slice_features(ps, kunet, &window)?;
        Ok((oy, ox, out))
    });
    for r in results {
        let (oy, ox, out) = r?;
        let th = tile.min(h - oy);
        let tw = tile.min(w - ox);
        for c in 0..out_c {
            for y in 0..th {
                for x in 0..tw {
                    let v = out.at3(c, ctx + y, ctx + x);
                    features.set3(c, oy + y, ox + x, v);
                }
            }
        }
    }
    Ok(features)
}

fn whole_slice_features<T: Scalar>(
    ps: &ParamSet<T>,
    kunet: &KUNetParams,
    slice: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let node = tape.input(slice.clone());
    let out = kunet_forward(&mut tape, ps, kunet, node)?;
    Ok(tape.value(out).clone())
}

/// Extracts one feature map per slice, order preserved; slices are
/// independent and processed in parallel.
pub fn extract_slice_features<T: Scalar>(
    stack: &ImageStack,
    ps: &ParamSet<T>,
    kunet: &KUNetParams,
    config: &PipelineConfig,
) -> Result<FeatureStack<T>> {
    if stack.n_z == 0 {
        return Err(Error::Usage("empty stack".into()));
    }
    let slices: Vec<Tensor<T>> = (0..stack.n_z).map(|z| stack.slice_tensor(z)).collect();
    let maps = parallel_map(slices, |s| slice_features(ps, kunet, &s, config));
    FeatureStack::new(maps.into_iter().collect::<Result<Vec<_>>>()?)
}

fn tile_origins(extent: usize, tile: usize) -> Vec<usize> {
    // Round odd extents up: the clamped last origin must stay even, or its
    // window would sample the pooling grid at the opposite parity. The
    // extra column reads as zero padding and is never written back.
    let extent = extent + extent % 2;
    if extent <= tile {
        return vec![0];
    }
    let mut origins: Vec<usize> = (0..extent / tile).map(|i| i * tile).collect();
    let last = extent - tile;
    if *origins.last().unwrap() != last {
        origins.push(last);
    }
    origins
}

/// Applies the deep stack to a whole feature stack by overlapping tiles:
/// zero-pad by `margin/2` per border, run `(tile+margin)` input windows over
/// a `tile` output grid (the last origin shrinks back so windows always
/// fit), and stitch the per-slice outputs. Returns per-slice logits of the
/// stack's output channel count at the original `n_x x n_y` extent.
pub fn tiled_apply<T: Scalar>(
    features: &FeatureStack<T>,
    ps: &ParamSet<T>,
    stack_cfg: &BdcLstmStackConfig,
    stack_params: &BdcLstmStackParams,
    config: &PipelineConfig,
) -> Result<FeatureStack<T>> {
    config.validate_for(stack_cfg)?;
    let shape = features.slice_shape();
    let (h, w) = (shape[1], shape[2]);
    let (tile, margin) = (config.tile, config.margin);
    let pad = margin / 2;
    let out_c = stack_cfg.out_channels();
    let n_z = features.len();

    let jobs: Vec<(usize, usize)> = tile_origins(h, tile)
        .into_iter()
        .flat_map(|oy| tile_origins(w, tile).into_iter().map(move |ox| (oy, ox)))
        .collect();

    let results = parallel_map(jobs, |(oy, ox)| -> Result<_> {
        let mut tape = Tape::new();
        let window = tile + margin;
        let seq: Vec<NodeId> = (0..n_z)
            .map(|z| {
                let patch = crop_padded(
                    features.slice(z),
                    oy as isize - pad as isize,
                    ox as isize - pad as isize,
                    window,
                    window,
                );
                tape.input(patch)
            })
            .collect();
        let out = deep_forward(&mut tape, ps, stack_cfg, stack_params, &seq, None)?;
        let maps: Vec<Tensor<T>> = out.iter().map(|&n| tape.value(n).clone()).collect();
        Ok((oy, ox, maps))
    });

    let mut out: Vec<Tensor<T>> = (0..n_z).map(|_| Tensor::zeros(&[out_c, h, w])).collect();
    #[cfg(debug_assertions)]
    let mut written = vec![vec![false; h * w]; n_z];
    for r in results {
        let (oy, ox, maps) = r?;
        let th = tile.min(h.saturating_sub(oy));
        let tw = tile.min(w.saturating_sub(ox));
        for (z, map) in maps.iter().enumerate() {
            for c in 0..out_c {
                for y in 0..th {
                    for x in 0..tw {
                        let v = map.at3(c, y, x);
                        #[cfg(debug_assertions)]
                        if c == 0 && written[z][(oy + y) * w + ox + x] {
                            let prev = out[z].at3(c, oy + y, ox + x);
                            debug_assert!(
                                (prev.to_f64() - v.to_f64()).abs() < 1e-5,
                                "tile overlap disagrees at z={z} ({},{}): {prev} vs {v}",
                                oy + y,
                                ox + x
                            );
                        }
                        out[z].set3(c, oy + y, ox + x, v);
                    }
                }
            }
            #[cfg(debug_assertions)]
            for y in 0..th {
                for x in 0..tw {
                    written[z][(oy + y) * w + ox + x] = true;
                }
            }
        }
    }
    FeatureStack::new(out)
}

fn window_indices(z: usize, rho: usize, n_z: usize) -> Vec<usize> {
    (-(rho as isize)..=rho as isize)
        .map(|d| (z as isize + d).clamp(0, n_z as isize - 1) as usize)
        .collect()
}

/// Segments a stack into per-voxel two-class probability maps
/// (`n_z` tensors of `[2, n_x, n_y]`, channels summing to 1).
pub fn segment_stack<T: Scalar>(
    stack: &ImageStack,
    ps: &ParamSet<T>,
    model: &SegModel,
    config: &PipelineConfig,
    path: InferencePath,
) -> Result<Vec<Tensor<T>>> {
    let features = extract_slice_features(stack, ps, &model.kunet, config)?;
    let logits = match path {
        InferencePath::FcnOnly => {
            let w = ps.value(model.head_w);
            let b = ps.value(model.head_b);
            features
                .slices()
                .iter()
                .map(|f| tensor::conv2d(f, w, Some(b), Padding::Valid))
                .collect::<Result<Vec<_>>>()?
        }
        InferencePath::WithContext => match config.sequence_mode {
            SequenceMode::Full => {
                tiled_apply(&features, ps, &model.stack_cfg, &model.stack, config)?.into_slices()
            }
            SequenceMode::Window => {
                let jobs: Vec<usize> = (0..features.len()).collect();
                let center = parallel_map(jobs, |z| -> Result<Tensor<T>> {
                    let window = FeatureStack::new(
                        window_indices(z, config.rho, features.len())
                            .into_iter()
                            .map(|h| features.slice(h).clone())
                            .collect(),
                    )?;
                    let out = tiled_apply(&window, ps, &model.stack_cfg, &model.stack, config)?;
                    Ok(out.slice(config.rho.min(out.len() - 1)).clone())
                });
                center.into_iter().collect::<Result<Vec<_>>>()?
            }
        },
    };
    logits.iter().map(tensor::softmax_channels).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::UNetConfig;

    fn zero_model(ps: &mut ParamSet<f64>) -> SegModel {
        let unet = UNetConfig {
            depth: 2,
            base_channels: 2,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 8,
        };
        let kunet_cfg = KUNetConfig::uniform(2, unet);
        let stack_cfg = BdcLstmStackConfig::reduced();
        let mut model = SegModel::init(ps, kunet_cfg, stack_cfg, 0).unwrap();
        // Zero every parameter.
        let ids: Vec<_> = ps.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            ps.value_mut(id).data_mut().fill(0.0);
        }
        model.stack_cfg = BdcLstmStackConfig::reduced();
        model
    }

    fn flat_stack(n_z: usize, n: usize, value: f32) -> ImageStack {
        ImageStack::new(
            n_z,
            n,
            n,
            (1.0, 1.0, 4.0),
            (0..n_z).map(|_| vec![value; n * n]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn feature_extraction_shapes_and_slice_independence() {
        let mut ps = ParamSet::<f64>::new();
        let model = zero_model(&mut ps);
        let config = PipelineConfig::desk(18);
        let mut stack = flat_stack(8, 64, 0.25);
        for (z, slice) in stack.slices.iter_mut().enumerate() {
            slice[z] = 1.0; // make slices distinct
        }
        let feats = extract_slice_features(&stack, &ps, &model.kunet, &config).unwrap();
        assert_eq!(feats.len(), 8);
        assert_eq!(feats.slice_shape(), &[8, 64, 64]);

        // Permuting input slices permutes output maps identically.
        let mut reversed = stack.clone();
        reversed.slices.reverse();
        let rfeats = extract_slice_features(&reversed, &ps, &model.kunet, &config).unwrap();
        for z in 0..8 {
            assert_eq!(feats.slice(z), rfeats.slice(7 - z));
        }
    }

    #[test]
    fn single_slice_stack_yields_single_map() {
        let mut ps = ParamSet::<f64>::new();
        let model = zero_model(&mut ps);
        let config = PipelineConfig::desk(18);
        let stack = flat_stack(1, 32, 0.5);
        let feats = extract_slice_features(&stack, &ps, &model.kunet, &config).unwrap();
        assert_eq!(feats.len(), 1);
    }

    #[test]
    fn zero_model_segments_to_uniform_half() {
        let mut ps = ParamSet::<f64>::new();
        let model = zero_model(&mut ps);
        let mut config = PipelineConfig::desk(18);
        config.feature_working = 64;
        let stack = flat_stack(3, 32, 0.0);
        for path in [InferencePath::FcnOnly, InferencePath::WithContext] {
            let probs = segment_stack(&stack, &ps, &model, &config, path).unwrap();
            assert_eq!(probs.len(), 3);
            assert_eq!(probs[0].shape(), &[2, 32, 32]);
            for p in &probs {
                assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-12), "{path:?}");
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_per_voxel() {
        let mut rng = Rng::from_seed(31);
        let mut ps = ParamSet::<f64>::new();
        let unet = UNetConfig {
            depth: 2,
            base_channels: 2,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 8,
        };
        let model = SegModel::init(
            &mut ps,
            KUNetConfig::uniform(2, unet),
            BdcLstmStackConfig::reduced(),
            7,
        )
        .unwrap();
        let mut stack = flat_stack(3, 32, 0.0);
        for slice in stack.slices.iter_mut() {
            for v in slice.iter_mut() {
                *v = rng.uniform(0.0, 1.0) as f32;
            }
        }
        let config = PipelineConfig::desk(18);
        let probs =
            segment_stack(&stack, &ps, &model, &config, InferencePath::WithContext).unwrap();
        for p in &probs {
            let plane = 32 * 32;
            for v in 0..plane {
                let total = p.data()[v] + p.data()[plane + v];
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn margin_mismatch_is_a_config_error() {
        let stack_cfg = BdcLstmStackConfig::reduced();
        let mut config = PipelineConfig::desk(18);
        config.margin = 12;
        assert!(matches!(
            config.validate_for(&stack_cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn window_indices_replicate_edges() {
        assert_eq!(window_indices(0, 1, 5), vec![0, 0, 1]);
        assert_eq!(window_indices(2, 1, 5), vec![1, 2, 3]);
        assert_eq!(window_indices(4, 1, 5), vec![3, 4, 4]);
        assert_eq!(window_indices(1, 3, 3), vec![0, 0, 0, 1, 2, 2, 2]);
    }

    #[test]
    fn tile_origins_cover_and_clamp() {
        assert_eq!(tile_origins(100, 100), vec![0]);
        assert_eq!(tile_origins(64, 100), vec![0]);
        assert_eq!(tile_origins(250, 100), vec![0, 100, 150]);
        assert_eq!(tile_origins(200, 100), vec![0, 100]);
        // Odd extents round up so the clamped origin keeps even parity.
        assert_eq!(tile_origins(221, 50), vec![0, 50, 100, 150, 172]);
    }
}
