//! Multi-scale fully convolutional feature extraction: a U-Net submodule
//! (encoder/decoder with skip concatenations) and the k-scale composition
//! that chains submodule U-Nets from the coarsest scale to the finest over a
//! max-pooling image pyramid.
//!
//! Four fusion topologies connect a coarser U-Net to the next finer one:
//!
//! * `A` - the coarser net's final output, upsampled 2x, joins the finer
//!   net's first encoder stage (the default),
//! * `B` - it joins the last decoder stage instead,
//! * `C` - the coarser bottleneck joins the finer bottleneck,
//! * `D` - every commensurate stage receives the coarser stage's features.
//!
//! Every injection is a learned 2x2 transposed-convolution upsampling of the
//! coarser feature, concatenated channel-wise (never added). All fusion
//! wiring assumes same-padding convolutions so commensurate stages align.

use crate::autograd::{NodeId, ParamId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::recurrent::{init_bias, init_tensor, InitScheme};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Padding, Tensor};

/// Shape and width of one U-Net submodule.
#[derive(Debug, Clone, Copy)]
pub struct UNetConfig {
    /// Number of down/up steps.
    pub depth: usize,
    /// Channels of the first encoder stage; stage `s` carries
    /// `base_channels * 2^(s-1)`.
    pub base_channels: usize,
    /// Spatial size of the stage convolutions.
    pub kernel: usize,
    /// `Same` keeps the output at the input extent (the pipeline setting);
    /// `Valid` shrinks and crops skip features like the original design.
    pub padding: Padding,
    /// Channels of the final 1x1 feature convolution.
    pub out_channels: usize,
}

impl UNetConfig {
    /// Desk-scale default: depth 2, base 8, 64 output feature channels.
    pub fn desk() -> Self {
        UNetConfig {
            depth: 2,
            base_channels: 8,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 64,
        }
    }

    /// The full-scale geometry: four downsampling steps followed by four
    /// upsampling steps.
    pub fn full_scale() -> Self {
        UNetConfig {
            depth: 4,
            base_channels: 64,
            kernel: 3,
            padding: Padding::Same,
            out_channels: 64,
        }
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    fn bottleneck_channels(&self) -> usize {
        self.base_channels << self.depth
    }
}

/// How a coarser submodule's information enters the next finer one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    A,
    B,
    C,
    D,
}

/// The k-scale composition. `scales[0]` is the finest submodule (full
/// resolution), `scales[k-1]` the coarsest.
#[derive(Debug, Clone)]
pub struct KUNetConfig {
    pub fusion: FusionMode,
    pub scales: Vec<UNetConfig>,
}

impl KUNetConfig {
    /// `k` identical submodules with the default fusion mode `A`.
    pub fn uniform(k: usize, unet: UNetConfig) -> Self {
        KUNetConfig {
            fusion: FusionMode::A,
            scales: vec![unet; k],
        }
    }

    pub fn k(&self) -> usize {
        self.scales.len()
    }

    pub fn out_channels(&self) -> usize {
        self.scales[0].out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("kU-Net needs k >= 1 submodules".into()));
        }
        if matches!(self.fusion, FusionMode::C | FusionMode::D) {
            let depth = self.scales[0].depth;
            if self.scales.iter().any(|s| s.depth != depth) {
                return Err(Error::Config(
                    "fusion modes C and D need equal submodule depths (commensurate stages)".into(),
                ));
            }
        }
        if self.k() > 1 && self.scales.iter().any(|s| s.padding != Padding::Same) {
            return Err(Error::Config(
                "multi-scale fusion requires same-padding submodules".into(),
            ));
        }
        Ok(())
    }

    /// Spatial divisibility required of the finest-scale input.
    pub fn required_divisor(&self) -> usize {
        let max_depth = self.scales.iter().map(|s| s.depth).max().unwrap_or(0);
        1 << (self.k() - 1 + max_depth)
    }
}

/// Extra injected channels per stage of one submodule.
#[derive(Debug, Clone, Default)]
struct InjectionSpec {
    enc: Vec<usize>,
    bottleneck: usize,
    dec: Vec<usize>,
}

impl InjectionSpec {
    fn none(depth: usize) -> Self {
        InjectionSpec {
            enc: vec![0; depth],
            bottleneck: 0,
            dec: vec![0; depth],
        }
    }

    /// Channels injected into the finer net when `coarse` feeds it.
    fn for_fusion(fusion: FusionMode, fine_depth: usize, coarse: &UNetConfig) -> Self {
        let mut spec = InjectionSpec::none(fine_depth);
        match fusion {
            FusionMode::A => spec.enc[0] = coarse.out_channels,
            FusionMode::B => spec.dec[0] = coarse.out_channels,
            FusionMode::C => spec.bottleneck = coarse.bottleneck_channels(),
            FusionMode::D => {
                for s in 1..=fine_depth {
                    spec.enc[s - 1] = coarse.stage_channels(s);
                    spec.dec[s - 1] = coarse.stage_channels(s);
                }
                spec.bottleneck = coarse.bottleneck_channels();
            }
        }
        spec
    }
}

/// Injected feature nodes, already upsampled to the receiving stage's extent.
#[derive(Debug, Clone, Default)]
pub struct InjectionNodes {
    pub enc: Vec<Option<NodeId>>,
    pub bottleneck: Option<NodeId>,
    pub dec: Vec<Option<NodeId>>,
}

impl InjectionNodes {
    pub fn none(depth: usize) -> Self {
        InjectionNodes {
            enc: vec![None; depth],
            bottleneck: None,
            dec: vec![None; depth],
        }
    }
}

#[derive(Debug, Clone)]
struct ConvPair {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ConvPair {
    fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let scheme = InitScheme::HeNormal;
        Ok(ConvPair {
            w1: ps.register(
                &format!("{prefix}.conv1.w"),
                init_tensor(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, scheme, rng),
            )?,
            b1: ps.register(&format!("{prefix}.conv1.b"), init_bias(out_ch, scheme, rng))?,
            w2: ps.register(
                &format!("{prefix}.conv2.w"),
                init_tensor(
                    &[out_ch, out_ch, kernel, kernel],
                    out_ch * kernel * kernel,
                    scheme,
                    rng,
                ),
            )?,
            b2: ps.register(&format!("{prefix}.conv2.b"), init_bias(out_ch, scheme, rng))?,
        })
    }

    fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamSet<T>,
        x: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let w1 = tape.param(ps, self.w1);
        let b1 = tape.param(ps, self.b1);
        let c1 = tape.conv2d(x, w1, Some(b1), padding)?;
        let a1 = tape.relu(c1);
        let w2 = tape.param(ps, self.w2);
        let b2 = tape.param(ps, self.b2);
        let c2 = tape.conv2d(a1, w2, Some(b2), padding)?;
        Ok(tape.relu(c2))
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up_w: ParamId,
    up_b: ParamId,
    pair: ConvPair,
}

/// Parameters of one U-Net submodule.
#[derive(Debug, Clone)]
pub struct UNetParams {
    enc: Vec<ConvPair>,
    bottleneck: ConvPair,
    dec: Vec<DecoderStage>,
    final_w: ParamId,
    final_b: ParamId,
    config: UNetConfig,
    injections: InjectionSpec,
    input_channels: usize,
}

impl UNetParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        config: &UNetConfig,
        input_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::init_with_injections(
            ps,
            prefix,
            config,
            input_channels,
            InjectionSpec::none(config.depth),
            rng,
        )
    }

    fn init_with_injections<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        config: &UNetConfig,
        input_channels: usize,
        injections: InjectionSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = config.depth;
        let k = config.kernel;
        let scheme = InitScheme::HeNormal;
        let mut enc = Vec::with_capacity(d);
        for s in 1..=d {
            let in_ch = if s == 1 {
                input_channels
            } else {
                config.stage_channels(s - 1)
            } + injections.enc[s - 1];
            enc.push(ConvPair::init(
                ps,
                &format!("{prefix}.enc{s}"),
                in_ch,
                config.stage_channels(s),
                k,
                rng,
            )?);
        }
        let bottleneck = ConvPair::init(
            ps,
            &format!("{prefix}.bottleneck"),
            config.stage_channels(d) + injections.bottleneck,
            config.bottleneck_channels(),
            k,
            rng,
        )?;
        let mut dec = Vec::with_capacity(d);
        for s in (1..=d).rev() {
            let above = if s == d {
                config.bottleneck_channels()
            } else {
                config.stage_channels(s + 1)
            };
            let ch = config.stage_channels(s);
            let up_w = ps.register(
                &format!("{prefix}.dec{s}.up.w"),
                init_tensor(&[ch, above, 2, 2], above * 4, scheme, rng),
            )?;
            let up_b = ps.register(&format!("{prefix}.dec{s}.up.b"), init_bias(ch, scheme, rng))?;
            let pair = ConvPair::init(
                ps,
                &format!("{prefix}.dec{s}"),
                ch + ch + injections.dec[s - 1],
                ch,
                k,
                rng,
            )?;
            dec.push(DecoderStage { up_w, up_b, pair });
        }
        let final_w = ps.register(
            &format!("{prefix}.head.w"),
            init_tensor(
                &[config.out_channels, config.stage_channels(1), 1, 1],
                config.stage_channels(1),
                scheme,
                rng,
            ),
        )?;
        let final_b = ps.register(
            &format!("{prefix}.head.b"),
            init_bias(config.out_channels, scheme, rng),
        )?;
        Ok(UNetParams {
            enc,
            bottleneck,
            dec,
            final_w,
            final_b,
            config: *config,
            injections,
            input_channels,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }
}

/// Intermediate and final features of one U-Net pass; the internals feed
/// fusion modes C and D.
#[derive(Debug, Clone)]
pub struct UNetOutputs {
    /// Final `out_channels` feature map.
    pub out: NodeId,
    /// Per-stage encoder features (before pooling), finest first.
    pub enc: Vec<NodeId>,
    pub bottleneck: NodeId,
    /// Per-stage decoder features, indexed by stage (dec[0] is full res).
    pub dec: Vec<NodeId>,
}

fn concat_injection<T: Scalar>(
    tape: &mut Tape<T>,
    features: NodeId,
    injected: Option<NodeId>,
    stage: &str,
) -> Result<NodeId> {
    match injected {
        None => Ok(features),
        Some(inj) => {
            let fs = tape.value(features).shape().to_vec();
            let is = tape.value(inj).shape().to_vec();
            if fs[1..] != is[1..] {
                return Err(Error::Dimension(format!(
                    "{stage}: injected features {is:?} do not align with {fs:?}"
                )));
            }
            tape.concat_channels(features, inj)
        }
    }
}

/// Encoder/decoder forward pass with skip concatenations. Returns a
/// same-extent `out_channels` feature map in same-padding mode; in valid mode
/// skip features are center-cropped to the decoder extent.
pub fn unet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    params: &UNetParams,
    image: NodeId,
    injections: &InjectionNodes,
) -> Result<UNetOutputs> {
    let cfg = &params.config;
    let (c, h, w) = tape.value(image).dims3()?;
    if c != params.input_channels {
        return Err(Error::Dimension(format!(
            "U-Net expects {} input channels, got {c}",
            params.input_channels
        )));
    }
    if cfg.padding == Padding::Same {
        let div = 1 << cfg.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} must be divisible by 2^depth = {div} in same-padding mode"
            )));
        }
    }

    let mut enc_feats = Vec::with_capacity(cfg.depth);
    let mut x = image;
    for (s, pair) in params.enc.iter().enumerate() {
        x = concat_injection(tape, x, injections.enc[s], &format!("encoder stage {}", s + 1))?;
        let features = pair.forward(tape, ps, x, cfg.padding)?;
        enc_feats.push(features);
        x = tape.max_pool2(features)?;
    }

    x = concat_injection(tape, x, injections.bottleneck, "bottleneck")?;
    let bottleneck = params.bottleneck.forward(tape, ps, x, cfg.padding)?;

    let mut dec_feats = vec![bottleneck; cfg.depth];
    x = bottleneck;
    for (i, stage) in params.dec.iter().enumerate() {
        let s = cfg.depth - i; // stage index, depth .. 1
        let up_w = tape.param(ps, stage.up_w);
        let up_b = tape.param(ps, stage.up_b);
        let up = tape.deconv2(x, up_w, Some(up_b))?;
        let skip = enc_feats[s - 1];
        let skip = if cfg.padding == Padding::Valid {
            let us = tape.value(up).shape().to_vec();
            tape.crop_center(skip, us[1], us[2])?
        } else {
            skip
        };
        let merged = tape.concat_channels(up, skip)?;
        let merged = concat_injection(
            tape,
            merged,
            injections.dec[s - 1],
            &format!("decoder stage {s}"),
        )?;
        x = stage.pair.forward(tape, ps, merged, cfg.padding)?;
        dec_feats[s - 1] = x;
    }

    let fw = tape.param(ps, params.final_w);
    let fb = tape.param(ps, params.final_b);
    let out = tape.conv2d(x, fw, Some(fb), Padding::Valid)?;
    Ok(UNetOutputs {
        out,
        enc: enc_feats,
        bottleneck,
        dec: dec_feats,
    })
}

#[derive(Debug, Clone)]
struct Upsampler {
    w: ParamId,
    b: ParamId,
}

impl Upsampler {
    fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Upsampler {
            w: ps.register(
                &format!("{name}.w"),
                init_tensor(&[channels, channels, 2, 2], channels * 4, InitScheme::HeNormal, rng),
            )?,
            b: ps.register(&format!("{name}.b"), init_bias(channels, InitScheme::HeNormal, rng))?,
        })
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, ps: &ParamSet<T>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        tape.deconv2(x, w, Some(b))
    }
}

/// Learned upsamplers carrying one coarser submodule's features into the
/// next finer one.
#[derive(Debug, Clone)]
struct FusionWiring {
    enc: Vec<Option<Upsampler>>,
    bottleneck: Option<Upsampler>,
    dec: Vec<Option<Upsampler>>,
}

/// Parameters of the full k-scale composition.
#[derive(Debug, Clone)]
pub struct KUNetParams {
    /// `unets[0]` is the finest submodule.
    unets: Vec<UNetParams>,
    /// `wiring[t]` upsamples `unets[t+1]` outputs into `unets[t]`.
    wiring: Vec<FusionWiring>,
    config: KUNetConfig,
}

impl KUNetParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        config: &KUNetConfig,
        input_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k = config.k();
        let mut unets = Vec::with_capacity(k);
        for (t, scale_cfg) in config.scales.iter().enumerate() {
            let injections = if t + 1 < k {
                InjectionSpec::for_fusion(config.fusion, scale_cfg.depth, &config.scales[t + 1])
            } else {
                InjectionSpec::none(scale_cfg.depth)
            };
            unets.push(UNetParams::init_with_injections(
                ps,
                &format!("{prefix}.u{}", t + 1),
                scale_cfg,
                input_channels,
                injections,
                rng,
            )?);
        }
        let mut wiring = Vec::with_capacity(k.saturating_sub(1));
        for t in 0..k.saturating_sub(1) {
            let spec = &unets[t].injections;
            let name = |point: &str| format!("{prefix}.fuse{}from{}.{point}", t + 1, t + 2);
            let mut enc = Vec::with_capacity(spec.enc.len());
            for (s, &ch) in spec.enc.iter().enumerate() {
                enc.push(if ch > 0 {
                    Some(Upsampler::init(ps, &name(&format!("enc{}", s + 1)), ch, rng)?)
                } else {
                    None
                });
            }
            let bottleneck = if spec.bottleneck > 0 {
                Some(Upsampler::init(ps, &name("bottleneck"), spec.bottleneck, rng)?)
            } else {
                None
            };
            let mut dec = Vec::with_capacity(spec.dec.len());
            for (s, &ch) in spec.dec.iter().enumerate() {
                dec.push(if ch > 0 {
                    Some(Upsampler::init(ps, &name(&format!("dec{}", s + 1)), ch, rng)?)
                } else {
                    None
                });
            }
            wiring.push(FusionWiring {
                enc,
                bottleneck,
                dec,
            });
        }
        Ok(KUNetParams {
            unets,
            wiring,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &KUNetConfig {
        &self.config
    }
}

/// Builds the max-pooling scale pyramid `I_1 .. I_k`: `I_1` is the original
/// image and each level halves the previous one, so a pixel of `I_t` covers
/// `2^(t-1)` original pixels per axis.
pub fn build_scale_pyramid<T: Scalar>(image: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    let (_, h, w) = image.dims3()?;
    if k == 0 {
        return Err(Error::Config("pyramid needs k >= 1".into()));
    }
    let div = 1usize << (k - 1);
    if h % div != 0 || w % div != 0 {
        return Err(Error::Dimension(format!(
            "extents {h}x{w} not divisible by 2^(k-1) = {div}"
        )));
    }
    let mut levels = vec![image.clone()];
    for _ in 1..k {
        let (pooled, _) = tensor::max_pool2(levels.last().unwrap())?;
        levels.push(pooled);
    }
    Ok(levels)
}

/// Runs the k-scale composition: the coarsest submodule first, each finer one
/// receiving the upsampled features selected by the fusion mode. Returns the
/// finest submodule's full-resolution feature map.
pub fn kunet_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    params: &KUNetParams,
    image: NodeId,
) -> Result<NodeId> {
    let cfg = &params.config;
    cfg.validate()?;
    let k = cfg.k();

    let mut levels = vec![image];
    for _ in 1..k {
        let prev = *levels.last().unwrap();
        levels.push(tape.max_pool2(prev)?);
    }

    let mut finer_result: Option<UNetOutputs> = None;
    for t in (0..k).rev() {
        let injections = match &finer_result {
            None => InjectionNodes::none(cfg.scales[t].depth),
            Some(coarse) => {
                let wiring = &params.wiring[t];
                let mut nodes = InjectionNodes::none(cfg.scales[t].depth);
                for (s, up) in wiring.enc.iter().enumerate() {
                    if let Some(up) = up {
                        let source = match cfg.fusion {
                            FusionMode::A => coarse.out,
                            FusionMode::D => coarse.enc[s],
                            _ => unreachable!("encoder wiring only exists for A and D"),
                        };
                        nodes.enc[s] = Some(up.apply(tape, ps, source)?);
                    }
                }
                if let Some(up) = &wiring.bottleneck {
                    nodes.bottleneck = Some(up.apply(tape, ps, coarse.bottleneck)?);
                }
                for (s, up) in wiring.dec.iter().enumerate() {
                    if let Some(up) = up {
                        let source = match cfg.fusion {
                            FusionMode::B => coarse.out,
                            FusionMode::D => coarse.dec[s],
                            _ => unreachable!("decoder wiring only exists for B and D"),
                        };
                        nodes.dec[s] = Some(up.apply(tape, ps, source)?);
                    }
                }
                nodes
            }
        };
        finer_result = Some(unet_forward(
            tape,
            ps,
            &params.unets[t],
            levels[t],
            &injections,
        )?);
    }
    Ok(finer_result.expect("k >= 1").out)
}
