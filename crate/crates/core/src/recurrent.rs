//! Recurrent cells: classic LSTM, convolutional LSTM, the bi-directional
//! convolutional layer that scans a slice sequence in both z-directions, and
//! the deep stack interleaving those layers with pooling, dropout and
//! deconvolution.
//!
//! Gate equations (sigmoid input/forget/output gates, tanh candidate,
//! elementwise state update) are identical for the vector and convolutional
//! cells; the convolutional cell replaces the matrix products with 2D
//! convolutions. On 1x1 spatial data with 1x1 kernels the two coincide
//! bitwise because the accumulation orders match.

use crate::autograd::{NodeId, ParamId, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{conv2d_out_extent, Padding, Tensor};

/// Weight initialization used when registering parameters.
#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    /// Normal(0, sqrt(2 / fan_in)), biases zero.
    HeNormal,
    /// Uniform in [-a, a] for weights and biases.
    Uniform(f64),
    /// Uniform in [-sqrt(6 / fan_in), +sqrt(6 / fan_in)], biases zero.
    /// Keeps activation magnitudes through sigmoid/tanh cells at reduced
    /// widths, where a fixed small bound starves the signal.
    FanInUniform,
}

pub(crate) fn init_tensor<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    rng: &mut Rng,
) -> Tensor<T> {
    match scheme {
        InitScheme::HeNormal => {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
        }
        InitScheme::Uniform(a) => Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(-a, a))),
        InitScheme::FanInUniform => {
            let a = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.uniform(-a, a)))
        }
    }
}

pub(crate) fn init_bias<T: Scalar>(len: usize, scheme: InitScheme, rng: &mut Rng) -> Tensor<T> {
    match scheme {
        InitScheme::HeNormal | InitScheme::FanInUniform => Tensor::zeros(&[len]),
        InitScheme::Uniform(a) => Tensor::from_fn(&[len], |_| T::from_f64(rng.uniform(-a, a))),
    }
}

/// Cell activation and hidden state of one recurrence step.
#[derive(Debug, Clone, Copy)]
pub struct CellState {
    pub c: NodeId,
    pub h: NodeId,
}

/// The eight weight matrices and four biases of the vector LSTM cell.
///
/// Full weight matrices; the convolutional cell generalizes them to full
/// kernels, so the vector cell keeps full transforms too.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let wx = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(
                &format!("{prefix}.{name}"),
                init_tensor(&[hidden, input_dim], input_dim, scheme, rng),
            )
        };
        let w_xi = wx(ps, "w_xi", rng)?;
        let w_xf = wx(ps, "w_xf", rng)?;
        let w_xc = wx(ps, "w_xc", rng)?;
        let w_xo = wx(ps, "w_xo", rng)?;
        let wh = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(
                &format!("{prefix}.{name}"),
                init_tensor(&[hidden, hidden], hidden, scheme, rng),
            )
        };
        let w_hi = wh(ps, "w_hi", rng)?;
        let w_hf = wh(ps, "w_hf", rng)?;
        let w_hc = wh(ps, "w_hc", rng)?;
        let w_ho = wh(ps, "w_ho", rng)?;
        let b = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(&format!("{prefix}.{name}"), init_bias(hidden, scheme, rng))
        };
        let b_i = b(ps, "b_i", rng)?;
        let b_f = b(ps, "b_f", rng)?;
        let b_c = b(ps, "b_c", rng)?;
        let b_o = b(ps, "b_o", rng)?;
        Ok(LstmParams {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            b_i,
            b_f,
            b_c,
            b_o,
            input_dim,
            hidden,
        })
    }
}

/// One step of the vector LSTM cell.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    params: &LstmParams,
    x: NodeId,
    prev: Option<&CellState>,
) -> Result<CellState> {
    if tape.value(x).shape() != [params.input_dim] {
        return Err(Error::Dimension(format!(
            "lstm_step input shape {:?} does not match input_dim {}",
            tape.value(x).shape(),
            params.input_dim
        )));
    }
    let (c_prev, h_prev) = match prev {
        Some(state) => (state.c, state.h),
        None => {
            let zeros = Tensor::zeros(&[params.hidden]);
            (tape.input(zeros.clone()), tape.input(zeros))
        }
    };

    let gate = |tape: &mut Tape<T>, wx, wh, b| -> Result<NodeId> {
        let wxn = tape.param(ps, wx);
        let whn = tape.param(ps, wh);
        let bn = tape.param(ps, b);
        let from_x = tape.mat_vec(x, wxn, Some(bn))?;
        let from_h = tape.mat_vec(h_prev, whn, None)?;
        tape.add(from_x, from_h)
    };

    let pre_i = gate(tape, params.w_xi, params.w_hi, params.b_i)?;
    let i = tape.sigmoid(pre_i);
    let pre_f = gate(tape, params.w_xf, params.w_hf, params.b_f)?;
    let f = tape.sigmoid(pre_f);
    let pre_c = gate(tape, params.w_xc, params.w_hc, params.b_c)?;
    let g = tape.tanh(pre_c);
    let pre_o = gate(tape, params.w_xo, params.w_ho, params.b_o)?;
    let o = tape.sigmoid(pre_o);

    let keep = tape.mul(c_prev, f)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok(CellState { c, h })
}

/// The eight convolution kernels and four biases of the convolutional cell.
/// Input-to-hidden kernels map `in_channels -> hidden`, hidden-to-hidden
/// kernels `hidden -> hidden`; all share one spatial size.
#[derive(Debug, Clone)]
pub struct ConvLstmParams {
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_c: ParamId,
    pub b_o: ParamId,
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
}

impl ConvLstmParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::init_split(ps, prefix, in_channels, hidden, kernel, scheme, scheme, rng)
    }

    /// Separate schemes for the input-to-hidden and hidden-to-hidden
    /// kernels. Keeping the recurrent kernels small bounds how far
    /// window-edge effects travel through the same-padded recurrence,
    /// which overlapping-tile stitching relies on.
    #[allow(clippy::too_many_arguments)]
    pub fn init_split<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        kernel: usize,
        x_scheme: InitScheme,
        h_scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let k = kernel;
        let wx = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(
                &format!("{prefix}.{name}"),
                init_tensor(&[hidden, in_channels, k, k], in_channels * k * k, x_scheme, rng),
            )
        };
        let w_xi = wx(ps, "w_xi", rng)?;
        let w_xf = wx(ps, "w_xf", rng)?;
        let w_xc = wx(ps, "w_xc", rng)?;
        let w_xo = wx(ps, "w_xo", rng)?;
        let wh = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(
                &format!("{prefix}.{name}"),
                init_tensor(&[hidden, hidden, k, k], hidden * k * k, h_scheme, rng),
            )
        };
        let w_hi = wh(ps, "w_hi", rng)?;
        let w_hf = wh(ps, "w_hf", rng)?;
        let w_hc = wh(ps, "w_hc", rng)?;
        let w_ho = wh(ps, "w_ho", rng)?;
        let b = |ps: &mut ParamSet<T>, name: &str, rng: &mut Rng| {
            ps.register(&format!("{prefix}.{name}"), init_bias(hidden, x_scheme, rng))
        };
        let b_i = b(ps, "b_i", rng)?;
        let b_f = b(ps, "b_f", rng)?;
        let b_c = b(ps, "b_c", rng)?;
        let b_o = b(ps, "b_o", rng)?;
        Ok(ConvLstmParams {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            b_i,
            b_f,
            b_c,
            b_o,
            in_channels,
            hidden,
            kernel,
        })
    }

    /// Hidden-state spatial extent for an input of `h x w` under `padding`.
    fn state_extent(&self, h: usize, w: usize, padding: Padding) -> (usize, usize) {
        conv2d_out_extent(h, w, self.kernel, self.kernel, padding)
    }
}

/// One step of the convolutional LSTM cell.
///
/// `padding` applies to the input-to-hidden convolutions; hidden-to-hidden
/// convolutions always use same-padding so gate maps align spatially across
/// recurrence steps. Valid padding realizes the per-layer spatial shrinkage
/// of the reference stack.
pub fn clstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    params: &ConvLstmParams,
    x: NodeId,
    prev: Option<&CellState>,
    padding: Padding,
) -> Result<CellState> {
    let (c_in, h_in, w_in) = tape.value(x).dims3()?;
    if c_in != params.in_channels {
        return Err(Error::Dimension(format!(
            "clstm_step input has {c_in} channels, cell expects {}",
            params.in_channels
        )));
    }
    let (sh, sw) = params.state_extent(h_in, w_in, padding);
    let (c_prev, h_prev) = match prev {
        Some(state) => {
            let got = tape.value(state.h).shape().to_vec();
            if got != [params.hidden, sh, sw] {
                return Err(Error::Dimension(format!(
                    "previous state shape {got:?} incompatible with expected [{}, {sh}, {sw}]",
                    params.hidden
                )));
            }
            (state.c, state.h)
        }
        None => {
            let zeros = Tensor::zeros(&[params.hidden, sh, sw]);
            (tape.input(zeros.clone()), tape.input(zeros))
        }
    };

    let gate = |tape: &mut Tape<T>, wx, wh, b| -> Result<NodeId> {
        let wxn = tape.param(ps, wx);
        let whn = tape.param(ps, wh);
        let bn = tape.param(ps, b);
        let from_x = tape.conv2d(x, wxn, Some(bn), padding)?;
        let from_h = tape.conv2d(h_prev, whn, None, Padding::Same)?;
        tape.add(from_x, from_h)
    };

    let pre_i = gate(tape, params.w_xi, params.w_hi, params.b_i)?;
    let i = tape.sigmoid(pre_i);
    let pre_f = gate(tape, params.w_xf, params.w_hf, params.b_f)?;
    let f = tape.sigmoid(pre_f);
    let pre_c = gate(tape, params.w_xc, params.w_hc, params.b_c)?;
    let g = tape.tanh(pre_c);
    let pre_o = gate(tape, params.w_xo, params.w_ho, params.b_o)?;
    let o = tape.sigmoid(pre_o);

    let keep = tape.mul(c_prev, f)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let c_act = tape.tanh(c);
    let h = tape.mul(o, c_act)?;
    Ok(CellState { c, h })
}

/// Bi-directional convolutional LSTM over a slice sequence: one cell scans
/// z = 1..N, the other z = N..1, both starting from zero states; the output
/// at each slice concatenates the two hidden states (channels = 2 * hidden).
pub fn bdclstm_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    fwd: &ConvLstmParams,
    bwd: &ConvLstmParams,
    seq: &[NodeId],
    padding: Padding,
) -> Result<Vec<NodeId>> {
    if seq.is_empty() {
        return Err(Error::Usage("bdclstm_forward needs a nonempty sequence".into()));
    }
    let mut h_fwd = Vec::with_capacity(seq.len());
    let mut state: Option<CellState> = None;
    for &x in seq {
        let next = clstm_step(tape, ps, fwd, x, state.as_ref(), padding)?;
        h_fwd.push(next.h);
        state = Some(next);
    }

    let mut h_bwd_rev = Vec::with_capacity(seq.len());
    let mut state: Option<CellState> = None;
    for &x in seq.iter().rev() {
        let next = clstm_step(tape, ps, bwd, x, state.as_ref(), padding)?;
        h_bwd_rev.push(next.h);
        state = Some(next);
    }
    h_bwd_rev.reverse();

    h_fwd
        .into_iter()
        .zip(h_bwd_rev)
        .map(|(f, b)| tape.concat_channels(f, b))
        .collect()
}

/// One entry of the deep stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StackLayer {
    /// Bi-directional convolutional LSTM; valid input convolutions shrink the
    /// map by `kernel - 1` per axis, output channels are `2 * hidden`.
    BdcLstm { hidden: usize, kernel: usize },
    MaxPool2,
    Deconv2,
    Dropout { p: f64 },
    /// Plain (non-recurrent) valid convolution.
    Conv { out_channels: usize, kernel: usize },
}

/// Ordered layer list of the deep bi-directional stack.
#[derive(Debug, Clone)]
pub struct BdcLstmStackConfig {
    pub in_channels: usize,
    pub layers: Vec<StackLayer>,
}

impl BdcLstmStackConfig {
    /// The full-scale reference architecture: 64-channel input, dropout
    /// p=0.5 after the input, the pooling and the deconvolution; two pairs
    /// of bi-directional layers with 5x5 kernels; 3x3 and 1x1 valid
    /// convolutions at the tail. Per-slice maps keep 64 channels
    /// throughout, so each direction carries 32 hidden channels and the
    /// concatenated output restores 64.
    pub fn reference() -> Self {
        Self::with_widths(64, 32, 5, 64)
    }

    /// Reduced-width stack for gradient checking: 8-channel input, 3x3
    /// kernels, 8 hidden units per bi-directional layer.
    pub fn reduced() -> Self {
        Self::with_widths(8, 4, 3, 8)
    }

    /// Same layer pattern as [`BdcLstmStackConfig::reference`] with configurable
    /// widths. `hidden` is per direction; bi-directional outputs carry
    /// `2 * hidden` channels, which must equal `in_channels` for the pattern
    /// to chain.
    pub fn with_widths(in_channels: usize, hidden: usize, kernel: usize, conv_channels: usize) -> Self {
        let bdc = StackLayer::BdcLstm { hidden, kernel };
        let drop = StackLayer::Dropout { p: 0.5 };
        BdcLstmStackConfig {
            in_channels,
            layers: vec![
                drop,
                bdc,
                bdc,
                StackLayer::MaxPool2,
                drop,
                bdc,
                bdc,
                StackLayer::Deconv2,
                drop,
                StackLayer::Conv {
                    out_channels: conv_channels,
                    kernel: 3,
                },
                StackLayer::Conv {
                    out_channels: 2,
                    kernel: 1,
                },
            ],
        }
    }

    /// Channel count after every layer; validates the channel arithmetic.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut c = self.in_channels;
        let mut chain = vec![c];
        for layer in &self.layers {
            c = match *layer {
                StackLayer::BdcLstm { hidden, .. } => 2 * hidden,
                StackLayer::MaxPool2 | StackLayer::Deconv2 | StackLayer::Dropout { .. } => c,
                StackLayer::Conv { out_channels, .. } => out_channels,
            };
            chain.push(c);
        }
        chain
    }

    pub fn out_channels(&self) -> usize {
        *self.channel_chain().last().unwrap()
    }

    /// Spatial extent after the full stack for an `extent x extent` input.
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        let mut e = extent;
        for (idx, layer) in self.layers.iter().enumerate() {
            e = match *layer {
                StackLayer::BdcLstm { kernel, .. } | StackLayer::Conv { kernel, .. } => {
                    if kernel > e {
                        return Err(Error::Dimension(format!(
                            "stack layer {idx}: kernel {kernel} exceeds extent {e}"
                        )));
                    }
                    e - kernel + 1
                }
                StackLayer::MaxPool2 => {
                    if e < 2 {
                        return Err(Error::Dimension(format!(
                            "stack layer {idx}: extent {e} too small to pool"
                        )));
                    }
                    if !e.is_multiple_of(2) {
                        return Err(Error::Dimension(format!(
                            "stack layer {idx}: extent {e} must be even for seamless tiling"
                        )));
                    }
                    e / 2
                }
                StackLayer::Deconv2 => 2 * e,
                StackLayer::Dropout { .. } => e,
            };
        }
        Ok(e)
    }

    /// Input surplus over the output for a square window of `window` pixels
    /// per axis (the overlap margin for tiled inference).
    pub fn margin(&self, window: usize) -> Result<usize> {
        let out = self.output_extent(window)?;
        if out > window {
            return Err(Error::Config(format!(
                "stack grows {window} -> {out}; tiling expects shrinkage"
            )));
        }
        Ok(window - out)
    }

    /// Per-layer shape walk for a `[C, extent, extent]` input.
    pub fn shape_trace(&self, extent: usize) -> Result<Vec<(String, [usize; 3])>> {
        let channels = self.channel_chain();
        let mut e = extent;
        let mut rows = vec![("input".to_string(), [self.in_channels, e, e])];
        let mut partial = BdcLstmStackConfig {
            in_channels: self.in_channels,
            layers: Vec::new(),
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            partial.layers.push(*layer);
            e = partial.output_extent(extent)?;
            let label = match *layer {
                StackLayer::BdcLstm { hidden, kernel } => {
                    format!("bdclstm(hidden={hidden}, {kernel}x{kernel})")
                }
                StackLayer::MaxPool2 => "max_pool2".to_string(),
                StackLayer::Deconv2 => "deconv2".to_string(),
                StackLayer::Dropout { p } => format!("dropout(p={p})"),
                StackLayer::Conv { out_channels, kernel } => {
                    format!("conv({out_channels}, {kernel}x{kernel})")
                }
            };
            rows.push((label, [channels[idx + 1], e, e]));
        }
        Ok(rows)
    }

    /// The checkpoint chain: the input shape plus the shape after every
    /// size-changing stage, with consecutive bi-directional layers reported
    /// once (a pair acts as one unit).
    pub fn shape_chain(&self, extent: usize) -> Result<String> {
        let trace = self.shape_trace(extent)?;
        let mut checkpoints = vec![trace[0].1];
        for (idx, (_, shape)) in trace.iter().enumerate().skip(1) {
            let layer = &self.layers[idx - 1];
            if matches!(layer, StackLayer::Dropout { .. }) {
                continue;
            }
            let next_is_bdc = matches!(self.layers.get(idx), Some(StackLayer::BdcLstm { .. }));
            if matches!(layer, StackLayer::BdcLstm { .. }) && next_is_bdc {
                continue;
            }
            checkpoints.push(*shape);
        }
        Ok(checkpoints
            .iter()
            .map(|s| format!("{}x{}x{}", s[0], s[1], s[2]))
            .collect::<Vec<_>>()
            .join(" -> "))
    }
}

/// Parameters of one stack layer.
#[derive(Debug, Clone)]
pub enum StackLayerParams {
    BdcLstm {
        fwd: ConvLstmParams,
        bwd: ConvLstmParams,
    },
    Deconv {
        w: ParamId,
        b: ParamId,
    },
    Conv {
        w: ParamId,
        b: ParamId,
    },
    Stateless,
}

/// All parameters of a deep bi-directional stack.
#[derive(Debug, Clone)]
pub struct BdcLstmStackParams {
    pub layers: Vec<StackLayerParams>,
}

impl BdcLstmStackParams {
    pub fn init<T: Scalar>(
        ps: &mut ParamSet<T>,
        prefix: &str,
        config: &BdcLstmStackConfig,
        scheme: InitScheme,
        rng: &mut Rng,
    ) -> Result<Self> {
        let channels = config.channel_chain();
        let mut layers = Vec::with_capacity(config.layers.len());
        for (idx, layer) in config.layers.iter().enumerate() {
            let c_in = channels[idx];
            // Under the fan-in-scaled scheme the recurrent kernels keep the
            // small fixed bound so edge effects stay within the tiling
            // margin at initialization.
            let h_scheme = match scheme {
                InitScheme::FanInUniform => InitScheme::Uniform(0.02),
                other => other,
            };
            let lp = match *layer {
                StackLayer::BdcLstm { hidden, kernel } => StackLayerParams::BdcLstm {
                    fwd: ConvLstmParams::init_split(
                        ps,
                        &format!("{prefix}.layer{idx}.fwd"),
                        c_in,
                        hidden,
                        kernel,
                        scheme,
                        h_scheme,
                        rng,
                    )?,
                    bwd: ConvLstmParams::init_split(
                        ps,
                        &format!("{prefix}.layer{idx}.bwd"),
                        c_in,
                        hidden,
                        kernel,
                        scheme,
                        h_scheme,
                        rng,
                    )?,
                },
                StackLayer::Deconv2 => StackLayerParams::Deconv {
                    w: ps.register(
                        &format!("{prefix}.layer{idx}.deconv.w"),
                        init_tensor(&[c_in, c_in, 2, 2], c_in * 4, scheme, rng),
                    )?,
                    b: ps.register(
                        &format!("{prefix}.layer{idx}.deconv.b"),
                        init_bias(c_in, scheme, rng),
                    )?,
                },
                StackLayer::Conv { out_channels, kernel } => StackLayerParams::Conv {
                    w: ps.register(
                        &format!("{prefix}.layer{idx}.conv.w"),
                        init_tensor(
                            &[out_channels, c_in, kernel, kernel],
                            c_in * kernel * kernel,
                            scheme,
                            rng,
                        ),
                    )?,
                    b: ps.register(
                        &format!("{prefix}.layer{idx}.conv.b"),
                        init_bias(out_channels, scheme, rng),
                    )?,
                },
                StackLayer::MaxPool2 | StackLayer::Dropout { .. } => StackLayerParams::Stateless,
            };
            layers.push(lp);
        }
        Ok(BdcLstmStackParams { layers })
    }
}

/// Runs the deep stack over a slice sequence. `dropout_rng` enables training
/// mode (inverted dropout with masks drawn from the stream); `None` is
/// evaluation mode, where dropout layers are the identity. The stack is fully
/// convolutional along z: any sequence length works.
pub fn deep_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ps: &ParamSet<T>,
    config: &BdcLstmStackConfig,
    params: &BdcLstmStackParams,
    seq: &[NodeId],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<Vec<NodeId>> {
    if seq.is_empty() {
        return Err(Error::Usage("deep_forward needs a nonempty sequence".into()));
    }
    let (c, h, w) = tape.value(seq[0]).dims3()?;
    if c != config.in_channels || h != w {
        let chain = config
            .shape_chain(h)
            .unwrap_or_else(|_| format!("{}xNxN -> ... (input too small)", config.in_channels));
        return Err(Error::Dimension(format!(
            "deep stack expects square {}-channel slices (chain {chain}), got {c}x{h}x{w}",
            config.in_channels
        )));
    }
    config.output_extent(h)?;

    let mut current: Vec<NodeId> = seq.to_vec();
    for (layer, lp) in config.layers.iter().zip(params.layers.iter()) {
        current = match (*layer, lp) {
            (StackLayer::BdcLstm { .. }, StackLayerParams::BdcLstm { fwd, bwd }) => {
                bdclstm_forward(tape, ps, fwd, bwd, &current, Padding::Valid)?
            }
            (StackLayer::MaxPool2, _) => current
                .iter()
                .map(|&n| tape.max_pool2(n))
                .collect::<Result<Vec<_>>>()?,
            (StackLayer::Deconv2, StackLayerParams::Deconv { w, b }) => {
                let wn = tape.param(ps, *w);
                let bn = tape.param(ps, *b);
                current
                    .iter()
                    .map(|&n| tape.deconv2(n, wn, Some(bn)))
                    .collect::<Result<Vec<_>>>()?
            }
            (StackLayer::Dropout { p }, _) => match dropout_rng.as_deref_mut() {
                Some(rng) => current
                    .iter()
                    .map(|&n| tape.dropout(n, p, rng))
                    .collect::<Result<Vec<_>>>()?,
                None => current,
            },
            (StackLayer::Conv { .. }, StackLayerParams::Conv { w, b }) => {
                let wn = tape.param(ps, *w);
                let bn = tape.param(ps, *b);
                current
                    .iter()
                    .map(|&n| tape.conv2d(n, wn, Some(bn), Padding::Valid))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => {
                return Err(Error::Config(
                    "stack parameters do not match the layer list".into(),
                ))
            }
        };
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_lstm(ps: &mut ParamSet<f64>, input_dim: usize, hidden: usize) -> LstmParams {
        let mut rng = Rng::from_seed(0);
        let p = LstmParams::init(ps, "cell", input_dim, hidden, InitScheme::Uniform(0.0), &mut rng)
            .unwrap();
        p
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let mut ps = ParamSet::new();
        let params = zero_lstm(&mut ps, 3, 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![3], vec![0.4, -1.0, 2.0]).unwrap());
        let state = lstm_step(&mut tape, &ps, &params, x, None).unwrap();
        assert!(tape.value(state.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(state.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_parameters_with_unit_memory() {
        // gates are 0.5, candidate 0 -> c = 0.5, h = 0.5 * tanh(0.5)
        let mut ps = ParamSet::new();
        let params = zero_lstm(&mut ps, 3, 2);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let prev = CellState {
            c: tape.input(Tensor::full(&[2], 1.0)),
            h: tape.input(Tensor::zeros(&[2])),
        };
        let state = lstm_step(&mut tape, &ps, &params, x, Some(&prev)).unwrap();
        for &c in tape.value(state.c).data() {
            assert!((c - 0.5).abs() < 1e-15);
        }
        let expected_h = 0.5 * 0.5f64.tanh();
        for &h in tape.value(state.h).data() {
            assert!((h - expected_h).abs() < 1e-12, "h = {h}, want {expected_h}");
        }
    }

    #[test]
    fn saturated_forget_gate_preserves_memory() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::from_seed(0);
        let params =
            LstmParams::init(&mut ps, "cell", 2, 3, InitScheme::Uniform(0.0), &mut rng).unwrap();
        ps.value_mut(params.b_f).data_mut().fill(20.0);

        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let memory = vec![1.5, -2.0, 0.25];
        let prev = CellState {
            c: tape.input(Tensor::new(vec![3], memory.clone()).unwrap()),
            h: tape.input(Tensor::zeros(&[3])),
        };
        let state = lstm_step(&mut tape, &ps, &params, x, Some(&prev)).unwrap();
        for (got, want) in tape.value(state.c).data().iter().zip(memory.iter()) {
            assert!((got - want).abs() < 1e-6, "c = {got}, want {want}");
        }
    }

    #[test]
    fn gate_ranges_hold_for_random_parameters() {
        let mut rng = Rng::from_seed(77);
        for trial in 0..10 {
            let mut ps = ParamSet::new();
            let params = ConvLstmParams::init(
                &mut ps,
                "cell",
                2,
                3,
                3,
                InitScheme::Uniform(1.0),
                &mut rng,
            )
            .unwrap();
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_fn(&[2, 5, 5], |_| rng.uniform(-2.0, 2.0)));
            let state = clstm_step(&mut tape, &ps, &params, x, None, Padding::Same).unwrap();
            for &h in tape.value(state.h).data() {
                assert!(h > -1.0 && h < 1.0, "trial {trial}: h = {h}");
            }
        }
    }

    #[test]
    fn single_slice_with_copied_parameters_duplicates_halves() {
        let mut rng = Rng::from_seed(5);
        let mut ps = ParamSet::new();
        let fwd =
            ConvLstmParams::init(&mut ps, "fwd", 1, 2, 3, InitScheme::Uniform(0.5), &mut rng)
                .unwrap();
        // Same values registered under different names.
        let mut bwd_src = Rng::from_seed(5);
        let bwd =
            ConvLstmParams::init(&mut ps, "bwd", 1, 2, 3, InitScheme::Uniform(0.5), &mut bwd_src)
                .unwrap();

        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 4, 4], |_| rng.uniform(-1.0, 1.0)));
        let out = bdclstm_forward(&mut tape, &ps, &fwd, &bwd, &[x], Padding::Same).unwrap();
        let v = tape.value(out[0]);
        let plane = 4 * 4;
        for c in 0..2 {
            for p in 0..plane {
                assert_eq!(
                    v.data()[c * plane + p].to_bits(),
                    v.data()[(c + 2) * plane + p].to_bits()
                );
            }
        }
    }

    #[test]
    fn bdclstm_valid_layer_shapes() {
        // One 5x5 valid bi-directional layer on 126x126 slices shrinks to
        // 122x122 and doubles the hidden width; run at reduced channels.
        let mut rng = Rng::from_seed(6);
        let mut ps = ParamSet::<f32>::new();
        let fwd = ConvLstmParams::init(&mut ps, "f", 8, 8, 5, InitScheme::Uniform(0.02), &mut rng)
            .unwrap();
        let bwd = ConvLstmParams::init(&mut ps, "b", 8, 8, 5, InitScheme::Uniform(0.02), &mut rng)
            .unwrap();
        let mut tape = Tape::new();
        let seq: Vec<NodeId> = (0..3)
            .map(|_| tape.input(Tensor::zeros(&[8, 126, 126])))
            .collect();
        let out = bdclstm_forward(&mut tape, &ps, &fwd, &bwd, &seq, Padding::Valid).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(tape.value(out[0]).shape(), &[16, 122, 122]);

        // Full-width arithmetic: a 64-hidden layer emits 128 channels at 122,
        // and the pair of layers in the reference stack lands on 118.
        assert_eq!(conv2d_out_extent(126, 126, 5, 5, Padding::Valid), (122, 122));
        assert_eq!(conv2d_out_extent(122, 122, 5, 5, Padding::Valid), (118, 118));
    }

    #[test]
    fn empty_sequence_is_a_usage_error() {
        let mut rng = Rng::from_seed(7);
        let mut ps = ParamSet::<f64>::new();
        let fwd = ConvLstmParams::init(&mut ps, "f", 1, 1, 3, InitScheme::Uniform(0.1), &mut rng)
            .unwrap();
        let bwd = ConvLstmParams::init(&mut ps, "b", 1, 1, 3, InitScheme::Uniform(0.1), &mut rng)
            .unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            bdclstm_forward(&mut tape, &ps, &fwd, &bwd, &[], Padding::Same),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reference_stack_shape_chain() {
        let cfg = BdcLstmStackConfig::reference();
        let chain = cfg.shape_chain(126).unwrap();
        assert_eq!(
            chain,
            "64x126x126 -> 64x118x118 -> 64x59x59 -> 64x51x51 -> 64x102x102 -> 64x100x100 -> 2x100x100"
        );
        assert_eq!(cfg.margin(126).unwrap(), 26);
    }

    #[test]
    fn reduced_stack_arithmetic() {
        let cfg = BdcLstmStackConfig::reduced();
        assert_eq!(cfg.output_extent(20).unwrap(), 6);
        assert_eq!(cfg.margin(20).unwrap(), 14);
        assert_eq!(cfg.out_channels(), 2);
    }

    #[test]
    fn deep_forward_matches_trace_and_is_deterministic_in_eval() {
        let cfg = BdcLstmStackConfig::reduced();
        let mut rng = Rng::from_seed(11);
        let mut ps = ParamSet::<f64>::new();
        let params =
            BdcLstmStackParams::init(&mut ps, "deep", &cfg, InitScheme::Uniform(0.02), &mut rng)
                .unwrap();

        let slices: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::from_fn(&[8, 20, 20], |_| rng.uniform(-1.0, 1.0)))
            .collect();

        let run = |ps: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let seq: Vec<NodeId> = slices.iter().map(|s| tape.input(s.clone())).collect();
            let out = deep_forward(&mut tape, ps, &cfg, &params, &seq, None).unwrap();
            out.iter().map(|&n| tape.value(n).clone()).collect::<Vec<_>>()
        };

        let a = run(&ps);
        let b = run(&ps);
        assert_eq!(a.len(), 3);
        assert_eq!(a[0].shape(), &[2, 6, 6]);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn deep_forward_rejects_wrong_channels() {
        let cfg = BdcLstmStackConfig::reduced();
        let mut rng = Rng::from_seed(12);
        let mut ps = ParamSet::<f64>::new();
        let params =
            BdcLstmStackParams::init(&mut ps, "deep", &cfg, InitScheme::Uniform(0.02), &mut rng)
                .unwrap();
        let mut tape = Tape::new();
        let bad = tape.input(Tensor::zeros(&[4, 20, 20]));
        let err = deep_forward(&mut tape, &ps, &cfg, &params, &[bad], None).unwrap_err();
        assert!(err.to_string().contains("8x20x20"), "{err}");
    }
}
