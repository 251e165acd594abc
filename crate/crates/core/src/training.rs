//! Training: weighted cross-entropy with per-voxel weight maps, the two
//! optimizers with their reference hyperparameters, the halving learning-rate
//! schedule, gradient clipping, dihedral-8 augmentation, the decoupled and
//! end-to-end training loops, and checkpoint I/O.
//!
//! Weight maps emphasize separating boundaries between touching objects:
//! `w(v) = w_class(v) + w0 * exp(-(d1 + d2)^2 / (2 sigma^2))` where `d1`/`d2`
//! are exact Euclidean distances to the nearest and second-nearest foreground
//! components (`w0 = 10`, `sigma = 5`, class frequencies balanced).
//!
//! Checkpoints are little-endian: magic `ANSG`, version, dtype tag,
//! iteration, seed, named parameter table (name, rank, extents, raw
//! scalars), per-parameter group tags, then first/second moment tables in
//! parameter order. Loss traces serialize as CSV `iteration,lr,loss`.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{GradientSet, NodeId, ParamSet, Tape};
use crate::data::ImageStack;
use crate::error::{Error, Result};
use crate::metrics::{connected_components, Connectivity};
use crate::pipeline::{slice_features, PipelineConfig, SegModel, SequenceMode};
use crate::recurrent::deep_forward;
use crate::rng::Rng;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::{crop_padded, Padding, Tensor};

/// Shape of the boundary-emphasis weight map.
#[derive(Debug, Clone, Copy)]
pub struct WeightMapParams {
    pub w0: f64,
    pub sigma: f64,
    /// Add class-frequency balancing (`n / (2 * count_class)`) as the base
    /// weight; otherwise the base weight is 1.
    pub class_balance: bool,
}

impl Default for WeightMapParams {
    fn default() -> Self {
        WeightMapParams {
            w0: 10.0,
            sigma: 5.0,
            class_balance: true,
        }
    }
}

/// Squared Euclidean distance transform (two-pass lower-envelope method),
/// exact for grid distances.
fn squared_edt(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
    const FAR: f64 = 1e20;
    let mut field: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { FAR }).collect();

    let mut f = vec![0.0f64; h.max(w)];
    let mut d = vec![0.0f64; h.max(w)];
    let mut v = vec![0usize; h.max(w)];
    let mut z = vec![0.0f64; h.max(w) + 1];

    let transform = |n: usize, f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]| {
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            loop {
                let p = v[k];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                    / (2.0 * q as f64 - 2.0 * p as f64);
                if s <= z[k] {
                    if k == 0 {
                        // q dominates everywhere seen so far.
                        v[0] = q;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for q in 0..n {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            d[q] = (q as f64 - p as f64) * (q as f64 - p as f64) + f[p];
        }
    };

    for y in 0..h {
        f[..w].copy_from_slice(&field[y * w..(y + 1) * w]);
        transform(w, &f, &mut d, &mut v, &mut z);
        field[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            f[y] = field[y * w + x];
        }
        transform(h, &f, &mut d, &mut v, &mut z);
        for y in 0..h {
            field[y * w + x] = d[y];
        }
    }
    field
}

/// Per-voxel loss weights for one binary label plane, shaped `[1, h, w]`.
/// With fewer than two foreground components the separation term is zero.
pub fn compute_weight_map<T: Scalar>(
    label: &[u8],
    h: usize,
    w: usize,
    params: &WeightMapParams,
) -> Result<Tensor<T>> {
    if label.len() != h * w {
        return Err(Error::Dimension(format!(
            "label of {} voxels does not cover {h}x{w}",
            label.len()
        )));
    }
    let n = (h * w) as f64;
    let fg = label.iter().filter(|&&l| l != 0).count() as f64;
    let bg = n - fg;
    let (w_bg, w_fg) = if params.class_balance {
        (
            if bg > 0.0 { n / (2.0 * bg) } else { 1.0 },
            if fg > 0.0 { n / (2.0 * fg) } else { 1.0 },
        )
    } else {
        (1.0, 1.0)
    };

    let mut weights: Vec<f64> = label
        .iter()
        .map(|&l| if l != 0 { w_fg } else { w_bg })
        .collect();

    let components = connected_components(label, h, w, Connectivity::Eight);
    if components.n_segments >= 2 {
        let mut d1 = vec![f64::INFINITY; h * w];
        let mut d2 = vec![f64::INFINITY; h * w];
        for seg in 1..=components.n_segments as u32 {
            let mask: Vec<bool> = components.ids.iter().map(|&id| id == seg).collect();
            for (i, sq) in squared_edt(&mask, h, w).into_iter().enumerate() {
                let dist = sq.sqrt();
                if dist < d1[i] {
                    d2[i] = d1[i];
                    d1[i] = dist;
                } else if dist < d2[i] {
                    d2[i] = dist;
                }
            }
        }
        let denom = 2.0 * params.sigma * params.sigma;
        for i in 0..h * w {
            let sum = d1[i] + d2[i];
            weights[i] += params.w0 * (-(sum * sum) / denom).exp();
        }
    }

    Tensor::new(vec![1, h, w], weights.into_iter().map(T::from_f64).collect())
}

/// Which optimizer a hyperparameter block drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy)]
pub enum LrSchedule {
    Constant(f64),
    /// `base * 2^-(iteration / every)`, clamped below at `floor`.
    HalveEvery { base: f64, every: u64, floor: f64 },
}

impl LrSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::HalveEvery { base, every, floor } => {
                let halvings = (iteration / every).min(200) as i32;
                (base * 0.5f64.powi(halvings)).max(floor)
            }
        }
    }
}

/// The reference recurrent-network schedule: 1e-3 halving every 2000
/// iterations with floor 1e-5.
pub fn lr_schedule(iteration: u64) -> f64 {
    LrSchedule::HalveEvery {
        base: 1e-3,
        every: 2000,
        floor: 1e-5,
    }
    .at(iteration)
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    /// First moment coefficient.
    pub beta1: f64,
    /// Second moment coefficient.
    pub beta2: f64,
    pub epsilon: f64,
    /// Smoothing constant of the squared-gradient cache.
    pub alpha: f64,
    pub schedule: LrSchedule,
}

impl OptimizerHyper {
    /// The reference feature-extractor setting: beta1 0.9, beta2 0.999,
    /// epsilon 1e-10, constant learning rate 5e-5.
    pub fn adam_reference() -> Self {
        OptimizerHyper {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-10,
            alpha: 0.9,
            schedule: LrSchedule::Constant(5e-5),
        }
    }

    /// The recurrent-stack setting: smoothing constant 0.9, epsilon 1e-5,
    /// learning rate 1e-3 halving every 2000 iterations until 1e-5.
    pub fn rmsprop_reference() -> Self {
        OptimizerHyper {
            kind: OptimizerKind::RmsProp,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-5,
            alpha: 0.9,
            schedule: LrSchedule::HalveEvery {
                base: 1e-3,
                every: 2000,
                floor: 1e-5,
            },
        }
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        self.schedule.at(iteration)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !in_unit(self.alpha) {
            return Err(Error::Config(
                "moment/smoothing coefficients must lie in (0, 1)".into(),
            ));
        }
        if self.epsilon <= 0.0 || self.lr(0) <= 0.0 {
            return Err(Error::Config("epsilon and base learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Which optimizer block updates a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Fcn,
    Rnn,
}

/// Parameters plus optimizer state: first/second moments (or the rmsprop
/// cache in the first slot), the iteration counter and the run seed.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ParamSet<T>,
    pub groups: Vec<ParamGroup>,
    /// First moment (or rmsprop squared-gradient cache).
    pub m: Vec<Tensor<T>>,
    /// Second moment (unused by rmsprop).
    pub v: Vec<Tensor<T>>,
    pub iteration: u64,
    pub seed: u64,
}

impl<T: Scalar> TrainState<T> {
    /// Moments start at zero; parameters named `deep.*` belong to the
    /// recurrent group, everything else to the feature-extractor group.
    pub fn new(params: ParamSet<T>, seed: u64) -> Self {
        let groups = params
            .iter()
            .map(|(_, name, _)| {
                if name.starts_with("deep.") {
                    ParamGroup::Rnn
                } else {
                    ParamGroup::Fcn
                }
            })
            .collect();
        let m = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        TrainState {
            params,
            groups,
            m,
            v,
            iteration: 0,
            seed,
        }
    }
}

/// Elementwise clamp of every gradient to `[-bound, bound]`; NaN gradients
/// are a numeric error.
pub fn clip_gradients<T: Scalar>(grads: &mut GradientSet<T>, bound: f64) -> Result<()> {
    let lo = T::from_f64(-bound);
    let hi = T::from_f64(bound);
    for (id, g) in grads.iter_mut() {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter index {} before clipping",
                id.0
            )));
        }
        for v in g.data_mut() {
            *v = v.clamp_to(lo, hi);
        }
    }
    Ok(())
}

fn check_grad_shape<T: Scalar>(param: &Tensor<T>, grad: &Tensor<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match parameter shape {:?}",
            grad.shape(),
            param.shape()
        )));
    }
    Ok(())
}

fn adam_update<T: Scalar>(
    param: &mut Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    grad: &Tensor<T>,
    hyper: &OptimizerHyper,
    t: u64,
) {
    let beta1 = T::from_f64(hyper.beta1);
    let beta2 = T::from_f64(hyper.beta2);
    let one_m_b1 = T::from_f64(1.0 - hyper.beta1);
    let one_m_b2 = T::from_f64(1.0 - hyper.beta2);
    let corr1 = T::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hyper.beta2.powi(t as i32));
    let lr = T::from_f64(hyper.lr(t - 1));
    let eps = T::from_f64(hyper.epsilon);
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let mi = beta1 * m.data()[i] + one_m_b1 * g;
        let vi = beta2 * v.data()[i] + one_m_b2 * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / corr1;
        let v_hat = vi / corr2;
        param.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

fn rmsprop_update<T: Scalar>(
    param: &mut Tensor<T>,
    cache: &mut Tensor<T>,
    grad: &Tensor<T>,
    hyper: &OptimizerHyper,
    iteration: u64,
) {
    let alpha = T::from_f64(hyper.alpha);
    let one_m_a = T::from_f64(1.0 - hyper.alpha);
    let lr = T::from_f64(hyper.lr(iteration));
    let eps = T::from_f64(hyper.epsilon);
    for i in 0..param.numel() {
        let g = grad.data()[i];
        let c = alpha * cache.data()[i] + one_m_a * g * g;
        cache.data_mut()[i] = c;
        param.data_mut()[i] -= lr * g / (c + eps).sqrt();
    }
}

/// One bias-corrected first/second-moment step over every parameter with a
/// gradient: `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &GradientSet<T>,
    hyper: &OptimizerHyper,
) -> Result<()> {
    hyper.validate()?;
    let t = state.iteration + 1;
    for (id, grad) in grads.iter() {
        check_grad_shape(state.params.value(id), grad)?;
        adam_update(
            state.params.value_mut(id),
            &mut state.m[id.0],
            &mut state.v[id.0],
            grad,
            hyper,
            t,
        );
    }
    state.iteration = t;
    Ok(())
}

/// One squared-gradient-cache step over every parameter with a gradient:
/// `cache <- alpha cache + (1 - alpha) g^2; p <- p - lr g / sqrt(cache + eps)`.
pub fn rmsprop_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &GradientSet<T>,
    hyper: &OptimizerHyper,
) -> Result<()> {
    hyper.validate()?;
    let it = state.iteration;
    for (id, grad) in grads.iter() {
        check_grad_shape(state.params.value(id), grad)?;
        rmsprop_update(state.params.value_mut(id), &mut state.m[id.0], grad, hyper, it);
    }
    state.iteration += 1;
    Ok(())
}

/// Routes each parameter group to its own optimizer (feature extractor vs
/// recurrent stack); used by the end-to-end mode. Advances the shared
/// iteration counter once.
pub fn optimizer_step<T: Scalar>(
    state: &mut TrainState<T>,
    grads: &GradientSet<T>,
    fcn: &OptimizerHyper,
    rnn: &OptimizerHyper,
) -> Result<()> {
    let t = state.iteration + 1;
    for (id, grad) in grads.iter() {
        check_grad_shape(state.params.value(id), grad)?;
        let hyper = match state.groups[id.0] {
            ParamGroup::Fcn => fcn,
            ParamGroup::Rnn => rnn,
        };
        match hyper.kind {
            OptimizerKind::Adam => adam_update(
                state.params.value_mut(id),
                &mut state.m[id.0],
                &mut state.v[id.0],
                grad,
                hyper,
                t,
            ),
            OptimizerKind::RmsProp => rmsprop_update(
                state.params.value_mut(id),
                &mut state.m[id.0],
                grad,
                hyper,
                t - 1,
            ),
        }
    }
    state.iteration = t;
    Ok(())
}

/// One of the eight square symmetries: an optional horizontal flip followed
/// by `k` quarter-turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DihedralTransform(u8);

impl DihedralTransform {
    pub fn new(index: u8) -> Self {
        DihedralTransform(index % 8)
    }

    pub fn identity() -> Self {
        DihedralTransform(0)
    }

    pub fn sample(rng: &mut Rng) -> Self {
        DihedralTransform(rng.index(8) as u8)
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    fn flips(&self) -> bool {
        self.0 >= 4
    }

    fn quarter_turns(&self) -> u8 {
        self.0 % 4
    }

    /// Whether the transform swaps the two axes.
    pub fn rotates_axes(&self) -> bool {
        self.quarter_turns() % 2 == 1
    }

    /// Applies the transform to a row-major plane, returning the transformed
    /// data and its new extents.
    pub fn apply_plane<V: Copy>(&self, data: &[V], h: usize, w: usize) -> (Vec<V>, usize, usize) {
        let mut out = data.to_vec();
        let (mut h, mut w) = (h, w);
        if self.flips() {
            let mut flipped = out.clone();
            for y in 0..h {
                for x in 0..w {
                    flipped[y * w + x] = out[y * w + (w - 1 - x)];
                }
            }
            out = flipped;
        }
        for _ in 0..self.quarter_turns() {
            // One quarter-turn clockwise: out[y][x] = in[h-1-x][y].
            let mut rotated = out.clone();
            rotated.resize(h * w, out[0]);
            for y in 0..w {
                for x in 0..h {
                    rotated[y * h + x] = out[(h - 1 - x) * w + y];
                }
            }
            out = rotated;
            std::mem::swap(&mut h, &mut w);
        }
        (out, h, w)
    }

    /// Applies the transform to every channel of a `[C, H, W]` tensor.
    pub fn apply_tensor<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, h, w) = t.dims3()?;
        let plane = h * w;
        let mut data = Vec::with_capacity(t.numel());
        let (mut oh, mut ow) = (h, w);
        for ch in 0..c {
            let (out, nh, nw) = self.apply_plane(&t.data()[ch * plane..(ch + 1) * plane], h, w);
            data.extend(out);
            (oh, ow) = (nh, nw);
        }
        Tensor::new(vec![c, oh, ow], data)
    }
}

/// One training example: image channels, binary labels and loss weights over
/// the same plane.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub image: Tensor<T>,
    pub label: Vec<u8>,
    pub weights: Tensor<T>,
}

impl<T: Scalar> TrainSample<T> {
    /// Applies one dihedral transform identically to image, label and
    /// weights.
    pub fn transformed(&self, t: DihedralTransform) -> Result<TrainSample<T>> {
        let (_, h, w) = self.image.dims3()?;
        let (label, _, _) = t.apply_plane(&self.label, h, w);
        Ok(TrainSample {
            image: t.apply_tensor(&self.image)?,
            label,
            weights: t.apply_tensor(&self.weights)?,
        })
    }
}

/// Draws one of the eight dihedral transforms uniformly and applies it.
pub fn augment<T: Scalar>(
    sample: &TrainSample<T>,
    rng: &mut Rng,
) -> Result<(TrainSample<T>, DihedralTransform)> {
    let t = DihedralTransform::sample(rng);
    Ok((sample.transformed(t)?, t))
}

/// Which parts of the model a run trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Feature extractor plus 1x1 head against 2D labels.
    FcnOnly,
    /// Recurrent stack on frozen feature maps.
    RnnOnly,
    /// Both, backpropagating through the slice window into the extractor.
    EndToEnd,
}

/// Training-loop settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: u64,
    pub seed: u64,
    /// Square input tile of feature-extractor training.
    pub fcn_tile: usize,
    /// Square output tile of recurrent/end-to-end training.
    pub rnn_tile: usize,
    /// Slice-window context radius.
    pub rho: usize,
    pub augment: bool,
    pub fcn_opt: OptimizerHyper,
    pub rnn_opt: OptimizerHyper,
    pub clip_bound: f64,
    pub weight_map: WeightMapParams,
    /// Invoke the checkpoint callback every this many iterations (0: never).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, iterations: u64, seed: u64) -> Self {
        TrainConfig {
            mode,
            iterations,
            seed,
            fcn_tile: 48,
            rnn_tile: 18,
            rho: 1,
            augment: true,
            fcn_opt: OptimizerHyper::adam_reference(),
            rnn_opt: OptimizerHyper::rmsprop_reference(),
            clip_bound: 5.0,
            weight_map: WeightMapParams::default(),
            checkpoint_every: 0,
        }
    }

    fn validate(&self, model: &SegModel, stack: &ImageStack) -> Result<()> {
        self.fcn_opt.validate()?;
        self.rnn_opt.validate()?;
        if stack.labels.is_none() {
            return Err(Error::Usage("training stack carries no labels".into()));
        }
        if self.augment && stack.n_x != stack.n_y {
            return Err(Error::Config(format!(
                "augmentation rotates by 90 degrees and needs square slices, got {}x{}",
                stack.n_x, stack.n_y
            )));
        }
        let div = model.kunet_cfg.required_divisor();
        match self.mode {
            TrainMode::FcnOnly => {
                if self.fcn_tile > stack.n_x || self.fcn_tile > stack.n_y {
                    return Err(Error::Config(format!(
                        "fcn tile {} exceeds slice extents {}x{}",
                        self.fcn_tile, stack.n_x, stack.n_y
                    )));
                }
                if !self.fcn_tile.is_multiple_of(div) {
                    return Err(Error::Config(format!(
                        "fcn tile {} must be divisible by {div}",
                        self.fcn_tile
                    )));
                }
            }
            TrainMode::RnnOnly | TrainMode::EndToEnd => {
                let margin = margin_for_tile(model, self.rnn_tile)?;
                if self.rnn_tile > stack.n_x || self.rnn_tile > stack.n_y {
                    return Err(Error::Config(format!(
                        "rnn tile {} exceeds slice extents {}x{}",
                        self.rnn_tile, stack.n_x, stack.n_y
                    )));
                }
                if self.mode == TrainMode::EndToEnd && !(self.rnn_tile + margin).is_multiple_of(div) {
                    return Err(Error::Config(format!(
                        "end-to-end window {} (tile {} + margin {margin}) must be divisible by {div}",
                        self.rnn_tile + margin,
                        self.rnn_tile
                    )));
                }
            }
        }
        Ok(())
    }
}

fn margin_for_tile(model: &SegModel, tile: usize) -> Result<usize> {
    for margin in (0..=256).step_by(2) {
        if let Ok(out) = model.stack_cfg.output_extent(tile + margin) {
            if out == tile {
                return Ok(margin);
            }
        }
    }
    Err(Error::Config(format!(
        "no even margin up to 256 maps a {tile} output tile through the stack"
    )))
}

/// One row of the loss trace (CSV `iteration,lr,loss`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Serializes a loss trace as CSV.
pub fn write_loss_trace(trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,lr,loss\n");
    for row in trace {
        out.push_str(&format!("{},{:e},{:e}\n", row.iteration, row.lr, row.loss));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn crop_plane_u8(data: &[u8], w: usize, oy: usize, ox: usize, th: usize, tw: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let row = (oy + y) * w + ox;
        out.extend_from_slice(&data[row..row + tw]);
    }
    out
}

struct SliceCache<T> {
    /// Per transform index, per slice: transformed image/label/weights.
    samples: Vec<Vec<TrainSample<T>>>,
}

impl<T: Scalar> SliceCache<T> {
    fn build(
        stack: &ImageStack,
        weight_maps: &[Tensor<T>],
        n_transforms: usize,
    ) -> Result<Self> {
        let labels = stack.labels.as_ref().expect("validated");
        let mut samples = Vec::with_capacity(n_transforms);
        for ti in 0..n_transforms {
            let t = DihedralTransform::new(ti as u8);
            let mut per_slice = Vec::with_capacity(stack.n_z);
            for z in 0..stack.n_z {
                let base = TrainSample {
                    image: stack.slice_tensor::<T>(z),
                    label: labels[z].clone(),
                    weights: weight_maps[z].clone(),
                };
                per_slice.push(base.transformed(t)?);
            }
            samples.push(per_slice);
        }
        Ok(SliceCache { samples })
    }

    fn get(&self, transform: usize, z: usize) -> &TrainSample<T> {
        &self.samples[transform][z]
    }
}

fn window_indices(z: usize, rho: usize, n_z: usize) -> Vec<usize> {
    (-(rho as isize)..=rho as isize)
        .map(|d| (z as isize + d).clamp(0, n_z as isize - 1) as usize)
        .collect()
}

/// Runs the training loop in the configured mode, returning the loss trace.
/// Fully reproducible from `config.seed`: sampling and dropout each draw
/// from their own named substream. `on_checkpoint` fires every
/// `checkpoint_every` iterations.
pub fn train_loop<T: Scalar, F>(
    model: &SegModel,
    state: &mut TrainState<T>,
    stack: &ImageStack,
    config: &TrainConfig,
    mut on_checkpoint: F,
) -> Result<Vec<TraceRow>>
where
    F: FnMut(&TrainState<T>, u64) -> Result<()>,
{
    config.validate(model, stack)?;
    let labels = stack.labels.as_ref().expect("validated");
    let mut sample_rng = Rng::substream(config.seed, "train.sample");
    let mut dropout_rng = Rng::substream(config.seed, "train.dropout");

    let weight_maps: Vec<Tensor<T>> = labels
        .iter()
        .map(|l| compute_weight_map(l, stack.n_x, stack.n_y, &config.weight_map))
        .collect::<Result<_>>()?;
    let n_transforms = if config.augment { 8 } else { 1 };
    let cache = SliceCache::build(stack, &weight_maps, n_transforms)?;

    // Frozen features per transform and slice for decoupled recurrent
    // training.
    let frozen_features: Option<Vec<Vec<Tensor<T>>>> = if config.mode == TrainMode::RnnOnly {
        let pcfg = PipelineConfig {
            rho: config.rho,
            tile: config.rnn_tile,
            margin: 0,
            sequence_mode: SequenceMode::Window,
            feature_working: stack.n_x.max(stack.n_y),
            feature_context: 0,
        };
        let mut per_transform = Vec::with_capacity(n_transforms);
        for ti in 0..n_transforms {
            let maps = crate::parallel::parallel_map(
                (0..stack.n_z).collect::<Vec<_>>(),
                |z| -> Result<Tensor<T>> {
                    slice_features(&state.params, &model.kunet, &cache.get(ti, z).image, &pcfg)
                },
            );
            per_transform.push(maps.into_iter().collect::<Result<Vec<_>>>()?);
        }
        Some(per_transform)
    } else {
        None
    };

    let margin = match config.mode {
        TrainMode::FcnOnly => 0,
        _ => margin_for_tile(model, config.rnn_tile)?,
    };

    let mut trace = Vec::with_capacity(config.iterations as usize);
    for it in 0..config.iterations {
        let z = sample_rng.index(stack.n_z);
        let transform = if config.augment { sample_rng.index(8) } else { 0 };
        let tile = match config.mode {
            TrainMode::FcnOnly => config.fcn_tile,
            _ => config.rnn_tile,
        };
        let oy = sample_rng.index(stack.n_x - tile + 1);
        let ox = sample_rng.index(stack.n_y - tile + 1);

        let mut tape = Tape::new();
        let loss_node = match config.mode {
            TrainMode::FcnOnly => {
                let sample = cache.get(transform, z);
                let img = crop_padded(&sample.image, oy as isize, ox as isize, tile, tile);
                let node = tape.input(img);
                let feats = crate::fcn::kunet_forward(&mut tape, &state.params, &model.kunet, node)?;
                let w = tape.param(&state.params, model.head_w);
                let b = tape.param(&state.params, model.head_b);
                let logits = tape.conv2d(feats, w, Some(b), Padding::Valid)?;
                let prob = tape.softmax_channels(logits)?;
                let label_tile = crop_plane_u8(&sample.label, stack.n_y, oy, ox, tile, tile);
                let weights_tile =
                    crop_padded(&sample.weights, oy as isize, ox as isize, tile, tile);
                tape.weighted_cross_entropy(prob, &label_tile, &weights_tile)?
            }
            TrainMode::RnnOnly | TrainMode::EndToEnd => {
                let pad = (margin / 2) as isize;
                let window = tile + margin;
                let zs = window_indices(z, config.rho, stack.n_z);
                let seq: Vec<NodeId> = match (&frozen_features, config.mode) {
                    (Some(features), TrainMode::RnnOnly) => zs
                        .iter()
                        .map(|&h| {
                            let patch = crop_padded(
                                &features[transform][h],
                                oy as isize - pad,
                                ox as isize - pad,
                                window,
                                window,
                            );
                            tape.input(patch)
                        })
                        .collect(),
                    _ => {
                        let mut seq = Vec::with_capacity(zs.len());
                        for &h in &zs {
                            let img = crop_padded(
                                &cache.get(transform, h).image,
                                oy as isize - pad,
                                ox as isize - pad,
                                window,
                                window,
                            );
                            let node = tape.input(img);
                            seq.push(crate::fcn::kunet_forward(
                                &mut tape,
                                &state.params,
                                &model.kunet,
                                node,
                            )?);
                        }
                        seq
                    }
                };
                let out = deep_forward(
                    &mut tape,
                    &state.params,
                    &model.stack_cfg,
                    &model.stack,
                    &seq,
                    Some(&mut dropout_rng),
                )?;
                let center = out[config.rho.min(out.len() - 1)];
                let prob = tape.softmax_channels(center)?;
                let sample = cache.get(transform, z);
                let label_tile = crop_plane_u8(&sample.label, stack.n_y, oy, ox, tile, tile);
                let weights_tile =
                    crop_padded(&sample.weights, oy as isize, ox as isize, tile, tile);
                tape.weighted_cross_entropy(prob, &label_tile, &weights_tile)?
            }
        };

        let loss = tape.value(loss_node).item()?.to_f64();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged (non-finite) at iteration {it}"
            )));
        }
        let mut grads = tape.backward(loss_node, state.params.len())?;
        drop(tape);
        clip_gradients(&mut grads, config.clip_bound)?;
        optimizer_step(state, &grads, &config.fcn_opt, &config.rnn_opt)?;

        let lr = match config.mode {
            TrainMode::FcnOnly => config.fcn_opt.lr(it),
            _ => config.rnn_opt.lr(it),
        };
        trace.push(TraceRow {
            iteration: it,
            lr,
            loss,
        });
        if config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0 {
            on_checkpoint(state, it + 1)?;
        }
    }
    Ok(trace)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ANSG";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters and optimizer state.
pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&(state.params.len() as u32).to_le_bytes());
    for (_, name, tensor) in state.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            v.write_le(&mut buf);
        }
    }
    for group in &state.groups {
        buf.push(match group {
            ParamGroup::Fcn => 0,
            ParamGroup::Rnn => 1,
        });
    }
    for table in [&state.m, &state.v] {
        for tensor in table {
            for &v in tensor.data() {
                v.write_le(&mut buf);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Restores a checkpoint into a freshly initialized state whose parameters
/// were registered by the same model configuration (matched by name and
/// shape).
pub fn load_checkpoint<T: Scalar>(path: &Path, state: &mut TrainState<T>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut offset = 0usize;
    let take = |offset: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
        if *offset + n > bytes.len() {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("truncated while reading {what} at offset {}", *offset),
            });
        }
        let out = &bytes[*offset..*offset + n];
        *offset += n;
        Ok(out)
    };

    if take(&mut offset, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected ANSG".into(),
        });
    }
    let version = u32::from_le_bytes(take(&mut offset, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dtype = take(&mut offset, 1, "dtype")?[0];
    if Dtype::from_tag(dtype) != Some(T::DTYPE) {
        return Err(Error::Format {
            offset: 8,
            message: format!("dtype tag {dtype} does not match the requested precision"),
        });
    }
    state.iteration = u64::from_le_bytes(take(&mut offset, 8, "iteration")?.try_into().unwrap());
    state.seed = u64::from_le_bytes(take(&mut offset, 8, "seed")?.try_into().unwrap());
    let n_params = u32::from_le_bytes(take(&mut offset, 4, "param count")?.try_into().unwrap()) as usize;
    if n_params != state.params.len() {
        return Err(Error::Format {
            offset: offset as u64 - 4,
            message: format!(
                "checkpoint has {n_params} parameters, model expects {}",
                state.params.len()
            ),
        });
    }

    let mut order = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name_len =
            u32::from_le_bytes(take(&mut offset, 4, "name length")?.try_into().unwrap()) as usize;
        let name_off = offset;
        let name = std::str::from_utf8(take(&mut offset, name_len, "name")?)
            .map_err(|_| Error::Format {
                offset: name_off as u64,
                message: "parameter name is not utf-8".into(),
            })?
            .to_string();
        let rank = u32::from_le_bytes(take(&mut offset, 4, "rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut offset, 4, "extent")?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut offset, numel * T::BYTES, &format!("values of {name}"))?;
        let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let id = state.params.lookup(&name).ok_or_else(|| Error::Format {
            offset: name_off as u64,
            message: format!("parameter `{name}` unknown to this model configuration"),
        })?;
        if state.params.value(id).shape() != shape.as_slice() {
            return Err(Error::Format {
                offset: name_off as u64,
                message: format!(
                    "parameter `{name}` has shape {shape:?}, model expects {:?}",
                    state.params.value(id).shape()
                ),
            });
        }
        *state.params.value_mut(id) = Tensor::new(shape, data)?;
        order.push(id);
    }
    for id in &order {
        let tag = take(&mut offset, 1, "group tag")?[0];
        state.groups[id.0] = if tag == 1 { ParamGroup::Rnn } else { ParamGroup::Fcn };
    }
    for table in [0, 1] {
        for id in &order {
            let numel = state.params.value(*id).numel();
            let raw = take(&mut offset, numel * T::BYTES, "optimizer state")?;
            let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
            let tensor = Tensor::new(state.params.value(*id).shape().to_vec(), data)?;
            if table == 0 {
                state.m[id.0] = tensor;
            } else {
                state.v[id.0] = tensor;
            }
        }
    }
    Ok(())
}
