//! Reverse-mode differentiation over compositions of the tensor kernels,
//! plus an independent finite-difference verifier.
//!
//! A [`Tape`] records operations in topological order during the forward
//! pass; [`Tape::backward`] walks it in reverse, accumulating gradients into
//! every parameter leaf. Parameter reuse (weight sharing across recurrence
//! steps) sums contributions naturally. Identical tapes yield bitwise
//! identical gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Padding, Tensor};

/// Handle to a named trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, name-addressed collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Usage(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn convert<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.convert()).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients per parameter, aligned with a [`ParamSet`]. Parameters that did
/// not participate in the tape hold `None`.
#[derive(Debug, Clone)]
pub struct GradientSet<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn empty(n_params: usize) -> Self {
        GradientSet {
            grads: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|t| (ParamId(i), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|t| (ParamId(i), t)))
    }
}

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        padding: Padding,
    },
    Deconv2 {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MatVec {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    CropCenter {
        x: NodeId,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    Sum {
        x: NodeId,
    },
    /// Mean over voxels of `w(v) * (-ln p_{y(v)}(v))`, probabilities clamped
    /// at 1e-12. `prob` is a `[C, H, W]` probability map.
    CrossEntropy {
        prob: NodeId,
        labels: Vec<u8>,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2 { .. } => "deconv2",
            Op::MatVec { .. } => "mat_vec",
            Op::MaxPool2 { .. } => "max_pool2",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::CropCenter { .. } => "crop_center",
            Op::SoftmaxChannels { .. } => "softmax_channels",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "weighted_cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a computation as a DAG in topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

const PROB_FLOOR: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Trainable leaf; repeated requests for the same parameter return the
    /// same node so gradient contributions accumulate.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let node = self.push(params.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, node);
        node
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        padding: Padding,
    ) -> Result<NodeId> {
        let value = tensor::conv2d(
            self.value(x),
            self.value(w),
            b.map(|n| self.value(n)),
            padding,
        )?;
        Ok(self.push(value, Op::Conv2d { x, w, b, padding }))
    }

    pub fn deconv2(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = tensor::deconv2(self.value(x), self.value(w), b.map(|n| self.value(n)))?;
        Ok(self.push(value, Op::Deconv2 { x, w, b }))
    }

    pub fn mat_vec(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = tensor::mat_vec(self.value(x), self.value(w), b.map(|n| self.value(n)))?;
        Ok(self.push(value, Op::MatVec { x, w, b }))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sigmoid_map(self.value(x));
        self.push(value, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = tensor::tanh_map(self.value(x));
        self.push(value, Op::Tanh { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale { x, factor })
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::ConcatChannels { a, b }))
    }

    pub fn crop_center(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let value = tensor::crop_center(self.value(x), th, tw)?;
        Ok(self.push(value, Op::CropCenter { x }))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_channels(self.value(x))?;
        Ok(self.push(value, Op::SoftmaxChannels { x }))
    }

    /// Inverted dropout: each element is kept with probability `1 - p` and
    /// scaled by `1/(1-p)`; dropped elements become zero. The mask is drawn
    /// from `rng` and saved for the backward pass.
    pub fn dropout(&mut self, x: NodeId, p: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.bernoulli(p) { T::ZERO } else { keep_scale })
            .collect();
        let value = Tensor::new(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(&v, &m)| v * m)
                .collect(),
        )?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(tensor::sum(self.value(x)));
        self.push(value, Op::Sum { x })
    }

    /// Weighted two-class cross-entropy against a probability map: mean over
    /// voxels of `w(v) * (-ln p_{y(v)}(v))`.
    pub fn weighted_cross_entropy(
        &mut self,
        prob: NodeId,
        labels: &[u8],
        weights: &Tensor<T>,
    ) -> Result<NodeId> {
        let (c, h, w) = self.value(prob).dims3()?;
        let plane = h * w;
        if labels.len() != plane || weights.numel() != plane {
            return Err(Error::Dimension(format!(
                "labels ({}) and weights ({}) must cover {h}x{w} = {plane} voxels",
                labels.len(),
                weights.numel()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= c) {
            return Err(Error::Usage(format!(
                "label value {l} out of range for {c} classes"
            )));
        }
        let p = self.value(prob).data();
        let floor = T::from_f64(PROB_FLOOR);
        let mut acc = T::ZERO;
        for (v, (&label, &weight)) in labels.iter().zip(weights.data().iter()).enumerate() {
            let pv = p[usize::from(label) * plane + v].maximum(floor);
            acc += weight * -pv.ln();
        }
        let loss = acc * T::from_f64(1.0 / plane as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric("weighted_cross_entropy produced NaN".into()));
        }
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                prob,
                labels: labels.to_vec(),
                weights: weights.data().to_vec(),
            },
        ))
    }

    /// Backpropagates from a scalar root seeded with `loss_seed`, returning
    /// the gradient for every parameter leaf that participated.
    pub fn backward(&self, root: NodeId, n_params: usize) -> Result<GradientSet<T>> {
        self.backward_seeded(root, n_params, T::ONE)
    }

    pub fn backward_seeded(
        &self,
        root: NodeId,
        n_params: usize,
        loss_seed: T,
    ) -> Result<GradientSet<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(loss_seed));

        let mut out = GradientSet::empty(n_params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "NaN gradient flowing out of op `{}`",
                    node.op.kind()
                )));
            }
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => match out.get_mut(*pid) {
                    Some(existing) => existing.add_assign(&g),
                    None => out.insert(*pid, g),
                },
                Op::Conv2d { x, w, b, padding } => {
                    let gin = tensor::conv2d_grad_input(
                        &g,
                        self.value(*w),
                        *padding,
                        self.value(*x).shape(),
                    );
                    accumulate(&mut grads, *x, gin);
                    let gw = tensor::conv2d_grad_weights(
                        &g,
                        self.value(*x),
                        *padding,
                        self.value(*w).shape(),
                    );
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, tensor::grad_bias(&g));
                    }
                }
                Op::Deconv2 { x, w, b } => {
                    let gin = tensor::deconv2_grad_input(&g, self.value(*w), self.value(*x).shape());
                    accumulate(&mut grads, *x, gin);
                    let gw =
                        tensor::deconv2_grad_weights(&g, self.value(*x), self.value(*w).shape());
                    accumulate(&mut grads, *w, gw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, tensor::grad_bias(&g));
                    }
                }
                Op::MatVec { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (m, n) = (wv.shape()[0], wv.shape()[1]);
                    let mut gx = vec![T::ZERO; n];
                    let mut gw = vec![T::ZERO; m * n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for cidx in 0..n {
                            gx[cidx] += gr * wv.data()[r * n + cidx];
                            gw[r * n + cidx] = gr * xv.data()[cidx];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![n], gx)?);
                    accumulate(&mut grads, *w, Tensor::new(vec![m, n], gw)?);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let gin = tensor::max_pool2_grad(&g, argmax, self.value(*x).shape());
                    accumulate(&mut grads, *x, gin);
                }
                Op::Relu { x } => {
                    let out_v = &node.value;
                    let gin = Tensor::new(
                        out_v.shape().to_vec(),
                        out_v
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&o, &gv)| if o > T::ZERO { gv } else { T::ZERO })
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, gin);
                }
                Op::Sigmoid { x } => {
                    let out_v = &node.value;
                    let gin = Tensor::new(
                        out_v.shape().to_vec(),
                        out_v
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&o, &gv)| gv * o * (T::ONE - o))
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, gin);
                }
                Op::Tanh { x } => {
                    let out_v = &node.value;
                    let gin = Tensor::new(
                        out_v.shape().to_vec(),
                        out_v
                            .data()
                            .iter()
                            .zip(g.data().iter())
                            .map(|(&o, &gv)| gv * (T::ONE - o * o))
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, gin);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let ga = tensor::mul(&g, self.value(*b))?;
                    let gb = tensor::mul(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.scale(*factor));
                }
                Op::ConcatChannels { a, b } => {
                    let ca = self.value(*a).shape()[0];
                    let ctotal = node.value.shape()[0];
                    accumulate(&mut grads, *a, tensor::slice_channels(&g, 0, ca)?);
                    accumulate(&mut grads, *b, tensor::slice_channels(&g, ca, ctotal)?);
                }
                Op::CropCenter { x } => {
                    let gin = tensor::crop_center_grad(&g, self.value(*x).shape());
                    accumulate(&mut grads, *x, gin);
                }
                Op::SoftmaxChannels { x } => {
                    let gin = tensor::softmax_channels_grad(&g, &node.value);
                    accumulate(&mut grads, *x, gin);
                }
                Op::Dropout { x, mask } => {
                    let gin = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| gv * m)
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, gin);
                }
                Op::Sum { x } => {
                    let seed = g.item()?;
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), seed));
                }
                Op::CrossEntropy {
                    prob,
                    labels,
                    weights,
                } => {
                    let seed = g.item()?;
                    let pv = self.value(*prob);
                    let (_, h, w) = pv.dims3()?;
                    let plane = h * w;
                    let floor = T::from_f64(PROB_FLOOR);
                    let inv_n = T::from_f64(1.0 / plane as f64);
                    let mut gin = Tensor::zeros(pv.shape());
                    for (v, (&label, &weight)) in labels.iter().zip(weights.iter()).enumerate() {
                        let idx = usize::from(label) * plane + v;
                        let p = pv.data()[idx];
                        // The clamp has zero slope below the floor.
                        if p > floor {
                            gin.data_mut()[idx] = seed * -(weight * inv_n / p);
                        }
                    }
                    accumulate(&mut grads, *prob, gin);
                }
            }
        }

        for (id, grad) in out.iter() {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter index {}",
                    id.0
                )));
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], target: NodeId, g: Tensor<T>) {
    match &mut grads[target.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// One mismatched coordinate in a gradient check.
#[derive(Debug, Clone)]
pub struct CoordReport {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub total_coords: usize,
    pub tol: f64,
    /// Worst coordinates, sorted by descending relative error.
    pub worst: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Full parameter sweep below this many coordinates; random sample above.
const FULL_SWEEP_LIMIT: usize = 10_000;
const SAMPLE_SIZE: usize = 256;

/// Compares the tape gradient of a scalar-valued function against central
/// differences `(f(p+h) - f(p-h)) / 2h` in double precision.
///
/// `build` must be deterministic: called repeatedly, it must construct the
/// same function of the parameters (dropout masks frozen by seed, etc.).
/// Relative error uses the floor `|a-n| / max(1e-8, |a|+|n|)`.
pub fn finite_diff_check<F>(
    params: &mut ParamSet<f64>,
    build: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let analytic = tape.backward(root, params.len())?;
    drop(tape);

    let total_coords = params.total_coords();
    let coords: Vec<(ParamId, usize)> = if total_coords < FULL_SWEEP_LIMIT {
        params
            .iter()
            .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
            .collect()
    } else {
        let mut rng = Rng::substream(0x6772_6164, "gradcheck-sample");
        let all: Vec<(ParamId, usize)> = params
            .iter()
            .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
            .collect();
        let mut picked = std::collections::HashSet::new();
        while picked.len() < SAMPLE_SIZE.min(all.len()) {
            picked.insert(rng.index(all.len()));
        }
        let mut sorted: Vec<usize> = picked.into_iter().collect();
        sorted.sort_unstable();
        sorted.into_iter().map(|i| all[i]).collect()
    };

    let eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let root = build(&mut tape, params)?;
        tape.value(root).item()
    };

    let mut worst: Vec<CoordReport> = Vec::new();
    let mut max_rel = 0.0f64;
    for &(id, i) in &coords {
        let orig = params.value(id).data()[i];
        params.value_mut(id).data_mut()[i] = orig + step;
        let plus = eval(params)?;
        params.value_mut(id).data_mut()[i] = orig - step;
        let minus = eval(params)?;
        params.value_mut(id).data_mut()[i] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic_v = analytic.get(id).map_or(0.0, |t| t.data()[i]);
        let rel = (analytic_v - numeric).abs() / f64::max(1e-8, analytic_v.abs() + numeric.abs());
        max_rel = max_rel.max(rel);
        worst.push(CoordReport {
            param: params.name(id).to_string(),
            index: i,
            analytic: analytic_v,
            numeric,
            rel_err: rel,
        });
        worst.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
        worst.truncate(8);
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: coords.len(),
        total_coords,
        tol,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut params = ParamSet::new();
        let x = params
            .register("x", Tensor::from_fn(&[2, 3, 3], |i| i as f64))
            .unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(&params, x);
        let loss = tape.sum(xn);
        let grads = tape.backward(loss, params.len()).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3, 3], 1.0));
    }

    #[test]
    fn conv_1x1_weight_gradient_is_input_sum() {
        // loss = sum(conv2d(x, w)) with 1x1 kernel weight -> dloss/dw = sum(x)
        let mut rng = Rng::from_seed(1);
        let mut params = ParamSet::new();
        let xv = Tensor::from_fn(&[1, 4, 4], |_| rng.uniform(-1.0, 1.0));
        let x_sum = tensor::sum(&xv);
        let x = params.register("x", xv).unwrap();
        let w = params
            .register("w", Tensor::new(vec![1, 1, 1, 1], vec![0.37]).unwrap())
            .unwrap();

        let mut tape = Tape::new();
        let xn = tape.param(&params, x);
        let wn = tape.param(&params, w);
        let y = tape.conv2d(xn, wn, None, Padding::Valid).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss, params.len()).unwrap();
        assert!((grads.get(w).unwrap().data()[0] - x_sum).abs() < 1e-12);
    }

    #[test]
    fn shared_parameter_gradients_accumulate() {
        // Using a weight twice must sum the per-use gradients, matching an
        // unrolled copy with untied weights.
        let mut rng = Rng::from_seed(2);
        let x1 = Tensor::from_fn(&[1, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let x2 = Tensor::from_fn(&[1, 3, 3], |_| rng.uniform(-1.0, 1.0));
        let wv = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.uniform(-1.0, 1.0));

        let tied = {
            let mut params = ParamSet::new();
            let w = params.register("w", wv.clone()).unwrap();
            let mut tape = Tape::new();
            let a = tape.input(x1.clone());
            let b = tape.input(x2.clone());
            let wn = tape.param(&params, w);
            let ya = tape.conv2d(a, wn, None, Padding::Same).unwrap();
            let yb = tape.conv2d(b, wn, None, Padding::Same).unwrap();
            let both = tape.add(ya, yb).unwrap();
            let loss = tape.sum(both);
            let grads = tape.backward(loss, params.len()).unwrap();
            grads.get(w).unwrap().clone()
        };

        let untied = {
            let mut params = ParamSet::new();
            let w1 = params.register("w1", wv.clone()).unwrap();
            let w2 = params.register("w2", wv).unwrap();
            let mut tape = Tape::new();
            let a = tape.input(x1);
            let b = tape.input(x2);
            let w1n = tape.param(&params, w1);
            let w2n = tape.param(&params, w2);
            let ya = tape.conv2d(a, w1n, None, Padding::Same).unwrap();
            let yb = tape.conv2d(b, w2n, None, Padding::Same).unwrap();
            let both = tape.add(ya, yb).unwrap();
            let loss = tape.sum(both);
            let grads = tape.backward(loss, params.len()).unwrap();
            tensor::add(grads.get(w1).unwrap(), grads.get(w2).unwrap()).unwrap()
        };

        assert_eq!(tied.data(), untied.data());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 2]));
        assert!(matches!(tape.backward(x, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        // f(p) = p^2 at p = 3: analytic 6; central differences are exact for
        // quadratics up to rounding.
        let mut params = ParamSet::new();
        let p = params.register("p", Tensor::new(vec![1], vec![3.0]).unwrap()).unwrap();
        let report = finite_diff_check(
            &mut params,
            |tape, params| {
                let pn = tape.param(params, p);
                let sq = tape.mul(pn, pn)?;
                Ok(tape.sum(sq))
            },
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradient_of_sum_of_losses_is_sum_of_gradients() {
        let mut rng = Rng::from_seed(3);
        let mut params = ParamSet::new();
        let x = params
            .register("x", Tensor::from_fn(&[2, 4, 4], |_| rng.uniform(-1.0, 1.0)))
            .unwrap();
        let w = params
            .register("w", Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform(-1.0, 1.0)))
            .unwrap();

        let grad_of = |which: u8, params: &ParamSet<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let xn = tape.param(params, x);
            let wn = tape.param(params, w);
            let conv = tape.conv2d(xn, wn, None, Padding::Same).unwrap();
            let act = tape.tanh(conv);
            let l1 = tape.sum(act);
            let sq = tape.mul(xn, xn).unwrap();
            let l2 = tape.sum(sq);
            let root = match which {
                0 => l1,
                1 => l2,
                _ => tape.add(l1, l2).unwrap(),
            };
            let grads = tape.backward(root, params.len()).unwrap();
            grads.get(w).map_or(Tensor::zeros(&[2, 2, 3, 3]), Clone::clone)
        };

        let g1 = grad_of(0, &params);
        let g2 = grad_of(1, &params);
        let gsum = grad_of(2, &params);
        let manual = tensor::add(&g1, &g2).unwrap();
        assert!(gsum.max_abs_diff(&manual) < 1e-10);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = Rng::from_seed(4);
        let mut params = ParamSet::new();
        let x = params
            .register("x", Tensor::from_fn(&[3, 5, 5], |_| rng.uniform(-1.0, 1.0)))
            .unwrap();
        let w = params
            .register("w", Tensor::from_fn(&[2, 3, 3, 3], |_| rng.uniform(-1.0, 1.0)))
            .unwrap();

        let run = |params: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let xn = tape.param(params, x);
            let wn = tape.param(params, w);
            let conv = tape.conv2d(xn, wn, None, Padding::Valid).unwrap();
            let pooled = tape.max_pool2(conv).unwrap();
            let act = tape.sigmoid(pooled);
            let loss = tape.sum(act);
            tape.backward(loss, params.len()).unwrap()
        };

        let a = run(&params);
        let b = run(&params);
        for (ga, gb) in a.iter().zip(b.iter()) {
            for (x, y) in ga.1.data().iter().zip(gb.1.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn nan_gradients_are_reported() {
        let mut params = ParamSet::new();
        let x = params
            .register("x", Tensor::new(vec![1], vec![-1.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let xn = tape.param(&params, x);
        // ln of a negative scalar is NaN; sum keeps it scalar.
        let v = tape.value(xn).map(|v: f64| v.ln());
        let bad = tape.input(v);
        let prod = tape.mul(xn, bad).unwrap();
        let loss = tape.sum(prod);
        assert!(matches!(
            tape.backward(loss, params.len()),
            Err(Error::Numeric(_))
        ));
    }
}
