//! Dense tensors and the forward/backward numerical kernels every other
//! module builds on: 2D convolution, 2x2 max-pooling, 2x2 transposed
//! convolution, per-pixel channel softmax, channel concatenation and center
//! cropping, plus elementwise activations.
//!
//! Convolution follows the cross-correlation convention (no kernel flip):
//! `out[oc, y, x] = bias[oc] + sum_{ic,ky,kx} in[ic, y+ky-pad, x+kx-pad] *
//! w[oc, ic, ky, kx]`. Feature maps are `[channels, height, width]`, kernels
//! `[out_channels, in_channels, kh, kw]`, all row-major.
//!
//! Every kernel is a pure function of its inputs with a fixed accumulation
//! order, so repeated evaluation is bitwise identical.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Border handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1` per axis.
    Valid,
    /// Zero-padded borders; output keeps the input extent.
    Same,
}

/// Dense N-dimensional array of scalars in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "all extents must be >= 1, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Extents of a `[C, H, W]` map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "expected a [channels, height, width] tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn convert<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights plus bias, `weights: [out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2dKernel<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2dKernel<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (oc, _, _, _) = kernel_dims(&weights)?;
        if bias.shape() != [oc] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match out_channels {oc}",
                bias.shape()
            )));
        }
        Ok(Conv2dKernel { weights, bias })
    }

    pub fn apply(&self, input: &Tensor<T>, padding: Padding) -> Result<Tensor<T>> {
        conv2d(input, &self.weights, Some(&self.bias), padding)
    }
}

fn kernel_dims<T: Scalar>(weights: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = weights.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!(
            "expected kernel of shape [out_ch, in_ch, kh, kw], got {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

fn pad_amounts(kh: usize, kw: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (0, 0),
        // For even kernels the extra padding row/column lands on the
        // high-index side, matching the crop convention.
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
    }
}

/// Output extents of `conv2d` for the given input extents.
pub fn conv2d_out_extent(h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => (h - kh + 1, w - kw + 1),
        Padding::Same => (h, w),
    }
}

/// 2D cross-correlation of a `[C, H, W]` map with a `[C', C, kh, kw]` kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (ci, h, w) = input.dims3()?;
    let (oc, kin, kh, kw) = kernel_dims(weights)?;
    if kin != ci {
        return Err(Error::Dimension(format!(
            "input has {ci} channels but kernel expects {kin}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [oc] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match out_channels {oc}",
                b.shape()
            )));
        }
    }
    if padding == Padding::Valid && (kh > h || kw > w) {
        return Err(Error::Dimension(format!(
            "valid convolution needs kernel {kh}x{kw} <= input {h}x{w}"
        )));
    }

    let (oh, ow) = conv2d_out_extent(h, w, kh, kw, padding);
    let (pt, pl) = pad_amounts(kh, kw, padding);
    let xin = input.data();
    let wts = weights.data();
    let mut out = vec![T::ZERO; oc * oh * ow];

    // Per output cell the accumulation order is (ic, ky, kx) with a single
    // serial accumulator, matching the brute-force oracle bitwise. Interior
    // cells go through a four-wide block (four independent accumulator
    // chains hide the add latency without reordering any single chain);
    // border cells in same-padding mode clip the kx window.
    for o in 0..oc {
        let b = bias.map_or(T::ZERO, |t| t.data()[o]);
        let w_base = o * ci * kh * kw;
        for oy in 0..oh {
            let out_row = (o * oh + oy) * ow;
            // All ky taps valid: oy >= pt and oy + kh <= h + pt.
            let row_interior = oy >= pt && oy + kh <= h + pt;
            // Columns with the full kx window: ox in [pl, w + pl - kw].
            let col_lo = pl;
            let col_hi = (w + pl).saturating_sub(kw).min(ow.saturating_sub(1));

            let mut ox = 0usize;
            while ox < ow {
                let interior = row_interior && ox >= col_lo && ox <= col_hi;
                if interior && ox + 3 <= col_hi {
                    let (mut a0, mut a1, mut a2, mut a3) = (b, b, b, b);
                    for ic in 0..ci {
                        let in_ch = ic * h * w;
                        let w_ch = w_base + ic * kh * kw;
                        for ky in 0..kh {
                            let in_row = in_ch + (oy + ky - pt) * w + ox - pl;
                            let xr = &xin[in_row..in_row + kw + 3];
                            let wr = &wts[w_ch + ky * kw..w_ch + (ky + 1) * kw];
                            for (kx, wv) in wr.iter().enumerate() {
                                a0 += xr[kx] * *wv;
                                a1 += xr[kx + 1] * *wv;
                                a2 += xr[kx + 2] * *wv;
                                a3 += xr[kx + 3] * *wv;
                            }
                        }
                    }
                    out[out_row + ox] = a0;
                    out[out_row + ox + 1] = a1;
                    out[out_row + ox + 2] = a2;
                    out[out_row + ox + 3] = a3;
                    ox += 4;
                    continue;
                }

                let x_lo = pl.saturating_sub(ox);
                let x_hi = kw.min(w + pl - ox);
                let mut acc = b;
                for ic in 0..ci {
                    let in_ch = ic * h * w;
                    let w_ch = w_base + ic * kh * kw;
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pt || iy - pt >= h {
                            continue;
                        }
                        let in_row = in_ch + (iy - pt) * w + ox + x_lo - pl;
                        let w_row = w_ch + ky * kw;
                        for (xv, wv) in xin[in_row..in_row + (x_hi - x_lo)]
                            .iter()
                            .zip(&wts[w_row + x_lo..w_row + x_hi])
                        {
                            acc += *xv * *wv;
                        }
                    }
                }
                out[out_row + ox] = acc;
                ox += 1;
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    padding: Padding,
    input_shape: &[usize],
) -> Tensor<T> {
    let (oc, oh, ow) = grad_out.dims3().expect("grad_out must be 3D");
    let (_, ci, kh, kw) = kernel_dims(weights).expect("weights must be 4D");
    let (h, w) = (input_shape[1], input_shape[2]);
    let (pt, pl) = pad_amounts(kh, kw, padding);
    let g = grad_out.data();
    let wts = weights.data();
    let mut gin = vec![T::ZERO; ci * h * w];

    // Row-sliced scatter: for each (o, ic, ky, kx) tap, one shifted
    // axpy of the output-gradient row into the input-gradient row.
    for o in 0..oc {
        for ic in 0..ci {
            let in_ch = ic * h * w;
            let w_ch = ((o * ci) + ic) * kh * kw;
            for ky in 0..kh {
                let w_row = w_ch + ky * kw;
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pt || iy - pt >= h {
                        continue;
                    }
                    let g_row = (o * oh + oy) * ow;
                    let in_row = in_ch + (iy - pt) * w;
                    for kx in 0..kw {
                        let wv = wts[w_row + kx];
                        // ix = ox + kx - pl must land in [0, w).
                        let ox_lo = pl.saturating_sub(kx);
                        let ox_hi = ow.min(w + pl - kx);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let dst = &mut gin[in_row + ox_lo + kx - pl..in_row + ox_hi + kx - pl];
                        let src = &g[g_row + ox_lo..g_row + ox_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin).unwrap()
}

/// Gradient of `conv2d` with respect to the kernel weights.
pub fn conv2d_grad_weights<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    padding: Padding,
    weights_shape: &[usize],
) -> Tensor<T> {
    let (oc, oh, ow) = grad_out.dims3().expect("grad_out must be 3D");
    let (ci, h, w) = input.dims3().expect("input must be 3D");
    let (kh, kw) = (weights_shape[2], weights_shape[3]);
    let (pt, pl) = pad_amounts(kh, kw, padding);
    let g = grad_out.data();
    let xin = input.data();
    let mut gw = vec![T::ZERO; oc * ci * kh * kw];

    for o in 0..oc {
        for ic in 0..ci {
            let in_ch = ic * h * w;
            let w_ch = ((o * ci) + ic) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let ox_lo = pl.saturating_sub(kx);
                    let ox_hi = ow.min(w + pl - kx);
                    let mut acc = T::ZERO;
                    if ox_lo < ox_hi {
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < pt || iy - pt >= h {
                                continue;
                            }
                            let in_row = in_ch + (iy - pt) * w + ox_lo + kx - pl;
                            let g_row = (o * oh + oy) * ow + ox_lo;
                            for (gv, xv) in g[g_row..g_row + ox_hi - ox_lo]
                                .iter()
                                .zip(&xin[in_row..in_row + ox_hi - ox_lo])
                            {
                                acc += *gv * *xv;
                            }
                        }
                    }
                    gw[w_ch + ky * kw + kx] = acc;
                }
            }
        }
    }
    Tensor::new(weights_shape.to_vec(), gw).unwrap()
}

/// Per-output-channel sum of the output gradient.
pub fn grad_bias<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let (oc, oh, ow) = grad_out.dims3().expect("grad_out must be 3D");
    let g = grad_out.data();
    let mut gb = vec![T::ZERO; oc];
    for o in 0..oc {
        for i in 0..oh * ow {
            gb[o] += g[o * oh * ow + i];
        }
    }
    Tensor::new(vec![oc], gb).unwrap()
}

/// 2x2 max-pooling with stride 2. Trailing odd rows/columns are dropped.
/// Returns the pooled map and, per output cell, the flat input index of the
/// selected maximum (ties broken toward the lowest flat index) for
/// deterministic backprop routing.
pub fn max_pool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = input.dims3()?;
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "max_pool2 needs spatial extent >= 2, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xin = input.data();
    let mut out = vec![T::ZERO; c * oh * ow];
    let mut argmax = vec![0u32; c * oh * ow];

    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = xin[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (2 * oy + dy) * w + (2 * ox + dx);
                        if xin[idx] > best {
                            best = xin[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// Routes the output gradient solely to each window's recorded argmax.
pub fn max_pool2_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<T> {
    let mut gin = Tensor::zeros(input_shape);
    for (g, &idx) in grad_out.data().iter().zip(argmax.iter()) {
        gin.data_mut()[idx as usize] += *g;
    }
    gin
}

/// 2x2 stride-2 transposed convolution: each input cell scatters its value
/// through the kernel into a disjoint 2x2 output block. Output extents double.
pub fn deconv2<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (ci, h, w) = input.dims3()?;
    let (oc, kin, kh, kw) = kernel_dims(weights)?;
    if kh != 2 || kw != 2 {
        return Err(Error::Config(format!(
            "deconv2 requires a 2x2 kernel, got {kh}x{kw}"
        )));
    }
    if kin != ci {
        return Err(Error::Dimension(format!(
            "input has {ci} channels but kernel expects {kin}"
        )));
    }
    let (oh, ow) = (2 * h, 2 * w);
    let xin = input.data();
    let wts = weights.data();
    let mut out = match bias {
        Some(t) => {
            let mut v = Vec::with_capacity(oc * oh * ow);
            for o in 0..oc {
                v.extend(std::iter::repeat_n(t.data()[o], oh * ow));
            }
            v
        }
        None => vec![T::ZERO; oc * oh * ow],
    };

    // Channel-accumulated strided writes: each input row contributes to the
    // two output rows of its block through the four kernel taps.
    for o in 0..oc {
        for ic in 0..ci {
            let w_tap = ((o * ci) + ic) * 4;
            for y in 0..h {
                let x_row = &xin[(ic * h + y) * w..(ic * h + y + 1) * w];
                for u in 0..2 {
                    let out_row = (o * oh + 2 * y + u) * ow;
                    for v in 0..2 {
                        let wv = wts[w_tap + 2 * u + v];
                        let dst = &mut out[out_row + v..out_row + ow];
                        for (d, s) in dst.iter_mut().step_by(2).zip(x_row) {
                            *d += *s * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oc, oh, ow], out)
}

pub fn deconv2_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weights: &Tensor<T>,
    input_shape: &[usize],
) -> Tensor<T> {
    let (oc, oh, ow) = grad_out.dims3().expect("grad_out must be 3D");
    let (ci, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let g = grad_out.data();
    let wts = weights.data();
    let mut gin = vec![T::ZERO; ci * h * w];
    for ic in 0..ci {
        for y in 0..h {
            for x in 0..w {
                let mut acc = T::ZERO;
                for o in 0..oc {
                    for u in 0..2 {
                        for v in 0..2 {
                            acc += g[(o * oh + 2 * y + u) * ow + 2 * x + v]
                                * wts[(((o * ci) + ic) * 2 + u) * 2 + v];
                        }
                    }
                }
                gin[(ic * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gin).unwrap()
}

pub fn deconv2_grad_weights<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights_shape: &[usize],
) -> Tensor<T> {
    let (oc, oh, ow) = grad_out.dims3().expect("grad_out must be 3D");
    let (ci, h, w) = input.dims3().expect("input must be 3D");
    let g = grad_out.data();
    let xin = input.data();
    let mut gw = vec![T::ZERO; oc * ci * 4];
    for o in 0..oc {
        for ic in 0..ci {
            for u in 0..2 {
                for v in 0..2 {
                    let mut acc = T::ZERO;
                    for y in 0..h {
                        for x in 0..w {
                            acc += g[(o * oh + 2 * y + u) * ow + 2 * x + v]
                                * xin[(ic * h + y) * w + x];
                        }
                    }
                    gw[(((o * ci) + ic) * 2 + u) * 2 + v] = acc;
                }
            }
        }
    }
    Tensor::new(weights_shape.to_vec(), gw).unwrap()
}

/// Per-pixel softmax over the channel axis, computed with max-subtraction.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if c < 2 {
        return Err(Error::Dimension(format!(
            "softmax_channels needs >= 2 channels, got {c}"
        )));
    }
    let xin = input.data();
    let plane = h * w;
    let mut out = vec![T::ZERO; c * plane];
    for p in 0..plane {
        let mut m = xin[p];
        for ch in 1..c {
            m = m.maximum(xin[ch * plane + p]);
        }
        let mut denom = T::ZERO;
        for ch in 0..c {
            let e = (xin[ch * plane + p] - m).exp();
            out[ch * plane + p] = e;
            denom += e;
        }
        for ch in 0..c {
            out[ch * plane + p] = out[ch * plane + p] / denom;
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Softmax backward from saved outputs: `gin_c = s_c * (g_c - sum_k g_k s_k)`.
pub fn softmax_channels_grad<T: Scalar>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = output.dims3().expect("output must be 3D");
    let plane = h * w;
    let g = grad_out.data();
    let s = output.data();
    let mut gin = vec![T::ZERO; c * plane];
    for p in 0..plane {
        let mut dot = T::ZERO;
        for ch in 0..c {
            dot += g[ch * plane + p] * s[ch * plane + p];
        }
        for ch in 0..c {
            gin[ch * plane + p] = s[ch * plane + p] * (g[ch * plane + p] - dot);
        }
    }
    Tensor::new(vec![c, h, w], gin).unwrap()
}

/// Stacks the channels of `a` before the channels of `b`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Dimension(format!(
            "concat_channels spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    let mut data = Vec::with_capacity((ca + cb) * ha * wa);
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ca + cb, ha, wa], data)
}

/// Extracts channels `[from, to)` as a new tensor.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if from >= to || to > c {
        return Err(Error::Dimension(format!(
            "channel slice [{from}, {to}) out of range for {c} channels"
        )));
    }
    let plane = h * w;
    let data = input.data()[from * plane..to * plane].to_vec();
    Tensor::new(vec![to - from, h, w], data)
}

/// Offsets of the centered `th x tw` window inside `h x w`. When the parity
/// differs the extra dropped row/column comes from the high-index side.
pub fn crop_offsets(h: usize, w: usize, th: usize, tw: usize) -> (usize, usize) {
    ((h - th) / 2, (w - tw) / 2)
}

/// Centered spatial crop to `th x tw`.
pub fn crop_center<T: Scalar>(input: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if th > h || tw > w {
        return Err(Error::Dimension(format!(
            "crop to {th}x{tw} exceeds input {h}x{w}"
        )));
    }
    let (oy, ox) = crop_offsets(h, w, th, tw);
    let xin = input.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            let row = (ch * h + oy + y) * w + ox;
            out.extend_from_slice(&xin[row..row + tw]);
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Scatter of a cropped gradient back into the input extent.
pub fn crop_center_grad<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let (c, th, tw) = grad_out.dims3().expect("grad_out must be 3D");
    let (h, w) = (input_shape[1], input_shape[2]);
    let (oy, ox) = crop_offsets(h, w, th, tw);
    let g = grad_out.data();
    let mut gin = Tensor::zeros(input_shape);
    for ch in 0..c {
        for y in 0..th {
            for x in 0..tw {
                gin.data_mut()[(ch * h + oy + y) * w + ox + x] = g[(ch * th + y) * tw + x];
            }
        }
    }
    gin
}

/// Spatial crop that tolerates out-of-range windows by reading zeros, i.e. a
/// crop from the zero-padded plane. `y0`/`x0` may be negative.
pub fn crop_padded<T: Scalar>(input: &Tensor<T>, y0: isize, x0: isize, th: usize, tw: usize) -> Tensor<T> {
    let (c, h, w) = input.dims3().expect("input must be 3D");
    let mut out = Tensor::zeros(&[c, th, tw]);
    for ch in 0..c {
        for y in 0..th {
            let iy = y0 + y as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for x in 0..tw {
                let ix = x0 + x as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let v = input.data()[(ch * h + iy as usize) * w + ix as usize];
                out.data_mut()[(ch * th + y) * tw + x] = v;
            }
        }
    }
    out
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.maximum(T::ZERO))
}

pub fn sigmoid_map<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.sigmoid())
}

pub fn tanh_map<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.tanh())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "elementwise add shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x + y).collect(),
    })
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "elementwise mul shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(b.data.iter()).map(|(&x, &y)| x * y).collect(),
    })
}

/// Matrix-vector product `w[m, n] * x[n] (+ bias[m])`, accumulating along the
/// input axis in the same order as `conv2d` so that a 1x1-spatial convolution
/// reproduces it bitwise.
pub fn mat_vec<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x.rank() != 1 || w.rank() != 2 {
        return Err(Error::Dimension(format!(
            "mat_vec expects x rank 1 and w rank 2, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.shape()[0] != n {
        return Err(Error::Dimension(format!(
            "mat_vec: w is {m}x{n} but x has {} elements",
            x.shape()[0]
        )));
    }
    let mut out = vec![T::ZERO; m];
    for r in 0..m {
        let mut acc = bias.map_or(T::ZERO, |b| b.data()[r]);
        for c in 0..n {
            acc += x.data()[c] * w.data()[r * n + c];
        }
        out[r] = acc;
    }
    Tensor::new(vec![m], out)
}

pub fn sum<T: Scalar>(input: &Tensor<T>) -> T {
    let mut acc = T::ZERO;
    for &v in input.data() {
        acc += v;
    }
    acc
}
