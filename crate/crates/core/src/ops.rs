//! Forward and backward kernels for every primitive the network uses.
//!
//! These are pure functions over [`Tensor`] values. The autodiff tape in
//! [`crate::autograd`] records calls to them and dispatches to the matching
//! backward kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub const POINTWISE: ConvParams = ConvParams {
        stride: 1,
        padding: 0,
        groups: 1,
    };

    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// `⌊(len + 2·padding − kernel) / stride⌋ + 1`, or `None` when the kernel does
/// not fit in the padded input.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (len + 2 * padding)
        .checked_sub(kernel)
        .map(|d| d / stride.max(1) + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cin_g: usize,
    cout_g: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn validate(input: Shape, weight: Shape, bias: Option<Shape>, p: ConvParams) -> Result<Self> {
        const OP: &str = "conv2d";
        let [_, c_in, h, w] = input;
        let [c_out, wc, kh, kw] = weight;
        if p.stride == 0 {
            return Err(Error::dim(OP, "stride", "stride must be positive"));
        }
        if p.groups == 0 {
            return Err(Error::dim(OP, "groups", "groups must be positive"));
        }
        if c_in % p.groups != 0 {
            return Err(Error::dim(
                OP,
                "c_in",
                format!("{c_in} input channels not divisible by {} groups", p.groups),
            ));
        }
        if c_out % p.groups != 0 {
            return Err(Error::dim(
                OP,
                "c_out",
                format!(
                    "{c_out} output channels not divisible by {} groups",
                    p.groups
                ),
            ));
        }
        if wc * p.groups != c_in {
            return Err(Error::dim(
                OP,
                "c_in",
                format!(
                    "kernel has {wc} input channels per group, input has {c_in} channels over {} groups",
                    p.groups
                ),
            ));
        }
        let ho = conv_output_len(h, kh, p.stride, p.padding).ok_or_else(|| {
            Error::dim(
                OP,
                "height",
                format!("kernel {kh} exceeds padded height {}", h + 2 * p.padding),
            )
        })?;
        let wo = conv_output_len(w, kw, p.stride, p.padding).ok_or_else(|| {
            Error::dim(
                OP,
                "width",
                format!("kernel {kw} exceeds padded width {}", w + 2 * p.padding),
            )
        })?;
        if let Some(bs) = bias {
            if numel(bs) != c_out {
                return Err(Error::dim(
                    OP,
                    "bias",
                    format!("bias has {} entries for {c_out} output channels", numel(bs)),
                ));
            }
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho,
            wo,
            cin_g: c_in / p.groups,
            cout_g: c_out / p.groups,
            stride: p.stride,
            padding: p.padding,
        })
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn in_item(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.c_out * self.ho * self.wo
    }
}

/// Output positions `[lo, hi)` whose input coordinate `o·stride + k − pad`
/// falls inside `[0, in_len)`.
fn valid_range(
    out_len: usize,
    in_len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let shift = k as isize - pad as isize;
    let s = stride as isize;
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) + s - 1) / s
    };
    let top = in_len as isize - 1 - shift;
    if top < 0 {
        return (0, 0);
    }
    let hi = ((top / s) + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_item_forward(
    g: &ConvGeometry,
    inp: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let ksz = g.kh * g.kw;
    for oc in 0..g.c_out {
        let grp = oc / g.cout_g;
        let oplane = &mut out[oc * ohw..(oc + 1) * ohw];
        oplane.fill(bias.map_or(0.0, |b| b[oc]));
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let iplane = &inp[ic * hw..(ic + 1) * hw];
            let wbase = (oc * g.cin_g + icg) * ksz;
            if g.is_plain_pointwise() {
                let wv = weight[wbase];
                for (o, &i) in oplane.iter_mut().zip(iplane) {
                    *o += wv * i;
                }
                continue;
            }
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.ho, g.h, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let wv = weight[wbase + ky * g.kw + kx];
                    let (ox0, ox1) = valid_range(g.wo, g.w, kx, g.stride, g.padding);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let orow = &mut oplane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.padding;
                            for (o, &i) in
                                orow[ox0..ox1].iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)])
                            {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D convolution (cross-correlation, zero padding).
///
/// `weight` is `(c_out, c_in / groups, k_h, k_w)`; `bias` holds `c_out` values
/// in any shape.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    p: ConvParams,
) -> Result<Tensor> {
    let g = ConvGeometry::validate(input.shape(), weight.shape(), bias.map(Tensor::shape), p)?;
    let n = input.shape()[0];
    let mut out = vec![0.0; n * g.out_item()];
    let bias = bias.map(Tensor::data);
    if g.out_item() > 0 {
        out.par_chunks_mut(g.out_item())
            .zip(input.data().par_chunks(g.in_item().max(1)))
            .for_each(|(o, i)| conv_item_forward(&g, i, weight.data(), bias, o));
    }
    Tensor::new([n, g.c_out, g.ho, g.wo], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[allow(clippy::needless_range_loop)]
fn conv_item_backward(
    g: &ConvGeometry,
    inp: &[f64],
    weight: &[f64],
    gout: &[f64],
    gin: &mut [f64],
    gw: &mut [f64],
) {
    let (hw, ohw) = (g.h * g.w, g.ho * g.wo);
    let ksz = g.kh * g.kw;
    for oc in 0..g.c_out {
        let grp = oc / g.cout_g;
        let gplane = &gout[oc * ohw..(oc + 1) * ohw];
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let iplane = &inp[ic * hw..(ic + 1) * hw];
            let giplane = &mut gin[ic * hw..(ic + 1) * hw];
            let wbase = (oc * g.cin_g + icg) * ksz;
            if g.is_plain_pointwise() {
                let wv = weight[wbase];
                let mut acc = 0.0;
                for ((gi, &go), &x) in giplane.iter_mut().zip(gplane).zip(iplane) {
                    *gi += wv * go;
                    acc += go * x;
                }
                gw[wbase] += acc;
                continue;
            }
            for ky in 0..g.kh {
                let (oy0, oy1) = valid_range(g.ho, g.h, ky, g.stride, g.padding);
                for kx in 0..g.kw {
                    let widx = wbase + ky * g.kw + kx;
                    let wv = weight[widx];
                    let (ox0, ox1) = valid_range(g.wo, g.w, kx, g.stride, g.padding);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &gplane[oy * g.wo..(oy + 1) * g.wo];
                        let irow = &iplane[iy * g.w..(iy + 1) * g.w];
                        let girow = &mut giplane[iy * g.w..(iy + 1) * g.w];
                        for ox in ox0..ox1 {
                            let ix = ox * g.stride + kx - g.padding;
                            girow[ix] += wv * grow[ox];
                            acc += grow[ox] * irow[ix];
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    p: ConvParams,
) -> Result<ConvGrads> {
    let g = ConvGeometry::validate(input.shape(), weight.shape(), None, p)?;
    let n = input.shape()[0];
    if grad_out.shape() != [n, g.c_out, g.ho, g.wo] {
        return Err(Error::dim(
            "conv2d_backward",
            "grad_out",
            format!(
                "expected {:?}, got {:?}",
                [n, g.c_out, g.ho, g.wo],
                grad_out.shape()
            ),
        ));
    }
    let mut gin = vec![0.0; input.numel()];
    let wlen = weight.numel();
    // Per-item weight gradients are reduced in batch order so results do not
    // depend on the thread count.
    let partials: Vec<Vec<f64>> = if g.out_item() == 0 || g.in_item() == 0 {
        Vec::new()
    } else {
        gin.par_chunks_mut(g.in_item())
            .zip(input.data().par_chunks(g.in_item()))
            .zip(grad_out.data().par_chunks(g.out_item()))
            .map(|((gi, x), go)| {
                let mut gw = vec![0.0; wlen];
                conv_item_backward(&g, x, weight.data(), go, gi, &mut gw);
                gw
            })
            .collect()
    };
    let mut gw = vec![0.0; wlen];
    for part in &partials {
        for (a, b) in gw.iter_mut().zip(part) {
            *a += b;
        }
    }
    let ohw = g.ho * g.wo;
    let mut gb = vec![0.0; g.c_out];
    for item in grad_out.data().chunks(g.out_item().max(1)) {
        for (oc, b) in gb.iter_mut().enumerate() {
            *b += item[oc * ohw..(oc + 1) * ohw].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), gin)?,
        weight: Tensor::new(weight.shape(), gw)?,
        bias: Tensor::vector(gb),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    Train,
    Infer,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct BatchNormOutput {
    pub output: Tensor,
    /// Mean used for normalization (batch mean in train mode, running mean in infer mode).
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and population variance, present in train mode.
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Batch normalization over `(n, h, w)` per channel.
///
/// Train mode normalizes with the batch mean and population variance; infer
/// mode uses `running`. The running statistics are not modified here; callers
/// apply [`RunningStats::update`] with the returned batch statistics.
/// Infer-mode batch norm overwriting `x`; same arithmetic as [`batch_norm`].
pub fn batch_norm_infer_in_place(
    x: &mut Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    eps: f64,
) -> Result<()> {
    let [_, c, h, w] = x.shape();
    for (len, axis) in [
        (gamma.numel(), "gamma"),
        (beta.numel(), "beta"),
        (running.mean.len(), "running_mean"),
        (running.var.len(), "running_var"),
    ] {
        if len != c {
            return Err(Error::dim(
                "batch_norm",
                axis,
                format!("{len} entries for {c} channels"),
            ));
        }
    }
    let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (g, bt) = (gamma.data(), beta.data());
    for (i, plane) in x.data_mut().chunks_mut((h * w).max(1)).enumerate() {
        let ch = i % c;
        for v in plane {
            *v = g[ch] * (*v - running.mean[ch]) * inv_std[ch] + bt[ch];
        }
    }
    Ok(())
}

pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running: &RunningStats,
    mode: NormMode,
    eps: f64,
) -> Result<BatchNormOutput> {
    let [n, c, h, w] = input.shape();
    for (len, axis) in [
        (gamma.numel(), "gamma"),
        (beta.numel(), "beta"),
        (running.mean.len(), "running_mean"),
        (running.var.len(), "running_var"),
    ] {
        if len != c {
            return Err(Error::dim(
                "batch_norm",
                axis,
                format!("{len} entries for {c} channels"),
            ));
        }
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let (mean, var) = match mode {
        NormMode::Train => {
            if n * hw == 0 {
                return Err(Error::dim(
                    "batch_norm",
                    "n*h*w",
                    "empty batch in train mode",
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let s: f64 = (0..n).map(|b| input.plane(b, ch).iter().sum::<f64>()).sum();
                let m = s / count;
                let v: f64 = (0..n)
                    .map(|b| {
                        input
                            .plane(b, ch)
                            .iter()
                            .map(|x| (x - m) * (x - m))
                            .sum::<f64>()
                    })
                    .sum();
                mean[ch] = m;
                var[ch] = v / count;
            }
            (mean, var)
        }
        NormMode::Infer => (running.mean.clone(), running.var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0; input.numel()];
    let (g, bt) = (gamma.data(), beta.data());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for (o, &x) in out[off..off + hw]
                .iter_mut()
                .zip(&input.data()[off..off + hw])
            {
                *o = g[ch] * (x - mean[ch]) * inv_std[ch] + bt[ch];
            }
        }
    }
    let batch_stats = (mode == NormMode::Train).then(|| (mean.clone(), var));
    Ok(BatchNormOutput {
        output: Tensor::new(input.shape(), out)?,
        mean,
        inv_std,
        batch_stats,
    })
}

/// Returns `(d_input, d_gamma, d_beta)` given the forward input and the
/// `mean`/`inv_std` it was normalized with.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &Tensor,
    mode: NormMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, c, h, w] = input.shape();
    let hw = h * w;
    let count = (n * hw) as f64;
    let xhat = Tensor::new(
        input.shape(),
        input
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let ch = (i / hw.max(1)) % c;
                (x - mean[ch]) * inv_std[ch]
            })
            .collect(),
    )?;
    let (go, xh) = (grad_out.data(), xhat.data());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += go[i] * xh[i];
                dbeta[ch] += go[i];
            }
        }
    }
    let mut dx = vec![0.0; xhat.numel()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let scale = gamma.data()[ch] * inv_std[ch];
            for i in off..off + hw {
                dx[i] = match mode {
                    NormMode::Infer => scale * go[i],
                    NormMode::Train => {
                        scale * (go[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                    }
                };
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::vector(dgamma),
        Tensor::vector(dbeta),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    HardSwish,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::HardSwish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    /// Derivative at `x`; ReLU uses 0 at the origin.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::HardSwish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
        }
    }
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    input.map(|x| kind.apply(x))
}

pub fn activation_backward(input: &Tensor, grad_out: &Tensor, kind: Activation) -> Result<Tensor> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * kind.derivative(x))
        .collect();
    Tensor::new(input.shape(), data)
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn axis_split(shape: Shape, axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = input.clone();
    softmax_in_place(&mut out, axis)?;
    Ok(out)
}

pub fn softmax_in_place(t: &mut Tensor, axis: usize) -> Result<()> {
    if axis >= 4 {
        return Err(Error::dim(
            "softmax",
            "axis",
            format!("axis {axis} out of range 0..4"),
        ));
    }
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let x = t.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|k| x[base + k * inner])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x[base + k * inner] - max).exp();
                x[base + k * inner] = e;
                sum += e;
            }
            for k in 0..len {
                x[base + k * inner] /= sum;
            }
        }
    }
    Ok(())
}

/// `dx = y ⊙ (g − Σ_axis g ⊙ y)` given the softmax output `y`.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(output.shape(), axis);
    let (y, g) = (output.data(), grad_out.data());
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: f64 = (0..len)
                .map(|k| y[base + k * inner] * g[base + k * inner])
                .sum();
            for k in 0..len {
                let idx = base + k * inner;
                dx[idx] = y[idx] * (g[idx] - dot);
            }
        }
    }
    Tensor::new(output.shape(), dx)
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::dim(
            "global_avg_pool",
            "spatial",
            format!("empty {h}x{w} map"),
        ));
    }
    let hw = (h * w) as f64;
    let data = (0..n)
        .flat_map(|b| (0..c).map(move |ch| (b, ch)))
        .map(|(b, ch)| input.plane(b, ch).iter().sum::<f64>() / hw)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    let hw = h * w;
    let mut dx = vec![0.0; numel(input_shape)];
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.data()[b * c + ch] / hw as f64;
            dx[(b * c + ch) * hw..(b * c + ch + 1) * hw].fill(g);
        }
    }
    Tensor::new(input_shape, dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Shapes must match exactly.
    None,
    /// `b` is `(n, c, 1, 1)` and is expanded over the spatial axes of `a`.
    PerChannel,
}

fn check_broadcast(op: &'static str, a: Shape, b: Shape, broadcast: Broadcast) -> Result<()> {
    match broadcast {
        Broadcast::None if a != b => Err(Error::dim(op, "shape", format!("{a:?} vs {b:?}"))),
        Broadcast::PerChannel if b != [a[0], a[1], 1, 1] => Err(Error::dim(
            op,
            "channel",
            format!(
                "per-channel operand must be {:?}, got {b:?}",
                [a[0], a[1], 1, 1]
            ),
        )),
        _ => Ok(()),
    }
}

pub fn elementwise(a: &Tensor, b: &Tensor, op: BinaryOp, broadcast: Broadcast) -> Result<Tensor> {
    check_broadcast("elementwise", a.shape(), b.shape(), broadcast)?;
    let f = |x: f64, y: f64| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Mul => x * y,
    };
    let data = match broadcast {
        Broadcast::None => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
        Broadcast::PerChannel => {
            let hw = a.shape()[2] * a.shape()[3];
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i / hw.max(1)]))
                .collect()
        }
    };
    Tensor::new(a.shape(), data)
}

/// `a ← a ⊙ b` without allocating.
pub fn mul_in_place(a: &mut Tensor, b: &Tensor, broadcast: Broadcast) -> Result<()> {
    check_broadcast("elementwise", a.shape(), b.shape(), broadcast)?;
    let hw = (a.shape()[2] * a.shape()[3]).max(1);
    match broadcast {
        Broadcast::None => a
            .data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(x, &y)| *x *= y),
        Broadcast::PerChannel => a
            .data_mut()
            .chunks_mut(hw)
            .zip(b.data())
            .for_each(|(plane, &g)| plane.iter_mut().for_each(|x| *x *= g)),
    }
    Ok(())
}

/// Sums a full-size gradient down to the `(n, c, 1, 1)` per-channel operand.
pub fn reduce_per_channel(full: &Tensor) -> Tensor {
    let [n, c, h, w] = full.shape();
    let hw = h * w;
    let data = full
        .data()
        .chunks(hw.max(1))
        .map(|p| p.iter().sum())
        .collect();
    Tensor::new([n, c, 1, 1], data).expect("per-channel reduction shape")
}

/// Batched matrix product over the `(n·c, h, w)` view of each operand, with
/// optional transposition of either side. The result is `(n_a, c_a, rows, cols)`.
pub fn matmul_batched(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    const OP: &str = "matmul_batched";
    let [an, ac, ah, aw] = a.shape();
    let [bn, bc, bh, bw] = b.shape();
    if an * ac != bn * bc {
        return Err(Error::dim(
            OP,
            "batch",
            format!("{} vs {}", an * ac, bn * bc),
        ));
    }
    let (rows, inner_a) = if trans_a { (aw, ah) } else { (ah, aw) };
    let (inner_b, cols) = if trans_b { (bw, bh) } else { (bh, bw) };
    if inner_a != inner_b {
        return Err(Error::dim(OP, "inner", format!("{inner_a} vs {inner_b}")));
    }
    let inner = inner_a;
    let batch = an * ac;
    let mut out = vec![0.0; batch * rows * cols];
    let (asz, bsz) = (ah * aw, bh * bw);
    let mut a_buf = vec![0.0; rows * inner];
    let mut b_buf = vec![0.0; inner * cols];
    for bi in 0..batch {
        let am = &a.data()[bi * asz..(bi + 1) * asz];
        let bm = &b.data()[bi * bsz..(bi + 1) * bsz];
        // Row-major (rows, inner) and (inner, cols) copies.
        let am: &[f64] = if trans_a {
            for r in 0..rows {
                for k in 0..inner {
                    a_buf[r * inner + k] = am[k * aw + r];
                }
            }
            &a_buf
        } else {
            am
        };
        let bm: &[f64] = if trans_b {
            for k in 0..inner {
                for c in 0..cols {
                    b_buf[k * cols + c] = bm[c * bw + k];
                }
            }
            &b_buf
        } else {
            bm
        };
        let om = &mut out[bi * rows * cols..(bi + 1) * rows * cols];
        for r in 0..rows {
            let orow = &mut om[r * cols..(r + 1) * cols];
            for k in 0..inner {
                let av = am[r * inner + k];
                let brow = &bm[k * cols..(k + 1) * cols];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    Tensor::new([an, ac, rows, cols], out)
}

/// Gradients of `matmul_batched(a, b, trans_a, trans_b)` for both operands.
pub fn matmul_batched_backward(
    a: &Tensor,
    b: &Tensor,
    trans_a: bool,
    trans_b: bool,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let da = if trans_a {
        matmul_batched(b, grad_out, trans_b, true)?
    } else {
        matmul_batched(grad_out, b, false, !trans_b)?
    };
    let db = if trans_b {
        matmul_batched(grad_out, a, true, trans_a)?
    } else {
        matmul_batched(a, grad_out, !trans_a, false)?
    };
    Ok((da.reshape(a.shape())?, db.reshape(b.shape())?))
}

/// Mean cross-entropy of `(n, k, 1, 1)` logits against class indices.
/// Returns the loss and the softmax probabilities.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, k, h, w] = logits.shape();
    if h * w != 1 {
        return Err(Error::dim(
            "cross_entropy",
            "spatial",
            "logits must be (n, k, 1, 1)",
        ));
    }
    if labels.len() != n {
        return Err(Error::dim(
            "cross_entropy",
            "n",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let probs = softmax(logits, 1)?;
    let mut loss = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        let z = &logits.data()[row * k..(row + 1) * k];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - z[label];
    }
    Ok((loss / n.max(1) as f64, probs))
}
