//! Dense `C x H x W` feature maps and the handful of differentiable
//! primitives the rest of the crate is built from: pooling, sigmoid, a
//! two-layer MLP, and zero-padded 2D cross-correlation.
//!
//! Every forward op has an explicit backward counterpart. There is no tape;
//! callers hold on to whatever intermediates they need and call the backward
//! functions in reverse order themselves.

use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;

/// Row-major `(c, h, w)` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return dim_err(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for h in 0..height {
                for w in 0..width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn random(
        channels: usize,
        height: usize,
        width: usize,
        lo: f64,
        hi: f64,
        rng: &mut SeededRng,
    ) -> Self {
        Self::from_fn(channels, height, width, |_, _, _| rng.range(lo, hi))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }

    #[inline]
    pub fn at(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scaled(&self, k: f64) -> FeatureMap {
        self.map(|x| k * x)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// One value per channel, e.g. the output of global pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector(pub Vec<f64>);

impl ChannelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for ChannelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A set of trainable arrays that can be walked in a fixed order.
///
/// The walk order defines the flat layout used by gradient checks, the
/// optimizer and the checkpoint writer.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites every parameter from `flat`, which must have `param_count()` entries.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        self.visit_mut("", &mut |_, _, d| d.iter_mut().for_each(|x| *x = v));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Two-layer perceptron `W2 * relu(W1 * v + b1) + b2` with hidden width `C / r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub channels: usize,
    pub hidden: usize,
    /// `hidden x channels`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `channels x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if channels == 0 || reduction == 0 || channels % reduction != 0 {
            return dim_err(format!(
                "reduction ratio {reduction} must divide channel count {channels}"
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            hidden,
            w1: vec![0.0; hidden * channels],
            b1: vec![0.0; hidden],
            w2: vec![0.0; channels * hidden],
            b2: vec![0.0; channels],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn random(channels: usize, reduction: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(channels, reduction)?;
        let a1 = (6.0 / channels as f64).sqrt();
        let a2 = (6.0 / p.hidden as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.range(-a1, a1));
        p.w2.iter_mut().for_each(|w| *w = rng.range(-a2, a2));
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if self.w1.len() != self.hidden * self.channels
            || self.b1.len() != self.hidden
            || self.w2.len() != self.channels * self.hidden
            || self.b2.len() != self.channels
        {
            return dim_err("inconsistent MLP parameter shapes");
        }
        Ok(())
    }
}

impl ParamSet for MlpParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "w1"), &[self.hidden, self.channels], &self.w1);
        f(&join(prefix, "b1"), &[self.hidden], &self.b1);
        f(&join(prefix, "w2"), &[self.channels, self.hidden], &self.w2);
        f(&join(prefix, "b2"), &[self.channels], &self.b2);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let (h, c) = (self.hidden, self.channels);
        f(&join(prefix, "w1"), &[h, c], &mut self.w1);
        f(&join(prefix, "b1"), &[h], &mut self.b1);
        f(&join(prefix, "w2"), &[c, h], &mut self.w2);
        f(&join(prefix, "b2"), &[c], &mut self.b2);
    }
}

/// Convolution weights `(out, in, kh, kw)` plus per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvKernel {
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            weights: vec![0.0; out_channels * in_channels * kh * kw],
            bias: vec![0.0; out_channels],
            stride,
            padding,
        }
    }

    /// He-uniform initialization over the fan-in, zero bias.
    pub fn random(
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let mut k = Self::zeros(out_channels, in_channels, kh, kw, stride, padding);
        let a = (6.0 / (in_channels * kh * kw) as f64).sqrt();
        k.weights.iter_mut().for_each(|w| *w = rng.range(-a, a));
        k
    }

    #[inline]
    pub fn widx(&self, o: usize, i: usize, y: usize, x: usize) -> usize {
        ((o * self.in_channels + i) * self.kh + y) * self.kw + x
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return dim_err("stride must be positive");
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kh || pw < self.kw {
            return dim_err(format!(
                "kernel {}x{} larger than padded input {}x{}",
                self.kh, self.kw, ph, pw
            ));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.out_channels * self.in_channels * self.kh * self.kw
            || self.bias.len() != self.out_channels
        {
            return dim_err("inconsistent kernel shapes");
        }
        Ok(())
    }
}

impl ParamSet for ConvKernel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.out_channels, self.in_channels, self.kh, self.kw];
        f(&join(prefix, "weight"), &shape, &self.weights);
        f(&join(prefix, "bias"), &[self.out_channels], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let shape = [self.out_channels, self.in_channels, self.kh, self.kw];
        f(&join(prefix, "weight"), &shape, &mut self.weights);
        f(&join(prefix, "bias"), &[self.out_channels], &mut self.bias);
    }
}

/// Global average pooling.
pub fn gap(f: &FeatureMap) -> Result<ChannelVector> {
    let n = f.height * f.width;
    if n == 0 {
        return dim_err("global pooling over empty spatial extent");
    }
    Ok(ChannelVector(
        (0..f.channels)
            .map(|c| f.plane(c).iter().sum::<f64>() / n as f64)
            .collect(),
    ))
}

/// Global max pooling.
pub fn gmp(f: &FeatureMap) -> Result<ChannelVector> {
    if f.height * f.width == 0 {
        return dim_err("global pooling over empty spatial extent");
    }
    Ok(ChannelVector(
        (0..f.channels)
            .map(|c| f.plane(c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    ))
}

const SIGMOID_ARG_LIMIT: f64 = 700.0;
/// Largest double strictly below one.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside `(0, 1)` for every finite input.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_ARG_LIMIT, SIGMOID_ARG_LIMIT);
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.min(ONE_BELOW)
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn relu(f: &FeatureMap) -> FeatureMap {
    f.map(|x| x.max(0.0))
}

/// Routes `grad` through a relu whose *input* was `pre`.
pub fn relu_backward(pre: &FeatureMap, grad: &FeatureMap) -> FeatureMap {
    let mut g = grad.clone();
    for (gi, &p) in g.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *gi = 0.0;
        }
    }
    g
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64], bias: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            let row = &m[r * cols..(r + 1) * cols];
            bias[r] + row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Hidden pre-activation and output of the MLP.
fn mlp_forward_parts(v: &ChannelVector, p: &MlpParams) -> Result<(Vec<f64>, Vec<f64>)> {
    p.check()?;
    if v.len() != p.channels {
        return dim_err(format!(
            "vector length {} != MLP channels {}",
            v.len(),
            p.channels
        ));
    }
    let pre = matvec(&p.w1, p.hidden, p.channels, &v.0, &p.b1);
    let act: Vec<f64> = pre.iter().map(|x| x.max(0.0)).collect();
    let out = matvec(&p.w2, p.channels, p.hidden, &act, &p.b2);
    Ok((pre, out))
}

pub fn mlp_forward(v: &ChannelVector, p: &MlpParams) -> Result<ChannelVector> {
    Ok(ChannelVector(mlp_forward_parts(v, p)?.1))
}

/// Returns the gradient with respect to `v` and to every MLP parameter.
pub fn mlp_backward(
    v: &ChannelVector,
    p: &MlpParams,
    grad_out: &[f64],
) -> Result<(ChannelVector, MlpParams)> {
    let (pre, _) = mlp_forward_parts(v, p)?;
    if grad_out.len() != p.channels {
        return dim_err("MLP upstream gradient length");
    }
    let (c, h) = (p.channels, p.hidden);
    let mut g = MlpParams {
        channels: c,
        hidden: h,
        w1: vec![0.0; h * c],
        b1: vec![0.0; h],
        w2: vec![0.0; c * h],
        b2: grad_out.to_vec(),
    };
    let mut d_act = vec![0.0; h];
    for r in 0..c {
        for k in 0..h {
            g.w2[r * h + k] = grad_out[r] * pre[k].max(0.0);
            d_act[k] += p.w2[r * h + k] * grad_out[r];
        }
    }
    let d_pre: Vec<f64> = d_act
        .iter()
        .zip(&pre)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    g.b1.copy_from_slice(&d_pre);
    let mut d_v = vec![0.0; c];
    for k in 0..h {
        for j in 0..c {
            g.w1[k * c + j] = d_pre[k] * v.0[j];
            d_v[j] += p.w1[k * c + j] * d_pre[k];
        }
    }
    Ok((ChannelVector(d_v), g))
}

/// Dot product with four independent accumulators, so the compiler can
/// vectorize it. The summation order is fixed, hence deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(w: f64, x: &[f64], y: &mut [f64]) {
    for (d, v) in y.iter_mut().zip(x) {
        *d += w * v;
    }
}

/// Range of output positions `o` with `0 <= o*s + k - p < n`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(out_n)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Patch matrix with one row per `(in_channel, ky, kx)` and one column per
/// output pixel; zero where the tap falls in the padding.
fn im2col(f: &FeatureMap, k: &ConvKernel, oh: usize, ow: usize) -> Vec<f64> {
    let (s, p) = (k.stride, k.padding);
    let n = oh * ow;
    let mut cols = vec![0.0; k.in_channels * k.kh * k.kw * n];
    for i in 0..k.in_channels {
        let iplane = f.plane(i);
        for ky in 0..k.kh {
            let (y0, y1) = valid_range(ky, p, s, f.height, oh);
            for kx in 0..k.kw {
                let (x0, x1) = valid_range(kx, p, s, f.width, ow);
                if x1 <= x0 {
                    continue;
                }
                let row = ((i * k.kh + ky) * k.kw + kx) * n;
                let ix0 = x0 * s + kx - p;
                for oy in y0..y1 {
                    let iy = oy * s + ky - p;
                    let src = &iplane[iy * f.width + ix0..(iy + 1) * f.width];
                    let dst = &mut cols[row + oy * ow + x0..row + oy * ow + x1];
                    for (d, v) in dst.iter_mut().zip(src.iter().step_by(s)) {
                        *d = *v;
                    }
                }
            }
        }
    }
    cols
}

/// Adds the patch-matrix gradient back onto the input positions it was read from.
fn col2im(cols: &[f64], k: &ConvKernel, out: &mut FeatureMap, oh: usize, ow: usize) {
    let (s, p) = (k.stride, k.padding);
    let n = oh * ow;
    let (h, w) = (out.height, out.width);
    for i in 0..k.in_channels {
        let plane = out.plane_mut(i);
        for ky in 0..k.kh {
            let (y0, y1) = valid_range(ky, p, s, h, oh);
            for kx in 0..k.kw {
                let (x0, x1) = valid_range(kx, p, s, w, ow);
                if x1 <= x0 {
                    continue;
                }
                let row = ((i * k.kh + ky) * k.kw + kx) * n;
                let ix0 = x0 * s + kx - p;
                for oy in y0..y1 {
                    let iy = oy * s + ky - p;
                    let src = &cols[row + oy * ow + x0..row + oy * ow + x1];
                    let dst = &mut plane[iy * w + ix0..(iy + 1) * w];
                    for (d, v) in dst.iter_mut().step_by(s).zip(src) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d(f: &FeatureMap, k: &ConvKernel) -> Result<FeatureMap> {
    k.check()?;
    if f.channels != k.in_channels {
        return dim_err(format!(
            "conv expects {} input channels, got {}",
            k.in_channels, f.channels
        ));
    }
    let (oh, ow) = k.output_dims(f.height, f.width)?;
    let mut out = FeatureMap::zeros(k.out_channels, oh, ow);
    if k.stride == 1 {
        conv_direct(f, k, &mut out);
        return Ok(out);
    }
    // Strided: gather patches once, then contiguous row updates.
    let n = oh * ow;
    let taps = k.in_channels * k.kh * k.kw;
    let cols = im2col(f, k, oh, ow);
    for o in 0..k.out_channels {
        let oplane = out.plane_mut(o);
        oplane.iter_mut().for_each(|v| *v = k.bias[o]);
        for (r, &w) in k.weights[o * taps..(o + 1) * taps].iter().enumerate() {
            if w != 0.0 {
                axpy(w, &cols[r * n..(r + 1) * n], oplane);
            }
        }
    }
    Ok(out)
}

/// Stride-1 convolution straight from input rows.
fn conv_direct(f: &FeatureMap, k: &ConvKernel, out: &mut FeatureMap) {
    let (oh, ow) = (out.height, out.width);
    let p = k.padding;
    for o in 0..k.out_channels {
        let oplane = out.plane_mut(o);
        oplane.iter_mut().for_each(|v| *v = k.bias[o]);
        for i in 0..k.in_channels {
            let iplane = f.plane(i);
            for ky in 0..k.kh {
                let (y0, y1) = valid_range(ky, p, 1, f.height, oh);
                for kx in 0..k.kw {
                    let w = k.weights[k.widx(o, i, ky, kx)];
                    let (x0, x1) = valid_range(kx, p, 1, f.width, ow);
                    if w == 0.0 || x1 <= x0 {
                        continue;
                    }
                    let ix0 = x0 + kx - p;
                    for oy in y0..y1 {
                        let iy = oy + ky - p;
                        let irow = &iplane[iy * f.width + ix0..iy * f.width + ix0 + (x1 - x0)];
                        axpy(w, irow, &mut oplane[oy * ow + x0..oy * ow + x1]);
                    }
                }
            }
        }
    }
}

/// Gradients of `conv2d(f, k)` given the upstream gradient of its output.
/// The returned kernel holds weight and bias gradients.
pub fn conv2d_backward(
    f: &FeatureMap,
    k: &ConvKernel,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, ConvKernel)> {
    let (gi, gk) = conv2d_backward_impl(f, k, grad_out, true)?;
    Ok((gi.expect("input gradient requested"), gk))
}

/// Weight and bias gradients only, for layers whose input is data.
pub fn conv2d_weight_grad(f: &FeatureMap, k: &ConvKernel, grad_out: &FeatureMap) -> Result<ConvKernel> {
    Ok(conv2d_backward_impl(f, k, grad_out, false)?.1)
}

fn conv2d_backward_impl(
    f: &FeatureMap,
    k: &ConvKernel,
    grad_out: &FeatureMap,
    want_input: bool,
) -> Result<(Option<FeatureMap>, ConvKernel)> {
    k.check()?;
    let (oh, ow) = k.output_dims(f.height, f.width)?;
    if f.channels != k.in_channels || grad_out.shape() != (k.out_channels, oh, ow) {
        return dim_err("conv backward shape mismatch");
    }
    let mut gk = ConvKernel::zeros(k.out_channels, k.in_channels, k.kh, k.kw, k.stride, k.padding);
    for o in 0..k.out_channels {
        gk.bias[o] = grad_out.plane(o).iter().sum();
    }
    if k.stride == 1 {
        let gi = conv_direct_backward(f, k, grad_out, &mut gk, want_input);
        return Ok((gi, gk));
    }
    let n = oh * ow;
    let taps = k.in_channels * k.kh * k.kw;
    let cols = im2col(f, k, oh, ow);
    for o in 0..k.out_channels {
        let g = grad_out.plane(o);
        for r in 0..taps {
            gk.weights[o * taps + r] = dot(g, &cols[r * n..(r + 1) * n]);
        }
    }
    // Row-at-a-time so each patch row stays in cache while all outputs add in.
    let d_cols = want_input.then(|| {
        let mut dc = cols;
        for r in 0..taps {
            let row = &mut dc[r * n..(r + 1) * n];
            row.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..k.out_channels {
                let w = k.weights[o * taps + r];
                if w != 0.0 {
                    axpy(w, grad_out.plane(o), row);
                }
            }
        }
        dc
    });
    let gi = d_cols.map(|dc| {
        let mut gi = FeatureMap::zeros(f.channels, f.height, f.width);
        col2im(&dc, k, &mut gi, oh, ow);
        gi
    });
    Ok((gi, gk))
}

fn conv_direct_backward(
    f: &FeatureMap,
    k: &ConvKernel,
    grad_out: &FeatureMap,
    gk: &mut ConvKernel,
    want_input: bool,
) -> Option<FeatureMap> {
    let (oh, ow) = (grad_out.height, grad_out.width);
    let p = k.padding;
    let width = f.width;
    let mut gi = want_input.then(|| FeatureMap::zeros(f.channels, f.height, f.width));
    for o in 0..k.out_channels {
        let gplane = grad_out.plane(o);
        for i in 0..k.in_channels {
            let iplane = f.plane(i);
            for ky in 0..k.kh {
                let (y0, y1) = valid_range(ky, p, 1, f.height, oh);
                for kx in 0..k.kw {
                    let widx = k.widx(o, i, ky, kx);
                    let (x0, x1) = valid_range(kx, p, 1, f.width, ow);
                    if x1 <= x0 {
                        continue;
                    }
                    let ix0 = x0 + kx - p;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy + ky - p;
                        acc += dot(
                            &gplane[oy * ow + x0..oy * ow + x1],
                            &iplane[iy * width + ix0..iy * width + ix0 + len],
                        );
                    }
                    gk.weights[widx] = acc;
                    let w = k.weights[widx];
                    if let Some(gi) = gi.as_mut().filter(|_| w != 0.0) {
                        let giplane = gi.plane_mut(i);
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            axpy(
                                w,
                                &gplane[oy * ow + x0..oy * ow + x1],
                                &mut giplane[iy * width + ix0..iy * width + ix0 + len],
                            );
                        }
                    }
                }
            }
        }
    }
    gi
}

/// A map `x -> y` with an analytic vector-Jacobian product.
pub trait Differentiable {
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// `J(x)^T * upstream`.
    fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>>;
}

/// Default finite-difference step for double-precision checks.
pub const GRAD_CHECK_EPS: f64 = 1e-4;

/// Compares an analytic gradient of the scalar function `f` at `x` against
/// central differences. Returns `max |a - n| / max(1, |n|)`.
pub fn grad_check_scalar(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::GradCheck("eps must be positive".into()));
    }
    if analytic.len() != x.len() {
        return Err(Error::GradCheck(format!(
            "analytic gradient has {} entries, input has {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe)?;
        probe[i] = orig - eps;
        let down = f(&probe)?;
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::GradCheck(format!("non-finite forward output at {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check for a vector-valued op, reduced to a scalar with a fixed
/// pseudo-random projection of its output.
pub fn grad_check(op: &dyn Differentiable, x: &[f64], eps: f64) -> Result<f64> {
    let y = op.forward(x)?;
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::GradCheck("non-finite forward output".into()));
    }
    let mut rng = SeededRng::new(0x5eed_9e37);
    let u: Vec<f64> = (0..y.len()).map(|_| rng.range(-1.0, 1.0)).collect();
    let analytic = op.backward(x, &u)?;
    grad_check_scalar(
        |p| Ok(op.forward(p)?.iter().zip(&u).map(|(a, b)| a * b).sum()),
        &analytic,
        x,
        eps,
    )
}
