//! CBAM: a channel gate computed from globally averaged activations, followed
//! by a spatial gate computed from a 7x7 convolution over the per-pixel
//! channel mean and channel max. Both gates multiply the map.

use crate::error::{dim_err, Result};
use crate::rng::SeededRng;
use crate::tensor::{
    conv2d, conv2d_backward, gap, mlp_backward, mlp_forward, sigmoid, ChannelVector, ConvKernel,
    FeatureMap, MlpParams, ParamSet,
};

/// Default MLP reduction ratio.
pub const DEFAULT_REDUCTION: usize = 4;
pub const SPATIAL_KERNEL: usize = 7;

/// Per-channel gate `M_c`, entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionMap(pub ChannelVector);

/// Per-pixel gate `M_s`, entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionMap {
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
}

impl SpatialAttentionMap {
    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.weights[h * self.width + w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbamParams {
    pub mlp: MlpParams,
    /// 2 -> 1 channels, 7x7, stride 1, padding 3.
    pub spatial: ConvKernel,
}

impl CbamParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            mlp: MlpParams::zeros(channels, reduction)?,
            spatial: spatial_kernel_zeros(),
        })
    }

    pub fn random(channels: usize, reduction: usize, rng: &mut SeededRng) -> Result<Self> {
        let mlp = MlpParams::random(channels, reduction, rng)?;
        let k = SPATIAL_KERNEL;
        let spatial = ConvKernel::random(1, 2, k, k, 1, k / 2, rng);
        Ok(Self { mlp, spatial })
    }

    pub fn channels(&self) -> usize {
        self.mlp.channels
    }
}

fn spatial_kernel_zeros() -> ConvKernel {
    ConvKernel::zeros(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL, 1, SPATIAL_KERNEL / 2)
}

impl ParamSet for CbamParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.mlp.visit(&crate::tensor::join(prefix, "mlp"), f);
        self.spatial.visit(&crate::tensor::join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.mlp.visit_mut(&crate::tensor::join(prefix, "mlp"), f);
        self.spatial.visit_mut(&crate::tensor::join(prefix, "spatial"), f);
    }
}

pub fn channel_attention(f: &FeatureMap, p: &CbamParams) -> Result<ChannelAttentionMap> {
    if f.channels() != p.channels() {
        return dim_err(format!(
            "CBAM built for {} channels, map has {}",
            p.channels(),
            f.channels()
        ));
    }
    let logits = mlp_forward(&gap(f)?, &p.mlp)?;
    Ok(ChannelAttentionMap(ChannelVector(sigmoid(&logits.0))))
}

/// Stacks the channel mean and channel max into a `2 x H x W` map. Also
/// returns the arg-max channel per pixel (first index on ties).
fn reduce_channels(f: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let (c, h, w) = f.shape();
    if c == 0 {
        return dim_err("spatial attention over zero channels");
    }
    let n = h * w;
    let mut stacked = FeatureMap::zeros(2, h, w);
    let mut argmax = vec![0usize; n];
    {
        let data = stacked.data_mut();
        let (mean, max) = data.split_at_mut(n);
        max.copy_from_slice(f.plane(0));
        mean.copy_from_slice(f.plane(0));
        for ch in 1..c {
            let plane = f.plane(ch);
            for i in 0..n {
                mean[i] += plane[i];
                if plane[i] > max[i] {
                    max[i] = plane[i];
                    argmax[i] = ch;
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok((stacked, argmax))
}

pub fn spatial_attention(fc: &FeatureMap, p: &CbamParams) -> Result<SpatialAttentionMap> {
    let (stacked, _) = reduce_channels(fc)?;
    let logits = conv2d(&stacked, &p.spatial)?;
    if (logits.height(), logits.width()) != (fc.height(), fc.width()) {
        return dim_err("spatial attention kernel must preserve H x W");
    }
    Ok(SpatialAttentionMap {
        height: fc.height(),
        width: fc.width(),
        weights: sigmoid(logits.data()),
    })
}

fn gate_channels(f: &FeatureMap, mc: &ChannelAttentionMap) -> FeatureMap {
    let mut out = f.clone();
    for c in 0..f.channels() {
        let g = mc.0[c];
        out.plane_mut(c).iter_mut().for_each(|v| *v *= g);
    }
    out
}

fn gate_pixels(f: &FeatureMap, ms: &SpatialAttentionMap) -> FeatureMap {
    let mut out = f.clone();
    for c in 0..f.channels() {
        for (v, g) in out.plane_mut(c).iter_mut().zip(&ms.weights) {
            *v *= g;
        }
    }
    out
}

/// Intermediates of one CBAM forward pass.
#[derive(Debug, Clone)]
pub struct CbamForward {
    pub channel_gate: ChannelAttentionMap,
    pub channel_refined: FeatureMap,
    pub spatial_gate: SpatialAttentionMap,
    pub output: FeatureMap,
}

pub fn cbam_forward(f: &FeatureMap, p: &CbamParams) -> Result<CbamForward> {
    let channel_gate = channel_attention(f, p)?;
    let channel_refined = gate_channels(f, &channel_gate);
    let spatial_gate = spatial_attention(&channel_refined, p)?;
    let output = gate_pixels(&channel_refined, &spatial_gate);
    Ok(CbamForward {
        channel_gate,
        channel_refined,
        spatial_gate,
        output,
    })
}

/// Channel gate first, spatial gate on the channel-refined map second.
pub fn apply_cbam(f: &FeatureMap, p: &CbamParams) -> Result<FeatureMap> {
    Ok(cbam_forward(f, p)?.output)
}

/// Gradients of `apply_cbam(f, p)` with respect to `f` and every parameter.
pub fn cbam_backward(
    f: &FeatureMap,
    p: &CbamParams,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, CbamParams)> {
    if !upstream.same_shape(f) {
        return dim_err("CBAM upstream gradient shape");
    }
    let fw = cbam_forward(f, p)?;
    cbam_backward_cached(f, p, &fw, upstream)
}

pub fn cbam_backward_cached(
    f: &FeatureMap,
    p: &CbamParams,
    fw: &CbamForward,
    upstream: &FeatureMap,
) -> Result<(FeatureMap, CbamParams)> {
    let (c, h, w) = f.shape();
    let n = h * w;
    let ms = &fw.spatial_gate.weights;
    let fc = &fw.channel_refined;

    // out = ms * fc
    let mut d_fc = gate_pixels(upstream, &fw.spatial_gate);
    let mut d_logit = vec![0.0; n];
    for ch in 0..c {
        let g = upstream.plane(ch);
        let x = fc.plane(ch);
        for i in 0..n {
            d_logit[i] += g[i] * x[i];
        }
    }
    for i in 0..n {
        d_logit[i] *= ms[i] * (1.0 - ms[i]);
    }

    let (stacked, argmax) = reduce_channels(fc)?;
    let d_logit = FeatureMap::new(1, h, w, d_logit)?;
    let (d_stacked, g_spatial) = conv2d_backward(&stacked, &p.spatial, &d_logit)?;
    let (d_mean, d_max) = d_stacked.data().split_at(n);
    for ch in 0..c {
        let plane = d_fc.plane_mut(ch);
        for i in 0..n {
            plane[i] += d_mean[i] / c as f64;
            if argmax[i] == ch {
                plane[i] += d_max[i];
            }
        }
    }

    // fc = mc * f
    let mc = &fw.channel_gate.0;
    let mut d_gate = vec![0.0; c];
    let mut d_f = d_fc.clone();
    for ch in 0..c {
        let df = d_f.plane_mut(ch);
        let x = f.plane(ch);
        let mut acc = 0.0;
        for i in 0..n {
            acc += df[i] * x[i];
            df[i] *= mc[ch];
        }
        d_gate[ch] = acc * mc[ch] * (1.0 - mc[ch]);
    }

    let pooled = gap(f)?;
    let (d_pooled, g_mlp) = mlp_backward(&pooled, &p.mlp, &d_gate)?;
    for ch in 0..c {
        let add = d_pooled[ch] / n as f64;
        d_f.plane_mut(ch).iter_mut().for_each(|v| *v += add);
    }

    Ok((
        d_f,
        CbamParams {
            mlp: g_mlp,
            spatial: g_spatial,
        },
    ))
}
