//! Network: per-modality conv stems, energy-weighted fusion, optional CBAM,
//! a three-stage stride-2 backbone and a 1x1 prediction head.

use super::grid::{GridPrediction, CLS, OBJ};
use crate::attention::{cbam_backward_cached, cbam_forward, CbamForward, CbamParams, DEFAULT_REDUCTION};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{compute_alpha, fuse, fuse_backward, FusionWeight};
use crate::rng::SeededRng;
use crate::tensor::{conv2d, conv2d_backward, conv2d_weight_grad, join, relu, relu_backward, ConvKernel, FeatureMap, ParamSet};

/// Number of stride-2 stages; the grid is the input side divided by 8.
pub const BACKBONE_STAGES: usize = 3;
pub const STEM_KERNEL: usize = 3;

/// Which input images the network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Infrared,
    Visible,
    /// Both images, each through its own stem, fused before attention.
    Fused,
}

impl Modality {
    pub fn uses_ir(self) -> bool {
        matches!(self, Modality::Infrared | Modality::Fused)
    }

    pub fn uses_vis(self) -> bool {
        matches!(self, Modality::Visible | Modality::Fused)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub backbone_channels: [usize; BACKBONE_STAGES],
    pub reduction: usize,
    pub use_cbam: bool,
    pub modality: Modality,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            stem_channels: 8,
            backbone_channels: [8, 16, 16],
            reduction: DEFAULT_REDUCTION,
            use_cbam: true,
            modality: Modality::Fused,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.stem_channels == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Input("model widths and class count must be positive".into()));
        }
        if self.use_cbam && (self.reduction == 0 || self.stem_channels % self.reduction != 0) {
            return Err(Error::Input(format!(
                "reduction {} must divide stem width {}",
                self.reduction, self.stem_channels
            )));
        }
        Ok(())
    }
}

/// Trainable parameters. Absent parts are disabled in this model; gradients
/// use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub stem_ir: Option<ConvKernel>,
    pub stem_vis: Option<ConvKernel>,
    pub cbam: Option<CbamParams>,
    pub backbone: Vec<ConvKernel>,
    pub head: ConvKernel,
}

/// Objectness bias at initialization, so early training starts near the
/// background rate instead of at 0.5 everywhere.
const OBJ_PRIOR_BIAS: f64 = -3.0;

fn stem(out: usize) -> ConvKernel {
    ConvKernel::zeros(out, 1, STEM_KERNEL, STEM_KERNEL, 1, 1)
}

fn backbone_conv(out: usize, inp: usize) -> ConvKernel {
    ConvKernel::zeros(out, inp, 3, 3, 2, 1)
}

impl DetectorParams {
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.stem_channels;
        let [c1, c2, c3] = cfg.backbone_channels;
        Ok(Self {
            stem_ir: cfg.modality.uses_ir().then(|| stem(c0)),
            stem_vis: cfg.modality.uses_vis().then(|| stem(c0)),
            cbam: if cfg.use_cbam {
                Some(CbamParams::zeros(c0, cfg.reduction)?)
            } else {
                None
            },
            backbone: vec![backbone_conv(c1, c0), backbone_conv(c2, c1), backbone_conv(c3, c2)],
            head: ConvKernel::zeros(CLS + cfg.num_classes, c3, 1, 1, 1, 0),
        })
    }

    /// He-uniform convolutions; the head starts small with a background
    /// objectness prior.
    pub fn init(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut he = |k: &mut ConvKernel| {
            *k = ConvKernel::random(k.out_channels, k.in_channels, k.kh, k.kw, k.stride, k.padding, rng);
        };
        if let Some(k) = p.stem_ir.as_mut() {
            he(k);
        }
        if let Some(k) = p.stem_vis.as_mut() {
            he(k);
        }
        p.backbone.iter_mut().for_each(&mut he);
        he(&mut p.head);
        p.head.weights.iter_mut().for_each(|w| *w *= 0.1);
        p.head.bias[OBJ] = OBJ_PRIOR_BIAS;
        if let Some(c) = p.cbam.as_mut() {
            *c = CbamParams::random(cfg.stem_channels, cfg.reduction, rng)?;
        }
        Ok(p)
    }

    pub fn modality(&self) -> Modality {
        match (self.stem_ir.is_some(), self.stem_vis.is_some()) {
            (true, true) => Modality::Fused,
            (false, true) => Modality::Visible,
            _ => Modality::Infrared,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_channels.saturating_sub(CLS)
    }

    /// Recovers the configuration implied by the parameter shapes.
    pub fn config(&self) -> ModelConfig {
        let stem_channels = self
            .stem_ir
            .as_ref()
            .or(self.stem_vis.as_ref())
            .map_or(0, |k| k.out_channels);
        ModelConfig {
            num_classes: self.num_classes(),
            stem_channels,
            backbone_channels: [
                self.backbone.first().map_or(0, |k| k.out_channels),
                self.backbone.get(1).map_or(0, |k| k.out_channels),
                self.backbone.get(2).map_or(0, |k| k.out_channels),
            ],
            reduction: self
                .cbam
                .as_ref()
                .map_or(DEFAULT_REDUCTION, |c| stem_channels / c.mlp.hidden.max(1)),
            use_cbam: self.cbam.is_some(),
            modality: self.modality(),
        }
    }

    /// Checks that the parts fit together; used after loading a checkpoint.
    pub fn validate(&self) -> Result<()> {
        if self.stem_ir.is_none() && self.stem_vis.is_none() {
            return Err(Error::Format("model has no input stem".into()));
        }
        let cfg = self.config();
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        let want = Self::zeros(&cfg)?;
        let shapes = |p: &DetectorParams| {
            let mut v = Vec::new();
            p.visit("", &mut |name, shape, data| {
                v.push((name.to_string(), shape.to_vec(), data.len()))
            });
            v
        };
        if shapes(self) != shapes(&want) || self.backbone.len() != BACKBONE_STAGES {
            return Err(Error::Format("parameter shapes do not form a valid model".into()));
        }
        let geometry_ok = self.stem_ir.iter().chain(&self.stem_vis).all(|k| k.stride == 1 && k.padding == 1)
            && self.backbone.iter().all(|k| k.stride == 2 && k.padding == 1)
            && self.head.stride == 1
            && self.head.padding == 0;
        if !geometry_ok {
            return Err(Error::Format("unexpected stride or padding".into()));
        }
        Ok(())
    }
}

impl ParamSet for DetectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        if let Some(k) = &self.stem_ir {
            k.visit(&join(prefix, "stem_ir"), f);
        }
        if let Some(k) = &self.stem_vis {
            k.visit(&join(prefix, "stem_vis"), f);
        }
        if let Some(c) = &self.cbam {
            c.visit(&join(prefix, "cbam"), f);
        }
        for (i, k) in self.backbone.iter().enumerate() {
            k.visit(&join(prefix, &format!("backbone.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        if let Some(k) = &mut self.stem_ir {
            k.visit_mut(&join(prefix, "stem_ir"), f);
        }
        if let Some(k) = &mut self.stem_vis {
            k.visit_mut(&join(prefix, "stem_vis"), f);
        }
        if let Some(c) = &mut self.cbam {
            c.visit_mut(&join(prefix, "cbam"), f);
        }
        for (i, k) in self.backbone.iter_mut().enumerate() {
            k.visit_mut(&join(prefix, &format!("backbone.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// One sample's images, each `1 x H x W`. Either may be missing when the
/// model does not use it; a fused model given only one image runs that
/// stream alone.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    pub ir: Option<&'a FeatureMap>,
    pub vis: Option<&'a FeatureMap>,
}

#[derive(Debug, Clone)]
struct StemCache {
    input: FeatureMap,
    pre: FeatureMap,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stem_ir: Option<StemCache>,
    stem_vis: Option<StemCache>,
    stem_ir_out: Option<FeatureMap>,
    stem_vis_out: Option<FeatureMap>,
    alpha: Option<FusionWeight>,
    cbam_in: FeatureMap,
    cbam: Option<CbamForward>,
    /// Input and pre-activation of every backbone stage.
    stages: Vec<(FeatureMap, FeatureMap)>,
    head_in: FeatureMap,
    pub prediction: GridPrediction,
}

impl ForwardCache {
    /// Fusion weight used for this sample, when both streams ran.
    pub fn alpha(&self) -> Option<f64> {
        self.alpha.map(FusionWeight::alpha)
    }
}

/// Three conv + relu stages, each halving the spatial size.
pub fn backbone_forward(fused: &FeatureMap, stages: &[ConvKernel]) -> Result<FeatureMap> {
    Ok(backbone_forward_cached(fused, stages)?.0)
}

fn backbone_forward_cached(
    fused: &FeatureMap,
    stages: &[ConvKernel],
) -> Result<(FeatureMap, Vec<(FeatureMap, FeatureMap)>)> {
    if stages.len() != BACKBONE_STAGES {
        return dim_err(format!("backbone needs {BACKBONE_STAGES} stages, got {}", stages.len()));
    }
    let min_side = 1 << BACKBONE_STAGES;
    if fused.height() < min_side || fused.width() < min_side {
        return dim_err(format!(
            "input {}x{} too small for {BACKBONE_STAGES} stride-2 stages",
            fused.height(),
            fused.width()
        ));
    }
    let mut x = fused.clone();
    let mut cache = Vec::with_capacity(stages.len());
    for k in stages {
        let pre = conv2d(&x, k)?;
        let next = relu(&pre);
        cache.push((x, pre));
        x = next;
    }
    Ok((x, cache))
}

/// Gradients of the backbone output with respect to its input and stages.
pub fn backbone_backward(
    fused: &FeatureMap,
    stages: &[ConvKernel],
    upstream: &FeatureMap,
) -> Result<(FeatureMap, Vec<ConvKernel>)> {
    let (_, cache) = backbone_forward_cached(fused, stages)?;
    backbone_backward_cached(stages, &cache, upstream)
}

fn backbone_backward_cached(
    stages: &[ConvKernel],
    cache: &[(FeatureMap, FeatureMap)],
    upstream: &FeatureMap,
) -> Result<(FeatureMap, Vec<ConvKernel>)> {
    let mut g = upstream.clone();
    let mut grads = Vec::with_capacity(stages.len());
    for (k, (input, pre)) in stages.iter().zip(cache).rev() {
        let d_pre = relu_backward(pre, &g);
        let (d_in, gk) = conv2d_backward(input, k, &d_pre)?;
        grads.push(gk);
        g = d_in;
    }
    grads.reverse();
    Ok((g, grads))
}

/// 1x1 convolution to `5 + K` logit channels on a square map.
pub fn head_forward(f: &FeatureMap, head: &ConvKernel) -> Result<GridPrediction> {
    if head.kh != 1 || head.kw != 1 || head.out_channels <= CLS {
        return dim_err("head must be a 1x1 conv with more than 5 outputs");
    }
    GridPrediction::new(conv2d(f, head)?, head.out_channels - CLS)
}

pub fn head_backward(f: &FeatureMap, head: &ConvKernel, upstream: &FeatureMap) -> Result<(FeatureMap, ConvKernel)> {
    conv2d_backward(f, head, upstream)
}

/// Zero-mean, unit-variance copy of an image. Modalities differ in
/// brightness and contrast, so stems see standardized inputs. A flat image
/// becomes all zeros.
pub fn standardize(img: &FeatureMap) -> FeatureMap {
    let n = img.data().len() as f64;
    let mean = img.data().iter().sum::<f64>() / n;
    let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 0.0 };
    img.map(|v| (v - mean) * scale)
}

fn run_stem(img: &FeatureMap, k: &ConvKernel) -> Result<(FeatureMap, StemCache)> {
    if img.channels() != 1 {
        return dim_err(format!("stems take 1-channel images, got {}", img.channels()));
    }
    let input = standardize(img);
    let pre = conv2d(&input, k)?;
    let out = relu(&pre);
    Ok((out, StemCache { input, pre }))
}

pub fn forward(params: &DetectorParams, input: ModelInput<'_>) -> Result<ForwardCache> {
    let ir = params.stem_ir.as_ref().zip(input.ir);
    let vis = params.stem_vis.as_ref().zip(input.vis);
    let (ir_out, ir_cache) = match ir {
        Some((k, img)) => {
            let (o, c) = run_stem(img, k)?;
            (Some(o), Some(c))
        }
        None => (None, None),
    };
    let (vis_out, vis_cache) = match vis {
        Some((k, img)) => {
            let (o, c) = run_stem(img, k)?;
            (Some(o), Some(c))
        }
        None => (None, None),
    };
    let (fused, alpha) = match (&ir_out, &vis_out) {
        (Some(a), Some(b)) => {
            let w = compute_alpha(a, b)?;
            (fuse(a, b, w)?, Some(w))
        }
        (Some(a), None) => (a.clone(), None),
        (None, Some(b)) => (b.clone(), None),
        (None, None) => {
            return Err(Error::Input(format!(
                "model consumes {:?} input but none of it was supplied",
                params.modality()
            )))
        }
    };
    let cbam = params.cbam.as_ref().map(|p| cbam_forward(&fused, p)).transpose()?;
    let attended = cbam.as_ref().map_or(&fused, |c| &c.output);
    let (head_in, stages) = backbone_forward_cached(attended, &params.backbone)?;
    let prediction = head_forward(&head_in, &params.head)?;
    Ok(ForwardCache {
        stem_ir: ir_cache,
        stem_vis: vis_cache,
        stem_ir_out: ir_out,
        stem_vis_out: vis_out,
        alpha,
        cbam_in: fused,
        cbam,
        stages,
        head_in,
        prediction,
    })
}

pub fn predict(params: &DetectorParams, input: ModelInput<'_>) -> Result<GridPrediction> {
    Ok(forward(params, input)?.prediction)
}

/// Parameter gradients given the gradient of the loss with respect to the
/// head logits. The fusion weight is treated as a constant.
pub fn backward(params: &DetectorParams, cache: &ForwardCache, d_logits: &FeatureMap) -> Result<DetectorParams> {
    let mut grads = DetectorParams {
        stem_ir: params.stem_ir.as_ref().map(|k| k.zeroed()),
        stem_vis: params.stem_vis.as_ref().map(|k| k.zeroed()),
        cbam: None,
        backbone: Vec::new(),
        head: params.head.zeroed(),
    };
    let (d_head_in, g_head) = head_backward(&cache.head_in, &params.head, d_logits)?;
    grads.head = g_head;
    let (d_attended, g_backbone) = backbone_backward_cached(&params.backbone, &cache.stages, &d_head_in)?;
    grads.backbone = g_backbone;
    let d_fused = match (&params.cbam, &cache.cbam) {
        (Some(p), Some(fw)) => {
            let (d, g) = cbam_backward_cached(&cache.cbam_in, p, fw, &d_attended)?;
            grads.cbam = Some(g);
            d
        }
        _ => d_attended,
    };
    let (d_ir, d_vis) = match (&cache.stem_ir_out, &cache.stem_vis_out, cache.alpha) {
        (Some(a), Some(b), Some(w)) => {
            let g = fuse_backward(a, b, w, &d_fused)?;
            (Some(g.ir), Some(g.vis))
        }
        (Some(_), None, _) => (Some(d_fused), None),
        (None, Some(_), _) => (None, Some(d_fused)),
        _ => return dim_err("forward cache is inconsistent"),
    };
    for (d, sc, k, slot) in [
        (d_ir, &cache.stem_ir, &params.stem_ir, &mut grads.stem_ir),
        (d_vis, &cache.stem_vis, &params.stem_vis, &mut grads.stem_vis),
    ] {
        if let (Some(d), Some(sc), Some(k)) = (d, sc, k) {
            let d_pre = relu_backward(&sc.pre, &d);
            *slot = Some(conv2d_weight_grad(&sc.input, k, &d_pre)?);
        }
    }
    if params.cbam.is_some() && grads.cbam.is_none() {
        grads.cbam = params.cbam.clone().map(|mut c| {
            c.fill(0.0);
            c
        });
    }
    Ok(grads)
}

trait Zeroed {
    fn zeroed(&self) -> Self;
}

impl Zeroed for ConvKernel {
    fn zeroed(&self) -> Self {
        ConvKernel::zeros(self.out_channels, self.in_channels, self.kh, self.kw, self.stride, self.padding)
    }
}
