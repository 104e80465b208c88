//! Mini-batch SGD with momentum and a cosine learning-rate schedule.

use super::loss::{loss_and_grad, LossBreakdown, LossWeights};
use super::model::{backward, forward, DetectorParams, ModelConfig, ModelInput, Modality};
use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub image_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults with the given seed.
    pub fn new(seed: u64) -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            image_size: 64,
            lr0: 0.2,
            momentum: 0.9,
            loss_weights: LossWeights::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::Input("epochs, batch size and image size must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Input(format!("learning rate {} must be finite and >= 0", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Input(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        self.loss_weights.validate()
    }
}

/// Cosine decay from `lr0` at step 0 to `lr0 / 100` at the last step.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    let lr_min = lr0 / 100.0;
    let t = if total_steps > 1 {
        step as f64 / (total_steps - 1) as f64
    } else {
        0.0
    };
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `v' = momentum * v + g; p' = p - lr * v'`, in place.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension("SGD buffers differ in length".into()));
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::Input(format!("learning rate {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Input(format!("non-finite gradient at parameter {i}")));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// One training example. `vis` should already be registered onto the
/// infrared grid; it is `None` when registration failed, in which case a
/// fused model sees the infrared stream alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub ir: FeatureMap,
    pub vis: Option<FeatureMap>,
    pub boxes: Vec<GroundTruthBox>,
}

impl TrainSample {
    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            ir: Some(&self.ir),
            vis: self.vis.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean of the per-step losses of this epoch.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub epochs: Vec<EpochLog>,
    /// Batch loss of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
}

/// Loss and mean parameter gradient over one batch, accumulated in sample order.
pub fn batch_gradient(
    params: &DetectorParams,
    batch: &[&TrainSample],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut grad = vec![0.0; params.param_count()];
    let mut parts = Vec::with_capacity(batch.len());
    for s in batch {
        let cache = forward(params, s.input())?;
        let (loss, d_logits) = loss_and_grad(&cache.prediction, &s.boxes, weights)?;
        let g = backward(params, &cache, &d_logits)?;
        let mut off = 0;
        g.visit("", &mut |_, _, d| {
            for (acc, v) in grad[off..off + d.len()].iter_mut().zip(d) {
                *acc += v;
            }
            off += d.len();
        });
        parts.push(loss);
    }
    let n = batch.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((LossBreakdown::mean(weights, &parts), grad))
}

fn predictions_finite(params: &DetectorParams, batch: &[&TrainSample]) -> Result<bool> {
    for s in batch {
        if !forward(params, s.input())?.prediction.logits().is_finite() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Trains from a seeded initialization. Deterministic: samples are shuffled
/// per epoch with the seeded generator and processed sequentially.
pub fn train(data: &[TrainSample], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        let want = (1, cfg.image_size, cfg.image_size);
        let shapes_ok = s.ir.shape() == want && s.vis.as_ref().is_none_or(|v| v.shape() == want);
        if !shapes_ok {
            return Err(Error::Dimension(format!(
                "sample {i}: images must be {0}x{0}, got {1:?} and {2:?}",
                cfg.image_size,
                s.ir.shape(),
                s.vis.as_ref().map(|v| v.shape())
            )));
        }
        if model.modality == Modality::Visible && s.vis.is_none() {
            return Err(Error::Input(format!("sample {i}: visible-only model needs a visible image")));
        }
    }
    let mut rng = SeededRng::new(cfg.seed);
    let mut params = DetectorParams::init(model, &mut rng)?;
    let mut flat = params.flatten();
    let mut velocity = vec![0.0; flat.len()];
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_steps = Vec::with_capacity(batches_per_epoch);
        let mut lr = cfg.lr0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = match batch_gradient(&params, &batch, &cfg.loss_weights) {
                Ok(v) => v,
                Err(e) if !predictions_finite(&params, &batch)? => {
                    return Err(Error::Divergence {
                        epoch,
                        batch: b,
                        detail: e.to_string(),
                    })
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss:?}"),
                });
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("non-finite gradient at parameter {i}"),
                });
            }
            lr = cosine_lr(cfg.lr0, steps.len(), total_steps);
            sgd_step(&mut flat, &grad, lr, cfg.momentum, &mut velocity)?;
            params.assign_flat(&flat);
            steps.push(loss);
            epoch_steps.push(loss);
        }
        let mean = LossBreakdown::mean(&cfg.loss_weights, &epoch_steps);
        log::debug!(
            "epoch {epoch}: total {:.5} (loc {:.4}, conf {:.4}, cls {:.4}), lr {lr:.5}",
            mean.total,
            mean.loc,
            mean.conf,
            mean.cls
        );
        epochs.push(EpochLog { epoch, lr, loss: mean });
    }
    Ok(TrainOutcome { params, epochs, steps })
}
