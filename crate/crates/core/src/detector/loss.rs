//! Detection loss `L = lam_loc * L_loc + lam_conf * L_conf + lam_cls * L_cls`
//! and its analytic gradient with respect to the head logits.
//!
//! * `L_loc`: mean `1 - IoU` between the decoded box and its target over
//!   positive cells.
//! * `L_conf`: mean binary cross-entropy of the objectness logit over all
//!   cells, target 1 at positive cells.
//! * `L_cls`: mean softmax cross-entropy of the class logits over positive
//!   cells.

use super::grid::{cell_of, softmax, GridPrediction, CLS, LOG_SCALE_LIMIT, OBJ, TH, TW, TX, TY};
use crate::boxes::{BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub loc: f64,
    pub conf: f64,
    pub cls: f64,
}

impl LossWeights {
    pub fn new(loc: f64, conf: f64, cls: f64) -> Result<Self> {
        let w = Self { loc, conf, cls };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.loc, self.conf, self.cls];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || all.iter().all(|v| *v == 0.0) {
            return Err(Error::Input(format!(
                "loss weights must be non-negative and not all zero: {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loc: 0.05,
            conf: 1.0,
            cls: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub loc: f64,
    pub conf: f64,
    pub cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The only constructor: `total` is always the weighted sum of the parts.
    pub fn compose(w: &LossWeights, loc: f64, conf: f64, cls: f64) -> Self {
        Self {
            loc,
            conf,
            cls,
            total: w.loc * loc + w.conf * conf + w.cls * cls,
        }
    }

    /// Mean of the parts over several breakdowns, recomposed with `w`.
    pub fn mean(w: &LossWeights, parts: &[LossBreakdown]) -> Self {
        let n = parts.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
        Self::compose(w, sum(|p| p.loc), sum(|p| p.conf), sum(|p| p.cls))
    }
}

/// A ground-truth box assigned to the grid cell containing its center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub row: usize,
    pub col: usize,
    pub gt: GroundTruthBox,
}

/// Assigns every box to its center cell. A box landing in an already
/// occupied cell is dropped with a warning.
pub fn assign_targets(gts: &[GroundTruthBox], grid: usize, num_classes: usize) -> Result<Vec<Assignment>> {
    let mut taken = vec![false; grid * grid];
    let mut out = Vec::with_capacity(gts.len());
    for gt in gts {
        gt.validate()?;
        if gt.class_id >= num_classes {
            return Err(Error::Input(format!(
                "class {} outside 0..{num_classes}",
                gt.class_id
            )));
        }
        let (row, col) = cell_of(gt.bbox.cx, gt.bbox.cy, grid);
        if std::mem::replace(&mut taken[row * grid + col], true) {
            log::warn!(
                "dropping box centered at ({}, {}): cell ({row}, {col}) already has a target",
                gt.bbox.cx,
                gt.bbox.cy
            );
            continue;
        }
        out.push(Assignment { row, col, gt: *gt });
    }
    Ok(out)
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// IoU and its gradient with respect to the predicted `(cx, cy, w, h)`.
pub fn iou_with_grad(p: &BBox, g: &BBox) -> (f64, [f64; 4]) {
    let (px1, py1, px2, py2) = (p.x1(), p.y1(), p.x2(), p.y2());
    let (gx1, gy1, gx2, gy2) = (g.x1(), g.y1(), g.x2(), g.y2());
    let (pw, ph) = (px2 - px1, py2 - py1);
    let ap = pw * ph;
    let ag = (gx2 - gx1) * (gy2 - gy1);
    if !(ap > 0.0 && ag > 0.0) {
        return (0.0, [0.0; 4]);
    }
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = ap + ag - inter;
    let iou = inter / union;

    // Partials of the intersection width/height with respect to the corners.
    let d_iw_dx1 = if px1 > gx1 { -1.0 } else { 0.0 };
    let d_iw_dx2 = if px2 < gx2 { 1.0 } else { 0.0 };
    let d_ih_dy1 = if py1 > gy1 { -1.0 } else { 0.0 };
    let d_ih_dy2 = if py2 < gy2 { 1.0 } else { 0.0 };
    let d_inter = [d_iw_dx1 * ih, d_ih_dy1 * iw, d_iw_dx2 * ih, d_ih_dy2 * iw];
    let d_ap = [-ph, -pw, ph, pw];
    // d(I/U) = dI (U + I) / U^2 - I dAp / U^2
    let u2 = union * union;
    let d: Vec<f64> = (0..4)
        .map(|k| (d_inter[k] * (union + inter) - inter * d_ap[k]) / u2)
        .collect();
    // Corners (x1, y1, x2, y2) -> (cx, cy, w, h).
    (
        iou,
        [d[0] + d[2], d[1] + d[3], 0.5 * (d[2] - d[0]), 0.5 * (d[3] - d[1])],
    )
}

fn check_pred(pred: &GridPrediction) -> Result<()> {
    if !pred.logits().is_finite() {
        return Err(Error::Input("prediction contains non-finite logits".into()));
    }
    Ok(())
}

/// Loss parts (unweighted) and, if requested, the gradient of the weighted
/// total with respect to every logit.
fn loss_impl(
    pred: &GridPrediction,
    gts: &[GroundTruthBox],
    w: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<FeatureMap>)> {
    w.validate()?;
    check_pred(pred)?;
    let s = pred.grid();
    let k = pred.num_classes();
    let assigned = assign_targets(gts, s, k)?;
    let cells = (s * s) as f64;
    let n_pos = assigned.len() as f64;
    let mut grad = want_grad.then(|| FeatureMap::zeros(CLS + k, s, s));

    let mut positive = vec![false; s * s];
    for a in &assigned {
        positive[a.row * s + a.col] = true;
    }

    let mut l_conf = 0.0;
    for i in 0..s {
        for j in 0..s {
            let z = pred.at(OBJ, i, j);
            let t = if positive[i * s + j] { 1.0 } else { 0.0 };
            l_conf += softplus(z) - t * z;
            if let Some(g) = grad.as_mut() {
                g.set(OBJ, i, j, w.conf * (sigmoid_scalar(z) - t) / cells);
            }
        }
    }
    l_conf /= cells;

    let mut l_loc = 0.0;
    let mut l_cls = 0.0;
    for a in &assigned {
        let (i, j) = (a.row, a.col);
        let b = pred.cell_box(i, j);
        let (iou, d_iou) = iou_with_grad(&b, &a.gt.bbox);
        l_loc += 1.0 - iou;

        let logits: Vec<f64> = (0..k).map(|c| pred.at(CLS + c, i, j)).collect();
        let probs = softmax(logits.iter().copied());
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        l_cls += lse - logits[a.gt.class_id];

        if let Some(g) = grad.as_mut() {
            let sf = s as f64;
            let scale = -w.loc / n_pos;
            let sx = sigmoid_scalar(pred.at(TX, i, j));
            let sy = sigmoid_scalar(pred.at(TY, i, j));
            g.set(TX, i, j, scale * d_iou[0] * sx * (1.0 - sx) / sf);
            g.set(TY, i, j, scale * d_iou[1] * sy * (1.0 - sy) / sf);
            let tw = pred.at(TW, i, j);
            let th = pred.at(TH, i, j);
            let dw = if tw.abs() < LOG_SCALE_LIMIT { b.w } else { 0.0 };
            let dh = if th.abs() < LOG_SCALE_LIMIT { b.h } else { 0.0 };
            g.set(TW, i, j, scale * d_iou[2] * dw);
            g.set(TH, i, j, scale * d_iou[3] * dh);
            for c in 0..k {
                let target = if c == a.gt.class_id { 1.0 } else { 0.0 };
                g.set(CLS + c, i, j, w.cls * (probs[c] - target) / n_pos);
            }
        }
    }
    if n_pos > 0.0 {
        l_loc /= n_pos;
        l_cls /= n_pos;
    }
    Ok((LossBreakdown::compose(w, l_loc, l_conf, l_cls), grad))
}

pub fn total_loss(pred: &GridPrediction, gts: &[GroundTruthBox], w: &LossWeights) -> Result<LossBreakdown> {
    Ok(loss_impl(pred, gts, w, false)?.0)
}

/// Gradient of `total_loss(..).total` with respect to the head logits.
pub fn loss_backward(pred: &GridPrediction, gts: &[GroundTruthBox], w: &LossWeights) -> Result<FeatureMap> {
    Ok(loss_impl(pred, gts, w, true)?.1.expect("gradient requested"))
}

/// Loss and gradient in one pass.
pub fn loss_and_grad(
    pred: &GridPrediction,
    gts: &[GroundTruthBox],
    w: &LossWeights,
) -> Result<(LossBreakdown, FeatureMap)> {
    let (l, g) = loss_impl(pred, gts, w, true)?;
    Ok((l, g.expect("gradient requested")))
}
