//! Single-anchor grid predictions: decoding to boxes, encoding boxes back into
//! logits, and greedy non-maximum suppression.

use crate::boxes::{detection_order, iou, BBox, Detection, GroundTruthBox};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{sigmoid_scalar, FeatureMap};

/// Channel offsets within a cell's `5 + K` logits.
pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const OBJ: usize = 4;
pub const CLS: usize = 5;

/// Log-scale logits are clamped to this range before exponentiation.
pub const LOG_SCALE_LIMIT: f64 = 4.0;

pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// Magnitude used by [`encode`] for confident logits.
pub const ENCODE_LOGIT: f64 = 50.0;

/// Raw head output: `(5 + K) x S x S` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    logits: FeatureMap,
    num_classes: usize,
}

impl GridPrediction {
    pub fn new(logits: FeatureMap, num_classes: usize) -> Result<Self> {
        let (c, h, w) = logits.shape();
        if num_classes == 0 || c != CLS + num_classes {
            return dim_err(format!("{c} channels cannot hold 5 + {num_classes} logits"));
        }
        if h != w || h == 0 {
            return dim_err(format!("prediction grid must be square, got {h}x{w}"));
        }
        Ok(Self { logits, num_classes })
    }

    pub fn zeros(grid: usize, num_classes: usize) -> Self {
        Self {
            logits: FeatureMap::zeros(CLS + num_classes, grid, grid),
            num_classes,
        }
    }

    pub fn grid(&self) -> usize {
        self.logits.height()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logits(&self) -> &FeatureMap {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut FeatureMap {
        &mut self.logits
    }

    pub fn into_logits(self) -> FeatureMap {
        self.logits
    }

    pub fn at(&self, channel: usize, i: usize, j: usize) -> f64 {
        self.logits.at(channel, i, j)
    }

    /// Box decoded from cell `(i, j)` (row, column).
    pub fn cell_box(&self, i: usize, j: usize) -> BBox {
        let s = self.grid() as f64;
        let tw = self.at(TW, i, j).clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
        let th = self.at(TH, i, j).clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT);
        BBox::new(
            (j as f64 + sigmoid_scalar(self.at(TX, i, j))) / s,
            (i as f64 + sigmoid_scalar(self.at(TY, i, j))) / s,
            tw.exp() / s,
            th.exp() / s,
        )
    }

    /// Class probabilities of cell `(i, j)`.
    pub fn class_probs(&self, i: usize, j: usize) -> Vec<f64> {
        softmax((0..self.num_classes).map(|k| self.at(CLS + k, i, j)))
    }
}

pub(crate) fn softmax(logits: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let m = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.map(|z| (z - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Cells whose `sigmoid(obj) * max class probability` reaches `conf_thresh`,
/// in row-major cell order.
pub fn decode(pred: &GridPrediction, conf_thresh: f64) -> Result<Vec<Detection>> {
    if !(0.0..1.0).contains(&conf_thresh) {
        return Err(Error::Input(format!("confidence threshold {conf_thresh} outside [0, 1)")));
    }
    let s = pred.grid();
    let mut out = Vec::new();
    for i in 0..s {
        for j in 0..s {
            let probs = pred.class_probs(i, j);
            // First maximal class wins ties.
            let (class_id, p) = probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
            let confidence = sigmoid_scalar(pred.at(OBJ, i, j)) * p;
            if confidence >= conf_thresh {
                out.push(Detection {
                    bbox: pred.cell_box(i, j),
                    confidence,
                    class_id,
                });
            }
        }
    }
    Ok(out)
}

/// Grid cell `(row, column)` containing a normalized point.
pub fn cell_of(cx: f64, cy: f64, grid: usize) -> (usize, usize) {
    let s = grid as f64;
    let j = ((cx * s).floor().max(0.0) as usize).min(grid - 1);
    let i = ((cy * s).floor().max(0.0) as usize).min(grid - 1);
    (i, j)
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Logits that decode to exactly `gts` (one box per cell; later boxes landing
/// in an occupied cell are ignored).
pub fn encode(gts: &[GroundTruthBox], grid: usize, num_classes: usize) -> Result<GridPrediction> {
    if grid == 0 || num_classes == 0 {
        return dim_err("encode needs a non-empty grid and at least one class");
    }
    let mut pred = GridPrediction::zeros(grid, num_classes);
    let s = grid as f64;
    let logits = pred.logits_mut();
    for i in 0..grid {
        for j in 0..grid {
            logits.set(OBJ, i, j, -ENCODE_LOGIT);
        }
    }
    let mut taken = vec![false; grid * grid];
    for gt in gts {
        gt.validate()?;
        if gt.class_id >= num_classes {
            return Err(Error::Input(format!("class {} >= {num_classes}", gt.class_id)));
        }
        let b = gt.bbox;
        let (i, j) = cell_of(b.cx, b.cy, grid);
        if std::mem::replace(&mut taken[i * grid + j], true) {
            continue;
        }
        logits.set(TX, i, j, logit(b.cx * s - j as f64));
        logits.set(TY, i, j, logit(b.cy * s - i as f64));
        logits.set(TW, i, j, (b.w * s).ln());
        logits.set(TH, i, j, (b.h * s).ln());
        logits.set(OBJ, i, j, ENCODE_LOGIT);
        logits.set(CLS + gt.class_id, i, j, ENCODE_LOGIT);
    }
    Ok(pred)
}

/// Greedy per-class suppression. Detections are visited by descending
/// confidence (ties by class, then box coordinates); one is kept unless a
/// kept detection of the same class overlaps it by more than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::Input(format!("NMS IoU threshold {iou_thresh} outside (0, 1)")));
    }
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn zero_logits_decode() {
        let pred = GridPrediction::zeros(4, 1);
        assert!(decode(&pred, 0.6).unwrap().is_empty());
        let all = decode(&pred, 0.5).unwrap();
        assert_eq!(all.len(), 16);
        assert!(all.iter().all(|d| d.confidence == 0.5));
        assert_eq!((all[0].bbox.cx, all[0].bbox.cy), (0.125, 0.125));
        assert_eq!(all[0].bbox.w, 0.25);
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn decode_matches_scalar_oracle() {
        let mut rng = SeededRng::new(21);
        let (s, k) = (5, 3);
        let logits = FeatureMap::random(CLS + k, s, s, -6.0, 6.0, &mut rng);
        let pred = GridPrediction::new(logits.clone(), k).unwrap();
        let got = decode(&pred, 0.0).unwrap();
        assert_eq!(got.len(), s * s);
        for (n, d) in got.iter().enumerate() {
            let (i, j) = (n / s, n % s);
            let z: Vec<f64> = (0..k).map(|c| logits.at(CLS + c, i, j)).collect();
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let mut best = 0;
            for c in 1..k {
                if z[c] > z[best] {
                    best = c;
                }
            }
            let conf = sig(logits.at(OBJ, i, j)) * z[best].exp() / denom;
            let tw = logits.at(TW, i, j).max(-4.0).min(4.0);
            let th = logits.at(TH, i, j).max(-4.0).min(4.0);
            assert_eq!(d.class_id, best);
            assert!((d.confidence - conf).abs() < 1e-12);
            assert!((d.bbox.cx - (j as f64 + sig(logits.at(TX, i, j))) / s as f64).abs() < 1e-12);
            assert!((d.bbox.cy - (i as f64 + sig(logits.at(TY, i, j))) / s as f64).abs() < 1e-12);
            assert!((d.bbox.w - tw.exp() / s as f64).abs() < 1e-12);
            assert!((d.bbox.h - th.exp() / s as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn decoded_centers_stay_in_cell() {
        let mut rng = SeededRng::new(22);
        let logits = FeatureMap::random(6, 4, 4, -60.0, 60.0, &mut rng);
        let pred = GridPrediction::new(logits, 1).unwrap();
        for (n, d) in decode(&pred, 0.0).unwrap().iter().enumerate() {
            let (i, j) = ((n / 4) as f64, (n % 4) as f64);
            assert!(d.bbox.cx >= j / 4.0 && d.bbox.cx <= (j + 1.0) / 4.0);
            assert!(d.bbox.cy >= i / 4.0 && d.bbox.cy <= (i + 1.0) / 4.0);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut rng = SeededRng::new(23);
        for _ in 0..50 {
            let s = 8;
            // One box per distinct cell, strictly inside it, sizes within the clamp.
            let cells = rng.sample_distinct(s * s, 3);
            let gts: Vec<GroundTruthBox> = cells
                .iter()
                .map(|&c| {
                    let (i, j) = ((c / s) as f64, (c % s) as f64);
                    GroundTruthBox::new(
                        rng.below(2),
                        (j + rng.range(0.05, 0.95)) / s as f64,
                        (i + rng.range(0.05, 0.95)) / s as f64,
                        rng.range(0.02, 0.12),
                        rng.range(0.02, 0.12),
                    )
                })
                .collect();
            let pred = encode(&gts, s, 2).unwrap();
            let dets = decode(&pred, 0.5).unwrap();
            assert_eq!(dets.len(), 3);
            for gt in &gts {
                let d = dets
                    .iter()
                    .find(|d| (d.bbox.cx - gt.bbox.cx).abs() < 1e-6 && (d.bbox.cy - gt.bbox.cy).abs() < 1e-6)
                    .unwrap();
                assert_eq!(d.class_id, gt.class_id);
                for (a, b) in [(d.bbox.cx, gt.bbox.cx), (d.bbox.cy, gt.bbox.cy), (d.bbox.w, gt.bbox.w), (d.bbox.h, gt.bbox.h)] {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    fn det(conf: f64, class_id: usize, cx: f64, cy: f64, w: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, w, w),
            confidence: conf,
            class_id,
        }
    }

    #[test]
    fn nms_examples() {
        let a = det(0.8, 0, 0.5, 0.5, 0.2);
        let b = det(0.9, 0, 0.5, 0.5, 0.2);
        assert_eq!(nms(&[a, b], 0.45).unwrap(), vec![b]);
        let far = vec![det(0.3, 0, 0.1, 0.1, 0.1), det(0.7, 0, 0.9, 0.9, 0.1), det(0.5, 0, 0.5, 0.5, 0.1)];
        assert_eq!(nms(&far, 0.45).unwrap().len(), 3);
        // Same place, different classes: both kept.
        assert_eq!(nms(&[a, det(0.7, 1, 0.5, 0.5, 0.2)], 0.45).unwrap().len(), 2);
    }

    // Quadratic reference: repeatedly take the best remaining detection and
    // discard everything of its class that overlaps it too much.
    fn nms_oracle(dets: &[Detection], t: f64) -> Vec<Detection> {
        let mut pool: Vec<Detection> = dets.to_vec();
        let mut out = Vec::new();
        while !pool.is_empty() {
            let mut bi = 0;
            for i in 1..pool.len() {
                if detection_order(&pool[i], &pool[bi]) == std::cmp::Ordering::Less {
                    bi = i;
                }
            }
            let best = pool.remove(bi);
            pool.retain(|d| !(d.class_id == best.class_id && iou(&d.bbox, &best.bbox) > t));
            out.push(best);
        }
        out
    }

    #[test]
    fn nms_matches_oracle() {
        let mut rng = SeededRng::new(24);
        for _ in 0..200 {
            let dets: Vec<Detection> = (0..10)
                .map(|_| {
                    det(
                        (rng.below(6) as f64 + 1.0) / 8.0,
                        rng.below(2),
                        rng.range(0.3, 0.7),
                        rng.range(0.3, 0.7),
                        rng.range(0.1, 0.3),
                    )
                })
                .collect();
            let got = nms(&dets, 0.45).unwrap();
            assert_eq!(got, nms_oracle(&dets, 0.45));
            assert!(got.windows(2).all(|w| w[0].confidence >= w[1].confidence));
            for (x, a) in got.iter().enumerate() {
                for b in &got[x + 1..] {
                    assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= 0.45);
                }
            }
        }
    }
}
