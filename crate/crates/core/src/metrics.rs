//! Detection evaluation: greedy IoU matching, per-class PR curves,
//! 101-point interpolated AP, mAP@0.5 and the F1-vs-confidence curve with its
//! peak.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{detection_order, Detection, GroundTruthBox};
use crate::error::{Error, Result};

pub use crate::boxes::iou;

pub const MAP_IOU: f64 = 0.5;

/// One image's detections and ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchEntry {
    pub confidence: f64,
    pub class_id: usize,
    /// Index into the image's ground-truth list.
    pub matched_gt: Option<usize>,
}

impl MatchEntry {
    pub fn is_tp(&self) -> bool {
        self.matched_gt.is_some()
    }
}

/// Matching outcome for one image, entries in evaluation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub entries: Vec<MatchEntry>,
    pub gt_per_class: BTreeMap<usize, usize>,
}

/// Greedy matching: detections in descending confidence each claim the
/// unmatched same-class ground truth with the highest IoU, provided it is at
/// least `iou_thresh`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
) -> MatchResult {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| detection_order(a, b));
    let mut taken = vec![false; gts.len()];
    let mut entries = Vec::with_capacity(dets.len());
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
        }
        entries.push(MatchEntry {
            confidence: d.confidence,
            class_id: d.class_id,
            matched_gt: best.map(|(gi, _)| gi),
        });
    }
    let mut gt_per_class = BTreeMap::new();
    for g in gts {
        *gt_per_class.entry(g.class_id).or_insert(0) += 1;
    }
    MatchResult {
        entries,
        gt_per_class,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    /// Threshold: every detection with confidence >= this value is kept.
    pub confidence: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub class_id: usize,
    pub n_gt: usize,
    /// One point per distinct confidence, in descending confidence order, so
    /// recall is non-decreasing along the vector.
    pub points: Vec<PrPoint>,
}

/// Pools one class across all images and sweeps its distinct confidences.
pub fn pr_curve(results: &[MatchResult], class_id: usize) -> Result<PrCurve> {
    let n_gt: usize = results
        .iter()
        .map(|r| r.gt_per_class.get(&class_id).copied().unwrap_or(0))
        .sum();
    if n_gt == 0 {
        return Err(Error::Undefined(format!(
            "class {class_id} has no ground truth; excluded"
        )));
    }
    let mut pooled: Vec<(f64, bool)> = results
        .iter()
        .flat_map(|r| r.entries.iter())
        .filter(|e| e.class_id == class_id)
        .map(|e| (e.confidence, e.is_tp()))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let conf = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == conf {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            confidence: conf,
            tp,
            fp,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / n_gt as f64,
        });
    }
    Ok(PrCurve {
        class_id,
        n_gt,
        points,
    })
}

/// 101-point interpolated AP: mean over `r = 0, 0.01, ..., 1` of the best
/// precision among points with recall >= r (zero when none reaches r).
///
/// Recall thresholds are compared in integer form (`100 * tp >= k * n_gt`) so
/// grid points that coincide with an attainable recall are never lost to
/// rounding.
pub fn average_precision(curve: &PrCurve) -> Result<f64> {
    if curve.n_gt == 0 {
        return Err(Error::Undefined("AP of a class without ground truth".into()));
    }
    let mut sum = 0.0;
    for k in 0..=100usize {
        let best = curve
            .points
            .iter()
            .filter(|p| 100 * p.tp >= k * curve.n_gt)
            .map(|p| p.precision)
            .fold(0.0, f64::max);
        sum += best;
    }
    Ok(sum / 101.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSummary {
    /// `(class, AP)` for every class with at least one ground-truth box.
    pub per_class: Vec<(usize, f64)>,
    pub map: f64,
}

pub fn match_all(images: &[EvalImage], iou_thresh: f64) -> Vec<MatchResult> {
    images
        .iter()
        .map(|im| match_detections(&im.detections, &im.ground_truth, iou_thresh))
        .collect()
}

fn classes_with_gt(results: &[MatchResult]) -> Vec<usize> {
    let mut classes: Vec<usize> = results
        .iter()
        .flat_map(|r| r.gt_per_class.iter())
        .filter(|(_, &n)| n > 0)
        .map(|(&c, _)| c)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    classes
}

pub fn map_at(images: &[EvalImage], iou_thresh: f64) -> Result<MapSummary> {
    let results = match_all(images, iou_thresh);
    let classes = classes_with_gt(&results);
    if classes.is_empty() {
        return Err(Error::Undefined("mAP with no ground truth in any class".into()));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for c in classes {
        per_class.push((c, average_precision(&pr_curve(&results, c)?)?));
    }
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapSummary { per_class, map })
}

pub fn map_at_50(images: &[EvalImage]) -> Result<MapSummary> {
    map_at(images, MAP_IOU)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Point {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Unweighted mean of per-class F1 over classes with ground truth.
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Curve {
    pub points: Vec<F1Point>,
    pub peak_f1: f64,
    pub peak_confidence: f64,
    pub macro_peak_f1: f64,
    pub macro_peak_confidence: f64,
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Thresholds swept by [`f1_curve`]: `0.001 * k` for `k < 1000` plus every
/// distinct detection confidence, ascending.
pub fn f1_thresholds(results: &[MatchResult]) -> Vec<f64> {
    let mut t: Vec<f64> = (0..1000).map(|k| k as f64 * 0.001).collect();
    t.extend(results.iter().flat_map(|r| r.entries.iter()).map(|e| e.confidence));
    t.sort_by(|a, b| a.total_cmp(b));
    t.dedup();
    t
}

/// Confidences sorted descending with running TP counts, for `>= t` queries.
struct Cumulative {
    conf_desc: Vec<f64>,
    tp_prefix: Vec<usize>,
}

impl Cumulative {
    fn new(mut items: Vec<(f64, bool)>) -> Self {
        items.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp_prefix = Vec::with_capacity(items.len() + 1);
        tp_prefix.push(0);
        let mut acc = 0;
        for &(_, tp) in &items {
            acc += tp as usize;
            tp_prefix.push(acc);
        }
        Self {
            conf_desc: items.into_iter().map(|(c, _)| c).collect(),
            tp_prefix,
        }
    }

    /// `(detections kept, true positives kept)` at threshold `t`.
    fn at(&self, t: f64) -> (usize, usize) {
        let kept = self.conf_desc.partition_point(|&c| c >= t);
        (kept, self.tp_prefix[kept])
    }
}

fn pr_at(kept: usize, tp: usize, n_gt: usize) -> (f64, f64) {
    let p = if kept == 0 { 0.0 } else { tp as f64 / kept as f64 };
    let r = tp as f64 / n_gt as f64;
    (p, r)
}

/// Micro-averaged F1 against confidence threshold, with the peak and the
/// smallest threshold attaining it. A macro average over classes is carried
/// alongside.
pub fn f1_curve(images: &[EvalImage], iou_thresh: f64) -> Result<F1Curve> {
    let results = match_all(images, iou_thresh);
    f1_curve_from_matches(&results)
}

pub fn f1_curve_from_matches(results: &[MatchResult]) -> Result<F1Curve> {
    let classes = classes_with_gt(results);
    let total_gt: usize = results
        .iter()
        .flat_map(|r| r.gt_per_class.values())
        .sum();
    if total_gt == 0 {
        return Err(Error::Undefined("F1 curve with no ground truth".into()));
    }
    let entries = || results.iter().flat_map(|r| r.entries.iter());
    let all = Cumulative::new(entries().map(|e| (e.confidence, e.is_tp())).collect());
    let per_class: Vec<(usize, Cumulative)> = classes
        .iter()
        .map(|&c| {
            let n: usize = results
                .iter()
                .map(|r| r.gt_per_class.get(&c).copied().unwrap_or(0))
                .sum();
            let items = entries()
                .filter(|e| e.class_id == c)
                .map(|e| (e.confidence, e.is_tp()))
                .collect();
            (n, Cumulative::new(items))
        })
        .collect();

    let mut points = Vec::new();
    for t in f1_thresholds(results) {
        let (kept, tp) = all.at(t);
        let (precision, recall) = pr_at(kept, tp, total_gt);
        let macro_f1 = per_class
            .iter()
            .map(|(n, cum)| {
                let (k, tp) = cum.at(t);
                let (p, r) = pr_at(k, tp, *n);
                f1_score(p, r)
            })
            .sum::<f64>()
            / per_class.len() as f64;
        points.push(F1Point {
            confidence: t,
            precision,
            recall,
            f1: f1_score(precision, recall),
            macro_f1,
        });
    }

    let peak = |get: fn(&F1Point) -> f64| {
        let mut best = (points[0].confidence, get(&points[0]));
        for p in &points[1..] {
            if get(p) > best.1 {
                best = (p.confidence, get(p));
            }
        }
        best
    };
    let (peak_confidence, peak_f1) = peak(|p| p.f1);
    let (macro_peak_confidence, macro_peak_f1) = peak(|p| p.macro_f1);
    Ok(F1Curve {
        points,
        peak_f1,
        peak_confidence,
        macro_peak_f1,
        macro_peak_confidence,
    })
}

/// Everything `eval` reports for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: MapSummary,
    pub pr_curves: Vec<PrCurve>,
    pub f1: F1Curve,
}

pub fn evaluate(images: &[EvalImage]) -> Result<EvalReport> {
    let results = match_all(images, MAP_IOU);
    let classes = classes_with_gt(&results);
    if classes.is_empty() {
        return Err(Error::Undefined("evaluation with no ground truth".into()));
    }
    let mut pr_curves = Vec::new();
    let mut per_class = Vec::new();
    for c in classes {
        let curve = pr_curve(&results, c)?;
        per_class.push((c, average_precision(&curve)?));
        pr_curves.push(curve);
    }
    let map = per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        map: MapSummary { per_class, map },
        pr_curves,
        f1: f1_curve_from_matches(&results)?,
    })
}

impl EvalReport {
    /// `F1 peak / confidence` and mAP@0.5 in one line.
    pub fn headline(&self) -> String {
        format!(
            "F1 (peak)/Confidence: {:.2} / {:.3}  mAP@0.5: {:.3}",
            self.f1.peak_f1, self.f1.peak_confidence, self.map.map
        )
    }

    /// Writes `pr_<class>.csv`, `f1.csv`, `f1_macro.csv` and `summary.csv`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.pr_curves {
            let mut s = String::from("confidence,precision,recall\n");
            for p in &c.points {
                writeln!(s, "{},{},{}", p.confidence, p.precision, p.recall).unwrap();
            }
            std::fs::write(dir.join(format!("pr_{}.csv", c.class_id)), s)?;
        }
        let mut micro = String::from("confidence,f1\n");
        let mut macro_ = String::from("confidence,f1\n");
        for p in &self.f1.points {
            writeln!(micro, "{},{}", p.confidence, p.f1).unwrap();
            writeln!(macro_, "{},{}", p.confidence, p.macro_f1).unwrap();
        }
        std::fs::write(dir.join("f1.csv"), micro)?;
        std::fs::write(dir.join("f1_macro.csv"), macro_)?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (c, ap) in &self.map.per_class {
            writeln!(s, "ap_{c},{ap}").unwrap();
        }
        writeln!(s, "map50,{}", self.map.map).unwrap();
        writeln!(s, "peak_f1,{}", self.f1.peak_f1).unwrap();
        writeln!(s, "peak_confidence,{}", self.f1.peak_confidence).unwrap();
        writeln!(s, "macro_peak_f1,{}", self.f1.macro_peak_f1).unwrap();
        writeln!(s, "macro_peak_confidence,{}", self.f1.macro_peak_confidence).unwrap();
        s
    }
}

/// Reads a two-column `metric,value` summary back into ordered pairs.
pub fn read_summary_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some("metric,value") {
        return Err(Error::Format("summary.csv header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("summary row: {l}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("summary value: {v}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

/// Reads any of the numeric curve CSVs (header line, then comma-separated reals).
pub fn read_curve_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Format(format!("curve value: {v}")))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;

    fn det(conf: f64, class_id: usize, cx: f64, cy: f64, s: f64) -> Detection {
        Detection {
            bbox: BBox::new(cx, cy, s, s),
            confidence: conf,
            class_id,
        }
    }

    fn gt(class_id: usize, cx: f64, cy: f64, s: f64) -> GroundTruthBox {
        GroundTruthBox::new(class_id, cx, cy, s, s)
    }

    #[test]
    fn single_detection_on_gt_is_tp() {
        let m = match_detections(&[det(0.9, 0, 0.5, 0.5, 0.1)], &[gt(0, 0.5, 0.5, 0.1)], 0.5);
        assert_eq!(m.entries[0].matched_gt, Some(0));
    }

    #[test]
    fn second_detection_on_same_gt_is_fp() {
        let dets = [det(0.6, 0, 0.5, 0.5, 0.1), det(0.9, 0, 0.5, 0.5, 0.1)];
        let m = match_detections(&dets, &[gt(0, 0.5, 0.5, 0.1)], 0.5);
        assert_eq!(m.entries[0].confidence, 0.9);
        assert!(m.entries[0].is_tp());
        assert!(!m.entries[1].is_tp());
    }

    #[test]
    fn other_class_never_matches() {
        let m = match_detections(&[det(0.9, 1, 0.5, 0.5, 0.1)], &[gt(0, 0.5, 0.5, 0.1)], 0.5);
        assert!(!m.entries[0].is_tp());
    }

    #[test]
    fn all_tp_curve() {
        let gts: Vec<_> = (0..4).map(|i| gt(0, 0.1 + 0.2 * i as f64, 0.5, 0.1)).collect();
        let dets: Vec<_> = (0..4)
            .map(|i| det(0.9 - 0.1 * i as f64, 0, 0.1 + 0.2 * i as f64, 0.5, 0.1))
            .collect();
        let r = vec![match_detections(&dets, &gts, 0.5)];
        let c = pr_curve(&r, 0).unwrap();
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(c.points.last().unwrap().recall, 1.0);
        assert_eq!(average_precision(&c).unwrap(), 1.0);
    }

    #[test]
    fn all_fp_curve() {
        let dets = [det(0.9, 0, 0.1, 0.1, 0.05), det(0.5, 0, 0.3, 0.3, 0.05)];
        let r = vec![match_detections(&dets, &[gt(0, 0.8, 0.8, 0.1)], 0.5)];
        let c = pr_curve(&r, 0).unwrap();
        assert!(c.points.iter().all(|p| p.precision == 0.0));
        assert_eq!(average_precision(&c).unwrap(), 0.0);
    }

    #[test]
    fn class_without_gt_is_excluded() {
        let r = vec![match_detections(&[det(0.9, 3, 0.5, 0.5, 0.1)], &[], 0.5)];
        assert!(matches!(pr_curve(&r, 3), Err(Error::Undefined(_))));
    }

    #[test]
    fn hand_built_three_point_curve() {
        // n_gt = 4; TP at recall .25 (P=1), .5 (P=2/3), .75 (P=3/5)
        let c = PrCurve {
            class_id: 0,
            n_gt: 4,
            points: vec![
                PrPoint { confidence: 0.9, tp: 1, fp: 0, precision: 1.0, recall: 0.25 },
                PrPoint { confidence: 0.8, tp: 2, fp: 1, precision: 2.0 / 3.0, recall: 0.5 },
                PrPoint { confidence: 0.7, tp: 3, fp: 2, precision: 0.6, recall: 0.75 },
            ],
        };
        // r in [0, .25]: 26 grid points at 1.0; (.25, .5]: 25 at 2/3; (.5, .75]: 25 at .6; rest 0.
        let want = (26.0 * 1.0 + 25.0 * (2.0 / 3.0) + 25.0 * 0.6) / 101.0;
        assert!((average_precision(&c).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn map_is_mean_of_class_aps() {
        let img = EvalImage {
            detections: vec![det(0.9, 0, 0.2, 0.2, 0.1), det(0.8, 1, 0.9, 0.9, 0.05)],
            ground_truth: vec![gt(0, 0.2, 0.2, 0.1), gt(1, 0.5, 0.5, 0.1)],
        };
        let s = map_at_50(&[img]).unwrap();
        assert_eq!(s.per_class, vec![(0, 1.0), (1, 0.0)]);
        assert_eq!(s.map, 0.5);
        assert!(map_at_50(&[EvalImage::default()]).is_err());
    }

    #[test]
    fn f1_examples() {
        let img = EvalImage {
            detections: vec![det(0.9, 0, 0.2, 0.2, 0.1), det(0.9, 0, 0.6, 0.6, 0.1)],
            ground_truth: vec![gt(0, 0.2, 0.2, 0.1), gt(0, 0.6, 0.6, 0.1)],
        };
        let f = f1_curve(&[img], 0.5).unwrap();
        assert_eq!(f.peak_f1, 1.0);
        assert!(f.peak_confidence <= 0.9);

        let img = EvalImage {
            detections: vec![],
            ground_truth: vec![gt(0, 0.2, 0.2, 0.1)],
        };
        let f = f1_curve(&[img], 0.5).unwrap();
        assert!(f.points.iter().all(|p| p.f1 == 0.0));
        assert_eq!(f.peak_f1, 0.0);
    }

    #[test]
    fn summary_round_trips() {
        let img = EvalImage {
            detections: vec![det(0.7, 0, 0.2, 0.2, 0.1), det(0.3, 0, 0.6, 0.6, 0.1)],
            ground_truth: vec![gt(0, 0.2, 0.2, 0.1), gt(0, 0.4, 0.6, 0.1)],
        };
        let rep = evaluate(&[img]).unwrap();
        let back = read_summary_csv(&rep.summary_csv()).unwrap();
        assert_eq!(back[0], ("ap_0".to_string(), rep.map.per_class[0].1));
        assert_eq!(back[1], ("map50".to_string(), rep.map.map));
        assert_eq!(back[2], ("peak_f1".to_string(), rep.f1.peak_f1));
    }
}
