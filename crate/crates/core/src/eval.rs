//! Single-class COCO-style detection metrics.

use std::cmp::Ordering;

use crate::boxes::{iou_unchecked, Detection, Rect};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (50 + 5 * k) as f64 / 100.0)
}

/// Indices of `dets` in descending score order; ties keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    idx
}

/// Greedy non-maximum suppression. Output is sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let order = score_order(dets);
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept.iter().all(|k| iou_unchecked(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Outcome of matching one ranked detection list against ground truth.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchResult {
    /// Scores in rank order.
    pub scores: Vec<f32>,
    pub tp: Vec<bool>,
    /// Matched ground-truth index per detection.
    pub matched: Vec<Option<usize>>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn len(&self) -> usize {
        self.tp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tp.is_empty()
    }
}

/// In score order, each detection takes the unmatched ground truth with the
/// highest IoU at or above `iou_thresh`; ties go to the lower GT index.
pub fn match_detections(dets: &[Detection], gts: &[Rect], iou_thresh: f64) -> MatchResult {
    let order = score_order(dets);
    let mut used = vec![false; gts.len()];
    let mut out = MatchResult {
        num_gt: gts.len(),
        ..Default::default()
    };
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou_unchecked(&d.bbox, gt);
            if v >= iou_thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        out.scores.push(d.score);
        out.tp.push(best.is_some());
        out.matched.push(best.map(|(g, _)| g));
    }
    out
}

/// Matches every image separately and pools the results by score.
/// Matched indices are offsets into the concatenated ground truth.
pub fn match_pooled(dets: &[Vec<Detection>], gts: &[Vec<Rect>], iou_thresh: f64) -> Result<MatchResult> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    let mut rows: Vec<(f32, bool, Option<usize>)> = Vec::new();
    let mut offset = 0;
    for (d, g) in dets.iter().zip(gts) {
        let m = match_detections(d, g, iou_thresh);
        for i in 0..m.len() {
            rows.push((m.scores[i], m.tp[i], m.matched[i].map(|j| j + offset)));
        }
        offset += g.len();
    }
    // Stable: ties keep image order, then rank within the image.
    rows.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    Ok(MatchResult {
        scores: rows.iter().map(|r| r.0).collect(),
        tp: rows.iter().map(|r| r.1).collect(),
        matched: rows.iter().map(|r| r.2).collect(),
        num_gt: offset,
    })
}

/// Precision and recall after each ranked detection.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PrCurve {
    pub scores: Vec<f32>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

impl PrCurve {
    pub fn from_match(m: &MatchResult) -> Result<Self> {
        if m.num_gt == 0 {
            return Err(Error::UndefinedMetric("precision/recall without ground truth"));
        }
        let mut tp = 0usize;
        let mut curve = PrCurve::default();
        for (i, &hit) in m.tp.iter().enumerate() {
            tp += hit as usize;
            curve.scores.push(m.scores[i]);
            curve.recall.push(tp as f64 / m.num_gt as f64);
            curve.precision.push(tp as f64 / (i + 1) as f64);
        }
        Ok(curve)
    }

    pub fn len(&self) -> usize {
        self.recall.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recall.is_empty()
    }
}

/// 101-point interpolated AP.
pub fn average_precision(m: &MatchResult) -> Result<f64> {
    let curve = PrCurve::from_match(m)?;
    Ok(ap_from_curve(&curve))
}

fn ap_from_curve(curve: &PrCurve) -> f64 {
    let mut env = curve.precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < curve.recall.len() && curve.recall[j] < r {
            j += 1;
        }
        if j < env.len() {
            total += env[j];
        }
    }
    total / 101.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapSummary {
    pub map50: f64,
    pub map50_95: f64,
    /// AP at each of [`coco_thresholds`].
    pub ap: [f64; 10],
    /// Pooled curve at IoU 0.5.
    pub curve: PrCurve,
    pub precision: f64,
    pub recall: f64,
}

/// AP at IoU 0.50:0.05:0.95 over detections pooled across images, plus the
/// max-F1 operating point at IoU 0.5.
pub fn map_range(dets: &[Vec<Detection>], gts: &[Vec<Rect>]) -> Result<MapSummary> {
    let mut ap = [0.0; 10];
    let mut curve = PrCurve::default();
    let mut pr = (0.0, 0.0);
    for (k, &t) in coco_thresholds().iter().enumerate() {
        let m = match_pooled(dets, gts, t)?;
        let c = PrCurve::from_match(&m)?;
        ap[k] = ap_from_curve(&c);
        if k == 0 {
            pr = precision_recall_summary(&m)?;
            curve = c;
        }
    }
    Ok(MapSummary {
        map50: ap[0],
        map50_95: ap.iter().sum::<f64>() / 10.0,
        ap,
        curve,
        precision: pr.0,
        recall: pr.1,
    })
}

/// Precision and recall at the score cut with the highest F1. Cuts are only
/// taken between distinct scores; ties favour the higher threshold.
pub fn precision_recall_summary(m: &MatchResult) -> Result<(f64, f64)> {
    let curve = PrCurve::from_match(m)?;
    let mut best = (0.0, 0.0, 0.0);
    for i in 0..curve.len() {
        if i + 1 < curve.len() && curve.scores[i + 1] == curve.scores[i] {
            continue;
        }
        let (p, r) = (curve.precision[i], curve.recall[i]);
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if f1 > best.0 {
            best = (f1, p, r);
        }
    }
    Ok((best.1, best.2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f32, y: f32, s: f32, score: f32) -> Detection {
        Detection::new(x, y, x + s, y + s, score)
    }

    #[test]
    fn nms_keeps_higher_of_identical_pair() {
        let d = [det(0.0, 0.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 0.9)];
        let out = nms(&d, 0.5);
        assert_eq!(out, vec![d[1]]);
        assert_eq!(nms(&d[..1], 0.5), vec![d[0]]);
    }

    #[test]
    fn nms_ties_favour_earlier_index() {
        let d = [det(0.0, 0.0, 10.0, 0.5), det(1.0, 0.0, 10.0, 0.5)];
        assert_eq!(nms(&d, 0.5), vec![d[0]]);
    }

    #[test]
    fn double_detection_single_match() {
        let gt = [Rect::new(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[det(0.0, 0.0, 10.0, 0.8), det(0.0, 0.0, 10.0, 0.9)], &gt, 0.5);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.scores, vec![0.9, 0.8]);
    }

    #[test]
    fn ap_hand_cases() {
        let gt = [Rect::new(0.0, 0.0, 10.0, 10.0)];
        let tp = det(0.0, 0.0, 10.0, 0.9);
        let fp = det(50.0, 50.0, 10.0, 0.8);
        assert_eq!(average_precision(&match_detections(&[tp], &gt, 0.5)).unwrap(), 1.0);
        assert_eq!(average_precision(&match_detections(&[tp, fp], &gt, 0.5)).unwrap(), 1.0);
        let fp_first = det(50.0, 50.0, 10.0, 0.9);
        let tp_second = det(0.0, 0.0, 10.0, 0.8);
        let ap = average_precision(&match_detections(&[fp_first, tp_second], &gt, 0.5)).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert!(average_precision(&match_detections(&[tp], &[], 0.5)).is_err());
    }

    #[test]
    fn threshold_counting_case() {
        let gts = vec![vec![Rect::new(0.0, 0.0, 10.0, 10.0)], vec![Rect::new(20.0, 20.0, 30.0, 30.0)]];
        let dets = vec![
            vec![Detection::new(0.0, 0.0, 10.0, 6.0, 0.9)],
            vec![Detection::new(20.0, 20.0, 26.0, 30.0, 0.7)],
        ];
        let s = map_range(&dets, &gts).unwrap();
        assert_eq!(s.ap[..3], [1.0; 3]);
        assert_eq!(s.ap[3..], [0.0; 7]);
        assert!((s.map50_95 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![Rect::new(0.0, 0.0, 10.0, 10.0), Rect::new(20.0, 0.0, 40.0, 10.0)]];
        let dets = vec![gts[0].iter().map(|r| Detection { bbox: *r, score: 0.9 }).collect()];
        let s = map_range(&dets, &gts).unwrap();
        assert_eq!((s.map50, s.map50_95, s.precision, s.recall), (1.0, 1.0, 1.0, 1.0));
        let s = map_range(&[vec![]], &gts).unwrap();
        assert_eq!((s.map50, s.map50_95), (0.0, 0.0));
        assert!(s.curve.is_empty());
    }

    #[test]
    fn max_f1_operating_point() {
        let m = MatchResult {
            scores: vec![0.9, 0.8, 0.7],
            tp: vec![true, true, false],
            matched: vec![Some(0), Some(1), None],
            num_gt: 4,
        };
        assert_eq!(precision_recall_summary(&m).unwrap(), (1.0, 0.5));
        let all_fp = MatchResult {
            scores: vec![0.9, 0.8],
            tp: vec![false, false],
            matched: vec![None, None],
            num_gt: 2,
        };
        assert_eq!(precision_recall_summary(&all_fp).unwrap(), (0.0, 0.0));
    }
}
