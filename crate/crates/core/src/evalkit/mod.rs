//! Detection scoring: IoU, greedy matching, precision-recall, AP and mAP,
//! plus the sensitivity-grid experiment runner.

mod ap;
mod grid;
mod report;

use serde::{Deserialize, Serialize};

use crate::datakit::BoundingBox;

pub use ap::{average_precision, average_precision_with, mean_ap, ApMethod, PrCurve, PrPoint};
pub use grid::{run_sensitivity, CellOutcome, CellPipeline, CellRequest, ExperimentGrid, GridSpec};
pub use report::{evaluate, export_predictions, ClassReport, EvalConfig, EvalReport};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("average precision needs at least one ground-truth box")]
    NoGroundTruth,
    #[error("mean AP over an empty class set")]
    EmptyClassSet,
    #[error("sensitivity grid is empty")]
    EmptyGrid,
    #[error("at least one fold is required")]
    NoFolds,
}

/// A scored, class-labelled box predicted for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    #[serde(rename = "class")]
    pub class_label: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Intersection over union with integer pixel areas.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = a.right().min(b.right()).saturating_sub(u64::from(a.x.max(b.x)));
    let iy = a.bottom().min(b.bottom()).saturating_sub(u64::from(a.y.max(b.y)));
    let inter = ix * iy;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Indices of `scores` ordered by descending score; ties keep input order.
pub(crate) fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    order
}

/// Greedy single-class matching within one image.
///
/// Detections are visited by descending score (stable ties); each takes the
/// highest-IoU ground truth not yet matched, and becomes a true positive when
/// that IoU reaches `iou_threshold`. Returns one flag per detection in input
/// order.
pub fn match_detections(gts: &[BoundingBox], dets: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<bool> {
    let scores: Vec<f64> = dets.iter().map(|d| d.1).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in rank_by_score(&scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[i].0, gt);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            if v >= iou_threshold {
                taken[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn bb(x: u32, y: u32, w: u32, h: u32) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn pixels(b: &BoundingBox) -> BTreeSet<(u64, u64)> {
        let mut s = BTreeSet::new();
        for y in u64::from(b.y)..b.bottom() {
            for x in u64::from(b.x)..b.right() {
                s.insert((x, y));
            }
        }
        s
    }

    fn pixel_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let (pa, pb) = (pixels(a), pixels(b));
        let inter = pa.intersection(&pb).count();
        if inter == 0 {
            return 0.0;
        }
        inter as f64 / pa.union(&pb).count() as f64
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&bb(3, 4, 5, 6), &bb(3, 4, 5, 6)), 1.0);
        assert_eq!(iou(&bb(0, 0, 2, 2), &bb(2, 0, 2, 2)), 0.0);
        assert_eq!(iou(&bb(0, 0, 2, 2), &bb(1, 0, 2, 2)), 1.0 / 3.0);
    }

    #[test]
    fn single_match_rule() {
        let gt = [bb(0, 0, 10, 10)];
        assert_eq!(match_detections(&gt, &[(bb(0, 0, 10, 9), 0.9)], 0.5), vec![true]);
        let dets = [(bb(0, 0, 10, 9), 0.9), (bb(0, 0, 10, 8), 0.8)];
        assert_eq!(match_detections(&gt, &dets, 0.5), vec![true, false]);
        // ranking, not input order, decides who gets the GT
        let swapped = [(bb(0, 0, 10, 8), 0.8), (bb(0, 0, 10, 9), 0.9)];
        assert_eq!(match_detections(&gt, &swapped, 0.5), vec![false, true]);
    }

    fn reference_match(gts: &[BoundingBox], dets: &[(BoundingBox, f64)], thr: f64) -> Vec<bool> {
        // Visit every detection in rank order; for each, scan all remaining GTs
        // with pixel-set IoU.
        let mut order: Vec<usize> = (0..dets.len()).collect();
        for a in 0..order.len() {
            for b in 0..order.len() - 1 - a {
                if dets[order[b]].1 < dets[order[b + 1]].1 {
                    order.swap(b, b + 1);
                }
            }
        }
        let mut free: Vec<usize> = (0..gts.len()).collect();
        let mut flags = vec![false; dets.len()];
        for i in order {
            let scored: Vec<(usize, f64)> = free.iter().map(|&g| (g, pixel_iou(&dets[i].0, &gts[g]))).collect();
            let mut best: Option<(usize, f64)> = None;
            for (g, v) in scored {
                match best {
                    Some((_, bv)) if bv >= v => {}
                    _ => best = Some((g, v)),
                }
            }
            if let Some((g, v)) = best {
                if v >= thr {
                    free.retain(|&f| f != g);
                    flags[i] = true;
                }
            }
        }
        flags
    }

    fn small_box() -> impl Strategy<Value = BoundingBox> {
        (0u32..12, 0u32..12, 1u32..8, 1u32..8).prop_map(|(x, y, w, h)| bb(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_equals_pixel_count(a in small_box(), b in small_box()) {
            prop_assert_eq!(iou(&a, &b), pixel_iou(&a, &b));
        }

        #[test]
        fn greedy_matches_reference(
            gts in proptest::collection::vec(small_box(), 0..=6),
            dets in proptest::collection::vec((small_box(), 0u8..5), 0..=10),
            thr in prop_oneof![Just(0.3), Just(0.5), Just(0.7)],
        ) {
            let dets: Vec<(BoundingBox, f64)> = dets.into_iter().map(|(b, s)| (b, f64::from(s) / 4.0)).collect();
            prop_assert_eq!(match_detections(&gts, &dets, thr), reference_match(&gts, &dets, thr));
        }
    }
}
