use crate::evalkit::{iou, Detection};

/// Greedy non-maximum suppression for one class.
///
/// Detections are visited by descending score (stable ties); a detection is
/// kept unless its IoU with an already kept one reaches `iou_threshold`.
/// Kept detections come back in visiting order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = crate::evalkit::rank_by_score(&scores);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}
