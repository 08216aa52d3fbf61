use serde::{Deserialize, Serialize};

use super::DetectError;
use crate::datakit::BoundingBox;
use crate::evalkit::iou;

pub const DEFAULT_POS_IOU: f64 = 0.7;
pub const DEFAULT_NEG_IOU: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Objectness targets for region proposals.
///
/// An anchor is positive when its IoU with some ground truth reaches
/// `pos_iou`, or when it attains the (nonzero) maximum IoU for some ground
/// truth, ties included. Remaining anchors are negative when their best IoU
/// is below `neg_iou` and ignored otherwise.
pub fn assign_labels(
    anchors: &[BoundingBox],
    gts: &[BoundingBox],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<Vec<AnchorLabel>, DetectError> {
    if !(pos_iou > neg_iou) {
        return Err(DetectError::InvalidThresholds {
            pos: pos_iou,
            neg: neg_iou,
        });
    }
    let table: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut gt_best = vec![0.0f64; gts.len()];
    for row in &table {
        for (g, &v) in row.iter().enumerate() {
            gt_best[g] = gt_best[g].max(v);
        }
    }
    Ok(table
        .iter()
        .map(|row| {
            let best = row.iter().copied().fold(0.0, f64::max);
            let argmax_for_some = row.iter().zip(&gt_best).any(|(&v, &b)| b > 0.0 && v == b);
            if best >= pos_iou || argmax_for_some {
                AnchorLabel::Positive
            } else if best < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect())
}
