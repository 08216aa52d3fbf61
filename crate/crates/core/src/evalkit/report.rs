use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{match_detections, mean_ap, rank_by_score, ApMethod, Detection, EvalError, PrCurve};
use crate::datakit::{BoundingBox, DatasetManifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            method: ApMethod::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    /// `None` when the class has no ground truth; such classes are left out of mAP.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub class_count: usize,
    pub iou_threshold: f64,
    pub method: ApMethod,
}

impl EvalReport {
    pub fn ap(&self, class: &str) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class)?.ap
    }

    /// `class,ap,tp,fp,fn` rows; classes without ground truth show an empty AP.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,ap,tp,fp,fn\n");
        for c in &self.classes {
            let ap = c.ap.map(|v| format!("{v:.6}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", c.class, ap, c.tp, c.fp, c.fn_));
        }
        s
    }
}

/// Scores `dets` against the ground truth of `gt`.
///
/// Matching is per image and per class. Within a class all detections are
/// ranked by descending score with ties kept in input order.
pub fn evaluate(gt: &DatasetManifest, dets: &[Detection], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    let mut classes = gt.classes.clone();
    for d in dets {
        if !classes.contains(&d.class_label) {
            classes.push(d.class_label.clone());
        }
    }

    let reports: Vec<ClassReport> = classes
        .par_iter()
        .map(|class| score_class(gt, dets, class, cfg))
        .collect();

    let aps: Vec<f64> = reports.iter().filter_map(|r| r.ap).collect();
    let map = mean_ap(&aps)?;
    Ok(EvalReport {
        class_count: aps.len(),
        classes: reports,
        map,
        iou_threshold: cfg.iou_threshold,
        method: cfg.method,
    })
}

fn score_class(gt: &DatasetManifest, dets: &[Detection], class: &str, cfg: &EvalConfig) -> ClassReport {
    let mut gt_by_image: BTreeMap<u64, Vec<BoundingBox>> = BTreeMap::new();
    for img in &gt.images {
        for a in img.annotations.iter().filter(|a| a.class_label == class) {
            gt_by_image.entry(img.id).or_default().push(a.bbox);
        }
    }
    let num_gt: usize = gt_by_image.values().map(Vec::len).sum();

    let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_label == class).collect();
    let mut by_image: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for &i in &idx {
        by_image.entry(dets[i].image_id).or_default().push(i);
    }
    let mut hit = vec![false; dets.len()];
    for (image_id, members) in &by_image {
        let gts = gt_by_image.get(image_id).map(Vec::as_slice).unwrap_or(&[]);
        let boxes: Vec<(BoundingBox, f64)> = members.iter().map(|&i| (dets[i].bbox, dets[i].score)).collect();
        for (&i, f) in members.iter().zip(match_detections(gts, &boxes, cfg.iou_threshold)) {
            hit[i] = f;
        }
    }

    let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
    let flags: Vec<bool> = rank_by_score(&scores).into_iter().map(|r| hit[idx[r]]).collect();
    let tp = flags.iter().filter(|&&f| f).count();
    let ap = PrCurve::from_flags(&flags, num_gt).ok().map(|c| c.area(cfg.method));
    ClassReport {
        class: class.to_string(),
        ap,
        num_gt,
        tp,
        fp: flags.len() - tp,
        fn_: num_gt - tp,
    }
}

/// Serializes detections in the shared predictions schema:
/// `[{ "image_id": int, "class": string, "bbox": [x, y, w, h], "score": float }]`.
pub fn export_predictions(dets: &[Detection]) -> String {
    #[derive(Serialize)]
    struct Row<'a> {
        image_id: u64,
        class: &'a str,
        bbox: [u32; 4],
        score: f64,
    }
    let rows: Vec<Row> = dets
        .iter()
        .map(|d| Row {
            image_id: d.image_id,
            class: &d.class_label,
            bbox: d.bbox.to_array(),
            score: d.score,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&rows).expect("predictions serialize");
    s.push('\n');
    s
}
