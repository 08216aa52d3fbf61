use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{nms, DetectError, DetectorModel};
use crate::datakit::{BoundingBox, DatasetManifest};
use crate::evalkit::{iou, Detection};
use crate::gpwgan::{Mlp, MlpSpec, OutputActivation};
use crate::ndgrad::{adam_step, collect_grads, grad, AdamConfig, AdamState, Array, ParamSet, Tape, Tensor};
use crate::raster::GrayImage;
use crate::seed::rng_for;

const MODEL_FORMAT: &str = "defectforge-detector";

/// Sliding-window template detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDetectorConfig {
    /// Windows are resampled to `template_side`² features.
    pub template_side: usize,
    /// Hidden layer widths of the scorer; empty gives plain logistic templates.
    pub hidden: Vec<usize>,
    /// Square window sides; empty means the lower and upper quartile of
    /// training box sides.
    pub window_sides: Vec<u32>,
    /// Window stride as a fraction of the window side.
    pub stride_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Jittered copies of each ground-truth box used as extra positives.
    pub jitter: usize,
    pub negatives_per_positive: usize,
    pub l2: f64,
    pub score_threshold: f64,
    /// Per-class overrides of `score_threshold`.
    pub class_thresholds: BTreeMap<String, f64>,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub seed: u64,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            template_side: 8,
            hidden: vec![16],
            window_sides: Vec::new(),
            stride_fraction: 0.25,
            epochs: 150,
            learning_rate: 0.02,
            jitter: 4,
            negatives_per_positive: 4,
            l2: 1e-3,
            score_threshold: 0.05,
            class_thresholds: BTreeMap::new(),
            nms_iou: 0.3,
            max_detections: 50,
            seed: 0,
        }
    }
}

/// Training loss after every epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
}

/// Per-class logistic scores of square windows at fixed scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    pub config: ToyDetectorConfig,
    pub classes: Vec<String>,
    pub window_sides: Vec<u32>,
    /// Maps `template_side²` window features to one logit per class.
    pub scorer: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    classes: Vec<String>,
    window_sides: Vec<u32>,
    config: ToyDetectorConfig,
}

/// Resampled window pixels with the mean removed.
fn features(img: &GrayImage, b: &BoundingBox, side: usize) -> Vec<f64> {
    let crop = img.crop(b.x as usize, b.y as usize, b.w as usize, b.h as usize);
    let v = crop.resize(side, side).into_data();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.into_iter().map(|x| (x - mean) * 4.0).collect()
}

fn quartile_sides(train: &DatasetManifest) -> Vec<u32> {
    let mut sides: Vec<u32> = train
        .images
        .iter()
        .flat_map(|i| &i.annotations)
        .map(|a| a.bbox.w.max(a.bbox.h))
        .collect();
    sides.sort_unstable();
    let q = |f: f64| sides[((sides.len() - 1) as f64 * f).round() as usize];
    let mut out = vec![q(0.25), q(0.75)];
    out.dedup();
    out
}

fn square_at(cx: f64, cy: f64, side: u32, width: u32, height: u32) -> Option<BoundingBox> {
    if side > width || side > height {
        return None;
    }
    let x = (cx - f64::from(side) / 2.0).round().clamp(0.0, f64::from(width - side)) as u32;
    let y = (cy - f64::from(side) / 2.0).round().clamp(0.0, f64::from(height - side)) as u32;
    Some(BoundingBox { x, y, w: side, h: side })
}

fn windows(width: u32, height: u32, side: u32, stride_fraction: f64) -> Vec<BoundingBox> {
    if side > width || side > height {
        return Vec::new();
    }
    let stride = ((f64::from(side) * stride_fraction).round() as u32).max(1);
    let axis = |limit: u32| {
        let mut v: Vec<u32> = (0..=limit - side).step_by(stride as usize).collect();
        if *v.last().expect("non-empty range") != limit - side {
            v.push(limit - side);
        }
        v
    };
    let xs = axis(width);
    let ys = axis(height);
    ys.iter()
        .flat_map(|&y| xs.iter().map(move |&x| BoundingBox { x, y, w: side, h: side }))
        .collect()
}

fn training_set(
    train: &DatasetManifest,
    classes: &[String],
    cfg: &ToyDetectorConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize), DetectError> {
    let dim = cfg.template_side * cfg.template_side;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let mut rows = 0;
    for (k, img) in train.images.iter().enumerate() {
        if img.annotations.is_empty() {
            continue;
        }
        let px = img.pixels()?;
        let mut rng = rng_for(cfg.seed, "toy-detector/samples", k as u64);
        let gts: Vec<BoundingBox> = img.annotations.iter().map(|a| a.bbox).collect();
        for a in &img.annotations {
            let target: Vec<f64> = classes.iter().map(|c| f64::from(u8::from(*c == a.class_label))).collect();
            let b = a.bbox;
            let mut boxes = vec![b];
            for _ in 0..cfg.jitter {
                let side = (f64::from(b.w.max(b.h)) * rng.random_range(0.9..1.1)).round().max(1.0) as u32;
                let cx = f64::from(b.x) + f64::from(b.w) / 2.0 + rng.random_range(-1.5..1.5);
                let cy = f64::from(b.y) + f64::from(b.h) / 2.0 + rng.random_range(-1.5..1.5);
                if let Some(j) = square_at(cx, cy, side, img.width, img.height) {
                    if iou(&j, &b) >= 0.6 {
                        boxes.push(j);
                    }
                }
            }
            for bb in boxes {
                x.extend(features(px, &bb, cfg.template_side));
                y.extend(&target);
                rows += 1;
            }
            let mut found = 0;
            let mut tries = 0;
            while found < cfg.negatives_per_positive && tries < 100 * cfg.negatives_per_positive.max(1) {
                tries += 1;
                let side = (f64::from(b.w.max(b.h)) * rng.random_range(0.7..1.3)).round().max(1.0) as u32;
                // half the negatives are drawn near the box to sharpen localization
                let (cx, cy) = if found % 2 == 0 {
                    (
                        f64::from(b.x) + f64::from(b.w) / 2.0 + rng.random_range(-1.0..1.0) * f64::from(b.w),
                        f64::from(b.y) + f64::from(b.h) / 2.0 + rng.random_range(-1.0..1.0) * f64::from(b.h),
                    )
                } else {
                    (
                        rng.random_range(0.0..f64::from(img.width)),
                        rng.random_range(0.0..f64::from(img.height)),
                    )
                };
                let Some(nb) = square_at(cx, cy, side, img.width, img.height) else {
                    continue;
                };
                if gts.iter().all(|g| iou(&nb, g) < 0.5) {
                    x.extend(features(px, &nb, cfg.template_side));
                    y.extend(std::iter::repeat_n(0.0, classes.len()));
                    rows += 1;
                    found += 1;
                }
            }
        }
    }
    if rows == 0 {
        return Err(DetectError::EmptyDataset);
    }
    debug_assert_eq!(x.len(), rows * dim);
    Ok((x, y, rows))
}

fn scorer_spec(cfg: &ToyDetectorConfig, classes: usize) -> MlpSpec {
    MlpSpec {
        input: cfg.template_side * cfg.template_side,
        hidden: cfg.hidden.clone(),
        output: classes,
        activation: OutputActivation::Linear,
    }
}

/// Fits the window scorer with full-batch Adam on a logistic loss, one
/// independent sigmoid per class.
pub fn toy_detector_train(
    train: &DatasetManifest,
    cfg: &ToyDetectorConfig,
) -> Result<(ToyDetector, TrainTrace), DetectError> {
    if train.images.iter().all(|i| i.annotations.is_empty()) {
        return Err(DetectError::EmptyDataset);
    }
    let classes = train.classes.clone();
    let dim = cfg.template_side * cfg.template_side;
    let (x, y, rows) = training_set(train, &classes, cfg)?;
    let x = Tensor::constant(Array::new(vec![rows, dim], x)?);
    let y = Tensor::constant(Array::new(vec![rows, classes.len()], y)?);

    let mut scorer = Mlp::init(scorer_spec(cfg, classes.len()), &mut rng_for(cfg.seed, "toy-detector/init", 0));
    let adam = AdamConfig {
        alpha: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&scorer.params);
    let mut trace = TrainTrace::default();
    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let bound = scorer.bind(&tape);
        let s = bound.forward(&x)?;
        let mut l = s.softplus()?.sub(&s.mul(&y)?)?.mean()?;
        for (name, p) in scorer.params.names().zip(bound.params()) {
            if name.ends_with(".w") {
                l = l.add(&p.square()?.sum()?.scale(cfg.l2)?)?;
            }
        }
        trace.losses.push(l.item().expect("scalar loss"));
        let grads = collect_grads(&scorer.params, grad(&l, &bound.params(), false)?)?;
        adam_step(&mut scorer.params, &grads, &mut state, &adam)?;
    }
    let window_sides = if cfg.window_sides.is_empty() {
        quartile_sides(train)
    } else {
        cfg.window_sides.clone()
    };
    Ok((
        ToyDetector {
            config: cfg.clone(),
            classes,
            window_sides,
            scorer,
        },
        trace,
    ))
}

impl ToyDetector {
    pub fn threshold(&self, class: &str) -> f64 {
        self.config
            .class_thresholds
            .get(class)
            .copied()
            .unwrap_or(self.config.score_threshold)
    }

    /// Probabilities of every class for each window, one row per window.
    pub fn score_windows(&self, img: &GrayImage, boxes: &[BoundingBox]) -> Vec<Vec<f64>> {
        if boxes.is_empty() {
            return Vec::new();
        }
        let dim = self.config.template_side * self.config.template_side;
        let feats: Vec<f64> = boxes
            .iter()
            .flat_map(|b| features(img, b, self.config.template_side))
            .collect();
        let x = Array::new(vec![boxes.len(), dim], feats).expect("feature matrix");
        let logits = self.scorer.forward(&x).expect("scorer shapes checked at construction");
        (0..boxes.len())
            .map(|i| logits.row(i).iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect())
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), DetectError> {
        let header = Header {
            format: MODEL_FORMAT.to_string(),
            classes: self.classes.clone(),
            window_sides: self.window_sides.clone(),
            config: self.config.clone(),
        };
        let io = |source| DetectError::Io {
            path: "<model>".to_string(),
            source,
        };
        w.write_all(serde_json::to_string(&header).expect("header serializes").as_bytes())
            .map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        self.scorer.params.write_to(&mut w)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(r: impl Read) -> Result<Self, DetectError> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|source| DetectError::Io {
            path: "<model>".to_string(),
            source,
        })?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| DetectError::ModelFormat(format!("header: {e}")))?;
        if header.format != MODEL_FORMAT {
            return Err(DetectError::ModelFormat(format!("unknown format `{}`", header.format)));
        }
        let params = ParamSet::read_from(r)?;
        let spec = scorer_spec(&header.config, header.classes.len());
        let scorer = Mlp::from_params(spec, params).map_err(|e| DetectError::ModelFormat(e.to_string()))?;
        Ok(Self {
            config: header.config,
            classes: header.classes,
            window_sides: header.window_sides,
            scorer,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectError> {
        Self::read_from(bytes)
    }
}

impl DetectorModel for ToyDetector {
    fn name(&self) -> &str {
        "toy-template"
    }

    fn trainable(&self) -> bool {
        true
    }

    fn infer(&self, image_id: u64, image: &GrayImage) -> Vec<Detection> {
        let (iw, ih) = (image.width() as u32, image.height() as u32);
        let mut per_class: Vec<Vec<Detection>> = vec![Vec::new(); self.classes.len()];
        let thresholds: Vec<f64> = self.classes.iter().map(|c| self.threshold(c)).collect();
        for &side in &self.window_sides {
            let boxes = windows(iw, ih, side, self.config.stride_fraction);
            for (b, scores) in boxes.iter().zip(self.score_windows(image, &boxes)) {
                for (k, s) in scores.into_iter().enumerate() {
                    if s >= thresholds[k] {
                        per_class[k].push(Detection {
                            image_id,
                            class_label: self.classes[k].clone(),
                            bbox: *b,
                            score: s,
                        });
                    }
                }
            }
        }
        let mut out: Vec<Detection> = per_class
            .iter()
            .flat_map(|d| nms(d, self.config.nms_iou))
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out.truncate(self.config.max_detections);
        out
    }
}
