//! Detection primitives (anchors, label assignment, NMS), a pluggable
//! detector interface, a small template detector, and a synthetic
//! shape dataset for desk-scale experiments.

mod anchors;
mod assign;
mod experiment;
mod micro;
mod nms;
mod predictions;
mod toy;

use crate::evalkit::Detection;
use crate::raster::GrayImage;

pub use anchors::{anchor_grid, generate_anchors, AnchorBox, AnchorSpec};
pub use assign::{assign_labels, AnchorLabel, DEFAULT_NEG_IOU, DEFAULT_POS_IOU};
pub use experiment::{detect_all, FoldPipeline, MinorityExperiment, RunOutcome};
pub use micro::{shapes_dataset, ShapesSpec, SHAPE_CLASSES};
pub use nms::nms;
pub use predictions::{import_predictions, parse_predictions};
pub use toy::{toy_detector_train, ToyDetector, ToyDetectorConfig, TrainTrace};

#[derive(Debug, thiserror::Error)]
pub enum DetectError {
    #[error("training set has no annotated boxes")]
    EmptyDataset,
    #[error("positive IoU threshold {pos} must exceed negative threshold {neg}")]
    InvalidThresholds { pos: f64, neg: f64 },
    #[error("{file}:{line}: {message}")]
    ParseError {
        file: String,
        line: usize,
        message: String,
    },
    #[error("image {image_id}: invalid box {bbox:?}: {reason}")]
    InvalidBox {
        image_id: u64,
        bbox: Vec<f64>,
        reason: String,
    },
    #[error("class `{0}` has no ground truth in the test set")]
    MissingClass(String),
    #[error("malformed detector model: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Data(#[from] crate::datakit::DataError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error(transparent)]
    Grad(#[from] crate::ndgrad::GradError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// A detector that scores one grayscale image at a time.
pub trait DetectorModel: Sync {
    fn name(&self) -> &str;

    /// Whether the model can be fitted by this crate rather than imported.
    fn trainable(&self) -> bool;

    /// Detections for `image`, sorted by descending score.
    fn infer(&self, image_id: u64, image: &GrayImage) -> Vec<Detection>;
}
