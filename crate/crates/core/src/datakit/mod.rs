//! Dataset model, annotation formats, segmentation-to-box conversion,
//! imbalance construction and cross-validation splitting.

mod formats;
mod seg;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::raster::{GrayImage, RasterError};

pub use formats::{
    export_coco, import_coco, import_voc, import_voc_str, load_canonical, manifest_from_str,
    manifest_to_string, save_canonical, CocoFile,
};
pub use seg::{seg_to_bbox, BinaryMask};
pub use split::{kfold_split, make_imbalanced, retain_class, Fold};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid box {0:?}: extents must be at least 1")]
    InvalidBox(BoundingBox),
    #[error("image {image_id}: box {bbox:?} leaves the {width}x{height} image")]
    BoxOutOfBounds {
        image_id: u64,
        bbox: BoundingBox,
        width: u32,
        height: u32,
    },
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("needs {requested} images of `{class}`, only {available} contain it")]
    DropTooLarge {
        class: String,
        requested: usize,
        available: usize,
    },
    #[error("{k}-fold split needs at least {k} images, got {n}")]
    TooFewImages { k: usize, n: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidFoldCount(usize),
    #[error("{file}:{line}: {message}")]
    ParseError {
        file: String,
        line: usize,
        message: String,
    },
    #[error("class `{0}` is not declared in the manifest")]
    UnknownClass(String),
    #[error("duplicate image id {0}")]
    DuplicateImageId(u64),
    #[error("image {0} has no pixels loaded")]
    MissingPixels(u64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Integer pixel box, top-left origin. Covers columns `x..x + w` and rows `y..y + h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Result<Self, DataError> {
        let b = Self { x, y, w, h };
        if w == 0 || h == 0 {
            return Err(DataError::InvalidBox(b));
        }
        Ok(b)
    }

    /// Exclusive right edge.
    pub fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.w)
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.h)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= u64::from(width) && self.bottom() <= u64::from(height)
    }

    pub fn to_array(&self) -> [u32; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub class_label: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: u64,
    /// Path relative to the manifest's directory.
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation>,
    /// Decoded pixels when the image has been loaded or synthesized in memory.
    pub pixels: Option<Arc<GrayImage>>,
}

impl AnnotatedImage {
    pub fn has_class(&self, class: &str) -> bool {
        self.annotations.iter().any(|a| a.class_label == class)
    }

    pub fn pixels(&self) -> Result<&GrayImage, DataError> {
        self.pixels.as_deref().ok_or(DataError::MissingPixels(self.id))
    }
}

/// Origin of a pasted defect patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchOrigin {
    Real,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRecord {
    pub class: String,
    pub bbox: [u32; 4],
    pub origin: PatchOrigin,
    /// Identifies the source patch: a source image id for real patches, a
    /// generator sample index for generated ones.
    pub source: String,
}

/// How a synthetic image was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: u64,
    pub bed_source: String,
    pub seed: u64,
    pub placements: Vec<PlacementRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub images: Vec<AnnotatedImage>,
    pub provenance: Vec<Provenance>,
    /// Directory that relative image paths resolve against, when known.
    pub root: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>) -> Self {
        Self {
            classes,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Checks ids, class labels and box bounds.
    pub fn validate(&self) -> Result<(), DataError> {
        let classes: BTreeSet<&str> = self.classes.iter().map(String::as_str).collect();
        let mut ids = BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.id) {
                return Err(DataError::DuplicateImageId(img.id));
            }
            for a in &img.annotations {
                if !classes.contains(a.class_label.as_str()) {
                    return Err(DataError::UnknownClass(a.class_label.clone()));
                }
                if !a.bbox.fits_within(img.width, img.height) {
                    return Err(DataError::BoxOutOfBounds {
                        image_id: img.id,
                        bbox: a.bbox,
                        width: img.width,
                        height: img.height,
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of images containing each class (every declared class is present).
    pub fn image_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for img in &self.images {
            let present: BTreeSet<&str> =
                img.annotations.iter().map(|a| a.class_label.as_str()).collect();
            for c in present {
                *counts.entry(c.to_string()).or_default() += 1;
            }
        }
        counts
    }

    /// Number of boxes of each class.
    pub fn annotation_counts(&self) -> BTreeMap<String, usize> {
        let mut counts: BTreeMap<String, usize> =
            self.classes.iter().map(|c| (c.clone(), 0)).collect();
        for a in self.images.iter().flat_map(|i| &i.annotations) {
            *counts.entry(a.class_label.clone()).or_default() += 1;
        }
        counts
    }

    pub fn image(&self, id: u64) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id + 1).max().unwrap_or(0)
    }

    /// Same manifest restricted to the given image ids, in original order.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            images: self
                .images
                .iter()
                .filter(|i| ids.contains(&i.id))
                .cloned()
                .collect(),
            provenance: self
                .provenance
                .iter()
                .filter(|p| ids.contains(&p.image_id))
                .cloned()
                .collect(),
            root: self.root.clone(),
        }
    }

    /// Decodes every image's PNG from `root`, keeping already-loaded pixels.
    pub fn load_pixels(&mut self) -> Result<(), DataError> {
        let root = self.root.clone().unwrap_or_default();
        for img in &mut self.images {
            if img.pixels.is_none() {
                let px = GrayImage::load_png(&root.join(&img.file))?;
                img.pixels = Some(Arc::new(px));
            }
        }
        Ok(())
    }
}
