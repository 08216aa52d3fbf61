//! Copy-paste augmentation: cut defect patches, allocate them on defect-free
//! beds, alpha-blend, and emit annotated synthetic samples.

mod build;
mod mask;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::{
    AnnotatedImage, Annotation, BoundingBox, DataError, PatchOrigin, PlacementRecord, Provenance,
};
use crate::evalkit::iou;
use crate::raster::GrayImage;
use crate::seed::rng_for;

pub use build::{build_augmented_dataset, patch_training_set, AugmentPlan};
pub use mask::{feather, generated_mask, otsu_threshold, FEATHER_WIDTH};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("patch {index} ({pw}x{ph}) does not fit a {bw}x{bh} bed with margin {margin}")]
    PatchTooLarge {
        index: usize,
        pw: usize,
        ph: usize,
        bw: usize,
        bh: usize,
        margin: usize,
    },
    #[error("no free position for patch {index} after {attempts} attempts")]
    AllocationFailed { index: usize, attempts: usize },
    #[error("invalid allocation policy: {0}")]
    InvalidPolicy(String),
    #[error("placement {0:?} does not match the patch or leaves the bed")]
    InvalidPlacement(Placement),
    #[error("{0} pool is empty")]
    EmptyPool(&'static str),
    #[error("no patches available for class `{0}`")]
    NoPatchesForClass(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gan(#[from] crate::gpwgan::GanError),
}

/// A defect crop or generated sample with its alpha mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DefectPatch {
    pub pixels: GrayImage,
    pub mask: GrayImage,
    pub class_label: String,
    pub origin: PatchOrigin,
    pub source: String,
}

impl DefectPatch {
    /// A real patch with a full-box mask.
    pub fn real(pixels: GrayImage, class_label: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            mask: GrayImage::filled(pixels.width(), pixels.height(), 1.0),
            pixels,
            class_label: class_label.into(),
            origin: PatchOrigin::Real,
            source: source.into(),
        }
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }
}

/// A defect-free background image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBed {
    pub pixels: Arc<GrayImage>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub patch: usize,
    pub x: u32,
    pub y: u32,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "tau")]
pub enum Overlap {
    Disjoint,
    MaxIou(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllocationPolicy {
    /// Inclusive `[min, max]` number of defects per bed.
    pub defects_per_bed: [usize; 2],
    pub overlap: Overlap,
    pub max_attempts: usize,
    /// Minimum distance from a placed box to the bed border.
    pub margin: usize,
}

impl Default for AllocationPolicy {
    fn default() -> Self {
        Self {
            defects_per_bed: [1, 3],
            overlap: Overlap::Disjoint,
            max_attempts: 100,
            margin: 0,
        }
    }
}

impl AllocationPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let [lo, hi] = self.defects_per_bed;
        if lo > hi {
            return Err(AugmentError::InvalidPolicy(format!("empty range [{lo}, {hi}]")));
        }
        if let Overlap::MaxIou(t) = self.overlap {
            if !(0.0..1.0).contains(&t) {
                return Err(AugmentError::InvalidPolicy(format!("max_iou {t} outside [0, 1)")));
            }
        }
        if self.max_attempts == 0 {
            return Err(AugmentError::InvalidPolicy("max_attempts must be at least 1".into()));
        }
        Ok(())
    }

    fn allows(&self, a: &BoundingBox, b: &BoundingBox) -> bool {
        let v = iou(a, b);
        match self.overlap {
            Overlap::Disjoint => v == 0.0,
            Overlap::MaxIou(t) => v <= t,
        }
    }
}

/// Crops one patch per ground-truth box, widened by `pad` pixels where the
/// image allows. The mask is 1 on the box and ramps down across the pad ring.
pub fn extract_patches(image: &AnnotatedImage, pad: u32) -> Result<Vec<DefectPatch>, AugmentError> {
    let px = image.pixels()?;
    let (iw, ih) = (px.width() as u64, px.height() as u64);
    let mut out = Vec::with_capacity(image.annotations.len());
    for a in &image.annotations {
        let b = a.bbox;
        if !b.fits_within(iw as u32, ih as u32) {
            return Err(DataError::BoxOutOfBounds {
                image_id: image.id,
                bbox: b,
                width: iw as u32,
                height: ih as u32,
            }
            .into());
        }
        let x0 = b.x.saturating_sub(pad) as usize;
        let y0 = b.y.saturating_sub(pad) as usize;
        let x1 = (b.right() + u64::from(pad)).min(iw) as usize;
        let y1 = (b.bottom() + u64::from(pad)).min(ih) as usize;
        let pixels = px.crop(x0, y0, x1 - x0, y1 - y0);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut mask = GrayImage::filled(w, h, 1.0);
        if pad > 0 {
            let (bx0, by0) = (b.x as usize - x0, b.y as usize - y0);
            let (bx1, by1) = (bx0 + b.w as usize, by0 + b.h as usize);
            for y in 0..h {
                for x in 0..w {
                    let dx = bx0.saturating_sub(x).max((x + 1).saturating_sub(bx1));
                    let dy = by0.saturating_sub(y).max((y + 1).saturating_sub(by1));
                    let d = dx.max(dy);
                    mask.set(x, y, 1.0 - d as f64 / (f64::from(pad) + 1.0));
                }
            }
        }
        out.push(DefectPatch {
            pixels,
            mask,
            class_label: a.class_label.clone(),
            origin: PatchOrigin::Real,
            source: format!("image:{}", image.id),
        });
    }
    Ok(out)
}

/// Positions every patch of `sizes` (`(w, h)` pairs) on a `bw`×`bh` bed by
/// uniform rejection sampling.
pub fn place(
    bw: usize,
    bh: usize,
    sizes: &[(usize, usize)],
    policy: &AllocationPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<Placement>, AugmentError> {
    policy.validate()?;
    let m = policy.margin;
    for (index, &(pw, ph)) in sizes.iter().enumerate() {
        if pw + 2 * m > bw || ph + 2 * m > bh {
            return Err(AugmentError::PatchTooLarge {
                index,
                pw,
                ph,
                bw,
                bh,
                margin: m,
            });
        }
    }
    let mut placed: Vec<Placement> = Vec::with_capacity(sizes.len());
    for (index, &(pw, ph)) in sizes.iter().enumerate() {
        let mut found = None;
        for _ in 0..policy.max_attempts {
            let x = rng.random_range(m..=bw - pw - m) as u32;
            let y = rng.random_range(m..=bh - ph - m) as u32;
            let bbox = BoundingBox::new(x, y, pw as u32, ph as u32)?;
            if placed.iter().all(|p| policy.allows(&p.bbox, &bbox)) {
                found = Some(Placement {
                    patch: index,
                    x,
                    y,
                    bbox,
                });
                break;
            }
        }
        match found {
            Some(p) => placed.push(p),
            None => {
                return Err(AugmentError::AllocationFailed {
                    index,
                    attempts: policy.max_attempts,
                })
            }
        }
    }
    Ok(placed)
}

fn allocate_with(
    bed: &ImageBed,
    patches: &[DefectPatch],
    policy: &AllocationPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<Placement>, AugmentError> {
    policy.validate()?;
    if patches.is_empty() {
        return Err(AugmentError::EmptyPool("patch"));
    }
    let [lo, hi] = policy.defects_per_bed;
    let k = rng.random_range(lo..=hi);
    let chosen: Vec<usize> = (0..k).map(|_| rng.random_range(0..patches.len())).collect();
    let sizes: Vec<(usize, usize)> = chosen.iter().map(|&i| (patches[i].width(), patches[i].height())).collect();
    let mut placements = place(bed.pixels.width(), bed.pixels.height(), &sizes, policy, rng)?;
    for p in &mut placements {
        p.patch = chosen[p.patch];
    }
    Ok(placements)
}

/// Draws the defect count from the policy, picks patches uniformly from
/// `patches`, and positions them on `bed`.
pub fn allocate(
    bed: &ImageBed,
    patches: &[DefectPatch],
    policy: &AllocationPolicy,
    seed: u64,
) -> Result<Vec<Placement>, AugmentError> {
    allocate_with(bed, patches, policy, &mut rng_for(seed, "augment/allocate", 0))
}

/// Alpha-composites `patch` into `img` at `placement`: `m·p + (1 − m)·b`.
pub fn blend_into(img: &mut GrayImage, patch: &DefectPatch, placement: &Placement) -> Result<(), AugmentError> {
    let b = placement.bbox;
    if b.w as usize != patch.width()
        || b.h as usize != patch.height()
        || (b.x, b.y) != (placement.x, placement.y)
        || !b.fits_within(img.width() as u32, img.height() as u32)
    {
        return Err(AugmentError::InvalidPlacement(*placement));
    }
    for py in 0..patch.height() {
        for px in 0..patch.width() {
            let (x, y) = (b.x as usize + px, b.y as usize + py);
            let m = patch.mask.get(px, py);
            let v = m * patch.pixels.get(px, py) + (1.0 - m) * img.get(x, y);
            img.set(x, y, v);
        }
    }
    Ok(())
}

pub fn blend(bed: &GrayImage, patch: &DefectPatch, placement: &Placement) -> Result<GrayImage, AugmentError> {
    let mut out = bed.clone();
    blend_into(&mut out, patch, placement)?;
    Ok(out)
}

/// A composed image with its provenance. `image.id` and `image.file` are
/// left for the caller to assign.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: AnnotatedImage,
    pub provenance: Provenance,
}

pub(crate) fn compose(
    bed: &ImageBed,
    chosen: &[&DefectPatch],
    placements: &[Placement],
    seed: u64,
) -> Result<SyntheticSample, AugmentError> {
    let mut img = (*bed.pixels).clone();
    let mut annotations = Vec::with_capacity(placements.len());
    let mut records = Vec::with_capacity(placements.len());
    for p in placements {
        let patch = chosen[p.patch];
        blend_into(&mut img, patch, p)?;
        annotations.push(Annotation {
            class_label: patch.class_label.clone(),
            bbox: p.bbox,
        });
        records.push(PlacementRecord {
            class: patch.class_label.clone(),
            bbox: p.bbox.to_array(),
            origin: patch.origin,
            source: patch.source.clone(),
        });
    }
    Ok(SyntheticSample {
        image: AnnotatedImage {
            id: 0,
            file: String::new(),
            width: img.width() as u32,
            height: img.height() as u32,
            annotations,
            pixels: Some(Arc::new(img)),
        },
        provenance: Provenance {
            image_id: 0,
            bed_source: bed.source_id.clone(),
            seed,
            placements: records,
        },
    })
}

/// Picks a bed, allocates patches from `pool`, blends them and annotates
/// every placement with its patch's class.
pub fn synthesize_sample(
    beds: &[ImageBed],
    pool: &[DefectPatch],
    policy: &AllocationPolicy,
    seed: u64,
) -> Result<SyntheticSample, AugmentError> {
    if beds.is_empty() {
        return Err(AugmentError::EmptyPool("bed"));
    }
    let mut rng = rng_for(seed, "augment/sample", 0);
    let bed = &beds[rng.random_range(0..beds.len())];
    let placements = allocate_with(bed, pool, policy, &mut rng)?;
    let chosen: Vec<&DefectPatch> = pool.iter().collect();
    compose(bed, &chosen, &placements, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|i| (i % 251) as f64 / 250.0).collect()).unwrap()
    }

    fn bed(w: usize, h: usize, v: f64) -> ImageBed {
        ImageBed {
            pixels: Arc::new(GrayImage::filled(w, h, v)),
            source_id: "bed".into(),
        }
    }

    fn annotated(boxes: &[[u32; 4]]) -> AnnotatedImage {
        AnnotatedImage {
            id: 4,
            file: "a.png".into(),
            width: 20,
            height: 16,
            annotations: boxes
                .iter()
                .map(|b| Annotation {
                    class_label: "c".into(),
                    bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                })
                .collect(),
            pixels: Some(Arc::new(ramp_image(20, 16))),
        }
    }

    #[test]
    fn extract_is_exact_crop() {
        let img = annotated(&[[2, 3, 4, 5]]);
        let p = &extract_patches(&img, 0).unwrap()[0];
        assert_eq!((p.width(), p.height()), (4, 5));
        let src = img.pixels().unwrap();
        for y in 0..5 {
            for x in 0..4 {
                assert_eq!(p.pixels.get(x, y), src.get(2 + x, 3 + y));
            }
        }
        assert!(p.mask.data().iter().all(|&m| m == 1.0));
        assert!(extract_patches(&annotated(&[]), 0).unwrap().is_empty());
    }

    #[test]
    fn padded_extract_at_border() {
        let img = annotated(&[[0, 1, 3, 3]]);
        let p = &extract_patches(&img, 2).unwrap()[0];
        // x clamps at 0, y reaches up to row 0 only
        assert_eq!((p.width(), p.height()), (5, 6));
        let src = img.pixels().unwrap();
        for y in 0..6 {
            for x in 0..5 {
                assert_eq!(p.pixels.get(x, y), src.get(x, y));
                let inside = x < 3 && (1..4).contains(&y);
                assert_eq!(p.mask.get(x, y) == 1.0, inside, "({x},{y})");
            }
        }
        assert!((p.mask.get(4, 2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_box_is_rejected() {
        let mut img = annotated(&[]);
        img.annotations.push(Annotation {
            class_label: "c".into(),
            bbox: BoundingBox::new(18, 0, 5, 2).unwrap(),
        });
        assert!(matches!(
            extract_patches(&img, 0),
            Err(AugmentError::Data(DataError::BoxOutOfBounds { .. }))
        ));
    }

    #[test]
    fn two_patches_disjoint_on_bed() {
        let patches = vec![DefectPatch::real(GrayImage::filled(16, 16, 0.0), "c", "a"); 2];
        let policy = AllocationPolicy {
            defects_per_bed: [2, 2],
            ..AllocationPolicy::default()
        };
        let b = bed(64, 64, 0.5);
        for seed in 0..50 {
            let pl = allocate(&b, &patches, &policy, seed).unwrap();
            assert_eq!(pl.len(), 2);
            assert!(pl.iter().all(|p| p.bbox.fits_within(64, 64)));
            assert_eq!(iou(&pl[0].bbox, &pl[1].bbox), 0.0);
            assert_eq!(pl, allocate(&b, &patches, &policy, seed).unwrap());
        }
    }

    #[test]
    fn allocation_errors() {
        let big = vec![DefectPatch::real(GrayImage::filled(80, 80, 0.0), "c", "a")];
        assert!(matches!(
            allocate(&bed(64, 64, 0.5), &big, &AllocationPolicy::default(), 0),
            Err(AugmentError::PatchTooLarge { .. })
        ));
        let crowd = vec![DefectPatch::real(GrayImage::filled(40, 40, 0.0), "c", "a")];
        let policy = AllocationPolicy {
            defects_per_bed: [3, 3],
            max_attempts: 10,
            ..AllocationPolicy::default()
        };
        assert!(matches!(
            allocate(&bed(64, 64, 0.5), &crowd, &policy, 0),
            Err(AugmentError::AllocationFailed { .. })
        ));
        let bad = AllocationPolicy {
            defects_per_bed: [3, 1],
            ..AllocationPolicy::default()
        };
        assert!(matches!(bad.validate(), Err(AugmentError::InvalidPolicy(_))));
    }

    #[test]
    fn blend_opacity_extremes() {
        let b = ramp_image(10, 10);
        let mut patch = DefectPatch::real(GrayImage::filled(3, 2, 0.9), "c", "a");
        let pl = Placement {
            patch: 0,
            x: 4,
            y: 5,
            bbox: BoundingBox::new(4, 5, 3, 2).unwrap(),
        };
        let out = blend(&b, &patch, &pl).unwrap();
        for y in 0..10 {
            for x in 0..10 {
                let inside = (4..7).contains(&x) && (5..7).contains(&y);
                assert_eq!(out.get(x, y), if inside { 0.9 } else { b.get(x, y) });
            }
        }
        patch.mask = GrayImage::filled(3, 2, 0.0);
        assert_eq!(blend(&b, &patch, &pl).unwrap(), b);
    }

    #[test]
    fn feathered_row_is_convex_and_monotone() {
        let mut fg = vec![false; 9 * 9];
        for y in 3..6 {
            for x in 3..6 {
                fg[y * 9 + x] = true;
            }
        }
        let patch = DefectPatch {
            pixels: GrayImage::filled(9, 9, 1.0),
            mask: feather(&fg, 9, 9, FEATHER_WIDTH),
            class_label: "c".into(),
            origin: PatchOrigin::Generated,
            source: "g".into(),
        };
        let pl = Placement {
            patch: 0,
            x: 0,
            y: 0,
            bbox: BoundingBox::new(0, 0, 9, 9).unwrap(),
        };
        let out = blend(&GrayImage::filled(9, 9, 0.2), &patch, &pl).unwrap();
        let row: Vec<f64> = (0..9).map(|x| out.get(x, 4)).collect();
        let masks: Vec<f64> = (0..9).map(|x| patch.mask.get(x, 4)).collect();
        assert!(row.iter().all(|&v| (0.2..=1.0).contains(&v)));
        for x in 0..4 {
            assert!(masks[x + 1] >= masks[x] && row[x + 1] >= row[x]);
        }
        assert_eq!(masks[..4], [0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn sample_has_one_annotation_and_replays() {
        let pool = vec![DefectPatch::real(ramp_image(5, 4), "scratch", "image:1")];
        let policy = AllocationPolicy {
            defects_per_bed: [1, 1],
            ..AllocationPolicy::default()
        };
        let beds = [bed(32, 32, 0.3), bed(32, 32, 0.6)];
        let s = synthesize_sample(&beds, &pool, &policy, 3).unwrap();
        assert_eq!(s.image.annotations.len(), 1);
        assert_eq!(s.image.annotations[0].class_label, "scratch");
        assert_eq!(s, synthesize_sample(&beds, &pool, &policy, 3).unwrap());
        let b = s.image.annotations[0].bbox;
        let crop = s.image.pixels().unwrap().crop(b.x as usize, b.y as usize, 5, 4);
        assert_eq!(crop, pool[0].pixels);
    }
}
