use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mask::generated_mask;
use super::{compose, extract_patches, place, AllocationPolicy, AugmentError, DefectPatch, ImageBed};
use crate::datakit::DatasetManifest;
use crate::gpwgan::{synthesize_patches, GeneratorNet, Postprocess};
use crate::seed::{derive_seed, rng_for};

/// What to synthesize and how to mix patch sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPlan {
    /// Number of synthetic images appended.
    pub m_g: usize,
    /// Probability that a placement uses a real patch when both kinds exist.
    pub real_fraction: f64,
    /// Relative class weights for placed defects; empty means uniform over
    /// classes that have patches.
    pub class_mix: BTreeMap<String, f64>,
    pub policy: AllocationPolicy,
    /// Context pixels kept around real crops.
    pub pad: u32,
    /// Replace real-crop masks with the thresholded, feathered foreground
    /// used for generated patches, so only the defect itself is pasted.
    pub segment_real: bool,
    /// Patches drawn from each class generator.
    pub generated_per_class: usize,
    pub postprocess: Postprocess,
    /// Directory, relative to the manifest, for synthetic image files.
    pub file_prefix: String,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            m_g: 0,
            real_fraction: 0.5,
            class_mix: BTreeMap::new(),
            policy: AllocationPolicy::default(),
            pad: 0,
            segment_real: false,
            generated_per_class: 256,
            postprocess: Postprocess::default(),
            file_prefix: "synthetic".into(),
            seed: 0,
        }
    }
}

struct Pools {
    classes: Vec<String>,
    cumulative: Vec<f64>,
    real: BTreeMap<String, Vec<DefectPatch>>,
    generated: BTreeMap<String, Vec<DefectPatch>>,
}

impl Pools {
    fn pick_class(&self, rng: &mut impl Rng) -> &str {
        let total = *self.cumulative.last().expect("non-empty class mix");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.classes.len() - 1);
        &self.classes[i]
    }

    fn pick_patch(&self, class: &str, real_fraction: f64, rng: &mut impl Rng) -> Result<&DefectPatch, AugmentError> {
        let real = self.real.get(class).filter(|p| !p.is_empty());
        let generated = self.generated.get(class).filter(|p| !p.is_empty());
        let pool = match (real, generated) {
            (Some(r), Some(g)) => {
                if rng.random::<f64>() < real_fraction {
                    r
                } else {
                    g
                }
            }
            (Some(r), None) => r,
            (None, Some(g)) => g,
            (None, None) => return Err(AugmentError::NoPatchesForClass(class.to_string())),
        };
        Ok(&pool[rng.random_range(0..pool.len())])
    }
}

/// Crops every `class` box of `ds` and resamples it to `patch_w`×`patch_h`,
/// flattened row-major: the training rows for one class generator.
pub fn patch_training_set(
    ds: &DatasetManifest,
    class: &str,
    patch_h: usize,
    patch_w: usize,
) -> Result<Vec<Vec<f64>>, AugmentError> {
    let mut rows = Vec::new();
    for img in ds.images.iter().filter(|i| i.has_class(class)) {
        for p in extract_patches(img, 0)? {
            if p.class_label == class {
                rows.push(p.pixels.resize(patch_w, patch_h).into_data());
            }
        }
    }
    if rows.is_empty() {
        return Err(AugmentError::NoPatchesForClass(class.to_string()));
    }
    Ok(rows)
}

/// Appends `plan.m_g` synthetic images to `real`.
///
/// Real patches come from `real`'s annotations (pixels must be loaded);
/// generated patches come from the per-class `generators`. Every output
/// image draws its randomness from `(plan.seed, index)`, so the result does
/// not depend on thread scheduling.
pub fn build_augmented_dataset(
    real: &DatasetManifest,
    beds: &[ImageBed],
    generators: &BTreeMap<String, GeneratorNet>,
    plan: &AugmentPlan,
) -> Result<DatasetManifest, AugmentError> {
    if plan.m_g == 0 {
        return Ok(real.clone());
    }
    plan.policy.validate()?;
    if beds.is_empty() {
        return Err(AugmentError::EmptyPool("bed"));
    }

    let mut real_pool: BTreeMap<String, Vec<DefectPatch>> = BTreeMap::new();
    if plan.real_fraction > 0.0 {
        for img in &real.images {
            if img.annotations.is_empty() {
                continue;
            }
            for mut p in extract_patches(img, plan.pad)? {
                if plan.segment_real {
                    p.mask = generated_mask(&p.pixels);
                }
                real_pool.entry(p.class_label.clone()).or_default().push(p);
            }
        }
    }
    let mut generated: BTreeMap<String, Vec<DefectPatch>> = BTreeMap::new();
    if plan.real_fraction < 1.0 {
        for (i, (class, gen)) in generators.iter().enumerate() {
            let seed = derive_seed(plan.seed, "augment/generated-pool", i as u64);
            let mut patches = synthesize_patches(gen, plan.generated_per_class, seed, plan.postprocess)?;
            for p in &mut patches {
                p.class_label = class.clone();
            }
            generated.insert(class.clone(), patches);
        }
    }

    let weights: Vec<(String, f64)> = if plan.class_mix.is_empty() {
        let mut classes: Vec<String> = real_pool.keys().chain(generated.keys()).cloned().collect();
        classes.sort();
        classes.dedup();
        classes.into_iter().map(|c| (c, 1.0)).collect()
    } else {
        plan.class_mix.iter().filter(|(_, &w)| w > 0.0).map(|(c, &w)| (c.clone(), w)).collect()
    };
    if weights.is_empty() {
        return Err(AugmentError::EmptyPool("patch"));
    }
    let mut acc = 0.0;
    let pools = Pools {
        cumulative: weights
            .iter()
            .map(|(_, w)| {
                acc += w;
                acc
            })
            .collect(),
        classes: weights.into_iter().map(|(c, _)| c).collect(),
        real: real_pool,
        generated,
    };

    let first_id = real.next_image_id();
    let samples: Vec<_> = (0..plan.m_g)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(plan.seed, "augment/image", i as u64);
            let mut rng = rng_for(seed, "augment/sample", 0);
            let bed = &beds[rng.random_range(0..beds.len())];
            let [lo, hi] = plan.policy.defects_per_bed;
            let k = rng.random_range(lo..=hi);
            let mut chosen = Vec::with_capacity(k);
            for _ in 0..k {
                let class = pools.pick_class(&mut rng);
                chosen.push(pools.pick_patch(class, plan.real_fraction, &mut rng)?);
            }
            let sizes: Vec<(usize, usize)> = chosen.iter().map(|p| (p.width(), p.height())).collect();
            let placements = place(bed.pixels.width(), bed.pixels.height(), &sizes, &plan.policy, &mut rng)?;
            let mut s = compose(bed, &chosen, &placements, seed)?;
            let id = first_id + i as u64;
            s.image.id = id;
            s.image.file = format!("{}/{id:06}.png", plan.file_prefix);
            s.provenance.image_id = id;
            Ok(s)
        })
        .collect::<Result<_, AugmentError>>()?;

    let mut out = real.clone();
    for s in samples {
        for a in &s.image.annotations {
            if !out.classes.contains(&a.class_label) {
                out.classes.push(a.class_label.clone());
            }
        }
        out.images.push(s.image);
        out.provenance.push(s.provenance);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{AnnotatedImage, Annotation, BoundingBox};
    use crate::raster::GrayImage;
    use std::sync::Arc;

    fn real() -> DatasetManifest {
        let mut m = DatasetManifest::new(vec!["a".into(), "b".into()]);
        for id in 0..4u64 {
            let class = if id % 2 == 0 { "a" } else { "b" };
            m.images.push(AnnotatedImage {
                id,
                file: format!("{id}.png"),
                width: 24,
                height: 24,
                annotations: vec![Annotation {
                    class_label: class.into(),
                    bbox: BoundingBox::new(2, 2, 6, 5).unwrap(),
                }],
                pixels: Some(Arc::new(GrayImage::filled(24, 24, 0.1 * id as f64))),
            });
        }
        m
    }

    fn beds() -> Vec<ImageBed> {
        vec![ImageBed {
            pixels: Arc::new(GrayImage::filled(40, 40, 0.5)),
            source_id: "bed0".into(),
        }]
    }

    #[test]
    fn zero_m_g_is_identity() {
        let r = real();
        let out = build_augmented_dataset(&r, &[], &BTreeMap::new(), &AugmentPlan::default()).unwrap();
        assert_eq!(out, r);
    }

    #[test]
    fn appends_exactly_m_g_with_provenance() {
        let plan = AugmentPlan {
            m_g: 40,
            real_fraction: 1.0,
            seed: 3,
            ..AugmentPlan::default()
        };
        let r = real();
        let out = build_augmented_dataset(&r, &beds(), &BTreeMap::new(), &plan).unwrap();
        assert_eq!(out.images.len(), 44);
        assert_eq!(out.provenance.len(), 40);
        out.validate().unwrap();
        for (img, prov) in out.images[4..].iter().zip(&out.provenance) {
            assert_eq!(img.id, prov.image_id);
            assert_eq!(img.annotations.len(), prov.placements.len());
            assert!((1..=3).contains(&img.annotations.len()));
        }
        let again = build_augmented_dataset(&r, &beds(), &BTreeMap::new(), &plan).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn class_mix_is_respected() {
        let plan = AugmentPlan {
            m_g: 30,
            real_fraction: 1.0,
            class_mix: [("b".to_string(), 1.0)].into_iter().collect(),
            ..AugmentPlan::default()
        };
        let out = build_augmented_dataset(&real(), &beds(), &BTreeMap::new(), &plan).unwrap();
        assert!(out.images[4..].iter().flat_map(|i| &i.annotations).all(|a| a.class_label == "b"));
        let missing = AugmentPlan {
            class_mix: [("zzz".to_string(), 1.0)].into_iter().collect(),
            ..plan
        };
        assert!(matches!(
            build_augmented_dataset(&real(), &beds(), &BTreeMap::new(), &missing),
            Err(AugmentError::NoPatchesForClass(_))
        ));
    }
}
