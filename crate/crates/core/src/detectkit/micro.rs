use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::ImageBed;
use crate::datakit::{AnnotatedImage, Annotation, BoundingBox, DatasetManifest};
use crate::raster::GrayImage;
use crate::seed::rng_for;

pub const SHAPE_CLASSES: [&str; 3] = ["square", "disk", "cross"];

/// Layout of the synthetic shape dataset: textured gray images with one
/// bright shape each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesSpec {
    pub image_size: u32,
    /// Images generated per class.
    pub per_class: usize,
    /// Defect-free images returned alongside the dataset.
    pub beds: usize,
    pub min_side: u32,
    pub max_side: u32,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    pub first_id: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            image_size: 48,
            per_class: 30,
            beds: 40,
            min_side: 10,
            max_side: 15,
            noise: 0.03,
            first_id: 0,
        }
    }
}

fn texture(size: u32, noise: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let n = size as usize;
    let base = rng.random_range(0.3..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.04..0.08),
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let normal = Normal::new(0.0, noise).expect("finite noise level");
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let mut v = base;
            for &(amp, fx, fy, phase) in &waves {
                v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
            }
            data.push((v + normal.sample(rng)).clamp(0.0, 1.0));
        }
    }
    GrayImage::new(n, n, data).expect("square buffer")
}

fn inside(class: &str, dx: f64, dy: f64, side: f64) -> bool {
    let r = side / 2.0;
    match class {
        "square" => true,
        "disk" => dx * dx + dy * dy <= r * r,
        _ => dx.abs() <= side / 6.0 || dy.abs() <= side / 6.0,
    }
}

fn draw(img: &mut GrayImage, class: &str, b: BoundingBox, contrast: f64) {
    let side = f64::from(b.w);
    let c = f64::from(b.w) / 2.0 - 0.5;
    for j in 0..b.h {
        for i in 0..b.w {
            if inside(class, f64::from(i) - c, f64::from(j) - c, side) {
                let (x, y) = ((b.x + i) as usize, (b.y + j) as usize);
                img.set(x, y, (img.get(x, y) + contrast).min(1.0));
            }
        }
    }
}

/// Generates `per_class` images of every shape class plus `spec.beds`
/// defect-free beds. Image ids start at `first_id` and files are named
/// `shapes/{id:05}.png`; pixels stay in memory.
pub fn shapes_dataset(spec: &ShapesSpec, seed: u64) -> (DatasetManifest, Vec<ImageBed>) {
    let mut m = DatasetManifest::new(SHAPE_CLASSES.iter().map(|c| c.to_string()).collect());
    let size = spec.image_size;
    for k in 0..spec.per_class * SHAPE_CLASSES.len() {
        let class = SHAPE_CLASSES[k % SHAPE_CLASSES.len()];
        let id = spec.first_id + k as u64;
        let mut rng = rng_for(seed, "shapes/image", k as u64);
        let mut img = texture(size, spec.noise, &mut rng);
        let side = rng.random_range(spec.min_side..=spec.max_side).min(size);
        let x = rng.random_range(0..=size - side);
        let y = rng.random_range(0..=size - side);
        let bbox = BoundingBox { x, y, w: side, h: side };
        draw(&mut img, class, bbox, rng.random_range(0.25..0.35));
        m.images.push(AnnotatedImage {
            id,
            file: format!("shapes/{id:05}.png"),
            width: size,
            height: size,
            annotations: vec![Annotation {
                class_label: class.to_string(),
                bbox,
            }],
            pixels: Some(Arc::new(img)),
        });
    }
    let beds = (0..spec.beds)
        .map(|i| ImageBed {
            pixels: Arc::new(texture(size, spec.noise, &mut rng_for(seed, "shapes/bed", i as u64))),
            source_id: format!("bed-{i}"),
        })
        .collect();
    (m, beds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_valid() {
        let spec = ShapesSpec {
            per_class: 4,
            beds: 3,
            ..ShapesSpec::default()
        };
        let (m, beds) = shapes_dataset(&spec, 5);
        m.validate().unwrap();
        assert_eq!(m.len(), 12);
        assert!(m.image_counts().values().all(|&c| c == 4));
        assert_eq!(beds.len(), 3);
        let (again, _) = shapes_dataset(&spec, 5);
        assert_eq!(m, again);
    }

    #[test]
    fn shapes_are_brighter_than_background() {
        let (m, _) = shapes_dataset(&ShapesSpec::default(), 1);
        for img in m.images.iter().take(9) {
            let b = img.annotations[0].bbox;
            let px = img.pixels().unwrap();
            let cx = (b.x + b.w / 2) as usize;
            let cy = (b.y + b.h / 2) as usize;
            let mean: f64 = px.data().iter().sum::<f64>() / px.data().len() as f64;
            assert!(px.get(cx, cy) > mean + 0.1);
        }
    }
}
