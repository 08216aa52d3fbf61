use serde::{Deserialize, Serialize};

use super::{GanError, GeneratorNet, NoiseSampler};
use crate::augment::{generated_mask, DefectPatch};
use crate::datakit::PatchOrigin;
use crate::raster::GrayImage;
use crate::seed::rng_for;

const CHUNK: usize = 256;

/// Pixel clean-up applied to raw generator output. Values are always clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Postprocess {
    /// Stretch each patch's intensities to span `[0, 1]`.
    pub rescale: bool,
}

/// Draws `count` patches from `gen` with Otsu-feathered masks.
pub fn synthesize_patches(
    gen: &GeneratorNet,
    count: usize,
    seed: u64,
    post: Postprocess,
) -> Result<Vec<DefectPatch>, GanError> {
    let mut noise = NoiseSampler::new(gen.z_dim(), rng_for(seed, "gpwgan/synthesize", 0));
    let class = gen.class_label.clone().unwrap_or_else(|| "defect".to_string());
    let (w, h) = (gen.patch_w, gen.patch_h);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let m = CHUNK.min(count - out.len());
        let batch = gen.generate(&noise.sample(m))?;
        for row in 0..m {
            let mut px: Vec<f64> = batch.row(row).iter().map(|v| v.clamp(0.0, 1.0)).collect();
            if post.rescale {
                let lo = px.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi > lo {
                    for v in &mut px {
                        *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
                    }
                }
            }
            let pixels = GrayImage::new(w, h, px).expect("patch shape");
            let mask = generated_mask(&pixels);
            out.push(DefectPatch {
                source: format!("generated:{seed}:{}", out.len()),
                pixels,
                mask,
                class_label: class.clone(),
                origin: PatchOrigin::Generated,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpwgan::OutputActivation;

    fn wild_generator() -> GeneratorNet {
        let mut g = GeneratorNet::init(4, &[8], 3, 4, OutputActivation::Linear, &mut rng_for(5, "t", 0));
        for (_, a) in g.mlp.params.iter_mut() {
            for v in a.data_mut() {
                *v *= 40.0;
            }
        }
        g
    }

    #[test]
    fn count_shape_and_determinism() {
        let g = wild_generator();
        let a = synthesize_patches(&g, 3, 9, Postprocess::default()).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|p| p.pixels.width() == 4 && p.pixels.height() == 3));
        let b = synthesize_patches(&g, 3, 9, Postprocess::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_range_is_clamped() {
        let g = wild_generator();
        for post in [Postprocess { rescale: false }, Postprocess { rescale: true }] {
            let ps = synthesize_patches(&g, 1000, 1, post).unwrap();
            let (lo, hi) = ps.iter().flat_map(|p| p.pixels.data()).fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(lo >= 0.0 && hi <= 1.0, "{lo} {hi}");
            assert!(ps.iter().all(|p| p.origin == PatchOrigin::Generated));
        }
    }
}
