//! Eight-Gaussian ring benchmark: radius 2, standard deviation 0.02.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{GanConfig, GanError, GanTrainer, GeneratorNet, NoiseSampler, OutputActivation};
use crate::seed::rng_for;

pub const RADIUS: f64 = 2.0;
pub const SIGMA: f64 = 0.02;
pub const MODES: usize = 8;

pub fn centers() -> [[f64; 2]; MODES] {
    std::array::from_fn(|k| {
        let a = 2.0 * PI * k as f64 / MODES as f64;
        [RADIUS * a.cos(), RADIUS * a.sin()]
    })
}

/// `n` points from the ring mixture with uniform mode weights.
pub fn sample_ring(n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let c = centers();
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..MODES);
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            vec![c[k][0] + SIGMA * dx, c[k][1] + SIGMA * dy]
        })
        .collect()
}

/// Points within `3σ` of each center.
pub fn mode_counts(points: &[Vec<f64>]) -> [usize; MODES] {
    let c = centers();
    let mut counts = [0; MODES];
    for p in points {
        for (k, ck) in c.iter().enumerate() {
            if (p[0] - ck[0]).hypot(p[1] - ck[1]) <= 3.0 * SIGMA {
                counts[k] += 1;
            }
        }
    }
    counts
}

/// Modes holding at least 1% of `points`.
pub fn modes_covered(points: &[Vec<f64>]) -> usize {
    let need = points.len().div_ceil(100);
    mode_counts(points).iter().filter(|&&c| c >= need).count()
}

/// Training setup for the ring, keeping the penalty defaults.
pub fn ring_config(seed: u64, iterations: usize) -> GanConfig {
    GanConfig {
        z_dim: 2,
        patch_h: 1,
        patch_w: 2,
        batch_size: 64,
        gen_hidden: vec![64, 64],
        critic_hidden: vec![64, 64],
        output: OutputActivation::Linear,
        adam_alpha: 1e-3,
        adam_alpha_gen: Some(3e-4),
        adam_beta1: 0.5,
        adam_beta2: 0.9,
        iterations,
        seed,
        ..GanConfig::default()
    }
}

/// Real training points for `ring_config`.
pub fn ring_dataset(seed: u64, n: usize) -> Vec<Vec<f64>> {
    sample_ring(n, &mut rng_for(seed, "toy/ring", 0))
}

/// `n` generator samples.
pub fn generate_points(gen: &GeneratorNet, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, GanError> {
    let z = NoiseSampler::new(gen.z_dim(), rng_for(seed, "toy/eval", 0)).sample(n);
    let out = gen.generate(&z)?;
    Ok((0..n).map(|i| out.row(i).to_vec()).collect())
}

/// Result of [`train_ring`].
#[derive(Debug, Clone, PartialEq)]
pub struct RingOutcome {
    /// Generator steps taken when training stopped.
    pub steps: usize,
    /// Modes covered by 2000 samples at the last checkpoint.
    pub modes: usize,
    /// `(step, modes)` at every checkpoint.
    pub checkpoints: Vec<(usize, usize)>,
}

/// Trains on the ring, checking mode coverage of 2000 samples every
/// `check_every` generator steps. Stops at the first checkpoint reaching
/// `target_modes` or after `max_steps`.
pub fn train_ring(seed: u64, max_steps: usize, check_every: usize, target_modes: usize) -> Result<RingOutcome, GanError> {
    let data = ring_dataset(seed, 4096);
    let mut trainer = GanTrainer::new(ring_config(seed, max_steps), &data)?;
    let every = check_every.max(1);
    let mut checkpoints = Vec::new();
    let mut modes = 0;
    let mut steps = 0;
    while steps < max_steps {
        let chunk = every.min(max_steps - steps);
        for _ in 0..chunk {
            trainer.step()?;
        }
        steps += chunk;
        modes = modes_covered(&generate_points(&trainer.generator, 2000, seed)?);
        checkpoints.push((steps, modes));
        if modes >= target_modes {
            break;
        }
    }
    Ok(RingOutcome {
        steps,
        modes,
        checkpoints,
    })
}
