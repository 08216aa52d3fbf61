use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{critic_loss, generator_loss, interpolate_rows, CriticNet, GanConfig, GanError, GeneratorNet};
use crate::ndgrad::{adam_step, collect_grads, grad, AdamState, Array, Tape, Tensor};
use crate::seed::rng_for;

/// Uniform draws, with replacement, from the real patch set.
#[derive(Debug, Clone)]
pub struct RealSampler {
    data: Array,
    rng: ChaCha8Rng,
    draws: usize,
}

impl RealSampler {
    pub fn new(data: Array, rng: ChaCha8Rng) -> Self {
        Self { data, rng, draws: 0 }
    }

    pub fn sample(&mut self, m: usize) -> Array {
        let n = self.data.shape()[0];
        let d = self.data.len() / n;
        let mut out = Vec::with_capacity(m * d);
        for _ in 0..m {
            let i = self.rng.random_range(0..n);
            out.extend_from_slice(self.data.row(i));
        }
        self.draws += m;
        Array::new(vec![m, d], out).expect("batch shape")
    }

    /// Rows drawn so far.
    pub fn draws(&self) -> usize {
        self.draws
    }
}

/// Standard normal noise batches.
#[derive(Debug, Clone)]
pub struct NoiseSampler {
    z_dim: usize,
    rng: ChaCha8Rng,
    draws: usize,
}

impl NoiseSampler {
    pub fn new(z_dim: usize, rng: ChaCha8Rng) -> Self {
        Self { z_dim, rng, draws: 0 }
    }

    pub fn sample(&mut self, m: usize) -> Array {
        let data = (0..m * self.z_dim).map(|_| self.rng.sample(StandardNormal)).collect();
        self.draws += m;
        Array::new(vec![m, self.z_dim], data).expect("noise shape")
    }

    pub fn draws(&self) -> usize {
        self.draws
    }
}

/// Losses of one generator step; critic columns average its `n_critic` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss_d: f64,
    pub loss_g: f64,
    pub penalty: f64,
    pub w_estimate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub records: Vec<LossRecord>,
}

impl LossReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss_d,loss_g,penalty,w_estimate\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss_d, r.loss_g, r.penalty, r.w_estimate
            ));
        }
        s
    }
}

/// Training state for one generator/critic pair.
#[derive(Debug, Clone)]
pub struct GanTrainer {
    pub config: GanConfig,
    pub generator: GeneratorNet,
    pub critic: CriticNet,
    gen_state: AdamState,
    critic_state: AdamState,
    pub real: RealSampler,
    pub noise: NoiseSampler,
    delta_rng: ChaCha8Rng,
    pub report: LossReport,
}

impl GanTrainer {
    /// `patches` are flattened row-major, `patch_h * patch_w` values each.
    pub fn new(config: GanConfig, patches: &[Vec<f64>]) -> Result<Self, GanError> {
        config.validate()?;
        if patches.is_empty() {
            return Err(GanError::EmptyDataset);
        }
        let d = config.patch_len();
        let mut flat = Vec::with_capacity(patches.len() * d);
        for (index, p) in patches.iter().enumerate() {
            if p.len() != d {
                return Err(GanError::PatchShape {
                    index,
                    expected: d,
                    got: p.len(),
                });
            }
            flat.extend_from_slice(p);
        }
        let data = Array::new(vec![patches.len(), d], flat)?;
        let seed = config.seed;
        let generator = GeneratorNet::init(
            config.z_dim,
            &config.gen_hidden,
            config.patch_h,
            config.patch_w,
            config.output,
            &mut rng_for(seed, "gpwgan/init-generator", 0),
        );
        let critic = CriticNet::init(d, &config.critic_hidden, &mut rng_for(seed, "gpwgan/init-critic", 0));
        Ok(Self {
            gen_state: AdamState::new(&generator.mlp.params),
            critic_state: AdamState::new(&critic.mlp.params),
            real: RealSampler::new(data, rng_for(seed, "gpwgan/real", 0)),
            noise: NoiseSampler::new(config.z_dim, rng_for(seed, "gpwgan/noise", 0)),
            delta_rng: rng_for(seed, "gpwgan/delta", 0),
            report: LossReport::default(),
            generator,
            critic,
            config,
        })
    }

    fn critic_update(&mut self) -> Result<(f64, f64, f64), GanError> {
        let m = self.config.batch_size;
        let x = self.real.sample(m);
        let z = self.noise.sample(m);
        let x_fake = self.generator.generate(&z)?;
        let deltas: Vec<f64> = (0..m).map(|_| self.delta_rng.random::<f64>()).collect();
        let x_hat = interpolate_rows(&x, &x_fake, &deltas)?;

        let tape = Tape::new();
        let critic = self.critic.mlp.bind(&tape);
        let x_hat = tape.leaf(x_hat);
        let parts = critic_loss(
            &critic,
            &Tensor::constant(x),
            &Tensor::constant(x_fake),
            &x_hat,
            self.config.lambda,
        )?;
        let grads = grad(&parts.loss, &critic.params(), false)?;
        let grads = collect_grads(&self.critic.mlp.params, grads)?;
        adam_step(&mut self.critic.mlp.params, &grads, &mut self.critic_state, &self.config.adam(self.report.records.len()))?;
        Ok((
            parts.loss.value().data()[0],
            parts.penalty.value().data()[0],
            parts.wasserstein_estimate,
        ))
    }

    fn generator_update(&mut self) -> Result<f64, GanError> {
        let z = self.noise.sample(self.config.batch_size);
        let tape = Tape::new();
        let gen = self.generator.mlp.bind(&tape);
        let x_fake = gen.forward(&Tensor::constant(z))?;
        let loss = generator_loss(&self.critic.mlp.constants(), &x_fake)?;
        let grads = grad(&loss, &gen.params(), false)?;
        let grads = collect_grads(&self.generator.mlp.params, grads)?;
        adam_step(&mut self.generator.mlp.params, &grads, &mut self.gen_state, &self.config.adam_gen(self.report.records.len()))?;
        Ok(loss.value().data()[0])
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn step(&mut self) -> Result<LossRecord, GanError> {
        let n = self.config.n_critic as f64;
        let (mut loss_d, mut penalty, mut w) = (0.0, 0.0, 0.0);
        for _ in 0..self.config.n_critic {
            let (l, p, e) = self.critic_update()?;
            loss_d += l;
            penalty += p;
            w += e;
        }
        let loss_g = self.generator_update()?;
        let record = LossRecord {
            step: self.report.records.len(),
            loss_d: loss_d / n,
            loss_g,
            penalty: penalty / n,
            w_estimate: w / n,
        };
        self.report.records.push(record);
        Ok(record)
    }

    /// Runs the remaining generator steps of the budget.
    pub fn run(&mut self) -> Result<(), GanError> {
        while self.report.records.len() < self.config.iterations {
            let r = self.step()?;
            if r.step % 500 == 0 {
                log::debug!(
                    "step {} loss_d {:.4} loss_g {:.4} w {:.4}",
                    r.step,
                    r.loss_d,
                    r.loss_g,
                    r.w_estimate
                );
            }
        }
        Ok(())
    }
}

/// Trains a generator on `patches` for `config.iterations` generator steps.
pub fn train_gpwgan(config: GanConfig, patches: &[Vec<f64>]) -> Result<(GeneratorNet, LossReport), GanError> {
    let mut trainer = GanTrainer::new(config, patches)?;
    trainer.run()?;
    Ok((trainer.generator, trainer.report))
}
