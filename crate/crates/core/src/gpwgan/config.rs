use serde::{Deserialize, Serialize};

use super::GanError;
use crate::ndgrad::AdamConfig;

/// How the generator's last layer maps to pixel values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    /// `(tanh(h) + 1) / 2`, landing in `[0, 1]`.
    #[default]
    TanhUnit,
    Linear,
}

/// Step-size schedule over the generator-step budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `α · (1 − step / iterations)` for both networks.
    Linear,
}

/// Training hyperparameters. Keys match the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub lambda: f64,
    pub n_critic: usize,
    pub batch_size: usize,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub z_dim: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Generator-step budget.
    pub iterations: usize,
    pub seed: u64,
    pub gen_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub output: OutputActivation,
    pub lr_schedule: LrSchedule,
    /// Generator step size when it should differ from the critic's `adam_alpha`.
    pub adam_alpha_gen: Option<f64>,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            n_critic: 5,
            batch_size: 64,
            adam_alpha: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            z_dim: 64,
            patch_h: 32,
            patch_w: 32,
            iterations: 2000,
            seed: 0,
            gen_hidden: vec![128, 256],
            critic_hidden: vec![256, 128],
            output: OutputActivation::TanhUnit,
            lr_schedule: LrSchedule::Constant,
            adam_alpha_gen: None,
        }
    }
}

impl GanConfig {
    pub fn from_toml(text: &str) -> Result<Self, GanError> {
        let cfg: Self = toml::from_str(text).map_err(|e| GanError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w
    }

    /// Critic Adam settings during generator step `step`.
    pub fn adam(&self, step: usize) -> AdamConfig {
        self.adam_with(self.adam_alpha, step)
    }

    /// Generator Adam settings during generator step `step`.
    pub fn adam_gen(&self, step: usize) -> AdamConfig {
        self.adam_with(self.adam_alpha_gen.unwrap_or(self.adam_alpha), step)
    }

    fn adam_with(&self, alpha: f64, step: usize) -> AdamConfig {
        let scale = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Linear => 1.0 - step as f64 / self.iterations.max(1) as f64,
        };
        AdamConfig {
            alpha: alpha * scale.max(0.0),
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GanError> {
        let bad = |m: &str| Err(GanError::ConfigInvalid(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite value >= 0");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        let gen_alpha = self.adam_alpha_gen.unwrap_or(self.adam_alpha);
        if !(self.adam_alpha > 0.0 && self.adam_alpha.is_finite() && gen_alpha > 0.0 && gen_alpha.is_finite()) {
            return bad("adam_alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.z_dim == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return bad("z_dim and patch extents must be positive");
        }
        if self.gen_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = GanConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda, c.n_critic, c.adam_alpha, c.adam_beta1, c.adam_beta2), (10.0, 5, 1e-4, 0.0, 0.9));
        assert_eq!(GanConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_and_bad_values() {
        let c = GanConfig::from_toml("n_critic = 3\npatch_h = 16\n").unwrap();
        assert_eq!((c.n_critic, c.patch_h, c.patch_w), (3, 16, 32));
        for text in ["n_critic = 0", "lambda = -1.0", "adam_beta2 = 1.0", "batch_size = 0", "typo = 1"] {
            assert!(matches!(GanConfig::from_toml(text), Err(GanError::ConfigInvalid(_))), "{text}");
        }
    }
}
