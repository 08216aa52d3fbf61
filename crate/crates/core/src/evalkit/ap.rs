use serde::{Deserialize, Serialize};

use super::EvalError;

/// Area summary applied to the precision-recall points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// `sum_k P(k) * (r(k) - r(k-1))` over the ranked list, no interpolation.
    #[default]
    Raw,
    /// PASCAL VOC 2007 11-point interpolation.
    Voc11,
    /// All-point interpolation under the monotone precision envelope.
    Envelope,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub delta_recall: f64,
}

/// Precision-recall points for a ranked list of TP/FP flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub num_gt: usize,
}

impl PrCurve {
    pub fn from_flags(flags: &[bool], num_gt: usize) -> Result<Self, EvalError> {
        if num_gt == 0 {
            return Err(EvalError::NoGroundTruth);
        }
        let mut tp = 0usize;
        let mut prev_recall = 0.0;
        let mut points = Vec::with_capacity(flags.len());
        for (i, &hit) in flags.iter().enumerate() {
            if hit {
                tp += 1;
            }
            let k = i + 1;
            let precision = tp as f64 / k as f64;
            let recall = tp as f64 / num_gt as f64;
            points.push(PrPoint {
                k,
                precision,
                recall,
                delta_recall: recall - prev_recall,
            });
            prev_recall = recall;
        }
        Ok(Self { points, num_gt })
    }

    pub fn area(&self, method: ApMethod) -> f64 {
        match method {
            ApMethod::Raw => self
                .points
                .iter()
                .fold(0.0, |acc, p| acc + p.precision * p.delta_recall),
            ApMethod::Voc11 => {
                (0..=10)
                    .map(|t| {
                        let r = f64::from(t) / 10.0;
                        self.points
                            .iter()
                            .filter(|p| p.recall >= r)
                            .map(|p| p.precision)
                            .fold(0.0, f64::max)
                    })
                    .sum::<f64>()
                    / 11.0
            }
            ApMethod::Envelope => {
                let mut env: Vec<f64> = self.points.iter().map(|p| p.precision).collect();
                for i in (0..env.len().saturating_sub(1)).rev() {
                    env[i] = env[i].max(env[i + 1]);
                }
                self.points
                    .iter()
                    .zip(env)
                    .fold(0.0, |acc, (p, e)| acc + e * p.delta_recall)
            }
        }
    }
}

/// Uninterpolated AP of a ranked TP/FP list.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Result<f64, EvalError> {
    average_precision_with(flags, num_gt, ApMethod::Raw)
}

pub fn average_precision_with(flags: &[bool], num_gt: usize, method: ApMethod) -> Result<f64, EvalError> {
    Ok(PrCurve::from_flags(flags, num_gt)?.area(method))
}

pub fn mean_ap(aps: &[f64]) -> Result<f64, EvalError> {
    if aps.is_empty() {
        return Err(EvalError::EmptyClassSet);
    }
    Ok(aps.iter().fold(0.0, |acc, a| acc + a) / aps.len() as f64)
}
