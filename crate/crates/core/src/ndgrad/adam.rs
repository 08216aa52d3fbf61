use super::{GradError, ParamSet};

/// Adam step size and decay rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), GradError> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    params.check_compatible(&state.v)?;

    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);

    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.alpha * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Array;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("theta", Array::scalar(v)).unwrap();
        p
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = single(0.0);
        let g = single(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        // m_hat = v_hat = 1 on the first step
        let expected = -0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("theta").unwrap().data()[0] - expected).abs() < 1e-18);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.75);
        let g = single(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("theta").unwrap().data()[0], 0.75);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut p = single(0.3);
            let g = single(-0.42);
            let mut st = AdamState::new(&p);
            for _ in 0..2 {
                adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            p.get("theta").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn name_mismatch() {
        let mut p = single(0.0);
        let mut g = ParamSet::new();
        g.insert("other", Array::scalar(1.0)).unwrap();
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::default()),
            Err(GradError::NameMismatch(_))
        ));
    }
}
