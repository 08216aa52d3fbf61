use super::{Critic, GanError};
use crate::ndgrad::{grad, Array, ParamSet, Tensor};

fn same_shape(a: &[usize], b: &[usize]) -> Result<(), GanError> {
    if a != b {
        return Err(GanError::ShapeMismatch {
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `δ·x + (1 − δ)·x̃`.
pub fn interpolate(x: &Tensor, x_fake: &Tensor, delta: f64) -> Result<Tensor, GanError> {
    same_shape(x.shape(), x_fake.shape())?;
    if !(0.0..=1.0).contains(&delta) {
        return Err(GanError::DeltaOutOfRange(delta));
    }
    Ok(x.scale(delta)?.add(&x_fake.scale(1.0 - delta)?)?)
}

/// Row-wise interpolation of two `[m, d]` batches with one weight per row.
pub fn interpolate_rows(x: &Array, x_fake: &Array, deltas: &[f64]) -> Result<Array, GanError> {
    same_shape(x.shape(), x_fake.shape())?;
    let m = x.shape()[0];
    same_shape(&[m], &[deltas.len()])?;
    if let Some(&bad) = deltas.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(GanError::DeltaOutOfRange(bad));
    }
    let d = x.len() / m;
    let mut out = Vec::with_capacity(x.len());
    for (i, &delta) in deltas.iter().enumerate() {
        for j in i * d..(i + 1) * d {
            out.push(delta * x.data()[j] + (1.0 - delta) * x_fake.data()[j]);
        }
    }
    Ok(Array::new(x.shape().to_vec(), out)?)
}

/// `λ · mean_i (‖∇_x̂ D(x̂_i)‖₂ − 1)²`.
///
/// `x_hat` must be recorded on a tape. The inner gradient is recorded too, so
/// the result can be differentiated with respect to the critic's parameters.
pub fn gradient_penalty(critic: &dyn Critic, x_hat: &Tensor, lambda: f64) -> Result<Tensor, GanError> {
    let scores = critic.score(x_hat)?;
    same_shape(scores.shape(), &[x_hat.shape()[0], 1])?;
    // Rows are independent, so the gradient of the summed scores holds every
    // per-sample gradient.
    let g = grad(&scores.sum()?, &[x_hat], true)?.remove(0);
    let d = g.shape()[1];
    let ones = Tensor::constant(Array::full(&[d, 1], 1.0));
    let norms = g.square()?.matmul(&ones)?.sqrt()?;
    Ok(norms.add_scalar(-1.0)?.square()?.mean()?.scale(lambda)?)
}

/// Critic objective and its diagnostics.
#[derive(Debug, Clone)]
pub struct CriticLoss {
    /// `mean D(x̃) − mean D(x) + penalty`.
    pub loss: Tensor,
    pub penalty: Tensor,
    /// `mean D(x) − mean D(x̃)`.
    pub wasserstein_estimate: f64,
}

pub fn critic_loss(
    critic: &dyn Critic,
    x: &Tensor,
    x_fake: &Tensor,
    x_hat: &Tensor,
    lambda: f64,
) -> Result<CriticLoss, GanError> {
    same_shape(x.shape(), x_fake.shape())?;
    same_shape(x.shape(), x_hat.shape())?;
    let real = critic.score(x)?.mean()?;
    let fake = critic.score(x_fake)?.mean()?;
    let penalty = gradient_penalty(critic, x_hat, lambda)?;
    let loss = fake.sub(&real)?.add(&penalty)?;
    Ok(CriticLoss {
        wasserstein_estimate: real.value().data()[0] - fake.value().data()[0],
        loss,
        penalty,
    })
}

/// `−mean D(x̃)`.
pub fn generator_loss(critic: &dyn Critic, x_fake: &Tensor) -> Result<Tensor, GanError> {
    Ok(critic.score(x_fake)?.mean()?.neg()?)
}

/// Weight-clipped WGAN critic objective, `mean D(x̃) − mean D(x)`.
pub fn wgan_critic_loss(critic: &dyn Critic, x: &Tensor, x_fake: &Tensor) -> Result<Tensor, GanError> {
    same_shape(x.shape(), x_fake.shape())?;
    Ok(critic.score(x_fake)?.mean()?.sub(&critic.score(x)?.mean()?)?)
}

/// Clamps every parameter to `[-c, c]`, the Lipschitz device of the plain WGAN.
pub fn clip_weights(params: &mut ParamSet, c: f64) {
    for (_, a) in params.iter_mut() {
        for v in a.data_mut() {
            *v = v.clamp(-c, c);
        }
    }
}

fn check_probabilities(t: &Tensor) -> Result<(), GanError> {
    match t.data().iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
        Some(&p) => Err(GanError::DomainError(p)),
        None => Ok(()),
    }
}

/// `−mean ln d_real − mean ln(1 − d_fake)` on post-sigmoid outputs.
pub fn vanilla_gan_discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor, GanError> {
    check_probabilities(d_real)?;
    check_probabilities(d_fake)?;
    let real = d_real.ln()?.mean()?;
    let fake = d_fake.neg()?.add_scalar(1.0)?.ln()?.mean()?;
    Ok(real.add(&fake)?.neg()?)
}

/// Non-saturating generator objective, `−mean ln d_fake`.
pub fn vanilla_gan_generator_loss(d_fake: &Tensor) -> Result<Tensor, GanError> {
    check_probabilities(d_fake)?;
    Ok(d_fake.ln()?.mean()?.neg()?)
}
