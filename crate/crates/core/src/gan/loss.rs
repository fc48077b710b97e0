//! Wasserstein critic/generator objectives and the gradient penalty.
//!
//! The critic minimizes `E[D(fake)] - E[D(real)] + λ E[(‖∇D(ŷ)‖₂ - 1)²]`
//! where `ŷ` interpolates between paired real and generated images; the
//! generator minimizes `-E[D(fake)]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanLossConfig {
    pub lambda_gp: f64,
    /// Weight of `E[D(real)²]`, keeping scores near zero.
    pub drift_epsilon: f64,
}

impl Default for GanLossConfig {
    fn default() -> Self {
        Self {
            lambda_gp: 10.0,
            drift_epsilon: 0.0,
        }
    }
}

fn nonempty(t: &Tensor, what: &str) -> Result<()> {
    if t.numel() == 0 {
        Err(Error::Shape(format!("{what} batch is empty")))
    } else {
        Ok(())
    }
}

/// `mean(fake) - mean(real) + gp`.
pub fn critic_loss(real_scores: &Tensor, fake_scores: &Tensor, gp: &Tensor) -> Result<Tensor> {
    nonempty(real_scores, "real")?;
    nonempty(fake_scores, "fake")?;
    Ok(fake_scores.mean(fake_scores.kind()) - real_scores.mean(real_scores.kind()) + gp)
}

/// `-mean(fake)`.
pub fn generator_loss(fake_scores: &Tensor) -> Result<Tensor> {
    nonempty(fake_scores, "fake")?;
    Ok(-fake_scores.mean(fake_scores.kind()))
}

/// Per-sample interpolation weights, uniform in `[0, 1]`, shaped
/// `[B,1,1,1]`.
pub fn sample_epsilon(rng: &mut ChaCha8Rng, batch: i64, kind: Kind) -> Tensor {
    let v: Vec<f64> = (0..batch).map(|_| rng.random_range(0.0..=1.0)).collect();
    Tensor::from_slice(&v).view([batch, 1, 1, 1]).to_kind(kind)
}

/// Gradient of the summed critic scores with respect to the image input,
/// kept in the autograd graph so the penalty can be differentiated again.
pub fn input_gradient<F>(critic: F, images: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = images.detach().set_requires_grad(true);
    let scores = critic(&x)?;
    let mut grads = Tensor::f_run_backward(&[scores.sum(scores.kind())], &[&x], true, true)?;
    Ok(grads.remove(0))
}

/// `λ · mean_i (‖∇ D(ŷ_i)‖₂ − 1)²` with `ŷ = ε·real + (1−ε)·fake`.
///
/// `critic` closes over the conditioning masks; only the image channel is
/// interpolated and differentiated. `real` and `fake` must be aligned so that
/// row `i` of both shares a mask.
pub fn gradient_penalty<F>(critic: F, real: &Tensor, fake: &Tensor, lambda: f64, epsilon: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if real.size() != fake.size() {
        return Err(Error::Shape(format!(
            "real {:?} and fake {:?} batches are not aligned",
            real.size(),
            fake.size()
        )));
    }
    let mixed = epsilon * real.detach() + (1.0 - epsilon) * fake.detach();
    let grad = input_gradient(critic, &mixed)?;
    let norm = grad.flatten(1, -1).norm_scalaropt_dim(2.0, [1i64].as_slice(), false);
    Ok((norm - 1.0).square().mean(real.kind()) * lambda)
}
