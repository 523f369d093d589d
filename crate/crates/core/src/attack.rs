//! l∞ FGSM and PGD against a [`Model`], always with BatchNorm in eval mode.

use serde::{Deserialize, Serialize};

use crate::diffnet::{backward_input, Mode, Model};
use crate::error::{argument, Error, Result};
use crate::numcore::{sign, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub step_size: f32,
    pub steps: usize,
    pub random_start: bool,
    pub input_lo: f32,
    pub input_hi: f32,
}

impl Default for AttackConfig {
    /// PGD-10 with ε = 8/255 and step 2/255 on `[0, 1]` pixels.
    fn default() -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            random_start: true,
            input_lo: 0.0,
            input_hi: 1.0,
        }
    }
}

impl AttackConfig {
    /// Single signed-gradient step of size ε.
    pub fn fgsm(epsilon: f32, input_lo: f32, input_hi: f32) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            input_lo,
            input_hi,
        }
    }

    /// Same attack with a different step count, keeping `step_size`.
    pub fn with_steps(self, steps: usize) -> Self {
        AttackConfig { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(argument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(argument(format!(
                "step_size must be >= 0, got {}",
                self.step_size
            )));
        }
        if self.steps == 0 {
            return Err(argument("steps must be >= 1"));
        }
        if !(self.input_lo < self.input_hi) {
            return Err(argument(format!(
                "input range [{}, {}] is empty",
                self.input_lo, self.input_hi
            )));
        }
        Ok(())
    }
}

/// Gradient of the mean cross-entropy with respect to the input, eval-mode BN.
pub fn input_gradient(model: &Model, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let f = model.forward(x, Mode::Eval)?;
    backward_input(&f.cache, labels)
}

/// `clamp(x + ε·sign(∇ₓℓ), lo, hi)`.
pub fn fgsm(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let g = sign(&input_gradient(model, x, labels)?);
    let eps = cfg.epsilon;
    let (lo, hi) = (cfg.input_lo, cfg.input_hi);
    x.zip_map(&g, |xv, s| (xv + eps * s).max(lo).min(hi))
}

/// Projected gradient ascent in the l∞ ball of radius ε around `x`,
/// intersected with `[input_lo, input_hi]`.
///
/// `rng` is only drawn from when `cfg.random_start` is set.
pub fn pgd(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut RngState,
) -> Result<Tensor> {
    cfg.validate()?;
    let (lo, hi) = (cfg.input_lo, cfg.input_hi);
    let eps = cfg.epsilon;
    let lower = x.map(|v| v - eps);
    let upper = x.map(|v| v + eps);
    let project = |t: &Tensor| -> Result<Tensor> {
        let ball = t.zip_map(&lower, f32::max)?.zip_map(&upper, f32::min)?;
        Ok(ball.map(|v| v.max(lo).min(hi)))
    };

    let mut adv = if cfg.random_start {
        let delta = rng.uniform_tensor(x.shape(), -eps, eps);
        project(&x.add(&delta)?)?
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        let g = sign(&input_gradient(model, &adv, labels)?);
        let step = cfg.step_size;
        let moved = adv.zip_map(&g, |a, s| a + step * s)?;
        adv = project(&moved)?;
    }
    Ok(adv)
}

/// Largest `|a − b|` over all elements.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            context: "linf distance",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .fold(0f32, |m, (&x, &y)| m.max((x - y).abs())))
}
