//! Noise schedules and DDPM/DDIM transitions.
//!
//! Timesteps run `0..=T`. Index 0 is clean data with `alpha_bar(0) = 1`;
//! step `t >= 1` has its own `beta(t)` and `alpha_bar(t) = alpha_bar(t-1) * (1 - beta(t))`.
//!
//! The deterministic DDIM map used throughout is
//!
//! ```text
//! x_{t-1} = sqrt(ab_{t-1}) * (x_t - s_t * eps) / sqrt(ab_t) + s_{t-1} * eps,   s_t = sqrt(1 - ab_t)
//! ```
//!
//! with `ab` the cumulative product. [`recover_noise`] solves that map for
//! `eps` given both endpoints, which is what lets latent-space samplers be
//! calibrated in noise space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, SeededRng, Vector};

/// Absolute guard on the denominator of [`recover_noise`].
pub const DEGENERATE_TRANSITION_EPS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear-beta schedule over `steps` steps.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Schedule from explicit per-step betas; `betas[0]` is `beta(1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("step count must be at least 1".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub(crate) fn check_step(&self, t: usize, min: usize, max: usize) -> Result<()> {
        if t < min || t > max {
            return Err(Error::TimestepOutOfRange { t, min, max });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub x: Vector,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vector, t: usize) -> Self {
        Self { x, t }
    }
}

/// Mean of the DDPM ancestral step, i.e. the step with `sigma_t = 0`.
pub fn ddpm_mean(state: &LatentState, eps: &[f64], sched: &NoiseSchedule) -> Result<Vector> {
    let t = state.t;
    sched.check_step(t, 1, sched.steps())?;
    check_dims(&state.x, eps)?;
    let beta = sched.beta(t);
    let k = beta / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    Ok(state
        .x
        .iter()
        .zip(eps)
        .map(|(x, e)| (x - k * e) * inv_sqrt_alpha)
        .collect::<Vec<_>>()
        .into())
}

/// One DDPM ancestral step with `sigma_t = sqrt(beta_t)`.
pub fn ddpm_step(state: &LatentState, eps: &[f64], sched: &NoiseSchedule, rng: &mut SeededRng) -> Result<LatentState> {
    let mut x = ddpm_mean(state, eps, sched)?;
    let sigma = sched.beta(state.t).sqrt();
    for v in x.iter_mut() {
        *v += sigma * rng.standard_normal();
    }
    Ok(LatentState::new(x, state.t - 1))
}

/// Deterministic DDIM move from cumulative level `ab_from` to `ab_to` with a fixed noise estimate.
///
/// Both [`ddim_step`] (towards data) and [`ddim_invert_step`] (towards noise)
/// are this map; they differ only in which level is the source.
pub fn ddim_transition(x: &[f64], eps: &[f64], ab_from: f64, ab_to: f64) -> Result<Vector> {
    check_dims(x, eps)?;
    let (ratio, gain) = transition_coefficients(ab_from, ab_to);
    Ok(x.iter()
        .zip(eps)
        .map(|(x, e)| ratio.mul_add(*x, gain * e))
        .collect::<Vec<_>>()
        .into())
}

/// `x_to = ratio * x_from + gain * eps`. Shared with [`recover_noise_between`] so
/// the inverse sees exactly the same coefficients.
fn transition_coefficients(ab_from: f64, ab_to: f64) -> (f64, f64) {
    let ratio = (ab_to / ab_from).sqrt();
    let gain = (1.0 - ab_to).sqrt() - ratio * (1.0 - ab_from).sqrt();
    (ratio, gain)
}

pub fn ddim_step(state: &LatentState, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    let t = state.t;
    sched.check_step(t, 1, sched.steps())?;
    let x = ddim_transition(&state.x, eps, sched.alpha_bar(t), sched.alpha_bar(t - 1))?;
    Ok(LatentState::new(x, t - 1))
}

/// DDIM inversion from `t` to `t + 1`; `ddim_step` with the same `eps` undoes it.
pub fn ddim_invert_step(state: &LatentState, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    let t = state.t;
    sched.check_step(t, 0, sched.steps() - 1)?;
    let x = ddim_transition(&state.x, eps, sched.alpha_bar(t), sched.alpha_bar(t + 1))?;
    Ok(LatentState::new(x, t + 1))
}

/// Noise estimate that the DDIM step from level `ab_t` to `ab_prev` would need to map `x_t` onto `x_prev`.
pub fn recover_noise_between(x_t: &[f64], x_prev: &[f64], ab_t: f64, ab_prev: f64) -> std::result::Result<Vector, f64> {
    let denominator = (ab_t * (1.0 - ab_prev)).sqrt() - (ab_prev * (1.0 - ab_t)).sqrt();
    if denominator.abs() < DEGENERATE_TRANSITION_EPS {
        return Err(denominator);
    }
    // Same as (sqrt(ab_t) x_prev - sqrt(ab_prev) x_t) / denominator, arranged so
    // the only rounding at the scale of x is the one already stored in x_prev.
    let (ratio, gain) = transition_coefficients(ab_t, ab_prev);
    Ok(x_t
        .iter()
        .zip(x_prev)
        .map(|(xt, xp)| (-ratio).mul_add(*xt, *xp) / gain)
        .collect::<Vec<_>>()
        .into())
}

/// Inverts [`ddim_step`]: the `eps` with `ddim_step(x_t, eps).x == x_prev`.
pub fn recover_noise(x_t: &[f64], x_prev: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
    sched.check_step(t, 1, sched.steps())?;
    check_dims(x_t, x_prev)?;
    recover_noise_between(x_t, x_prev, sched.alpha_bar(t), sched.alpha_bar(t - 1))
        .map_err(|denominator| Error::DegenerateTransition { t, denominator })
}
