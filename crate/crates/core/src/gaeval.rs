//! Effective guidance scale.
//!
//! Any guided update `eps*` splits against the CFG direction
//! `delta = eps_c - eps_u` as
//!
//! ```text
//! eps* = eps_u + eps_par + eps_orth,     eps_par = k * delta,   <eps_par, eps_orth> = 0
//! ```
//!
//! and the effective scale at that step is `|eps_par| / |delta| = |k|`.
//! Samplers that move the latent directly are first mapped back to noise
//! space with [`recover_noise`], then decomposed the same way. The per-step
//! scales are averaged uniformly along the path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{sample, GuidanceSpec, Trajectory};
use crate::numerics::{check_dims, project, SeededRng, Vector};
use crate::predictor::{Condition, NoisePredictor};
use crate::schedule::{ddim_step, recover_noise, LatentState, NoiseSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct StepDecomposition {
    pub t: usize,
    pub eps_parallel: Vector,
    pub eps_orth: Vector,
    /// Signed multiple of `delta` in `eps_parallel`.
    pub coefficient: f64,
    /// `|eps_parallel| / |delta|`.
    pub omega_e_t: f64,
}

pub fn decompose_step(t: usize, eps_star: &[f64], eps_u: &[f64], eps_c: &[f64]) -> Result<StepDecomposition> {
    check_dims(eps_star, eps_u)?;
    check_dims(eps_u, eps_c)?;
    let delta: Vector = eps_c.iter().zip(eps_u).map(|(c, u)| c - u).collect::<Vec<_>>().into();
    let update: Vector = eps_star
        .iter()
        .zip(eps_u)
        .map(|(s, u)| s - u)
        .collect::<Vec<_>>()
        .into();
    let p = project(&update, &delta).map_err(|e| match e {
        Error::ZeroDirection { norm } => Error::ZeroGuidanceDirection { t, norm },
        other => other,
    })?;
    let omega_e_t = p.parallel.norm() / delta.norm();
    Ok(StepDecomposition {
        t,
        eps_parallel: p.parallel,
        eps_orth: p.orthogonal,
        coefficient: p.coefficient,
        omega_e_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedStep {
    pub t: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub per_step: Vec<StepDecomposition>,
    pub omega_e_mean: f64,
    /// Mean of the signed coefficients over the same steps.
    pub coefficient_mean: f64,
    pub skipped_steps: Vec<SkippedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    pub omega_e: f64,
    pub coefficient: f64,
    pub orth_norm: f64,
}

/// Serialized form of a [`CalibrationResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub omega_e_mean: f64,
    pub coefficient_mean: f64,
    pub per_step: Vec<StepSummary>,
    pub skipped: Vec<SkippedStep>,
}

impl CalibrationResult {
    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            omega_e_mean: self.omega_e_mean,
            coefficient_mean: self.coefficient_mean,
            per_step: self
                .per_step
                .iter()
                .map(|s| StepSummary {
                    t: s.t,
                    omega_e: s.omega_e_t,
                    coefficient: s.coefficient,
                    orth_norm: s.eps_orth.norm(),
                })
                .collect(),
            skipped: self.skipped_steps.clone(),
        }
    }

    /// `t,omega_e` rows in path order.
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t,omega_e,coefficient\n");
        for s in &self.per_step {
            out.push_str(&format!("{},{},{}\n", s.t, s.omega_e_t, s.coefficient));
        }
        out
    }
}

/// Calibrates a committed DDIM trajectory.
///
/// Recorded `eps_u`/`eps_c` are used when present; otherwise the predictor is
/// re-evaluated at `x_t`. Steps where `delta` vanishes are skipped and listed.
pub fn calibrate<P: NoisePredictor + ?Sized>(
    traj: &Trajectory,
    predictor: &P,
    c: &Condition,
    sched: &NoiseSchedule,
) -> Result<CalibrationResult> {
    traj.validate(sched)?;
    let mut per_step = Vec::with_capacity(traj.steps.len());
    let mut skipped_steps = Vec::new();
    for step in &traj.steps {
        let t = step.t;
        let eps_star = recover_noise(&step.x_t, &step.x_prev, t, sched)?;
        let replay = ddim_step(&LatentState::new(step.x_t.clone(), t), &eps_star, sched)?;
        let scale = 1.0 + step.x_prev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = replay.x.max_abs_diff(&step.x_prev)?;
        if !(err <= 1e-9 * scale) {
            return Err(Error::InconsistentTrajectory {
                t,
                detail: format!("recovered noise does not reproduce x_prev (error {err:e})"),
            });
        }
        let eps_u = match &step.eps_u {
            Some(e) => e.clone(),
            None => predictor.predict_unconditional(&step.x_t, t, sched)?,
        };
        let eps_c = match &step.eps_c {
            Some(e) => e.clone(),
            None => predictor.predict(&step.x_t, t, c, sched)?,
        };
        match decompose_step(t, &eps_star, &eps_u, &eps_c) {
            Ok(d) => per_step.push(d),
            Err(Error::ZeroGuidanceDirection { norm, .. }) => skipped_steps.push(SkippedStep {
                t,
                reason: format!("zero guidance direction (|delta eps| = {norm:e})"),
            }),
            Err(e) => return Err(e),
        }
    }
    if per_step.is_empty() {
        return Err(Error::NoCalibratableSteps {
            skipped: skipped_steps.len(),
        });
    }
    let n = per_step.len() as f64;
    let omega_e_mean = per_step.iter().map(|s| s.omega_e_t).sum::<f64>() / n;
    let coefficient_mean = per_step.iter().map(|s| s.coefficient).sum::<f64>() / n;
    Ok(CalibrationResult {
        per_step,
        omega_e_mean,
        coefficient_mean,
        skipped_steps,
    })
}

/// Plain CFG at the calibrated scale, from the same seed as the run it is compared with.
pub fn replay_ecfg<P: NoisePredictor + ?Sized>(
    omega_e: f64,
    predictor: &P,
    c: &Condition,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(Vector, Trajectory)> {
    if !omega_e.is_finite() {
        return Err(Error::NonFinite("effective guidance scale"));
    }
    sample(&GuidanceSpec::cfg(omega_e), predictor, c, sched, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{cfg_combine, Method};
    use crate::predictor::{AnalyticPredictor, GaussianMixtureModel};

    #[test]
    fn cfg_update_has_its_own_scale() {
        let u = [0.2, -0.7, 1.1];
        let c = [0.9, 0.1, 0.4];
        let star = cfg_combine(&u, &c, 5.5).unwrap();
        let d = decompose_step(7, &star, &u, &c).unwrap();
        assert!((d.omega_e_t - 5.5).abs() < 1e-12);
        assert!((d.coefficient - 5.5).abs() < 1e-12);
        assert!(d.eps_orth.norm() < 1e-12);
        assert_eq!(d.t, 7);
    }

    #[test]
    fn orthogonal_update_has_zero_scale() {
        let d = decompose_step(1, &[0.0, 3.0], &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(d.omega_e_t, 0.0);
        assert_eq!(d.eps_orth.as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn anti_aligned_update_loses_sign() {
        let u = [1.0, 1.0];
        let c = [2.0, 1.5];
        let star: Vec<f64> = (0..2).map(|i| u[i] - 2.0 * (c[i] - u[i])).collect();
        let d = decompose_step(1, &star, &u, &c).unwrap();
        assert!((d.coefficient + 2.0).abs() < 1e-12);
        assert!((d.omega_e_t - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_direction_is_reported() {
        let r = decompose_step(3, &[1.0, 1.0], &[0.5, 0.5], &[0.5, 0.5]);
        assert!(matches!(r, Err(Error::ZeroGuidanceDirection { t: 3, .. })));
    }

    fn setup() -> (AnalyticPredictor, NoiseSchedule, Condition) {
        (
            AnalyticPredictor::new(GaussianMixtureModel::default_toy(2).unwrap()),
            NoiseSchedule::linear(50, 1e-4, 0.02).unwrap(),
            Condition::from_ids(&[1, 6]).unwrap(),
        )
    }

    #[test]
    fn cfg_trajectory_self_calibrates() {
        let (p, s, c) = setup();
        let (_, traj) = sample(&GuidanceSpec::cfg(5.5), &p, &c, &s, &mut SeededRng::new(3)).unwrap();
        let cal = calibrate(&traj, &p, &c, &s).unwrap();
        assert!(cal.skipped_steps.is_empty());
        assert!((cal.omega_e_mean - 5.5).abs() < 1e-9);
        // Per-step error is bounded by latent rounding amplified by 1 / |delta eps|.
        for (step, rec) in cal.per_step.iter().zip(&traj.steps) {
            let delta = rec
                .eps_c
                .as_ref()
                .unwrap()
                .sub(rec.eps_u.as_ref().unwrap())
                .unwrap()
                .norm();
            let bound = 1e-9f64.max(1e-12 / delta);
            assert!((step.omega_e_t - 5.5).abs() < bound, "t={}", step.t);
        }
    }

    #[test]
    fn calibration_uses_predictor_when_eps_missing() {
        let (p, s, c) = setup();
        let (_, mut traj) = sample(&GuidanceSpec::cfg(3.0), &p, &c, &s, &mut SeededRng::new(5)).unwrap();
        for step in &mut traj.steps {
            step.eps_u = None;
            step.eps_c = None;
        }
        let cal = calibrate(&traj, &p, &c, &s).unwrap();
        assert!((cal.omega_e_mean - 3.0).abs() < 1e-9);
    }

    #[test]
    fn unconditional_trajectory_has_no_calibratable_steps() {
        let (p, s, _) = setup();
        let u = Condition::unconditional(2);
        let (_, traj) = sample(&GuidanceSpec::cfg(3.0), &p, &u, &s, &mut SeededRng::new(5)).unwrap();
        assert!(matches!(
            calibrate(&traj, &p, &u, &s),
            Err(Error::NoCalibratableSteps { skipped: 50 })
        ));
    }

    #[test]
    fn summary_shape() {
        let (p, s, c) = setup();
        let spec = GuidanceSpec::new(
            5.5,
            Method::Zigzag {
                omega_inv: 0.0,
                cycles: None,
            },
        );
        let (_, traj) = sample(&spec, &p, &c, &s, &mut SeededRng::new(9)).unwrap();
        let cal = calibrate(&traj, &p, &c, &s).unwrap();
        let json = serde_json::to_value(cal.summary()).unwrap();
        for key in ["omega_e_mean", "per_step", "skipped"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let first = &json["per_step"][0];
        for key in ["t", "omega_e", "coefficient", "orth_norm"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert_eq!(cal.series_csv().lines().count(), 51);
    }

    #[test]
    fn ecfg_replay_at_zero_is_unconditional() {
        let (p, s, c) = setup();
        let (x0, _) = replay_ecfg(0.0, &p, &c, &s, &mut SeededRng::new(12)).unwrap();
        let (xu, _) = sample(
            &GuidanceSpec::cfg(0.0),
            &p,
            &Condition::unconditional(1),
            &s,
            &mut SeededRng::new(12),
        )
        .unwrap();
        assert_eq!(x0, xu);
    }
}
