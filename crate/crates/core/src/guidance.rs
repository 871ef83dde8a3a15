//! Guidance combinators and guided DDIM samplers.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, gaussian_sample, SeededRng, Vector};
use crate::predictor::{mask_condition, perturbed_predictor, Condition, Degradation, NoisePredictor};
use crate::schedule::{ddim_step, ddim_transition, LatentState, NoiseSchedule};

/// Below this `|eps_c - eps_w|` the TDG norm-matched term is dropped.
pub const TDG_NORM_EPS: f64 = 1e-12;

/// `eps_u + omega * (eps_c - eps_u)`
pub fn cfg_combine(eps_u: &[f64], eps_c: &[f64], omega: f64) -> Result<Vector> {
    check_dims(eps_u, eps_c)?;
    Ok(eps_u
        .iter()
        .zip(eps_c)
        .map(|(u, c)| u + omega * (c - u))
        .collect::<Vec<_>>()
        .into())
}

/// Three-point TDG combination of unconditional, conditional and weak-conditional predictions.
///
/// ```text
/// eps = (eps_u + eps_w) / 2
///     + omega g beta / (beta + 1) * (eps_c - eps_u)
///     + omega g / (beta + 1) * (eps_c - eps_w) * |eps_c - eps_u| / |eps_c - eps_w|
/// ```
pub fn tdg_combine(eps_u: &[f64], eps_c: &[f64], eps_w: &[f64], omega: f64, g: f64, beta: f64) -> Result<Vector> {
    check_dims(eps_u, eps_c)?;
    check_dims(eps_u, eps_w)?;
    if !(beta > -1.0) {
        return Err(Error::InvalidSpec(format!("TDG beta {beta} must exceed -1")));
    }
    for (name, v) in [("eps_u", eps_u), ("eps_c", eps_c), ("eps_w", eps_w)] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name));
        }
    }
    if !(omega.is_finite() && g.is_finite() && beta.is_finite()) {
        return Err(Error::NonFinite("TDG scales"));
    }
    let cfg_dir: Vec<f64> = eps_c.iter().zip(eps_u).map(|(c, u)| c - u).collect();
    let weak_dir: Vec<f64> = eps_c.iter().zip(eps_w).map(|(c, w)| c - w).collect();
    let cfg_norm = cfg_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let weak_norm = weak_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let k_cfg = omega * g * beta / (beta + 1.0);
    let k_weak = if weak_norm < TDG_NORM_EPS {
        0.0
    } else {
        omega * g / (beta + 1.0) * cfg_norm / weak_norm
    };
    Ok((0..eps_u.len())
        .map(|i| 0.5 * (eps_u[i] + eps_w[i]) + k_cfg * cfg_dir[i] + k_weak * weak_dir[i])
        .collect::<Vec<_>>()
        .into())
}

/// CFG plus an additive weak-predictor term: `cfg(eps_u, eps_c, omega) + s * (eps_c - eps_w)`.
pub fn weak_guidance_combine(eps_u: &[f64], eps_c: &[f64], eps_w: &[f64], omega: f64, s: f64) -> Result<Vector> {
    check_dims(eps_c, eps_w)?;
    let mut out = cfg_combine(eps_u, eps_c, omega)?;
    for ((o, c), w) in out.iter_mut().zip(eps_c).zip(eps_w) {
        *o += s * (c - w);
    }
    Ok(out)
}

fn default_g() -> f64 {
    1.8
}
fn default_beta() -> f64 {
    2.6
}
fn default_mask_ratio() -> f64 {
    0.5
}
fn default_s() -> f64 {
    3.0
}
fn default_lambda_pp() -> f64 {
    0.4
}
fn default_weak_degradation() -> Degradation {
    Degradation::ComponentDropout { keep: 0.0, seed: 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    Cfg,
    /// `g` multiplies the base scale; `mask_ratio` is the share of tokens emptied for the weak prompt.
    Tdg {
        #[serde(default = "default_g")]
        g: f64,
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_mask_ratio")]
        mask_ratio: f64,
    },
    WeakPredictor {
        #[serde(default = "default_s")]
        s: f64,
        #[serde(default = "default_weak_degradation")]
        degradation: Degradation,
    },
    /// Denoise at `omega`, invert at `omega_inv`, then commit, on the first `cycles` steps (all steps when unset).
    Zigzag {
        #[serde(default)]
        omega_inv: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cycles: Option<usize>,
    },
    /// Renoising sampler: denoise with `cfg(lambda)`, renoise with the unconditional prediction.
    CfgPp {
        #[serde(default = "default_lambda_pp")]
        lambda: f64,
    },
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Cfg => "cfg",
            Method::Tdg { .. } => "tdg",
            Method::WeakPredictor { .. } => "weak_predictor",
            Method::Zigzag { .. } => "zigzag",
            Method::CfgPp { .. } => "cfg_pp",
        }
    }

    /// Short human-readable label including the method parameters.
    pub fn label(&self) -> String {
        match self {
            Method::Cfg => "cfg".into(),
            Method::Tdg { g, beta, mask_ratio } => {
                format!("tdg(g={g},beta={beta},mask={mask_ratio})")
            }
            Method::WeakPredictor { s, .. } => format!("weak_predictor(s={s})"),
            Method::Zigzag { omega_inv, cycles } => match cycles {
                Some(c) => format!("zigzag(omega_inv={omega_inv},cycles={c})"),
                None => format!("zigzag(omega_inv={omega_inv})"),
            },
            Method::CfgPp { lambda } => format!("cfg_pp(lambda={lambda})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub omega: f64,
    #[serde(flatten)]
    pub method: Method,
}

impl GuidanceSpec {
    pub fn cfg(omega: f64) -> Self {
        Self {
            omega,
            method: Method::Cfg,
        }
    }

    pub fn new(omega: f64, method: Method) -> Self {
        Self { omega, method }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !self.omega.is_finite() {
            return bad(format!("omega {} is not finite", self.omega));
        }
        match &self.method {
            Method::Cfg => Ok(()),
            Method::Tdg { g, beta, mask_ratio } => {
                if !(*g > 0.0 && g.is_finite()) {
                    return bad(format!("TDG g {g} must be > 0"));
                }
                if !(*beta > 0.0 && beta.is_finite()) {
                    return bad(format!("TDG beta {beta} must be > 0"));
                }
                if !(0.0..=1.0).contains(mask_ratio) {
                    return bad(format!("TDG mask_ratio {mask_ratio} outside [0, 1]"));
                }
                Ok(())
            }
            Method::WeakPredictor { s, degradation } => {
                if !s.is_finite() {
                    return bad(format!("weak-predictor s {s} is not finite"));
                }
                degradation.validate()
            }
            Method::Zigzag { omega_inv, cycles } => {
                if !(*omega_inv >= 0.0 && omega_inv.is_finite()) {
                    return bad(format!("zigzag omega_inv {omega_inv} must be >= 0"));
                }
                let c = cycles.unwrap_or(steps);
                if c < 1 || c > steps {
                    return bad(format!("zigzag cycles {c} outside 1..={steps}"));
                }
                Ok(())
            }
            Method::CfgPp { lambda } => {
                if !lambda.is_finite() {
                    return bad(format!("CFG++ lambda {lambda} is not finite"));
                }
                Ok(())
            }
        }
    }
}

/// One committed denoising step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Vector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_u: Option<Vector>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_c: Option<Vector>,
    pub x_prev: Vector,
}

/// A full sampling path, ordered from `t = T` down to `t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_sample(&self) -> Option<&Vector> {
        self.steps.last().map(|s| &s.x_prev)
    }

    /// Checks ordering, contiguity and dimensions against `sched`.
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let Some(first) = self.steps.first() else {
            return Err(Error::InconsistentTrajectory {
                t: 0,
                detail: "trajectory has no steps".into(),
            });
        };
        let dim = first.x_t.dim();
        for (i, step) in self.steps.iter().enumerate() {
            let fail = |detail: String| Err(Error::InconsistentTrajectory { t: step.t, detail });
            if step.t == 0 || step.t > sched.steps() {
                return fail(format!("timestep outside 1..={}", sched.steps()));
            }
            let dims_ok = step.x_t.dim() == dim
                && step.x_prev.dim() == dim
                && step.eps_u.as_ref().is_none_or(|e| e.dim() == dim)
                && step.eps_c.as_ref().is_none_or(|e| e.dim() == dim);
            if !dims_ok {
                return fail(format!("dimension differs from {dim}"));
            }
            if !(step.x_t.is_finite() && step.x_prev.is_finite()) {
                return fail("non-finite latent".into());
            }
            if let Some(next) = self.steps.get(i + 1) {
                if next.t + 1 != step.t {
                    return fail(format!("next step has t={}, expected {}", next.t, step.t - 1));
                }
                let gap = step.x_prev.max_abs_diff(&next.x_t)?;
                let scale = 1.0 + step.x_prev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if gap > 1e-12 * scale {
                    return fail(format!("x_prev does not match x_t of step t={} (gap {gap:e})", next.t));
                }
            }
        }
        Ok(())
    }

    /// Writes one JSON object per step: `{t, x_t, eps_u, eps_c, x_prev}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for step in &self.steps {
            serde_json::to_writer(&mut w, step)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    pub fn read_jsonl<R: BufRead>(r: R, method: impl Into<String>, seed: u64) -> Result<Self> {
        let mut steps = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let step: StepRecord = serde_json::from_str(&line).map_err(|e| Error::InconsistentTrajectory {
                t: 0,
                detail: format!("line {}: {e}", lineno + 1),
            })?;
            steps.push(step);
        }
        Ok(Self {
            method: method.into(),
            seed,
            steps,
        })
    }
}

/// Runs a guided DDIM sampler from `x_T ~ N(0, I)` down to `x_0`.
///
/// `x_T` is the first draw from `rng`, so runs sharing a seed share their
/// starting point. TDG's token mask is drawn after it.
pub fn sample<P: NoisePredictor + ?Sized>(
    spec: &GuidanceSpec,
    predictor: &P,
    c: &Condition,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<(Vector, Trajectory)> {
    let steps = sched.steps();
    spec.validate(steps)?;
    let seed = rng.seed();
    let x_top = gaussian_sample(rng, predictor.dim());
    let omega = spec.omega;

    let weak_condition = match spec.method {
        Method::Tdg { mask_ratio, .. } => Some(mask_condition(c, mask_ratio, rng)?),
        _ => None,
    };
    let weak_predictor = match &spec.method {
        Method::WeakPredictor { degradation, .. } => Some(perturbed_predictor(predictor, degradation.clone())?),
        _ => None,
    };

    let mut records = Vec::with_capacity(steps);
    let mut state = LatentState::new(x_top, steps);
    while state.t > 0 {
        let t = state.t;
        let eps_u = predictor.predict_unconditional(&state.x, t, sched)?;
        let eps_c = predictor.predict(&state.x, t, c, sched)?;
        let next = match &spec.method {
            Method::Cfg => ddim_step(&state, &cfg_combine(&eps_u, &eps_c, omega)?, sched)?,
            Method::Tdg { g, beta, .. } => {
                let weak = weak_condition.as_ref().expect("weak condition drawn for TDG");
                let eps_w = predictor.predict(&state.x, t, weak, sched)?;
                ddim_step(&state, &tdg_combine(&eps_u, &eps_c, &eps_w, omega, *g, *beta)?, sched)?
            }
            Method::WeakPredictor { s, .. } => {
                let weak = weak_predictor.as_ref().expect("weak predictor built");
                let eps_w = weak.predict(&state.x, t, c, sched)?;
                ddim_step(
                    &state,
                    &weak_guidance_combine(&eps_u, &eps_c, &eps_w, omega, *s)?,
                    sched,
                )?
            }
            Method::Zigzag { omega_inv, cycles } => {
                let active = cycles.unwrap_or(steps);
                if t + active > steps {
                    zigzag_step(predictor, c, sched, &state, &eps_u, &eps_c, omega, *omega_inv)?
                } else {
                    ddim_step(&state, &cfg_combine(&eps_u, &eps_c, omega)?, sched)?
                }
            }
            Method::CfgPp { lambda } => {
                let eps = cfg_combine(&eps_u, &eps_c, *lambda)?;
                let ab_t = sched.alpha_bar(t);
                let ab_prev = sched.alpha_bar(t - 1);
                let (st, sp) = ((1.0 - ab_t).sqrt(), (1.0 - ab_prev).sqrt());
                let x: Vec<f64> = (0..state.x.dim())
                    .map(|i| {
                        let x0 = (state.x[i] - st * eps[i]) / ab_t.sqrt();
                        ab_prev.sqrt() * x0 + sp * eps_u[i]
                    })
                    .collect();
                LatentState::new(x.into(), t - 1)
            }
        };
        if !next.x.is_finite() {
            return Err(Error::NonFinite("sampler latent"));
        }
        records.push(StepRecord {
            t,
            x_t: state.x.clone(),
            eps_u: Some(eps_u),
            eps_c: Some(eps_c),
            x_prev: next.x.clone(),
        });
        state = next;
    }

    let trajectory = Trajectory {
        method: spec.method.label(),
        seed,
        steps: records,
    };
    Ok((state.x, trajectory))
}

/// Denoise at `omega`, invert back to level `t` at `omega_inv`, then commit a fresh denoise at `omega`.
///
/// The inversion reuses the predictions made at `x_t`, so `omega_inv == omega`
/// returns exactly to `x_t` and the step reduces to plain CFG.
#[allow(clippy::too_many_arguments)]
fn zigzag_step<P: NoisePredictor + ?Sized>(
    predictor: &P,
    c: &Condition,
    sched: &NoiseSchedule,
    state: &LatentState,
    eps_u: &[f64],
    eps_c: &[f64],
    omega: f64,
    omega_inv: f64,
) -> Result<LatentState> {
    let t = state.t;
    let down = ddim_step(state, &cfg_combine(eps_u, eps_c, omega)?, sched)?;
    let eps_inv = cfg_combine(eps_u, eps_c, omega_inv)?;
    let back = ddim_transition(&down.x, &eps_inv, sched.alpha_bar(t - 1), sched.alpha_bar(t))?;
    let back = LatentState::new(back, t);
    let eps_u2 = predictor.predict_unconditional(&back.x, t, sched)?;
    let eps_c2 = predictor.predict(&back.x, t, c, sched)?;
    ddim_step(&back, &cfg_combine(&eps_u2, &eps_c2, omega)?, sched)
}
