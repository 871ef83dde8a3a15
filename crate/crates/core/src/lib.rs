//! Guidance-aware evaluation of diffusion guidance methods on analytic toy models.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: vectors, projections, seeded streams.
//! - [`schedule`]: noise schedules and DDPM/DDIM transitions, including the
//!   latent-to-noise recovery that calibration relies on.
//! - [`predictor`]: exact Gaussian-mixture noise predictors, token masking and
//!   degraded ("weak") predictors.
//! - [`guidance`]: CFG, TDG, weak-predictor guidance, zigzag and CFG++ samplers.
//! - [`gaeval`]: effective guidance scale calibration and e-CFG replay.
//! - [`harness`]: metrics, winning rates and the end-to-end experiment.
//! - [`config`] / [`cli`]: run configuration, manifests and the command-line front end.

pub mod cli;
pub mod config;
pub mod error;
pub mod gaeval;
pub mod guidance;
pub mod harness;
pub mod numerics;
pub mod predictor;
pub mod schedule;

pub use error::{Error, Result};
pub use gaeval::{calibrate, decompose_step, replay_ecfg, CalibrationResult, StepDecomposition};
pub use guidance::{cfg_combine, sample, tdg_combine, weak_guidance_combine, GuidanceSpec, Method, Trajectory};
pub use numerics::{dot, gaussian_sample, project, SeededRng, Vector};
pub use predictor::{
    analytic_noise, mask_condition, perturbed_predictor, AnalyticPredictor, Condition, Degradation,
    GaussianMixtureModel, NoisePredictor,
};
pub use schedule::{ddim_invert_step, ddim_step, ddpm_step, recover_noise, LatentState, NoiseSchedule};
