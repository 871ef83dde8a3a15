//! Run configuration.
//!
//! A run is described by one JSON document. Every field has a default except
//! `methods`; an empty object plus `"methods": [{"method": "zigzag"}]` is a
//! valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceSpec, Method};
use crate::predictor::GaussianMixtureModel;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_steps() -> usize {
    50
}
fn default_beta_min() -> f64 {
    2e-3
}
fn default_beta_max() -> f64 {
    0.4
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinMetric {
    Alignment,
    CondLoglik,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricSpec {
    Builtin(BuiltinMetric),
    External {
        name: String,
        command: Vec<String>,
        #[serde(default = "default_true")]
        higher_is_better: bool,
    },
}

fn default_true() -> bool {
    true
}

impl MetricSpec {
    pub fn name(&self) -> &str {
        match self {
            MetricSpec::Builtin(BuiltinMetric::Alignment) => "alignment",
            MetricSpec::Builtin(BuiltinMetric::CondLoglik) => "cond_loglik",
            MetricSpec::External { name, .. } => name,
        }
    }
}

/// Grid for a TDG `(g, beta)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub g: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
}

fn default_mask_ratio() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Mixture JSON; the built-in toy mixture of dimension `dim` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<PathBuf>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub methods: Vec<Method>,
    /// Base guidance scale shared by every method and the CFG baseline.
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<MetricSpec>,
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    #[serde(default = "default_prompt_length")]
    pub prompt_length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn default_dim() -> usize {
    2
}
fn default_omega() -> f64 {
    5.5
}
fn default_metrics() -> Vec<MetricSpec> {
    vec![
        MetricSpec::Builtin(BuiltinMetric::Alignment),
        MetricSpec::Builtin(BuiltinMetric::CondLoglik),
    ]
}
fn default_prompts() -> usize {
    100
}
fn default_prompt_length() -> usize {
    1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Defaults with the given methods.
    pub fn with_methods(methods: Vec<Method>) -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            mixture: None,
            dim: default_dim(),
            methods,
            omega: default_omega(),
            metrics: default_metrics(),
            prompts: default_prompts(),
            prompt_length: default_prompt_length(),
            seed: 0,
            output_dir: default_output_dir(),
            sweep: None,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut config = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        // Relative mixture paths are resolved against the config file.
        if let (Some(m), Some(dir)) = (&config.mixture, path.parent()) {
            if m.is_relative() {
                config.mixture = Some(dir.join(m));
            }
        }
        Ok(config)
    }

    pub fn load_mixture(&self) -> Result<GaussianMixtureModel> {
        match &self.mixture {
            Some(path) => GaussianMixtureModel::load(path),
            None => GaussianMixtureModel::default_toy(self.dim),
        }
    }

    /// Checks every invariant; nothing should be written before this passes.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sched = self.schedule.build()?;
        if self.prompts == 0 {
            return bad("prompts must be at least 1".into());
        }
        if self.prompt_length == 0 {
            return bad("prompt_length must be at least 1".into());
        }
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if !self.omega.is_finite() {
            return bad(format!("omega {} is not finite", self.omega));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        for m in &self.methods {
            GuidanceSpec::new(self.omega, m.clone()).validate(sched.steps())?;
        }
        if self.metrics.is_empty() {
            return bad("at least one metric is required".into());
        }
        let mut names: Vec<&str> = self.metrics.iter().map(MetricSpec::name).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("metric names must be unique".into());
        }
        for m in &self.metrics {
            if let MetricSpec::External { command, .. } = m {
                if command.is_empty() {
                    return bad(format!("external metric `{}` has no command", m.name()));
                }
            }
        }
        if let Some(path) = &self.mixture {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            let gmm = GaussianMixtureModel::load(path)?;
            if gmm.dim() != self.dim {
                return bad(format!("mixture dimension {} differs from dim {}", gmm.dim(), self.dim));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.g.is_empty() || sweep.beta.is_empty() {
                return bad("sweep grid must have at least one g and one beta".into());
            }
            for &g in &sweep.g {
                for &beta in &sweep.beta {
                    GuidanceSpec::new(
                        self.omega,
                        Method::Tdg {
                            g,
                            beta,
                            mask_ratio: sweep.mask_ratio,
                        },
                    )
                    .validate(sched.steps())?;
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON (struct field order, compact).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_json_str(r#"{"methods": [{"method": "zigzag"}]}"#).unwrap();
        assert_eq!(c.schedule.steps, 50);
        assert_eq!(c.omega, 5.5);
        assert_eq!(c.prompts, 100);
        assert_eq!(c.metrics.len(), 2);
        c.validate().unwrap();
    }

    #[test]
    fn metric_forms() {
        let c = RunConfig::from_json_str(
            r#"{"methods": [{"method": "cfg"}],
                "metrics": ["alignment", {"name": "hps", "command": ["scorer"]}]}"#,
        )
        .unwrap();
        assert_eq!(c.metrics[0].name(), "alignment");
        assert_eq!(c.metrics[1].name(), "hps");
    }

    #[test]
    fn validation_failures() {
        let base = RunConfig::with_methods(vec![Method::Cfg]);
        let mut c = base.clone();
        c.prompts = 0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.mixture = Some("/definitely/not/here.json".into());
        assert!(matches!(c.validate(), Err(Error::MissingFile(_))));
        let mut c = base.clone();
        c.methods.clear();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.schedule.beta_max = 2.0;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.metrics = vec![MetricSpec::Builtin(BuiltinMetric::Alignment); 2];
        assert!(c.validate().is_err());
        let mut c = base;
        c.methods = vec![Method::Zigzag {
            omega_inv: 0.0,
            cycles: Some(99),
        }];
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_json_str(r#"{"methods": [], "omgea": 3}"#).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = RunConfig::with_methods(vec![Method::Cfg]);
        let b = RunConfig::from_json_str(&a.canonical_json()).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }
}
