//! Command-line front end.
//!
//! Every command takes a config file. Outputs go to
//! `<output_dir>/<first 12 hex chars of the config hash>/`, so reruns of the
//! same config land in the same place and different configs never collide.
//! Each command records itself in `manifest.json` in that directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{Error, Result};
use crate::gaeval::calibrate;
use crate::guidance::{sample, GuidanceSpec, Trajectory};
use crate::harness::{make_prompts, run_experiment_with, run_sweep, sweep_csv, Lab, WinRateReport};
use crate::numerics::{SeededRng, Vector};
use crate::predictor::Condition;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "guidelab",
    version,
    about = "Effective guidance scale calibration and guidance-aware evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run config (JSON).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Overrides the config's output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Sample every configured method for every prompt and write trajectories.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Calibrate trajectories (all trajectories of the run when none are given).
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Trajectory JSON-lines files.
        trajectories: Vec<PathBuf>,
    },
    /// Winning rates against CFG and e-CFG for every method and metric.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// TDG grid search over the config's `sweep` section.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Print the evaluation report of a run.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

impl Verb {
    fn common(&self) -> &CommonArgs {
        match self {
            Verb::Sample { common }
            | Verb::Calibrate { common, .. }
            | Verb::Evaluate { common }
            | Verb::Sweep { common }
            | Verb::Report { common } => common,
        }
    }

    fn stage(&self) -> &'static str {
        match self {
            Verb::Sample { .. } => "sample",
            Verb::Calibrate { .. } => "calibrate",
            Verb::Evaluate { .. } => "evaluate",
            Verb::Sweep { .. } => "sweep",
            Verb::Report { .. } => "report",
        }
    }
}

pub fn exit_code(err: &Error) -> u8 {
    if err.is_config_error() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Loads and validates the config with command-line overrides applied.
pub fn effective_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if common.workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    config.validate()?;
    Ok(config)
}

/// Run directory for a config: `<output_dir>/<hash prefix>`.
pub fn run_dir(config: &RunConfig) -> PathBuf {
    // The output location itself does not feed the hash.
    let mut keyed = config.clone();
    keyed.output_dir = PathBuf::new();
    config.output_dir.join(&keyed.hash()[..12])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub started_unix_ms: u128,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub stages: BTreeMap<String, StageStatus>,
    /// Relative path to SHA-256 of every file written in this run directory.
    pub files: BTreeMap<String, String>,
    /// Wall-clock data; the only part that changes between identical reruns.
    pub timing: BTreeMap<String, StageTiming>,
}

/// Writes files into a run directory and tracks them for the manifest.
pub struct RunWriter {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl RunWriter {
    pub fn new(root: PathBuf) -> Self {
        Self {
            root,
            written: BTreeMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `rel` via a temp file and rename.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        write_atomic(&path, bytes)?;
        self.written
            .insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(
        ".{name}.tmp-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn update_manifest(
    config: &RunConfig,
    writer: &RunWriter,
    stage: &str,
    outcome: &Result<()>,
    started: u128,
    wall_ms: u128,
) -> Result<()> {
    let path = writer.root().join("manifest.json");
    let mut manifest: RunManifest = fs::read_to_string(&path)
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .unwrap_or_default();
    manifest.config_hash = config.hash();
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.stages.insert(
        stage.to_string(),
        match outcome {
            Ok(()) => StageStatus {
                status: "ok".into(),
                error: None,
            },
            Err(e) => StageStatus {
                status: "failed".into(),
                error: Some(e.to_string()),
            },
        },
    );
    manifest
        .files
        .extend(writer.written.iter().map(|(k, v)| (k.clone(), v.clone())));
    manifest.timing.insert(
        stage.to_string(),
        StageTiming {
            started_unix_ms: started,
            wall_ms,
        },
    );
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes)
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let verb = cli.command;
    let common = verb.common().clone();
    let config = effective_config(&common)?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = common.workers {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?
    };
    let mut writer = RunWriter::new(run_dir(&config));
    if let Verb::Report { .. } = verb {
        return cmd_report(&config, writer.root());
    }
    let started = unix_ms();
    let clock = Instant::now();
    let outcome = pool.install(|| match &verb {
        Verb::Sample { .. } => cmd_sample(&config, &mut writer),
        Verb::Calibrate { trajectories, .. } => cmd_calibrate(&config, trajectories, &mut writer),
        Verb::Evaluate { .. } => cmd_evaluate(&config, &mut writer),
        Verb::Sweep { .. } => cmd_sweep(&config, &mut writer),
        Verb::Report { .. } => unreachable!(),
    });
    update_manifest(
        &config,
        &writer,
        verb.stage(),
        &outcome,
        started,
        clock.elapsed().as_millis(),
    )?;
    outcome
}

/// Sidecar describing how a trajectory file was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub method: String,
    pub method_index: usize,
    pub prompt: usize,
    pub condition: Condition,
    pub seed: u64,
    pub spec: GuidanceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub method: String,
    pub prompt: usize,
    pub condition: Condition,
    pub seed: u64,
    pub trajectory: String,
    pub sample: Vector,
}

fn method_dir(index: usize, spec: &GuidanceSpec) -> String {
    format!("m{index}_{}", spec.method.tag())
}

pub fn cmd_sample(config: &RunConfig, writer: &mut RunWriter) -> Result<()> {
    let lab = Lab::from_config(config)?;
    let prompts = make_prompts(&lab.mixture.vocab(), config.prompts, config.prompt_length, config.seed)?;
    let mut index = Vec::new();
    for (mi, method) in config.methods.iter().enumerate() {
        let spec = GuidanceSpec::new(config.omega, method.clone());
        let runs = prompts
            .par_iter()
            .map(|p| {
                let (x, traj) = sample(
                    &spec,
                    &lab.predictor,
                    &p.condition,
                    &lab.schedule,
                    &mut SeededRng::new(p.seed),
                )?;
                Ok((p, x, traj.to_jsonl()?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, x, jsonl) in runs {
            let rel = format!("trajectories/{}/prompt_{:04}.jsonl", method_dir(mi, &spec), p.id);
            writer.write(&rel, jsonl.as_bytes())?;
            let meta = TrajectoryMeta {
                method: spec.method.label(),
                method_index: mi,
                prompt: p.id,
                condition: p.condition.clone(),
                seed: p.seed,
                spec: spec.clone(),
            };
            writer.write_json(rel.replace(".jsonl", ".meta.json"), &meta)?;
            index.push(SampleEntry {
                method: spec.method.label(),
                prompt: p.id,
                condition: p.condition.clone(),
                seed: p.seed,
                trajectory: rel,
                sample: x,
            });
        }
    }
    writer.write_json("samples.json", &index)?;
    Ok(())
}

fn meta_path(trajectory: &Path) -> PathBuf {
    let name = trajectory
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(".jsonl").unwrap_or(&name);
    trajectory.with_file_name(format!("{stem}.meta.json"))
}

pub fn cmd_calibrate(config: &RunConfig, files: &[PathBuf], writer: &mut RunWriter) -> Result<()> {
    let lab = Lab::from_config(config)?;
    let files: Vec<PathBuf> = if files.is_empty() {
        let index_path = writer.root().join("samples.json");
        if !index_path.exists() {
            return Err(Error::Config(format!(
                "no trajectories given and {} does not exist (run `sample` first)",
                index_path.display()
            )));
        }
        let index: Vec<SampleEntry> = serde_json::from_str(&fs::read_to_string(&index_path)?)?;
        index.iter().map(|e| writer.root().join(&e.trajectory)).collect()
    } else {
        files.to_vec()
    };
    for f in &files {
        if !f.exists() {
            return Err(Error::MissingFile(f.clone()));
        }
    }
    let results = files
        .par_iter()
        .map(|path| {
            let meta: Option<TrajectoryMeta> = match fs::read_to_string(meta_path(path)) {
                Ok(s) => Some(serde_json::from_str(&s)?),
                Err(_) => None,
            };
            let (label, seed) = meta
                .as_ref()
                .map_or(("external".to_string(), 0), |m| (m.method.clone(), m.seed));
            let traj = Trajectory::read_jsonl(BufReader::new(fs::File::open(path)?), label, seed)?;
            let condition = match &meta {
                Some(m) => m.condition.clone(),
                None => {
                    if traj.steps.iter().any(|s| s.eps_u.is_none() || s.eps_c.is_none()) {
                        return Err(Error::Config(format!(
                            "{}: no metadata sidecar and noise predictions not recorded",
                            path.display()
                        )));
                    }
                    Condition::unconditional(1)
                }
            };
            let cal = calibrate(&traj, &lab.predictor, &condition, &lab.schedule).map_err(|e| match e {
                Error::InconsistentTrajectory { t, detail } => Error::InconsistentTrajectory {
                    t,
                    detail: format!("{}: {detail}", path.display()),
                },
                other => other,
            })?;
            let group = path
                .parent()
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".into());
            let stem = path
                .file_name()
                .map(|n| n.to_string_lossy().trim_end_matches(".jsonl").to_string())
                .unwrap_or_default();
            Ok((group, stem, cal))
        })
        .collect::<Result<Vec<_>>>()?;
    for (group, stem, cal) in results {
        writer.write_json(format!("calibration/{group}/{stem}.json"), &cal.summary())?;
        writer.write(
            format!("calibration/{group}/{stem}_omega_e.csv"),
            cal.series_csv().as_bytes(),
        )?;
    }
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, writer: &mut RunWriter) -> Result<()> {
    let lab = Lab::from_config(config)?;
    let exp = run_experiment_with(config, &lab)?;
    writer.write("report.csv", exp.report.to_csv().as_bytes())?;
    writer.write_json("report.json", &exp.report)?;
    writer.write_json("details.json", &exp)?;
    Ok(())
}

pub fn cmd_sweep(config: &RunConfig, writer: &mut RunWriter) -> Result<()> {
    let lab = Lab::from_config(config)?;
    let rows = run_sweep(config, &lab)?;
    let names: Vec<&str> = lab.metrics.iter().map(|m| m.name()).collect();
    writer.write("sweep.csv", sweep_csv(&rows, &names).as_bytes())?;
    writer.write_json("sweep.json", &rows)?;
    Ok(())
}

pub fn cmd_report(config: &RunConfig, root: &Path) -> Result<()> {
    let path = root.join("report.json");
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found (run `evaluate` first)",
            path.display()
        )));
    }
    let report: WinRateReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
    println!("run {} (omega = {})", root.display(), config.omega);
    println!(
        "{:<40} {:<14} {:>8}  {:>8} / {:>8} / {:>8}  {:>5}",
        "method", "metric", "omega_e", "eta_cfg", "eta_ecfg", "delta", "ties"
    );
    for r in &report.rows {
        println!(
            "{:<40} {:<14} {:>8.3}  {:>8.3} / {:>8.3} / {:>8.3}  {:>5}",
            r.method, r.metric, r.omega_e, r.eta_cfg, r.eta_ecfg, r.delta_eta, r.ties_cfg
        );
    }
    Ok(())
}
