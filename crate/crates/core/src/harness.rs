//! Guidance-aware winning-rate evaluation.
//!
//! For every prompt the method under test, plain CFG at the base scale and
//! CFG at the method's calibrated effective scale (e-CFG) are sampled from the
//! same seed. A method that only looks good because it guides harder wins
//! against CFG but stops winning against e-CFG; the gap is the degradation
//! `delta_eta = eta_cfg - eta_ecfg`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{MetricSpec, RunConfig};
use crate::error::{Error, Result};
use crate::gaeval::{calibrate, replay_ecfg, CalibrationSummary};
use crate::guidance::{sample, GuidanceSpec, Method};
use crate::numerics::{SeededRng, Vector};
use crate::predictor::{AnalyticPredictor, Condition, GaussianMixtureModel};
use crate::schedule::NoiseSchedule;

/// Relative gap under which two scores count as a tie.
pub const TIE_RELATIVE_TOLERANCE: f64 = 1e-9;

/// `M(x, c)`.
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;

    fn higher_is_better(&self) -> bool;

    fn score(&self, sample: &[f64], c: &Condition) -> Result<f64>;
}

/// Exact `log p(x | c)` under the clean conditional mixture.
#[derive(Debug, Clone)]
pub struct CondLogLik {
    gmm: Arc<GaussianMixtureModel>,
}

pub fn metric_cond_loglik(gmm: Arc<GaussianMixtureModel>) -> CondLogLik {
    CondLogLik { gmm }
}

impl Metric for CondLogLik {
    fn name(&self) -> &str {
        "cond_loglik"
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn score(&self, sample: &[f64], c: &Condition) -> Result<f64> {
        self.gmm.log_density(sample, 1.0, c)
    }
}

/// Class posterior `log p(c | x)`; keeps rising as samples are pushed away from other classes.
#[derive(Debug, Clone)]
pub struct Alignment {
    gmm: Arc<GaussianMixtureModel>,
}

pub fn metric_alignment(gmm: Arc<GaussianMixtureModel>) -> Alignment {
    Alignment { gmm }
}

impl Metric for Alignment {
    fn name(&self) -> &str {
        "alignment"
    }

    fn higher_is_better(&self) -> bool {
        true
    }

    fn score(&self, sample: &[f64], c: &Condition) -> Result<f64> {
        self.gmm.log_class_posterior(sample, c)
    }
}

/// A scorer run as a child process per sample.
///
/// The process reads one JSON line `{"condition": [..], "sample": [..]}` on
/// stdin and answers with one JSON line `{"score": <number>}` on stdout.
/// Empty tokens are sent as `null`.
#[derive(Debug, Clone)]
pub struct ExternalScorer {
    name: String,
    command: Vec<String>,
    higher_is_better: bool,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    condition: &'a Condition,
    sample: &'a [f64],
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

impl ExternalScorer {
    pub fn new(name: impl Into<String>, command: Vec<String>, higher_is_better: bool) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("external scorer needs a command".into()));
        }
        Ok(Self {
            name: name.into(),
            command,
            higher_is_better,
        })
    }
}

impl Metric for ExternalScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn higher_is_better(&self) -> bool {
        self.higher_is_better
    }

    fn score(&self, sample: &[f64], c: &Condition) -> Result<f64> {
        let fail = |m: String| Error::ExternalScorer(format!("{}: {m}", self.name));
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| fail(format!("spawn `{}`: {e}", self.command[0])))?;
        {
            let mut stdin = child.stdin.take().expect("stdin piped");
            let mut line = serde_json::to_vec(&ScoreRequest { condition: c, sample })?;
            line.push(b'\n');
            stdin.write_all(&line)?;
        }
        let mut reply = String::new();
        BufReader::new(child.stdout.take().expect("stdout piped")).read_line(&mut reply)?;
        let status = child.wait()?;
        if !status.success() {
            return Err(fail(format!("exited with {status}")));
        }
        let resp: ScoreResponse =
            serde_json::from_str(reply.trim()).map_err(|e| fail(format!("bad reply {reply:?}: {e}")))?;
        Ok(resp.score)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Win,
    Tie,
    Loss,
}

/// Compares two scores under the metric orientation. Near-equal scores tie.
pub fn compare_scores(a: f64, b: f64, higher_is_better: bool) -> Outcome {
    if a == b || (a - b).abs() <= TIE_RELATIVE_TOLERANCE * a.abs().max(b.abs()) {
        return Outcome::Tie;
    }
    if (a > b) == higher_is_better {
        Outcome::Win
    } else {
        Outcome::Loss
    }
}

fn checked_score(m: &dyn Metric, x: &[f64], c: &Condition) -> Result<f64> {
    let v = m.score(x, c)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteScore {
            metric: m.name().to_string(),
            value: v,
        });
    }
    Ok(v)
}

/// 1 if `x_a` scores strictly better than `x_b`, else 0 (ties included).
pub fn indicator(m: &dyn Metric, x_a: &[f64], x_b: &[f64], c: &Condition) -> Result<u8> {
    let a = checked_score(m, x_a, c)?;
    let b = checked_score(m, x_b, c)?;
    Ok((compare_scores(a, b, m.higher_is_better()) == Outcome::Win) as u8)
}

/// The three samples compared for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTriple {
    pub condition_id: usize,
    pub condition: Condition,
    pub seed: u64,
    pub x_star: Vector,
    pub x_cfg: Vector,
    pub x_ecfg: Vector,
    pub omega_e: f64,
}

/// Scores of one triple under one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleScores {
    pub star: f64,
    pub cfg: f64,
    pub ecfg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRates {
    pub metric: String,
    pub n: usize,
    pub wins_cfg: usize,
    pub wins_ecfg: usize,
    pub ties_cfg: usize,
    pub ties_ecfg: usize,
    pub eta_cfg: f64,
    pub eta_ecfg: f64,
    pub delta_eta: f64,
}

pub fn rates_from_scores(metric: &str, scores: &[TripleScores], higher_is_better: bool) -> Result<MetricRates> {
    if scores.is_empty() {
        return Err(Error::EmptyTriples);
    }
    let (mut wins_cfg, mut wins_ecfg, mut ties_cfg, mut ties_ecfg) = (0, 0, 0, 0);
    for s in scores {
        match compare_scores(s.star, s.cfg, higher_is_better) {
            Outcome::Win => wins_cfg += 1,
            Outcome::Tie => ties_cfg += 1,
            Outcome::Loss => {}
        }
        match compare_scores(s.star, s.ecfg, higher_is_better) {
            Outcome::Win => wins_ecfg += 1,
            Outcome::Tie => ties_ecfg += 1,
            Outcome::Loss => {}
        }
    }
    let n = scores.len();
    let eta_cfg = wins_cfg as f64 / n as f64;
    let eta_ecfg = wins_ecfg as f64 / n as f64;
    Ok(MetricRates {
        metric: metric.to_string(),
        n,
        wins_cfg,
        wins_ecfg,
        ties_cfg,
        ties_ecfg,
        eta_cfg,
        eta_ecfg,
        delta_eta: eta_cfg - eta_ecfg,
    })
}

pub fn score_triple(m: &dyn Metric, t: &ComparisonTriple) -> Result<TripleScores> {
    Ok(TripleScores {
        star: checked_score(m, &t.x_star, &t.condition)?,
        cfg: checked_score(m, &t.x_cfg, &t.condition)?,
        ecfg: checked_score(m, &t.x_ecfg, &t.condition)?,
    })
}

/// Winning rates of `x_star` against `x_cfg` and `x_ecfg` over all triples.
pub fn winning_rates(triples: &[ComparisonTriple], m: &dyn Metric) -> Result<MetricRates> {
    if triples.is_empty() {
        return Err(Error::EmptyTriples);
    }
    let scores = triples.iter().map(|t| score_triple(m, t)).collect::<Result<Vec<_>>>()?;
    rates_from_scores(m.name(), &scores, m.higher_is_better())
}

/// A prompt: condition plus the sampler seed shared by all three runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: usize,
    pub condition: Condition,
    pub seed: u64,
}

/// Draws `n` prompts of `length` tokens. Prompt `i` depends only on `(master_seed, i)`.
pub fn make_prompts(vocab: &[u32], n: usize, length: usize, master_seed: u64) -> Result<Vec<Prompt>> {
    if vocab.is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    (0..n)
        .map(|id| {
            let mut rng = SeededRng::substream(master_seed, id as u64);
            let tokens: Vec<u32> = (0..length.max(1))
                .map(|_| vocab[rng.random_range(0..vocab.len())])
                .collect();
            Ok(Prompt {
                id,
                condition: Condition::from_ids(&tokens)?,
                seed: rng.random(),
            })
        })
        .collect()
}

/// Everything needed to run samplers: schedule, predictor and metrics.
pub struct Lab {
    pub schedule: NoiseSchedule,
    pub mixture: Arc<GaussianMixtureModel>,
    pub predictor: AnalyticPredictor,
    pub metrics: Vec<Box<dyn Metric>>,
}

impl Lab {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let mixture = Arc::new(config.load_mixture()?);
        let predictor = AnalyticPredictor::from_shared(mixture.clone());
        let metrics = config
            .metrics
            .iter()
            .map(|m| build_metric(m, &mixture))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schedule,
            mixture,
            predictor,
            metrics,
        })
    }
}

pub fn build_metric(spec: &MetricSpec, gmm: &Arc<GaussianMixtureModel>) -> Result<Box<dyn Metric>> {
    Ok(match spec {
        MetricSpec::Builtin(crate::config::BuiltinMetric::Alignment) => Box::new(metric_alignment(gmm.clone())),
        MetricSpec::Builtin(crate::config::BuiltinMetric::CondLoglik) => Box::new(metric_cond_loglik(gmm.clone())),
        MetricSpec::External {
            name,
            command,
            higher_is_better,
        } => Box::new(ExternalScorer::new(name.clone(), command.clone(), *higher_is_better)?),
    })
}

/// One prompt's outcome for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptOutcome {
    pub triple: ComparisonTriple,
    pub calibration: CalibrationSummary,
    /// One entry per configured metric, in config order.
    pub scores: Vec<TripleScores>,
}

/// Samples the method, calibrates it, replays CFG and e-CFG from the same seed and scores all three.
pub fn run_prompt(lab: &Lab, spec: &GuidanceSpec, prompt: &Prompt) -> Result<PromptOutcome> {
    let c = &prompt.condition;
    let sched = &lab.schedule;
    let pred = &lab.predictor;
    let (x_star, traj) = sample(spec, pred, c, sched, &mut SeededRng::new(prompt.seed))?;
    let cal = calibrate(&traj, pred, c, sched)?;
    let (x_cfg, _) = sample(
        &GuidanceSpec::cfg(spec.omega),
        pred,
        c,
        sched,
        &mut SeededRng::new(prompt.seed),
    )?;
    let (x_ecfg, _) = replay_ecfg(cal.omega_e_mean, pred, c, sched, &mut SeededRng::new(prompt.seed))?;
    let triple = ComparisonTriple {
        condition_id: prompt.id,
        condition: c.clone(),
        seed: prompt.seed,
        x_star,
        x_cfg,
        x_ecfg,
        omega_e: cal.omega_e_mean,
    };
    let scores = lab
        .metrics
        .iter()
        .map(|m| score_triple(m.as_ref(), &triple))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptOutcome {
        triple,
        calibration: cal.summary(),
        scores,
    })
}

/// One row of the report: a method under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateRow {
    pub method: String,
    pub metric: String,
    pub omega: f64,
    /// Mean effective scale over prompts.
    pub omega_e: f64,
    pub eta_cfg: f64,
    pub eta_ecfg: f64,
    pub delta_eta: f64,
    pub ties_cfg: usize,
    pub ties_ecfg: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub spec: GuidanceSpec,
    pub omega_e: f64,
    pub rates: Vec<MetricRates>,
    pub prompts: Vec<PromptOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinRateReport {
    pub rows: Vec<WinRateRow>,
}

pub const REPORT_CSV_HEADER: &str = "method,metric,omega,omega_e,eta_cfg,eta_ecfg,delta_eta,ties_cfg,ties_ecfg,n";

impl WinRateReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                csv_field(&r.method),
                csv_field(&r.metric),
                r.omega,
                r.omega_e,
                r.eta_cfg,
                r.eta_ecfg,
                r.delta_eta,
                r.ties_cfg,
                r.ties_ecfg,
                r.n
            ));
        }
        out
    }

    pub fn row(&self, method_tag: &str, metric: &str) -> Option<&WinRateRow> {
        self.rows
            .iter()
            .find(|r| r.method.starts_with(method_tag) && r.metric == metric)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs one method over all prompts in parallel; results come back in prompt order.
pub fn run_method(lab: &Lab, spec: &GuidanceSpec, prompts: &[Prompt]) -> Result<MethodResult> {
    spec.validate(lab.schedule.steps())?;
    let outcomes = prompts
        .par_iter()
        .map(|p| run_prompt(lab, spec, p))
        .collect::<Result<Vec<_>>>()?;
    let rates = lab
        .metrics
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let scores: Vec<TripleScores> = outcomes.iter().map(|o| o.scores[k]).collect();
            rates_from_scores(m.name(), &scores, m.higher_is_better())
        })
        .collect::<Result<Vec<_>>>()?;
    let omega_e = outcomes.iter().map(|o| o.triple.omega_e).sum::<f64>() / outcomes.len().max(1) as f64;
    Ok(MethodResult {
        method: spec.method.label(),
        spec: spec.clone(),
        omega_e,
        rates,
        prompts: outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub prompts: Vec<Prompt>,
    pub methods: Vec<MethodResult>,
    pub report: WinRateReport,
}

fn report_rows(results: &[MethodResult]) -> WinRateReport {
    let rows = results
        .iter()
        .flat_map(|r| {
            r.rates.iter().map(move |m| WinRateRow {
                method: r.method.clone(),
                metric: m.metric.clone(),
                omega: r.spec.omega,
                omega_e: r.omega_e,
                eta_cfg: m.eta_cfg,
                eta_ecfg: m.eta_ecfg,
                delta_eta: m.delta_eta,
                ties_cfg: m.ties_cfg,
                ties_ecfg: m.ties_ecfg,
                n: m.n,
            })
        })
        .collect();
    WinRateReport { rows }
}

/// The full evaluation: every configured method over every prompt.
pub fn run_experiment(config: &RunConfig) -> Result<Experiment> {
    config.validate()?;
    let lab = Lab::from_config(config)?;
    run_experiment_with(config, &lab)
}

pub fn run_experiment_with(config: &RunConfig, lab: &Lab) -> Result<Experiment> {
    let prompts = make_prompts(&lab.mixture.vocab(), config.prompts, config.prompt_length, config.seed)?;
    let methods = config
        .methods
        .iter()
        .map(|m| run_method(lab, &GuidanceSpec::new(config.omega, m.clone()), &prompts))
        .collect::<Result<Vec<_>>>()?;
    let report = report_rows(&methods);
    Ok(Experiment {
        prompts,
        methods,
        report,
    })
}

/// One grid point of a TDG `(g, beta)` sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: f64,
    pub beta: f64,
    pub omega_e: f64,
    pub rates: Vec<MetricRates>,
}

pub fn run_sweep(config: &RunConfig, lab: &Lab) -> Result<Vec<SweepRow>> {
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep section missing".into()))?;
    let prompts = make_prompts(&lab.mixture.vocab(), config.prompts, config.prompt_length, config.seed)?;
    let mut rows = Vec::with_capacity(sweep.g.len() * sweep.beta.len());
    for &g in &sweep.g {
        for &beta in &sweep.beta {
            let spec = GuidanceSpec::new(
                config.omega,
                Method::Tdg {
                    g,
                    beta,
                    mask_ratio: sweep.mask_ratio,
                },
            );
            let r = run_method(lab, &spec, &prompts)?;
            rows.push(SweepRow {
                g,
                beta,
                omega_e: r.omega_e,
                rates: r.rates,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], metric_names: &[&str]) -> String {
    let mut out = String::from("g,beta,omega_e");
    for m in metric_names {
        out.push_str(&format!(",{m}_eta_cfg,{m}_eta_ecfg,{m}_delta_eta,{m}_ties_cfg"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{}", r.g, r.beta, r.omega_e));
        for m in &r.rates {
            out.push_str(&format!(",{},{},{},{}", m.eta_cfg, m.eta_ecfg, m.delta_eta, m.ties_cfg));
        }
        out.push('\n');
    }
    out
}
