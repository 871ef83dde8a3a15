//! Noise predictors.
//!
//! [`AnalyticPredictor`] is the exact minimum-MSE noise prediction for data
//! drawn from a diagonal-covariance Gaussian mixture. Conditioning restricts
//! the mixture to the components named by the condition's tokens, so the
//! conditional and unconditional predictions both come from one closed form.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, gaussian_sample, log_sum_exp, SeededRng, Vector};
use crate::schedule::NoiseSchedule;

/// A prompt: token ids with `None` standing for the empty token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Option<u32>>", into = "Vec<Option<u32>>")]
pub struct Condition {
    tokens: Vec<Option<u32>>,
}

impl Condition {
    pub fn new(tokens: Vec<Option<u32>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidCondition("condition needs at least one token".into()));
        }
        Ok(Self { tokens })
    }

    pub fn from_ids(ids: &[u32]) -> Result<Self> {
        Self::new(ids.iter().map(|&i| Some(i)).collect())
    }

    /// All-empty condition of length `n`.
    pub fn unconditional(n: usize) -> Self {
        Self {
            tokens: vec![None; n.max(1)],
        }
    }

    pub fn tokens(&self) -> &[Option<u32>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_unconditional(&self) -> bool {
        self.tokens.iter().all(Option::is_none)
    }

    pub fn active_tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().flatten().copied()
    }
}

impl TryFrom<Vec<Option<u32>>> for Condition {
    type Error = Error;

    fn try_from(tokens: Vec<Option<u32>>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Condition> for Vec<Option<u32>> {
    fn from(c: Condition) -> Self {
        c.tokens
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| t.map_or_else(|| "_".to_string(), |v| v.to_string()))
            .collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

/// Replaces `round(ratio * n)` uniformly chosen positions with the empty token.
pub fn mask_condition(c: &Condition, ratio: f64, rng: &mut SeededRng) -> Result<Condition> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidCondition(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = c.len();
    let k = ((ratio * n as f64).round() as usize).min(n);
    let mut tokens = c.tokens.clone();
    for i in index::sample(rng, n, k) {
        tokens[i] = None;
    }
    Condition::new(tokens)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vector,
    /// Diagonal of the covariance.
    pub variance: Vector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawMixture {
    components: Vec<Component>,
    token_map: BTreeMap<u32, Vec<usize>>,
}

/// Labeled Gaussian mixture with diagonal covariances.
///
/// JSON form:
///
/// ```json
/// {
///   "components": [{"weight": 0.5, "mean": [1.0, 0.0], "variance": [0.2, 0.2]}, ...],
///   "token_map": {"0": [0], "1": [1]}
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMixture", into = "RawMixture")]
pub struct GaussianMixtureModel {
    components: Vec<Component>,
    token_map: BTreeMap<u32, Vec<usize>>,
    dim: usize,
}

impl TryFrom<RawMixture> for GaussianMixtureModel {
    type Error = Error;

    fn try_from(raw: RawMixture) -> Result<Self> {
        Self::new(raw.components, raw.token_map)
    }
}

impl From<GaussianMixtureModel> for RawMixture {
    fn from(g: GaussianMixtureModel) -> Self {
        RawMixture {
            components: g.components,
            token_map: g.token_map,
        }
    }
}

impl GaussianMixtureModel {
    pub fn new(components: Vec<Component>, token_map: BTreeMap<u32, Vec<usize>>) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidMixture(m));
        let Some(first) = components.first() else {
            return bad("mixture has no components".into());
        };
        let dim = first.mean.dim();
        if dim == 0 {
            return bad("dimension must be at least 1".into());
        }
        for (k, comp) in components.iter().enumerate() {
            if comp.mean.dim() != dim || comp.variance.dim() != dim {
                return bad(format!("component {k} has inconsistent dimension"));
            }
            if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                return bad(format!("component {k} weight {} not positive", comp.weight));
            }
            if !comp.mean.is_finite() {
                return bad(format!("component {k} mean is not finite"));
            }
            if comp.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad(format!("component {k} variance not positive"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {total}, expected 1"));
        }
        if token_map.is_empty() {
            return bad("token_map is empty".into());
        }
        let mut covered = vec![false; components.len()];
        for (tok, set) in &token_map {
            if set.is_empty() {
                return bad(format!("token {tok} maps to no components"));
            }
            for &k in set {
                if k >= components.len() {
                    return bad(format!("token {tok} maps to missing component {k}"));
                }
                covered[k] = true;
            }
        }
        if let Some(k) = covered.iter().position(|c| !c) {
            return bad(format!("component {k} is not reachable from any token"));
        }
        Ok(Self {
            components,
            token_map,
            dim,
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawMixture = serde_json::from_str(s).map_err(|e| Error::InvalidMixture(e.to_string()))?;
        Self::try_from(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Deterministic toy mixture: `vocab` classes with `per_token` components each, equal weights.
    ///
    /// In two dimensions the class centres sit evenly on a circle of radius 2.5;
    /// otherwise they are seeded random directions at the same radius. All
    /// components share one anisotropic diagonal covariance, so class log-odds
    /// are linear in `x` and neighbouring classes overlap.
    pub fn toy(dim: usize, vocab: usize, per_token: usize, seed: u64) -> Result<Self> {
        if dim == 0 || vocab == 0 || per_token == 0 {
            return Err(Error::InvalidMixture(
                "toy mixture needs dim, vocab, per_token >= 1".into(),
            ));
        }
        const RADIUS: f64 = 2.5;
        const SPREAD: f64 = 0.5;
        let mut rng = SeededRng::new(seed);
        let variance: Vector = (0..dim).map(|_| 0.4 + 0.4 * rng.uniform()).collect::<Vec<_>>().into();
        let weight = 1.0 / (vocab * per_token) as f64;
        let mut components = Vec::with_capacity(vocab * per_token);
        let mut token_map = BTreeMap::new();
        for k in 0..vocab {
            let centre: Vector = if dim == 2 {
                let a = 2.0 * PI * k as f64 / vocab as f64;
                Vector::from([RADIUS * a.cos(), RADIUS * a.sin()])
            } else {
                let u = gaussian_sample(&mut rng, dim);
                u.scale(RADIUS / u.norm())
            };
            let mut ids = Vec::with_capacity(per_token);
            for _ in 0..per_token {
                let offset = gaussian_sample(&mut rng, dim);
                let offset = offset.scale(SPREAD / offset.norm());
                ids.push(components.len());
                components.push(Component {
                    weight,
                    mean: centre.add(&offset)?,
                    variance: variance.clone(),
                });
            }
            token_map.insert(k as u32, ids);
        }
        // Equal weights may not sum to exactly 1 after rounding.
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components, token_map)
    }

    /// The default toy: 8 tokens, 2 components per token.
    pub fn default_toy(dim: usize) -> Result<Self> {
        Self::toy(dim, 8, 2, 0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn token_map(&self) -> &BTreeMap<u32, Vec<usize>> {
        &self.token_map
    }

    pub fn vocab(&self) -> Vec<u32> {
        self.token_map.keys().copied().collect()
    }

    /// Component indices selected by `c`: the union over its non-empty tokens, or every component if none.
    pub fn component_set(&self, c: &Condition) -> Result<Vec<usize>> {
        if c.is_unconditional() {
            return Ok((0..self.components.len()).collect());
        }
        let mut set = BTreeSet::new();
        for tok in c.active_tokens() {
            let ids = self
                .token_map
                .get(&tok)
                .ok_or_else(|| Error::InvalidCondition(format!("token {tok} not in vocabulary")))?;
            set.extend(ids.iter().copied());
        }
        Ok(set.into_iter().collect())
    }

    /// Per-component `log w_k + log N(x; sqrt(ab) mu_k, ab Sigma_k + (1 - ab) I)`.
    fn component_log_terms(&self, x: &[f64], alpha_bar: f64, set: &[usize]) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        set.iter()
            .map(|&k| {
                let comp = &self.components[k];
                let mut acc = comp.weight.ln();
                for i in 0..self.dim {
                    let v = alpha_bar * comp.variance[i] + (1.0 - alpha_bar);
                    let r = x[i] - sa * comp.mean[i];
                    acc -= 0.5 * ((2.0 * PI * v).ln() + r * r / v);
                }
                acc
            })
            .collect()
    }

    /// `log p_ab(x | set)` for the mixture restricted to `set` (weights renormalized) and diffused to level `ab`.
    pub fn log_density_in(&self, x: &[f64], alpha_bar: f64, set: &[usize]) -> Result<f64> {
        check_dims(x, &self.components[0].mean)?;
        let terms = self.component_log_terms(x, alpha_bar, set);
        let log_w: Vec<f64> = set.iter().map(|&k| self.components[k].weight.ln()).collect();
        Ok(log_sum_exp(&terms) - log_sum_exp(&log_w))
    }

    /// `log p_ab(x | c)`.
    pub fn log_density(&self, x: &[f64], alpha_bar: f64, c: &Condition) -> Result<f64> {
        let set = self.component_set(c)?;
        self.log_density_in(x, alpha_bar, &set)
    }

    /// `grad_x log p_ab(x | set)`.
    pub fn score_in(&self, x: &[f64], alpha_bar: f64, set: &[usize]) -> Result<Vector> {
        check_dims(x, &self.components[0].mean)?;
        if set.is_empty() {
            return Err(Error::InvalidCondition("condition selects no components".into()));
        }
        let terms = self.component_log_terms(x, alpha_bar, set);
        let lse = log_sum_exp(&terms);
        let sa = alpha_bar.sqrt();
        let mut score = vec![0.0; self.dim];
        for (&k, term) in set.iter().zip(&terms) {
            let r = (term - lse).exp();
            if r == 0.0 {
                continue;
            }
            let comp = &self.components[k];
            for i in 0..self.dim {
                let v = alpha_bar * comp.variance[i] + (1.0 - alpha_bar);
                score[i] -= r * (x[i] - sa * comp.mean[i]) / v;
            }
        }
        Ok(score.into())
    }

    /// `log p(c | x)` under the clean mixture: the posterior mass of the components `c` selects.
    pub fn log_class_posterior(&self, x: &[f64], c: &Condition) -> Result<f64> {
        check_dims(x, &self.components[0].mean)?;
        let set = self.component_set(c)?;
        if set.len() == self.components.len() {
            return Ok(0.0);
        }
        let members: BTreeSet<usize> = set.iter().copied().collect();
        let others: Vec<usize> = (0..self.components.len()).filter(|k| !members.contains(k)).collect();
        let inside = log_sum_exp(&self.component_log_terms(x, 1.0, &set));
        let outside = log_sum_exp(&self.component_log_terms(x, 1.0, &others));
        // log(A / (A + B)) = -softplus(log B - log A)
        let d = outside - inside;
        Ok(if d > 0.0 {
            -(d + (-d).exp().ln_1p())
        } else {
            -d.exp().ln_1p()
        })
    }

    /// Mean and covariance of the clean mixture restricted to `c`.
    pub fn moments(&self, c: &Condition) -> Result<(Vector, Vec<Vec<f64>>)> {
        let set = self.component_set(c)?;
        let total: f64 = set.iter().map(|&k| self.components[k].weight).sum();
        let mut mean = vec![0.0; self.dim];
        for &k in &set {
            let w = self.components[k].weight / total;
            for i in 0..self.dim {
                mean[i] += w * self.components[k].mean[i];
            }
        }
        let mut cov = vec![vec![0.0; self.dim]; self.dim];
        for &k in &set {
            let comp = &self.components[k];
            let w = comp.weight / total;
            for i in 0..self.dim {
                for j in 0..self.dim {
                    let mut v = (comp.mean[i] - mean[i]) * (comp.mean[j] - mean[j]);
                    if i == j {
                        v += comp.variance[i];
                    }
                    cov[i][j] += w * v;
                }
            }
        }
        Ok((mean.into(), cov))
    }
}

/// `eps_theta(x_t, t, c)`.
pub trait NoisePredictor: Send + Sync {
    fn dim(&self) -> usize;

    fn predict(&self, x: &[f64], t: usize, c: &Condition, sched: &NoiseSchedule) -> Result<Vector>;

    fn predict_unconditional(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
        self.predict(x, t, &Condition::unconditional(1), sched)
    }

    /// Prediction for `c` with the components in `released` added back to its restriction.
    fn predict_relaxed(
        &self,
        _x: &[f64],
        _t: usize,
        _c: &Condition,
        _sched: &NoiseSchedule,
        _released: &[usize],
    ) -> Result<Vector> {
        Err(Error::Unsupported("component dropout"))
    }

    /// Number of mixture components, for predictors that expose them.
    fn component_count(&self) -> Option<usize> {
        None
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: usize, c: &Condition, sched: &NoiseSchedule) -> Result<Vector> {
        (**self).predict(x, t, c, sched)
    }

    fn predict_unconditional(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
        (**self).predict_unconditional(x, t, sched)
    }

    fn predict_relaxed(
        &self,
        x: &[f64],
        t: usize,
        c: &Condition,
        sched: &NoiseSchedule,
        released: &[usize],
    ) -> Result<Vector> {
        (**self).predict_relaxed(x, t, c, sched, released)
    }

    fn component_count(&self) -> Option<usize> {
        (**self).component_count()
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict(&self, x: &[f64], t: usize, c: &Condition, sched: &NoiseSchedule) -> Result<Vector> {
        (**self).predict(x, t, c, sched)
    }

    fn predict_unconditional(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
        (**self).predict_unconditional(x, t, sched)
    }

    fn predict_relaxed(
        &self,
        x: &[f64],
        t: usize,
        c: &Condition,
        sched: &NoiseSchedule,
        released: &[usize],
    ) -> Result<Vector> {
        (**self).predict_relaxed(x, t, c, sched, released)
    }

    fn component_count(&self) -> Option<usize> {
        (**self).component_count()
    }
}

/// Exact noise prediction `-sqrt(1 - ab_t) * grad log p_t(x | c)` for a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    gmm: Arc<GaussianMixtureModel>,
}

impl AnalyticPredictor {
    pub fn new(gmm: GaussianMixtureModel) -> Self {
        Self { gmm: Arc::new(gmm) }
    }

    pub fn from_shared(gmm: Arc<GaussianMixtureModel>) -> Self {
        Self { gmm }
    }

    pub fn mixture(&self) -> &GaussianMixtureModel {
        &self.gmm
    }

    fn noise_for_set(&self, x: &[f64], t: usize, sched: &NoiseSchedule, set: &[usize]) -> Result<Vector> {
        noise_for_set(&self.gmm, x, t, sched, set)
    }
}

fn noise_for_set(
    gmm: &GaussianMixtureModel,
    x: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    set: &[usize],
) -> Result<Vector> {
    sched.check_step(t, 1, sched.steps())?;
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("predictor input"));
    }
    let ab = sched.alpha_bar(t);
    let score = gmm.score_in(x, ab, set)?;
    Ok(score.scale(-(1.0 - ab).sqrt()))
}

/// Free-function form of [`AnalyticPredictor::predict`].
pub fn analytic_noise(
    gmm: &GaussianMixtureModel,
    x: &[f64],
    t: usize,
    c: &Condition,
    sched: &NoiseSchedule,
) -> Result<Vector> {
    let set = gmm.component_set(c)?;
    noise_for_set(gmm, x, t, sched, &set)
}

impl NoisePredictor for AnalyticPredictor {
    fn dim(&self) -> usize {
        self.gmm.dim()
    }

    fn predict(&self, x: &[f64], t: usize, c: &Condition, sched: &NoiseSchedule) -> Result<Vector> {
        let set = self.gmm.component_set(c)?;
        self.noise_for_set(x, t, sched, &set)
    }

    fn predict_unconditional(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
        let set: Vec<usize> = (0..self.gmm.components().len()).collect();
        self.noise_for_set(x, t, sched, &set)
    }

    fn predict_relaxed(
        &self,
        x: &[f64],
        t: usize,
        c: &Condition,
        sched: &NoiseSchedule,
        released: &[usize],
    ) -> Result<Vector> {
        let mut set: BTreeSet<usize> = self.gmm.component_set(c)?.into_iter().collect();
        set.extend(released.iter().copied().filter(|&k| k < self.gmm.components().len()));
        let set: Vec<usize> = set.into_iter().collect();
        self.noise_for_set(x, t, sched, &set)
    }

    fn component_count(&self) -> Option<usize> {
        Some(self.gmm.components().len())
    }
}

/// How a weak predictor degrades its base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    /// `eps + strength * z`, with `z` a fixed standard-normal draw per timestep.
    AdditiveNoise { strength: f64, seed: u64 },
    /// Each component outside the condition's restriction is released into it
    /// with probability `1 - keep`; `keep = 0` gives the unconditional prediction.
    ComponentDropout { keep: f64, seed: u64 },
}

impl Degradation {
    pub const KINDS: [&'static str; 2] = ["additive_noise", "component_dropout"];

    /// Parses a degradation from JSON, reporting unknown `kind`s as such.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let kind = value
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::InvalidSpec("degradation needs a string `kind`".into()))?;
        if !Self::KINDS.contains(&kind) {
            return Err(Error::UnknownDegradation(kind.to_string()));
        }
        serde_json::from_value(value.clone()).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::AdditiveNoise { strength, .. } if !(strength >= 0.0 && strength.is_finite()) => {
                Err(Error::InvalidSpec(format!("noise strength {strength} must be >= 0")))
            }
            Degradation::ComponentDropout { keep, .. } if !(0.0..=1.0).contains(&keep) => {
                Err(Error::InvalidSpec(format!("dropout keep {keep} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// A predictor producing `eps_weak` from a base predictor.
#[derive(Debug, Clone)]
pub struct PerturbedPredictor<P> {
    base: P,
    degradation: Degradation,
    released: Vec<usize>,
}

pub fn perturbed_predictor<P: NoisePredictor>(base: P, degradation: Degradation) -> Result<PerturbedPredictor<P>> {
    degradation.validate()?;
    let released = match degradation {
        Degradation::AdditiveNoise { .. } => Vec::new(),
        Degradation::ComponentDropout { keep, seed } => {
            let n = base.component_count().ok_or(Error::Unsupported("component dropout"))?;
            let mut rng = SeededRng::new(seed);
            (0..n).filter(|_| rng.uniform() >= keep).collect()
        }
    };
    Ok(PerturbedPredictor {
        base,
        degradation,
        released,
    })
}

impl<P> PerturbedPredictor<P> {
    pub fn degradation(&self) -> &Degradation {
        &self.degradation
    }
}

impl<P: NoisePredictor> NoisePredictor for PerturbedPredictor<P> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn predict(&self, x: &[f64], t: usize, c: &Condition, sched: &NoiseSchedule) -> Result<Vector> {
        match self.degradation {
            Degradation::AdditiveNoise { strength, seed } => {
                let eps = self.base.predict(x, t, c, sched)?;
                if strength == 0.0 {
                    return Ok(eps);
                }
                let z = gaussian_sample(&mut SeededRng::substream(seed, t as u64), eps.dim());
                eps.add_scaled(strength, &z)
            }
            Degradation::ComponentDropout { .. } => {
                if self.released.is_empty() {
                    self.base.predict(x, t, c, sched)
                } else {
                    self.base.predict_relaxed(x, t, c, sched, &self.released)
                }
            }
        }
    }

    fn predict_unconditional(&self, x: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vector> {
        self.base.predict_unconditional(x, t, sched)
    }

    fn component_count(&self) -> Option<usize> {
        self.base.component_count()
    }
}
