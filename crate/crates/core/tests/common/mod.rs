//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numerics; each helper is written
//! from the textbook definition so it can catch mistakes in the fast paths.

#![allow(dead_code)]

use std::collections::BTreeSet;

use guidelab::predictor::Component;
use guidelab::{Condition, GaussianMixtureModel};

/// Projection of `v` onto `d` by one Gram–Schmidt step over the basis `{d, v}`.
pub fn gram_schmidt(v: &[f64], d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dd = 0.0;
    let mut vd = 0.0;
    for i in 0..d.len() {
        dd += d[i] * d[i];
        vd += v[i] * d[i];
    }
    let e: Vec<f64> = d.iter().map(|x| x / dd.sqrt()).collect();
    let along = vd / dd.sqrt();
    let parallel: Vec<f64> = e.iter().map(|x| along * x).collect();
    let orth: Vec<f64> = v.iter().zip(&parallel).map(|(a, b)| a - b).collect();
    (parallel, orth)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Components selected by `c`: union over the non-empty tokens, everything when all are empty.
pub fn selected(gmm: &GaussianMixtureModel, c: &Condition) -> Vec<usize> {
    let mut set = BTreeSet::new();
    for tok in c.tokens().iter().flatten() {
        set.extend(gmm.token_map()[tok].iter().copied());
    }
    if set.is_empty() {
        (0..gmm.components().len()).collect()
    } else {
        set.into_iter().collect()
    }
}

fn diffused_log_pdf(comp: &Component, x: &[f64], ab: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let var = ab * comp.variance[i] + (1.0 - ab);
        let r = x[i] - ab.sqrt() * comp.mean[i];
        acc += -0.5 * (r * r / var + (2.0 * std::f64::consts::PI * var).ln());
    }
    acc
}

/// `log p_t(x | c)` with each component diffused to `N(sqrt(ab) mu, ab Sigma + (1 - ab) I)`.
pub fn log_pt(gmm: &GaussianMixtureModel, x: &[f64], ab: f64, c: &Condition) -> f64 {
    let set = selected(gmm, c);
    let total: f64 = set.iter().map(|&k| gmm.components()[k].weight).sum();
    let terms: Vec<f64> = set
        .iter()
        .map(|&k| {
            let comp = &gmm.components()[k];
            (comp.weight / total).ln() + diffused_log_pdf(comp, x, ab)
        })
        .collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of [`log_pt`].
pub fn fd_grad(gmm: &GaussianMixtureModel, x: &[f64], ab: f64, c: &Condition, h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (log_pt(gmm, &up, ab, c) - log_pt(gmm, &dn, ab, c)) / (2.0 * h)
        })
        .collect()
}

/// Mean and full covariance of the clean mixture restricted to `c`.
pub fn conditional_moments(gmm: &GaussianMixtureModel, c: &Condition) -> (Vec<f64>, Vec<Vec<f64>>) {
    let set = selected(gmm, c);
    let d = gmm.dim();
    let total: f64 = set.iter().map(|&k| gmm.components()[k].weight).sum();
    let mut mean = vec![0.0; d];
    let mut second = vec![vec![0.0; d]; d];
    for &k in &set {
        let comp = &gmm.components()[k];
        let w = comp.weight / total;
        for i in 0..d {
            mean[i] += w * comp.mean[i];
            for j in 0..d {
                let own = if i == j { comp.variance[i] } else { 0.0 };
                second[i][j] += w * (own + comp.mean[i] * comp.mean[j]);
            }
        }
    }
    let cov = (0..d)
        .map(|i| (0..d).map(|j| second[i][j] - mean[i] * mean[j]).collect())
        .collect();
    (mean, cov)
}

/// Counts wins of `star` against `other` the slow way; returns `(wins, ties)`.
pub fn brute_force_wins(star: &[f64], other: &[f64], higher_is_better: bool) -> (usize, usize) {
    let mut wins = 0;
    let mut ties = 0;
    for i in 0..star.len() {
        if star[i] == other[i] {
            ties += 1;
        } else if (star[i] > other[i]) == higher_is_better {
            wins += 1;
        }
    }
    (wins, ties)
}
