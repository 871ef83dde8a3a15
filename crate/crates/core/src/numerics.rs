//! Dense vector math and seeded randomness.
//!
//! Everything is `f64`. Latents, noise predictions and guidance directions
//! all live in [`Vector`], which is a thin newtype over `Vec<f64>` so the
//! projection and combination code can check dimensions in one place.

use std::ops::{Deref, DerefMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative guard under which a direction is treated as zero: `|d| < EPS * sqrt(dim)`.
pub const ZERO_DIRECTION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(components: Vec<f64>) -> Self {
        Self(components)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + k * other`
    pub fn add_scaled(&self, k: f64, other: &Vector) -> Result<Vector> {
        self.zip_with(other, |a, b| a + k * b)
    }

    /// Elementwise `f(self[i], other[i])`.
    pub fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        check_dims(self, other)?;
        Ok(Vector(self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b)).collect()))
    }

    pub fn max_abs_diff(&self, other: &Vector) -> Result<f64> {
        check_dims(self, other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(v: [f64; N]) -> Self {
        Self(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Split of a vector into components along and across a direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub parallel: Vector,
    pub orthogonal: Vector,
    /// Signed multiple of the direction: `parallel = coefficient * direction`.
    pub coefficient: f64,
}

/// Whether `|d|` falls under the zero-direction guard for its dimension.
pub fn is_zero_direction(norm: f64, dim: usize) -> bool {
    norm < ZERO_DIRECTION_EPS * (dim.max(1) as f64).sqrt()
}

/// Projects `v` onto `direction`.
///
/// The orthogonal part is taken as `v - parallel`, so the two parts sum back
/// to `v` up to one rounding per component.
pub fn project(v: &[f64], direction: &[f64]) -> Result<Projection> {
    check_dims(v, direction)?;
    let dd = dot(direction, direction)?;
    let norm = dd.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("projection direction"));
    }
    if is_zero_direction(norm, direction.len()) {
        return Err(Error::ZeroDirection { norm });
    }
    let coefficient = dot(v, direction)? / dd;
    let parallel: Vector = direction.iter().map(|d| coefficient * d).collect::<Vec<_>>().into();
    let orthogonal: Vector = v
        .iter()
        .zip(parallel.iter())
        .map(|(a, p)| a - p)
        .collect::<Vec<_>>()
        .into();
    Ok(Projection {
        parallel,
        orthogonal,
        coefficient,
    })
}

/// Seeded random stream.
///
/// Backed by ChaCha8 so a seed yields the same draws on every platform.
/// Independent streams for parallel workers come from [`SeededRng::substream`].
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `stream` of the generator keyed by `seed`. Streams never overlap.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.inner)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Draws a `dim`-dimensional standard normal vector.
pub fn gaussian_sample(rng: &mut SeededRng, dim: usize) -> Vector {
    (0..dim).map(|_| rng.standard_normal()).collect::<Vec<_>>().into()
}

/// `log(sum(exp(values)))` without overflow. Returns `-inf` for empty input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
