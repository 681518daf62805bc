//! The one-dimensional self-similar Gaussian process.
//!
//! `y_1 ~ N(0, 1)` and, given `y_j`, `y_{j+1} ~ N(0, (kappa |y_j|)^2)`.
//! Positions are `x_k = x_0 + sum_{j <= k} y_j` with `x_0` drawn from a
//! nowhere-vanishing normal density.
//!
//! Deviations shrink or grow geometrically, so a path of 10^4 steps leaves
//! the f64 range within a few hundred steps. They are therefore stored as
//! `(ln|y_j|, sign)`; the ratio `y_{j+1} / y_j` is always representable.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path::{Provenance, SequencePath};

pub const MAX_STEPS: usize = 1_000_000;

/// Normal density with configurable location and scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialDensity {
    pub loc: f64,
    pub scale: f64,
}

impl Default for InitialDensity {
    fn default() -> Self {
        InitialDensity { loc: 0.0, scale: 1.0 }
    }
}

impl InitialDensity {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(invalid("initial.scale", "must be positive"));
        }
        if !self.loc.is_finite() {
            return Err(invalid("initial.loc", "must be finite"));
        }
        Ok(())
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = (x - self.loc) / self.scale;
        -0.5 * z * z - self.scale.ln() - 0.5 * (2.0 * PI).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.loc + self.scale * z
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Process1DParams {
    pub kappa: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub initial: InitialDensity,
    #[serde(default)]
    pub seed: u64,
}

impl Process1DParams {
    pub fn new(kappa: f64, n_steps: usize, seed: u64) -> Result<Process1DParams> {
        let p = Process1DParams { kappa, n_steps, initial: InitialDensity::default(), seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(invalid("kappa", "must be positive"));
        }
        if self.n_steps < 2 {
            return Err(invalid("n_steps", "must be at least 2"));
        }
        if self.n_steps > MAX_STEPS {
            return Err(invalid("n_steps", format!("must not exceed {MAX_STEPS}")));
        }
        self.initial.validate()
    }
}

/// A nonzero deviation in log-magnitude form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Deviation {
    pub ln_abs: f64,
    pub negative: bool,
}

impl Deviation {
    pub fn from_value(y: f64) -> Result<Deviation> {
        if y == 0.0 || !y.is_finite() {
            return Err(Error::Domain(format!("deviation must be finite and nonzero (got {y})")));
        }
        Ok(Deviation { ln_abs: y.abs().ln(), negative: y < 0.0 })
    }

    /// The deviation as an f64; may underflow to a signed zero or overflow
    /// to a signed infinity.
    pub fn value(&self) -> f64 {
        let m = self.ln_abs.exp();
        if self.negative {
            -m
        } else {
            m
        }
    }

    pub fn sign(&self) -> f64 {
        if self.negative {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationPath {
    deviations: Vec<Deviation>,
    params: Process1DParams,
}

impl DeviationPath {
    /// Builds a path from explicit deviation values; zeros are rejected.
    pub fn from_values(values: &[f64], params: Process1DParams) -> Result<DeviationPath> {
        let deviations = values.iter().map(|&y| Deviation::from_value(y)).collect::<Result<_>>()?;
        Ok(DeviationPath { deviations, params })
    }

    pub fn from_deviations(deviations: Vec<Deviation>, params: Process1DParams) -> DeviationPath {
        DeviationPath { deviations, params }
    }

    pub fn deviations(&self) -> &[Deviation] {
        &self.deviations
    }

    pub fn params(&self) -> &Process1DParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.deviations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deviations.is_empty()
    }

    /// `y_{j+1} / y_j` for `j` in `1..n` (0-based: ratio of entries i+1 and i).
    pub fn ratio(&self, i: usize) -> f64 {
        let (a, b) = (self.deviations[i], self.deviations[i + 1]);
        let m = (b.ln_abs - a.ln_abs).exp();
        if a.negative != b.negative {
            -m
        } else {
            m
        }
    }

    pub fn log_magnitudes(&self) -> Vec<f64> {
        self.deviations.iter().map(|d| d.ln_abs).collect()
    }

    pub fn values(&self) -> Vec<f64> {
        self.deviations.iter().map(Deviation::value).collect()
    }
}

fn nonzero_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z != 0.0 {
            return z;
        }
    }
}

/// Samples `y_1, ..., y_n` sequentially. An exact zero draw is redrawn at the
/// same step.
pub fn sample_deviation_path<R: Rng + ?Sized>(params: &Process1DParams, rng: &mut R) -> DeviationPath {
    let ln_kappa = params.kappa.ln();
    let mut deviations = Vec::with_capacity(params.n_steps);
    let z = nonzero_normal(rng);
    let mut current = Deviation { ln_abs: z.abs().ln(), negative: z < 0.0 };
    deviations.push(current);
    for _ in 1..params.n_steps {
        let z = nonzero_normal(rng);
        current = Deviation { ln_abs: ln_kappa + current.ln_abs + z.abs().ln(), negative: z < 0.0 };
        deviations.push(current);
    }
    DeviationPath { deviations, params: params.clone() }
}

/// `g(y_next | y_prev) = (2 pi)^{-1/2} / (kappa |y_prev|) exp(-(y_next / y_prev)^2 / (2 kappa^2))`.
pub fn conditional_density_1d(y_next: f64, y_prev: f64, kappa: f64) -> Result<f64> {
    ln_conditional_density_1d(y_next, y_prev, kappa).map(f64::exp)
}

pub fn ln_conditional_density_1d(y_next: f64, y_prev: f64, kappa: f64) -> Result<f64> {
    if y_prev == 0.0 {
        return Err(Error::Domain("conditional density undefined for y_prev = 0".into()));
    }
    let ratio = y_next / y_prev;
    Ok(-0.5 * (2.0 * PI).ln() - (kappa * y_prev.abs()).ln() - ratio * ratio / (2.0 * kappa * kappa))
}

/// Positions `x_k = x_0 + sum_{j <= k} y_j`, `k = 0..n`.
pub fn build_positions(x0: f64, dev: &DeviationPath) -> SequencePath {
    let mut path = SequencePath::with_capacity(1, dev.len() + 1);
    let mut x = x0;
    path.push(&[x]);
    for d in &dev.deviations {
        x += d.value();
        path.push(&[x]);
    }
    path.set_provenance(Provenance { seed: dev.params.seed, kappa: dev.params.kappa, alpha: None });
    path
}

/// JSONL path record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PathRecord {
    pub seed: u64,
    pub kappa: f64,
    pub d: usize,
    pub x0: f64,
    /// Deviation values; entries outside the f64 range appear as 0 or null.
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// `ln|y_j|`, always finite.
    pub y_ln_abs: Vec<f64>,
    pub y_sign: Vec<i8>,
}

impl PathRecord {
    pub fn new(x0: f64, dev: &DeviationPath) -> PathRecord {
        let positions = build_positions(x0, dev);
        PathRecord {
            seed: dev.params.seed,
            kappa: dev.params.kappa,
            d: 1,
            x0,
            y: dev.values(),
            x: positions.coords().to_vec(),
            y_ln_abs: dev.log_magnitudes(),
            y_sign: dev.deviations.iter().map(|d| if d.negative { -1 } else { 1 }).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PointSet;
    use crate::seed::stream_rng;
    use approx::assert_relative_eq;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn params(kappa: f64, n: usize) -> Process1DParams {
        Process1DParams::new(kappa, n, 0).unwrap()
    }

    #[test]
    fn validation_messages() {
        let err = Process1DParams::new(-1.0, 10, 0).unwrap_err();
        assert_eq!(err.to_string(), "kappa must be positive");
        assert!(Process1DParams::new(1.0, 1, 0).is_err());
        assert!(Process1DParams::new(1.0, MAX_STEPS + 1, 0).is_err());
    }

    #[test]
    fn density_values() {
        let c = (2.0 * PI).sqrt().recip();
        assert_relative_eq!(conditional_density_1d(0.0, 1.0, 1.0).unwrap(), c, max_relative = 1e-15);
        assert_relative_eq!(conditional_density_1d(0.0, 1.0, 1.0).unwrap(), 0.398_942_3, epsilon = 1e-7);
        assert_relative_eq!(conditional_density_1d(1.0, 1.0, 1.0).unwrap(), 0.241_970_7, epsilon = 1e-7);
        assert!(conditional_density_1d(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn density_scaling() {
        for &(yn, yp, k, lam) in &[(0.3, -1.2, 0.7, 3.0), (-2.0, 0.5, 2.0, 0.01), (1e-3, 1e-2, 1.0, 1e5)] {
            let base = conditional_density_1d(yn, yp, k).unwrap();
            let scaled = conditional_density_1d(lam * yn, lam * yp, k).unwrap();
            assert_relative_eq!(scaled, base / lam, max_relative = 1e-12);
        }
    }

    #[test]
    fn positions_are_cumulative_sums() {
        let dev = DeviationPath::from_values(&[1.0, 0.5], params(1.0, 2)).unwrap();
        assert_eq!(build_positions(0.0, &dev).coords(), &[0.0, 1.0, 1.5]);
        let dev = DeviationPath::from_values(&[-1.0, -1.0, -1.0], params(1.0, 3)).unwrap();
        assert_eq!(build_positions(5.0, &dev).coords(), &[5.0, 4.0, 3.0, 2.0]);
        assert!(DeviationPath::from_values(&[1.0, 0.0], params(1.0, 2)).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = params(0.8, 500);
        let a = sample_deviation_path(&p, &mut stream_rng(42, 0));
        let b = sample_deviation_path(&p, &mut stream_rng(42, 0));
        assert_eq!(a, b);
        let c = sample_deviation_path(&p, &mut stream_rng(42, 1));
        assert_ne!(a, c);
    }

    #[test]
    fn small_kappa_shrinks() {
        let p = params(0.2, 10_000);
        let shrunk = (0..1000)
            .filter(|&i| {
                let d = sample_deviation_path(&p, &mut stream_rng(5, i));
                d.deviations[d.len() - 1].ln_abs < d.deviations[0].ln_abs
            })
            .count();
        assert!(shrunk >= 990, "{shrunk}");
    }

    #[test]
    fn normalized_innovations_are_standard_normal() {
        let p = params(1.3, 20_000);
        let d = sample_deviation_path(&p, &mut stream_rng(17, 0));
        let mut z: Vec<f64> = (0..d.len() - 1).map(|i| d.ratio(i) / p.kappa).collect();
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let ks = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = normal.cdf(v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.358 / n.sqrt(), "KS statistic {ks}");
    }

    #[test]
    fn condensed_tail_diameter_shrinks() {
        let p = params(0.3, 400);
        for seed in 0..20 {
            let d = sample_deviation_path(&p, &mut stream_rng(seed, 0));
            let x = build_positions(0.0, &d);
            let tail_diam = |n: usize| {
                let end = x.point(n)[0];
                (n / 2..=n).map(|k| (x.point(k)[0] - end).abs()).fold(0.0, f64::max)
            };
            assert!(tail_diam(40) <= tail_diam(20));
            assert!(tail_diam(400) <= tail_diam(40));
        }
    }

    #[test]
    fn log_density_matches_direct_formula() {
        let ln = ln_conditional_density_1d(0.7, -0.2, 0.9).unwrap();
        let direct = (2.0 * PI).sqrt().recip() / (0.9 * 0.2) * (-(0.7f64 / 0.2).powi(2) / (2.0 * 0.81)).exp();
        assert_relative_eq!(ln.exp(), direct, max_relative = 1e-13);
    }
}
