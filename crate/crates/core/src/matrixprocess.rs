//! The d > 1 matrix construction: entrywise norm, condition number, the
//! Gaussian-type density `f(Y) ~ exp(-(||Y|| k(Y)^alpha)^2 / (2 kappa^2))`,
//! an exact rejection sampler for it, and the multiplicative chain
//! `Y_j = Y_{j-1} W_j` whose conditional law is
//! `f(Y_{j-1}^-1 Y_j) / |det Y_{j-1}|^d`.
//!
//! The normalization constant of `f` is never computed; it cancels in every
//! ratio used here.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path::{Provenance, SequencePath};
use crate::process1d::{InitialDensity, MAX_STEPS};

/// Matrices with `min tau < SINGULAR_TOL * max tau` count as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Entrywise (Frobenius) norm, not the operator norm.
pub fn matrix_norm(y: &DMatrix<f64>) -> f64 {
    let m = y.amax();
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * y.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt()
}

/// Singular values in descending order.
pub fn singular_values(y: &DMatrix<f64>) -> Vec<f64> {
    if y.nrows() == 2 && y.ncols() == 2 {
        return singular_values_2x2(y);
    }
    let mut tau: Vec<f64> = y.clone().singular_values().iter().copied().collect();
    tau.sort_by(|a, b| b.total_cmp(a));
    tau
}

/// Closed form: `tau_1^2 + tau_2^2 = ||Y||^2`, `tau_1 tau_2 = |det Y|`.
fn singular_values_2x2(y: &DMatrix<f64>) -> Vec<f64> {
    let m = y.amax();
    if m == 0.0 || !m.is_finite() {
        return vec![m, if m == 0.0 { 0.0 } else { f64::NAN }];
    }
    let (a, b, c, e) = (y[(0, 0)] / m, y[(0, 1)] / m, y[(1, 0)] / m, y[(1, 1)] / m);
    let n2 = a * a + b * b + c * c + e * e;
    let det = (a * e - b * c).abs();
    let disc = ((a - e) * (a - e) + (b + c) * (b + c)).sqrt() * ((a + e) * (a + e) + (b - c) * (b - c)).sqrt();
    let t1 = (0.5 * (n2 + disc)).sqrt();
    let t2 = if t1 > 0.0 { det / t1 } else { 0.0 };
    vec![m * t1, m * t2]
}

/// `(k(Y), ||Y||^2)` without an SVD; `None` when `Y` is numerically
/// singular.
fn fast_condition(y: &DMatrix<f64>) -> Option<(f64, f64)> {
    let d = y.nrows();
    let n2: f64 = y.iter().map(|v| v * v).sum();
    let k = if d == 2 {
        let det = (y[(0, 0)] * y[(1, 1)] - y[(0, 1)] * y[(1, 0)]).abs();
        n2 / det
    } else {
        let inv = y.clone().lu().try_inverse()?;
        n2.sqrt() * matrix_norm(&inv)
    };
    (k.is_finite() && k < d as f64 / SINGULAR_TOL).then_some((k, n2))
}

fn check_invertible(tau: &[f64]) -> Result<()> {
    let (max, min) = (tau[0], tau[tau.len() - 1]);
    if !(min > SINGULAR_TOL * max) {
        return Err(Error::SingularMatrix { ratio: if max > 0.0 { min / max } else { 0.0 } });
    }
    Ok(())
}

/// `k(Y) = [sum_{i,j} (tau_i / tau_j)^2]^{1/2}` from singular values.
pub fn condition_number_from_singular_values(tau: &[f64]) -> Result<f64> {
    check_invertible(tau)?;
    let mut s = 0.0;
    for a in tau {
        for b in tau {
            let r = a / b;
            s += r * r;
        }
    }
    Ok(s.sqrt())
}

/// Condition number `k(Y)` computed through the SVD.
pub fn condition_number(y: &DMatrix<f64>) -> Result<f64> {
    condition_number_from_singular_values(&singular_values(y))
}

/// `||Y|| * ||Y^-1||` through an explicit LU inverse; independent of the SVD
/// route in [`condition_number`].
pub fn condition_number_by_inverse(y: &DMatrix<f64>) -> Result<f64> {
    check_invertible(&singular_values(y))?;
    let inv = y.clone().lu().try_inverse().ok_or(Error::SingularMatrix { ratio: 0.0 })?;
    Ok(matrix_norm(y) * matrix_norm(&inv))
}

/// `ln f(Y)` without the normalization constant; `-inf` on singular input.
pub fn ln_density_f(y: &DMatrix<f64>, kappa: f64, alpha: f64) -> f64 {
    let tau = singular_values(y);
    match condition_number_from_singular_values(&tau) {
        Ok(k) => {
            let norm = tau.iter().map(|t| t * t).sum::<f64>().sqrt();
            let s = norm * k.powf(alpha);
            -s * s / (2.0 * kappa * kappa)
        }
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Unnormalized `f(Y)`; zero on singular input.
pub fn density_f(y: &DMatrix<f64>, kappa: f64, alpha: f64) -> f64 {
    ln_density_f(y, kappa, alpha).exp()
}

/// An accepted matrix sample with cached singular values.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixDeviation {
    y: DMatrix<f64>,
    tau: Vec<f64>,
}

impl MatrixDeviation {
    pub fn new(y: DMatrix<f64>) -> Result<MatrixDeviation> {
        if !y.is_square() {
            return Err(Error::DimensionMismatch { expected: y.nrows(), found: y.ncols() });
        }
        let tau = singular_values(&y);
        check_invertible(&tau)?;
        Ok(MatrixDeviation { y, tau })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.tau
    }

    pub fn norm(&self) -> f64 {
        self.tau.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    pub fn condition_number(&self) -> f64 {
        condition_number_from_singular_values(&self.tau).expect("checked at construction")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixProcessParams {
    pub d: usize,
    pub kappa: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub initial: InitialDensity,
}

fn default_alpha() -> f64 {
    1.0
}

impl MatrixProcessParams {
    pub fn new(d: usize, kappa: f64, alpha: f64, n_steps: usize, seed: u64) -> Result<MatrixProcessParams> {
        let p = MatrixProcessParams { d, kappa, alpha, n_steps, seed, initial: InitialDensity::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid("d", "must be at least 2 for the matrix process"));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(invalid("kappa", "must be positive"));
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(invalid("alpha", "must be at least 1"));
        }
        if self.n_steps < 2 {
            return Err(invalid("n_steps", "must be at least 2"));
        }
        if self.n_steps * self.d > MAX_STEPS {
            return Err(invalid("n_steps", format!("n_steps * d must not exceed {MAX_STEPS}")));
        }
        self.initial.validate()
    }
}

/// One proposal of the rejection sampler.
#[derive(Clone, Debug)]
pub struct Proposal {
    pub y: DMatrix<f64>,
    /// `exp(-(k^{2 alpha} - d^{2 alpha}) ||Y||^2 / (2 kappa^2))`; 0 if singular.
    pub accept_prob: f64,
    pub condition_number: Option<f64>,
}

/// Exact sampler for `f` by rejection from i.i.d. normal entries with
/// standard deviation `kappa / d^alpha`. The envelope is valid because
/// `k(Y) >= d`, so the acceptance probability never exceeds 1.
#[derive(Clone, Debug)]
pub struct RejectionSampler {
    d: usize,
    kappa: f64,
    alpha: f64,
    proposal: Normal<f64>,
    proposed: u64,
    accepted: u64,
    window_proposed: u64,
    window_accepted: u64,
    max_accept_prob: f64,
    min_condition_ratio: f64,
}

pub const STALL_WINDOW: u64 = 100_000;
pub const MIN_ACCEPT_RATE: f64 = 1e-4;

impl RejectionSampler {
    pub fn new(d: usize, kappa: f64, alpha: f64) -> RejectionSampler {
        let sd = kappa / (d as f64).powf(alpha);
        RejectionSampler {
            d,
            kappa,
            alpha,
            proposal: Normal::new(0.0, sd).expect("positive standard deviation"),
            proposed: 0,
            accepted: 0,
            window_proposed: 0,
            window_accepted: 0,
            max_accept_prob: 0.0,
            min_condition_ratio: f64::INFINITY,
        }
    }

    pub fn for_params(p: &MatrixProcessParams) -> RejectionSampler {
        RejectionSampler::new(p.d, p.kappa, p.alpha)
    }

    /// Acceptance probability of a given matrix under this envelope.
    pub fn acceptance_probability(&self, y: &DMatrix<f64>) -> (f64, Option<f64>) {
        let Some((k, norm2)) = fast_condition(y) else {
            return (0.0, None);
        };
        let d = self.d as f64;
        let excess = (k.powf(2.0 * self.alpha) - d.powf(2.0 * self.alpha)).max(0.0);
        ((-excess * norm2 / (2.0 * self.kappa * self.kappa)).exp(), Some(k))
    }

    pub fn propose<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Proposal {
        let y = DMatrix::from_fn(self.d, self.d, |_, _| self.proposal.sample(rng));
        let (accept_prob, k) = self.acceptance_probability(&y);
        assert!(accept_prob <= 1.0, "envelope violated: acceptance probability {accept_prob}");
        self.max_accept_prob = self.max_accept_prob.max(accept_prob);
        if let Some(k) = k {
            self.min_condition_ratio = self.min_condition_ratio.min(k / self.d as f64);
        }
        Proposal { y, accept_prob, condition_number: k }
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<MatrixDeviation> {
        loop {
            let p = self.propose(rng);
            self.proposed += 1;
            self.window_proposed += 1;
            let u: f64 = rng.random();
            if p.accept_prob > 0.0 && u < p.accept_prob {
                if let Ok(m) = MatrixDeviation::new(p.y) {
                    self.accepted += 1;
                    self.window_accepted += 1;
                    return Ok(m);
                }
            }
            if self.window_proposed >= STALL_WINDOW {
                let rate = self.window_accepted as f64 / self.window_proposed as f64;
                if rate < MIN_ACCEPT_RATE {
                    return Err(Error::SamplerStalled {
                        rate,
                        window: self.window_proposed,
                        min_rate: MIN_ACCEPT_RATE,
                    });
                }
                self.window_proposed = 0;
                self.window_accepted = 0;
            }
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposed as f64
    }

    pub fn proposed(&self) -> u64 {
        self.proposed
    }

    /// Largest acceptance probability seen on any proposal.
    pub fn max_accept_prob(&self) -> f64 {
        self.max_accept_prob
    }

    /// Smallest `k(Y) / d` seen on any invertible proposal.
    pub fn min_condition_ratio(&self) -> f64 {
        self.min_condition_ratio
    }
}

/// Draws one `W ~ f`.
pub fn sample_w<R: Rng + ?Sized>(params: &MatrixProcessParams, rng: &mut R) -> Result<MatrixDeviation> {
    RejectionSampler::for_params(params).sample(rng)
}

/// A matrix chain `Y_1 = W_1`, `Y_j = Y_{j-1} W_j`, stored as the steps
/// `W_j` plus `Y_j = exp(s_j) M_j` with `||M_j|| = 1`.
#[derive(Clone, Debug)]
pub struct MatrixChain {
    d: usize,
    steps: Vec<MatrixDeviation>,
    log_scale: Vec<f64>,
    shapes: Vec<DMatrix<f64>>,
    accept_rate: f64,
}

impl MatrixChain {
    /// Chain from explicit steps (`steps[0]` is `Y_1`).
    pub fn from_steps(steps: Vec<MatrixDeviation>) -> MatrixChain {
        let d = steps[0].matrix().nrows();
        let mut log_scale = Vec::with_capacity(steps.len());
        let mut shapes = Vec::with_capacity(steps.len());
        let first = steps[0].matrix();
        let n0 = matrix_norm(first);
        log_scale.push(n0.ln());
        shapes.push(first / n0);
        for w in &steps[1..] {
            let prev = shapes.last().expect("nonempty");
            let p = prev * w.matrix();
            let nu = matrix_norm(&p);
            log_scale.push(log_scale.last().expect("nonempty") + nu.ln());
            shapes.push(p / nu);
        }
        MatrixChain { d, steps, log_scale, shapes, accept_rate: f64::NAN }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `W_j` for `j = 1..=n` (index 0 is `Y_1` itself).
    pub fn steps(&self) -> &[MatrixDeviation] {
        &self.steps
    }

    /// `ln ||Y_j||`.
    pub fn log_scales(&self) -> &[f64] {
        &self.log_scale
    }

    /// `Y_j / ||Y_j||`.
    pub fn shapes(&self) -> &[DMatrix<f64>] {
        &self.shapes
    }

    /// `Y_j` as plain f64 (index 0 is `Y_1`); may underflow or overflow.
    pub fn y(&self, i: usize) -> DMatrix<f64> {
        &self.shapes[i] * self.log_scale[i].exp()
    }

    pub fn accept_rate(&self) -> f64 {
        self.accept_rate
    }
}

pub fn sample_matrix_chain<R: Rng + ?Sized>(params: &MatrixProcessParams, rng: &mut R) -> Result<MatrixChain> {
    let mut sampler = RejectionSampler::for_params(params);
    let steps = (0..params.n_steps).map(|_| sampler.sample(rng)).collect::<Result<Vec<_>>>()?;
    let mut chain = MatrixChain::from_steps(steps);
    chain.accept_rate = sampler.acceptance_rate();
    Ok(chain)
}

/// `f(Y_prev^-1 Y_j) / |det Y_prev|^d`, unnormalized.
pub fn conditional_density_dd(y_j: &DMatrix<f64>, y_prev: &DMatrix<f64>, kappa: f64, alpha: f64) -> Result<f64> {
    let d = y_prev.nrows();
    check_invertible(&singular_values(y_prev))?;
    let lu = y_prev.clone().lu();
    let w = lu.solve(y_j).ok_or(Error::SingularMatrix { ratio: 0.0 })?;
    let det = lu.determinant().abs();
    Ok(density_f(&w, kappa, alpha) / det.powi(d as i32))
}

/// Column centroid of a d x d block of points.
pub fn centroid(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.ncols() as f64;
    (0..x.nrows()).map(|i| x.row(i).iter().sum::<f64>() / n).collect()
}

/// Flat point sequence `X_0, X_1, ...` with `X_j = xbar_{j-1} + Y_j`, each
/// stage contributing its d columns.
pub fn build_positions_dd(x0: &DMatrix<f64>, chain: &MatrixChain) -> SequencePath {
    let d = x0.nrows();
    let mut path = SequencePath::with_capacity(d, d * (chain.len() + 1));
    for col in x0.column_iter() {
        path.push(col.as_slice());
    }
    let mut center = centroid(x0);
    for i in 0..chain.len() {
        let y = chain.y(i);
        let mut stage = DMatrix::zeros(d, d);
        for c in 0..d {
            let col: Vec<f64> = (0..d).map(|r| center[r] + y[(r, c)]).collect();
            path.push(&col);
            stage.set_column(c, &nalgebra::DVector::from_vec(col));
        }
        center = centroid(&stage);
    }
    path
}

/// Samples `X_0` with i.i.d. entries from the initial density.
pub fn sample_initial_stage<R: Rng + ?Sized>(params: &MatrixProcessParams, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(params.d, params.d, |_, _| params.initial.sample(rng))
}

/// JSONL chain record.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainRecord {
    pub seed: u64,
    pub kappa: f64,
    pub alpha: f64,
    pub d: usize,
    #[serde(rename = "X0")]
    pub x0: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<Vec<f64>>>,
    pub accept_rate: f64,
    /// `ln ||Y_j||`.
    pub log_norm: Vec<f64>,
}

/// Row-major nested form.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ChainRecord {
    pub fn new(params: &MatrixProcessParams, x0: &DMatrix<f64>, chain: &MatrixChain) -> ChainRecord {
        ChainRecord {
            seed: params.seed,
            kappa: params.kappa,
            alpha: params.alpha,
            d: params.d,
            x0: rows(x0),
            w: chain.steps.iter().map(|w| rows(w.matrix())).collect(),
            accept_rate: chain.accept_rate,
            log_norm: chain.log_scale.clone(),
        }
    }
}

pub(crate) fn provenance(params: &MatrixProcessParams) -> Provenance {
    Provenance { seed: params.seed, kappa: params.kappa, alpha: Some(params.alpha) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::PointSet;
    use crate::seed::stream_rng;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn random_orthogonal<R: Rng>(d: usize, rng: &mut R) -> DMatrix<f64> {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        g.qr().q()
    }

    #[test]
    fn norms() {
        assert_relative_eq!(matrix_norm(&DMatrix::identity(2, 2)), 2f64.sqrt());
        let y = dmatrix![2.0, 0.0; 0.0, 0.5];
        assert_relative_eq!(matrix_norm(&y), 4.25f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(matrix_norm(&(&y * 3.0)), 3.0 * matrix_norm(&y), max_relative = 1e-15);
    }

    #[test]
    fn condition_number_examples() {
        for d in 2..=4 {
            assert_relative_eq!(condition_number(&DMatrix::identity(d, d)).unwrap(), d as f64, max_relative = 1e-14);
        }
        let y = dmatrix![2.0, 0.0; 0.0, 0.5];
        assert_relative_eq!(condition_number(&y).unwrap(), 4.25, max_relative = 1e-14);
        assert_relative_eq!(condition_number_by_inverse(&y).unwrap(), 4.25, max_relative = 1e-14);
        let mut rng = stream_rng(1, 0);
        let p = random_orthogonal(3, &mut rng);
        let y = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let scaled = &p * &y * 7.5;
        assert_relative_eq!(condition_number(&scaled).unwrap(), condition_number(&y).unwrap(), max_relative = 1e-10);
    }

    #[test]
    fn singular_matrices_are_rejected() {
        let y = dmatrix![1.0, 2.0; 2.0, 4.0];
        assert!(matches!(condition_number(&y), Err(Error::SingularMatrix { .. })));
        assert_eq!(density_f(&y, 1.0, 1.0), 0.0);
        assert!(MatrixDeviation::new(y.clone()).is_err());
        assert!(conditional_density_dd(&DMatrix::identity(2, 2), &y, 1.0, 1.0).is_err());
        let near = dmatrix![1.0, 0.0; 0.0, 1e-13];
        assert!(condition_number(&near).is_err());
    }

    #[test]
    fn density_examples() {
        for d in 2..=4usize {
            let c = 0.7;
            let kappa = 1.3;
            let y = DMatrix::identity(d, d) * c;
            let expect = (-(c * c) * (d * d * d) as f64 / (2.0 * kappa * kappa)).exp();
            assert_relative_eq!(density_f(&y, kappa, 1.0), expect, max_relative = 1e-12);
        }
        // Same norm, growing condition number.
        let mut last = f64::INFINITY;
        for s in [1.0, 1.5, 2.0, 4.0] {
            let y = dmatrix![s, 0.0; 0.0, 1.0 / s];
            let y = &y / matrix_norm(&y);
            let f = density_f(&y, 1.0, 1.0);
            assert!(f < last || s == 1.0);
            last = f;
        }
    }

    #[test]
    fn conditional_density_identities() {
        let mut rng = stream_rng(4, 0);
        let prev: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-2.0..2.0));
        let det = prev.determinant().abs();
        let at_identity = conditional_density_dd(&prev, &prev, 1.1, 1.0).unwrap();
        assert_relative_eq!(at_identity, (-8.0 / (2.0 * 1.21f64)).exp() / det.powi(2), max_relative = 1e-10);
        for _ in 0..20 {
            let w = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
            let v = conditional_density_dd(&(&prev * &w), &prev, 1.1, 1.5).unwrap();
            assert_relative_eq!(v * det.powi(2), density_f(&w, 1.1, 1.5), max_relative = 1e-9);
        }
    }

    #[test]
    fn scaled_orthogonal_proposals_always_accepted() {
        let mut rng = stream_rng(2, 0);
        for d in 2..=4 {
            let s = RejectionSampler::new(d, 0.8, 1.5);
            for _ in 0..50 {
                let q = random_orthogonal(d, &mut rng) * rng.random_range(0.1..3.0);
                assert!(s.acceptance_probability(&q).0 >= 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn sampler_envelope_and_rate() {
        let p = MatrixProcessParams::new(2, 1.0, 1.0, 10, 0).unwrap();
        let mut s = RejectionSampler::for_params(&p);
        let mut rng = stream_rng(6, 0);
        for _ in 0..2000 {
            let w = s.sample(&mut rng).unwrap();
            assert!(w.condition_number() >= 2.0 * (1.0 - 1e-12));
        }
        assert!(s.max_accept_prob() <= 1.0);
        assert!(s.min_condition_ratio() >= 1.0 - 1e-12);
        let rate = s.acceptance_rate();
        assert!(rate > 0.05 && rate <= 1.0, "{rate}");
    }

    #[test]
    fn chain_steps_reconstruct() {
        let p = MatrixProcessParams::new(2, 1.0, 1.0, 30, 0).unwrap();
        let chain = sample_matrix_chain(&p, &mut stream_rng(8, 0)).unwrap();
        for j in 1..chain.len() {
            let prev = chain.y(j - 1);
            let w = prev.clone().lu().solve(&chain.y(j)).unwrap();
            let diff = (&w - chain.steps()[j].matrix()).abs().max();
            assert!(diff <= 1e-10 * matrix_norm(&w).max(1.0), "stage {j}: {diff}");
        }
        assert_relative_eq!(matrix_norm(&chain.y(0)), matrix_norm(chain.steps()[0].matrix()), max_relative = 1e-14);
    }

    #[test]
    fn positions_hand_computed() {
        let x0 = dmatrix![0.0, 2.0; 0.0, 0.0];
        let chain = MatrixChain::from_steps(vec![MatrixDeviation::new(DMatrix::identity(2, 2)).unwrap()]);
        let path = build_positions_dd(&x0, &chain);
        assert_eq!(path.len(), 4);
        assert_eq!(path.point(2), &[2.0, 0.0]);
        assert_eq!(path.point(3), &[1.0, 1.0]);
    }

    #[test]
    fn underflowed_chain_repeats_centroid() {
        // Y_j underflows to the zero matrix after a few stages.
        let tiny = MatrixDeviation::new(DMatrix::identity(2, 2) * 1e-200).unwrap();
        let chain = MatrixChain::from_steps(vec![tiny.clone(); 5]);
        let x0 = dmatrix![1.0, 3.0; 0.0, 2.0];
        let path = build_positions_dd(&x0, &chain);
        for i in 6..path.len() {
            assert_eq!(path.point(i), &[2.0, 1.0]);
        }
    }

    #[test]
    fn overflowed_chain_escapes_without_nan() {
        let big = MatrixDeviation::new(dmatrix![1e200, 0.0; 0.0, -1e200]).unwrap();
        let chain = MatrixChain::from_steps(vec![big; 4]);
        let path = build_positions_dd(&DMatrix::zeros(2, 2), &chain);
        assert!(path.coords().iter().all(|v| !v.is_nan()));
        assert!(path.escaped_from().is_some());
    }
}
