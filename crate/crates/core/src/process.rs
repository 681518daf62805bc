//! Common view of the 1-D and matrix processes as staged paths.
//!
//! Stage 0 holds the initial points `X_0` (one point in 1-D, d points for
//! the matrix process). Stage `t >= 1` holds `X_t = xbar_{t-1} + Y_t`, with
//! `Y_t` stored as `exp(s_t) M_t`, `||M_t|| = 1`. In 1-D, `Y_t` is the scalar
//! deviation `y_t` and `xbar_{t-1} = x_{t-1}`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrixprocess::{
    build_positions_dd, ln_density_f, matrix_norm, provenance, sample_initial_stage, sample_matrix_chain, MatrixChain,
    MatrixProcessParams,
};
use crate::path::{PointSet, SequencePath};
use crate::process1d::{build_positions, sample_deviation_path, DeviationPath, InitialDensity, Process1DParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "process", rename_all = "lowercase")]
pub enum ProcessSpec {
    /// The scalar Gaussian scaling process.
    Scalar(Process1DParams),
    /// The d x d matrix chain.
    Matrix(MatrixProcessParams),
}

impl ProcessSpec {
    pub fn dim(&self) -> usize {
        match self {
            ProcessSpec::Scalar(_) => 1,
            ProcessSpec::Matrix(p) => p.d,
        }
    }

    pub fn kappa(&self) -> f64 {
        match self {
            ProcessSpec::Scalar(p) => p.kappa,
            ProcessSpec::Matrix(p) => p.kappa,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            ProcessSpec::Scalar(_) => None,
            ProcessSpec::Matrix(p) => Some(p.alpha),
        }
    }

    pub fn n_steps(&self) -> usize {
        match self {
            ProcessSpec::Scalar(p) => p.n_steps,
            ProcessSpec::Matrix(p) => p.n_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessSpec::Scalar(p) => p.validate(),
            ProcessSpec::Matrix(p) => p.validate(),
        }
    }

    pub fn with_kappa(&self, kappa: f64) -> ProcessSpec {
        let mut s = self.clone();
        match &mut s {
            ProcessSpec::Scalar(p) => p.kappa = kappa,
            ProcessSpec::Matrix(p) => p.kappa = kappa,
        }
        s
    }

    pub fn with_steps(&self, n_steps: usize) -> ProcessSpec {
        let mut s = self.clone();
        match &mut s {
            ProcessSpec::Scalar(p) => p.n_steps = n_steps,
            ProcessSpec::Matrix(p) => p.n_steps = n_steps,
        }
        s
    }

    pub fn with_seed(&self, seed: u64) -> ProcessSpec {
        let mut s = self.clone();
        match &mut s {
            ProcessSpec::Scalar(p) => p.seed = seed,
            ProcessSpec::Matrix(p) => p.seed = seed,
        }
        s
    }

    fn initial(&self) -> &InitialDensity {
        match self {
            ProcessSpec::Scalar(p) => &p.initial,
            ProcessSpec::Matrix(p) => &p.initial,
        }
    }

    /// Log density of the stage-0 points (coordinates i.i.d. from the
    /// initial density).
    pub(crate) fn ln_initial(&self, coords: &[f64]) -> f64 {
        let f0 = self.initial();
        coords.iter().map(|&x| f0.ln_pdf(x)).sum()
    }

    /// Log density of `Y_1`, up to an additive constant.
    pub(crate) fn ln_first(&self, y1: &DMatrix<f64>) -> f64 {
        match self {
            // g_1 is the unit normal regardless of kappa.
            ProcessSpec::Scalar(_) => -0.5 * y1[(0, 0)] * y1[(0, 0)],
            ProcessSpec::Matrix(p) => ln_density_f(y1, p.kappa, p.alpha),
        }
    }

    /// Log density of a step `W = Y_{t-1}^-1 Y_t`, up to an additive
    /// constant. The `|det Y_{t-1}|^-d` factor is applied by the caller.
    pub(crate) fn ln_step(&self, w: &DMatrix<f64>) -> f64 {
        match self {
            ProcessSpec::Scalar(p) => {
                let r = w[(0, 0)];
                -r * r / (2.0 * p.kappa * p.kappa)
            }
            ProcessSpec::Matrix(p) => ln_density_f(w, p.kappa, p.alpha),
        }
    }

    /// Samples a full staged path (initial points included).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ProcessPath> {
        match self {
            ProcessSpec::Scalar(p) => {
                let x0 = p.initial.sample(rng);
                let dev = sample_deviation_path(p, rng);
                Ok(ProcessPath::from_deviations(x0, &dev))
            }
            ProcessSpec::Matrix(p) => {
                let x0 = sample_initial_stage(p, rng);
                let chain = sample_matrix_chain(p, rng)?;
                Ok(ProcessPath::from_chain(p, &x0, &chain))
            }
        }
    }

    /// Samples only the log-magnitudes `ln ||Y_t||`, `t = 1..n`.
    pub fn sample_log_scales<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            ProcessSpec::Scalar(p) => Ok(sample_deviation_path(p, rng).log_magnitudes()),
            ProcessSpec::Matrix(p) => Ok(sample_matrix_chain(p, rng)?.log_scales().to_vec()),
        }
    }
}

/// A sampled (or synthetic) path together with its scaled deviations.
#[derive(Clone, Debug)]
pub struct ProcessPath {
    pub(crate) spec: ProcessSpec,
    pub(crate) log_scale: Vec<f64>,
    pub(crate) shapes: Vec<DMatrix<f64>>,
    /// `Y_1`, then `W_t = Y_{t-1}^-1 Y_t` for `t >= 2`.
    pub(crate) increments: Vec<DMatrix<f64>>,
    /// `M_t^-1 = exp(r_t) N_t`, carried by recursion so that it stays
    /// accurate after `M_t` has become numerically rank-deficient.
    inv_shapes: Vec<DMatrix<f64>>,
    inv_log_scale: Vec<f64>,
    pub(crate) sequence: SequencePath,
}

/// `N_t` and `r_t` from `M_t^-1 = (||Y_t|| / ||Y_{t-1}||) W_t^-1 M_{t-1}^-1`.
/// A singular increment poisons the rest with NaN.
fn inverse_shapes(
    shapes: &[DMatrix<f64>],
    log_scale: &[f64],
    increments: &[DMatrix<f64>],
) -> (Vec<DMatrix<f64>>, Vec<f64>) {
    let n = shapes.len();
    if shapes.first().is_some_and(|m| m.nrows() == 1) {
        return (shapes.iter().map(|m| m.map(|v| 1.0 / v)).collect(), vec![0.0; n]);
    }
    let mut inv = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for t in 0..n {
        let (raw, base) = match (t, increments[t].clone().try_inverse()) {
            (0, Some(y_inv)) => (y_inv, log_scale[0]),
            (_, Some(w_inv)) => (w_inv * &inv[t - 1], r[t - 1] + log_scale[t] - log_scale[t - 1]),
            (_, None) => (DMatrix::from_element(shapes[t].nrows(), shapes[t].ncols(), f64::NAN), f64::NAN),
        };
        let nu = matrix_norm(&raw);
        r.push(base + nu.ln());
        inv.push(raw / nu);
    }
    (inv, r)
}

impl ProcessPath {
    pub fn from_deviations(x0: f64, dev: &DeviationPath) -> ProcessPath {
        ProcessPath::assemble(
            ProcessSpec::Scalar(dev.params().clone()),
            dev.log_magnitudes(),
            dev.deviations().iter().map(|d| DMatrix::from_element(1, 1, d.sign())).collect(),
            (0..dev.len())
                .map(|i| DMatrix::from_element(1, 1, if i == 0 { dev.deviations()[0].value() } else { dev.ratio(i - 1) }))
                .collect(),
            build_positions(x0, dev),
        )
    }

    pub fn from_chain(params: &MatrixProcessParams, x0: &DMatrix<f64>, chain: &MatrixChain) -> ProcessPath {
        let mut sequence = build_positions_dd(x0, chain);
        sequence.set_provenance(provenance(params));
        ProcessPath::assemble(
            ProcessSpec::Matrix(params.clone()),
            chain.log_scales().to_vec(),
            chain.shapes().to_vec(),
            chain.steps().iter().map(|w| w.matrix().clone()).collect(),
            sequence,
        )
    }

    pub(crate) fn assemble(
        spec: ProcessSpec,
        log_scale: Vec<f64>,
        shapes: Vec<DMatrix<f64>>,
        increments: Vec<DMatrix<f64>>,
        sequence: SequencePath,
    ) -> ProcessPath {
        let (inv_shapes, inv_log_scale) = inverse_shapes(&shapes, &log_scale, &increments);
        ProcessPath { spec, log_scale, shapes, increments, inv_shapes, inv_log_scale, sequence }
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.sequence.dim()
    }

    /// Number of deviation stages `n` (the path has `n + 1` stages).
    pub fn steps(&self) -> usize {
        self.log_scale.len()
    }

    pub fn sequence(&self) -> &SequencePath {
        &self.sequence
    }

    /// `ln ||Y_t||` for `t = 1..=n`.
    pub fn log_scales(&self) -> &[f64] {
        &self.log_scale
    }

    /// Points of stage `t` (0-based), flat, column by column.
    pub fn stage_coords(&self, t: usize) -> &[f64] {
        let d = self.dim();
        let per = d * d;
        &self.sequence.coords()[t * per..(t + 1) * per]
    }

    pub(crate) fn stage_point(&self, t: usize, i: usize) -> &[f64] {
        self.sequence.point(t * self.dim() + i)
    }

    /// `M_t` (1-based stage index `t >= 1`).
    pub(crate) fn shape(&self, t: usize) -> &DMatrix<f64> {
        &self.shapes[t - 1]
    }

    /// `Y_1` for `t = 1`, `W_t` for `t >= 2`.
    pub(crate) fn step(&self, t: usize) -> &DMatrix<f64> {
        &self.increments[t - 1]
    }

    /// `M_t^-1 g`, scaled in log space so that large `r_t` cannot overflow
    /// when `g` is small.
    pub(crate) fn shape_inverse_mul(&self, t: usize, g: &DMatrix<f64>) -> DMatrix<f64> {
        let ng = &self.inv_shapes[t - 1] * g;
        let nu = matrix_norm(&ng);
        if nu == 0.0 {
            return ng;
        }
        ng * ((self.inv_log_scale[t - 1] + nu.ln()).exp() / nu)
    }

    /// `s_t` (1-based stage index `t >= 1`).
    pub(crate) fn scale(&self, t: usize) -> f64 {
        self.log_scale[t - 1]
    }

    /// Number of stages available as RN factors (`n + 1`).
    pub fn max_factors(&self) -> usize {
        self.steps() + 1
    }
}
