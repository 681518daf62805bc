//! Radon-Nikodym products for the self-similar processes.
//!
//! For a path `omega` with stages `X_0, X_1, ...` and a diffeomorphism `phi`
//! acting pointwise, factor `j` (stage `t = j - 1`) is
//!
//! ```text
//! u_j = p_t(phi X_t | phi X_{<t}) / p_t(X_t | X_{<t}) * prod_i J_phi(x_{t,i})
//! ```
//!
//! where `p_0` is the initial density, `p_1` the law of `Y_1`, and for
//! `t >= 2` the conditional law `f(Y_{t-1}^-1 Y_t) / |det Y_{t-1}|^d`. The
//! product of the first `k` factors is the exact density ratio of the first
//! `k` stages, so its expectation is 1 at every truncation.
//!
//! Deviations far below the float resolution of the positions are handled by
//! working with `Y'_t / ||Y_t||`: the transformed deviation is
//! `Y_t + mean_l [delta(x_{t,i}) - delta(x_{t-1,l})]` with
//! `delta = phi - id`. Each difference of `delta` is evaluated directly or,
//! for steps shorter than `DERIVATIVE_SWITCH` times the support radius, as
//! a Gauss-Legendre average of `D delta` along the segment. The linear part
//! `D phi(c)` at a reference point is factored out of both stages entering a
//! factor, so that a fully collapsed stage contributes exactly 0.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffeo::{bump, Diffeo};
use crate::error::{Error, Result};
use crate::matrixprocess::matrix_norm;
use crate::path::{PointSet, SequencePath};
use crate::process::{ProcessPath, ProcessSpec};
use crate::seed::replicate;

/// Relative step length below which differences of the displacement are
/// taken from its derivative.
pub const DERIVATIVE_SWITCH: f64 = 1e-3;

const GAUSS_NODES: [f64; 4] = [0.069_431_844_202_973_71, 0.330_009_478_207_571_9, 0.669_990_521_792_428_1, 0.930_568_155_797_026_3];
const GAUSS_WEIGHTS: [f64; 4] = [0.173_927_422_568_726_9, 0.326_072_577_431_273_1, 0.326_072_577_431_273_1, 0.173_927_422_568_726_9];

struct StageInfo {
    fixed: Vec<bool>,
    disp: Vec<Vec<f64>>,
}

impl StageInfo {
    fn new(path: &ProcessPath, phi: &Diffeo, t: usize) -> StageInfo {
        let d = path.dim();
        let mut fixed = Vec::with_capacity(d);
        let mut disp = Vec::with_capacity(d);
        for i in 0..d {
            let x = path.stage_point(t, i);
            let f = phi.is_fixed_at(x);
            fixed.push(f);
            disp.push(if f { vec![0.0; d] } else { phi.displacement(x) });
        }
        StageInfo { fixed, disp }
    }

    fn all_fixed(&self) -> bool {
        self.fixed.iter().all(|f| *f)
    }
}

fn is_zero(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| *v == 0.0)
}

/// Linear part `A = D delta(c)` of the displacement at the reference point
/// `c = x_{stage,0}`.
struct Linear<'a> {
    a: &'a DMatrix<f64>,
    center: &'a [f64],
    stage: usize,
}

/// `(Y'_t - Y_t) / exp(s_t) - A M_t` for `t >= 1` (`A = 0` without a
/// linear part). The reference point must lie in stage `t - 1` or `t`.
fn correction(
    path: &ProcessPath,
    phi: &Diffeo,
    t: usize,
    cur: &StageInfo,
    prev: &StageInfo,
    linear: Option<&Linear>,
) -> DMatrix<f64> {
    let d = path.dim();
    let shape = path.shape(t);
    let mut out = DMatrix::zeros(d, d);
    if cur.all_fixed() && prev.all_fixed() {
        if let Some(lin) = linear {
            out -= lin.a * shape;
        }
        return out;
    }
    let scale = path.scale(t).exp();
    // Offsets (xbar_{t-1} - x_{t-1,l}) / exp(s_t).
    let base: Vec<Vec<f64>> = if t >= 2 {
        let ratio = (path.scale(t - 1) - path.scale(t)).exp();
        let prev_shape = path.shape(t - 1);
        let mean: Vec<f64> = (0..d).map(|r| prev_shape.row(r).iter().sum::<f64>() / d as f64).collect();
        (0..d).map(|l| (0..d).map(|r| ratio * (mean[r] - prev_shape[(r, l)])).collect()).collect()
    } else {
        let pts: Vec<&[f64]> = (0..d).map(|l| path.stage_point(0, l)).collect();
        let mean: Vec<f64> = (0..d).map(|r| pts.iter().map(|p| p[r]).sum::<f64>() / d as f64).collect();
        let inv = (-path.scale(t)).exp();
        (0..d).map(|l| (0..d).map(|r| (mean[r] - pts[l][r]) * inv).collect()).collect()
    };
    // Offset of x_{t-1,l} from the reference point, in units of exp(s_t),
    // taken from the scaled deviations rather than from the positions.
    let offset = |l: usize| -> Vec<f64> {
        match linear {
            Some(lin) if lin.stage == t => (0..d).map(|r| -(shape[(r, 0)] + base[l][r])).collect(),
            Some(_) if t >= 2 => {
                let ratio = (path.scale(t - 1) - path.scale(t)).exp();
                let m = path.shape(t - 1);
                (0..d).map(|r| ratio * (m[(r, l)] - m[(r, 0)])).collect()
            }
            _ => {
                let (p, q) = (path.stage_point(0, l), path.stage_point(0, 0));
                (0..d).map(|r| (p[r] - q[r]) / scale).collect()
            }
        }
    };
    let threshold = DERIVATIVE_SWITCH * phi.length_scale();
    let w = 1.0 / d as f64;
    for i in 0..d {
        let a = path.stage_point(t, i);
        for l in 0..d {
            let step: Vec<f64> = (0..d).map(|r| shape[(r, i)] + base[l][r]).collect();
            let mut jac = DMatrix::zeros(d, d);
            if !(cur.fixed[i] && prev.fixed[l]) {
                let h = scale * step.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(h < threshold) {
                    for r in 0..d {
                        out[(r, i)] += w * (cur.disp[i][r] - prev.disp[l][r]) / scale;
                    }
                    if let Some(lin) = linear {
                        for r in 0..d {
                            let v: f64 = (0..d).map(|c| lin.a[(r, c)] * step[c]).sum();
                            out[(r, i)] -= w * v;
                        }
                    }
                    continue;
                }
                match linear {
                    Some(lin) => {
                        // Average of D delta(node) - A, from offsets to the reference.
                        let off = offset(l);
                        for (s, g) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
                            let v: Vec<f64> = (0..d).map(|r| scale * (off[r] + s * step[r])).collect();
                            jac += phi.displacement_jacobian_increment(lin.center, &v) * g;
                        }
                    }
                    None => {
                        let b = path.stage_point(t - 1, l);
                        for (s, g) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
                            let node: Vec<f64> = a.iter().zip(b).map(|(p, q)| q + s * (p - q)).collect();
                            jac += phi.displacement_jacobian(&node) * g;
                        }
                    }
                }
            } else if let Some(lin) = linear {
                jac -= lin.a;
            }
            for r in 0..d {
                let v: f64 = (0..d).map(|c| jac[(r, c)] * step[c]).sum();
                out[(r, i)] += w * v;
            }
        }
    }
    out
}

/// Transformed increment of stage `t >= 2` and the pieces of its factor.
struct StepUpdate {
    w_new: DMatrix<f64>,
    /// `ln |det Y'_{t-1}| - ln |det Y_{t-1}| - ln J(c)`.
    ln_det_rest: f64,
    ln_jac_ref: f64,
}

fn step_update(path: &ProcessPath, phi: &Diffeo, t: usize, infos: [&StageInfo; 3]) -> Result<StepUpdate> {
    let [before, prev, cur] = infos;
    let d = path.dim();
    let c = path.stage_point(t - 1, 0);
    let reference_fixed = phi.is_fixed_at(c);
    let (a, ln_jac_ref) = if reference_fixed {
        (None, 0.0)
    } else {
        (Some(phi.displacement_jacobian(c)), phi.jacobian(c).ln())
    };
    let linear = a.as_ref().map(|a| Linear { a, center: c, stage: t - 1 });
    let h_prev = correction(path, phi, t - 1, prev, before, linear.as_ref());
    let h_cur = correction(path, phi, t, cur, prev, linear.as_ref());
    let w = path.step(t);
    if is_zero(&h_prev) && is_zero(&h_cur) {
        return Ok(StepUpdate { w_new: w.clone(), ln_det_rest: 0.0, ln_jac_ref });
    }
    let (g_prev, g_cur) = match &a {
        Some(a) => {
            let b = DMatrix::identity(d, d) + a;
            (solve(&b, &h_prev)?, solve(&b, &h_cur)?)
        }
        None => (h_prev, h_cur),
    };
    // (M + G)^-1 = (I + X)^-1 M^-1 with X = M^-1 G.
    let ratio = (path.scale(t) - path.scale(t - 1)).exp();
    let rhs = &g_cur * ratio - &g_prev * w;
    let i_plus_x = DMatrix::identity(d, d) + path.shape_inverse_mul(t - 1, &g_prev);
    let delta = solve(&i_plus_x, &path.shape_inverse_mul(t - 1, &rhs))?;
    if !delta.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("transformed previous deviation is singular".into()));
    }
    let ln_det_rest = if is_zero(&g_prev) {
        0.0
    } else {
        let det = ln_abs_det(&i_plus_x);
        if !det.is_finite() {
            return Err(Error::Domain(format!("transformed deviation at stage {} is zero", t - 1)));
        }
        det
    };
    Ok(StepUpdate { w_new: w + delta, ln_det_rest, ln_jac_ref })
}

fn ln_jacobians(path: &ProcessPath, phi: &Diffeo, t: usize, info: &StageInfo) -> f64 {
    (0..path.dim())
        .filter(|&i| !info.fixed[i])
        .map(|i| phi.jacobian(path.stage_point(t, i)).ln())
        .sum()
}

fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Domain("transformed previous deviation is singular".into()))
}

fn ln_abs_det(a: &DMatrix<f64>) -> f64 {
    a.clone().lu().determinant().abs().ln()
}

/// Incremental evaluator of successive log-factors.
struct FactorStream<'a> {
    path: &'a ProcessPath,
    phi: &'a Diffeo,
    t: usize,
    /// Stage infos for `t-2` and `t-1`.
    window: Vec<StageInfo>,
}

impl<'a> FactorStream<'a> {
    fn new(path: &'a ProcessPath, phi: &'a Diffeo) -> Self {
        FactorStream { path, phi, t: 0, window: Vec::new() }
    }

    /// Starts the stream at stage `t`, priming the two previous stages.
    fn starting_at(path: &'a ProcessPath, phi: &'a Diffeo, t: usize) -> Self {
        let window = (t.saturating_sub(2)..t).map(|s| StageInfo::new(path, phi, s)).collect();
        FactorStream { path, phi, t, window }
    }

    fn next_log_factor(&mut self) -> Result<f64> {
        let (path, phi, t) = (self.path, self.phi, self.t);
        let spec = path.spec();
        let cur = StageInfo::new(path, phi, t);
        let ln_j = ln_jacobians(path, phi, t, &cur);
        let value = match t {
            0 => {
                if cur.all_fixed() {
                    0.0
                } else {
                    let coords = path.stage_coords(0);
                    let moved: Vec<f64> =
                        (0..path.dim()).flat_map(|i| phi.apply(path.stage_point(0, i))).collect();
                    spec.ln_initial(&moved) - spec.ln_initial(coords) + ln_j
                }
            }
            1 => {
                let prev = &self.window[self.window.len() - 1];
                let c = correction(path, phi, 1, &cur, prev, None);
                if is_zero(&c) {
                    ln_j
                } else {
                    let y = path.step(1);
                    let y_new = y + c * path.scale(1).exp();
                    spec.ln_first(&y_new) - spec.ln_first(y) + ln_j
                }
            }
            _ => {
                let n = self.window.len();
                let u = step_update(path, phi, t, [&self.window[n - 2], &self.window[n - 1], &cur])?;
                let d = path.dim() as f64;
                let ln_f = if u.w_new == *path.step(t) {
                    0.0
                } else {
                    spec.ln_step(&u.w_new) - spec.ln_step(path.step(t))
                };
                ln_f - d * u.ln_det_rest + (ln_j - d * u.ln_jac_ref)
            }
        };
        if self.window.len() == 2 {
            self.window.remove(0);
        }
        self.window.push(cur);
        self.t += 1;
        Ok(value)
    }
}

fn check_factor_index(path: &ProcessPath, phi: &Diffeo, j: usize) -> Result<()> {
    if phi.dim() != path.dim() {
        return Err(Error::DimensionMismatch { expected: path.dim(), found: phi.dim() });
    }
    if j == 0 || j > path.max_factors() {
        return Err(Error::InvalidParameter {
            field: "k",
            reason: format!("factor index must be in 1..={} (got {j})", path.max_factors()),
        });
    }
    Ok(())
}

/// `ln u_{j,phi}` for factor `j` (1-based; factor 1 is the initial stage).
/// Depends only on stages `j-3 ..= j-1` of the path.
pub fn ln_rn_factor(j: usize, path: &ProcessPath, phi: &Diffeo) -> Result<f64> {
    check_factor_index(path, phi, j)?;
    FactorStream::starting_at(path, phi, j - 1).next_log_factor()
}

/// `u_{j,phi}`.
pub fn rn_factor(j: usize, path: &ProcessPath, phi: &Diffeo) -> Result<f64> {
    ln_rn_factor(j, path, phi).map(f64::exp)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Converged,
    DivergedToZero,
    DivergedToInfinity,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticThresholds {
    pub gap_tolerance: f64,
    /// Products beyond `[1/overflow, overflow]` count as divergent.
    pub overflow: f64,
}

impl Default for DiagnosticThresholds {
    fn default() -> Self {
        DiagnosticThresholds { gap_tolerance: 1e-2, overflow: 1e8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnReport {
    /// `ln u_j`, `j = 1..=k`.
    pub factors_logged: Vec<f64>,
    /// `S_m = sum_{j <= m} ln u_j`.
    pub log_partial: Vec<f64>,
    pub cauchy_gap: f64,
    pub verdict: Verdict,
    pub truncation: usize,
}

impl RnReport {
    pub fn from_log_factors(factors: Vec<f64>, thresholds: &DiagnosticThresholds) -> RnReport {
        let mut log_partial = Vec::with_capacity(factors.len());
        let mut s = 0.0;
        for f in &factors {
            s += f;
            log_partial.push(s);
        }
        let mut report = RnReport {
            truncation: factors.len(),
            factors_logged: factors,
            log_partial,
            cauchy_gap: f64::NAN,
            verdict: Verdict::Inconclusive,
        };
        report.cauchy_gap = cauchy_gap(&report.log_partial);
        report.verdict = rn_convergence_diagnostic(&report, thresholds);
        report
    }

    /// `ln prod_{j <= k} u_j`.
    pub fn log_product(&self) -> f64 {
        self.log_partial.last().copied().unwrap_or(0.0)
    }

    pub fn product(&self) -> f64 {
        self.log_product().exp()
    }
}

/// `max_{k/4 <= m <= k/2} |S_{2m} - S_m|`.
fn cauchy_gap(partial: &[f64]) -> f64 {
    let k = partial.len();
    if k < 4 {
        return f64::NAN;
    }
    let s = |m: usize| partial[m - 1];
    (k.div_ceil(4).max(1)..=k / 2).map(|m| (s(2 * m) - s(m)).abs()).fold(0.0, f64::max)
}

/// Classifies a truncated product.
///
/// * converged: tail Cauchy gap within tolerance and the product inside
///   `[1/overflow, overflow]`;
/// * diverged: monotone tail and either the product is outside that range,
///   or the last doubling gap exceeds the tolerance without contracting
///   (ratio to the previous doubling gap at least 0.9);
/// * otherwise inconclusive. Needs `k >= 16`.
pub fn rn_convergence_diagnostic(report: &RnReport, thresholds: &DiagnosticThresholds) -> Verdict {
    let k = report.log_partial.len();
    if k < 16 {
        return Verdict::Inconclusive;
    }
    let s = |m: usize| report.log_partial[m - 1];
    let total = s(k);
    let bound = thresholds.overflow.ln();
    let tail = &report.factors_logged[k / 2..];
    let nondecreasing = tail.iter().all(|v| *v >= 0.0) && tail.iter().any(|v| *v > 0.0);
    let nonincreasing = tail.iter().all(|v| *v <= 0.0) && tail.iter().any(|v| *v < 0.0);
    let direction = |up: bool| if up { Verdict::DivergedToInfinity } else { Verdict::DivergedToZero };

    if total.is_nan() {
        return Verdict::Inconclusive;
    }
    if total.is_infinite() {
        return direction(total > 0.0);
    }
    if total.abs() > bound && (nondecreasing || nonincreasing) {
        return direction(total > 0.0);
    }
    if report.cauchy_gap <= thresholds.gap_tolerance && total.abs() <= bound {
        return Verdict::Converged;
    }
    let g_last = s(k) - s(k / 2);
    let g_prev = s(k / 2) - s(k / 4);
    let monotone = (nondecreasing && g_last > 0.0) || (nonincreasing && g_last < 0.0);
    if monotone
        && g_last.abs() > thresholds.gap_tolerance
        && g_last.signum() == g_prev.signum()
        && g_last.abs() >= 0.9 * g_prev.abs()
    {
        return direction(g_last > 0.0);
    }
    Verdict::Inconclusive
}

/// Factors `1..=k` and their diagnostic.
pub fn truncated_rn_product(
    path: &ProcessPath,
    phi: &Diffeo,
    k: usize,
    thresholds: &DiagnosticThresholds,
) -> Result<RnReport> {
    Ok(RnReport::from_log_factors(log_factors(path, phi, k)?, thresholds))
}

/// `ln u_1, ..., ln u_k`.
pub fn log_factors(path: &ProcessPath, phi: &Diffeo, k: usize) -> Result<Vec<f64>> {
    check_factor_index(path, phi, k.max(1))?;
    let mut stream = FactorStream::new(path, phi);
    (0..k).map(|_| stream.next_log_factor()).collect()
}

/// `ln prod_{j <= k} u_j`.
pub fn ln_rn_product(path: &ProcessPath, phi: &Diffeo, k: usize) -> Result<f64> {
    Ok(log_factors(path, phi, k)?.iter().sum())
}

/// The transformed path `phi omega`, with its scaled deviations rebuilt
/// from the transformed points.
pub fn transform_path(path: &ProcessPath, phi: &Diffeo) -> Result<ProcessPath> {
    if phi.dim() != path.dim() {
        return Err(Error::DimensionMismatch { expected: path.dim(), found: phi.dim() });
    }
    let n = path.steps();
    let mut log_scale = Vec::with_capacity(n);
    let mut shapes = Vec::with_capacity(n);
    let mut increments = Vec::with_capacity(n);
    let mut infos = vec![StageInfo::new(path, phi, 0)];
    for t in 1..=n {
        let cur = StageInfo::new(path, phi, t);
        let shape = path.shape(t) + correction(path, phi, t, &cur, &infos[infos.len() - 1], None);
        let nu = matrix_norm(&shape);
        if !(nu > 0.0) {
            return Err(Error::Domain(format!("transformed deviation at stage {t} is zero")));
        }
        if t == 1 {
            increments.push(&shape * path.scale(1).exp());
        } else {
            let k = infos.len();
            increments.push(step_update(path, phi, t, [&infos[k - 2], &infos[k - 1], &cur])?.w_new);
        }
        log_scale.push(path.scale(t) + nu.ln());
        shapes.push(shape / nu);
        if infos.len() == 2 {
            infos.remove(0);
        }
        infos.push(cur);
    }
    Ok(ProcessPath::assemble(path.spec.clone(), log_scale, shapes, increments, path.sequence.map(|x| phi.apply(x))))
}

/// Maximal relative error of `Pi^m(phi1 phi2; omega) = Pi^m(phi1; omega) Pi^m(phi2; phi1 omega)`
/// over `m = 1..=k`, where `phi1 phi2` applies `phi1` first.
pub fn chain_rule_check(phi1: &Diffeo, phi2: &Diffeo, path: &ProcessPath, k: usize) -> Result<f64> {
    let both = Diffeo::compose(phi1, phi2)?;
    let composite = log_factors(path, &both, k)?;
    let first = log_factors(path, phi1, k)?;
    let moved = transform_path(path, phi1)?;
    let second = log_factors(&moved, phi2, k)?;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    let mut worst: f64 = 0.0;
    for m in 0..k {
        a += composite[m];
        b += first[m];
        c += second[m];
        worst = worst.max((a - b - c).exp_m1().abs());
    }
    Ok(worst)
}

/// A compactly supported smooth function `sum_i w_i beta(|x - c_i| / r_i)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub bumps: Vec<BumpTerm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpTerm {
    pub center: Vec<f64>,
    pub radius: f64,
    pub weight: f64,
}

impl TestFunction {
    pub fn single(center: Vec<f64>, radius: f64, weight: f64) -> TestFunction {
        TestFunction { bumps: vec![BumpTerm { center, radius, weight }] }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let d2: f64 = x.iter().zip(&b.center).map(|(p, q)| (p - q) * (p - q)).sum();
                b.weight * bump(d2.sqrt() / b.radius)
            })
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingStatus {
    /// Only finitely many nonzero terms; the sum is exact.
    Finite,
    /// Terms vanish in the tail and the partial sums are Cauchy.
    Convergent,
    /// Terms do not tend to zero; the series diverges.
    Divergent,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pairing {
    pub value: f64,
    pub terms: usize,
    pub status: PairingStatus,
}

/// `<gamma, f> = sum_j f(x_j)` over the first `max_terms` points.
pub fn pairing<P: PointSet + ?Sized>(points: &P, f: &TestFunction, max_terms: usize) -> Pairing {
    let n = points.len().min(max_terms);
    let terms: Vec<f64> = (0..n).map(|i| f.value(points.point(i))).collect();
    let value: f64 = terms.iter().sum();
    if n < 8 {
        return Pairing { value, terms: n, status: PairingStatus::Finite };
    }
    let tail = &terms[3 * n / 4..];
    if tail.iter().all(|t| *t == 0.0) {
        return Pairing { value, terms: n, status: PairingStatus::Finite };
    }
    let mean_abs = |s: &[f64]| s.iter().map(|t| t.abs()).sum::<f64>() / s.len() as f64;
    let last = mean_abs(&terms[7 * n / 8..]);
    let before = mean_abs(&terms[3 * n / 4..7 * n / 8]);
    let head: f64 = terms[..3 * n / 4].iter().sum();
    let gap = (value - head).abs();
    let tol = 1e-9 * (1.0 + value.abs());
    let status = if gap <= tol {
        PairingStatus::Convergent
    } else if last > 0.0 && last >= 0.5 * before {
        PairingStatus::Divergent
    } else {
        PairingStatus::Inconclusive
    };
    Pairing { value, terms: n, status }
}

/// `Psi(gamma) = exp(i <gamma_k, phase>) * w(gamma_k)` with
/// `w = exp(-<gamma_k, weight>)`, bounded by 1 for nonnegative weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PsiSpec {
    pub phase: TestFunction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<TestFunction>,
}

impl PsiSpec {
    /// `|Psi|^2` on the given points.
    pub fn modulus_squared<P: PointSet + ?Sized>(&self, points: &P) -> f64 {
        let theta = pairing(points, &self.phase, usize::MAX).value;
        let w = match &self.weight {
            Some(g) => (-pairing(points, g, usize::MAX).value).exp(),
            None => 1.0,
        };
        let (re, im) = (w * theta.cos(), w * theta.sin());
        re * re + im * im
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitarityReport {
    pub replicas: usize,
    pub flagged: usize,
    pub truncation: usize,
    /// Mean of `|Psi(phi gamma)|^2 Pi^k(phi; omega)`.
    pub transformed_mean: f64,
    pub transformed_stderr: f64,
    /// Mean of `|Psi(gamma)|^2`.
    pub original_mean: f64,
    pub original_stderr: f64,
    /// Paired difference and its standard error.
    pub difference: f64,
    pub difference_stderr: f64,
    /// `difference / difference_stderr` (0 when both vanish).
    pub sigma: f64,
}

pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo check of `E[|Psi(phi gamma)|^2 Pi^k] = E[|Psi(gamma)|^2]`.
/// Replicas whose product is not finite (or errors) are flagged and
/// excluded from the means.
pub fn unitarity_mc(
    psi: &PsiSpec,
    phi: &Diffeo,
    spec: &ProcessSpec,
    replicas: usize,
    k: usize,
    seed: u64,
) -> Result<UnitarityReport> {
    spec.validate()?;
    if phi.dim() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), found: phi.dim() });
    }
    let spec = spec.with_steps(k.saturating_sub(1).max(2));
    let d = spec.dim();
    let results = replicate(seed, replicas, |_, rng| -> Option<(f64, f64)> {
        let path = spec.sample(rng).ok()?;
        let ln_pi = ln_rn_product(&path, phi, k).ok()?;
        let pi = ln_pi.exp();
        if !pi.is_finite() {
            return None;
        }
        let first = path.sequence().prefix(k * d);
        let moved = first.map(|x| phi.apply(x));
        Some((psi.modulus_squared(&moved) * pi, psi.modulus_squared(&first)))
    });
    let kept: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let lhs: Vec<f64> = kept.iter().map(|p| p.0).collect();
    let rhs: Vec<f64> = kept.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = kept.iter().map(|p| p.0 - p.1).collect();
    let (lm, ls) = mean_stderr(&lhs);
    let (rm, rs) = mean_stderr(&rhs);
    let (dm, ds) = mean_stderr(&diff);
    let sigma = if dm == 0.0 { 0.0 } else { dm / ds };
    Ok(UnitarityReport {
        replicas,
        flagged: replicas - kept.len(),
        truncation: k,
        transformed_mean: lm,
        transformed_stderr: ls,
        original_mean: rm,
        original_stderr: rs,
        difference: dm,
        difference_stderr: ds,
        sigma,
    })
}

/// The pointwise image of a sequence.
pub fn push_forward(path: &SequencePath, phi: &Diffeo) -> SequencePath {
    path.map(|x| phi.apply(x))
}
