//! Drift statistics, phase classification, critical-value estimation and
//! kappa sweeps.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrixprocess::MatrixChain;
use crate::process::{ProcessPath, ProcessSpec};
use crate::process1d::DeviationPath;
use crate::rnd::mean_stderr;
use crate::seed::{derive_seed, replicate};

const Z95: f64 = 1.959_963_984_540_054;

/// A sequence of log-magnitudes `s_j = ln ||Y_j||`, `j = 1..=n`.
pub trait LogScaleSeries {
    fn log_scale_series(&self) -> Cow<'_, [f64]>;
}

impl LogScaleSeries for [f64] {
    fn log_scale_series(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(self)
    }
}

impl LogScaleSeries for Vec<f64> {
    fn log_scale_series(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(self)
    }
}

impl LogScaleSeries for DeviationPath {
    fn log_scale_series(&self) -> Cow<'_, [f64]> {
        Cow::Owned(self.log_magnitudes())
    }
}

impl LogScaleSeries for MatrixChain {
    fn log_scale_series(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.log_scales())
    }
}

impl LogScaleSeries for ProcessPath {
    fn log_scale_series(&self) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.log_scales())
    }
}

fn checked(s: &[f64]) -> Result<()> {
    if s.len() < 2 {
        return Err(invalid("n_steps", format!("drift needs at least 2 deviations (got {})", s.len())));
    }
    if let Some(j) = s.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("deviation {} has non-finite log-magnitude", j + 1)));
    }
    Ok(())
}

/// `(s_n - s_1) / (n - 1)`, the mean log growth per step.
pub fn drift_statistic<S: LogScaleSeries + ?Sized>(series: &S) -> Result<f64> {
    let s = series.log_scale_series();
    checked(&s)?;
    Ok((s[s.len() - 1] - s[0]) / (s.len() - 1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Condensed,
    Rarefied,
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseThresholds {
    /// Condensed when `||Y_n|| < lower_rel * ||Y_1||`.
    pub lower_rel: f64,
    /// Rarefied when `||Y_n|| > upper_abs`.
    pub upper_abs: f64,
}

impl Default for PhaseThresholds {
    fn default() -> Self {
        PhaseThresholds { lower_rel: 1e-8, upper_abs: 1e6 }
    }
}

pub fn classify_phase<S: LogScaleSeries + ?Sized>(series: &S, thresholds: &PhaseThresholds) -> Phase {
    let s = series.log_scale_series();
    let (first, last) = match (s.first(), s.last()) {
        (Some(a), Some(b)) if s.len() >= 2 => (*a, *b),
        _ => return Phase::Undecided,
    };
    if last.is_nan() || first.is_nan() {
        return Phase::Undecided;
    }
    let drift = (last - first) / (s.len() - 1) as f64;
    if last - first < thresholds.lower_rel.ln() && drift < 0.0 {
        Phase::Condensed
    } else if last > thresholds.upper_abs.ln() && drift > 0.0 {
        Phase::Rarefied
    } else {
        Phase::Undecided
    }
}

/// Replicated drift and phase counts at one kappa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub kappa: f64,
    pub replicas: usize,
    pub n_steps: usize,
    pub drift_mean: f64,
    pub drift_stderr: f64,
    pub condensed_fraction: f64,
    pub rarefied_fraction: f64,
    pub undecided_fraction: f64,
    /// Replicas whose sampler failed or whose drift was undefined.
    pub failed: usize,
}

impl Probe {
    fn straddles_zero(&self) -> bool {
        (self.drift_mean.abs()) <= Z95 * self.drift_stderr
    }
}

/// Samples `replicas` paths at `kappa` and summarizes their drifts and
/// phases.
pub fn probe(spec: &ProcessSpec, kappa: f64, replicas: usize, thresholds: &PhaseThresholds, seed: u64) -> Result<Probe> {
    let spec = spec.with_kappa(kappa);
    spec.validate()?;
    if replicas == 0 {
        return Err(invalid("replicas", "must be positive"));
    }
    let outcomes = replicate(seed, replicas, |_, rng| {
        let s = spec.sample_log_scales(rng).ok()?;
        let drift = drift_statistic(&s).ok()?;
        Some((drift, classify_phase(&s, thresholds)))
    });
    let ok: Vec<(f64, Phase)> = outcomes.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(Error::Domain(format!("no replica at kappa {kappa} produced a drift")));
    }
    let drifts: Vec<f64> = ok.iter().map(|o| o.0).collect();
    let (drift_mean, drift_stderr) = mean_stderr(&drifts);
    let frac = |p: Phase| ok.iter().filter(|o| o.1 == p).count() as f64 / replicas as f64;
    Ok(Probe {
        kappa,
        replicas,
        n_steps: spec.n_steps(),
        drift_mean,
        drift_stderr,
        condensed_fraction: frac(Phase::Condensed),
        rarefied_fraction: frac(Phase::Rarefied),
        undecided_fraction: frac(Phase::Undecided) + (replicas - ok.len()) as f64 / replicas as f64,
        failed: replicas - ok.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketStep {
    pub lo: f64,
    pub hi: f64,
    pub probe: Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa0Estimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Final bisection bracket.
    pub bracket: [f64; 2],
    pub history: Vec<BracketStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kappa0Options {
    pub bracket: [f64; 2],
    pub tolerance: f64,
    pub base_replicas: usize,
    pub max_replicas: usize,
    pub thresholds: PhaseThresholds,
}

impl Kappa0Options {
    /// Defaults for a process of dimension `d`.
    pub fn for_dim(d: usize) -> Kappa0Options {
        Kappa0Options {
            bracket: default_bracket(d),
            tolerance: 0.02,
            base_replicas: 200,
            max_replicas: 3200,
            thresholds: PhaseThresholds::default(),
        }
    }
}

pub fn default_bracket(d: usize) -> [f64; 2] {
    if d == 1 {
        [0.5, 4.0]
    } else {
        [0.5, 16.0]
    }
}

/// Weighted least squares of drift on `ln kappa`; returns the root
/// `kappa0` and its standard error in `ln kappa`.
fn regress_root(probes: &[&Probe]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = probes
        .iter()
        .filter(|p| p.drift_stderr > 0.0 && p.drift_stderr.is_finite())
        .map(|p| (p.kappa.ln(), p.drift_mean, 1.0 / (p.drift_stderr * p.drift_stderr)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let xm = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / sw;
    let ym = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().map(|p| p.2 * (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * (p.0 - xm) * (p.1 - ym)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let b = sxy / sxx;
    if !(b > 0.0) {
        return None;
    }
    let a = ym - b * xm;
    let x0 = -a / b;
    // Delta method: var(a) and var(b) from the weights, cov(a, b) = -xm var(b).
    let var_b = 1.0 / sxx;
    let var_a = 1.0 / sw + xm * xm / sxx;
    let cov = -xm / sxx;
    let var_x0 = (var_a + x0 * x0 * var_b + 2.0 * x0 * cov) / (b * b);
    Some((x0.exp(), var_x0.max(0.0).sqrt()))
}

/// Drift-sign bisection for the critical value, refining replicas while
/// the 95% interval of a probe contains zero.
pub fn estimate_kappa0(spec: &ProcessSpec, options: &Kappa0Options, seed: u64) -> Result<Kappa0Estimate> {
    spec.validate()?;
    let [mut lo, mut hi] = options.bracket;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(invalid("bracket", "must satisfy 0 < lo < hi"));
    }
    if !(options.tolerance > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    if options.base_replicas < 2 || options.max_replicas < options.base_replicas {
        return Err(invalid("replicas", "need 2 <= base replicas <= max replicas"));
    }
    let mut counter = 0u64;
    let mut refined = |kappa: f64| -> Result<Probe> {
        let mut replicas = options.base_replicas;
        loop {
            counter += 1;
            let p = probe(spec, kappa, replicas, &options.thresholds, derive_seed(seed, counter))?;
            if !p.straddles_zero() || replicas * 2 > options.max_replicas {
                return Ok(p);
            }
            replicas *= 2;
        }
    };
    let mut history = Vec::new();
    let p_lo = refined(lo)?;
    let p_hi = refined(hi)?;
    history.push(BracketStep { lo, hi, probe: p_lo.clone() });
    history.push(BracketStep { lo, hi, probe: p_hi.clone() });
    if p_lo.drift_mean.signum() == p_hi.drift_mean.signum() || p_lo.drift_mean > p_hi.drift_mean {
        return Err(Error::BracketNoSignChange {
            lo,
            hi,
            drift_lo: p_lo.drift_mean,
            drift_hi: p_hi.drift_mean,
        });
    }
    while hi - lo > options.tolerance {
        let mid = 0.5 * (lo + hi);
        let p = refined(mid)?;
        if p.drift_mean < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        history.push(BracketStep { lo, hi, probe: p });
    }
    let probes: Vec<&Probe> = history.iter().map(|h| &h.probe).collect();
    let (estimate, se) = regress_root(&probes).unwrap_or((0.5 * (lo + hi), (hi / lo).ln() / 2.0));
    Ok(Kappa0Estimate {
        estimate,
        ci_low: estimate * (-Z95 * se).exp(),
        ci_high: estimate * (Z95 * se).exp(),
        bracket: [lo, hi],
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub kappa: f64,
    pub replicas: usize,
    pub n_steps: usize,
    pub condensed_fraction: f64,
    pub drift_mean: f64,
    pub drift_stderr: f64,
    pub undecided_fraction: f64,
    pub rarefied_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepKappa0 {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseDiagram {
    pub spec: ProcessSpec,
    pub grid: Vec<PhaseRow>,
    /// Present when the drift changes sign across the grid.
    pub kappa0_estimate: Option<SweepKappa0>,
}

impl PhaseDiagram {
    pub const CSV_COLUMNS: [&'static str; 7] =
        ["kappa", "replicas", "n_steps", "condensed_fraction", "drift_mean", "drift_stderr", "undecided_fraction"];

    /// Index of the first row whose drift is nonnegative after a negative
    /// one, if the grid brackets a sign change.
    pub fn sign_change(&self) -> Option<usize> {
        self.grid.windows(2).position(|w| w[0].drift_mean < 0.0 && w[1].drift_mean >= 0.0).map(|i| i + 1)
    }
}

/// Probes every kappa in the grid (sorted ascending). Each row uses a seed
/// derived from the master seed and its kappa, so rows do not depend on
/// the rest of the grid.
pub fn sweep(
    grid: &[f64],
    spec: &ProcessSpec,
    replicas: usize,
    thresholds: &PhaseThresholds,
    seed: u64,
) -> Result<PhaseDiagram> {
    if grid.is_empty() {
        return Err(invalid("grid", "must be nonempty"));
    }
    let mut kappas = grid.to_vec();
    kappas.sort_by(f64::total_cmp);
    kappas.dedup();
    let mut rows = Vec::with_capacity(kappas.len());
    let mut probes = Vec::with_capacity(kappas.len());
    for &k in &kappas {
        let p = probe(spec, k, replicas, thresholds, derive_seed(seed, k.to_bits()))?;
        rows.push(PhaseRow {
            kappa: k,
            replicas: p.replicas,
            n_steps: p.n_steps,
            condensed_fraction: p.condensed_fraction,
            drift_mean: p.drift_mean,
            drift_stderr: p.drift_stderr,
            undecided_fraction: p.undecided_fraction,
            rarefied_fraction: p.rarefied_fraction,
        });
        probes.push(p);
    }
    let mut diagram = PhaseDiagram { spec: spec.clone(), grid: rows, kappa0_estimate: None };
    if diagram.sign_change().is_some() {
        let refs: Vec<&Probe> = probes.iter().collect();
        if let Some((estimate, se)) = regress_root(&refs) {
            diagram.kappa0_estimate =
                Some(SweepKappa0 { estimate, ci_low: estimate * (-Z95 * se).exp(), ci_high: estimate * (Z95 * se).exp() });
        }
    }
    Ok(diagram)
}

/// `exp((gamma + ln 2) / 2)`, the 1-D critical value.
pub fn kappa0_1d_closed_form() -> f64 {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    ((EULER_GAMMA + std::f64::consts::LN_2) / 2.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixprocess::MatrixDeviation;
    use crate::process1d::Process1DParams;
    use nalgebra::DMatrix;

    fn scalar(kappa: f64, n: usize) -> ProcessSpec {
        ProcessSpec::Scalar(Process1DParams::new(kappa, n, 0).unwrap())
    }

    #[test]
    fn drift_of_scaled_identity_chain() {
        let c = 0.7f64;
        let steps: Vec<MatrixDeviation> = (0..50)
            .map(|_| MatrixDeviation::new(DMatrix::identity(3, 3) * c).unwrap())
            .collect();
        let chain = MatrixChain::from_steps(steps);
        assert!((drift_statistic(&chain).unwrap() - c.ln()).abs() <= 1e-14);
    }

    #[test]
    fn one_by_one_chain_matches_scalar_drift() {
        let values = [0.3, -1.2, 2.5, -0.01, 0.4, 7.0];
        let params = Process1DParams::new(1.0, values.len(), 0).unwrap();
        let dev = DeviationPath::from_values(&values, params).unwrap();
        let steps: Vec<MatrixDeviation> = (0..values.len())
            .map(|i| {
                let v = if i == 0 { values[0] } else { values[i] / values[i - 1] };
                MatrixDeviation::new(DMatrix::from_element(1, 1, v)).unwrap()
            })
            .collect();
        let chain = MatrixChain::from_steps(steps);
        let a = drift_statistic(&dev).unwrap();
        let b = drift_statistic(&chain).unwrap();
        assert!((a - b).abs() <= 1e-15);
        let direct: f64 =
            values.windows(2).map(|w| (w[1] / w[0]).abs().ln()).sum::<f64>() / (values.len() - 1) as f64;
        assert!((a - direct).abs() <= 1e-12);
    }

    #[test]
    fn drift_errors() {
        assert!(drift_statistic(&vec![1.0]).is_err());
        assert!(drift_statistic(&vec![1.0, f64::NEG_INFINITY]).is_err());
    }

    #[test]
    fn classification_rules() {
        let t = PhaseThresholds::default();
        assert_eq!(classify_phase(&vec![0.0, -30.0], &t), Phase::Condensed);
        assert_eq!(classify_phase(&vec![0.0, 20.0], &t), Phase::Rarefied);
        assert_eq!(classify_phase(&vec![0.0, 1.0], &t), Phase::Undecided);
        assert_eq!(classify_phase(&vec![0.0], &t), Phase::Undecided);
    }

    #[test]
    fn drift_at_unit_kappa() {
        let p = probe(&scalar(1.0, 2000), 1.0, 200, &PhaseThresholds::default(), 3).unwrap();
        assert!((p.drift_mean + 0.635_181_422_730_739).abs() <= 3.0 * p.drift_stderr, "{p:?}");
    }

    #[test]
    fn drift_at_critical_value() {
        let k0 = kappa0_1d_closed_form();
        let p = probe(&scalar(k0, 2000), k0, 200, &PhaseThresholds::default(), 4).unwrap();
        assert!(p.drift_mean.abs() <= 3.0 * p.drift_stderr, "{p:?}");
    }

    #[test]
    fn extreme_kappas_classify() {
        let t = PhaseThresholds::default();
        let low = probe(&scalar(0.2, 10_000), 0.2, 1000, &t, 5).unwrap();
        assert!(low.condensed_fraction >= 0.99);
        let high = probe(&scalar(10.0, 10_000), 10.0, 1000, &t, 6).unwrap();
        assert!(high.rarefied_fraction >= 0.99);
    }

    #[test]
    fn same_sign_bracket_is_rejected() {
        let mut o = Kappa0Options::for_dim(1);
        o.bracket = [2.0, 3.0];
        o.base_replicas = 50;
        o.max_replicas = 50;
        match estimate_kappa0(&scalar(1.0, 1000), &o, 1) {
            Err(Error::BracketNoSignChange { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sweep_fractions() {
        let d = sweep(&[3.0, 0.5, 5.0, 1.0], &scalar(1.0, 2000), 200, &PhaseThresholds::default(), 9).unwrap();
        let ks: Vec<f64> = d.grid.iter().map(|r| r.kappa).collect();
        assert_eq!(ks, vec![0.5, 1.0, 3.0, 5.0]);
        let f: Vec<f64> = d.grid.iter().map(|r| r.condensed_fraction).collect();
        assert!(f[0] >= 0.99 && f[1] >= 0.99 && f[2] <= 0.01 && f[3] <= 0.01, "{f:?}");
        assert_eq!(d.sign_change(), Some(2));
        let k0 = d.kappa0_estimate.unwrap();
        assert!(k0.ci_low < k0.estimate && k0.estimate < k0.ci_high);
        let single = sweep(&[1.0], &scalar(1.0, 100), 10, &PhaseThresholds::default(), 9).unwrap();
        assert_eq!(single.grid.len(), 1);
        assert!(single.kappa0_estimate.is_none());
    }
}
