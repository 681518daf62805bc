use rand::Rng;
use selfsim::diffeo::amplitude_bound;
use selfsim::matrixprocess::MatrixProcessParams;
use selfsim::process1d::{DeviationPath, Process1DParams};
use selfsim::rnd::{
    chain_rule_check, ln_rn_factor, log_factors, pairing, rn_convergence_diagnostic, truncated_rn_product,
    unitarity_mc, DiagnosticThresholds, PairingStatus, PsiSpec, RnReport, TestFunction, Verdict,
};
use selfsim::seed::stream_rng;
use selfsim::{Diffeo, PointSet, ProcessPath, ProcessSpec};

fn scalar(kappa: f64, n: usize) -> ProcessSpec {
    ProcessSpec::Scalar(Process1DParams::new(kappa, n, 0).unwrap())
}

fn limit_point(path: &ProcessPath) -> Vec<f64> {
    let s = path.sequence();
    s.point(s.len() - 1).to_vec()
}

fn bump_near<R: Rng>(x: &[f64], rng: &mut R) -> Diffeo {
    let d = x.len();
    let radius = rng.random_range(0.3..1.0);
    let center: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.2..0.2) * radius).collect();
    let mut dir: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= n);
    let a = rng.random_range(-0.8..0.8) * amplitude_bound(radius);
    Diffeo::bump_flow(d, center, radius, a, dir).unwrap()
}

#[test]
fn identity_factors_vanish() {
    let path = scalar(0.5, 300).sample(&mut stream_rng(1, 0)).unwrap();
    let rep = truncated_rn_product(&path, &Diffeo::identity(1), 300, &DiagnosticThresholds::default()).unwrap();
    assert!(rep.factors_logged.iter().all(|f| *f == 0.0));
    assert!(rep.log_partial.iter().all(|s| *s == 0.0));
    assert_eq!(rep.verdict, Verdict::Converged);
    assert_eq!(rep.product(), 1.0);
}

#[test]
fn disjoint_support_gives_unit_factors() {
    let path = scalar(0.5, 200).sample(&mut stream_rng(2, 0)).unwrap();
    let far = limit_point(&path)[0] + 50.0;
    let phi = Diffeo::bump_flow(1, vec![far], 1.0, 0.5, vec![1.0]).unwrap();
    for j in 1..=200 {
        assert_eq!(ln_rn_factor(j, &path, &phi).unwrap(), 0.0);
    }
}

#[test]
fn condensed_factors_approach_one() {
    let mut rng = stream_rng(3, 0);
    for r in 0..20 {
        let path = scalar(0.5, 2000).sample(&mut stream_rng(3, r)).unwrap();
        let phi = bump_near(&limit_point(&path), &mut rng);
        let f = log_factors(&path, &phi, 2000).unwrap();
        assert!(f[1500..].iter().all(|v| v.exp_m1().abs() < 1e-3), "replica {r}");
    }
}

#[test]
fn product_matches_factors() {
    let path = scalar(0.7, 400).sample(&mut stream_rng(4, 0)).unwrap();
    let phi = bump_near(&limit_point(&path), &mut stream_rng(4, 1));
    let rep = truncated_rn_product(&path, &phi, 400, &DiagnosticThresholds::default()).unwrap();
    let direct: f64 = rep.factors_logged.iter().map(|v| v.exp()).product();
    assert!((rep.product() / direct - 1.0).abs() <= 1e-10);
}

#[test]
fn rarefied_product_is_eventually_constant() {
    for r in 0..20 {
        let path = scalar(4.0, 1000).sample(&mut stream_rng(5, r)).unwrap();
        let x0 = path.sequence().point(0)[0];
        let phi = Diffeo::bump_flow(1, vec![x0], 1.0, 0.4, vec![1.0]).unwrap();
        let rep = truncated_rn_product(&path, &phi, 1000, &DiagnosticThresholds::default()).unwrap();
        let tail = &rep.log_partial[500..];
        assert!(tail.iter().all(|s| s.to_bits() == tail[0].to_bits()), "replica {r}");
    }
}

#[test]
fn diagnostic_synthetic_series() {
    let t = DiagnosticThresholds::default();
    let ones = RnReport::from_log_factors(vec![0.0; 100], &t);
    assert_eq!(ones.verdict, Verdict::Converged);
    assert_eq!(ones.cauchy_gap, 0.0);

    let harmonic = RnReport::from_log_factors((1..=10_000).map(|j| 1.0 / j as f64).collect(), &t);
    assert_eq!(harmonic.verdict, Verdict::DivergedToInfinity);
    let harmonic_down = RnReport::from_log_factors((1..=10_000).map(|j| -1.0 / j as f64).collect(), &t);
    assert_eq!(harmonic_down.verdict, Verdict::DivergedToZero);

    let alt = RnReport::from_log_factors((1..=10_000).map(|j| (-1f64).powi(j) / (j as f64).powi(2)).collect(), &t);
    assert_eq!(alt.verdict, Verdict::Converged);
    assert_eq!(rn_convergence_diagnostic(&alt, &t), Verdict::Converged);

    let short = RnReport::from_log_factors(vec![0.0; 8], &t);
    assert_eq!(short.verdict, Verdict::Inconclusive);

    let huge = RnReport::from_log_factors(vec![1.0; 100], &t);
    assert_eq!(huge.verdict, Verdict::DivergedToInfinity);
}

#[test]
fn chain_rule_special_cases() {
    let path = scalar(0.5, 500).sample(&mut stream_rng(6, 0)).unwrap();
    let phi = bump_near(&limit_point(&path), &mut stream_rng(6, 1));
    let inv = phi.inverse().unwrap();
    assert!(chain_rule_check(&phi, &inv, &path, 500).unwrap() <= 1e-8);
    let both = Diffeo::compose(&phi, &inv).unwrap();
    let s: f64 = log_factors(&path, &both, 500).unwrap().iter().sum();
    assert!(s.abs() <= 1e-8);
    assert!(chain_rule_check(&phi, &Diffeo::identity(1), &path, 500).unwrap() <= 1e-12);
}

#[test]
fn chain_rule_random_pairs() {
    let mut rng = stream_rng(7, 0);
    for r in 0..10 {
        let kappa = [0.5, 1.0, 3.0][r % 3];
        let path = scalar(kappa, 500).sample(&mut stream_rng(7, r as u64 + 1)).unwrap();
        let x = path.sequence().point(rng.random_range(0..20)).to_vec();
        let phi1 = bump_near(&x, &mut rng);
        let phi2 = bump_near(&x, &mut rng);
        let err = chain_rule_check(&phi1, &phi2, &path, 500).unwrap();
        assert!(err <= 1e-8, "replica {r}: {err}");
    }
}

#[test]
fn chain_rule_matrix_process() {
    let mut rng = stream_rng(8, 0);
    let spec = ProcessSpec::Matrix(MatrixProcessParams::new(2, 0.5, 1.0, 200, 0).unwrap());
    for r in 0..5 {
        let path = spec.sample(&mut stream_rng(8, r + 1)).unwrap();
        let x = limit_point(&path);
        let phi1 = bump_near(&x, &mut rng);
        let phi2 = bump_near(&x, &mut rng);
        assert!(chain_rule_check(&phi1, &phi2, &path, 200).unwrap() <= 1e-8);
    }
}

#[test]
fn factors_depend_only_on_past_stages() {
    let params = Process1DParams::new(0.8, 60, 0).unwrap();
    let values: Vec<f64> = {
        let mut rng = stream_rng(9, 0);
        (0..60).map(|_| rng.random_range(0.2..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
    };
    let base = ProcessPath::from_deviations(0.1, &DeviationPath::from_values(&values, params.clone()).unwrap());
    let phi = Diffeo::bump_flow(1, vec![0.5], 3.0, 0.5, vec![1.0]).unwrap();
    let j = 20;
    let mut shuffled = values.clone();
    shuffled[j..].reverse();
    let other = ProcessPath::from_deviations(0.1, &DeviationPath::from_values(&shuffled, params).unwrap());
    for i in 1..=j {
        assert_eq!(
            ln_rn_factor(i, &base, &phi).unwrap().to_bits(),
            ln_rn_factor(i, &other, &phi).unwrap().to_bits()
        );
    }
}

#[test]
fn pairing_examples() {
    let f = TestFunction::single(vec![0.0], 1.0, 2.0);
    let two = selfsim::SequencePath::from_scalars(&[0.1, 0.5]);
    let p = pairing(&two, &f, 10);
    assert_eq!(p.value, f.value(&[0.1]) + f.value(&[0.5]));
    assert_eq!(p.status, PairingStatus::Finite);

    for r in 0..10 {
        let path = scalar(0.5, 2000).sample(&mut stream_rng(10, r)).unwrap();
        let x = limit_point(&path)[0];
        let away = TestFunction::single(vec![x + 3.0], 1.0, 1.0);
        let at = TestFunction::single(vec![x], 0.5, 1.0);
        assert_eq!(pairing(path.sequence(), &away, usize::MAX).status, PairingStatus::Finite);
        assert_eq!(pairing(path.sequence(), &at, usize::MAX).status, PairingStatus::Divergent);
    }
}

#[test]
fn unitarity_identity_is_exact() {
    let psi = PsiSpec { phase: TestFunction::single(vec![0.0], 1.0, 1.0), weight: None };
    let rep = unitarity_mc(&psi, &Diffeo::identity(1), &scalar(0.5, 10), 200, 50, 1).unwrap();
    assert_eq!(rep.difference, 0.0);
    assert_eq!(rep.flagged, 0);
}

#[test]
fn unitarity_with_weight() {
    let phi = Diffeo::bump_flow(1, vec![0.0], 1.5, 0.5, vec![1.0]).unwrap();
    let psi = PsiSpec {
        phase: TestFunction::single(vec![0.2], 1.0, 1.0),
        weight: Some(TestFunction::single(vec![-0.3], 1.0, 0.5)),
    };
    let rep = unitarity_mc(&psi, &phi, &scalar(0.5, 10), 4000, 100, 2).unwrap();
    assert!(rep.sigma.abs() <= 3.0, "{rep:?}");
}
