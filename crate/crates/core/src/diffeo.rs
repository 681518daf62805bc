//! Compactly supported diffeomorphisms of R^d.
//!
//! The concrete family is the bump flow
//!
//! ```text
//! phi(x) = x + a * beta(|x - c| / R) * e,      beta(r) = exp(-1 / (1 - r^2)) for r < 1
//! ```
//!
//! which is the identity outside the closed ball B(c, R). Composites and
//! inverses are kept as deferred trees, so the group action is evaluated
//! exactly as written: `compose(f, g)` applies `f` first, then `g`.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Standard smooth bump, supported on r < 1.
pub fn bump(r: f64) -> f64 {
    if r.abs() < 1.0 {
        (-1.0 / (1.0 - r * r)).exp()
    } else {
        0.0
    }
}

/// Derivative of [`bump`].
pub fn bump_derivative(r: f64) -> f64 {
    if r.abs() < 1.0 {
        let s = 1.0 - r * r;
        -2.0 * r / (s * s) * (-1.0 / s).exp()
    } else {
        0.0
    }
}

/// Second derivative of [`bump`].
pub fn bump_second_derivative(r: f64) -> f64 {
    if r.abs() < 1.0 {
        let s = 1.0 - r * r;
        let r2 = r * r;
        (-1.0 / s).exp() * (-2.0 / (s * s) - 8.0 * r2 / (s * s * s) + 4.0 * r2 / (s * s * s * s))
    } else {
        0.0
    }
}

/// sup |beta'|, attained at r = 3^(-1/4) where 1 - r^2 = 1 - 1/sqrt(3).
pub fn max_bump_slope() -> f64 {
    let s = 1.0 - 1.0 / 3f64.sqrt();
    let r = (1.0 - s).sqrt();
    2.0 * r / (s * s) * (-1.0 / s).exp()
}

/// Largest admissible |amplitude| (exclusive) for a bump of the given radius.
pub fn amplitude_bound(radius: f64) -> f64 {
    radius / max_bump_slope()
}

/// Relative length below which Jacobian increments are integrated from the
/// second derivative instead of differenced.
const INCREMENT_SWITCH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct BumpFlow {
    center: Vec<f64>,
    radius: f64,
    amplitude: f64,
    direction: Vec<f64>,
}

/// Local geometry of a bump at a point: scaled slope `c = a beta'(r) / R`
/// and the radial unit vector `u` (zero at the center).
struct Local {
    slope: f64,
    radial: Vec<f64>,
}

impl BumpFlow {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn scaled_radius(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        d2.sqrt() / self.radius
    }

    fn covers(&self, x: &[f64]) -> bool {
        self.amplitude != 0.0 && self.scaled_radius(x) < 1.0
    }

    fn local(&self, x: &[f64]) -> Local {
        let r = self.scaled_radius(x);
        let dist = r * self.radius;
        let radial = if dist > 0.0 {
            x.iter().zip(&self.center).map(|(a, b)| (a - b) / dist).collect()
        } else {
            vec![0.0; self.dim()]
        };
        Local { slope: self.amplitude * bump_derivative(r) / self.radius, radial }
    }

    /// `D(grad beta)(x) v` times `a / R`, so that the derivative of the
    /// displacement Jacobian along `v` is `e w^T`.
    fn hessian_along(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let r = self.scaled_radius(x);
        let dist = r * self.radius;
        let a = self.amplitude / self.radius;
        if dist == 0.0 {
            let k = a * bump_second_derivative(0.0) / self.radius;
            return v.iter().map(|vi| k * vi).collect();
        }
        let u: Vec<f64> = x.iter().zip(&self.center).map(|(p, q)| (p - q) / dist).collect();
        let uv: f64 = u.iter().zip(v).map(|(p, q)| p * q).sum();
        let radial = a * bump_second_derivative(r) / self.radius;
        let tangential = a * bump_derivative(r) / dist;
        u.iter().zip(v).map(|(ui, vi)| radial * uv * ui + tangential * (vi - uv * ui)).collect()
    }

    fn along(&self, u: &[f64]) -> f64 {
        self.direction.iter().zip(u).map(|(a, b)| a * b).sum()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        if !self.covers(x) {
            return x.to_vec();
        }
        let shift = self.amplitude * bump(self.scaled_radius(x));
        x.iter().zip(&self.direction).map(|(xi, ei)| xi + shift * ei).collect()
    }

    /// Solves phi(x) = y. Writing x = y - t e reduces this to the scalar
    /// equation h(t) = t - a beta(|y - t e - c| / R) = 0, with h' equal to
    /// the Jacobian determinant at x, hence strictly increasing.
    fn backward(&self, y: &[f64]) -> std::result::Result<Vec<f64>, (f64, usize)> {
        if !self.covers(y) {
            return Ok(y.to_vec());
        }
        let point = |t: f64| -> Vec<f64> {
            y.iter().zip(&self.direction).map(|(yi, ei)| yi - t * ei).collect()
        };
        let h = |t: f64| -> (f64, f64) {
            let x = point(t);
            let value = t - self.amplitude * bump(self.scaled_radius(&x));
            let loc = self.local(&x);
            (value, 1.0 + loc.slope * self.along(&loc.radial))
        };
        let reach = self.amplitude.abs() * (-1.0f64).exp();
        let (mut lo, mut hi) = (-reach, reach);
        let mut t = self.amplitude * bump(self.scaled_radius(y));
        let mut residual = f64::INFINITY;
        for it in 0..200 {
            let (value, deriv) = h(t);
            residual = value.abs();
            if residual <= 1e-15 * (1.0 + t.abs()) {
                return Ok(point(t));
            }
            if value > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let newton = t - value / deriv;
            t = if newton > lo && newton < hi && deriv > 0.0 { newton } else { 0.5 * (lo + hi) };
            if hi - lo <= f64::EPSILON * (1.0 + t.abs()) {
                return Ok(point(t));
            }
            if it == 199 {
                break;
            }
        }
        Err((residual, 200))
    }
}

#[derive(Clone, Debug)]
enum Node {
    Bump(BumpFlow),
    InverseBump(BumpFlow),
    /// Apply the first, then the second.
    Compose(Arc<Diffeo>, Arc<Diffeo>),
}

/// A compactly supported orientation-preserving diffeomorphism of R^d.
///
/// Values are immutable; cloning shares composite subtrees.
#[derive(Clone, Debug)]
pub struct Diffeo {
    dim: usize,
    support_center: Vec<f64>,
    support_radius: f64,
    node: Node,
}

impl Diffeo {
    /// The identity of R^d, represented as a zero-amplitude bump.
    pub fn identity(dim: usize) -> Diffeo {
        let mut direction = vec![0.0; dim];
        direction[0] = 1.0;
        Diffeo::bump_flow(dim, vec![0.0; dim], 1.0, 0.0, direction)
            .expect("zero-amplitude bump is always admissible")
    }

    /// `x -> x + amplitude * beta(|x - center| / radius) * direction`.
    pub fn bump_flow(
        dim: usize,
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
        direction: Vec<f64>,
    ) -> Result<Diffeo> {
        if dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        if center.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: center.len() });
        }
        if direction.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, found: direction.len() });
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(invalid("radius", "must be positive and finite"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("center", "must be finite"));
        }
        if !amplitude.is_finite() {
            return Err(invalid("amplitude", "must be finite"));
        }
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(invalid("direction", format!("must have unit norm (got {norm})")));
        }
        let bound = amplitude_bound(radius);
        if amplitude.abs() >= bound {
            return Err(Error::AmplitudeTooLarge { amplitude, max_admissible: bound });
        }
        Ok(Diffeo {
            dim,
            support_center: center.clone(),
            support_radius: radius,
            node: Node::Bump(BumpFlow { center, radius, amplitude, direction }),
        })
    }

    /// Deferred composite: `compose(f, g).apply(x) == g.apply(f.apply(x))`.
    pub fn compose(first: &Diffeo, second: &Diffeo) -> Result<Diffeo> {
        if first.dim != second.dim {
            return Err(Error::DimensionMismatch { expected: first.dim, found: second.dim });
        }
        let (center, radius) = enclosing_ball(
            (&first.support_center, first.support_radius),
            (&second.support_center, second.support_radius),
        );
        Ok(Diffeo {
            dim: first.dim,
            support_center: center,
            support_radius: radius,
            node: Node::Compose(Arc::new(first.clone()), Arc::new(second.clone())),
        })
    }

    pub fn inverse(&self) -> Result<Diffeo> {
        match &self.node {
            Node::Bump(b) => {
                let inv = Diffeo { node: Node::InverseBump(b.clone()), ..self.clone() };
                inv.check_inverse_probes(b)?;
                Ok(inv)
            }
            Node::InverseBump(b) => Ok(Diffeo { node: Node::Bump(b.clone()), ..self.clone() }),
            Node::Compose(f, g) => Diffeo::compose(&g.inverse()?, &f.inverse()?),
        }
    }

    fn check_inverse_probes(&self, b: &BumpFlow) -> Result<()> {
        let probes = [0.0, 0.5, -0.5, 0.75, -0.75];
        for s in probes {
            let x: Vec<f64> =
                b.center.iter().zip(&b.direction).map(|(c, e)| c + s * b.radius * e).collect();
            let y = b.forward(&x);
            match b.backward(&y) {
                Ok(back) => {
                    let err = back.iter().zip(&x).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    if err > 1e-10 * (1.0 + b.radius) {
                        return Err(Error::NonConvergence { residual: err, iterations: 200 });
                    }
                }
                Err((residual, iterations)) => {
                    return Err(Error::NonConvergence { residual, iterations })
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Center of a ball containing the support.
    pub fn support_center(&self) -> &[f64] {
        &self.support_center
    }

    /// Radius of a ball containing the support; exact for a single bump.
    pub fn support_radius(&self) -> f64 {
        self.support_radius
    }

    /// Bump amplitude; `None` for composites.
    pub fn amplitude(&self) -> Option<f64> {
        match &self.node {
            Node::Bump(b) | Node::InverseBump(b) => Some(b.amplitude),
            Node::Compose(..) => None,
        }
    }

    pub fn direction(&self) -> Option<&[f64]> {
        match &self.node {
            Node::Bump(b) | Node::InverseBump(b) => Some(&b.direction),
            Node::Compose(..) => None,
        }
    }

    /// True when the map is known to fix the origin (it lies outside every
    /// bump ball of the tree).
    pub fn fixes_origin(&self) -> bool {
        self.is_fixed_at(&vec![0.0; self.dim])
    }

    /// Smallest bump radius in the tree; the length scale below which
    /// difference quotients are replaced by derivatives.
    pub fn length_scale(&self) -> f64 {
        match &self.node {
            Node::Bump(b) | Node::InverseBump(b) => b.radius,
            Node::Compose(f, g) => f.length_scale().min(g.length_scale()),
        }
    }

    /// Sufficient condition for `apply(x) == x` bitwise with unit Jacobian.
    pub fn is_fixed_at(&self, x: &[f64]) -> bool {
        match &self.node {
            Node::Bump(b) | Node::InverseBump(b) => !b.covers(x),
            Node::Compose(f, g) => f.is_fixed_at(x) && g.is_fixed_at(x),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        match &self.node {
            Node::Bump(b) => b.forward(x),
            // Bracketed solve; probes at construction guarantee convergence.
            Node::InverseBump(b) => b.backward(x).unwrap_or_else(|_| x.to_vec()),
            Node::Compose(f, g) => g.apply(&f.apply(x)),
        }
    }

    /// `apply(x) - x`, exactly zero wherever [`Diffeo::is_fixed_at`] holds.
    pub fn displacement(&self, x: &[f64]) -> Vec<f64> {
        if self.is_fixed_at(x) {
            return vec![0.0; self.dim];
        }
        self.apply(x).iter().zip(x).map(|(p, q)| p - q).collect()
    }

    /// Derivative matrix of `apply` at `x`.
    pub fn jacobian_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) + self.displacement_jacobian(x)
    }

    /// Derivative of the displacement, `D phi(x) - I`.
    pub fn displacement_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        match &self.node {
            Node::Bump(b) => {
                if !b.covers(x) {
                    return DMatrix::zeros(d, d);
                }
                let loc = b.local(x);
                DMatrix::from_fn(d, d, |i, j| loc.slope * b.direction[i] * loc.radial[j])
            }
            Node::InverseBump(b) => {
                if !b.covers(x) {
                    return DMatrix::zeros(d, d);
                }
                // (I + c e u^T)^-1 - I = -c e u^T / (1 + c u.e)
                let pre = self.apply(x);
                let loc = b.local(&pre);
                let denom = 1.0 + loc.slope * b.along(&loc.radial);
                DMatrix::from_fn(d, d, |i, j| -loc.slope * b.direction[i] * loc.radial[j] / denom)
            }
            Node::Compose(f, g) => {
                let b1 = f.displacement_jacobian(x);
                let b2 = g.displacement_jacobian(&f.apply(x));
                &b1 + &b2 + &b2 * &b1
            }
        }
    }

    /// Directional derivative `D^2 delta(x)[v]` of the displacement Jacobian.
    pub fn displacement_hessian_along(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        match &self.node {
            Node::Bump(b) => {
                if !b.covers(x) {
                    return DMatrix::zeros(d, d);
                }
                let w = b.hessian_along(x, v);
                DMatrix::from_fn(d, d, |i, j| b.direction[i] * w[j])
            }
            Node::InverseBump(b) => {
                if !b.covers(x) {
                    return DMatrix::zeros(d, d);
                }
                // d(J^-1)[v] = -J^-1 dJ[J^-1 v] J^-1 at the preimage.
                let pre = self.apply(x);
                let loc = b.local(&pre);
                let j = DMatrix::identity(d, d)
                    + DMatrix::from_fn(d, d, |i, k| loc.slope * b.direction[i] * loc.radial[k]);
                let Some(j_inv) = j.try_inverse() else { return DMatrix::zeros(d, d) };
                let pulled = &j_inv * nalgebra::DVector::from_column_slice(v);
                let w = b.hessian_along(&pre, pulled.as_slice());
                let dj = DMatrix::from_fn(d, d, |i, k| b.direction[i] * w[k]);
                -(&j_inv * dj * &j_inv)
            }
            Node::Compose(f, g) => {
                let y = f.apply(x);
                let b1 = f.displacement_jacobian(x);
                let b2 = g.displacement_jacobian(&y);
                let db1 = f.displacement_hessian_along(x, v);
                let pushed = (DMatrix::identity(d, d) + &b1) * nalgebra::DVector::from_column_slice(v);
                let db2 = g.displacement_hessian_along(&y, pushed.as_slice());
                &db1 + &db2 + &db2 * &b1 + &b2 * &db1
            }
        }
    }

    /// `D delta(x + v) - D delta(x)`, accurate even when `v` is far below
    /// the floating-point resolution of `x`.
    pub fn displacement_jacobian_increment(&self, x: &[f64], v: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let at = |s: f64| -> Vec<f64> { x.iter().zip(v).map(|(p, q)| p + s * q).collect() };
        let end = at(1.0);
        if self.is_fixed_at(x) && self.is_fixed_at(&end) && self.is_fixed_at(&at(0.5)) {
            return DMatrix::zeros(d, d);
        }
        let nv = v.iter().map(|q| q * q).sum::<f64>().sqrt();
        if nv >= INCREMENT_SWITCH * self.length_scale() {
            return self.displacement_jacobian(&end) - self.displacement_jacobian(x);
        }
        let h = 0.5 / 3f64.sqrt();
        (self.displacement_hessian_along(&at(0.5 - h), v) + self.displacement_hessian_along(&at(0.5 + h), v)) * 0.5
    }

    /// Jacobian determinant, in closed form.
    pub fn jacobian(&self, x: &[f64]) -> f64 {
        match &self.node {
            Node::Bump(b) => {
                if !b.covers(x) {
                    return 1.0;
                }
                let loc = b.local(x);
                1.0 + loc.slope * b.along(&loc.radial)
            }
            Node::InverseBump(b) => {
                if !b.covers(x) {
                    return 1.0;
                }
                let pre = self.apply(x);
                let loc = b.local(&pre);
                1.0 / (1.0 + loc.slope * b.along(&loc.radial))
            }
            Node::Compose(f, g) => f.jacobian(x) * g.jacobian(&f.apply(x)),
        }
    }

    /// Jacobian determinant from central differences of `apply` with step `h`.
    pub fn jacobian_fd(&self, x: &[f64], h: f64) -> f64 {
        let d = self.dim;
        let mut m = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (fp, fm) = (self.apply(&xp), self.apply(&xm));
            for i in 0..d {
                m[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        m.determinant()
    }

    pub fn to_spec(&self) -> DiffeoSpec {
        match &self.node {
            Node::Bump(b) => DiffeoSpec::Bump {
                dim: self.dim,
                center: b.center.clone(),
                radius: b.radius,
                amplitude: b.amplitude,
                direction: b.direction.clone(),
            },
            Node::InverseBump(b) => DiffeoSpec::Inverse {
                dim: self.dim,
                of: Box::new(DiffeoSpec::Bump {
                    dim: self.dim,
                    center: b.center.clone(),
                    radius: b.radius,
                    amplitude: b.amplitude,
                    direction: b.direction.clone(),
                }),
            },
            Node::Compose(f, g) => DiffeoSpec::Compose {
                dim: self.dim,
                first: Box::new(f.to_spec()),
                second: Box::new(g.to_spec()),
            },
        }
    }
}

fn enclosing_ball(a: (&[f64], f64), b: (&[f64], f64)) -> (Vec<f64>, f64) {
    let dist = a.0.iter().zip(b.0).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    if dist + b.1 <= a.1 {
        return (a.0.to_vec(), a.1);
    }
    if dist + a.1 <= b.1 {
        return (b.0.to_vec(), b.1);
    }
    let radius = 0.5 * (dist + a.1 + b.1);
    let t = (radius - a.1) / dist;
    let center = a.0.iter().zip(b.0).map(|(p, q)| p + t * (q - p)).collect();
    // Round-off guard so both balls stay inside.
    (center, radius * (1.0 + 1e-12))
}

/// JSON form of a [`Diffeo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DiffeoSpec {
    Bump { dim: usize, center: Vec<f64>, radius: f64, amplitude: f64, direction: Vec<f64> },
    Compose { dim: usize, first: Box<DiffeoSpec>, second: Box<DiffeoSpec> },
    Inverse { dim: usize, of: Box<DiffeoSpec> },
}

impl DiffeoSpec {
    pub fn build(&self) -> Result<Diffeo> {
        match self {
            DiffeoSpec::Bump { dim, center, radius, amplitude, direction } => {
                Diffeo::bump_flow(*dim, center.clone(), *radius, *amplitude, direction.clone())
            }
            DiffeoSpec::Compose { dim, first, second } => {
                let d = Diffeo::compose(&first.build()?, &second.build()?)?;
                check_dim(*dim, d)
            }
            DiffeoSpec::Inverse { dim, of } => check_dim(*dim, of.build()?.inverse()?),
        }
    }
}

fn check_dim(dim: usize, d: Diffeo) -> Result<Diffeo> {
    if d.dim != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: d.dim });
    }
    Ok(d)
}

impl Serialize for Diffeo {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_spec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Diffeo {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        DiffeoSpec::deserialize(d)?.build().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bump1(a: f64) -> Diffeo {
        Diffeo::bump_flow(1, vec![0.0], 1.0, a, vec![1.0]).unwrap()
    }

    fn random_bump(rng: &mut ChaCha8Rng, dim: usize) -> Diffeo {
        let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let radius = rng.random_range(0.5..2.0);
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= n);
        let amp = rng.random_range(-0.9..0.9) * amplitude_bound(radius);
        Diffeo::bump_flow(dim, center, radius, amp, dir).unwrap()
    }

    #[test]
    fn second_derivative_matches_differences() {
        for r in [-0.9, -0.5, 0.0, 0.3, 0.7, 0.95] {
            let h = 1e-6;
            let fd = (bump_derivative(r + h) - bump_derivative(r - h)) / (2.0 * h);
            assert_relative_eq!(bump_second_derivative(r), fd, epsilon = 1e-7, max_relative = 1e-6);
        }
        assert_eq!(bump_second_derivative(1.0), 0.0);
    }

    #[test]
    fn hessian_along_matches_jacobian_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for dim in 1..=3 {
            for _ in 0..20 {
                let f = random_bump(&mut rng, dim);
                let g = random_bump(&mut rng, dim);
                let maps = [f.clone(), f.inverse().unwrap(), Diffeo::compose(&f, &g).unwrap()];
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                for phi in &maps {
                    let h = 1e-6;
                    let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
                    let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
                    let fd = (phi.displacement_jacobian(&xp) - phi.displacement_jacobian(&xm)) / (2.0 * h);
                    let exact = phi.displacement_hessian_along(&x, &v);
                    assert!((&fd - &exact).amax() <= 1e-6 * (1.0 + exact.amax()), "{fd} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn jacobian_increment_resolves_tiny_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for dim in 1..=3 {
            let f = random_bump(&mut rng, dim);
            let g = random_bump(&mut rng, dim);
            let phi = Diffeo::compose(&f, &g).unwrap();
            let x: Vec<f64> = f.support_center().iter().map(|c| c + 0.1).collect();
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            // Far below the resolution of x, the increment is linear in v.
            let tiny: Vec<f64> = v.iter().map(|q| q * 1e-30).collect();
            let inc = phi.displacement_jacobian_increment(&x, &tiny) * 1e30;
            let lin = phi.displacement_hessian_along(&x, &v);
            assert!((&inc - &lin).amax() <= 1e-12 * (1.0 + lin.amax()));
            // Both branches agree near the switch.
            let small: Vec<f64> = v.iter().map(|q| q * 1e-4 * phi.length_scale()).collect();
            let end: Vec<f64> = x.iter().zip(&small).map(|(a, b)| a + b).collect();
            let direct = phi.displacement_jacobian(&end) - phi.displacement_jacobian(&x);
            let inc = phi.displacement_jacobian_increment(&x, &small);
            assert!((&inc - &direct).amax() <= 1e-9 * (1.0 + direct.amax()) + 1e-12);
        }
    }

    #[test]
    fn slope_bound_matches_grid_search() {
        let grid = (0..2_000_000)
            .map(|i| bump_derivative(i as f64 / 2_000_000.0).abs())
            .fold(0.0, f64::max);
        assert_relative_eq!(max_bump_slope(), grid, max_relative = 1e-9);
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let id = Diffeo::identity(2);
        for x in [[3.2, -1.0], [0.0, 0.0], [-0.0, 0.1]] {
            let y = id.apply(&x);
            assert_eq!(y[0].to_bits(), x[0].to_bits());
            assert_eq!(y[1].to_bits(), x[1].to_bits());
            assert_eq!(id.jacobian(&x), 1.0);
        }
    }

    #[test]
    fn bump_value_at_center() {
        let phi = bump1(0.1);
        assert_relative_eq!(phi.apply(&[0.0])[0], 0.1 * (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(phi.apply(&[0.0])[0], 0.036_787_944_117_144_23, max_relative = 1e-12);
        assert_eq!(phi.apply(&[5.0]), vec![5.0]);
        assert_eq!(phi.apply(&[1.0]), vec![1.0]);
        assert_eq!(phi.jacobian(&[0.0]), 1.0);
    }

    #[test]
    fn rejects_inadmissible_amplitude() {
        let bound = amplitude_bound(1.0);
        let err = Diffeo::bump_flow(1, vec![0.0], 1.0, bound, vec![1.0]).unwrap_err();
        match err {
            Error::AmplitudeTooLarge { max_admissible, .. } => {
                assert_relative_eq!(max_admissible, bound)
            }
            e => panic!("unexpected {e:?}"),
        }
        assert!(Diffeo::bump_flow(1, vec![0.0], 1.0, 0.999 * bound, vec![1.0]).is_ok());
        assert!(Diffeo::bump_flow(2, vec![0.0], 1.0, 0.1, vec![1.0, 0.0]).is_err());
        assert!(Diffeo::bump_flow(2, vec![0.0, 0.0], 1.0, 0.1, vec![1.0, 1.0]).is_err());
        assert!(Diffeo::bump_flow(1, vec![0.0], -1.0, 0.1, vec![1.0]).is_err());
    }

    #[test]
    fn jacobian_matches_finite_difference() {
        let phi = bump1(0.1);
        let x = [0.5];
        assert_relative_eq!(phi.jacobian(&x), phi.jacobian_fd(&x, 1e-5), max_relative = 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..=3 {
            for _ in 0..50 {
                let phi = random_bump(&mut rng, dim);
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fd = phi.jacobian_fd(&x, 1e-5);
                assert_relative_eq!(phi.jacobian(&x), fd, max_relative = 1e-6);
                assert_relative_eq!(
                    phi.jacobian(&x),
                    phi.jacobian_matrix(&x).determinant(),
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn inverse_round_trip_on_grid() {
        let phi = bump1(0.1);
        let inv = phi.inverse().unwrap();
        for i in 0..1000 {
            let x = -1.5 + 3.0 * i as f64 / 999.0;
            let back = inv.apply(&phi.apply(&[x]))[0];
            assert!((back - x).abs() <= 1e-10, "x={x} back={back}");
            let jinv = inv.jacobian(&phi.apply(&[x]));
            assert_relative_eq!(jinv, 1.0 / phi.jacobian(&[x]), max_relative = 1e-8);
        }
        let id = Diffeo::identity(1);
        assert_eq!(id.inverse().unwrap().apply(&[0.3]), vec![0.3]);
    }

    #[test]
    fn inverse_round_trip_near_bound_in_higher_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for dim in 2..=4 {
            let center = vec![0.2; dim];
            let mut dir = vec![0.0; dim];
            dir[dim - 1] = 1.0;
            let phi = Diffeo::bump_flow(dim, center, 1.0, 0.99 * amplitude_bound(1.0), dir).unwrap();
            let inv = phi.inverse().unwrap();
            for _ in 0..500 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.4)).collect();
                let back = inv.apply(&phi.apply(&x));
                for (a, b) in back.iter().zip(&x) {
                    assert!((a - b).abs() <= 1e-10);
                }
                let m = inv.jacobian_matrix(&phi.apply(&x)) * phi.jacobian_matrix(&x);
                assert!((m - DMatrix::identity(dim, dim)).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn compose_chain_rule_and_group_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for dim in 1..=3 {
            let f = random_bump(&mut rng, dim);
            let g = random_bump(&mut rng, dim);
            let fg = Diffeo::compose(&f, &g).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
                assert_eq!(fg.apply(&x), g.apply(&f.apply(&x)));
                let expect = f.jacobian(&x) * g.jacobian(&f.apply(&x));
                assert_relative_eq!(fg.jacobian(&x), expect, max_relative = 1e-8);
                assert_relative_eq!(
                    fg.jacobian(&x),
                    fg.jacobian_matrix(&x).determinant(),
                    max_relative = 1e-10
                );
            }
            let round = Diffeo::compose(&f, &f.inverse().unwrap()).unwrap();
            let with_id = Diffeo::compose(&f, &Diffeo::identity(dim)).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.5..2.5)).collect();
                for (a, b) in round.apply(&x).iter().zip(&x) {
                    assert!((a - b).abs() <= 1e-10);
                }
                assert_eq!(with_id.apply(&x), f.apply(&x));
            }
        }
        let err = Diffeo::compose(&Diffeo::identity(1), &Diffeo::identity(2)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn composite_support_contains_both_balls() {
        let f = Diffeo::bump_flow(2, vec![0.0, 0.0], 1.0, 0.3, vec![1.0, 0.0]).unwrap();
        let g = Diffeo::bump_flow(2, vec![3.0, 0.0], 0.5, 0.3, vec![0.0, 1.0]).unwrap();
        let fg = Diffeo::compose(&f, &g).unwrap();
        assert!(fg.support_radius() <= 1.0 + 0.5 + 3.0 + 1e-9);
        assert_relative_eq!(fg.support_radius(), 2.25, max_relative = 1e-9);
    }

    #[test]
    fn origin_fixing() {
        let away = Diffeo::bump_flow(2, vec![2.0, 0.0], 1.0, 0.3, vec![1.0, 0.0]).unwrap();
        assert!(away.fixes_origin());
        let zero = away.apply(&[0.0, 0.0]);
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(!bump1(0.1).fixes_origin());
        let both = Diffeo::compose(&away, &away.inverse().unwrap()).unwrap();
        assert!(both.fixes_origin());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let f = Diffeo::bump_flow(2, vec![0.5, 0.0], 1.0, 0.3, vec![0.0, 1.0]).unwrap();
        let g = Diffeo::compose(&f, &f.inverse().unwrap()).unwrap();
        let text = serde_json::to_string(&g).unwrap();
        assert!(text.contains("\"kind\":\"compose\""));
        let back: Diffeo = serde_json::from_str(&text).unwrap();
        assert_eq!(back.apply(&[0.4, 0.1]), g.apply(&[0.4, 0.1]));
        let bad = r#"{"kind":"bump","dim":1,"center":[0],"radius":1,"amplitude":0.1,"direction":[1],"extra":1}"#;
        assert!(serde_json::from_str::<Diffeo>(bad).is_err());
        let too_big = r#"{"kind":"bump","dim":1,"center":[0],"radius":1,"amplitude":5,"direction":[1]}"#;
        assert!(serde_json::from_str::<Diffeo>(too_big).is_err());
    }
}
