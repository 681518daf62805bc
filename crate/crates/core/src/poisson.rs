//! Poisson configurations in a window and their finite RN products.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::configspace::{BoxRegion, Config};
use crate::diffeo::Diffeo;
use crate::error::{invalid, Result};
use crate::path::PointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonSpec {
    pub sigma: f64,
    pub window: BoxRegion,
}

impl PoissonSpec {
    pub fn new(sigma: f64, window: BoxRegion) -> Result<PoissonSpec> {
        let s = PoissonSpec { sigma, window };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(invalid("sigma", "must be positive"));
        }
        if !(self.window.volume() > 0.0) {
            return Err(invalid("window", "must have positive volume"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.window.dim()
    }

    pub fn mean_count(&self) -> f64 {
        self.sigma * self.window.volume()
    }
}

/// `N ~ Poisson(sigma vol)` points, i.i.d. uniform in the window.
pub fn sample_poisson<R: Rng + ?Sized>(spec: &PoissonSpec, rng: &mut R) -> Config {
    let n = Poisson::new(spec.mean_count()).map(|p| p.sample(rng) as usize).unwrap_or(0);
    let w = &spec.window;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|_| w.lo.iter().zip(&w.hi).map(|(a, b)| rng.random_range(*a..*b)).collect())
        .collect();
    Config::from_points(spec.dim(), points)
}

/// `ln prod_{x in gamma} J_phi(x)`; points fixed by `phi` contribute exactly 0.
pub fn ln_poisson_rn<P: PointSet + ?Sized>(phi: &Diffeo, gamma: &P) -> f64 {
    (0..gamma.len())
        .map(|i| gamma.point(i))
        .filter(|x| !phi.is_fixed_at(x))
        .map(|x| phi.jacobian(x).ln())
        .sum()
}

pub fn poisson_rn<P: PointSet + ?Sized>(phi: &Diffeo, gamma: &P) -> f64 {
    ln_poisson_rn(phi, gamma).exp()
}
