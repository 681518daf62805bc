//! Point sequences in R^d.

use serde::{Deserialize, Serialize};

/// Anything that can be read as an ordered list of points in R^d.
pub trait PointSet {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn point(&self, i: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn points(&self) -> Box<dyn Iterator<Item = &[f64]> + '_> {
        Box::new((0..self.len()).map(move |i| self.point(i)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

/// A finite prefix `(x_0, x_1, ..., x_n)` of a random sequence in R^d.
///
/// Coordinates are stored flat, point-major. Once a coordinate leaves the
/// f64 range, that point and every later point are stored as `+inf`
/// ("escaped"): they lie outside every bounded region.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePath {
    dim: usize,
    coords: Vec<f64>,
    provenance: Option<Provenance>,
}

impl SequencePath {
    pub fn new(dim: usize) -> SequencePath {
        assert!(dim > 0, "dimension must be positive");
        SequencePath { dim, coords: Vec::new(), provenance: None }
    }

    pub fn with_capacity(dim: usize, points: usize) -> SequencePath {
        let mut p = SequencePath::new(dim);
        p.coords.reserve(dim * points);
        p
    }

    /// Builds a path from explicit points.
    pub fn from_points<P: AsRef<[f64]>>(dim: usize, points: &[P]) -> SequencePath {
        let mut p = SequencePath::with_capacity(dim, points.len());
        for x in points {
            p.push(x.as_ref());
        }
        p
    }

    pub fn from_scalars(values: &[f64]) -> SequencePath {
        let mut p = SequencePath::with_capacity(1, values.len());
        for &v in values {
            p.push(&[v]);
        }
        p
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.provenance = Some(provenance);
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    /// Appends a point, saturating to `+inf` after the first non-finite one.
    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim);
        let escaped = self.is_escaped_tail() || x.iter().any(|v| !v.is_finite());
        if escaped {
            self.coords.extend(std::iter::repeat_n(f64::INFINITY, self.dim));
        } else {
            self.coords.extend_from_slice(x);
        }
    }

    fn is_escaped_tail(&self) -> bool {
        self.coords.last().is_some_and(|v| *v == f64::INFINITY)
            && self.coords[self.coords.len() - self.dim..].iter().all(|v| *v == f64::INFINITY)
    }

    /// Index of the first escaped point, if any.
    pub fn escaped_from(&self) -> Option<usize> {
        (0..self.len()).find(|&i| self.point(i).iter().any(|v| !v.is_finite()))
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Applies `f` pointwise.
    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> SequencePath {
        let mut out = SequencePath::with_capacity(self.dim, self.len());
        for i in 0..self.len() {
            out.push(&f(self.point(i)));
        }
        out.provenance = self.provenance.clone();
        out
    }

    /// First `k` points.
    pub fn prefix(&self, k: usize) -> SequencePath {
        let k = k.min(self.len());
        SequencePath {
            dim: self.dim,
            coords: self.coords[..k * self.dim].to_vec(),
            provenance: self.provenance.clone(),
        }
    }

    /// Points as nested vectors (for serialization).
    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i).to_vec()).collect()
    }
}

impl PointSet for SequencePath {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}
