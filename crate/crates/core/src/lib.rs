//! Self-similar random point processes on R and R^d, their projection to
//! generalized configurations, and Radon-Nikodym products under compactly
//! supported diffeomorphisms.

pub mod configspace;
pub mod diffeo;
pub mod error;
pub mod matrixprocess;
pub mod path;
pub mod phase;
pub mod poisson;
pub mod process;
pub mod process1d;
pub mod rnd;
pub mod seed;

pub use diffeo::{Diffeo, DiffeoSpec};
pub use error::{Error, Result};
pub use path::{PointSet, SequencePath};
pub use process::{ProcessPath, ProcessSpec};
