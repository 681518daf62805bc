//! Run configuration: flags merged over an optional JSON file, then
//! resolved against per-command defaults.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use selfsim::diffeo::DiffeoSpec;
use selfsim::rnd::{BumpTerm, TestFunction};
use selfsim::Diffeo;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Jsonl,
}

impl Format {
    pub fn name(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
            Format::Jsonl => "jsonl",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Sample1d,
    Sampledd,
    Poisson,
    Rncheck,
    Unitarity,
    Kappa0,
    Sweep,
    Accpoints,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample1d => "sample1d",
            Command::Sampledd => "sampledd",
            Command::Poisson => "poisson",
            Command::Rncheck => "rncheck",
            Command::Unitarity => "unitarity",
            Command::Kappa0 => "kappa0",
            Command::Sweep => "sweep",
            Command::Accpoints => "accpoints",
        }
    }

    /// Fields a command reads, besides `command`, `seed`, `out`, `format`.
    fn fields(self) -> &'static [&'static str] {
        match self {
            Command::Sample1d => &["dim", "kappa", "steps", "replicas"],
            Command::Sampledd => &["dim", "kappa", "alpha", "steps", "replicas"],
            Command::Poisson => &["dim", "sigma", "window", "replicas", "diffeo"],
            Command::Rncheck => &["dim", "kappa", "alpha", "steps", "diffeo", "k", "gap_tol", "overflow"],
            Command::Unitarity => &["dim", "kappa", "alpha", "diffeo", "replicas", "k", "phase_fn", "weight_fn"],
            Command::Kappa0 => &["dim", "alpha", "steps", "tol", "bracket", "replicas", "max_replicas"],
            Command::Sweep => &["dim", "alpha", "steps", "grid", "replicas"],
            Command::Accpoints => &["dim", "kappa", "alpha", "steps", "input", "region", "epsilon", "m", "tail_fraction"],
        }
    }

    fn formats(self) -> &'static [Format] {
        match self {
            Command::Sample1d | Command::Sampledd | Command::Poisson => &[Format::Jsonl, Format::Json, Format::Csv],
            Command::Rncheck => &[Format::Json, Format::Csv],
            Command::Sweep => &[Format::Csv, Format::Json],
            Command::Unitarity | Command::Kappa0 | Command::Accpoints => &[Format::Json],
        }
    }
}

/// A diffeomorphism given either in the flag mini-syntax or as full JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiffeoArg {
    Text(String),
    Spec(DiffeoSpec),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Option<String>,
    pub dim: Option<usize>,
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,
    pub replicas: Option<usize>,
    pub max_replicas: Option<usize>,
    pub seed: Option<u64>,
    pub diffeo: Option<Vec<DiffeoArg>>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub tol: Option<f64>,
    pub sigma: Option<f64>,
    pub window: Option<Vec<f64>>,
    pub region: Option<Vec<f64>>,
    pub k: Option<usize>,
    pub grid: Option<Vec<f64>>,
    pub epsilon: Option<f64>,
    pub m: Option<usize>,
    pub tail_fraction: Option<f64>,
    pub gap_tol: Option<f64>,
    pub overflow: Option<f64>,
    pub bracket: Option<Vec<f64>>,
    pub phase_fn: Option<Vec<String>>,
    pub weight_fn: Option<Vec<String>>,
    pub input: Option<PathBuf>,
}

macro_rules! for_each_field {
    ($m:ident) => {
        $m!(
            dim, kappa, alpha, steps, replicas, max_replicas, seed, diffeo, out, format, tol, sigma, window, region, k,
            grid, epsilon, m, tail_fraction, gap_tol, overflow, bracket, phase_fn, weight_fn, input
        )
    };
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("config cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {e}")))
    }

    /// Fields set in `self` win over `base`.
    pub fn over(self, base: RunConfig) -> RunConfig {
        let mut out = RunConfig { command: self.command.or(base.command), ..RunConfig::default() };
        macro_rules! merge {
            ($($f:ident),*) => { $( out.$f = self.$f.or(base.$f); )* };
        }
        for_each_field!(merge);
        out
    }

    fn set_fields(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        macro_rules! collect {
            ($($f:ident),*) => { $( if self.$f.is_some() { v.push(stringify!($f)); } )* };
        }
        for_each_field!(collect);
        v
    }

    /// Checks the command/field combination and fills in defaults.
    pub fn resolve(mut self, command: Command) -> Result<RunConfig, CliError> {
        if let Some(c) = &self.command {
            if c != command.name() {
                return Err(CliError::Validation(format!(
                    "command in config file is {c:?} but {:?} was requested",
                    command.name()
                )));
            }
        }
        self.command = Some(command.name().to_string());
        for f in self.set_fields() {
            if !matches!(f, "seed" | "out" | "format") && !command.fields().contains(&f) {
                return Err(CliError::Validation(format!("{f} is not used by command {}", command.name())));
            }
        }
        let format = *self.format.get_or_insert(command.formats()[0]);
        if !command.formats().contains(&format) {
            return Err(CliError::Validation(format!(
                "format {} is not supported by command {}",
                format.name(),
                command.name()
            )));
        }
        self.seed.get_or_insert(0);
        let dim = match command {
            Command::Sample1d => *self.dim.get_or_insert(1),
            Command::Sampledd => *self.dim.get_or_insert(2),
            Command::Poisson => *self.dim.get_or_insert(self.window.as_ref().map_or(1, |w| w.len() / 2)),
            _ => *self.dim.get_or_insert(1),
        };
        if dim == 0 {
            return Err(CliError::Validation("dim must be positive".into()));
        }
        let matrix = dim > 1;
        match command {
            Command::Sample1d => {
                if dim != 1 {
                    return Err(CliError::Validation("dim must be 1 for sample1d".into()));
                }
                self.kappa.get_or_insert(1.0);
                self.steps.get_or_insert(1000);
                self.replicas.get_or_insert(1);
            }
            Command::Sampledd => {
                if dim < 2 {
                    return Err(CliError::Validation("dim must be at least 2 for sampledd".into()));
                }
                self.kappa.get_or_insert(1.0);
                self.alpha.get_or_insert(1.0);
                self.steps.get_or_insert(1000);
                self.replicas.get_or_insert(1);
            }
            Command::Poisson => {
                self.sigma.get_or_insert(1.0);
                self.window.get_or_insert_with(|| [vec![0.0; dim], vec![1.0; dim]].concat());
                self.replicas.get_or_insert(1);
            }
            Command::Rncheck => {
                self.kappa.get_or_insert(0.5);
                if matrix {
                    self.alpha.get_or_insert(1.0);
                }
                let steps = *self.steps.get_or_insert(1000);
                self.k.get_or_insert(steps);
                self.gap_tol.get_or_insert(1e-2);
                self.overflow.get_or_insert(1e8);
            }
            Command::Unitarity => {
                self.kappa.get_or_insert(0.5);
                if matrix {
                    self.alpha.get_or_insert(1.0);
                }
                self.replicas.get_or_insert(1000);
                self.k.get_or_insert(50);
            }
            Command::Kappa0 => {
                if matrix {
                    self.alpha.get_or_insert(1.0);
                }
                self.steps.get_or_insert(if matrix { 1000 } else { 10_000 });
                self.tol.get_or_insert(0.02);
                self.bracket.get_or_insert_with(|| selfsim::phase::default_bracket(dim).to_vec());
                self.replicas.get_or_insert(200);
                self.max_replicas.get_or_insert(if matrix { 800 } else { 3200 });
            }
            Command::Sweep => {
                if matrix {
                    self.alpha.get_or_insert(1.0);
                }
                self.steps.get_or_insert(if matrix { 1000 } else { 10_000 });
                self.grid.get_or_insert_with(|| vec![0.5, 1.0, 3.0, 5.0]);
                self.replicas.get_or_insert(200);
            }
            Command::Accpoints => {
                if self.input.is_none() {
                    self.kappa.get_or_insert(0.5);
                    if matrix {
                        self.alpha.get_or_insert(1.0);
                    }
                    self.steps.get_or_insert(10_000);
                }
                self.region.get_or_insert_with(|| [vec![-1e6; dim], vec![1e6; dim]].concat());
                self.epsilon.get_or_insert(0.01);
                self.m.get_or_insert(50);
                self.tail_fraction.get_or_insert(0.5);
            }
        }
        if self.replicas == Some(0) {
            return Err(CliError::Validation("replicas must be positive".into()));
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(1)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn diffeos(&self) -> Result<Vec<Diffeo>, CliError> {
        let d = self.dim();
        self.diffeo.iter().flatten().map(|a| parse_diffeo(a, d)).collect()
    }

    /// The listed diffeomorphisms composed in order (first listed applies
    /// first); identity when none are given.
    pub fn composed_diffeo(&self) -> Result<Diffeo, CliError> {
        let mut acc = Diffeo::identity(self.dim());
        for phi in self.diffeos()? {
            acc = Diffeo::compose(&acc, &phi)?;
        }
        Ok(acc)
    }
}

fn numbers(field: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Validation(format!("{field} has a malformed number {t:?}")))
        })
        .collect()
}

/// `identity`, `bump:c_1..c_d,radius,amplitude[,e_1..e_d]`, or a JSON
/// diffeomorphism spec.
pub fn parse_diffeo(arg: &DiffeoArg, d: usize) -> Result<Diffeo, CliError> {
    let spec = match arg {
        DiffeoArg::Spec(s) => s.clone(),
        DiffeoArg::Text(t) if t.trim_start().starts_with('{') => {
            serde_json::from_str::<DiffeoSpec>(t).map_err(|e| CliError::Validation(format!("diffeo {e}")))?
        }
        DiffeoArg::Text(t) if t.trim() == "identity" => return Ok(Diffeo::identity(d)),
        DiffeoArg::Text(t) => {
            let body = t
                .strip_prefix("bump:")
                .ok_or_else(|| CliError::Validation(format!("diffeo must be identity, bump:... or JSON (got {t:?})")))?;
            let v = numbers("diffeo", body)?;
            let direction = if v.len() == d + 2 {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            } else if v.len() == 2 * d + 2 {
                let e = v[d + 2..].to_vec();
                let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > 0.0) {
                    return Err(CliError::Validation("diffeo direction must be nonzero".into()));
                }
                e.iter().map(|x| x / n).collect()
            } else {
                return Err(CliError::Validation(format!(
                    "diffeo bump needs {} or {} numbers in dimension {d} (got {})",
                    d + 2,
                    2 * d + 2,
                    v.len()
                )));
            };
            DiffeoSpec::Bump { dim: d, center: v[..d].to_vec(), radius: v[d], amplitude: v[d + 1], direction }
        }
    };
    let phi = spec.build()?;
    if phi.dim() != d {
        return Err(CliError::Validation(format!("diffeo dimension {} does not match dim {d}", phi.dim())));
    }
    Ok(phi)
}

/// `c_1..c_d,radius,weight` terms of a test function.
pub fn parse_test_function(field: &str, terms: &[String], d: usize) -> Result<TestFunction, CliError> {
    let mut bumps = Vec::new();
    for t in terms {
        let v = numbers(field, t.strip_prefix("bump:").unwrap_or(t))?;
        if v.len() != d + 2 {
            return Err(CliError::Validation(format!("{field} terms need {} numbers (got {})", d + 2, v.len())));
        }
        if !(v[d] > 0.0) {
            return Err(CliError::Validation(format!("{field} radius must be positive")));
        }
        bumps.push(BumpTerm { center: v[..d].to_vec(), radius: v[d], weight: v[d + 1] });
    }
    Ok(TestFunction { bumps })
}

/// Splits `2d` numbers into a box `(lo, hi)`.
pub fn parse_box(field: &str, v: &[f64], d: usize) -> Result<selfsim::configspace::BoxRegion, CliError> {
    if v.len() != 2 * d {
        return Err(CliError::Validation(format!("{field} needs {} numbers (lo then hi) in dimension {d}", 2 * d)));
    }
    selfsim::configspace::BoxRegion::new(v[..d].to_vec(), v[d..].to_vec())
        .map_err(|e| CliError::Validation(format!("{field}: {e}")))
}
