use serde::{Deserialize, Serialize};
use serde_json::Value;

use selfsim::configspace::detect_accumulation_points;
use selfsim::matrixprocess::{sample_initial_stage, sample_matrix_chain, ChainRecord, MatrixProcessParams};
use selfsim::phase::{estimate_kappa0, sweep, Kappa0Options, PhaseDiagram, PhaseThresholds};
use selfsim::poisson::{poisson_rn, sample_poisson, PoissonSpec};
use selfsim::process1d::{sample_deviation_path, PathRecord, Process1DParams};
use selfsim::rnd::{chain_rule_check, truncated_rn_product, unitarity_mc, DiagnosticThresholds, PsiSpec, RnReport};
use selfsim::seed::{replicate, stream_rng};
use selfsim::{PointSet, ProcessSpec, SequencePath};

use crate::config::{parse_box, parse_test_function, Command, Format, RunConfig};
use crate::output::{csv_document, json_document, jsonl_document, Cell, Header};
use crate::CliError;

fn process_spec(cfg: &RunConfig, kappa: f64) -> Result<ProcessSpec, CliError> {
    let d = cfg.dim();
    let n = cfg.steps.unwrap_or(1000);
    let spec = if d == 1 {
        ProcessSpec::Scalar(Process1DParams::new(kappa, n, cfg.seed())?)
    } else {
        ProcessSpec::Matrix(MatrixProcessParams::new(d, kappa, cfg.alpha.unwrap_or(1.0), n, cfg.seed())?)
    };
    Ok(spec)
}

#[derive(Serialize)]
struct Replica<T: Serialize> {
    replica: usize,
    #[serde(flatten)]
    record: T,
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<String, CliError> {
    let header = Header::new(cfg);
    let format = cfg.format.unwrap_or(Format::Json);
    match command {
        Command::Sample1d => sample1d(cfg, &header, format),
        Command::Sampledd => sampledd(cfg, &header, format),
        Command::Poisson => poisson(cfg, &header, format),
        Command::Rncheck => rncheck(cfg, &header, format),
        Command::Unitarity => unitarity(cfg, &header),
        Command::Kappa0 => kappa0(cfg, &header),
        Command::Sweep => phase_sweep(cfg, &header, format),
        Command::Accpoints => accpoints(cfg, &header),
    }
}

fn records_document<T: Serialize>(header: &Header, format: Format, records: &[T]) -> String {
    match format {
        Format::Jsonl => jsonl_document(header, records),
        _ => json_document(header, &records),
    }
}

fn sample1d(cfg: &RunConfig, header: &Header, format: Format) -> Result<String, CliError> {
    let params = Process1DParams::new(cfg.kappa.unwrap_or(1.0), cfg.steps.unwrap_or(1000), cfg.seed())?;
    let records: Vec<Replica<PathRecord>> = replicate(cfg.seed(), cfg.replicas.unwrap_or(1), |r, rng| {
        let x0 = params.initial.sample(rng);
        let dev = sample_deviation_path(&params, rng);
        Replica { replica: r, record: PathRecord::new(x0, &dev) }
    });
    if format != Format::Csv {
        return Ok(records_document(header, format, &records));
    }
    let columns: Vec<String> = ["replica", "j", "x", "y", "y_ln_abs", "y_sign"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for rec in &records {
        let p = &rec.record;
        rows.push(vec![rec.replica.into(), 0usize.into(), p.x0.into(), Cell::Empty, Cell::Empty, Cell::Empty]);
        for j in 0..p.y.len() {
            rows.push(vec![
                rec.replica.into(),
                (j + 1).into(),
                p.x[j + 1].into(),
                p.y[j].into(),
                p.y_ln_abs[j].into(),
                Cell::Int(p.y_sign[j] as i64),
            ]);
        }
    }
    Ok(csv_document(header, &columns, &rows))
}

fn sampledd(cfg: &RunConfig, header: &Header, format: Format) -> Result<String, CliError> {
    let params = MatrixProcessParams::new(
        cfg.dim(),
        cfg.kappa.unwrap_or(1.0),
        cfg.alpha.unwrap_or(1.0),
        cfg.steps.unwrap_or(1000),
        cfg.seed(),
    )?;
    let results = replicate(cfg.seed(), cfg.replicas.unwrap_or(1), |r, rng| {
        let x0 = sample_initial_stage(&params, rng);
        sample_matrix_chain(&params, rng).map(|chain| Replica { replica: r, record: ChainRecord::new(&params, &x0, &chain) })
    });
    let records = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    if format != Format::Csv {
        return Ok(records_document(header, format, &records));
    }
    let d = cfg.dim();
    let mut columns: Vec<String> = ["replica", "j", "log_norm"].map(String::from).to_vec();
    for r in 1..=d {
        for c in 1..=d {
            columns.push(format!("w_{r}_{c}"));
        }
    }
    let mut rows = Vec::new();
    for rec in &records {
        for (j, w) in rec.record.w.iter().enumerate() {
            let mut row: Vec<Cell> = vec![rec.replica.into(), (j + 1).into(), rec.record.log_norm[j].into()];
            row.extend(w.iter().flatten().map(|v| Cell::Float(*v)));
            rows.push(row);
        }
    }
    Ok(csv_document(header, &columns, &rows))
}

#[derive(Serialize)]
struct ConfigMeta {
    replica: usize,
    seed: u64,
    sigma: f64,
    count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rn: Option<f64>,
}

#[derive(Serialize)]
struct ConfigLine {
    points: Vec<Vec<f64>>,
    meta: ConfigMeta,
}

fn poisson(cfg: &RunConfig, header: &Header, format: Format) -> Result<String, CliError> {
    let d = cfg.dim();
    let window = parse_box("window", cfg.window.as_deref().unwrap_or(&[]), d)?;
    let spec = PoissonSpec::new(cfg.sigma.unwrap_or(1.0), window)?;
    let phi = if cfg.diffeo.is_some() { Some(cfg.composed_diffeo()?) } else { None };
    let lines: Vec<ConfigLine> = replicate(cfg.seed(), cfg.replicas.unwrap_or(1), |r, rng| {
        let c = sample_poisson(&spec, rng);
        ConfigLine {
            points: (0..c.len()).map(|i| c.point(i).to_vec()).collect(),
            meta: ConfigMeta {
                replica: r,
                seed: cfg.seed(),
                sigma: spec.sigma,
                count: c.len(),
                rn: phi.as_ref().map(|p| poisson_rn(p, &c)),
            },
        }
    });
    if format != Format::Csv {
        return Ok(records_document(header, format, &lines));
    }
    let mut columns: Vec<String> = ["replica", "i"].map(String::from).to_vec();
    columns.extend((1..=d).map(|r| format!("x{r}")));
    let mut rows = Vec::new();
    for line in &lines {
        for (i, p) in line.points.iter().enumerate() {
            let mut row: Vec<Cell> = vec![line.meta.replica.into(), i.into()];
            row.extend(p.iter().map(|v| Cell::Float(*v)));
            rows.push(row);
        }
    }
    Ok(csv_document(header, &columns, &rows))
}

#[derive(Serialize)]
struct RnCheckResult {
    #[serde(flatten)]
    report: RnReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    chain_rule_max_error: Option<f64>,
}

fn rncheck(cfg: &RunConfig, header: &Header, format: Format) -> Result<String, CliError> {
    let diffeos = cfg.diffeos()?;
    if diffeos.is_empty() {
        return Err(CliError::Validation("diffeo is required for rncheck".into()));
    }
    let spec = process_spec(cfg, cfg.kappa.unwrap_or(0.5))?;
    let path = spec.sample(&mut stream_rng(cfg.seed(), 0))?;
    let k = cfg.k.unwrap_or(spec.n_steps());
    if k == 0 || k > path.max_factors() {
        return Err(CliError::Validation(format!("k must lie in 1..={}", path.max_factors())));
    }
    let thresholds = DiagnosticThresholds {
        gap_tolerance: cfg.gap_tol.unwrap_or(1e-2),
        overflow: cfg.overflow.unwrap_or(1e8),
    };
    if !(thresholds.gap_tolerance > 0.0) {
        return Err(CliError::Validation("gap_tol must be positive".into()));
    }
    if !(thresholds.overflow > 1.0) {
        return Err(CliError::Validation("overflow must exceed 1".into()));
    }
    let phi = cfg.composed_diffeo()?;
    let report = truncated_rn_product(&path, &phi, k, &thresholds)?;
    let chain_rule_max_error =
        if diffeos.len() == 2 { Some(chain_rule_check(&diffeos[0], &diffeos[1], &path, k)?) } else { None };
    if format == Format::Csv {
        let columns: Vec<String> = ["j", "log_factor", "log_partial"].map(String::from).to_vec();
        let rows: Vec<Vec<Cell>> = (0..report.truncation)
            .map(|j| vec![(j + 1).into(), report.factors_logged[j].into(), report.log_partial[j].into()])
            .collect();
        return Ok(csv_document(header, &columns, &rows));
    }
    Ok(json_document(header, &RnCheckResult { report, chain_rule_max_error }))
}

fn unitarity(cfg: &RunConfig, header: &Header) -> Result<String, CliError> {
    let d = cfg.dim();
    let psi = PsiSpec {
        phase: parse_test_function("phase_fn", cfg.phase_fn.as_deref().unwrap_or(&[]), d)?,
        weight: match &cfg.weight_fn {
            Some(w) => Some(parse_test_function("weight_fn", w, d)?),
            None => None,
        },
    };
    if psi.weight.iter().flat_map(|w| &w.bumps).any(|b| b.weight < 0.0) {
        return Err(CliError::Validation("weight_fn weights must be nonnegative".into()));
    }
    let spec = process_spec(cfg, cfg.kappa.unwrap_or(0.5))?;
    let phi = cfg.composed_diffeo()?;
    let k = cfg.k.unwrap_or(50);
    if k == 0 {
        return Err(CliError::Validation("k must be positive".into()));
    }
    let report = unitarity_mc(&psi, &phi, &spec, cfg.replicas.unwrap_or(1000), k, cfg.seed())?;
    Ok(json_document(header, &report))
}

fn kappa0(cfg: &RunConfig, header: &Header) -> Result<String, CliError> {
    let spec = process_spec(cfg, 1.0)?;
    let bracket = cfg.bracket.clone().unwrap_or_default();
    if bracket.len() != 2 {
        return Err(CliError::Validation("bracket needs exactly two numbers".into()));
    }
    let options = Kappa0Options {
        bracket: [bracket[0], bracket[1]],
        tolerance: cfg.tol.unwrap_or(0.02),
        base_replicas: cfg.replicas.unwrap_or(200),
        max_replicas: cfg.max_replicas.unwrap_or(3200),
        thresholds: PhaseThresholds::default(),
    };
    let estimate = estimate_kappa0(&spec, &options, cfg.seed())?;
    Ok(json_document(header, &estimate))
}

fn phase_sweep(cfg: &RunConfig, header: &Header, format: Format) -> Result<String, CliError> {
    let spec = process_spec(cfg, 1.0)?;
    let grid = cfg.grid.clone().unwrap_or_default();
    if grid.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
        return Err(CliError::Validation("grid values must be positive".into()));
    }
    let diagram = sweep(&grid, &spec, cfg.replicas.unwrap_or(200), &PhaseThresholds::default(), cfg.seed())?;
    if format == Format::Csv {
        let columns: Vec<String> = PhaseDiagram::CSV_COLUMNS.map(String::from).to_vec();
        let rows: Vec<Vec<Cell>> = diagram
            .grid
            .iter()
            .map(|r| {
                vec![
                    r.kappa.into(),
                    r.replicas.into(),
                    r.n_steps.into(),
                    r.condensed_fraction.into(),
                    r.drift_mean.into(),
                    r.drift_stderr.into(),
                    r.undecided_fraction.into(),
                ]
            })
            .collect();
        return Ok(csv_document(header, &columns, &rows));
    }
    Ok(json_document(header, &diagram))
}

/// First data line of a JSON or JSONL file holding `points` (a
/// configuration) or `x` (a 1-D path record).
#[derive(Deserialize)]
struct InputPath {
    #[serde(default)]
    points: Option<Vec<Vec<Option<f64>>>>,
    #[serde(default)]
    x: Option<Vec<Option<f64>>>,
}

fn read_input(path: &std::path::Path, d: usize) -> Result<SequencePath, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("input cannot read {}: {e}", path.display())))?;
    let bad = |m: String| CliError::Validation(format!("input {m}"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let value = value.get("result").cloned().unwrap_or(value);
        let value = match value {
            Value::Array(mut a) if !a.is_empty() => a.swap_remove(0),
            v => v,
        };
        if value.get("header").is_some() {
            continue;
        }
        let rec: InputPath = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        // Escaped positions are stored as null.
        let fix = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
        if let Some(points) = rec.points {
            if points.iter().any(|p| p.len() != d) {
                return Err(bad(format!("points must have dimension {d}")));
            }
            let pts: Vec<Vec<f64>> = points.into_iter().map(|p| p.into_iter().map(fix).collect()).collect();
            return Ok(SequencePath::from_points(d, &pts));
        }
        if let Some(x) = rec.x {
            if d != 1 {
                return Err(bad("x records are one-dimensional".into()));
            }
            return Ok(SequencePath::from_scalars(&x.into_iter().map(fix).collect::<Vec<_>>()));
        }
        return Err(bad("needs a points or x field".into()));
    }
    Err(bad("contains no path".into()))
}

fn accpoints(cfg: &RunConfig, header: &Header) -> Result<String, CliError> {
    let d = cfg.dim();
    let path = match &cfg.input {
        Some(p) => read_input(p, d)?,
        None => {
            let spec = process_spec(cfg, cfg.kappa.unwrap_or(0.5))?;
            spec.sample(&mut stream_rng(cfg.seed(), 0))?.sequence().clone()
        }
    };
    let region = parse_box("region", cfg.region.as_deref().unwrap_or(&[]), d)?;
    let m = cfg.m.unwrap_or(50);
    let report = detect_accumulation_points(
        &path,
        &region,
        cfg.epsilon.unwrap_or(0.01),
        m,
        cfg.tail_fraction.unwrap_or(0.5),
    )?;
    Ok(json_document(header, &report))
}
