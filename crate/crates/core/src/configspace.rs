//! Generalized configurations: projection of sequences to point sets,
//! counting and open-set events, and accumulation-point estimation.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path::{PointSet, SequencePath};
use crate::process::ProcessSpec;
use crate::seed::replicate;

/// Axis-aligned box. Closed or open depending on the predicate using it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<BoxRegion> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::DimensionMismatch { expected: lo.len(), found: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(invalid("box", "requires lo <= hi in every coordinate"));
        }
        Ok(BoxRegion { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<BoxRegion> {
        BoxRegion::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains_closed(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn contains_open(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a < *v && *v < *b)
    }
}

/// A finite generalized configuration: a set of distinct points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    dim: usize,
    points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truncation: Option<usize>,
}

fn key(x: &[f64]) -> Vec<u64> {
    // +0.0 and -0.0 are the same point.
    x.iter().map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() }).collect()
}

impl Config {
    /// Distinct points of the input, in order of first occurrence.
    pub fn from_points<I, P>(dim: usize, points: I) -> Config
    where
        I: IntoIterator<Item = P>,
        P: AsRef<[f64]>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for p in points {
            let p = p.as_ref();
            assert_eq!(p.len(), dim);
            if seen.insert(key(p)) {
                out.push(p.to_vec());
            }
        }
        Config { dim, points: out, truncation: None }
    }

    pub fn cardinality(&self) -> usize {
        self.points.len()
    }

    pub fn truncation(&self) -> Option<usize> {
        self.truncation
    }

    /// The image `{phi(x) : x in gamma}`.
    pub fn map(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Config {
        let mut c = Config::from_points(self.dim, self.points.iter().map(|p| f(p)));
        c.truncation = self.truncation;
        c
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        let k = key(x);
        self.points.iter().any(|p| key(p) == k)
    }
}

impl PointSet for Config {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.points.len()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }
}

/// `p[(x_j)] = {x_j}` on the first `k` entries.
pub fn project(path: &SequencePath, k: usize) -> Config {
    let k = k.min(path.len());
    let mut c = Config::from_points(path.dim(), (0..k).map(|i| path.point(i)));
    c.truncation = Some(k);
    c
}

/// True iff two of the first `k` entries are exactly equal.
pub fn in_diagonal(path: &SequencePath, k: usize) -> bool {
    let k = k.min(path.len());
    let mut seen = HashSet::with_capacity(k);
    (0..k).any(|i| !seen.insert(key(path.point(i))))
}

/// Number of points in the closed box.
pub fn count_in_region<P: PointSet + ?Sized>(points: &P, region: &BoxRegion) -> usize {
    (0..points.len()).filter(|&i| region.contains_closed(points.point(i))).count()
}

/// The event "gamma meets the open box U".
pub fn meets_open<P: PointSet + ?Sized>(points: &P, region: &BoxRegion) -> bool {
    (0..points.len()).any(|i| region.contains_open(points.point(i)))
}

/// The event "gamma is a subset of the open box V".
pub fn subset_of_open<P: PointSet + ?Sized>(points: &P, region: &BoxRegion) -> bool {
    (0..points.len()).all(|i| region.contains_open(points.point(i)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulationReport {
    pub points: Vec<Vec<f64>>,
    pub count: usize,
    pub epsilon: f64,
    pub m: usize,
    pub tail_fraction: f64,
    pub region: BoxRegion,
    /// Set when clusters at length k and k/2 do not match one-to-one.
    pub unresolved: bool,
}

#[derive(Clone, Debug)]
struct Cluster {
    centroid: Vec<f64>,
    size: usize,
    diameter: f64,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut j = i;
        while self.0[j] != r {
            let next = self.0[j];
            self.0[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Single-linkage clusters at scale `eps` of the last `tail_fraction` of the
/// first `k` points, counted with multiplicity.
fn tail_clusters(path: &SequencePath, k: usize, eps: f64, tail_fraction: f64) -> Vec<Cluster> {
    let d = path.dim();
    let start = k - ((k as f64 * tail_fraction).ceil() as usize).clamp(1, k);
    // Distinct finite points with multiplicities.
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pts: Vec<Vec<f64>> = Vec::new();
    let mut mult: Vec<usize> = Vec::new();
    for i in start..k {
        let x = path.point(i);
        if x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        match index.get(&key(x)) {
            Some(&j) => mult[j] += 1,
            None => {
                index.insert(key(x), pts.len());
                pts.push(x.to_vec());
                mult.push(1);
            }
        }
    }
    let mut grid: HashMap<Vec<i64>, Vec<usize>> = HashMap::new();
    let cell = |x: &[f64]| -> Vec<i64> { x.iter().map(|v| (v / eps).floor() as i64).collect() };
    for (i, p) in pts.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let mut uf = UnionFind((0..pts.len()).collect());
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(d as u32))
        .map(|mut c| {
            (0..d)
                .map(|_| {
                    let o = (c % 3) as i64 - 1;
                    c /= 3;
                    o
                })
                .collect()
        })
        .collect();
    for (i, p) in pts.iter().enumerate() {
        let base = cell(p);
        for off in &offsets {
            let nb: Vec<i64> = base.iter().zip(off).map(|(a, b)| a + b).collect();
            if let Some(members) = grid.get(&nb) {
                for &j in members {
                    if j > i && dist(p, &pts[j]) <= eps {
                        uf.union(i, j);
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..pts.len() {
        let r = uf.find(i);
        groups.entry(r).or_default().push(i);
    }
    let mut roots: Vec<usize> = groups.keys().copied().collect();
    roots.sort_unstable();
    roots
        .into_iter()
        .map(|r| {
            let members = &groups[&r];
            let size: usize = members.iter().map(|&i| mult[i]).sum();
            let mut centroid = vec![0.0; d];
            for &i in members {
                for (c, v) in centroid.iter_mut().zip(&pts[i]) {
                    *c += v * mult[i] as f64;
                }
            }
            centroid.iter_mut().for_each(|c| *c /= size as f64);
            // Bounding-box diagonal as diameter proxy.
            let diameter = (0..d)
                .map(|r| {
                    let (lo, hi) = members
                        .iter()
                        .map(|&i| pts[i][r])
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                    (hi - lo) * (hi - lo)
                })
                .sum::<f64>()
                .sqrt();
            Cluster { centroid, size, diameter }
        })
        .collect()
}

/// Estimates accumulation points of a path in the closed box `region`.
///
/// The last `tail_fraction` of the path is clustered by `eps`-linkage; a
/// cluster of at least `m` points whose diameter does not grow when the path
/// length is doubled (compared against the same analysis at half length) is
/// reported through its centroid.
pub fn detect_accumulation_points(
    path: &SequencePath,
    region: &BoxRegion,
    eps: f64,
    m: usize,
    tail_fraction: f64,
) -> Result<AccumulationReport> {
    if path.len() < 100 {
        return Err(invalid("path", format!("needs at least 100 points (got {})", path.len())));
    }
    if region.dim() != path.dim() {
        return Err(Error::DimensionMismatch { expected: path.dim(), found: region.dim() });
    }
    if !(eps > 0.0) {
        return Err(invalid("epsilon", "must be positive"));
    }
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(invalid("tail_fraction", "must lie in (0, 1]"));
    }
    let k = path.len();
    let full: Vec<Cluster> = tail_clusters(path, k, eps, tail_fraction).into_iter().filter(|c| c.size >= m).collect();
    let half: Vec<Cluster> =
        tail_clusters(path, k / 2, eps, tail_fraction).into_iter().filter(|c| c.size >= m / 2).collect();

    let mut unresolved = false;
    let mut used = vec![false; half.len()];
    let mut found = Vec::new();
    for c in &full {
        let partner = half
            .iter()
            .enumerate()
            .filter(|(_, h)| dist(&h.centroid, &c.centroid) <= eps + h.diameter)
            .min_by(|a, b| dist(&a.1.centroid, &c.centroid).total_cmp(&dist(&b.1.centroid, &c.centroid)));
        match partner {
            Some((j, h)) => {
                if used[j] {
                    unresolved = true;
                }
                used[j] = true;
                if c.diameter <= h.diameter {
                    found.push(c.centroid.clone());
                }
            }
            None => unresolved = true,
        }
    }
    let points: Vec<Vec<f64>> = found.into_iter().filter(|p| region.contains_closed(p)).collect();
    Ok(AccumulationReport {
        count: points.len(),
        points,
        epsilon: eps,
        m,
        tail_fraction,
        region: region.clone(),
        unresolved,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub hits: usize,
    pub replicas: usize,
    pub failed: usize,
}

/// Wilson score interval for `hits / n` at normal quantile `z`.
pub fn wilson_interval(hits: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = hits as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if hits as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// `mu_hat(A) = mu(p^-1(A))` by Monte Carlo over sampled paths of `k` points,
/// with a 95% Wilson interval. Paths that fail to sample count as misses and
/// are reported in `failed`.
pub fn event_probability_mc<F>(
    predicate: F,
    spec: &ProcessSpec,
    replicas: usize,
    k: usize,
    seed: u64,
) -> Result<EventEstimate>
where
    F: Fn(&SequencePath) -> bool + Sync + Send,
{
    spec.validate()?;
    let steps = k.div_ceil(spec.dim()).saturating_sub(1).max(2);
    let spec = spec.with_steps(steps);
    let outcomes = replicate(seed, replicas, |_, rng| {
        spec.sample(rng).ok().map(|p| predicate(&p.sequence().prefix(k)))
    });
    let hits = outcomes.iter().filter(|o| **o == Some(true)).count();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    let (ci_low, ci_high) = wilson_interval(hits, replicas, 1.959_963_984_540_054);
    Ok(EventEstimate {
        estimate: hits as f64 / replicas as f64,
        ci_low,
        ci_high,
        hits,
        replicas,
        failed,
    })
}
