//! Distances between measurement columns and K-nearest-neighbor matching.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::stats::{mean, quantile_type7, sample_sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// `(1/sqrt(T)) * ||x_i - x_j||_2`
    Euclidean,
    /// `max_{l != i,j} |(1/T) (x_i - x_j)' x_l|`
    PseudoMax,
}

/// Maps one measurement column to a feature vector before distances are taken.
pub type FeatureTransform = Arc<dyn Fn(DVectorView<'_, f64>) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct DistanceMetric {
    pub kind: MetricKind,
    pub transform: Option<FeatureTransform>,
}

impl fmt::Debug for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DistanceMetric")
            .field("kind", &self.kind)
            .field("transform", &self.transform.as_ref().map(|_| "<fn>"))
            .finish()
    }
}

impl DistanceMetric {
    pub fn euclidean() -> Self {
        Self {
            kind: MetricKind::Euclidean,
            transform: None,
        }
    }

    pub fn pseudo_max() -> Self {
        Self {
            kind: MetricKind::PseudoMax,
            transform: None,
        }
    }

    pub fn with_transform(mut self, transform: FeatureTransform) -> Self {
        self.transform = Some(transform);
        self
    }
}

impl From<MetricKind> for DistanceMetric {
    fn from(kind: MetricKind) -> Self {
        Self { kind, transform: None }
    }
}

fn check_index(x: &DMatrix<f64>, i: usize, j: usize) -> Result<()> {
    let n = x.ncols();
    if i >= n || j >= n {
        return Err(Error::Size(format!("unit index ({i}, {j}) out of range for {n} units")));
    }
    Ok(())
}

pub fn euclidean_distance(x: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    check_index(x, i, j)?;
    if i == j {
        return Ok(0.0);
    }
    let t = x.nrows() as f64;
    let ss: f64 = x
        .column(i)
        .iter()
        .zip(x.column(j).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(ss.sqrt() / t.sqrt())
}

pub fn pseudo_max_distance(x: &DMatrix<f64>, i: usize, j: usize) -> Result<f64> {
    check_index(x, i, j)?;
    let n = x.ncols();
    if n < 3 {
        return Err(Error::MetricUndefined(format!(
            "pseudo-max distance needs at least 3 units, got {n}; use the euclidean metric"
        )));
    }
    if i == j {
        return Ok(0.0);
    }
    // Evaluate with the smaller index first so that d(i,j) and d(j,i) share one expression.
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    let t = x.nrows() as f64;
    let diff: Vec<f64> = x
        .column(a)
        .iter()
        .zip(x.column(b).iter())
        .map(|(p, q)| p - q)
        .collect();
    let mut best = 0.0f64;
    for l in (0..n).filter(|&l| l != a && l != b) {
        let dot: f64 = diff.iter().zip(x.column(l).iter()).map(|(d, v)| d * v).sum();
        best = best.max((dot / t).abs());
    }
    Ok(best)
}

/// Dense symmetric `n x n` matrix of pairwise distances with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseDistances {
    n: usize,
    values: Vec<f64>,
}

impl PairwiseDistances {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = f(i, j);
                values[i * n + j] = d;
                values[j * n + i] = d;
            }
        }
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Sample standard deviation over the `n(n-1)/2` off-diagonal pairs.
    pub fn pair_sd(&self) -> f64 {
        let mut all = Vec::with_capacity(self.n * (self.n.saturating_sub(1)) / 2);
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                all.push(self.get(i, j));
            }
        }
        sample_sd(&all)
    }
}

fn apply_transform(x: &DMatrix<f64>, transform: &FeatureTransform) -> Result<DMatrix<f64>> {
    let n = x.ncols();
    let feats: Vec<Vec<f64>> = (0..n).map(|i| transform(x.column(i))).collect();
    let dim = feats.first().map_or(0, Vec::len);
    if dim == 0 || feats.iter().any(|f| f.len() != dim) {
        return Err(Error::Contract("feature transform must return equal-length, nonempty vectors".into()));
    }
    Ok(DMatrix::from_fn(dim, n, |r, c| feats[c][r]))
}

/// All pairwise distances between the columns of `x`.
fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            let d = (x[k] - y[k]).abs();
            acc[k] = if d > acc[k] { d } else { acc[k] };
        }
    }
    let mut best = acc[0].max(acc[1]).max(acc[2].max(acc[3]));
    for (x, y) in ra.iter().zip(rb) {
        best = best.max((x - y).abs());
    }
    best
}

pub fn pairwise_distances(x: &DMatrix<f64>, metric: &DistanceMetric) -> Result<PairwiseDistances> {
    let transformed;
    let x = match &metric.transform {
        Some(tf) => {
            transformed = apply_transform(x, tf)?;
            &transformed
        }
        None => x,
    };
    let n = x.ncols();
    let t = x.nrows() as f64;
    let upper: Vec<Vec<f64>> = match metric.kind {
        MetricKind::Euclidean => (0..n)
            .into_par_iter()
            .map(|i| {
                let ci = x.column(i);
                ((i + 1)..n)
                    .map(|j| {
                        let ss: f64 = ci.iter().zip(x.column(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                        ss.sqrt() / t.sqrt()
                    })
                    .collect()
            })
            .collect(),
        MetricKind::PseudoMax => {
            if n < 3 {
                return Err(Error::MetricUndefined(format!(
                    "pseudo-max distance needs at least 3 units, got {n}; use the euclidean metric"
                )));
            }
            // (x_i - x_j)' x_l / T = G_il - G_jl with G = X'X / T.
            let mut g = linalg::gram(x);
            g /= t;
            let g = &g;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let gi = g.column(i);
                    let gi = gi.as_slice();
                    ((i + 1)..n)
                        .map(|j| {
                            let gj = g.column(j);
                            let gj = gj.as_slice();
                            max_abs_diff(&gi[..i], &gj[..i])
                                .max(max_abs_diff(&gi[i + 1..j], &gj[i + 1..j]))
                                .max(max_abs_diff(&gi[j + 1..], &gj[j + 1..]))
                        })
                        .collect()
                })
                .collect()
        }
    };
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(PairwiseDistances { n, values })
}

/// The `K` nearest neighbors of one unit (the unit itself included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub center: usize,
    /// Unit indices, ascending.
    pub members: Vec<usize>,
    /// Largest distance from `center` to a member.
    pub radius: f64,
    /// `radius` divided by the standard deviation of all pairwise distances.
    pub normalized_discrepancy: f64,
}

impl Neighborhood {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Position of `unit` within `members`.
    pub fn position(&self, unit: usize) -> Option<usize> {
        self.members.binary_search(&unit).ok()
    }
}

/// K-nearest-neighbor matching on the columns of `x`.
pub fn knn(x: &DMatrix<f64>, k: usize, metric: &DistanceMetric) -> Result<Vec<Neighborhood>> {
    let n = x.ncols();
    if k == 0 || k > n {
        return Err(Error::Size(format!("K = {k} must lie in 1..={n}")));
    }
    let d = pairwise_distances(x, metric)?;
    knn_from_distances(&d, k)
}

pub fn knn_from_distances(d: &PairwiseDistances, k: usize) -> Result<Vec<Neighborhood>> {
    let n = d.n();
    if k == 0 || k > n {
        return Err(Error::Size(format!("K = {k} must lie in 1..={n}")));
    }
    let sd = d.pair_sd();
    Ok((0..n)
        .into_par_iter()
        .map(|i| nearest_among(d, i, k, sd, |_| true))
        .collect())
}

/// Neighborhood of `center` made of itself plus its `k - 1` nearest units
/// among those accepted by `eligible` (the center is never considered twice).
pub(crate) fn nearest_among(
    d: &PairwiseDistances,
    center: usize,
    k: usize,
    pair_sd: f64,
    eligible: impl Fn(usize) -> bool,
) -> Neighborhood {
    let row = d.row(center);
    let mut others: Vec<usize> = (0..d.n()).filter(|&l| l != center && eligible(l)).collect();
    let take = (k - 1).min(others.len());
    let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
    if take < others.len() && take > 0 {
        others.select_nth_unstable_by(take - 1, cmp);
    }
    others.truncate(take);
    others.sort_by(cmp);
    let radius = others.last().map_or(0.0, |&l| row[l]);
    let mut members = others;
    members.push(center);
    members.sort_unstable();
    Neighborhood {
        center,
        members,
        radius,
        normalized_discrepancy: normalize(radius, pair_sd),
    }
}

fn normalize(radius: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        radius / sd
    } else if radius == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Six-number summary (R's `summary`), quartiles by linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v.first().copied().unwrap_or(f64::NAN),
            q1: quantile_type7(&v, 0.25),
            median: quantile_type7(&v, 0.5),
            mean: mean(&v),
            q3: quantile_type7(&v, 0.75),
            max: v.last().copied().unwrap_or(f64::NAN),
            count: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingDiagnostics {
    pub normalized_discrepancy: Vec<f64>,
    pub pair_sd: f64,
    /// Set when all pairwise distances coincide (zero standard deviation).
    pub degenerate_sd: bool,
    /// `(group label, summary)`; a single `None` group when no labels are given.
    pub groups: Vec<(Option<usize>, Summary)>,
}

/// Per-unit normalized matching discrepancy and per-group summaries.
pub fn matching_diagnostics(
    neighborhoods: &[Neighborhood],
    distances: &PairwiseDistances,
    groups: Option<&[usize]>,
) -> Result<MatchingDiagnostics> {
    if neighborhoods.len() != distances.n() {
        return Err(Error::Contract("neighborhoods and distances cover different unit sets".into()));
    }
    let sd = distances.pair_sd();
    let degenerate_sd = !(sd > 0.0);
    let per_unit: Vec<f64> = neighborhoods
        .iter()
        .map(|nb| {
            let radius = nb
                .members
                .iter()
                .map(|&m| distances.get(nb.center, m))
                .fold(0.0f64, f64::max);
            normalize(radius, sd)
        })
        .collect();
    let groups = match groups {
        None => vec![(None, Summary::of(&per_unit))],
        Some(labels) => {
            if labels.len() != per_unit.len() {
                return Err(Error::Contract("group labels length mismatch".into()));
            }
            let mut levels: Vec<usize> = labels.to_vec();
            levels.sort_unstable();
            levels.dedup();
            levels
                .into_iter()
                .map(|g| {
                    let vals: Vec<f64> = per_unit
                        .iter()
                        .zip(labels)
                        .filter(|(_, &l)| l == g)
                        .map(|(v, _)| *v)
                        .collect();
                    (Some(g), Summary::of(&vals))
                })
                .collect()
        }
    };
    Ok(MatchingDiagnostics {
        normalized_discrepancy: per_unit,
        pair_sd: sd,
        degenerate_sd,
        groups,
    })
}
