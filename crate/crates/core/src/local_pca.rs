//! Principal components of each neighborhood's measurement submatrix.

use nalgebra::{DMatrix, DVector, RowDVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::select_rows;
use crate::error::{Error, Result};
use crate::linalg::{self, EigenSolver};
use crate::matching::Neighborhood;
use crate::stats::binomial;

/// Relative size below which an eigenvalue is treated as exactly zero.
const DEGENERATE_REL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFactorFit {
    pub center: usize,
    /// Unit indices, ascending; row `r` of `loadings` belongs to `members[r]`.
    pub members: Vec<usize>,
    /// `T x d`, with `F'F / T = I`.
    pub factors: DMatrix<f64>,
    /// `K x d`, with `L'L / K = diag(eigenvalues)`.
    pub loadings: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Set when fewer than `d` components carry nonzero variance.
    pub degenerate: bool,
}

impl LocalFactorFit {
    pub fn d_lambda(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    /// Loading row of `unit`, if it belongs to the neighborhood.
    pub fn loading_of(&self, unit: usize) -> Option<RowDVector<f64>> {
        self.members
            .binary_search(&unit)
            .ok()
            .map(|r| self.loadings.row(r).into_owned())
    }

    pub fn center_loading(&self) -> RowDVector<f64> {
        self.loading_of(self.center).expect("center is always a member")
    }
}

/// `F Λ'`, the estimated common component of the neighborhood.
pub fn common_component(fit: &LocalFactorFit) -> DMatrix<f64> {
    &fit.factors * fit.loadings.transpose()
}

fn member_columns(x: &DMatrix<f64>, members: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), members.len(), |r, c| x[(r, members[c])])
}

fn check_rank_bound(t: usize, k: usize, d: usize, center: usize) -> Result<()> {
    if d == 0 || d > t.min(k) {
        return Err(Error::Size(format!(
            "neighborhood {center}: d_lambda = {d} must lie in 1..={}",
            t.min(k)
        )));
    }
    Ok(())
}

/// Local PCA of the columns of `x` listed in `nbhd.members`.
pub fn local_pca(
    x: &DMatrix<f64>,
    nbhd: &Neighborhood,
    d_lambda: usize,
    solver: EigenSolver,
) -> Result<LocalFactorFit> {
    let t = x.nrows();
    let k = nbhd.members.len();
    check_rank_bound(t, k, d_lambda, nbhd.center)?;
    let sub = member_columns(x, &nbhd.members);
    let inner = if k <= t { Some(linalg::gram(&sub)) } else { None };
    fit_from_parts(&sub, inner, nbhd, d_lambda, solver)
}

/// Local PCA for every neighborhood, sharing one Gram matrix of `x`.
pub fn local_pca_all(
    x: &DMatrix<f64>,
    neighborhoods: &[Neighborhood],
    d_lambda: usize,
    solver: EigenSolver,
) -> Result<Vec<LocalFactorFit>> {
    let t = x.nrows();
    let n = x.ncols();
    let need_gram = neighborhoods.iter().any(|nb| nb.members.len() <= t);
    let g = if need_gram { Some(linalg::gram(x)) } else { None };
    neighborhoods
        .par_iter()
        .map(|nb| {
            let k = nb.members.len();
            check_rank_bound(t, k, d_lambda, nb.center)?;
            if nb.members.iter().any(|&m| m >= n) {
                return Err(Error::Size(format!("neighborhood {} references a missing unit", nb.center)));
            }
            let sub = member_columns(x, &nb.members);
            let inner = g
                .as_ref()
                .filter(|_| k <= t)
                .map(|g| DMatrix::from_fn(k, k, |a, b| g[(nb.members[a], nb.members[b])]));
            fit_from_parts(&sub, inner, nb, d_lambda, solver)
        })
        .collect()
}

fn fit_from_parts(
    sub: &DMatrix<f64>,
    inner_gram: Option<DMatrix<f64>>,
    nbhd: &Neighborhood,
    d: usize,
    solver: EigenSolver,
) -> Result<LocalFactorFit> {
    let t = sub.nrows();
    let k = sub.ncols();
    let tf = t as f64;
    let wrap = |e: Error| match e {
        Error::Numerical { context, message } => Error::Numerical {
            context: format!("local PCA of neighborhood {}: {context}", nbhd.center),
            message,
        },
        other => other,
    };
    let mut factors = DMatrix::zeros(t, d);
    let mut loadings = DMatrix::zeros(k, d);
    let mut mus = vec![0.0; d];
    let mut live = 0;
    match inner_gram {
        Some(g) => {
            let pairs = linalg::top_eigen(&g, d, solver).map_err(wrap)?;
            let floor = DEGENERATE_REL * pairs.values[0].max(0.0) * k as f64;
            for c in 0..d {
                let mu = pairs.values[c];
                if !(mu > floor) || pairs.values[0] <= 0.0 {
                    break;
                }
                let v = pairs.vectors.column(c);
                let f = (sub * v) * (tf.sqrt() / mu.sqrt());
                factors.set_column(c, &f);
                loadings.set_column(c, &(v * (mu / tf).sqrt()));
                mus[c] = mu;
                live += 1;
            }
        }
        None => {
            let outer = linalg::gram(&sub.transpose());
            let pairs = linalg::top_eigen(&outer, d, solver).map_err(wrap)?;
            let floor = DEGENERATE_REL * pairs.values[0].max(0.0) * t as f64;
            for c in 0..d {
                let mu = pairs.values[c];
                if !(mu > floor) || pairs.values[0] <= 0.0 {
                    break;
                }
                let u = pairs.vectors.column(c);
                factors.set_column(c, &(u * tf.sqrt()));
                loadings.set_column(c, &(sub.tr_mul(&u) / tf.sqrt()));
                mus[c] = mu;
                live += 1;
            }
        }
    }
    let degenerate = live < d;
    if degenerate {
        fill_orthonormal(&mut factors, live);
    }
    for c in 0..d {
        let col = factors.column(c);
        let mut best = 0;
        for r in 1..t {
            if col[r].abs() > col[best].abs() {
                best = r;
            }
        }
        if col[best] < 0.0 {
            factors.column_mut(c).neg_mut();
            loadings.column_mut(c).neg_mut();
        }
    }
    let scale = tf * k as f64;
    let eigenvalues = mus.iter().map(|mu| mu / scale).collect();
    Ok(LocalFactorFit {
        center: nbhd.center,
        members: nbhd.members.clone(),
        factors,
        loadings,
        eigenvalues,
        degenerate,
    })
}

/// Completes columns `live..` of `f` to an orthogonal set with `F'F = T I`,
/// drawing candidates from the coordinate axes in order.
fn fill_orthonormal(f: &mut DMatrix<f64>, live: usize) {
    let t = f.nrows();
    let d = f.ncols();
    let scale = (t as f64).sqrt();
    let mut axis = 0;
    for c in live..d {
        while axis < t {
            let mut cand = DVector::zeros(t);
            cand[axis] = 1.0;
            axis += 1;
            for _ in 0..2 {
                for p in 0..c {
                    let q = f.column(p) / scale;
                    let proj = q.dot(&cand);
                    cand.axpy(-proj, &q, 1.0);
                }
            }
            let norm = cand.norm();
            if norm > 1e-8 {
                f.set_column(c, &(cand * (scale / norm)));
                break;
            }
        }
    }
}

/// Leading eigenvalues of `(1/(T K)) X' X` for a set of neighborhoods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenDiagnostics {
    pub centers: Vec<usize>,
    pub leading_eigenvalues: Vec<Vec<f64>>,
    /// `v_j / v_{j+1}` for each neighborhood.
    pub gap_ratios: Vec<Vec<f64>>,
}

impl EigenDiagnostics {
    /// Average spectrum across neighborhoods.
    pub fn pooled(&self) -> Vec<f64> {
        let q = self.leading_eigenvalues.iter().map(Vec::len).min().unwrap_or(0);
        let m = self.leading_eigenvalues.len() as f64;
        (0..q)
            .map(|c| self.leading_eigenvalues.iter().map(|v| v[c]).sum::<f64>() / m)
            .collect()
    }
}

fn ratios(values: &[f64]) -> Vec<f64> {
    values
        .windows(2)
        .map(|w| if w[1] > 0.0 { w[0] / w[1] } else if w[0] > 0.0 { f64::INFINITY } else { f64::NAN })
        .collect()
}

pub fn eigen_diagnostics(
    x: &DMatrix<f64>,
    neighborhoods: &[Neighborhood],
    q: usize,
    solver: EigenSolver,
) -> Result<EigenDiagnostics> {
    let t = x.nrows();
    let spectra: Vec<Vec<f64>> = neighborhoods
        .par_iter()
        .map(|nb| {
            let k = nb.members.len();
            let q = q.min(t.min(k));
            if q == 0 {
                return Err(Error::Size("at least one eigenvalue is required".into()));
            }
            let sub = member_columns(x, &nb.members);
            let g = if k <= t { linalg::gram(&sub) } else { linalg::gram(&sub.transpose()) };
            let pairs = linalg::top_eigen(&g, q, solver)?;
            let scale = (t * k) as f64;
            Ok(pairs.values.iter().map(|v| v.max(0.0) / scale).collect())
        })
        .collect::<Result<_>>()?;
    Ok(EigenDiagnostics {
        centers: neighborhoods.iter().map(|nb| nb.center).collect(),
        gap_ratios: spectra.iter().map(|s| ratios(s)).collect(),
        leading_eigenvalues: spectra,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LatentCount {
    Determined { d_alpha: usize },
    /// No ratio exceeded the threshold; the spectrum is returned for inspection.
    Undetermined { spectrum: Vec<f64> },
}

/// Counts the eigenvalues in the tier after the leading (local constant) one.
pub fn estimate_num_latent(spectrum: &[f64], ratio_threshold: f64) -> Result<LatentCount> {
    if spectrum.len() < 3 {
        return Err(Error::Contract("at least 3 eigenvalues are needed".into()));
    }
    if !(ratio_threshold > 1.0) {
        return Err(Error::Contract(format!("ratio threshold {ratio_threshold} must exceed 1")));
    }
    let r = ratios(spectrum);
    for j in 1..r.len() {
        if r[j] > ratio_threshold {
            return Ok(LatentCount::Determined { d_alpha: j });
        }
    }
    Ok(LatentCount::Undetermined {
        spectrum: spectrum.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FactorRule {
    /// Number of monomials of degree at most `m - 1` in `d_alpha` variables.
    FixedOrder { d_alpha: usize, m: usize },
    /// Eigenvalues above `threshold` times the median of the lower half of the spectrum.
    BiasMinimizing { threshold: f64 },
}

pub fn select_num_factors(rule: FactorRule, diagnostics: Option<&EigenDiagnostics>, cap: usize) -> Result<usize> {
    let raw = match rule {
        FactorRule::FixedOrder { d_alpha, m } => {
            if d_alpha == 0 || m == 0 {
                return Err(Error::Contract("fixed_order needs d_alpha >= 1 and m >= 1".into()));
            }
            binomial(m - 1 + d_alpha, d_alpha)
        }
        FactorRule::BiasMinimizing { threshold } => {
            let diag = diagnostics
                .ok_or_else(|| Error::Contract("bias_minimizing needs eigenvalue diagnostics".into()))?;
            let spectrum = diag.pooled();
            if spectrum.len() < 2 {
                return Err(Error::Contract("bias_minimizing needs at least 2 eigenvalues".into()));
            }
            let mut tail = spectrum[spectrum.len() / 2..].to_vec();
            tail.sort_by(f64::total_cmp);
            let median = crate::stats::quantile_type7(&tail, 0.5);
            spectrum.iter().filter(|&&v| v > threshold * median).count().max(1)
        }
    };
    if raw > cap {
        log::warn!("{raw} local factors requested, capped at {cap}");
        return Ok(cap);
    }
    Ok(raw)
}

/// Local PCA restricted to the rows in `rows`.
pub fn local_pca_on_rows(
    x: &DMatrix<f64>,
    rows: &[usize],
    neighborhoods: &[Neighborhood],
    d_lambda: usize,
    solver: EigenSolver,
) -> Result<Vec<LocalFactorFit>> {
    local_pca_all(&select_rows(x, rows), neighborhoods, d_lambda, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::{knn, DistanceMetric};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_units(n: usize) -> Neighborhood {
        Neighborhood {
            center: 0,
            members: (0..n).collect(),
            radius: 0.0,
            normalized_discrepancy: 0.0,
        }
    }

    fn random_matrix(t: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(t, n, |_, _| rng.random::<f64>() - 0.5)
    }

    fn svd_truncation(x: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
        let svd = x.clone().svd(true, true);
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let u = svd.u.unwrap();
        let vt = svd.v_t.unwrap();
        let mut out = DMatrix::zeros(x.nrows(), x.ncols());
        for &c in &order[..r] {
            out += svd.singular_values[c] * u.column(c) * vt.row(c);
        }
        out
    }

    #[test]
    fn two_by_two_example() {
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let fit = local_pca(&x, &all_units(2), 1, EigenSolver::Dense).unwrap();
        assert!((fit.eigenvalues[0] - 1.0).abs() < 1e-14);
        assert!((fit.factors[(0, 0)] - 2f64.sqrt()).abs() < 1e-14);
        assert!(fit.factors[(1, 0)].abs() < 1e-14);
    }

    #[test]
    fn rank_one_recovery() {
        let f = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 1.5]);
        let l = DVector::from_vec(vec![0.3, 1.0, -0.7, 2.0]);
        let x = &f * l.transpose();
        let fit = local_pca(&x, &all_units(4), 1, EigenSolver::Dense).unwrap();
        assert!((common_component(&fit) - &x).amax() < 1e-10);
    }

    #[test]
    fn matches_svd_truncation_both_orientations() {
        for (t, n, d) in [(60, 40, 3), (30, 20, 2), (20, 30, 2)] {
            let x = random_matrix(t, n, (t * n) as u64);
            let fit = local_pca(&x, &all_units(n), d, EigenSolver::Dense).unwrap();
            assert!((common_component(&fit) - svd_truncation(&x, d)).amax() < 1e-8);
            let ff = fit.factors.tr_mul(&fit.factors) / t as f64;
            assert!((ff - DMatrix::identity(d, d)).amax() < 1e-8);
            let ll = fit.loadings.tr_mul(&fit.loadings) / n as f64;
            for a in 0..d {
                assert!((ll[(a, a)] - fit.eigenvalues[a]).abs() < 1e-8);
                for b in 0..d {
                    if a != b {
                        assert!(ll[(a, b)].abs() < 1e-8 * fit.eigenvalues[0]);
                    }
                }
            }
            assert!(fit.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn full_rank_reconstruction() {
        let x = random_matrix(7, 5, 9);
        let fit = local_pca(&x, &all_units(5), 5, EigenSolver::Dense).unwrap();
        assert!((common_component(&fit) - &x).amax() < 1e-8);
    }

    #[test]
    fn shared_gram_agrees_with_single_fits() {
        let x = random_matrix(80, 90, 5);
        let nbs = knn(&x, 60, &DistanceMetric::euclidean()).unwrap();
        let all = local_pca_all(&x, &nbs, 3, EigenSolver::default()).unwrap();
        for (nb, fit) in nbs.iter().zip(&all).step_by(17) {
            let single = local_pca(&x, nb, 3, EigenSolver::Dense).unwrap();
            assert!((common_component(fit) - common_component(&single)).amax() < 1e-8);
        }
    }

    #[test]
    fn degenerate_neighborhood_is_padded() {
        let f = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let l = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let x = &f * l.transpose();
        let fit = local_pca(&x, &all_units(4), 2, EigenSolver::Dense).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.eigenvalues[1], 0.0);
        assert!(fit.loadings.column(1).iter().all(|&v| v == 0.0));
        let ff = fit.factors.tr_mul(&fit.factors) / 3.0;
        assert!((ff - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn rank_bound_enforced() {
        let x = random_matrix(3, 5, 1);
        assert!(matches!(local_pca(&x, &all_units(5), 4, EigenSolver::Dense), Err(Error::Size(_))));
    }

    #[test]
    fn tier_rule_examples() {
        assert_eq!(
            estimate_num_latent(&[10.0, 1.0, 0.9, 0.01, 0.009], 5.0).unwrap(),
            LatentCount::Determined { d_alpha: 2 }
        );
        assert_eq!(
            estimate_num_latent(&[10.0, 1.0, 0.02], 5.0).unwrap(),
            LatentCount::Determined { d_alpha: 1 }
        );
        assert!(matches!(
            estimate_num_latent(&[1.0, 0.99, 0.98, 0.97], 5.0).unwrap(),
            LatentCount::Undetermined { .. }
        ));
    }

    #[test]
    fn fixed_order_counts() {
        let pick = |d_alpha, m| select_num_factors(FactorRule::FixedOrder { d_alpha, m }, None, 100).unwrap();
        assert_eq!(pick(2, 2), 3);
        assert_eq!(pick(1, 2), 2);
        assert_eq!(pick(3, 3), 10);
        assert_eq!(select_num_factors(FactorRule::FixedOrder { d_alpha: 3, m: 3 }, None, 4).unwrap(), 4);
    }

    #[test]
    fn bias_minimizing_counts_strong_components() {
        let diag = EigenDiagnostics {
            centers: vec![0],
            leading_eigenvalues: vec![vec![50.0, 5.0, 0.2, 0.11, 0.1, 0.09]],
            gap_ratios: vec![],
        };
        let d = select_num_factors(FactorRule::BiasMinimizing { threshold: 10.0 }, Some(&diag), 10).unwrap();
        assert_eq!(d, 2);
    }
}
