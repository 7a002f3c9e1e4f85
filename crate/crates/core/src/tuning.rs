//! Choice of the number of nearest neighbors.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_row_split, MeasurementPanel, SplitScheme, TreatmentSample};
use crate::error::{Error, Result};
use crate::linalg::EigenSolver;
use crate::local_pca::{local_pca, local_pca_all};
use crate::matching::{knn_from_distances, nearest_among, pairwise_distances, DistanceMetric, MetricKind};
use crate::regression::{fit_outcome_single, least_squares, OutcomeBackend, RegressionOptions};
use crate::stats::binomial;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMethod {
    Cv,
    Dpi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub k_selected: usize,
    /// `(K, CV(K))` for cross-validation; empty for the plug-in rule.
    pub criterion_curve: Vec<(usize, f64)>,
    pub method: TuningMethod,
    pub k_initial: Option<usize>,
    pub sum_variance: Option<f64>,
    pub sum_bias: Option<f64>,
    pub warnings: Vec<String>,
}

/// Row usage and local PCA settings shared by both selectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotSettings {
    pub metric: MetricKind,
    pub split: Option<SplitScheme>,
    #[serde(default)]
    pub solver: EigenSolver,
    #[serde(default)]
    pub regression: RegressionOptions,
}

fn rows_for(panel: &MeasurementPanel, split: Option<SplitScheme>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match split {
        Some(SplitScheme::Thirds { .. }) => Err(Error::Contract("tuning uses a two-way split or none".into())),
        Some(scheme) => {
            let s = make_row_split(panel.n_rows(), scheme)?;
            Ok((panel.x_rows(&s.t_dagger), panel.x_rows(&s.t_ddagger)))
        }
        None => Ok((panel.x().clone(), panel.x().clone())),
    }
}

/// `{0.5, 1, 1.5, 2} * n^(2m / (2m + d_alpha))`, rounded and capped to `[2, n]`.
pub fn default_cv_grid(n: usize, m: usize, d_alpha: usize) -> Vec<usize> {
    let base = (n as f64).powf((2 * m) as f64 / (2 * m + d_alpha) as f64);
    let mut grid: Vec<usize> = [0.5, 1.0, 1.5, 2.0]
        .iter()
        .map(|c| ((c * base).round() as usize).clamp(2, n))
        .collect();
    grid.dedup();
    grid
}

/// Fold label of every level-`level` unit; other units get `None`.
pub fn assign_folds(sample: &TreatmentSample, level: usize, n_folds: usize, seed: u64) -> Vec<Option<usize>> {
    let mut members: Vec<usize> = (0..sample.n()).filter(|&i| sample.s()[i] == level).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    members.shuffle(&mut rng);
    let mut folds = vec![None; sample.n()];
    for (pos, &i) in members.iter().enumerate() {
        folds[i] = Some(pos % n_folds);
    }
    folds
}

/// K-fold cross-validation of the level-`level` outcome fit over `candidates`.
/// `d_lambda = 0` evaluates the local average.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate_k(
    sample: &TreatmentSample,
    panel: &MeasurementPanel,
    level: usize,
    candidates: &[usize],
    n_folds: usize,
    seed: u64,
    d_lambda: usize,
    settings: &PilotSettings,
) -> Result<TuningResult> {
    if candidates.is_empty() {
        return Err(Error::Tuning("no candidate K".into()));
    }
    if n_folds < 2 {
        return Err(Error::Tuning("cross-validation needs at least 2 folds".into()));
    }
    sample.require_levels(&[level])?;
    let n = sample.n();
    let folds = assign_folds(sample, level, n_folds, seed);
    let held: Vec<usize> = (0..n).filter(|&i| folds[i].is_some()).collect();
    let (x_match, x_pca) = rows_for(panel, settings.split)?;
    let d = pairwise_distances(&x_match, &DistanceMetric::from(settings.metric))?;
    let largest_fold = (0..n_folds)
        .map(|f| held.iter().filter(|&&i| folds[i] == Some(f)).count())
        .max()
        .unwrap_or(0);
    let training_size = n - largest_fold;
    let backend = if d_lambda == 0 {
        OutcomeBackend::LocalAverage
    } else {
        OutcomeBackend::LocalLs
    };

    let mut curve = Vec::new();
    let mut warnings = Vec::new();
    for &k in candidates {
        if k == 0 || k > training_size + 1 || (d_lambda > 0 && d_lambda > k.min(x_pca.nrows())) {
            let msg = format!("candidate K = {k} skipped: outside the range allowed by the training folds");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let errors: Vec<f64> = held
            .par_iter()
            .map(|&i| {
                let fold = folds[i];
                let nb = nearest_among(&d, i, k, 0.0, |l| folds[l].is_none() || folds[l] != fold);
                let fit = if d_lambda > 0 {
                    Some(local_pca(&x_pca, &nb, d_lambda, settings.solver)?)
                } else {
                    None
                };
                let rec = fit_outcome_single(sample, &nb, fit.as_ref(), level, backend, &settings.regression, Some(i))?;
                let e = sample.y()[i] - rec.fitted;
                Ok(e * e)
            })
            .collect::<Result<_>>()?;
        curve.push((k, errors.iter().sum::<f64>() / errors.len() as f64));
    }
    let best = curve
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::Tuning("every candidate K was skipped".into()))?;
    Ok(TuningResult {
        k_selected: best.0,
        criterion_curve: curve.clone(),
        method: TuningMethod::Cv,
        k_initial: None,
        sum_variance: None,
        sum_bias: None,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasProxy {
    /// Degree-`m` monomials of the non-constant leading loadings.
    #[default]
    Polynomial,
    /// The next local principal components.
    ExtraComponents,
}

/// Plug-in update of `k_initial`, rounded and capped to `[lower, n]`.
/// Returns `n` and a warning when the bias sum vanishes.
pub fn dpi_formula(
    sum_variance: f64,
    sum_bias: f64,
    d_alpha: usize,
    m: usize,
    k_initial: usize,
    lower: usize,
    n: usize,
) -> (usize, Option<String>) {
    if !(sum_bias > 0.0) {
        return (n, Some("estimated bias is zero; K set to n".into()));
    }
    let da = d_alpha as f64;
    let two_m = (2 * m) as f64;
    let ratio = da * sum_variance / (two_m * sum_bias);
    let k = (ratio.powf(da / (two_m + da)) * k_initial as f64).round();
    let k = if k.is_finite() { k.max(0.0) as usize } else { n };
    (k.clamp(lower.min(n), n), None)
}

/// Monomials of total degree `m` in `vars`, in graded lexicographic order.
fn monomials(vars: &[f64], m: usize) -> Vec<f64> {
    fn rec(vars: &[f64], start: usize, left: usize, acc: f64, out: &mut Vec<f64>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for v in start..vars.len() {
            rec(vars, v, left - 1, acc * vars[v], out);
        }
    }
    let mut out = Vec::new();
    rec(vars, 0, m, 1.0, &mut out);
    out
}

/// Direct plug-in choice of `K` from a pilot fit at `k_initial`.
#[allow(clippy::too_many_arguments)]
pub fn dpi_k(
    sample: &TreatmentSample,
    panel: &MeasurementPanel,
    level: usize,
    k_initial: usize,
    d_alpha: usize,
    m: usize,
    proxy: BiasProxy,
    settings: &PilotSettings,
) -> Result<TuningResult> {
    if d_alpha == 0 || m == 0 {
        return Err(Error::Tuning("d_alpha and m must be positive".into()));
    }
    sample.require_levels(&[level])?;
    let n = sample.n();
    if k_initial == 0 || k_initial > n {
        return Err(Error::Tuning(format!("initial K = {k_initial} must lie in 1..={n}")));
    }
    let d_lambda = binomial(m - 1 + d_alpha, d_alpha);
    let n_bias = binomial(m + d_alpha - 1, d_alpha - 1);
    let extract = match proxy {
        BiasProxy::ExtraComponents => d_lambda + n_bias,
        BiasProxy::Polynomial => d_lambda.max(d_alpha + 1),
    };
    let (x_match, x_pca) = rows_for(panel, settings.split)?;
    if extract > k_initial.min(x_pca.nrows()) {
        return Err(Error::Tuning(format!(
            "the pilot fit needs {extract} local components but K = {k_initial} and T = {}",
            x_pca.nrows()
        )));
    }
    let d = pairwise_distances(&x_match, &DistanceMetric::from(settings.metric))?;
    let nbhds = knn_from_distances(&d, k_initial)?;
    let treated: Vec<usize> = (0..n).filter(|&i| sample.s()[i] == level).collect();
    let pilot = local_pca_all(&x_pca, &treated.iter().map(|&i| nbhds[i].clone()).collect::<Vec<_>>(), extract, settings.solver)?;

    let dz = sample.d_z();
    let icpt = settings.regression.add_intercept as usize;
    let parts: Vec<(Option<f64>, Option<f64>)> = treated
        .par_iter()
        .zip(&pilot)
        .map(|(&i, fit)| {
            let nb = &nbhds[i];
            let k = nb.members.len();
            let base_row = |pos: usize| -> Vec<f64> {
                let unit = nb.members[pos];
                let mut r = Vec::with_capacity(icpt + dz + d_lambda);
                if icpt == 1 {
                    r.push(1.0);
                }
                r.extend(sample.z().row(unit).iter());
                r.extend(fit.loadings.row(pos).columns(0, d_lambda).iter());
                r
            };
            let bias_row = |pos: usize| -> Vec<f64> {
                let lam = fit.loadings.row(pos);
                match proxy {
                    BiasProxy::ExtraComponents => lam.columns(d_lambda, n_bias).iter().copied().collect(),
                    BiasProxy::Polynomial => {
                        let vars: Vec<f64> = (1..=d_alpha).map(|c| lam[c]).collect();
                        monomials(&vars, m)
                    }
                }
            };
            let eligible: Vec<usize> = (0..k).filter(|&p| sample.s()[nb.members[p]] == level).collect();
            let y = DVector::from_iterator(eligible.len(), eligible.iter().map(|&p| sample.y()[nb.members[p]]));
            let p_base = icpt + dz + d_lambda;
            let v = if eligible.len() > p_base {
                let design = DMatrix::from_fn(eligible.len(), p_base, |r, c| base_row(eligible[r])[c]);
                let ls = least_squares(&design, &y)?;
                let x0 = DVector::from_vec(base_row(nb.position(i).expect("center is a member")));
                ls.sigma2.map(|s2| s2 * ls.leverage(&x0))
            } else {
                None
            };
            let p_aug = p_base + n_bias;
            let b = if eligible.len() >= p_aug {
                let design = DMatrix::from_fn(eligible.len(), p_aug, |r, c| {
                    let pos = eligible[r];
                    if c < p_base {
                        base_row(pos)[c]
                    } else {
                        bias_row(pos)[c - p_base]
                    }
                });
                let ls = least_squares(&design, &y)?;
                let coef_b = ls.coef.rows(p_base, n_bias);
                let total: f64 = (0..k)
                    .map(|pos| {
                        let contrib: f64 = bias_row(pos).iter().zip(coef_b.iter()).map(|(a, b)| a * b).sum();
                        contrib * contrib
                    })
                    .sum();
                Some(total / k as f64)
            } else {
                None
            };
            Ok((v, b))
        })
        .collect::<Result<_>>()?;

    let sum_v: f64 = parts.iter().filter_map(|p| p.0).sum();
    let sum_b: f64 = parts.iter().filter_map(|p| p.1).sum();
    let mut warnings = Vec::new();
    let skipped = parts.iter().filter(|p| p.0.is_none() || p.1.is_none()).count();
    if skipped > 0 {
        warnings.push(format!("{skipped} pilot neighborhoods had too few level-{level} units for the plug-in sums"));
    }
    let (k, warn) = dpi_formula(sum_v, sum_b, d_alpha, m, k_initial, dz + d_lambda + 1, n);
    if let Some(w) = warn {
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(TuningResult {
        k_selected: k,
        criterion_curve: Vec::new(),
        method: TuningMethod::Dpi,
        k_initial: Some(k_initial),
        sum_variance: Some(sum_v),
        sum_bias: Some(sum_b),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_fixture() {
        let (k, w) = dpi_formula(3.0, 3.0, 1, 2, 100, 4, 1000);
        assert_eq!(k, 76);
        assert!(w.is_none());
        let (k, _) = dpi_formula(4.0, 1.0, 1, 2, 100, 4, 1000);
        assert_eq!(k, 100);
        let (k, _) = dpi_formula(2.0 * 3.0 / 2.0, 1.0, 2, 3, 57, 4, 1000);
        assert_eq!(k, 57);
    }

    #[test]
    fn zero_bias_returns_n() {
        let (k, w) = dpi_formula(1.0, 0.0, 1, 2, 100, 4, 500);
        assert_eq!(k, 500);
        assert!(w.is_some());
    }

    #[test]
    fn larger_bias_never_raises_k() {
        let mut last = usize::MAX;
        for b in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let (k, _) = dpi_formula(1.0, b, 1, 2, 100, 3, 10_000);
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(&[2.0, 3.0], 2), vec![4.0, 6.0, 9.0]);
        assert_eq!(monomials(&[2.0], 3), vec![8.0]);
        assert_eq!(monomials(&[1.0, 1.0, 1.0], 2).len(), binomial(2 + 3 - 1, 3 - 1));
    }

    #[test]
    fn cv_grid() {
        let g = default_cv_grid(1000, 1, 1);
        assert_eq!(g, vec![50, 100, 150, 200]);
    }
}
