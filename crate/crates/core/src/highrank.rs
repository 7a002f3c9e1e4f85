//! Removal of high-rank covariate effects from the measurement panel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{select_rows, MeasurementPanel, RowSplit};
use crate::error::{Error, Result};
use crate::linalg::{self, EigenSolver};
use crate::local_pca::local_pca_all;
use crate::matching::{knn, DistanceMetric, MetricKind};

/// Smallest eigenvalue of the stacked residual Gram, relative to the energy of `w`,
/// below which the covariates are treated as degenerate.
const DEGENERACY_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighRankSettings {
    /// Seed of the three-way row split.
    pub split_seed: u64,
    pub k: usize,
    /// Local factors for each high-rank covariate.
    pub d_lambda_w: usize,
    /// Local factors for the measurements.
    pub d_lambda_x: usize,
    pub metric: MetricKind,
    #[serde(default)]
    pub solver: EigenSolver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HighRankAdjustment {
    pub theta_hat: Vec<f64>,
    /// `x - sum_l w_l theta_l` on all rows.
    pub residual_panel: DMatrix<f64>,
    /// Residuals of each covariate on the second portion of rows.
    pub e_hat: Vec<DMatrix<f64>>,
    /// Residuals of the measurements on the second portion of rows.
    pub u_hat: DMatrix<f64>,
    /// Second and third portions, to be used for matching and local PCA.
    pub downstream_split: RowSplit,
}

/// Matches on `match_rows`, runs local PCA on `pca_rows`, and returns each
/// unit's residual on `pca_rows` (`|pca_rows| x n`).
pub fn lpsa_residuals(
    seq: &DMatrix<f64>,
    match_rows: &[usize],
    pca_rows: &[usize],
    k: usize,
    d_lambda: usize,
    metric: &DistanceMetric,
    solver: EigenSolver,
) -> Result<DMatrix<f64>> {
    let nbhds = knn(&select_rows(seq, match_rows), k, metric)?;
    let x2 = select_rows(seq, pca_rows);
    let fits = local_pca_all(&x2, &nbhds, d_lambda, solver)?;
    let mut resid = x2.clone();
    for (i, fit) in fits.iter().enumerate() {
        let lam = fit.center_loading();
        let common = &fit.factors * lam.transpose();
        resid.column_mut(i).axpy(-1.0, &common, 1.0);
    }
    Ok(resid)
}

pub fn partial_out_high_rank(panel: &MeasurementPanel, split: &RowSplit, settings: &HighRankSettings) -> Result<HighRankAdjustment> {
    let w = panel.w();
    if w.is_empty() {
        return Err(Error::Contract("high-rank adjustment requires covariates".into()));
    }
    let t3 = split
        .t_3
        .as_ref()
        .ok_or_else(|| Error::Contract("high-rank adjustment requires a three-way split".into()))?;
    let (t1, t2) = (&split.t_dagger, &split.t_ddagger);
    let metric = DistanceMetric::from(settings.metric);

    let e_hat: Vec<DMatrix<f64>> = w
        .par_iter()
        .map(|wl| lpsa_residuals(wl, t1, t2, settings.k, settings.d_lambda_w, &metric, settings.solver))
        .collect::<Result<_>>()?;
    let u_hat = lpsa_residuals(panel.x(), t1, t2, settings.k, settings.d_lambda_x, &metric, settings.solver)?;

    let dw = w.len();
    let mut a = DMatrix::zeros(dw, dw);
    let mut c = DVector::zeros(dw);
    for l in 0..dw {
        for m in 0..=l {
            let v = e_hat[l].dot(&e_hat[m]);
            a[(l, m)] = v;
            a[(m, l)] = v;
        }
        c[l] = e_hat[l].dot(&u_hat);
    }
    let energy: f64 = w.iter().map(|wl| select_rows(wl, t2).norm_squared()).sum();
    let lambda_min = linalg::dense_eigen_desc(&a)?.values[dw - 1];
    if !(lambda_min > DEGENERACY_REL * energy) {
        return Err(Error::HighRankDegenerate(format!(
            "smallest eigenvalue {lambda_min:.3e} of the residual Gram is negligible relative to covariate energy {energy:.3e}"
        )));
    }
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::HighRankDegenerate("residual Gram not positive definite".into()))?;
    let theta = chol.solve(&c);

    let mut residual = panel.x().clone();
    for (l, wl) in w.iter().enumerate() {
        residual -= wl * theta[l];
    }
    Ok(HighRankAdjustment {
        theta_hat: theta.iter().copied().collect(),
        residual_panel: residual,
        e_hat,
        u_hat,
        downstream_split: RowSplit {
            t_dagger: t2.clone(),
            t_ddagger: t3.clone(),
            t_3: None,
        },
    })
}
