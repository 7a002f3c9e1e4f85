//! Composition of the estimation steps: latent extraction, nuisance fits and
//! doubly-robust estimates.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{make_row_split, select_rows, MeasurementPanel, RowSplit, SplitScheme, TreatmentSample};
use crate::error::{Error, Result};
use crate::highrank::{partial_out_high_rank, HighRankAdjustment, HighRankSettings};
use crate::linalg::EigenSolver;
use crate::local_pca::{local_pca_all, LocalFactorFit};
use crate::matching::{knn_from_distances, pairwise_distances, DistanceMetric, MetricKind, Neighborhood, PairwiseDistances};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step1Settings {
    pub metric: MetricKind,
    /// `None` uses every row for both matching and local PCA.
    pub split: Option<SplitScheme>,
    pub k: usize,
    /// Zero skips local PCA.
    pub d_lambda: usize,
    #[serde(default)]
    pub solver: EigenSolver,
    /// Applied only when the panel carries high-rank covariates.
    #[serde(default)]
    pub high_rank: Option<HighRankSettings>,
}

#[derive(Debug, Clone)]
pub struct LatentExtraction {
    pub split: Option<RowSplit>,
    /// Measurements after any high-rank adjustment.
    pub x: DMatrix<f64>,
    pub distances: PairwiseDistances,
    pub neighborhoods: Vec<Neighborhood>,
    pub fits: Option<Vec<LocalFactorFit>>,
    pub high_rank: Option<HighRankAdjustment>,
}

impl LatentExtraction {
    pub fn fits(&self) -> Option<&[LocalFactorFit]> {
        self.fits.as_deref()
    }

    pub fn pca_rows(&self) -> DMatrix<f64> {
        match &self.split {
            Some(s) => select_rows(&self.x, &s.t_ddagger),
            None => self.x.clone(),
        }
    }
}

/// Row split, KNN matching and local PCA.
pub fn extract_latent(panel: &MeasurementPanel, settings: &Step1Settings) -> Result<LatentExtraction> {
    let t = panel.n_rows();
    let (x, split, high_rank) = match (&settings.high_rank, panel.w().is_empty()) {
        (Some(hr), false) => {
            let thirds = make_row_split(t, SplitScheme::Thirds { seed: hr.split_seed })?;
            let adj = partial_out_high_rank(panel, &thirds, hr)?;
            (adj.residual_panel.clone(), Some(adj.downstream_split.clone()), Some(adj))
        }
        _ => {
            let split = match settings.split {
                Some(SplitScheme::Thirds { .. }) => {
                    return Err(Error::Contract(
                        "a three-way split is only used with high-rank covariates".into(),
                    ))
                }
                Some(scheme) => Some(make_row_split(t, scheme)?),
                None => None,
            };
            (panel.x().clone(), split, None)
        }
    };
    let (x_match, x_pca) = match &split {
        Some(s) => (select_rows(&x, &s.t_dagger), select_rows(&x, &s.t_ddagger)),
        None => (x.clone(), x.clone()),
    };
    let n = x.ncols();
    if settings.k == 0 || settings.k > n {
        return Err(Error::Size(format!("K = {} must lie in 1..={n}", settings.k)));
    }
    let distances = pairwise_distances(&x_match, &DistanceMetric::from(settings.metric))?;
    let neighborhoods = knn_from_distances(&distances, settings.k)?;
    let fits = if settings.d_lambda > 0 {
        Some(local_pca_all(&x_pca, &neighborhoods, settings.d_lambda, settings.solver)?)
    } else {
        None
    };
    Ok(LatentExtraction {
        split,
        x,
        distances,
        neighborhoods,
        fits,
        high_rank,
    })
}

/// Checks that a panel and a sample describe the same units.
pub fn check_alignment(panel: &MeasurementPanel, sample: &TreatmentSample) -> Result<()> {
    if panel.n_units() != sample.n() {
        return Err(Error::Contract(format!(
            "panel has {} units but the sample has {}",
            panel.n_units(),
            sample.n()
        )));
    }
    Ok(())
}
