//! Doubly-robust counterfactual means, contrasts, counterfactual distribution
//! functions, multiplier bootstrap bands and the stochastic dominance test.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TreatmentSample;
use crate::error::{Error, Result};
use crate::local_pca::LocalFactorFit;
use crate::matching::Neighborhood;
use crate::regression::{fit_outcome, fit_propensity, NuisanceFits, NuisanceOptions};
use crate::stats::{empirical_quantile, quantile_type7};

pub const Z_975: f64 = 1.959964;

/// Share of level-`j` units with clipped propensities above which a warning is raised.
const CLIP_WARN_SHARE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrEstimate {
    /// Potential-outcome level.
    pub j: usize,
    /// Conditioning (treated) level.
    pub j_prime: usize,
    pub theta: f64,
    pub sigma: f64,
    pub influence: Vec<f64>,
    pub ci_95: (f64, f64),
    pub warnings: Vec<String>,
}

impl DrEstimate {
    pub fn n(&self) -> usize {
        self.influence.len()
    }

    pub fn std_error(&self) -> f64 {
        self.sigma / (self.n() as f64).sqrt()
    }

    fn finish(j: usize, j_prime: usize, theta: f64, sigma: f64, influence: Vec<f64>, warnings: Vec<String>) -> Self {
        let half = Z_975 * sigma / (influence.len() as f64).sqrt();
        Self {
            j,
            j_prime,
            theta,
            sigma,
            influence,
            ci_95: (theta - half, theta + half),
            warnings,
        }
    }
}

struct Inputs<'a> {
    y: &'a [f64],
    s: &'a [usize],
    varsigma: &'a [f64],
    p_j: &'a [f64],
    p_jp: &'a [f64],
    p_bar: f64,
}

fn gather<'a>(sample: &'a TreatmentSample, nuisance: &'a NuisanceFits, j: usize, jp: usize) -> Result<Inputs<'a>> {
    sample.require_levels(&[j, jp])?;
    let p_bar = *nuisance
        .p_marginal
        .get(jp)
        .ok_or_else(|| Error::EstimandUndefined(format!("level {jp} not in nuisance fits")))?;
    if !(p_bar > 0.0) {
        return Err(Error::EstimandUndefined(format!("no units at level {jp}")));
    }
    let inputs = Inputs {
        y: sample.y(),
        s: sample.s(),
        varsigma: nuisance.varsigma(j)?,
        p_j: nuisance.p(j)?,
        p_jp: nuisance.p(jp)?,
        p_bar,
    };
    let n = sample.n();
    if inputs.varsigma.len() != n || inputs.p_j.len() != n || inputs.p_jp.len() != n {
        return Err(Error::Contract("nuisance fits and sample have different sizes".into()));
    }
    for (i, &s) in inputs.s.iter().enumerate() {
        if s == j && !(inputs.p_j[i] > 0.0) {
            return Err(Error::numerical(
                "doubly-robust estimator",
                format!("nonpositive propensity for unit {i} at level {j}"),
            ));
        }
    }
    Ok(inputs)
}

fn theta_from(inp: &Inputs<'_>, j: usize, jp: usize) -> f64 {
    let n = inp.y.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut term = 0.0;
        if inp.s[i] == jp {
            term += inp.varsigma[i] / inp.p_bar;
        }
        if inp.s[i] == j {
            term += (inp.p_jp[i] / inp.p_bar) * (inp.y[i] - inp.varsigma[i]) / inp.p_j[i];
        }
        acc += term;
    }
    acc / n as f64
}

fn influence_from(inp: &Inputs<'_>, theta: f64, j: usize, jp: usize) -> Vec<f64> {
    (0..inp.y.len())
        .map(|i| {
            let mut phi = 0.0;
            if inp.s[i] == jp {
                phi += (inp.varsigma[i] - theta) / inp.p_bar;
            }
            if inp.s[i] == j {
                phi += (inp.p_jp[i] / inp.p_bar) * (inp.y[i] - inp.varsigma[i]) / inp.p_j[i];
            }
            phi
        })
        .collect()
}

fn variance_from(inp: &Inputs<'_>, theta: f64, j: usize, jp: usize) -> f64 {
    let n = inp.y.len();
    let pb2 = inp.p_bar * inp.p_bar;
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..n {
        if inp.s[i] == jp {
            let r = inp.varsigma[i] - theta;
            first += r * r / pb2;
        }
        if inp.s[i] == j {
            let e = inp.y[i] - inp.varsigma[i];
            second += inp.p_jp[i] * inp.p_jp[i] * e * e / (pb2 * inp.p_j[i] * inp.p_j[i]);
        }
    }
    (first + second) / n as f64
}

/// Doubly-robust estimate of `E[y(j) | s = j']`.
pub fn dr_counterfactual_mean(sample: &TreatmentSample, nuisance: &NuisanceFits, j: usize, j_prime: usize) -> Result<DrEstimate> {
    let inp = gather(sample, nuisance, j, j_prime)?;
    let theta = theta_from(&inp, j, j_prime);
    let influence = influence_from(&inp, theta, j, j_prime);
    let sigma = variance_from(&inp, theta, j, j_prime).sqrt();
    let mut warnings = Vec::new();
    if let Some(Some(records)) = nuisance.propensity_records.get(j) {
        let treated: Vec<_> = records.iter().filter(|r| sample.s()[r.unit] == j).collect();
        let clipped = treated.iter().filter(|r| r.clipped()).count();
        if !treated.is_empty() && clipped as f64 >= CLIP_WARN_SHARE * treated.len() as f64 {
            let msg = format!(
                "{clipped} of {} level-{j} units use a clipped propensity score",
                treated.len()
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    if !theta.is_finite() || !sigma.is_finite() {
        return Err(Error::numerical("doubly-robust estimator", "non-finite estimate"));
    }
    Ok(DrEstimate::finish(j, j_prime, theta, sigma, influence, warnings))
}

/// Plug-in variance of the doubly-robust estimator at `theta_hat`.
pub fn dr_variance(sample: &TreatmentSample, nuisance: &NuisanceFits, theta_hat: f64, j: usize, j_prime: usize) -> Result<f64> {
    let inp = gather(sample, nuisance, j, j_prime)?;
    Ok(variance_from(&inp, theta_hat, j, j_prime))
}

/// `a - b`, with variance from the differenced influence values.
pub fn treatment_effect(a: &DrEstimate, b: &DrEstimate) -> Result<DrEstimate> {
    if a.n() != b.n() {
        return Err(Error::Contract("estimates come from samples of different sizes".into()));
    }
    if a.j_prime != b.j_prime {
        return Err(Error::Contract(format!(
            "contrast needs a common conditioning level, got {} and {}",
            a.j_prime, b.j_prime
        )));
    }
    let influence: Vec<f64> = a.influence.iter().zip(&b.influence).map(|(x, y)| x - y).collect();
    let var = influence.iter().map(|v| v * v).sum::<f64>() / influence.len() as f64;
    let mut warnings = a.warnings.clone();
    warnings.extend(b.warnings.iter().cloned());
    Ok(DrEstimate::finish(a.j, a.j_prime, a.theta - b.theta, var.sqrt(), influence, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TauGrid {
    Explicit { values: Vec<f64> },
    /// Equally spaced probabilities from `lower` to `upper`, mapped through the
    /// sample quantiles of the observed outcome.
    Quantiles { lower: f64, upper: f64, points: usize },
}

impl Default for TauGrid {
    fn default() -> Self {
        TauGrid::Quantiles {
            lower: 0.1,
            upper: 0.9,
            points: 17,
        }
    }
}

impl TauGrid {
    pub fn resolve(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mut grid = match self {
            TauGrid::Explicit { values } => values.clone(),
            TauGrid::Quantiles { lower, upper, points } => {
                if *points == 0 || !(0.0..=1.0).contains(lower) || !(0.0..=1.0).contains(upper) || lower > upper {
                    return Err(Error::Contract("invalid quantile grid".into()));
                }
                let mut sorted = y.to_vec();
                sorted.sort_by(f64::total_cmp);
                (0..*points)
                    .map(|k| {
                        let p = if *points == 1 {
                            *lower
                        } else {
                            lower + (upper - lower) * k as f64 / (*points - 1) as f64
                        };
                        quantile_type7(&sorted, p)
                    })
                    .collect()
            }
        };
        if grid.is_empty() {
            return Err(Error::Contract("empty evaluation grid".into()));
        }
        if grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite grid point".into()));
        }
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfProcess {
    pub j: usize,
    pub j_prime: usize,
    pub tau_grid: Vec<f64>,
    /// Estimates before rearrangement.
    pub theta_raw: Vec<f64>,
    /// Rearranged into nondecreasing order and clipped to `[0, 1]`.
    pub theta_of_tau: Vec<f64>,
    /// `n x |grid|`.
    pub influence_of_tau: DMatrix<f64>,
    /// `sqrt(mean(phi(tau)^2))`.
    pub sigma_of_tau: Vec<f64>,
    pub band_95: Option<Vec<(f64, f64)>>,
}

impl CdfProcess {
    pub fn n(&self) -> usize {
        self.influence_of_tau.nrows()
    }

    /// Attaches the uniform band implied by `draws`.
    pub fn with_band(mut self, draws: &BootstrapDraws) -> Self {
        let root_n = (self.n() as f64).sqrt();
        self.band_95 = Some(
            self.theta_of_tau
                .iter()
                .zip(&self.sigma_of_tau)
                .map(|(t, s)| {
                    let half = draws.critical_value * s / root_n;
                    (t - half, t + half)
                })
                .collect(),
        );
        self
    }
}

/// Counterfactual CDF from outcome fits already computed at every grid point.
/// `varsigma_by_tau[k]` holds the fitted means of `1(y <= tau_k)`.
pub fn cdf_from_fits(
    sample: &TreatmentSample,
    p_j: &[f64],
    p_jp: &[f64],
    varsigma_by_tau: &[Vec<f64>],
    tau_grid: &[f64],
    j: usize,
    j_prime: usize,
) -> Result<CdfProcess> {
    if tau_grid.is_empty() {
        return Err(Error::Contract("empty evaluation grid".into()));
    }
    if varsigma_by_tau.len() != tau_grid.len() {
        return Err(Error::Contract("one outcome fit per grid point is required".into()));
    }
    let n = sample.n();
    let mut theta_raw = Vec::with_capacity(tau_grid.len());
    let mut influence = DMatrix::zeros(n, tau_grid.len());
    let mut sigma = Vec::with_capacity(tau_grid.len());
    for (k, (&tau, vs)) in tau_grid.iter().zip(varsigma_by_tau).enumerate() {
        let y_tau: Vec<f64> = sample.y().iter().map(|&y| if y <= tau { 1.0 } else { 0.0 }).collect();
        let mut nuis = NuisanceFits::empty(sample);
        nuis.varsigma_hat[j] = Some(vs.clone());
        nuis.p_hat[j] = Some(p_j.to_vec());
        if j_prime != j {
            nuis.p_hat[j_prime] = Some(p_jp.to_vec());
        }
        let tau_sample = sample.with_outcome(y_tau)?;
        let inp = gather(&tau_sample, &nuis, j, j_prime)?;
        let theta = theta_from(&inp, j, j_prime);
        let phi = influence_from(&inp, theta, j, j_prime);
        let s2 = phi.iter().map(|v| v * v).sum::<f64>() / n as f64;
        influence.set_column(k, &nalgebra::DVector::from_vec(phi));
        theta_raw.push(theta);
        sigma.push(s2.sqrt());
    }
    let mut theta_of_tau = theta_raw.clone();
    theta_of_tau.sort_by(f64::total_cmp);
    for v in &mut theta_of_tau {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(CdfProcess {
        j,
        j_prime,
        tau_grid: tau_grid.to_vec(),
        theta_raw,
        theta_of_tau,
        influence_of_tau: influence,
        sigma_of_tau: sigma,
        band_95: None,
    })
}

/// Refits the level-`j` outcome on `1(y <= tau)` at every grid point and
/// evaluates the doubly-robust estimator; propensities are fitted once.
pub fn counterfactual_cdf(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    j: usize,
    j_prime: usize,
    tau_grid: &[f64],
    opts: &NuisanceOptions,
) -> Result<CdfProcess> {
    if tau_grid.is_empty() {
        return Err(Error::Contract("empty evaluation grid".into()));
    }
    sample.require_levels(&[j, j_prime])?;
    let p_j: Vec<f64> = fit_propensity(sample, neighborhoods, fits, j, opts.propensity, &opts.regression)?
        .iter()
        .map(|r| r.fitted)
        .collect();
    let p_jp: Vec<f64> = if j_prime == j {
        p_j.clone()
    } else {
        fit_propensity(sample, neighborhoods, fits, j_prime, opts.propensity, &opts.regression)?
            .iter()
            .map(|r| r.fitted)
            .collect()
    };
    let varsigma: Vec<Vec<f64>> = tau_grid
        .par_iter()
        .map(|&tau| {
            let y_tau: Vec<f64> = sample.y().iter().map(|&y| if y <= tau { 1.0 } else { 0.0 }).collect();
            let ts = sample.with_outcome(y_tau)?;
            let rec = fit_outcome(&ts, neighborhoods, fits, j, opts.outcome, &opts.regression)?;
            Ok(rec.iter().map(|r| r.fitted).collect())
        })
        .collect::<Result<_>>()?;
    cdf_from_fits(sample, &p_j, &p_jp, &varsigma, tau_grid, j, j_prime)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDist {
    #[default]
    Rademacher,
    Mammen,
    Gaussian,
}

/// Multiplier weights of bootstrap draw `draw`.
pub fn draw_weights(dist: WeightDist, seed: u64, draw: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    let sqrt5 = 5f64.sqrt();
    let mammen_low = -(sqrt5 - 1.0) / 2.0;
    let mammen_high = (sqrt5 + 1.0) / 2.0;
    let mammen_p = (sqrt5 + 1.0) / (2.0 * sqrt5);
    (0..n)
        .map(|_| match dist {
            WeightDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            WeightDist::Mammen => {
                if rng.random::<f64>() < mammen_p {
                    mammen_low
                } else {
                    mammen_high
                }
            }
            WeightDist::Gaussian => rng.sample(StandardNormal),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub weights_dist: WeightDist,
    pub n_draws: usize,
    pub seed: u64,
    pub sup_stats: Vec<f64>,
    /// 0.95 empirical quantile of `sup_stats`.
    pub critical_value: f64,
    /// Grid positions with zero standard deviation, left out of the supremum.
    pub excluded_tau: Vec<usize>,
}

/// `(1/sqrt(n)) * omega' phi` for every column of `phi`.
fn weighted_process(omega: &[f64], phi: &DMatrix<f64>) -> Vec<f64> {
    let root_n = (phi.nrows() as f64).sqrt();
    phi.column_iter()
        .map(|c| c.iter().zip(omega).map(|(p, w)| p * w).sum::<f64>() / root_n)
        .collect()
}

/// Studentized sup-norm multiplier bootstrap of an influence process (`n x |grid|`).
pub fn multiplier_bootstrap(influence: &DMatrix<f64>, n_draws: usize, dist: WeightDist, seed: u64) -> Result<BootstrapDraws> {
    if n_draws == 0 {
        return Err(Error::Contract("at least one bootstrap draw is required".into()));
    }
    if influence.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("multiplier bootstrap", "non-finite influence values"));
    }
    let n = influence.nrows();
    let sigma: Vec<f64> = influence
        .column_iter()
        .map(|c| (c.norm_squared() / n as f64).sqrt())
        .collect();
    let excluded_tau: Vec<usize> = (0..sigma.len()).filter(|&k| sigma[k] == 0.0).collect();
    if !excluded_tau.is_empty() {
        log::warn!("{} grid points with zero standard deviation excluded from studentization", excluded_tau.len());
    }
    let sup_stats: Vec<f64> = (0..n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let omega = draw_weights(dist, seed, d, n);
            weighted_process(&omega, influence)
                .iter()
                .zip(&sigma)
                .filter(|(_, s)| **s > 0.0)
                .map(|(g, s)| (g / s).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let critical_value = empirical_quantile(&sup_stats, 0.95);
    Ok(BootstrapDraws {
        weights_dist: dist,
        n_draws,
        seed,
        sup_stats,
        critical_value,
        excluded_tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdTest {
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
}

/// One-sided test of `theta_a(tau) <= theta_b(tau)` for every grid point.
pub fn sd_test(a: &CdfProcess, b: &CdfProcess, n_draws: usize, dist: WeightDist, seed: u64) -> Result<SdTest> {
    if a.tau_grid != b.tau_grid {
        return Err(Error::Contract("processes are evaluated on different grids".into()));
    }
    if a.n() != b.n() {
        return Err(Error::Contract("processes come from samples of different sizes".into()));
    }
    if n_draws == 0 {
        return Err(Error::Contract("at least one bootstrap draw is required".into()));
    }
    let n = a.n();
    let root_n = (n as f64).sqrt();
    let max_gap = a
        .theta_of_tau
        .iter()
        .zip(&b.theta_of_tau)
        .map(|(x, y)| x - y)
        .fold(f64::NEG_INFINITY, f64::max);
    let statistic = (root_n * max_gap).max(0.0);
    let diff = &a.influence_of_tau - &b.influence_of_tau;
    let sups: Vec<f64> = (0..n_draws as u64)
        .into_par_iter()
        .map(|d| {
            let omega = draw_weights(dist, seed, d, n);
            weighted_process(&omega, &diff).into_iter().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let critical_value = empirical_quantile(&sups, 0.95);
    Ok(SdTest {
        statistic,
        critical_value,
        reject: statistic > critical_value,
    })
}
