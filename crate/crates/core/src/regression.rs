//! Factor-augmented local regressions for outcome means and propensity scores.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TreatmentSample;
use crate::error::{Error, Result};
use crate::linalg::{self, solve_spd_guarded};
use crate::local_pca::LocalFactorFit;
use crate::matching::Neighborhood;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeBackend {
    LocalLs,
    LocalAverage,
    LocalQmle { link: Link },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityBackend {
    LocalLs,
    LocalAverage,
    LocalLogit,
}

/// Why a fit departed from the requested backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// A ridge was added to singular normal equations.
    RidgeGuard,
    /// Fewer eligible neighbors than regressors; local average used.
    TooFewObservations,
    /// Logit likelihood has no finite maximizer; local average used.
    Separation,
    /// Newton iterations did not converge; local average used.
    NonConvergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFitRecord {
    pub unit: usize,
    pub level: usize,
    pub intercept: Option<f64>,
    pub beta: Vec<f64>,
    pub b: Vec<f64>,
    pub fitted: f64,
    /// Fitted value before propensity clipping.
    pub pre_clip: f64,
    pub n_used: usize,
    pub fallback: Fallback,
    /// Least-squares variance of the fitted value, when residual degrees of freedom exist.
    pub variance: Option<f64>,
}

impl LocalFitRecord {
    pub fn fallback_flag(&self) -> bool {
        self.fallback != Fallback::None
    }

    pub fn clipped(&self) -> bool {
        self.pre_clip != self.fitted
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionOptions {
    pub add_intercept: bool,
    pub p_clip: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for RegressionOptions {
    fn default() -> Self {
        Self {
            add_intercept: false,
            p_clip: 0.01,
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

/// Ordinary least squares through guarded normal equations.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coef: DVector<f64>,
    pub ridge_used: bool,
    /// `RSS / (n - p)`, absent without residual degrees of freedom.
    pub sigma2: Option<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl LeastSquares {
    /// `x' (X'X)^{-1} x`.
    pub fn leverage(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.chol.solve(x))
    }
}

pub fn least_squares(design: &DMatrix<f64>, y: &DVector<f64>) -> Result<LeastSquares> {
    let g = linalg::gram(design);
    let rhs = design.tr_mul(y);
    let solve = solve_spd_guarded(&g, &rhs)?;
    let (n, p) = design.shape();
    let sigma2 = (n > p).then(|| (y - design * &solve.solution).norm_squared() / (n - p) as f64);
    Ok(LeastSquares {
        coef: solve.solution,
        ridge_used: solve.ridge_used,
        sigma2,
        chol: solve.chol,
    })
}

fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

enum LogitOutcome {
    Converged { coef: DVector<f64>, ridge_used: bool },
    Separation,
    NonConvergence,
}

/// Newton-Raphson for the logit quasi-likelihood with responses in `[0, 1]`.
fn logit_newton(design: &DMatrix<f64>, y: &DVector<f64>, opts: &RegressionOptions) -> Result<LogitOutcome> {
    if y.iter().all(|&v| v <= 0.0) || y.iter().all(|&v| v >= 1.0) {
        return Ok(LogitOutcome::Separation);
    }
    let (n, p) = design.shape();
    let mut coef = DVector::zeros(p);
    let mut ridge_used = false;
    for _ in 0..opts.max_iter {
        let eta = design * &coef;
        let mu = eta.map(logistic);
        let score = design.tr_mul(&(y - &mu));
        let mut h = DMatrix::zeros(p, p);
        for r in 0..n {
            let w = mu[r] * (1.0 - mu[r]);
            let row = design.row(r);
            for a in 0..p {
                let wa = w * row[a];
                for b in 0..=a {
                    h[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let step = match solve_spd_guarded(&h, &score) {
            Ok(s) => s,
            Err(_) => return Ok(LogitOutcome::Separation),
        };
        ridge_used |= step.ridge_used;
        coef += &step.solution;
        if !coef.iter().all(|v| v.is_finite()) || coef.amax() > 1e6 {
            return Ok(LogitOutcome::Separation);
        }
        if step.solution.amax() <= opts.tol * (1.0 + coef.amax()) {
            let fitted = (design * &coef).map(logistic);
            if fitted.iter().any(|&m| !(1e-10..=1.0 - 1e-10).contains(&m)) {
                return Ok(LogitOutcome::Separation);
            }
            return Ok(LogitOutcome::Converged { coef, ridge_used });
        }
    }
    Ok(LogitOutcome::NonConvergence)
}

fn regressor_row(sample: &TreatmentSample, fit: &LocalFactorFit, pos: usize, opts: &RegressionOptions) -> Vec<f64> {
    let unit = fit.members[pos];
    let mut row = Vec::with_capacity(opts.add_intercept as usize + sample.d_z() + fit.d_lambda());
    if opts.add_intercept {
        row.push(1.0);
    }
    row.extend(sample.z().row(unit).iter());
    row.extend(fit.loadings.row(pos).iter());
    row
}

#[derive(Clone, Copy)]
enum Method {
    Ls,
    Logit,
    Average,
}

/// One local regression of `response` on `(z, loadings)` over the eligible members.
fn fit_unit(
    sample: &TreatmentSample,
    nbhd: &Neighborhood,
    fit: Option<&LocalFactorFit>,
    level: usize,
    response: &[f64],
    eligible: &dyn Fn(usize) -> bool,
    method: Method,
    opts: &RegressionOptions,
) -> Result<LocalFitRecord> {
    let unit = nbhd.center;
    let positions: Vec<usize> = (0..nbhd.members.len()).filter(|&p| eligible(nbhd.members[p])).collect();
    let n_used = positions.len();
    if n_used == 0 {
        return Err(Error::Estimation {
            unit,
            level,
            message: "no eligible neighbors".into(),
        });
    }
    let average = |fallback| {
        let m = positions.iter().map(|&p| response[nbhd.members[p]]).sum::<f64>() / n_used as f64;
        LocalFitRecord {
            unit,
            level,
            intercept: None,
            beta: Vec::new(),
            b: Vec::new(),
            fitted: m,
            pre_clip: m,
            n_used,
            fallback,
            variance: None,
        }
    };
    let fit = match (method, fit) {
        (Method::Average, _) => return Ok(average(Fallback::None)),
        (_, Some(f)) => f,
        (_, None) => {
            return Err(Error::Contract(format!(
                "unit {unit}: regression backends need local factor fits"
            )))
        }
    };
    if fit.members != nbhd.members {
        return Err(Error::Contract(format!("unit {unit}: factor fit and neighborhood disagree")));
    }
    let p = opts.add_intercept as usize + sample.d_z() + fit.d_lambda();
    if n_used < p {
        return Ok(average(Fallback::TooFewObservations));
    }
    let rows: Vec<Vec<f64>> = positions.iter().map(|&q| regressor_row(sample, fit, q, opts)).collect();
    let design = DMatrix::from_fn(n_used, p, |r, c| rows[r][c]);
    let y = DVector::from_iterator(n_used, positions.iter().map(|&q| response[nbhd.members[q]]));
    let center_pos = nbhd.position(unit).expect("center is a member");
    let x0 = DVector::from_vec(regressor_row(sample, fit, center_pos, opts));

    let (coef, fallback, fitted, variance) = match method {
        Method::Ls => {
            let ls = least_squares(&design, &y)?;
            let fitted = x0.dot(&ls.coef);
            let variance = ls.sigma2.map(|s2| s2 * ls.leverage(&x0));
            let fb = if ls.ridge_used { Fallback::RidgeGuard } else { Fallback::None };
            (ls.coef, fb, fitted, variance)
        }
        Method::Logit => match logit_newton(&design, &y, opts)? {
            LogitOutcome::Converged { coef, ridge_used } => {
                let fitted = logistic(x0.dot(&coef));
                let fb = if ridge_used { Fallback::RidgeGuard } else { Fallback::None };
                (coef, fb, fitted, None)
            }
            LogitOutcome::Separation => return Ok(average(Fallback::Separation)),
            LogitOutcome::NonConvergence => return Ok(average(Fallback::NonConvergence)),
        },
        Method::Average => unreachable!(),
    };
    if !fitted.is_finite() {
        return Err(Error::numerical(
            format!("local regression for unit {unit}, level {level}"),
            "non-finite fitted value",
        ));
    }
    let off = opts.add_intercept as usize;
    let dz = sample.d_z();
    Ok(LocalFitRecord {
        unit,
        level,
        intercept: opts.add_intercept.then(|| coef[0]),
        beta: coef.rows(off, dz).iter().copied().collect(),
        b: coef.rows(off + dz, fit.d_lambda()).iter().copied().collect(),
        fitted,
        pre_clip: fitted,
        n_used,
        fallback,
        variance,
    })
}

fn check_inputs(sample: &TreatmentSample, nbhds: &[Neighborhood], fits: Option<&[LocalFactorFit]>, level: usize) -> Result<()> {
    if nbhds.len() != sample.n() {
        return Err(Error::Contract(format!(
            "{} neighborhoods for {} units",
            nbhds.len(),
            sample.n()
        )));
    }
    if let Some(f) = fits {
        if f.len() != nbhds.len() {
            return Err(Error::Contract("one factor fit per neighborhood is required".into()));
        }
    }
    if level >= sample.num_levels() {
        return Err(Error::EstimandUndefined(format!(
            "level {level} outside 0..{}",
            sample.num_levels()
        )));
    }
    Ok(())
}

fn fit_all(
    sample: &TreatmentSample,
    nbhds: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    level: usize,
    response: &[f64],
    outcome_side: bool,
    method: Method,
    opts: &RegressionOptions,
) -> Result<Vec<LocalFitRecord>> {
    check_inputs(sample, nbhds, fits, level)?;
    let s = sample.s();
    let eligible = |l: usize| !outcome_side || s[l] == level;
    (0..nbhds.len())
        .into_par_iter()
        .map(|i| fit_unit(sample, &nbhds[i], fits.map(|f| &f[i]), level, response, &eligible, method, opts))
        .collect()
}

/// Outcome fit for one neighborhood, leaving out `exclude` from the regression.
pub(crate) fn fit_outcome_single(
    sample: &TreatmentSample,
    nbhd: &Neighborhood,
    fit: Option<&LocalFactorFit>,
    level: usize,
    backend: OutcomeBackend,
    opts: &RegressionOptions,
    exclude: Option<usize>,
) -> Result<LocalFitRecord> {
    let method = match backend {
        OutcomeBackend::LocalAverage => Method::Average,
        OutcomeBackend::LocalLs | OutcomeBackend::LocalQmle { link: Link::Identity } => Method::Ls,
        OutcomeBackend::LocalQmle { link: Link::Logit } => Method::Logit,
    };
    let s = sample.s();
    let eligible = |l: usize| s[l] == level && Some(l) != exclude;
    fit_unit(sample, nbhd, fit, level, sample.y(), &eligible, method, opts)
}

/// Least-squares outcome fit for level `level` on neighbors with that level.
pub fn fit_outcome_local_ls(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: &[LocalFactorFit],
    level: usize,
    opts: &RegressionOptions,
) -> Result<Vec<LocalFitRecord>> {
    fit_all(sample, neighborhoods, Some(fits), level, sample.y(), true, Method::Ls, opts)
}

/// Average outcome of the neighbors with level `level`.
pub fn fit_outcome_local_average(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    level: usize,
) -> Result<Vec<LocalFitRecord>> {
    let opts = RegressionOptions::default();
    fit_all(sample, neighborhoods, None, level, sample.y(), true, Method::Average, &opts)
}

/// Quasi-likelihood outcome fit; the identity link is least squares.
pub fn local_qmle(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: &[LocalFactorFit],
    level: usize,
    link: Link,
    opts: &RegressionOptions,
) -> Result<Vec<LocalFitRecord>> {
    let method = match link {
        Link::Identity => Method::Ls,
        Link::Logit => Method::Logit,
    };
    fit_all(sample, neighborhoods, Some(fits), level, sample.y(), true, method, opts)
}

pub fn fit_outcome(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    level: usize,
    backend: OutcomeBackend,
    opts: &RegressionOptions,
) -> Result<Vec<LocalFitRecord>> {
    let method = match backend {
        OutcomeBackend::LocalAverage => Method::Average,
        OutcomeBackend::LocalLs | OutcomeBackend::LocalQmle { link: Link::Identity } => Method::Ls,
        OutcomeBackend::LocalQmle { link: Link::Logit } => Method::Logit,
    };
    fit_all(sample, neighborhoods, fits, level, sample.y(), true, method, opts)
}

/// Propensity of level `level` from all neighbors, clipped to `[p_clip, 1 - p_clip]`.
pub fn fit_propensity(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    level: usize,
    backend: PropensityBackend,
    opts: &RegressionOptions,
) -> Result<Vec<LocalFitRecord>> {
    if !(opts.p_clip > 0.0 && opts.p_clip < 0.5) {
        return Err(Error::Contract(format!("p_clip = {} must lie in (0, 0.5)", opts.p_clip)));
    }
    check_inputs(sample, neighborhoods, fits, level)?;
    let method = match backend {
        PropensityBackend::LocalLs => Method::Ls,
        PropensityBackend::LocalAverage => Method::Average,
        PropensityBackend::LocalLogit => Method::Logit,
    };
    let indicator = sample.indicator(level);
    let mut records = fit_all(sample, neighborhoods, fits, level, &indicator, false, method, opts)?;
    for r in &mut records {
        r.fitted = r.pre_clip.clamp(opts.p_clip, 1.0 - opts.p_clip);
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceOptions {
    pub outcome: OutcomeBackend,
    pub propensity: PropensityBackend,
    pub regression: RegressionOptions,
}

impl Default for NuisanceOptions {
    fn default() -> Self {
        Self {
            outcome: OutcomeBackend::LocalLs,
            propensity: PropensityBackend::LocalLs,
            regression: RegressionOptions::default(),
        }
    }
}

/// Fitted outcome means and propensities per level; levels not fitted are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFits {
    pub varsigma_hat: Vec<Option<Vec<f64>>>,
    pub p_hat: Vec<Option<Vec<f64>>>,
    pub p_marginal: Vec<f64>,
    pub outcome_records: Vec<Option<Vec<LocalFitRecord>>>,
    pub propensity_records: Vec<Option<Vec<LocalFitRecord>>>,
}

impl NuisanceFits {
    pub fn empty(sample: &TreatmentSample) -> Self {
        let l = sample.num_levels();
        Self {
            varsigma_hat: vec![None; l],
            p_hat: vec![None; l],
            p_marginal: (0..l).map(|j| sample.p_marginal(j)).collect(),
            outcome_records: vec![None; l],
            propensity_records: vec![None; l],
        }
    }

    /// Installs externally supplied nuisance values for one level.
    pub fn set_level(&mut self, level: usize, varsigma: Vec<f64>, p: Vec<f64>) -> Result<()> {
        if level >= self.varsigma_hat.len() {
            return Err(Error::EstimandUndefined(format!("level {level} not in sample")));
        }
        let n = self.varsigma_hat.iter().chain(&self.p_hat).flatten().map(Vec::len).next();
        if varsigma.len() != p.len() || n.is_some_and(|n| n != p.len()) {
            return Err(Error::Contract("nuisance vectors must have one entry per unit".into()));
        }
        self.varsigma_hat[level] = Some(varsigma);
        self.p_hat[level] = Some(p);
        Ok(())
    }

    pub fn varsigma(&self, level: usize) -> Result<&[f64]> {
        self.varsigma_hat
            .get(level)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::Contract(format!("outcome for level {level} was not fitted")))
    }

    pub fn p(&self, level: usize) -> Result<&[f64]> {
        self.p_hat
            .get(level)
            .and_then(Option::as_deref)
            .ok_or_else(|| Error::Contract(format!("propensity for level {level} was not fitted")))
    }

    /// Number of fit records, across all levels, that fell back.
    pub fn fallback_count(&self) -> usize {
        self.outcome_records
            .iter()
            .chain(&self.propensity_records)
            .flatten()
            .flatten()
            .filter(|r| r.fallback_flag())
            .count()
    }
}

/// Outcome fits for `outcome_levels` and propensity fits for `propensity_levels`;
/// every other level is left unfitted.
pub fn fit_selected_nuisances(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    outcome_levels: &[usize],
    propensity_levels: &[usize],
    opts: &NuisanceOptions,
) -> Result<NuisanceFits> {
    sample.require_levels(outcome_levels)?;
    sample.require_levels(propensity_levels)?;
    let mut out = NuisanceFits::empty(sample);
    for &j in outcome_levels {
        if out.varsigma_hat[j].is_none() {
            let o = fit_outcome(sample, neighborhoods, fits, j, opts.outcome, &opts.regression)?;
            out.varsigma_hat[j] = Some(o.iter().map(|r| r.fitted).collect());
            out.outcome_records[j] = Some(o);
        }
    }
    for &j in propensity_levels {
        if out.p_hat[j].is_none() {
            let p = fit_propensity(sample, neighborhoods, fits, j, opts.propensity, &opts.regression)?;
            out.p_hat[j] = Some(p.iter().map(|r| r.fitted).collect());
            out.propensity_records[j] = Some(p);
        }
    }
    Ok(out)
}

/// Outcome and propensity fits for every level in `levels`.
pub fn fit_nuisances(
    sample: &TreatmentSample,
    neighborhoods: &[Neighborhood],
    fits: Option<&[LocalFactorFit]>,
    levels: &[usize],
    opts: &NuisanceOptions,
) -> Result<NuisanceFits> {
    fit_selected_nuisances(sample, neighborhoods, fits, levels, levels, opts)
}
