//! Simulated designs with a scalar latent confounder and a Monte Carlo harness.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MeasurementPanel, SplitScheme, TreatmentSample};
use crate::error::{Error, Result};
use crate::estimators::{dr_counterfactual_mean, DrEstimate};
use crate::linalg::EigenSolver;
use crate::matching::MetricKind;
use crate::pipeline::{extract_latent, Step1Settings};
use crate::regression::{fit_selected_nuisances, NuisanceFits, NuisanceOptions, OutcomeBackend, PropensityBackend};
use crate::stats::{derive_seed, KahanSum};
use crate::tuning::{dpi_k, BiasProxy, PilotSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `eta_t(a) = (a - w_t)^2`
    Model1,
    /// `eta_t(a) = sin(pi (a + w_t))`
    Model2,
}

impl Model {
    pub fn eta(self, alpha: f64, varpi: f64) -> f64 {
        match self {
            Model::Model1 => (alpha - varpi).powi(2),
            Model::Model2 => (PI * (alpha + varpi)).sin(),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Model1 => "model1",
            Model::Model2 => "model2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub model: Model,
    pub n: usize,
    pub t: usize,
    pub seed: u64,
    /// Sets every noise term to zero.
    #[serde(default)]
    pub noiseless: bool,
}

/// Treatment probability given the latent variable.
pub fn propensity(alpha: f64) -> f64 {
    let a = alpha - 0.5;
    let e = a + a * a;
    1.0 / (1.0 + (-e).exp())
}

pub fn mean_y0(alpha: f64) -> f64 {
    alpha + alpha * alpha
}

pub fn mean_y1(alpha: f64) -> f64 {
    2.0 * alpha + alpha * alpha + 1.0
}

/// Composite Simpson rule on `[0, 1]`.
fn simpson(f: impl Fn(f64) -> f64, panels: usize) -> f64 {
    let h = 1.0 / (2 * panels) as f64;
    let mut acc = KahanSum::new();
    acc.add(f(0.0));
    acc.add(f(1.0));
    for k in 1..2 * panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc.add(w * f(k as f64 * h));
    }
    acc.value() * h / 3.0
}

/// `E[y(0) | s = 1]` under the simulated design.
pub fn true_theta_01() -> f64 {
    let num = simpson(|a| mean_y0(a) * propensity(a), 20_000);
    let den = simpson(propensity, 20_000);
    num / den
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub panel: MeasurementPanel,
    pub sample: TreatmentSample,
    pub alpha: Vec<f64>,
    pub varpi: Vec<f64>,
    /// True propensity of each unit.
    pub p: Vec<f64>,
    /// `E[y(0) | s = 1]`.
    pub truth: f64,
}

impl Simulated {
    /// Nuisances at their population values for both levels.
    pub fn oracle_nuisance(&self) -> Result<NuisanceFits> {
        let mut fits = NuisanceFits::empty(&self.sample);
        fits.set_level(0, self.alpha.iter().map(|&a| mean_y0(a)).collect(), self.p.iter().map(|p| 1.0 - p).collect())?;
        fits.set_level(1, self.alpha.iter().map(|&a| mean_y1(a)).collect(), self.p.clone())?;
        Ok(fits)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate(spec: &DgpSpec) -> Result<Simulated> {
    if spec.n < 2 || spec.t < 2 {
        return Err(Error::Size(format!("n = {} and T = {} must be at least 2", spec.n, spec.t)));
    }
    let (n, t) = (spec.n, spec.t);
    let noise = if spec.noiseless { 0.0 } else { 1.0 };
    let uniform = |id: u64, len: usize| -> Vec<f64> {
        let mut rng = stream(spec.seed, id);
        (0..len).map(|_| rng.random::<f64>()).collect()
    };
    let normal = |id: u64, len: usize| -> Vec<f64> {
        let mut rng = stream(spec.seed, id);
        (0..len).map(|_| noise * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let alpha = uniform(0, n);
    let varpi = uniform(1, t);
    let v = uniform(2, n);
    let eps0 = normal(3, n);
    let eps1 = normal(4, n);
    let u = normal(5, n * t);

    // u is drawn unit by unit, so each column is one unit's measurement noise.
    let x = DMatrix::from_fn(t, n, |r, c| spec.model.eta(alpha[c], varpi[r]) + u[c * t + r]);
    let p: Vec<f64> = alpha.iter().map(|&a| propensity(a)).collect();
    let s: Vec<usize> = v.iter().zip(&p).map(|(v, p)| usize::from(v <= p)).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            if s[i] == 1 {
                mean_y1(alpha[i]) + eps1[i]
            } else {
                mean_y0(alpha[i]) + eps0[i]
            }
        })
        .collect();
    Ok(Simulated {
        panel: MeasurementPanel::from_matrix(x)?,
        sample: TreatmentSample::without_controls(y, s, 2)?,
        alpha,
        varpi,
        p,
        truth: true_theta_01(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Local averages of outcome and treatment, no row split.
    LocalConstant,
    /// Two local factors, contiguous halves, local least squares.
    LocalLinear,
    /// Population nuisances.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum KRule {
    Fixed { k: usize },
    /// `K = round(c * n^exponent)`.
    Power { c: f64, exponent: f64 },
    /// Plug-in choice from a pilot at `round(c * n^exponent)`.
    Dpi { c: f64, exponent: f64 },
}

impl KRule {
    pub fn base(&self, n: usize) -> usize {
        match *self {
            KRule::Fixed { k } => k,
            KRule::Power { c, exponent } | KRule::Dpi { c, exponent } => (c * (n as f64).powf(exponent)).round() as usize,
        }
        .clamp(1, n)
    }
}

impl fmt::Display for KRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KRule::Fixed { k } => write!(f, "K={k}"),
            KRule::Power { c, exponent } => write!(f, "K={c}n^{exponent}"),
            KRule::Dpi { c, exponent } => write!(f, "DPI(K_ini={c}n^{exponent})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub backend: Backend,
    pub k_rule: KRule,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default)]
    pub solver: EigenSolver,
}

fn default_metric() -> MetricKind {
    MetricKind::PseudoMax
}

impl EstimatorConfig {
    pub fn new(backend: Backend, k_rule: KRule) -> Self {
        Self {
            backend,
            k_rule,
            metric: default_metric(),
            solver: EigenSolver::default(),
        }
    }

    fn split(&self) -> Option<SplitScheme> {
        match self.backend {
            Backend::LocalLinear => Some(SplitScheme::ContiguousHalves),
            _ => None,
        }
    }

    fn d_lambda(&self) -> usize {
        match self.backend {
            Backend::LocalLinear => 2,
            _ => 0,
        }
    }

    fn nuisance_options(&self) -> NuisanceOptions {
        match self.backend {
            Backend::LocalLinear => NuisanceOptions {
                outcome: OutcomeBackend::LocalLs,
                propensity: PropensityBackend::LocalLs,
                ..Default::default()
            },
            _ => NuisanceOptions {
                outcome: OutcomeBackend::LocalAverage,
                propensity: PropensityBackend::LocalAverage,
                ..Default::default()
            },
        }
    }

    /// Number of neighbors for one simulated sample.
    pub fn choose_k(&self, sim: &Simulated) -> Result<usize> {
        let n = sim.sample.n();
        let base = self.k_rule.base(n);
        match self.k_rule {
            KRule::Dpi { .. } => {
                let m = match self.backend {
                    Backend::LocalLinear => 2,
                    _ => 1,
                };
                let settings = PilotSettings {
                    metric: self.metric,
                    split: self.split(),
                    solver: self.solver,
                    regression: Default::default(),
                };
                Ok(dpi_k(&sim.sample, &sim.panel, 0, base, 1, m, BiasProxy::Polynomial, &settings)?.k_selected)
            }
            _ => Ok(base),
        }
    }

    /// Estimate of `E[y(0) | s = 1]` on one simulated sample, with the `K` used.
    pub fn estimate(&self, sim: &Simulated) -> Result<(DrEstimate, usize)> {
        if self.backend == Backend::Oracle {
            return Ok((dr_counterfactual_mean(&sim.sample, &sim.oracle_nuisance()?, 0, 1)?, 0));
        }
        let k = self.choose_k(sim)?;
        let step1 = Step1Settings {
            metric: self.metric,
            split: self.split(),
            k,
            d_lambda: self.d_lambda(),
            solver: self.solver,
            high_rank: None,
        };
        let latent = extract_latent(&sim.panel, &step1)?;
        let nuis = fit_selected_nuisances(&sim.sample, &latent.neighborhoods, latent.fits(), &[0], &[0, 1], &self.nuisance_options())?;
        Ok((dr_counterfactual_mean(&sim.sample, &nuis, 0, 1)?, k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub model: Model,
    pub n: usize,
    pub t: usize,
    pub estimator: EstimatorConfig,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub cr: f64,
    pub al: f64,
    pub mean_k: f64,
    pub n_reps: usize,
    pub failures: usize,
    pub theta_hats: Vec<f64>,
    /// Largest `|mean(phi)|` over the replications.
    pub max_mean_influence: f64,
}

impl McReport {
    pub fn csv_header() -> &'static str {
        "model,n,T,backend,k_rule,BIAS,SD,RMSE,CR,AL,mean_K,reps,failures"
    }

    pub fn csv_row(&self) -> String {
        let backend = match self.estimator.backend {
            Backend::LocalConstant => "local_constant",
            Backend::LocalLinear => "local_linear",
            Backend::Oracle => "oracle",
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.model,
            self.n,
            self.t,
            backend,
            self.estimator.k_rule,
            self.bias,
            self.sd,
            self.rmse,
            self.cr,
            self.al,
            self.mean_k,
            self.n_reps,
            self.failures
        )
    }
}

struct Rep {
    theta: f64,
    covered: bool,
    length: f64,
    k: usize,
    mean_phi: f64,
}

/// Replication `r` draws its data from `derive_seed(master_seed, r)`.
pub fn run_monte_carlo(spec: &DgpSpec, config: &EstimatorConfig, n_reps: usize, master_seed: u64) -> Result<McReport> {
    if n_reps == 0 {
        return Err(Error::Contract("at least one replication is required".into()));
    }
    let truth = true_theta_01();
    let outcomes: Vec<std::result::Result<Rep, String>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let rep_spec = DgpSpec {
                seed: derive_seed(master_seed, r),
                ..*spec
            };
            let run = || -> Result<Rep> {
                let sim = generate(&rep_spec)?;
                let (est, k) = config.estimate(&sim)?;
                let (theta, half) = (est.theta, crate::estimators::Z_975 * est.std_error());
                Ok(Rep {
                    theta,
                    mean_phi: est.influence.iter().sum::<f64>() / est.n() as f64,
                    covered: (theta - half..=theta + half).contains(&truth),
                    length: 2.0 * half,
                    k,
                })
            };
            run().map_err(|e| format!("replication {r}: {e}"))
        })
        .collect();
    let mut reps = Vec::with_capacity(n_reps);
    let mut failures = 0;
    for o in outcomes {
        match o {
            Ok(rep) => reps.push(rep),
            Err(msg) => {
                log::warn!("{msg}");
                failures += 1;
            }
        }
    }
    if reps.is_empty() {
        return Err(Error::numerical("Monte Carlo", "every replication failed"));
    }
    let m = reps.len() as f64;
    let mean_theta = reps.iter().map(|r| r.theta).collect::<KahanSum>().value() / m;
    let var = reps.iter().map(|r| (r.theta - mean_theta).powi(2)).collect::<KahanSum>().value() / m;
    let mse = reps.iter().map(|r| (r.theta - truth).powi(2)).collect::<KahanSum>().value() / m;
    Ok(McReport {
        model: spec.model,
        n: spec.n,
        t: spec.t,
        estimator: *config,
        truth,
        bias: mean_theta - truth,
        sd: var.sqrt(),
        rmse: mse.sqrt(),
        cr: reps.iter().filter(|r| r.covered).count() as f64 / m,
        al: reps.iter().map(|r| r.length).collect::<KahanSum>().value() / m,
        mean_k: reps.iter().map(|r| r.k as f64).collect::<KahanSum>().value() / m,
        n_reps,
        failures,
        theta_hats: reps.iter().map(|r| r.theta).collect(),
        max_mean_influence: reps.iter().map(|r| r.mean_phi.abs()).fold(0.0, f64::max),
    })
}
