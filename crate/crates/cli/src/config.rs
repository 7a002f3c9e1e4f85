use std::path::{Path, PathBuf};

use latent_dr::data::Schema;
use latent_dr::estimators::{TauGrid, WeightDist};
use latent_dr::local_pca::FactorRule;
use latent_dr::matching::MetricKind;
use latent_dr::regression::{NuisanceOptions, OutcomeBackend, PropensityBackend, RegressionOptions};
use latent_dr::simulation::{Backend, KRule, Model};
use latent_dr::tuning::BiasProxy;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Every random choice in a run is seeded from `seed` through these stream labels.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const SOLVER: u64 = 2;
    pub const FOLDS: u64 = 3;
    pub const BOOTSTRAP: u64 = 4;
    pub const HIGH_RANK: u64 = 5;
    pub const SIMULATION: u64 = 6;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Parent of the timestamped result directory when `--out` is absent.
    #[serde(default)]
    pub output_root: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub step1: Step1Config,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default)]
    pub estimands: Vec<EstimandSpec>,
    #[serde(default)]
    pub effects: Vec<EffectSpec>,
    #[serde(default)]
    pub cdf: Option<CdfConfig>,
    #[serde(default)]
    pub high_rank: Option<HighRankConfig>,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub simulate: Vec<SimulateConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths are resolved against the config file's directory.
    pub path: PathBuf,
    pub schema: Schema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitChoice {
    #[default]
    None,
    ContiguousHalves,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Dense,
    #[default]
    Lanczos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSpec {
    Literal(usize),
    Rule(KRuleSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum KRuleSpec {
    /// `round(c * n^exponent)`
    Power { c: f64, exponent: f64 },
    Cv {
        #[serde(default)]
        grid: Option<Vec<usize>>,
        #[serde(default = "default_folds")]
        folds: usize,
        #[serde(default)]
        level: usize,
        #[serde(default = "one")]
        d_alpha: usize,
        #[serde(default = "one")]
        m: usize,
    },
    Dpi {
        c: f64,
        exponent: f64,
        #[serde(default)]
        level: usize,
        #[serde(default = "one")]
        d_alpha: usize,
        #[serde(default = "two")]
        m: usize,
        #[serde(default)]
        proxy: BiasProxy,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DLambdaSpec {
    Literal(usize),
    Rule(FactorRule),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step1Config {
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default)]
    pub split: SplitChoice,
    #[serde(default = "default_k")]
    pub k: KSpec,
    #[serde(default = "default_d_lambda")]
    pub d_lambda: DLambdaSpec,
    /// Upper bound on automatically selected local factors.
    #[serde(default = "default_max_factors")]
    pub max_factors: usize,
    #[serde(default)]
    pub solver: SolverChoice,
}

impl Default for Step1Config {
    fn default() -> Self {
        Self {
            metric: default_metric(),
            split: SplitChoice::None,
            k: default_k(),
            d_lambda: default_d_lambda(),
            max_factors: default_max_factors(),
            solver: SolverChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    #[serde(default = "default_outcome")]
    pub outcome: OutcomeBackend,
    #[serde(default = "default_propensity")]
    pub propensity: PropensityBackend,
    #[serde(default = "default_clip")]
    pub p_clip: f64,
    #[serde(default)]
    pub add_intercept: bool,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            outcome: default_outcome(),
            propensity: default_propensity(),
            p_clip: default_clip(),
            add_intercept: false,
            max_iter: default_max_iter(),
            tol: default_tol(),
        }
    }
}

impl NuisanceConfig {
    pub fn options(&self) -> NuisanceOptions {
        NuisanceOptions {
            outcome: self.outcome,
            propensity: self.propensity,
            regression: self.regression(),
        }
    }

    pub fn regression(&self) -> RegressionOptions {
        RegressionOptions {
            add_intercept: self.add_intercept,
            p_clip: self.p_clip,
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

/// `E[y(j) | s = j_prime]`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimandSpec {
    pub j: usize,
    pub j_prime: usize,
}

/// `E[y(j_a) | s = j_prime] - E[y(j_b) | s = j_prime]`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub j_a: usize,
    pub j_b: usize,
    pub j_prime: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdfConfig {
    #[serde(default)]
    pub grid: TauGrid,
    pub pairs: Vec<EstimandSpec>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    /// Tests of `F_a <= F_b` by index into `pairs`; need `bootstrap`.
    #[serde(default)]
    pub sd_tests: Vec<SdTestSpec>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub weights: WeightDist,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdTestSpec {
    pub a: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighRankConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub k: usize,
    pub d_lambda_w: usize,
    pub d_lambda_x: usize,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Leading eigenvalues kept per neighborhood.
    #[serde(default = "default_eigenvalues")]
    pub eigenvalues: usize,
    #[serde(default = "default_ratio")]
    pub ratio_threshold: f64,
    #[serde(default = "yes")]
    pub by_treatment: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            eigenvalues: default_eigenvalues(),
            ratio_threshold: default_ratio(),
            by_treatment: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: Model,
    pub n: usize,
    pub t: usize,
    pub reps: usize,
    pub backend: Backend,
    pub k_rule: KRule,
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default)]
    pub solver: SolverChoice,
    /// Defaults to a stream of the run seed, distinct per entry.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_metric() -> MetricKind {
    MetricKind::PseudoMax
}
fn default_k() -> KSpec {
    KSpec::Rule(KRuleSpec::Power { c: 1.0, exponent: 0.8 })
}
fn default_d_lambda() -> DLambdaSpec {
    DLambdaSpec::Literal(1)
}
fn default_max_factors() -> usize {
    10
}
fn default_folds() -> usize {
    5
}
fn default_outcome() -> OutcomeBackend {
    OutcomeBackend::LocalLs
}
fn default_propensity() -> PropensityBackend {
    PropensityBackend::LocalLs
}
fn default_clip() -> f64 {
    0.01
}
fn default_max_iter() -> usize {
    100
}
fn default_tol() -> f64 {
    1e-8
}
fn default_draws() -> usize {
    1000
}
fn default_eigenvalues() -> usize {
    10
}
fn default_ratio() -> f64 {
    5.0
}
fn one() -> usize {
    1
}
fn two() -> usize {
    2
}
fn yes() -> bool {
    true
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Failure::Data(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(data) = &mut cfg.data {
            if data.path.is_relative() {
                data.path = base.join(&data.path);
            }
        }
        if let Some(root) = &mut cfg.output_root {
            if root.is_relative() {
                *root = base.join(&*root);
            }
        }
        Ok(cfg)
    }

    pub fn data(&self) -> Result<&DataConfig, Failure> {
        self.data
            .as_ref()
            .ok_or_else(|| Failure::Data("this command needs a [data] section".into()))
    }

    pub fn high_rank(&self) -> Option<&HighRankConfig> {
        self.high_rank.as_ref().filter(|h| h.enabled)
    }
}
