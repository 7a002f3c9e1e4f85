use std::fmt::Write as _;

use latent_dr::data::{load_dataset, MeasurementPanel, SplitScheme, TreatmentSample};
use latent_dr::estimators::{
    counterfactual_cdf, dr_counterfactual_mean, multiplier_bootstrap, sd_test, treatment_effect, CdfProcess, DrEstimate,
};
use latent_dr::highrank::HighRankSettings;
use latent_dr::linalg::EigenSolver;
use latent_dr::local_pca::{eigen_diagnostics, estimate_num_latent, select_num_factors, FactorRule, LatentCount};
use latent_dr::matching::{matching_diagnostics, Summary};
use latent_dr::pipeline::{check_alignment, extract_latent, Step1Settings};
use latent_dr::regression::fit_selected_nuisances;
use latent_dr::simulation::{run_monte_carlo, DgpSpec, EstimatorConfig, McReport};
use latent_dr::stats::derive_seed;
use latent_dr::tuning::{cross_validate_k, default_cv_grid, dpi_k, PilotSettings, TuningResult};
use serde::Serialize;

use crate::config::{streams, DLambdaSpec, KRuleSpec, KSpec, RunConfig, SolverChoice, SplitChoice};
use crate::output::Outputs;
use crate::Failure;

struct Loaded {
    panel: MeasurementPanel,
    sample: TreatmentSample,
}

fn load(cfg: &RunConfig) -> Result<Loaded, Failure> {
    let data = cfg.data()?;
    let (panel, sample) = load_dataset(&data.path, &data.schema)?;
    check_alignment(&panel, &sample)?;
    if !panel.w().is_empty() && cfg.high_rank().is_none() {
        log::warn!("high-rank covariates are loaded but [high_rank] is absent or disabled");
    }
    Ok(Loaded { panel, sample })
}

fn solver(choice: SolverChoice, seed: u64) -> EigenSolver {
    match choice {
        SolverChoice::Dense => EigenSolver::Dense,
        SolverChoice::Lanczos => EigenSolver::Lanczos {
            seed: derive_seed(seed, streams::SOLVER),
        },
    }
}

fn split_scheme(cfg: &RunConfig) -> Option<SplitScheme> {
    match cfg.step1.split {
        SplitChoice::None => None,
        SplitChoice::ContiguousHalves => Some(SplitScheme::ContiguousHalves),
        SplitChoice::Random => Some(SplitScheme::Random {
            seed: derive_seed(cfg.seed, streams::SPLIT),
        }),
    }
}

fn pilot(cfg: &RunConfig) -> PilotSettings {
    PilotSettings {
        metric: cfg.step1.metric,
        split: split_scheme(cfg),
        solver: solver(cfg.step1.solver, cfg.seed),
        regression: cfg.nuisance.regression(),
    }
}

fn high_rank_settings(cfg: &RunConfig) -> Option<HighRankSettings> {
    cfg.high_rank().map(|h| HighRankSettings {
        split_seed: derive_seed(cfg.seed, streams::HIGH_RANK),
        k: h.k,
        d_lambda_w: h.d_lambda_w,
        d_lambda_x: h.d_lambda_x,
        metric: h.metric,
        solver: solver(cfg.step1.solver, cfg.seed),
    })
}

#[derive(Debug, Clone, Serialize)]
struct KChoice {
    k: usize,
    source: &'static str,
    tuning: Option<TuningResult>,
}

/// Factors used by the cross-validated local fit; automatic rules fall back to a local average.
fn tuning_d_lambda(cfg: &RunConfig) -> usize {
    match cfg.step1.d_lambda {
        DLambdaSpec::Literal(d) => d,
        DLambdaSpec::Rule(FactorRule::FixedOrder { d_alpha, m }) => {
            select_num_factors(FactorRule::FixedOrder { d_alpha, m }, None, cfg.step1.max_factors).unwrap_or(0)
        }
        DLambdaSpec::Rule(FactorRule::BiasMinimizing { .. }) => 0,
    }
}

fn resolve_k(cfg: &RunConfig, data: &Loaded) -> Result<KChoice, Failure> {
    let n = data.sample.n();
    let tuned = matches!(cfg.step1.k, KSpec::Rule(KRuleSpec::Cv { .. } | KRuleSpec::Dpi { .. }));
    if tuned && cfg.high_rank().is_some() {
        return Err(Failure::Data(
            "K must be a literal or a power rule when high-rank covariates are partialled out".into(),
        ));
    }
    let choice = match cfg.step1.k {
        KSpec::Literal(k) => KChoice { k, source: "literal", tuning: None },
        KSpec::Rule(KRuleSpec::Power { c, exponent }) => KChoice {
            k: ((c * (n as f64).powf(exponent)).round() as usize).clamp(1, n),
            source: "power_rule",
            tuning: None,
        },
        KSpec::Rule(KRuleSpec::Cv { ref grid, folds, level, d_alpha, m }) => {
            let grid = grid.clone().unwrap_or_else(|| default_cv_grid(n, m, d_alpha));
            let res = cross_validate_k(
                &data.sample,
                &data.panel,
                level,
                &grid,
                folds,
                derive_seed(cfg.seed, streams::FOLDS),
                tuning_d_lambda(cfg),
                &pilot(cfg),
            )?;
            KChoice { k: res.k_selected, source: "cross_validation", tuning: Some(res) }
        }
        KSpec::Rule(KRuleSpec::Dpi { c, exponent, level, d_alpha, m, proxy }) => {
            let k_ini = ((c * (n as f64).powf(exponent)).round() as usize).clamp(1, n);
            let res = dpi_k(&data.sample, &data.panel, level, k_ini, d_alpha, m, proxy, &pilot(cfg))?;
            KChoice { k: res.k_selected, source: "plug_in", tuning: Some(res) }
        }
    };
    if choice.k == 0 || choice.k > n {
        return Err(Failure::Data(format!("K = {} must lie in 1..={n}", choice.k)));
    }
    Ok(choice)
}

fn step1(cfg: &RunConfig, k: usize, d_lambda: usize) -> Step1Settings {
    Step1Settings {
        metric: cfg.step1.metric,
        split: split_scheme(cfg),
        k,
        d_lambda,
        solver: solver(cfg.step1.solver, cfg.seed),
        high_rank: high_rank_settings(cfg),
    }
}

fn resolve_d_lambda(cfg: &RunConfig, data: &Loaded, k: usize) -> Result<usize, Failure> {
    match cfg.step1.d_lambda {
        DLambdaSpec::Literal(d) => Ok(d),
        DLambdaSpec::Rule(rule @ FactorRule::FixedOrder { .. }) => Ok(select_num_factors(rule, None, cfg.step1.max_factors)?),
        DLambdaSpec::Rule(rule @ FactorRule::BiasMinimizing { .. }) => {
            let lat = extract_latent(&data.panel, &step1(cfg, k, 0))?;
            let rows = lat.pca_rows();
            let q = cfg.step1.max_factors.min(k).min(rows.nrows());
            let diag = eigen_diagnostics(&rows, &lat.neighborhoods, q, solver(cfg.step1.solver, cfg.seed))?;
            Ok(select_num_factors(rule, Some(&diag), q)?)
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimateRow {
    kind: &'static str,
    name: Option<String>,
    j: usize,
    j_b: Option<usize>,
    j_prime: usize,
    theta: f64,
    sigma: f64,
    std_error: f64,
    ci_low: f64,
    ci_high: f64,
    warnings: Vec<String>,
}

impl EstimateRow {
    fn new(kind: &'static str, name: Option<String>, j_b: Option<usize>, est: &DrEstimate) -> Self {
        Self {
            kind,
            name,
            j: est.j,
            j_b,
            j_prime: est.j_prime,
            theta: est.theta,
            sigma: est.sigma,
            std_error: est.std_error(),
            ci_low: est.ci_95.0,
            ci_high: est.ci_95.1,
            warnings: est.warnings.clone(),
        }
    }
}

#[derive(Debug, Serialize)]
struct CdfResult {
    j: usize,
    j_prime: usize,
    tau: Vec<f64>,
    theta_raw: Vec<f64>,
    theta: Vec<f64>,
    band_95: Option<Vec<(f64, f64)>>,
    critical_value: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SdResult {
    a: usize,
    b: usize,
    statistic: f64,
    critical_value: f64,
    reject: bool,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    seed: u64,
    n_units: usize,
    n_rows: usize,
    k: KChoice,
    d_lambda: usize,
    high_rank_theta: Option<Vec<f64>>,
    fallback_fits: usize,
    estimates: Vec<EstimateRow>,
    cdf: Vec<CdfResult>,
    sd_tests: Vec<SdResult>,
}

fn required_levels(cfg: &RunConfig) -> (Vec<usize>, Vec<usize>) {
    let mut outcome = Vec::new();
    let mut propensity = Vec::new();
    let pairs = cfg
        .estimands
        .iter()
        .map(|e| (e.j, e.j_prime))
        .chain(cfg.effects.iter().flat_map(|e| [(e.j_a, e.j_prime), (e.j_b, e.j_prime)]));
    for (j, jp) in pairs {
        outcome.push(j);
        propensity.extend([j, jp]);
    }
    for v in [&mut outcome, &mut propensity] {
        v.sort_unstable();
        v.dedup();
    }
    (outcome, propensity)
}

fn check_levels(cfg: &RunConfig, sample: &TreatmentSample) -> Result<(), Failure> {
    let (outcome, propensity) = required_levels(cfg);
    sample.require_levels(&outcome)?;
    sample.require_levels(&propensity)?;
    if let Some(cdf) = &cfg.cdf {
        for p in &cdf.pairs {
            sample.require_levels(&[p.j, p.j_prime])?;
        }
        for t in &cdf.sd_tests {
            if t.a >= cdf.pairs.len() || t.b >= cdf.pairs.len() {
                return Err(Failure::Data(format!("sd test ({}, {}) refers to a missing CDF pair", t.a, t.b)));
            }
        }
        if !cdf.sd_tests.is_empty() && cdf.bootstrap.is_none() {
            return Err(Failure::Data("sd tests need a [cdf.bootstrap] section".into()));
        }
    }
    if cfg.estimands.is_empty() && cfg.effects.is_empty() && cfg.cdf.is_none() {
        return Err(Failure::Data("nothing to estimate: add estimands, effects or a [cdf] section".into()));
    }
    Ok(())
}

pub fn estimate(cfg: &RunConfig) -> Result<Outputs, Failure> {
    let data = load(cfg)?;
    check_levels(cfg, &data.sample)?;
    let k = resolve_k(cfg, &data)?;
    let d_lambda = resolve_d_lambda(cfg, &data, k.k)?;
    let lat = extract_latent(&data.panel, &step1(cfg, k.k, d_lambda))?;
    let opts = cfg.nuisance.options();
    let (outcome_levels, propensity_levels) = required_levels(cfg);
    let nuis = fit_selected_nuisances(&data.sample, &lat.neighborhoods, lat.fits(), &outcome_levels, &propensity_levels, &opts)?;

    let mut rows = Vec::new();
    for e in &cfg.estimands {
        let est = dr_counterfactual_mean(&data.sample, &nuis, e.j, e.j_prime)?;
        rows.push(EstimateRow::new("mean", None, None, &est));
    }
    for e in &cfg.effects {
        let a = dr_counterfactual_mean(&data.sample, &nuis, e.j_a, e.j_prime)?;
        let b = dr_counterfactual_mean(&data.sample, &nuis, e.j_b, e.j_prime)?;
        let c = treatment_effect(&a, &b)?;
        rows.push(EstimateRow::new("effect", e.name.clone(), Some(e.j_b), &c));
    }

    let mut cdfs: Vec<CdfResult> = Vec::new();
    let mut sd_tests = Vec::new();
    if let Some(cc) = &cfg.cdf {
        let grid = cc.grid.resolve(data.sample.y())?;
        let mut processes: Vec<CdfProcess> = Vec::new();
        for (idx, p) in cc.pairs.iter().enumerate() {
            let mut proc_ = counterfactual_cdf(&data.sample, &lat.neighborhoods, lat.fits(), p.j, p.j_prime, &grid, &opts)?;
            let mut critical = None;
            if let Some(b) = &cc.bootstrap {
                let seed = derive_seed(derive_seed(cfg.seed, streams::BOOTSTRAP), idx as u64);
                let draws = multiplier_bootstrap(&proc_.influence_of_tau, b.draws, b.weights, seed)?;
                critical = Some(draws.critical_value);
                proc_ = proc_.with_band(&draws);
            }
            cdfs.push(CdfResult {
                j: p.j,
                j_prime: p.j_prime,
                tau: proc_.tau_grid.clone(),
                theta_raw: proc_.theta_raw.clone(),
                theta: proc_.theta_of_tau.clone(),
                band_95: proc_.band_95.clone(),
                critical_value: critical,
            });
            processes.push(proc_);
        }
        if let Some(b) = &cc.bootstrap {
            for (idx, t) in cc.sd_tests.iter().enumerate() {
                let seed = derive_seed(derive_seed(cfg.seed, streams::BOOTSTRAP), (cc.pairs.len() + idx) as u64);
                let r = sd_test(&processes[t.a], &processes[t.b], b.draws, b.weights, seed)?;
                sd_tests.push(SdResult {
                    a: t.a,
                    b: t.b,
                    statistic: r.statistic,
                    critical_value: r.critical_value,
                    reject: r.reject,
                });
            }
        }
    }

    let mut out = Outputs::default();
    out.add("estimates.csv", estimates_csv(&rows));
    if !cdfs.is_empty() {
        out.add("cdf.csv", cdf_csv(&cdfs));
    }
    let report = EstimateReport {
        seed: cfg.seed,
        n_units: data.sample.n(),
        n_rows: data.panel.n_rows(),
        k,
        d_lambda,
        high_rank_theta: lat.high_rank.as_ref().map(|h| h.theta_hat.clone()),
        fallback_fits: nuis.fallback_count(),
        estimates: rows,
        cdf: cdfs,
        sd_tests,
    };
    out.add_json("results.json", &report)?;
    Ok(out)
}

fn estimates_csv(rows: &[EstimateRow]) -> String {
    let mut s = String::from("kind,name,j,j_b,j_prime,theta,std_error,ci_low,ci_high\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.kind,
            r.name.as_deref().unwrap_or(""),
            r.j,
            r.j_b.map(|v| v.to_string()).unwrap_or_default(),
            r.j_prime,
            r.theta,
            r.std_error,
            r.ci_low,
            r.ci_high
        );
    }
    s
}

fn cdf_csv(cdfs: &[CdfResult]) -> String {
    let mut s = String::from("j,j_prime,tau,theta_raw,theta,band_low,band_high\n");
    for c in cdfs {
        for k in 0..c.tau.len() {
            let (lo, hi) = match &c.band_95 {
                Some(b) => (b[k].0.to_string(), b[k].1.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(s, "{},{},{},{},{},{},{}", c.j, c.j_prime, c.tau[k], c.theta_raw[k], c.theta[k], lo, hi);
        }
    }
    s
}

pub fn tune(cfg: &RunConfig) -> Result<Outputs, Failure> {
    if !matches!(cfg.step1.k, KSpec::Rule(KRuleSpec::Cv { .. } | KRuleSpec::Dpi { .. })) {
        return Err(Failure::Data("tune needs step1.k to be a cv or dpi rule".into()));
    }
    let data = load(cfg)?;
    let choice = resolve_k(cfg, &data)?;
    let mut out = Outputs::default();
    if let Some(t) = &choice.tuning {
        if !t.criterion_curve.is_empty() {
            let mut s = String::from("K,criterion\n");
            for (k, v) in &t.criterion_curve {
                let _ = writeln!(s, "{k},{v}");
            }
            out.add("cv_curve.csv", s);
        }
    }
    out.add_json("tuning.json", &choice)?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct DiagnoseReport {
    k: KChoice,
    pair_sd: f64,
    degenerate_sd: bool,
    groups: Vec<(Option<usize>, Summary)>,
    pooled_eigenvalues: Vec<f64>,
    latent_count: Option<LatentCount>,
}

pub fn diagnose(cfg: &RunConfig) -> Result<Outputs, Failure> {
    let data = load(cfg)?;
    let k = resolve_k(cfg, &data)?;
    let lat = extract_latent(&data.panel, &step1(cfg, k.k, 0))?;
    let groups = cfg.diagnose.by_treatment.then(|| data.sample.s());
    let md = matching_diagnostics(&lat.neighborhoods, &lat.distances, groups)?;
    let rows = lat.pca_rows();
    let q = cfg.diagnose.eigenvalues.min(k.k).min(rows.nrows());
    let eig = eigen_diagnostics(&rows, &lat.neighborhoods, q, solver(cfg.step1.solver, cfg.seed))?;
    let pooled = eig.pooled();
    let latent_count = if pooled.len() >= 3 {
        Some(estimate_num_latent(&pooled, cfg.diagnose.ratio_threshold)?)
    } else {
        None
    };

    let mut matching = String::from("group,min,q1,median,mean,q3,max,count\n");
    for (g, s) in &md.groups {
        let label = g.map(|v| v.to_string()).unwrap_or_else(|| "all".into());
        let _ = writeln!(matching, "{label},{},{},{},{},{},{},{}", s.min, s.q1, s.median, s.mean, s.q3, s.max, s.count);
    }
    let mut per_unit = String::from("unit,id,level,normalized_discrepancy\n");
    for (i, v) in md.normalized_discrepancy.iter().enumerate() {
        let _ = writeln!(per_unit, "{i},{},{},{v}", data.panel.unit_ids()[i], data.sample.s()[i]);
    }
    let mut scree = String::from("component,eigenvalue,ratio_to_next\n");
    for (c, v) in pooled.iter().enumerate() {
        let ratio = pooled.get(c + 1).map(|next| (v / next).to_string()).unwrap_or_default();
        let _ = writeln!(scree, "{},{v},{ratio}", c + 1);
    }
    let mut by_unit = String::from("unit");
    for c in 0..q {
        let _ = write!(by_unit, ",ev{}", c + 1);
    }
    by_unit.push('\n');
    for (center, ev) in eig.centers.iter().zip(&eig.leading_eigenvalues) {
        let _ = write!(by_unit, "{center}");
        for v in ev {
            let _ = write!(by_unit, ",{v}");
        }
        by_unit.push('\n');
    }

    let mut out = Outputs::default();
    out.add("matching.csv", matching);
    out.add("matching_by_unit.csv", per_unit);
    out.add("scree.csv", scree);
    out.add("scree_by_unit.csv", by_unit);
    out.add_json(
        "diagnostics.json",
        &DiagnoseReport {
            k,
            pair_sd: md.pair_sd,
            degenerate_sd: md.degenerate_sd,
            groups: md.groups,
            pooled_eigenvalues: pooled,
            latent_count,
        },
    )?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SimulationSummary {
    model: String,
    n: usize,
    t: usize,
    estimator: EstimatorConfig,
    seed: u64,
    truth: f64,
    bias: f64,
    sd: f64,
    rmse: f64,
    cr: f64,
    al: f64,
    mean_k: f64,
    reps: usize,
    failures: usize,
}

pub fn simulate(cfg: &RunConfig) -> Result<Outputs, Failure> {
    if cfg.simulate.is_empty() {
        return Err(Failure::Data("simulate needs at least one [[simulate]] entry".into()));
    }
    let mut csv = format!("{}\n", McReport::csv_header());
    let mut summaries = Vec::new();
    for (idx, s) in cfg.simulate.iter().enumerate() {
        let seed = s
            .seed
            .unwrap_or_else(|| derive_seed(derive_seed(cfg.seed, streams::SIMULATION), idx as u64));
        let spec = DgpSpec { model: s.model, n: s.n, t: s.t, seed: 0, noiseless: false };
        let est = EstimatorConfig {
            backend: s.backend,
            k_rule: s.k_rule,
            metric: s.metric,
            solver: solver(s.solver, seed),
        };
        let r = run_monte_carlo(&spec, &est, s.reps, seed)?;
        if r.failures > 0 {
            log::warn!("{} of {} replications failed for simulation entry {idx}", r.failures, s.reps);
        }
        csv.push_str(&r.csv_row());
        csv.push('\n');
        summaries.push(SimulationSummary {
            model: r.model.to_string(),
            n: r.n,
            t: r.t,
            estimator: r.estimator,
            seed,
            truth: r.truth,
            bias: r.bias,
            sd: r.sd,
            rmse: r.rmse,
            cr: r.cr,
            al: r.al,
            mean_k: r.mean_k,
            reps: r.n_reps,
            failures: r.failures,
        });
    }
    let mut out = Outputs::default();
    out.add("simulation.csv", csv);
    out.add_json("simulation.json", &summaries)?;
    Ok(out)
}
