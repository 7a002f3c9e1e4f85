//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line
//! to stderr (outside the test harness capture) before asserting.

use std::f64::consts::PI;
use std::io::Write;

use latent_dr::data::{make_row_split, MeasurementPanel, SplitScheme, TreatmentSample};
use latent_dr::estimators::{
    cdf_from_fits, counterfactual_cdf, dr_counterfactual_mean, dr_variance, multiplier_bootstrap, sd_test,
    treatment_effect, DrEstimate, WeightDist,
};
use latent_dr::highrank::{partial_out_high_rank, HighRankSettings};
use latent_dr::linalg::EigenSolver;
use latent_dr::local_pca::{common_component, local_pca, local_pca_all, LocalFactorFit};
use latent_dr::matching::{knn, knn_from_distances, pairwise_distances, DistanceMetric, MetricKind, Neighborhood};
use latent_dr::pipeline::{extract_latent, Step1Settings};
use latent_dr::regression::{fit_nuisances, NuisanceFits, NuisanceOptions, OutcomeBackend, PropensityBackend};
use latent_dr::simulation::{
    generate, propensity, run_monte_carlo, true_theta_01, Backend, DgpSpec, EstimatorConfig, KRule, McReport, Model,
};
use latent_dr::tuning::{dpi_formula, dpi_k, BiasProxy, PilotSettings};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn report(criterion: u32, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion}: {status} ({detail})");
}

fn detail(criterion: u32, line: &str) {
    let _ = writeln!(std::io::stderr().lock(), "criterion {criterion}:   {line}");
}

fn mean_influence(est: &DrEstimate) -> f64 {
    est.influence.iter().sum::<f64>() / est.n() as f64
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    (m, var.sqrt())
}

fn mc_ok(r: &McReport) -> bool {
    (0.92..=0.975).contains(&r.cr) && r.bias.abs() <= 0.5 * r.sd && r.failures == 0 && r.max_mean_influence <= 1e-10
}

#[test]
fn criterion_1_monte_carlo_coverage() {
    let configs = [
        (Backend::LocalConstant, 2.0 / 3.0),
        (Backend::LocalLinear, 4.0 / 5.0),
    ];
    let mut all = true;
    for model in [Model::Model1, Model::Model2] {
        for (backend, exponent) in configs {
            let spec = DgpSpec { model, n: 500, t: 500, seed: 0, noiseless: false };
            let cfg = EstimatorConfig::new(backend, KRule::Power { c: 1.0, exponent });
            let r = run_monte_carlo(&spec, &cfg, 1000, 20_240_101).unwrap();
            let ok = mc_ok(&r);
            all &= ok;
            detail(
                1,
                &format!(
                    "{} {:?} K={}: BIAS {:.4} SD {:.4} RMSE {:.4} CR {:.3} AL {:.4} failures {} max|mean phi| {:.1e} -> {}",
                    r.model,
                    backend,
                    r.mean_k,
                    r.bias,
                    r.sd,
                    r.rmse,
                    r.cr,
                    r.al,
                    r.failures,
                    r.max_mean_influence,
                    if ok { "ok" } else { "out of window" }
                ),
            );
        }
    }
    report(1, all, "CR in [0.92, 0.975], |BIAS| <= 0.5 SD, no failures; 4 configurations x 1000 reps");
    assert!(all);
}

fn simulation_grid() -> Vec<EstimatorConfig> {
    let mut grid = Vec::new();
    for c in [0.5, 1.0, 1.5] {
        grid.push(EstimatorConfig::new(Backend::LocalLinear, KRule::Power { c, exponent: 0.8 }));
    }
    grid.push(EstimatorConfig::new(Backend::LocalLinear, KRule::Dpi { c: 1.5, exponent: 0.8 }));
    for c in [0.5, 1.0, 1.5] {
        grid.push(EstimatorConfig::new(Backend::LocalConstant, KRule::Power { c, exponent: 2.0 / 3.0 }));
    }
    grid.push(EstimatorConfig::new(Backend::LocalConstant, KRule::Dpi { c: 1.5, exponent: 2.0 / 3.0 }));
    grid
}

#[test]
fn criterion_2_simulation_grid() {
    let long = std::env::var("LATENT_DR_LONG").is_ok_and(|v| v == "1");
    let (n, reps) = if long { (1000, 5000) } else { (80, 3) };
    let mut all = true;
    for model in [Model::Model1, Model::Model2] {
        for cfg in simulation_grid() {
            let spec = DgpSpec { model, n, t: n, seed: 0, noiseless: false };
            let r = run_monte_carlo(&spec, &cfg, reps, 7).unwrap();
            let ok = r.failures == 0
                && r.n_reps == reps
                && (r.rmse.powi(2) - r.bias.powi(2) - r.sd.powi(2)).abs() < 1e-10
                && r.max_mean_influence <= 1e-10
                && (!long || mc_ok(&r));
            all &= ok;
            detail(2, &r.csv_row());
        }
    }
    let what = if long {
        "full grid at n=T=1000, 5000 reps"
    } else {
        "grid smoke run at n=T=80; set LATENT_DR_LONG=1 for the 5000-rep run at n=T=1000"
    };
    report(2, all, what);
    assert!(all);
}

fn triple_loop_pseudo_max(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let (t, n) = (x.nrows(), x.ncols());
    let mut best = 0.0f64;
    for l in 0..n {
        if l == i || l == j {
            continue;
        }
        let mut s = 0.0;
        for r in 0..t {
            s += (x[(r, i)] - x[(r, j)]) * x[(r, l)];
        }
        best = best.max((s / t as f64).abs());
    }
    best
}

fn triple_loop_euclidean(x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for r in 0..x.nrows() {
        s += (x[(r, i)] - x[(r, j)]).powi(2);
    }
    (s / x.nrows() as f64).sqrt()
}

fn random_nuisance(n: usize, levels: usize, rng: &mut ChaCha8Rng) -> (TreatmentSample, NuisanceFits) {
    let s: Vec<usize> = (0..n).map(|i| if i < levels { i } else { rng.random_range(0..levels) }).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
    let sample = TreatmentSample::without_controls(y, s, levels).unwrap();
    let mut nuis = NuisanceFits::empty(&sample);
    for j in 0..levels {
        let vs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        nuis.set_level(j, vs, p).unwrap();
    }
    (sample, nuis)
}

#[test]
fn criterion_3_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_dr = 0.0f64;
    let mut worst_phi = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=50);
        let levels = rng.random_range(2..4);
        let (sample, nuis) = random_nuisance(n, levels, &mut rng);
        let (y, s) = (sample.y(), sample.s());
        for j in 0..levels {
            for jp in 0..levels {
                let vs = nuis.varsigma(j).unwrap();
                let (pj, pjp) = (nuis.p(j).unwrap(), nuis.p(jp).unwrap());
                let pbar = s.iter().filter(|&&v| v == jp).count() as f64 / n as f64;
                let d = |i: usize, l: usize| if s[i] == l { 1.0 } else { 0.0 };
                let theta = (0..n)
                    .map(|i| d(i, jp) * vs[i] / pbar + (pjp[i] / pbar) * d(i, j) * (y[i] - vs[i]) / pj[i])
                    .sum::<f64>()
                    / n as f64;
                let var = (0..n)
                    .map(|i| {
                        d(i, jp) * (vs[i] - theta).powi(2) / pbar.powi(2)
                            + pjp[i].powi(2) * d(i, j) * (y[i] - vs[i]).powi(2) / (pbar.powi(2) * pj[i].powi(2))
                    })
                    .sum::<f64>()
                    / n as f64;
                let est = dr_counterfactual_mean(&sample, &nuis, j, jp).unwrap();
                let v = dr_variance(&sample, &nuis, est.theta, j, jp).unwrap();
                worst_dr = worst_dr
                    .max((est.theta - theta).abs() / (1.0 + theta.abs()))
                    .max((v - var).abs() / (1.0 + var));
                worst_phi = worst_phi.max(mean_influence(&est).abs());
            }
        }
    }
    let dr_ok = worst_dr <= 1e-12 && worst_phi <= 1e-10;
    detail(3, &format!("DR mean/variance worst relative error {worst_dr:.2e} over 100 fixtures"));

    let mut knn_ok = true;
    let mut worst_metric = 0.0f64;
    for inst in 0..100 {
        let t = rng.random_range(1..12);
        let n = rng.random_range(3..40);
        // coarse values force distance ties
        let x = DMatrix::from_fn(t, n, |_, _| (rng.random_range(-4..5) as f64) * 0.5);
        let metric = if inst % 2 == 0 { DistanceMetric::euclidean() } else { DistanceMetric::pseudo_max() };
        let d = pairwise_distances(&x, &metric).unwrap();
        let k = rng.random_range(1..=n);
        let nb = knn_from_distances(&d, k).unwrap();
        for (i, b) in nb.iter().enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &c| {
                let da = if a == i { f64::NEG_INFINITY } else { d.get(i, a) };
                let dc = if c == i { f64::NEG_INFINITY } else { d.get(i, c) };
                da.total_cmp(&dc).then(a.cmp(&c))
            });
            let mut members = order[..k].to_vec();
            members.sort_unstable();
            knn_ok &= b.members == members;
        }
        let x = DMatrix::from_fn(t, n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let de = pairwise_distances(&x, &DistanceMetric::euclidean()).unwrap();
        let dp = pairwise_distances(&x, &DistanceMetric::pseudo_max()).unwrap();
        for i in 0..n {
            for j in 0..n {
                worst_metric = worst_metric
                    .max((de.get(i, j) - triple_loop_euclidean(&x, i, j)).abs())
                    .max((dp.get(i, j) - triple_loop_pseudo_max(&x, i, j)).abs());
            }
        }
    }
    let metric_ok = worst_metric <= 1e-14;
    detail(3, &format!("KNN vs full sort on 100 instances: {}", if knn_ok { "identical" } else { "MISMATCH" }));
    detail(3, &format!("metrics vs triple loops worst abs error {worst_metric:.2e}"));
    let all = dr_ok && knn_ok && metric_ok;
    report(3, all, "DR, KNN and distance oracles");
    assert!(all);
}

fn contract_error(fit: &LocalFactorFit, t: usize) -> f64 {
    let d = fit.d_lambda();
    let ftf = fit.factors.tr_mul(&fit.factors) / t as f64;
    let ll = fit.loadings.tr_mul(&fit.loadings) / fit.k() as f64;
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((ftf[(a, b)] - target).abs());
            if a != b {
                worst = worst.max(ll[(a, b)].abs() / ll[(a, a)].max(ll[(b, b)]).max(1.0));
            } else {
                worst = worst.max((ll[(a, a)] - fit.eigenvalues[a]).abs() / fit.eigenvalues[a].max(1.0));
            }
        }
    }
    worst
}

#[test]
fn criterion_4_local_pca_contracts() {
    let (t, n) = (80, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let v: Vec<f64> = (0..t).map(|_| rng.random()).collect();
    let x = DMatrix::from_fn(t, n, |r, c| (PI * (a[c] + v[r])).sin() + 0.5 * rng.sample::<f64, _>(StandardNormal));
    let nb = knn(&x, 60, &DistanceMetric::pseudo_max()).unwrap();
    let mut worst = 0.0f64;
    for solver in [EigenSolver::Dense, EigenSolver::Lanczos { seed: 1 }] {
        let fits = local_pca_all(&x, &nb, 3, solver).unwrap();
        assert_eq!(fits.len(), 1000);
        for fit in &fits {
            worst = worst.max(contract_error(fit, t));
        }
    }
    detail(4, &format!("1000-neighborhood stress run, worst normalization error {worst:.2e}"));

    let mut worst_rank = 0.0f64;
    for (t, n, r) in [(30, 50, 2), (60, 40, 3), (10, 80, 4), (200, 150, 5)] {
        let f = DMatrix::from_fn(t, r, |_, _| rng.random::<f64>() - 0.5);
        let l = DMatrix::from_fn(n, r, |_, _| rng.random::<f64>() * 2.0);
        let x = f * l.transpose();
        let all = Neighborhood { center: 0, members: (0..n).collect(), radius: 0.0, normalized_discrepancy: 0.0 };
        for solver in [EigenSolver::Dense, EigenSolver::Lanczos { seed: 2 }] {
            let fit = local_pca(&x, &all, r, solver).unwrap();
            worst_rank = worst_rank.max((&x - common_component(&fit)).abs().max());
        }
    }
    detail(4, &format!("noiseless rank-r recovery worst abs error {worst_rank:.2e}"));

    let mut worst_restart = 0.0f64;
    for c in (0..1000).step_by(37) {
        let base = common_component(&local_pca(&x, &nb[c], 3, EigenSolver::Dense).unwrap());
        for seed in [11u64, 12, 13] {
            let other = common_component(&local_pca(&x, &nb[c], 3, EigenSolver::Lanczos { seed }).unwrap());
            worst_restart = worst_restart.max((&base - other).abs().max() / (1.0 + base.abs().max()));
        }
    }
    detail(4, &format!("common component across solver restarts worst relative change {worst_restart:.2e}"));
    let all = worst <= 1e-8 && worst_rank <= 1e-8 && worst_restart <= 1e-8;
    report(4, all, "normalization, rank recovery and restart invariance");
    assert!(all);
}

#[test]
fn criterion_5_double_robustness() {
    let truth = true_theta_01();
    let (mut outcome_bad, mut prop_bad, mut both_bad) = (Vec::new(), Vec::new(), Vec::new());
    let mut worst_phi = 0.0f64;
    for seed in 0..50u64 {
        let sim = generate(&DgpSpec { model: Model::Model1, n: 5000, t: 2, seed: 500 + seed, noiseless: false }).unwrap();
        let oracle = sim.oracle_nuisance().unwrap();
        let vs0 = oracle.varsigma(0).unwrap().to_vec();
        let vs1 = oracle.varsigma(1).unwrap().to_vec();
        // bounded corruptions: a unit shift of the outcome mean, a wrong but overlapping propensity
        let vs0_bad: Vec<f64> = vs0.iter().map(|v| v + 1.0).collect();
        let p1_bad: Vec<f64> = sim.alpha.iter().map(|a| 0.2 + 0.6 * a).collect();
        let p0_bad: Vec<f64> = p1_bad.iter().map(|p| 1.0 - p).collect();
        let p1: Vec<f64> = sim.alpha.iter().map(|&a| propensity(a)).collect();
        let p0: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
        let run = |vs: &[f64], q0: &[f64], q1: &[f64]| {
            let mut nuis = NuisanceFits::empty(&sim.sample);
            nuis.set_level(0, vs.to_vec(), q0.to_vec()).unwrap();
            nuis.set_level(1, vs1.clone(), q1.to_vec()).unwrap();
            dr_counterfactual_mean(&sim.sample, &nuis, 0, 1).unwrap()
        };
        for (vs, q0, q1, sink) in [
            (&vs0_bad, &p0, &p1, &mut outcome_bad),
            (&vs0, &p0_bad, &p1_bad, &mut prop_bad),
            (&vs0_bad, &p0_bad, &p1_bad, &mut both_bad),
        ] {
            let est = run(vs, q0, q1);
            worst_phi = worst_phi.max(mean_influence(&est).abs());
            sink.push(est.theta);
        }
    }
    let mut all = worst_phi <= 1e-10;
    for (label, v, expect_close) in [
        ("outcome corrupted", &outcome_bad, true),
        ("propensity corrupted", &prop_bad, true),
        ("both corrupted", &both_bad, false),
    ] {
        let (m, sd) = mean_sd(v);
        let se = sd / (v.len() as f64).sqrt();
        let close = (m - truth).abs() <= 2.0 * se;
        all &= close == expect_close;
        detail(5, &format!("{label}: mean error {:.4} vs 2 MC SE {:.4}", m - truth, 2.0 * se));
    }
    report(5, all, "one corrupted nuisance stays within 2 MC SE, both do not");
    assert!(all);
}

#[test]
fn criterion_6_influence_mean_zero() {
    let mut estimates: Vec<DrEstimate> = Vec::new();
    let mut cdf_means: Vec<f64> = Vec::new();
    for model in [Model::Model1, Model::Model2] {
        let sim = generate(&DgpSpec { model, n: 300, t: 120, seed: 6, noiseless: false }).unwrap();
        for (split, d_lambda, outcome, prop) in [
            (None, 0, OutcomeBackend::LocalAverage, PropensityBackend::LocalAverage),
            (Some(SplitScheme::ContiguousHalves), 2, OutcomeBackend::LocalLs, PropensityBackend::LocalLs),
            (Some(SplitScheme::Random { seed: 2 }), 2, OutcomeBackend::LocalLs, PropensityBackend::LocalLogit),
        ] {
            let step1 = Step1Settings {
                metric: MetricKind::PseudoMax,
                split,
                k: 60,
                d_lambda,
                solver: EigenSolver::default(),
                high_rank: None,
            };
            let lat = extract_latent(&sim.panel, &step1).unwrap();
            let opts = NuisanceOptions { outcome, propensity: prop, ..Default::default() };
            let nuis = fit_nuisances(&sim.sample, &lat.neighborhoods, lat.fits(), &[0, 1], &opts).unwrap();
            let mut local = Vec::new();
            for (j, jp) in [(0, 1), (1, 1), (0, 0), (1, 0)] {
                local.push(dr_counterfactual_mean(&sim.sample, &nuis, j, jp).unwrap());
            }
            estimates.push(treatment_effect(&local[1], &local[0]).unwrap());
            estimates.extend(local);
            let grid = [-1.0, 0.0, 0.5, 1.0, 2.0, 3.0];
            let cdf = counterfactual_cdf(&sim.sample, &lat.neighborhoods, lat.fits(), 0, 1, &grid, &opts).unwrap();
            for k in 0..grid.len() {
                cdf_means.push(cdf.influence_of_tau.column(k).sum() / cdf.n() as f64);
            }
        }
        for backend in [Backend::Oracle, Backend::LocalConstant, Backend::LocalLinear] {
            let cfg = EstimatorConfig::new(backend, KRule::Power { c: 1.0, exponent: 0.7 });
            estimates.push(cfg.estimate(&sim).unwrap().0);
        }
    }
    let worst = estimates
        .iter()
        .map(|e| mean_influence(e).abs())
        .chain(cdf_means.iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    detail(
        6,
        &format!("{} point estimates and {} CDF points, worst |mean phi| {worst:.2e}", estimates.len(), cdf_means.len()),
    );
    detail(6, "criteria 1, 2, 3 and 5 also check every estimate they produce");
    let all = worst <= 1e-10;
    report(6, all, "mean influence function is zero");
    assert!(all);
}

#[test]
fn criterion_7_uniform_inference() {
    let mut all = true;
    let mut runs = 0;
    for seed in 0..20u64 {
        let sim = generate(&DgpSpec { model: Model::Model2, n: 200, t: 80, seed: 70 + seed, noiseless: false }).unwrap();
        let lat = extract_latent(
            &sim.panel,
            &Step1Settings {
                metric: MetricKind::PseudoMax,
                split: None,
                k: 40,
                d_lambda: 0,
                solver: EigenSolver::Dense,
                high_rank: None,
            },
        )
        .unwrap();
        let opts = NuisanceOptions {
            outcome: OutcomeBackend::LocalAverage,
            propensity: PropensityBackend::LocalAverage,
            ..Default::default()
        };
        let grid: Vec<f64> = (0..15).map(|k| -1.0 + 0.35 * k as f64).collect();
        let c01 = counterfactual_cdf(&sim.sample, &lat.neighborhoods, None, 0, 1, &grid, &opts).unwrap();
        let c11 = counterfactual_cdf(&sim.sample, &lat.neighborhoods, None, 1, 1, &grid, &opts).unwrap();
        for c in [&c01, &c11] {
            runs += 1;
            all &= c.theta_of_tau.windows(2).all(|w| w[0] <= w[1]);
            all &= c.theta_of_tau.iter().all(|v| (0.0..=1.0).contains(v));
        }
        let same = sd_test(&c01, &c01, 200, WeightDist::Rademacher, seed).unwrap();
        all &= same.statistic == 0.0 && !same.reject;
        // pointwise dominated fixture
        let mut above = c01.clone();
        for v in &mut above.theta_of_tau {
            *v = (*v + 0.05).min(1.0);
        }
        let dom = sd_test(&c01, &above, 200, WeightDist::Mammen, seed).unwrap();
        all &= dom.statistic == 0.0;
        for dist in [WeightDist::Rademacher, WeightDist::Mammen, WeightDist::Gaussian] {
            let a = multiplier_bootstrap(&c01.influence_of_tau, 250, dist, 99 + seed).unwrap();
            let b = multiplier_bootstrap(&c01.influence_of_tau, 250, dist, 99 + seed).unwrap();
            all &= a.sup_stats.iter().zip(&b.sup_stats).all(|(x, y)| x.to_bits() == y.to_bits());
            all &= a.critical_value.to_bits() == b.critical_value.to_bits();
        }
        let t1 = sd_test(&c11, &c01, 300, WeightDist::Rademacher, 5).unwrap();
        let t2 = sd_test(&c11, &c01, 300, WeightDist::Rademacher, 5).unwrap();
        all &= t1.statistic.to_bits() == t2.statistic.to_bits() && t1.critical_value.to_bits() == t2.critical_value.to_bits();
    }
    // raw curves outside [0, 1] or decreasing are repaired
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sample = TreatmentSample::without_controls(
        (0..30).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
        (0..30).map(|i| i % 2).collect(),
        2,
    )
    .unwrap();
    let grid: Vec<f64> = (0..8).map(|k| -2.0 + 0.5 * k as f64).collect();
    let p: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..0.9)).collect();
    let vs: Vec<Vec<f64>> = grid.iter().map(|_| (0..30).map(|_| rng.random::<f64>() * 1.8 - 0.4).collect()).collect();
    let q: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    let noisy = cdf_from_fits(&sample, &q, &p, &vs, &grid, 0, 1).unwrap();
    runs += 1;
    all &= noisy.theta_of_tau.windows(2).all(|w| w[0] <= w[1]);
    all &= noisy.theta_of_tau.iter().all(|v| (0.0..=1.0).contains(v));
    detail(7, &format!("{runs} CDF runs monotone and bounded, 20 identical/dominated test pairs, bitwise bootstrap"));
    report(7, all, "stochastic dominance statistic, CDF shape and bootstrap determinism");
    assert!(all);
}

#[test]
fn criterion_8_dpi_arithmetic() {
    let (k, warn) = dpi_formula(3.7, 3.7, 1, 2, 100, 2, 1000);
    let mut all = k == 76 && warn.is_none();
    detail(8, &format!("equal variance and bias, d_alpha=1, m=2, K_ini=100 -> K={k}"));
    let factor = 0.25f64.powf(0.2);
    for k_ini in 2..=1000usize {
        let want = ((factor * k_ini as f64).round() as usize).clamp(2, 1000);
        all &= dpi_formula(2.5, 2.5, 1, 2, k_ini, 2, 1000).0 == want;
    }
    // scaling variance by (2m / d_alpha) makes the ratio one, so K_ini is a fixed point
    for k_ini in [10usize, 76, 144, 500] {
        all &= dpi_formula(4.0 * 1.3, 1.3, 1, 2, k_ini, 2, 1000).0 == k_ini;
        all &= dpi_formula(2.0 * 0.7, 0.7, 2, 2, k_ini, 2, 1000).0 == k_ini;
    }
    let sim = generate(&DgpSpec { model: Model::Model1, n: 200, t: 100, seed: 8, noiseless: false }).unwrap();
    let settings = PilotSettings {
        metric: MetricKind::PseudoMax,
        split: Some(SplitScheme::ContiguousHalves),
        solver: EigenSolver::Dense,
        regression: Default::default(),
    };
    let res = dpi_k(&sim.sample, &sim.panel, 0, 100, 1, 2, BiasProxy::Polynomial, &settings).unwrap();
    all &= (2..=200).contains(&res.k_selected);
    detail(8, &format!("pilot run on simulated data selects K={}", res.k_selected));
    report(8, all, "plug-in arithmetic and fixed point");
    assert!(all);
}

/// Mean over units of the largest latent distance to a matched neighbor.
fn latent_discrepancy(alpha: &DMatrix<f64>, nb: &[Neighborhood]) -> f64 {
    nb.iter()
        .map(|b| {
            b.members
                .iter()
                .map(|&m| (alpha.column(b.center) - alpha.column(m)).norm())
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / nb.len() as f64
}

#[test]
fn criterion_9_matching_improves_with_t() {
    let (n, k, d_alpha) = (200, 10, 2);
    let mut good = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let alpha = DMatrix::from_fn(d_alpha, n, |_, _| rng.random::<f64>());
        let mut disc = Vec::new();
        for t in [50, 500, 2000] {
            let varpi = DMatrix::from_fn(t, d_alpha, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut x = &varpi * &alpha;
            for v in x.iter_mut() {
                *v += rng.sample::<f64, _>(StandardNormal);
            }
            let nb = knn(&x, k, &DistanceMetric::pseudo_max()).unwrap();
            disc.push(latent_discrepancy(&alpha, &nb));
        }
        if disc[0] > disc[1] && disc[1] > disc[2] {
            good += 1;
        }
        if seed == 0 {
            detail(9, &format!("seed 0 discrepancies at T=50/500/2000: {:.4} {:.4} {:.4}", disc[0], disc[1], disc[2]));
        }
    }
    let all = good >= 18;
    report(9, all, &format!("discrepancy strictly decreasing in {good} of 20 seeds"));
    assert!(all);
}

fn high_rank_panel(n: usize, t: usize, theta: f64, seed: u64) -> MeasurementPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let v: Vec<f64> = (0..t).map(|_| rng.random()).collect();
    let w = DMatrix::from_fn(t, n, |r, c| (PI * (a[c] + v[r])).cos() + rng.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(t, n, |r, c| (a[c] - v[r]).powi(2) + theta * w[(r, c)] + rng.sample::<f64, _>(StandardNormal));
    MeasurementPanel::from_matrix(x).unwrap().with_high_rank(vec![w]).unwrap()
}

#[test]
fn criterion_10_high_rank_recovery() {
    // K = n^{4/5}; smaller neighborhoods absorb part of each unit's own noise and shrink the estimate
    let settings = |seed| HighRankSettings {
        split_seed: seed,
        k: 121,
        d_lambda_w: 2,
        d_lambda_x: 3,
        metric: MetricKind::PseudoMax,
        solver: EigenSolver::default(),
    };
    let (mut strong, mut null) = (Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let split = make_row_split(400, SplitScheme::Thirds { seed }).unwrap();
        let adj = partial_out_high_rank(&high_rank_panel(400, 400, 1.5, 1000 + seed), &split, &settings(seed)).unwrap();
        strong.push(adj.theta_hat[0]);
        let adj0 = partial_out_high_rank(&high_rank_panel(400, 400, 0.0, 2000 + seed), &split, &settings(seed)).unwrap();
        null.push(adj0.theta_hat[0]);
    }
    let worst = strong.iter().map(|v| (v - 1.5).abs()).fold(0.0, f64::max);
    let (m0, sd0) = mean_sd(&null);
    let se0 = sd0 / (null.len() as f64).sqrt();
    detail(10, &format!("theta=1.5: worst |error| {worst:.4} over 20 seeds"));
    detail(10, &format!("theta=0: mean {m0:.5}, MC SE {se0:.5}"));
    let all = worst <= 0.1 && m0.abs() <= 3.0 * se0;
    report(10, all, "high-rank coefficient recovery");
    assert!(all);
}
