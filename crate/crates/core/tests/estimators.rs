use latent_dr::data::TreatmentSample;
use latent_dr::estimators::{
    cdf_from_fits, dr_counterfactual_mean, dr_variance, multiplier_bootstrap, sd_test, treatment_effect, WeightDist,
};
use latent_dr::regression::NuisanceFits;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    sample: TreatmentSample,
    nuis: NuisanceFits,
}

fn fixture(n: usize, levels: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // every level appears at least once
    let s: Vec<usize> = (0..n).map(|i| if i < levels { i } else { rng.random_range(0..levels) }).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
    let sample = TreatmentSample::without_controls(y, s, levels).unwrap();
    let mut nuis = NuisanceFits::empty(&sample);
    for j in 0..levels {
        let vs: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        nuis.set_level(j, vs, p).unwrap();
    }
    Fixture { sample, nuis }
}

/// Direct summation of the estimator and the two-term variance.
fn oracle(f: &Fixture, j: usize, jp: usize) -> (f64, f64) {
    let (y, s) = (f.sample.y(), f.sample.s());
    let n = y.len();
    let vs = f.nuis.varsigma(j).unwrap();
    let pj = f.nuis.p(j).unwrap();
    let pjp = f.nuis.p(jp).unwrap();
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
    (theta, var)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matches_direct_summation(n in 4usize..=50, levels in 2usize..4, seed in any::<u64>()) {
        let f = fixture(n, levels, seed);
        for j in 0..levels {
            for jp in 0..levels {
                let est = dr_counterfactual_mean(&f.sample, &f.nuis, j, jp).unwrap();
                let (theta, var) = oracle(&f, j, jp);
                prop_assert!((est.theta - theta).abs() <= 1e-12 * (1.0 + theta.abs()));
                let v = dr_variance(&f.sample, &f.nuis, est.theta, j, jp).unwrap();
                prop_assert!((v - var).abs() <= 1e-12 * (1.0 + var));
                prop_assert!((est.sigma * est.sigma - var).abs() <= 1e-12 * (1.0 + var));
                let mean_phi = est.influence.iter().sum::<f64>() / n as f64;
                prop_assert!(mean_phi.abs() <= 1e-10, "mean phi {mean_phi}");
            }
        }
    }

    #[test]
    fn own_level_mean_is_the_sample_mean(n in 4usize..=50, seed in any::<u64>()) {
        let f = fixture(n, 2, seed);
        for j in 0..2 {
            let est = dr_counterfactual_mean(&f.sample, &f.nuis, j, j).unwrap();
            let ys: Vec<f64> = f.sample.y().iter().zip(f.sample.s()).filter(|(_, &s)| s == j).map(|(y, _)| *y).collect();
            let mean = ys.iter().sum::<f64>() / ys.len() as f64;
            prop_assert!((est.theta - mean).abs() <= 1e-12 * (1.0 + mean.abs()));
        }
    }

    #[test]
    fn contrast_is_difference_of_means(n in 6usize..=50, seed in any::<u64>()) {
        let f = fixture(n, 3, seed);
        let a = dr_counterfactual_mean(&f.sample, &f.nuis, 0, 2).unwrap();
        let b = dr_counterfactual_mean(&f.sample, &f.nuis, 1, 2).unwrap();
        let c = treatment_effect(&a, &b).unwrap();
        prop_assert!((c.theta - (a.theta - b.theta)).abs() <= 1e-14 * (1.0 + c.theta.abs()));
        let mean_phi = c.influence.iter().sum::<f64>() / n as f64;
        prop_assert!(mean_phi.abs() <= 1e-10);
        prop_assert!(c.ci_95.0 <= c.theta && c.theta <= c.ci_95.1);
    }

    #[test]
    fn own_level_cdf_is_the_empirical_cdf(n in 5usize..=50, seed in any::<u64>()) {
        let f = fixture(n, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let grid: Vec<f64> = vec![-2.0, -1.0, 0.0, 0.5, 1.5, 2.5];
        let vs: Vec<Vec<f64>> = grid.iter().map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
        let p = f.nuis.p(1).unwrap();
        let cdf = cdf_from_fits(&f.sample, p, p, &vs, &grid, 1, 1).unwrap();
        let ys: Vec<f64> = f.sample.y().iter().zip(f.sample.s()).filter(|(_, &s)| s == 1).map(|(y, _)| *y).collect();
        for (k, &tau) in grid.iter().enumerate() {
            let ecdf = ys.iter().filter(|&&y| y <= tau).count() as f64 / ys.len() as f64;
            prop_assert!((cdf.theta_raw[k] - ecdf).abs() <= 1e-12);
        }
    }

    #[test]
    fn cdf_output_is_monotone_and_bounded(n in 5usize..=50, seed in any::<u64>()) {
        let f = fixture(n, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let grid: Vec<f64> = (0..9).map(|k| -3.0 + 0.75 * k as f64).collect();
        // deliberately noisy fits so the raw curve can leave [0, 1] or decrease
        let vs: Vec<Vec<f64>> = grid.iter().map(|_| (0..n).map(|_| rng.random::<f64>() * 1.6 - 0.3).collect()).collect();
        let cdf = cdf_from_fits(&f.sample, f.nuis.p(0).unwrap(), f.nuis.p(1).unwrap(), &vs, &grid, 0, 1).unwrap();
        prop_assert!(cdf.theta_of_tau.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(cdf.theta_of_tau.iter().all(|v| (0.0..=1.0).contains(v)));
        for k in 0..grid.len() {
            let m = cdf.influence_of_tau.column(k).sum() / n as f64;
            prop_assert!(m.abs() <= 1e-10);
        }
    }

    #[test]
    fn sd_statistic_vanishes_when_dominated(n in 5usize..=40, seed in any::<u64>(), gap in 0.0f64..0.3) {
        let f = fixture(n, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let grid: Vec<f64> = vec![-1.0, 0.0, 1.0, 2.0];
        let vs: Vec<Vec<f64>> = grid.iter().map(|_| (0..n).map(|_| rng.random::<f64>() * 0.5).collect()).collect();
        let p0 = f.nuis.p(0).unwrap();
        let p1 = f.nuis.p(1).unwrap();
        let a = cdf_from_fits(&f.sample, p0, p1, &vs, &grid, 0, 1).unwrap();
        let same = sd_test(&a, &a, 50, WeightDist::Rademacher, 4).unwrap();
        prop_assert_eq!(same.statistic, 0.0);
        prop_assert!(!same.reject);
        let mut b = a.clone();
        for v in &mut b.theta_of_tau {
            *v += gap;
        }
        let dominated = sd_test(&a, &b, 50, WeightDist::Mammen, 4).unwrap();
        prop_assert_eq!(dominated.statistic, 0.0);
    }
}

#[test]
fn bootstrap_is_bitwise_deterministic() {
    let f = fixture(40, 2, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = vec![-1.0, 0.0, 1.0];
    let vs: Vec<Vec<f64>> = grid.iter().map(|_| (0..40).map(|_| rng.random::<f64>()).collect()).collect();
    let cdf = cdf_from_fits(&f.sample, f.nuis.p(0).unwrap(), f.nuis.p(1).unwrap(), &vs, &grid, 0, 1).unwrap();
    for dist in [WeightDist::Rademacher, WeightDist::Mammen, WeightDist::Gaussian] {
        let a = multiplier_bootstrap(&cdf.influence_of_tau, 300, dist, 77).unwrap();
        let b = multiplier_bootstrap(&cdf.influence_of_tau, 300, dist, 77).unwrap();
        let bits = |d: &latent_dr::estimators::BootstrapDraws| d.sup_stats.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.critical_value.to_bits(), b.critical_value.to_bits());
        let c = multiplier_bootstrap(&cdf.influence_of_tau, 300, dist, 78).unwrap();
        assert_ne!(bits(&a), bits(&c));
        let band = cdf.clone().with_band(&a).band_95.unwrap();
        for ((lo, hi), t) in band.iter().zip(&cdf.theta_of_tau) {
            assert!(lo <= t && t <= hi);
        }
    }
}

#[test]
fn undefined_level_is_an_estimand_error() {
    let f = fixture(10, 2, 1);
    assert!(matches!(
        dr_counterfactual_mean(&f.sample, &f.nuis, 0, 5),
        Err(latent_dr::Error::EstimandUndefined(_))
    ));
}
