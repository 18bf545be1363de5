use hsde::datagen::simulate_model;
use hsde::em::{update_marks, EventStats};
use hsde::inducing::{
    log_density_repulsive, log_density_sequence, order_statistics_gap_sample, sample_repulsive, InducingSequence,
    MarkModel, NiwPrior, RepulsionParams, WaitingTimeModel,
};
use hsde::sde::{simulate_path, NoiseParams};
use hsde::smc::{run_filter, run_filter_fixed_events, ProposalKind, SmcConfig};
use hsde::{stats, GaussianObsModel, ModelParams, ObsModel, ObservationSeries, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, MultivariateNormal};

#[test]
fn gamma_waiting_times_have_the_right_moments() {
    let wt = WaitingTimeModel::from_mean_std(8.0, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let v: Vec<f64> = (0..n).map(|_| wt.sample(&mut rng)).collect();
    let (mean, var) = (wt.mean(), wt.variance());
    assert!((stats::mean(&v) - mean).abs() < 3.0 * (var / n as f64).sqrt());
    // Var of the sample variance: sigma^4 (kurtosis - 1) / n, kurtosis 3 + 6 / alpha.
    let kurt = 3.0 + 6.0 / wt.alpha();
    let se_var = var * ((kurt - 1.0) / n as f64).sqrt();
    assert!((stats::variance(&v) - var).abs() < 3.0 * se_var);
}

#[test]
fn gamma_waiting_times_pass_ks() {
    let wt = WaitingTimeModel::new(2.5, 0.7).unwrap();
    let oracle = Gamma::new(2.5, 0.7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v: Vec<f64> = (0..20_000).map(|_| wt.sample(&mut rng)).collect();
    assert!(stats::ks_one_sample(&v, |x| oracle.cdf(x)).p_value > 0.01);
    for x in [0.1, 1.0, 3.7, 12.0] {
        assert!((wt.log_pdf(x) - oracle.ln_pdf(x)).abs() < 1e-12);
    }
}

#[test]
fn uniform_gaps_are_beta_and_nearly_exponential() {
    let (n, horizon) = (50usize, 7.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let first: Vec<f64> = (0..5000).map(|_| order_statistics_gap_sample(n, horizon, &mut rng)[0]).collect();
    // A spacing of n uniforms on [0, h] is h * Beta(1, n).
    let p = stats::ks_one_sample(&first, |x| 1.0 - (1.0 - (x / horizon).clamp(0.0, 1.0)).powi(n as i32)).p_value;
    assert!(p > 0.01, "p = {p}");

    let big = 200_000;
    let gaps = order_statistics_gap_sample(big, 1.0, &mut rng);
    let scaled: Vec<f64> = gaps.iter().map(|g| g * big as f64).collect();
    assert!((stats::mean(&scaled) - 1.0).abs() < 0.01);
    let thin: Vec<f64> = scaled.iter().step_by(20).copied().collect();
    assert!(stats::ks_one_sample(&thin, |x| 1.0 - (-x).exp()).p_value > 0.01);
}

#[test]
fn median_max_gap_shrinks_with_more_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let med: Vec<f64> = [10usize, 100, 1000]
        .iter()
        .map(|&n| {
            let maxes: Vec<f64> = (0..500)
                .map(|_| order_statistics_gap_sample(n, 1.0, &mut rng).into_iter().fold(0.0, f64::max))
                .collect();
            stats::median(&maxes)
        })
        .collect();
    assert!(med[0] > med[1] && med[1] > med[2], "{med:?}");
}

#[test]
fn weak_repulsion_reduces_to_gamma() {
    let wt = WaitingTimeModel::new(3.0, 1.5).unwrap();
    let rep = RepulsionParams::new(1e-10, 3).unwrap();
    let oracle = Gamma::new(3.0, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut taus = Vec::new();
    for _ in 0..2000 {
        let d = sample_repulsive(5, &wt, &rep, 200, &mut rng).unwrap();
        assert!(d.warning.is_none());
        taus.extend(d.taus);
    }
    assert!(stats::ks_one_sample(&taus, |x| oracle.cdf(x)).p_value > 0.01);
}

fn min_interacting_gap(taus: &[f64], window: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 1..taus.len() {
        for j in i.saturating_sub(window)..i {
            best = best.min((taus[i] - taus[j]).abs());
        }
    }
    best
}

#[test]
fn repulsion_spreads_waiting_times_apart() {
    let wt = WaitingTimeModel::new(4.0, 2.0).unwrap();
    let rep = RepulsionParams::new(10.0, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let free: Vec<f64> =
        (0..500).map(|_| min_interacting_gap(&(0..5).map(|_| wt.sample(&mut rng)).collect::<Vec<_>>(), 3)).collect();
    let repelled: Vec<f64> = (0..500)
        .map(|_| min_interacting_gap(&sample_repulsive(5, &wt, &rep, 500, &mut rng).unwrap().taus, 3))
        .collect();
    assert!(stats::mann_whitney_greater(&repelled, &free) < 1e-3);
}

#[test]
fn repulsive_density_increases_with_separation() {
    let wt = WaitingTimeModel::new(2.0, 1.0).unwrap();
    let rep = RepulsionParams::new(1.0, 2).unwrap();
    let factor = |d: f64| {
        let taus = [2.0, 2.0 + d];
        log_density_repulsive(&taus, &wt, &rep).unwrap() - taus.iter().map(|&t| wt.log_pdf(t)).sum::<f64>()
    };
    let ds = [0.01, 0.1, 0.5, 1.0, 3.0, 10.0];
    for w in ds.windows(2) {
        assert!(factor(w[1]) > factor(w[0]));
    }
    assert!((factor(0.5) + 5.0f64.ln()).abs() < 1e-12);
    assert!(factor(1e6).abs() < 1e-9);
}

#[test]
fn sequence_density_is_gamma_plus_gaussian() {
    let wt = WaitingTimeModel::new(2.2, 0.4).unwrap();
    let mu = DVector::from_vec(vec![0.5, -1.0]);
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
    let mk = MarkModel::new(mu.clone(), sigma.clone()).unwrap();
    let times = [1.3, 4.0, 9.5];
    let marks = vec![vec![0.1, 0.2], vec![-1.0, 3.0], vec![2.0, -0.5]];
    let seq = InducingSequence::from_times(0.0, &times, marks.clone()).unwrap();
    let g = Gamma::new(2.2, 0.4).unwrap();
    let mvn = MultivariateNormal::new(mu.iter().copied().collect(), sigma.iter().copied().collect()).unwrap();
    let mut expected = 0.0;
    let mut prev = 0.0;
    for (t, m) in times.iter().zip(&marks) {
        expected += g.ln_pdf(t - prev) + mvn.ln_pdf(&DVector::from_vec(m.clone()));
        prev = *t;
    }
    assert!((log_density_sequence(&seq, &wt, &mk).unwrap() - expected).abs() < 1e-10);
}

#[test]
fn mark_update_recovers_the_generating_law() {
    let mu = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let sigma = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 0.5]);
    let truth = MarkModel::new(mu.clone(), sigma.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000;
    let mut s = EventStats::new(3);
    for _ in 0..n {
        s.push(1.0, &truth.sample(&mut rng), 1.0);
    }
    let fit = update_marks(&s, &NiwPrior::weak(3)).unwrap();
    for i in 0..3 {
        let se = (sigma[(i, i)] / n as f64).sqrt();
        assert!((fit.mu()[i] - mu[i]).abs() < 4.0 * se);
        for j in 0..3 {
            // Entry-wise standard error of a sample covariance.
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
            assert!((fit.sigma()[(i, j)] - sigma[(i, j)]).abs() < 4.0 * se, "({i},{j})");
        }
    }
}

fn chirp_like() -> (ModelParams<f64>, ObservationSeries<f64>) {
    let params = ModelParams::new(
        ObsModel::Gaussian(
            GaussianObsModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.1)).unwrap(),
        ),
        NoiseParams::uniform(1, 0.1, 1e-3),
        WaitingTimeModel::from_mean_std(3.0, 1.0).unwrap(),
        MarkModel::isotropic(1, 0.0, 1.0).unwrap(),
    )
    .unwrap();
    let grid = TimeGrid::new(0.1, 150, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let obs = simulate_model(&params, &grid, true, &mut rng).unwrap().obs;
    (params, obs)
}

fn log_mls(params: &ModelParams<f64>, obs: &ObservationSeries<f64>, cfg: SmcConfig, seeds: u64) -> (Vec<f64>, usize) {
    let mut resamples = 0;
    let v = (0..seeds)
        .map(|seed| {
            let r = run_filter(obs, params, &SmcConfig { seed, ..cfg.clone() }).unwrap();
            resamples += r.resample_count;
            r.log_marginal_likelihood
        })
        .collect();
    (v, resamples)
}

#[test]
fn ess_threshold_changes_resampling_not_the_estimate() {
    let (params, obs) = chirp_like();
    let base = SmcConfig { particles: 500, ..SmcConfig::default() };
    let (always, n_always) = log_mls(&params, &obs, SmcConfig { ess_threshold: 1.0, ..base.clone() }, 40);
    let (half, n_half) = log_mls(&params, &obs, SmcConfig { ess_threshold: 0.5, ..base }, 40);
    assert!(n_always > n_half);
    let p = stats::welch_t_test(&always, &half);
    assert!(p > 0.01, "p = {p}");
}

/// Fixed events, a noisy integrator and precise observations: the regime where
/// the proposal for `y` matters.
fn integrator_dominated() -> (ModelParams<f64>, ObservationSeries<f64>, InducingSequence<f64>) {
    let params = ModelParams::new(
        ObsModel::Gaussian(
            GaussianObsModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.01)).unwrap(),
        ),
        NoiseParams::uniform(1, 0.3, 0.5),
        WaitingTimeModel::from_mean_std(3.0, 1.0).unwrap(),
        MarkModel::isotropic(1, 0.0, 1.0).unwrap(),
    )
    .unwrap();
    let grid = TimeGrid::new(0.1, 100, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq =
        InducingSequence::from_times(0.0, &[3.05, 6.1, 9.0, 12.3], vec![vec![1.0], vec![-0.5], vec![0.8], vec![0.0]])
            .unwrap();
    let path = simulate_path(&seq, &grid, &params.noise, &[0.0], &[0.0], &mut rng).unwrap();
    let obs = params.obs.simulate_series(&path, &grid, &mut rng).unwrap().0;
    (params, obs, seq)
}

#[test]
fn guided_proposal_with_zero_blend_matches_bootstrap() {
    let (params, obs, seq) = integrator_dominated();
    let run = |proposal: ProposalKind| -> Vec<f64> {
        (0..60)
            .map(|seed| {
                let cfg = SmcConfig { particles: 300, proposal, seed, ..SmcConfig::default() };
                run_filter_fixed_events(&obs, &params, &cfg, &seq).unwrap().log_marginal_likelihood
            })
            .collect()
    };
    let boot = run(ProposalKind::Bootstrap);
    let g0 = run(ProposalKind::Guided { blend: 0.0 });
    let g1 = run(ProposalKind::Guided { blend: 1.0 });
    let p = stats::ks_two_sample(&boot, &g0).p_value;
    assert!(p > 0.01, "p = {p}");
    assert!(
        stats::variance(&g1) < 0.5 * stats::variance(&boot),
        "{} vs {}",
        stats::variance(&g1),
        stats::variance(&boot)
    );
}
