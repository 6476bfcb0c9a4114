mod common;

use common::{ks_crit, simpson};
use levy_core::dp::{DiscreteLevyMeasure, DiscreteMeasure, DpHyper, GammaParams, Truncation, combine_measure};
use levy_core::gibbs::{step_measure, step_series, step_theta, state_for, BlockSchedule, Priors, Target, ThetaPrior};
use levy_core::kalman::{series_log_marginal, LangevinModel, NvmPrior, StatePrior};
use levy_core::sim::{
    irregular_times, simulate_ssm, simulate_subordinator_on, AnalyticSubordinator, JumpSeries, LangevinParams,
    NvmParams, Observations, SubordinatorFamily,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, seed: u64) -> (Observations, JumpSeries) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subord = AnalyticSubordinator::new(SubordinatorFamily::Gamma { c: 2.0, beta: 1.0 }, 0.05).unwrap();
    let times = irregular_times(0.0, n, 1.0, &mut rng).unwrap();
    let series = simulate_subordinator_on(&subord, 0.0, times, &mut rng).unwrap();
    let path = simulate_ssm(
        &series,
        &LangevinParams::new(-0.8, 0.01).unwrap(),
        &NvmParams::new(0.2, 1.0).unwrap(),
        Default::default(),
        &mut rng,
    )
    .unwrap();
    (Observations::new(0.0, path.times, path.observations).unwrap(), series)
}

fn measure() -> DiscreteLevyMeasure {
    combine_measure(1.5, DiscreteMeasure::new(vec![0.6, 0.4], vec![0.1, 1.2]).unwrap()).unwrap()
}

fn model() -> LangevinModel {
    LangevinModel {
        theta: -1.0,
        obs_noise: 0.01,
        state_prior: StatePrior::default(),
        nvm_prior: NvmPrior::default(),
    }
}

#[test]
fn cached_likelihood_tracks_a_fresh_filter_pass() {
    let (obs, _) = dataset(30, 61);
    let target = Target { model: model(), obs: &obs };
    let priors = Priors {
        lambda: GammaParams::new(1.0, 0.1).unwrap(),
        theta: ThetaPrior::default(),
        dp: DpHyper {
            alpha: 1.0,
            base: GammaParams::new(1.0, 1.0).unwrap(),
            truncation: Truncation::Fixed { k: 200 },
            alpha_prior: GammaParams::new(1.0, 1.0).unwrap(),
        },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut state = state_for(&target, obs.empty_series(), measure(), 1.0, -1.0).unwrap();
    let schedule = BlockSchedule::new(4, 1).unwrap();
    for _ in 0..150 {
        step_measure(&mut state, &priors, &mut rng).unwrap();
        let m = state.measure.clone();
        step_series(&mut state, &target, &schedule, &m, &mut rng);
        step_theta(&mut state, &target, &priors.theta, 0.3, &mut rng);
        let fresh = state.recompute_log_likelihood(&target).unwrap();
        assert!((state.log_likelihood(&target) - fresh).abs() < 1e-9 * fresh.abs().max(1.0));
        assert_eq!(state.snapshots().len(), obs.len() + 1);
    }
}

#[test]
fn theta_step_leaves_the_conditional_posterior_invariant() {
    let (obs, series) = dataset(25, 63);
    let target = Target { model: model(), obs: &obs };
    let prior = ThetaPrior::LogNormal { mu: 0.0, sigma: 1.0 };
    let ln_post = |u: f64| {
        series_log_marginal(&model().with_theta(-u.exp()), &series, &obs.values).unwrap() + prior.ln_density_log_scale(u)
    };
    let (lo, hi) = (-6.0, 4.0);
    let peak = (0..=200).map(|i| ln_post(lo + i as f64 * 0.05)).fold(f64::NEG_INFINITY, f64::max);
    let dens = |u: f64| (ln_post(u) - peak).exp();
    let total = simpson(dens, lo, hi, 4_000);
    let cdf = |x: f64| simpson(dens, lo, x.clamp(lo, hi), 800) / total;

    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut state = state_for(&target, series.clone(), measure(), 1.0, -1.0).unwrap();
    let mut draws = Vec::new();
    for it in 0..60_000 {
        step_theta(&mut state, &target, &prior, 0.8, &mut rng);
        if it >= 1_000 && it % 20 == 0 {
            draws.push((-state.theta).ln());
        }
    }
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    let probes: Vec<f64> = (1..50).map(|i| sorted[i * sorted.len() / 50]).collect();
    let probe_cdf: Vec<(f64, f64)> = probes.iter().map(|&x| (x, cdf(x))).collect();
    let d = probe_cdf
        .iter()
        .map(|&(x, f)| (f - sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64).abs())
        .fold(0.0, f64::max);
    assert!(d < ks_crit(draws.len()), "KS {d} over {}", draws.len());
}
