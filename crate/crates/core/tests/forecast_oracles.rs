mod common;

use common::dense_observation_law;
use levy_core::dp::{combine_measure, DiscreteMeasure};
use levy_core::forecast::{
    brownian_langevin_cov, gaussian_langevin_mle, profile_log_likelihood, rbpf_forecast, score_streams, GaussianLangevin,
    RbpfConfig, LOG_VAR_FLOOR,
};
use levy_core::kalman::{LangevinModel, NvmPrior, StatePrior};
use levy_core::sim::{irregular_times, transition_matrix, JumpSeries, Observations};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn simulate_gaussian(m: &GaussianLangevin, n: usize, rng: &mut ChaCha8Rng) -> Observations {
    let times = irregular_times(0.0, n, 1.0, rng).unwrap();
    let mut x = Vector2::new(0.0, rng.sample::<f64, _>(StandardNormal) * (m.drive_var / (-2.0 * m.theta)).sqrt());
    let mut prev = 0.0;
    let mut values = Vec::new();
    for &t in &times {
        let dt = t - prev;
        prev = t;
        let q = brownian_langevin_cov(m.theta, dt) * m.drive_var;
        let l = q.cholesky().map(|c| c.l()).unwrap_or_else(|| nalgebra::Matrix2::from_diagonal(&q.diagonal().map(|d| d.max(0.0).sqrt())));
        let z = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
        x = transition_matrix(m.theta, dt) * x + l * z;
        values.push(x[0] + m.obs_var.sqrt() * rng.sample::<f64, _>(StandardNormal));
    }
    Observations::new(0.0, times, values).unwrap()
}

fn levy_model() -> LangevinModel {
    LangevinModel {
        theta: -0.6,
        obs_noise: 0.05,
        state_prior: StatePrior { mean: [0.2, 0.0], kappa0: 3.0 },
        nvm_prior: NvmPrior { alpha_w: 3.0, beta_w: 1.5, mu_hat_w: 0.0, k_w: 1.0 },
    }
}

#[test]
fn jump_free_particle_filter_matches_the_student_t_predictive() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let model = levy_model();
    let n = 12;
    let times = irregular_times(0.0, n, 0.7, &mut rng).unwrap();
    let values: Vec<f64> = (0..n).map(|i| (i as f64 * 0.4).sin()).collect();
    let obs = Observations::new(0.0, times.clone(), values.clone()).unwrap();
    let measure = combine_measure(1e-300, DiscreteMeasure::new(vec![1.0], vec![1.0]).unwrap()).unwrap();
    let (records, _) =
        rbpf_forecast(&obs, &model, &measure, &RbpfConfig { n_particles: 8, from: 1 }, &mut rng).unwrap();

    let p = model.nvm_prior;
    let empty = JumpSeries::empty(0.0, times).unwrap();
    let law = dense_observation_law(&model, &empty, model.state_prior.mean, model.state_prior.kappa0, p.mu_hat_w, p.k_w, 1.0);
    for (r, j) in records.iter().zip(1..n) {
        let s11 = law.cov.view((0, 0), (j, j)).into_owned();
        let s21 = law.cov.view((j, 0), (1, j)).into_owned();
        let inv: DMatrix<f64> = s11.clone().try_inverse().unwrap();
        let resid = DVector::from_vec(values[..j].to_vec()) - law.mean.rows(0, j);
        let mean = law.mean[j] + (&s21 * &inv * &resid)[0];
        let cond = law.cov[(j, j)] - (&s21 * &inv * s21.transpose())[0];
        let quad = (resid.transpose() * &inv * &resid)[0];
        let shape = p.alpha_w + 0.5 * j as f64;
        let scale2 = (p.beta_w + 0.5 * quad) / shape * cond;
        let dof = 2.0 * shape;
        let var = scale2 * dof / (dof - 2.0);
        assert!((r.mean - mean).abs() < 1e-6 * mean.abs().max(1.0), "mean at {j}: {} vs {mean}", r.mean);
        assert!((r.variance - var).abs() < 1e-6 * var, "variance at {j}: {} vs {var}", r.variance);
    }
}

#[test]
fn mle_dominates_nearby_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let truth = GaussianLangevin { theta: -0.5, drive_var: 0.8, obs_var: 0.05 };
    let obs = simulate_gaussian(&truth, 150, &mut rng);
    let fit = gaussian_langevin_mle(&obs).unwrap();
    let at_fit = fit.params.log_likelihood(&obs).unwrap();
    assert!((at_fit - fit.log_likelihood).abs() < 1e-9);
    for _ in 0..200 {
        let jitter = |v: f64, rng: &mut ChaCha8Rng| v * (0.5 * rng.sample::<f64, _>(StandardNormal)).exp();
        let other = GaussianLangevin {
            theta: jitter(fit.params.theta, &mut rng),
            drive_var: jitter(fit.params.drive_var, &mut rng),
            obs_var: jitter(fit.params.obs_var, &mut rng),
        };
        assert!(other.log_likelihood(&obs).unwrap() <= fit.log_likelihood + 1e-6);
    }
    assert!(truth.log_likelihood(&obs).unwrap() <= fit.log_likelihood + 1e-6);
}

#[test]
fn noiseless_drive_fits_to_the_variance_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let times = irregular_times(0.0, 80, 1.0, &mut rng).unwrap();
    let values = times
        .iter()
        .map(|_| 2.0 + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let obs = Observations::new(0.0, times, values).unwrap();
    let fit = gaussian_langevin_mle(&obs).unwrap();
    assert!(fit.params.drive_var < 1e-4, "drive variance {}", fit.params.drive_var);
    assert!(fit.params.drive_var >= LOG_VAR_FLOOR.exp() * (1.0 - 1e-12));
}

#[test]
fn profile_likelihood_interval_covers_the_truth() {
    let truth = GaussianLangevin { theta: -0.7, drive_var: 1.0, obs_var: 0.1 };
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let reps = 60;
    let mut covered = 0;
    for _ in 0..reps {
        let obs = simulate_gaussian(&truth, 150, &mut rng);
        let fit = gaussian_langevin_mle(&obs).unwrap();
        let lr = 2.0 * (fit.log_likelihood - profile_log_likelihood(&obs, truth.theta, &fit.params));
        assert!(lr > -1e-6, "profile exceeds the maximum by {}", -lr);
        if lr <= 3.841 {
            covered += 1;
        }
    }
    let rate = covered as f64 / reps as f64;
    assert!(rate >= 0.85, "coverage {rate}");
}

#[test]
fn forecast_spread_shrinks_with_more_particles() {
    let model = levy_model();
    let mut rng = ChaCha8Rng::seed_from_u64(75);
    let times = irregular_times(0.0, 20, 1.0, &mut rng).unwrap();
    let values: Vec<f64> = (0..20).map(|i| 0.3 * i as f64 + (i as f64).cos()).collect();
    let obs = Observations::new(0.0, times, values).unwrap();
    let measure = combine_measure(2.0, DiscreteMeasure::new(vec![0.7, 0.3], vec![0.2, 1.5]).unwrap()).unwrap();
    let mut spread = |n_particles: usize| {
        let means: Vec<f64> = (0..60)
            .map(|_| {
                let (r, _) = rbpf_forecast(&obs, &model, &measure, &RbpfConfig { n_particles, from: 19 }, &mut rng).unwrap();
                r[0].mean
            })
            .collect();
        let m = means.iter().sum::<f64>() / means.len() as f64;
        means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64
    };
    let (coarse, fine) = (spread(50), spread(800));
    assert!(fine < coarse / 4.0, "variance {coarse} at 50 particles, {fine} at 800");
}

#[test]
fn metric_code_reproduces_reference_table_on_stored_streams() {
    let text = include_str!("fixtures/table1_streams.csv");
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    let col = |k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let (previous, actual) = (col(0), col(1));
    let round4 = |x: f64| (x * 1e4).round() / 1e4;
    for (k, mse, hit) in [(2, 0.8159, 0.0), (3, 2.8436, 0.6171), (4, 0.7871, 0.6505)] {
        let s = score_streams(&previous, &col(k), &actual).unwrap();
        assert_eq!((round4(s.mse), round4(s.hit_rate)), (mse, hit), "column {k}");
    }
}
