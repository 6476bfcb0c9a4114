//! One-step-ahead forecasting: naive persistence, a Brownian-driven
//! Langevin model fitted by maximum likelihood, and a Rao-Blackwellized
//! particle filter for the Lévy-driven model.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{DiscreteLevyMeasure, DiscreteMeasure};
use crate::error::{domain, LevyError, Result};
use crate::gibbs::propose_block;
use crate::kalman::{LangevinModel, MarginalKalmanState, EMISSION};
use crate::numeric::{nelder_mead, student_t_ln_pdf, LN_2PI};
use crate::sim::{accumulate_moments, transition_matrix, Observations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelTag {
    Naive,
    Gaussian,
    Levy,
}

/// Forecast of the observation at `time` made from everything before it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub time: f64,
    /// The last observation before `time`.
    pub previous: f64,
    pub actual: f64,
    pub mean: f64,
    pub variance: f64,
    pub model: ModelTag,
}

/// Persistence forecast: the next value equals the last one.
pub fn naive_forecast(history: &[f64]) -> Result<f64> {
    match history.last() {
        Some(&y) => Ok(y),
        None => domain("naive forecast needs at least one observation"),
    }
}

/// Naive records for observations `from..N`.
pub fn naive_forecasts(obs: &Observations, from: usize) -> Result<Vec<ForecastRecord>> {
    check_from(obs, from)?;
    (from..obs.len())
        .map(|j| {
            Ok(ForecastRecord {
                time: obs.times[j],
                previous: obs.values[j - 1],
                actual: obs.values[j],
                mean: naive_forecast(&obs.values[..j])?,
                variance: 0.0,
                model: ModelTag::Naive,
            })
        })
        .collect()
}

fn check_from(obs: &Observations, from: usize) -> Result<()> {
    if from == 0 || from >= obs.len() {
        return domain(format!("forecast start {from} must lie in 1..{}", obs.len()));
    }
    Ok(())
}

/// Mean squared error and hit rate. A forecast hits when its predicted
/// change has the same sign as the realized change; a predicted change of
/// exactly zero is a miss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub mse: f64,
    pub hit_rate: f64,
    pub n: usize,
}

pub fn score(records: &[ForecastRecord]) -> Result<Score> {
    if records.is_empty() {
        return domain("no forecasts to score");
    }
    let n = records.len() as f64;
    let mse = records.iter().map(|r| (r.mean - r.actual).powi(2)).sum::<f64>() / n;
    let hits = records
        .iter()
        .filter(|r| {
            let p = r.mean - r.previous;
            let a = r.actual - r.previous;
            p != 0.0 && p.signum() == a.signum() && a != 0.0
        })
        .count();
    Ok(Score {
        mse,
        hit_rate: hits as f64 / n,
        n: records.len(),
    })
}

/// Scores `predictions` against `actuals` with `previous` the last observed
/// values.
pub fn score_streams(previous: &[f64], predictions: &[f64], actuals: &[f64]) -> Result<Score> {
    if previous.len() != predictions.len() || predictions.len() != actuals.len() {
        return domain("forecast streams have different lengths");
    }
    let records: Vec<ForecastRecord> = (0..actuals.len())
        .map(|i| ForecastRecord {
            time: i as f64,
            previous: previous[i],
            actual: actuals[i],
            mean: predictions[i],
            variance: 0.0,
            model: ModelTag::Naive,
        })
        .collect();
    score(&records)
}

/// Langevin model driven by Brownian motion with variance `drive_var` per
/// unit time, observed with noise variance `obs_var`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianLangevin {
    pub theta: f64,
    pub drive_var: f64,
    pub obs_var: f64,
}

/// Covariance of the exact discretization over a gap `dt`, per unit drive
/// variance.
pub fn brownian_langevin_cov(theta: f64, dt: f64) -> Matrix2<f64> {
    let a = theta * dt;
    let (q11, q12, q22) = if a.abs() < 1e-4 {
        (
            dt.powi(3) / 3.0 + theta * dt.powi(4) / 4.0,
            dt * dt / 2.0 + theta * dt.powi(3) / 2.0,
            dt + theta * dt * dt + 2.0 * theta * theta * dt.powi(3) / 3.0,
        )
    } else {
        let e1 = a.exp_m1() / theta;
        let e2 = (2.0 * a).exp_m1() / (2.0 * theta);
        ((e2 - 2.0 * e1 + dt) / (theta * theta), (e2 - e1) / theta, e2)
    };
    Matrix2::new(q11, q12, q12, q22)
}

impl GaussianLangevin {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta < 0.0) || !(self.drive_var >= 0.0) || !(self.obs_var > 0.0) {
            return domain("Gaussian Langevin needs θ < 0, drive variance >= 0 and observation variance > 0");
        }
        Ok(())
    }

    fn initial(&self, y0: f64) -> (Vector2<f64>, Matrix2<f64>) {
        let v_var = self.drive_var / (-2.0 * self.theta);
        (Vector2::new(y0, 0.0), Matrix2::new(self.obs_var, 0.0, 0.0, v_var))
    }

    /// Runs the filter from the first observation, calling `visit` with the
    /// index, predictive mean and variance of each later observation.
    fn filter<F: FnMut(usize, f64, f64)>(&self, obs: &Observations, mut visit: F) -> Result<f64> {
        self.validate()?;
        if obs.is_empty() {
            return domain("no observations");
        }
        let (mut m, mut p) = self.initial(obs.values[0]);
        let mut ll = 0.0;
        for j in 1..obs.len() {
            let dt = obs.times[j] - obs.times[j - 1];
            let f = transition_matrix(self.theta, dt);
            m = f * m;
            p = f * p * f.transpose() + brownian_langevin_cov(self.theta, dt) * self.drive_var;
            let s = p[(0, 0)] + self.obs_var;
            let resid = obs.values[j] - m[0];
            visit(j, m[0], s);
            ll += -0.5 * (LN_2PI + s.ln() + resid * resid / s);
            let k = p.column(0) / s;
            m += k * resid;
            p -= k * p.row(0);
            p = (p + p.transpose()) * 0.5;
        }
        Ok(ll)
    }

    /// Log-likelihood of observations `1..N` given the first.
    pub fn log_likelihood(&self, obs: &Observations) -> Result<f64> {
        self.filter(obs, |_, _, _| {})
    }

    /// One-step predictive records for observations `from..N`.
    pub fn forecasts(&self, obs: &Observations, from: usize) -> Result<Vec<ForecastRecord>> {
        check_from(obs, from)?;
        let mut out = Vec::new();
        self.filter(obs, |j, mean, var| {
            if j >= from {
                out.push(ForecastRecord {
                    time: obs.times[j],
                    previous: obs.values[j - 1],
                    actual: obs.values[j],
                    mean,
                    variance: var,
                    model: ModelTag::Gaussian,
                });
            }
        })?;
        Ok(out)
    }
}

/// Maximum-likelihood fit with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub params: GaussianLangevin,
    pub log_likelihood: f64,
    pub converged: bool,
}

/// Lower bound on `log` of both variances during fitting.
pub const LOG_VAR_FLOOR: f64 = -23.0;

fn fit_objective(obs: &Observations, p: &[f64]) -> f64 {
    let m = GaussianLangevin {
        theta: -p[0].exp(),
        drive_var: p[1].exp(),
        obs_var: p[2].exp(),
    };
    match m.log_likelihood(obs) {
        Ok(ll) if ll.is_finite() => -ll,
        _ => f64::INFINITY,
    }
}

fn data_scales(obs: &Observations) -> (f64, f64) {
    let n = obs.len() - 1;
    let dy: Vec<f64> = obs.values.windows(2).map(|w| w[1] - w[0]).collect();
    let var_dy = dy.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let mean_dt = (obs.times[n] - obs.times[0]) / n as f64;
    (var_dy.max(1e-12), mean_dt)
}

/// Maximizes the exact Kalman likelihood over `(log(-θ), log σ², log r)` by
/// multi-start Nelder-Mead.
pub fn gaussian_langevin_mle(obs: &Observations) -> Result<GaussianFit> {
    if obs.len() < 10 {
        return domain("maximum-likelihood fit needs at least 10 observations");
    }
    let (var_dy, mean_dt) = data_scales(obs);
    let lower = [-12.0, LOG_VAR_FLOOR, LOG_VAR_FLOOR];
    let upper = [8.0, 23.0, 23.0];
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for &th in &[0.1, 1.0, 10.0] {
        for &drive in &[0.1, 1.0] {
            for &noise in &[0.01, 0.5] {
                let rate = th / mean_dt;
                let start = [
                    rate.ln(),
                    (drive * var_dy * rate / mean_dt).ln(),
                    (noise * var_dy).ln(),
                ];
                let r = nelder_mead(|p| fit_objective(obs, p), &start, 0.5, &lower, &upper, 1e-10, 4000);
                if best.as_ref().map_or(true, |b| r.value < b.1) {
                    best = Some((r.x, r.value, r.converged));
                }
            }
        }
    }
    let (x, value, converged) = best.expect("at least one start");
    if !value.is_finite() {
        return Err(LevyError::Numerical {
            index: 0,
            reason: "likelihood is not finite at any start".into(),
        });
    }
    Ok(GaussianFit {
        params: GaussianLangevin {
            theta: -x[0].exp(),
            drive_var: x[1].exp(),
            obs_var: x[2].exp(),
        },
        log_likelihood: -value,
        converged,
    })
}

/// Log-likelihood maximized over both variances with `θ` held fixed.
pub fn profile_log_likelihood(obs: &Observations, theta: f64, around: &GaussianLangevin) -> f64 {
    let u = (-theta).ln();
    let start = [around.drive_var.ln(), around.obs_var.ln()];
    let r = nelder_mead(
        |p| fit_objective(obs, &[u, p[0], p[1]]),
        &start,
        0.5,
        &[LOG_VAR_FLOOR, LOG_VAR_FLOOR],
        &[23.0, 23.0],
        1e-10,
        4000,
    );
    -r.value
}

/// Rao-Blackwellized particle filter settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbpfConfig {
    pub n_particles: usize,
    /// Index of the first observation to forecast.
    pub from: usize,
}

/// Diagnostics from a filter run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RbpfReport {
    pub resamples: usize,
    /// Observation indices at which every weight vanished and weights were
    /// reset to uniform.
    pub weight_resets: Vec<usize>,
    pub min_ess: f64,
}

#[derive(Debug, Clone, Copy)]
struct Particle {
    state: MarginalKalmanState,
    source: usize,
}

/// Forecasts with a single measure and `θ`.
pub fn rbpf_forecast<R: Rng + ?Sized>(
    obs: &Observations,
    model: &LangevinModel,
    measure: &DiscreteLevyMeasure,
    config: &RbpfConfig,
    rng: &mut R,
) -> Result<(Vec<ForecastRecord>, RbpfReport)> {
    rbpf_forecast_mixed(obs, model, &[(measure.clone(), model.theta)], config, rng)
}

/// Forecasts with particles spread evenly over posterior `(measure, θ)`
/// samples.
pub fn rbpf_forecast_mixed<R: Rng + ?Sized>(
    obs: &Observations,
    model: &LangevinModel,
    sources: &[(DiscreteLevyMeasure, f64)],
    config: &RbpfConfig,
    rng: &mut R,
) -> Result<(Vec<ForecastRecord>, RbpfReport)> {
    check_from(obs, config.from)?;
    if config.n_particles == 0 {
        return domain("need at least one particle");
    }
    if sources.is_empty() {
        return domain("need at least one measure");
    }
    for &(_, theta) in sources {
        model.with_theta(theta).validate()?;
    }
    let n_p = config.n_particles;
    let prior = model.nvm_prior;
    let mut particles: Vec<Particle> = (0..n_p)
        .map(|i| Particle {
            state: model.initial_state(),
            source: i % sources.len(),
        })
        .collect();
    let mut weights = vec![1.0 / n_p as f64; n_p];
    let mut report = RbpfReport {
        min_ess: n_p as f64,
        ..Default::default()
    };
    let mut records = Vec::with_capacity(obs.len() - config.from);
    let mut log_w = vec![0.0; n_p];
    let mut pred = vec![(0.0, 0.0); n_p];
    for j in 0..obs.len() {
        let lo = if j == 0 { obs.origin } else { obs.times[j - 1] };
        let hi = obs.times[j];
        let y = obs.values[j];
        for (i, p) in particles.iter_mut().enumerate() {
            let (measure, theta) = &sources[p.source];
            let jumps = propose_block(measure, (lo, hi), rng);
            let moments = accumulate_moments(&jumps, *theta, hi);
            let predicted = p.state.predict(&moments, &transition_matrix(*theta, hi - lo));
            let (y_hat, f) = predicted.innovation(&EMISSION, model.obs_noise);
            let shape = prior.alpha_w + 0.5 * predicted.n_obs as f64;
            let scale2 = (prior.beta_w + 0.5 * predicted.e_accum) / shape * f;
            let dof = 2.0 * shape;
            let var = if dof > 2.0 { scale2 * dof / (dof - 2.0) } else { f64::INFINITY };
            pred[i] = (y_hat, var);
            log_w[i] = student_t_ln_pdf(y, y_hat, scale2.sqrt(), dof);
            p.state = predicted.update(y, &EMISSION, model.obs_noise, j)?;
        }
        if j >= config.from {
            let mean: f64 = weights.iter().zip(&pred).map(|(w, p)| w * p.0).sum();
            let second: f64 = weights.iter().zip(&pred).map(|(w, p)| w * (p.1 + p.0 * p.0)).sum();
            records.push(ForecastRecord {
                time: hi,
                previous: obs.values[j - 1],
                actual: y,
                mean,
                variance: (second - mean * mean).max(0.0),
                model: ModelTag::Levy,
            });
        }
        let max = log_w
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (w, l) in weights.iter_mut().zip(&log_w) {
            *w *= if max.is_finite() { (l - max).exp() } else { 0.0 };
            total += *w;
        }
        if !(total > 0.0) || !total.is_finite() {
            report.weight_resets.push(j);
            weights.iter_mut().for_each(|w| *w = 1.0 / n_p as f64);
        } else {
            weights.iter_mut().for_each(|w| *w /= total);
        }
        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        report.min_ess = report.min_ess.min(ess);
        if ess < 0.5 * n_p as f64 {
            let idx = systematic_resample(&weights, rng);
            particles = idx.iter().map(|&k| particles[k]).collect();
            weights.iter_mut().for_each(|w| *w = 1.0 / n_p as f64);
            report.resamples += 1;
        }
    }
    Ok((records, report))
}

/// Systematic resampling indices.
pub fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut k = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cum && k + 1 < n {
            k += 1;
            cum += weights[k];
        }
        out.push(k);
    }
    out
}

/// Equal-weight pooling of measure samples into one measure whose tail is
/// the average of the sample tails.
pub fn pooled_measure(samples: &[DiscreteLevyMeasure]) -> Result<DiscreteLevyMeasure> {
    if samples.is_empty() {
        return domain("no measure samples to pool");
    }
    let n = samples.len() as f64;
    let rate = samples.iter().map(|s| s.rate).sum::<f64>() / n;
    if !(rate > 0.0) {
        return DiscreteLevyMeasure::point(0.0, samples[0].measure.atoms()[0]);
    }
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for s in samples {
        for (x, m) in s.masses() {
            atoms.push(x);
            weights.push(m / (n * rate));
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(DiscreteLevyMeasure {
        rate,
        measure: DiscreteMeasure::new(weights, atoms)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::integrate;
    use crate::sim::impulse_response;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(prev: f64, actual: f64, mean: f64) -> ForecastRecord {
        ForecastRecord {
            time: 0.0,
            previous: prev,
            actual,
            mean,
            variance: 0.0,
            model: ModelTag::Levy,
        }
    }

    #[test]
    fn naive_basics() {
        assert_eq!(naive_forecast(&[1.0]).unwrap(), 1.0);
        assert!(naive_forecast(&[]).is_err());
        let obs = Observations::new(0.0, vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 2.0, 5.0]).unwrap();
        let s = score(&naive_forecasts(&obs, 1).unwrap()).unwrap();
        assert_eq!(s.hit_rate, 0.0);
        let flat = Observations::new(0.0, vec![1.0, 2.0, 3.0], vec![2.0; 3]).unwrap();
        assert_eq!(score(&naive_forecasts(&flat, 1).unwrap()).unwrap().mse, 0.0);
    }

    #[test]
    fn perfect_and_shifted_scores() {
        let recs = vec![rec(0.0, 1.0, 1.0), rec(1.0, 0.5, 0.5)];
        let s = score(&recs).unwrap();
        assert_eq!((s.mse, s.hit_rate), (0.0, 1.0));
        let recs = vec![rec(0.0, 1.0, 0.5), rec(1.0, 0.5, 1.2), rec(1.0, 2.0, 1.0)];
        let shifted: Vec<_> = recs.iter().map(|r| rec(r.previous + 4.0, r.actual + 4.0, r.mean + 4.0)).collect();
        let (a, b) = (score(&recs).unwrap(), score(&shifted).unwrap());
        assert_abs_diff_eq!(a.mse, b.mse, epsilon = 1e-12);
        assert_eq!(a.hit_rate, 1.0 / 3.0);
        assert_eq!(a.hit_rate, b.hit_rate);
        assert!(score_streams(&[0.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn discretization_matches_quadrature() {
        for (theta, dt) in [(-0.7, 0.9), (-3.0, 0.05), (-1e-6, 0.3)] {
            let q = brownian_langevin_cov(theta, dt);
            for (r, c) in [(0, 0), (0, 1), (1, 1)] {
                let oracle = integrate(
                    |s| {
                        let g = impulse_response(theta, s);
                        g[r] * g[c]
                    },
                    0.0,
                    dt,
                    1e-15,
                    1e-12,
                )
                .unwrap();
                assert_abs_diff_eq!(q[(r, c)], oracle, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn systematic_resampling_follows_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx = systematic_resample(&[0.0, 0.5, 0.0, 0.5], &mut rng);
        assert_eq!(idx.iter().filter(|&&k| k == 1).count(), 2);
        assert_eq!(idx.iter().filter(|&&k| k == 3).count(), 2);
    }

    #[test]
    fn pooled_measure_averages_tails() {
        let a = DiscreteLevyMeasure::point(2.0, 1.0).unwrap();
        let b = DiscreteLevyMeasure::point(4.0, 3.0).unwrap();
        let p = pooled_measure(&[a.clone(), b.clone()]).unwrap();
        for x in [0.5, 2.0, 4.0] {
            assert_abs_diff_eq!(p.tail(x), 0.5 * (a.tail(x) + b.tail(x)), epsilon = 1e-12);
        }
    }
}
