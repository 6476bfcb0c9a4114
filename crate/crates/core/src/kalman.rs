//! Kalman filtering on the extended state `α = (x, dx/dt, μ_w)` with every
//! covariance normalized by `σ_w²`.
//!
//! Conditional on a jump series the Langevin system is linear Gaussian, and
//! because all covariances scale with `σ_w²` the filter can run once with
//! `σ_w² = 1`. The innovations then give the conjugate inverse-gamma update
//! for `σ_w²` and a closed-form marginal likelihood with both `μ_w` and
//! `σ_w²` integrated out.

use nalgebra::{Matrix2, Matrix3, RowVector3, Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{domain, LevyError, Result};
use crate::numeric::{ln_gamma, LN_2PI};
use crate::sim::{accumulate_moments, transition_matrix, JumpSeries, NvmParams, ShotNoiseMoments};

/// Conjugate prior on `(μ_w, σ_w²)`: `σ_w² ~ IG(α_w, β_w)` and
/// `μ_w | σ_w² ~ N(μ̂_w, k_w σ_w²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvmPrior {
    pub alpha_w: f64,
    pub beta_w: f64,
    pub mu_hat_w: f64,
    pub k_w: f64,
}

impl NvmPrior {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_w > 0.0 && self.beta_w > 0.0 && self.k_w > 0.0 && self.mu_hat_w.is_finite() {
            Ok(())
        } else {
            domain(format!("NVM prior requires α_w, β_w, k_w > 0 (got {self:?})"))
        }
    }
}

impl Default for NvmPrior {
    fn default() -> Self {
        NvmPrior {
            alpha_w: 2.0,
            beta_w: 1.0,
            mu_hat_w: 0.0,
            k_w: 1.0,
        }
    }
}

/// Prior on `X(t_0)`: mean `mean` and normalized covariance `kappa0 I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatePrior {
    pub mean: [f64; 2],
    pub kappa0: f64,
}

impl Default for StatePrior {
    fn default() -> Self {
        StatePrior {
            mean: [0.0, 0.0],
            kappa0: 10.0,
        }
    }
}

/// Filter state after `n_obs` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalKalmanState {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
    /// Running `E_n = Σ (y_i - ŷ_i)^T F_i^{-1} (y_i - ŷ_i)`.
    pub e_accum: f64,
    /// Running `Σ log |F_i|`.
    pub logdet_accum: f64,
    pub n_obs: usize,
}

impl MarginalKalmanState {
    pub fn initial(state: &StatePrior, nvm: &NvmPrior) -> Self {
        let mut cov = Matrix3::zeros();
        cov[(0, 0)] = state.kappa0;
        cov[(1, 1)] = state.kappa0;
        cov[(2, 2)] = nvm.k_w;
        MarginalKalmanState {
            mean: Vector3::new(state.mean[0], state.mean[1], nvm.mu_hat_w),
            cov,
            e_accum: 0.0,
            logdet_accum: 0.0,
            n_obs: 0,
        }
    }

    /// Propagates through `α ← Â α + B̂ e` with `Â = [[e^{A dt}, m̄], [0, 1]]`
    /// and `B̂ = [I; 0]`, `Cov(e) = C̄`.
    pub fn predict(&self, moments: &ShotNoiseMoments, transition: &Matrix2<f64>) -> Self {
        let a_hat = extended_transition(moments, transition);
        let mut cov = a_hat * self.cov * a_hat.transpose();
        let mut block = cov.fixed_view_mut::<2, 2>(0, 0);
        block += moments.cov;
        MarginalKalmanState {
            mean: a_hat * self.mean,
            cov: symmetrize(cov),
            ..*self
        }
    }

    /// Predicted observation `ŷ = Ĥμ` and normalized innovation variance
    /// `F = Ĥ C̄ Ĥ^T + C̄_v`.
    pub fn innovation(&self, emission: &RowVector3<f64>, obs_var: f64) -> (f64, f64) {
        let y_hat = (emission * self.mean)[0];
        let f = (emission * self.cov * emission.transpose())[0] + obs_var;
        (y_hat, f)
    }

    /// Scalar-observation Kalman update; `index` is reported on failure.
    pub fn update(&self, y: f64, emission: &RowVector3<f64>, obs_var: f64, index: usize) -> Result<Self> {
        let (y_hat, f) = self.innovation(emission, obs_var);
        // Relative jitter keeps a numerically zero innovation variance invertible.
        let f = f + 1e-12 * f.abs();
        if !(f > 0.0) || !f.is_finite() {
            return Err(LevyError::Numerical {
                index,
                reason: format!("innovation variance {f} is not positive"),
            });
        }
        let resid = y - y_hat;
        let ch = self.cov * emission.transpose();
        let gain = ch / f;
        let cov = self.cov - gain * ch.transpose();
        Ok(MarginalKalmanState {
            mean: self.mean + gain * resid,
            cov: symmetrize(cov),
            e_accum: self.e_accum + resid * resid / f,
            logdet_accum: self.logdet_accum + f.ln(),
            n_obs: self.n_obs + 1,
        })
    }

    /// Posterior of `μ_w` read off the extended state, `N(μ', σ_w² k_w')`.
    pub fn mu_w_posterior(&self) -> MuWPosterior {
        MuWPosterior {
            mean: self.mean[2],
            rel_var: self.cov[(2, 2)],
        }
    }
}

fn extended_transition(moments: &ShotNoiseMoments, transition: &Matrix2<f64>) -> Matrix3<f64> {
    let mut a = Matrix3::identity();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(transition);
    a[(0, 2)] = moments.mean[0];
    a[(1, 2)] = moments.mean[1];
    a
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// `IG(shape, scale)` posterior of `σ_w²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaW2Posterior {
    pub shape: f64,
    pub scale: f64,
}

impl SigmaW2Posterior {
    /// Posterior mean, infinite when `shape <= 1`.
    pub fn mean(&self) -> f64 {
        if self.shape > 1.0 {
            self.scale / (self.shape - 1.0)
        } else {
            f64::INFINITY
        }
    }

    /// One draw as the reciprocal of a `Gamma(shape, rate = scale)` variate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g: f64 = Gamma::new(self.shape, 1.0 / self.scale)
            .expect("positive posterior parameters")
            .sample(rng);
        1.0 / g
    }
}

/// `N(mean, σ_w² rel_var)` posterior of `μ_w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuWPosterior {
    pub mean: f64,
    pub rel_var: f64,
}

/// Multivariate Student-t filtering distribution of the extended state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTFilter {
    pub location: Vector3<f64>,
    pub scale: Matrix3<f64>,
    pub dof: f64,
}

/// Log marginal likelihood of all processed observations with `μ_w` and
/// `σ_w²` integrated out.
pub fn log_marginal(state: &MarginalKalmanState, prior: &NvmPrior, obs_dim: usize) -> f64 {
    let mn = (obs_dim * state.n_obs) as f64;
    let half = 0.5 * mn;
    -half * LN_2PI - 0.5 * state.logdet_accum + prior.alpha_w * prior.beta_w.ln() - ln_gamma(prior.alpha_w)
        + ln_gamma(prior.alpha_w + half)
        - (prior.alpha_w + half) * (prior.beta_w + 0.5 * state.e_accum).ln()
}

/// Conjugate `σ_w²` posterior `IG(α_w + MN/2, β_w + E_N/2)`.
pub fn sigma_w2_posterior(state: &MarginalKalmanState, prior: &NvmPrior, obs_dim: usize) -> SigmaW2Posterior {
    SigmaW2Posterior {
        shape: prior.alpha_w + 0.5 * (obs_dim * state.n_obs) as f64,
        scale: prior.beta_w + 0.5 * state.e_accum,
    }
}

/// Filtering distribution `t_{2(α_w + n/2)}(μ, ((β_w + E_n/2)/(α_w + n/2)) C̄)`.
pub fn student_t_filtering(state: &MarginalKalmanState, prior: &NvmPrior) -> StudentTFilter {
    let shape = prior.alpha_w + 0.5 * state.n_obs as f64;
    let scale = prior.beta_w + 0.5 * state.e_accum;
    StudentTFilter {
        location: state.mean,
        scale: state.cov * (scale / shape),
        dof: 2.0 * shape,
    }
}

/// The Langevin model in filter form: `θ`, normalized observation noise
/// `C̄_v`, and the priors on `X(t_0)` and `(μ_w, σ_w²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinModel {
    pub theta: f64,
    pub obs_noise: f64,
    pub state_prior: StatePrior,
    pub nvm_prior: NvmPrior,
}

/// Extended emission `Ĥ = [H, 0]` with `H = [1, 0]`.
pub const EMISSION: RowVector3<f64> = RowVector3::new(1.0, 0.0, 0.0);

impl LangevinModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta < 0.0) {
            return domain("θ must be negative");
        }
        if !(self.obs_noise > 0.0) {
            return domain("normalized observation noise must be positive");
        }
        if !(self.state_prior.kappa0 > 0.0) {
            return domain("state prior variance must be positive");
        }
        self.nvm_prior.validate()
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        LangevinModel { theta, ..*self }
    }

    pub fn initial_state(&self) -> MarginalKalmanState {
        MarginalKalmanState::initial(&self.state_prior, &self.nvm_prior)
    }

    /// Normalized moments of interval `j` of `series` under this model's `θ`.
    pub fn interval_moments(&self, series: &JumpSeries, j: usize) -> ShotNoiseMoments {
        let (_, t) = series.interval(j);
        accumulate_moments(series.group(j), self.theta, t)
    }

    /// Predict across interval `j` of `series` and update with `y`.
    pub fn step(&self, state: &MarginalKalmanState, series: &JumpSeries, j: usize, y: f64) -> Result<MarginalKalmanState> {
        let (s, t) = series.interval(j);
        let moments = self.interval_moments(series, j);
        state
            .predict(&moments, &transition_matrix(self.theta, t - s))
            .update(y, &EMISSION, self.obs_noise, j)
    }

    pub fn log_marginal(&self, state: &MarginalKalmanState) -> f64 {
        log_marginal(state, &self.nvm_prior, 1)
    }
}

/// Filter snapshots `[s_0, s_1, ..., s_N]` where `s_j` is the state after the
/// first `j` observations.
pub fn filter_pass(model: &LangevinModel, series: &JumpSeries, observations: &[f64]) -> Result<Vec<MarginalKalmanState>> {
    let mut out = Vec::with_capacity(observations.len() + 1);
    out.push(model.initial_state());
    filter_extend(model, series, observations, &mut out)?;
    Ok(out)
}

/// Continues a pass whose first `snapshots.len() - 1` observations are
/// already filtered.
pub fn filter_extend(
    model: &LangevinModel,
    series: &JumpSeries,
    observations: &[f64],
    snapshots: &mut Vec<MarginalKalmanState>,
) -> Result<()> {
    if observations.len() != series.n_intervals() {
        return domain(format!(
            "{} observations for {} intervals",
            observations.len(),
            series.n_intervals()
        ));
    }
    let start = snapshots.len() - 1;
    let mut state = *snapshots.last().expect("at least the initial snapshot");
    for (j, &y) in observations.iter().enumerate().skip(start) {
        state = model.step(&state, series, j, y)?;
        snapshots.push(state);
    }
    Ok(())
}

/// Log marginal likelihood of `observations` given `series`.
pub fn series_log_marginal(model: &LangevinModel, series: &JumpSeries, observations: &[f64]) -> Result<f64> {
    let snaps = filter_pass(model, series, observations)?;
    Ok(model.log_marginal(snaps.last().expect("non-empty")))
}

/// Gaussian log-likelihood with `μ_w` and `σ_w²` held fixed, from a plain
/// two-state Kalman filter. The state prior is `N(x_0, σ_w² κ_0 I)`. Used as
/// a diagnostic against the marginalized filter.
pub fn fixed_params_log_likelihood(
    model: &LangevinModel,
    series: &JumpSeries,
    observations: &[f64],
    nvm: &NvmParams,
) -> Result<f64> {
    if observations.len() != series.n_intervals() {
        return domain("observation count does not match interval count");
    }
    let s2 = nvm.sigma_w2;
    let mut mean = Vector2::new(model.state_prior.mean[0], model.state_prior.mean[1]);
    let mut cov = Matrix2::identity() * (s2 * model.state_prior.kappa0);
    let r = s2 * model.obs_noise;
    let mut ll = 0.0;
    for (j, &y) in observations.iter().enumerate() {
        let (s, t) = series.interval(j);
        let m = model.interval_moments(series, j);
        let a = transition_matrix(model.theta, t - s);
        mean = a * mean + m.mean * nvm.mu_w;
        cov = a * cov * a.transpose() + m.cov * s2;
        let f = cov[(0, 0)] + r;
        if !(f > 0.0) {
            return Err(LevyError::Numerical {
                index: j,
                reason: format!("innovation variance {f} is not positive"),
            });
        }
        let resid = y - mean[0];
        ll += -0.5 * (LN_2PI + f.ln() + resid * resid / f);
        let gain = cov.column(0) / f;
        mean += gain * resid;
        cov -= gain * gain.transpose() * f;
        cov = (cov + cov.transpose()) * 0.5;
    }
    Ok(ll)
}
