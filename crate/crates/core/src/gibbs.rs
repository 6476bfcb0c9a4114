//! Augmented MH-in-Gibbs sampler over `(Q, α, {Z_i, V_i}, θ)`.
//!
//! Each iteration runs three steps:
//!
//! 1. [`step_measure`]: the DP concentration, jump rate and jump-size law given
//!    the current jumps (observations drop out given the series).
//! 2. [`step_series`]: overlapping blocked Metropolis-Hastings updates of the
//!    jump series. Block proposals come from the prior given the current
//!    measure, so the acceptance ratio is the ratio of marginal likelihoods.
//! 3. [`step_theta`]: a random walk on `log(-θ)`.
//!
//! The filter snapshots after every observation are cached. A block starting
//! at interval `j` only needs the filter re-run from snapshot `j`, since
//! earlier observations do not depend on later jumps.

use std::ops::Range;

use nalgebra::Matrix2;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dp::{
    combine_measure, distinct_count, lambda_posterior, sample_alpha, sample_posterior_dp, DiscreteLevyMeasure,
    DiscreteMeasure, DpHyper, GammaParams,
};
use crate::error::{config_err, domain, LevyError, Result};
use crate::kalman::{
    log_marginal, student_t_filtering, LangevinModel, MarginalKalmanState, MuWPosterior, SigmaW2Posterior, EMISSION,
};
use crate::numeric::{student_t_cdf, student_t_pdf};
use crate::rng::substream;
use crate::sim::{accumulate_moments, transition_matrix, AnalyticSubordinator, Jump, JumpSeries, Observations, ShotNoiseMoments};

/// Blocks of `block_len` consecutive intervals, consecutive blocks sharing
/// `overlap` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub block_len: usize,
    pub overlap: usize,
}

impl Default for BlockSchedule {
    fn default() -> Self {
        BlockSchedule {
            block_len: 5,
            overlap: 2,
        }
    }
}

impl BlockSchedule {
    pub fn new(block_len: usize, overlap: usize) -> Result<Self> {
        let s = BlockSchedule { block_len, overlap };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.overlap >= self.block_len {
            return Err(config_err("chain.block_len", "need block_len >= 1 and 0 <= overlap < block_len"));
        }
        Ok(())
    }

    /// Interval ranges covering `0..n` in sweep order.
    pub fn blocks(&self, n: usize) -> Vec<Range<usize>> {
        let stride = self.block_len - self.overlap;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + self.block_len).min(n);
            out.push(start..end);
            if end == n {
                break;
            }
            start += stride;
        }
        out
    }
}

/// Prior on `θ < 0`, expressed through `u = log(-θ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaPrior {
    /// `log(-θ) ~ N(mu, sigma²)`.
    LogNormal { mu: f64, sigma: f64 },
    /// Flat in `log(-θ)`.
    LogFlat,
}

impl Default for ThetaPrior {
    fn default() -> Self {
        ThetaPrior::LogNormal { mu: 0.0, sigma: 2.0 }
    }
}

impl ThetaPrior {
    /// Log-density of `u = log(-θ)` up to a constant; the `|θ|` Jacobian of
    /// the change of variables is already included.
    pub fn ln_density_log_scale(&self, u: f64) -> f64 {
        match *self {
            ThetaPrior::LogNormal { mu, sigma } => -0.5 * ((u - mu) / sigma).powi(2),
            ThetaPrior::LogFlat => 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            ThetaPrior::LogNormal { mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                Ok(-(mu + sigma * z).exp())
            }
            ThetaPrior::LogFlat => domain("cannot sample θ from an improper prior; set an initial θ"),
        }
    }
}

/// Priors of the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub lambda: GammaParams,
    pub theta: ThetaPrior,
    /// Initial concentration, base measure, truncation and concentration prior.
    pub dp: DpHyper,
}

/// Sampler settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub schedule: BlockSchedule,
    /// Initial standard deviation of the `log(-θ)` random walk.
    pub theta_step: f64,
    /// Tune `theta_step` toward 25-40% acceptance during burn-in.
    pub adapt_theta: bool,
    /// Subordinator used to draw the initial series.
    pub init: AnalyticSubordinator,
    /// Initial `θ`; drawn from the prior when absent.
    pub init_theta: Option<f64>,
    /// Keep the per-time filtering marginals of every retained sample.
    pub store_states: bool,
}

impl ChainConfig {
    /// 120,000 iterations with the first 20,000 discarded.
    pub fn reference_protocol(init: AnalyticSubordinator) -> Self {
        ChainConfig {
            n_iter: 120_000,
            burn_in: 20_000,
            thin: 10,
            ..Self::quick(init)
        }
    }

    pub fn quick(init: AnalyticSubordinator) -> Self {
        ChainConfig {
            n_iter: 2_000,
            burn_in: 500,
            thin: 1,
            schedule: BlockSchedule::default(),
            theta_step: 0.2,
            adapt_theta: true,
            init,
            init_theta: None,
            store_states: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(config_err("chain.thin", "must be at least 1"));
        }
        if self.burn_in >= self.n_iter {
            return Err(config_err("chain.burn_in", "no samples would be retained (burn_in >= iterations)"));
        }
        if !(self.theta_step > 0.0) {
            return Err(config_err("chain.theta_step", "must be positive"));
        }
        if let Some(t) = self.init_theta {
            if !(t < 0.0) {
                return Err(config_err("chain.init_theta", "must be negative"));
            }
        }
        self.schedule.validate()?;
        self.init.validate()
    }
}

/// Per-interval moments and transitions under the current `θ`, plus the
/// filter snapshots `s_0..s_N`.
#[derive(Debug, Clone)]
struct LikelihoodCache {
    moments: Vec<ShotNoiseMoments>,
    transitions: Vec<Matrix2<f64>>,
    snapshots: Vec<MarginalKalmanState>,
}

impl LikelihoodCache {
    fn build(model: &LangevinModel, series: &JumpSeries, obs: &Observations) -> Result<Self> {
        let moments: Vec<ShotNoiseMoments> = (0..series.n_intervals()).map(|j| model.interval_moments(series, j)).collect();
        let transitions = interval_transitions(model.theta, series);
        let mut snapshots = Vec::with_capacity(obs.len() + 1);
        snapshots.push(model.initial_state());
        let tail = run_filter(model, obs, &transitions, |j| moments_ref(&moments, j), 0, model.initial_state())?;
        snapshots.extend(tail);
        Ok(LikelihoodCache {
            moments,
            transitions,
            snapshots,
        })
    }
}

fn moments_ref(m: &[ShotNoiseMoments], j: usize) -> ShotNoiseMoments {
    m[j]
}

fn interval_transitions(theta: f64, series: &JumpSeries) -> Vec<Matrix2<f64>> {
    (0..series.n_intervals())
        .map(|j| {
            let (s, t) = series.interval(j);
            transition_matrix(theta, t - s)
        })
        .collect()
}

/// Filters observations `start..N` from `init`, returning the states after
/// each of them.
fn run_filter<F>(
    model: &LangevinModel,
    obs: &Observations,
    transitions: &[Matrix2<f64>],
    moments: F,
    start: usize,
    init: MarginalKalmanState,
) -> Result<Vec<MarginalKalmanState>>
where
    F: Fn(usize) -> ShotNoiseMoments,
{
    let mut out = Vec::with_capacity(obs.len() - start);
    let mut state = init;
    for j in start..obs.len() {
        state = state
            .predict(&moments(j), &transitions[j])
            .update(obs.values[j], &EMISSION, model.obs_noise, j)?;
        out.push(state);
    }
    Ok(out)
}

/// Full sampler state.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub series: JumpSeries,
    pub measure: DiscreteLevyMeasure,
    pub dp_alpha: f64,
    pub theta: f64,
    cache: LikelihoodCache,
}

/// The fixed parts of the target: model settings (its `θ` is ignored in
/// favour of the chain's) and the data.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub model: LangevinModel,
    pub obs: &'a Observations,
}

impl<'a> Target<'a> {
    fn model_at(&self, theta: f64) -> LangevinModel {
        self.model.with_theta(theta)
    }
}

impl ChainState {
    pub fn new(series: JumpSeries, measure: DiscreteLevyMeasure, dp_alpha: f64, theta: f64, target: &Target) -> Result<Self> {
        if series.boundaries() != target.obs.times.as_slice() || series.origin() != target.obs.origin {
            return domain("series intervals must match the observation times");
        }
        series.check_subordinator()?;
        let cache = LikelihoodCache::build(&target.model_at(theta), &series, target.obs)?;
        Ok(ChainState {
            series,
            measure,
            dp_alpha,
            theta,
            cache,
        })
    }

    /// Cached log marginal likelihood of all observations.
    pub fn log_likelihood(&self, target: &Target) -> f64 {
        log_marginal(self.final_snapshot(), &target.model.nvm_prior, 1)
    }

    pub fn snapshots(&self) -> &[MarginalKalmanState] {
        &self.cache.snapshots
    }

    pub fn final_snapshot(&self) -> &MarginalKalmanState {
        self.cache.snapshots.last().expect("non-empty snapshots")
    }

    /// Log-likelihood from a from-scratch filter pass, for cache checks.
    pub fn recompute_log_likelihood(&self, target: &Target) -> Result<f64> {
        crate::kalman::series_log_marginal(&target.model_at(self.theta), &self.series, &target.obs.values)
    }
}

/// Proposal mechanism for replacing the jumps of a block of intervals.
pub trait BlockProposer {
    /// New groups for intervals `block`, one `Vec<Jump>` per interval.
    fn propose<R: Rng + ?Sized>(&self, series: &JumpSeries, block: Range<usize>, rng: &mut R) -> Vec<Vec<Jump>>;
}

/// Compound Poisson jumps on `(lo, hi]` from a discrete Lévy measure: a
/// `Poisson(λ (hi - lo))` count, uniform times, sizes from the normalized
/// atoms.
pub fn propose_block<R: Rng + ?Sized>(measure: &DiscreteLevyMeasure, span: (f64, f64), rng: &mut R) -> Vec<Jump> {
    let (lo, hi) = span;
    let mean = measure.rate * (hi - lo);
    if !(mean > 0.0) {
        return Vec::new();
    }
    let n = Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0);
    (0..n)
        .map(|_| {
            // 1 - u with u in [0, 1) puts the time in (lo, hi].
            let u: f64 = rng.random();
            let time = lo + (1.0 - u) * (hi - lo);
            Jump::new(measure.measure.sample(rng), time.min(hi))
        })
        .collect()
}

impl BlockProposer for DiscreteLevyMeasure {
    fn propose<R: Rng + ?Sized>(&self, series: &JumpSeries, block: Range<usize>, rng: &mut R) -> Vec<Vec<Jump>> {
        let lo = series.interval(block.start).0;
        let hi = series.interval(block.end - 1).1;
        let mut groups = vec![Vec::new(); block.len()];
        let bounds = &series.boundaries()[block.clone()];
        for jump in propose_block(self, (lo, hi), rng) {
            let k = bounds.partition_point(|&b| b < jump.time).min(block.len() - 1);
            groups[k].push(jump);
        }
        groups
    }
}

/// Acceptance probability `min(1, exp(log_ratio))`.
pub fn acceptance_probability(log_ratio: f64) -> f64 {
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < log_ratio
}

/// Counts of proposed and accepted moves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: u64,
    pub accepted: u64,
    pub failed: u64,
}

impl MoveStats {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn add(&mut self, other: MoveStats) {
        self.proposed += other.proposed;
        self.accepted += other.accepted;
        self.failed += other.failed;
    }
}

/// Redraws the DP concentration, the rate and the jump-size law given the
/// current series, and combines them into a new measure.
pub fn step_measure<R: Rng + ?Sized>(state: &mut ChainState, priors: &Priors, rng: &mut R) -> Result<()> {
    let (alpha, measure) = draw_measure(&state.series, state.dp_alpha, priors, rng)?;
    state.dp_alpha = alpha;
    state.measure = measure;
    Ok(())
}

fn draw_measure<R: Rng + ?Sized>(
    series: &JumpSeries,
    alpha: f64,
    priors: &Priors,
    rng: &mut R,
) -> Result<(f64, DiscreteLevyMeasure)> {
    let sizes = series.sizes();
    let alpha = if sizes.is_empty() {
        priors.dp.alpha_prior.sample(rng)
    } else {
        sample_alpha(distinct_count(&sizes), sizes.len(), alpha, &priors.dp.alpha_prior, rng)?
    };
    let rate = lambda_posterior(series, &priors.lambda).sample(rng);
    let hyper = DpHyper { alpha, ..priors.dp };
    let f = sample_posterior_dp(&sizes, &hyper, rng)?;
    Ok((alpha, combine_measure(rate, f)?))
}

/// One sweep of overlapping blocked MH updates of the jump series.
///
/// A proposal whose likelihood evaluation fails numerically is rejected and
/// counted in `failed`.
pub fn step_series<R, P>(state: &mut ChainState, target: &Target, schedule: &BlockSchedule, proposer: &P, rng: &mut R) -> MoveStats
where
    R: Rng + ?Sized,
    P: BlockProposer + ?Sized,
{
    let model = target.model_at(state.theta);
    let n = target.obs.len();
    let mut stats = MoveStats::default();
    let current_ll = |s: &ChainState| log_marginal(s.final_snapshot(), &model.nvm_prior, 1);
    for block in schedule.blocks(n) {
        stats.proposed += 1;
        let groups = proposer.propose(&state.series, block.clone(), rng);
        let new_moments: Vec<ShotNoiseMoments> = groups
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let t = state.series.interval(block.start + k).1;
                accumulate_moments(g, state.theta, t)
            })
            .collect();
        let cache = &state.cache;
        let candidate = run_filter(
            &model,
            target.obs,
            &cache.transitions,
            |j| {
                if block.contains(&j) {
                    new_moments[j - block.start]
                } else {
                    cache.moments[j]
                }
            },
            block.start,
            cache.snapshots[block.start],
        );
        let candidate = match candidate {
            Ok(c) => c,
            Err(_) => {
                stats.failed += 1;
                continue;
            }
        };
        let new_ll = log_marginal(candidate.last().expect("non-empty block"), &model.nvm_prior, 1);
        let log_ratio = new_ll - current_ll(state);
        if !log_ratio.is_nan() && accept(log_ratio, rng) {
            state
                .series
                .splice(block.start, groups)
                .expect("proposer keeps jumps inside their intervals");
            for (k, m) in new_moments.into_iter().enumerate() {
                state.cache.moments[block.start + k] = m;
            }
            state.cache.snapshots.truncate(block.start + 1);
            state.cache.snapshots.extend(candidate);
            stats.accepted += 1;
        }
    }
    stats
}

/// Random-walk MH on `log(-θ)` with step `scale`; returns whether the move
/// was accepted.
pub fn step_theta<R: Rng + ?Sized>(
    state: &mut ChainState,
    target: &Target,
    prior: &ThetaPrior,
    scale: f64,
    rng: &mut R,
) -> MoveStats {
    let u = (-state.theta).ln();
    let z: f64 = rng.sample(StandardNormal);
    let u_new = u + scale * z;
    let theta_new = -u_new.exp();
    let mut stats = MoveStats {
        proposed: 1,
        ..Default::default()
    };
    let model = target.model_at(theta_new);
    let candidate = LikelihoodCache::build(&model, &state.series, target.obs);
    let candidate = match candidate {
        Ok(c) => c,
        Err(_) => {
            stats.failed = 1;
            return stats;
        }
    };
    let new_ll = log_marginal(candidate.snapshots.last().expect("non-empty"), &model.nvm_prior, 1);
    let log_ratio = new_ll - state.log_likelihood(target) + prior.ln_density_log_scale(u_new) - prior.ln_density_log_scale(u);
    if !log_ratio.is_nan() && accept(log_ratio, rng) {
        state.theta = theta_new;
        state.cache = candidate;
        stats.accepted = 1;
    }
    stats
}

/// Univariate Student-t marginals of the extended state `(x, dx/dt, μ_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMarginal {
    pub loc: [f64; 3],
    pub scale: [f64; 3],
    pub dof: f64,
}

impl StateMarginal {
    pub fn from_snapshot(state: &MarginalKalmanState, model: &LangevinModel) -> Self {
        let t = student_t_filtering(state, &model.nvm_prior);
        StateMarginal {
            loc: [t.location[0], t.location[1], t.location[2]],
            scale: [t.scale[(0, 0)].sqrt(), t.scale[(1, 1)].sqrt(), t.scale[(2, 2)].sqrt()],
            dof: t.dof,
        }
    }
}

/// One retained MCMC sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetainedSample {
    pub iteration: usize,
    pub theta: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub log_likelihood: f64,
    pub n_jumps: usize,
    pub measure: DiscreteLevyMeasure,
    pub sigma_w2: SigmaW2Posterior,
    pub mu_w: MuWPosterior,
    /// Filtering marginals at each observation time (empty unless stored).
    pub states: Vec<StateMarginal>,
    /// Subordinator path on the observation grid.
    pub path: Vec<f64>,
}

/// Posterior averages collected from the retained samples.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PosteriorSummary {
    /// `[sample][time]` filtering marginals.
    pub state_filter_mixture: Vec<Vec<StateMarginal>>,
    pub sigma_w2_mixture: Vec<SigmaW2Posterior>,
    pub mu_w_mixture: Vec<MuWPosterior>,
    pub theta_trace: Vec<f64>,
    pub alpha_trace: Vec<f64>,
    pub lambda_trace: Vec<f64>,
    pub loglik_trace: Vec<f64>,
    pub measures: Vec<DiscreteLevyMeasure>,
    pub paths: Vec<Vec<f64>>,
}

impl PosteriorSummary {
    pub fn n_samples(&self) -> usize {
        self.theta_trace.len()
    }

    fn push(&mut self, s: RetainedSample) {
        self.theta_trace.push(s.theta);
        self.alpha_trace.push(s.alpha);
        self.lambda_trace.push(s.lambda);
        self.loglik_trace.push(s.log_likelihood);
        self.sigma_w2_mixture.push(s.sigma_w2);
        self.mu_w_mixture.push(s.mu_w);
        self.measures.push(s.measure);
        self.paths.push(s.path);
        if !s.states.is_empty() {
            self.state_filter_mixture.push(s.states);
        }
    }

    /// Posterior means of the extended state at every observation time.
    pub fn state_means(&self) -> Vec<[f64; 3]> {
        let n_s = self.state_filter_mixture.len();
        let n_t = self.state_filter_mixture.first().map_or(0, Vec::len);
        (0..n_t)
            .map(|t| {
                let mut m = [0.0; 3];
                for sample in &self.state_filter_mixture {
                    for (c, v) in m.iter_mut().enumerate() {
                        *v += sample[t].loc[c] / n_s as f64;
                    }
                }
                m
            })
            .collect()
    }

    pub fn theta_mean(&self) -> f64 {
        self.theta_trace.iter().sum::<f64>() / self.theta_trace.len().max(1) as f64
    }
}

/// Equal-weight Student-t mixture for one component of the extended state at
/// one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMixture {
    pub components: Vec<(f64, f64, f64)>,
}

impl StateMixture {
    pub fn density(&self, x: f64) -> f64 {
        self.components.iter().map(|&(l, s, d)| student_t_pdf(x, l, s, d)).sum::<f64>() / self.components.len() as f64
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components.iter().map(|&(l, s, d)| student_t_cdf(x, l, s, d)).sum::<f64>() / self.components.len() as f64
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.0).sum::<f64>() / self.components.len() as f64
    }

    /// Quantile by bisection on the mixture CDF.
    pub fn quantile(&self, q: f64) -> f64 {
        let spread = self.components.iter().map(|c| c.1).fold(0.0, f64::max);
        let (mut lo, mut hi) = self
            .components
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), c| (a.min(c.0), b.max(c.0)));
        lo -= 50.0 * spread + 1.0;
        hi += 50.0 * spread + 1.0;
        let tol = 1e-12 * (hi - lo).max(1.0);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Filtering mixture of `component` (0 = position, 1 = velocity, 2 = `μ_w`)
/// at observation `t_index`.
pub fn posterior_state_mixture(summary: &PosteriorSummary, t_index: usize, component: usize) -> Result<StateMixture> {
    if summary.state_filter_mixture.is_empty() {
        return domain("no retained state marginals");
    }
    if component > 2 || t_index >= summary.state_filter_mixture[0].len() {
        return domain("state index out of range");
    }
    Ok(StateMixture {
        components: summary
            .state_filter_mixture
            .iter()
            .map(|s| {
                let m = &s[t_index];
                (m.loc[component], m.scale[component], m.dof)
            })
            .collect(),
    })
}

/// Output of [`run_chain`].
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub summary: PosteriorSummary,
    pub final_state: ChainState,
    pub series_moves: MoveStats,
    pub theta_moves: MoveStats,
    pub final_theta_step: f64,
}

fn retained_sample(state: &ChainState, target: &Target, iteration: usize, store_states: bool) -> RetainedSample {
    let model = target.model_at(state.theta);
    let last = state.final_snapshot();
    let states = if store_states {
        state.cache.snapshots[1..]
            .iter()
            .map(|s| StateMarginal::from_snapshot(s, &model))
            .collect()
    } else {
        Vec::new()
    };
    let merged = state.measure.masses();
    let total: f64 = merged.iter().map(|m| m.1).sum();
    let measure = DiscreteLevyMeasure {
        rate: state.measure.rate,
        measure: DiscreteMeasure::new(
            merged.iter().map(|m| m.1 / total).collect(),
            merged.iter().map(|m| m.0).collect(),
        )
        .unwrap_or_else(|_| state.measure.measure.clone()),
    };
    RetainedSample {
        iteration,
        theta: state.theta,
        alpha: state.dp_alpha,
        lambda: state.measure.rate,
        log_likelihood: state.log_likelihood(target),
        n_jumps: state.series.len(),
        measure,
        sigma_w2: crate::kalman::sigma_w2_posterior(last, &model.nvm_prior, 1),
        mu_w: last.mu_w_posterior(),
        states,
        path: state.series.path_on(&target.obs.times),
    }
}

/// Runs the sampler, handing every retained sample to `sink` before it is
/// folded into the summary.
///
/// Random draws come from the named substreams `init`, `measure`, `series`
/// and `theta` of `seed`.
pub fn run_chain_with<F>(
    obs: &Observations,
    model: &LangevinModel,
    priors: &Priors,
    config: &ChainConfig,
    seed: u64,
    mut sink: F,
) -> Result<ChainOutput>
where
    F: FnMut(&RetainedSample) -> Result<()>,
{
    config.validate()?;
    priors.dp.validate()?;
    let mut init_rng = substream(seed, "init");
    let mut measure_rng = substream(seed, "measure");
    let mut series_rng = substream(seed, "series");
    let mut theta_rng = substream(seed, "theta");

    let theta0 = match config.init_theta {
        Some(t) => t,
        None => priors.theta.sample(&mut init_rng)?,
    };
    let target = Target {
        model: model.with_theta(theta0),
        obs,
    };
    target.model.validate()?;
    let series = crate::sim::simulate_subordinator_on(&config.init, obs.origin, obs.times.clone(), &mut init_rng)?;
    let (alpha0, measure0) = draw_measure(&series, priors.dp.alpha, priors, &mut init_rng)?;
    let mut state = ChainState::new(series, measure0, alpha0, theta0, &target)?;

    let mut summary = PosteriorSummary::default();
    let mut series_moves = MoveStats::default();
    let mut theta_moves = MoveStats::default();
    let mut window = MoveStats::default();
    let mut theta_step = config.theta_step;

    for iter in 0..config.n_iter {
        step_measure(&mut state, priors, &mut measure_rng)?;
        let measure = state.measure.clone();
        series_moves.add(step_series(&mut state, &target, &config.schedule, &measure, &mut series_rng));
        let t = step_theta(&mut state, &target, &priors.theta, theta_step, &mut theta_rng);
        theta_moves.add(t);
        if iter < config.burn_in && config.adapt_theta {
            window.add(t);
            if window.proposed == 100 {
                let rate = window.rate();
                if rate < 0.25 {
                    theta_step *= 0.8;
                } else if rate > 0.40 {
                    theta_step *= 1.25;
                }
                window = MoveStats::default();
            }
        }
        if iter >= config.burn_in && (iter - config.burn_in) % config.thin == 0 {
            let sample = retained_sample(&state, &target, iter, config.store_states);
            sink(&sample)?;
            summary.push(sample);
        }
    }
    if summary.n_samples() == 0 {
        return Err(LevyError::Config {
            field: "chain".into(),
            reason: "no samples retained".into(),
        });
    }
    Ok(ChainOutput {
        summary,
        final_state: state,
        series_moves,
        theta_moves,
        final_theta_step: theta_step,
    })
}

pub fn run_chain(obs: &Observations, model: &LangevinModel, priors: &Priors, config: &ChainConfig, seed: u64) -> Result<ChainOutput> {
    run_chain_with(obs, model, priors, config, seed, |_| Ok(()))
}

/// Builds a chain state at a given series, measure and `θ`, for driving the
/// individual steps directly.
pub fn state_for(target: &Target, series: JumpSeries, measure: DiscreteLevyMeasure, dp_alpha: f64, theta: f64) -> Result<ChainState> {
    ChainState::new(series, measure, dp_alpha, theta, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::{NvmPrior, StatePrior};
    use crate::sim::SubordinatorFamily;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> LangevinModel {
        LangevinModel {
            theta: -1.0,
            obs_noise: 0.1,
            state_prior: StatePrior::default(),
            nvm_prior: NvmPrior::default(),
        }
    }

    fn toy_obs() -> Observations {
        let times: Vec<f64> = (1..=12).map(|i| i as f64 * 0.5).collect();
        let values: Vec<f64> = times.iter().map(|t| (t * 0.7).sin()).collect();
        Observations::new(0.0, times, values).unwrap()
    }

    #[test]
    fn schedule_covers_with_overlap() {
        let s = BlockSchedule::new(5, 2).unwrap();
        assert_eq!(s.blocks(12), vec![0..5, 3..8, 6..11, 9..12]);
        assert_eq!(BlockSchedule::new(1, 0).unwrap().blocks(3), vec![0..1, 1..2, 2..3]);
        assert_eq!(s.blocks(3), vec![0..3]);
        assert!(BlockSchedule::new(3, 3).is_err());
    }

    #[test]
    fn empty_measure_proposes_nothing() {
        let q = DiscreteLevyMeasure::point(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(propose_block(&q, (0.0, 3.0), &mut rng).is_empty());
    }

    #[test]
    fn single_atom_proposals() {
        let q = DiscreteLevyMeasure::point(5.0, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jumps = propose_block(&q, (1.0, 2.0), &mut rng);
        assert!(jumps.iter().all(|j| j.size == 0.7 && j.time > 1.0 && j.time <= 2.0));
    }

    #[test]
    fn acceptance_probability_bounds() {
        assert_eq!(acceptance_probability(0.0), 1.0);
        assert_eq!(acceptance_probability(1e4), 1.0);
        assert_eq!(acceptance_probability(-1e4), 0.0);
        let p = acceptance_probability(-0.5);
        assert!(p > 0.0 && p < 1.0);
    }

    struct Replay(Vec<Vec<Jump>>);

    impl BlockProposer for Replay {
        fn propose<R: Rng + ?Sized>(&self, _: &JumpSeries, block: Range<usize>, _: &mut R) -> Vec<Vec<Jump>> {
            self.0[block].to_vec()
        }
    }

    #[test]
    fn identical_block_always_accepted() {
        let obs = toy_obs();
        let target = Target { model: model(), obs: &obs };
        let series = JumpSeries::from_jumps(0.0, obs.times.clone(), vec![Jump::new(0.5, 1.2), Jump::new(0.2, 4.1)]).unwrap();
        let groups = series.groups().to_vec();
        let q = DiscreteLevyMeasure::point(1.0, 0.5).unwrap();
        let mut state = state_for(&target, series, q, 1.0, -1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stats = step_series(&mut state, &target, &BlockSchedule::default(), &Replay(groups), &mut rng);
        assert_eq!(stats.accepted, stats.proposed);
    }

    #[test]
    fn cache_matches_recompute_after_moves() {
        let obs = toy_obs();
        let target = Target { model: model(), obs: &obs };
        let q = DiscreteLevyMeasure::point(2.0, 0.3).unwrap();
        let series = obs.empty_series();
        let mut state = state_for(&target, series, q.clone(), 1.0, -1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut accepted = 0;
        for _ in 0..50 {
            accepted += step_series(&mut state, &target, &BlockSchedule::default(), &q, &mut rng).accepted;
            step_theta(&mut state, &target, &ThetaPrior::default(), 0.3, &mut rng);
            let full = state.recompute_log_likelihood(&target).unwrap();
            assert_abs_diff_eq!(state.log_likelihood(&target), full, epsilon = 1e-9);
        }
        assert!(accepted > 0);
    }

    #[test]
    fn theta_self_proposal_accepted() {
        let obs = toy_obs();
        let target = Target { model: model(), obs: &obs };
        let q = DiscreteLevyMeasure::point(1.0, 0.3).unwrap();
        let mut state = state_for(&target, obs.empty_series(), q, 1.0, -0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // A vanishing step proposes θ' = θ up to rounding.
        let stats = step_theta(&mut state, &target, &ThetaPrior::LogFlat, 1e-300, &mut rng);
        assert_eq!(stats.accepted, 1);
    }

    #[test]
    fn degenerate_burn_in_rejected() {
        let init = AnalyticSubordinator::new(SubordinatorFamily::Gamma { c: 1.0, beta: 1.0 }, 0.1).unwrap();
        let mut cfg = ChainConfig::quick(init);
        cfg.n_iter = 10;
        cfg.burn_in = 10;
        assert!(cfg.validate().is_err());
        let p = ChainConfig::reference_protocol(init);
        assert_eq!((p.n_iter, p.burn_in), (120_000, 20_000));
    }

    #[test]
    fn mixture_single_component_is_student_t() {
        let m = StateMixture {
            components: vec![(0.5, 2.0, 5.0)],
        };
        assert_abs_diff_eq!(m.density(1.3), student_t_pdf(1.3, 0.5, 2.0, 5.0), epsilon = 1e-15);
        assert_abs_diff_eq!(m.quantile(0.5), 0.5, epsilon = 1e-9);
    }

    #[test]
    fn run_chain_is_reproducible() {
        let obs = toy_obs();
        let init = AnalyticSubordinator::new(SubordinatorFamily::Gamma { c: 1.0, beta: 2.0 }, 0.05).unwrap();
        let mut cfg = ChainConfig::quick(init);
        cfg.n_iter = 60;
        cfg.burn_in = 20;
        let priors = Priors {
            lambda: GammaParams { shape: 1.0, rate: 0.5 },
            theta: ThetaPrior::default(),
            dp: DpHyper {
                alpha: 1.0,
                base: GammaParams { shape: 1.0, rate: 2.0 },
                truncation: crate::dp::Truncation::default(),
                alpha_prior: GammaParams { shape: 1.0, rate: 1.0 },
            },
        };
        let a = run_chain(&obs, &model(), &priors, &cfg, 42).unwrap();
        let b = run_chain(&obs, &model(), &priors, &cfg, 42).unwrap();
        assert_eq!(a.summary.theta_trace, b.summary.theta_trace);
        assert_eq!(a.summary.loglik_trace, b.summary.loglik_trace);
        assert_eq!(a.summary.n_samples(), 40);
        assert_eq!(a.summary.state_filter_mixture[0].len(), obs.len());
    }
}
