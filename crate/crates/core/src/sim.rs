//! Jump-series simulation and the shot-noise response of the Langevin system.
//!
//! A subordinator is represented by its jumps `(Z_i, V_i)`. Infinite-activity
//! families are generated by the shot-noise series with thinning and truncated
//! at a smallest retained jump size `ε`, which makes every simulated series a
//! compound Poisson path. The NVM process shares the jump times and replaces
//! each size by `μ_w Z_i + σ_w √Z_i U_i`.
//!
//! Conditional on the jumps the Langevin state `X = (x, dx/dt)` is Gaussian.
//! [`transition_moments`] returns the normalized mean and covariance of the
//! jump contribution over an interval, i.e. without the `μ_w` and `σ_w²`
//! factors.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::numeric;

/// Below this `|θ dt|` the transition matrix uses its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub size: f64,
    pub time: f64,
}

impl Jump {
    pub fn new(size: f64, time: f64) -> Self {
        Jump { size, time }
    }
}

/// Jumps grouped by the observation interval `(t_{j-1}, t_j]` they fall in.
///
/// `origin` is `t_0`, the time at which the state prior is placed, and
/// `boundaries` are the observation times `t_1 < ... < t_N`. Jumps within a
/// group are not sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSeries {
    origin: f64,
    boundaries: Vec<f64>,
    groups: Vec<Vec<Jump>>,
}

impl JumpSeries {
    pub fn empty(origin: f64, boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.is_empty() {
            return domain("a jump series needs at least one interval");
        }
        let mut prev = origin;
        for &b in &boundaries {
            if !(b > prev) {
                return domain(format!("interval boundaries must be strictly increasing (got {b} after {prev})"));
            }
            prev = b;
        }
        let groups = vec![Vec::new(); boundaries.len()];
        Ok(JumpSeries {
            origin,
            boundaries,
            groups,
        })
    }

    /// Groups `jumps` into the intervals defined by `origin` and `boundaries`.
    pub fn from_jumps(origin: f64, boundaries: Vec<f64>, jumps: impl IntoIterator<Item = Jump>) -> Result<Self> {
        let mut series = Self::empty(origin, boundaries)?;
        for jump in jumps {
            let j = series.interval_of(jump.time).ok_or_else(|| {
                crate::error::LevyError::Domain(format!(
                    "jump time {} outside ({}, {}]",
                    jump.time,
                    series.origin,
                    series.horizon()
                ))
            })?;
            series.groups[j].push(jump);
        }
        Ok(series)
    }

    /// Builds a series from pre-grouped jumps, checking every group.
    pub fn from_groups(origin: f64, boundaries: Vec<f64>, groups: Vec<Vec<Jump>>) -> Result<Self> {
        let mut series = Self::empty(origin, boundaries)?;
        if groups.len() != series.groups.len() {
            return domain("group count does not match interval count");
        }
        for (j, group) in groups.iter().enumerate() {
            series.check_group(j, group)?;
        }
        series.groups = groups;
        Ok(series)
    }

    /// A single-interval series over `[0, horizon]`.
    pub fn single(horizon: f64, jumps: Vec<Jump>) -> Result<Self> {
        Self::from_jumps(0.0, vec![horizon], jumps)
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn horizon(&self) -> f64 {
        *self.boundaries.last().expect("non-empty boundaries")
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn n_intervals(&self) -> usize {
        self.boundaries.len()
    }

    /// The interval `(t_{j-1}, t_j]` as a pair.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let lo = if j == 0 { self.origin } else { self.boundaries[j - 1] };
        (lo, self.boundaries[j])
    }

    pub fn groups(&self) -> &[Vec<Jump>] {
        &self.groups
    }

    pub fn group(&self, j: usize) -> &[Jump] {
        &self.groups[j]
    }

    pub fn jumps(&self) -> impl Iterator<Item = &Jump> {
        self.groups.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(Vec::is_empty)
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.jumps().map(|j| j.size).collect()
    }

    /// Index of the interval containing `time`; the origin itself belongs to
    /// the first interval.
    pub fn interval_of(&self, time: f64) -> Option<usize> {
        if time < self.origin || time > self.horizon() || time.is_nan() {
            return None;
        }
        Some(self.boundaries.partition_point(|&b| b < time))
    }

    fn check_group(&self, j: usize, group: &[Jump]) -> Result<()> {
        let (lo, hi) = self.interval(j);
        for jump in group {
            let inside = jump.time <= hi && (jump.time > lo || (j == 0 && jump.time == lo));
            if !inside {
                return domain(format!("jump time {} outside interval {j} ({lo}, {hi}]", jump.time));
            }
        }
        Ok(())
    }

    /// Replaces the groups of intervals `start..start + groups.len()`.
    pub fn splice(&mut self, start: usize, groups: Vec<Vec<Jump>>) -> Result<()> {
        if start + groups.len() > self.groups.len() {
            return domain("splice extends past the last interval");
        }
        for (k, group) in groups.iter().enumerate() {
            self.check_group(start + k, group)?;
        }
        for (k, group) in groups.into_iter().enumerate() {
            self.groups[start + k] = group;
        }
        Ok(())
    }

    /// Fails unless every jump size is strictly positive.
    pub fn check_subordinator(&self) -> Result<()> {
        match self.jumps().find(|j| !(j.size > 0.0)) {
            Some(j) => domain(format!("subordinator jump sizes must be positive (got {})", j.size)),
            None => Ok(()),
        }
    }

    /// Path `Z(t) = Σ Z_i I(V_i ≤ t)` evaluated on `grid`.
    pub fn path_on(&self, grid: &[f64]) -> Vec<f64> {
        let mut jumps: Vec<&Jump> = self.jumps().collect();
        jumps.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut k = 0;
        let mut acc = 0.0;
        let mut sorted_grid: Vec<(usize, f64)> = grid.iter().copied().enumerate().collect();
        sorted_grid.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut values = vec![0.0; grid.len()];
        for (idx, t) in sorted_grid {
            while k < jumps.len() && jumps[k].time <= t {
                acc += jumps[k].size;
                k += 1;
            }
            values[idx] = acc;
        }
        values
    }
}

/// Scalar observations `y_j` at strictly increasing times `t_j`, with the
/// state prior placed at `origin < t_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub origin: f64,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Observations {
    pub fn new(origin: f64, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return domain("observations need matching, non-empty times and values");
        }
        let mut prev = origin;
        for &t in &times {
            if !(t > prev) {
                return domain(format!("observation times must be strictly increasing after the origin (got {t} after {prev})"));
            }
            prev = t;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("observation values must be finite");
        }
        Ok(Observations { origin, times, values })
    }

    /// Uses one mean gap before the first time as the origin.
    pub fn with_leading_gap(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let gap = if times.len() > 1 {
            (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
        } else {
            1.0
        };
        let origin = times.first().copied().unwrap_or(0.0) - gap;
        Self::new(origin, times, values)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn empty_series(&self) -> JumpSeries {
        JumpSeries::empty(self.origin, self.times.clone()).expect("validated observation times")
    }
}

/// Parametric subordinator families with explicit Lévy densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubordinatorFamily {
    /// `Q(x) = C x^{-1} e^{-βx}`.
    Gamma { c: f64, beta: f64 },
    /// `Q(x) = C x^{-1-κ} e^{-γx}` with `0 < κ < 1`.
    TemperedStable { c: f64, kappa: f64, gamma: f64 },
    /// Compound Poisson with rate `rate` and every jump equal to `size`.
    PointMass { rate: f64, size: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticSubordinator {
    pub family: SubordinatorFamily,
    /// Smallest retained jump size `ε`.
    pub truncation: f64,
}

impl AnalyticSubordinator {
    pub fn new(family: SubordinatorFamily, truncation: f64) -> Result<Self> {
        let subord = AnalyticSubordinator { family, truncation };
        subord.validate()?;
        Ok(subord)
    }

    /// Chooses `ε` so that the truncated activity over `window` time units is
    /// at most `max_jumps`.
    pub fn with_activity_bound(family: SubordinatorFamily, window: f64, max_jumps: f64) -> Result<Self> {
        let probe = AnalyticSubordinator {
            family,
            truncation: 1.0,
        };
        probe.validate()?;
        if let SubordinatorFamily::PointMass { size, .. } = family {
            return Self::new(family, size);
        }
        let target = max_jumps / window;
        // Activity is decreasing in ε: bisect on log ε.
        let (mut lo, mut hi) = (-40.0f64, 5.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            probe_activity(family, mid.exp())
                .map(|a| if a > target { lo = mid } else { hi = mid })?;
            if hi - lo < 1e-10 {
                break;
            }
        }
        Self::new(family, hi.exp())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.truncation > 0.0) {
            return domain("truncation ε must be positive (the untruncated series has infinitely many jumps)");
        }
        let ok = match self.family {
            SubordinatorFamily::Gamma { c, beta } => c > 0.0 && beta > 0.0,
            SubordinatorFamily::TemperedStable { c, kappa, gamma } => {
                c > 0.0 && gamma > 0.0 && kappa > 0.0 && kappa < 1.0
            }
            SubordinatorFamily::PointMass { rate, size } => rate > 0.0 && size > 0.0,
        };
        if ok {
            Ok(())
        } else {
            domain(format!("invalid subordinator parameters {:?}", self.family))
        }
    }

    /// Lévy density `Q(x)` of the untruncated family (zero for the point mass).
    pub fn levy_density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self.family {
            SubordinatorFamily::Gamma { c, beta } => c * (-beta * x).exp() / x,
            SubordinatorFamily::TemperedStable { c, kappa, gamma } => c * x.powf(-1.0 - kappa) * (-gamma * x).exp(),
            SubordinatorFamily::PointMass { .. } => 0.0,
        }
    }

    /// Upper tail `∫_{max(x, ε)}^∞ Q(u) du` of the truncated measure.
    pub fn tail(&self, x: f64) -> Result<f64> {
        let from = x.max(self.truncation);
        match self.family {
            SubordinatorFamily::PointMass { rate, size } => Ok(if from <= size { rate } else { 0.0 }),
            family => probe_activity(family, from),
        }
    }

    /// Truncated activity `λ_ε = ∫_ε^∞ Q(x) dx`.
    pub fn truncated_activity(&self) -> Result<f64> {
        self.tail(self.truncation)
    }

    /// Jumps of the truncated process on `[0, horizon]`.
    pub fn sample_jumps<R: Rng + ?Sized>(&self, horizon: f64, rng: &mut R) -> Result<Vec<Jump>> {
        self.validate()?;
        if !(horizon > 0.0) {
            return domain("horizon must be positive");
        }
        let eps = self.truncation;
        let mut jumps = Vec::new();
        match self.family {
            SubordinatorFamily::PointMass { rate, size } => {
                if size >= eps {
                    let n = poisson_count(rate * horizon, rng)?;
                    for _ in 0..n {
                        jumps.push(Jump::new(size, rng.random::<f64>() * horizon));
                    }
                }
            }
            SubordinatorFamily::Gamma { c, beta } => {
                // Dominating density C/(x(1+βx)) has tail C log(1 + 1/(βx)).
                let mut epoch = 0.0;
                loop {
                    let e: f64 = Exp1.sample(rng);
                    epoch += e;
                    let x = 1.0 / (beta * (epoch / (c * horizon)).exp_m1());
                    if x < eps {
                        break;
                    }
                    let accept = (1.0 + beta * x) * (-beta * x).exp();
                    if rng.random::<f64>() < accept {
                        jumps.push(Jump::new(x, rng.random::<f64>() * horizon));
                    }
                }
            }
            SubordinatorFamily::TemperedStable { c, kappa, gamma } => {
                // Stable dominating density C x^{-1-κ} has tail (C/κ) x^{-κ}.
                let mut epoch = 0.0;
                loop {
                    let e: f64 = Exp1.sample(rng);
                    epoch += e;
                    let x = (kappa * epoch / (c * horizon)).powf(-1.0 / kappa);
                    if x < eps {
                        break;
                    }
                    if rng.random::<f64>() < (-gamma * x).exp() {
                        jumps.push(Jump::new(x, rng.random::<f64>() * horizon));
                    }
                }
            }
        }
        Ok(jumps)
    }
}

fn probe_activity(family: SubordinatorFamily, from: f64) -> Result<f64> {
    let subord = AnalyticSubordinator {
        family,
        truncation: from,
    };
    match family {
        SubordinatorFamily::PointMass { rate, size } => Ok(if from <= size { rate } else { 0.0 }),
        _ => {
            // Split at 1 so the x^{-1-κ} singularity near ε is resolved on a finite piece.
            let split = from.max(1.0);
            let near = if split > from {
                numeric::integrate(|x| subord.levy_density(x), from, split, 1e-13, 1e-12)?
            } else {
                0.0
            };
            let far = numeric::integrate_to_inf(|x| subord.levy_density(x), split, 1e-14, 1e-12)?;
            Ok(near + far)
        }
    }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean < 0.0 || !mean.is_finite() {
        return domain(format!("Poisson mean must be finite and nonnegative (got {mean})"));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let p = Poisson::new(mean).map_err(|e| crate::error::LevyError::Domain(e.to_string()))?;
    Ok(p.sample(rng) as u64)
}

/// Compound Poisson process on `[0, horizon]` with rate `rate` and i.i.d.
/// sizes drawn by `size_sampler`.
pub fn simulate_compound_poisson<R, F>(rate: f64, horizon: f64, mut size_sampler: F, rng: &mut R) -> Result<JumpSeries>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> f64,
{
    if rate < 0.0 {
        return domain("rate must be nonnegative");
    }
    if !(horizon > 0.0) {
        return domain("horizon must be positive");
    }
    let n = poisson_count(rate * horizon, rng)?;
    let mut jumps = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let time = rng.random::<f64>() * horizon;
        let size = size_sampler(rng);
        jumps.push(Jump::new(size, time));
    }
    JumpSeries::single(horizon, jumps)
}

/// Truncated subordinator on the single interval `[0, horizon]`.
pub fn simulate_subordinator<R: Rng + ?Sized>(subord: &AnalyticSubordinator, horizon: f64, rng: &mut R) -> Result<JumpSeries> {
    let jumps = subord.sample_jumps(horizon, rng)?;
    JumpSeries::single(horizon, jumps)
}

/// Truncated subordinator grouped over the observation intervals of
/// `(origin, boundaries)`.
pub fn simulate_subordinator_on<R: Rng + ?Sized>(
    subord: &AnalyticSubordinator,
    origin: f64,
    boundaries: Vec<f64>,
    rng: &mut R,
) -> Result<JumpSeries> {
    let span = boundaries.last().copied().unwrap_or(origin) - origin;
    let jumps = subord.sample_jumps(span, rng)?;
    JumpSeries::from_jumps(origin, boundaries, jumps.into_iter().map(|j| Jump::new(j.size, origin + j.time)))
}

/// `n` observation times after `origin` with exponential gaps of mean `mean_gap`.
pub fn irregular_times<R: Rng + ?Sized>(origin: f64, n: usize, mean_gap: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(mean_gap > 0.0) || !mean_gap.is_finite() {
        return domain("mean gap must be positive and finite");
    }
    let mut t = origin;
    Ok((0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            t += mean_gap * e;
            t
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvmParams {
    pub mu_w: f64,
    pub sigma_w2: f64,
}

impl NvmParams {
    pub fn new(mu_w: f64, sigma_w2: f64) -> Result<Self> {
        if !(sigma_w2 >= 0.0) || !mu_w.is_finite() {
            return domain("σ_w² must be nonnegative and μ_w finite");
        }
        Ok(NvmParams { mu_w, sigma_w2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LangevinParams {
    /// Mean-reversion parameter, negative for a stable system.
    pub theta: f64,
    /// Observation noise variance relative to `σ_w²`.
    pub obs_noise: f64,
}

impl LangevinParams {
    pub fn new(theta: f64, obs_noise: f64) -> Result<Self> {
        if !(theta < 0.0) {
            return domain("θ must be negative for a stable Langevin system");
        }
        if !(obs_noise >= 0.0) {
            return domain("observation noise must be nonnegative");
        }
        Ok(LangevinParams { theta, obs_noise })
    }
}

/// NVM series with pinned standard-normal draws, `J_i = μ_w Z_i + σ_w √Z_i u_i`.
pub fn subordinate_with_normals(series: &JumpSeries, nvm: &NvmParams, normals: &[f64]) -> Result<JumpSeries> {
    series.check_subordinator()?;
    if normals.len() != series.len() {
        return domain("one normal draw per jump is required");
    }
    let sigma = nvm.sigma_w2.sqrt();
    let mut k = 0;
    let groups = series
        .groups()
        .iter()
        .map(|g| {
            g.iter()
                .map(|j| {
                    let u = normals[k];
                    k += 1;
                    Jump::new(nvm.mu_w * j.size + sigma * j.size.sqrt() * u, j.time)
                })
                .collect()
        })
        .collect();
    Ok(JumpSeries {
        origin: series.origin,
        boundaries: series.boundaries.clone(),
        groups,
    })
}

/// Passes a subordinator series through the NVM subordination mechanism.
pub fn subordinate_to_nvm<R: Rng + ?Sized>(series: &JumpSeries, nvm: &NvmParams, rng: &mut R) -> Result<JumpSeries> {
    let normals: Vec<f64> = (0..series.len()).map(|_| rng.sample(StandardNormal)).collect();
    subordinate_with_normals(series, nvm, &normals)
}

/// `exp(A dt)` for `A = [[0, 1], [0, θ]]`.
pub fn transition_matrix(theta: f64, dt: f64) -> Matrix2<f64> {
    let r = impulse_response(theta, dt);
    Matrix2::new(1.0, r[0], 0.0, r[1])
}

/// `exp(A dt) h` with `h = (0, 1)`.
pub fn impulse_response(theta: f64, dt: f64) -> Vector2<f64> {
    let z = theta * dt;
    let first = if z.abs() < SERIES_THRESHOLD {
        dt * (1.0 + z / 2.0 + z * z / 6.0)
    } else {
        z.exp_m1() / theta
    };
    Vector2::new(first, z.exp())
}

/// Normalized shot-noise moments of an interval: `m̄ = Σ Z_i e^{A(t-V_i)} h`
/// and `C̄ = Σ Z_i (e^{A(t-V_i)} h)(e^{A(t-V_i)} h)^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShotNoiseMoments {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
}

impl ShotNoiseMoments {
    pub fn zero() -> Self {
        ShotNoiseMoments {
            mean: Vector2::zeros(),
            cov: Matrix2::zeros(),
        }
    }

    /// Moments with the NVM factors restored: `(μ_w m̄, σ_w² C̄)`.
    pub fn scaled(&self, nvm: &NvmParams) -> (Vector2<f64>, Matrix2<f64>) {
        (self.mean * nvm.mu_w, self.cov * nvm.sigma_w2)
    }
}

/// Moments of the jumps in `block` as seen at time `t`, without range checks.
pub fn accumulate_moments<'a>(block: impl IntoIterator<Item = &'a Jump>, theta: f64, t: f64) -> ShotNoiseMoments {
    let mut m = ShotNoiseMoments::zero();
    for jump in block {
        let g = impulse_response(theta, t - jump.time);
        m.mean += g * jump.size;
        m.cov += g * g.transpose() * jump.size;
    }
    m
}

/// Moments of the jumps in `(s, t]`, rejecting any jump outside the interval.
pub fn transition_moments(block: &[Jump], theta: f64, s: f64, t: f64) -> Result<ShotNoiseMoments> {
    if let Some(j) = block.iter().find(|j| !(j.time > s && j.time <= t)) {
        return domain(format!("jump at {} lies outside ({s}, {t}]", j.time));
    }
    Ok(accumulate_moments(block, theta, t))
}

/// Latent states and noisy observations at the series' interval boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPath {
    pub times: Vec<f64>,
    pub states: Vec<Vector2<f64>>,
    pub observations: Vec<f64>,
}

/// Forward simulation of the NVM-driven Langevin model at the boundaries of
/// `series`, starting from `x0` at the series origin.
///
/// The jump contribution of each interval is drawn as `Σ J_i e^{A(t-V_i)} h`
/// with NVM sizes `J_i`, which has exactly the conditional law
/// `N(μ_w m̄, σ_w² C̄)`.
pub fn simulate_ssm<R: Rng + ?Sized>(
    series: &JumpSeries,
    params: &LangevinParams,
    nvm: &NvmParams,
    x0: Vector2<f64>,
    rng: &mut R,
) -> Result<SimulatedPath> {
    series.check_subordinator()?;
    let sigma = nvm.sigma_w2.sqrt();
    let noise_sd = (nvm.sigma_w2 * params.obs_noise).sqrt();
    let mut x = x0;
    let mut prev = series.origin();
    let mut path = SimulatedPath {
        times: Vec::with_capacity(series.n_intervals()),
        states: Vec::with_capacity(series.n_intervals()),
        observations: Vec::with_capacity(series.n_intervals()),
    };
    for (j, &t) in series.boundaries().iter().enumerate() {
        x = transition_matrix(params.theta, t - prev) * x;
        for jump in series.group(j) {
            let u: f64 = rng.sample(StandardNormal);
            let size = nvm.mu_w * jump.size + sigma * jump.size.sqrt() * u;
            x += impulse_response(params.theta, t - jump.time) * size;
        }
        let v: f64 = rng.sample(StandardNormal);
        path.times.push(t);
        path.states.push(x);
        path.observations.push(x[0] + noise_sd * v);
        prev = t;
    }
    Ok(path)
}
