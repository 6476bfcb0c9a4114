//! Dirichlet-process machinery for the jump-size law and the conjugate rate
//! posterior.
//!
//! Under the finite-activity model `Q(x) = λ f(x)`, the jump times inform
//! `λ` through a Gamma posterior and the jump sizes inform `f` through a DP
//! posterior. A truncated stick-breaking draw of `f` is scaled by a draw of
//! `λ` to give one discrete Lévy measure sample.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{domain, LevyError, Result};
use crate::sim::JumpSeries;

/// Gamma distribution in the shape/rate convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite() {
            Ok(GammaParams { shape, rate })
        } else {
            domain(format!("Gamma parameters must be positive (shape {shape}, rate {rate})"))
        }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn sd(&self) -> f64 {
        self.shape.sqrt() / self.rate
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        gamma_draw(self.shape, self.rate, rng)
    }
}

fn gamma_draw<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("validated gamma parameters")
        .sample(rng)
}

fn beta_draw<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    Beta::new(a, b).expect("validated beta parameters").sample(rng)
}

/// Truncation level policy for stick-breaking draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    Fixed { k: usize },
    /// `K = ceil(4 (α + M) log(1/δ))`, capped at `max`.
    Auto { delta: f64, max: usize },
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::Auto {
            delta: 1e-4,
            max: 50_000,
        }
    }
}

/// DP concentration, Gamma base measure `H_η`, truncation, and the Gamma
/// prior on the concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpHyper {
    pub alpha: f64,
    pub base: GammaParams,
    pub truncation: Truncation,
    pub alpha_prior: GammaParams,
}

impl DpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return domain("DP concentration must be positive");
        }
        GammaParams::new(self.base.shape, self.base.rate)?;
        GammaParams::new(self.alpha_prior.shape, self.alpha_prior.rate)?;
        match self.truncation {
            Truncation::Fixed { k } if k == 0 => domain("truncation level must be at least 1"),
            Truncation::Auto { delta, max } if !(delta > 0.0 && delta < 1.0) || max == 0 => {
                domain("auto truncation needs 0 < δ < 1 and a positive cap")
            }
            _ => Ok(()),
        }
    }

    pub fn truncation_level(&self, n_sizes: usize) -> usize {
        match self.truncation {
            Truncation::Fixed { k } => k,
            Truncation::Auto { delta, max } => {
                let k = (4.0 * (self.alpha + n_sizes as f64) * (1.0 / delta).ln()).ceil() as usize;
                k.clamp(1, max)
            }
        }
    }
}

/// A discrete probability measure `Σ w_k δ_{x_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    atoms: Vec<f64>,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(weights: Vec<f64>, atoms: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != atoms.len() {
            return domain("a discrete measure needs matching, non-empty weights and atoms");
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || atoms.iter().any(|&a| !(a > 0.0)) {
            return domain("weights must be nonnegative and atoms positive");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return domain(format!("weights sum to {total}, not 1"));
        }
        Ok(Self::from_parts(weights, atoms))
    }

    fn from_parts(weights: Vec<f64>, atoms: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        DiscreteMeasure {
            weights,
            atoms,
            cumulative,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Draws an atom with probability equal to its weight.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.cumulative.len() != self.weights.len() {
            // Deserialized measures carry no cumulative table.
            let fresh = Self::from_parts(self.weights.clone(), self.atoms.clone());
            return fresh.sample(rng);
        }
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.atoms.len() - 1);
        self.atoms[k]
    }

    /// Atoms sorted ascending with exact duplicates merged (weights summed).
    pub fn merged(&self) -> Vec<(f64, f64)> {
        let mut pairs: Vec<(f64, f64)> = self.atoms.iter().copied().zip(self.weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(pairs.len());
        for (x, w) in pairs {
            match out.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => out.push((x, w)),
            }
        }
        out
    }
}

/// A weighted-atom Lévy measure `λ Σ w_j δ_{x_j}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLevyMeasure {
    pub rate: f64,
    pub measure: DiscreteMeasure,
}

impl DiscreteLevyMeasure {
    /// Atom masses `W_j = λ w_j`, merged over duplicate atoms and sorted.
    pub fn masses(&self) -> Vec<(f64, f64)> {
        self.measure
            .merged()
            .into_iter()
            .map(|(x, w)| (x, w * self.rate))
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.measure.weights.iter().map(|w| w * self.rate).sum()
    }

    /// Upper tail `Σ_{x_j > x} W_j`.
    pub fn tail(&self, x: f64) -> f64 {
        self.measure
            .atoms
            .iter()
            .zip(&self.measure.weights)
            .filter(|(&a, _)| a > x)
            .map(|(_, w)| w * self.rate)
            .sum()
    }

    /// A single-atom measure, convenient for tests and point-mass models.
    pub fn point(rate: f64, atom: f64) -> Result<Self> {
        Ok(DiscreteLevyMeasure {
            rate,
            measure: DiscreteMeasure::new(vec![1.0], vec![atom])?,
        })
    }
}

/// Gamma posterior of the jump rate, `Gamma(α_λ + M, β_λ + Σ T_i)` where the
/// inter-arrival times of the sorted jump times telescope to
/// `Σ T_i = V_M - t_0`.
pub fn lambda_posterior(series: &JumpSeries, prior: &GammaParams) -> GammaParams {
    let origin = series.origin();
    let mut count = 0usize;
    let mut last = origin;
    for j in series.jumps() {
        count += 1;
        last = last.max(j.time);
    }
    GammaParams {
        shape: prior.shape + count as f64,
        rate: prior.rate + (last - origin),
    }
}

/// Stick-breaking weights `w_k = β_k Π_{i<k} (1 - β_i)` from `K - 1` breaks;
/// the last stick takes the remaining mass so the weights sum to one.
pub fn stick_weights(breaks: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(breaks.len() + 1);
    let mut remaining = 1.0;
    for &b in breaks {
        let w = b * remaining;
        weights.push(w);
        remaining -= w;
    }
    weights.push(remaining.max(0.0));
    weights
}

/// Truncated stick-breaking draw from the DP posterior given jump sizes.
///
/// Breaks are `Beta(1, α + M)`; atoms come from the posterior base, i.e. a
/// fresh `H_η` draw with probability `α / (α + M)` and otherwise a uniformly
/// chosen observed size.
pub fn sample_posterior_dp<R: Rng + ?Sized>(sizes: &[f64], hyper: &DpHyper, rng: &mut R) -> Result<DiscreteMeasure> {
    if !(hyper.alpha > 0.0) {
        return domain("DP concentration must be positive");
    }
    if sizes.iter().any(|&z| !(z > 0.0)) {
        return domain("jump sizes must be positive");
    }
    let m = sizes.len() as f64;
    let k = hyper.truncation_level(sizes.len());
    let conc = hyper.alpha + m;
    let breaks: Vec<f64> = (0..k - 1).map(|_| beta_draw(1.0, conc, rng)).collect();
    let weights = stick_weights(&breaks);
    let fresh_prob = hyper.alpha / conc;
    let atoms = (0..k)
        .map(|_| {
            if sizes.is_empty() || rng.random::<f64>() < fresh_prob {
                // Guard against a zero draw from a very small-shape base.
                gamma_draw(hyper.base.shape, hyper.base.rate, rng).max(f64::MIN_POSITIVE)
            } else {
                sizes[rng.random_range(0..sizes.len())]
            }
        })
        .collect();
    Ok(DiscreteMeasure::from_parts(weights, atoms))
}

/// Mixing weight `ρ` of `Gamma(a + k, b - log φ)` in the concentration update,
/// from `ρ / (1 - ρ) = (a + k - 1) / (n (b - log φ))`.
pub fn alpha_mixture_weight(prior: &GammaParams, k: usize, n: usize, phi: f64) -> f64 {
    let odds = (prior.shape + k as f64 - 1.0) / (n as f64 * (prior.rate - phi.ln()));
    odds / (1.0 + odds)
}

/// Auxiliary-variable Gibbs update of the DP concentration given `k`
/// distinct values among `n` draws.
pub fn sample_alpha<R: Rng + ?Sized>(k: usize, n: usize, alpha: f64, prior: &GammaParams, rng: &mut R) -> Result<f64> {
    if k == 0 || k > n {
        return domain(format!("concentration update needs 1 <= k <= n (k = {k}, n = {n})"));
    }
    if !(alpha > 0.0) {
        return domain("current concentration must be positive");
    }
    let phi = beta_draw(alpha + 1.0, n as f64, rng);
    let rho = alpha_mixture_weight(prior, k, n, phi);
    let rate = prior.rate - phi.ln();
    let shape = if rng.random::<f64>() < rho {
        prior.shape + k as f64
    } else {
        prior.shape + k as f64 - 1.0
    };
    Ok(gamma_draw(shape, rate, rng))
}

/// Number of distinct values (exact equality) in `sizes`.
pub fn distinct_count(sizes: &[f64]) -> usize {
    let mut v = sizes.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

pub fn combine_measure(rate: f64, f: DiscreteMeasure) -> Result<DiscreteLevyMeasure> {
    if !(rate > 0.0) {
        return domain("rate must be positive");
    }
    Ok(DiscreteLevyMeasure { rate, measure: f })
}

/// Averaged tail function over posterior measure samples, with pointwise
/// credible bands from the per-sample tails.
#[derive(Debug, Clone)]
pub struct TailSummary {
    // Per sample: atoms ascending and the mass strictly above each atom index.
    samples: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailPoint {
    pub x: f64,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TailSummary {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    fn sample_tail(&self, s: usize, x: f64) -> f64 {
        let (atoms, suffix) = &self.samples[s];
        let idx = atoms.partition_point(|&a| a <= x);
        suffix[idx]
    }

    /// Per-sample tails at `x`.
    pub fn tails_at(&self, x: f64) -> Vec<f64> {
        (0..self.samples.len()).map(|s| self.sample_tail(s, x)).collect()
    }

    pub fn mean_tail(&self, x: f64) -> f64 {
        self.tails_at(x).iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Central `level` pointwise band, e.g. `level = 0.9` for 5%-95%.
    pub fn band(&self, x: f64, level: f64) -> (f64, f64) {
        let mut t = self.tails_at(x);
        t.sort_by(f64::total_cmp);
        let a = 0.5 * (1.0 - level);
        (quantile_sorted(&t, a), quantile_sorted(&t, 1.0 - a))
    }

    pub fn evaluate(&self, grid: &[f64], level: f64) -> Vec<TailPoint> {
        grid.iter()
            .map(|&x| {
                let (lo, hi) = self.band(x, level);
                TailPoint {
                    x,
                    mean: self.mean_tail(x),
                    lo,
                    hi,
                }
            })
            .collect()
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Posterior mean measure `(1/N_s) Σ Q^(l)` exposed through its tail function.
pub fn posterior_mean_measure(samples: &[DiscreteLevyMeasure]) -> Result<TailSummary> {
    if samples.is_empty() {
        return Err(LevyError::Domain("posterior mean needs at least one sample".into()));
    }
    let samples = samples
        .iter()
        .map(|q| {
            let masses = q.masses();
            let atoms: Vec<f64> = masses.iter().map(|p| p.0).collect();
            let mut suffix = vec![0.0; masses.len() + 1];
            for i in (0..masses.len()).rev() {
                suffix[i] = suffix[i + 1] + masses[i].1;
            }
            (atoms, suffix)
        })
        .collect();
    Ok(TailSummary { samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::Jump;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hyper(alpha: f64, trunc: Truncation) -> DpHyper {
        DpHyper {
            alpha,
            base: GammaParams { shape: 1.0, rate: 1.0 },
            truncation: trunc,
            alpha_prior: GammaParams { shape: 1.0, rate: 1.0 },
        }
    }

    #[test]
    fn lambda_posterior_substitution() {
        let prior = GammaParams { shape: 1.0, rate: 1.0 };
        let empty = JumpSeries::single(1.0, vec![]).unwrap();
        assert_eq!(lambda_posterior(&empty, &prior), prior);
        let s = JumpSeries::single(1.0, vec![Jump::new(1.0, 0.5), Jump::new(1.0, 0.2), Jump::new(1.0, 0.9)]).unwrap();
        let post = lambda_posterior(&s, &prior);
        assert_eq!(post.shape, 4.0);
        assert_abs_diff_eq!(post.rate, 1.9, epsilon = 1e-15);
    }

    #[test]
    fn lambda_posterior_grid_bayes() {
        // Grid Bayes rule with the exponential inter-arrival likelihood.
        let times = [0.2, 0.5, 0.9];
        let grid: Vec<f64> = (1..20_000).map(|i| i as f64 * 1e-3).collect();
        let mut post: Vec<f64> = grid
            .iter()
            .map(|&l| {
                let prior = (-l).exp();
                let mut lik = 1.0;
                let mut prev = 0.0;
                for &t in &times {
                    lik *= l * (-l * (t - prev)).exp();
                    prev = t;
                }
                prior * lik
            })
            .collect();
        let z: f64 = post.iter().sum();
        post.iter_mut().for_each(|p| *p /= z);
        let mean: f64 = grid.iter().zip(&post).map(|(l, p)| l * p).sum();
        assert_abs_diff_eq!(mean, 4.0 / 1.9, epsilon = 1e-4);
    }

    #[test]
    fn single_stick() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = sample_posterior_dp(&[0.5, 1.0], &hyper(1.0, Truncation::Fixed { k: 1 }), &mut rng).unwrap();
        assert_eq!(f.weights(), &[1.0]);
    }

    #[test]
    fn pinned_breaks() {
        assert_eq!(stick_weights(&[0.5, 0.5]), vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn tiny_alpha_reuses_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sizes: Vec<f64> = (0..100).map(|i| 0.1 + i as f64 * 0.01).collect();
        let h = hyper(1e-6, Truncation::Fixed { k: 50 });
        let mut reused = 0usize;
        let mut total = 0usize;
        for _ in 0..1000 {
            let f = sample_posterior_dp(&sizes, &h, &mut rng).unwrap();
            total += f.len();
            reused += f.atoms().iter().filter(|a| sizes.contains(a)).count();
        }
        assert!(reused as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn empty_sizes_draw_from_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = DpHyper {
            base: GammaParams { shape: 3.0, rate: 2.0 },
            ..hyper(2.0, Truncation::Fixed { k: 200 })
        };
        let mut atoms = Vec::new();
        for _ in 0..100 {
            atoms.extend_from_slice(sample_posterior_dp(&[], &h, &mut rng).unwrap().atoms());
        }
        let ks = crate::numeric::ks_statistic(&atoms, |x| crate::numeric::gamma_cdf(x, 3.0, 2.0));
        assert!(ks < crate::numeric::ks_critical_1pct(atoms.len()));
    }

    #[test]
    fn mixture_ratio_spot_value() {
        let rho = alpha_mixture_weight(&GammaParams { shape: 1.0, rate: 1.0 }, 2, 10, (-1.0f64).exp());
        assert_abs_diff_eq!(rho, 1.0 / 11.0, epsilon = 1e-14);
        let rho_big = alpha_mixture_weight(&GammaParams { shape: 1e9, rate: 1.0 }, 2, 10, 0.5);
        assert!(rho_big > 1.0 - 1e-6);
    }

    #[test]
    fn alpha_rejects_zero_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_alpha(0, 5, 1.0, &GammaParams { shape: 1.0, rate: 1.0 }, &mut rng).is_err());
    }

    #[test]
    fn combine_scales_weights() {
        let f = DiscreteMeasure::new(vec![0.4, 0.6], vec![1.0, 2.0]).unwrap();
        let q = combine_measure(2.5, f).unwrap();
        let masses = q.masses();
        assert_abs_diff_eq!(masses[0].1, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(masses[1].1, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.total_mass(), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn tail_summary_examples() {
        let q1 = DiscreteLevyMeasure::point(1.0, 1.0).unwrap();
        let q2 = DiscreteLevyMeasure::point(3.0, 2.0).unwrap();
        let single = posterior_mean_measure(std::slice::from_ref(&q1)).unwrap();
        assert_eq!(single.mean_tail(0.5), 1.0);
        assert_eq!(single.mean_tail(1.5), 0.0);
        let both = posterior_mean_measure(&[q1, q2]).unwrap();
        assert_eq!(both.mean_tail(1.5), 1.5);
        assert!(posterior_mean_measure(&[]).is_err());
    }

    #[test]
    fn merged_sums_duplicates() {
        let f = DiscreteMeasure::new(vec![0.25, 0.25, 0.5], vec![2.0, 1.0, 2.0]).unwrap();
        assert_eq!(f.merged(), vec![(1.0, 0.25), (2.0, 0.75)]);
    }

    #[test]
    fn auto_truncation_level() {
        let h = hyper(1.0, Truncation::Auto { delta: 1e-4, max: 1000 });
        assert_eq!(h.truncation_level(0), (4.0 * 1e4f64.ln()).ceil() as usize);
        assert_eq!(h.truncation_level(10_000), 1000);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_sum_to_one(seed in 0u64..10_000, alpha in 0.01f64..50.0, m in 0usize..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sizes: Vec<f64> = (0..m).map(|i| 0.1 + i as f64).collect();
                let f = sample_posterior_dp(&sizes, &hyper(alpha, Truncation::Auto { delta: 1e-4, max: 3000 }), &mut rng).unwrap();
                let total: f64 = f.weights().iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                prop_assert!(f.weights().iter().all(|&w| w >= 0.0));
            }

            #[test]
            fn lambda_posterior_exchangeable(times in proptest::collection::vec(0.0f64..1.0, 0..20), seed in 0u64..100) {
                let jumps: Vec<Jump> = times.iter().map(|&t| Jump::new(1.0, t)).collect();
                let mut shuffled = jumps.clone();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                use rand::seq::SliceRandom;
                shuffled.shuffle(&mut rng);
                let prior = GammaParams { shape: 2.0, rate: 0.5 };
                let a = lambda_posterior(&JumpSeries::from_jumps(0.0, vec![0.5, 1.0], jumps).unwrap(), &prior);
                let b = lambda_posterior(&JumpSeries::from_jumps(0.0, vec![0.5, 1.0], shuffled).unwrap(), &prior);
                prop_assert_eq!(a, b);
            }
        }
    }
}
