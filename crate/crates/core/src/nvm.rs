//! NVM Lévy densities from subordinator measure samples.
//!
//! Given a discrete subordinator measure `Σ W_i δ_{z_i}` and the conjugate
//! posteriors of `(μ_w, σ_w²)`, each atom becomes one Student-t component of
//! the NVM Lévy density. Averaging these mixtures over retained samples gives
//! the posterior mean density.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::DiscreteLevyMeasure;
use crate::error::{domain, Result};
use crate::kalman::{MuWPosterior, SigmaW2Posterior};
use crate::numeric::{normal_cdf, normal_pdf, student_t_cdf, student_t_pdf};
use crate::sim::{AnalyticSubordinator, NvmParams, SubordinatorFamily};

/// `W · St(location, scale, dof)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTComponent {
    pub mass: f64,
    pub location: f64,
    pub scale: f64,
    pub dof: f64,
}

impl StudentTComponent {
    pub fn density(&self, x: f64) -> f64 {
        self.mass * student_t_pdf(x, self.location, self.scale, self.dof)
    }

    /// Mass above `x`.
    pub fn upper(&self, x: f64) -> f64 {
        self.mass * student_t_cdf(2.0 * self.location - x, self.location, self.scale, self.dof)
    }

    /// Mass below `x`.
    pub fn lower(&self, x: f64) -> f64 {
        self.mass * student_t_cdf(x, self.location, self.scale, self.dof)
    }
}

/// Unnormalized Student-t mixture; its total mass is the jump rate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudentTMixture {
    pub components: Vec<StudentTComponent>,
}

impl StudentTMixture {
    pub fn total_mass(&self) -> f64 {
        self.components.iter().map(|c| c.mass).sum()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.density(x)).sum()
    }

    /// Upper tail `∫_x^∞`.
    pub fn upper_tail(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.upper(x)).sum()
    }

    /// Lower tail `∫_{-∞}^{-x}`.
    pub fn lower_tail(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.lower(-x)).sum()
    }
}

/// Student-t mixture for one measure sample.
///
/// Atom `z` with mass `W` maps to `W · St(μ' z, √(β'(z + z² k')/α'), 2α')`.
pub fn nvm_mixture(measure: &DiscreteLevyMeasure, mu_post: &MuWPosterior, sig_post: &SigmaW2Posterior) -> StudentTMixture {
    let (a, b) = (sig_post.shape, sig_post.scale);
    StudentTMixture {
        components: measure
            .masses()
            .into_iter()
            .map(|(z, w)| StudentTComponent {
                mass: w,
                location: mu_post.mean * z,
                scale: (b * (z + z * z * mu_post.rel_var) / a).sqrt(),
                dof: 2.0 * a,
            })
            .collect(),
    }
}

/// Equal-weight average of mixture samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageNvm {
    samples: Vec<StudentTMixture>,
}

impl AverageNvm {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn samples(&self) -> &[StudentTMixture] {
        &self.samples
    }

    fn mean_of(&self, f: impl Fn(&StudentTMixture) -> f64) -> f64 {
        self.samples.iter().map(f).sum::<f64>() / self.samples.len() as f64
    }

    pub fn density(&self, x: f64) -> f64 {
        self.mean_of(|m| m.density(x))
    }

    pub fn upper_tail(&self, x: f64) -> f64 {
        self.mean_of(|m| m.upper_tail(x))
    }

    pub fn lower_tail(&self, x: f64) -> f64 {
        self.mean_of(|m| m.lower_tail(x))
    }

    pub fn total_mass(&self) -> f64 {
        self.mean_of(StudentTMixture::total_mass)
    }

    /// Pointwise `(mean, lo, hi)` of the upper tail across samples, with the
    /// central `level` band.
    pub fn upper_band(&self, x: f64, level: f64) -> (f64, f64, f64) {
        band(self.samples.iter().map(|m| m.upper_tail(x)).collect(), level)
    }

    pub fn lower_band(&self, x: f64, level: f64) -> (f64, f64, f64) {
        band(self.samples.iter().map(|m| m.lower_tail(x)).collect(), level)
    }
}

fn band(mut v: Vec<f64>, level: f64) -> (f64, f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let q = 0.5 * (1.0 - level);
    (
        mean,
        crate::dp::quantile_sorted(&v, q),
        crate::dp::quantile_sorted(&v, 1.0 - q),
    )
}

pub fn average_nvm(samples: Vec<StudentTMixture>) -> Result<AverageNvm> {
    if samples.is_empty() {
        return domain("average_nvm needs at least one mixture");
    }
    Ok(AverageNvm { samples })
}

/// Monte Carlo NVM Lévy density of a parametric subordinator:
/// `λ_ε · mean_i N(x; μ_w z_i, σ_w² z_i)` over sizes `z_i` from the truncated
/// size law.
#[derive(Debug, Clone, PartialEq)]
pub struct NvmGroundTruth {
    pub activity: f64,
    pub sizes: Vec<f64>,
    pub nvm: NvmParams,
}

impl NvmGroundTruth {
    fn estimate(&self, f: impl Fn(f64) -> f64) -> (f64, f64) {
        let n = self.sizes.len() as f64;
        let (mut s, mut s2) = (0.0, 0.0);
        for &z in &self.sizes {
            let v = f(z);
            s += v;
            s2 += v * v;
        }
        let mean = s / n;
        let var = if n > 1.0 { (s2 - n * mean * mean).max(0.0) / (n - 1.0) } else { 0.0 };
        (self.activity * mean, self.activity * (var / n).sqrt())
    }

    fn term_density(&self, x: f64, z: f64) -> f64 {
        normal_pdf(x, self.nvm.mu_w * z, self.nvm.sigma_w2 * z)
    }

    /// Density estimate and its Monte Carlo standard error.
    pub fn density_with_se(&self, x: f64) -> (f64, f64) {
        self.estimate(|z| self.term_density(x, z))
    }

    pub fn density(&self, x: f64) -> f64 {
        self.density_with_se(x).0
    }

    pub fn upper_tail(&self, x: f64) -> f64 {
        let sd = |z: f64| (self.nvm.sigma_w2 * z).sqrt();
        self.estimate(|z| 1.0 - normal_cdf(x, self.nvm.mu_w * z, sd(z))).0
    }

    pub fn lower_tail(&self, x: f64) -> f64 {
        let sd = |z: f64| (self.nvm.sigma_w2 * z).sqrt();
        self.estimate(|z| normal_cdf(-x, self.nvm.mu_w * z, sd(z))).0
    }
}

/// Builds the Monte Carlo ground truth from `n_mc` sizes of the truncated
/// subordinator.
pub fn nvm_ground_truth<R: Rng + ?Sized>(
    subord: &AnalyticSubordinator,
    nvm: &NvmParams,
    n_mc: usize,
    rng: &mut R,
) -> Result<NvmGroundTruth> {
    subord.validate()?;
    if n_mc == 0 {
        return domain("n_mc must be positive");
    }
    if !(nvm.sigma_w2 > 0.0) {
        return domain("ground-truth density needs σ_w² > 0");
    }
    let activity = subord.truncated_activity()?;
    let sizes = match subord.family {
        SubordinatorFamily::PointMass { size, .. } => vec![size; n_mc],
        _ => {
            if !(activity > 0.0) {
                return domain("truncated measure carries no mass");
            }
            let horizon = (n_mc as f64 / activity).max(1e-9);
            let mut sizes = Vec::with_capacity(n_mc);
            while sizes.len() < n_mc {
                sizes.extend(subord.sample_jumps(horizon, rng)?.into_iter().map(|j| j.size));
            }
            sizes.shuffle(rng);
            sizes.truncate(n_mc);
            sizes
        }
    };
    Ok(NvmGroundTruth {
        activity,
        sizes,
        nvm: *nvm,
    })
}

/// Log-spaced grid of `n` points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::DiscreteMeasure;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_atom_is_standard_t2() {
        let q = DiscreteLevyMeasure::point(1.0, 1.0).unwrap();
        let m = nvm_mixture(
            &q,
            &MuWPosterior { mean: 0.0, rel_var: 0.0 },
            &SigmaW2Posterior { shape: 1.0, scale: 1.0 },
        );
        assert_eq!(
            m.components,
            vec![StudentTComponent {
                mass: 1.0,
                location: 0.0,
                scale: 1.0,
                dof: 2.0
            }]
        );
    }

    #[test]
    fn mass_and_symmetry() {
        let q = DiscreteLevyMeasure {
            rate: 3.5,
            measure: DiscreteMeasure::new(vec![0.2, 0.5, 0.3], vec![0.1, 1.0, 4.0]).unwrap(),
        };
        let m = nvm_mixture(
            &q,
            &MuWPosterior { mean: 0.0, rel_var: 0.4 },
            &SigmaW2Posterior { shape: 3.0, scale: 2.0 },
        );
        assert_abs_diff_eq!(m.total_mass(), 3.5, epsilon = 1e-12);
        let avg = average_nvm(vec![m.clone()]).unwrap();
        assert_abs_diff_eq!(avg.upper_tail(-1e9), 3.5, epsilon = 1e-6);
        for x in [0.01, 0.5, 2.0, 7.0] {
            assert_abs_diff_eq!(avg.upper_tail(x), avg.lower_tail(x), epsilon = 1e-10);
            assert_eq!(avg.density(x), m.density(x));
        }
        assert!(m.components.iter().all(|c| c.dof == 6.0));
        assert!(average_nvm(vec![]).is_err());
    }

    #[test]
    fn large_shape_limit_is_gaussian() {
        let z = 0.8;
        let (a, ratio, k) = (1e6, 0.5, 0.3);
        let q = DiscreteLevyMeasure::point(1.0, z).unwrap();
        let m = nvm_mixture(
            &q,
            &MuWPosterior { mean: 0.4, rel_var: k },
            &SigmaW2Posterior { shape: a, scale: a * ratio },
        );
        for x in [-1.0, 0.0, 0.3, 1.5] {
            let g = normal_pdf(x, 0.4 * z, ratio * (z + k * z * z));
            assert_abs_diff_eq!(m.density(x), g, epsilon = 1e-4);
        }
    }

    #[test]
    fn point_mass_truth_is_exact() {
        let subord = AnalyticSubordinator::new(SubordinatorFamily::PointMass { rate: 2.0, size: 0.5 }, 0.1).unwrap();
        let nvm = NvmParams::new(1.0, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = nvm_ground_truth(&subord, &nvm, 10, &mut rng).unwrap();
        for x in [-1.0, 0.2, 3.0] {
            assert_abs_diff_eq!(gt.density(x), 2.0 * normal_pdf(x, 0.5, 1.0), epsilon = 1e-15);
        }
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(0.01, 100.0, 5);
        assert_abs_diff_eq!(g[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(g[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g[4], 100.0, epsilon = 1e-10);
    }
}
