//! Autocorrelation diagnostics for scalar traces and function-valued samples.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Function samples evaluated on a shared grid; `values[s][i] = f_s(x_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSampleSet {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl FunctionSampleSet {
    pub fn new(grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if grid.len() < 2 {
            return domain("function grid needs at least two points");
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("function grid must be strictly increasing");
        }
        if values.iter().any(|v| v.len() != grid.len()) {
            return domain("every sample must have one value per grid point");
        }
        Ok(FunctionSampleSet { grid, values })
    }

    /// Embeds a scalar trace as functions constant in `x`.
    pub fn constant(trace: &[f64], grid: Vec<f64>) -> Result<Self> {
        let k = grid.len();
        Self::new(grid, trace.iter().map(|&v| vec![v; k]).collect())
    }
}

/// Autocorrelation sequence with its integrated time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autocorrelation {
    /// `ρ(0..=max_lag)`; empty when degenerate.
    pub rho: Vec<f64>,
    /// `1 + 2 Σ ρ(t)`, summed until the first negative value.
    pub integrated_time: f64,
    /// Zero variance; `ρ` is undefined.
    pub degenerate: bool,
}

impl Autocorrelation {
    /// `second_moment` is the uncentered lag-0 moment; a variance below
    /// rounding level relative to it counts as zero.
    fn from_cov(cov: Vec<f64>, second_moment: f64) -> Self {
        let c0 = cov[0];
        if !(c0 > 1e-20 * second_moment) {
            return Autocorrelation {
                rho: Vec::new(),
                integrated_time: f64::NAN,
                degenerate: true,
            };
        }
        let rho: Vec<f64> = cov.iter().map(|c| (c / c0).clamp(-1.0, 1.0)).collect();
        let tau = 1.0 + 2.0 * rho[1..].iter().take_while(|&&r| r >= 0.0).sum::<f64>();
        Autocorrelation {
            rho,
            integrated_time: tau,
            degenerate: false,
        }
    }
}

/// Functional autocorrelation under the inner product
/// `<f, g> = Σ_{i<K} f(x_i) g(x_i) (x_{i+1} - x_i)`, with lag-`t` covariance
/// normalized by `N - t`.
pub fn functional_autocorr(set: &FunctionSampleSet, max_lag: usize) -> Result<Autocorrelation> {
    let n = set.values.len();
    if n <= max_lag {
        return domain(format!("need more samples ({n}) than the maximum lag ({max_lag})"));
    }
    let k = set.grid.len();
    let widths: Vec<f64> = set.grid.windows(2).map(|w| w[1] - w[0]).collect();
    let mut mean = vec![0.0; k - 1];
    for v in &set.values {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = set
        .values
        .iter()
        .map(|v| v[..k - 1].iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let cov = (0..=max_lag)
        .map(|t| {
            let s: f64 = (0..n - t)
                .map(|s| {
                    centered[s]
                        .iter()
                        .zip(&centered[s + t])
                        .zip(&widths)
                        .map(|((a, b), w)| a * b * w)
                        .sum::<f64>()
                })
                .sum();
            s / (n - t) as f64
        })
        .collect();
    let second_moment = set
        .values
        .iter()
        .map(|v| v.iter().zip(&widths).map(|(x, w)| x * x * w).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    Ok(Autocorrelation::from_cov(cov, second_moment))
}

/// Summary of a scalar trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub mean: f64,
    pub variance: f64,
    pub acf: Autocorrelation,
}

/// Mean, variance and autocorrelation of a scalar trace using the biased
/// (`1/N`) autocovariance.
pub fn scalar_trace_stats(trace: &[f64], max_lag: usize) -> Result<TraceStats> {
    let n = trace.len();
    if n <= 2 {
        return domain("trace must have more than two values");
    }
    let max_lag = max_lag.min(n - 1);
    let mean = trace.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = trace.iter().map(|x| x - mean).collect();
    let cov: Vec<f64> = (0..=max_lag)
        .map(|t| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect();
    Ok(TraceStats {
        mean,
        variance: cov[0],
        acf: Autocorrelation::from_cov(cov, trace.iter().map(|x| x * x).sum::<f64>() / n as f64),
    })
}
