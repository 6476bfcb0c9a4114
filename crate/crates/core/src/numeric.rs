//! Scalar numerics shared by the samplers: densities and CDFs, adaptive
//! Gauss-Kronrod quadrature, a bounded Nelder-Mead minimizer and the
//! one-sample Kolmogorov-Smirnov statistic.

use std::f64::consts::PI;

use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur};

pub use statrs::function::gamma::ln_gamma;

use crate::error::{LevyError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    normal_ln_pdf(x, mean, var).exp()
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// Log-density of the location-scale Student-t distribution.
pub fn student_t_ln_pdf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    let z = (x - loc) / scale;
    ln_gamma(0.5 * (dof + 1.0))
        - ln_gamma(0.5 * dof)
        - 0.5 * (dof * PI).ln()
        - scale.ln()
        - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p()
}

pub fn student_t_pdf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    student_t_ln_pdf(x, loc, scale, dof).exp()
}

/// CDF of the location-scale Student-t through the regularized incomplete beta.
pub fn student_t_cdf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    let z = (x - loc) / scale;
    if z == 0.0 {
        return 0.5;
    }
    let z2 = z * z;
    let tail = if z2 < dof {
        0.5 - 0.5 * beta_reg(0.5, 0.5 * dof, z2 / (dof + z2))
    } else {
        0.5 * beta_reg(0.5 * dof, 0.5, dof / (dof + z2))
    };
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Upper tail `P(X > x)` of the Student-t, accurate far in the right tail.
pub fn student_t_sf(x: f64, loc: f64, scale: f64, dof: f64) -> f64 {
    student_t_cdf(2.0 * loc - x, loc, scale, dof)
}

/// Gamma CDF in the shape/rate convention.
pub fn gamma_cdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(shape, rate * x)
    }
}

/// Inverse-gamma CDF in the shape/scale convention.
pub fn inv_gamma_cdf(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_ur(shape, scale / x)
    }
}

pub fn inv_gamma_ln_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Numerically stable `log(exp(a) + exp(b))`.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

// Gauss-Kronrod 7/15 nodes and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (i, (&x, &w)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let f1 = f(c - h * x);
        let f2 = f(c + h * x);
        kronrod += w * (f1 + f2);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (f1 + f2);
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive Gauss-Kronrod quadrature of `f` over the finite interval `[a, b]`.
///
/// Subdivides the interval with the largest error estimate until the summed
/// error estimate falls below `max(abs_tol, rel_tol * |I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    const MAX_INTERVALS: usize = 4000;
    let (v, e) = gk15(&f, a, b);
    let mut pieces = vec![(a, b, v, e)];
    let mut total = v;
    let mut err = e;
    while err > abs_tol.max(rel_tol * total.abs()) {
        if pieces.len() >= MAX_INTERVALS {
            return Err(LevyError::Quadrature {
                estimate: total,
                error_estimate: err,
            });
        }
        let (idx, _) = pieces
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (lo, hi, v0, e0) = pieces.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        total += v1 + v2 - v0;
        err += e1 + e2 - e0;
        pieces.push((lo, mid, v1, e1));
        pieces.push((mid, hi, v2, e2));
        if !total.is_finite() {
            return Err(LevyError::Quadrature {
                estimate: total,
                error_estimate: err,
            });
        }
    }
    // Re-sum to shed accumulated rounding from the running updates.
    Ok(pieces.iter().map(|p| p.2).sum())
}

/// Quadrature over `[a, ∞)` via the substitution `x = a + t / (1 - t)`.
pub fn integrate_to_inf<F: Fn(f64) -> f64>(f: F, a: f64, abs_tol: f64, rel_tol: f64) -> Result<f64> {
    integrate(
        |t| {
            if t >= 1.0 {
                return 0.0;
            }
            let s = 1.0 - t;
            let v = f(a + t / s) / (s * s);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}

/// One-sample Kolmogorov-Smirnov statistic `sup |F_n(x) - F(x)|`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = cdf(x);
            (c - i as f64 / n).max((i as f64 + 1.0) / n - c)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}

/// Two-sample KS statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 1% critical value of the two-sample KS statistic.
pub fn ks_two_sample_critical_1pct(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.627_6 * ((n + m) / (n * m)).sqrt()
}

/// Result of a Nelder-Mead minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder-Mead simplex minimization inside the box `[lower, upper]`.
///
/// Points are clamped to the box, so a minimizer on a bound is reported
/// exactly at the bound.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    lower: &[f64],
    upper: &[f64],
    tol: f64,
    max_iter: usize,
) -> Minimum {
    let n = start.len();
    let clamp = |p: &mut Vec<f64>| {
        for k in 0..n {
            p[k] = p[k].clamp(lower[k], upper[k]);
        }
    };
    let mut eval = |p: &[f64]| {
        let v = f(p);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut p0 = start.to_vec();
    clamp(&mut p0);
    simplex.push((p0.clone(), eval(&p0)));
    for k in 0..n {
        let mut p = p0.clone();
        p[k] += if p[k] + step <= upper[k] { step } else { -step };
        clamp(&mut p);
        let v = eval(&p);
        simplex.push((p, v));
    }
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[n].1 - simplex[0].1;
        let size = simplex[1..]
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread.abs() < tol && size < tol.sqrt() {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|k| simplex[..n].iter().map(|(p, _)| p[k]).sum::<f64>() / n as f64)
            .collect();
        let along = |coef: f64, worst: &[f64]| -> Vec<f64> {
            let mut p: Vec<f64> = (0..n).map(|k| centroid[k] + coef * (worst[k] - centroid[k])).collect();
            clamp(&mut p);
            p
        };
        let worst = simplex[n].0.clone();
        let xr = along(-1.0, &worst);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0, &worst);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let xc = if fr < simplex[n].1 { along(-0.5, &worst) } else { along(0.5, &worst) };
            let fc = eval(&xc);
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best.iter().zip(&entry.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    clamp(&mut p);
                    let v = eval(&p);
                    *entry = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        iterations,
        converged,
    }
}
