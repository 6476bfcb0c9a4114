//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use levy_core::kalman::LangevinModel;
use levy_core::sim::{impulse_response, transition_matrix, JumpSeries};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `∫_a^b f(x) dx` via Simpson in `u = ln x`.
pub fn log_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    simpson(|u| f(u.exp()) * u.exp(), a.ln(), b.ln(), n)
}

/// Log-density of `N(mean, cov)` by Cholesky.
pub fn mvn_ln_pdf(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = cov.clone().cholesky().expect("positive definite covariance");
    let r = y - mean;
    let z = chol.solve(&r);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n * LN_2PI + logdet + r.dot(&z))
}

/// Joint law of the observations with `μ_w ~ N(mu_mean, mu_var)` and state
/// prior `N(m0, p0 I)`, all jump covariances scaled by `s2`, written out as
/// explicit linear maps of the independent inputs rather than by filtering.
pub struct DenseModel {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn dense_observation_law(
    model: &LangevinModel,
    series: &JumpSeries,
    m0: [f64; 2],
    p0: f64,
    mu_mean: f64,
    mu_var: f64,
    s2: f64,
) -> DenseModel {
    let n = series.n_intervals();
    let theta = model.theta;
    // Φ(t_j, t_0), jump-mean loadings on μ_w, and per-interval noise terms.
    let mut phi = Vec::with_capacity(n);
    let mut load = Vec::with_capacity(n);
    let mut acc_phi = Matrix2::identity();
    let mut acc_load = Vector2::zeros();
    for j in 0..n {
        let (s, t) = series.interval(j);
        let a = transition_matrix(theta, t - s);
        let mut mbar = Vector2::zeros();
        for jump in series.group(j) {
            mbar += impulse_response(theta, t - jump.time) * jump.size;
        }
        acc_phi = a * acc_phi;
        acc_load = a * acc_load + mbar;
        phi.push(acc_phi);
        load.push(acc_load);
    }
    // Noise of interval i seen at observation j >= i: Φ(t_j, t_i) Σ_k z_k g_k g_kᵀ Φ(t_j, t_i)ᵀ.
    let mut cov = DMatrix::zeros(n, n);
    let mut mean = DVector::zeros(n);
    let m0 = Vector2::new(m0[0], m0[1]);
    for a in 0..n {
        mean[a] = (phi[a] * m0)[0] + mu_mean * load[a][0];
        for b in 0..n {
            let mut c = p0 * (phi[a] * phi[b].transpose())[(0, 0)] + mu_var * load[a][0] * load[b][0];
            for i in 0..=a.min(b) {
                let (_, ti) = series.interval(i);
                let to_a = propagate(series, theta, i, a);
                let to_b = propagate(series, theta, i, b);
                for jump in series.group(i) {
                    let g = impulse_response(theta, ti - jump.time) * jump.size.sqrt();
                    c += s2 * (to_a * g)[0] * (to_b * g)[0];
                }
            }
            cov[(a, b)] = c;
        }
        cov[(a, a)] += s2 * model.obs_noise;
    }
    DenseModel { mean, cov }
}

/// `Φ(t_j, t_i)` for `i <= j`.
fn propagate(series: &JumpSeries, theta: f64, i: usize, j: usize) -> Matrix2<f64> {
    let mut m = Matrix2::identity();
    for k in i + 1..=j {
        let (s, t) = series.interval(k);
        m = transition_matrix(theta, t - s) * m;
    }
    m
}

/// Log-density of `IG(shape, scale)`.
pub fn inv_gamma_ln_pdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Lanczos log-gamma (g = 7, n = 9), independent of the crate's special functions.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Empirical CDF distance `sup |F_n - F|`.
pub fn ks<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample KS distance.
pub fn ks2(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// 1% critical values of the one- and two-sample KS statistics.
pub fn ks_crit(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

pub fn ks2_crit(n: usize, m: usize) -> f64 {
    1.6276 * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// CDF of `Gamma(shape, rate)` by Simpson quadrature of the density.
pub fn gamma_cdf_quad(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_norm = shape * rate.ln() - ln_gamma(shape);
    let pdf = |t: f64| if t <= 0.0 { 0.0 } else { (ln_norm + (shape - 1.0) * t.ln() - rate * t).exp() };
    if shape >= 1.0 {
        simpson(pdf, 0.0, x, 4000)
    } else {
        // Substitute t = s^{1/shape} to remove the singularity at zero.
        let ln_c = ln_norm - shape.ln();
        simpson(|s| (ln_c - rate * s.powf(1.0 / shape)).exp(), 0.0, x.powf(shape), 4000)
    }
}
