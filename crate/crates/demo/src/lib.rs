//! Browser bindings: simulate a Lévy-driven Langevin path, plot subordinator
//! and NVM tail functions, and run a short inference with credible bands.
//!
//! Each exported function takes a JSON parameter object and returns a JSON
//! result, so the page needs no generated TypeScript glue beyond strings.

use levy_core::dp::{posterior_mean_measure, GammaParams, Truncation};
use levy_core::gibbs::{posterior_state_mixture, run_chain, ChainConfig, Priors, ThetaPrior};
use levy_core::kalman::{LangevinModel, NvmPrior, StatePrior};
use levy_core::nvm::{log_grid, nvm_ground_truth};
use levy_core::rng::substream;
use levy_core::sim::{
    irregular_times, simulate_ssm, simulate_subordinator_on, AnalyticSubordinator, LangevinParams, NvmParams,
    Observations, SubordinatorFamily,
};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateParams {
    pub family: SubordinatorFamily,
    pub epsilon: f64,
    pub theta: f64,
    pub mu_w: f64,
    pub sigma_w2: f64,
    pub obs_noise: f64,
    pub n_obs: usize,
    pub mean_gap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateResult {
    pub times: Vec<f64>,
    pub observations: Vec<f64>,
    pub positions: Vec<f64>,
    pub subordinator: Vec<f64>,
    pub n_jumps: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailParams {
    pub family: SubordinatorFamily,
    pub epsilon: f64,
    pub mu_w: f64,
    pub sigma_w2: f64,
    pub grid_points: usize,
    pub n_mc: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailResult {
    pub x: Vec<f64>,
    pub subordinator: Vec<f64>,
    pub nvm_upper: Vec<f64>,
    pub nvm_lower: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferParams {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub obs_noise: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub grid_points: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferResult {
    pub x: Vec<f64>,
    pub tail_mean: Vec<f64>,
    pub tail_lo: Vec<f64>,
    pub tail_hi: Vec<f64>,
    pub state_mean: Vec<f64>,
    pub state_lo: Vec<f64>,
    pub state_hi: Vec<f64>,
    pub theta_mean: f64,
    pub series_acceptance: f64,
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub fn simulate_native(p: &SimulateParams) -> Result<SimulateResult, String> {
    if p.n_obs == 0 || p.n_obs > 5_000 {
        return Err("n_obs must lie in 1..=5000".into());
    }
    let subord = AnalyticSubordinator::new(p.family, p.epsilon).map_err(err)?;
    let nvm = NvmParams::new(p.mu_w, p.sigma_w2).map_err(err)?;
    let params = LangevinParams::new(p.theta, p.obs_noise).map_err(err)?;
    let mut rng = substream(p.seed, "simulate");
    let times = irregular_times(0.0, p.n_obs, p.mean_gap, &mut rng).map_err(err)?;
    let series = simulate_subordinator_on(&subord, 0.0, times, &mut rng).map_err(err)?;
    let path = simulate_ssm(&series, &params, &nvm, Default::default(), &mut rng).map_err(err)?;
    Ok(SimulateResult {
        subordinator: series.path_on(&path.times),
        positions: path.states.iter().map(|s| s[0]).collect(),
        n_jumps: series.len(),
        times: path.times,
        observations: path.observations,
    })
}

pub fn tails_native(p: &TailParams) -> Result<TailResult, String> {
    if p.grid_points < 2 || p.grid_points > 1_000 || p.n_mc == 0 || p.n_mc > 1_000_000 {
        return Err("grid_points must lie in 2..=1000 and n_mc in 1..=1000000".into());
    }
    let subord = AnalyticSubordinator::new(p.family, p.epsilon).map_err(err)?;
    let nvm = NvmParams::new(p.mu_w, p.sigma_w2).map_err(err)?;
    let mut rng = substream(p.seed, "truth");
    let gt = nvm_ground_truth(&subord, &nvm, p.n_mc, &mut rng).map_err(err)?;
    let top = gt.sizes.iter().copied().fold(p.epsilon, f64::max);
    let x = log_grid(p.epsilon / 10.0, 10.0 * top, p.grid_points);
    let subordinator = x.iter().map(|&v| subord.tail(v)).collect::<Result<_, _>>().map_err(err)?;
    Ok(TailResult {
        subordinator,
        nvm_upper: x.iter().map(|&v| gt.upper_tail(v)).collect(),
        nvm_lower: x.iter().map(|&v| gt.lower_tail(v)).collect(),
        x,
    })
}

pub fn infer_native(p: &InferParams) -> Result<InferResult, String> {
    if p.iterations > 20_000 {
        return Err("the demo caps iterations at 20000".into());
    }
    let obs = Observations::with_leading_gap(p.times.clone(), p.values.clone()).map_err(err)?;
    let model = LangevinModel {
        theta: -1.0,
        obs_noise: p.obs_noise,
        state_prior: StatePrior {
            mean: [p.values.first().copied().unwrap_or(0.0), 0.0],
            kappa0: StatePrior::default().kappa0,
        },
        nvm_prior: NvmPrior::default(),
    };
    let init = AnalyticSubordinator::new(SubordinatorFamily::Gamma { c: 1.0, beta: 1.0 }, p.epsilon).map_err(err)?;
    let config = ChainConfig {
        n_iter: p.iterations,
        burn_in: p.burn_in,
        thin: 2,
        init_theta: Some(-1.0),
        ..ChainConfig::quick(init)
    };
    let priors = Priors {
        lambda: GammaParams::new(1.0, 0.1).map_err(err)?,
        theta: ThetaPrior::default(),
        dp: levy_core::dp::DpHyper {
            alpha: 1.0,
            base: GammaParams::new(1.0, 1.0).map_err(err)?,
            truncation: Truncation::Auto { delta: 1e-3, max: 5_000 },
            alpha_prior: GammaParams::new(1.0, 1.0).map_err(err)?,
        },
    };
    let out = run_chain(&obs, &model, &priors, &config, p.seed).map_err(err)?;
    let s = &out.summary;
    let top = s
        .measures
        .iter()
        .flat_map(|m| m.measure.atoms().iter().copied())
        .fold(p.epsilon, f64::max);
    let x = log_grid(p.epsilon / 10.0, 10.0 * top, p.grid_points.clamp(2, 500));
    let tails = posterior_mean_measure(&s.measures).map_err(err)?.evaluate(&x, 0.9);
    let mut res = InferResult {
        x,
        tail_mean: tails.iter().map(|t| t.mean).collect(),
        tail_lo: tails.iter().map(|t| t.lo).collect(),
        tail_hi: tails.iter().map(|t| t.hi).collect(),
        state_mean: Vec::new(),
        state_lo: Vec::new(),
        state_hi: Vec::new(),
        theta_mean: s.theta_mean(),
        series_acceptance: out.series_moves.rate(),
    };
    for j in 0..obs.len() {
        let m = posterior_state_mixture(s, j, 0).map_err(err)?;
        res.state_mean.push(m.mean());
        res.state_lo.push(m.quantile(0.05));
        res.state_hi.push(m.quantile(0.95));
    }
    Ok(res)
}

fn call<P, R>(json: &str, f: impl Fn(&P) -> Result<R, String>) -> Result<String, String>
where
    P: for<'de> Deserialize<'de>,
    R: Serialize,
{
    let params: P = serde_json::from_str(json).map_err(err)?;
    serde_json::to_string(&f(&params)?).map_err(err)
}

/// Simulated observations, latent positions and the subordinator path.
#[wasm_bindgen]
pub fn simulate(params_json: &str) -> Result<String, JsError> {
    call(params_json, simulate_native).map_err(|e| JsError::new(&e))
}

/// Subordinator tail and NVM upper/lower tails on a log grid.
#[wasm_bindgen]
pub fn tails(params_json: &str) -> Result<String, JsError> {
    call(params_json, tails_native).map_err(|e| JsError::new(&e))
}

/// A short MCMC run returning the tail-function band and the filtered position band.
#[wasm_bindgen]
pub fn infer(params_json: &str) -> Result<String, JsError> {
    call(params_json, infer_native).map_err(|e| JsError::new(&e))
}

/// JSON entry points for native callers and tests.
pub fn simulate_json(params_json: &str) -> Result<String, String> {
    call(params_json, simulate_native)
}

pub fn tails_json(params_json: &str) -> Result<String, String> {
    call(params_json, tails_native)
}

pub fn infer_json(params_json: &str) -> Result<String, String> {
    call(params_json, infer_native)
}
