use std::fs;
use std::path::{Path, PathBuf};

use levy_core::diag::{functional_autocorr, scalar_trace_stats, Autocorrelation, FunctionSampleSet};
use levy_core::dp::posterior_mean_measure;
use levy_core::forecast::{
    gaussian_langevin_mle, naive_forecasts, pooled_measure, rbpf_forecast, rbpf_forecast_mixed, score, RbpfConfig,
};
use levy_core::gibbs::{posterior_state_mixture, run_chain_with, ChainOutput, RetainedSample};
use levy_core::nvm::{average_nvm, log_grid, nvm_ground_truth, nvm_mixture};
use levy_core::rng::substream;
use levy_core::sim::{irregular_times, simulate_ssm, simulate_subordinator_on, LangevinParams, Observations};
use nalgebra::Vector2;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::ingest::{ingest, Normalization, TickDataset};

/// Shared command context.
pub struct Run {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn writer(&self, name: &str) -> Result<csv::Writer<fs::File>, CliError> {
        Ok(csv::Writer::from_path(self.path(name))?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }

    fn manifest(&self, command: &str, inputs: &[&Path], outputs: &[&str]) -> Result<(), CliError> {
        let mut hashed = Vec::new();
        for p in inputs {
            let bytes = fs::read(p)?;
            let digest = Sha256::digest(&bytes);
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            hashed.push(json!({ "path": p.display().to_string(), "sha256": hex }));
        }
        let manifest = json!({
            "command": command,
            "seed": self.seed,
            "config": self.config.to_toml(),
            "inputs": hashed,
            "outputs": outputs,
            "units": "normalized except forecast.csv, which is in input units; see normalization.json",
        });
        self.write_json("manifest.json", &manifest)
    }

    fn write_normalization(&self, n: &Normalization) -> Result<(), CliError> {
        self.write_json("normalization.json", n)
    }
}

fn observations(data: &TickDataset) -> Result<Observations, CliError> {
    Ok(Observations::with_leading_gap(data.times.clone(), data.values.clone())?)
}

fn write_observations(run: &Run, name: &str, times: &[f64], values: &[f64]) -> Result<(), CliError> {
    let mut w = run.writer(name)?;
    w.write_record(["time", "value"])?;
    for (t, y) in times.iter().zip(values) {
        w.serialize((t, y))?;
    }
    w.flush()?;
    Ok(())
}

fn write_acf(run: &Run, name: &str, acf: &Autocorrelation) -> Result<(), CliError> {
    let mut w = run.writer(name)?;
    w.write_record(["lag", "rho"])?;
    for (lag, r) in acf.rho.iter().enumerate() {
        w.serialize((lag, r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(run: &Run) -> Result<(), CliError> {
    let cfg = &run.config;
    let s = &cfg.simulate;
    let subord = cfg.subordinator()?;
    let nvm = cfg.simulation_nvm()?;
    let mut rng = substream(run.seed, "simulate");
    let times = irregular_times(0.0, s.n_obs, s.mean_gap, &mut rng)?;
    let series = simulate_subordinator_on(&subord, 0.0, times, &mut rng)?;
    let params = LangevinParams::new(s.theta, cfg.model.obs_noise)?;
    let path = simulate_ssm(&series, &params, &nvm, Vector2::new(s.x0, s.v0), &mut rng)?;

    write_observations(run, "observations.csv", &path.times, &path.observations)?;
    let mut w = run.writer("true_states.csv")?;
    w.write_record(["time", "x", "v"])?;
    for (t, x) in path.times.iter().zip(&path.states) {
        w.serialize((t, x[0], x[1]))?;
    }
    w.flush()?;
    let mut w = run.writer("true_series.csv")?;
    w.write_record(["interval_index", "size", "time"])?;
    for (j, g) in series.groups().iter().enumerate() {
        for jump in g {
            w.serialize((j, jump.size, jump.time))?;
        }
    }
    w.flush()?;

    let eps = subord.truncation;
    let max_size = series.sizes().into_iter().fold(eps, f64::max);
    let grid = log_grid(eps / 10.0, 10.0 * max_size, cfg.output.grid_points);
    let mut w = run.writer("true_tails.csv")?;
    w.write_record(["x", "value"])?;
    for &x in &grid {
        w.serialize((x, subord.tail(x)?))?;
    }
    w.flush()?;
    let mut truth_rng = substream(run.seed, "truth");
    let gt = nvm_ground_truth(&subord, &nvm, 10_000, &mut truth_rng)?;
    let mut w = run.writer("true_nvm_tails.csv")?;
    w.write_record(["x", "upper", "lower"])?;
    for &x in &grid {
        w.serialize((x, gt.upper_tail(x), gt.lower_tail(x)))?;
    }
    w.flush()?;
    run.write_normalization(&Normalization::from_config(&Default::default()))?;
    run.manifest(
        "simulate",
        &[],
        &[
            "observations.csv",
            "true_states.csv",
            "true_series.csv",
            "true_tails.csv",
            "true_nvm_tails.csv",
            "normalization.json",
        ],
    )
}

const TRACE_HEADER: [&str; 8] = [
    "iteration",
    "theta",
    "alpha",
    "lambda",
    "log_likelihood",
    "n_jumps",
    "sigma_w2_mean",
    "mu_w_mean",
];

fn trace_row(s: &RetainedSample) -> (usize, f64, f64, f64, f64, usize, f64, f64) {
    (
        s.iteration,
        s.theta,
        s.alpha,
        s.lambda,
        s.log_likelihood,
        s.n_jumps,
        s.sigma_w2.mean(),
        s.mu_w.mean,
    )
}

fn chain(run: &Run, obs: &Observations, trace_name: &str) -> Result<ChainOutput, CliError> {
    let cfg = &run.config;
    let mut trace = run.writer(trace_name)?;
    trace.write_record(TRACE_HEADER)?;
    let mut sink_err = None;
    let out = run_chain_with(
        obs,
        &cfg.langevin_model()?,
        &cfg.priors()?,
        &cfg.chain_config()?,
        run.seed,
        |s| {
            if let Err(e) = trace.serialize(trace_row(s)) {
                sink_err = Some(e);
                return Err(levy_core::LevyError::Domain("trace write failed".into()));
            }
            Ok(())
        },
    );
    if let Some(e) = sink_err {
        return Err(e.into());
    }
    trace.flush()?;
    Ok(out?)
}

pub fn infer(run: &Run, data_path: &Path) -> Result<(), CliError> {
    let cfg = &run.config;
    let data = ingest(data_path, Normalization::from_config(&cfg.data))?;
    let obs = observations(&data)?;
    let out = chain(run, &obs, "trace.csv")?;
    let summary = &out.summary;

    let mut w = run.writer("paths.csv")?;
    w.write_record(["sample", "time", "value"])?;
    for (k, path) in summary.paths.iter().enumerate() {
        for (t, z) in obs.times.iter().zip(path) {
            w.serialize((k, t, z))?;
        }
    }
    w.flush()?;

    let mut w = run.writer("measure_samples.csv")?;
    w.write_record(["sample", "atom", "mass"])?;
    for (k, m) in summary.measures.iter().enumerate() {
        for (x, mass) in m.masses() {
            w.serialize((k, x, mass))?;
        }
    }
    w.flush()?;

    let level = cfg.output.band_level;
    let eps = cfg.truncation.epsilon;
    let max_atom = summary
        .measures
        .iter()
        .flat_map(|m| m.measure.atoms().iter().copied())
        .fold(eps, f64::max);
    let grid = log_grid(eps / 10.0, 10.0 * max_atom, cfg.output.grid_points);
    let tails = posterior_mean_measure(&summary.measures)?;
    let mut w = run.writer("tails.csv")?;
    w.write_record(["x", "mean_tail", "lo_band", "hi_band"])?;
    for p in tails.evaluate(&grid, level) {
        w.serialize((p.x, p.mean, p.lo, p.hi))?;
    }
    w.flush()?;

    let mixtures = summary
        .measures
        .iter()
        .zip(&summary.mu_w_mixture)
        .zip(&summary.sigma_w2_mixture)
        .map(|((m, mu), sig)| nvm_mixture(m, mu, sig))
        .collect();
    let avg = average_nvm(mixtures)?;
    for (name, upper) in [("nvm_upper_tails.csv", true), ("nvm_lower_tails.csv", false)] {
        let mut w = run.writer(name)?;
        w.write_record(["x", "value", "lo_band", "hi_band"])?;
        for &x in &grid {
            let (mean, lo, hi) = if upper { avg.upper_band(x, level) } else { avg.lower_band(x, level) };
            w.serialize((x, mean, lo, hi))?;
        }
        w.flush()?;
    }

    let mut w = run.writer("states.csv")?;
    w.write_record(["time", "x_mean", "x_lo", "x_hi", "v_mean", "mu_w_mean"])?;
    let q = 0.5 * (1.0 - level);
    for (j, t) in obs.times.iter().enumerate() {
        let x = posterior_state_mixture(summary, j, 0)?;
        let v = posterior_state_mixture(summary, j, 1)?;
        let mu = posterior_state_mixture(summary, j, 2)?;
        w.serialize((t, x.mean(), x.quantile(q), x.quantile(1.0 - q), v.mean(), mu.mean()))?;
    }
    w.flush()?;

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    run.write_json(
        "posterior.json",
        &json!({
            "n_samples": summary.n_samples(),
            "theta_mean": mean(&summary.theta_trace),
            "alpha_mean": mean(&summary.alpha_trace),
            "lambda_mean": mean(&summary.lambda_trace),
            "series_acceptance": out.series_moves.rate(),
            "series_failed": out.series_moves.failed,
            "theta_acceptance": out.theta_moves.rate(),
            "theta_step": out.final_theta_step,
        }),
    )?;
    run.write_normalization(&data.normalization)?;
    run.manifest(
        "infer",
        &[data_path],
        &[
            "trace.csv",
            "paths.csv",
            "measure_samples.csv",
            "tails.csv",
            "nvm_upper_tails.csv",
            "nvm_lower_tails.csv",
            "states.csv",
            "posterior.json",
            "normalization.json",
        ],
    )
}

pub fn forecast(run: &Run, data_path: &Path) -> Result<(), CliError> {
    let cfg = &run.config;
    let data = ingest(data_path, Normalization::from_config(&cfg.data))?;
    let obs = observations(&data)?;
    let n_train = ((obs.len() as f64) * cfg.forecast.train_fraction).floor() as usize;
    if n_train < 10 || n_train >= obs.len() {
        return Err(CliError::Config {
            field: "forecast.train_fraction".into(),
            reason: format!("leaves {n_train} training points out of {}; need at least 10 and one test point", obs.len()),
        });
    }
    let train = Observations::new(obs.origin, obs.times[..n_train].to_vec(), obs.values[..n_train].to_vec())?;
    let out = chain(run, &train, "train_trace.csv")?;
    let summary = &out.summary;
    let model = cfg.langevin_model()?.with_theta(summary.theta_mean());
    let rbpf = RbpfConfig {
        n_particles: cfg.forecast.particles,
        from: n_train,
    };
    let mut rng = substream(run.seed, "forecast");
    let (levy, report) = if cfg.forecast.mix_samples {
        let sources: Vec<_> = summary
            .measures
            .iter()
            .cloned()
            .zip(summary.theta_trace.iter().copied())
            .collect();
        rbpf_forecast_mixed(&obs, &model, &sources, &rbpf, &mut rng)?
    } else {
        rbpf_forecast(&obs, &model, &pooled_measure(&summary.measures)?, &rbpf, &mut rng)?
    };
    let fit = gaussian_langevin_mle(&train)?;
    let gaussian = fit.params.forecasts(&obs, n_train)?;
    let naive = naive_forecasts(&obs, n_train)?;

    // Forecasts are reported in the original units of the input file.
    let norm = &data.normalization;
    let y = |v: f64| norm.denormalize_value(v);
    let mut w = run.writer("forecast.csv")?;
    w.write_record(["time", "actual", "naive", "gaussian", "levy", "levy_var"])?;
    for ((n, g), l) in naive.iter().zip(&gaussian).zip(&levy) {
        w.serialize((
            norm.denormalize_time(n.time),
            y(n.actual),
            y(n.mean),
            y(g.mean),
            y(l.mean),
            l.variance * norm.value_scale * norm.value_scale,
        ))?;
    }
    w.flush()?;
    let metrics = |r| -> Result<serde_json::Value, CliError> {
        let s = score(r)?;
        Ok(json!({ "mse": s.mse, "hit_rate": s.hit_rate, "n": s.n }))
    };
    run.write_json(
        "metrics.json",
        &json!({
            "naive": metrics(&naive)?,
            "gaussian": metrics(&gaussian)?,
            "levy": metrics(&levy)?,
            "gaussian_fit": fit,
            "theta_mean": model.theta,
            "rbpf": report,
        }),
    )?;
    run.write_normalization(&data.normalization)?;
    run.manifest(
        "forecast",
        &[data_path],
        &["train_trace.csv", "forecast.csv", "metrics.json", "normalization.json"],
    )
}

#[derive(serde::Deserialize)]
struct TraceRow {
    theta: f64,
    alpha: f64,
}

#[derive(serde::Deserialize)]
struct PathRow {
    sample: usize,
    time: f64,
    value: f64,
}

pub fn diagnose(run: &Run, run_dir: &Path) -> Result<(), CliError> {
    let trace_path = run_dir.join("trace.csv");
    let paths_path = run_dir.join("paths.csv");
    let input_err = |p: &Path, e: csv::Error| CliError::Input {
        path: p.display().to_string(),
        line: e.position().map_or(0, |p| p.line()),
        reason: e.to_string(),
    };
    let mut theta = Vec::new();
    let mut alpha = Vec::new();
    for row in csv::Reader::from_path(&trace_path)?.deserialize::<TraceRow>() {
        let row = row.map_err(|e| input_err(&trace_path, e))?;
        theta.push(row.theta);
        alpha.push(row.alpha);
    }
    let mut grid: Vec<f64> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for row in csv::Reader::from_path(&paths_path)?.deserialize::<PathRow>() {
        let row = row.map_err(|e| input_err(&paths_path, e))?;
        if row.sample == values.len() {
            values.push(Vec::new());
        }
        if row.sample == 0 {
            grid.push(row.time);
        }
        values
            .last_mut()
            .ok_or_else(|| CliError::Input {
                path: paths_path.display().to_string(),
                line: 0,
                reason: "samples must start at 0".into(),
            })?
            .push(row.value);
    }
    let max_lag = run.config.output.max_lag.min(theta.len().saturating_sub(1));
    let theta_stats = scalar_trace_stats(&theta, max_lag)?;
    let alpha_stats = scalar_trace_stats(&alpha, max_lag)?;
    let paths = functional_autocorr(&FunctionSampleSet::new(grid, values)?, max_lag)?;
    write_acf(run, "rho_theta.csv", &theta_stats.acf)?;
    write_acf(run, "rho_alpha.csv", &alpha_stats.acf)?;
    write_acf(run, "rho_paths.csv", &paths)?;
    let entry = |a: &Autocorrelation| json!({ "integrated_time": a.integrated_time, "degenerate": a.degenerate });
    run.write_json(
        "diagnostics.json",
        &json!({
            "theta": entry(&theta_stats.acf),
            "alpha": entry(&alpha_stats.acf),
            "paths": entry(&paths),
            "max_lag": max_lag,
        }),
    )?;
    run.manifest(
        "diagnose",
        &[&trace_path, &paths_path],
        &["rho_theta.csv", "rho_alpha.csv", "rho_paths.csv", "diagnostics.json"],
    )
}
