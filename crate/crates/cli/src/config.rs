//! Run configuration: TOML with one table per concern, plus `section.key=value`
//! overrides from the command line.

use levy_core::dp::{DpHyper, GammaParams, Truncation};
use levy_core::gibbs::{BlockSchedule, ChainConfig, Priors, ThetaPrior};
use levy_core::kalman::{LangevinModel, NvmPrior, StatePrior};
use levy_core::sim::{AnalyticSubordinator, NvmParams, SubordinatorFamily};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Normalized observation noise `C̄_v`.
    pub obs_noise: f64,
    pub kappa0: f64,
    pub state_mean_x: f64,
    pub state_mean_v: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            obs_noise: 0.01,
            kappa0: 10.0,
            state_mean_x: 0.0,
            state_mean_v: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvmPriorSection {
    pub alpha_w: f64,
    pub beta_w: f64,
    pub mu_hat_w: f64,
    pub k_w: f64,
}

impl Default for NvmPriorSection {
    fn default() -> Self {
        let p = NvmPrior::default();
        NvmPriorSection {
            alpha_w: p.alpha_w,
            beta_w: p.beta_w,
            mu_hat_w: p.mu_hat_w,
            k_w: p.k_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSection {
    pub lambda_shape: f64,
    pub lambda_rate: f64,
    /// `log_normal` or `log_flat`.
    pub theta_kind: String,
    pub theta_mu: f64,
    pub theta_sigma: f64,
    pub dp_alpha: f64,
    pub alpha_shape: f64,
    pub alpha_rate: f64,
    pub base_shape: f64,
    pub base_rate: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection {
            lambda_shape: 1.0,
            lambda_rate: 0.1,
            theta_kind: "log_normal".into(),
            theta_mu: 0.0,
            theta_sigma: 2.0,
            dp_alpha: 1.0,
            alpha_shape: 1.0,
            alpha_rate: 1.0,
            base_shape: 1.0,
            base_rate: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationSection {
    /// Smallest jump size of simulated and initial subordinators.
    pub epsilon: f64,
    /// Fixed stick-breaking level; `0` selects the automatic rule.
    pub k: usize,
    pub delta: f64,
    pub k_max: usize,
}

impl Default for TruncationSection {
    fn default() -> Self {
        TruncationSection {
            epsilon: 0.01,
            k: 0,
            delta: 1e-4,
            k_max: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub block_len: usize,
    pub overlap: usize,
    pub theta_step: f64,
    pub adapt_theta: bool,
    /// Initial `θ`; `0` draws it from the prior.
    pub init_theta: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            iterations: 2_000,
            burn_in: 500,
            thin: 5,
            block_len: 5,
            overlap: 2,
            theta_step: 0.2,
            adapt_theta: true,
            init_theta: -1.0,
        }
    }
}

/// Parametric subordinator for simulation and for the initial series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubordinatorSection {
    /// `gamma`, `tempered_stable` or `point_mass`.
    pub family: String,
    pub c: f64,
    pub beta: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub rate: f64,
    pub size: f64,
}

impl Default for SubordinatorSection {
    fn default() -> Self {
        SubordinatorSection {
            family: "gamma".into(),
            c: 1.0,
            beta: 1.0,
            kappa: 0.5,
            gamma: 1.0,
            rate: 1.0,
            size: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_obs: usize,
    /// Mean of the exponential gaps between observation times.
    pub mean_gap: f64,
    pub theta: f64,
    pub mu_w: f64,
    pub sigma_w2: f64,
    pub x0: f64,
    pub v0: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            n_obs: 200,
            mean_gap: 1.0,
            theta: -1.0,
            mu_w: 0.0,
            sigma_w2: 1.0,
            x0: 0.0,
            v0: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub particles: usize,
    /// Fraction of observations used for training.
    pub train_fraction: f64,
    /// Mix particles over retained posterior samples instead of using the
    /// posterior-mean measure and `θ`.
    pub mix_samples: bool,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            particles: 1_000,
            train_fraction: 0.7,
            mix_samples: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub time_scale: f64,
    pub value_scale: f64,
    pub value_offset: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            time_scale: 1.0,
            value_scale: 1.0,
            value_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub grid_points: usize,
    pub band_level: f64,
    pub max_lag: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            grid_points: 60,
            band_level: 0.9,
            max_lag: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub nvm_prior: NvmPriorSection,
    pub prior: PriorSection,
    pub truncation: TruncationSection,
    pub chain: ChainSection,
    pub subordinator: SubordinatorSection,
    pub simulate: SimulateSection,
    pub forecast: ForecastSection,
    pub data: DataSection,
    pub output: OutputSection,
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

fn core_err(field: &str) -> impl Fn(levy_core::LevyError) -> CliError + '_ {
    move |e| invalid(field, e.to_string())
}

impl RunConfig {
    /// Parses `text` and applies `overrides` of the form `section.key=value`.
    pub fn load(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| invalid("config", e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| invalid(o, "override must look like section.key=value"))?;
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| invalid(key, "override key must look like section.key"))?;
            let value = parse_value(raw.trim());
            let entry = table
                .entry(section.trim().to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(field.trim().to_string(), value);
                }
                _ => return Err(invalid(section, "is not a section")),
            }
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.langevin_model()?;
        self.priors()?;
        self.subordinator()?;
        self.chain_config()?;
        self.simulation_nvm()?;
        if !(self.simulate.theta < 0.0) {
            return Err(invalid("simulate.theta", "must be negative"));
        }
        if !(self.simulate.mean_gap > 0.0) {
            return Err(invalid("simulate.mean_gap", "must be positive"));
        }
        if self.forecast.particles == 0 {
            return Err(invalid("forecast.particles", "must be at least 1"));
        }
        if !(self.forecast.train_fraction > 0.0 && self.forecast.train_fraction < 1.0) {
            return Err(invalid("forecast.train_fraction", "must lie in (0, 1)"));
        }
        if !(self.data.time_scale > 0.0) || !(self.data.value_scale > 0.0) || !self.data.value_offset.is_finite() {
            return Err(invalid("data", "scales must be positive and the offset finite"));
        }
        if self.output.grid_points < 2 {
            return Err(invalid("output.grid_points", "must be at least 2"));
        }
        if !(self.output.band_level > 0.0 && self.output.band_level < 1.0) {
            return Err(invalid("output.band_level", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn langevin_model(&self) -> Result<LangevinModel, CliError> {
        let m = LangevinModel {
            theta: -1.0,
            obs_noise: self.model.obs_noise,
            state_prior: StatePrior {
                mean: [self.model.state_mean_x, self.model.state_mean_v],
                kappa0: self.model.kappa0,
            },
            nvm_prior: NvmPrior {
                alpha_w: self.nvm_prior.alpha_w,
                beta_w: self.nvm_prior.beta_w,
                mu_hat_w: self.nvm_prior.mu_hat_w,
                k_w: self.nvm_prior.k_w,
            },
        };
        m.validate().map_err(core_err("model"))?;
        Ok(m)
    }

    pub fn priors(&self) -> Result<Priors, CliError> {
        let p = &self.prior;
        let gamma = |field: &'static str, shape, rate| GammaParams::new(shape, rate).map_err(core_err(field));
        let theta = match p.theta_kind.as_str() {
            "log_normal" => {
                if !(p.theta_sigma > 0.0) {
                    return Err(invalid("prior.theta_sigma", "must be positive"));
                }
                ThetaPrior::LogNormal {
                    mu: p.theta_mu,
                    sigma: p.theta_sigma,
                }
            }
            "log_flat" => ThetaPrior::LogFlat,
            other => return Err(invalid("prior.theta_kind", format!("unknown kind {other:?}"))),
        };
        let t = &self.truncation;
        let truncation = if t.k > 0 {
            Truncation::Fixed { k: t.k }
        } else {
            Truncation::Auto {
                delta: t.delta,
                max: t.k_max,
            }
        };
        let dp = DpHyper {
            alpha: p.dp_alpha,
            base: gamma("prior.base", p.base_shape, p.base_rate)?,
            truncation,
            alpha_prior: gamma("prior.alpha", p.alpha_shape, p.alpha_rate)?,
        };
        dp.validate().map_err(core_err("prior.dp"))?;
        Ok(Priors {
            lambda: gamma("prior.lambda", p.lambda_shape, p.lambda_rate)?,
            theta,
            dp,
        })
    }

    pub fn subordinator(&self) -> Result<AnalyticSubordinator, CliError> {
        let s = &self.subordinator;
        let family = match s.family.as_str() {
            "gamma" => SubordinatorFamily::Gamma { c: s.c, beta: s.beta },
            "tempered_stable" => SubordinatorFamily::TemperedStable {
                c: s.c,
                kappa: s.kappa,
                gamma: s.gamma,
            },
            "point_mass" => SubordinatorFamily::PointMass {
                rate: s.rate,
                size: s.size,
            },
            other => return Err(invalid("subordinator.family", format!("unknown family {other:?}"))),
        };
        AnalyticSubordinator::new(family, self.truncation.epsilon).map_err(core_err("subordinator"))
    }

    pub fn chain_config(&self) -> Result<ChainConfig, CliError> {
        let c = &self.chain;
        let cfg = ChainConfig {
            n_iter: c.iterations,
            burn_in: c.burn_in,
            thin: c.thin,
            schedule: BlockSchedule::new(c.block_len, c.overlap).map_err(core_err("chain.block_len"))?,
            theta_step: c.theta_step,
            adapt_theta: c.adapt_theta,
            init: self.subordinator()?,
            init_theta: if c.init_theta == 0.0 { None } else { Some(c.init_theta) },
            store_states: true,
        };
        cfg.validate().map_err(core_err("chain"))?;
        Ok(cfg)
    }

    pub fn simulation_nvm(&self) -> Result<NvmParams, CliError> {
        NvmParams::new(self.simulate.mu_w, self.simulate.sigma_w2).map_err(core_err("simulate"))
    }
}

/// Interprets an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load("", &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_apply_and_type() {
        let cfg = RunConfig::load(
            "[chain]\niterations = 50\n",
            &["chain.burn_in=10".into(), "subordinator.family=point_mass".into()],
        )
        .unwrap();
        assert_eq!(cfg.chain.iterations, 50);
        assert_eq!(cfg.chain.burn_in, 10);
        assert_eq!(cfg.subordinator.family, "point_mass");
    }

    #[test]
    fn field_level_errors() {
        let e = RunConfig::load("", &["chain.burn_in=5000".into()]).unwrap_err();
        assert!(e.to_string().contains("chain"), "{e}");
        let e = RunConfig::load("[chain]\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        assert!(RunConfig::load("", &["nokey".into()]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = RunConfig::load("", &["prior.dp_alpha=2.5".into()]).unwrap();
        assert_eq!(RunConfig::load(&cfg.to_toml(), &[]).unwrap(), cfg);
    }
}
