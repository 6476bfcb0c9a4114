//! Nonparametric Bayesian inference of subordinator and normal variance-mean
//! Lévy measures in linear Lévy-driven state-space models.
//!
//! The crate is organised by stage of the pipeline:
//!
//! - [`sim`]: jump-series simulation and the shot-noise response of the
//!   Langevin system.
//! - [`kalman`]: the Kalman filter over the extended state `(X, μ_w)` with
//!   `σ_w²` integrated out, giving the marginal likelihood of a jump series.
//! - [`dp`]: Dirichlet-process posterior draws for the jump-size law, the
//!   conjugate rate posterior and the concentration update.
//! - [`gibbs`]: the augmented MH-in-Gibbs sampler with blocked series updates.
//! - [`nvm`]: Student-t mixture representation of NVM Lévy density samples.
//! - [`diag`]: scalar and functional autocorrelation diagnostics.
//! - [`forecast`]: one-step forecasting with naive, Gaussian-Langevin and
//!   Rao-Blackwellized particle filter forecasters.

pub mod diag;
pub mod dp;
pub mod error;
pub mod forecast;
pub mod gibbs;
pub mod kalman;
pub mod numeric;
pub mod nvm;
pub mod rng;
pub mod sim;

pub use error::{LevyError, Result};
