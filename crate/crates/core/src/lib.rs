//! Parameter estimation for mass-action ODE systems by mean-field variational
//! gradient matching with Gaussian processes.
//!
//! The pipeline is:
//!
//! 1. [`kernels`] builds the covariance blocks of a GP and its time derivative.
//! 2. [`gp_layer`] turns them into a per-state observation posterior and the
//!    derivative-conditional operators used for gradient matching.
//! 3. [`vi_engine`] runs coordinate ascent over a factorized Gaussian proxy of
//!    the latent states (see [`moments`]) alternated with a closed-form Gaussian
//!    update of the ODE parameters.
//!
//! [`simulator`] generates synthetic data and re-integrates estimated
//! parameters; it is never used inside the inference loop.

pub mod error;
pub mod gp_layer;
pub mod kernels;
mod linalg;
pub mod moments;
pub mod ode_model;
pub mod simulator;
pub mod vi_engine;

pub use error::{Error, Result};
pub use gp_layer::{build_gp_layer, derivative_ops, fit_state_hyperparameters, state_posterior, DerivOps, GpState, StatePosterior};
pub use kernels::{build_deriv_kernels, fit_hyperparameters, kernel_eval, DerivKernelSet, KernelKind, KernelSpec, TimeGrid};
pub use moments::FactorizedGaussian;
pub use ode_model::{Monomial, OdeSystem, StateMatrix, Term};
pub use vi_engine::{run_inference, InferenceResult, InferenceSettings, InitialMeans, Schedule, ThetaPosterior, ViConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
