//! The schema-versioned result document written by `fit` and `replicate`.

use gradmatch::KernelSpec;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const RESULT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_NAME: &str = "gradmatch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub tool: ToolInfo,
    /// The resolved configuration, minus the output location.
    pub config: ExperimentConfig,
    pub model: String,
    pub times: Vec<f64>,
    /// One row per state.
    pub observations: Vec<Vec<f64>>,
    pub gp: GpSummary,
    pub theta: ThetaSummary,
    pub proxy: ProxySummary,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// RK4 under the parameter mean from the proxy mean at the first time;
    /// absent if the integration diverged.
    pub reintegrated: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
    pub core_version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: gradmatch::VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSummary {
    pub kernels: Vec<KernelSpec>,
    pub kernels_fitted: bool,
    pub noise_variance: Vec<f64>,
    pub noise_fitted: bool,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSummary {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxySummary {
    /// One row per state.
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub x0: Vec<f64>,
    pub step: f64,
    /// One row per state, on the observation times.
    pub states: Vec<Vec<f64>>,
}

/// Wall-clock timings, kept out of the result document so that it stays
/// reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub hyperparameter_fit_secs: f64,
    pub inference_secs: f64,
    pub total_secs: f64,
}

/// JSON Schema every result document validates against.
pub const RESULT_SCHEMA: &str = include_str!("../schema/result.schema.json");
