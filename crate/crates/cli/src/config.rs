//! Experiment configuration, read from TOML (or JSON, for echoed configs).

use std::fs;
use std::path::{Path, PathBuf};

use gradmatch::simulator::SimConfig;
use gradmatch::{KernelKind, KernelSpec, OdeSystem, ViConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_GAMMA: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `lotka-volterra`, `protein`, or a model file relative to the config.
    pub model: String,
    pub data: DataSource,
    #[serde(default)]
    pub kernel: KernelSetting,
    pub noise_variance: NoiseSetting,
    #[serde(default = "default_gamma")]
    pub gamma: PerState,
    #[serde(default)]
    pub inference: ViConfig,
    #[serde(default)]
    pub seed: u64,
    /// Step of the re-integration under the estimate; defaults to 1/100 of
    /// the smallest sample gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn default_gamma() -> PerState {
    PerState::Scalar(DEFAULT_GAMMA)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV file relative to the config.
    Path(PathBuf),
    Simulate(SimConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keyword {
    Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSetting {
    Fit { fit: KernelKind },
    Fixed(Vec<KernelSpec>),
}

impl Default for KernelSetting {
    fn default() -> Self {
        KernelSetting::Fit { fit: KernelKind::Rbf }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseSetting {
    Fit(Keyword),
    Known(PerState),
}

/// One value for every state, or one per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerState {
    Scalar(f64),
    List(Vec<f64>),
}

impl PerState {
    pub fn resolve(&self, k: usize, name: &str) -> CliResult<Vec<f64>> {
        let values = match self {
            PerState::Scalar(v) => vec![*v; k],
            PerState::List(vs) if vs.len() == k => vs.clone(),
            PerState::List(vs) => {
                return Err(CliError::Input(format!("{name} has {} entries, model has {k} states", vs.len())));
            }
        };
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(CliError::Input(format!("{name} entries must be finite and > 0, got {v}")));
        }
        Ok(values)
    }
}

impl ExperimentConfig {
    /// Reads a config; `.json` files are parsed as JSON, anything else as TOML.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// The model text: a builtin name or a file relative to `base_dir`.
    pub fn model_text(&self, base_dir: &Path) -> CliResult<String> {
        if let Some(system) = builtin_model(&self.model) {
            return Ok(system.to_string());
        }
        let path = base_dir.join(&self.model);
        fs::read_to_string(&path).map_err(|e| CliError::io(path, e))
    }
}

pub fn builtin_model(name: &str) -> Option<OdeSystem> {
    match name {
        "lotka-volterra" => Some(OdeSystem::builtin_lotka_volterra()),
        "protein" => Some(OdeSystem::builtin_protein_pathway()),
        _ => None,
    }
}

pub fn parse_model(text: &str, origin: &str) -> CliResult<OdeSystem> {
    OdeSystem::parse(text).map_err(|e| CliError::Input(format!("{origin}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LV_TOML: &str = r#"
model = "lotka-volterra"
noise_variance = 0.1
seed = 7

[data]
path = "data.csv"

[inference]
max_iter = 50
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(LV_TOML).unwrap();
        assert_eq!(cfg.data, DataSource::Path("data.csv".into()));
        assert_eq!(cfg.kernel, KernelSetting::Fit { fit: KernelKind::Rbf });
        assert_eq!(cfg.noise_variance, NoiseSetting::Known(PerState::Scalar(0.1)));
        assert_eq!(cfg.gamma, PerState::Scalar(DEFAULT_GAMMA));
        assert_eq!(cfg.inference.max_iter, 50);
        assert_eq!(cfg.inference.tol_theta, ViConfig::default().tol_theta);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn parses_fit_keyword_and_fixed_kernels() {
        let text = r#"
model = "m.txt"
noise_variance = "fit"
gamma = [0.1, 0.2]
kernel = [
  { kind = "rbf", signal_variance = 1.0, lengthscale = 0.5 },
  { kind = "neural_net", signal_variance = 1.0, offset = 1.0, scale = 0.01 },
]
[data]
path = "d.csv"
"#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.noise_variance, NoiseSetting::Fit(Keyword::Fit));
        assert_eq!(cfg.gamma.resolve(2, "gamma").unwrap(), vec![0.1, 0.2]);
        match cfg.kernel {
            KernelSetting::Fixed(specs) => assert_eq!(specs[1].kind(), KernelKind::NeuralNet),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_both_data_sources() {
        let text = r#"
model = "lotka-volterra"
noise_variance = 0.1
[data]
path = "d.csv"
[data.simulate]
theta_true = [2.0, 1.0, 4.0, 1.0]
x0 = [5.0, 3.0]
t_start = 0.0
t_end = 2.0
sample_times = { interval = 0.1 }
integrator_step = 0.001
noise_variance = [0.1, 0.1]
seed = 1
"#;
        assert!(toml::from_str::<ExperimentConfig>(text).is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = format!("{LV_TOML}\nbogus = 1\n");
        assert!(toml::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn per_state_length_is_checked() {
        let err = PerState::List(vec![0.1; 3]).resolve(2, "gamma").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("3 entries"));
        assert!(PerState::Scalar(-1.0).resolve(2, "gamma").is_err());
    }

    #[test]
    fn json_echo_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(LV_TOML).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn builtin_models_round_trip_through_text() {
        for name in ["lotka-volterra", "protein"] {
            let system = builtin_model(name).unwrap();
            let reparsed = parse_model(&system.to_string(), name).unwrap();
            assert_eq!(reparsed, system);
            assert_eq!(reparsed.to_string(), system.to_string());
        }
    }
}
