//! The four subcommands. Each writes its files under an output directory and
//! returns what it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use gradmatch::simulator::{lotka_volterra_config, protein_config, SimConfig};
use gradmatch::{KernelKind, ViConfig};
use serde::{Deserialize, Serialize};

use crate::config::{builtin_model, DataSource, ExperimentConfig, KernelSetting, NoiseSetting, PerState, DEFAULT_GAMMA};
use crate::data::{read_json, write_csv, write_json, TruthDocument};
use crate::error::{CliError, CliResult};
use crate::metrics::{evaluate, Metrics};
use crate::pipeline::{run_fit, simulate};
use crate::result::ResultDocument;

pub const DATA_FILE: &str = "data.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PLOT_FILE: &str = "plot.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Sweep budget of the replication presets.
pub const PRESET_MAX_ITER: usize = 20_000;
pub const REPLICATE_SEEDS: [u64; 3] = [1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimulatePreset {
    LotkaVolterra,
    Protein,
}

impl SimulatePreset {
    pub fn model_name(self) -> &'static str {
        match self {
            SimulatePreset::LotkaVolterra => "lotka-volterra",
            SimulatePreset::Protein => "protein",
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            SimulatePreset::LotkaVolterra => 0.1,
            SimulatePreset::Protein => 0.01,
        }
    }

    pub fn sim_config(self, noise_variance: f64, seed: u64) -> SimConfig {
        match self {
            SimulatePreset::LotkaVolterra => lotka_volterra_config(noise_variance, seed),
            SimulatePreset::Protein => protein_config(noise_variance, seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReplicatePreset {
    #[serde(rename = "lv-0.1")]
    Lv01,
    #[serde(rename = "lv-0.25")]
    Lv025,
    #[serde(rename = "protein")]
    Protein,
}

impl ReplicatePreset {
    pub fn name(self) -> &'static str {
        match self {
            ReplicatePreset::Lv01 => "lv-0.1",
            ReplicatePreset::Lv025 => "lv-0.25",
            ReplicatePreset::Protein => "protein",
        }
    }

    /// Simulated data, known noise, empirical-Bayes kernel hyperparameters
    /// (RBF for Lotka–Volterra, neural-net for the pathway).
    pub fn config(self, seed: u64) -> ExperimentConfig {
        let (sim, kind, noise) = match self {
            ReplicatePreset::Lv01 => (SimulatePreset::LotkaVolterra, KernelKind::Rbf, 0.1),
            ReplicatePreset::Lv025 => (SimulatePreset::LotkaVolterra, KernelKind::Rbf, 0.25),
            ReplicatePreset::Protein => (SimulatePreset::Protein, KernelKind::NeuralNet, 0.01),
        };
        ExperimentConfig {
            model: sim.model_name().into(),
            data: DataSource::Simulate(sim.sim_config(noise, seed)),
            kernel: KernelSetting::Fit { fit: kind },
            noise_variance: NoiseSetting::Known(PerState::Scalar(noise)),
            gamma: PerState::Scalar(DEFAULT_GAMMA),
            inference: ViConfig {
                max_iter: PRESET_MAX_ITER,
                ..ViConfig::default()
            },
            seed,
            integrator_step: None,
            output: None,
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub enum SimulateSource {
    Preset { preset: SimulatePreset, noise: Option<f64> },
    Config(PathBuf),
}

/// Writes `data.csv` and `truth.json`.
pub fn cmd_simulate(source: &SimulateSource, seed: Option<u64>, out: &Path) -> CliResult<Vec<PathBuf>> {
    let (model_text, mut sim) = match source {
        SimulateSource::Preset { preset, noise } => {
            let noise = noise.unwrap_or(preset.default_noise());
            let model = builtin_model(preset.model_name()).expect("preset names a builtin model");
            (model.to_string(), preset.sim_config(noise, seed.unwrap_or(1)))
        }
        SimulateSource::Config(path) => {
            let cfg = ExperimentConfig::load(path)?;
            let DataSource::Simulate(sim) = cfg.data.clone() else {
                return Err(CliError::Input(format!(
                    "{}: simulate needs a [data.simulate] table",
                    path.display()
                )));
            };
            (cfg.model_text(&config_dir(path))?, sim)
        }
    };
    if let Some(s) = seed {
        sim.seed = s;
    }
    let system = crate::config::parse_model(&model_text, "model")?;
    let dataset = simulate(&system, &sim)?;
    create_dir(out)?;
    let data_path = out.join(DATA_FILE);
    write_csv(&data_path, &dataset.grid, &dataset.observations)?;
    let truth_path = out.join(TRUTH_FILE);
    write_json(&truth_path, &TruthDocument::new(model_text, sim, &dataset))?;
    Ok(vec![data_path, truth_path])
}

/// Applies command-line overrides; a seed also reseeds inline simulation.
pub fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>) {
    if let Some(s) = seed {
        cfg.seed = s;
        if let DataSource::Simulate(sim) = &mut cfg.data {
            sim.seed = s;
        }
    }
}

pub struct FitReport {
    pub document: ResultDocument,
    pub written: Vec<PathBuf>,
}

/// Writes `result.json`, `timings.json` and `plot.csv`. The result is
/// written even when inference did not converge.
pub fn cmd_fit(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<FitReport> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    apply_overrides(&mut cfg, seed);
    let base = config_dir(config_path);
    let out = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => base.join(o),
        (None, None) => return Err(CliError::Input("no output directory: pass --out or set `output`".into())),
    };
    fit_to_dir(&cfg, &base, &out, None)
}

fn fit_to_dir(cfg: &ExperimentConfig, base: &Path, out: &Path, truth: Option<&TruthDocument>) -> CliResult<FitReport> {
    let outcome = run_fit(cfg, base)?;
    create_dir(out)?;
    let result_path = out.join(RESULT_FILE);
    write_json(&result_path, &outcome.document)?;
    let timings_path = out.join(TIMINGS_FILE);
    write_json(&timings_path, &outcome.timings)?;
    let plot_path = out.join(PLOT_FILE);
    write_plot(&plot_path, &plot_rows(cfg.seed, &outcome.document, truth))?;
    Ok(FitReport {
        document: outcome.document,
        written: vec![result_path, timings_path, plot_path],
    })
}

/// Writes `metrics.json`.
pub fn cmd_evaluate(result: &Path, truth: &Path, out: &Path) -> CliResult<(Metrics, PathBuf)> {
    let doc: ResultDocument = read_json(result)?;
    let truth: TruthDocument = read_json(truth)?;
    let metrics = evaluate(&doc, &truth)?;
    create_dir(out)?;
    let path = out.join(METRICS_FILE);
    write_json(&path, &metrics)?;
    Ok((metrics, path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotRow {
    pub seed: u64,
    pub series: String,
    pub state: usize,
    pub t: f64,
    pub value: f64,
}

/// Long-format plot data: observations, truth, proxy mean ± 1 sd and the
/// re-integrated trajectory.
pub fn plot_rows(seed: u64, doc: &ResultDocument, truth: Option<&TruthDocument>) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    let mut push = |series: &str, states: &[Vec<f64>]| {
        for (k, row) in states.iter().enumerate() {
            for (t, v) in doc.times.iter().zip(row) {
                rows.push(PlotRow {
                    seed,
                    series: series.into(),
                    state: k + 1,
                    t: *t,
                    value: *v,
                });
            }
        }
    };
    push("observation", &doc.observations);
    if let Some(truth) = truth {
        push("truth", &truth.states);
    }
    push("proxy_mean", &doc.proxy.means);
    let band = |sign: f64| -> Vec<Vec<f64>> {
        doc.proxy
            .means
            .iter()
            .zip(&doc.proxy.variances)
            .map(|(m, v)| m.iter().zip(v).map(|(m, v)| m + sign * v.sqrt()).collect())
            .collect()
    };
    push("proxy_lower", &band(-1.0));
    push("proxy_upper", &band(1.0));
    if let Some(traj) = &doc.reintegrated {
        push("reintegrated", &traj.states);
    }
    rows
}

pub fn write_plot(path: &Path, rows: &[PlotRow]) -> CliResult<()> {
    let io = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    let mut wtr = csv::Writer::from_path(path).map_err(io)?;
    for row in rows {
        wtr.serialize(row).map_err(io)?;
    }
    wtr.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub preset: ReplicatePreset,
    pub seeds: Vec<u64>,
    pub theta_true: Vec<f64>,
    /// Seed averages of the parameter means and standard deviations.
    pub theta_mean: Vec<f64>,
    pub theta_std_mean: Vec<f64>,
    /// Seed average of the overall re-integrated RMSE; absent if any seed
    /// diverged.
    pub reintegrated_rmse_mean: Option<f64>,
    pub per_seed: Vec<SeedSummary>,
    pub checks: Vec<Check>,
}

impl ReplicateSummary {
    pub fn all_converged(&self) -> bool {
        self.per_seed.iter().all(|s| s.converged)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const MAX_RELATIVE_ERROR: f64 = 0.25;
pub const MAX_NORMALIZED_RMSE: f64 = 0.15;

/// Runs a preset on each seed (concurrently), writing one directory per
/// seed plus the combined `plot.csv` and `summary.json`.
pub fn cmd_replicate(preset: ReplicatePreset, seeds: &[u64], out: &Path) -> CliResult<ReplicateSummary> {
    create_dir(out)?;
    let runs: Vec<CliResult<(ResultDocument, TruthDocument, Metrics)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| scope.spawn(move || replicate_seed(preset, seed, out)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("replicate worker panicked")).collect()
    });
    let mut docs = Vec::with_capacity(runs.len());
    for run in runs {
        docs.push(run?);
    }

    let mut plot = Vec::new();
    for (&seed, (doc, truth, _)) in seeds.iter().zip(&docs) {
        plot.extend(plot_rows(seed, doc, Some(truth)));
    }
    write_plot(&out.join(PLOT_FILE), &plot)?;

    let summary = summarize(preset, seeds, &docs);
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn replicate_seed(preset: ReplicatePreset, seed: u64, out: &Path) -> CliResult<(ResultDocument, TruthDocument, Metrics)> {
    let cfg = preset.config(seed);
    let dir = out.join(format!("seed-{seed}"));
    create_dir(&dir)?;
    write_json(&dir.join(CONFIG_FILE), &cfg)?;
    let DataSource::Simulate(sim) = &cfg.data else {
        unreachable!("presets simulate their data")
    };
    let system = builtin_model(&cfg.model).expect("preset names a builtin model");
    let dataset = simulate(&system, sim)?;
    write_csv(&dir.join(DATA_FILE), &dataset.grid, &dataset.observations)?;
    let truth = TruthDocument::new(system.to_string(), sim.clone(), &dataset);
    write_json(&dir.join(TRUTH_FILE), &truth)?;

    let report = fit_to_dir(&cfg, &dir, &dir, Some(&truth))?;
    let metrics = evaluate(&report.document, &truth)?;
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    Ok((report.document, truth, metrics))
}

fn summarize(preset: ReplicatePreset, seeds: &[u64], runs: &[(ResultDocument, TruthDocument, Metrics)]) -> ReplicateSummary {
    let n = runs.len() as f64;
    let m = runs[0].2.theta_true.len();
    let theta_true = runs[0].2.theta_true.clone();
    let avg =
        |f: &dyn Fn(&Metrics) -> &Vec<f64>| -> Vec<f64> { (0..m).map(|i| runs.iter().map(|r| f(&r.2)[i]).sum::<f64>() / n).collect() };
    let theta_mean = avg(&|x| &x.theta_estimate);
    let theta_std_mean = avg(&|x| &x.theta_std);
    let reintegrated_rmse_mean = runs
        .iter()
        .map(|r| r.2.reintegrated.as_ref().map(|t| t.rmse_overall))
        .sum::<Option<f64>>()
        .map(|s| s / n);

    let mut checks = vec![Check {
        name: "converged".into(),
        passed: runs.iter().all(|r| r.0.converged),
        detail: format!("sweeps per seed {:?}", runs.iter().map(|r| r.0.iterations).collect::<Vec<_>>()),
    }];
    match preset {
        ReplicatePreset::Lv01 | ReplicatePreset::Lv025 => {
            let rel: Vec<f64> = theta_mean.iter().zip(&theta_true).map(|(z, t)| (z - t).abs() / t.abs()).collect();
            let in_sd: Vec<bool> = (0..m)
                .map(|i| (theta_mean[i] - theta_true[i]).abs() <= 3.0 * theta_std_mean[i])
                .collect();
            checks.push(Check {
                name: "parameter_recovery".into(),
                passed: rel.iter().all(|r| *r <= MAX_RELATIVE_ERROR) && in_sd.iter().all(|b| *b),
                detail: format!(
                    "seed-mean theta {theta_mean:?}, relative error {rel:?} (limit {MAX_RELATIVE_ERROR}), within 3 sd {in_sd:?}"
                ),
            });
            let changes: Vec<Option<Vec<usize>>> = runs
                .iter()
                .map(|r| r.2.reintegrated.as_ref().map(|t| t.derivative_sign_changes.clone()))
                .collect();
            checks.push(Check {
                name: "oscillation".into(),
                passed: changes.iter().all(|c| c.as_ref().is_some_and(|c| c.iter().all(|n| *n >= 1))),
                detail: format!("derivative sign changes per seed {changes:?}"),
            });
        }
        ReplicatePreset::Protein => {
            let rho: Vec<Option<f64>> = runs.iter().map(|r| r.2.spearman).collect();
            checks.push(Check {
                name: "rank_preserved".into(),
                passed: rho.iter().all(|r| *r == Some(1.0)),
                detail: format!("Spearman per seed {rho:?}"),
            });
            let nrmse: Vec<Vec<Option<f64>>> = runs.iter().map(|r| r.2.proxy_rmse_normalized.clone()).collect();
            checks.push(Check {
                name: "proxy_rmse_normalized".into(),
                passed: nrmse.iter().flatten().all(|v| v.is_some_and(|v| v <= MAX_NORMALIZED_RMSE)),
                detail: format!("proxy RMSE / truth range per seed {nrmse:?} (limit {MAX_NORMALIZED_RMSE})"),
            });
        }
    }

    ReplicateSummary {
        preset,
        seeds: seeds.to_vec(),
        theta_true,
        theta_mean,
        theta_std_mean,
        reintegrated_rmse_mean,
        per_seed: seeds
            .iter()
            .zip(runs)
            .map(|(&seed, r)| SeedSummary {
                seed,
                converged: r.0.converged,
                iterations: r.0.iterations,
                metrics: r.2.clone(),
            })
            .collect(),
        checks,
    }
}
