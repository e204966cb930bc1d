//! Config → data → GP layer → coordinate ascent → result document.

use std::path::Path;
use std::time::Instant;

use gradmatch::simulator::{integrate_from, make_dataset, Dataset};
use gradmatch::{fit_state_hyperparameters, run_inference, InferenceSettings, OdeSystem};
use nalgebra::DMatrix;

use crate::config::{parse_model, DataSource, ExperimentConfig, KernelSetting, NoiseSetting};
use crate::data::{read_csv, rows, Series};
use crate::error::{CliError, CliResult};
use crate::result::{GpSummary, ProxySummary, ResultDocument, ThetaSummary, Timings, ToolInfo, Trajectory, RESULT_SCHEMA_VERSION};

/// Initial noise guess for `noise_variance = "fit"`, as a fraction of the
/// centered sample variance.
const NOISE_GUESS_FRACTION: f64 = 0.1;

pub struct FitOutcome {
    pub document: ResultDocument,
    pub timings: Timings,
}

/// Resolves the model and the observations of a config.
pub fn load_inputs(cfg: &ExperimentConfig, base_dir: &Path) -> CliResult<(String, OdeSystem, Series)> {
    let text = cfg.model_text(base_dir)?;
    let system = parse_model(&text, &cfg.model)?;
    let series = match &cfg.data {
        DataSource::Path(p) => read_csv(&base_dir.join(p))?,
        DataSource::Simulate(sim) => {
            let ds = simulate(&system, sim)?;
            Series {
                grid: ds.grid,
                values: ds.observations,
            }
        }
    };
    if series.values.nrows() != system.num_states() {
        return Err(CliError::Input(format!(
            "data has {} state columns but model `{}` has {} states",
            series.values.nrows(),
            cfg.model,
            system.num_states()
        )));
    }
    Ok((system.to_string(), system, series))
}

pub fn simulate(system: &OdeSystem, sim: &gradmatch::simulator::SimConfig) -> CliResult<Dataset> {
    if sim.theta_true.len() != system.num_params() || sim.x0.len() != system.num_states() {
        return Err(CliError::Input(format!(
            "simulation has {} parameters and {} initial states, model has {} and {}",
            sim.theta_true.len(),
            sim.x0.len(),
            system.num_params(),
            system.num_states()
        )));
    }
    Ok(make_dataset(system, sim)?)
}

pub fn run_fit(cfg: &ExperimentConfig, base_dir: &Path) -> CliResult<FitOutcome> {
    let start = Instant::now();
    let (model_text, system, series) = load_inputs(cfg, base_dir)?;
    let k = system.num_states();
    let gamma = cfg.gamma.resolve(k, "gamma")?;

    let fit_start = Instant::now();
    let (kernels, noise_variance, kernels_fitted, noise_fitted) = match (&cfg.kernel, &cfg.noise_variance) {
        (KernelSetting::Fixed(specs), NoiseSetting::Known(noise)) => {
            if specs.len() != k {
                return Err(CliError::Input(format!("kernel has {} entries, model has {k} states", specs.len())));
            }
            for spec in specs {
                spec.validate().map_err(|e| CliError::Input(format!("kernel: {e}")))?;
            }
            (specs.clone(), noise.resolve(k, "noise_variance")?, false, false)
        }
        (KernelSetting::Fixed(_), NoiseSetting::Fit(_)) => {
            return Err(CliError::Input("noise_variance = \"fit\" requires kernel = { fit = ... }".into()));
        }
        (KernelSetting::Fit { fit }, noise) => {
            let (start_noise, fit_noise) = match noise {
                NoiseSetting::Known(v) => (v.resolve(k, "noise_variance")?, false),
                NoiseSetting::Fit(_) => (noise_guess(&series.values), true),
            };
            let (specs, noises) = fit_state_hyperparameters(*fit, &series.grid, &series.values, &start_noise, fit_noise, cfg.seed)?;
            (specs, noises, true, fit_noise)
        }
    };
    let hyperparameter_fit_secs = fit_start.elapsed().as_secs_f64();

    let settings = InferenceSettings {
        kernels: kernels.clone(),
        noise_variance: noise_variance.clone(),
        gamma: gamma.clone(),
        vi: cfg.inference,
    };
    let infer_start = Instant::now();
    let res = run_inference(&series.values, &series.grid, &system, &settings)?;
    let inference_secs = infer_start.elapsed().as_secs_f64();
    log::info!(
        "{} sweeps, converged: {}, theta {:?}",
        res.iterations,
        res.converged,
        res.theta.mean.as_slice()
    );

    let means = res.proxy.means_matrix();
    let reintegrated = reintegrate(&system, res.theta.mean.as_slice(), &means, series.grid.times(), cfg.integrator_step)?;

    let mut echo = cfg.clone();
    echo.output = None;
    let document = ResultDocument {
        schema_version: RESULT_SCHEMA_VERSION,
        tool: ToolInfo::current(),
        config: echo,
        model: model_text,
        times: series.grid.times().to_vec(),
        observations: rows(&series.values),
        gp: GpSummary {
            kernels,
            kernels_fitted,
            noise_variance,
            noise_fitted,
            gamma,
        },
        theta: ThetaSummary {
            mean: res.theta.mean.iter().copied().collect(),
            cov: rows(&res.theta.cov),
            std: res.theta.std_devs(),
        },
        proxy: ProxySummary {
            means: rows(&means),
            variances: rows(&res.proxy.variances_matrix()),
        },
        elbo_trace: res.elbo_trace,
        iterations: res.iterations,
        converged: res.converged,
        reintegrated,
    };
    let timings = Timings {
        hyperparameter_fit_secs,
        inference_secs,
        total_secs: start.elapsed().as_secs_f64(),
    };
    Ok(FitOutcome { document, timings })
}

fn noise_guess(y: &DMatrix<f64>) -> Vec<f64> {
    y.row_iter().map(|r| (NOISE_GUESS_FRACTION * r.variance()).max(1e-8)).collect()
}

/// Integrates under `theta` from the proxy mean at the first sample time.
pub fn reintegrate(
    system: &OdeSystem,
    theta: &[f64],
    means: &DMatrix<f64>,
    times: &[f64],
    step: Option<f64>,
) -> CliResult<Option<Trajectory>> {
    let min_gap = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let step = step.unwrap_or(min_gap / 100.0);
    if !(step > 0.0) || !step.is_finite() {
        return Err(CliError::Input(format!("integrator_step must be > 0, got {step}")));
    }
    let x0: Vec<f64> = means.column(0).iter().copied().collect();
    match integrate_from(system, theta, &x0, times[0], times, step) {
        Ok(x) => Ok(Some(Trajectory {
            x0,
            step,
            states: rows(x.values()),
        })),
        Err(e @ gradmatch::Error::NonFiniteState { .. }) => {
            log::warn!("re-integration under the estimate diverged: {e}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}
