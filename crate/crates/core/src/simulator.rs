//! Synthetic data generation and re-integration of fitted parameters.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::kernels::TimeGrid;
use crate::ode_model::{OdeSystem, StateMatrix};
use crate::{Error, Result};

/// Classical fixed-step RK4 starting from `x0` at the first grid time.
pub fn integrate_rk4(system: &OdeSystem, theta: &[f64], x0: &[f64], grid: &TimeGrid, step: f64) -> Result<StateMatrix> {
    integrate_from(system, theta, x0, grid.times()[0], grid.times(), step)
}

/// RK4 from `(t0, x0)`, landing exactly on each of `times` (which must be
/// `>= t0` and increasing). The last sub-step before a sample time is
/// shortened as needed.
pub fn integrate_from(system: &OdeSystem, theta: &[f64], x0: &[f64], t0: f64, times: &[f64], step: f64) -> Result<StateMatrix> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidInput(format!("integrator step must be > 0, got {step}")));
    }
    system.evaluate(theta, x0)?;
    if times.first().is_some_and(|&t| t < t0) {
        return Err(Error::InvalidInput(format!("sample time {} precedes start time {t0}", times[0])));
    }
    let k = system.num_states();
    let rhs = |x: &[f64]| system.eval_unchecked(theta, x);
    let mut x = x0.to_vec();
    let mut t = t0;
    let mut out = DMatrix::zeros(k, times.len());
    let mut scratch = vec![0.0; k];
    for (j, &target) in times.iter().enumerate() {
        while target - t > 1e-12 * step {
            let h = step.min(target - t);
            let k1 = rhs(&x);
            for i in 0..k {
                scratch[i] = x[i] + 0.5 * h * k1[i];
            }
            let k2 = rhs(&scratch);
            for i in 0..k {
                scratch[i] = x[i] + 0.5 * h * k2[i];
            }
            let k3 = rhs(&scratch);
            for i in 0..k {
                scratch[i] = x[i] + h * k3[i];
            }
            let k4 = rhs(&scratch);
            for i in 0..k {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t += h;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState {
                    time: t,
                    detail: format!("state {x:?}"),
                });
            }
        }
        t = target;
        for i in 0..k {
            out[(i, j)] = x[i];
        }
    }
    StateMatrix::new(out)
}

/// `Y = X + E` with independent `N(0, σ_k²)` noise per cell.
pub fn add_noise(x: &StateMatrix, noise_variance: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    let k = x.num_states();
    if noise_variance.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} noise variances for {k} states",
            noise_variance.len()
        )));
    }
    if noise_variance.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("noise variances must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = x.values().clone();
    // column-major draw order: all states at t1, then t2, ...
    for j in 0..y.ncols() {
        for i in 0..k {
            if noise_variance[i] > 0.0 {
                let dist = Normal::new(0.0, noise_variance[i].sqrt()).expect("valid normal");
                y[(i, j)] += dist.sample(&mut rng);
            }
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum SampleTimes {
    Explicit { times: Vec<f64> },
    Uniform { interval: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub theta_true: Vec<f64>,
    pub x0: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub sample_times: SampleTimes,
    pub integrator_step: f64,
    pub noise_variance: Vec<f64>,
    pub seed: u64,
}

impl SimConfig {
    pub fn grid(&self) -> Result<TimeGrid> {
        let grid = match &self.sample_times {
            SampleTimes::Explicit { times } => TimeGrid::new(times.clone())?,
            SampleTimes::Uniform { interval } => TimeGrid::uniform(self.t_start, self.t_end, *interval)?,
        };
        let eps = 1e-9 * (self.t_end - self.t_start).abs().max(1.0);
        let t = grid.times();
        if t[0] < self.t_start - eps || t[t.len() - 1] > self.t_end + eps {
            return Err(Error::InvalidInput(format!(
                "sample times must lie in [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        let min_gap = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if self.integrator_step > min_gap + eps {
            return Err(Error::InvalidInput(format!(
                "integrator step {} exceeds the smallest sample gap {min_gap}",
                self.integrator_step
            )));
        }
        Ok(grid)
    }
}

/// Observations and ground truth for one simulated experiment.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: TimeGrid,
    pub observations: DMatrix<f64>,
    pub truth: StateMatrix,
}

pub fn make_dataset(system: &OdeSystem, cfg: &SimConfig) -> Result<Dataset> {
    let grid = cfg.grid()?;
    let truth = integrate_from(system, &cfg.theta_true, &cfg.x0, cfg.t_start, grid.times(), cfg.integrator_step)?;
    let observations = add_noise(&truth, &cfg.noise_variance, cfg.seed)?;
    Ok(Dataset { grid, observations, truth })
}

/// The Lotka–Volterra benchmark: `θ = (2, 1, 4, 1)`, `x(0) = (5, 3)`,
/// samples every 0.1 on `[0, 2]`.
pub fn lotka_volterra_config(noise_variance: f64, seed: u64) -> SimConfig {
    SimConfig {
        theta_true: vec![2.0, 1.0, 4.0, 1.0],
        x0: vec![5.0, 3.0],
        t_start: 0.0,
        t_end: 2.0,
        sample_times: SampleTimes::Uniform { interval: 0.1 },
        integrator_step: 1e-3,
        noise_variance: vec![noise_variance; 2],
        seed,
    }
}

pub const PROTEIN_SAMPLE_TIMES: [f64; 15] = [0.0, 1.0, 2.0, 4.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0];

/// The signalling-pathway benchmark in transformed coordinates.
pub fn protein_config(noise_variance: f64, seed: u64) -> SimConfig {
    SimConfig {
        theta_true: vec![0.07, 0.6, 0.05, 0.3, 0.017],
        x0: vec![1.0, 0.0, 1.0, 0.0, 0.0],
        t_start: 0.0,
        t_end: 100.0,
        sample_times: SampleTimes::Explicit {
            times: PROTEIN_SAMPLE_TIMES.to_vec(),
        },
        integrator_step: 1e-2,
        noise_variance: vec![noise_variance; 5],
        seed,
    }
}
