//! Covariance kernels and the joint covariance of a GP with its time
//! derivative on a grid.
//!
//! For a stationary or non-stationary kernel `k(s, t)` the four blocks are
//!
//! ```text
//! C   (i, j) = k(t_i, t_j)
//! Cd  (i, j) = ∂k/∂s (t_i, t_j)       cov(ẋ(t_i), x(t_j))
//! dC  (i, j) = ∂k/∂t (t_i, t_j)       cov(x(t_i), ẋ(t_j))
//! Cdd (i, j) = ∂²k/∂s∂t (t_i, t_j)    cov(ẋ(t_i), ẋ(t_j))
//! ```

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

/// Lower bound applied to every fitted hyperparameter.
pub const HYPER_FLOOR: f64 = 1e-6;
const HYPER_CEIL: f64 = 1e6;
const NOISE_FLOOR: f64 = 1e-8;
const FIT_RESTARTS: usize = 5;
const FIT_MAX_ITERS: u64 = 200;
const MAX_JITTER_ESCALATIONS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Rbf,
    NeuralNet,
}

/// Kernel family together with its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `σ_f² exp(-(s-t)² / (2ℓ²))`
    Rbf { signal_variance: f64, lengthscale: f64 },
    /// `σ_f² asin((a + b s t) / sqrt((a + b s² + 1)(a + b t² + 1)))`
    NeuralNet { signal_variance: f64, offset: f64, scale: f64 },
}

impl KernelSpec {
    pub fn rbf(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        let spec = KernelSpec::Rbf {
            signal_variance,
            lengthscale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn neural_net(signal_variance: f64, offset: f64, scale: f64) -> Result<Self> {
        let spec = KernelSpec::NeuralNet {
            signal_variance,
            offset,
            scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> KernelKind {
        match self {
            KernelSpec::Rbf { .. } => KernelKind::Rbf,
            KernelSpec::NeuralNet { .. } => KernelKind::NeuralNet,
        }
    }

    /// Default starting point for a kernel family, scaled to the data.
    pub fn default_for(kind: KernelKind, signal_variance: f64, time_span: f64) -> Self {
        let sv = signal_variance.max(HYPER_FLOOR);
        let span = time_span.max(HYPER_FLOOR);
        match kind {
            KernelKind::Rbf => KernelSpec::Rbf {
                signal_variance: sv,
                lengthscale: 0.2 * span,
            },
            KernelKind::NeuralNet => KernelSpec::NeuralNet {
                signal_variance: sv,
                offset: 1.0,
                scale: 1.0 / (span * span),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let valid = match *self {
            KernelSpec::Rbf {
                signal_variance,
                lengthscale,
            } => ok(signal_variance) && ok(lengthscale),
            KernelSpec::NeuralNet {
                signal_variance,
                offset,
                scale,
            } => ok(signal_variance) && ok(offset) && ok(scale),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "kernel hyperparameters must be finite and > 0: {self:?}"
            )))
        }
    }

    fn log_params(&self) -> Vec<f64> {
        match *self {
            KernelSpec::Rbf {
                signal_variance,
                lengthscale,
            } => vec![signal_variance.ln(), lengthscale.ln()],
            KernelSpec::NeuralNet {
                signal_variance,
                offset,
                scale,
            } => {
                vec![signal_variance.ln(), offset.ln(), scale.ln()]
            }
        }
    }

    fn from_log_params(kind: KernelKind, p: &[f64]) -> Self {
        let v = |x: f64| x.exp().clamp(HYPER_FLOOR, HYPER_CEIL);
        match kind {
            KernelKind::Rbf => KernelSpec::Rbf {
                signal_variance: v(p[0]),
                lengthscale: v(p[1]),
            },
            KernelKind::NeuralNet => KernelSpec::NeuralNet {
                signal_variance: v(p[0]),
                offset: v(p[1]),
                scale: v(p[2]),
            },
        }
    }

    /// Returns `(k, ∂k/∂s, ∂k/∂t, ∂²k/∂s∂t)` at `(s, t)`.
    pub fn eval_with_derivatives(&self, s: f64, t: f64) -> (f64, f64, f64, f64) {
        match *self {
            KernelSpec::Rbf {
                signal_variance,
                lengthscale,
            } => {
                let l2 = lengthscale * lengthscale;
                let r = s - t;
                let k = signal_variance * (-0.5 * r * r / l2).exp();
                let ds = -r / l2 * k;
                (k, ds, -ds, k * (1.0 / l2 - r * r / (l2 * l2)))
            }
            KernelSpec::NeuralNet {
                signal_variance,
                offset,
                scale,
            } => {
                let (a, b) = (offset, scale);
                let u = a + b * s * t;
                let p = a + b * s * s + 1.0;
                let q = a + b * t * t + 1.0;
                let root = (p * q).sqrt();
                let z = u / root;
                let one_minus = (1.0 - z * z).max(f64::MIN_POSITIVE);
                let g1 = 1.0 / one_minus.sqrt();
                let g2 = z / (one_minus * one_minus.sqrt());

                let zs = b / root * (t - u * s / p);
                let zt = b / root * (s - u * t / q);
                let zst = b / root * (1.0 - b * s * s / p - (b * t / q) * (t - u * s / p));

                let k = signal_variance * z.asin();
                (
                    k,
                    signal_variance * g1 * zs,
                    signal_variance * g1 * zt,
                    signal_variance * (g2 * zs * zt + g1 * zst),
                )
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, s: f64, t: f64) -> f64 {
    spec.eval_with_derivatives(s, t).0
}

/// Strictly increasing sample times, at least two of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "time grid needs at least 2 points, got {}",
                times.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("time grid contains non-finite values".into()));
        }
        if let Some(w) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput(format!(
                "time grid not strictly increasing at index {}: {} then {}",
                w + 1,
                times[w],
                times[w + 1]
            )));
        }
        Ok(TimeGrid(times))
    }

    /// Uniform grid `start, start + step, ...` up to and including `end`
    /// (within half a step of rounding).
    pub fn uniform(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(end > start) {
            return Err(Error::InvalidInput(format!("bad uniform grid [{start}, {end}] step {step}")));
        }
        let n = ((end - start) / step + 0.5).floor() as usize;
        TimeGrid::new((0..=n).map(|i| start + i as f64 * step).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn span(&self) -> f64 {
        self.0[self.0.len() - 1] - self.0[0]
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.0
    }
}

/// The state/derivative covariance blocks on a grid.
#[derive(Debug, Clone)]
pub struct DerivKernelSet {
    pub c: DMatrix<f64>,
    pub cd: DMatrix<f64>,
    pub dc: DMatrix<f64>,
    pub cdd: DMatrix<f64>,
    /// Jitter actually added to the diagonal of `c`.
    pub jitter: f64,
    pub(crate) chol: Cholesky<f64, Dyn>,
}

impl DerivKernelSet {
    pub fn len(&self) -> usize {
        self.c.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.c.nrows() == 0
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }
}

/// Scale-aware default jitter: `1e-6` times the mean prior variance on the grid.
pub fn default_jitter(spec: &KernelSpec, grid: &TimeGrid) -> f64 {
    let times = grid.times();
    1e-6 * times.iter().map(|&t| kernel_eval(spec, t, t)).sum::<f64>() / times.len() as f64
}

fn gram(spec: &KernelSpec, times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    DMatrix::from_fn(n, n, |i, j| kernel_eval(spec, times[i], times[j]))
}

/// Adds jitter to the diagonal until a Cholesky factorization succeeds,
/// multiplying by 10 up to eight times.
fn factor_with_jitter(c: &DMatrix<f64>, base_jitter: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = c.nrows();
    let mut jitter = base_jitter.max(0.0);
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        let trial = c + DMatrix::identity(n, n) * jitter;
        if let Some(ch) = Cholesky::new(trial) {
            if ch.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
                return Ok((ch, jitter));
            }
        }
        if attempt < MAX_JITTER_ESCALATIONS {
            jitter = if jitter > 0.0 {
                jitter * 10.0
            } else {
                1e-10 * linalg::mean_diagonal(c).abs().max(1e-300)
            };
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "kernel matrix still not positive definite with jitter {jitter:e}"
    )))
}

pub fn build_deriv_kernels(spec: &KernelSpec, grid: &TimeGrid, base_jitter: f64) -> Result<DerivKernelSet> {
    spec.validate()?;
    let times = grid.times();
    let n = times.len();
    let mut c = DMatrix::zeros(n, n);
    let mut cd = DMatrix::zeros(n, n);
    let mut dc = DMatrix::zeros(n, n);
    let mut cdd = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (k, ds, dt, dsdt) = spec.eval_with_derivatives(times[i], times[j]);
            c[(i, j)] = k;
            cd[(i, j)] = ds;
            dc[(i, j)] = dt;
            cdd[(i, j)] = dsdt;
        }
    }
    linalg::symmetrize(&mut c);
    linalg::symmetrize(&mut cdd);
    let (chol, jitter) = factor_with_jitter(&c, base_jitter)?;
    for i in 0..n {
        c[(i, i)] += jitter;
    }
    Ok(DerivKernelSet {
        c,
        cd,
        dc,
        cdd,
        jitter,
        chol,
    })
}

/// `log N(y | 0, C + σ² I)`.
pub fn log_marginal_likelihood(spec: &KernelSpec, grid: &TimeGrid, y: &[f64], noise_variance: f64) -> Result<f64> {
    let n = grid.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} observations for {} grid points", y.len(), n)));
    }
    let mut k = gram(spec, grid.times());
    linalg::symmetrize(&mut k);
    for i in 0..n {
        k[(i, i)] += noise_variance;
    }
    let chol = linalg::cholesky(&k, "C + σ²I")?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    Ok(-0.5 * yv.dot(&alpha) - 0.5 * linalg::logdet(&chol) - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

struct NegLml<'a> {
    kind: KernelKind,
    grid: &'a TimeGrid,
    y: &'a [f64],
    fixed_noise: Option<f64>,
}

impl NegLml<'_> {
    fn decode(&self, p: &[f64]) -> (KernelSpec, f64) {
        let nk = match self.kind {
            KernelKind::Rbf => 2,
            KernelKind::NeuralNet => 3,
        };
        let spec = KernelSpec::from_log_params(self.kind, &p[..nk]);
        let noise = match self.fixed_noise {
            Some(v) => v,
            None => p[nk].exp().clamp(NOISE_FLOOR, HYPER_CEIL),
        };
        (spec, noise)
    }
}

impl CostFunction for NegLml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        let (spec, noise) = self.decode(p);
        Ok(match log_marginal_likelihood(&spec, self.grid, self.y, noise) {
            Ok(v) if v.is_finite() => -v,
            _ => f64::INFINITY,
        })
    }
}

fn nelder_mead(problem: NegLml<'_>, start: Vec<f64>) -> Option<(Vec<f64>, f64)> {
    let dim = start.len();
    let mut simplex = vec![start.clone()];
    for i in 0..dim {
        let mut v = start.clone();
        v[i] += 0.5;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-10).ok()?;
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(FIT_MAX_ITERS))
        .run()
        .ok()?;
    let state = res.state();
    let cost = state.get_best_cost();
    let param = state.get_best_param()?.clone();
    cost.is_finite().then_some((param, cost))
}

/// Empirical-Bayes fit of kernel hyperparameters (and optionally the noise
/// variance) by maximizing the GP log marginal likelihood of `y`.
///
/// Multi-start Nelder–Mead in log-parameter space: the first start is
/// `init`, the remaining ones are seeded perturbations of it. The result
/// never has a lower marginal likelihood than `init`.
pub fn fit_hyperparameters(
    kind: KernelKind,
    grid: &TimeGrid,
    y: &[f64],
    init: &KernelSpec,
    init_noise: f64,
    fit_noise: bool,
    seed: u64,
) -> Result<(KernelSpec, f64)> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("observations must be finite".into()));
    }
    if y.len() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observations for {} grid points",
            y.len(),
            grid.len()
        )));
    }
    if init.kind() != kind {
        return Err(Error::InvalidInput(format!(
            "init kernel {:?} does not match kind {kind:?}",
            init.kind()
        )));
    }
    init.validate()?;
    if !(init_noise > 0.0) && fit_noise {
        return Err(Error::InvalidInput("initial noise variance must be > 0 when fitting noise".into()));
    }

    let fixed_noise = (!fit_noise).then_some(init_noise);
    let mut x0 = init.log_params();
    if fit_noise {
        x0.push(init_noise.ln());
    }
    let problem = || NegLml {
        kind,
        grid,
        y,
        fixed_noise,
    };
    let init_cost = problem().cost(&x0).unwrap_or(f64::INFINITY);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = init_cost.is_finite().then(|| (x0.clone(), init_cost));
    for restart in 0..FIT_RESTARTS {
        let start: Vec<f64> = if restart == 0 {
            x0.clone()
        } else {
            x0.iter().map(|v| v + rng.random_range(-1.5..1.5)).collect()
        };
        if let Some((p, c)) = nelder_mead(problem(), start) {
            if best.as_ref().is_none_or(|(_, bc)| c < *bc) {
                best = Some((p, c));
            }
        }
    }
    match best {
        Some((p, c)) if c <= init_cost || !init_cost.is_finite() => {
            let (spec, noise) = problem().decode(&p);
            log::debug!("fitted {spec:?}, noise {noise:e}, log marginal likelihood {:.6}", -c);
            Ok((spec, if fit_noise { noise } else { init_noise }))
        }
        _ => Err(Error::OptimFailed(format!(
            "no restart improved on the initial {kind:?} hyperparameters"
        ))),
    }
}
