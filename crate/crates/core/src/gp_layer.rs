//! Per-state Gaussian-process quantities.
//!
//! * observation posterior `N(μ, Σ)` with `μ = C(C+σ²I)⁻¹y`, `Σ = σ²C(C+σ²I)⁻¹`
//! * derivative operator `D = Cd C⁻¹`, so `E[ẋ | x] = D x`
//! * derivative covariance `A = Cdd − Cd C⁻¹ dC`
//! * gradient-matching precision `Λ = (A + γI)⁻¹`

use nalgebra::{DMatrix, DVector};

use crate::kernels::{build_deriv_kernels, default_jitter, fit_hyperparameters, DerivKernelSet, KernelKind, KernelSpec, TimeGrid};
use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct StatePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    logdet_cov: f64,
}

impl StatePosterior {
    /// From an explicit mean and covariance; the precision is obtained by
    /// Cholesky inversion.
    pub fn new(mean: DVector<f64>, mut cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::DimensionMismatch(format!(
                "mean {} vs covariance {:?}",
                mean.len(),
                cov.shape()
            )));
        }
        linalg::symmetrize(&mut cov);
        let (precision, logdet_cov) = linalg::spd_inverse(&cov, "state posterior covariance")?;
        Ok(StatePosterior {
            mean,
            cov,
            precision,
            logdet_cov,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `Σ⁻¹`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn logdet_cov(&self) -> f64 {
        self.logdet_cov
    }

    fn shifted(mut self, offset: f64) -> Self {
        self.mean.add_scalar_mut(offset);
        self
    }
}

pub fn state_posterior(kernels: &DerivKernelSet, noise_variance: f64, y: &DVector<f64>) -> Result<StatePosterior> {
    let n = kernels.len();
    if !(noise_variance > 0.0) || !noise_variance.is_finite() {
        return Err(Error::InvalidInput(format!("noise variance must be > 0, got {noise_variance}")));
    }
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} observations for {n} grid points", y.len())));
    }
    let c = &kernels.c;
    let ky = c + DMatrix::identity(n, n) * noise_variance;
    let ky_chol = linalg::cholesky(&ky, "C + σ²I")?;
    let mean = c * ky_chol.solve(y);
    // (C+σ²I)⁻¹C is the transpose of C(C+σ²I)⁻¹
    let mut cov = ky_chol.solve(c).transpose() * noise_variance;
    linalg::symmetrize(&mut cov);

    // Σ⁻¹ = C⁻¹ + I/σ², formed directly from the kernel factor for accuracy.
    let mut precision = kernels.cholesky().inverse();
    for i in 0..n {
        precision[(i, i)] += 1.0 / noise_variance;
    }
    linalg::symmetrize(&mut precision);
    let logdet_cov = n as f64 * noise_variance.ln() + linalg::logdet(kernels.cholesky()) - linalg::logdet(&ky_chol);
    Ok(StatePosterior {
        mean,
        cov,
        precision,
        logdet_cov,
    })
}

#[derive(Debug, Clone)]
pub struct DerivOps {
    pub d: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub gamma: f64,
    logdet_lambda: f64,
    lambda_d_diag: DVector<f64>,
    dt_lambda_d_diag: DVector<f64>,
}

impl DerivOps {
    pub fn new(d: DMatrix<f64>, a: DMatrix<f64>, gamma: f64) -> Result<Self> {
        let n = d.nrows();
        if d.shape() != (n, n) || a.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!("D {:?} vs A {:?}", d.shape(), a.shape())));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidInput(format!("gamma must be > 0, got {gamma}")));
        }
        let mut a = a;
        linalg::symmetrize(&mut a);
        let shifted = &a + DMatrix::identity(n, n) * gamma;
        let (lambda, logdet_lambda) = linalg::spd_inverse(&shifted, "A + γI")
            .map(|(inv, ld)| (inv, -ld))
            .map_err(|_| Error::NotPositiveDefinite(format!("A + γI with γ = {gamma:e}")))?;
        let lambda_d = &lambda * &d;
        let dt_lambda_d = d.transpose() * &lambda_d;
        Ok(DerivOps {
            lambda_d_diag: lambda_d.diagonal(),
            dt_lambda_d_diag: dt_lambda_d.diagonal(),
            d,
            a,
            lambda,
            gamma,
            logdet_lambda,
        })
    }

    pub fn len(&self) -> usize {
        self.d.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.d.nrows() == 0
    }

    pub fn logdet_lambda(&self) -> f64 {
        self.logdet_lambda
    }

    /// Diagonal of `Λ D`.
    pub fn lambda_d_diag(&self) -> &DVector<f64> {
        &self.lambda_d_diag
    }

    /// Diagonal of `Dᵀ Λ D`.
    pub fn dt_lambda_d_diag(&self) -> &DVector<f64> {
        &self.dt_lambda_d_diag
    }
}

pub fn derivative_ops(kernels: &DerivKernelSet, gamma: f64) -> Result<DerivOps> {
    // Cd C⁻¹ = (C⁻¹ dC)ᵀ since Cd = dCᵀ and C is symmetric
    let d = kernels.cholesky().solve(&kernels.dc).transpose();
    let a = &kernels.cdd - &d * &kernels.dc;
    DerivOps::new(d, a, gamma)
}

/// Everything the inference engine needs about one state.
#[derive(Debug, Clone)]
pub struct GpState {
    /// Empirical mean of the observations; the GP models deviations from it.
    pub offset: f64,
    pub kernel: KernelSpec,
    pub noise_variance: f64,
    /// Observation posterior on the original (uncentered) scale.
    pub posterior: StatePosterior,
    pub ops: DerivOps,
    pub jitter: f64,
}

impl GpState {
    pub fn build(kernel: &KernelSpec, grid: &TimeGrid, noise_variance: f64, gamma: f64, y: &[f64]) -> Result<Self> {
        if y.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} observations for {} grid points",
                y.len(),
                grid.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("observations must be finite".into()));
        }
        let offset = y.iter().sum::<f64>() / y.len() as f64;
        let centered = DVector::from_iterator(y.len(), y.iter().map(|v| v - offset));
        let kernels = build_deriv_kernels(kernel, grid, default_jitter(kernel, grid))?;
        let posterior = state_posterior(&kernels, noise_variance, &centered)?.shifted(offset);
        let ops = derivative_ops(&kernels, gamma)?;
        Ok(GpState {
            offset,
            kernel: *kernel,
            noise_variance,
            posterior,
            ops,
            jitter: kernels.jitter,
        })
    }

    /// Assembles a state directly from precomputed pieces.
    pub fn from_parts(offset: f64, posterior: StatePosterior, ops: DerivOps) -> Result<Self> {
        if posterior.len() != ops.len() {
            return Err(Error::DimensionMismatch(format!(
                "posterior of size {} vs operators of size {}",
                posterior.len(),
                ops.len()
            )));
        }
        Ok(GpState {
            offset,
            kernel: KernelSpec::Rbf {
                signal_variance: 1.0,
                lengthscale: 1.0,
            },
            noise_variance: f64::NAN,
            posterior,
            ops,
            jitter: 0.0,
        })
    }
}

/// Builds one [`GpState`] per row of `y`. States are independent.
pub fn build_gp_layer(
    kernels: &[KernelSpec],
    grid: &TimeGrid,
    noise_variance: &[f64],
    gamma: &[f64],
    y: &DMatrix<f64>,
) -> Result<Vec<GpState>> {
    let k = y.nrows();
    if kernels.len() != k || noise_variance.len() != k || gamma.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "{k} observed states but {} kernels, {} noise variances, {} gammas",
            kernels.len(),
            noise_variance.len(),
            gamma.len()
        )));
    }
    if y.ncols() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} observation columns for {} grid points",
            y.ncols(),
            grid.len()
        )));
    }
    (0..k)
        .map(|s| {
            let row: Vec<f64> = y.row(s).iter().copied().collect();
            GpState::build(&kernels[s], grid, noise_variance[s], gamma[s], &row)
        })
        .collect()
}

/// Empirical-Bayes kernel hyperparameters per state, fitted to the centered
/// observations exactly as [`GpState::build`] will see them. With
/// `fit_noise` the noise variances are fitted too, starting from
/// `noise_variance`; otherwise they are held fixed. State `k` uses restart
/// seed `seed + k`.
pub fn fit_state_hyperparameters(
    kind: KernelKind,
    grid: &TimeGrid,
    y: &DMatrix<f64>,
    noise_variance: &[f64],
    fit_noise: bool,
    seed: u64,
) -> Result<(Vec<KernelSpec>, Vec<f64>)> {
    if noise_variance.len() != y.nrows() || y.ncols() != grid.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}×{} observations, {} noise variances, {} grid points",
            y.nrows(),
            y.ncols(),
            noise_variance.len(),
            grid.len()
        )));
    }
    let mut specs = Vec::with_capacity(y.nrows());
    let mut noises = Vec::with_capacity(y.nrows());
    for k in 0..y.nrows() {
        let row: Vec<f64> = y.row(k).iter().copied().collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let centered: Vec<f64> = row.iter().map(|v| v - mean).collect();
        let var = centered.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let init = KernelSpec::default_for(kind, var, grid.span());
        let (spec, noise) = fit_hyperparameters(
            kind,
            grid,
            &centered,
            &init,
            noise_variance[k],
            fit_noise,
            seed.wrapping_add(k as u64),
        )?;
        log::info!("state x{}: fitted {spec:?}, noise variance {noise:.4e}", k + 1);
        specs.push(spec);
        noises.push(noise);
    }
    Ok((specs, noises))
}
