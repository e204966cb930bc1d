//! Expectations under the factorized Gaussian proxy `Q(X) = Π_k Π_t q(x_k(t))`.
//!
//! Monomials are products of distinct states, so the product of two of them
//! at the same time point has degree at most two in any cell. First and
//! second cell moments are therefore all that is ever needed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::ode_model::Monomial;
use crate::{Error, Result};

/// One independent Gaussian per (state, time) cell.
///
/// Stored time-major so that all states at one time point are contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedGaussian {
    num_states: usize,
    num_times: usize,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl FactorizedGaussian {
    /// Builds from `K × N` matrices of means and variances.
    pub fn new(means: &DMatrix<f64>, variances: &DMatrix<f64>) -> Result<Self> {
        if means.shape() != variances.shape() {
            return Err(Error::DimensionMismatch(format!(
                "means {:?} vs variances {:?}",
                means.shape(),
                variances.shape()
            )));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("proxy needs finite means and positive finite variances".into()));
        }
        let (k, n) = means.shape();
        let mut q = FactorizedGaussian {
            num_states: k,
            num_times: n,
            means: vec![0.0; k * n],
            variances: vec![0.0; k * n],
        };
        for t in 0..n {
            for s in 0..k {
                q.means[t * k + s] = means[(s, t)];
                q.variances[t * k + s] = variances[(s, t)];
            }
        }
        Ok(q)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_times(&self) -> usize {
        self.num_times
    }

    #[inline]
    fn idx(&self, k: usize, t: usize) -> usize {
        t * self.num_states + k
    }

    pub fn mean(&self, k: usize, t: usize) -> f64 {
        self.means[self.idx(k, t)]
    }

    pub fn variance(&self, k: usize, t: usize) -> f64 {
        self.variances[self.idx(k, t)]
    }

    /// Means of all states at time `t`.
    pub fn means_at(&self, t: usize) -> &[f64] {
        &self.means[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn variances_at(&self, t: usize) -> &[f64] {
        &self.variances[t * self.num_states..(t + 1) * self.num_states]
    }

    pub fn state_means(&self, k: usize) -> DVector<f64> {
        DVector::from_fn(self.num_times, |t, _| self.mean(k, t))
    }

    pub fn state_variances(&self, k: usize) -> DVector<f64> {
        DVector::from_fn(self.num_times, |t, _| self.variance(k, t))
    }

    pub fn means_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_states, self.num_times, |k, t| self.mean(k, t))
    }

    pub fn variances_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_states, self.num_times, |k, t| self.variance(k, t))
    }

    pub(crate) fn set(&mut self, k: usize, t: usize, mean: f64, variance: f64) {
        let i = self.idx(k, t);
        self.means[i] = mean;
        self.variances[i] = variance;
    }

    fn check(&self, m: &Monomial, t: usize) -> Result<()> {
        if t >= self.num_times {
            return Err(Error::IndexOutOfRange(format!("time index {t} of {}", self.num_times)));
        }
        if let Some(&j) = m.states().iter().find(|&&j| j >= self.num_states) {
            return Err(Error::IndexOutOfRange(format!("state index {j} of {}", self.num_states)));
        }
        Ok(())
    }
}

/// `E[Π_{j∈S} x_j]` for cells at one time point with the given means.
#[inline]
pub(crate) fn monomial_mean(means: &[f64], m: &Monomial) -> f64 {
    m.states().iter().map(|&j| means[j]).product()
}

/// `E[m1 · m2]` for two monomials at the same time point. Shared cells
/// contribute their second moment `ν² + Γ`.
pub(crate) fn monomial_pair_same_time(means: &[f64], vars: &[f64], m1: &Monomial, m2: &Monomial) -> f64 {
    let (a, b) = (m1.states(), m2.states());
    let (mut i, mut j) = (0, 0);
    let mut acc = 1.0;
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i] < b[j]) {
            acc *= means[a[i]];
            i += 1;
        } else if i == a.len() || b[j] < a[i] {
            acc *= means[b[j]];
            j += 1;
        } else {
            let s = a[i];
            acc *= means[s] * means[s] + vars[s];
            i += 1;
            j += 1;
        }
    }
    acc
}

/// `E[m1 · x_s]` at one time point.
#[inline]
pub(crate) fn monomial_times_state(means: &[f64], vars: &[f64], m: &Monomial, s: usize) -> f64 {
    if m.contains(s) {
        m.states()
            .iter()
            .map(|&j| if j == s { means[j] * means[j] + vars[j] } else { means[j] })
            .product()
    } else {
        monomial_mean(means, m) * means[s]
    }
}

pub fn expected_monomial(q: &FactorizedGaussian, m: &Monomial, t: usize) -> Result<f64> {
    q.check(m, t)?;
    Ok(monomial_mean(q.means_at(t), m))
}

pub fn expected_monomial_product(q: &FactorizedGaussian, m1: &Monomial, t1: usize, m2: &Monomial, t2: usize) -> Result<f64> {
    q.check(m1, t1)?;
    q.check(m2, t2)?;
    if t1 == t2 {
        Ok(monomial_pair_same_time(q.means_at(t1), q.variances_at(t1), m1, m2))
    } else {
        Ok(monomial_mean(q.means_at(t1), m1) * monomial_mean(q.means_at(t2), m2))
    }
}

/// Differential entropy `Σ ½ ln(2πe Γ)`.
pub fn entropy(q: &FactorizedGaussian) -> f64 {
    let c = (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    q.variances.iter().map(|v| 0.5 * (c + v.ln())).sum()
}

/// `E_Q[ln N(x_k | μ, Σ)]`.
pub fn expected_gaussian_logdensity(q: &FactorizedGaussian, k: usize, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    let (precision, logdet_sigma) = linalg::spd_inverse(sigma, "Gaussian covariance")?;
    expected_gaussian_logdensity_precision(q, k, mu, &precision, logdet_sigma)
}

/// Same as [`expected_gaussian_logdensity`] with the precision matrix and
/// `ln det Σ` supplied.
pub fn expected_gaussian_logdensity_precision(
    q: &FactorizedGaussian,
    k: usize,
    mu: &DVector<f64>,
    precision: &DMatrix<f64>,
    logdet_sigma: f64,
) -> Result<f64> {
    let n = q.num_times();
    if k >= q.num_states() {
        return Err(Error::IndexOutOfRange(format!("state index {k} of {}", q.num_states())));
    }
    if mu.len() != n || precision.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "Gaussian of size {} for {n} time points",
            mu.len()
        )));
    }
    let diff = q.state_means(k) - mu;
    let quad = diff.dot(&(precision * &diff));
    let trace: f64 = (0..n).map(|t| precision[(t, t)] * q.variance(k, t)).sum();
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet_sigma + quad + trace))
}
