//! Parameter update and the variational lower bound.
//!
//! With `f_k = G_k(X) θ` and `m_k = D_k (x_k − b_k)` the expected
//! gradient-matching quadratic form is
//!
//! ```text
//! E_Q[(G_k θ − m_k)ᵀ Λ_k (G_k θ − m_k)] = θᵀ H_k θ − 2 θᵀ h_k + c_k
//! ```
//!
//! and both the M-step and the bound are read off `(H_k, h_k, c_k)`.

use nalgebra::{DMatrix, DVector};

use crate::gp_layer::GpState;
use crate::linalg;
use crate::moments::{
    entropy, expected_gaussian_logdensity_precision, monomial_mean, monomial_pair_same_time, monomial_times_state, FactorizedGaussian,
};
use crate::ode_model::OdeSystem;
use crate::{Error, Result};

use super::ThetaPosterior;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) struct QuadraticStats {
    pub h: DMatrix<f64>,
    pub h_lin: DVector<f64>,
    pub c: f64,
}

pub(crate) fn check_inputs(q: &FactorizedGaussian, gp: &[GpState], system: &OdeSystem) -> Result<()> {
    if q.num_states() != system.num_states() || gp.len() != system.num_states() {
        return Err(Error::DimensionMismatch(format!(
            "system has {} states, proxy has {}, GP layer has {}",
            system.num_states(),
            q.num_states(),
            gp.len()
        )));
    }
    if let Some(s) = gp
        .iter()
        .position(|g| g.ops.len() != q.num_times() || g.posterior.len() != q.num_times())
    {
        return Err(Error::DimensionMismatch(format!(
            "GP state {s} has size {} but the proxy has {} time points",
            gp[s].ops.len(),
            q.num_times()
        )));
    }
    Ok(())
}

pub(crate) fn quadratic_stats(q: &FactorizedGaussian, gp: &GpState, system: &OdeSystem, k: usize) -> QuadraticStats {
    let n = q.num_times();
    let m = system.num_params();
    let eq = system.equation(k);
    let ops = &gp.ops;
    let lambda = &ops.lambda;

    let mut g_bar = DMatrix::zeros(n, m);
    let mut h = DMatrix::zeros(m, m);
    let mut h_lin = DVector::zeros(m);
    for t in 0..n {
        let means = q.means_at(t);
        let vars = q.variances_at(t);
        let term_means: Vec<f64> = eq.iter().map(|term| monomial_mean(means, &term.monomial)).collect();
        for (term, mean) in eq.iter().zip(&term_means) {
            g_bar[(t, term.param)] += term.sign * mean;
        }
        // same-time covariance of the design row, weighted by Λ_tt
        let l_tt = lambda[(t, t)];
        let w_t = ops.lambda_d_diag()[t];
        for (a, ta) in eq.iter().enumerate() {
            for (b, tb) in eq.iter().enumerate() {
                let cov = monomial_pair_same_time(means, vars, &ta.monomial, &tb.monomial) - term_means[a] * term_means[b];
                h[(ta.param, tb.param)] += l_tt * ta.sign * tb.sign * cov;
            }
            let cov_x = monomial_times_state(means, vars, &ta.monomial, k) - term_means[a] * means[k];
            h_lin[ta.param] += w_t * ta.sign * cov_x;
        }
    }

    let centered = q.state_means(k).add_scalar(-gp.offset);
    let m_bar = &ops.d * centered;
    let lambda_m = lambda * &m_bar;
    let lambda_g = lambda * &g_bar;
    h += g_bar.transpose() * lambda_g;
    h_lin += g_bar.transpose() * &lambda_m;
    let c = m_bar.dot(&lambda_m) + (0..n).map(|t| ops.dt_lambda_d_diag()[t] * q.variance(k, t)).sum::<f64>();
    QuadraticStats { h, h_lin, c }
}

/// Closed-form maximizer of the bound over `θ` for a fixed proxy; the bound
/// is a concave quadratic in `θ`, so this is a Gaussian with precision `H`.
pub fn update_theta(q: &FactorizedGaussian, gp: &[GpState], system: &OdeSystem, prior_precision: f64) -> Result<ThetaPosterior> {
    check_inputs(q, gp, system)?;
    if !(prior_precision >= 0.0) {
        return Err(Error::InvalidInput(format!("prior precision must be >= 0, got {prior_precision}")));
    }
    let m = system.num_params();
    let mut h = DMatrix::identity(m, m) * prior_precision;
    let mut lin = DVector::zeros(m);
    for (k, state) in gp.iter().enumerate() {
        let stats = quadratic_stats(q, state, system, k);
        h += stats.h;
        lin += stats.h_lin;
    }
    linalg::symmetrize(&mut h);
    let chol = nalgebra::Cholesky::new(h.clone()).ok_or_else(|| {
        Error::Singular(format!(
            "parameter precision matrix is not positive definite (unidentifiable parameters?); diagonal {:?}",
            h.diagonal().as_slice()
        ))
    })?;
    let mean = chol.solve(&lin);
    let mut cov = chol.inverse();
    linalg::symmetrize(&mut cov);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEncountered("parameter mean".into()));
    }
    Ok(ThetaPosterior { mean, cov })
}

/// `H(Q) + E_Q ln p(θ | X) + E_Q ln p(X | Y)`, including the Gaussian ridge
/// prior on `θ` when `prior_precision > 0`.
pub fn elbo(q: &FactorizedGaussian, theta: &[f64], gp: &[GpState], system: &OdeSystem, prior_precision: f64) -> Result<f64> {
    check_inputs(q, gp, system)?;
    if theta.len() != system.num_params() {
        return Err(Error::DimensionMismatch(format!(
            "theta has {} entries, system has {} parameters",
            theta.len(),
            system.num_params()
        )));
    }
    let n = q.num_times() as f64;
    let th = DVector::from_column_slice(theta);
    let mut total = entropy(q);
    for (k, state) in gp.iter().enumerate() {
        let stats = quadratic_stats(q, state, system, k);
        let quad = th.dot(&(&stats.h * &th)) - 2.0 * th.dot(&stats.h_lin) + stats.c;
        total += -0.5 * (n * LN_2PI - state.ops.logdet_lambda() + quad);
        total += expected_gaussian_logdensity_precision(
            q,
            k,
            &state.posterior.mean,
            state.posterior.precision(),
            state.posterior.logdet_cov(),
        )?;
    }
    if prior_precision > 0.0 {
        let m = theta.len() as f64;
        total += -0.5 * (m * LN_2PI - m * prior_precision.ln() + prior_precision * th.norm_squared());
    }
    Ok(total)
}
