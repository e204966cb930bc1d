//! Coordinate updates for a single proxy cell `q(x_u(α))`.
//!
//! The optimal factor is proportional to the exponentiated expected log
//! joint, which is quadratic in `x_u(α)`. It splits into an observation
//! factor and one gradient-matching factor per equation; each is kept in
//! natural parameters so that flat factors are representable and products
//! are plain sums.

use nalgebra::{DMatrix, DVector};

use crate::gp_layer::{GpState, StatePosterior};
use crate::moments::{monomial_mean, monomial_pair_same_time, monomial_times_state, FactorizedGaussian};
use crate::ode_model::{Monomial, OdeSystem};
use crate::{Error, Result};

/// Unnormalized Gaussian `exp(-½ precision x² + linear x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianFactor {
    pub precision: f64,
    pub linear: f64,
}

impl GaussianFactor {
    pub fn from_moments(mean: f64, variance: f64) -> Self {
        GaussianFactor {
            precision: 1.0 / variance,
            linear: mean / variance,
        }
    }

    pub fn flat() -> Self {
        GaussianFactor {
            precision: 0.0,
            linear: 0.0,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.precision <= 0.0
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_flat()).then(|| self.linear / self.precision)
    }

    pub fn variance(&self) -> Option<f64> {
        (!self.is_flat()).then(|| 1.0 / self.precision)
    }
}

/// Conditional of coordinate `α` of `N(μ_u, Σ_u)` given the other
/// coordinates fixed at their proxy means.
///
/// Uses the precision form `ι = μ_α − P_αα⁻¹ Σ_{t≠α} P_αt (ν_t − μ_t)`,
/// `Ξ = P_αα⁻¹`, which equals the Schur-complement conditional.
pub fn obs_proxy(q: &FactorizedGaussian, u: usize, alpha: usize, post: &StatePosterior) -> Result<GaussianFactor> {
    let n = q.num_times();
    if post.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "posterior of size {} for {n} time points",
            post.len()
        )));
    }
    let p = post.precision();
    let p_aa = p[(alpha, alpha)];
    if !(p_aa > 0.0) || !p_aa.is_finite() {
        return Err(Error::NotPositiveDefinite(format!(
            "conditional precision {p_aa} at state {u}, time {alpha}"
        )));
    }
    let shift: f64 = (0..n)
        .filter(|&t| t != alpha)
        .map(|t| p[(alpha, t)] * (q.mean(u, t) - post.mean[t]))
        .sum();
    let iota = post.mean[alpha] - shift / p_aa;
    Ok(GaussianFactor {
        precision: p_aa,
        linear: p_aa * iota,
    })
}

/// Gradient-matching factors of `x_u(α)`, one per equation `k`.
///
/// The residual `r_k = f_k(X, θ) − D_k (x_k − b_k)` is affine in `x_u(α)`:
/// `r_k = s_k x_u(α) + r⁰_k`. The factor has precision `E[s_kᵀ Λ_k s_k]` and
/// linear coefficient `−E[s_kᵀ Λ_k r⁰_k]`, with expectations over the other
/// cells of `Q`.
pub fn ode_proxy(q: &FactorizedGaussian, u: usize, alpha: usize, theta: &[f64], gp: &[GpState], system: &OdeSystem) -> Vec<GaussianFactor> {
    let k_states = q.num_states();
    let n = q.num_times();

    // cell (u, α) clamped to a point mass at zero
    let mut col_mean = q.means_at(alpha).to_vec();
    let mut col_var = q.variances_at(alpha).to_vec();
    col_mean[u] = 0.0;
    col_var[u] = 0.0;

    let mut factors = Vec::with_capacity(k_states);
    for (k, eq) in system.equations().iter().enumerate() {
        let slope: Vec<(f64, Monomial)> = eq
            .iter()
            .filter(|term| term.monomial.contains(u))
            .map(|term| (term.sign * theta[term.param], term.monomial.without(u)))
            .collect();
        if k != u && slope.is_empty() {
            factors.push(GaussianFactor::flat());
            continue;
        }
        let ops = &gp[k].ops;
        let lambda = &ops.lambda;
        let l_aa = lambda[(alpha, alpha)];

        let e_sigma: f64 = slope.iter().map(|(c, m)| c * monomial_mean(&col_mean, m)).sum();
        let mut e_sigma2 = 0.0;
        for (ca, ma) in &slope {
            for (cb, mb) in &slope {
                e_sigma2 += ca * cb * monomial_pair_same_time(&col_mean, &col_var, ma, mb);
            }
        }

        // E[g_k(t)] for every t, with the clamped column at α
        let e_g: Vec<f64> = (0..n)
            .map(|t| {
                let means = if t == alpha { &col_mean[..] } else { q.means_at(t) };
                eq.iter()
                    .map(|term| term.sign * theta[term.param] * monomial_mean(means, &term.monomial))
                    .sum()
            })
            .collect();

        let mut cov_sigma_g = 0.0;
        for (ca, ma) in &slope {
            for term in eq {
                let cb = term.sign * theta[term.param];
                cov_sigma_g += ca * cb * monomial_pair_same_time(&col_mean, &col_var, ma, &term.monomial);
            }
        }
        cov_sigma_g -= e_sigma * e_g[alpha];

        let cov_sigma_xk = if k != u {
            slope
                .iter()
                .map(|(c, m)| c * (monomial_times_state(&col_mean, &col_var, m, k) - monomial_mean(&col_mean, m) * col_mean[k]))
                .sum()
        } else {
            0.0
        };

        // E[r⁰_k] = E[g_k] − D_k (ν̃_k − b_k)
        let b = gp[k].offset;
        let centered: Vec<f64> = (0..n).map(|s| if k == u && s == alpha { -b } else { q.mean(k, s) - b }).collect();
        let e_r0: Vec<f64> = (0..n)
            .map(|t| e_g[t] - (0..n).map(|s| ops.d[(t, s)] * centered[s]).sum::<f64>())
            .collect();
        let lambda_r0: Vec<f64> = (0..n).map(|t| (0..n).map(|s| lambda[(t, s)] * e_r0[s]).sum()).collect();

        // constant part of the slope vector, d = −D_u[:, α], present only for k = u
        let (lambda_d_a, d_lambda_d, d_lambda_r0) = if k == u {
            let d_col = ops.d.column(alpha);
            (
                -ops.lambda_d_diag()[alpha],
                ops.dt_lambda_d_diag()[alpha],
                -(0..n).map(|t| d_col[t] * lambda_r0[t]).sum::<f64>(),
            )
        } else {
            (0.0, 0.0, 0.0)
        };

        let precision = l_aa * e_sigma2 + 2.0 * e_sigma * lambda_d_a + d_lambda_d;
        let cross = e_sigma * lambda_r0[alpha] + l_aa * cov_sigma_g - cov_sigma_xk * ops.lambda_d_diag()[alpha] + d_lambda_r0;

        factors.push(if precision > 0.0 {
            GaussianFactor { precision, linear: -cross }
        } else {
            GaussianFactor::flat()
        });
    }
    factors
}

/// Product of the observation factor with the gradient-matching factors,
/// returned as `(mean, variance)`.
pub fn combine_proxies(obs: GaussianFactor, ode: &[GaussianFactor]) -> (f64, f64) {
    let precision = obs.precision + ode.iter().map(|f| f.precision.max(0.0)).sum::<f64>();
    let linear = obs.linear + ode.iter().filter(|f| !f.is_flat()).map(|f| f.linear).sum::<f64>();
    let variance = 1.0 / precision;
    (linear * variance, variance)
}

/// Joint update of every cell of state `u`, holding the other states fixed.
///
/// With the other states fixed, the bound is a concave quadratic in the mean
/// vector `ν_u`, `−½ ν_uᵀ H ν_u + bᵀ ν_u`, and the optimal variances are
/// `Γ_u(t) = 1/H_tt` regardless of `ν_u`. Solving `H ν_u = b` is therefore
/// the exact maximizer over all cells of the state at once; its fixed points
/// coincide with those of the cellwise update.
pub fn state_block_update(
    q: &FactorizedGaussian,
    u: usize,
    theta: &[f64],
    gp: &[GpState],
    system: &OdeSystem,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = q.num_times();
    let post = &gp[u].posterior;
    if post.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "posterior of size {} for {n} time points",
            post.len()
        )));
    }
    let mut h = post.precision().clone();
    let mut b = post.precision() * &post.mean;

    for (k, eq) in system.equations().iter().enumerate() {
        let slope: Vec<(f64, Monomial)> = eq
            .iter()
            .filter(|term| term.monomial.contains(u))
            .map(|term| (term.sign * theta[term.param], term.monomial.without(u)))
            .collect();
        let own = k == u;
        if !own && slope.is_empty() {
            continue;
        }
        let ops = &gp[k].ops;
        let lambda = &ops.lambda;

        // per-time moments of the slope σ(t) and the u-free part g⁰(t)
        let mut e_sigma = DVector::zeros(n);
        let mut var_sigma = DVector::zeros(n);
        let mut e_g0 = DVector::zeros(n);
        let mut cross = DVector::zeros(n);
        for t in 0..n {
            let mut col_mean = q.means_at(t).to_vec();
            let mut col_var = q.variances_at(t).to_vec();
            col_mean[u] = 0.0;
            col_var[u] = 0.0;
            let es: f64 = slope.iter().map(|(c, m)| c * monomial_mean(&col_mean, m)).sum();
            let mut es2 = 0.0;
            let mut esg = 0.0;
            for (ca, ma) in &slope {
                for (cb, mb) in &slope {
                    es2 += ca * cb * monomial_pair_same_time(&col_mean, &col_var, ma, mb);
                }
                for term in eq {
                    esg += ca * term.sign * theta[term.param] * monomial_pair_same_time(&col_mean, &col_var, ma, &term.monomial);
                }
            }
            let eg: f64 = eq
                .iter()
                .map(|term| term.sign * theta[term.param] * monomial_mean(&col_mean, &term.monomial))
                .sum();
            let cov_sigma_xk = if own {
                0.0
            } else {
                slope
                    .iter()
                    .map(|(c, m)| c * (monomial_times_state(&col_mean, &col_var, m, k) - monomial_mean(&col_mean, m) * col_mean[k]))
                    .sum()
            };
            e_sigma[t] = es;
            var_sigma[t] = (es2 - es * es).max(0.0);
            e_g0[t] = eg;
            cross[t] = lambda[(t, t)] * (esg - es * eg) - cov_sigma_xk * ops.lambda_d_diag()[t];
        }

        // E[c_k]: the residual with every x_u(t) set to zero
        let e_c = if own {
            &e_g0 + &ops.d * DVector::from_element(n, gp[k].offset)
        } else {
            &e_g0 - &ops.d * q.state_means(k).add_scalar(-gp[k].offset)
        };
        let lambda_c = lambda * &e_c;

        for t in 0..n {
            for s in 0..n {
                h[(t, s)] += lambda[(t, s)] * e_sigma[t] * e_sigma[s];
            }
            h[(t, t)] += lambda[(t, t)] * var_sigma[t];
        }
        b -= e_sigma.component_mul(&lambda_c) + cross;
        if own {
            let lambda_d = lambda * &ops.d;
            let sl = DMatrix::from_diagonal(&e_sigma) * &lambda_d;
            h -= &sl + sl.transpose();
            h += ops.d.transpose() * &lambda_d;
            b += ops.d.transpose() * &lambda_c;
        }
    }

    crate::linalg::symmetrize(&mut h);
    let variances = DVector::from_iterator(n, h.diagonal().iter().map(|p| 1.0 / p));
    let chol = crate::linalg::cholesky(&h, "state block precision")?;
    Ok((chol.solve(&b), variances))
}
