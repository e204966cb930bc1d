use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mstep::quadratic_stats;
use super::*;
use crate::gp_layer::{DerivOps, StatePosterior};
use crate::kernels::fit_hyperparameters;
use crate::kernels::KernelKind;
use crate::moments::entropy;
use crate::ode_model::Term;
use crate::simulator::{add_noise, integrate_rk4};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

struct Instance {
    system: OdeSystem,
    gp: Vec<GpState>,
    q: FactorizedGaussian,
    theta: Vec<f64>,
}

/// A random mass-action system in which every parameter multiplies its own
/// (equation, monomial) pair, so all parameters are identifiable.
fn random_system(rng: &mut ChaCha8Rng, k: usize, m: usize) -> OdeSystem {
    let mut equations: Vec<Vec<Term>> = vec![Vec::new(); k];
    let mut p = 0;
    while p < m {
        let eq = rng.random_range(0..k);
        let first = rng.random_range(0..k);
        let mut states = vec![first];
        if k > 1 && rng.random_bool(0.5) {
            states.push((first + rng.random_range(1..k)) % k);
        } else if rng.random_bool(0.2) {
            states.clear();
        }
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let term = Term::new(p, sign, states).unwrap();
        if equations[eq].iter().any(|t| t.monomial == term.monomial) {
            continue;
        }
        equations[eq].push(term);
        p += 1;
    }
    OdeSystem::new(m, equations).unwrap()
}

fn random_instance(seed: u64, k: usize, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = k + 1;
    let system = random_system(&mut rng, k, m);
    let grid = TimeGrid::uniform(0.0, 1.0, 1.0 / (n - 1) as f64).unwrap();
    let gp = (0..k)
        .map(|_| {
            let spec = KernelSpec::rbf(rng.random_range(0.5..2.0), rng.random_range(0.3..0.8)).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            GpState::build(&spec, &grid, 0.1, rng.random_range(0.05..0.5), &y).unwrap()
        })
        .collect();
    let means = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.5..1.5));
    let vars = DMatrix::from_fn(k, n, |_, _| rng.random_range(0.05..0.5));
    let q = FactorizedGaussian::new(&means, &vars).unwrap();
    let theta = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    Instance { system, gp, q, theta }
}

fn linear_decay() -> OdeSystem {
    OdeSystem::new(1, vec![vec![Term::new(0, -1.0, vec![0]).unwrap()]]).unwrap()
}

fn growth() -> OdeSystem {
    OdeSystem::new(1, vec![vec![Term::new(0, 1.0, vec![0]).unwrap()]]).unwrap()
}

fn single_point_state(mu: f64, s: f64, d: f64, a: f64, gamma: f64, offset: f64) -> GpState {
    let post = StatePosterior::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, s)).unwrap();
    let ops = DerivOps::new(DMatrix::from_element(1, 1, d), DMatrix::from_element(1, 1, a), gamma).unwrap();
    GpState::from_parts(offset, post, ops).unwrap()
}

fn expected_quadratic(q: &FactorizedGaussian, gp: &[GpState], system: &OdeSystem, k: usize, theta: &[f64]) -> f64 {
    let s = quadratic_stats(q, &gp[k], system, k);
    let th = DVector::from_column_slice(theta);
    th.dot(&(&s.h * &th)) - 2.0 * th.dot(&s.h_lin) + s.c
}

// ---- obs_proxy ----

#[test]
fn obs_proxy_diagonal_covariance_ignores_the_proxy() {
    let post = StatePosterior::new(
        DVector::from_vec(vec![0.5, -1.0, 2.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
    )
    .unwrap();
    let q = FactorizedGaussian::new(
        &DMatrix::from_row_slice(1, 3, &[7.0, -3.0, 11.0]),
        &DMatrix::from_element(1, 3, 0.2),
    )
    .unwrap();
    let f = obs_proxy(&q, 0, 1, &post).unwrap();
    assert_relative_eq!(f.mean().unwrap(), -1.0, epsilon = 1e-14);
    assert_relative_eq!(f.variance().unwrap(), 2.0, epsilon = 1e-14);
}

#[test]
fn obs_proxy_two_point_conditional() {
    let post = StatePosterior::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
    let q = FactorizedGaussian::new(&DMatrix::from_row_slice(1, 2, &[-5.0, 2.0]), &DMatrix::from_element(1, 2, 1.0)).unwrap();
    let f = obs_proxy(&q, 0, 0, &post).unwrap();
    assert_relative_eq!(f.mean().unwrap(), 1.0, epsilon = 1e-14);
    assert_relative_eq!(f.variance().unwrap(), 1.5, epsilon = 1e-14);
}

#[test]
fn obs_proxy_at_posterior_mean_returns_that_mean() {
    let inst = random_instance(3, 2, 5);
    let post = &inst.gp[1].posterior;
    let means = DMatrix::from_fn(2, 5, |k, t| if k == 1 { post.mean[t] } else { 0.0 });
    let q = FactorizedGaussian::new(&means, &DMatrix::from_element(2, 5, 0.3)).unwrap();
    for alpha in 0..5 {
        let f = obs_proxy(&q, 1, alpha, post).unwrap();
        assert_relative_eq!(f.mean().unwrap(), post.mean[alpha], epsilon = 1e-9, max_relative = 1e-9);
    }
}

#[test]
fn obs_proxy_matches_schur_complement() {
    let inst = random_instance(11, 2, 6);
    let post = &inst.gp[0].posterior;
    let n = 6;
    for alpha in 0..n {
        let rest: Vec<usize> = (0..n).filter(|&t| t != alpha).collect();
        let s_rr = DMatrix::from_fn(n - 1, n - 1, |i, j| post.cov[(rest[i], rest[j])]);
        let s_ar = DVector::from_fn(n - 1, |i, _| post.cov[(alpha, rest[i])]);
        let dev = DVector::from_fn(n - 1, |i, _| inst.q.mean(0, rest[i]) - post.mean[rest[i]]);
        let w = s_rr.clone().lu().solve(&s_ar).unwrap();
        let iota = post.mean[alpha] + w.dot(&dev);
        let xi = post.cov[(alpha, alpha)] - w.dot(&s_ar);
        let f = obs_proxy(&inst.q, 0, alpha, post).unwrap();
        assert_relative_eq!(f.mean().unwrap(), iota, epsilon = 1e-7, max_relative = 1e-6);
        assert_relative_eq!(f.variance().unwrap(), xi, epsilon = 1e-12, max_relative = 1e-6);
    }
}

#[test]
fn obs_proxy_rejects_size_mismatch() {
    let post = StatePosterior::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
    let q = FactorizedGaussian::new(&DMatrix::zeros(1, 3), &DMatrix::from_element(1, 3, 1.0)).unwrap();
    assert!(matches!(obs_proxy(&q, 0, 0, &post), Err(Error::DimensionMismatch(_))));
}

// ---- ode_proxy ----

#[test]
fn ode_proxy_flat_when_state_is_absent() {
    // dx1 = θ1 x1, dx2 = θ2 x1: x2 does not enter the first equation
    let system = OdeSystem::new(
        2,
        vec![vec![Term::new(0, 1.0, vec![0]).unwrap()], vec![Term::new(1, 1.0, vec![0]).unwrap()]],
    )
    .unwrap();
    let inst = random_instance(5, 2, 4);
    let factors = ode_proxy(&inst.q, 1, 2, &[0.7, -0.4], &inst.gp, &system);
    assert!(factors[0].is_flat());
    assert_eq!(factors[0].precision, 0.0);
    assert!(!factors[1].is_flat());
}

#[test]
fn ode_proxy_scalar_linear_case() {
    let (theta, a, gamma) = (1.7, 0.3, 0.2);
    let lambda = 1.0 / (a + gamma);
    let gp = vec![single_point_state(0.0, 1.0, 0.0, a, gamma, 0.0)];
    let q = FactorizedGaussian::new(&DMatrix::from_element(1, 1, 0.9), &DMatrix::from_element(1, 1, 0.4)).unwrap();
    let f = ode_proxy(&q, 0, 0, &[theta], &gp, &growth());
    assert_relative_eq!(f[0].precision, theta * theta * lambda, epsilon = 1e-14);
    assert_eq!(f[0].linear, 0.0);
}

/// Fits `c2 v² + c1 v + c0` to the expected log-density as a function of the
/// value of cell `(u, α)` and reads off `precision = −2 c2`, `linear = c1`.
fn fitted_natural_parameters(inst: &Instance, u: usize, alpha: usize, k: usize) -> (f64, f64) {
    let points: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let vander = DMatrix::from_fn(5, 3, |i, j| points[i].powi(j as i32));
    let values = DVector::from_iterator(
        5,
        points.iter().map(|&v| {
            let mut q = inst.q.clone();
            q.set(u, alpha, v, 1e-300);
            -0.5 * expected_quadratic(&q, &inst.gp, &inst.system, k, &inst.theta)
        }),
    );
    let coef = vander.svd(true, true).solve(&values, 1e-14).unwrap();
    (-2.0 * coef[2], coef[1])
}

#[test]
fn ode_proxy_matches_polynomial_fit_of_expected_log_density() {
    for seed in 0..12 {
        let k_states = 2 + (seed as usize % 2);
        let inst = random_instance(100 + seed, k_states, 5);
        for u in 0..k_states {
            for alpha in [0, 2, 4] {
                let factors = ode_proxy(&inst.q, u, alpha, &inst.theta, &inst.gp, &inst.system);
                for (k, f) in factors.iter().enumerate() {
                    let (p, h) = fitted_natural_parameters(&inst, u, alpha, k);
                    let scale = p.abs().max(h.abs()).max(1.0);
                    assert!(
                        (f.precision - p).abs() <= 1e-6 * scale && (f.linear - h).abs() <= 1e-6 * scale,
                        "seed {seed} u {u} α {alpha} k {k}: engine ({}, {}) vs fit ({p}, {h})",
                        f.precision,
                        f.linear
                    );
                }
            }
        }
    }
}

// ---- combine_proxies ----

#[test]
fn combine_without_ode_factors_is_identity() {
    let (m, v) = combine_proxies(GaussianFactor::from_moments(1.3, 0.7), &[]);
    assert_relative_eq!(m, 1.3, epsilon = 1e-14);
    assert_relative_eq!(v, 0.7, epsilon = 1e-14);
}

#[test]
fn combine_standard_normals() {
    let (m, v) = combine_proxies(GaussianFactor::from_moments(0.0, 1.0), &[GaussianFactor::from_moments(0.0, 1.0)]);
    assert_eq!((m, v), (0.0, 0.5));
}

#[test]
fn combine_equal_precisions_averages_means() {
    let (m, v) = combine_proxies(GaussianFactor::from_moments(1.0, 1.0), &[GaussianFactor::from_moments(3.0, 1.0)]);
    assert_relative_eq!(m, 2.0, epsilon = 1e-15);
    assert_relative_eq!(v, 0.5, epsilon = 1e-15);
}

#[test]
fn combine_ignores_flat_factors() {
    let obs = GaussianFactor::from_moments(-0.4, 2.0);
    let with = combine_proxies(obs, &[GaussianFactor::flat(), GaussianFactor::from_moments(1.0, 4.0)]);
    let without = combine_proxies(obs, &[GaussianFactor::from_moments(1.0, 4.0)]);
    assert_eq!(with, without);
}

mod combine_props {
    use super::*;
    use proptest::prelude::*;

    fn factor() -> impl Strategy<Value = GaussianFactor> {
        (-5.0..5.0f64, 0.05..10.0f64).prop_map(|(m, v)| GaussianFactor::from_moments(m, v))
    }

    proptest! {
        #[test]
        fn precision_is_the_sum_and_order_does_not_matter(obs in factor(), mut ode in prop::collection::vec(factor(), 0..5)) {
            let (m1, v1) = combine_proxies(obs, &ode);
            let total: f64 = obs.precision + ode.iter().map(|f| f.precision).sum::<f64>();
            prop_assert!((1.0 / v1 - total).abs() <= 1e-10 * total);
            ode.reverse();
            let (m2, v2) = combine_proxies(obs, &ode);
            prop_assert!((m1 - m2).abs() <= 1e-10 * m1.abs().max(1.0));
            prop_assert!((v1 - v2).abs() <= 1e-12 * v1);
        }
    }
}

// ---- state block update ----

#[test]
fn state_block_update_is_a_fixed_point_of_cellwise_updates() {
    for seed in 0..8 {
        let inst = random_instance(300 + seed, 2 + (seed as usize % 2), 6);
        for u in 0..inst.q.num_states() {
            let (means, vars) = state_block_update(&inst.q, u, &inst.theta, &inst.gp, &inst.system).unwrap();
            let mut q = inst.q.clone();
            for t in 0..means.len() {
                q.set(u, t, means[t], vars[t]);
            }
            for alpha in 0..q.num_times() {
                let obs = obs_proxy(&q, u, alpha, &inst.gp[u].posterior).unwrap();
                let ode = ode_proxy(&q, u, alpha, &inst.theta, &inst.gp, &inst.system);
                let (m, v) = combine_proxies(obs, &ode);
                assert_relative_eq!(m, means[alpha], epsilon = 1e-8, max_relative = 1e-8);
                assert_relative_eq!(v, vars[alpha], max_relative = 1e-10);
            }
        }
    }
}

#[test]
fn state_block_update_does_not_lower_the_bound() {
    for seed in 0..8 {
        let inst = random_instance(400 + seed, 3, 5);
        let mut q = inst.q.clone();
        let mut prev = elbo(&q, &inst.theta, &inst.gp, &inst.system, 0.0).unwrap();
        for u in 0..3 {
            let (means, vars) = state_block_update(&q, u, &inst.theta, &inst.gp, &inst.system).unwrap();
            for t in 0..means.len() {
                q.set(u, t, means[t], vars[t]);
            }
            let next = elbo(&q, &inst.theta, &inst.gp, &inst.system, 0.0).unwrap();
            assert!(next >= prev - 1e-9 * prev.abs(), "seed {seed} state {u}: {prev} -> {next}");
            prev = next;
        }
    }
}

// ---- update_theta ----

#[test]
fn update_theta_matches_weighted_least_squares_for_point_mass() {
    let spec = KernelSpec::rbf(1.0, 0.4).unwrap();
    let grid = TimeGrid::uniform(0.0, 1.0, 0.2).unwrap();
    let y: Vec<f64> = grid.times().iter().map(|t| (-1.3 * t).exp()).collect();
    let mut state = GpState::build(&spec, &grid, 0.01, 0.1, &y).unwrap();
    state.offset = 0.0;
    let x = DVector::from_vec(vec![1.0, 0.8, 0.65, 0.5, 0.42, 0.3]);
    let q = FactorizedGaussian::new(&DMatrix::from_row_slice(1, 6, x.as_slice()), &DMatrix::from_element(1, 6, 1e-14)).unwrap();
    let lambda = &state.ops.lambda;
    let m = &state.ops.d * &x;
    let expected = x.dot(&(lambda * &m)) / x.dot(&(lambda * &x));
    let post = update_theta(&q, &[state], &growth(), 0.0).unwrap();
    assert_relative_eq!(post.mean[0], expected, max_relative = 1e-9);
}

#[test]
fn update_theta_strong_prior_shrinks_to_zero() {
    let inst = random_instance(21, 2, 5);
    let loose = update_theta(&inst.q, &inst.gp, &inst.system, 0.0).unwrap();
    let tight = update_theta(&inst.q, &inst.gp, &inst.system, 1e12).unwrap();
    assert!(loose.mean.amax() > 1e-3);
    assert!(tight.mean.amax() < 1e-6 * loose.mean.amax().max(1.0));
}

#[test]
fn update_theta_singular_for_unused_parameter() {
    let system = OdeSystem::new(2, vec![vec![Term::new(0, 1.0, vec![0]).unwrap()]]).unwrap();
    let gp = vec![single_point_state(0.0, 1.0, 0.5, 0.3, 0.1, 0.0)];
    let q = FactorizedGaussian::new(&DMatrix::from_element(1, 1, 1.0), &DMatrix::from_element(1, 1, 0.1)).unwrap();
    assert!(matches!(update_theta(&q, &gp, &system, 0.0), Err(Error::Singular(_))));
    assert!(update_theta(&q, &gp, &system, 1e-3).is_ok());
}

#[test]
fn update_theta_matches_grid_search() {
    let spec = KernelSpec::rbf(1.5, 0.5).unwrap();
    let grid = TimeGrid::new(vec![0.0, 0.3, 0.6, 1.0]).unwrap();
    let gp = vec![GpState::build(&spec, &grid, 0.05, 0.2, &[2.0, 1.1, 0.7, 0.35]).unwrap()];
    let q = FactorizedGaussian::new(
        &DMatrix::from_row_slice(1, 4, &[1.9, 1.2, 0.65, 0.4]),
        &DMatrix::from_row_slice(1, 4, &[0.02, 0.03, 0.01, 0.05]),
    )
    .unwrap();
    let system = linear_decay();
    let zeta = update_theta(&q, &gp, &system, 0.0).unwrap().mean[0];
    let best = (0..=6000)
        .map(|i| -1.0 + 1e-3 * i as f64)
        .map(|th| (th, elbo(&q, &[th], &gp, &system, 0.0).unwrap()))
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    assert!((best.0 - zeta).abs() <= 2e-3, "grid {} vs closed form {zeta}", best.0);
}

#[test]
fn update_theta_beats_random_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..5 {
        let inst = random_instance(500 + seed, 3, 5);
        for prior in [0.0, 0.5] {
            let post = update_theta(&inst.q, &inst.gp, &inst.system, prior).unwrap();
            let best = elbo(&inst.q, post.mean.as_slice(), &inst.gp, &inst.system, prior).unwrap();
            for _ in 0..20 {
                let mut delta = DVector::from_fn(post.mean.len(), |_, _| rng.random_range(-1.0..1.0));
                delta *= 1e-3 / delta.norm();
                let other = &post.mean + delta;
                let value = elbo(&inst.q, other.as_slice(), &inst.gp, &inst.system, prior).unwrap();
                assert!(best >= value - 1e-12 * best.abs(), "{best} < {value}");
            }
        }
    }
}

#[test]
fn update_theta_covariance_is_inverse_of_curvature() {
    // the bound is exactly quadratic in θ with Hessian −Ψ⁻¹
    let inst = random_instance(61, 2, 5);
    let post = update_theta(&inst.q, &inst.gp, &inst.system, 0.0).unwrap();
    let m = post.mean.len();
    let f = |th: &DVector<f64>| elbo(&inst.q, th.as_slice(), &inst.gp, &inst.system, 0.0).unwrap();
    let h = 1e-2;
    let precision = post.cov.clone().try_inverse().unwrap();
    for i in 0..m {
        for j in 0..m {
            let e = |idx: usize| DVector::from_fn(m, |r, _| if r == idx { h } else { 0.0 });
            let fpp = f(&(&post.mean + e(i) + e(j)));
            let fpm = f(&(&post.mean + e(i) - e(j)));
            let fmp = f(&(&post.mean - e(i) + e(j)));
            let fmm = f(&(&post.mean - e(i) - e(j)));
            let second = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            assert_relative_eq!(-second, precision[(i, j)], epsilon = 1e-4, max_relative = 1e-5);
        }
    }
}

// ---- elbo ----

#[test]
fn elbo_scalar_hand_computation() {
    let (mu, s, d, a, gamma, b) = (0.4, 0.8, 0.6, 0.3, 0.2, 0.25);
    let (nu, g, theta) = (0.9, 0.15, 1.3);
    let gp = vec![single_point_state(mu, s, d, a, gamma, b)];
    let q = FactorizedGaussian::new(&DMatrix::from_element(1, 1, nu), &DMatrix::from_element(1, 1, g)).unwrap();
    let lambda = 1.0 / (a + gamma);
    // residual θx − d(x − b) = (θ − d) x + d b
    let c = theta - d;
    let e_r2 = c * c * (nu * nu + g) + 2.0 * c * d * b * nu + d * d * b * b;
    let expected = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * g).ln()
        - 0.5 * (LN_2PI - lambda.ln() + lambda * e_r2)
        - 0.5 * (LN_2PI + s.ln() + ((nu - mu).powi(2) + g) / s);
    let got = elbo(&q, &[theta], &gp, &growth(), 0.0).unwrap();
    assert_relative_eq!(got, expected, epsilon = 1e-12);

    let prior = 2.5;
    let with_prior = elbo(&q, &[theta], &gp, &growth(), prior).unwrap();
    let prior_term = -0.5 * (LN_2PI - prior.ln() + prior * theta * theta);
    assert_relative_eq!(with_prior, expected + prior_term, epsilon = 1e-12);
}

#[test]
fn shrinking_variances_lowers_entropy_by_known_amount() {
    let inst = random_instance(9, 3, 4);
    let shrunk = FactorizedGaussian::new(&inst.q.means_matrix(), &(inst.q.variances_matrix() / 10.0)).unwrap();
    let drop = entropy(&inst.q) - entropy(&shrunk);
    assert_relative_eq!(drop, 6.0 * 10f64.ln(), max_relative = 1e-12);
}

#[test]
fn elbo_rejects_wrong_theta_length() {
    let inst = random_instance(2, 2, 4);
    assert!(matches!(
        elbo(&inst.q, &[1.0], &inst.gp, &inst.system, 0.0),
        Err(Error::DimensionMismatch(_))
    ));
}

// ---- run_inference ----

fn decay_problem(seed: u64) -> (DMatrix<f64>, TimeGrid, InferenceSettings) {
    let system = linear_decay();
    let grid = TimeGrid::uniform(0.0, 2.0, 2.0 / 19.0).unwrap();
    let truth = integrate_rk4(&system, &[1.0], &[3.0], &grid, 1e-3).unwrap();
    let noise = 1e-4;
    let y = add_noise(&truth, &[noise], seed).unwrap();
    let row: Vec<f64> = y.row(0).iter().copied().collect();
    let mean = row.iter().sum::<f64>() / row.len() as f64;
    let centered: Vec<f64> = row.iter().map(|v| v - mean).collect();
    let var = centered.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let init = KernelSpec::default_for(KernelKind::Rbf, var, grid.span());
    let (spec, _) = fit_hyperparameters(KernelKind::Rbf, &grid, &centered, &init, noise, false, seed).unwrap();
    let settings = InferenceSettings {
        kernels: vec![spec],
        noise_variance: vec![noise],
        gamma: vec![1e-2],
        vi: ViConfig {
            max_iter: 2000,
            ..ViConfig::default()
        },
    };
    (y, grid, settings)
}

#[test]
fn recovers_linear_decay_rate() {
    let (y, grid, settings) = decay_problem(4);
    let res = run_inference(&y, &grid, &linear_decay(), &settings).unwrap();
    assert!(res.converged);
    assert!((res.theta.mean[0] - 1.0).abs() < 0.1, "estimate {}", res.theta.mean[0]);
}

#[test]
fn bound_never_decreases_on_random_instances() {
    for seed in 0..10 {
        let inst = random_instance(700 + seed, 1 + seed as usize % 3, 4 + seed as usize % 5);
        for schedule in [Schedule::StateBlock, Schedule::Cellwise] {
            let config = ViConfig {
                max_iter: 60,
                schedule,
                prior_precision: 0.1,
                ..ViConfig::default()
            };
            let res = run_inference_on_layer(&inst.system, &inst.gp, &config).unwrap();
            for w in res.elbo_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "seed {seed} {schedule:?}: {} -> {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let (y, grid, settings) = decay_problem(8);
    let a = run_inference(&y, &grid, &linear_decay(), &settings).unwrap();
    let b = run_inference(&y, &grid, &linear_decay(), &settings).unwrap();
    assert_eq!(a.theta, b.theta);
    assert_eq!(a.elbo_trace, b.elbo_trace);
    assert_eq!(a.proxy.means_matrix(), b.proxy.means_matrix());
    assert_eq!(a.proxy.variances_matrix(), b.proxy.variances_matrix());
}

#[test]
fn converged_proxy_is_a_fixed_point_of_cellwise_sweeps() {
    let inst = random_instance(31, 2, 6);
    let config = ViConfig {
        max_iter: 20_000,
        prior_precision: 0.1,
        tol_theta: 1e-10,
        tol_elbo: 1e-14,
        ..ViConfig::default()
    };
    let res = run_inference_on_layer(&inst.system, &inst.gp, &config).unwrap();
    assert!(res.converged);
    let mut q = res.proxy.clone();
    estep_sweep(&mut q, res.theta.mean.as_slice(), &inst.gp, &inst.system, Schedule::Cellwise).unwrap();
    for k in 0..2 {
        for t in 0..6 {
            assert_relative_eq!(q.mean(k, t), res.proxy.mean(k, t), epsilon = 1e-7, max_relative = 1e-6);
            assert_relative_eq!(q.variance(k, t), res.proxy.variance(k, t), max_relative = 1e-6);
        }
    }
}

#[test]
fn schedules_reach_the_same_fixed_point() {
    let inst = random_instance(41, 2, 5);
    let base = ViConfig {
        max_iter: 100_000,
        prior_precision: 0.1,
        tol_theta: 1e-10,
        tol_elbo: 1e-14,
        ..ViConfig::default()
    };
    let block = run_inference_on_layer(&inst.system, &inst.gp, &base).unwrap();
    let cell = run_inference_on_layer(
        &inst.system,
        &inst.gp,
        &ViConfig {
            schedule: Schedule::Cellwise,
            ..base
        },
    )
    .unwrap();
    assert!(block.converged && cell.converged);
    for (a, b) in block.theta.mean.iter().zip(cell.theta.mean.iter()) {
        assert_relative_eq!(a, b, epsilon = 1e-6, max_relative = 1e-5);
    }
}

#[test]
fn initial_proxy_uses_offsets_and_posterior_variances() {
    let inst = random_instance(12, 2, 4);
    let q = initial_proxy(&inst.gp, InitialMeans::Offset).unwrap();
    let z = initial_proxy(&inst.gp, InitialMeans::Zero).unwrap();
    for k in 0..2 {
        for t in 0..4 {
            assert_eq!(q.mean(k, t), inst.gp[k].offset);
            assert_eq!(z.mean(k, t), 0.0);
            assert_eq!(q.variance(k, t), inst.gp[k].posterior.cov[(t, t)]);
            assert_eq!(z.variance(k, t), q.variance(k, t));
        }
    }
}

#[test]
fn run_inference_validates_inputs() {
    let (y, grid, settings) = decay_problem(1);
    let two_states = DMatrix::zeros(2, y.ncols());
    assert!(matches!(
        run_inference(&two_states, &grid, &linear_decay(), &settings),
        Err(Error::DimensionMismatch(_))
    ));
    let mut bad = y.clone();
    bad[(0, 3)] = f64::NAN;
    assert!(matches!(
        run_inference(&bad, &grid, &linear_decay(), &settings),
        Err(Error::InvalidInput(_))
    ));
    let zero_iter = InferenceSettings {
        vi: ViConfig {
            max_iter: 0,
            ..settings.vi
        },
        ..settings.clone()
    };
    assert!(matches!(
        run_inference(&y, &grid, &linear_decay(), &zero_iter),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn config_deserializes_with_defaults() {
    let cfg: ViConfig = serde_json::from_str(r#"{"max_iter": 50, "schedule": "cellwise"}"#).unwrap();
    assert_eq!(cfg.max_iter, 50);
    assert_eq!(cfg.schedule, Schedule::Cellwise);
    assert_eq!(cfg.tol_theta, 1e-6);
    assert!(serde_json::from_str::<ViConfig>(r#"{"bogus": 1}"#).is_err());
}
