//! Scoring a result document against the generating truth.

use serde::{Deserialize, Serialize};

use crate::config::parse_model;
use crate::data::TruthDocument;
use crate::error::{CliError, CliResult};
use crate::result::ResultDocument;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub schema_version: u32,
    pub theta_true: Vec<f64>,
    pub theta_estimate: Vec<f64>,
    pub theta_std: Vec<f64>,
    pub abs_error: Vec<f64>,
    /// `|ζ − θ| / |θ|`; absent where `θ = 0`.
    pub rel_error: Vec<Option<f64>>,
    pub within_3_std: Vec<bool>,
    /// Absent when either vector is constant.
    pub spearman: Option<f64>,
    pub proxy_rmse: Vec<f64>,
    /// Proxy RMSE divided by the range of the true trajectory.
    pub proxy_rmse_normalized: Vec<Option<f64>>,
    pub reintegrated: Option<TrajectoryMetrics>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMetrics {
    pub rmse: Vec<f64>,
    /// Over all states and times.
    pub rmse_overall: f64,
    /// Sign changes of the model right-hand side along the trajectory.
    pub derivative_sign_changes: Vec<usize>,
}

pub fn evaluate(result: &ResultDocument, truth: &TruthDocument) -> CliResult<Metrics> {
    let theta_true = &truth.simulation.theta_true;
    let zeta = &result.theta.mean;
    let k = truth.states.len();
    let n = truth.times.len();
    if zeta.len() != theta_true.len() {
        return Err(shape("parameters", zeta.len(), theta_true.len()));
    }
    if result.proxy.means.len() != k {
        return Err(shape("states", result.proxy.means.len(), k));
    }
    if result.times.len() != n {
        return Err(shape("sample times", result.times.len(), n));
    }
    if let Some(i) = (0..n).find(|&i| (result.times[i] - truth.times[i]).abs() > 1e-9 * truth.times[i].abs().max(1.0)) {
        return Err(CliError::Input(format!(
            "sample time {} differs: result has {}, truth has {}",
            i + 1,
            result.times[i],
            truth.times[i]
        )));
    }

    let abs_error: Vec<f64> = zeta.iter().zip(theta_true).map(|(z, t)| (z - t).abs()).collect();
    let rel_error = abs_error
        .iter()
        .zip(theta_true)
        .map(|(e, t)| (*t != 0.0).then(|| e / t.abs()))
        .collect();
    let within_3_std = abs_error.iter().zip(&result.theta.std).map(|(e, s)| *e <= 3.0 * s).collect();
    let proxy_rmse: Vec<f64> = (0..k).map(|s| rmse(&result.proxy.means[s], &truth.states[s])).collect();
    let proxy_rmse_normalized = proxy_rmse
        .iter()
        .zip(&truth.states)
        .map(|(r, row)| {
            let range = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) - row.iter().copied().fold(f64::INFINITY, f64::min);
            (range > 0.0).then(|| r / range)
        })
        .collect();

    let reintegrated = match &result.reintegrated {
        Some(traj) => {
            let system = parse_model(&result.model, "result model")?;
            let rmse_per: Vec<f64> = (0..k).map(|s| rmse(&traj.states[s], &truth.states[s])).collect();
            let all_x: Vec<f64> = traj.states.iter().flatten().copied().collect();
            let all_t: Vec<f64> = truth.states.iter().flatten().copied().collect();
            let mut changes = vec![0usize; k];
            let mut prev: Option<Vec<f64>> = None;
            for j in 0..n {
                let x: Vec<f64> = (0..k).map(|s| traj.states[s][j]).collect();
                let dx = system.evaluate(zeta, &x)?;
                if let Some(p) = &prev {
                    for s in 0..k {
                        if p[s] * dx[s] < 0.0 {
                            changes[s] += 1;
                        }
                    }
                }
                prev = Some(dx);
            }
            Some(TrajectoryMetrics {
                rmse: rmse_per,
                rmse_overall: rmse(&all_x, &all_t),
                derivative_sign_changes: changes,
            })
        }
        None => None,
    };

    Ok(Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        theta_true: theta_true.clone(),
        theta_estimate: zeta.clone(),
        theta_std: result.theta.std.clone(),
        abs_error,
        rel_error,
        within_3_std,
        spearman: spearman(zeta, theta_true),
        proxy_rmse,
        proxy_rmse_normalized,
        reintegrated,
        converged: result.converged,
        iterations: result.iterations,
    })
}

fn shape(what: &str, result: usize, truth: usize) -> CliError {
    CliError::Input(format!("result has {result} {what}, truth has {truth}"))
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (sum / a.len() as f64).sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; the Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n != b.len() || n < 2 {
        return None;
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let ties = |r: &[f64]| {
        let mut s = r.to_vec();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };
    if !ties(&ra) && !ties(&rb) {
        // exact in floating point for identical and reversed rankings
        let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
        let nf = n as f64;
        return Some(1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0)));
    }
    let mean = (n as f64 + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - mean) * (y - mean);
        saa += (x - mean).powi(2);
        sbb += (y - mean).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}
