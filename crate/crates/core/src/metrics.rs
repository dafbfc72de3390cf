//! Integral performance measures of a post-fault trajectory.
//!
//! All integrals run over the simulated horizon and are reported with a
//! convergence check: the horizon stands in for an infinite one, so the
//! remaining tail is estimated from the decay of the integrand's peak
//! envelope across the last two windows and must be negligible against
//! the accumulated value.
//!
//! * `l2_freq`: `Σ_i ∫ (ω_i - ω_sync)² dt` over every node.
//! * `l2_rocof`: `Σ_i ∫ ω̇_i² dt` over inertial nodes.
//! * `e_rot`: `-Σ_i ∫ m_i ω̇_i dt` over inertial nodes, the net rotational
//!   energy the machines inject during the transient.
//! * `t_sync`: first sample time after which every node frequency stays
//!   within 1 mHz of `ω_sync` for the rest of the run.
//! * `coherency`: `Σ_areas Σ_{i∈area} ∫ (ω_i - ω̄_area)² dt`, small when
//!   areas swing as rigid blocks.
//!
//! Each integral prefers the solver-accumulated quadrature state carried
//! by the trajectory and reports its disagreement with a trapezoidal sum
//! on the sample grid. That cross-check is a resolution diagnostic for
//! the sample interval, not a convergence gate: the quadrature path is
//! exact regardless of how coarsely the trajectory was sampled.

use std::f64::consts::TAU;

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::Trajectory;

/// Synchronization band: 1 mHz in rad/s.
pub const DEFAULT_SYNC_BAND: f64 = TAU * 1e-3;

/// A tail estimate above this fraction of the accumulated integral marks
/// the metric as non-converged.
pub const DEFAULT_TAIL_LIMIT: f64 = 1e-4;

/// Fraction of the horizon used per tail-estimation window.
pub const DEFAULT_TAIL_WINDOW: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory has fewer than two samples")]
    EmptyTrajectory,
    #[error(
        "{metric} has not converged on this horizon: tail estimate {tail:.3e} vs accumulated {total:.3e}"
    )]
    NonConvergedTail {
        metric: &'static str,
        tail: f64,
        total: f64,
    },
    #[error("frequencies never settle into the {band:.3e} rad/s band (worst terminal deviation {worst:.3e})")]
    NeverSynchronized { band: f64, worst: f64 },
    #[error("node {node} has no area label")]
    MissingAreaLabel { node: usize },
    #[error("area list has {got} entries for {expected} nodes")]
    AreaCountMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct MetricsOptions {
    pub sync_band: f64,
    pub tail_limit: f64,
    pub tail_window: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            sync_band: DEFAULT_SYNC_BAND,
            tail_limit: DEFAULT_TAIL_LIMIT,
            tail_window: DEFAULT_TAIL_WINDOW,
        }
    }
}

/// One integral metric with its convergence diagnostics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IntegralMetric {
    pub value: f64,
    /// Estimated integral beyond the horizon, relative to `value`.
    pub tail_relative: f64,
    pub tail_converged: bool,
    /// Relative quadrature-vs-trapezoid disagreement; `None` without
    /// solver quadrature.
    pub cross_check_rel: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub l2_freq: IntegralMetric,
    pub l2_rocof: IntegralMetric,
    pub e_rot: IntegralMetric,
    /// Absent when the grid carries no complete area labeling.
    pub coherency: Option<IntegralMetric>,
    /// Resynchronization time on the sample grid; `None` if the run never
    /// settles.
    pub t_sync: Option<f64>,
    pub max_rocof: f64,
    /// Node where `max_rocof` occurs; `usize::MAX` if there is none.
    pub max_rocof_node: usize,
    pub horizon: f64,
    pub omega_sync: f64,
    /// True when every tail converged and the run synchronized.
    pub converged: bool,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "scenario_id,l2_freq,l2_rocof,e_rot,t_sync,coherency,max_rocof,max_rocof_node,horizon,converged"
    }

    pub fn csv_row(&self, scenario_id: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{scenario_id},{:.9e},{:.9e},{:.9e},{},{},{:.9e},{},{:.6},{}",
            self.l2_freq.value,
            self.l2_rocof.value,
            self.e_rot.value,
            self.t_sync.map(|t| format!("{t:.6}")).unwrap_or_default(),
            opt(self.coherency.map(|c| c.value)),
            self.max_rocof,
            self.max_rocof_node,
            self.horizon,
            self.converged,
        )
    }
}

/// Candidate-over-baseline metric ratios; `None` where either side is
/// missing or the baseline vanishes.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatioReport {
    pub l2_freq: Option<f64>,
    pub l2_rocof: Option<f64>,
    pub e_rot: Option<f64>,
    pub t_sync: Option<f64>,
    pub coherency: Option<f64>,
    pub max_rocof: Option<f64>,
}

pub fn ratio_report(candidate: &MetricsReport, baseline: &MetricsReport) -> RatioReport {
    let ratio = |c: f64, b: f64| (b.abs() > f64::MIN_POSITIVE).then_some(c / b);
    RatioReport {
        l2_freq: ratio(candidate.l2_freq.value, baseline.l2_freq.value),
        l2_rocof: ratio(candidate.l2_rocof.value, baseline.l2_rocof.value),
        e_rot: ratio(candidate.e_rot.value, baseline.e_rot.value),
        t_sync: candidate
            .t_sync
            .zip(baseline.t_sync)
            .and_then(|(c, b)| ratio(c, b)),
        coherency: candidate
            .coherency
            .zip(baseline.coherency)
            .and_then(|(c, b)| ratio(c.value, b.value)),
        max_rocof: ratio(candidate.max_rocof, baseline.max_rocof),
    }
}

fn trapezoid(times: &[f64], f: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 1..times.len() {
        acc += 0.5 * (f[k] + f[k - 1]) * (times[k] - times[k - 1]);
    }
    acc
}

/// Bound the integral beyond the horizon from the peak envelope of |f|:
/// successive windows of width `w` peak at `p0` then `p1`; extrapolating
/// the ratio geometrically gives `Σ_k p1 ρ^k w = p1 w ρ / (1 - ρ)`.
/// A non-decaying envelope yields an infinite bound.
fn tail_bound(times: &[f64], f: &[f64], window: f64, total: f64, limit: f64) -> (f64, bool) {
    let t_end = *times.last().unwrap();
    let w = window * (t_end - times[0]);
    let peak = |lo: f64, hi: f64| {
        times
            .iter()
            .zip(f)
            .filter(|(&t, _)| t >= lo && t < hi)
            .map(|(_, &v)| v.abs())
            .fold(0.0f64, f64::max)
    };
    let p0 = peak(t_end - 2.0 * w, t_end - w);
    let p1 = peak(t_end - w, t_end + 1.0);
    let scale = total.abs().max(f64::MIN_POSITIVE);
    if p1 <= f64::MIN_POSITIVE {
        return (0.0, true);
    }
    // Noise floor: once the envelope is so small that even 100 more flat
    // windows stay under the limit, the peak ratio is meaningless rounding
    // noise and the tail is converged.
    if 100.0 * p1 * w <= limit * scale {
        return (p1 * w / scale, true);
    }
    if p0 <= p1 {
        return (f64::INFINITY, false);
    }
    let rho = p1 / p0;
    let tail = p1 * w * rho / (1.0 - rho);
    (tail / scale, tail / scale <= limit)
}

struct SeriesMetric {
    metric: IntegralMetric,
    tail_abs: f64,
}

fn integrate_series(
    traj: &Trajectory,
    series: &[f64],
    quad: Option<f64>,
    opts: &MetricsOptions,
) -> SeriesMetric {
    let trapz = trapezoid(&traj.times, series);
    let value = quad.unwrap_or(trapz);
    let cross_check_rel =
        quad.map(|q| (q - trapz).abs() / q.abs().max(trapz.abs()).max(f64::MIN_POSITIVE));
    let (tail_relative, tail_converged) =
        tail_bound(&traj.times, series, opts.tail_window, value, opts.tail_limit);
    SeriesMetric {
        metric: IntegralMetric {
            value,
            tail_relative,
            tail_converged,
            cross_check_rel,
        },
        tail_abs: tail_relative * value.abs(),
    }
}

fn freq_dev_series(traj: &Trajectory, omega_sync: f64) -> Vec<f64> {
    let n = traj.n_nodes();
    (0..traj.n_samples())
        .map(|s| {
            (0..n)
                .map(|i| (traj.omega_at(s, i) - omega_sync).powi(2))
                .sum()
        })
        .collect()
}

fn rocof_sq_series(traj: &Trajectory) -> Vec<f64> {
    let n_i = traj.inertial_nodes.len();
    (0..traj.n_samples())
        .map(|s| (0..n_i).map(|idx| traj.rocof_at(s, idx).powi(2)).sum())
        .collect()
}

fn energy_series(traj: &Trajectory) -> Vec<f64> {
    let n_i = traj.inertial_nodes.len();
    (0..traj.n_samples())
        .map(|s| {
            -(0..n_i)
                .map(|idx| traj.machine_inertia_at(s, idx) * traj.rocof_at(s, idx))
                .sum::<f64>()
        })
        .collect()
}

fn area_index(areas: &[String]) -> Result<(Vec<usize>, usize), MetricsError> {
    let mut labels: Vec<&String> = Vec::new();
    let mut of = Vec::with_capacity(areas.len());
    for (node, area) in areas.iter().enumerate() {
        if area.is_empty() {
            return Err(MetricsError::MissingAreaLabel { node });
        }
        let idx = labels.iter().position(|a| *a == area).unwrap_or_else(|| {
            labels.push(area);
            labels.len() - 1
        });
        of.push(idx);
    }
    Ok((of, labels.len()))
}

fn coherency_series(traj: &Trajectory, area_of: &[usize], n_areas: usize) -> Vec<f64> {
    let n = traj.n_nodes();
    let mut out = Vec::with_capacity(traj.n_samples());
    let mut sum = vec![0.0; n_areas];
    let mut cnt = vec![0usize; n_areas];
    for s in 0..traj.n_samples() {
        sum.iter_mut().for_each(|v| *v = 0.0);
        cnt.iter_mut().for_each(|v| *v = 0);
        for i in 0..n {
            sum[area_of[i]] += traj.omega_at(s, i);
            cnt[area_of[i]] += 1;
        }
        let mut acc = 0.0;
        for i in 0..n {
            let mean = sum[area_of[i]] / cnt[area_of[i]] as f64;
            acc += (traj.omega_at(s, i) - mean).powi(2);
        }
        out.push(acc);
    }
    out
}

fn require_samples(traj: &Trajectory) -> Result<(), MetricsError> {
    if traj.n_samples() < 2 {
        Err(MetricsError::EmptyTrajectory)
    } else {
        Ok(())
    }
}

/// Solver quadrature is only valid for the reference the run was
/// integrated with.
fn quad_for(traj: &Trajectory, idx: usize, same_reference: bool) -> Option<f64> {
    match traj.quad {
        Some(q) if same_reference => Some(q[idx]),
        _ => None,
    }
}

fn strict(metric: &'static str, m: SeriesMetric) -> Result<f64, MetricsError> {
    if m.metric.tail_converged {
        Ok(m.metric.value)
    } else {
        Err(MetricsError::NonConvergedTail {
            metric,
            tail: m.tail_abs,
            total: m.metric.value,
        })
    }
}

/// Total squared frequency deviation about `omega_sync`, all nodes.
pub fn l2_freq(traj: &Trajectory, omega_sync: f64) -> Result<f64, MetricsError> {
    require_samples(traj)?;
    let opts = MetricsOptions::default();
    let series = freq_dev_series(traj, omega_sync);
    let quad = quad_for(traj, 0, omega_sync == traj.omega_sync);
    strict("l2_freq", integrate_series(traj, &series, quad, &opts))
}

/// Total squared RoCoF over inertial nodes.
pub fn l2_rocof(traj: &Trajectory) -> Result<f64, MetricsError> {
    require_samples(traj)?;
    let opts = MetricsOptions::default();
    let series = rocof_sq_series(traj);
    strict("l2_rocof", integrate_series(traj, &series, quad_for(traj, 1, true), &opts))
}

/// Net rotational energy injected by the machines.
pub fn e_rot(traj: &Trajectory) -> Result<f64, MetricsError> {
    require_samples(traj)?;
    let opts = MetricsOptions::default();
    let series = energy_series(traj);
    strict("e_rot", integrate_series(traj, &series, quad_for(traj, 2, true), &opts))
}

/// First sample time after which every node stays within `band` of
/// `omega_sync` until the end of the run.
pub fn resync_time(traj: &Trajectory, omega_sync: f64, band: f64) -> Result<f64, MetricsError> {
    require_samples(traj)?;
    let n = traj.n_nodes();
    let violated = |s: usize| {
        (0..n).any(|i| (traj.omega_at(s, i) - omega_sync).abs() >= band)
    };
    let last = traj.n_samples() - 1;
    if violated(last) {
        let worst = (0..n)
            .map(|i| (traj.omega_at(last, i) - omega_sync).abs())
            .fold(0.0f64, f64::max);
        return Err(MetricsError::NeverSynchronized { band, worst });
    }
    for s in (0..last).rev() {
        if violated(s) {
            return Ok(traj.times[s + 1]);
        }
    }
    Ok(traj.times[0])
}

/// Intra-area frequency spread integral under an explicit area labeling
/// (one label per node).
pub fn coherency(traj: &Trajectory, areas: &[String]) -> Result<f64, MetricsError> {
    require_samples(traj)?;
    if areas.len() != traj.n_nodes() {
        return Err(MetricsError::AreaCountMismatch {
            got: areas.len(),
            expected: traj.n_nodes(),
        });
    }
    let (area_of, n_areas) = area_index(areas)?;
    let opts = MetricsOptions::default();
    let series = coherency_series(traj, &area_of, n_areas);
    let quad = quad_for(traj, 3, areas == traj.areas);
    strict("coherency", integrate_series(traj, &series, quad, &opts))
}

/// All metrics with convergence flags instead of hard errors, so batch
/// runs can report partial results.
pub fn compute_report(traj: &Trajectory, opts: &MetricsOptions) -> Result<MetricsReport, MetricsError> {
    require_samples(traj)?;

    let freq = integrate_series(traj, &freq_dev_series(traj, traj.omega_sync), quad_for(traj, 0, true), opts);
    let rocof = integrate_series(traj, &rocof_sq_series(traj), quad_for(traj, 1, true), opts);
    let energy = integrate_series(traj, &energy_series(traj), quad_for(traj, 2, true), opts);

    let coherency_metric = match area_index(&traj.areas) {
        Ok((area_of, n_areas)) => {
            let series = coherency_series(traj, &area_of, n_areas);
            Some(integrate_series(traj, &series, quad_for(traj, 3, true), opts).metric)
        }
        Err(_) => None,
    };

    let t_sync = resync_time(traj, traj.omega_sync, opts.sync_band).ok();
    let (max_rocof, max_rocof_node) = traj.max_rocof();

    let metrics = [&freq.metric, &rocof.metric, &energy.metric];
    let mut converged = t_sync.is_some() && metrics.iter().all(|m| m.tail_converged);
    if let Some(c) = &coherency_metric {
        converged &= c.tail_converged;
    }

    Ok(MetricsReport {
        l2_freq: freq.metric,
        l2_rocof: rocof.metric,
        e_rot: energy.metric,
        coherency: coherency_metric,
        t_sync,
        max_rocof,
        max_rocof_node,
        horizon: *traj.times.last().unwrap(),
        omega_sync: traj.omega_sync,
        converged,
    })
}
