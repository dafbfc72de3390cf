//! Pre-fault operating point and the post-fault synchronous frequency.
//!
//! The fixed point of the network dynamics solves the lossless power-flow
//! equations `P_i = Σ_j b_ij sin(θ_i - θ_j)` with all frequencies at zero.
//! Angles are only defined up to a uniform shift, so node 0 is pinned to
//! `θ_0 = 0` and Newton iterates on the remaining `n - 1` angles.
//!
//! After a power step `δP` the network settles on a uniform frequency
//! offset `ω_sync = δP / Σ_i d_i`: summing the node equations cancels all
//! line flows, leaving total damping against the injection surplus.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::grid::Grid;

/// Newton stops once the reduced residual max-norm falls below this.
/// Well below the acceptance level for the dynamics right-hand side at
/// the fixed point, because the residual is later divided by inertias or
/// load dampings as small as 0.1.
pub const RESIDUAL_TARGET: f64 = 1e-13;

const MAX_ITERATIONS: usize = 50;
const MAX_HALVINGS: usize = 8;

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("Newton did not converge in {iterations} iterations, residual {residual:e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("singular power-flow Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("line search stalled at iteration {iteration}, residual {residual:e}")]
    NoProgress { iteration: usize, residual: f64 },
    #[error(
        "angle difference {delta:.4} rad across line {from}-{to} leaves the stable region (|δθ| < π/2)"
    )]
    AngleOutOfRange { from: usize, to: usize, delta: f64 },
}

/// Solved operating point with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    /// Node angles in rad, `theta[0] == 0`.
    pub theta: Vec<f64>,
    /// Max-norm of the full power-flow residual at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Reduced residual max-norm per iteration, strictly decreasing.
    pub residual_trace: Vec<f64>,
}

/// Power-flow residual `P_i - Σ_j b_ij sin(θ_i - θ_j)` for every node.
pub fn flow_residual(grid: &Grid, theta: &[f64]) -> Vec<f64> {
    grid.nodes()
        .iter()
        .map(|node| {
            let flow: f64 = grid
                .neighbors(node.id)
                .iter()
                .map(|&(j, b)| b * (theta[node.id] - theta[j]).sin())
                .sum();
            node.power - flow
        })
        .collect()
}

/// Stiffness matrix of the coupling at angles `theta`: a weighted graph
/// Laplacian with effective weights `b_ij cos(θ_i - θ_j)`,
/// `L_ij = -b_ij cos(θ_i - θ_j)` off the diagonal and row sums zero.
pub fn stiffness_laplacian(grid: &Grid, theta: &[f64]) -> DMatrix<f64> {
    let n = grid.n_nodes();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        for &(j, b) in grid.neighbors(i) {
            let w = b * (theta[i] - theta[j]).cos();
            l[(i, j)] = -w;
            l[(i, i)] += w;
        }
    }
    l
}

/// Newton solve of the operating point, warm-started from `guess` when
/// given (any gauge; the guess is shifted so node 0 sits at zero).
pub fn solve_fixed_point(grid: &Grid, guess: Option<&[f64]>) -> Result<FixedPoint, EquilibriumError> {
    let n = grid.n_nodes();
    let mut theta: Vec<f64> = match guess {
        Some(g) => {
            assert_eq!(g.len(), n, "guess length must match node count");
            g.iter().map(|&t| t - g[0]).collect()
        }
        None => vec![0.0; n],
    };

    let reduced_norm = |r: &[f64]| {
        r.iter()
            .skip(1)
            .fold(0.0f64, |acc, &v| acc.max(v.abs()))
    };

    let mut trace = Vec::new();
    let mut residual = flow_residual(grid, &theta);
    let mut norm = reduced_norm(&residual);
    trace.push(norm);

    let mut iterations = 0;
    while norm > RESIDUAL_TARGET {
        if iterations >= MAX_ITERATIONS {
            return Err(EquilibriumError::NoConvergence {
                iterations,
                residual: norm,
            });
        }
        iterations += 1;

        // Reduced Newton system: J δ = r with J = L(θ) restricted to
        // nodes 1..n (∂r_i/∂θ_j = -L_ij, solve for the update directly).
        let l = stiffness_laplacian(grid, &theta);
        let j_red = l.view((1, 1), (n - 1, n - 1)).into_owned();
        let r_red = DVector::from_iterator(n - 1, residual.iter().skip(1).copied());
        let delta = j_red
            .lu()
            .solve(&r_red)
            .filter(|d| d.iter().all(|v| v.is_finite()))
            .ok_or(EquilibriumError::SingularJacobian { iteration: iterations })?;

        // Backtracking on the residual max-norm keeps the trace monotone.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = theta
                .iter()
                .enumerate()
                .map(|(i, &t)| if i == 0 { t } else { t + step * delta[i - 1] })
                .collect();
            let cand_residual = flow_residual(grid, &candidate);
            let cand_norm = reduced_norm(&cand_residual);
            if cand_norm < norm {
                theta = candidate;
                residual = cand_residual;
                norm = cand_norm;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(EquilibriumError::NoProgress {
                iteration: iterations,
                residual: norm,
            });
        }
        trace.push(norm);
    }

    for line in grid.lines() {
        let delta = theta[line.from] - theta[line.to];
        if delta.abs() >= std::f64::consts::FRAC_PI_2 {
            return Err(EquilibriumError::AngleOutOfRange {
                from: line.from,
                to: line.to,
                delta,
            });
        }
    }

    let full_norm = residual.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    Ok(FixedPoint {
        theta,
        residual_norm: full_norm,
        iterations,
        residual_trace: trace,
    })
}

/// Uniform frequency the grid settles on after a persistent power step
/// `delta_p` (pu): `ω_sync = δP / Σ_i d_i`. Zero before any fault.
pub fn sync_frequency(grid: &Grid, delta_p: f64) -> f64 {
    delta_p / grid.total_damping()
}
