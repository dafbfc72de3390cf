//! Small-signal analysis around the operating point.
//!
//! Linearizing the network at the fixed point `(θ⁰, 0, m_min)` gives a
//! block-triangular Jacobian in the state order (θ all nodes, ω inertial
//! nodes, m VSG nodes):
//!
//! ```text
//! ẋ = [  S   T   0 ] x      S, T: load rows -L/d and inertial selectors
//!     [ -M⁻¹L -M⁻¹D 0 ]      L: stiffness Laplacian at θ⁰
//!     [  0   0  -β  ]        M: inertias at rest (m_min for VSGs)
//! ```
//!
//! The inertia column vanishes because the swing equations touch `m` only
//! through `ω̇ · m = imbalance`, whose numerator is zero at the fixed
//! point, and the `|ω̇|` drive contributes nothing to first order (with a
//! deadband it is exactly flat near the fixed point). Consequently the
//! spectrum of the full system is the spectrum of the swing block joined
//! with one `-β_k` per VSG: adapting the inertia adds relaxation modes
//! but never moves the synchronization modes.

use nalgebra::{Complex, DMatrix, DVector};
use thiserror::Error;

use crate::equilibrium;
use crate::grid::{Grid, NodeKind};

#[derive(Debug, Error)]
pub enum StabilityError {
    #[error("spectrum-union check requires an all-VSG grid, node {node} is a {kind}")]
    NotAllVsg { node: usize, kind: &'static str },
}

/// Weighted graph Laplacian of the linearized flows at angles `theta`:
/// `L_ij = -b_ij cos(θ_i - θ_j)` off the diagonal, zero row sums.
pub fn laplacian(grid: &Grid, theta: &[f64]) -> DMatrix<f64> {
    equilibrium::stiffness_laplacian(grid, theta)
}

/// Jacobian of the full dynamics at `(theta, 0, m_rest)` together with its
/// state indexing: rows/columns are `0..n` angles, then one ω per
/// inertial node, then one m per VSG.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub matrix: DMatrix<f64>,
    pub inertial_nodes: Vec<usize>,
    pub vsg_nodes: Vec<usize>,
}

impl Linearization {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Column of the ω state for the k-th inertial node ([θ | ω | m] order).
    pub fn omega_index(&self, inertial_idx: usize) -> usize {
        self.n_nodes() + inertial_idx
    }

    pub fn m_index(&self, vsg_idx: usize) -> usize {
        self.n_nodes() + self.inertial_nodes.len() + vsg_idx
    }

    fn n_nodes(&self) -> usize {
        self.dim() - self.inertial_nodes.len() - self.vsg_nodes.len()
    }
}

/// Linearize the mixed generator/load/VSG dynamics at the fixed point.
/// VSGs sit at their inertia floor; `theta` must solve the flow equations
/// for the linearization to be meaningful.
pub fn full_jacobian(grid: &Grid, theta: &[f64]) -> Linearization {
    let n = grid.n_nodes();
    assert_eq!(theta.len(), n, "theta length");
    let inertial = grid.inertial_nodes();
    let vsgs = grid.vsg_nodes();
    let dim = n + inertial.len() + vsgs.len();
    let l = laplacian(grid, theta);

    let mut j = DMatrix::zeros(dim, dim);
    let omega_col = |idx: usize| n + idx;
    let m_col = |idx: usize| n + inertial.len() + idx;

    let mut omega_idx = 0;
    let mut m_idx = 0;
    for node in grid.nodes() {
        let i = node.id;
        match &node.kind {
            NodeKind::Load => {
                for col in 0..n {
                    j[(i, col)] = -l[(i, col)] / node.damping;
                }
            }
            NodeKind::Generator { inertia } => {
                j[(i, omega_col(omega_idx))] = 1.0;
                for col in 0..n {
                    j[(omega_col(omega_idx), col)] = -l[(i, col)] / inertia;
                }
                j[(omega_col(omega_idx), omega_col(omega_idx))] = -node.damping / inertia;
                omega_idx += 1;
            }
            NodeKind::Vsg(v) => {
                j[(i, omega_col(omega_idx))] = 1.0;
                for col in 0..n {
                    j[(omega_col(omega_idx), col)] = -l[(i, col)] / v.m_min;
                }
                j[(omega_col(omega_idx), omega_col(omega_idx))] = -node.damping / v.m_min;
                j[(m_col(m_idx), m_col(m_idx))] = -v.beta;
                omega_idx += 1;
                m_idx += 1;
            }
        }
    }

    Linearization {
        matrix: j,
        inertial_nodes: inertial,
        vsg_nodes: vsgs,
    }
}

/// Swing block of an all-VSG grid: `[[0, I], [-M⁻¹L, -M⁻¹D]]` with the
/// inertias frozen at their floors.
pub fn swing_block(grid: &Grid, theta: &[f64]) -> Result<DMatrix<f64>, StabilityError> {
    let n = grid.n_nodes();
    for node in grid.nodes() {
        if !node.kind.is_vsg() {
            return Err(StabilityError::NotAllVsg {
                node: node.id,
                kind: node.kind.name(),
            });
        }
    }
    let l = laplacian(grid, theta);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a[(i, n + i)] = 1.0;
        let v = grid.node(i).vsg().expect("all-VSG grid");
        for col in 0..n {
            a[(n + i, col)] = -l[(i, col)] / v.m_min;
        }
        a[(n + i, n + i)] = -grid.node(i).damping / v.m_min;
    }
    Ok(a)
}

#[derive(Debug, Clone)]
pub struct SpectrumReport {
    /// Eigenvalues of the full 3n linearization.
    pub full: Vec<Complex<f64>>,
    /// Eigenvalues of the 2n swing block.
    pub swing: Vec<Complex<f64>>,
    /// `swing` joined with one `-β` per VSG, the predicted full spectrum.
    pub predicted: Vec<Complex<f64>>,
    /// Max distance when each full eigenvalue is matched to its nearest
    /// unclaimed predicted one.
    pub max_pairing_distance: f64,
    pub union_holds: bool,
    /// Largest real part over all modes except the angle-shift zero mode.
    pub spectral_abscissa: f64,
    /// Magnitude of the eigenvalue closest to zero (the gauge mode).
    pub zero_mode_abs: f64,
}

fn sorted(mut vals: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
    vals.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    vals
}

/// Max distance under greedy nearest matching. Pairing positionally after
/// a lexicographic sort is unstable: eigensolver noise in the real parts
/// of a conjugate pair can swap their order and report a spurious `2|im|`
/// distance, so each value claims its nearest unclaimed partner instead.
fn max_pairing_distance(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut taken = vec![false; b.len()];
    let mut worst = 0.0f64;
    for v in a {
        let (j, d) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[*j])
            .map(|(j, w)| (j, (v - w).norm()))
            .min_by(|(_, p), (_, q)| p.total_cmp(q))
            .expect("equal-length spectra");
        taken[j] = true;
        worst = worst.max(d);
    }
    worst
}

/// Verify on an all-VSG grid that adapting the inertia only adds `-β`
/// relaxation modes to the constant-inertia spectrum, and that all modes
/// except the angle gauge are strictly stable.
pub fn spectrum_union_check(
    grid: &Grid,
    theta: &[f64],
    pairing_tol: f64,
) -> Result<SpectrumReport, StabilityError> {
    let a = swing_block(grid, theta)?;
    let full = full_jacobian(grid, theta).matrix;

    let swing = sorted(a.complex_eigenvalues().iter().copied().collect());
    let full_eigs = sorted(full.complex_eigenvalues().iter().copied().collect());
    let mut predicted = swing.clone();
    for node in grid.nodes() {
        let v = node.vsg().expect("all-VSG grid");
        predicted.push(Complex::new(-v.beta, 0.0));
    }
    let predicted = sorted(predicted);

    let max_pairing_distance = max_pairing_distance(&full_eigs, &predicted);

    let zero_idx = full_eigs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.norm().total_cmp(&b.norm()))
        .map(|(i, _)| i)
        .expect("nonempty spectrum");
    let zero_mode_abs = full_eigs[zero_idx].norm();
    let spectral_abscissa = full_eigs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != zero_idx)
        .map(|(_, v)| v.re)
        .fold(f64::NEG_INFINITY, f64::max);

    Ok(SpectrumReport {
        union_holds: max_pairing_distance < pairing_tol,
        full: full_eigs,
        swing,
        predicted,
        max_pairing_distance,
        spectral_abscissa,
        zero_mode_abs,
    })
}

/// Eigenvector for a known eigenvalue by shifted inverse iteration; the
/// shift is nudged off `lambda` so the solve stays well-posed.
pub fn eigenvector(a: &DMatrix<f64>, lambda: Complex<f64>) -> DVector<Complex<f64>> {
    let n = a.nrows();
    let shift = lambda + Complex::new(1e-10, 1e-10);
    let mut shifted = a.map(|v| Complex::new(v, 0.0));
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut v = DVector::from_element(n, Complex::new(1.0, 0.0));
    v /= Complex::new(v.norm(), 0.0);
    for _ in 0..50 {
        let mut w = lu.solve(&v).expect("shifted matrix is nonsingular");
        w /= Complex::new(w.norm(), 0.0);
        let residual = (a.map(|x| Complex::new(x, 0.0)) * &w - &w * lambda).norm();
        v = w;
        if residual < 1e-10 {
            break;
        }
    }
    v
}
