//! Python bindings over the simulator core: grids, the fixed-point solver,
//! the transient integrator with its metrics, the spectrum check and the
//! seeded grid generators. Thin by design; orchestration (sweeps,
//! campaigns) stays with the CLI.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use swingsim::dynamics::{self, Fault, IntegrateOptions, VsgPolicy};
use swingsim::equilibrium::solve_fixed_point;
use swingsim::grid;
use swingsim::metrics::{compute_report, IntegralMetric, MetricsOptions};
use swingsim::stability::spectrum_union_check;
use swingsim::synth;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Lossless power grid: nodes (generators, frequency-dependent loads,
/// virtual synchronous generators) joined by susceptance-weighted lines.
#[pyclass(name = "Grid", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: grid::Grid,
}

#[pymethods]
impl PyGrid {
    /// Load a grid from its JSON file.
    #[staticmethod]
    fn from_path(path: &str) -> PyResult<Self> {
        Ok(PyGrid { inner: grid::Grid::from_path(path).map_err(value_error)? })
    }

    /// Parse a grid from a JSON string.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyGrid { inner: grid::Grid::from_json_str(text).map_err(value_error)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json_string()
    }

    /// Content hash of the canonical JSON form.
    fn sha256(&self) -> String {
        self.inner.sha256_hex()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    #[getter]
    fn total_damping(&self) -> f64 {
        self.inner.total_damping()
    }

    fn generator_nodes(&self) -> Vec<usize> {
        self.inner.generator_nodes()
    }

    fn vsg_nodes(&self) -> Vec<usize> {
        self.inner.vsg_nodes()
    }

    fn load_nodes(&self) -> Vec<usize> {
        self.inner.load_nodes()
    }

    /// Convert the listed generators to adaptive-inertia VSGs with floor
    /// `m_min_rule` times their inertia; returns the promoted grid.
    #[pyo3(signature = (ids, alpha, beta, m_min_rule = 1.0 / 3.0))]
    fn promote(&self, ids: Vec<usize>, alpha: f64, beta: f64, m_min_rule: f64) -> PyResult<Self> {
        let inner =
            grid::promote_to_vsg(&self.inner, &ids, alpha, beta, m_min_rule).map_err(value_error)?;
        Ok(PyGrid { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Grid({} nodes: {} generators, {} VSGs, {} loads)",
            self.inner.n_nodes(),
            self.inner.generator_nodes().len(),
            self.inner.vsg_nodes().len(),
            self.inner.load_nodes().len()
        )
    }
}

/// Sampled solution of one transient run.
#[pyclass(name = "Trajectory", frozen)]
struct PyTrajectory {
    inner: dynamics::Trajectory,
}

fn metric_dict<'py>(py: Python<'py>, m: &IntegralMetric) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("value", m.value)?;
    d.set_item("tail_relative", m.tail_relative)?;
    d.set_item("tail_converged", m.tail_converged)?;
    d.set_item("cross_check_rel", m.cross_check_rel)?;
    Ok(d)
}

#[pymethods]
impl PyTrajectory {
    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_nodes(&self) -> usize {
        self.inner.n_nodes()
    }

    /// Post-fault synchronous frequency deviation, rad/s.
    #[getter]
    fn omega_sync(&self) -> f64 {
        self.inner.omega_sync
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    fn theta(&self, node: usize) -> PyResult<Vec<f64>> {
        self.check_node(node)?;
        Ok((0..self.inner.n_samples()).map(|k| self.inner.theta_at(k, node)).collect())
    }

    fn omega(&self, node: usize) -> PyResult<Vec<f64>> {
        self.check_node(node)?;
        Ok((0..self.inner.n_samples()).map(|k| self.inner.omega_at(k, node)).collect())
    }

    fn rocof(&self, node: usize) -> PyResult<Vec<f64>> {
        let idx = self
            .inner
            .inertial_nodes
            .iter()
            .position(|&i| i == node)
            .ok_or_else(|| value_error(format!("node {node} carries no swing equation")))?;
        Ok((0..self.inner.n_samples()).map(|k| self.inner.rocof_at(k, idx)).collect())
    }

    /// Adaptive inertia m(t) of a VSG node.
    fn inertia(&self, node: usize) -> PyResult<Vec<f64>> {
        let idx = self
            .inner
            .vsg_nodes
            .iter()
            .position(|&i| i == node)
            .ok_or_else(|| value_error(format!("node {node} is not a VSG")))?;
        Ok((0..self.inner.n_samples()).map(|k| self.inner.vsg_inertia_at(k, idx)).collect())
    }

    fn max_rocof(&self) -> (f64, usize) {
        self.inner.max_rocof()
    }

    fn max_rocof_at_node(&self, node: usize) -> f64 {
        self.inner.max_rocof_at_node(node)
    }

    /// All performance measures of the run as a dict mirroring the CLI's
    /// metrics.csv columns, with per-integral tail diagnostics.
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = compute_report(&self.inner, &MetricsOptions::default()).map_err(value_error)?;
        let d = PyDict::new(py);
        d.set_item("l2_freq", metric_dict(py, &report.l2_freq)?)?;
        d.set_item("l2_rocof", metric_dict(py, &report.l2_rocof)?)?;
        d.set_item("e_rot", metric_dict(py, &report.e_rot)?)?;
        match &report.coherency {
            Some(c) => d.set_item("coherency", metric_dict(py, c)?)?,
            None => d.set_item("coherency", py.None())?,
        }
        d.set_item("t_sync", report.t_sync)?;
        d.set_item("max_rocof", report.max_rocof)?;
        d.set_item("max_rocof_node", report.max_rocof_node)?;
        d.set_item("horizon", report.horizon)?;
        d.set_item("omega_sync", report.omega_sync)?;
        d.set_item("converged", report.converged)?;
        Ok(d)
    }

    /// Write the trajectory as `t,node_id,theta,omega,rocof,m` CSV.
    fn write_csv(&self, path: &str) -> PyResult<()> {
        let file = std::fs::File::create(path)?;
        self.inner.write_csv(std::io::BufWriter::new(file))?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Trajectory({} nodes, {} samples to t={})",
            self.inner.n_nodes(),
            self.inner.n_samples(),
            self.inner.times.last().unwrap()
        )
    }
}

impl PyTrajectory {
    fn check_node(&self, node: usize) -> PyResult<()> {
        if node < self.inner.n_nodes() {
            Ok(())
        } else {
            Err(value_error(format!("node {node} out of range")))
        }
    }
}

/// Newton solution of the pre-fault power flow: node angles (node 0
/// pinned to zero), the residual max-norm and the iteration count.
#[pyfunction]
fn fixed_point<'py>(py: Python<'py>, grid: &PyGrid) -> PyResult<Bound<'py, PyDict>> {
    let fp = solve_fixed_point(&grid.inner, None).map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("theta", fp.theta)?;
    d.set_item("residual_norm", fp.residual_norm)?;
    d.set_item("iterations", fp.iterations)?;
    Ok(d)
}

/// Integrate a transient from the pre-fault operating point.
///
/// `fault` is `(node, delta_p)` or None; `policy` is "plain", "deadband"
/// (with `epsilon`) or "rearm" (with `m_reset`, one value per VSG in
/// ascending node order).
#[pyfunction]
#[pyo3(signature = (
    grid, fault = None, t_end = 120.0, sample_dt = 1e-3, policy = "plain",
    epsilon = 1e-6, m_reset = None, m_init = None, rtol = 1e-10, atol = 1e-12,
))]
#[allow(clippy::too_many_arguments)]
fn integrate(
    grid: &PyGrid,
    fault: Option<(usize, f64)>,
    t_end: f64,
    sample_dt: f64,
    policy: &str,
    epsilon: f64,
    m_reset: Option<Vec<f64>>,
    m_init: Option<Vec<f64>>,
    rtol: f64,
    atol: f64,
) -> PyResult<PyTrajectory> {
    let policy = match (policy, m_reset) {
        ("plain", None) => VsgPolicy::Plain,
        ("deadband", None) => VsgPolicy::Deadband { epsilon },
        ("rearm", Some(m_reset)) => VsgPolicy::rearm(m_reset),
        ("rearm", None) => return Err(value_error("rearm needs m_reset, one value per VSG")),
        (other, _) => {
            return Err(value_error(format!(
                "unknown policy {other:?} (or m_reset without rearm); use plain, deadband or rearm"
            )))
        }
    };
    let fault = fault.map(|(node, delta_p)| Fault::new(node, delta_p));
    let opts = IntegrateOptions {
        t_end,
        sample_dt,
        rtol,
        atol,
        m_init,
        ..IntegrateOptions::default()
    };
    let inner = dynamics::integrate(&grid.inner, fault.as_ref(), &policy, &opts).map_err(value_error)?;
    Ok(PyTrajectory { inner })
}

/// On an all-VSG grid, check that the linearization's spectrum is the
/// constant-inertia swing spectrum plus one `-beta` relaxation mode per
/// VSG, and report the stability margin.
#[pyfunction]
#[pyo3(signature = (grid, pairing_tol = 1e-8))]
fn spectrum_check<'py>(py: Python<'py>, grid: &PyGrid, pairing_tol: f64) -> PyResult<Bound<'py, PyDict>> {
    let fp = solve_fixed_point(&grid.inner, None).map_err(value_error)?;
    let report = spectrum_union_check(&grid.inner, &fp.theta, pairing_tol).map_err(value_error)?;
    let d = PyDict::new(py);
    d.set_item("union_holds", report.union_holds)?;
    d.set_item("max_pairing_distance", report.max_pairing_distance)?;
    d.set_item("spectral_abscissa", report.spectral_abscissa)?;
    d.set_item("zero_mode_abs", report.zero_mode_abs)?;
    let eigs: Vec<(f64, f64)> = report.full.iter().map(|z| (z.re, z.im)).collect();
    d.set_item("eigenvalues", eigs)?;
    Ok(d)
}

/// Seeded random connected grid mixing generators, loads and VSGs,
/// constructed around a known solvable operating point.
#[pyfunction]
fn random_mixed_grid(seed: u64, n: usize) -> PyGrid {
    PyGrid { inner: synth::random_mixed_grid(seed, n) }
}

/// Seeded random connected grid of VSGs only, for spectrum experiments.
#[pyfunction]
fn random_all_vsg_grid(seed: u64, n: usize) -> PyGrid {
    PyGrid { inner: synth::random_all_vsg_grid(seed, n) }
}

#[pymodule]
fn swingsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_function(wrap_pyfunction!(fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum_check, m)?)?;
    m.add_function(wrap_pyfunction!(random_mixed_grid, m)?)?;
    m.add_function(wrap_pyfunction!(random_all_vsg_grid, m)?)?;
    Ok(())
}
