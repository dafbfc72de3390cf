//! Time-domain response of the grid to a power-step fault.
//!
//! State vector layout (in order): all node angles `θ`, frequencies `ω` of
//! inertial nodes (generators and VSGs, ascending node id), inertias `m`
//! of VSG nodes, then four running integrals used by the metrics module.
//! Load nodes carry no frequency state; their `ω = θ̇` follows
//! algebraically from the flow balance `d_i θ̇_i = P_i - flow_i`.
//!
//! A fault is a persistent step `δP` on one node applied from `t = 0`,
//! with the pre-fault operating point as the initial condition. The
//! network then drifts to the synchronous frequency `ω_sync = δP / Σd`,
//! which is baked into the deviation integrals.
//!
//! VSG inertia control comes in three flavors:
//!
//! * [`VsgPolicy::Plain`]: `ṁ = α|ω̇| - β(m - m_min)`, started at the floor.
//! * [`VsgPolicy::Deadband`]: the `|ω̇|` drive is replaced by the smoothed
//!   ramp `max(|ω̇|, ε) - ε`, which ignores RoCoF noise below `ε`.
//! * [`VsgPolicy::Rearm`]: plain dynamics started at `m_reset`; once every
//!   node frequency has stayed within `band` of `ω_sync` for `hold`
//!   seconds, `m` is set back to `m_reset` (once), restoring the fault
//!   readiness that relaxation to the floor would otherwise erode.

use std::f64::consts::TAU;
use std::io::Write;

use thiserror::Error;

use crate::equilibrium::{self, EquilibriumError};
use crate::grid::{Grid, NodeKind};
use crate::ode::{Dopri5, Dopri5Options, OdeError, StepStats};

/// Frequency band of the rearm detector: 0.1 mHz in rad/s.
pub const DEFAULT_REARM_BAND: f64 = TAU * 1e-4;
/// Dwell time the detector requires inside the band, in seconds.
pub const DEFAULT_REARM_HOLD: f64 = 60.0;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("equilibrium solve failed: {0}")]
    Equilibrium(#[from] EquilibriumError),
    #[error("integration failed: {0}")]
    Ode(#[from] OdeError),
    #[error("fault targets unknown node {node}")]
    FaultUnknownNode { node: usize },
    #[error("fault power step {delta_p} must be finite and nonzero")]
    FaultZeroStep { delta_p: f64 },
    #[error("invalid policy: {0}")]
    BadPolicy(String),
    #[error("invalid options: {0}")]
    BadOptions(String),
    #[error("inertia {m:.6e} at node {node} fell below its floor {m_min:.6e} at t = {t:.3}")]
    InertiaFloorBreached { node: usize, t: f64, m: f64, m_min: f64 },
}

/// Persistent power step on one node, active from `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub node: usize,
    pub delta_p: f64,
}

impl Fault {
    pub fn new(node: usize, delta_p: f64) -> Self {
        Fault { node, delta_p }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VsgPolicy {
    Plain,
    Deadband {
        epsilon: f64,
    },
    Rearm {
        band: f64,
        hold: f64,
        /// Reset (and initial) inertia per VSG node, ascending node id.
        m_reset: Vec<f64>,
    },
}

impl VsgPolicy {
    pub fn rearm(m_reset: Vec<f64>) -> Self {
        VsgPolicy::Rearm {
            band: DEFAULT_REARM_BAND,
            hold: DEFAULT_REARM_HOLD,
            m_reset,
        }
    }
}

/// Integration horizon, sampling grid and solver tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub t_end: f64,
    /// Spacing of the output samples; metrics are defined on this grid.
    pub sample_dt: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Initial VSG inertias (ascending node id); defaults to the floor,
    /// or to `m_reset` under the rearm policy.
    pub m_init: Option<Vec<f64>>,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    // Tolerances are tight because the |ω̇| kinks of the inertia law keep
    // the error estimator busy through the whole ringdown; at 1e-8 the
    // accumulated frequency noise reaches ~1e-5 rad/s on some grids,
    // enough to stall metric tails below the synchronization band.
    fn default() -> Self {
        IntegrateOptions {
            t_end: 120.0,
            sample_dt: 1e-3,
            rtol: 1e-10,
            atol: 1e-12,
            m_init: None,
            max_steps: 10_000_000,
        }
    }
}

/// Maps between the flat solver vector and named state blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub n_nodes: usize,
    /// Node ids carrying an ω state, ascending.
    pub inertial: Vec<usize>,
    /// Node ids carrying an m state, ascending.
    pub vsg: Vec<usize>,
}

impl StateLayout {
    pub fn of(grid: &Grid) -> Self {
        StateLayout {
            n_nodes: grid.n_nodes(),
            inertial: grid.inertial_nodes(),
            vsg: grid.vsg_nodes(),
        }
    }

    /// Dimension of the dynamic state, excluding the metric integrals.
    pub fn dim(&self) -> usize {
        self.n_nodes + self.inertial.len() + self.vsg.len()
    }

    fn omega_offset(&self) -> usize {
        self.n_nodes
    }

    fn m_offset(&self) -> usize {
        self.n_nodes + self.inertial.len()
    }
}

/// Dynamic state (or state derivative) in named blocks. As a derivative,
/// `theta` holds `θ̇` for every node (so loads' algebraic frequency is
/// visible), `omega` holds `ω̇` and `inertia` holds `ṁ`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub inertia: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertiaPeak {
    pub node: usize,
    pub peak: f64,
    pub t_peak: f64,
}

/// Sampled solution on the uniform output grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Row-major `[sample][node]`.
    pub theta: Vec<f64>,
    /// Row-major `[sample][node]`; loads carry their algebraic frequency.
    pub omega: Vec<f64>,
    /// Row-major `[sample][inertial]`, aligned with `inertial_nodes`.
    pub rocof: Vec<f64>,
    /// Row-major `[sample][vsg]`, aligned with `vsg_nodes`.
    pub inertia: Vec<f64>,
    pub inertial_nodes: Vec<usize>,
    pub vsg_nodes: Vec<usize>,
    /// Fixed inertia per inertial node (VSG entries hold the floor).
    pub base_inertia: Vec<f64>,
    /// Area label per node; may contain empty strings.
    pub areas: Vec<String>,
    pub omega_sync: f64,
    /// Solver-accumulated integrals: Σ∫(ω-ω_sync)², Σ∫ω̇² (inertial),
    /// -Σ∫m ω̇ (inertial), Σ∫(ω-ω̄_area)². Absent on synthetic data.
    pub quad: Option<[f64; 4]>,
    /// Times at which the rearm policy reset the VSG inertias.
    pub rearm_events: Vec<f64>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn n_nodes(&self) -> usize {
        if self.times.is_empty() {
            0
        } else {
            self.theta.len() / self.times.len()
        }
    }

    pub fn omega_at(&self, sample: usize, node: usize) -> f64 {
        self.omega[sample * self.n_nodes() + node]
    }

    pub fn theta_at(&self, sample: usize, node: usize) -> f64 {
        self.theta[sample * self.n_nodes() + node]
    }

    /// RoCoF by position in `inertial_nodes`.
    pub fn rocof_at(&self, sample: usize, inertial_idx: usize) -> f64 {
        self.rocof[sample * self.inertial_nodes.len() + inertial_idx]
    }

    /// VSG inertia by position in `vsg_nodes`.
    pub fn vsg_inertia_at(&self, sample: usize, vsg_idx: usize) -> f64 {
        self.inertia[sample * self.vsg_nodes.len() + vsg_idx]
    }

    /// Inertia of the inertial node `inertial_idx` at a sample: the VSG
    /// state when adaptive, the fixed machine constant otherwise.
    pub fn machine_inertia_at(&self, sample: usize, inertial_idx: usize) -> f64 {
        let node = self.inertial_nodes[inertial_idx];
        match self.vsg_nodes.binary_search(&node) {
            Ok(v) => self.vsg_inertia_at(sample, v),
            Err(_) => self.base_inertia[inertial_idx],
        }
    }

    /// Largest |ω̇| over inertial nodes and samples, with its node id.
    pub fn max_rocof(&self) -> (f64, usize) {
        let mut best = (0.0f64, usize::MAX);
        for idx in 0..self.inertial_nodes.len() {
            for s in 0..self.n_samples() {
                let r = self.rocof_at(s, idx).abs();
                if r > best.0 {
                    best = (r, self.inertial_nodes[idx]);
                }
            }
        }
        best
    }

    /// Largest |ω̇| at one node over the run; zero for load nodes.
    pub fn max_rocof_at_node(&self, node: usize) -> f64 {
        match self.inertial_nodes.binary_search(&node) {
            Ok(idx) => (0..self.n_samples())
                .map(|s| self.rocof_at(s, idx).abs())
                .fold(0.0, f64::max),
            Err(_) => 0.0,
        }
    }

    /// `t,node_id,theta,omega,rocof,m` rows for every sample and node;
    /// rocof is empty for loads, m is empty for loads and constant for
    /// generators.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,node_id,theta,omega,rocof,m")?;
        let n = self.n_nodes();
        for (s, &t) in self.times.iter().enumerate() {
            for node in 0..n {
                let rocof = match self.inertial_nodes.binary_search(&node) {
                    Ok(idx) => format!("{:.9e}", self.rocof_at(s, idx)),
                    Err(_) => String::new(),
                };
                let m = match self.inertial_nodes.binary_search(&node) {
                    Ok(idx) => format!("{:.9e}", self.machine_inertia_at(s, idx)),
                    Err(_) => String::new(),
                };
                writeln!(
                    out,
                    "{t:.6},{node},{:.9e},{:.9e},{rocof},{m}",
                    self.theta_at(s, node),
                    self.omega_at(s, node),
                )?;
            }
        }
        Ok(())
    }
}

/// One node's channels for [`Trajectory::from_series`].
#[derive(Debug, Clone)]
pub struct SyntheticChannel {
    pub omega: Vec<f64>,
    /// Required for inertial nodes, ignored for loads.
    pub rocof: Vec<f64>,
    /// Fixed machine inertia; `None` marks a load.
    pub inertia: Option<f64>,
    pub area: String,
}

impl Trajectory {
    /// Assemble a trajectory from externally computed series, e.g. closed
    /// forms in tests. Angles are zeroed, there are no VSG channels and no
    /// solver integrals, so metrics fall back to trapezoidal sums.
    pub fn from_series(times: Vec<f64>, omega_sync: f64, nodes: Vec<SyntheticChannel>) -> Self {
        let n = nodes.len();
        let s = times.len();
        let inertial_nodes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.inertia.is_some())
            .map(|(i, _)| i)
            .collect();
        let mut omega = vec![0.0; s * n];
        let mut rocof = vec![0.0; s * inertial_nodes.len()];
        for (i, ch) in nodes.iter().enumerate() {
            assert_eq!(ch.omega.len(), s, "omega series length");
            for k in 0..s {
                omega[k * n + i] = ch.omega[k];
            }
        }
        for (idx, &i) in inertial_nodes.iter().enumerate() {
            assert_eq!(nodes[i].rocof.len(), s, "rocof series length");
            for k in 0..s {
                rocof[k * inertial_nodes.len() + idx] = nodes[i].rocof[k];
            }
        }
        Trajectory {
            times,
            theta: vec![0.0; s * n],
            omega,
            rocof,
            inertia: Vec::new(),
            base_inertia: inertial_nodes
                .iter()
                .map(|&i| nodes[i].inertia.unwrap())
                .collect(),
            inertial_nodes,
            vsg_nodes: Vec::new(),
            areas: nodes.iter().map(|c| c.area.clone()).collect(),
            omega_sync,
            quad: None,
            rearm_events: Vec::new(),
            stats: StepStats::default(),
        }
    }
}

/// Peak inertia reached by every VSG over the run.
pub fn max_inertia_profile(traj: &Trajectory) -> Vec<InertiaPeak> {
    traj.vsg_nodes
        .iter()
        .enumerate()
        .map(|(idx, &node)| {
            let mut peak = f64::MIN;
            let mut t_peak = 0.0;
            for s in 0..traj.n_samples() {
                let m = traj.vsg_inertia_at(s, idx);
                if m > peak {
                    peak = m;
                    t_peak = traj.times[s];
                }
            }
            InertiaPeak { node, peak, t_peak }
        })
        .collect()
}

/// Inertia drive as a function of |ω̇|: identity for the plain law, the
/// shifted ramp `max(x, ε) - ε` under a deadband. The ramp equals the
/// symmetric form `(|ω̇+ε| + |ω̇-ε|)/2 - ε`.
fn drive(abs_rocof: f64, epsilon: f64) -> f64 {
    abs_rocof.max(epsilon) - epsilon
}

enum NodeDyn {
    Load {
        d: f64,
    },
    Generator {
        omega_idx: usize,
        d: f64,
        m: f64,
    },
    Vsg {
        omega_idx: usize,
        m_idx: usize,
        d: f64,
        m_min: f64,
        alpha: f64,
        beta: f64,
    },
}

/// Precomputed right-hand side of the faulted network.
struct SwingSystem {
    p_eff: Vec<f64>,
    node_dyn: Vec<NodeDyn>,
    lines: Vec<(usize, usize, f64)>,
    layout: StateLayout,
    omega_sync: f64,
    /// Area index per node when every node is labeled; else empty and the
    /// coherency integral stays zero.
    area_of: Vec<usize>,
    n_areas: usize,
    epsilon: f64,
}

struct Scratch {
    flow: Vec<f64>,
    omega: Vec<f64>,
    rocof: Vec<f64>,
    area_sum: Vec<f64>,
    area_cnt: Vec<usize>,
}

impl SwingSystem {
    fn new(grid: &Grid, fault: Option<&Fault>, policy: &VsgPolicy) -> Result<Self, DynamicsError> {
        let layout = StateLayout::of(grid);
        let mut p_eff: Vec<f64> = grid.nodes().iter().map(|n| n.power).collect();
        let mut omega_sync = 0.0;
        if let Some(f) = fault {
            if f.node >= grid.n_nodes() {
                return Err(DynamicsError::FaultUnknownNode { node: f.node });
            }
            if !(f.delta_p.is_finite() && f.delta_p != 0.0) {
                return Err(DynamicsError::FaultZeroStep { delta_p: f.delta_p });
            }
            p_eff[f.node] += f.delta_p;
            omega_sync = equilibrium::sync_frequency(grid, f.delta_p);
        }

        let epsilon = match policy {
            VsgPolicy::Deadband { epsilon } => {
                if !(epsilon.is_finite() && *epsilon > 0.0) {
                    return Err(DynamicsError::BadPolicy(format!(
                        "deadband epsilon {epsilon} must be positive"
                    )));
                }
                *epsilon
            }
            VsgPolicy::Rearm { band, hold, m_reset } => {
                if !(band.is_finite() && *band > 0.0) {
                    return Err(DynamicsError::BadPolicy(format!(
                        "rearm band {band} must be positive"
                    )));
                }
                if !(hold.is_finite() && *hold >= 0.0) {
                    return Err(DynamicsError::BadPolicy(format!(
                        "rearm hold {hold} must be nonnegative"
                    )));
                }
                if m_reset.len() != layout.vsg.len() {
                    return Err(DynamicsError::BadPolicy(format!(
                        "m_reset has {} entries for {} VSG nodes",
                        m_reset.len(),
                        layout.vsg.len()
                    )));
                }
                for (k, &node) in layout.vsg.iter().enumerate() {
                    let floor = grid.node(node).vsg().expect("vsg node").m_min;
                    if !(m_reset[k].is_finite() && m_reset[k] >= floor) {
                        return Err(DynamicsError::BadPolicy(format!(
                            "m_reset {} at node {node} is below the floor {floor}",
                            m_reset[k]
                        )));
                    }
                }
                0.0
            }
            VsgPolicy::Plain => 0.0,
        };

        let mut omega_idx = 0;
        let mut m_idx = 0;
        let node_dyn = grid
            .nodes()
            .iter()
            .map(|node| match &node.kind {
                NodeKind::Load => NodeDyn::Load { d: node.damping },
                NodeKind::Generator { inertia } => {
                    let nd = NodeDyn::Generator {
                        omega_idx,
                        d: node.damping,
                        m: *inertia,
                    };
                    omega_idx += 1;
                    nd
                }
                NodeKind::Vsg(v) => {
                    let nd = NodeDyn::Vsg {
                        omega_idx,
                        m_idx,
                        d: node.damping,
                        m_min: v.m_min,
                        alpha: v.alpha,
                        beta: v.beta,
                    };
                    omega_idx += 1;
                    m_idx += 1;
                    nd
                }
            })
            .collect();

        let labels = grid.areas();
        let all_labeled = grid.nodes().iter().all(|n| !n.area.is_empty());
        let (area_of, n_areas) = if all_labeled && !labels.is_empty() {
            let of = grid
                .nodes()
                .iter()
                .map(|n| labels.iter().position(|a| a == &n.area).unwrap())
                .collect();
            (of, labels.len())
        } else {
            (Vec::new(), 0)
        };

        Ok(SwingSystem {
            p_eff,
            node_dyn,
            lines: grid.lines().iter().map(|l| (l.from, l.to, l.b)).collect(),
            layout,
            omega_sync,
            area_of,
            n_areas,
            epsilon,
        })
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            flow: vec![0.0; self.layout.n_nodes],
            omega: vec![0.0; self.layout.n_nodes],
            rocof: vec![0.0; self.layout.inertial.len()],
            area_sum: vec![0.0; self.n_areas],
            area_cnt: vec![0; self.n_areas],
        }
    }

    /// Flat RHS over dynamic states plus the four metric integrands.
    /// `s.omega` and `s.rocof` are left holding the per-node frequency and
    /// per-inertial RoCoF, which the sampler reuses.
    fn eval(&self, y: &[f64], dy: &mut [f64], s: &mut Scratch) {
        let n = self.layout.n_nodes;
        let om0 = self.layout.omega_offset();
        let m0 = self.layout.m_offset();
        let q0 = self.layout.dim();

        s.flow.iter_mut().for_each(|f| *f = 0.0);
        for &(u, v, b) in &self.lines {
            let p = b * (y[u] - y[v]).sin();
            s.flow[u] += p;
            s.flow[v] -= p;
        }

        for (i, nd) in self.node_dyn.iter().enumerate() {
            let imbalance = self.p_eff[i] - s.flow[i];
            match nd {
                NodeDyn::Load { d } => {
                    let omega = imbalance / d;
                    s.omega[i] = omega;
                    dy[i] = omega;
                }
                NodeDyn::Generator { omega_idx, d, m } => {
                    let omega = y[om0 + omega_idx];
                    let rocof = (imbalance - d * omega) / m;
                    s.omega[i] = omega;
                    s.rocof[*omega_idx] = rocof;
                    dy[i] = omega;
                    dy[om0 + omega_idx] = rocof;
                }
                NodeDyn::Vsg {
                    omega_idx,
                    m_idx,
                    d,
                    m_min,
                    alpha,
                    beta,
                } => {
                    let omega = y[om0 + omega_idx];
                    let m = y[m0 + m_idx];
                    let rocof = (imbalance - d * omega) / m;
                    s.omega[i] = omega;
                    s.rocof[*omega_idx] = rocof;
                    dy[i] = omega;
                    dy[om0 + omega_idx] = rocof;
                    dy[m0 + m_idx] = alpha * drive(rocof.abs(), self.epsilon) - beta * (m - m_min);
                }
            }
        }

        // Metric integrands: see `Trajectory::quad`.
        let mut freq_dev = 0.0;
        for i in 0..n {
            freq_dev += (s.omega[i] - self.omega_sync).powi(2);
        }
        let mut rocof_sq = 0.0;
        let mut energy = 0.0;
        for (idx, &node) in self.layout.inertial.iter().enumerate() {
            let r = s.rocof[idx];
            rocof_sq += r * r;
            let m = match &self.node_dyn[node] {
                NodeDyn::Generator { m, .. } => *m,
                NodeDyn::Vsg { m_idx, .. } => y[m0 + m_idx],
                NodeDyn::Load { .. } => unreachable!("inertial node"),
            };
            energy -= m * r;
        }
        let mut coherency = 0.0;
        if self.n_areas > 0 {
            s.area_sum.iter_mut().for_each(|v| *v = 0.0);
            s.area_cnt.iter_mut().for_each(|v| *v = 0);
            for i in 0..n {
                s.area_sum[self.area_of[i]] += s.omega[i];
                s.area_cnt[self.area_of[i]] += 1;
            }
            for i in 0..n {
                let mean = s.area_sum[self.area_of[i]] / s.area_cnt[self.area_of[i]] as f64;
                coherency += (s.omega[i] - mean).powi(2);
            }
        }
        dy[q0] = freq_dev;
        dy[q0 + 1] = rocof_sq;
        dy[q0 + 2] = energy;
        dy[q0 + 3] = coherency;
    }
}

/// Evaluate the model right-hand side at one state. The returned [`State`]
/// holds `θ̇` (every node, so loads expose their algebraic frequency),
/// `ω̇` per inertial node and `ṁ` per VSG.
pub fn rhs(
    grid: &Grid,
    fault: Option<&Fault>,
    state: &State,
    policy: &VsgPolicy,
) -> Result<State, DynamicsError> {
    let sys = SwingSystem::new(grid, fault, policy)?;
    let layout = &sys.layout;
    assert_eq!(state.theta.len(), layout.n_nodes);
    assert_eq!(state.omega.len(), layout.inertial.len());
    assert_eq!(state.inertia.len(), layout.vsg.len());

    let mut y = vec![0.0; layout.dim() + 4];
    y[..layout.n_nodes].copy_from_slice(&state.theta);
    y[layout.omega_offset()..layout.m_offset()].copy_from_slice(&state.omega);
    y[layout.m_offset()..layout.dim()].copy_from_slice(&state.inertia);

    let mut dy = vec![0.0; y.len()];
    let mut scratch = sys.scratch();
    sys.eval(&y, &mut dy, &mut scratch);
    Ok(State {
        theta: dy[..layout.n_nodes].to_vec(),
        omega: dy[layout.omega_offset()..layout.m_offset()].to_vec(),
        inertia: dy[layout.m_offset()..layout.dim()].to_vec(),
    })
}

/// [`rhs`] under the deadband drive; unfaulted.
pub fn rhs_deadband(grid: &Grid, state: &State, epsilon: f64) -> Result<State, DynamicsError> {
    rhs(grid, None, state, &VsgPolicy::Deadband { epsilon })
}

/// Slack factor on the floor invariant `m ≥ m_min`. The exact flow never
/// crosses the floor, but the RK interpolation polynomial may undershoot
/// by the local error scale `atol + rtol·m_min`; anything far beyond that
/// signals a defect, not roundoff.
const FLOOR_SLACK_FACTOR: f64 = 100.0;

/// Integrate the faulted network from its pre-fault operating point and
/// sample everything on the uniform output grid.
pub fn integrate(
    grid: &Grid,
    fault: Option<&Fault>,
    policy: &VsgPolicy,
    opts: &IntegrateOptions,
) -> Result<Trajectory, DynamicsError> {
    if !(opts.t_end.is_finite() && opts.t_end > 0.0) {
        return Err(DynamicsError::BadOptions(format!(
            "t_end {} must be positive",
            opts.t_end
        )));
    }
    if !(opts.sample_dt.is_finite() && opts.sample_dt > 0.0 && opts.sample_dt <= opts.t_end) {
        return Err(DynamicsError::BadOptions(format!(
            "sample_dt {} must lie in (0, t_end]",
            opts.sample_dt
        )));
    }

    let sys = SwingSystem::new(grid, fault, policy)?;
    let layout = sys.layout.clone();
    let fixed_point = equilibrium::solve_fixed_point(grid, None)?;

    let m_floor: Vec<f64> = layout
        .vsg
        .iter()
        .map(|&id| grid.node(id).vsg().expect("vsg node").m_min)
        .collect();
    let m_start: Vec<f64> = match (&opts.m_init, policy) {
        (Some(init), _) => {
            if init.len() != layout.vsg.len() {
                return Err(DynamicsError::BadOptions(format!(
                    "m_init has {} entries for {} VSG nodes",
                    init.len(),
                    layout.vsg.len()
                )));
            }
            for (k, (&m, &floor)) in init.iter().zip(&m_floor).enumerate() {
                if !(m.is_finite() && m >= floor) {
                    return Err(DynamicsError::BadOptions(format!(
                        "m_init {m} at node {} is below the floor {floor}",
                        layout.vsg[k]
                    )));
                }
            }
            init.clone()
        }
        (None, VsgPolicy::Rearm { m_reset, .. }) => m_reset.clone(),
        (None, _) => m_floor.clone(),
    };

    let mut y0 = vec![0.0; layout.dim() + 4];
    y0[..layout.n_nodes].copy_from_slice(&fixed_point.theta);
    y0[layout.m_offset()..layout.dim()].copy_from_slice(&m_start);

    let ode_opts = Dopri5Options {
        rtol: opts.rtol,
        atol: opts.atol,
        max_steps: opts.max_steps,
        ..Default::default()
    };
    let mut rhs_scratch = sys.scratch();
    let sys_ref = &sys;
    let f = move |_t: f64, y: &[f64], dy: &mut [f64]| sys_ref.eval(y, dy, &mut rhs_scratch);
    let mut stepper = Dopri5::new(f, 0.0, y0.clone(), ode_opts)?;

    // Output grid: k·dt up to t_end, with t_end always the final sample.
    let n_inner = (opts.t_end / opts.sample_dt - 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=n_inner).map(|k| k as f64 * opts.sample_dt).collect();
    if opts.t_end - times[times.len() - 1] > 1e-9 * opts.t_end.max(1.0) {
        times.push(opts.t_end);
    } else {
        *times.last_mut().unwrap() = opts.t_end;
    }

    let n = layout.n_nodes;
    let n_i = layout.inertial.len();
    let n_v = layout.vsg.len();
    let n_samples = times.len();
    let mut traj = Trajectory {
        times: times.clone(),
        theta: vec![0.0; n_samples * n],
        omega: vec![0.0; n_samples * n],
        rocof: vec![0.0; n_samples * n_i],
        inertia: vec![0.0; n_samples * n_v],
        inertial_nodes: layout.inertial.clone(),
        vsg_nodes: layout.vsg.clone(),
        base_inertia: layout
            .inertial
            .iter()
            .map(|&id| grid.node(id).base_inertia().expect("inertial node"))
            .collect(),
        areas: grid.nodes().iter().map(|nd| nd.area.clone()).collect(),
        omega_sync: sys.omega_sync,
        quad: None,
        rearm_events: Vec::new(),
        stats: StepStats::default(),
    };

    let mut sample_scratch = sys.scratch();
    let mut dy_scratch = vec![0.0; layout.dim() + 4];
    // Records sample `s` from the full state vector `y`; returns the worst
    // |ω - ω_sync| for the rearm detector and checks the floor invariant.
    let mut record = |traj: &mut Trajectory, s: usize, y: &[f64]| -> Result<f64, DynamicsError> {
        sys.eval(y, &mut dy_scratch, &mut sample_scratch);
        traj.theta[s * n..(s + 1) * n].copy_from_slice(&y[..n]);
        traj.omega[s * n..(s + 1) * n].copy_from_slice(&sample_scratch.omega);
        traj.rocof[s * n_i..(s + 1) * n_i].copy_from_slice(&sample_scratch.rocof);
        traj.inertia[s * n_v..(s + 1) * n_v]
            .copy_from_slice(&y[layout.m_offset()..layout.dim()]);
        for (k, &floor) in m_floor.iter().enumerate() {
            let m = y[layout.m_offset() + k];
            let slack = FLOOR_SLACK_FACTOR * (opts.atol + opts.rtol * floor);
            if m < floor - slack {
                return Err(DynamicsError::InertiaFloorBreached {
                    node: layout.vsg[k],
                    t: traj.times[s],
                    m,
                    m_min: floor,
                });
            }
        }
        let worst = sample_scratch
            .omega
            .iter()
            .fold(0.0f64, |acc, &w| acc.max((w - sys.omega_sync).abs()));
        Ok(worst)
    };

    let (rearm_band, rearm_hold) = match policy {
        VsgPolicy::Rearm { band, hold, .. } => (*band, *hold),
        _ => (0.0, 0.0),
    };
    let mut rearm_armed = matches!(policy, VsgPolicy::Rearm { .. });
    let mut streak_start: Option<f64> = None;

    let update_rearm = |t: f64, worst: f64, armed: &mut bool, streak: &mut Option<f64>| -> bool {
        if !*armed {
            return false;
        }
        if worst < rearm_band {
            let start = streak.get_or_insert(t);
            if t - *start >= rearm_hold - 1e-12 {
                *armed = false;
                return true;
            }
        } else {
            *streak = None;
        }
        false
    };

    let worst0 = record(&mut traj, 0, &y0)?;
    // A hold of zero (or an already-quiet grid with hold met at t=0) still
    // behaves like an initialization, not an event.
    update_rearm(0.0, worst0, &mut rearm_armed, &mut streak_start);

    let mut next = 1usize;
    let mut y_sample = vec![0.0; layout.dim() + 4];
    while next < n_samples {
        let done = stepper.step(opts.t_end)?;
        while next < n_samples && times[next] <= stepper.t() + 1e-12 {
            let ts = times[next];
            if ts >= stepper.t() {
                y_sample.copy_from_slice(stepper.y());
            } else {
                stepper.dense(ts, &mut y_sample);
            }
            let worst = record(&mut traj, next, &y_sample)?;
            let fired = update_rearm(ts, worst, &mut rearm_armed, &mut streak_start);
            next += 1;
            if fired {
                // Reset the inertias at the sample point, rewrite the
                // sample so the stored series shows the post-reset state,
                // and restart the solver across the discontinuity.
                let VsgPolicy::Rearm { m_reset, .. } = policy else {
                    unreachable!()
                };
                y_sample[layout.m_offset()..layout.dim()].copy_from_slice(m_reset);
                record(&mut traj, next - 1, &y_sample)?;
                traj.rearm_events.push(ts);
                stepper.reinit(ts, y_sample.clone());
                break;
            }
        }
        if done && next >= n_samples {
            break;
        }
    }

    let q0 = layout.dim();
    let y_end = stepper.y();
    traj.quad = Some([y_end[q0], y_end[q0 + 1], y_end[q0 + 2], y_end[q0 + 3]]);
    traj.stats = stepper.stats;
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Line, Node, VsgParams};
    use approx::assert_relative_eq;

    fn node(id: usize, kind: NodeKind, power: f64, damping: f64, area: &str) -> Node {
        Node {
            id,
            kind,
            power,
            damping,
            area: area.into(),
        }
    }

    fn vsg_kind(m_min: f64, alpha: f64, beta: f64) -> NodeKind {
        NodeKind::Vsg(VsgParams { m_min, alpha, beta })
    }

    /// One isolated VSG: no lines, no power, pure inertia relaxation.
    fn lone_vsg(alpha: f64, beta: f64) -> Grid {
        Grid::new(
            50.0,
            vec![node(0, vsg_kind(0.2, alpha, beta), 0.0, 0.1, "a")],
            vec![],
        )
        .unwrap()
    }

    /// Generator, VSG and load sharing one line each: the workhorse grid.
    fn three_kinds() -> Grid {
        Grid::new(
            50.0,
            vec![
                node(0, NodeKind::Generator { inertia: 1.0 }, 0.6, 0.3, "a"),
                node(1, vsg_kind(0.3, 5.0, 5.0), 0.2, 0.2, "a"),
                node(2, NodeKind::Load, -0.8, 0.1, "b"),
            ],
            vec![
                Line { from: 0, to: 1, b: 2.0 },
                Line { from: 1, to: 2, b: 2.0 },
            ],
        )
        .unwrap()
    }

    fn equilibrium_state(grid: &Grid, m_init: &[f64]) -> State {
        let fp = equilibrium::solve_fixed_point(grid, None).unwrap();
        State {
            theta: fp.theta,
            omega: vec![0.0; grid.inertial_nodes().len()],
            inertia: m_init.to_vec(),
        }
    }

    #[test]
    fn relaxation_rate_at_inflated_inertia() {
        // ṁ = α·0 - β(m - m_min) = -5(1.0 - 0.2) = -4 at rest.
        let grid = lone_vsg(5.0, 5.0);
        let state = State {
            theta: vec![0.0],
            omega: vec![0.0],
            inertia: vec![1.0],
        };
        let d = rhs(&grid, None, &state, &VsgPolicy::Plain).unwrap();
        assert_relative_eq!(d.inertia[0], -4.0, epsilon = 1e-12);
        assert_eq!(d.omega[0], 0.0);
    }

    #[test]
    fn inertia_relaxes_exponentially_to_the_floor() {
        // m(t) = m_min + (m0 - m_min) e^{-βt}; m(0.2) = 0.2 + 0.8/e.
        let grid = lone_vsg(5.0, 5.0);
        let opts = IntegrateOptions {
            t_end: 0.2,
            m_init: Some(vec![1.0]),
            ..Default::default()
        };
        let traj = integrate(&grid, None, &VsgPolicy::Plain, &opts).unwrap();
        let last = traj.n_samples() - 1;
        assert_relative_eq!(traj.times[last], 0.2);
        assert_relative_eq!(
            traj.vsg_inertia_at(last, 0),
            0.2 + 0.8 * (-1.0f64).exp(),
            epsilon = 1e-6
        );
        assert_relative_eq!(
            traj.vsg_inertia_at(last, 0),
            0.4943035529371539,
            epsilon = 1e-6
        );
    }

    #[test]
    fn initial_rocof_is_power_step_over_initial_inertia() {
        let grid = three_kinds();
        let fault = Fault::new(1, -1.0);
        let traj = integrate(
            &grid,
            Some(&fault),
            &VsgPolicy::Plain,
            &IntegrateOptions {
                t_end: 1.0,
                ..Default::default()
            },
        )
        .unwrap();
        // VSG node 1 is inertial index 1 and starts at m_min = 0.3.
        assert_relative_eq!(traj.rocof_at(0, 1), -1.0 / 0.3, epsilon = 1e-9);
        // The other nodes see zero imbalance at t = 0+.
        assert_relative_eq!(traj.rocof_at(0, 0), 0.0, epsilon = 1e-9);
        assert_relative_eq!(traj.omega_at(0, 2), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn unfaulted_run_stays_at_the_operating_point() {
        let grid = three_kinds();
        let fp = equilibrium::solve_fixed_point(&grid, None).unwrap();
        let traj = integrate(
            &grid,
            None,
            &VsgPolicy::Plain,
            &IntegrateOptions {
                t_end: 10.0,
                sample_dt: 0.01,
                ..Default::default()
            },
        )
        .unwrap();
        let last = traj.n_samples() - 1;
        for i in 0..3 {
            assert!(
                traj.omega_at(last, i).abs() < 1e-8,
                "node {i} drifted to ω = {:e}",
                traj.omega_at(last, i)
            );
            assert_relative_eq!(traj.theta_at(last, i), fp.theta[i], epsilon = 1e-7);
        }
        assert!((traj.vsg_inertia_at(last, 0) - 0.3).abs() < 1e-8);
        assert_eq!(traj.omega_sync, 0.0);
    }

    #[test]
    fn faulted_run_synchronizes_at_the_predicted_frequency() {
        let grid = three_kinds();
        let fault = Fault::new(2, -0.5);
        let opts = IntegrateOptions {
            t_end: 120.0,
            sample_dt: 0.01,
            ..Default::default()
        };
        let traj = integrate(&grid, Some(&fault), &VsgPolicy::Plain, &opts).unwrap();
        let expected = -0.5 / grid.total_damping();
        assert_relative_eq!(traj.omega_sync, expected, epsilon = 1e-15);
        let last = traj.n_samples() - 1;
        for i in 0..3 {
            assert!(
                (traj.omega_at(last, i) - expected).abs() < 1e-7,
                "node {i} off sync: {} vs {expected}",
                traj.omega_at(last, i)
            );
        }
        // VSG inertia returns to its floor once the transient has passed.
        assert!((traj.vsg_inertia_at(last, 0) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn deadband_freezes_small_drives_and_shifts_large_ones() {
        let grid = lone_vsg(5.0, 5.0);
        let eps = 1e-3;
        // Inflated inertia, zero RoCoF: only relaxation acts.
        let rest = State {
            theta: vec![0.0],
            omega: vec![0.0],
            inertia: vec![0.5],
        };
        let d = rhs_deadband(&grid, &rest, eps).unwrap();
        assert_relative_eq!(d.inertia[0], -5.0 * 0.3, epsilon = 1e-12);

        // Large RoCoF: drive is |ω̇| - ε, exactly αε below the plain law.
        let moving = State {
            theta: vec![0.0],
            omega: vec![0.4],
            inertia: vec![0.2],
        };
        let plain = rhs(&grid, None, &moving, &VsgPolicy::Plain).unwrap();
        let banded = rhs_deadband(&grid, &moving, eps).unwrap();
        assert!(plain.omega[0].abs() > eps);
        assert_relative_eq!(
            plain.inertia[0] - banded.inertia[0],
            5.0 * eps,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ramp_drive_equals_symmetric_absolute_form() {
        for &x in &[-2.0f64, -1e-3, -1e-7, 0.0, 1e-7, 1e-3, 0.5, 3.0] {
            for &eps in &[1e-6f64, 1e-3, 0.1] {
                let sym = 0.5 * ((x + eps).abs() + (x - eps).abs()) - eps;
                assert_relative_eq!(drive(x.abs(), eps), sym, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn rotational_energy_integral_telescopes_for_fixed_inertia() {
        // With constant m: -Σ∫m ω̇ dt = -Σ m (ω(T) - ω(0)) = -Σ m ω_sync.
        let grid = Grid::new(
            50.0,
            vec![
                node(0, NodeKind::Generator { inertia: 1.2 }, 0.5, 0.4, "a"),
                node(1, NodeKind::Generator { inertia: 0.7 }, 0.1, 0.3, "a"),
                node(2, NodeKind::Load, -0.6, 0.2, "a"),
            ],
            vec![
                Line { from: 0, to: 1, b: 1.5 },
                Line { from: 1, to: 2, b: 1.5 },
            ],
        )
        .unwrap();
        let fault = Fault::new(0, -0.3);
        let traj = integrate(
            &grid,
            Some(&fault),
            &VsgPolicy::Plain,
            &IntegrateOptions::default(),
        )
        .unwrap();
        let expected = -(1.2 + 0.7) * traj.omega_sync;
        let quad = traj.quad.unwrap();
        assert_relative_eq!(quad[2], expected, max_relative = 1e-6);
    }

    #[test]
    fn inertia_honors_its_floor_and_peaks_after_the_fault() {
        let grid = three_kinds();
        let traj = integrate(
            &grid,
            Some(&Fault::new(1, -1.0)),
            &VsgPolicy::Plain,
            &IntegrateOptions {
                t_end: 60.0,
                ..Default::default()
            },
        )
        .unwrap();
        for s in 0..traj.n_samples() {
            assert!(traj.vsg_inertia_at(s, 0) >= 0.3 - 1e-7);
        }
        let profile = max_inertia_profile(&traj);
        assert_eq!(profile.len(), 1);
        assert_eq!(profile[0].node, 1);
        assert!(profile[0].peak > 0.35, "peak {}", profile[0].peak);
        assert!(profile[0].t_peak > 0.0 && profile[0].t_peak < 30.0);
    }

    #[test]
    fn rearm_fires_once_after_the_hold_and_restores_inertia() {
        let grid = three_kinds();
        let policy = VsgPolicy::Rearm {
            band: 5e-3,
            hold: 2.0,
            m_reset: vec![0.9],
        };
        let traj = integrate(
            &grid,
            Some(&Fault::new(2, -0.2)),
            &policy,
            &IntegrateOptions {
                t_end: 80.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(traj.vsg_inertia_at(0, 0), 0.9);
        assert_eq!(traj.rearm_events.len(), 1);
        let t_event = traj.rearm_events[0];
        assert!(t_event >= 2.0, "event at {t_event}");
        let s_event = traj.times.iter().position(|&t| t == t_event).unwrap();
        assert_relative_eq!(traj.vsg_inertia_at(s_event, 0), 0.9);
        assert!(traj.vsg_inertia_at(s_event - 1, 0) < 0.9);
        // Single shot: still at the reset level (relaxing) afterwards, no
        // second event even though the band condition keeps holding.
        let last = traj.n_samples() - 1;
        assert!(traj.vsg_inertia_at(last, 0) < 0.9);
    }

    #[test]
    fn inertia_override_must_respect_the_floor() {
        let grid = lone_vsg(5.0, 5.0);
        let err = integrate(
            &grid,
            None,
            &VsgPolicy::Plain,
            &IntegrateOptions {
                m_init: Some(vec![0.1]),
                t_end: 1.0,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::BadOptions(_)));

        let err = integrate(
            &grid,
            None,
            &VsgPolicy::Rearm {
                band: 1e-3,
                hold: 1.0,
                m_reset: vec![0.15],
            },
            &IntegrateOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DynamicsError::BadPolicy(_)));
    }

    #[test]
    fn fault_validation_rejects_bad_targets() {
        let grid = three_kinds();
        assert!(matches!(
            integrate(
                &grid,
                Some(&Fault::new(7, -1.0)),
                &VsgPolicy::Plain,
                &IntegrateOptions::default()
            ),
            Err(DynamicsError::FaultUnknownNode { node: 7 })
        ));
        assert!(matches!(
            integrate(
                &grid,
                Some(&Fault::new(0, 0.0)),
                &VsgPolicy::Plain,
                &IntegrateOptions::default()
            ),
            Err(DynamicsError::FaultZeroStep { .. })
        ));
    }

    #[test]
    fn sampling_grid_is_uniform_and_closed() {
        let grid = three_kinds();
        let opts = IntegrateOptions {
            t_end: 0.25,
            sample_dt: 0.1,
            ..Default::default()
        };
        let traj = integrate(&grid, None, &VsgPolicy::Plain, &opts).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.1, 0.2, 0.25]);

        let opts = IntegrateOptions {
            t_end: 0.3,
            sample_dt: 0.1,
            ..Default::default()
        };
        let traj = integrate(&grid, None, &VsgPolicy::Plain, &opts).unwrap();
        assert_eq!(traj.times.len(), 4);
        assert_eq!(*traj.times.last().unwrap(), 0.3);
    }

    #[test]
    fn csv_export_matches_the_documented_schema() {
        let grid = three_kinds();
        let traj = integrate(
            &grid,
            Some(&Fault::new(1, -0.5)),
            &VsgPolicy::Plain,
            &IntegrateOptions {
                t_end: 0.002,
                sample_dt: 1e-3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,node_id,theta,omega,rocof,m");
        assert_eq!(lines.len(), 1 + traj.n_samples() * 3);
        // Generator row: all six fields populated.
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[1], "0");
        assert!(fields[4].parse::<f64>().is_ok());
        // Load row: rocof and m are empty.
        let fields: Vec<&str> = lines[3].split(',').collect();
        assert_eq!(fields[1], "2");
        assert_eq!(fields[4], "");
        assert_eq!(fields[5], "");
    }

    #[test]
    fn load_frequency_is_the_flow_imbalance_over_damping() {
        let grid = three_kinds();
        let fp = equilibrium::solve_fixed_point(&grid, None).unwrap();
        let mut state = equilibrium_state(&grid, &[0.3]);
        // Displace the load angle; its frequency must read (P - flow)/d.
        state.theta[2] += 0.05;
        let d = rhs(&grid, None, &state, &VsgPolicy::Plain).unwrap();
        let flow = 2.0 * (state.theta[2] - fp.theta[1]).sin();
        assert_relative_eq!(d.theta[2], (-0.8 - flow) / 0.1, epsilon = 1e-12);
    }
}
