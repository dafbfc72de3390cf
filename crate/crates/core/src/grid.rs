//! Static description of a lossless transmission grid.
//!
//! A grid is a connected, undirected graph. Every node injects (or draws)
//! a constant power `P` and has a damping `d`; the node kind decides the
//! dynamic model attached to it:
//!
//! * `generator`: synchronous machine with fixed inertia `m`,
//! * `load`: first-order structure-preserving load (no inertia),
//! * `vsg`: virtual synchronous generator whose inertia is a dynamic state
//!   bounded below by `m_min` and driven by gains `alpha` and `beta`.
//!
//! Every line is a susceptance `b > 0` between two distinct nodes. All
//! quantities are per unit on a common MVA base, angles in radians,
//! frequencies in rad/s relative to the nominal grid frequency.
//!
//! [`Grid`] is immutable after construction: every constructor runs the
//! full validation, so downstream code may rely on contiguous ids, a
//! connected topology and a balanced injection vector.

use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance on the net injection `|Σ_i P_i|` of a balanced grid.
pub const POWER_BALANCE_TOL: f64 = 1e-9;

/// MVA base used when converting MW figures to per unit.
pub const DEFAULT_BASE_MVA: f64 = 100.0;

/// Inertia is drawn uniformly from `[M_DRAW_MIN, M_DRAW_MIN + M_DRAW_SPAN]`
/// by [`sample_machine_params`].
pub const M_DRAW_MIN: f64 = 0.1;
pub const M_DRAW_SPAN: f64 = 1.0;

/// Damping-to-inertia ratio applied by [`sample_machine_params`].
pub const D_OVER_M: f64 = 0.3;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid has no nodes")]
    Empty,
    #[error("node ids must be a permutation of 0..{expected}, got duplicate or out-of-range id {id}")]
    BadNodeIds { expected: usize, id: usize },
    #[error("line {index} references unknown node {id}")]
    UnknownNode { index: usize, id: usize },
    #[error("line {index} connects node {id} to itself")]
    SelfLoop { index: usize, id: usize },
    #[error("duplicate line between nodes {from} and {to}")]
    DuplicateLine { from: usize, to: usize },
    #[error("node {node}: parameter {param} = {value} must be positive and finite")]
    BadParameter {
        node: usize,
        param: &'static str,
        value: f64,
    },
    #[error("node {node}: {kind} nodes do not take parameter {param}")]
    UnexpectedParameter {
        node: usize,
        kind: &'static str,
        param: &'static str,
    },
    #[error("node {node}: missing parameter {param} required for kind {kind}")]
    MissingParameter {
        node: usize,
        kind: &'static str,
        param: &'static str,
    },
    #[error("line {index}: susceptance b = {b} must be positive and finite")]
    BadSusceptance { index: usize, b: f64 },
    #[error("injections do not balance: total power {total:e} exceeds {POWER_BALANCE_TOL:e}")]
    PowerImbalance { total: f64 },
    #[error("grid is not connected: node {unreachable} cannot be reached from node 0")]
    Disconnected { unreachable: usize },
    #[error("frequency base {value} Hz must be positive and finite")]
    BadFrequencyBase { value: f64 },
    #[error("node {id}: cannot promote a {kind} node to VSG")]
    NotAGenerator { id: usize, kind: &'static str },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Control parameters of a virtual synchronous generator.
#[derive(Debug, Clone, PartialEq)]
pub struct VsgParams {
    /// Inertia floor; also the inertia the controller starts from.
    pub m_min: f64,
    /// Gain on |dω/dt| that inflates the inertia during transients.
    pub alpha: f64,
    /// Relaxation rate pulling the inertia back to the floor.
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Generator { inertia: f64 },
    Load,
    Vsg(VsgParams),
}

impl NodeKind {
    /// True for nodes carrying a second-order (swing) equation.
    pub fn is_inertial(&self) -> bool {
        !matches!(self, NodeKind::Load)
    }

    pub fn is_vsg(&self) -> bool {
        matches!(self, NodeKind::Vsg(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Generator { .. } => "generator",
            NodeKind::Load => "load",
            NodeKind::Vsg(_) => "vsg",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    /// Net injected power in pu; negative for consumption.
    pub power: f64,
    /// Damping (generators, VSGs) or frequency coefficient (loads), pu.
    pub damping: f64,
    /// Coherency area label; empty if the grid has no area structure.
    pub area: String,
}

impl Node {
    /// Fixed inertia of a generator, or the floor of a VSG.
    pub fn base_inertia(&self) -> Option<f64> {
        match &self.kind {
            NodeKind::Generator { inertia } => Some(*inertia),
            NodeKind::Vsg(v) => Some(v.m_min),
            NodeKind::Load => None,
        }
    }

    pub fn vsg(&self) -> Option<&VsgParams> {
        match &self.kind {
            NodeKind::Vsg(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Line susceptance scaled by the terminal voltage magnitudes, pu.
    pub b: f64,
}

/// Validated, immutable grid. See the module docs for the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    nodes: Vec<Node>,
    lines: Vec<Line>,
    frequency_base_hz: f64,
    /// Adjacency list: `adjacency[i]` holds `(j, b_ij)` for every line at i.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl Grid {
    pub fn new(frequency_base_hz: f64, nodes: Vec<Node>, lines: Vec<Line>) -> Result<Self, GridError> {
        if !(frequency_base_hz.is_finite() && frequency_base_hz > 0.0) {
            return Err(GridError::BadFrequencyBase {
                value: frequency_base_hz,
            });
        }
        if nodes.is_empty() {
            return Err(GridError::Empty);
        }

        let n = nodes.len();
        let mut sorted: Vec<Option<Node>> = (0..n).map(|_| None).collect();
        for node in nodes {
            let id = node.id;
            if id >= n || sorted[id].is_some() {
                return Err(GridError::BadNodeIds { expected: n, id });
            }
            sorted[id] = Some(node);
        }
        let nodes: Vec<Node> = sorted.into_iter().map(Option::unwrap).collect();

        for node in &nodes {
            check_positive(node.id, "d", node.damping)?;
            if !node.power.is_finite() {
                return Err(GridError::BadParameter {
                    node: node.id,
                    param: "P",
                    value: node.power,
                });
            }
            match &node.kind {
                NodeKind::Generator { inertia } => check_positive(node.id, "m", *inertia)?,
                NodeKind::Load => {}
                NodeKind::Vsg(v) => {
                    check_positive(node.id, "m_min", v.m_min)?;
                    check_nonnegative(node.id, "alpha", v.alpha)?;
                    check_nonnegative(node.id, "beta", v.beta)?;
                }
            }
        }

        let total: f64 = nodes.iter().map(|n| n.power).sum();
        if total.abs() > POWER_BALANCE_TOL {
            return Err(GridError::PowerImbalance { total });
        }

        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut seen = std::collections::HashSet::new();
        for (index, line) in lines.iter().enumerate() {
            for id in [line.from, line.to] {
                if id >= n {
                    return Err(GridError::UnknownNode { index, id });
                }
            }
            if line.from == line.to {
                return Err(GridError::SelfLoop {
                    index,
                    id: line.from,
                });
            }
            if !(line.b.is_finite() && line.b > 0.0) {
                return Err(GridError::BadSusceptance { index, b: line.b });
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(GridError::DuplicateLine {
                    from: key.0,
                    to: key.1,
                });
            }
            adjacency[line.from].push((line.to, line.b));
            adjacency[line.to].push((line.from, line.b));
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|a| a.0);
        }

        // BFS from node 0; a single component is required.
        let mut reached = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        reached[0] = true;
        while let Some(i) = queue.pop_front() {
            for &(j, _) in &adjacency[i] {
                if !reached[j] {
                    reached[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if let Some(unreachable) = reached.iter().position(|r| !r) {
            return Err(GridError::Disconnected { unreachable });
        }

        Ok(Grid {
            nodes,
            lines,
            frequency_base_hz,
            adjacency,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn frequency_base_hz(&self) -> f64 {
        self.frequency_base_hz
    }

    /// Neighbors of `id` with line susceptances, sorted by neighbor id.
    pub fn neighbors(&self, id: usize) -> &[(usize, f64)] {
        &self.adjacency[id]
    }

    pub fn inertial_nodes(&self) -> Vec<usize> {
        self.ids_where(|n| n.kind.is_inertial())
    }

    pub fn vsg_nodes(&self) -> Vec<usize> {
        self.ids_where(|n| n.kind.is_vsg())
    }

    pub fn generator_nodes(&self) -> Vec<usize> {
        self.ids_where(|n| matches!(n.kind, NodeKind::Generator { .. }))
    }

    pub fn load_nodes(&self) -> Vec<usize> {
        self.ids_where(|n| matches!(n.kind, NodeKind::Load))
    }

    fn ids_where(&self, pred: impl Fn(&Node) -> bool) -> Vec<usize> {
        self.nodes.iter().filter(|n| pred(n)).map(|n| n.id).collect()
    }

    pub fn total_damping(&self) -> f64 {
        self.nodes.iter().map(|n| n.damping).sum()
    }

    /// Sum of line susceptances incident to `id`; the centrality measure
    /// used to rank fault locations.
    pub fn weighted_degree(&self, id: usize) -> f64 {
        self.adjacency[id].iter().map(|&(_, b)| b).sum()
    }

    /// Distinct, non-empty area labels in first-appearance order.
    pub fn areas(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for node in &self.nodes {
            if !node.area.is_empty() && !out.iter().any(|a| a == &node.area) {
                out.push(node.area.clone());
            }
        }
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self, GridError> {
        let raw: RawGrid = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&RawGrid::from(self)).expect("grid serialization")
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GridError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        Ok(std::fs::write(path, self.to_json_string())?)
    }

    /// Hex SHA-256 of the canonical (compact, id-ordered) JSON form.
    /// Recorded in run reports so outputs can be traced to exact inputs.
    pub fn sha256_hex(&self) -> String {
        let compact = serde_json::to_string(&RawGrid::from(self)).expect("grid serialization");
        let digest = Sha256::digest(compact.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_positive(node: usize, param: &'static str, value: f64) -> Result<(), GridError> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(GridError::BadParameter { node, param, value })
    }
}

fn check_nonnegative(node: usize, param: &'static str, value: f64) -> Result<(), GridError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(GridError::BadParameter { node, param, value })
    }
}

pub fn mw_to_pu(mw: f64, base_mva: f64) -> f64 {
    mw / base_mva
}

/// Draw in [0, 1) from the high 53 bits of a `u64`, so the value stream is
/// pinned to the generator and not to any distribution crate's rounding.
pub(crate) fn uniform53(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0f64 / (1u64 << 53) as f64)
}

/// One independent ChaCha8 stream per node id: draws depend only on
/// `(seed, id)`, never on node ordering or on how many nodes draw.
fn node_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// Redraw machine parameters the way the synthetic test system is set up:
/// every generator gets inertia `m ~ U[0.1, 1.1]` and damping `d = 0.3 m`.
/// Loads and existing VSGs are left untouched; convert generators after
/// sampling with [`promote_to_vsg`] to obtain adaptive machines whose floor
/// is tied to the drawn inertia.
pub fn sample_machine_params(grid: &Grid, seed: u64) -> Grid {
    let nodes = grid
        .nodes
        .iter()
        .map(|node| {
            let mut node = node.clone();
            if let NodeKind::Generator { inertia } = &mut node.kind {
                let m = M_DRAW_MIN + M_DRAW_SPAN * uniform53(&mut node_rng(seed, node.id));
                *inertia = m;
                node.damping = D_OVER_M * m;
            }
            node
        })
        .collect();
    Grid::new(grid.frequency_base_hz, nodes, grid.lines.clone())
        .expect("resampling preserves grid validity")
}

/// Convert the listed generators to VSGs with floor `m_min_rule * m`,
/// keeping power and damping. The conversion preserves every other node,
/// so the constant-inertia baseline and the adaptive variant differ only
/// in the listed nodes' dynamics.
pub fn promote_to_vsg(
    grid: &Grid,
    ids: &[usize],
    alpha: f64,
    beta: f64,
    m_min_rule: f64,
) -> Result<Grid, GridError> {
    check_nonnegative(usize::MAX, "alpha", alpha).map_err(|_| GridError::BadParameter {
        node: usize::MAX,
        param: "alpha",
        value: alpha,
    })?;
    check_nonnegative(usize::MAX, "beta", beta)?;
    check_positive(usize::MAX, "m_min_rule", m_min_rule)?;

    let mut nodes = grid.nodes.clone();
    for &id in ids {
        let node = nodes.get_mut(id).ok_or(GridError::UnknownNode { index: 0, id })?;
        match &node.kind {
            NodeKind::Generator { inertia } => {
                node.kind = NodeKind::Vsg(VsgParams {
                    m_min: m_min_rule * inertia,
                    alpha,
                    beta,
                });
            }
            other => {
                return Err(GridError::NotAGenerator {
                    id,
                    kind: other.name(),
                })
            }
        }
    }
    Grid::new(grid.frequency_base_hz, nodes, grid.lines.clone())
}

/// Pick `count` generator ids uniformly without replacement, deterministic
/// in `seed`. Uses a dedicated stream so it never collides with per-node
/// parameter draws.
pub fn pick_random_generators(grid: &Grid, count: usize, seed: u64) -> Vec<usize> {
    let mut pool = grid.generator_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let count = count.min(pool.len());
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        // Unbiased index by rejection on the top multiple of the pool size.
        let n = pool.len() as u64;
        let zone = u64::MAX - u64::MAX % n;
        let idx = loop {
            let r = rng.next_u64();
            if r < zone {
                break (r % n) as usize;
            }
        };
        picked.push(pool.swap_remove(idx));
    }
    picked.sort_unstable();
    picked
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    frequency_base_hz: f64,
    nodes: Vec<RawNode>,
    lines: Vec<RawLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: usize,
    kind: RawKind,
    #[serde(rename = "P")]
    power: f64,
    #[serde(rename = "d")]
    damping: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    area: String,
}

#[derive(Serialize, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum RawKind {
    Generator,
    Load,
    Vsg,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    from: usize,
    to: usize,
    b: f64,
}

impl TryFrom<RawGrid> for Grid {
    type Error = GridError;

    fn try_from(raw: RawGrid) -> Result<Self, GridError> {
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for rn in raw.nodes {
            let id = rn.id;
            let kind_name = match rn.kind {
                RawKind::Generator => "generator",
                RawKind::Load => "load",
                RawKind::Vsg => "vsg",
            };
            let reject = |param: &'static str, present: bool| {
                if present {
                    Err(GridError::UnexpectedParameter {
                        node: id,
                        kind: kind_name,
                        param,
                    })
                } else {
                    Ok(())
                }
            };
            let require = |param: &'static str, value: Option<f64>| {
                value.ok_or(GridError::MissingParameter {
                    node: id,
                    kind: kind_name,
                    param,
                })
            };
            let kind = match rn.kind {
                RawKind::Generator => {
                    reject("m_min", rn.m_min.is_some())?;
                    reject("alpha", rn.alpha.is_some())?;
                    reject("beta", rn.beta.is_some())?;
                    NodeKind::Generator {
                        inertia: require("m", rn.m)?,
                    }
                }
                RawKind::Load => {
                    reject("m", rn.m.is_some())?;
                    reject("m_min", rn.m_min.is_some())?;
                    reject("alpha", rn.alpha.is_some())?;
                    reject("beta", rn.beta.is_some())?;
                    NodeKind::Load
                }
                RawKind::Vsg => {
                    reject("m", rn.m.is_some())?;
                    NodeKind::Vsg(VsgParams {
                        m_min: require("m_min", rn.m_min)?,
                        alpha: require("alpha", rn.alpha)?,
                        beta: require("beta", rn.beta)?,
                    })
                }
            };
            nodes.push(Node {
                id,
                kind,
                power: rn.power,
                damping: rn.damping,
                area: rn.area,
            });
        }
        let lines = raw
            .lines
            .into_iter()
            .map(|rl| Line {
                from: rl.from,
                to: rl.to,
                b: rl.b,
            })
            .collect();
        Grid::new(raw.frequency_base_hz, nodes, lines)
    }
}

impl From<&Grid> for RawGrid {
    fn from(grid: &Grid) -> Self {
        let nodes = grid
            .nodes
            .iter()
            .map(|node| {
                let (kind, m, m_min, alpha, beta) = match &node.kind {
                    NodeKind::Generator { inertia } => {
                        (RawKind::Generator, Some(*inertia), None, None, None)
                    }
                    NodeKind::Load => (RawKind::Load, None, None, None, None),
                    NodeKind::Vsg(v) => {
                        (RawKind::Vsg, None, Some(v.m_min), Some(v.alpha), Some(v.beta))
                    }
                };
                RawNode {
                    id: node.id,
                    kind,
                    power: node.power,
                    damping: node.damping,
                    m,
                    m_min,
                    alpha,
                    beta,
                    area: node.area.clone(),
                }
            })
            .collect();
        let lines = grid
            .lines
            .iter()
            .map(|l| RawLine {
                from: l.from,
                to: l.to,
                b: l.b,
            })
            .collect();
        RawGrid {
            frequency_base_hz: grid.frequency_base_hz,
            nodes,
            lines,
        }
    }
}
