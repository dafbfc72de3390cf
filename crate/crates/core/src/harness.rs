//! Experiment orchestration: JSON scenario configs resolved into concrete
//! runs, α-β sweeps, per-generator fault campaigns and placement
//! comparisons, all parallel over scenarios and deterministic in output.
//!
//! Every experiment compares an adaptive variant against the same grid
//! with constant inertia. When the config promotes generators to VSGs,
//! the constant case is simply the unpromoted grid, so each promoted
//! machine keeps its original inertia and the VSG floor is
//! `m_min_rule` times that value. VSGs already present in the grid file
//! are frozen at their floor in the constant case, the only inertia they
//! declare.
//!
//! Parallelism lives here and only here: scenarios run single-threaded on
//! a scenario-level pool, results are reduced in task order, and emitted
//! CSV bytes do not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{integrate, DynamicsError, Fault, IntegrateOptions, Trajectory, VsgPolicy};
use crate::grid::{mw_to_pu, pick_random_generators, promote_to_vsg, sample_machine_params};
use crate::grid::{Grid, GridError, NodeKind, VsgParams};
use crate::metrics::{compute_report, ratio_report, MetricsError, MetricsOptions, MetricsReport};

pub const DEFAULT_M_MIN_RULE: f64 = 1.0 / 3.0;
pub const DEFAULT_BASE_MVA: f64 = 100.0;
/// Default fault rule: lose 1 pu on every generator injecting at least
/// 1 pu, the 100 MW convention on a 100 MVA base.
pub const DEFAULT_FAULT_THRESHOLD_P: f64 = 1.0;
pub const DEFAULT_FAULT_DELTA_P: f64 = -1.0;
/// Default sweep axes: log-spaced over [0.1, 50] pu at 12 points, with
/// the nearest points snapped onto the two reference settings 5 and 10 pu
/// so those columns are always sampled exactly.
pub const DEFAULT_AXIS_RANGE: (f64, f64) = (0.1, 50.0);
pub const DEFAULT_AXIS_POINTS: usize = 12;
pub const AXIS_ANCHORS: [f64; 2] = [5.0, 10.0];
/// Equal-inertia-budget tolerance for placement comparisons.
pub const BUDGET_TOL: f64 = 1e-9;
/// Ratio metrics emitted by sweeps, campaigns and placement tables.
pub const RATIO_METRICS: [&str; 4] = ["l2_freq", "l2_rocof", "e_rot", "t_sync"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("no generator satisfies the fault rule")]
    NoQualifyingFaults,
    #[error("inertia budgets differ: {candidate} vs {reference}")]
    InertiaBudgetMismatch { candidate: f64, reference: f64 },
    #[error("scenario {id}: {source}")]
    Scenario {
        id: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl HarnessError {
    fn tag(self, id: &str) -> Self {
        HarnessError::Scenario {
            id: id.to_string(),
            source: Box::new(self),
        }
    }
}

/// Global value or a per-node-id map (JSON object keys are node ids).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Global(f64),
    PerNode(BTreeMap<String, f64>),
}

impl ParamValue {
    fn for_node(&self, id: usize) -> Option<f64> {
        match self {
            ParamValue::Global(v) => Some(*v),
            ParamValue::PerNode(map) => map.get(&id.to_string()).copied(),
        }
    }
}

/// Which generators become VSGs: an explicit id list, a seeded random
/// fraction of the generator fleet, or every generator in one area.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VsgSelection {
    Ids { ids: Vec<usize> },
    Fraction { fraction: f64 },
    Area { area: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    #[default]
    Plain,
    Deadband {
        epsilon: f64,
    },
    /// Start (and later reset) the inertia at `m_reset`; defaults to each
    /// machine's constant-case inertia when omitted.
    Rearm {
        #[serde(default)]
        band: Option<f64>,
        #[serde(default)]
        hold: Option<f64>,
        #[serde(default)]
        m_reset: Option<ParamValue>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    pub node: usize,
    /// Power step in pu; exactly one of `delta_p` and `delta_mw`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_mw: Option<f64>,
}

impl FaultConfig {
    fn resolve(&self, base_mva: f64) -> Result<Fault, HarnessError> {
        let delta = match (self.delta_p, self.delta_mw) {
            (Some(p), None) => p,
            (None, Some(mw)) => mw_to_pu(mw, base_mva),
            _ => {
                return Err(HarnessError::Config(
                    "fault needs exactly one of delta_p and delta_mw".into(),
                ))
            }
        };
        Ok(Fault::new(self.node, delta))
    }
}

fn default_m_min_rule() -> f64 {
    DEFAULT_M_MIN_RULE
}
fn default_t_end() -> f64 {
    120.0
}
fn default_sample_dt() -> f64 {
    1e-3
}
fn default_rtol() -> f64 {
    1e-10
}
fn default_atol() -> f64 {
    1e-12
}
fn default_base_mva() -> f64 {
    DEFAULT_BASE_MVA
}

/// One experiment: a grid file plus everything needed to turn it into a
/// concrete `(Grid, Fault, VsgPolicy)` triple deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Grid JSON, relative paths resolved against the config file.
    pub grid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Redraw generator inertia/damping from the seed before promotion.
    #[serde(default)]
    pub resample_machines: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vsg: Option<VsgSelection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<ParamValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<ParamValue>,
    /// VSG floor as a fraction of the promoted machine's inertia.
    #[serde(default = "default_m_min_rule")]
    pub m_min_rule: f64,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultConfig>,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_sample_dt")]
    pub sample_dt: f64,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    #[serde(default = "default_atol")]
    pub atol: f64,
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
}

impl Default for ScenarioConfig {
    /// The same defaults serde fills in, with an empty grid path.
    fn default() -> Self {
        serde_json::from_str(r#"{"grid": ""}"#).expect("scenario defaults")
    }
}

impl ScenarioConfig {
    pub fn integrate_options(&self) -> IntegrateOptions {
        IntegrateOptions {
            t_end: self.t_end,
            sample_dt: self.sample_dt,
            rtol: self.rtol,
            atol: self.atol,
            ..IntegrateOptions::default()
        }
    }

    fn label(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            let stem = Path::new(&self.grid)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "grid".into());
            format!("{stem}-s{}", self.seed)
        })
    }
}

/// A scenario made concrete: the adaptive grid, its constant-inertia
/// counterpart, and the run parameters shared by both.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub id: String,
    pub adaptive: Grid,
    pub constant: Grid,
    pub promoted: Vec<usize>,
    pub fault: Option<Fault>,
    pub policy: VsgPolicy,
    pub opts: IntegrateOptions,
    pub seed: u64,
    /// Hash of the adaptive grid, the provenance key for every output row.
    pub grid_hash: String,
}

pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn config_sha256(path: &Path) -> Result<String, HarnessError> {
    let text = std::fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let digest = Sha256::digest(&text);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Load the grid named by the config and apply the seeded machine redraw;
/// promotion happens later so sweeps can reuse this base across cells.
pub fn load_base_grid(config: &ScenarioConfig, base_dir: &Path) -> Result<Grid, HarnessError> {
    let path = Path::new(&config.grid);
    let path = if path.is_absolute() {
        path.to_path_buf()
    } else {
        base_dir.join(path)
    };
    let grid = Grid::from_path(&path)?;
    Ok(if config.resample_machines {
        sample_machine_params(&grid, config.seed)
    } else {
        grid
    })
}

/// Constant-inertia counterpart: promoted nodes are represented by the
/// base grid itself, and pre-existing VSGs become plain machines at their
/// floor.
fn constant_variant(base: &Grid) -> Result<Grid, GridError> {
    let nodes = base
        .nodes()
        .iter()
        .map(|node| {
            let mut node = node.clone();
            if let NodeKind::Vsg(v) = &node.kind {
                node.kind = NodeKind::Generator { inertia: v.m_min };
            }
            node
        })
        .collect();
    Grid::new(base.frequency_base_hz(), nodes, base.lines().to_vec())
}

fn selection_ids(
    grid: &Grid,
    selection: &VsgSelection,
    seed: u64,
) -> Result<Vec<usize>, HarnessError> {
    match selection {
        VsgSelection::Ids { ids } => {
            let mut ids = ids.clone();
            ids.sort_unstable();
            ids.dedup();
            Ok(ids)
        }
        VsgSelection::Fraction { fraction } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(HarnessError::Config(format!(
                    "vsg fraction {fraction} outside [0, 1]"
                )));
            }
            let count = (fraction * grid.generator_nodes().len() as f64).round() as usize;
            Ok(pick_random_generators(grid, count, seed))
        }
        VsgSelection::Area { area } => Ok(grid
            .generator_nodes()
            .into_iter()
            .filter(|&id| grid.node(id).area == *area)
            .collect()),
    }
}

fn param_for(
    value: &Option<ParamValue>,
    name: &str,
    id: usize,
) -> Result<f64, HarnessError> {
    value
        .as_ref()
        .and_then(|v| v.for_node(id))
        .ok_or_else(|| HarnessError::Config(format!("promoting node {id} needs {name}")))
}

/// Turn a config plus a pre-loaded base grid into a concrete scenario.
pub fn resolve_with_base(
    config: &ScenarioConfig,
    base: &Grid,
) -> Result<ResolvedScenario, HarnessError> {
    let id = config.label();
    let inner = || -> Result<ResolvedScenario, HarnessError> {
        let promoted = match &config.vsg {
            Some(selection) => selection_ids(base, selection, config.seed)?,
            None => Vec::new(),
        };

        let mut adaptive = base.clone();
        for &node in &promoted {
            let alpha = param_for(&config.alpha, "alpha", node)?;
            let beta = param_for(&config.beta, "beta", node)?;
            adaptive = promote_to_vsg(&adaptive, &[node], alpha, beta, config.m_min_rule)?;
        }
        // Global or per-node overrides also retarget VSGs shipped in the
        // grid file, so one sweep config drives both promotion styles.
        let overrides: Vec<(usize, VsgParams)> = adaptive
            .nodes()
            .iter()
            .filter(|n| !promoted.contains(&n.id))
            .filter_map(|n| {
                let v = n.vsg()?;
                let alpha = config.alpha.as_ref().and_then(|a| a.for_node(n.id));
                let beta = config.beta.as_ref().and_then(|b| b.for_node(n.id));
                if alpha.is_none() && beta.is_none() {
                    return None;
                }
                Some((
                    n.id,
                    VsgParams {
                        m_min: v.m_min,
                        alpha: alpha.unwrap_or(v.alpha),
                        beta: beta.unwrap_or(v.beta),
                    },
                ))
            })
            .collect();
        if !overrides.is_empty() {
            let nodes = adaptive
                .nodes()
                .iter()
                .map(|node| {
                    let mut node = node.clone();
                    if let Some((_, params)) = overrides.iter().find(|(id, _)| *id == node.id) {
                        node.kind = NodeKind::Vsg(params.clone());
                    }
                    node
                })
                .collect();
            adaptive = Grid::new(adaptive.frequency_base_hz(), nodes, adaptive.lines().to_vec())?;
        }

        let constant = constant_variant(base)?;
        let policy = resolve_policy(&config.policy, &adaptive, &constant)?;
        let fault = config
            .fault
            .as_ref()
            .map(|f| f.resolve(config.base_mva))
            .transpose()?;

        Ok(ResolvedScenario {
            id: id.clone(),
            grid_hash: adaptive.sha256_hex(),
            adaptive,
            constant,
            promoted,
            fault,
            policy,
            opts: config.integrate_options(),
            seed: config.seed,
        })
    };
    inner().map_err(|e| e.tag(&id))
}

pub fn resolve(config: &ScenarioConfig, base_dir: &Path) -> Result<ResolvedScenario, HarnessError> {
    let base = load_base_grid(config, base_dir)?;
    resolve_with_base(config, &base)
}

fn resolve_policy(
    config: &PolicyConfig,
    adaptive: &Grid,
    constant: &Grid,
) -> Result<VsgPolicy, HarnessError> {
    Ok(match config {
        PolicyConfig::Plain => VsgPolicy::Plain,
        PolicyConfig::Deadband { epsilon } => VsgPolicy::Deadband { epsilon: *epsilon },
        PolicyConfig::Rearm { band, hold, m_reset } => {
            let defaults = VsgPolicy::rearm(Vec::new());
            let VsgPolicy::Rearm {
                band: default_band,
                hold: default_hold,
                ..
            } = defaults
            else {
                unreachable!()
            };
            let reset = adaptive
                .vsg_nodes()
                .into_iter()
                .map(|id| {
                    if let Some(value) = m_reset.as_ref().and_then(|v| v.for_node(id)) {
                        return value;
                    }
                    match &constant.node(id).kind {
                        NodeKind::Generator { inertia } => *inertia,
                        _ => unreachable!("constant variant has no VSGs"),
                    }
                })
                .collect();
            VsgPolicy::Rearm {
                band: band.unwrap_or(default_band),
                hold: hold.unwrap_or(default_hold),
                m_reset: reset,
            }
        }
    })
}

#[derive(Debug)]
pub struct RunOutput {
    pub id: String,
    pub trajectory: Trajectory,
    pub report: MetricsReport,
}

fn run(grid: &Grid, rs: &ResolvedScenario, id: String) -> Result<RunOutput, HarnessError> {
    let inner = || -> Result<RunOutput, HarnessError> {
        let policy = if grid.vsg_nodes().is_empty() {
            VsgPolicy::Plain
        } else {
            rs.policy.clone()
        };
        let trajectory = integrate(grid, rs.fault.as_ref(), &policy, &rs.opts)?;
        let report = compute_report(&trajectory, &MetricsOptions::default())?;
        Ok(RunOutput {
            id: id.clone(),
            trajectory,
            report,
        })
    };
    inner().map_err(|e| e.tag(&id))
}

/// Integrate the adaptive variant and compute its metrics.
pub fn run_scenario(rs: &ResolvedScenario) -> Result<RunOutput, HarnessError> {
    run(&rs.adaptive, rs, rs.id.clone())
}

/// Integrate the constant-inertia counterpart under the same fault.
pub fn run_constant(rs: &ResolvedScenario) -> Result<RunOutput, HarnessError> {
    run(&rs.constant, rs, format!("{}-const", rs.id))
}

/// Scenario-level pool: `jobs` workers, reduction in task order, so
/// output bytes never depend on scheduling.
fn run_parallel<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send + Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("scenario pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Explicit axis values or a log-spaced description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisSpec {
    List(Vec<f64>),
    Log { min: f64, max: f64, points: usize },
}

/// Log-spaced axis with the nearest points snapped onto the reference
/// anchors, so 5 pu and 10 pu columns exist at every resolution.
fn log_axis(min: f64, max: f64, points: usize) -> Result<Vec<f64>, HarnessError> {
    if !(min > 0.0 && max > min && points >= 2) {
        return Err(HarnessError::Config(format!(
            "log axis needs 0 < min < max and at least 2 points, got [{min}, {max}] x{points}"
        )));
    }
    let mut axis: Vec<f64> = (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            (min.ln() + t * (max.ln() - min.ln())).exp()
        })
        .collect();
    for anchor in AXIS_ANCHORS {
        if anchor < min || anchor > max || axis.contains(&anchor) {
            continue;
        }
        let nearest = axis
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (a.ln() - anchor.ln())
                    .abs()
                    .total_cmp(&(b.ln() - anchor.ln()).abs())
            })
            .map(|(i, _)| i)
            .expect("nonempty axis");
        axis[nearest] = anchor;
    }
    axis.sort_by(f64::total_cmp);
    Ok(axis)
}

pub fn axis_values(spec: Option<&AxisSpec>) -> Result<Vec<f64>, HarnessError> {
    match spec {
        None => log_axis(DEFAULT_AXIS_RANGE.0, DEFAULT_AXIS_RANGE.1, DEFAULT_AXIS_POINTS),
        Some(AxisSpec::List(values)) => {
            if values.is_empty() {
                return Err(HarnessError::Config("axis list is empty".into()));
            }
            Ok(values.clone())
        }
        Some(AxisSpec::Log { min, max, points }) => log_axis(*min, *max, *points),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scenario: ScenarioConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<AxisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<AxisSpec>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub metric: &'static str,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub constant: MetricsReport,
    /// One report per (alpha-major) cell that ran to completion.
    pub cells: Vec<(f64, f64, MetricsReport)>,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<RunFailure>,
    pub converged: bool,
}

/// One constant-inertia run plus |α|x|β| adaptive runs; ratios are
/// adaptive/constant, below 1 meaning adaptation helps.
pub fn sweep_alpha_beta(
    config: &SweepConfig,
    base_dir: &Path,
    jobs: usize,
) -> Result<SweepOutcome, HarnessError> {
    let alphas = axis_values(config.alphas.as_ref())?;
    let betas = axis_values(config.betas.as_ref())?;
    let base = load_base_grid(&config.scenario, base_dir)?;

    let template = resolve_with_base(
        &ScenarioConfig {
            vsg: None,
            alpha: None,
            beta: None,
            ..config.scenario.clone()
        },
        &base,
    )?;
    let constant = run_constant(&template)?;

    let cells: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    // Workers hand back reports only; trajectories are dropped inside the
    // closure so peak memory stays at one trajectory per worker.
    let results = run_parallel(jobs, cells, |&(alpha, beta)| {
        let cell = ScenarioConfig {
            id: Some(format!("{}-a{alpha}-b{beta}", config.scenario.label())),
            alpha: Some(ParamValue::Global(alpha)),
            beta: Some(ParamValue::Global(beta)),
            ..config.scenario.clone()
        };
        let out = resolve_with_base(&cell, &base)
            .and_then(|rs| run_scenario(&rs))
            .map(|out| out.report);
        (alpha, beta, out)
    });

    let mut outcome = SweepOutcome {
        alphas,
        betas,
        converged: constant.report.converged,
        constant: constant.report,
        cells: Vec::new(),
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (alpha, beta, result) in results {
        match result {
            Ok(report) => {
                let ratios = ratio_report(&report, &outcome.constant);
                let values = [
                    ratios.l2_freq,
                    ratios.l2_rocof,
                    ratios.e_rot,
                    ratios.t_sync,
                ];
                for (metric, value) in RATIO_METRICS.iter().zip(values) {
                    if let Some(ratio) = value {
                        outcome.rows.push(SweepRow {
                            alpha,
                            beta,
                            metric,
                            ratio,
                        });
                    }
                }
                outcome.converged &= report.converged;
                outcome.cells.push((alpha, beta, report));
            }
            Err(e) => {
                outcome.converged = false;
                outcome.failures.push(RunFailure {
                    id: format!("a{alpha}-b{beta}"),
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(outcome)
}

/// All node ids ordered by centrality, most central first. Weighted
/// degree Σ_j b_ij stands in for centrality: O(N), parameter-free, and
/// recorded with every row so the split is auditable.
pub fn centrality_order(grid: &Grid) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..grid.n_nodes()).collect();
    ids.sort_by(|&a, &b| {
        grid.weighted_degree(b)
            .total_cmp(&grid.weighted_degree(a))
            .then(a.cmp(&b))
    });
    ids
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub scenario: ScenarioConfig,
    /// Fault every conventional generator with `P >= threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_delta_mw: Option<f64>,
}

impl CampaignConfig {
    fn threshold(&self) -> Result<f64, HarnessError> {
        match (self.threshold_p, self.threshold_mw) {
            (Some(_), Some(_)) => Err(HarnessError::Config(
                "give threshold_p or threshold_mw, not both".into(),
            )),
            (Some(p), None) => Ok(p),
            (None, Some(mw)) => Ok(mw_to_pu(mw, self.scenario.base_mva)),
            (None, None) => Ok(DEFAULT_FAULT_THRESHOLD_P),
        }
    }

    fn delta(&self) -> Result<f64, HarnessError> {
        match (self.fault_delta_p, self.fault_delta_mw) {
            (Some(_), Some(_)) => Err(HarnessError::Config(
                "give fault_delta_p or fault_delta_mw, not both".into(),
            )),
            (Some(p), None) => Ok(p),
            (None, Some(mw)) => Ok(mw_to_pu(mw, self.scenario.base_mva)),
            (None, None) => Ok(DEFAULT_FAULT_DELTA_P),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CampaignRow {
    pub node: usize,
    /// Position in the centrality order, 0 = most central.
    pub rank: usize,
    pub centrality: f64,
    pub metric: &'static str,
    pub ratio: f64,
}

#[derive(Debug)]
pub struct CampaignOutcome {
    /// Faulted nodes, most central first.
    pub faults: Vec<usize>,
    pub rows: Vec<CampaignRow>,
    /// Adaptive and constant reports per fault, in fault order.
    pub reports: Vec<(String, MetricsReport)>,
    /// Per metric, the fraction of faults the adaptive variant improved.
    pub fraction_improved: BTreeMap<&'static str, f64>,
    pub failures: Vec<RunFailure>,
    pub converged: bool,
}

/// Conventional generators with `P >= threshold` in the adaptive grid,
/// ordered most central first.
fn qualifying_faults(adaptive: &Grid, threshold: f64) -> Vec<usize> {
    let rank_of = centrality_rank(adaptive);
    let mut nodes: Vec<usize> = adaptive
        .generator_nodes()
        .into_iter()
        .filter(|&id| adaptive.node(id).power >= threshold)
        .collect();
    nodes.sort_by_key(|&id| rank_of[id]);
    nodes
}

fn centrality_rank(grid: &Grid) -> Vec<usize> {
    let order = centrality_order(grid);
    let mut rank = vec![0; order.len()];
    for (pos, &id) in order.iter().enumerate() {
        rank[id] = pos;
    }
    rank
}

/// Fault each qualifying conventional generator in turn and compare the
/// adaptive variant against constant inertia under the identical fault.
pub fn fault_campaign(
    config: &CampaignConfig,
    base_dir: &Path,
    jobs: usize,
) -> Result<CampaignOutcome, HarnessError> {
    if config.scenario.fault.is_some() {
        return Err(HarnessError::Config(
            "campaigns derive faults from the rule; drop scenario.fault".into(),
        ));
    }
    let threshold = config.threshold()?;
    let delta = config.delta()?;
    let base = load_base_grid(&config.scenario, base_dir)?;
    let rs = resolve_with_base(&config.scenario, &base)?;

    let faults = qualifying_faults(&rs.adaptive, threshold);
    if faults.is_empty() {
        return Err(HarnessError::NoQualifyingFaults);
    }
    let rank_of = centrality_rank(&rs.adaptive);

    // Reports only; each worker holds at most one trajectory at a time.
    let results = run_parallel(jobs, faults.clone(), |&node| {
        let case = ResolvedScenario {
            id: format!("{}-f{node}", rs.id),
            fault: Some(Fault::new(node, delta)),
            ..rs.clone()
        };
        let out = run_scenario(&case).and_then(|adaptive| {
            let constant = run_constant(&case)?;
            Ok(((adaptive.id, adaptive.report), (constant.id, constant.report)))
        });
        (node, out)
    });

    let mut outcome = CampaignOutcome {
        faults,
        rows: Vec::new(),
        reports: Vec::new(),
        fraction_improved: BTreeMap::new(),
        failures: Vec::new(),
        converged: true,
    };
    let mut improved: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for (node, result) in results {
        match result {
            Ok(((adaptive_id, adaptive), (constant_id, constant))) => {
                let ratios = ratio_report(&adaptive, &constant);
                let values = [
                    ratios.l2_freq,
                    ratios.l2_rocof,
                    ratios.e_rot,
                    ratios.t_sync,
                ];
                for (metric, value) in RATIO_METRICS.iter().zip(values) {
                    if let Some(ratio) = value {
                        let (wins, total) = improved.entry(metric).or_insert((0, 0));
                        *total += 1;
                        *wins += usize::from(ratio < 1.0);
                        outcome.rows.push(CampaignRow {
                            node,
                            rank: rank_of[node],
                            centrality: rs.adaptive.weighted_degree(node),
                            metric,
                            ratio,
                        });
                    }
                }
                outcome.converged &= adaptive.converged && constant.converged;
                outcome.reports.push((adaptive_id, adaptive));
                outcome.reports.push((constant_id, constant));
            }
            Err(e) => {
                outcome.converged = false;
                outcome.failures.push(RunFailure {
                    id: format!("f{node}"),
                    error: e.to_string(),
                });
            }
        }
    }
    for (metric, (wins, total)) in improved {
        outcome
            .fraction_improved
            .insert(metric, wins as f64 / total as f64);
    }
    Ok(outcome)
}

/// One way of distributing VSGs over the generator fleet.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementVariant {
    pub name: String,
    pub vsg: VsgSelection,
    #[serde(default = "default_m_min_rule")]
    pub m_min_rule: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementConfig {
    /// Shared template; its own `vsg` field must be empty, the variants
    /// below define the placements.
    pub scenario: ScenarioConfig,
    pub candidate: PlacementVariant,
    pub reference: PlacementVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold_mw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault_delta_mw: Option<f64>,
    /// How many of the most central faulted nodes count as "central";
    /// defaults to half the fault list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub central_count: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlacementRow {
    pub node: usize,
    pub rank: usize,
    /// "central" or "peripheral" by the centrality split.
    pub group: &'static str,
    pub metric: &'static str,
    /// candidate / reference; below 1 means the candidate placement wins.
    pub ratio: f64,
}

#[derive(Debug)]
pub struct PlacementOutcome {
    pub faults: Vec<usize>,
    pub rows: Vec<PlacementRow>,
    pub reports: Vec<(String, MetricsReport)>,
    /// Per metric, median candidate/reference ratio over peripheral faults.
    pub peripheral_median: BTreeMap<&'static str, f64>,
    pub budget: f64,
    pub failures: Vec<RunFailure>,
    pub converged: bool,
}

fn vsg_budget(grid: &Grid) -> f64 {
    grid.vsg_nodes()
        .into_iter()
        .map(|id| grid.node(id).vsg().expect("vsg node").m_min)
        .sum()
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Run the identical fault campaign under two VSG placements with equal
/// inertia budgets and compare them fault by fault.
pub fn placement_compare(
    config: &PlacementConfig,
    base_dir: &Path,
    jobs: usize,
) -> Result<PlacementOutcome, HarnessError> {
    if config.scenario.vsg.is_some() {
        return Err(HarnessError::Config(
            "placement variants define the VSG sets; drop scenario.vsg".into(),
        ));
    }
    if config.scenario.fault.is_some() {
        return Err(HarnessError::Config(
            "placement campaigns derive faults from the rule; drop scenario.fault".into(),
        ));
    }
    let shared = CampaignConfig {
        scenario: config.scenario.clone(),
        threshold_p: config.threshold_p,
        threshold_mw: config.threshold_mw,
        fault_delta_p: config.fault_delta_p,
        fault_delta_mw: config.fault_delta_mw,
    };
    let threshold = shared.threshold()?;
    let delta = shared.delta()?;
    let base = load_base_grid(&config.scenario, base_dir)?;

    let variant = |v: &PlacementVariant| -> Result<ResolvedScenario, HarnessError> {
        resolve_with_base(
            &ScenarioConfig {
                id: Some(format!("{}-{}", config.scenario.label(), v.name)),
                vsg: Some(v.vsg.clone()),
                m_min_rule: v.m_min_rule,
                ..config.scenario.clone()
            },
            &base,
        )
    };
    let candidate = variant(&config.candidate)?;
    let reference = variant(&config.reference)?;

    let budget = vsg_budget(&candidate.adaptive);
    let reference_budget = vsg_budget(&reference.adaptive);
    if (budget - reference_budget).abs() > BUDGET_TOL {
        return Err(HarnessError::InertiaBudgetMismatch {
            candidate: budget,
            reference: reference_budget,
        });
    }

    // Fault only nodes that stay conventional under both placements, so
    // both variants see the same disturbance on the same machine.
    let rank_of = centrality_rank(&candidate.adaptive);
    let mut faults: Vec<usize> = qualifying_faults(&candidate.adaptive, threshold)
        .into_iter()
        .filter(|&id| {
            matches!(
                reference.adaptive.node(id).kind,
                NodeKind::Generator { .. }
            )
        })
        .collect();
    faults.sort_by_key(|&id| rank_of[id]);
    if faults.is_empty() {
        return Err(HarnessError::NoQualifyingFaults);
    }
    let central_count = config.central_count.unwrap_or(faults.len() / 2);

    // Reports only; each worker holds at most one trajectory at a time.
    let results = run_parallel(jobs, faults.clone(), |&node| {
        let fault = Some(Fault::new(node, delta));
        let run_variant = |rs: &ResolvedScenario| {
            run_scenario(&ResolvedScenario {
                id: format!("{}-f{node}", rs.id),
                fault,
                ..rs.clone()
            })
            .map(|out| (out.id, out.report))
        };
        let out = run_variant(&candidate).and_then(|c| Ok((c, run_variant(&reference)?)));
        (node, out)
    });

    let mut outcome = PlacementOutcome {
        faults,
        rows: Vec::new(),
        reports: Vec::new(),
        peripheral_median: BTreeMap::new(),
        budget,
        failures: Vec::new(),
        converged: true,
    };
    let mut peripheral: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for (idx, (node, result)) in results.into_iter().enumerate() {
        let group = if idx < central_count { "central" } else { "peripheral" };
        match result {
            Ok(((cand_id, cand), (refr_id, refr))) => {
                let ratios = ratio_report(&cand, &refr);
                let values = [
                    ratios.l2_freq,
                    ratios.l2_rocof,
                    ratios.e_rot,
                    ratios.t_sync,
                ];
                for (metric, value) in RATIO_METRICS.iter().zip(values) {
                    if let Some(ratio) = value {
                        if group == "peripheral" {
                            peripheral.entry(metric).or_default().push(ratio);
                        }
                        outcome.rows.push(PlacementRow {
                            node,
                            rank: rank_of[node],
                            group,
                            metric,
                            ratio,
                        });
                    }
                }
                outcome.converged &= cand.converged && refr.converged;
                outcome.reports.push((cand_id, cand));
                outcome.reports.push((refr_id, refr));
            }
            Err(e) => {
                outcome.converged = false;
                outcome.failures.push(RunFailure {
                    id: format!("f{node}"),
                    error: e.to_string(),
                });
            }
        }
    }
    for (metric, mut ratios) in peripheral {
        outcome
            .peripheral_median
            .insert(metric, median(&mut ratios));
    }
    Ok(outcome)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,beta,metric,ratio\n");
    for row in rows {
        writeln!(out, "{},{},{},{}", row.alpha, row.beta, row.metric, row.ratio).unwrap();
    }
    out
}

pub fn campaign_csv(rows: &[CampaignRow]) -> String {
    let mut out = String::from("node_id,rank,centrality,metric,ratio\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.node, row.rank, row.centrality, row.metric, row.ratio
        )
        .unwrap();
    }
    out
}

pub fn placement_csv(rows: &[PlacementRow]) -> String {
    let mut out = String::from("node_id,rank,group,metric,ratio\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.node, row.rank, row.group, row.metric, row.ratio
        )
        .unwrap();
    }
    out
}

pub fn metrics_csv(entries: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(MetricsReport::csv_header());
    out.push('\n');
    for (id, report) in entries {
        out.push_str(&report.csv_row(id));
        out.push('\n');
    }
    out
}
