//! End-to-end checks of the shipped grids, configs and solvers. One test
//! per criterion, each printing a single `acceptance N: pass` line (visible
//! under `--nocapture`), so a verbose run doubles as a short report. All
//! tolerances and budgets are pinned here, next to the assertions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use swingsim::dynamics::{self, Fault, IntegrateOptions, State, SyntheticChannel, Trajectory, VsgPolicy};
use swingsim::equilibrium::solve_fixed_point;
use swingsim::grid::{Grid, Node, NodeKind, VsgParams};
use swingsim::harness::{
    self, FaultConfig, ParamValue, ScenarioConfig, SweepConfig, VsgSelection,
};
use swingsim::metrics::{self, DEFAULT_SYNC_BAND};
use swingsim::stability::spectrum_union_check;
use swingsim::synth;

// 1: fixed points of seeded random grids.
const FIXED_POINT_RHS_TOL: f64 = 1e-10;
const FIXED_POINT_BUDGET_S: f64 = 10.0;
// 2: spectrum split of all-VSG grids.
const PAIRING_TOL: f64 = 1e-8;
const SPECTRUM_BUDGET_S: f64 = 30.0;
// 3: analytic oracles.
const EQUILIBRIUM_TOL: f64 = 1e-10;
const RELAXATION_TOL: f64 = 1e-6;
const ROCOF_ORACLE_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-6;
// 4: deadband-to-plain convergence order.
const DEADBAND_EXPONENT_BAND: f64 = 0.15;
// 5: terminal synchronization.
const TERMINAL_T_END: f64 = 200.0;
const TERMINAL_BAND: f64 = 1e-5;
const OMEGA_SYNC_TOL: f64 = 1e-6;
// 6: parameter-sweep trends.
const SPEARMAN_LIMIT: f64 = -0.8;
const DIAGONAL_VARIATION_LIMIT: f64 = 0.10;
const SWEEP_JOBS: usize = 4;
const SWEEP_BUDGET_S: f64 = 300.0;
// 7: response comparison at alpha = beta = 5.
const REARM_ROCOF_FACTOR: f64 = 2.0;
const REARM_FREQ_SLACK: f64 = 1.2;
// 8: placement comparison.
const PLACEMENT_WINS_REQUIRED: usize = 3;
// 9: solver robustness.
const TOLERANCE_HALVING_LIMIT: f64 = 1e-6;
const CROSS_CHECK_LIMIT: f64 = 1e-4;

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn configs_dir() -> PathBuf {
    data("configs")
}

fn pass(criterion: usize, detail: &str) {
    println!("acceptance {criterion}: pass - {detail}");
}

/// Max-norm over every block of a state (or state derivative).
fn state_max_norm(s: &State) -> f64 {
    s.theta
        .iter()
        .chain(&s.omega)
        .chain(&s.inertia)
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

#[test]
fn criterion_1_fixed_points_of_random_grids() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let n = synth::random_size(seed, 4, 40);
        let grid = synth::random_mixed_grid(seed, n);
        let fp = solve_fixed_point(&grid, None).expect("seeded grids solve");
        let rest = State {
            theta: fp.theta.clone(),
            omega: vec![0.0; grid.inertial_nodes().len()],
            inertia: grid
                .vsg_nodes()
                .iter()
                .map(|&i| grid.node(i).vsg().unwrap().m_min)
                .collect(),
        };
        let dot = dynamics::rhs(&grid, None, &rest, &VsgPolicy::Plain).unwrap();
        let norm = state_max_norm(&dot);
        assert!(
            norm < FIXED_POINT_RHS_TOL,
            "acceptance 1: fail - seed {seed} (n={n}) leaves |rhs| = {norm:e} at the fixed point"
        );
        worst = worst.max(norm);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < FIXED_POINT_BUDGET_S,
        "acceptance 1: fail - {elapsed:.1} s exceeds the {FIXED_POINT_BUDGET_S} s budget"
    );
    pass(1, &format!("20 grids, worst |rhs| {worst:.2e}, {elapsed:.2} s"));
}

#[test]
fn criterion_2_spectrum_splits_off_relaxation_modes() {
    let start = Instant::now();
    let mut worst_pairing = 0.0f64;
    let mut worst_abscissa = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let n = synth::random_size(seed, 3, 10);
        let grid = synth::random_all_vsg_grid(seed, n);
        let fp = solve_fixed_point(&grid, None).expect("seeded grids solve");
        let report = spectrum_union_check(&grid, &fp.theta, PAIRING_TOL).unwrap();
        assert!(
            report.union_holds,
            "acceptance 2: fail - seed {seed} (n={n}) pairs spectra only to {:e}",
            report.max_pairing_distance
        );
        assert!(
            report.spectral_abscissa < 0.0,
            "acceptance 2: fail - seed {seed} (n={n}) has abscissa {:e}",
            report.spectral_abscissa
        );
        worst_pairing = worst_pairing.max(report.max_pairing_distance);
        worst_abscissa = worst_abscissa.max(report.spectral_abscissa);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < SPECTRUM_BUDGET_S,
        "acceptance 2: fail - {elapsed:.1} s exceeds the {SPECTRUM_BUDGET_S} s budget"
    );
    pass(
        2,
        &format!(
            "50 grids, worst pairing {worst_pairing:.2e}, abscissa <= {worst_abscissa:.3}, {elapsed:.2} s"
        ),
    );
}

#[test]
fn criterion_3_analytic_oracles() {
    // Two-bus equilibrium: P = +-0.5 over one b = 1 line pins the angle.
    let two_bus = Grid::from_path(data("grids/two_bus.json")).unwrap();
    let fp = solve_fixed_point(&two_bus, None).unwrap();
    let theta_err = (fp.theta[1] - (-0.5f64).asin()).abs();
    assert!(
        theta_err < EQUILIBRIUM_TOL,
        "acceptance 3: fail - two-bus angle off by {theta_err:e}"
    );

    // A lone VSG started above its floor relaxes as m_min + (m0 - m_min) e^{-beta t}.
    let lone = Grid::new(
        50.0,
        vec![Node {
            id: 0,
            kind: NodeKind::Vsg(VsgParams { m_min: 0.2, alpha: 5.0, beta: 5.0 }),
            power: 0.0,
            damping: 0.1,
            area: "a".into(),
        }],
        vec![],
    )
    .unwrap();
    let opts = IntegrateOptions {
        t_end: 0.2,
        sample_dt: 0.002,
        m_init: Some(vec![1.0]),
        ..IntegrateOptions::default()
    };
    let traj = dynamics::integrate(&lone, None, &VsgPolicy::Plain, &opts).unwrap();
    let last = traj.n_samples() - 1;
    assert_eq!(traj.times[last], 0.2);
    // 0.2 + 0.8 e^{-1} = 0.494304, quoted as 0.49430.
    let m_exact = 0.2 + 0.8 * (-1.0f64).exp();
    let m_err = (traj.vsg_inertia_at(last, 0) - m_exact).abs();
    assert!(
        m_err < RELAXATION_TOL,
        "acceptance 3: fail - inertia relaxation off by {m_err:e}"
    );

    // A power step delta on a machine at rest accelerates it at delta / m(0).
    let fault = Fault::new(1, -0.2);
    let opts = IntegrateOptions { t_end: 1.0, sample_dt: 0.01, ..IntegrateOptions::default() };
    let traj = dynamics::integrate(&two_bus, Some(&fault), &VsgPolicy::Plain, &opts).unwrap();
    let idx = traj.inertial_nodes.iter().position(|&i| i == 1).unwrap();
    let m0 = two_bus.node(1).vsg().unwrap().m_min;
    let rocof_err = (traj.rocof_at(0, idx) - fault.delta_p / m0).abs();
    assert!(
        rocof_err < ROCOF_ORACLE_TOL,
        "acceptance 3: fail - initial RoCoF off by {rocof_err:e}"
    );

    // Closed forms of a decaying exponential channel on the 1 ms grid:
    // omega - omega_sync = a e^{-lambda t} with a = 0.1, lambda = 0.5, m = 2
    // integrates to a^2/(2 lambda) = 0.01, a^2 lambda / 2 = 0.0025 and
    // m a = 0.2; a = 0.05, lambda = 0.3 leaves the 1 mHz band at 6.914 s.
    let times: Vec<f64> = (0..=120_000).map(|k| k as f64 * 1e-3).collect();
    let channel = |a: f64, lambda: f64, m: f64| SyntheticChannel {
        omega: times.iter().map(|&t| -0.08 + a * (-lambda * t).exp()).collect(),
        rocof: times.iter().map(|&t| -a * lambda * (-lambda * t).exp()).collect(),
        inertia: Some(m),
        area: "a".into(),
    };
    let traj = Trajectory::from_series(times.clone(), -0.08, vec![channel(0.1, 0.5, 2.0)]);
    let checks = [
        ("l2_freq", metrics::l2_freq(&traj, -0.08).unwrap(), 0.01),
        ("l2_rocof", metrics::l2_rocof(&traj).unwrap(), 0.0025),
        ("e_rot", metrics::e_rot(&traj).unwrap(), 0.2),
    ];
    for (name, got, want) in checks {
        assert!(
            (got - want).abs() < CLOSED_FORM_TOL,
            "acceptance 3: fail - {name} = {got} instead of {want}"
        );
    }
    let traj = Trajectory::from_series(times.clone(), -0.08, vec![channel(0.05, 0.3, 1.0)]);
    let t_sync = metrics::resync_time(&traj, -0.08, DEFAULT_SYNC_BAND).unwrap();
    assert!(
        (t_sync - 6.914).abs() < CLOSED_FORM_TOL,
        "acceptance 3: fail - t_sync = {t_sync} instead of 6.914"
    );

    pass(
        3,
        &format!(
            "angle {theta_err:.1e}, relaxation {m_err:.1e}, RoCoF {rocof_err:.1e}, closed forms to {CLOSED_FORM_TOL:.0e}"
        ),
    );
}

/// Sup-norm distance between two trajectories on the same sample grid.
fn sup_distance(a: &Trajectory, b: &Trajectory) -> f64 {
    assert_eq!(a.times, b.times);
    let over = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()))
    };
    over(&a.theta, &b.theta)
        .max(over(&a.omega, &b.omega))
        .max(over(&a.inertia, &b.inertia))
}

#[test]
fn criterion_4_deadband_deviation_is_linear_in_epsilon() {
    let grid = Grid::from_path(data("grids/two_bus.json")).unwrap();
    let fault = Fault::new(1, -0.2);
    let opts = IntegrateOptions { t_end: 20.0, sample_dt: 1e-3, ..IntegrateOptions::default() };
    let plain = dynamics::integrate(&grid, Some(&fault), &VsgPolicy::Plain, &opts).unwrap();

    let epsilons = [1e-3, 1e-4, 1e-5];
    let mut points = Vec::new();
    for &epsilon in &epsilons {
        let banded =
            dynamics::integrate(&grid, Some(&fault), &VsgPolicy::Deadband { epsilon }, &opts)
                .unwrap();
        let dev = sup_distance(&plain, &banded);
        assert!(dev > 0.0, "acceptance 4: fail - zero deviation at epsilon {epsilon:e}");
        points.push((epsilon.ln(), dev.ln()));
    }
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(sx, sy), (x, y)| (sx + x, sy + y));
    let (mx, my) = (mx / n, my / n);
    let slope = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum::<f64>();
    assert!(
        (slope - 1.0).abs() <= DEADBAND_EXPONENT_BAND,
        "acceptance 4: fail - fitted exponent {slope:.3} is not 1 within {DEADBAND_EXPONENT_BAND}"
    );
    pass(4, &format!("fitted deviation exponent {slope:.3} over eps 1e-3..1e-5"));
}

/// The three shipped grids with their reference faults and VSG sets.
fn shipped_scenarios(t_end: f64, sample_dt: f64) -> Vec<ScenarioConfig> {
    let scenario = |grid: &str, id: &str| ScenarioConfig {
        grid: data(grid).to_string_lossy().into_owned(),
        id: Some(id.into()),
        t_end,
        sample_dt,
        ..ScenarioConfig::default()
    };
    let mut two_bus = scenario("grids/two_bus.json", "two-bus");
    two_bus.fault = Some(FaultConfig { node: 1, delta_p: Some(-0.2), delta_mw: None });

    let mut rts = scenario("grids/rts96_like.json", "rts96");
    rts.vsg = Some(VsgSelection::Ids { ids: vec![1, 2, 10, 11, 19, 20] });
    rts.alpha = Some(ParamValue::Global(5.0));
    rts.beta = Some(ParamValue::Global(5.0));
    rts.fault = Some(FaultConfig { node: 1, delta_p: Some(-1.0), delta_mw: None });

    let mut barbell = scenario("grids/barbell.json", "barbell");
    barbell.vsg = Some(VsgSelection::Ids { ids: vec![8, 12] });
    barbell.alpha = Some(ParamValue::Global(5.0));
    barbell.beta = Some(ParamValue::Global(5.0));
    barbell.fault = Some(FaultConfig { node: 7, delta_p: Some(-1.0), delta_mw: None });

    vec![two_bus, rts, barbell]
}

#[test]
fn criterion_5_all_grids_synchronize_at_the_predicted_frequency() {
    let mut summary = Vec::new();
    for config in shipped_scenarios(TERMINAL_T_END, 0.01) {
        let id = config.id.clone().unwrap();
        let rs = harness::resolve(&config, Path::new("")).unwrap();
        let out = harness::run_scenario(&rs).unwrap();
        let traj = &out.trajectory;

        let predicted = rs.fault.as_ref().unwrap().delta_p / rs.adaptive.total_damping();
        let sync_err = (traj.omega_sync - predicted).abs();
        assert!(
            sync_err < OMEGA_SYNC_TOL,
            "acceptance 5: fail - {id} omega_sync off the power balance by {sync_err:e}"
        );

        let last = traj.n_samples() - 1;
        assert_eq!(traj.times[last], TERMINAL_T_END);
        let worst = (0..traj.n_nodes())
            .map(|i| (traj.omega_at(last, i) - traj.omega_sync).abs())
            .fold(0.0f64, f64::max);
        assert!(
            worst < TERMINAL_BAND,
            "acceptance 5: fail - {id} still |omega - omega_sync| = {worst:e} at t = {TERMINAL_T_END}"
        );
        summary.push(format!("{id} {worst:.1e}"));
    }
    pass(5, &format!("terminal deviations {}", summary.join(", ")));
}

/// Spearman rank correlation; the sampled axes produce no ties.
fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let den: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
    num / den
}

#[test]
fn criterion_6_sweep_reproduces_the_parameter_trends() {
    let start = Instant::now();
    let config: SweepConfig =
        harness::load_config(&configs_dir().join("sweep_rts96.json")).unwrap();
    let outcome = harness::sweep_alpha_beta(&config, &configs_dir(), SWEEP_JOBS).unwrap();
    assert!(
        outcome.converged && outcome.failures.is_empty(),
        "acceptance 6: fail - {} cells failed, converged = {}",
        outcome.failures.len(),
        outcome.converged
    );

    let mut ratio: BTreeMap<(&str, u64, u64), f64> = BTreeMap::new();
    let key = |v: f64| v.to_bits();
    for row in &outcome.rows {
        ratio.insert((row.metric, key(row.alpha), key(row.beta)), row.ratio);
    }
    let at = |metric: &str, a: f64, b: f64| ratio[&(metric, key(a), key(b))];
    let alphas = &outcome.alphas;
    let betas = &outcome.betas;
    let anchors = [5.0, 10.0];
    for anchor in anchors {
        assert!(alphas.contains(&anchor) && betas.contains(&anchor));
    }

    // (a) Frequency and resynchronization ratios fall with beta at the
    // anchored alphas; at vanishing alpha adaptation shuts off and the
    // column goes flat, so the anchors carry the trend check.
    let mut rhos = Vec::new();
    for metric in ["l2_freq", "t_sync"] {
        for &alpha in &anchors {
            let ys: Vec<f64> = betas.iter().map(|&b| at(metric, alpha, b)).collect();
            let rho = spearman(betas, &ys);
            assert!(
                rho < SPEARMAN_LIMIT,
                "acceptance 6: fail - {metric} vs beta at alpha {alpha}: rho = {rho:.3}"
            );
            rhos.push(rho);
        }
    }
    // (b) The RoCoF ratio falls with alpha at the anchored betas.
    for &beta in &anchors {
        let ys: Vec<f64> = alphas.iter().map(|&a| at("l2_rocof", a, beta)).collect();
        let rho = spearman(alphas, &ys);
        assert!(
            rho < SPEARMAN_LIMIT,
            "acceptance 6: fail - l2_rocof vs alpha at beta {beta}: rho = {rho:.3}"
        );
        rhos.push(rho);
    }

    // (c) The frequency ratio is a function of alpha/beta alone where the
    // relaxation outruns the machine oscillations: along every diagonal
    // with beta >= alpha, no cell strays far from the diagonal mean.
    let n = alphas.len();
    let mut worst_var = 0.0f64;
    for offset in 0..n {
        let vals: Vec<f64> = (0..n)
            .filter(|&i| i + offset < n)
            .map(|i| at("l2_freq", alphas[i], betas[i + offset]))
            .collect();
        if vals.len() < 4 {
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).abs()).fold(0.0f64, f64::max) / mean;
        assert!(
            var < DIAGONAL_VARIATION_LIMIT,
            "acceptance 6: fail - l2_freq varies {:.1}% along the beta = {:.2} alpha diagonal",
            100.0 * var,
            betas[offset] / alphas[0],
        );
        worst_var = worst_var.max(var);
    }

    // (d) At alpha = beta = 5 adaptation beats the constant dispatch on
    // every measure.
    for metric in ["l2_freq", "l2_rocof", "e_rot", "t_sync"] {
        let r = at(metric, 5.0, 5.0);
        assert!(
            r < 1.0,
            "acceptance 6: fail - {metric} ratio {r:.3} at alpha = beta = 5"
        );
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        elapsed < SWEEP_BUDGET_S,
        "acceptance 6: fail - {elapsed:.0} s exceeds the {SWEEP_BUDGET_S} s budget"
    );
    pass(
        6,
        &format!(
            "{} cells, worst rho {:.2}, worst diagonal variation {:.1}%, {elapsed:.0} s",
            outcome.cells.len(),
            rhos.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
            100.0 * worst_var
        ),
    );
}

#[test]
fn criterion_7_adaptive_response_at_the_reference_setting() {
    let dir = configs_dir();
    let plain_cfg: ScenarioConfig =
        harness::load_config(&dir.join("fig_response_rts96.json")).unwrap();
    let rearm_cfg: ScenarioConfig =
        harness::load_config(&dir.join("fig_response_rts96_rearm.json")).unwrap();
    let faulted = plain_cfg.fault.as_ref().unwrap().node;

    let rs = harness::resolve(&plain_cfg, &dir).unwrap();
    let adaptive = harness::run_scenario(&rs).unwrap();
    let constant = harness::run_constant(&rs).unwrap();
    let rearm = harness::run_scenario(&harness::resolve(&rearm_cfg, &dir).unwrap()).unwrap();

    let t_adaptive = adaptive.report.t_sync.unwrap();
    let t_constant = constant.report.t_sync.unwrap();
    assert!(
        t_adaptive < t_constant,
        "acceptance 7: fail - adaptive resynchronizes in {t_adaptive} s vs constant {t_constant} s"
    );

    let plain_rocof = adaptive.trajectory.max_rocof_at_node(faulted);
    let rearm_rocof = rearm.trajectory.max_rocof_at_node(faulted);
    assert!(
        rearm_rocof * REARM_ROCOF_FACTOR < plain_rocof,
        "acceptance 7: fail - rearm only cuts the faulted-node RoCoF {plain_rocof:.3} to {rearm_rocof:.3}"
    );

    let freq_penalty = rearm.report.l2_freq.value / adaptive.report.l2_freq.value;
    assert!(
        freq_penalty < REARM_FREQ_SLACK,
        "acceptance 7: fail - rearm worsens l2_freq by {:.1}%",
        100.0 * (freq_penalty - 1.0)
    );

    let coherency_ratio =
        adaptive.report.coherency.unwrap().value / constant.report.coherency.unwrap().value;
    assert!(
        coherency_ratio < 1.0,
        "acceptance 7: fail - coherency ratio {coherency_ratio:.3}"
    );

    pass(
        7,
        &format!(
            "t_sync {t_adaptive:.2} vs {t_constant:.2} s, RoCoF cut {:.2}x, freq penalty +{:.1}%, coherency ratio {coherency_ratio:.2}",
            plain_rocof / rearm_rocof,
            100.0 * (freq_penalty - 1.0)
        ),
    );
}

fn run_placement(out_dir: &Path, jobs: usize) {
    let status = Command::new(env!("CARGO_BIN_EXE_swingsim"))
        .args(["placement", "--config"])
        .arg(configs_dir().join("placement_barbell.json"))
        .arg("--out")
        .arg(out_dir)
        .args(["--jobs", &jobs.to_string()])
        .status()
        .expect("spawn swingsim");
    assert!(
        status.success(),
        "acceptance 8: fail - placement with --jobs {jobs} exited with {status}"
    );
}

#[test]
fn criterion_8_peripheral_placement_wins_on_arm_faults() {
    let base = std::env::temp_dir().join("swingsim-acceptance-placement");
    let (dir1, dir8) = (base.join("j1"), base.join("j8"));
    for d in [&dir1, &dir8] {
        std::fs::create_dir_all(d).unwrap();
    }
    run_placement(&dir1, 1);
    run_placement(&dir8, 8);

    for name in ["campaign.csv", "metrics.csv"] {
        let a = std::fs::read(dir1.join(name)).unwrap();
        let b = std::fs::read(dir8.join(name)).unwrap();
        assert!(
            a == b,
            "acceptance 8: fail - {name} differs between --jobs 1 and --jobs 8"
        );
    }

    // group=peripheral rows are the arm faults; candidate/reference < 1
    // on at least three of the four measures for each of them.
    let text = std::fs::read_to_string(dir1.join("campaign.csv")).unwrap();
    let mut wins: BTreeMap<String, usize> = BTreeMap::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let [node, _rank, group, _metric, ratio] = cols[..] else {
            panic!("acceptance 8: fail - malformed row {line:?}")
        };
        if group == "peripheral" && ratio.parse::<f64>().unwrap() < 1.0 {
            *wins.entry(node.to_string()).or_default() += 1;
        }
    }
    assert!(!wins.is_empty(), "acceptance 8: fail - no peripheral faults in the campaign");
    for (node, count) in &wins {
        assert!(
            *count >= PLACEMENT_WINS_REQUIRED,
            "acceptance 8: fail - arm fault at node {node} wins only {count} of 4 measures"
        );
    }
    let summary: Vec<String> =
        wins.iter().map(|(node, count)| format!("node {node}: {count}/4")).collect();
    pass(8, &format!("byte-identical outputs, {}", summary.join(", ")));
}

/// Relative difference with an absolute floor for values at zero.
fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn criterion_9_metrics_are_solver_and_sampling_robust() {
    let mut worst_change = 0.0f64;
    let mut worst_cross = 0.0f64;
    for config in [
        harness::load_config::<ScenarioConfig>(&configs_dir().join("simulate_two_bus.json"))
            .unwrap(),
        harness::load_config::<ScenarioConfig>(&configs_dir().join("fig_response_rts96.json"))
            .unwrap(),
    ] {
        let id = config.id.clone().unwrap_or_default();
        let rs = harness::resolve(&config, &configs_dir()).unwrap();
        let coarse = harness::run_scenario(&rs).unwrap().report;

        let mut halved = rs.clone();
        halved.opts.rtol /= 2.0;
        halved.opts.atol /= 2.0;
        let fine = harness::run_scenario(&halved).unwrap().report;

        let mut changes = vec![
            ("l2_freq", rel_diff(coarse.l2_freq.value, fine.l2_freq.value)),
            ("l2_rocof", rel_diff(coarse.l2_rocof.value, fine.l2_rocof.value)),
            ("e_rot", rel_diff(coarse.e_rot.value, fine.e_rot.value)),
            ("t_sync", rel_diff(coarse.t_sync.unwrap(), fine.t_sync.unwrap())),
            ("max_rocof", rel_diff(coarse.max_rocof, fine.max_rocof)),
        ];
        if let (Some(c), Some(f)) = (&coarse.coherency, &fine.coherency) {
            changes.push(("coherency", rel_diff(c.value, f.value)));
        }
        for (name, change) in changes {
            assert!(
                change < TOLERANCE_HALVING_LIMIT,
                "acceptance 9: fail - {id} {name} moves by {change:e} when tolerances halve"
            );
            worst_change = worst_change.max(change);
        }

        let mut integrals = vec![&coarse.l2_freq, &coarse.l2_rocof, &coarse.e_rot];
        if let Some(c) = &coarse.coherency {
            integrals.push(c);
        }
        for metric in integrals {
            let cross = metric.cross_check_rel.expect("solver quadrature is present");
            assert!(
                cross < CROSS_CHECK_LIMIT,
                "acceptance 9: fail - {id} quadrature and trapezoid disagree by {cross:e}"
            );
            worst_cross = worst_cross.max(cross);
        }
    }
    pass(
        9,
        &format!("worst halving change {worst_change:.1e}, worst cross-check {worst_cross:.1e}"),
    );
}
