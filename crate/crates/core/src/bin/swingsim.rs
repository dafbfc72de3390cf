//! Command-line front end: single runs, sweeps, campaigns, placement
//! comparisons and fixed-point spectrum analysis, all driven by JSON
//! configs with a few common overrides. Every command writes its tables
//! next to a `report.json` carrying provenance (config hash, grid hash,
//! seed, worker count). Exit code 0 means every run converged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use swingsim::harness::{
    self, campaign_csv, config_sha256, load_config, metrics_csv, placement_csv, sweep_csv,
    CampaignConfig, HarnessError, ParamValue, PlacementConfig, ResolvedScenario, RunFailure,
    ScenarioConfig, SweepConfig,
};
use swingsim::metrics::MetricsReport;
use swingsim::stability;

#[derive(Parser)]
#[command(name = "swingsim", version, about = "Power-grid transients with adaptive virtual inertia")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory and metrics
    Simulate(Common),
    /// Ratio sweep over the VSG gains against the constant-inertia case
    Sweep(Common),
    /// Fault every qualifying generator; compare adaptive vs constant
    Campaign(Common),
    /// Compare two VSG placements under the identical fault campaign
    Placement(Common),
    /// Fixed point, linearization spectrum and stability margins
    Stability(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file for the subcommand
    #[arg(long)]
    config: PathBuf,
    /// Override: global VSG alpha [pu]
    #[arg(long)]
    alpha: Option<f64>,
    /// Override: global VSG beta [pu]
    #[arg(long)]
    beta: Option<f64>,
    /// Override: scenario seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override: integration horizon [s]
    #[arg(long)]
    t_end: Option<f64>,
    /// Override: output sampling step [s]
    #[arg(long)]
    sample_dt: Option<f64>,
    /// Output directory, created if missing
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenario-level worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Common {
    fn apply(&self, scenario: &mut ScenarioConfig) {
        if let Some(alpha) = self.alpha {
            scenario.alpha = Some(ParamValue::Global(alpha));
        }
        if let Some(beta) = self.beta {
            scenario.beta = Some(ParamValue::Global(beta));
        }
        if let Some(seed) = self.seed {
            scenario.seed = seed;
        }
        if let Some(t_end) = self.t_end {
            scenario.t_end = t_end;
        }
        if let Some(sample_dt) = self.sample_dt {
            scenario.sample_dt = sample_dt;
        }
    }

    fn config_dir(&self) -> PathBuf {
        self.config
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Sweep(c) => sweep(c),
        Command::Campaign(c) => campaign(c),
        Command::Placement(c) => placement(c),
        Command::Stability(c) => stability_cmd(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("swingsim: finished, but not every run converged");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("swingsim: {e}");
            ExitCode::FAILURE
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn write(out_dir: &Path, name: &str, contents: &str) -> Result<String, HarnessError> {
    fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = out_dir.join(name);
    fs::write(&path, contents).map_err(|source| HarnessError::Io { path, source })?;
    Ok(name.to_string())
}

struct Provenance {
    command: &'static str,
    config_path: PathBuf,
    config_sha256: String,
    seed: u64,
    jobs: usize,
}

impl Provenance {
    fn new(command: &'static str, common: &Common, seed: u64) -> Result<Self, HarnessError> {
        Ok(Provenance {
            command,
            config_path: common.config.clone(),
            config_sha256: config_sha256(&common.config)?,
            seed,
            jobs: common.jobs,
        })
    }

    fn report(
        &self,
        grid_hash: Option<&str>,
        converged: bool,
        failures: &[RunFailure],
        outputs: &[String],
        summary: serde_json::Value,
    ) -> serde_json::Value {
        json!({
            "command": self.command,
            "config": self.config_path,
            "config_sha256": self.config_sha256,
            "grid_hash": grid_hash,
            "seed": self.seed,
            "jobs": self.jobs,
            "converged": converged,
            "failures": failures,
            "outputs": outputs,
            "summary": summary,
        })
    }
}

fn finish(
    out_dir: &Path,
    provenance: &Provenance,
    grid_hash: Option<&str>,
    converged: bool,
    failures: &[RunFailure],
    mut outputs: Vec<String>,
    summary: serde_json::Value,
) -> Result<bool, HarnessError> {
    outputs.push("report.json".into());
    let report = provenance.report(grid_hash, converged, failures, &outputs, summary);
    let text = serde_json::to_string_pretty(&report).expect("report serialization");
    write(out_dir, "report.json", &text)?;
    for name in &outputs {
        println!("wrote {}", out_dir.join(name).display());
    }
    Ok(converged)
}

fn simulate(common: &Common) -> Result<bool, HarnessError> {
    let mut config: ScenarioConfig = load_config(&common.config)?;
    common.apply(&mut config);
    let provenance = Provenance::new("simulate", common, config.seed)?;

    let rs = harness::resolve(&config, &common.config_dir())?;
    let out = harness::run_scenario(&rs)?;

    let mut csv = Vec::new();
    out.trajectory
        .write_csv(&mut csv)
        .map_err(|source| HarnessError::Io {
            path: common.out.clone(),
            source,
        })?;
    let traj_name = format!("trajectory_{}.csv", sanitize(&out.id));
    let outputs = vec![
        write(&common.out, &traj_name, &String::from_utf8(csv).expect("csv is utf-8"))?,
        write(
            &common.out,
            "metrics.csv",
            &metrics_csv(&[(out.id.clone(), out.report.clone())]),
        )?,
    ];
    let converged = out.report.converged;
    finish(
        &common.out,
        &provenance,
        Some(&rs.grid_hash),
        converged,
        &[],
        outputs,
        json!({ "id": out.id, "metrics": out.report }),
    )
}

fn sweep(common: &Common) -> Result<bool, HarnessError> {
    let mut config: SweepConfig = load_config(&common.config)?;
    common.apply(&mut config.scenario);
    let provenance = Provenance::new("sweep", common, config.scenario.seed)?;

    let rs = template_hash(&config.scenario, common)?;
    let outcome = harness::sweep_alpha_beta(&config, &common.config_dir(), common.jobs)?;

    let mut entries: Vec<(String, MetricsReport)> =
        vec![("constant".into(), outcome.constant.clone())];
    for (alpha, beta, report) in &outcome.cells {
        entries.push((format!("a{alpha}-b{beta}"), report.clone()));
    }
    let outputs = vec![
        write(&common.out, "sweep.csv", &sweep_csv(&outcome.rows))?,
        write(&common.out, "metrics.csv", &metrics_csv(&entries))?,
    ];
    finish(
        &common.out,
        &provenance,
        Some(&rs),
        outcome.converged,
        &outcome.failures,
        outputs,
        json!({
            "alphas": outcome.alphas,
            "betas": outcome.betas,
            "cells": outcome.cells.len(),
        }),
    )
}

/// Hash of the resolved scenario grid, for provenance only. Sweeps and
/// campaigns resolve per cell; the template hash pins the shared input.
fn template_hash(scenario: &ScenarioConfig, common: &Common) -> Result<String, HarnessError> {
    let base = harness::load_base_grid(scenario, &common.config_dir())?;
    Ok(base.sha256_hex())
}

fn campaign(common: &Common) -> Result<bool, HarnessError> {
    let mut config: CampaignConfig = load_config(&common.config)?;
    common.apply(&mut config.scenario);
    let provenance = Provenance::new("campaign", common, config.scenario.seed)?;

    let hash = template_hash(&config.scenario, common)?;
    let outcome = harness::fault_campaign(&config, &common.config_dir(), common.jobs)?;

    let outputs = vec![
        write(&common.out, "campaign.csv", &campaign_csv(&outcome.rows))?,
        write(&common.out, "metrics.csv", &metrics_csv(&outcome.reports))?,
    ];
    finish(
        &common.out,
        &provenance,
        Some(&hash),
        outcome.converged,
        &outcome.failures,
        outputs,
        json!({
            "faults": outcome.faults,
            "fraction_improved": outcome.fraction_improved,
        }),
    )
}

fn placement(common: &Common) -> Result<bool, HarnessError> {
    let mut config: PlacementConfig = load_config(&common.config)?;
    common.apply(&mut config.scenario);
    let provenance = Provenance::new("placement", common, config.scenario.seed)?;

    let hash = template_hash(&config.scenario, common)?;
    let outcome = harness::placement_compare(&config, &common.config_dir(), common.jobs)?;

    let outputs = vec![
        write(&common.out, "campaign.csv", &placement_csv(&outcome.rows))?,
        write(&common.out, "metrics.csv", &metrics_csv(&outcome.reports))?,
    ];
    finish(
        &common.out,
        &provenance,
        Some(&hash),
        outcome.converged,
        &outcome.failures,
        outputs,
        json!({
            "faults": outcome.faults,
            "budget": outcome.budget,
            "peripheral_median": outcome.peripheral_median,
            "candidate": config.candidate.name,
            "reference": config.reference.name,
        }),
    )
}

fn stability_cmd(common: &Common) -> Result<bool, HarnessError> {
    let mut config: ScenarioConfig = load_config(&common.config)?;
    common.apply(&mut config);
    let provenance = Provenance::new("stability", common, config.seed)?;

    let rs: ResolvedScenario = harness::resolve(&config, &common.config_dir())?;
    let grid = &rs.adaptive;
    let fixed_point = swingsim::solve_fixed_point(grid, None)
        .map_err(|e| HarnessError::Config(format!("fixed point: {e}")))?;

    let lin = stability::full_jacobian(grid, &fixed_point.theta);
    let eigs = margins(&lin.matrix);
    let mut summary = BTreeMap::from([
        ("theta".to_string(), json!(fixed_point.theta)),
        ("residual_norm".to_string(), json!(fixed_point.residual_norm)),
        ("newton_iterations".to_string(), json!(fixed_point.iterations)),
        ("dimension".to_string(), json!(lin.dim())),
        ("eigenvalues".to_string(), eigs.0),
        ("spectral_abscissa".to_string(), json!(eigs.1)),
        ("zero_mode_abs".to_string(), json!(eigs.2)),
    ]);

    let all_vsg = grid.nodes().iter().all(|n| n.kind.is_vsg());
    if all_vsg {
        let report = stability::spectrum_union_check(grid, &fixed_point.theta, 1e-8)
            .expect("grid is all-VSG");
        summary.insert("union_holds".into(), json!(report.union_holds));
        summary.insert(
            "max_pairing_distance".into(),
            json!(report.max_pairing_distance),
        );
    }

    let stable = eigs.1 < 0.0;
    println!(
        "fixed point residual {:.3e}, spectral abscissa {:.6e} ({})",
        fixed_point.residual_norm,
        eigs.1,
        if stable { "stable" } else { "not stable" }
    );
    finish(
        &common.out,
        &provenance,
        Some(&rs.grid_hash),
        stable,
        &[],
        Vec::new(),
        json!(summary),
    )
}

/// Eigenvalues as `[re, im]` pairs plus the spectral abscissa excluding
/// the angle-shift zero mode and that mode's magnitude.
fn margins(matrix: &nalgebra::DMatrix<f64>) -> (serde_json::Value, f64, f64) {
    let mut eigs: Vec<_> = matrix.clone().complex_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    let zero_idx = eigs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.norm().total_cmp(&b.norm()))
        .map(|(i, _)| i)
        .expect("nonempty spectrum");
    let abscissa = eigs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != zero_idx)
        .map(|(_, v)| v.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let pairs: Vec<[f64; 2]> = eigs.iter().map(|c| [c.re, c.im]).collect();
    (json!(pairs), abscissa, eigs[zero_idx].norm())
}
