//! `feederflow`: validate feeder descriptions, run power flows and robust
//! schedules, train the load classifier, and drive the multi-day mode
//! comparison. Every command writes a `manifest.json` next to its outputs;
//! passing that file back through `--config` replays the run byte for byte.

mod manifest;
mod plots;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use feederflow::control::{reference_samples, train_classifier, Classifier, TrainOptions};
use feederflow::devices::{nodal_net_injection, DeviceFleet, FleetSetpoints, DEFAULT_LOAD_COS_PHI};
use feederflow::grid::{build_feeder_from_str, build_topology_matrices};
use feederflow::opf::{
    assemble_opf, evaluate_objective, solve_opf, AmbiguityConfig, CostParams, OpfOptions,
    OpfProfiles,
};
use feederflow::powerflow::{
    solve_fixedpoint_pf, solve_linear_pf, DEFAULT_FIXEDPOINT_MAX_ITER, DEFAULT_FIXEDPOINT_TOL,
};
use feederflow::sim::{
    generate_synthetic_profiles, read_profiles_csv, report_from_logs, run_all_modes, run_mode,
    write_run_log_csv, compute_kpis, ProfileSet, SimMode, SimulationConfig,
};
use feederflow::{FeederModel, NodalInjection, TopologyMatrices};
use ndarray::Array2;

use manifest::{RunManifest, MANIFEST_SCHEMA};

const OUT_ENV: &str = "FEEDERFLOW_OUT";

#[derive(Parser)]
#[command(name = "feederflow", version, about = "LV feeder toolkit: power flow, robust OPF, local control, mode comparison")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Explicit flags win over values from
/// `--config`; whatever remains unset falls back to defaults.
#[derive(clap::Args, Clone)]
struct Common {
    /// Feeder description JSON.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Long-format profiles CSV; synthetic profiles are generated when absent.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Manifest of a previous run to replay or override.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed for synthetic profiles and training splits.
    #[arg(long)]
    seed: Option<u64>,
    /// Ambiguity radius coefficient (fraction of the scenario span).
    #[arg(long)]
    radius: Option<f64>,
    /// Number of days to generate/simulate.
    #[arg(long)]
    days: Option<usize>,
    /// Output directory (default: $FEEDERFLOW_OUT or ./feederflow-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a feeder description and report its topology.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Solve one snapshot with the linear and fixed-point solvers side by side.
    Powerflow {
        #[command(flatten)]
        common: Common,
        /// Solve the unloaded network instead of peak demand.
        #[arg(long)]
        no_load: bool,
    },
    /// Solve the day-ahead robust schedule for the first day.
    Opf {
        #[command(flatten)]
        common: Common,
    },
    /// Train the controllable-load classifier on the reference samples.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run one operating mode and write its run log and KPIs.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// traditional | ideal | proposed
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run all three modes and write the comparison document and plot data.
    Compare {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Merge CLI flags over a loaded manifest (if any) into a complete manifest.
fn resolve(command: &str, common: &Common, mode: Option<String>, no_load: bool) -> anyhow::Result<RunManifest> {
    let base = match &common.config {
        Some(path) => Some(RunManifest::load(path)?),
        None => None,
    };
    let b = |f: &dyn Fn(&RunManifest) -> Option<PathBuf>| base.as_ref().and_then(f);
    let default_out = || {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("feederflow-out"))
    };
    Ok(RunManifest {
        schema: MANIFEST_SCHEMA.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        feeder: common.feeder.clone().or_else(|| b(&|m| m.feeder.clone())),
        profiles: common.profiles.clone().or_else(|| b(&|m| m.profiles.clone())),
        seed: common.seed.or(base.as_ref().map(|m| m.seed)).unwrap_or(7),
        radius: common.radius.or(base.as_ref().map(|m| m.radius)).unwrap_or(0.05),
        mode: mode.or(base.as_ref().and_then(|m| m.mode.clone())),
        days: common.days.or(base.as_ref().map(|m| m.days)).unwrap_or(30),
        no_load: no_load || base.as_ref().map_or(false, |m| m.no_load),
        out: common.out.clone().or_else(|| b(&|m| Some(m.out.clone()))).unwrap_or_else(default_out),
    })
}

struct Loaded {
    feeder: FeederModel,
    matrices: TopologyMatrices,
    fleet: DeviceFleet,
}

fn load_feeder(m: &RunManifest) -> anyhow::Result<Loaded> {
    let path = m.feeder.as_ref().context("--feeder is required (flag or config)")?;
    let doc = std::fs::read_to_string(path)
        .with_context(|| format!("reading feeder {}", path.display()))?;
    let feeder = build_feeder_from_str(&doc)
        .with_context(|| format!("parsing feeder {}", path.display()))?;
    let matrices = build_topology_matrices(&feeder);
    let fleet = DeviceFleet::from_config(&feeder, &feeder.config().devices.clone())?;
    Ok(Loaded { feeder, matrices, fleet })
}

fn sim_config(m: &RunManifest) -> SimulationConfig {
    SimulationConfig {
        days: m.days,
        seed: m.seed,
        lambda: m.radius,
        ..Default::default()
    }
}

fn load_profiles(m: &RunManifest, loaded: &Loaded, config: &SimulationConfig) -> anyhow::Result<ProfileSet> {
    match &m.profiles {
        Some(path) => {
            let file = std::fs::File::open(path)
                .with_context(|| format!("opening profiles {}", path.display()))?;
            Ok(read_profiles_csv(file, &loaded.feeder, &loaded.fleet)?)
        }
        None => Ok(generate_synthetic_profiles(&loaded.feeder, config)),
    }
}

fn out_dir(m: &RunManifest) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&m.out)
        .with_context(|| format!("creating output directory {}", m.out.display()))?;
    Ok(m.out.clone())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Validate { common } => {
            let m = resolve("validate", &common, None, false)?;
            cmd_validate(&m)
        }
        Command::Powerflow { common, no_load } => {
            let m = resolve("powerflow", &common, None, no_load)?;
            cmd_powerflow(&m)
        }
        Command::Opf { common } => {
            let m = resolve("opf", &common, None, false)?;
            cmd_opf(&m)
        }
        Command::Train { common } => {
            let m = resolve("train", &common, None, false)?;
            cmd_train(&m)
        }
        Command::Simulate { common, mode } => {
            let m = resolve("simulate", &common, mode, false)?;
            cmd_simulate(&m)
        }
        Command::Compare { common } => {
            let m = resolve("compare", &common, None, false)?;
            cmd_compare(&m)
        }
    }
}

fn cmd_validate(m: &RunManifest) -> anyhow::Result<()> {
    let loaded = load_feeder(m)?;
    let f = &loaded.feeder;
    let cfg = f.config();
    let mut text = String::new();
    text.push_str(&format!("feeder: {} buses, {} sections, slack bus {}\n", f.n_buses(), f.n_sections(), cfg.slack_bus));
    let depth = (0..f.n_buses()).map(|b| f.hop_depth(b)).max().unwrap_or(0);
    text.push_str(&format!("radial, max depth {depth} sections\n"));
    let load: f64 = f.buses().iter().map(|b| b.load_kw_peak.iter().sum::<f64>()).sum();
    let pv: f64 = loaded.fleet.pv.iter().map(|u| u.kw_peak).sum();
    text.push_str(&format!("peak demand {load:.1} kW, installed PV {pv:.1} kW\n"));
    text.push_str(&format!(
        "devices: {} PV, {} storage, {} controllable loads\n",
        loaded.fleet.pv.len(),
        loaded.fleet.bess.len(),
        loaded.fleet.cl.len()
    ));
    text.push_str(&format!(
        "limits: v [{:.3}, {:.3}] pu, neutral {:.3} pu, vuf {:.1}%, default rating {:.0} A\n",
        f.limits.v_min,
        f.limits.v_max,
        f.limits.v_neut_max,
        f.limits.vuf_max * 100.0,
        f.config().limits.i_max_default_a
    ));
    print!("{text}");
    let dir = out_dir(m)?;
    std::fs::write(dir.join("findings.txt"), &text)?;
    m.write(&dir)?;
    Ok(())
}

fn cmd_powerflow(m: &RunManifest) -> anyhow::Result<()> {
    let loaded = load_feeder(m)?;
    let f = &loaded.feeder;
    let inj = if m.no_load {
        NodalInjection::zeros(f.n_buses())
    } else {
        let mut load = Array2::zeros((f.n_buses(), 3));
        for (b, bus) in f.buses().iter().enumerate() {
            for p in 0..3 {
                load[(b, p)] = bus.load_kw_peak[p];
            }
        }
        nodal_net_injection(
            f,
            &loaded.fleet,
            &FleetSetpoints::zeros(&loaded.fleet),
            &load,
            &vec![0.0; loaded.fleet.cl.len()],
            DEFAULT_LOAD_COS_PHI,
        )
    };
    let lin = solve_linear_pf(f, &loaded.matrices, &inj, 0)?;
    let fix = solve_fixedpoint_pf(
        f,
        &loaded.matrices,
        &inj,
        0,
        DEFAULT_FIXEDPOINT_TOL,
        DEFAULT_FIXEDPOINT_MAX_ITER,
    )?;
    let dir = out_dir(m)?;
    let path = dir.join("powerflow.csv");
    let mut out = std::fs::File::create(&path)?;
    writeln!(out, "# schema: powerflow v1")?;
    writeln!(out, "bus,conductor,v_lin_pu,v_fix_pu")?;
    for b in 0..f.n_buses() {
        for (c, name) in ["a", "b", "c", "n"].iter().enumerate() {
            writeln!(
                out,
                "{},{},{:.6},{:.6}",
                f.bus_id(b),
                name,
                lin.voltages[(b, c)].norm(),
                fix.voltages[(b, c)].norm()
            )?;
        }
    }
    println!(
        "wrote {} ({} iterations to converge the fixed point)",
        path.display(),
        fix.iterations
    );
    m.write(&dir)?;
    Ok(())
}

fn cmd_opf(m: &RunManifest) -> anyhow::Result<()> {
    let loaded = load_feeder(m)?;
    let config = sim_config(m);
    let profiles = load_profiles(m, &loaded, &config)?;
    anyhow::ensure!(!profiles.days.is_empty(), "profiles contain no days");
    let day = &profiles.days[0];
    let problem = assemble_opf(
        &loaded.feeder,
        &loaded.matrices,
        &loaded.fleet,
        OpfProfiles { load_kw: day.load_kw.clone(), pv_availability: day.pv_availability.clone() },
        CostParams { dt_h: config.dt_h, ..CostParams::default() },
        AmbiguityConfig { lambda: m.radius, scenario_availability: profiles.scenario_availability() },
    )?;
    let solution = solve_opf(&problem, &OpfOptions::default())?;
    let breakdown = evaluate_objective(&problem, &solution.setpoints, &solution.taps)?;
    let dir = out_dir(m)?;
    let doc = serde_json::json!({
        "schema": "opf-solution v1",
        "radius": m.radius,
        "objective": breakdown,
        "taps": solution.taps,
        "binding": solution.binding,
        "lp_iterations": solution.lp_iterations,
        "setpoints": solution.setpoints,
    });
    let path = dir.join("opf.json");
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    println!(
        "objective {:.4} (curtailment {:.2} kWh, reactive {:.2} kvarh, losses {:.2} kWh)",
        breakdown.total, breakdown.curtailment_kwh, breakdown.reactive_kvarh, breakdown.loss_kwh
    );
    m.write(&dir)?;
    Ok(())
}

fn cmd_train(m: &RunManifest) -> anyhow::Result<()> {
    let samples = reference_samples();
    let options = TrainOptions { seed: m.seed, ..TrainOptions::default() };
    let model = train_classifier(&samples, &options)?;
    let dir = out_dir(m)?;

    let mut labels = std::fs::File::create(dir.join("labels.csv"))?;
    writeln!(labels, "# schema: labels v1")?;
    writeln!(labels, "pv_pu,v_pu,label")?;
    for s in &samples {
        writeln!(labels, "{},{},{:?}", s.features[0], s.features[1], s.label)?;
    }

    let doc = serde_json::json!({ "schema": "classifier v1", "model": model });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(dir.join("model.json"), text)?;
    println!(
        "trained on {} samples: train accuracy {:.1}%, held-out accuracy {:.1}%",
        samples.len(),
        model.report.train_accuracy,
        model.report.test_accuracy
    );
    m.write(&dir)?;
    Ok(())
}

fn parse_mode(m: &RunManifest) -> anyhow::Result<SimMode> {
    let name = m.mode.as_deref().context("--mode is required (traditional | ideal | proposed)")?;
    match name.to_ascii_lowercase().as_str() {
        "traditional" => Ok(SimMode::Traditional),
        "ideal" => Ok(SimMode::Ideal),
        "proposed" => Ok(SimMode::Proposed),
        other => anyhow::bail!("unknown mode {other:?} (expected traditional | ideal | proposed)"),
    }
}

fn trained_classifier(seed: u64) -> anyhow::Result<Classifier> {
    Ok(train_classifier(&reference_samples(), &TrainOptions { seed, ..TrainOptions::default() })?)
}

fn cmd_simulate(m: &RunManifest) -> anyhow::Result<()> {
    let mode = parse_mode(m)?;
    let loaded = load_feeder(m)?;
    let config = sim_config(m);
    let profiles = load_profiles(m, &loaded, &config)?;
    let classifier = match mode {
        SimMode::Proposed => Some(trained_classifier(m.seed)?),
        _ => None,
    };
    let log = run_mode(
        &loaded.feeder,
        &loaded.matrices,
        &loaded.fleet,
        &config,
        &profiles,
        mode,
        classifier.as_ref(),
    )?;
    let kpi = compute_kpis(&log, &loaded.feeder, &config.cost, config.dt_h);
    let dir = out_dir(m)?;
    let log_path = dir.join(format!("run_log_{}.csv", mode.label().to_ascii_lowercase()));
    let file = std::fs::File::create(&log_path)?;
    write_run_log_csv(file, &loaded.feeder, &log)?;
    let doc = serde_json::json!({ "schema": "kpi v1", "mode": mode.label(), "kpi": kpi });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(dir.join("kpi.json"), text)?;
    println!(
        "{}: v_max {:.4} pu, i_max {:.2}%, losses {:.3}%, vuf {:.3}%, cost {:.3}, {} violations",
        mode.label(),
        kpi.v_max_pu,
        kpi.i_max_pct,
        kpi.losses_pct,
        kpi.vuf_max_pct,
        kpi.cost_total,
        kpi.violations
    );
    m.write(&dir)?;
    Ok(())
}

fn cmd_compare(m: &RunManifest) -> anyhow::Result<()> {
    let loaded = load_feeder(m)?;
    let config = sim_config(m);
    let profiles = load_profiles(m, &loaded, &config)?;
    let classifier = trained_classifier(m.seed)?;
    let logs = run_all_modes(
        &loaded.feeder,
        &loaded.matrices,
        &loaded.fleet,
        &config,
        &profiles,
        &classifier,
    )?;
    let report = report_from_logs(&logs, &loaded.feeder, &config);
    let dir = out_dir(m)?;
    std::fs::write(dir.join("comparison.txt"), report.render())?;
    let doc = serde_json::json!({ "schema": "comparison v1", "report": report });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(dir.join("comparison.json"), text)?;

    let traditional = &logs[0];
    let proposed = &logs[2];
    plots::write_soc_trace(&dir, proposed)?;
    let bus = plots::hottest_bus(&loaded.feeder, traditional);
    plots::write_voltage_trace(&dir, &loaded.feeder, &logs, bus)?;
    plots::write_current_boxes(&dir, &loaded.feeder, &logs)?;
    plots::write_current_trace(&dir, &loaded.feeder, &logs)?;
    print!("{}", report.render());
    m.write(&dir)?;
    Ok(())
}
