use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use crossroads_core::game::GameMode;
use crossroads_core::network::{conflict_points, route_for};
use crossroads_core::sim::emit::{field_raster, write_raster};
use crossroads_core::sim::{emit, load_scenario, metrics, run_with, Format, MetricsReport, RunOptions, ScenarioConfig};

/// Cooperative decision making for connected vehicles at an unsignalized intersection.
#[derive(Debug, Parser)]
#[command(name = "crossroads", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and write its trace and report.
    Run {
        scenario: PathBuf,
        /// Game mode; defaults to the one in the scenario file.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<GameMode>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
        /// Evaluate every cost term even when the risk field says it is idle.
        #[arg(long)]
        no_risk_gating: bool,
        /// Also write the initial risk field sampled on a grid.
        #[arg(long)]
        field_raster: bool,
    },
    /// Run a scenario under several modes and print the reports side by side.
    Compare {
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "noncoop,fuzzy,grand")]
        modes: Vec<GameMode>,
        #[arg(long)]
        no_risk_gating: bool,
    },
    /// Check that a scenario file loads and its routes can be built.
    Validate { scenario: PathBuf },
}

fn parse_mode(s: &str) -> Result<GameMode, String> {
    s.parse::<GameMode>().map_err(|e| e.to_string())
}

fn load(path: &Path) -> Result<ScenarioConfig> {
    load_scenario(path).with_context(|| format!("cannot load scenario {}", path.display()))
}

fn simulate(cfg: &ScenarioConfig, mode: GameMode, gating: bool) -> Result<MetricsReport> {
    let (_, report) = simulate_trace(cfg, mode, gating)?;
    Ok(report)
}

fn simulate_trace(
    cfg: &ScenarioConfig,
    mode: GameMode,
    gating: bool,
) -> Result<(crossroads_core::sim::SimTrace, MetricsReport)> {
    let opts = RunOptions {
        risk_gating: gating,
        ..RunOptions::new(mode)
    };
    let trace = run_with(cfg, &opts).with_context(|| format!("simulation failed in {mode} mode"))?;
    let report = metrics(&trace);
    Ok((trace, report))
}

fn run(scenario: &Path, mode: Option<GameMode>, out: &Path, format: &str, gating: bool, raster: bool) -> Result<()> {
    let cfg = load(scenario)?;
    let mode = mode.unwrap_or(cfg.mode);
    let format: Format = format.parse()?;
    let (trace, report) = simulate_trace(&cfg, mode, gating)?;
    let mut written = emit(&trace, &report, format, out).context("cannot write results")?;
    if raster {
        let kappas: Vec<f64> = trace.steps.first().map_or_else(Vec::new, |st| {
            st.vehicles
                .iter()
                .map(|r| cfg.vehicles.iter().find(|v| v.id == r.id).map_or(0.0, |v| v.kappa))
                .collect()
        });
        let half = cfg.network.cz_half_width + cfg.network.approach_length;
        let rows = field_raster(&trace, &kappas, 0, &cfg.risk, &cfg.vehicle, half, 0.5);
        written.push(write_raster(&rows, out).context("cannot write field raster")?);
    }
    println!(
        "{}: {} mode, system v_rms {:.3} m/s, {} steps, mean step {:.3} ms{}",
        report.scenario,
        report.mode,
        report.system_v_rms,
        report.decision_steps,
        report.mean_solve_time * 1e3,
        if report.feasible { "" } else { " (infeasible)" }
    );
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn label(index: usize, mode: GameMode) -> String {
    let letter = (b'A' + index as u8) as char;
    let name = match mode {
        GameMode::Noncooperative => "noncooperative baseline",
        GameMode::Fuzzy => "fuzzy coalition",
        GameMode::Grand => "grand coalition",
    };
    format!("{letter}: {name}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
}

/// Side-by-side text table, columns in the order noncooperative, fuzzy, grand.
fn compare_table(reports: &[MetricsReport]) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let header: Vec<String> = reports.iter().enumerate().map(|(i, r)| label(i, r.mode)).collect();
    rows.push(("".into(), header));
    let col = |f: &dyn Fn(&MetricsReport) -> String| reports.iter().map(f).collect::<Vec<_>>();
    rows.push(("system v_rms (m/s)".into(), col(&|r| format!("{:.3}", r.system_v_rms))));
    if let Some(first) = reports.first() {
        for (k, v) in first.vehicles.iter().enumerate() {
            rows.push((
                format!("V{} v_rms (m/s)", v.id),
                col(&|r| format!("{:.3}", r.vehicles[k].v_rms)),
            ));
            rows.push((
                format!("V{} a_rms (m/s^2)", v.id),
                col(&|r| format!("{:.3}", r.vehicles[k].a_rms)),
            ));
        }
        for (k, p) in first.pairs.iter().enumerate() {
            rows.push((
                format!("V{}-V{} min dist (m)", p.a, p.b),
                col(&|r| opt(r.pairs[k].min_distance)),
            ));
            rows.push((format!("V{}-V{} min TTC (s)", p.a, p.b), col(&|r| opt(r.pairs[k].min_ttc))));
        }
    }
    rows.push(("end time (s)".into(), col(&|r| format!("{:.1}", r.end_time))));
    rows.push(("completed".into(), col(&|r| r.completed.to_string())));
    rows.push(("feasible".into(), col(&|r| r.feasible.to_string())));
    rows.push(("emergencies".into(), col(&|r| r.emergencies.to_string())));
    rows.push(("max residual".into(), col(&|r| format!("{:.2e}", r.max_residual))));
    rows.push(("mean step (ms)".into(), col(&|r| format!("{:.3}", r.mean_solve_time * 1e3))));

    let w0 = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let w = rows.iter().flat_map(|(_, v)| v.iter().map(String::len)).max().unwrap_or(0);
    let mut out = String::new();
    for (k, vals) in rows {
        out.push_str(&format!("{k:<w0$}"));
        for v in vals {
            out.push_str(&format!("  {v:>w$}"));
        }
        out.push('\n');
    }
    out
}

fn compare(scenario: &Path, modes: &[GameMode], gating: bool) -> Result<()> {
    let cfg = load(scenario)?;
    let mut ordered: Vec<GameMode> = GameMode::ALL.into_iter().filter(|m| modes.contains(m)).collect();
    ordered.dedup();
    if ordered.is_empty() {
        bail!("no modes to compare");
    }
    let reports = ordered
        .iter()
        .map(|&m| simulate(&cfg, m, gating))
        .collect::<Result<Vec<_>>>()?;
    println!("{}", if cfg.name.is_empty() { scenario.display().to_string() } else { cfg.name.clone() });
    print!("{}", compare_table(&reports));
    Ok(())
}

fn validate(scenario: &Path) -> Result<()> {
    let cfg = load(scenario)?;
    let net = cfg.build_network()?;
    let routes: Vec<_> = cfg
        .vehicles
        .iter()
        .map(|v| route_for(&net, v.entry_lane(), v.maneuver))
        .collect();
    let mut pairs = 0;
    for i in 0..routes.len() {
        for j in i + 1..routes.len() {
            if !conflict_points(&net, &routes[i], &routes[j]).is_empty() {
                pairs += 1;
            }
        }
    }
    println!(
        "{}: ok, {} vehicles, {} conflicting pairs",
        scenario.display(),
        cfg.vehicles.len(),
        pairs
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            mode,
            out,
            format,
            no_risk_gating,
            field_raster,
        } => run(scenario, *mode, out, format, !no_risk_gating, *field_raster),
        Command::Compare {
            scenario,
            modes,
            no_risk_gating,
        } => compare(scenario, modes, !no_risk_gating),
        Command::Validate { scenario } => validate(scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
