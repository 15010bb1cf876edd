//! Writes traces and reports to disk.
//!
//! Every file is a pure function of the trace, so repeated runs of the same
//! scenario produce byte-identical output. Wall-clock timings are left out
//! for that reason.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::game::{GameMode, Outcome};
use crate::geometry::Vec2;
use crate::network::ZoneRole;
use crate::risk::{raster, RiskField, RiskParams};

use super::metrics::MetricsReport;
use super::runner::SimTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::Parse(format!("unknown output format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Json => "json",
        })
    }
}

/// One vehicle at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub time: f64,
    pub vehicle: usize,
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub delta: f64,
    pub jerk: f64,
    pub role: ZoneRole,
    pub gate_log: f64,
    pub gate_lat: f64,
    pub v_s_log: f64,
    pub v_s_lat: f64,
    pub v_s_lk: f64,
    pub v_s: f64,
    pub v_e: f64,
    pub v_total: f64,
    pub p_sg: f64,
    pub residual: f64,
    pub feasible: bool,
    pub outcome: Option<Outcome>,
}

/// Path length and speed over time, for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesRow {
    pub time: f64,
    pub vehicle: usize,
    pub s: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct SummaryRow<'a> {
    scenario: &'a str,
    mode: GameMode,
    risk_gating: bool,
    system_v_rms: f64,
    decision_steps: usize,
    end_time: f64,
    completed: bool,
    emergencies: usize,
    recoveries: usize,
    fallbacks: usize,
    max_residual: f64,
    feasible: bool,
}

pub fn trace_rows(trace: &SimTrace) -> Vec<TraceRow> {
    trace
        .steps
        .iter()
        .flat_map(|st| {
            st.vehicles.iter().map(move |r| TraceRow {
                time: st.time,
                vehicle: r.id,
                x: r.state.x,
                y: r.state.y,
                v: r.state.v_x,
                a: r.control.a_x,
                delta: r.control.delta_f,
                jerk: r.jerk,
                role: r.role,
                gate_log: r.gate_log,
                gate_lat: r.gate_lat,
                v_s_log: r.cost.v_s_log,
                v_s_lat: r.cost.v_s_lat,
                v_s_lk: r.cost.v_s_lk,
                v_s: r.cost.v_s,
                v_e: r.cost.v_e,
                v_total: r.cost.v_total,
                p_sg: r.p_sg,
                residual: r.residual,
                feasible: r.feasible,
                outcome: r.outcome,
            })
        })
        .collect()
}

pub fn series_rows(trace: &SimTrace) -> Vec<SeriesRow> {
    trace
        .steps
        .iter()
        .flat_map(|st| {
            st.vehicles.iter().map(move |r| SeriesRow {
                time: st.time,
                vehicle: r.id,
                s: r.s,
                v: r.state.v_x,
            })
        })
        .collect()
}

/// Serializes `rows` as CSV with a header row taken from the field names.
pub fn to_csv<T: Serialize>(rows: &[T]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("flat rows always serialize");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is utf-8")
}

pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data always serializes");
    s.push('\n');
    s
}

fn summary(report: &MetricsReport) -> SummaryRow<'_> {
    SummaryRow {
        scenario: &report.scenario,
        mode: report.mode,
        risk_gating: report.risk_gating,
        system_v_rms: report.system_v_rms,
        decision_steps: report.decision_steps,
        end_time: report.end_time,
        completed: report.completed,
        emergencies: report.emergencies,
        recoveries: report.recoveries,
        fallbacks: report.fallbacks,
        max_residual: report.max_residual,
        feasible: report.feasible,
    }
}

/// File names and contents for `format`, in a fixed order.
pub fn render(trace: &SimTrace, report: &MetricsReport, format: Format) -> Vec<(&'static str, String)> {
    match format {
        Format::Csv => vec![
            ("trace.csv", to_csv(&trace_rows(trace))),
            ("series.csv", to_csv(&series_rows(trace))),
            ("summary.csv", to_csv(&[summary(report)])),
            ("vehicles.csv", to_csv(&report.vehicles)),
            ("pairs.csv", to_csv(&report.pairs)),
        ],
        Format::Json => vec![
            ("trace.json", to_json(&trace_rows(trace))),
            ("series.json", to_json(&series_rows(trace))),
            ("report.json", to_json(report)),
        ],
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(path)
}

/// Writes the trace and report into `out_dir`, creating it if needed.
pub fn emit(trace: &SimTrace, report: &MetricsReport, format: Format, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    render(trace, report, format)
        .iter()
        .map(|(name, contents)| write(out_dir, name, contents))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RasterRow {
    pub x: f64,
    pub y: f64,
    pub gamma: f64,
}

/// Summed risk field of every vehicle at trace step `step`, sampled over
/// the square `[-half, half]^2` every `resolution` metres.
pub fn field_raster(
    trace: &SimTrace,
    kappas: &[f64],
    step: usize,
    risk: &RiskParams,
    vehicle: &VehicleParams,
    half: f64,
    resolution: f64,
) -> Vec<RasterRow> {
    let Some(st) = trace.steps.get(step) else {
        return Vec::new();
    };
    let (min, max) = (Vec2::new(-half, -half), Vec2::new(half, half));
    let mut rows: Vec<RasterRow> = Vec::new();
    for (r, &kappa) in st.vehicles.iter().zip(kappas) {
        let field = RiskField::new(&r.state, &r.control, kappa, risk, vehicle);
        let grid = raster(&field, min, max, resolution);
        if rows.is_empty() {
            rows = grid.iter().map(|&(x, y, gamma)| RasterRow { x, y, gamma }).collect();
        } else {
            for (row, (_, _, g)) in rows.iter_mut().zip(grid) {
                row.gamma += g;
            }
        }
    }
    rows
}

pub fn write_raster(rows: &[RasterRow], out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    write(out_dir, "field_raster.csv", &to_csv(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{load_scenario, metrics, run};

    fn case1() -> (SimTrace, MetricsReport) {
        let mut cfg = load_scenario(format!("{}/../../scenarios/case1_A.toml", env!("CARGO_MANIFEST_DIR"))).unwrap();
        cfg.t_end = 1.0;
        let trace = run(&cfg).unwrap();
        let report = metrics(&trace);
        (trace, report)
    }

    #[test]
    fn csv_header_has_the_fixed_column_order() {
        let (trace, report) = case1();
        let files = render(&trace, &report, Format::Csv);
        let header = files[0].1.lines().next().unwrap();
        assert!(header.starts_with("time,vehicle,x,y,v,a,delta,jerk,role,gate_log,gate_lat,v_s_log,v_s_lat,v_s_lk,v_s,v_e,v_total"));
        // one row per vehicle per step
        assert_eq!(files[0].1.lines().count(), 1 + 3 * trace.steps.len());
    }

    #[test]
    fn json_trace_matches_csv_rows() {
        let (trace, _) = case1();
        let json = to_json(&trace_rows(&trace));
        let rows: Vec<serde_json::Value> = serde_json::from_str(&json).unwrap();
        assert_eq!(rows.len(), 3 * trace.steps.len());
        // keys keep struct order in the text
        let first = &json[..json.find('}').unwrap()];
        let pos: Vec<usize> = ["\"time\"", "\"vehicle\"", "\"x\"", "\"y\"", "\"v\"", "\"a\"", "\"delta\""]
            .iter()
            .map(|k| first.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn report_leaves_out_wall_time() {
        let (_, report) = case1();
        assert!(!to_json(&report).contains("solve_time"));
    }

    #[test]
    fn format_names() {
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert_eq!(Format::Json.to_string(), "json");
        assert!("xml".parse::<Format>().is_err());
    }

    #[test]
    fn raster_is_nonnegative_and_sized() {
        let (trace, _) = case1();
        let rows = field_raster(&trace, &[-0.8, 0.0, 0.0], 0, &RiskParams::default(), &VehicleParams::default(), 30.0, 1.0);
        assert_eq!(rows.len(), 61 * 61);
        assert!(rows.iter().all(|r| r.gamma >= 0.0));
        assert!(rows.iter().any(|r| r.gamma > 0.0));
    }
}
