//! Closed-loop simulation of the intersection game.

pub mod config;
pub mod emit;
pub mod metrics;
pub mod runner;

pub use config::{load_scenario, ScenarioConfig, VehicleSpec};
pub use emit::{emit, Format};
pub use metrics::{metrics, MetricsReport, PairMetrics, VehicleMetrics};
pub use runner::{run, run_with, PairRecord, RunOptions, SimTrace, StepRecord, VehicleRecord};
