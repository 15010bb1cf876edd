//! Shared setup for the benchmarks.

use std::path::PathBuf;

use crossroads_core::sim::{load_scenario, ScenarioConfig};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.toml"))
}

/// A shipped scenario cut down to one decision step. The final recorded
/// state is not solved, so the horizon is a single `dt`.
pub fn single_step(name: &str) -> ScenarioConfig {
    let mut cfg = load_scenario(scenario_path(name)).expect("shipped scenario loads");
    cfg.t_end = cfg.dt;
    cfg
}
