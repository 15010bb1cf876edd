//! Scenario files: TOML with a format `version`, global parameter sections
//! and one `[[vehicles]]` table per vehicle.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costs::{check_kappa, ConstraintBounds, CostParams};
use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::game::{GameMode, SolverParams};
use crate::network::{LaneId, LaneKind, Maneuver, Network, NetworkParams, RoadId};
use crate::risk::RiskParams;

pub const FORMAT_VERSION: u32 = 1;

/// Largest distance (m) between a vehicle's start and its lane centerline.
pub const START_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub id: usize,
    /// Initial centre-of-gravity position (m).
    pub position: [f64; 2],
    /// Initial speed (m/s).
    pub speed: f64,
    pub entry: RoadId,
    pub lane: LaneKind,
    pub maneuver: Maneuver,
    pub kappa: f64,
}

impl VehicleSpec {
    pub fn entry_lane(&self) -> LaneId {
        LaneId {
            road: self.entry,
            kind: self.lane,
        }
    }
}

fn default_dt() -> f64 {
    0.1
}

fn default_t_end() -> f64 {
    30.0
}

fn default_min_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub mode: GameMode,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// Centre distance (m) below which a pair counts as colliding.
    #[serde(default = "default_min_separation")]
    pub min_separation: f64,
    #[serde(default)]
    pub network: NetworkParams,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub risk: RiskParams,
    #[serde(default)]
    pub costs: CostParams,
    #[serde(default)]
    pub bounds: ConstraintBounds,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {} (expected {FORMAT_VERSION})", self.version),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(Error::config("t_end", "must be non-negative"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("min_separation", "must be non-negative"));
        }
        self.vehicle.validate()?;
        self.risk.validate()?;
        self.bounds.validate()?;
        self.solver.validate()?;
        let net = self.build_network()?;

        for (k, v) in self.vehicles.iter().enumerate() {
            let at = |field: &str| format!("vehicles[{k}].{field}");
            if self.vehicles[..k].iter().any(|o| o.id == v.id) {
                return Err(Error::config(at("id"), format!("duplicate vehicle id {}", v.id)));
            }
            check_kappa(v.kappa).map_err(|e| Error::config(at("kappa"), e.to_string()))?;
            if !(v.speed >= 0.0 && v.speed <= self.bounds.v_max) {
                return Err(Error::config(
                    at("speed"),
                    format!("{} m/s is outside [0, {}]", v.speed, self.bounds.v_max),
                ));
            }
            if v.entry.outbound {
                return Err(Error::config(at("entry"), format!("{} is an exit road", v.entry)));
            }
            let route = crate::network::route_for(&net, v.entry_lane(), v.maneuver);
            let proj = route.project(v.position.into());
            if proj.distance > START_TOLERANCE {
                return Err(Error::config(
                    at("position"),
                    format!("{:.3} m off the {} {:?} lane centerline", proj.distance, v.entry, v.lane),
                ));
            }
        }
        Ok(())
    }

    pub fn build_network(&self) -> Result<Network> {
        Network::new(self.network).map_err(|e| Error::config("network", e.to_string()))
    }
}

impl From<[f64; 2]> for crate::geometry::Vec2 {
    fn from(p: [f64; 2]) -> Self {
        crate::geometry::Vec2::new(p[0], p[1])
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_toml(&text)
}
