//! Gaussian potential-field risk assessment over each vehicle's predicted path.
//!
//! A moving vehicle projects a ridge of risk along the path it would follow
//! under its current control. The ridge height falls parabolically to zero at
//! the end of the prediction horizon and its cross-section widens with arc
//! length and steer angle.

use serde::{Deserialize, Serialize};

use crate::dynamics::{self, ControlInput, VehicleParams, VehicleState};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskParams {
    /// Base height coefficient; the effective height scale is `a0 * e^kappa`.
    pub a0: f64,
    /// Widening slope of the cross-section for straight driving.
    pub b: f64,
    /// Extra widening per radian of steer.
    pub c: f64,
    /// Prediction horizon (s).
    pub t_p: f64,
    /// Safe value; gates open strictly above it.
    pub gamma0: f64,
    /// Weight applied to an open gate.
    pub omega0: f64,
}

impl Default for RiskParams {
    fn default() -> Self {
        Self {
            a0: 0.01,
            b: 0.5,
            c: 0.5,
            t_p: 5.0,
            gamma0: 0.1,
            omega0: 10.0,
        }
    }
}

impl RiskParams {
    pub(crate) fn validate(&self) -> Result<()> {
        let checks = [
            ("a0", self.a0 > 0.0),
            ("b", self.b >= 0.0),
            ("c", self.c >= 0.0),
            ("t_p", self.t_p > 0.0),
            ("gamma0", self.gamma0 > 0.0),
            ("omega0", self.omega0 >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::config(format!("risk.{name}"), "out of range"));
            }
        }
        Ok(())
    }
}

/// Ridge height at arc length `s`: `a0 e^kappa (s - v_x t_p)^2`.
pub fn gaussian_height(s: f64, v_x: f64, kappa: f64, t_p: f64, a0: f64) -> f64 {
    let d = s - v_x * t_p;
    a0 * kappa.exp() * d * d
}

/// Cross-section standard deviation at arc length `s`.
pub fn gaussian_width(s: f64, delta_f: f64, b: f64, c: f64, width: f64) -> f64 {
    (b + c * delta_f.abs()) * s + width / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    Straight { origin: Vec2, direction: Vec2 },
    /// Rear-axle circle. `start_angle` is the polar angle of the vehicle's
    /// centre of gravity; `turn` is +1 for counter-clockwise motion.
    Curved { center: Vec2, radius: f64, start_angle: f64, turn: f64 },
}

/// The potential field generated by one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskField {
    axis: Axis,
    pub rho_r: f64,
    pub kappa: f64,
    pub v_x: f64,
    pub delta_f: f64,
    pub t_p: f64,
    pub a0: f64,
    pub b: f64,
    pub c: f64,
    /// Cross-section width at the vehicle, `W / 4`.
    pub d: f64,
}

/// Where a query point falls relative to a field's path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCoordinates {
    /// Arc length along the predicted path.
    pub s: f64,
    /// Signed distance from the path, positive to the left.
    pub deviation: f64,
}

impl RiskField {
    pub fn new(
        state: &VehicleState,
        control: &ControlInput,
        kappa: f64,
        risk: &RiskParams,
        vehicle: &VehicleParams,
    ) -> RiskField {
        let rho_r = dynamics::path_curvature(control.delta_f, vehicle);
        let axis = match dynamics::rear_axle_and_turn_center(state, control.delta_f, vehicle) {
            Ok((_, center)) => Axis::Curved {
                center,
                radius: 1.0 / rho_r.abs(),
                start_angle: (state.position() - center).angle(),
                turn: rho_r.signum(),
            },
            Err(_) => Axis::Straight {
                origin: state.position(),
                direction: Vec2::from_angle(state.phi),
            },
        };
        RiskField {
            axis,
            rho_r,
            kappa,
            v_x: state.v_x,
            delta_f: control.delta_f,
            t_p: risk.t_p,
            a0: risk.a0,
            b: risk.b,
            c: risk.c,
            d: vehicle.width / 4.0,
        }
    }

    /// Length of the predicted path carrying risk.
    pub fn support_length(&self) -> f64 {
        self.v_x * self.t_p
    }

    pub fn center(&self) -> Option<Vec2> {
        match self.axis {
            Axis::Curved { center, .. } => Some(center),
            Axis::Straight { .. } => None,
        }
    }

    pub fn coordinates(&self, query: Vec2) -> PathCoordinates {
        match self.axis {
            Axis::Straight { origin, direction } => {
                let rel = query - origin;
                PathCoordinates {
                    s: direction.dot(rel),
                    deviation: direction.cross(rel),
                }
            }
            Axis::Curved {
                center,
                radius,
                start_angle,
                turn,
            } => {
                let rel = query - center;
                let swept = (normalize_angle(rel.angle() - start_angle) * turn).rem_euclid(std::f64::consts::TAU);
                PathCoordinates {
                    s: swept * radius,
                    // left of a counter-clockwise path is toward the center
                    deviation: -(rel.norm() - radius) * turn,
                }
            }
        }
    }

    /// Point on the field's path at arc length `s`.
    pub fn path_point(&self, s: f64) -> Vec2 {
        match self.axis {
            Axis::Straight { origin, direction } => origin + direction * s,
            Axis::Curved {
                center,
                radius,
                start_angle,
                turn,
            } => center + Vec2::from_angle(start_angle + turn * s / radius) * radius,
        }
    }

    pub fn height(&self, s: f64) -> f64 {
        gaussian_height(s, self.v_x, self.kappa, self.t_p, self.a0)
    }

    pub fn width(&self, s: f64) -> f64 {
        (self.b + self.c * self.delta_f.abs()) * s + self.d
    }

    /// Field value at `query`; zero outside the predicted-path support.
    pub fn value(&self, query: Vec2) -> f64 {
        let PathCoordinates { s, deviation } = self.coordinates(query);
        if s < 0.0 || s > self.support_length() {
            return 0.0;
        }
        let sigma = self.width(s);
        self.height(s) * (-(deviation * deviation) / (2.0 * sigma * sigma)).exp()
    }
}

pub fn field_value(query: Vec2, field: &RiskField) -> f64 {
    field.value(query)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub s: f64,
    pub center_of_gravity: Vec2,
    pub rear_axle: Vec2,
}

/// Constant-control rollout of the kinematic model over `[0, t_p]`,
/// parameterized by the distance travelled by the rear axle.
pub fn predict_path(
    state: &VehicleState,
    u: &ControlInput,
    t_p: f64,
    vehicle: &VehicleParams,
) -> Vec<PathSample> {
    const SUBSTEPS_PER_SECOND: f64 = 50.0;
    let n = (t_p * SUBSTEPS_PER_SECOND).ceil().max(1.0) as usize;
    let h = t_p / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    let mut s = 0.0;
    let mut cur = *state;
    let mut rear = dynamics::rear_axle(&cur, vehicle);
    out.push(PathSample {
        s,
        center_of_gravity: cur.position(),
        rear_axle: rear,
    });
    for _ in 0..n {
        cur = dynamics::step(&cur, u, h, vehicle);
        let next_rear = dynamics::rear_axle(&cur, vehicle);
        s += next_rear.distance(rear);
        rear = next_rear;
        out.push(PathSample {
            s,
            center_of_gravity: cur.position(),
            rear_axle: rear,
        });
    }
    out
}

/// What the risk assessor needs to know about one vehicle.
#[derive(Debug, Clone, Copy)]
pub struct VehicleView<'a> {
    pub state: &'a VehicleState,
    pub control: &'a ControlInput,
    pub kappa: f64,
    pub params: &'a VehicleParams,
}

/// Risk that `other` poses to `host`: the field generated by `other`,
/// evaluated at `host`'s position.
pub fn assess(host: &VehicleView<'_>, other: &VehicleView<'_>, risk: &RiskParams) -> f64 {
    RiskField::new(other.state, other.control, other.kappa, risk, other.params).value(host.state.position())
}

/// Raw field values feeding the cost gates of one host vehicle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RiskReport {
    /// Field of the leading vehicle at the host.
    pub gamma_to_lv: Option<f64>,
    /// Per neighbor: (field of the neighbor at the host, field of the host at the neighbor).
    pub gamma_pairs: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GateWeights {
    pub log: f64,
    /// One weight per neighbor, in `RiskReport::gamma_pairs` order.
    pub lat: Vec<f64>,
}

/// Opens a gate (weight `omega0`) strictly above the safe value `gamma0`.
pub fn gate_weights(report: &RiskReport, gamma0: f64, omega0: f64) -> GateWeights {
    let open = |g: f64| if g > gamma0 { omega0 } else { 0.0 };
    GateWeights {
        log: report.gamma_to_lv.map_or(0.0, open),
        lat: report
            .gamma_pairs
            .iter()
            .map(|&(to_host, from_host)| if to_host > gamma0 || from_host > gamma0 { omega0 } else { 0.0 })
            .collect(),
    }
}

/// Samples `field` on a regular grid; rows are `(x, y, value)`.
pub fn raster(field: &RiskField, min: Vec2, max: Vec2, resolution: f64) -> Vec<(f64, f64, f64)> {
    let nx = ((max.x - min.x) / resolution).floor() as usize;
    let ny = ((max.y - min.y) / resolution).floor() as usize;
    let mut out = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let p = Vec2::new(min.x + i as f64 * resolution, min.y + j as f64 * resolution);
            out.push((p.x, p.y, field.value(p)));
        }
    }
    out
}
