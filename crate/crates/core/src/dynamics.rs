//! Single-track kinematic vehicle model with a fixed-step RK4 integrator.
//!
//! State is `[v_x, phi, X_g, Y_g]` (speed, yaw, centre of gravity) and the
//! control is `[a_x, delta_f]` (longitudinal acceleration, front steer angle).

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub v_x: f64,
    pub phi: f64,
    pub x: f64,
    pub y: f64,
}

impl VehicleState {
    pub fn new(v_x: f64, phi: f64, x: f64, y: f64) -> Self {
        Self { v_x, phi, x, y }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a_x: f64,
    pub delta_f: f64,
}

impl ControlInput {
    pub const IDLE: ControlInput = ControlInput {
        a_x: 0.0,
        delta_f: 0.0,
    };

    pub fn new(a_x: f64, delta_f: f64) -> Self {
        Self { a_x, delta_f }
    }
}

/// Which trigonometric form drives the yaw-rate row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YawRateForm {
    /// `v_x tan(beta) / l_r`
    #[default]
    Tan,
    /// `v_x sin(beta) / l_r`, the textbook kinematic bicycle.
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub l_f: f64,
    pub l_r: f64,
    pub width: f64,
    pub yaw_rate_form: YawRateForm,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            l_f: 1.4,
            l_r: 1.4,
            width: 1.8,
            yaw_rate_form: YawRateForm::Tan,
        }
    }
}

impl VehicleParams {
    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (name, v) in [("l_f", self.l_f), ("l_r", self.l_r), ("width", self.width)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("vehicle.{name}"),
                    "must be strictly positive",
                ));
            }
        }
        Ok(())
    }
}

/// Time derivative of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateRate {
    pub dv_x: f64,
    pub dphi: f64,
    pub dx: f64,
    pub dy: f64,
}

pub(crate) fn sideslip_unchecked(delta_f: f64, params: &VehicleParams) -> f64 {
    (params.l_r / params.wheelbase() * delta_f.tan()).atan()
}

/// Sideslip angle at the centre of gravity.
pub fn sideslip(delta_f: f64, params: &VehicleParams) -> Result<f64> {
    if !(delta_f.abs() < FRAC_PI_2) {
        return Err(Error::SteerOutOfRange(delta_f));
    }
    Ok(sideslip_unchecked(delta_f, params))
}

pub fn derivative(state: &VehicleState, u: &ControlInput, params: &VehicleParams) -> StateRate {
    let beta = sideslip_unchecked(u.delta_f, params);
    let yaw_factor = match params.yaw_rate_form {
        YawRateForm::Tan => beta.tan(),
        YawRateForm::Sin => beta.sin(),
    };
    let (s, c) = (state.phi + beta).sin_cos();
    let cos_beta = beta.cos();
    StateRate {
        dv_x: u.a_x,
        dphi: state.v_x * yaw_factor / params.l_r,
        dx: state.v_x * c / cos_beta,
        dy: state.v_x * s / cos_beta,
    }
}

fn advance(state: &VehicleState, rate: &StateRate, h: f64) -> VehicleState {
    VehicleState {
        v_x: state.v_x + h * rate.dv_x,
        phi: state.phi + h * rate.dphi,
        x: state.x + h * rate.dx,
        y: state.y + h * rate.dy,
    }
}

/// One classical RK4 step without clamping or yaw wrapping.
pub(crate) fn rk4(state: &VehicleState, u: &ControlInput, h: f64, params: &VehicleParams) -> VehicleState {
    let k1 = derivative(state, u, params);
    let k2 = derivative(&advance(state, &k1, h / 2.0), u, params);
    let k3 = derivative(&advance(state, &k2, h / 2.0), u, params);
    let k4 = derivative(&advance(state, &k3, h), u, params);
    let w = h / 6.0;
    VehicleState {
        v_x: state.v_x + w * (k1.dv_x + 2.0 * k2.dv_x + 2.0 * k3.dv_x + k4.dv_x),
        phi: state.phi + w * (k1.dphi + 2.0 * k2.dphi + 2.0 * k3.dphi + k4.dphi),
        x: state.x + w * (k1.dx + 2.0 * k2.dx + 2.0 * k3.dx + k4.dx),
        y: state.y + w * (k1.dy + 2.0 * k2.dy + 2.0 * k3.dy + k4.dy),
    }
}

/// Integrates the model over `dt` with the control held constant.
///
/// A braking vehicle stops rather than reverses: when the speed would cross
/// zero inside the step, the step is split at the stopping time.
pub fn step(state: &VehicleState, u: &ControlInput, dt: f64, params: &VehicleParams) -> VehicleState {
    debug_assert!(dt > 0.0);
    let mut next = if u.a_x < 0.0 && state.v_x + u.a_x * dt < 0.0 {
        let t_stop = state.v_x / -u.a_x;
        let mut stopped = rk4(state, u, t_stop, params);
        stopped.v_x = 0.0;
        stopped
    } else {
        rk4(state, u, dt, params)
    };
    next.v_x = next.v_x.max(0.0);
    next.phi = normalize_angle(next.phi);
    next
}

/// Signed curvature of the rear-axle path.
pub fn path_curvature(delta_f: f64, params: &VehicleParams) -> f64 {
    delta_f.tan() / params.wheelbase()
}

pub fn rear_axle(state: &VehicleState, params: &VehicleParams) -> Vec2 {
    let (s, c) = state.phi.sin_cos();
    Vec2::new(state.x - params.l_r * c, state.y - params.l_r * s)
}

/// Rear-axle centre `G_r` and instantaneous turn centre `C`.
///
/// `C` sits `1/rho_r` from `G_r` along the rear-axle normal, on the side the
/// vehicle turns toward under [`derivative`] (left for positive steer).
/// Fails with [`Error::StraightPath`] when the steer angle is zero.
pub fn rear_axle_and_turn_center(
    state: &VehicleState,
    delta_f: f64,
    params: &VehicleParams,
) -> Result<(Vec2, Vec2)> {
    let rear = rear_axle(state, params);
    let rho = path_curvature(delta_f, params);
    if rho == 0.0 {
        return Err(Error::StraightPath);
    }
    let (s, c) = state.phi.sin_cos();
    Ok((rear, Vec2::new(rear.x - s / rho, rear.y + c / rho)))
}
