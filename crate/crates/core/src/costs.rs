//! Per-vehicle decision cost and the Table-I style constraint vector.
//!
//! The cost blends a safety part (longitudinal, lateral and lane keeping)
//! with an efficiency part (squared time headway). Aggressiveness shifts the
//! blend toward efficiency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if (-1.0..=1.0).contains(&kappa) {
        Ok(())
    } else {
        Err(Error::Aggressiveness(kappa))
    }
}

/// Safety and efficiency weights `(k_s, k_e)` for aggressiveness `kappa`.
pub fn safety_efficiency_weights(kappa: f64) -> Result<(f64, f64)> {
    check_kappa(kappa)?;
    let safe = (1.0 - kappa).exp();
    let eff = (1.0 + kappa).exp();
    let total = safe + eff;
    Ok((safe / total, eff / total))
}

/// Share of a vehicle's engagement given to the grand coalition: a Gaussian
/// in `kappa` with zero mean and `sigma = 1/sqrt(2 pi)`, which reduces to
/// `exp(-pi kappa^2)`.
pub fn participation(kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let sigma = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    Ok(norm * (-(kappa * kappa) / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgentProfile {
    pub kappa: f64,
    pub k_s: f64,
    pub k_e: f64,
    pub p_sg: f64,
}

impl AgentProfile {
    pub fn new(kappa: f64) -> Result<Self> {
        let (k_s, k_e) = safety_efficiency_weights(kappa)?;
        Ok(Self {
            kappa,
            k_s,
            k_e,
            p_sg: participation(kappa)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    /// Regularizer in the lateral cost denominator.
    pub xi: f64,
    pub k_y_lk: f64,
    pub k_phi_lk: f64,
    /// Weight of the lane-keeping term inside the safety cost.
    pub omega_lk: f64,
    /// Headway distance used when there is no leader, and the cap on any gap (m).
    pub gap_cap: f64,
    /// Cap on the time headway as speed goes to zero (s). Large enough that
    /// the cap only binds at a crawl, so a stopped vehicle still gains from
    /// pulling away.
    pub thw_cap: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            xi: 0.01,
            k_y_lk: 1.0,
            k_phi_lk: 80.0,
            omega_lk: 1.0,
            gap_cap: 50.0,
            thw_cap: 1.0e4,
        }
    }
}

/// `(1 / TTC)^2` against the leader, or zero when the host is not closing in.
pub fn longitudinal_safety_cost(v_host: f64, v_lv: f64, gap: f64) -> Result<f64> {
    if !(gap > 0.0) {
        return Err(Error::CollisionState(gap));
    }
    let dv = v_host - v_lv;
    if dv < 0.0 {
        return Ok(0.0);
    }
    let inv_ttc = dv / gap;
    Ok(inv_ttc * inv_ttc)
}

/// Time for a vehicle to cover `distance` at `speed`; infinite when stopped.
pub fn time_to_point(distance: f64, speed: f64) -> f64 {
    if speed > 0.0 {
        distance / speed
    } else {
        f64::INFINITY
    }
}

/// Lateral cost at one conflict point from both vehicles' arrival times.
/// Peaks at `1/xi` when both arrive together; zero if either never arrives.
pub fn lateral_safety_cost(ttc_host: f64, ttc_nv: f64, xi: f64) -> f64 {
    if !ttc_host.is_finite() || !ttc_nv.is_finite() {
        return 0.0;
    }
    let d = ttc_host - ttc_nv;
    1.0 / (d * d + xi)
}

/// Picks the conflict point that carries the lateral cost: the nearest one
/// ahead whose gate is open. `cps` holds `(distance ahead, gate open)`.
pub fn select_active_cp(cps: &[(f64, bool)]) -> Option<usize> {
    cps.iter()
        .enumerate()
        .filter(|(_, &(dist, open))| open && dist >= 0.0)
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

pub fn lane_keeping_cost(dy: f64, dphi: f64, params: &CostParams) -> f64 {
    params.k_y_lk * dy * dy + params.k_phi_lk * dphi * dphi
}

/// Squared time headway. The headway saturates at `thw_cap` for a stopped
/// (or nearly stopped) vehicle.
pub fn efficiency_cost(gap: f64, v_host: f64, params: &CostParams) -> f64 {
    let thw = if v_host > 0.0 {
        (gap / v_host).min(params.thw_cap)
    } else if gap > 0.0 {
        params.thw_cap
    } else {
        0.0
    };
    thw * thw
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct SubCosts {
    pub log: f64,
    pub lat: f64,
    pub lk: f64,
    pub eff: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostWeights {
    pub log: f64,
    pub lat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostBreakdown {
    pub v_s_log: f64,
    pub v_s_lat: f64,
    pub v_s_lk: f64,
    pub v_s: f64,
    pub v_e: f64,
    pub v_total: f64,
}

pub fn total_cost(profile: &AgentProfile, sub: &SubCosts, weights: &CostWeights, params: &CostParams) -> CostBreakdown {
    let v_s = weights.log * sub.log + weights.lat * sub.lat + params.omega_lk * sub.lk;
    CostBreakdown {
        v_s_log: sub.log,
        v_s_lat: sub.lat,
        v_s_lk: sub.lk,
        v_s,
        v_e: sub.eff,
        v_total: profile.k_s * v_s + profile.k_e * sub.eff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintBounds {
    pub ttc_min: f64,
    pub dy_max: f64,
    /// rad
    pub dphi_max: f64,
    pub v_max: f64,
    pub jerk_max: f64,
    pub a_max: f64,
    /// rad
    pub delta_max: f64,
    /// Tire-road adhesion coefficient.
    pub mu: f64,
    pub gravity: f64,
}

impl Default for ConstraintBounds {
    fn default() -> Self {
        Self {
            ttc_min: 1.5,
            dy_max: 0.2,
            dphi_max: 2f64.to_radians(),
            v_max: 8.0,
            jerk_max: 2.0,
            a_max: 8.0,
            delta_max: 30f64.to_radians(),
            mu: 0.85,
            gravity: 9.81,
        }
    }
}

impl ConstraintBounds {
    /// Sideslip bound for lateral stability.
    pub fn beta_max(&self) -> f64 {
        (0.02 * self.mu * self.gravity).atan()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let fields = [
            ("ttc_min", self.ttc_min),
            ("dy_max", self.dy_max),
            ("dphi_max", self.dphi_max),
            ("v_max", self.v_max),
            ("jerk_max", self.jerk_max),
            ("a_max", self.a_max),
            ("delta_max", self.delta_max),
            ("mu", self.mu),
            ("gravity", self.gravity),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("bounds.{name}"), "must be strictly positive"));
            }
        }
        Ok(())
    }
}

/// Quantities of a predicted outcome that the constraints bound.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConstraintInputs {
    /// Smallest TTC over gated conflicts; `None` when nothing is gated.
    pub ttc: Option<f64>,
    pub dy: f64,
    pub dphi: f64,
    pub v_x: f64,
    pub jerk: f64,
    pub a_x: f64,
    pub delta_f: f64,
    pub beta: f64,
}

/// Slack on every residual, enough to absorb rounding at the bounds.
pub const FEASIBILITY_TOL: f64 = 1e-9;

/// Residuals `value - bound`; a constraint holds when its residual is <= 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ConstraintVector {
    pub ttc: f64,
    pub dy: f64,
    pub dphi: f64,
    pub v_x: f64,
    pub jerk: f64,
    pub a_x: f64,
    pub delta_f: f64,
    pub beta: f64,
}

impl ConstraintVector {
    pub fn as_array(&self) -> [f64; 8] {
        [self.ttc, self.dy, self.dphi, self.v_x, self.jerk, self.a_x, self.delta_f, self.beta]
    }

    pub fn max_residual(&self) -> f64 {
        self.as_array().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn feasible(&self) -> bool {
        self.feasible_within(FEASIBILITY_TOL)
    }

    pub fn feasible_within(&self, tol: f64) -> bool {
        self.max_residual() <= tol
    }
}

pub fn evaluate_constraints(q: &ConstraintInputs, bounds: &ConstraintBounds) -> ConstraintVector {
    ConstraintVector {
        ttc: q.ttc.map_or(f64::NEG_INFINITY, |t| bounds.ttc_min - t),
        dy: q.dy.abs() - bounds.dy_max,
        dphi: q.dphi.abs() - bounds.dphi_max,
        v_x: q.v_x - bounds.v_max,
        jerk: q.jerk.abs() - bounds.jerk_max,
        a_x: q.a_x.abs() - bounds.a_max,
        delta_f: q.delta_f.abs() - bounds.delta_max,
        beta: q.beta.abs() - bounds.beta_max(),
    }
}
