//! Fuzzy coalitional game over one decision step.
//!
//! Each player splits its engagement between the grand coalition (share
//! `p_sg`) and itself. A player minimizes `p_sg * V_sg + (1 - p_sg) * V_i`
//! over its own control, where `V_sg` is the participation-weighted sum of
//! all costs. Best responses are iterated in ascending id order until the
//! controls stop moving.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::costs::{
    efficiency_cost, evaluate_constraints, lane_keeping_cost, lateral_safety_cost, longitudinal_safety_cost,
    participation, select_active_cp, time_to_point, total_cost, AgentProfile, ConstraintBounds, ConstraintInputs,
    ConstraintVector, CostBreakdown, CostParams, CostWeights, SubCosts, FEASIBILITY_TOL,
};
use crate::dynamics::{sideslip_unchecked, step, ControlInput, VehicleParams, VehicleState};
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};
use crate::network::Route;
use crate::solver::{minimize, Bounds2, LocalSolverParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GameMode {
    #[default]
    Fuzzy,
    #[serde(alias = "noncoop")]
    Noncooperative,
    Grand,
}

impl GameMode {
    pub const ALL: [GameMode; 3] = [GameMode::Noncooperative, GameMode::Fuzzy, GameMode::Grand];

    /// Participation in the grand coalition for a player with `profile`.
    pub fn participation(self, profile: &AgentProfile) -> f64 {
        match self {
            GameMode::Fuzzy => profile.p_sg,
            GameMode::Noncooperative => 0.0,
            GameMode::Grand => 1.0,
        }
    }
}

impl fmt::Display for GameMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GameMode::Fuzzy => "fuzzy",
            GameMode::Noncooperative => "noncoop",
            GameMode::Grand => "grand",
        })
    }
}

impl FromStr for GameMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fuzzy" => Ok(GameMode::Fuzzy),
            "noncoop" | "noncooperative" => Ok(GameMode::Noncooperative),
            "grand" => Ok(GameMode::Grand),
            other => Err(Error::Parse(format!("unknown game mode `{other}`"))),
        }
    }
}

/// Split of one player's engagement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Participation {
    pub p_sg: f64,
}

impl Participation {
    pub fn from_kappa(kappa: f64) -> Result<Self> {
        Ok(Self {
            p_sg: participation(kappa)?,
        })
    }

    pub fn p_si(&self) -> f64 {
        1.0 - self.p_sg
    }
}

/// Grand-coalition cost and per-player self-coalition costs.
pub fn coalition_costs(v: &[f64], p_sg: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(v.len(), p_sg.len(), "cost and participation lengths differ");
    let v_sg = v.iter().zip(p_sg).map(|(v, p)| p * v).sum();
    let v_si = v.iter().zip(p_sg).map(|(v, p)| (1.0 - p) * v).collect();
    (v_sg, v_si)
}

/// Participation-weighted split of the coalition cost.
pub fn allocate(v_at_optimum: &[f64], p_sg: &[f64]) -> Vec<f64> {
    assert_eq!(v_at_optimum.len(), p_sg.len(), "cost and participation lengths differ");
    v_at_optimum.iter().zip(p_sg).map(|(v, p)| p * v).collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RationalityFlags {
    /// Per player: allocated cost is no more than going alone.
    pub individual: Vec<bool>,
    /// Allocations add up to the coalition cost.
    pub collective: bool,
    /// The coalition costs no more than all players alone.
    pub superadditive: bool,
}

impl RationalityFlags {
    pub fn all_hold(&self) -> bool {
        self.collective && self.superadditive && self.individual.iter().all(|&b| b)
    }
}

const RATIONALITY_TOL: f64 = 1e-9;

/// `standalone[i]` is the cost player `i` gets by engaging alone with the
/// same participation, i.e. `p_i` times its solo best-response cost.
pub fn rationality_check(allocation: &[f64], coalition_cost: f64, standalone: &[f64]) -> RationalityFlags {
    let tol = |x: f64| RATIONALITY_TOL * x.abs().max(1.0);
    let total: f64 = allocation.iter().sum();
    let alone: f64 = standalone.iter().sum();
    RationalityFlags {
        individual: allocation.iter().zip(standalone).map(|(h, s)| *h <= s + tol(*s)).collect(),
        collective: (total - coalition_cost).abs() <= tol(coalition_cost),
        superadditive: coalition_cost <= alone + tol(alone),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    pub max_sweeps: usize,
    /// Sweep convergence threshold on the largest control change.
    pub tolerance: f64,
    pub accel_grid: usize,
    pub steer_grid: usize,
    /// Half width of the steering seed window around the warm start (rad).
    pub steer_window: f64,
    /// Length of the constant-control rollout the TTC constraint is
    /// checked over (s). One decision step reacts too late to be met
    /// under the jerk bound.
    pub ttc_horizon: f64,
    pub local: LocalSolverParams,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            max_sweeps: 20,
            tolerance: 1e-3,
            accel_grid: 5,
            steer_grid: 9,
            steer_window: 4f64.to_radians(),
            ttc_horizon: 3.0,
            local: LocalSolverParams::default(),
        }
    }
}

impl SolverParams {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::config("solver.max_sweeps", "must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("solver.tolerance", "must be positive"));
        }
        if self.accel_grid == 0 || self.steer_grid == 0 {
            return Err(Error::config("solver", "grids need at least one point"));
        }
        if !(self.steer_window >= 0.0) {
            return Err(Error::config("solver.steer_window", "must be non-negative"));
        }
        if !(self.ttc_horizon > 0.0) {
            return Err(Error::config("solver.ttc_horizon", "must be positive"));
        }
        if !(self.local.fd_step > 0.0) {
            return Err(Error::config("solver.local.fd_step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GameSettings {
    pub vehicle: VehicleParams,
    pub costs: CostParams,
    pub bounds: ConstraintBounds,
    pub solver: SolverParams,
    pub dt: f64,
}

/// The vehicle directly ahead in the same lane, by index into the player list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leader {
    pub index: usize,
    /// Gate weight of the longitudinal term; zero disables it.
    pub weight: f64,
}

/// A conflict point in the host's and the neighbour's route arc length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConflictRef {
    pub s_host: f64,
    pub s_other: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Gate weight of the lateral term; zero disables it.
    pub weight: f64,
    pub conflicts: Vec<ConflictRef>,
}

#[derive(Debug, Clone)]
pub struct Player<'a> {
    pub id: usize,
    pub state: VehicleState,
    pub route: &'a Route,
    pub profile: AgentProfile,
    pub prev_accel: f64,
    pub warm_start: ControlInput,
    pub leader: Option<Leader>,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Solved,
    /// Participation was reset to zero and the best response re-solved.
    Fallback,
    /// No feasible control and the TTC bound is broken: brake hard and
    /// steer toward the lane.
    Emergency,
    /// No feasible control but the TTC bound holds: the least-violating
    /// control is applied so the vehicle can work back into its lane.
    Recovery,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSolution {
    pub u_star: Vec<ControlInput>,
    pub costs: Vec<CostBreakdown>,
    pub coalition_cost: f64,
    pub allocation: Vec<f64>,
    /// Participation actually used, after any fallback.
    pub participation: Vec<f64>,
    pub residuals: Vec<ConstraintVector>,
    pub feasible: Vec<bool>,
    pub fallback_applied: Vec<bool>,
    pub outcomes: Vec<Outcome>,
    pub rationality: RationalityFlags,
    pub iterations: usize,
    pub converged: bool,
    /// Objective evaluations spent on this step.
    pub evaluations: usize,
}

/// One-step-ahead prediction of a player under a candidate control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub state: VehicleState,
    pub s: f64,
    pub dy: f64,
    pub dphi: f64,
    pub beta: f64,
}

impl Prediction {
    pub fn velocity(&self) -> Vec2 {
        let speed = self.state.v_x / self.beta.cos();
        Vec2::from_angle(self.state.phi + self.beta) * speed
    }
}

pub fn predict(player: &Player<'_>, u: &ControlInput, settings: &GameSettings) -> Prediction {
    let state = step(&player.state, u, settings.dt, &settings.vehicle);
    let beta = sideslip_unchecked(u.delta_f, &settings.vehicle);
    let proj = player.route.project(state.position());
    Prediction {
        state,
        s: proj.s,
        dy: proj.lateral,
        dphi: normalize_angle(state.phi + beta - proj.heading),
        beta,
    }
}

/// Time until the centre distance closes to zero at the current closing
/// rate; infinite when the pair is not closing.
pub fn range_ttc(p_a: Vec2, v_a: Vec2, p_b: Vec2, v_b: Vec2) -> f64 {
    let r = p_b - p_a;
    let dist = r.norm();
    let closing = -r.dot(v_b - v_a) / dist.max(f64::MIN_POSITIVE);
    if closing > 0.0 {
        dist / closing
    } else {
        f64::INFINITY
    }
}

/// Cost of player `i` given everyone's predicted next state.
pub fn evaluate_player(i: usize, players: &[Player<'_>], preds: &[Prediction], settings: &GameSettings) -> CostBreakdown {
    let me = &players[i];
    let mine = &preds[i];
    let cp = &settings.costs;
    let mut sub = SubCosts {
        lk: lane_keeping_cost(mine.dy, mine.dphi, cp),
        ..Default::default()
    };
    let mut weights = CostWeights::default();

    let mut headway = (me.route.total_length - mine.s).clamp(0.0, cp.gap_cap);
    if let Some(lead) = me.leader {
        let theirs = &preds[lead.index];
        let gap = me.route.project(theirs.state.position()).s - mine.s;
        headway = gap.clamp(0.0, cp.gap_cap);
        if lead.weight > 0.0 {
            weights.log = lead.weight;
            // a closed gap costs as much as a lateral conflict at zero time separation
            sub.log = longitudinal_safety_cost(mine.state.v_x, theirs.state.v_x, gap).unwrap_or(1.0 / cp.xi);
        }
    }
    sub.eff = efficiency_cost(headway, mine.state.v_x, cp);

    // conflict points still ahead of both vehicles
    let mut cps: Vec<(f64, bool)> = Vec::new();
    let mut owners: Vec<(usize, f64)> = Vec::new();
    for nb in &me.neighbors {
        let theirs = &preds[nb.index];
        for c in &nb.conflicts {
            let d_host = c.s_host - mine.s;
            let d_other = c.s_other - theirs.s;
            if d_host >= 0.0 && d_other >= 0.0 {
                cps.push((d_host, nb.weight > 0.0));
                owners.push((nb.index, d_other));
            }
        }
    }
    if let Some(k) = select_active_cp(&cps) {
        let (other, d_other) = owners[k];
        let nb_weight = me
            .neighbors
            .iter()
            .find(|n| n.index == other)
            .map_or(0.0, |n| n.weight);
        weights.lat = nb_weight;
        sub.lat = lateral_safety_cost(
            time_to_point(cps[k].0, mine.state.v_x),
            time_to_point(d_other, preds[other].state.v_x),
            cp.xi,
        );
    }

    total_cost(&me.profile, &sub, &weights, cp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPoint {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Arc length along the player's own route.
    pub s: f64,
    pub v_x: f64,
}

/// Rollout sampled every decision step, first sample one step ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct Track(pub Vec<TrackPoint>);

/// Extrapolates `u` over the TTC horizon. The first sample is the one-step
/// prediction; later samples follow the route, since the lane bounds keep
/// the vehicle on it. A braking trend is held until the acceleration
/// bound, so a vehicle that starts braking is credited with the braking it
/// is committing to; otherwise the acceleration is held.
pub fn rollout(player: &Player<'_>, u: &ControlInput, settings: &GameSettings) -> Track {
    let b = &settings.bounds;
    let dt = settings.dt;
    let n = ((settings.solver.ttc_horizon / dt).round() as usize).max(1);
    let da = (u.a_x - player.prev_accel).min(0.0);
    let first = predict(player, u, settings);
    let mut out = Vec::with_capacity(n);
    out.push(TrackPoint {
        position: first.state.position(),
        velocity: first.velocity(),
        s: first.s,
        v_x: first.state.v_x,
    });
    let (mut s, mut v) = (first.s, first.state.v_x);
    for k in 1..n {
        let mut a = (u.a_x + da * k as f64).clamp(-b.a_max, b.a_max);
        if v >= b.v_max {
            a = a.min(0.0);
        }
        let v_next = (v + a * dt).max(0.0);
        s = (s + 0.5 * (v + v_next) * dt).min(player.route.total_length);
        v = v_next;
        out.push(TrackPoint {
            position: player.route.point_at(s),
            velocity: Vec2::from_angle(player.route.heading_at(s)) * v,
            s,
            v_x: v,
        });
    }
    Track(out)
}

/// Smallest TTC to any gated leader or neighbour along the host's rollout,
/// or `None` when nothing is gated.
/// Smallest TTC over the rollouts against every gated leader and neighbour.
pub fn horizon_ttc(i: usize, players: &[Player<'_>], tracks: &[Track]) -> Option<f64> {
    let me = &players[i];
    let mine = &tracks[i].0;
    let mut ttc: Option<f64> = None;
    let mut note = |t: f64| ttc = Some(ttc.map_or(t, |cur: f64| cur.min(t)));

    if let Some(lead) = me.leader.filter(|l| l.weight > 0.0) {
        let theirs = &tracks[lead.index].0;
        let gap0 = me.route.project(theirs[0].position).s - mine[0].s;
        for (h, l) in mine.iter().zip(theirs) {
            let gap = gap0 + (l.s - theirs[0].s) - (h.s - mine[0].s);
            let dv = h.v_x - l.v_x;
            if gap <= 0.0 {
                note(0.0);
            } else if dv > 0.0 {
                note(gap / dv);
            }
        }
    }
    for nb in me.neighbors.iter().filter(|n| n.weight > 0.0) {
        let theirs = &tracks[nb.index].0;
        for (h, o) in mine.iter().zip(theirs) {
            let ahead = nb.conflicts.iter().any(|c| c.s_host >= h.s && c.s_other >= o.s);
            if ahead {
                note(range_ttc(h.position, h.velocity, o.position, o.velocity));
            }
        }
    }
    ttc
}

pub fn constraint_residuals(
    player: &Player<'_>,
    u: &ControlInput,
    pred: &Prediction,
    ttc: Option<f64>,
    settings: &GameSettings,
) -> ConstraintVector {
    let inputs = ConstraintInputs {
        ttc,
        dy: pred.dy,
        dphi: pred.dphi,
        v_x: pred.state.v_x,
        jerk: (u.a_x - player.prev_accel) / settings.dt,
        a_x: u.a_x,
        delta_f: u.delta_f,
        beta: pred.beta,
    };
    evaluate_constraints(&inputs, &settings.bounds)
}

/// Control box implied by the acceleration, jerk, speed, steer and
/// sideslip bounds.
///
/// The speed bound looks ahead: positive acceleration must be removable at
/// the jerk limit before the speed limit is reached.
pub fn control_box(player: &Player<'_>, settings: &GameSettings) -> Bounds2 {
    let b = &settings.bounds;
    let dt = settings.dt;
    let v = player.state.v_x;
    let step_jerk = b.jerk_max * dt;
    let mut a_lo = (-b.a_max).max(player.prev_accel - step_jerk);
    let mut a_hi = b.a_max.min(player.prev_accel + step_jerk);

    let headroom = b.v_max - v;
    let speed_cap = if headroom <= 0.0 {
        headroom / dt
    } else {
        // a^2/(2j) + 1.5 a dt - headroom <= 0
        let q = 1.5 * dt;
        b.jerk_max * (-q + (q * q + 2.0 * headroom / b.jerk_max).sqrt())
    };
    a_hi = a_hi.min(speed_cap);
    if a_hi < a_lo {
        // the jerk bound wins; any speed excess shows up in the residuals
        a_hi = a_lo;
    }
    a_lo = a_lo.min(a_hi);

    let vp = &settings.vehicle;
    let beta_steer = (vp.wheelbase() / vp.l_r * b.beta_max().tan()).atan();
    let d = b.delta_max.min(beta_steer) * (1.0 - 1e-12);
    Bounds2 {
        lo: [a_lo, -d],
        hi: [a_hi, d],
    }
}

/// Steering that points the vehicle at its route a short way ahead.
pub fn centerline_steer(player: &Player<'_>, settings: &GameSettings) -> f64 {
    let vp = &settings.vehicle;
    let proj = player.route.project(player.state.position());
    let lookahead = (2.0 * player.state.v_x).max(4.0);
    let target = player.route.point_at((proj.s + lookahead).min(player.route.total_length));
    let to_target = target - player.state.position();
    let alpha = normalize_angle(to_target.angle() - player.state.phi);
    let dist = to_target.norm().max(1e-6);
    let delta = (2.0 * vp.wheelbase() * alpha.sin() / dist).atan();
    let bx = control_box(player, settings);
    delta.clamp(bx.lo[1], bx.hi[1])
}

/// Full braking with the steer that best holds the lane.
pub fn emergency_control(player: &Player<'_>, settings: &GameSettings) -> ControlInput {
    const STEER_SCAN: usize = 33;
    let b = &settings.bounds;
    let bx = control_box(player, settings);
    let lane_violation = |u: &ControlInput| {
        let pred = predict(player, u, settings);
        (pred.dy.abs() - b.dy_max).max(pred.dphi.abs() - b.dphi_max)
    };
    let mut best = ControlInput::new(-b.a_max, centerline_steer(player, settings));
    let mut best_v = lane_violation(&best);
    for d in bx.linspace(1, STEER_SCAN) {
        let u = ControlInput::new(-b.a_max, d);
        let v = lane_violation(&u);
        if v < best_v - 1e-12 {
            best = u;
            best_v = v;
        }
    }
    best
}

/// Feedforward steer for the route curvature just ahead of the vehicle.
fn feedforward_steer(player: &Player<'_>, settings: &GameSettings) -> f64 {
    let vp = &settings.vehicle;
    let s = player.route.project(player.state.position()).s + player.state.v_x * settings.dt;
    let k = player.route.curvature_at(s.min(player.route.total_length));
    if k == 0.0 {
        return 0.0;
    }
    let r_cg = 1.0 / k.abs();
    let r_rear = (r_cg * r_cg - vp.l_r * vp.l_r).max(1e-6).sqrt();
    (vp.wheelbase() / r_rear).atan() * k.signum()
}

fn seeds(player: &Player<'_>, warm: &ControlInput, bx: &Bounds2, settings: &GameSettings) -> Vec<[f64; 2]> {
    let sp = &settings.solver;
    let accels = bx.linspace(0, sp.accel_grid);
    let mut steers: Vec<f64> = Vec::with_capacity(sp.steer_grid + 3);
    let center = warm.delta_f.clamp(bx.lo[1], bx.hi[1]);
    let window = Bounds2 {
        lo: [0.0, (center - sp.steer_window).max(bx.lo[1])],
        hi: [0.0, (center + sp.steer_window).min(bx.hi[1])],
    };
    steers.extend(window.linspace(1, sp.steer_grid));
    // coarse cover of the full range so a least-violation search can reach the limits
    steers.extend(bx.linspace(1, 5));
    steers.push(feedforward_steer(player, settings).clamp(bx.lo[1], bx.hi[1]));
    steers.push(centerline_steer(player, settings));
    steers.push(0.0);
    steers.sort_by(f64::total_cmp);
    steers.dedup();
    let warm_a = warm.a_x.clamp(bx.lo[0], bx.hi[0]);
    let mut out: Vec<[f64; 2]> = accels.iter().flat_map(|&a| steers.iter().map(move |&d| [a, d])).collect();
    out.push([warm_a, center]);
    out
}

/// Players whose cost depends on player `i`'s control, `i` first.
fn dependents(i: usize, players: &[Player<'_>]) -> Vec<usize> {
    let mut out = vec![i];
    for (j, pl) in players.iter().enumerate() {
        if j == i {
            continue;
        }
        let follows = pl.leader.is_some_and(|l| l.index == i);
        let gated = pl.neighbors.iter().any(|n| n.index == i && n.weight > 0.0);
        if follows || gated {
            out.push(j);
        }
    }
    out
}

fn is_gated(player: &Player<'_>) -> bool {
    player.leader.is_some_and(|l| l.weight > 0.0) || player.neighbors.iter().any(|n| n.weight > 0.0)
}

/// Scalarized objective and largest constraint residual of player `i`
/// under `u`, with the other players held at `preds` and `tracks`.
#[allow(clippy::too_many_arguments)]
fn objective_into(
    i: usize,
    u: &ControlInput,
    players: &[Player<'_>],
    deps: &[usize],
    gated: bool,
    p: &[f64],
    settings: &GameSettings,
    scratch: &mut [Prediction],
    scratch_tracks: &mut [Track],
) -> (f64, f64) {
    let me = &players[i];
    let p_i = p[i];
    scratch[i] = predict(me, u, settings);
    let own = evaluate_player(i, players, scratch, settings);
    let mut objective = (1.0 - p_i) * own.v_total;
    if p_i > 0.0 {
        objective += p_i * p_i * own.v_total;
        for &j in &deps[1..] {
            if p[j] > 0.0 {
                objective += p_i * p[j] * evaluate_player(j, players, scratch, settings).v_total;
            }
        }
    }
    let ttc = if gated {
        scratch_tracks[i] = rollout(me, u, settings);
        horizon_ttc(i, players, scratch_tracks)
    } else {
        None
    };
    let residual = constraint_residuals(me, u, &scratch[i], ttc, settings).max_residual();
    (objective, residual)
}

/// The objective player `i` minimizes in its best response, evaluated at
/// `u` against the other players' `controls`. Returns the objective and
/// the largest constraint residual.
pub fn objective_at(
    i: usize,
    u: &ControlInput,
    players: &[Player<'_>],
    controls: &[ControlInput],
    p: &[f64],
    settings: &GameSettings,
) -> (f64, f64) {
    let mut preds: Vec<Prediction> = players.iter().zip(controls).map(|(pl, c)| predict(pl, c, settings)).collect();
    let mut tracks: Vec<Track> = players.iter().zip(controls).map(|(pl, c)| rollout(pl, c, settings)).collect();
    let deps = dependents(i, players);
    objective_into(i, u, players, &deps, is_gated(&players[i]), p, settings, &mut preds, &mut tracks)
}

struct BestResponse {
    control: ControlInput,
    feasible: bool,
    evaluations: usize,
}

fn best_response(
    i: usize,
    players: &[Player<'_>],
    controls: &[ControlInput],
    preds: &[Prediction],
    tracks: &[Track],
    p: &[f64],
    settings: &GameSettings,
) -> BestResponse {
    let me = &players[i];
    let bx = control_box(me, settings);
    let deps = dependents(i, players);
    let seeds = seeds(me, &controls[i], &bx, settings);
    let mut scratch = preds.to_vec();
    let mut scratch_tracks = tracks.to_vec();
    let gated = is_gated(me);
    let m = minimize(&seeds, &bx, &settings.solver.local, |x| {
        let u = ControlInput::new(x[0], x[1]);
        objective_into(i, &u, players, &deps, gated, p, settings, &mut scratch, &mut scratch_tracks)
    });
    BestResponse {
        control: ControlInput::new(m.best.x[0], m.best.x[1]),
        feasible: m.feasible,
        evaluations: m.evaluations,
    }
}

/// Participation vector for `mode`.
pub fn participations(players: &[Player<'_>], mode: GameMode) -> Vec<f64> {
    players.iter().map(|pl| mode.participation(&pl.profile)).collect()
}

pub fn solve_step(players: &[Player<'_>], settings: &GameSettings, mode: GameMode) -> GameSolution {
    solve_with_participation(players, settings, &participations(players, mode))
}

/// Solves the step with an explicit participation vector.
pub fn solve_with_participation(players: &[Player<'_>], settings: &GameSettings, p_sg: &[f64]) -> GameSolution {
    assert_eq!(players.len(), p_sg.len(), "one participation per player");
    let n = players.len();
    let mut p = p_sg.to_vec();
    let mut controls: Vec<ControlInput> = players.iter().map(|pl| pl.warm_start).collect();
    let mut preds: Vec<Prediction> = players.iter().zip(&controls).map(|(pl, u)| predict(pl, u, settings)).collect();
    let mut tracks: Vec<Track> = players.iter().zip(&controls).map(|(pl, u)| rollout(pl, u, settings)).collect();
    let mut outcomes = vec![Outcome::Solved; n];
    let mut evaluations = 0usize;

    // solo best responses against the frozen warm start
    let mut standalone = vec![0.0; n];
    let zero = vec![0.0; n];
    for i in 0..n {
        if p[i] > 0.0 {
            let br = best_response(i, players, &controls, &preds, &tracks, &zero, settings);
            evaluations += br.evaluations;
            let mut trial = preds.clone();
            trial[i] = predict(&players[i], &br.control, settings);
            standalone[i] = p[i] * evaluate_player(i, players, &trial, settings).v_total;
        }
    }

    // During the sweeps an infeasible player keeps its least-violating
    // control so the others can make room; the emergency is only committed
    // once the fallback re-solve fails too.
    let respond = |i: usize,
                   p: &[f64],
                   commit: bool,
                   controls: &mut Vec<ControlInput>,
                   preds: &mut Vec<Prediction>,
                   tracks: &mut Vec<Track>,
                   outcomes: &mut Vec<Outcome>,
                   evaluations: &mut usize| {
        let br = best_response(i, players, controls, preds, tracks, p, settings);
        *evaluations += br.evaluations;
        let ttc_holds = || {
            let mut tr = tracks.clone();
            tr[i] = rollout(&players[i], &br.control, settings);
            let pred = predict(&players[i], &br.control, settings);
            constraint_residuals(&players[i], &br.control, &pred, horizon_ttc(i, players, &tr), settings).ttc
                <= FEASIBILITY_TOL
        };
        let u = if br.feasible {
            outcomes[i] = Outcome::Solved;
            br.control
        } else if !commit || ttc_holds() {
            outcomes[i] = Outcome::Recovery;
            br.control
        } else {
            outcomes[i] = Outcome::Emergency;
            emergency_control(&players[i], settings)
        };
        let change = (u.a_x - controls[i].a_x).abs().max((u.delta_f - controls[i].delta_f).abs());
        controls[i] = u;
        preds[i] = predict(&players[i], &u, settings);
        tracks[i] = rollout(&players[i], &u, settings);
        change
    };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.solver.max_sweeps {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for i in 0..n {
            let c = respond(i, &p, false, &mut controls, &mut preds, &mut tracks, &mut outcomes, &mut evaluations);
            max_change = max_change.max(c);
        }
        if max_change < settings.solver.tolerance {
            converged = true;
            break;
        }
    }

    // fallback: drop out of the coalition when infeasible or worse off than alone
    let costs_at = |preds: &[Prediction]| -> Vec<f64> {
        (0..n).map(|i| evaluate_player(i, players, preds, settings).v_total).collect()
    };
    let v = costs_at(&preds);
    let allocation = allocate(&v, &p);
    let coalition = coalition_costs(&v, &p).0;
    let flags = rationality_check(&allocation, coalition, &standalone);
    let mut fallback = vec![false; n];
    for i in 0..n {
        let infeasible = outcomes[i] != Outcome::Solved;
        if infeasible || !flags.individual[i] || !flags.superadditive && p[i] > 0.0 {
            fallback[i] = true;
            p[i] = 0.0;
            standalone[i] = 0.0;
            respond(i, &p, true, &mut controls, &mut preds, &mut tracks, &mut outcomes, &mut evaluations);
            if outcomes[i] == Outcome::Solved {
                outcomes[i] = Outcome::Fallback;
            }
        }
    }

    let evals: Vec<CostBreakdown> = (0..n).map(|i| evaluate_player(i, players, &preds, settings)).collect();
    let v: Vec<f64> = evals.iter().map(|e| e.v_total).collect();
    let allocation = allocate(&v, &p);
    let coalition_cost = coalition_costs(&v, &p).0;
    let rationality = rationality_check(&allocation, coalition_cost, &standalone);
    let residuals: Vec<ConstraintVector> = (0..n)
        .map(|i| constraint_residuals(&players[i], &controls[i], &preds[i], horizon_ttc(i, players, &tracks), settings))
        .collect();
    let feasible = residuals
        .iter()
        .zip(&outcomes)
        .map(|(r, o)| matches!(o, Outcome::Solved | Outcome::Fallback) && r.feasible())
        .collect();

    GameSolution {
        u_star: controls,
        costs: evals,
        coalition_cost,
        allocation,
        participation: p,
        residuals,
        feasible,
        fallback_applied: fallback,
        outcomes,
        rationality,
        iterations,
        converged,
        evaluations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, conflict_points, route_for, Arm, ConflictKind, LaneId, LaneKind, Maneuver, Network, RoadId};
    use approx::assert_relative_eq;

    fn net() -> Network {
        build_network(10.0, 2.0, 6.0).unwrap()
    }

    fn route(net: &Network, arm: Arm, maneuver: Maneuver) -> Route {
        let entry = LaneId {
            road: RoadId::inbound(arm),
            kind: LaneKind::Inner,
        };
        route_for(net, entry, maneuver)
    }

    fn settings() -> GameSettings {
        GameSettings {
            dt: 0.1,
            ..Default::default()
        }
    }

    fn player<'a>(id: usize, route: &'a Route, s: f64, v: f64, kappa: f64) -> Player<'a> {
        let p = route.point_at(s);
        Player {
            id,
            state: VehicleState::new(v, route.heading_at(s), p.x, p.y),
            route,
            profile: AgentProfile::new(kappa).unwrap(),
            prev_accel: 0.0,
            warm_start: ControlInput::IDLE,
            leader: None,
            neighbors: Vec::new(),
        }
    }

    fn link(players: &mut [Player<'_>], net: &Network, weight: f64) {
        let n = players.len();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let conflicts: Vec<ConflictRef> = conflict_points(net, players[i].route, players[j].route)
                    .iter()
                    .filter(|c| c.kind != ConflictKind::Following)
                    .map(|c| ConflictRef {
                        s_host: c.s_on_a,
                        s_other: c.s_on_b,
                    })
                    .collect();
                if !conflicts.is_empty() {
                    players[i].neighbors.push(Neighbor {
                        index: j,
                        weight,
                        conflicts,
                    });
                }
            }
        }
    }

    #[test]
    fn coalition_cost_examples() {
        let (v_sg, v_si) = coalition_costs(&[2.0, 4.0], &[0.5, 1.0]);
        assert_relative_eq!(v_sg, 5.0, epsilon = 1e-12);
        assert_eq!(v_si, vec![1.0, 0.0]);
        let (v_sg, v_si) = coalition_costs(&[3.0, 3.0, 3.0], &[0.0, 0.0, 0.0]);
        assert_eq!(v_sg, 0.0);
        assert_eq!(v_si, vec![3.0; 3]);
        let (v_sg, _) = coalition_costs(&[10.0], &[0.25]);
        assert_relative_eq!(v_sg, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate(&[2.0, 4.0], &[0.5, 1.0]), vec![1.0, 4.0]);
        assert_eq!(allocate(&[7.0], &[0.0]), vec![0.0]);
        let h = allocate(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]);
        // collective rationality holds by construction
        assert_relative_eq!(h.iter().sum::<f64>(), coalition_costs(&[1.0, 2.0, 3.0], &[1.0; 3]).0, epsilon = 1e-12);
    }

    #[test]
    fn rationality_examples() {
        let ok = rationality_check(&[1.0, 4.0], 5.0, &[1.5, 4.0]);
        assert!(ok.all_hold());
        let greedy = rationality_check(&[2.0, 3.0], 5.0, &[1.5, 4.0]);
        assert_eq!(greedy.individual, vec![false, true]);
        assert!(greedy.collective && greedy.superadditive);
        let worse = rationality_check(&[3.0, 3.0], 6.0, &[2.0, 2.0]);
        assert!(!worse.superadditive);
        let leaky = rationality_check(&[1.0, 1.0], 3.0, &[5.0, 5.0]);
        assert!(!leaky.collective);
    }

    #[test]
    fn mode_participation_and_names() {
        let profile = AgentProfile::new(0.5).unwrap();
        assert_eq!(GameMode::Noncooperative.participation(&profile), 0.0);
        assert_eq!(GameMode::Grand.participation(&profile), 1.0);
        assert_eq!(GameMode::Fuzzy.participation(&profile), profile.p_sg);
        for mode in GameMode::ALL {
            assert_eq!(mode.to_string().parse::<GameMode>().unwrap(), mode);
        }
        assert_eq!("noncooperative".parse::<GameMode>().unwrap(), GameMode::Noncooperative);
        assert!("selfish".parse::<GameMode>().is_err());
        assert_relative_eq!(Participation { p_sg: 0.3 }.p_si(), 0.7, epsilon = 1e-15);
    }

    #[test]
    fn rollout_holds_speed_along_a_straight_route() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Straight);
        let pl = player(1, &r, 5.0, 5.0, 0.0);
        let st = settings();
        let track = rollout(&pl, &ControlInput::IDLE, &st);
        assert_eq!(track.0.len(), 30);
        for (k, p) in track.0.iter().enumerate() {
            assert_relative_eq!(p.s, 5.0 + 0.5 * (k + 1) as f64, epsilon = 1e-6);
            assert_relative_eq!(p.v_x, 5.0, epsilon = 1e-12);
            assert_relative_eq!(p.velocity.norm(), 5.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rollout_extends_a_braking_trend_and_stops() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Straight);
        let pl = player(1, &r, 5.0, 3.0, 0.0);
        let track = rollout(&pl, &ControlInput::new(-1.0, 0.0), &settings());
        let v: Vec<f64> = track.0.iter().map(|p| p.v_x).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*v.last().unwrap(), 0.0);
        // a steady deceleration of 1 m/s^2 would still be moving after 3 s
        assert!(v[10] < 3.0 - 1.0 * 1.1);
    }

    #[test]
    fn horizon_ttc_against_a_slower_leader() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Straight);
        let mut players = vec![player(1, &r, 5.0, 8.0, 0.0), player(2, &r, 25.0, 4.0, 0.0)];
        let st = settings();
        let tracks: Vec<Track> = players.iter().map(|p| rollout(p, &ControlInput::IDLE, &st)).collect();
        assert_eq!(horizon_ttc(0, &players, &tracks), None);
        players[0].leader = Some(Leader { index: 1, weight: 10.0 });
        // gap closes by 0.4 m per step from 19.6 m; last sample after 3 s
        let ttc = horizon_ttc(0, &players, &tracks).unwrap();
        assert_relative_eq!(ttc, 8.0 / 4.0, epsilon = 1e-6);
        players[0].leader = Some(Leader { index: 1, weight: 0.0 });
        assert_eq!(horizon_ttc(0, &players, &tracks), None);
    }

    #[test]
    fn range_ttc_examples() {
        let z = Vec2::new(0.0, 0.0);
        assert_relative_eq!(range_ttc(z, Vec2::new(5.0, 0.0), Vec2::new(10.0, 0.0), z), 2.0, epsilon = 1e-12);
        assert_eq!(range_ttc(z, Vec2::new(-1.0, 0.0), Vec2::new(10.0, 0.0), z), f64::INFINITY);
        // head-on at 4 + 6 m/s over 20 m
        assert_relative_eq!(
            range_ttc(z, Vec2::new(4.0, 0.0), Vec2::new(20.0, 0.0), Vec2::new(-6.0, 0.0)),
            2.0,
            epsilon = 1e-12
        );
    }

    /// Brute-force oracle: best feasible objective on a dense grid of the control box.
    fn grid_oracle(i: usize, players: &[Player<'_>], controls: &[ControlInput], p: &[f64], st: &GameSettings) -> f64 {
        let bx = control_box(&players[i], st);
        let mut best = f64::INFINITY;
        for a in bx.linspace(0, 41) {
            for d in bx.linspace(1, 61) {
                let (obj, res) = objective_at(i, &ControlInput::new(a, d), players, controls, p, st);
                if res <= FEASIBILITY_TOL {
                    best = best.min(obj);
                }
            }
        }
        best
    }

    #[test]
    fn lone_vehicle_accelerates_at_the_jerk_bound() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Straight);
        let players = vec![player(1, &r, 5.0, 5.0, 0.0)];
        let st = settings();
        let sol = solve_step(&players, &st, GameMode::Fuzzy);
        assert!(sol.feasible[0]);
        assert_relative_eq!(sol.u_star[0].a_x, st.bounds.jerk_max * st.dt, epsilon = 1e-9);
        let (obj, _) = objective_at(0, &sol.u_star[0], &players, &sol.u_star, &sol.participation, &st);
        assert!(obj <= grid_oracle(0, &players, &sol.u_star, &sol.participation, &st) + 1e-9);
    }

    #[test]
    fn lone_vehicle_holds_the_speed_limit() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Straight);
        let players = vec![player(1, &r, 5.0, 8.0, 0.0)];
        let st = settings();
        let sol = solve_step(&players, &st, GameMode::Noncooperative);
        assert!(sol.feasible[0]);
        assert!(sol.u_star[0].a_x.abs() < 1e-9);
        let next = predict(&players[0], &sol.u_star[0], &st);
        assert!(next.state.v_x <= st.bounds.v_max + 1e-9);
    }

    fn crossing<'a>(west: &'a Route, south: &'a Route, net: &Network) -> Vec<Player<'a>> {
        let mut players = vec![player(1, west, 32.0, 6.0, 0.6), player(2, south, 33.0, 5.5, -0.3)];
        link(&mut players, net, 10.0);
        players
    }

    #[test]
    fn forced_participation_reproduces_the_pure_modes() {
        let n = net();
        let (w, s) = (route(&n, Arm::West, Maneuver::Straight), route(&n, Arm::South, Maneuver::Left));
        let players = crossing(&w, &s, &n);
        assert!(!players[0].neighbors.is_empty());
        let st = settings();
        let zero = solve_with_participation(&players, &st, &[0.0, 0.0]);
        let one = solve_with_participation(&players, &st, &[1.0, 1.0]);
        assert_eq!(zero.u_star, solve_step(&players, &st, GameMode::Noncooperative).u_star);
        assert_eq!(one.u_star, solve_step(&players, &st, GameMode::Grand).u_star);
    }

    #[test]
    fn solution_is_a_local_best_response() {
        let n = net();
        let (w, s) = (route(&n, Arm::West, Maneuver::Straight), route(&n, Arm::South, Maneuver::Left));
        let players = crossing(&w, &s, &n);
        let st = settings();
        for mode in GameMode::ALL {
            let sol = solve_step(&players, &st, mode);
            assert!(sol.converged);
            for i in 0..players.len() {
                let u = sol.u_star[i];
                let (base, _) = objective_at(i, &u, &players, &sol.u_star, &sol.participation, &st);
                for da in [-0.2, 0.0, 0.2] {
                    for dd in [-1f64.to_radians(), 0.0, 1f64.to_radians()] {
                        let v = ControlInput::new(u.a_x + da, u.delta_f + dd);
                        let (obj, res) = objective_at(i, &v, &players, &sol.u_star, &sol.participation, &st);
                        if res <= FEASIBILITY_TOL {
                            assert!(obj >= base - st.solver.tolerance * base.abs().max(1.0), "{mode} player {i}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let n = net();
        let (w, s) = (route(&n, Arm::West, Maneuver::Straight), route(&n, Arm::South, Maneuver::Left));
        let players = crossing(&w, &s, &n);
        let st = settings();
        let a = solve_step(&players, &st, GameMode::Fuzzy);
        let b = solve_step(&players, &st, GameMode::Fuzzy);
        assert_eq!(a, b);
    }

    #[test]
    fn emergency_brakes_fully() {
        let n = net();
        let r = route(&n, Arm::West, Maneuver::Left);
        let pl = player(1, &r, 30.0, 6.0, 0.0);
        let st = settings();
        let u = emergency_control(&pl, &st);
        assert_eq!(u.a_x, -st.bounds.a_max);
        let bx = control_box(&pl, &st);
        assert!(u.delta_f >= bx.lo[1] && u.delta_f <= bx.hi[1]);
    }
}
