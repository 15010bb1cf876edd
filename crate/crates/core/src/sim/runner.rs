use std::time::Instant;

use serde::Serialize;

use crate::costs::{AgentProfile, CostBreakdown};
use crate::dynamics::{step, ControlInput, VehicleState};
use crate::error::Result;
use crate::game::{
    centerline_steer, control_box, participations, range_ttc, solve_with_participation, ConflictRef, GameMode,
    GameSettings, Leader, Neighbor, Outcome, Player,
};
use crate::geometry::Vec2;
use crate::network::{
    classify_relation, conflict_points, gap_ahead_on_lane, route_for, zone_role_at, Conflict, ConflictKind,
    Relation, Route, TrafficView, ZoneRole,
};
use crate::risk::{assess, gate_weights, RiskReport, VehicleView};

use super::config::ScenarioConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: GameMode,
    /// Overrides every player's participation with this value.
    pub forced_participation: Option<f64>,
    /// When false every safety term is weighted regardless of risk.
    pub risk_gating: bool,
}

impl RunOptions {
    pub fn new(mode: GameMode) -> Self {
        Self {
            mode,
            forced_participation: None,
            risk_gating: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleRecord {
    pub id: usize,
    pub state: VehicleState,
    /// Arc length along the vehicle's route.
    pub s: f64,
    pub role: ZoneRole,
    /// Control held from this step to the next.
    pub control: ControlInput,
    pub jerk: f64,
    pub gate_log: f64,
    /// Largest lateral gate weight over neighbours.
    pub gate_lat: f64,
    pub p_sg: f64,
    pub cost: CostBreakdown,
    /// Largest constraint residual of the chosen control.
    pub residual: f64,
    pub feasible: bool,
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Set when one vehicle leads the other or both still face a shared conflict point.
    pub ttc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub time: f64,
    pub vehicles: Vec<VehicleRecord>,
    pub pairs: Vec<PairRecord>,
    /// Wall time of the game solve (s); absent once no players remain.
    pub solve_time: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub evaluations: usize,
    pub coalition_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTrace {
    pub scenario: String,
    pub mode: GameMode,
    pub forced_participation: Option<f64>,
    pub risk_gating: bool,
    pub dt: f64,
    pub min_separation: f64,
    pub vehicle_ids: Vec<usize>,
    /// Pairs whose routes share a lane or cross, as `(id, id)` with the smaller id first.
    pub conflicting_pairs: Vec<(usize, usize)>,
    pub steps: Vec<StepRecord>,
    /// Every vehicle left the intersection before `t_end`.
    pub completed: bool,
}

struct Agent {
    id: usize,
    state: VehicleState,
    route: Route,
    profile: AgentProfile,
    control: ControlInput,
    exited: bool,
}

pub fn run(cfg: &ScenarioConfig) -> Result<SimTrace> {
    run_with(cfg, &RunOptions::new(cfg.mode))
}

pub fn run_with(cfg: &ScenarioConfig, opts: &RunOptions) -> Result<SimTrace> {
    cfg.validate()?;
    let net = cfg.build_network()?;
    let settings = GameSettings {
        vehicle: cfg.vehicle,
        costs: cfg.costs,
        bounds: cfg.bounds,
        solver: cfg.solver,
        dt: cfg.dt,
    };

    let mut specs = cfg.vehicles.clone();
    specs.sort_by_key(|v| v.id);
    let mut agents = Vec::with_capacity(specs.len());
    for v in &specs {
        let route = route_for(&net, v.entry_lane(), v.maneuver);
        let pos = Vec2::from(v.position);
        let heading = route.heading_at(route.project(pos).s);
        agents.push(Agent {
            id: v.id,
            state: VehicleState::new(v.speed, heading, pos.x, pos.y),
            route,
            profile: AgentProfile::new(v.kappa)?,
            control: ControlInput::IDLE,
            exited: false,
        });
    }

    let n = agents.len();
    let conflicts: Vec<Vec<Vec<Conflict>>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        Vec::new()
                    } else {
                        conflict_points(&net, &agents[i].route, &agents[j].route)
                    }
                })
                .collect()
        })
        .collect();
    let conflicting_pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| !conflicts[i][j].is_empty())
        .map(|(i, j)| (agents[i].id, agents[j].id))
        .collect();

    let mut steps = Vec::new();
    let mut completed = false;
    let total_steps = (cfg.t_end / cfg.dt).round() as usize;
    let mut prev_accel = vec![0.0; n];

    for k in 0..=total_steps {
        let time = k as f64 * cfg.dt;
        let s: Vec<f64> = agents.iter().map(|a| a.route.project(a.state.position()).s).collect();
        for (a, &s_a) in agents.iter_mut().zip(&s) {
            if !a.exited && zone_role_at(s_a, &a.route, &net) == ZoneRole::OV {
                a.exited = true;
            }
        }
        let roles: Vec<ZoneRole> = agents
            .iter()
            .zip(&s)
            .map(|(a, &s_a)| if a.exited { ZoneRole::OV } else { zone_role_at(s_a, &a.route, &net) })
            .collect();
        let player_idx: Vec<usize> = (0..n).filter(|&i| roles[i].is_player()).collect();
        if player_idx.is_empty() {
            completed = true;
            if n > 0 {
                steps.push(terminal_record(time, &agents, &s, &roles));
            }
            break;
        }
        if k == total_steps {
            steps.push(terminal_record(time, &agents, &s, &roles));
            break;
        }

        let view = |i: usize| TrafficView {
            state: &agents[i].state,
            route: &agents[i].route,
            s: s[i],
        };
        let slot = |i: usize| player_idx.iter().position(|&p| p == i).expect("player index");
        let omega0 = cfg.risk.omega0;

        let mut players: Vec<Player<'_>> = Vec::with_capacity(player_idx.len());
        let mut gate_lat = Vec::with_capacity(player_idx.len());
        for &i in &player_idx {
            let host = view(i);
            let mut leader: Option<(usize, f64)> = None;
            let mut nvs: Vec<usize> = Vec::new();
            for &j in &player_idx {
                if j == i {
                    continue;
                }
                match classify_relation(&host, &view(j), &conflicts[i][j]) {
                    Relation::LV => {
                        let gap = gap_ahead_on_lane(&host, &view(j)).expect("leader has a gap");
                        if leader.map_or(true, |(_, g)| gap < g) {
                            leader = Some((j, gap));
                        }
                    }
                    Relation::NV => nvs.push(j),
                    // without the risk screen every crossing vehicle stays in the game
                    Relation::IV if !opts.risk_gating && conflicts[i][j].iter().any(|c| c.kind != ConflictKind::Following) => {
                        nvs.push(j)
                    }
                    Relation::IV => {}
                }
            }

            let vv = |j: usize| VehicleView {
                state: &agents[j].state,
                control: &agents[j].control,
                kappa: agents[j].profile.kappa,
                params: &cfg.vehicle,
            };
            let report = RiskReport {
                gamma_to_lv: leader.map(|(j, _)| assess(&vv(i), &vv(j), &cfg.risk)),
                gamma_pairs: nvs
                    .iter()
                    .map(|&j| (assess(&vv(i), &vv(j), &cfg.risk), assess(&vv(j), &vv(i), &cfg.risk)))
                    .collect(),
            };
            let mut weights = gate_weights(&report, cfg.risk.gamma0, omega0);
            if !opts.risk_gating {
                weights.log = if leader.is_some() { omega0 } else { 0.0 };
                weights.lat.iter_mut().for_each(|w| *w = omega0);
            }
            gate_lat.push(weights.lat.iter().copied().fold(0.0, f64::max));

            let neighbors = nvs
                .iter()
                .zip(&weights.lat)
                .map(|(&j, &w)| Neighbor {
                    index: slot(j),
                    weight: w,
                    conflicts: conflicts[i][j]
                        .iter()
                        .filter(|c| c.kind != ConflictKind::Following)
                        .map(|c| ConflictRef {
                            s_host: c.s_on_a,
                            s_other: c.s_on_b,
                        })
                        .collect(),
                })
                .collect();
            players.push(Player {
                id: agents[i].id,
                state: agents[i].state,
                route: &agents[i].route,
                profile: agents[i].profile,
                prev_accel: prev_accel[i],
                warm_start: agents[i].control,
                leader: leader.map(|(j, _)| Leader {
                    index: slot(j),
                    weight: weights.log,
                }),
                neighbors,
            });
        }

        let p = match opts.forced_participation {
            Some(f) => vec![f; players.len()],
            None => participations(&players, opts.mode),
        };
        let started = Instant::now();
        let sol = solve_with_participation(&players, &settings, &p);
        let solve_time = started.elapsed().as_secs_f64();

        let mut records = Vec::with_capacity(n);
        let mut controls = vec![ControlInput::IDLE; n];
        for i in 0..n {
            let rec = match player_idx.iter().position(|&p| p == i) {
                Some(k) => {
                    let pl = &players[k];
                    controls[i] = sol.u_star[k];
                    VehicleRecord {
                        id: agents[i].id,
                        state: agents[i].state,
                        s: s[i],
                        role: roles[i],
                        control: sol.u_star[k],
                        jerk: (sol.u_star[k].a_x - prev_accel[i]) / cfg.dt,
                        gate_log: pl.leader.map_or(0.0, |l| l.weight),
                        gate_lat: gate_lat[k],
                        p_sg: sol.participation[k],
                        cost: sol.costs[k],
                        residual: sol.residuals[k].max_residual(),
                        feasible: sol.feasible[k],
                        outcome: Some(sol.outcomes[k]),
                    }
                }
                None => {
                    controls[i] = cruise_control(&agents[i], prev_accel[i], &settings);
                    passive_record(&agents[i], s[i], roles[i], controls[i], (controls[i].a_x - prev_accel[i]) / cfg.dt)
                }
            };
            records.push(rec);
        }

        let pairs = pair_records(&agents, &roles, &controls, &conflicts, &settings);
        steps.push(StepRecord {
            time,
            vehicles: records,
            pairs,
            solve_time: Some(solve_time),
            iterations: sol.iterations,
            converged: sol.converged,
            evaluations: sol.evaluations,
            coalition_cost: sol.coalition_cost,
        });

        for (i, a) in agents.iter_mut().enumerate() {
            a.state = step(&a.state, &controls[i], cfg.dt, &cfg.vehicle);
            a.control = controls[i];
            // braking ends when the vehicle comes to rest
            prev_accel[i] = if a.state.v_x <= 0.0 {
                controls[i].a_x.max(0.0)
            } else {
                controls[i].a_x
            };
        }
    }

    Ok(SimTrace {
        scenario: cfg.name.clone(),
        mode: opts.mode,
        forced_participation: opts.forced_participation,
        risk_gating: opts.risk_gating,
        dt: cfg.dt,
        min_separation: cfg.min_separation,
        vehicle_ids: agents.iter().map(|a| a.id).collect(),
        conflicting_pairs,
        steps,
        completed,
    })
}

/// Vehicles out of the game hold speed (within the jerk bound) and follow their lane.
fn cruise_control(agent: &Agent, prev_accel: f64, settings: &GameSettings) -> ControlInput {
    let pl = Player {
        id: agent.id,
        state: agent.state,
        route: &agent.route,
        profile: agent.profile,
        prev_accel,
        warm_start: agent.control,
        leader: None,
        neighbors: Vec::new(),
    };
    let bx = control_box(&pl, settings);
    ControlInput::new(0.0f64.clamp(bx.lo[0], bx.hi[0]), centerline_steer(&pl, settings))
}

fn passive_record(agent: &Agent, s: f64, role: ZoneRole, control: ControlInput, jerk: f64) -> VehicleRecord {
    VehicleRecord {
        id: agent.id,
        state: agent.state,
        s,
        role,
        control,
        jerk,
        gate_log: 0.0,
        gate_lat: 0.0,
        p_sg: 0.0,
        cost: CostBreakdown::default(),
        residual: 0.0,
        feasible: true,
        outcome: None,
    }
}

fn terminal_record(time: f64, agents: &[Agent], s: &[f64], roles: &[ZoneRole]) -> StepRecord {
    StepRecord {
        time,
        vehicles: agents
            .iter()
            .enumerate()
            .map(|(i, a)| passive_record(a, s[i], roles[i], a.control, 0.0))
            .collect(),
        pairs: Vec::new(),
        solve_time: None,
        iterations: 0,
        converged: true,
        evaluations: 0,
        coalition_cost: 0.0,
    }
}

fn velocity(state: &VehicleState, u: &ControlInput, settings: &GameSettings) -> Vec2 {
    let beta = crate::dynamics::sideslip_unchecked(u.delta_f, &settings.vehicle);
    Vec2::from_angle(state.phi + beta) * (state.v_x / beta.cos())
}

/// Distance and TTC for every conflicting pair with both vehicles in play.
///
/// The distance is taken now. The TTC is taken one step ahead under the
/// chosen controls, the same instant the decision's TTC constraint checks.
fn pair_records(
    agents: &[Agent],
    roles: &[ZoneRole],
    controls: &[ControlInput],
    conflicts: &[Vec<Vec<Conflict>>],
    settings: &GameSettings,
) -> Vec<PairRecord> {
    let n = agents.len();
    let next: Vec<VehicleState> = agents
        .iter()
        .zip(controls)
        .map(|(a, u)| step(&a.state, u, settings.dt, &settings.vehicle))
        .collect();
    let next_s: Vec<f64> = (0..n)
        .map(|k| agents[k].route.project(next[k].position()).s)
        .collect();
    let view = |k: usize| TrafficView {
        state: &next[k],
        route: &agents[k].route,
        s: next_s[k],
    };
    let lead_ttc = |host: usize, lead: usize| {
        gap_ahead_on_lane(&view(host), &view(lead)).map(|gap| {
            let dv = next[host].v_x - next[lead].v_x;
            if dv > 0.0 {
                gap / dv
            } else {
                f64::INFINITY
            }
        })
    };
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if conflicts[i][j].is_empty() || !roles[i].is_player() || !roles[j].is_player() {
                continue;
            }
            let ttc = match (lead_ttc(i, j), lead_ttc(j, i)) {
                (Some(t), _) | (None, Some(t)) => Some(t),
                (None, None) => {
                    let ahead = conflicts[i][j]
                        .iter()
                        .any(|c| c.kind != ConflictKind::Following && c.s_on_a >= next_s[i] && c.s_on_b >= next_s[j]);
                    ahead.then(|| {
                        range_ttc(
                            next[i].position(),
                            velocity(&next[i], &controls[i], settings),
                            next[j].position(),
                            velocity(&next[j], &controls[j], settings),
                        )
                    })
                }
            };
            out.push(PairRecord {
                a: agents[i].id,
                b: agents[j].id,
                distance: agents[i].state.position().distance(agents[j].state.position()),
                ttc,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::load_scenario;

    fn scenario(name: &str) -> ScenarioConfig {
        load_scenario(format!("{}/../../scenarios/{name}.toml", env!("CARGO_MANIFEST_DIR"))).unwrap()
    }

    #[test]
    fn empty_scenario_completes_without_steps() {
        let cfg = ScenarioConfig::from_toml("version = 1\nname = \"empty\"\n").unwrap();
        let trace = run(&cfg).unwrap();
        assert!(trace.completed);
        assert!(trace.steps.is_empty());
        assert!(trace.vehicle_ids.is_empty());
    }

    #[test]
    fn horizon_cut_short_is_reported_incomplete() {
        let mut cfg = scenario("case1_A");
        cfg.t_end = 0.5;
        let trace = run(&cfg).unwrap();
        assert!(!trace.completed);
        assert_eq!(trace.steps.len(), 6);
        assert_eq!(trace.steps.last().unwrap().solve_time, None);
    }

    #[test]
    fn case1_records_every_vehicle_each_step() {
        let trace = run(&scenario("case1_A")).unwrap();
        assert!(trace.completed);
        assert_eq!(trace.vehicle_ids, vec![1, 2, 3]);
        assert_eq!(trace.conflicting_pairs, vec![(1, 2), (1, 3)]);
        for st in &trace.steps {
            assert_eq!(st.vehicles.len(), 3);
            for v in &st.vehicles {
                assert!(v.state.v_x >= 0.0 && v.state.v_x <= 8.0 + 1e-9);
            }
        }
    }
}
