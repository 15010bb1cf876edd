use serde::Serialize;

use crate::game::GameMode;

use super::runner::SimTrace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleMetrics {
    pub id: usize,
    /// Decision steps spent approaching or inside the conflict zone.
    pub steps: usize,
    pub v_max: f64,
    pub v_rms: f64,
    pub a_max: f64,
    pub a_rms: f64,
    pub jerk_max: f64,
    pub jerk_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairMetrics {
    pub a: usize,
    pub b: usize,
    /// `None` when the two were never in play together.
    pub min_distance: Option<f64>,
    /// `None` when the pair never had a defined TTC.
    pub min_ttc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: GameMode,
    pub risk_gating: bool,
    pub vehicles: Vec<VehicleMetrics>,
    pub system_v_rms: f64,
    pub pairs: Vec<PairMetrics>,
    /// Mean wall time of a decision step (s). Not serialized, so written
    /// reports stay reproducible.
    #[serde(skip)]
    pub mean_solve_time: f64,
    pub decision_steps: usize,
    pub end_time: f64,
    pub completed: bool,
    pub emergencies: usize,
    pub recoveries: usize,
    pub fallbacks: usize,
    /// Largest constraint residual over all decisions.
    pub max_residual: f64,
    /// No emergency or recovery action and every decision satisfied its constraints.
    pub feasible: bool,
}

fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn metrics(trace: &SimTrace) -> MetricsReport {
    use crate::game::Outcome;

    let mut vehicles = Vec::with_capacity(trace.vehicle_ids.len());
    let mut all_speeds = Vec::new();
    let mut emergencies = 0;
    let mut recoveries = 0;
    let mut fallbacks = 0;
    let mut max_residual = f64::NEG_INFINITY;
    let mut feasible = true;
    for (k, &id) in trace.vehicle_ids.iter().enumerate() {
        let (mut v, mut a, mut j) = (Vec::new(), Vec::new(), Vec::new());
        for step in &trace.steps {
            let r = &step.vehicles[k];
            let Some(outcome) = r.outcome else { continue };
            v.push(r.state.v_x);
            a.push(r.control.a_x);
            j.push(r.jerk);
            max_residual = max_residual.max(r.residual);
            feasible &= r.feasible;
            match outcome {
                Outcome::Emergency => emergencies += 1,
                Outcome::Recovery => recoveries += 1,
                Outcome::Fallback => fallbacks += 1,
                Outcome::Solved => {}
            }
        }
        all_speeds.extend_from_slice(&v);
        vehicles.push(VehicleMetrics {
            id,
            steps: v.len(),
            v_max: max_abs(&v),
            v_rms: rms(&v),
            a_max: max_abs(&a),
            a_rms: rms(&a),
            jerk_max: max_abs(&j),
            jerk_rms: rms(&j),
        });
    }

    let pairs = trace
        .conflicting_pairs
        .iter()
        .map(|&(a, b)| {
            let mut min_distance: Option<f64> = None;
            let mut min_ttc: Option<f64> = None;
            for rec in trace.steps.iter().flat_map(|s| &s.pairs).filter(|p| p.a == a && p.b == b) {
                min_distance = Some(min_distance.map_or(rec.distance, |m| m.min(rec.distance)));
                if let Some(t) = rec.ttc.filter(|t| t.is_finite()) {
                    min_ttc = Some(min_ttc.map_or(t, |m| m.min(t)));
                }
            }
            PairMetrics {
                a,
                b,
                min_distance,
                min_ttc,
            }
        })
        .collect();

    let times: Vec<f64> = trace.steps.iter().filter_map(|s| s.solve_time).collect();
    MetricsReport {
        scenario: trace.scenario.clone(),
        mode: trace.mode,
        risk_gating: trace.risk_gating,
        vehicles,
        system_v_rms: rms(&all_speeds),
        pairs,
        mean_solve_time: if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 },
        decision_steps: times.len(),
        end_time: trace.steps.last().map_or(0.0, |s| s.time),
        completed: trace.completed,
        emergencies,
        recoveries,
        fallbacks,
        max_residual: if max_residual.is_finite() { max_residual } else { 0.0 },
        feasible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rms_of_constant() {
        assert_eq!(rms(&[5.0; 7]), 5.0);
        assert_eq!(rms(&[]), 0.0);
        assert_eq!(max_abs(&[-3.0, 2.0]), 3.0);
    }
}
