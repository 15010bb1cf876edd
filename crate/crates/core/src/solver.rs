//! Small box-constrained minimizer over two variables with extra
//! feasibility checks, used for each vehicle's best response.
//!
//! Grid seeding finds a feasible basin; a projected Newton iteration on a
//! finite-difference quadratic model then polishes the best seed. Bound
//! constraints are handled by an active set, other constraints by rejecting
//! infeasible trial points in the line search.

use crate::costs::FEASIBILITY_TOL;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Bounds2 {
    pub fn project(&self, x: [f64; 2]) -> [f64; 2] {
        [x[0].clamp(self.lo[0], self.hi[0]), x[1].clamp(self.lo[1], self.hi[1])]
    }

    /// `n` evenly spaced values covering dimension `k`.
    pub fn linspace(&self, k: usize, n: usize) -> Vec<f64> {
        let (lo, hi) = (self.lo[k], self.hi[k]);
        if n <= 1 || hi <= lo {
            return vec![0.5 * (lo + hi)];
        }
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalSolverParams {
    pub fd_step: f64,
    pub max_newton_iters: usize,
    pub max_line_search: usize,
    /// Relative objective difference treated as a tie.
    pub tie_tolerance: f64,
}

impl Default for LocalSolverParams {
    fn default() -> Self {
        Self {
            fd_step: 1e-4,
            max_newton_iters: 8,
            max_line_search: 6,
            tie_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub x: [f64; 2],
    pub objective: f64,
    /// Largest constraint residual; feasible up to `FEASIBILITY_TOL`.
    pub residual: f64,
}

impl Trial {
    pub fn feasible(&self) -> bool {
        self.residual <= FEASIBILITY_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum {
    /// Best feasible point, or the least infeasible one when nothing is feasible.
    pub best: Trial,
    pub feasible: bool,
    pub evaluations: usize,
}

/// True when `a` should be preferred over `b`: lower objective, with ties
/// broken toward smaller `|x[0]|` and then smaller `|x[1]|`.
pub fn better(a: &Trial, b: &Trial, tol: f64) -> bool {
    let scale = tol * a.objective.abs().max(b.objective.abs()).max(1.0);
    if a.objective < b.objective - scale {
        return true;
    }
    if a.objective > b.objective + scale {
        return false;
    }
    let key = |t: &Trial| (t.x[0].abs(), t.x[1].abs());
    let (ka, kb) = (key(a), key(b));
    ka.0 < kb.0 || (ka.0 == kb.0 && ka.1 < kb.1)
}

pub fn minimize<F>(seeds: &[[f64; 2]], bounds: &Bounds2, params: &LocalSolverParams, mut eval: F) -> Minimum
where
    F: FnMut([f64; 2]) -> (f64, f64),
{
    assert!(!seeds.is_empty(), "minimize needs at least one seed");
    let mut evaluations = 0usize;
    let mut run = |x: [f64; 2]| {
        evaluations += 1;
        let (objective, residual) = eval(x);
        Trial { x, objective, residual }
    };

    let mut best_feasible: Option<Trial> = None;
    let mut least_bad: Option<Trial> = None;
    for seed in seeds {
        let t = run(bounds.project(*seed));
        if t.feasible() {
            if best_feasible.map_or(true, |b| better(&t, &b, params.tie_tolerance)) {
                best_feasible = Some(t);
            }
        } else if least_bad.map_or(true, |b| t.residual < b.residual) {
            least_bad = Some(t);
        }
    }

    let Some(mut cur) = best_feasible else {
        return Minimum {
            best: least_bad.expect("at least one seed was evaluated"),
            feasible: false,
            evaluations,
        };
    };

    let h = params.fd_step;
    for _ in 0..params.max_newton_iters {
        let (g, hess) = model(&mut run, cur, bounds, h);

        // bound-active variables whose gradient points outward are frozen
        let mut free = [true; 2];
        for k in 0..2 {
            let at_lo = cur.x[k] <= bounds.lo[k] && g[k] > 0.0;
            let at_hi = cur.x[k] >= bounds.hi[k] && g[k] < 0.0;
            let flat = bounds.hi[k] <= bounds.lo[k];
            free[k] = !(at_lo || at_hi || flat);
        }
        let Some(dir) = newton_direction(g, hess, free) else {
            break;
        };

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..params.max_line_search {
            let x = bounds.project([cur.x[0] + t * dir[0], cur.x[1] + t * dir[1]]);
            if x == cur.x {
                break;
            }
            let trial = run(x);
            if trial.feasible() && trial.objective < cur.objective {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else { break };
        let moved = (next.x[0] - cur.x[0]).abs().max((next.x[1] - cur.x[1]).abs());
        cur = next;
        if moved < 1e-9 {
            break;
        }
    }

    Minimum {
        best: cur,
        feasible: true,
        evaluations,
    }
}

/// Finite-difference gradient and Hessian at `cur`. Near a bound the
/// stencil is shifted inside the box.
fn model<R>(run: &mut R, cur: Trial, bounds: &Bounds2, h: f64) -> ([f64; 2], [[f64; 2]; 2])
where
    R: FnMut([f64; 2]) -> Trial,
{
    let mut c = cur.x;
    for k in 0..2 {
        if bounds.hi[k] - bounds.lo[k] > 2.0 * h {
            c[k] = c[k].clamp(bounds.lo[k] + h, bounds.hi[k] - h);
        }
    }
    let f = |run: &mut R, dx: f64, dy: f64| run([c[0] + dx, c[1] + dy]).objective;
    let f0 = if c == cur.x { cur.objective } else { f(run, 0.0, 0.0) };
    let fp0 = f(run, h, 0.0);
    let fm0 = f(run, -h, 0.0);
    let f0p = f(run, 0.0, h);
    let f0m = f(run, 0.0, -h);
    let fpp = f(run, h, h);
    let fmm = f(run, -h, -h);
    let g_c = [(fp0 - fm0) / (2.0 * h), (f0p - f0m) / (2.0 * h)];
    let hxx = (fp0 - 2.0 * f0 + fm0) / (h * h);
    let hyy = (f0p - 2.0 * f0 + f0m) / (h * h);
    let hxy = (fpp - fp0 - f0p + 2.0 * f0 - fm0 - f0m + fmm) / (2.0 * h * h);
    // shift the gradient back to the current point through the model
    let d = [cur.x[0] - c[0], cur.x[1] - c[1]];
    let g = [g_c[0] + hxx * d[0] + hxy * d[1], g_c[1] + hxy * d[0] + hyy * d[1]];
    (g, [[hxx, hxy], [hxy, hyy]])
}

fn newton_direction(g: [f64; 2], hess: [[f64; 2]; 2], free: [bool; 2]) -> Option<[f64; 2]> {
    const CURV_FLOOR: f64 = 1e-8;
    let mut dir = [0.0; 2];
    match free {
        [true, true] => {
            let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
            if hess[0][0] > CURV_FLOOR && det > CURV_FLOOR * CURV_FLOOR {
                dir[0] = -(hess[1][1] * g[0] - hess[0][1] * g[1]) / det;
                dir[1] = -(hess[0][0] * g[1] - hess[1][0] * g[0]) / det;
            } else {
                for k in 0..2 {
                    dir[k] = -g[k] / hess[k][k].abs().max(CURV_FLOOR.sqrt());
                }
            }
        }
        [false, false] => return None,
        _ => {
            let k = if free[0] { 0 } else { 1 };
            dir[k] = -g[k] / hess[k][k].abs().max(CURV_FLOOR.sqrt());
        }
    }
    if dir.iter().all(|d| d.is_finite()) && dir.iter().any(|d| *d != 0.0) {
        Some(dir)
    } else {
        None
    }
}
