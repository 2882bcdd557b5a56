//! All-at-once transcription.
//!
//! Decision variables are every node state `z_1 … z_N` (the initial state is
//! pinned) and every node control, with RK4 defects
//! `c_k = z_{k+1} − Ψ(z_k, u_k, u_{k+1}) = 0`. Each iteration takes a Newton
//! step on the first-order conditions (Lagrangian Hessian with exact
//! constraint curvature, constraints linearized), computed by a Riccati sweep
//! over the banded structure. Steps are globalized on the augmented
//! Lagrangian merit
//!
//! ```text
//! M_ρ(z, u, λ) = J − Σ λ_{k+1}ᵀ c_k + (ρ/2) Σ ‖c_k‖²
//! ```
//!
//! searched jointly in the primal variables and the multipliers. The penalty
//! starts at `initial_penalty` and grows by `penalty_growth` whenever the
//! step would not be a sufficient descent direction for the merit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::riccati::{self, Model, Shift};
use super::sensitivity::{step_curvature, step_sensitivity, StepSensitivity};
use super::shooting::adjoint_sweep;
use super::{check_start, Instance, MeritStep, SolverReport};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::ocp;
use crate::sim::{open_loop_step, rollout_open_loop, LinearizablePlant, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllAtOnceConfig {
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_iterations: usize,
    /// Required max defect norm.
    pub feasibility_tolerance: f64,
    /// Required reduced-gradient norm, relative to `1 + |J|`.
    pub stationarity_tolerance: f64,
}

impl Default for AllAtOnceConfig {
    fn default() -> Self {
        AllAtOnceConfig {
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_iterations: 500,
            feasibility_tolerance: 1e-6,
            stationarity_tolerance: 1e-5,
        }
    }
}

#[derive(Clone)]
struct Point {
    states: Vec<State>,
    u: Vec<f64>,
    /// `costates[k]` multiplies the defect of step `k − 1`.
    costates: Vec<State>,
}

/// Largest defect a trial step may create beyond twice the current one.
const DEFECT_SLACK: f64 = 1.0;

fn cost<P: LinearizablePlant>(inst: &Instance<'_, P>, states: &[State], u: &[f64]) -> f64 {
    let n = inst.grid.n_steps;
    let running: f64 = (0..=n).map(|k| inst.node_cost(k, &states[k], u[k])).sum();
    running + inst.terminal(&states[n])
}

/// `f_k = Ψ_k − z_{k+1}`, i.e. minus the defect.
fn gaps<P: LinearizablePlant>(inst: &Instance<'_, P>, states: &[State], u: &[f64]) -> Option<Vec<State>> {
    let grid = &inst.grid;
    let dt = grid.dt();
    (0..grid.n_steps)
        .map(|k| {
            let f = open_loop_step(&inst.plant, grid.time(k), dt, &states[k], u[k], u[k + 1]) - states[k + 1];
            f.is_finite().then_some(f)
        })
        .collect()
}

fn merit(value: f64, costates: &[State], gaps: &[State], rho: f64) -> f64 {
    let mut m = value;
    for (k, f) in gaps.iter().enumerate() {
        m += costates[k + 1].dot(f) + 0.5 * rho * f.norm_sq();
    }
    m
}

fn max_norm(gaps: &[State]) -> f64 {
    gaps.iter().map(State::norm).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Max defect norm and reduced-gradient norm at `(states, u)`.
fn kkt_error<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    states: &[State],
    u: &[f64],
    grad: &mut [f64],
) -> Option<(f64, f64)> {
    let grid = &inst.grid;
    let mut steps = Vec::with_capacity(grid.n_steps);
    let mut feasibility: f64 = 0.0;
    for k in 0..grid.n_steps {
        let s = step_sensitivity(&inst.plant, grid.time(k), grid.dt(), &states[k], u[k], u[k + 1]);
        let f = s.next - states[k + 1];
        if !f.is_finite() {
            return None;
        }
        feasibility = feasibility.max(f.norm());
        steps.push(s);
    }
    adjoint_sweep(inst, states, u, &steps, grad);
    Some((feasibility, norm(grad)))
}

fn solver_error(what: &str) -> Error {
    Error::Solver(format!("all-at-once: {what}"))
}

/// All-at-once solve from initial state `x`. Starts from zero controls, the
/// matching uncontrolled rollout and its discrete costates.
pub fn solve_all_at_once<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    cfg: &AllAtOnceConfig,
) -> Result<(Trajectory, SolverReport)> {
    let started = Instant::now();
    check_start(x, &inst.grid)?;
    let grid = &inst.grid;
    let n = grid.n_steps;
    let dt = grid.dt();
    let w = &inst.weights;
    let init = rollout_open_loop(*x, &vec![0.0; n + 1], grid, &inst.plant)?;
    let mut pt = Point {
        states: init.states,
        u: init.controls,
        costates: Vec::new(),
    };
    let mut grad = vec![0.0; n + 1];
    let mut steps: Vec<StepSensitivity> = Vec::with_capacity(n);
    let mut curvature = vec![[[0.0; 6]; 6]; n];
    let mut rho = cfg.initial_penalty;
    let mut shift: f64 = 0.0;
    let mut iterations = 0;
    let mut merit_history = Vec::new();
    let mut converged = false;

    loop {
        steps.clear();
        let mut f = Vec::with_capacity(n);
        for k in 0..n {
            let s = step_sensitivity(&inst.plant, grid.time(k), dt, &pt.states[k], pt.u[k], pt.u[k + 1]);
            f.push(s.next - pt.states[k + 1]);
            steps.push(s);
        }
        let value = cost(inst, &pt.states, &pt.u);
        let exact = adjoint_sweep(inst, &pt.states, &pt.u, &steps, &mut grad);
        if pt.costates.is_empty() {
            pt.costates = exact;
        }
        let feasibility = max_norm(&f);
        let stationarity = norm(&grad);
        log::debug!("all-at-once {iterations}: J {value:.6} feasibility {feasibility:e} stationarity {stationarity:e} rho {rho:e}");
        if feasibility <= cfg.feasibility_tolerance
            && stationarity <= cfg.stationarity_tolerance * (1.0 + value.abs())
        {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iterations {
            break;
        }

        for k in 0..n {
            curvature[k] = step_curvature(
                &inst.plant,
                grid.time(k),
                dt,
                &pt.states[k],
                pt.u[k],
                pt.u[k + 1],
                &pt.costates[k + 1],
            );
        }
        let model = Model {
            states: &pt.states,
            u: &pt.u,
            steps: &steps,
            curvature: &curvature,
            defects: Some(&f),
        };
        let gap_sq: f64 = f.iter().map(State::norm_sq).sum();
        let lam_f: f64 = (0..n).map(|k| pt.costates[k + 1].dot(&f[k])).sum();
        let mut accepted = None;
        while shift <= 1e12 {
            let Some(sw) = riccati::sweep(inst, &model, Shift { control: shift, state: shift }) else {
                shift = (shift * 10.0).max(1e-4);
                continue;
            };
            let d = sw.linear_step(&model);

            // Quadratic model of J along the step.
            let mut slope_j = 0.0;
            let mut curv = 0.0;
            for k in 0..=n {
                let wk = grid.trapezoid_weight(k);
                let e = pt.states[k] - *inst.target(k);
                let mut hz = w.q * wk;
                let mut gz = e * (w.q * wk);
                if k == n {
                    hz += 1.0;
                    gz += e;
                }
                slope_j += gz.dot(&d.dz[k]) + 2.0 * w.lambda * wk * pt.u[k] * d.du[k];
                curv += hz * d.dz[k].norm_sq() + 2.0 * w.lambda * wk * d.du[k] * d.du[k];
            }
            for k in 0..n {
                let p = [d.dz[k].0[0], d.dz[k].0[1], d.dz[k].0[2], d.dz[k].0[3], d.du[k], d.du[k + 1]];
                for i in 0..6 {
                    curv += p[i] * (0..6).map(|j| curvature[k][i][j] * p[j]).sum::<f64>();
                }
            }
            // The linearized defects vanish after the step, so the merit model
            // predicts a decrease of A + ρ‖f‖²/2; keep it at least ρ‖f‖²/4.
            let a_term = -slope_j - 0.5 * curv + lam_f;
            if gap_sq > 0.0 {
                while a_term + 0.25 * rho * gap_sq < 0.0 {
                    rho *= cfg.penalty_growth;
                }
            }
            let predicted = a_term + 0.5 * rho * gap_sq;
            if !(predicted > 0.0) {
                shift = (shift * 10.0).max(1e-4);
                continue;
            }

            let before = merit(value, &pt.costates, &f, rho);
            let trial_states: Vec<State> = pt.states.iter().zip(&d.dz).map(|(z, dz)| *z + *dz).collect();
            let trial_u: Vec<f64> = pt.u.iter().zip(&d.du).map(|(u, du)| u + du).collect();
            if predicted < 1e-10 * (1.0 + before.abs()) {
                // Merit differences are round-off here; take the Newton step
                // if it reduces the first-order error instead.
                let improves = kkt_error(inst, &trial_states, &trial_u, &mut grad).is_some_and(|(feas, stat)| {
                    stat < stationarity && feas <= feasibility.max(cfg.feasibility_tolerance)
                });
                log::trace!("polish step with shift {shift:e}: {improves}");
                if improves {
                    shift = 0.0;
                    accepted = Some(Point {
                        states: trial_states,
                        u: trial_u,
                        costates: d.costates,
                    });
                    break;
                }
                shift = (shift * 10.0).max(1e-4);
                continue;
            }
            // The linearized defects are zero after the step; a trial whose
            // actual defects exceed the slack is outside the model's range.
            let slack = DEFECT_SLACK.max(2.0 * feasibility);
            let ratio = gaps(inst, &trial_states, &trial_u).filter(|g| max_norm(g) <= slack).map(|g| {
                let after = merit(cost(inst, &trial_states, &trial_u), &pt.costates, &g, rho);
                (after, (before - after) / predicted)
            });
            log::trace!("shift {shift:e} rho {rho:e} predicted {predicted:e} ratio {:?}", ratio.map(|r| r.1));
            match ratio {
                Some((after, r)) if r > 1e-4 => {
                    merit_history.push(MeritStep {
                        penalty: rho,
                        before,
                        after,
                    });
                    if r > 0.75 {
                        shift = if shift < 1e-4 { 0.0 } else { shift / 3.0 };
                    } else if r < 0.25 {
                        shift = (shift * 3.0).max(1e-4);
                    }
                    accepted = Some(Point {
                        states: trial_states,
                        u: trial_u,
                        costates: d.costates,
                    });
                    break;
                }
                _ => shift = (shift * 10.0).max(1e-4),
            }
        }
        match accepted {
            Some(next) => pt = next,
            // No decrease resolvable in floating point.
            None => break,
        }
        iterations += 1;
    }

    let f = gaps(inst, &pt.states, &pt.u).ok_or_else(|| solver_error("defects not finite"))?;
    steps.clear();
    for k in 0..n {
        steps.push(step_sensitivity(&inst.plant, grid.time(k), dt, &pt.states[k], pt.u[k], pt.u[k + 1]));
    }
    adjoint_sweep(inst, &pt.states, &pt.u, &steps, &mut grad);
    let mut traj = Trajectory {
        grid: *grid,
        states: pt.states,
        controls: pt.u,
        running_cost: None,
    };
    traj.running_cost = Some(ocp::cumulative_running_cost(&traj, w, inst.reference));
    let objective = ocp::objective(&traj, w, inst.reference);
    let report = SolverReport {
        method: "all-at-once".into(),
        objective,
        feasibility: max_norm(&f),
        stationarity: norm(&grad),
        iterations,
        converged,
        merit_history,
        wall_time: started.elapsed(),
    };
    Ok((traj, report))
}
