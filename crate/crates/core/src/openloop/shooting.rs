use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsConfig};
use super::riccati::{self, Gain, Model, Shift};
use super::sensitivity::{step_curvature, step_sensitivity, StepSensitivity};
use super::{check_start, Instance, SolverReport};
use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::ocp;
use crate::sim::{open_loop_step, rollout_open_loop, LinearizablePlant, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShootingMethod {
    /// Newton steps from a Riccati sweep with exact second-order terms, rolled
    /// out through the sweep's feedback gains.
    Newton,
    /// L-BFGS on the adjoint gradient.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootingConfig {
    pub method: ShootingMethod,
    pub max_iterations: usize,
    /// Stop when `‖∇_u J‖ <= relative_tolerance · (1 + |J|)`.
    pub relative_tolerance: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl Default for ShootingConfig {
    fn default() -> Self {
        ShootingConfig {
            method: ShootingMethod::Newton,
            max_iterations: 1000,
            relative_tolerance: 1e-6,
            memory: 20,
        }
    }
}

/// Rollout of node controls with per-step derivatives.
pub(crate) struct Linearization {
    pub states: Vec<State>,
    pub steps: Vec<StepSensitivity>,
    pub value: f64,
}

pub(crate) fn linearize_rollout<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    u: &[f64],
) -> Option<Linearization> {
    let grid = &inst.grid;
    let n = grid.n_steps;
    let dt = grid.dt();
    let mut z = *x;
    let mut value = 0.0;
    let mut states = Vec::with_capacity(n + 1);
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        value += inst.node_cost(k, &z, u[k]);
        states.push(z);
        let s = step_sensitivity(&inst.plant, grid.time(k), dt, &z, u[k], u[k + 1]);
        z = s.next;
        if !z.is_finite() {
            return None;
        }
        steps.push(s);
    }
    states.push(z);
    value += inst.node_cost(n, &z, u[n]) + inst.terminal(&z);
    Some(Linearization { states, steps, value })
}

/// Reverse sweep along `states` (which need not be an exact rollout): fills
/// the control gradient and returns the discrete costates `λ_0 … λ_N`.
pub(crate) fn adjoint_sweep<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    states: &[State],
    u: &[f64],
    steps: &[StepSensitivity],
    grad: &mut [f64],
) -> Vec<State> {
    let grid = &inst.grid;
    let n = grid.n_steps;
    let w = &inst.weights;
    let mut costates = vec![State::ZERO; n + 1];
    let mut lam = (states[n] - *inst.target(n)) * (1.0 + w.q * grid.trapezoid_weight(n));
    costates[n] = lam;
    grad.iter_mut().for_each(|g| *g = 0.0);
    for k in (0..n).rev() {
        let s = &steps[k];
        grad[k] += (0..4).map(|i| s.d_u_start[i] * lam.0[i]).sum::<f64>();
        grad[k + 1] += (0..4).map(|i| s.d_u_end[i] * lam.0[i]).sum::<f64>();
        let mut prev = (states[k] - *inst.target(k)) * (w.q * grid.trapezoid_weight(k));
        for j in 0..4 {
            prev.0[j] += (0..4).map(|i| s.d_state[i][j] * lam.0[i]).sum::<f64>();
        }
        lam = prev;
        costates[k] = lam;
    }
    for (k, g) in grad.iter_mut().enumerate() {
        *g += 2.0 * w.lambda * grid.trapezoid_weight(k) * u[k];
    }
    costates
}

/// Discrete objective of node controls `u` and, when `grad` is given, its
/// exact gradient by a reverse sweep through the RK4 steps.
pub fn shooting_gradient<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    u: &[f64],
    grad: Option<&mut [f64]>,
) -> Option<f64> {
    let grid = &inst.grid;
    let n = grid.n_steps;
    let dt = grid.dt();
    match grad {
        None => {
            let mut z = *x;
            let mut value = 0.0;
            for k in 0..n {
                value += inst.node_cost(k, &z, u[k]);
                z = open_loop_step(&inst.plant, grid.time(k), dt, &z, u[k], u[k + 1]);
                if !z.is_finite() {
                    return None;
                }
            }
            Some(value + inst.node_cost(n, &z, u[n]) + inst.terminal(&z))
        }
        Some(grad) => {
            let lin = linearize_rollout(inst, x, u)?;
            adjoint_sweep(inst, &lin.states, u, &lin.steps, grad);
            Some(lin.value)
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adjoint-gradient single shooting from initial state `x`, starting at
/// `initial` controls (zero when `None`).
pub fn solve_shooting<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    initial: Option<&[f64]>,
    cfg: &ShootingConfig,
) -> Result<(Trajectory, SolverReport)> {
    let started = Instant::now();
    check_start(x, &inst.grid)?;
    let grid = &inst.grid;
    let n_nodes = grid.n_nodes();
    let u0 = match initial {
        Some(u) if u.len() == n_nodes => u.to_vec(),
        Some(u) => {
            return Err(Error::domain(format!(
                "expected {n_nodes} initial controls, got {}",
                u.len()
            )))
        }
        None => vec![0.0; n_nodes],
    };
    let (u, iterations) = match cfg.method {
        ShootingMethod::Newton => newton(inst, x, u0, cfg)?,
        ShootingMethod::Lbfgs => quasi_newton(inst, x, u0, cfg)?,
    };

    let mut grad = vec![0.0; n_nodes];
    shooting_gradient(inst, x, &u, Some(&mut grad))
        .ok_or_else(|| Error::Solver("shooting: final controls blow up the rollout".into()))?;
    let stationarity = norm(&grad);

    let mut traj = rollout_open_loop(*x, &u, grid, &inst.plant)?;
    traj.running_cost = Some(ocp::cumulative_running_cost(&traj, &inst.weights, inst.reference));
    let objective = ocp::objective(&traj, &inst.weights, inst.reference);
    let report = SolverReport {
        method: "shooting".into(),
        objective,
        feasibility: 0.0,
        stationarity,
        iterations,
        converged: stationarity <= cfg.relative_tolerance * (1.0 + objective.total.abs()),
        merit_history: Vec::new(),
        wall_time: started.elapsed(),
    };
    Ok((traj, report))
}

fn quasi_newton<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    u0: Vec<f64>,
    cfg: &ShootingConfig,
) -> Result<(Vec<f64>, usize)> {
    let grid = &inst.grid;
    let n_nodes = grid.n_nodes();
    let dt = grid.dt();
    // Optimize v_k = s_k u_k so the control-energy Hessian is uniform.
    let scale: Vec<f64> = (0..n_nodes)
        .map(|k| (grid.trapezoid_weight(k) / dt).sqrt())
        .collect();
    let v0: Vec<f64> = u0.iter().zip(&scale).map(|(u, s)| u * s).collect();
    let mut u_buf = vec![0.0; n_nodes];
    let objective = |v: &[f64], g: &mut [f64]| {
        for k in 0..n_nodes {
            u_buf[k] = v[k] / scale[k];
        }
        let value = shooting_gradient(inst, x, &u_buf, Some(g))?;
        for k in 0..n_nodes {
            g[k] /= scale[k];
        }
        Some(value)
    };
    let lb = LbfgsConfig {
        memory: cfg.memory,
        max_iterations: cfg.max_iterations,
        ..LbfgsConfig::default()
    };
    let rel = cfg.relative_tolerance;
    let out = lbfgs::minimize(objective, v0, |f| rel * (1.0 + f.abs()), &lb)
        .ok_or_else(|| Error::Solver("shooting: initial controls blow up the rollout".into()))?;
    Ok((out.x.iter().zip(&scale).map(|(v, s)| v / s).collect(), out.iterations))
}

/// Nonlinear rollout following the gains with feedforward scaled by `alpha`.
#[allow(clippy::too_many_arguments)]
fn feedback_rollout<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    lin: &Linearization,
    u: &[f64],
    gains: &[Gain],
    du0: f64,
    alpha: f64,
    out: &mut [f64],
) -> Option<f64> {
    let grid = &inst.grid;
    let dt = grid.dt();
    let n = grid.n_steps;
    out[0] = u[0] + alpha * du0;
    let mut z = *x;
    let mut value = 0.0;
    for k in 0..n {
        value += inst.node_cost(k, &z, out[k]);
        out[k + 1] = u[k + 1] + gains[k].apply(&(z - lin.states[k]), out[k] - u[k], alpha);
        z = open_loop_step(&inst.plant, grid.time(k), dt, &z, out[k], out[k + 1]);
        if !z.is_finite() {
            return None;
        }
    }
    Some(value + inst.node_cost(n, &z, out[n]) + inst.terminal(&z))
}

fn newton<P: LinearizablePlant>(
    inst: &Instance<'_, P>,
    x: &State,
    mut u: Vec<f64>,
    cfg: &ShootingConfig,
) -> Result<(Vec<f64>, usize)> {
    let grid = &inst.grid;
    let dt = grid.dt();
    let n = grid.n_steps;
    let blowup = || Error::Solver("shooting: controls blow up the rollout".into());
    let mut grad = vec![0.0; n + 1];
    let mut trial = vec![0.0; n + 1];
    let mut curvature = vec![[[0.0; 6]; 6]; n];
    // Levenberg shift on the controls, relative to their energy weight.
    let mut shift: f64 = 0.0;
    let mut lin = linearize_rollout(inst, x, &u).ok_or_else(blowup)?;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        let costates = adjoint_sweep(inst, &lin.states, &u, &lin.steps, &mut grad);
        if norm(&grad) <= cfg.relative_tolerance * (1.0 + lin.value.abs()) {
            break;
        }
        for k in 0..n {
            curvature[k] = step_curvature(
                &inst.plant,
                grid.time(k),
                dt,
                &lin.states[k],
                u[k],
                u[k + 1],
                &costates[k + 1],
            );
        }
        let mut accepted = false;
        while shift <= 1e12 {
            let model = Model {
                states: &lin.states,
                u: &u,
                steps: &lin.steps,
                curvature: &curvature,
                defects: None,
            };
            let Some(sw) = riccati::sweep(inst, &model, Shift { control: shift, state: 0.0 }) else {
                shift = (shift * 10.0).max(1e-6);
                continue;
            };
            let slope: f64 = sw.linear_step(&model).du.iter().zip(&grad).map(|(d, g)| d * g).sum();
            if !(slope < 0.0) {
                shift = (shift * 10.0).max(1e-6);
                continue;
            }
            let mut alpha = 1.0;
            for _ in 0..30 {
                if let Some(v) = feedback_rollout(inst, x, &lin, &u, &sw.gains, sw.du0, alpha, &mut trial) {
                    if v <= lin.value + 1e-4 * alpha * slope {
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if accepted {
                shift = if shift < 1e-6 { 0.0 } else { shift / 3.0 };
                break;
            }
            shift = (shift * 10.0).max(1e-6);
        }
        if !accepted {
            // No decrease resolvable in floating point.
            break;
        }
        std::mem::swap(&mut u, &mut trial);
        lin = linearize_rollout(inst, x, &u).ok_or_else(blowup)?;
        iterations += 1;
    }
    Ok((u, iterations))
}
