//! Tracking cost, Hamiltonian and optimality conditions shared by the
//! open-loop solvers and the learned feedback controller.
//!
//! The problem is
//!
//! ```text
//! min_u  J = G(z(T)) + ∫ L(t, z, u) dt
//!        G(z) = ½‖z − z*(T)‖²
//!        L(t, z, u) = λu² + (Q/2)‖z − z*(t)‖²
//! ```
//!
//! subject to the HH dynamics `ż = f(z) + e₁u`. The Hamiltonian is
//! `H(t, z, p, u) = −L − pᵀ(f + e₁u)`, maximized by `u* = −p_V / (2λ)`. With
//! this sign convention the costate that enters `H` along an optimal
//! trajectory is the value gradient `p = ∇_z Φ`, which is also what the
//! feedback form plugs in.

use serde::{Deserialize, Serialize};

use crate::dynamics::{jacobian_unchecked, vector_field, HHParams, State};
use crate::error::{Error, Result};
use crate::sim::{ReferenceTrajectory, Trajectory};

/// Weights of the running cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    /// Tracking weight Q.
    pub q: f64,
    /// Control-energy weight λ (electrode impedance).
    pub lambda: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { q: 200.0, lambda: 0.5 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 0.0) || !self.q.is_finite() {
            return Err(Error::domain(format!("Q must be finite and >= 0, got {}", self.q)));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::domain(format!(
                "lambda must be finite and > 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Costate, laid out like [`State`].
pub type Adjoint = State;

/// `G(z_T) = ½‖z_T − z*(T)‖²`.
pub fn terminal_cost(z_t: &State, t_end: f64, reference: &ReferenceTrajectory) -> f64 {
    0.5 * (*z_t - reference.state_at(t_end)).norm_sq()
}

/// `∇G(z_T) = z_T − z*(T)`.
pub fn terminal_cost_grad(z_t: &State, t_end: f64, reference: &ReferenceTrajectory) -> State {
    *z_t - reference.state_at(t_end)
}

/// `L = λu² + (Q/2)‖z − z*(t)‖²`.
#[inline]
pub fn running_cost(t: f64, z: &State, u: f64, w: &CostWeights, reference: &ReferenceTrajectory) -> f64 {
    w.lambda * u * u + 0.5 * w.q * (*z - reference.state_at(t)).norm_sq()
}

/// Trapezoidal running cost, terminal cost and their sum for a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub running: f64,
    pub terminal: f64,
    pub total: f64,
}

pub fn objective(traj: &Trajectory, w: &CostWeights, reference: &ReferenceTrajectory) -> Objective {
    let running = cumulative_running_cost(traj, w, reference)
        .last()
        .copied()
        .unwrap_or(0.0);
    let terminal = terminal_cost(&traj.final_state(), traj.grid.t_end, reference);
    Objective {
        running,
        terminal,
        total: running + terminal,
    }
}

/// Running cost accumulated node by node with the trapezoidal rule.
pub fn cumulative_running_cost(
    traj: &Trajectory,
    w: &CostWeights,
    reference: &ReferenceTrajectory,
) -> Vec<f64> {
    let grid = &traj.grid;
    let dt = grid.dt();
    let node_cost: Vec<f64> = (0..grid.n_nodes())
        .map(|k| running_cost(grid.time(k), &traj.states[k], traj.controls[k], w, reference))
        .collect();
    let mut acc = Vec::with_capacity(node_cost.len());
    let mut total = 0.0;
    acc.push(total);
    for pair in node_cost.windows(2) {
        total += 0.5 * dt * (pair[0] + pair[1]);
        acc.push(total);
    }
    acc
}

/// `H(t, z, p, u) = −L(t, z, u) − pᵀ[f(z) + e₁u]`.
pub fn hamiltonian(
    t: f64,
    z: &State,
    p: &Adjoint,
    u: f64,
    w: &CostWeights,
    params: &HHParams,
    reference: &ReferenceTrajectory,
) -> f64 {
    let mut f = vector_field(&z.0, params);
    f[0] += u;
    -running_cost(t, z, u, w, reference) - p.dot(&State(f))
}

/// Maximizer of the Hamiltonian in `u`: `u* = −p_V / (2λ)`.
pub fn feedback_control(p_v: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
    }
    Ok(-p_v / (2.0 * lambda))
}

/// Costate dynamics `ṗ = ∂H/∂z = −∇_z L − (∂f/∂z)ᵀ p`, integrated backward
/// from `p(T) = ∇G(z(T))`.
///
/// The tracking gradient does not depend on the control, so `u*` does not
/// appear.
pub fn adjoint_rhs(
    t: f64,
    z: &State,
    p: &Adjoint,
    w: &CostWeights,
    params: &HHParams,
    reference: &ReferenceTrajectory,
) -> Adjoint {
    let jac = jacobian_unchecked(&z.0, params);
    let diff = *z - reference.state_at(t);
    let mut out = [0.0; 4];
    for (j, slot) in out.iter_mut().enumerate() {
        let jt_p: f64 = (0..4).map(|i| jac[i][j] * p.0[i]).sum();
        *slot = -w.q * diff.0[j] - jt_p;
    }
    State(out)
}

/// Terminal costate `p(T) = ∇G(z(T))`.
pub fn terminal_adjoint(z_t: &State, t_end: f64, reference: &ReferenceTrajectory) -> Adjoint {
    terminal_cost_grad(z_t, t_end, reference)
}
