//! Per-instance open-loop optimal control.
//!
//! Both solvers minimize the same discrete objective: node controls `u_k`,
//! RK4 steps with the current linearly interpolated inside each interval,
//! the trapezoidal rule for the running cost, plus the terminal cost.
//!
//! - [`solve_all_at_once`] treats every node state and control as a decision
//!   variable, with one RK4 defect equality per interval. The problem has no
//!   inequality constraints, so no slacks or barrier terms appear. Each
//!   iteration solves the Newton system of the first-order conditions and is
//!   globalized on an augmented-Lagrangian merit function.
//! - [`solve_shooting`] keeps only the controls. Gradients come from the
//!   exact discrete adjoint; steps are Newton steps from a Riccati sweep
//!   (default) or L-BFGS.
//!
//! The tracking problem is badly conditioned: holding the pathological
//! neuron on the reference keeps it near threshold, where perturbations grow
//! by up to ~10⁷ over a few milliseconds. First-order and quasi-Newton
//! methods stall there, so both solvers use exact second derivatives, with
//! the constraint curvature formed by differencing exact step derivatives.

mod all_at_once;
pub mod lbfgs;
mod riccati;
mod sensitivity;
mod shooting;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use all_at_once::{solve_all_at_once, AllAtOnceConfig};
pub use sensitivity::{step_curvature, step_sensitivity, StepSensitivity};
pub use shooting::{shooting_gradient, solve_shooting, ShootingConfig, ShootingMethod};

use crate::dynamics::State;
use crate::error::{Error, Result};
use crate::ocp::{CostWeights, Objective};
use crate::sim::{LinearizablePlant, ReferenceTrajectory, TimeGrid};

/// One optimal-control instance: plant, weights, target and grid.
#[derive(Debug, Clone)]
pub struct Instance<'a, P> {
    pub plant: P,
    pub weights: CostWeights,
    pub reference: &'a ReferenceTrajectory,
    pub grid: TimeGrid,
    /// Target state at every grid node.
    targets: Vec<State>,
}

impl<'a, P: LinearizablePlant> Instance<'a, P> {
    pub fn new(
        plant: P,
        weights: CostWeights,
        reference: &'a ReferenceTrajectory,
        grid: TimeGrid,
    ) -> Result<Self> {
        grid.validate()?;
        weights.validate()?;
        if !reference.covers(grid.t0, grid.t_end) {
            return Err(Error::domain("reference does not cover the solver horizon"));
        }
        let targets = (0..grid.n_nodes())
            .map(|k| reference.state_at(grid.time(k)))
            .collect();
        Ok(Instance {
            plant,
            weights,
            reference,
            grid,
            targets,
        })
    }

    pub(crate) fn target(&self, k: usize) -> &State {
        &self.targets[k]
    }

    /// Running-cost contribution of node `k` (trapezoid weight included).
    #[inline]
    pub(crate) fn node_cost(&self, k: usize, z: &State, u: f64) -> f64 {
        let w = &self.weights;
        self.grid.trapezoid_weight(k)
            * (w.lambda * u * u + 0.5 * w.q * (*z - self.targets[k]).norm_sq())
    }

    #[inline]
    pub(crate) fn terminal(&self, z: &State) -> f64 {
        0.5 * (*z - self.targets[self.grid.n_steps]).norm_sq()
    }
}

/// Outcome of an open-loop solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub method: String,
    /// Objective recomputed on the returned trajectory.
    pub objective: Objective,
    /// Largest RK4 defect norm of the returned trajectory.
    pub feasibility: f64,
    /// Norm of the reduced gradient with respect to the node controls.
    pub stationarity: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Merit values of the accepted steps (all-at-once only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub merit_history: Vec<MeritStep>,
    /// Wall-clock time; kept out of the JSON report so that reports are
    /// reproducible byte for byte.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// One accepted all-at-once step: the merit before and after it, both at
/// the step's penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeritStep {
    pub penalty: f64,
    pub before: f64,
    pub after: f64,
}

impl SolverReport {
    /// Stationarity threshold shared by both solvers.
    pub fn stationarity_target(&self) -> f64 {
        1e-5 * (1.0 + self.objective.total.abs())
    }
}

/// Grid sizes accepted by both solvers.
pub const STEP_RANGE: std::ops::RangeInclusive<usize> = 50..=5000;

pub(crate) fn check_start(x: &State, grid: &TimeGrid) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::domain("initial state must be finite"));
    }
    grid.validate()?;
    if !STEP_RANGE.contains(&grid.n_steps) {
        return Err(Error::domain(format!(
            "open-loop solvers take {} to {} steps, got {}",
            STEP_RANGE.start(),
            STEP_RANGE.end(),
            grid.n_steps
        )));
    }
    Ok(())
}
