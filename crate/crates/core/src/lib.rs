//! Optimal stimulation of Hodgkin–Huxley neuron dynamics.
//!
//! - [`dynamics`]: the HH vector field, rate functions and state Jacobian.
//! - [`sim`]: fixed-step RK4 rollouts, the normal-regime reference, spike
//!   counting, shocks and the trajectory CSV format.
//! - [`ocp`]: tracking cost, Hamiltonian, feedback law and costate equation.
//! - [`openloop`]: per-instance open-loop solvers (all-at-once transcription
//!   and adjoint single shooting).
//! - [`valuenet`]: the neural value function, its input and parameter
//!   gradients, and checkpoints.
//! - [`training`]: learning the value function from sampled initial states.

pub mod dynamics;
pub mod error;
pub mod ocp;
pub mod openloop;
pub mod sim;
pub mod training;
pub mod valuenet;

pub use dynamics::{HHParams, ParamOverrides, Rates, State};
pub use error::{CheckpointError, Error, Result};
pub use ocp::{CostWeights, Objective};
pub use sim::{ReferenceTrajectory, Shock, TimeGrid, Trajectory};
