//! Newton subproblem of the discrete tracking problem.
//!
//! Minimizes the quadratic model
//!
//! ```text
//! Σ_k ½ p_kᵀ H_k p_k + Σ_k node terms,   p_k = (δz_k, δu_k, δu_{k+1})
//! s.t. δz_{k+1} = A_k δz_k + a_k δu_k + b_k δu_{k+1} + f_k,   δz_0 = 0
//! ```
//!
//! by a backward Riccati sweep in the augmented state `(δz_k, δu_k)` with
//! input `δu_{k+1}`. `H_k` carries the constraint curvature; node terms are
//! the exact cost Hessian and gradient. Every sweep stage must see a positive
//! input curvature, which holds exactly when the reduced Hessian is positive
//! definite.

use super::sensitivity::StepSensitivity;
use super::Instance;
use crate::dynamics::State;
use crate::sim::LinearizablePlant;

type Mat5 = [[f64; 5]; 5];

/// Feedback law of one interval: `δu_{k+1} = K·(δz_k, δu_k) + κ`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Gain {
    pub k: [f64; 5],
    pub kappa: f64,
}

impl Gain {
    #[inline]
    pub fn apply(&self, dz: &State, du: f64, alpha: f64) -> f64 {
        alpha * self.kappa + (0..4).map(|i| self.k[i] * dz.0[i]).sum::<f64>() + self.k[4] * du
    }
}

/// Linearization of the problem around `(states, u)`.
pub(crate) struct Model<'a> {
    pub states: &'a [State],
    pub u: &'a [f64],
    pub steps: &'a [StepSensitivity],
    pub curvature: &'a [[[f64; 6]; 6]],
    /// `f_k = Ψ_k − z_{k+1}`; all zero along an exact rollout.
    pub defects: Option<&'a [State]>,
}

pub(crate) struct Sweep {
    pub gains: Vec<Gain>,
    pub du0: f64,
    /// Quadratic value functions `V_k(x) = ½ xᵀ P_k x + s_kᵀ x`.
    value: Vec<(Mat5, [f64; 5])>,
}

/// Solution of the linear model under a sweep.
pub(crate) struct Step {
    pub dz: Vec<State>,
    pub du: Vec<f64>,
    /// Multipliers of the linearized dynamics, `λ_k = ∂V_k/∂δz_k` (index 0
    /// unused).
    pub costates: Vec<State>,
}

/// Levenberg–Marquardt terms, as multiples of the cost Hessian diagonal.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Shift {
    pub control: f64,
    pub state: f64,
}

/// Backward sweep with the cost diagonal scaled up by `shift`; `None` when
/// the shifted reduced Hessian is not positive definite.
pub(crate) fn sweep<P: LinearizablePlant>(inst: &Instance<'_, P>, model: &Model<'_>, shift: Shift) -> Option<Sweep> {
    let grid = &inst.grid;
    let w = &inst.weights;
    let n = grid.n_steps;
    let mut p: Mat5 = [[0.0; 5]; 5];
    let mut s = [0.0; 5];
    {
        let wn = grid.trapezoid_weight(n);
        let d = model.states[n] - *inst.target(n);
        for i in 0..4 {
            p[i][i] = (w.q * wn + 1.0) * (1.0 + shift.state);
            s[i] = (w.q * wn + 1.0) * d.0[i];
        }
        p[4][4] = 2.0 * w.lambda * wn * (1.0 + shift.control);
        s[4] = 2.0 * w.lambda * wn * model.u[n];
    }
    let mut value = vec![([[0.0; 5]; 5], [0.0; 5]); n + 1];
    value[n] = (p, s);
    let mut gains = vec![Gain { k: [0.0; 5], kappa: 0.0 }; n];
    for k in (0..n).rev() {
        let st = &model.steps[k];
        let wk = grid.trapezoid_weight(k);
        let mut f = [[0.0; 6]; 5];
        for i in 0..4 {
            f[i][..4].copy_from_slice(&st.d_state[i]);
            f[i][4] = st.d_u_start[i];
            f[i][5] = st.d_u_end[i];
        }
        f[4][5] = 1.0;

        let mut qm = model.curvature[k];
        let d = model.states[k] - *inst.target(k);
        let mut q = [0.0; 6];
        for i in 0..4 {
            qm[i][i] += w.q * wk * (1.0 + shift.state);
            q[i] = w.q * wk * d.0[i];
        }
        qm[4][4] += 2.0 * w.lambda * wk * (1.0 + shift.control);
        q[4] = 2.0 * w.lambda * wk * model.u[k];

        // Affine part of the transition enters through P f + s.
        let mut s_next = s;
        if let Some(defects) = model.defects {
            let fk = &defects[k];
            for i in 0..5 {
                s_next[i] += (0..4).map(|j| p[i][j] * fk.0[j]).sum::<f64>();
            }
        }
        let mut pf = [[0.0; 6]; 5];
        for i in 0..5 {
            for j in 0..6 {
                pf[i][j] = (0..5).map(|l| p[i][l] * f[l][j]).sum();
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                qm[i][j] += (0..5).map(|l| f[l][i] * pf[l][j]).sum::<f64>();
            }
            q[i] += (0..5).map(|l| f[l][i] * s_next[l]).sum::<f64>();
        }

        let qvv = qm[5][5];
        if !(qvv > 0.0) || !qvv.is_finite() {
            return None;
        }
        let mut gain = Gain { k: [0.0; 5], kappa: -q[5] / qvv };
        for i in 0..5 {
            gain.k[i] = -qm[5][i] / qvv;
        }
        for i in 0..5 {
            for j in 0..5 {
                p[i][j] = qm[i][j] - qm[i][5] * qm[5][j] / qvv;
            }
            s[i] = q[i] - qm[i][5] * q[5] / qvv;
        }
        for i in 0..5 {
            for j in 0..i {
                let m = 0.5 * (p[i][j] + p[j][i]);
                p[i][j] = m;
                p[j][i] = m;
            }
        }
        gains[k] = gain;
        value[k] = (p, s);
    }
    let puu = p[4][4];
    if !(puu > 0.0) || !puu.is_finite() {
        return None;
    }
    Some(Sweep {
        gains,
        du0: -s[4] / puu,
        value,
    })
}

impl Sweep {
    /// Forward pass through the linearized dynamics.
    pub fn linear_step(&self, model: &Model<'_>) -> Step {
        let n = self.gains.len();
        let mut dz = vec![State::ZERO; n + 1];
        let mut du = vec![0.0; n + 1];
        let mut costates = vec![State::ZERO; n + 1];
        du[0] = self.du0;
        for k in 0..n {
            du[k + 1] = self.gains[k].apply(&dz[k], du[k], 1.0);
            let st = &model.steps[k];
            let mut next = model.defects.map_or(State::ZERO, |d| d[k]);
            for i in 0..4 {
                next.0[i] += (0..4).map(|j| st.d_state[i][j] * dz[k].0[j]).sum::<f64>()
                    + st.d_u_start[i] * du[k]
                    + st.d_u_end[i] * du[k + 1];
            }
            dz[k + 1] = next;
            let (p, s) = &self.value[k + 1];
            let x = [next.0[0], next.0[1], next.0[2], next.0[3], du[k + 1]];
            for i in 0..4 {
                costates[k + 1].0[i] = s[i] + (0..5).map(|j| p[i][j] * x[j]).sum::<f64>();
            }
        }
        Step { dz, du, costates }
    }
}
