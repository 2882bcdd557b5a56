use crate::dynamics::State;
use crate::sim::LinearizablePlant;

/// One open-loop RK4 step together with its derivatives with respect to the
/// starting state and the two node controls.
#[derive(Debug, Clone, Copy)]
pub struct StepSensitivity {
    pub next: State,
    /// `∂z_{k+1}/∂z_k`, row-major.
    pub d_state: [[f64; 4]; 4],
    /// `∂z_{k+1}/∂u_k`.
    pub d_u_start: [f64; 4],
    /// `∂z_{k+1}/∂u_{k+1}`.
    pub d_u_end: [f64; 4],
}

type Sens = [[f64; 6]; 4];

#[inline]
fn stage<P: LinearizablePlant + ?Sized>(
    plant: &P,
    t: f64,
    z: &State,
    s_z: &Sens,
    u: f64,
    du: (f64, f64),
) -> (State, Sens) {
    let k = plant.field(t, z, u);
    let jac = plant.state_jacobian(t, z);
    let mut s_k = [[0.0; 6]; 4];
    for i in 0..4 {
        for c in 0..6 {
            s_k[i][c] = (0..4).map(|j| jac[i][j] * s_z[j][c]).sum();
        }
    }
    s_k[0][4] += du.0;
    s_k[0][5] += du.1;
    (k, s_k)
}

#[inline]
fn offset(z: &State, s0: &Sens, k: &State, s_k: &Sens, h: f64) -> (State, Sens) {
    let mut zs = *z;
    let mut ss = *s0;
    for i in 0..4 {
        zs.0[i] += h * k.0[i];
        for c in 0..6 {
            ss[i][c] += h * s_k[i][c];
        }
    }
    (zs, ss)
}

/// RK4 step from `z` at time `t` with stage currents `u_a`, midpoint, `u_b`,
/// differentiated by forward sensitivity through the stages.
pub fn step_sensitivity<P: LinearizablePlant + ?Sized>(
    plant: &P,
    t: f64,
    dt: f64,
    z: &State,
    u_a: f64,
    u_b: f64,
) -> StepSensitivity {
    let mut s0: Sens = [[0.0; 6]; 4];
    for (i, row) in s0.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let half = 0.5 * dt;
    let u_mid = 0.5 * (u_a + u_b);

    let (k1, s1) = stage(plant, t, z, &s0, u_a, (1.0, 0.0));
    let (z2, sz2) = offset(z, &s0, &k1, &s1, half);
    let (k2, s2) = stage(plant, t + half, &z2, &sz2, u_mid, (0.5, 0.5));
    let (z3, sz3) = offset(z, &s0, &k2, &s2, half);
    let (k3, s3) = stage(plant, t + half, &z3, &sz3, u_mid, (0.5, 0.5));
    let (z4, sz4) = offset(z, &s0, &k3, &s3, dt);
    let (k4, s4) = stage(plant, t + dt, &z4, &sz4, u_b, (0.0, 1.0));

    let mut next = *z;
    let mut s = s0;
    for i in 0..4 {
        next.0[i] += dt / 6.0 * (k1.0[i] + 2.0 * k2.0[i] + 2.0 * k3.0[i] + k4.0[i]);
        for c in 0..6 {
            s[i][c] += dt / 6.0 * (s1[i][c] + 2.0 * s2[i][c] + 2.0 * s3[i][c] + s4[i][c]);
        }
    }
    let mut d_state = [[0.0; 4]; 4];
    let mut d_u_start = [0.0; 4];
    let mut d_u_end = [0.0; 4];
    for i in 0..4 {
        d_state[i].copy_from_slice(&s[i][..4]);
        d_u_start[i] = s[i][4];
        d_u_end[i] = s[i][5];
    }
    StepSensitivity {
        next,
        d_state,
        d_u_start,
        d_u_end,
    }
}

/// Hessian of `wᵀ Ψ(z, u_a, u_b)` with respect to `(z, u_a, u_b)`, by central
/// differences of the exact first derivatives. Symmetrized.
pub fn step_curvature<P: LinearizablePlant + ?Sized>(
    plant: &P,
    t: f64,
    dt: f64,
    z: &State,
    u_a: f64,
    u_b: f64,
    w: &State,
) -> [[f64; 6]; 6] {
    let vjp = |p: &[f64; 6]| -> [f64; 6] {
        let zz = State([p[0], p[1], p[2], p[3]]);
        let s = step_sensitivity(plant, t, dt, &zz, p[4], p[5]);
        let mut g = [0.0; 6];
        for i in 0..4 {
            for j in 0..4 {
                g[j] += s.d_state[i][j] * w.0[i];
            }
            g[4] += s.d_u_start[i] * w.0[i];
            g[5] += s.d_u_end[i] * w.0[i];
        }
        g
    };
    let base = [z.0[0], z.0[1], z.0[2], z.0[3], u_a, u_b];
    let mut h = [[0.0; 6]; 6];
    for j in 0..6 {
        let step = 6e-6 * (1.0 + base[j].abs());
        let mut plus = base;
        let mut minus = base;
        plus[j] += step;
        minus[j] -= step;
        let (gp, gm) = (vjp(&plus), vjp(&minus));
        for i in 0..6 {
            h[i][j] = (gp[i] - gm[i]) / (plus[j] - minus[j]);
        }
    }
    for i in 0..6 {
        for j in 0..i {
            let m = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = m;
            h[j][i] = m;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::HHParams;
    use crate::sim::open_loop_step;

    #[test]
    fn step_matches_plain_rk4_and_finite_differences() {
        let p = HHParams::pathological();
        let z = State::new(35.0, 0.4, 0.45, 0.3);
        let (t, dt, ua, ub) = (1.0, 0.01, 3.0, -2.0);
        let sens = step_sensitivity(&p, t, dt, &z, ua, ub);
        assert_eq!(sens.next, open_loop_step(&p, t, dt, &z, ua, ub));
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z;
            let mut zm = z;
            zp.0[j] += h;
            zm.0[j] -= h;
            let fd = (open_loop_step(&p, t, dt, &zp, ua, ub) - open_loop_step(&p, t, dt, &zm, ua, ub)) * (0.5 / h);
            for i in 0..4 {
                assert!((fd[i] - sens.d_state[i][j]).abs() < 1e-7 * (1.0 + fd[i].abs()));
            }
        }
        let fd_a = (open_loop_step(&p, t, dt, &z, ua + h, ub) - open_loop_step(&p, t, dt, &z, ua - h, ub)) * (0.5 / h);
        let fd_b = (open_loop_step(&p, t, dt, &z, ua, ub + h) - open_loop_step(&p, t, dt, &z, ua, ub - h)) * (0.5 / h);
        for i in 0..4 {
            assert!((fd_a[i] - sens.d_u_start[i]).abs() < 1e-8);
            assert!((fd_b[i] - sens.d_u_end[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn curvature_matches_second_differences() {
        let p = HHParams::pathological();
        let z = State::new(20.0, 0.3, 0.4, 0.5);
        let w = State::new(1.5, -40.0, 25.0, 8.0);
        let (t, dt, ua, ub) = (0.5, 0.02, 4.0, -1.0);
        let h = step_curvature(&p, t, dt, &z, ua, ub, &w);
        let f = |q: [f64; 6]| {
            open_loop_step(&p, t, dt, &State([q[0], q[1], q[2], q[3]]), q[4], q[5]).dot(&w)
        };
        let base = [z.0[0], z.0[1], z.0[2], z.0[3], ua, ub];
        let e = 1e-3;
        for i in 0..6 {
            for j in 0..6 {
                let shifted = |si: f64, sj: f64| {
                    let mut q = base;
                    q[i] += si * e;
                    q[j] += sj * e;
                    f(q)
                };
                let fd = (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0)) / (4.0 * e * e);
                assert!((fd - h[i][j]).abs() < 1e-4 * (1.0 + fd.abs()), "{i} {j}: {fd} vs {}", h[i][j]);
            }
        }
    }
}
