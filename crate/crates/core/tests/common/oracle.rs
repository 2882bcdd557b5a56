//! Independent reference integration of the uncontrolled HH equations:
//! the vector field written out from the textbook formulas and an adaptive
//! Dormand-Prince 5(4) pair with tight tolerances.

#![allow(dead_code)]

#[derive(Clone, Copy)]
pub struct Hh {
    pub c_m: f64,
    pub g_na: f64,
    pub g_k: f64,
    pub g_l: f64,
    pub e_na: f64,
    pub e_k: f64,
    pub e_l: f64,
}

pub const NORMAL: Hh = Hh {
    c_m: 1.0,
    g_na: 120.0,
    g_k: 36.0,
    g_l: 0.3,
    e_na: 115.0,
    e_k: -12.0,
    e_l: 10.613,
};

pub const PATHOLOGICAL: Hh = Hh { g_na: 380.0, ..NORMAL };

fn x_over_expm1(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x / x.exp_m1()
    }
}

pub fn field(p: &Hh, z: &[f64; 4]) -> [f64; 4] {
    let [v, m, n, h] = *z;
    let am = x_over_expm1((25.0 - v) / 10.0);
    let bm = 4.0 * (-v / 18.0).exp();
    let an = 0.1 * x_over_expm1((10.0 - v) / 10.0);
    let bn = 0.125 * (-v / 80.0).exp();
    let ah = 0.07 * (-v / 20.0).exp();
    let bh = 1.0 / (((30.0 - v) / 10.0).exp() + 1.0);
    let i_ion = p.g_na * m.powi(3) * h * (v - p.e_na) + p.g_k * n.powi(4) * (v - p.e_k) + p.g_l * (v - p.e_l);
    [
        -i_ion / p.c_m,
        am * (1.0 - m) - bm * m,
        an * (1.0 - n) - bn * n,
        ah * (1.0 - h) - bh * h,
    ]
}

fn lin(z: &[f64; 4], terms: &[(f64, &[f64; 4])], h: f64) -> [f64; 4] {
    let mut out = *z;
    for (c, k) in terms {
        for i in 0..4 {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// States at each time in `times` (ascending, starting after 0) of the flow
/// from `z0` at t = 0.
pub fn dopri5(p: &Hh, z0: [f64; 4], times: &[f64], rtol: f64, atol: f64) -> Vec<[f64; 4]> {
    let f = |z: &[f64; 4]| field(p, z);
    let mut t = 0.0;
    let mut z = z0;
    let mut h: f64 = 1e-3;
    let mut out = Vec::with_capacity(times.len());
    for &target in times {
        while t < target {
            let last = t + h >= target;
            let step = if last { target - t } else { h };
            let k1 = f(&z);
            let k2 = f(&lin(&z, &[(1.0 / 5.0, &k1)], step));
            let k3 = f(&lin(&z, &[(3.0 / 40.0, &k1), (9.0 / 40.0, &k2)], step));
            let k4 = f(&lin(&z, &[(44.0 / 45.0, &k1), (-56.0 / 15.0, &k2), (32.0 / 9.0, &k3)], step));
            let k5 = f(&lin(
                &z,
                &[
                    (19372.0 / 6561.0, &k1),
                    (-25360.0 / 2187.0, &k2),
                    (64448.0 / 6561.0, &k3),
                    (-212.0 / 729.0, &k4),
                ],
                step,
            ));
            let k6 = f(&lin(
                &z,
                &[
                    (9017.0 / 3168.0, &k1),
                    (-355.0 / 33.0, &k2),
                    (46732.0 / 5247.0, &k3),
                    (49.0 / 176.0, &k4),
                    (-5103.0 / 18656.0, &k5),
                ],
                step,
            ));
            let z5 = lin(
                &z,
                &[
                    (35.0 / 384.0, &k1),
                    (500.0 / 1113.0, &k3),
                    (125.0 / 192.0, &k4),
                    (-2187.0 / 6784.0, &k5),
                    (11.0 / 84.0, &k6),
                ],
                step,
            );
            let k7 = f(&z5);
            let z4 = lin(
                &z,
                &[
                    (5179.0 / 57600.0, &k1),
                    (7571.0 / 16695.0, &k3),
                    (393.0 / 640.0, &k4),
                    (-92097.0 / 339200.0, &k5),
                    (187.0 / 2100.0, &k6),
                    (1.0 / 40.0, &k7),
                ],
                step,
            );
            let err = ((0..4)
                .map(|i| {
                    let sc = atol + rtol * z[i].abs().max(z5[i].abs());
                    ((z5[i] - z4[i]) / sc).powi(2)
                })
                .sum::<f64>()
                / 4.0)
                .sqrt();
            if err <= 1.0 {
                t = if last { target } else { t + step };
                z = z5;
            }
            // A step shortened to land on an output time says little about
            // the natural step size.
            if !(last && err <= 1.0) {
                let factor = (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
                h = (step * factor).max(1e-12);
            }
        }
        out.push(z);
    }
    out
}

/// Dense oracle on the uniform grid `k·dt`, `k = 0..=n`.
pub fn dopri5_grid(p: &Hh, z0: [f64; 4], dt: f64, n: usize) -> Vec<[f64; 4]> {
    let times: Vec<f64> = (1..=n).map(|k| k as f64 * dt).collect();
    let mut out = vec![z0];
    out.extend(dopri5(p, z0, &times, 1e-12, 1e-12));
    out
}
