use neurocontrol::dynamics::{gating_steady_state, jacobian, rates, rhs};
use neurocontrol::sim::{rk4_rollout, NoControl};
use neurocontrol::{HHParams, State, TimeGrid};
use proptest::prelude::*;

#[test]
fn rates_at_rest_match_closed_forms() {
    // Closed forms evaluated at V = 0 by hand.
    let r = rates(0.0).unwrap();
    let e = std::f64::consts::E;
    assert!((r.alpha_m - 2.5 / (e.powf(2.5) - 1.0)).abs() < 1e-12);
    assert_eq!(r.beta_m, 4.0);
    assert!((r.alpha_n - 0.1 / (e - 1.0)).abs() < 1e-12);
    assert_eq!(r.beta_n, 0.125);
    assert_eq!(r.alpha_h, 0.07);
    assert!((r.beta_h - 1.0 / (e.powi(3) + 1.0)).abs() < 1e-12);
    assert!((r.alpha_m - 0.22356).abs() < 1e-5);
    assert!((r.alpha_n - 0.05820).abs() < 1e-5);
    assert!((r.beta_h - 0.047426).abs() < 1e-6);
}

#[test]
fn steady_state_at_rest() {
    let (m, n, h) = gating_steady_state(0.0).unwrap();
    assert!((m - 0.05293).abs() < 1e-5, "{m}");
    assert!((n - 0.31768).abs() < 1e-5, "{n}");
    assert!((h - 0.59612).abs() < 1e-5, "{h}");
    let (m_hi, _, _) = gating_steady_state(200.0).unwrap();
    assert!(m_hi > 0.999);
}

#[test]
fn removable_singularities_are_continuous() {
    for eps in [1e-7, -1e-7, 0.0] {
        assert!((rates(25.0 + eps).unwrap().alpha_m - 1.0).abs() < 1e-8);
        assert!((rates(10.0 + eps).unwrap().alpha_n - 0.1).abs() < 1e-8);
    }
}

#[test]
fn rates_are_positive_on_a_dense_sweep() {
    for i in 0..10_000 {
        let v = -100.0 + 250.0 * i as f64 / 9_999.0;
        let r = rates(v).unwrap();
        for x in [r.alpha_m, r.beta_m, r.alpha_n, r.beta_n, r.alpha_h, r.beta_h] {
            assert!(x > 0.0, "rate {x} at V = {v}");
        }
        let (m, n, h) = gating_steady_state(v).unwrap();
        for x in [m, n, h] {
            assert!(x > 0.0 && x < 1.0);
        }
    }
}

#[test]
fn field_at_origin_and_control_additivity() {
    let p = HHParams::normal();
    let f0 = rhs(0.0, &State::ZERO, 0.0, &p).unwrap();
    assert!((f0.v() - 3.1839).abs() < 1e-12);
    assert!((f0.m() - 0.22356).abs() < 1e-5);
    assert!((f0.n() - 0.05820).abs() < 1e-5);
    assert_eq!(f0.h(), 0.07);
    let f5 = rhs(0.0, &State::ZERO, 5.0, &p).unwrap();
    assert_eq!(f5.v() - f0.v(), 5.0);
    assert_eq!(&f5.0[1..], &f0.0[1..]);
    assert!(rhs(0.0, &State::new(f64::NAN, 0.0, 0.0, 0.0), 0.0, &p).is_err());
}

/// Five-point stencil: exact for the polynomial gate terms, O(h⁴) in V.
fn fd_jacobian(z: &State, u: f64, p: &HHParams) -> [[f64; 4]; 4] {
    let f = |z: State| rhs(0.0, &z, u, p).unwrap();
    let mut out = [[0.0; 4]; 4];
    for j in 0..4 {
        let h = 1e-3 * z.0[j].abs().max(1.0);
        let at = |k: f64| {
            let mut zk = *z;
            zk.0[j] += k * h;
            f(zk)
        };
        let (p1, m1, p2, m2) = (at(1.0), at(-1.0), at(2.0), at(-2.0));
        for i in 0..4 {
            out[i][j] = (8.0 * (p1.0[i] - m1.0[i]) - (p2.0[i] - m2.0[i])) / (12.0 * h);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_matches_central_differences(
        v in -20.0..120.0f64,
        m in 0.0..1.0f64,
        n in 0.0..1.0f64,
        h in 0.0..1.0f64,
        pathological in any::<bool>(),
    ) {
        let p = if pathological { HHParams::pathological() } else { HHParams::normal() };
        let z = State::new(v, m, n, h);
        let exact = jacobian(&z, &p).unwrap();
        let fd = fd_jacobian(&z, 0.0, &p);
        let scale = exact.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()));
        for i in 0..4 {
            for j in 0..4 {
                let err = (exact[i][j] - fd[i][j]).abs() / (exact[i][j].abs() + 1e-3 * scale);
                prop_assert!(err < 1e-6, "entry ({i},{j}): {} vs {}", exact[i][j], fd[i][j]);
            }
        }
    }

    #[test]
    fn gating_stays_in_the_unit_interval(
        v in -20.0..120.0f64,
        m in 0.0..=1.0f64,
        n in 0.0..=1.0f64,
        h in 0.0..=1.0f64,
        pathological in any::<bool>(),
    ) {
        let p = if pathological { HHParams::pathological() } else { HHParams::normal() };
        let grid = TimeGrid::new(0.0, 50.0, 5000).unwrap();
        let traj = rk4_rollout(State::new(v, m, n, h), &NoControl, &grid, &p).unwrap();
        for z in &traj.states {
            for x in &z.0[1..] {
                prop_assert!((-1e-6..=1.0 + 1e-6).contains(x), "gating {x}");
            }
        }
    }
}

#[test]
fn leak_entry_and_control_independence_of_jacobian() {
    let p = HHParams::normal();
    let j = jacobian(&State::ZERO, &p).unwrap();
    assert!((j[0][0] + 0.3).abs() < 1e-15);
    // The Jacobian takes no control argument; the field's state derivative
    // is the same at any current.
    let z = State::new(30.0, 0.3, 0.4, 0.5);
    let a = fd_jacobian(&z, 0.0, &p);
    let b = fd_jacobian(&z, 7.0, &p);
    for r in 0..4 {
        for c in 0..4 {
            assert!((a[r][c] - b[r][c]).abs() < 1e-8);
        }
    }
}
