use neurocontrol::openloop::{
    shooting_gradient, solve_all_at_once, solve_shooting, AllAtOnceConfig, Instance, ShootingConfig,
    ShootingMethod,
};
use neurocontrol::sim::{rk4_rollout, rollout_open_loop, LinearizablePlant, NoControl, Plant};
use neurocontrol::{ocp, CostWeights, HHParams, ReferenceTrajectory, State, TimeGrid, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stable linear test plant `ż = M z + e₁ u`.
struct Linear;

const M: [[f64; 4]; 4] = [
    [-0.5, 0.2, 0.0, 0.1],
    [0.1, -1.0, 0.0, 0.0],
    [0.0, 0.3, -0.3, 0.05],
    [0.02, 0.0, 0.0, -0.8],
];

impl Plant for Linear {
    fn field(&self, _t: f64, z: &State, u: f64) -> State {
        let mut out = State::ZERO;
        for i in 0..4 {
            out.0[i] = (0..4).map(|j| M[i][j] * z.0[j]).sum();
        }
        out.0[0] += u;
        out
    }
}

impl LinearizablePlant for Linear {
    fn state_jacobian(&self, _t: f64, _z: &State) -> [[f64; 4]; 4] {
        M
    }
}

fn constant_reference(grid: TimeGrid, target: State) -> ReferenceTrajectory {
    let n = grid.n_nodes();
    ReferenceTrajectory::from_trajectory(Trajectory {
        grid,
        states: vec![target; n],
        controls: vec![0.0; n],
        running_cost: None,
    })
    .unwrap()
}

/// Dense Gaussian elimination with partial pivoting.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

fn recomputed(traj: &Trajectory, w: &CostWeights, reference: &ReferenceTrajectory) -> f64 {
    ocp::objective(traj, w, reference).total
}

#[test]
fn linear_quadratic_double_matches_normal_equations() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let reference = constant_reference(grid, State::new(4.0, -1.0, 0.5, 2.0));
    let weights = CostWeights { q: 3.0, lambda: 0.05 };
    let inst = Instance::new(Linear, weights, &reference, grid).unwrap();
    let x = State::new(-2.0, 1.0, 0.0, 0.5);

    // The discrete objective is an exact quadratic in the node controls;
    // recover it by probing plain rollouts.
    let n = grid.n_nodes();
    let j = |u: &[f64]| {
        let traj = rollout_open_loop(x, u, &grid, &Linear).unwrap();
        recomputed(&traj, &weights, &reference)
    };
    let zero = vec![0.0; n];
    let j0 = j(&zero);
    let unit = |i: usize| {
        let mut u = zero.clone();
        u[i] = 1.0;
        u
    };
    let ji: Vec<f64> = (0..n).map(|i| j(&unit(i))).collect();
    let mut h = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..=a {
            let mut u = unit(a);
            u[b] += 1.0;
            let v = if a == b { j(&u) - 2.0 * ji[a] + j0 } else { j(&u) - ji[a] - ji[b] + j0 };
            h[a][b] = v;
            h[b][a] = v;
        }
    }
    let g: Vec<f64> = (0..n).map(|i| ji[i] - j0 - 0.5 * h[i][i]).collect();
    let optimum = solve_dense(h, g.iter().map(|v| -v).collect());

    let (shoot, report) = solve_shooting(&inst, &x, None, &ShootingConfig::default()).unwrap();
    assert!(report.converged);
    let (aao, aao_report) = solve_all_at_once(&inst, &x, &AllAtOnceConfig::default()).unwrap();
    assert!(aao_report.converged);
    for k in 0..n {
        assert!((shoot.controls[k] - optimum[k]).abs() < 1e-8, "shooting u[{k}]: {} vs {}", shoot.controls[k], optimum[k]);
        assert!((aao.controls[k] - optimum[k]).abs() < 1e-8, "all-at-once u[{k}]");
    }
}

#[test]
fn quasi_newton_shooting_solves_the_linear_quadratic_double() {
    let grid = TimeGrid::new(0.0, 1.0, 50).unwrap();
    let reference = constant_reference(grid, State::new(4.0, -1.0, 0.5, 2.0));
    let weights = CostWeights { q: 3.0, lambda: 0.05 };
    let inst = Instance::new(Linear, weights, &reference, grid).unwrap();
    let x = State::new(-2.0, 1.0, 0.0, 0.5);
    let cfg = ShootingConfig {
        method: ShootingMethod::Lbfgs,
        relative_tolerance: 1e-10,
        ..ShootingConfig::default()
    };
    let (lbfgs, report) = solve_shooting(&inst, &x, None, &cfg).unwrap();
    assert!(report.converged);
    let (newton, _) = solve_shooting(&inst, &x, None, &ShootingConfig::default()).unwrap();
    for (a, b) in lbfgs.controls.iter().zip(&newton.controls) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn tracking_own_uncontrolled_trajectory_needs_no_control() {
    let grid = TimeGrid::with_step(10.0, 0.02).unwrap();
    let x = State::new(3.0, 0.05, 0.3, 0.6);
    let own = rk4_rollout(x, &NoControl, &grid, &HHParams::normal()).unwrap();
    let reference = ReferenceTrajectory::from_trajectory(own).unwrap();
    let inst = Instance::new(HHParams::normal(), CostWeights::default(), &reference, grid).unwrap();

    let (traj, report) = solve_all_at_once(&inst, &x, &AllAtOnceConfig::default()).unwrap();
    assert!(report.converged);
    assert!(report.objective.total <= 1e-4);
    assert!(traj.controls.iter().all(|u| u.abs() < 1e-6));

    let (traj, report) = solve_shooting(&inst, &x, None, &ShootingConfig::default()).unwrap();
    assert!(report.objective.total <= 1e-4);
    assert!(traj.controls.iter().all(|u| u.abs() < 1e-6));
}

#[test]
fn zero_tracking_weight_with_matching_endpoint_gives_zero_control() {
    let grid = TimeGrid::with_step(5.0, 0.01).unwrap();
    let x = State::new(-4.0, 0.1, 0.2, 0.7);
    let plant = HHParams::pathological();
    let own = rk4_rollout(x, &NoControl, &grid, &plant).unwrap();
    let reference = ReferenceTrajectory::from_trajectory(own).unwrap();
    let weights = CostWeights { q: 0.0, lambda: 0.5 };
    let inst = Instance::new(plant, weights, &reference, grid).unwrap();
    let (traj, report) = solve_shooting(&inst, &x, None, &ShootingConfig::default()).unwrap();
    assert!(report.converged);
    assert!(traj.controls.iter().all(|&u| u == 0.0));
    let (traj, _) = solve_all_at_once(&inst, &x, &AllAtOnceConfig::default()).unwrap();
    assert!(traj.controls.iter().all(|&u| u == 0.0));
}

#[test]
fn adjoint_gradient_matches_finite_differences_on_short_horizon() {
    let grid = TimeGrid::new(0.0, 0.5, 10).unwrap();
    let reference = ReferenceTrajectory::new(&HHParams::normal(), State::ZERO, &grid).unwrap();
    let inst = Instance::new(HHParams::pathological(), CostWeights::default(), &reference, grid).unwrap();
    let x = State::new(12.0, 0.1, 0.3, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u: Vec<f64> = (0..grid.n_nodes()).map(|_| rng.random_range(-20.0..20.0)).collect();
    let mut grad = vec![0.0; u.len()];
    shooting_gradient(&inst, &x, &u, Some(&mut grad)).unwrap();
    for k in 0..u.len() {
        let h = 1e-4;
        let mut up = u.clone();
        let mut um = u.clone();
        up[k] += h;
        um[k] -= h;
        let fd = (shooting_gradient(&inst, &x, &up, None).unwrap() - shooting_gradient(&inst, &x, &um, None).unwrap())
            / (2.0 * h);
        assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "k={k}: {fd} vs {}", grad[k]);
    }
}

#[test]
fn grids_outside_the_supported_range_are_rejected() {
    let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
    let reference = ReferenceTrajectory::new(&HHParams::normal(), State::ZERO, &grid).unwrap();
    let inst = Instance::new(HHParams::pathological(), CostWeights::default(), &reference, grid).unwrap();
    assert!(solve_shooting(&inst, &State::ZERO, None, &ShootingConfig::default()).is_err());
    assert!(solve_all_at_once(&inst, &State::ZERO, &AllAtOnceConfig::default()).is_err());
    let inst_ok = Instance::new(
        HHParams::pathological(),
        CostWeights::default(),
        &reference,
        TimeGrid::new(0.0, 1.0, 50).unwrap(),
    )
    .unwrap();
    let bad = State::new(f64::NAN, 0.0, 0.0, 0.0);
    assert!(solve_all_at_once(&inst_ok, &bad, &AllAtOnceConfig::default()).is_err());
}

#[test]
fn solvers_agree_on_random_initial_voltages() {
    let grid = TimeGrid::with_step(20.0, 0.01).unwrap();
    let reference = ReferenceTrajectory::new(&HHParams::normal(), State::ZERO, &grid).unwrap();
    let weights = CostWeights::default();
    let inst = Instance::new(HHParams::pathological(), weights, &reference, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10 {
        let xi = rng.random_range(-10.0..=10.0);
        let x = State::new(xi, 0.0, 0.0, 0.0);
        let (aao, r_aao) = solve_all_at_once(&inst, &x, &AllAtOnceConfig::default()).unwrap();
        let (shoot, r_shoot) = solve_shooting(&inst, &x, None, &ShootingConfig::default()).unwrap();
        assert!(r_aao.converged && r_shoot.converged, "xi = {xi}: {r_aao:?} {r_shoot:?}");
        assert!(r_aao.feasibility < 1e-6);
        assert!(r_aao.stationarity < r_aao.stationarity_target());
        assert!(r_shoot.stationarity < 1e-6 * (1.0 + r_shoot.objective.total.abs()));
        let rel = (r_aao.objective.total - r_shoot.objective.total).abs() / r_shoot.objective.total;
        assert!(rel < 0.005, "xi = {xi}: {:?} vs {:?}", r_aao, r_shoot);

        // Reports describe the returned trajectories.
        for (traj, report) in [(&aao, &r_aao), (&shoot, &r_shoot)] {
            let j = recomputed(traj, &weights, &reference);
            assert!((j - report.objective.total).abs() <= 1e-8 * j.abs());
        }
        for step in &r_aao.merit_history {
            assert!(step.after <= step.before, "merit rose: {step:?}");
        }
    }
}

#[test]
fn report_json_round_trips_without_wall_time() {
    let grid = TimeGrid::with_step(5.0, 0.01).unwrap();
    let reference = ReferenceTrajectory::new(&HHParams::normal(), State::ZERO, &grid).unwrap();
    let inst = Instance::new(HHParams::pathological(), CostWeights::default(), &reference, grid).unwrap();
    let (_, report) = solve_all_at_once(&inst, &State::ZERO, &AllAtOnceConfig::default()).unwrap();
    let json = serde_json::to_string(&report).unwrap();
    assert!(!json.contains("wall"));
    let back: neurocontrol::openloop::SolverReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.objective, report.objective);
    assert_eq!(back.merit_history, report.merit_history);
}
