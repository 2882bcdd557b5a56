mod common;

use common::oracle::{self, dopri5_grid};
use neurocontrol::sim::{count_spikes, read_csv, rk4_rollout, rk4_rollout_shocked, NoControl, CSV_HEADER};
use neurocontrol::{HHParams, ReferenceTrajectory, Shock, State, TimeGrid, Trajectory};

fn uncontrolled(p: &HHParams, t_end: f64, dt: f64) -> Trajectory {
    let grid = TimeGrid::with_step(t_end, dt).unwrap();
    rk4_rollout(State::ZERO, &NoControl, &grid, p).unwrap()
}

fn peak_v(states: &[State]) -> f64 {
    states.iter().map(State::v).fold(f64::MIN, f64::max)
}

#[test]
fn normal_neuron_fires_one_spike_like_the_oracle() {
    let traj = uncontrolled(&HHParams::normal(), 20.0, 0.01);
    let peak = peak_v(&traj.states);
    // Starting from h = 0 the sodium current is weak at first and the single
    // spike tops out just under 88 mV; the oracle below agrees.
    assert!((peak - 87.792).abs() < 0.01, "peak {peak}");
    assert_eq!(count_spikes(&traj, 50.0, 2.0), 1);

    let exact = dopri5_grid(&oracle::NORMAL, [0.0; 4], 0.01, 2000);
    let oracle_peak = exact.iter().map(|z| z[0]).fold(f64::MIN, f64::max);
    assert!((peak - oracle_peak).abs() < 0.05, "{peak} vs {oracle_peak}");
    let worst = traj
        .states
        .iter()
        .zip(&exact)
        .map(|(a, b)| (a.v() - b[0]).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.1, "max voltage deviation {worst}");
}

#[test]
fn pathological_neuron_spikes_more_over_fifty_ms() {
    let normal = uncontrolled(&HHParams::normal(), 50.0, 0.01);
    let patho = uncontrolled(&HHParams::pathological(), 50.0, 0.01);
    let n_normal = count_spikes(&normal, 50.0, 2.0);
    let n_patho = count_spikes(&patho, 50.0, 2.0);
    assert_eq!(n_normal, 1);
    assert!(n_patho > n_normal, "{n_patho} vs {n_normal}");

    // Spike counts of the oracle trajectories agree.
    let count = |states: &[[f64; 4]]| {
        let grid = TimeGrid::with_step(50.0, 0.01).unwrap();
        let traj = Trajectory {
            grid,
            states: states.iter().map(|z| State(*z)).collect(),
            controls: vec![0.0; states.len()],
            running_cost: None,
        };
        count_spikes(&traj, 50.0, 2.0)
    };
    assert_eq!(count(&dopri5_grid(&oracle::NORMAL, [0.0; 4], 0.01, 5000)), n_normal);
    assert_eq!(count(&dopri5_grid(&oracle::PATHOLOGICAL, [0.0; 4], 0.01, 5000)), n_patho);
}

#[test]
fn rk4_error_drops_by_order_four() {
    // Errors at the shared nodes t = 0.04 k against the adaptive oracle.
    let exact = dopri5_grid(&oracle::NORMAL, [0.0; 4], 0.04, 500);
    let errors: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&dt| {
            let traj = uncontrolled(&HHParams::normal(), 20.0, dt);
            let stride = (0.04 / dt).round() as usize;
            exact
                .iter()
                .enumerate()
                .map(|(k, z)| {
                    let s = &traj.states[k * stride];
                    (0..4).map(|i| (s.0[i] - z[i]).abs()).fold(0.0, f64::max)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    for pair in errors.windows(2) {
        let factor = pair[0] / pair[1];
        assert!(factor >= 12.0, "errors {errors:?}");
    }
}

#[test]
fn linear_interpolation_of_the_reference_is_accurate() {
    let p = HHParams::normal();
    let coarse = ReferenceTrajectory::new(&p, State::ZERO, &TimeGrid::with_step(20.0, 0.01).unwrap()).unwrap();
    let fine = uncontrolled(&p, 20.0, 0.001);
    let worst = fine
        .states
        .iter()
        .enumerate()
        .map(|(k, z)| (coarse.state_at(fine.grid.time(k)).v() - z.v()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.5, "interpolation error {worst} mV");
    for k in [0, 1, 777, 2000] {
        let t = coarse.grid().time(k);
        assert_eq!(coarse.state_at(t), coarse.trajectory().states[k]);
    }
    // Gating stays in range between nodes too.
    for i in 0..4000 {
        let z = coarse.state_at(i as f64 * 0.005);
        assert!(z.0[1..].iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn rollouts_are_bit_identical() {
    let a = uncontrolled(&HHParams::pathological(), 50.0, 0.01);
    let b = uncontrolled(&HHParams::pathological(), 50.0, 0.01);
    assert_eq!(a, b);
}

#[test]
fn shocks_are_local_and_exact() {
    let grid = TimeGrid::with_step(20.0, 0.01).unwrap();
    let p = HHParams::pathological();
    let plain = rk4_rollout(State::ZERO, &NoControl, &grid, &p).unwrap();
    let none = Shock {
        time: 10.0,
        delta: State::ZERO,
    };
    assert_eq!(rk4_rollout_shocked(State::ZERO, &NoControl, &grid, &p, &none).unwrap(), plain);

    let kick = Shock {
        time: 10.0,
        delta: State::new(10.0, 0.0, 0.0, 0.0),
    };
    let shocked = rk4_rollout_shocked(State::ZERO, &NoControl, &grid, &p, &kick).unwrap();
    let node = kick.node(&grid).unwrap();
    assert_eq!(node, 1000);
    assert_eq!(&shocked.states[..node], &plain.states[..node]);
    assert_eq!(shocked.states[node].v(), plain.states[node].v() + 10.0);

    for t in [0.0, 20.0, -1.0, 25.0] {
        let bad = Shock { time: t, ..kick };
        assert!(rk4_rollout_shocked(State::ZERO, &NoControl, &grid, &p, &bad).is_err());
    }
}

#[test]
fn csv_schema_is_stable() {
    let traj = uncontrolled(&HHParams::normal(), 1.0, 0.01);
    let mut buf = Vec::new();
    traj.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next(), Some("t,V,m,n,h,u,ell"));
    assert_eq!(CSV_HEADER, "t,V,m,n,h,u,ell");
    let rows = read_csv(text.as_bytes()).unwrap();
    assert_eq!(rows.len(), 101);
    for (row, z) in rows.iter().zip(&traj.states) {
        for i in 0..4 {
            assert!((row[i + 1] - z.0[i]).abs() <= 1e-10 * z.0[i].abs().max(1.0));
        }
    }
    assert!(read_csv("t,V,m,n,h,u\n".as_bytes()).is_err());
}
