use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use neurocontrol::ocp::{self, Objective};
use neurocontrol::openloop::{solve_all_at_once, Instance, SolverReport};
use neurocontrol::sim::{count_spikes, fmt_decimal, rk4_rollout, rk4_rollout_shocked, NoControl};
use neurocontrol::training::{self, FeedbackController, Problem, TrainEvent, ValidationRow};
use neurocontrol::valuenet::{load_checkpoint, save_checkpoint, CheckpointMetadata, ValueNetParams};
use neurocontrol::{CostWeights, HHParams, ReferenceTrajectory, State, TimeGrid, Trajectory};

use crate::{suboptimality, CliError, OutputDir, RunConfig};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const BEST_CHECKPOINT: &str = "best_checkpoint.json";
pub const SWEEP_HEADER: &str = "xi,J_feedback,J_openloop,suboptimality,in_range,status";

/// Distance under which a shocked rollout counts as back on track.
pub const RECOVERY_TUBE: f64 = 0.5;
/// How long it has to stay inside the tube (ms).
pub const RECOVERY_HOLD: f64 = 1.0;

fn start(cfg: &RunConfig) -> Result<OutputDir, CliError> {
    let out = OutputDir::create(&cfg.output_dir)?;
    out.write_final(RESOLVED_CONFIG, cfg.to_toml().as_bytes())?;
    Ok(out)
}

fn eval_grid(cfg: &RunConfig) -> Result<TimeGrid, CliError> {
    Ok(cfg.grid.grid()?)
}

/// Normal-parameter reference on the evaluation grid.
fn reference(cfg: &RunConfig, grid: &TimeGrid) -> Result<ReferenceTrajectory, CliError> {
    Ok(ReferenceTrajectory::new(&cfg.plant.normal(), State::ZERO, grid)?)
}

/// Fills the running-cost column with the accumulated tracking cost.
fn with_cost(mut traj: Trajectory, w: &CostWeights, reference: &ReferenceTrajectory) -> Trajectory {
    traj.running_cost = Some(ocp::cumulative_running_cost(&traj, w, reference));
    traj
}

fn write_traj(out: &mut OutputDir, name: &str, traj: &Trajectory) -> Result<(), CliError> {
    out.write(name, |w| traj.write_csv(w))
}

fn write_json<T: Serialize>(out: &mut OutputDir, name: &str, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    out.write(name, |w| writeln!(w, "{text}"))
}

fn load_params(cfg: &RunConfig, checkpoint: &Path) -> Result<ValueNetParams, CliError> {
    let (params, meta) = load_checkpoint(checkpoint, Some(cfg.train.architecture))
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", checkpoint.display())))?;
    log::info!(
        "loaded {} (iteration {}, config {})",
        checkpoint.display(),
        meta.iteration,
        meta.config_hash
    );
    Ok(params)
}

#[derive(Debug, Serialize)]
struct SpikeSummary {
    threshold: f64,
    refractory: f64,
    normal: usize,
    pathological: usize,
}

/// Zero-control rollouts of the normal and pathological neuron from rest.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let mut out = start(cfg)?;
    let sim = &cfg.simulate;
    let grid = sim.grid.grid()?;
    let reference = reference(cfg, &grid)?;
    let mut counts = [0; 2];
    for (i, (name, plant)) in [
        ("normal.csv", cfg.plant.normal()),
        ("pathological.csv", cfg.plant.pathological()),
    ]
    .into_iter()
    .enumerate()
    {
        let traj = with_cost(rk4_rollout(State::ZERO, &NoControl, &grid, &plant)?, &cfg.cost, &reference);
        counts[i] = count_spikes(&traj, sim.spike_threshold, sim.refractory);
        write_traj(&mut out, name, &traj)?;
    }
    log::info!("spikes: normal {}, pathological {}", counts[0], counts[1]);
    let summary = SpikeSummary {
        threshold: sim.spike_threshold,
        refractory: sim.refractory,
        normal: counts[0],
        pathological: counts[1],
    };
    write_json(&mut out, "spikes.json", &summary)?;
    out.commit()
}

#[derive(Debug, Serialize)]
struct SolveReport<'a> {
    initial_state: State,
    #[serde(flatten)]
    report: &'a SolverReport,
}

/// All-at-once baseline solve from the configured initial state.
pub fn solve(cfg: &RunConfig) -> Result<(), CliError> {
    let mut out = start(cfg)?;
    let grid = eval_grid(cfg)?;
    let reference = reference(cfg, &grid)?;
    let inst = Instance::new(cfg.plant.pathological(), cfg.cost, &reference, grid)?;
    let x = cfg.solve.initial_state;
    let (traj, report) = solve_all_at_once(&inst, &x, &cfg.solve.solver)?;
    log::info!(
        "J = {:.6} (G = {:.3e}), feasibility {:.2e}, stationarity {:.2e}, {} iterations",
        report.objective.total,
        report.objective.terminal,
        report.feasibility,
        report.stationarity,
        report.iterations
    );
    write_traj(&mut out, "solve.csv", &with_cost(traj, &cfg.cost, &reference))?;
    write_json(
        &mut out,
        "solve_report.json",
        &SolveReport {
            initial_state: x,
            report: &report,
        },
    )?;
    if !report.converged {
        return Err(neurocontrol::Error::Solver(format!(
            "all-at-once solve did not converge in {} iterations",
            report.iterations
        ))
        .into());
    }
    out.commit()
}

/// Trains the value network. Periodic checkpoints go straight to `checkpoint`
/// so that a failed run keeps its last good one.
pub fn train(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let mut out = start(cfg)?;
    let final_path = checkpoint.map_or_else(|| out.path(CHECKPOINT), Path::to_path_buf);
    let best_path = out.path(BEST_CHECKPOINT);
    let tc = &cfg.train;
    let eval = eval_grid(cfg)?;
    // Cover the training horizon even when it is longer than the evaluation grid.
    let ref_grid = TimeGrid::with_step(tc.horizon.max(eval.t_end), eval.dt())?;
    let reference = reference(cfg, &ref_grid)?;
    let problem = Problem {
        plant: cfg.plant.pathological(),
        weights: cfg.cost,
        reference: &reference,
    };
    let hash = tc.hash();
    let meta = |iteration, loss| CheckpointMetadata {
        config_hash: hash.clone(),
        iteration,
        loss,
    };
    let mut validation: Vec<ValidationRow> = Vec::new();
    let mut hook = |event: TrainEvent<'_>| -> neurocontrol::Result<()> {
        match event {
            TrainEvent::Checkpoint {
                iteration,
                params,
                loss,
            } => save_checkpoint(&final_path, params, &meta(iteration, loss)),
            TrainEvent::BestValidation { row, params } => {
                save_checkpoint(&best_path, params, &meta(row.iter, row.loss.total))
            }
            TrainEvent::Validation { row } => {
                validation.push(*row);
                Ok(())
            }
        }
    };
    let result = training::train(tc, problem, &mut hook);
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            out.write("validation.csv", |w| training::write_validation_csv(&validation, w))?;
            return Err(e.into());
        }
    };
    let last = outcome.validation.last().expect("training validates at the end");
    save_checkpoint(&final_path, &outcome.params, &meta(last.iter, last.loss.total))?;
    let first = &outcome.validation[0];
    log::info!(
        "validation c_hjb {:.4e} -> {:.4e}, terminal mismatch {:.4e} -> {:.4e}",
        first.c_hjb,
        last.c_hjb,
        first.terminal_mismatch,
        last.terminal_mismatch
    );
    out.write("train_log.csv", |w| training::write_log_csv(&outcome.log, w))?;
    out.write("validation.csv", |w| training::write_validation_csv(&outcome.validation, w))?;
    out.commit()
}

/// One sweep row. A failed rollout or solve leaves its objective as NaN and
/// says why in `status`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub xi: f64,
    pub j_feedback: f64,
    pub j_openloop: f64,
    pub in_range: bool,
    pub status: String,
}

impl SweepRow {
    pub fn suboptimality(&self) -> f64 {
        suboptimality(self.j_feedback, self.j_openloop)
    }
}

fn csv_field(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], ";")
}

pub fn write_sweep_csv<W: Write + ?Sized>(rows: &[SweepRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_decimal(r.xi),
            fmt_decimal(r.j_feedback),
            fmt_decimal(r.j_openloop),
            fmt_decimal(r.suboptimality()),
            r.in_range,
            csv_field(&r.status)
        )?;
    }
    Ok(())
}

fn sweep_point(
    xi: f64,
    cfg: &RunConfig,
    params: &ValueNetParams,
    inst: &Instance<'_, HHParams>,
) -> SweepRow {
    let x = State::new(xi, 0.0, 0.0, 0.0);
    let mut status = Vec::new();
    let controller = FeedbackController::new(params, cfg.cost.lambda);
    let j_feedback = match rk4_rollout(x, &controller, &inst.grid, &inst.plant) {
        Ok(traj) => ocp::objective(&traj, &inst.weights, inst.reference).total,
        Err(e) => {
            status.push(format!("feedback: {e}"));
            f64::NAN
        }
    };
    let j_openloop = match solve_all_at_once(inst, &x, &cfg.solve.solver) {
        Ok((_, report)) => {
            if !report.converged {
                status.push(format!("openloop: not converged after {} iterations", report.iterations));
            }
            report.objective.total
        }
        Err(e) => {
            status.push(format!("openloop: {e}"));
            f64::NAN
        }
    };
    log::debug!("xi {xi}: feedback {j_feedback:.6e}, openloop {j_openloop:.6e}");
    SweepRow {
        xi,
        j_feedback,
        j_openloop,
        in_range: cfg.sweep.in_range(xi),
        status: if status.is_empty() { "ok".into() } else { status.join("; ") },
    }
}

/// Feedback against open-loop objectives over a range of initial voltages.
pub fn sweep(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let params = load_params(cfg, checkpoint)?;
    let mut out = start(cfg)?;
    let grid = eval_grid(cfg)?;
    let reference = reference(cfg, &grid)?;
    let inst = Instance::new(cfg.plant.pathological(), cfg.cost, &reference, grid)?;
    let rows: Vec<SweepRow> = cfg
        .sweep
        .values()
        .into_par_iter()
        .map(|xi| sweep_point(xi, cfg, &params, &inst))
        .collect();
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        log::warn!("{failed} of {} sweep points reported a failure", rows.len());
    }
    out.write("sweep.csv", |w| write_sweep_csv(&rows, w))?;
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShockSummary {
    pub shock_time: f64,
    /// Grid time at which the shock was applied.
    pub shock_node_time: f64,
    pub delta: State,
    pub tube: f64,
    pub hold: f64,
    /// First time after the shock from which the shocked rollout stays
    /// within `tube` of the unshocked one for `hold` ms.
    pub recovery_time: Option<f64>,
    pub unshocked: Objective,
    pub shocked: Objective,
}

/// First node time `t ≥ grid.time(from)` such that `dist` stays below
/// `tube` on every node of `[t, t + hold]`, with the window inside the grid.
pub fn recovery_time(grid: &TimeGrid, dist: &[f64], from: usize, tube: f64, hold: f64) -> Option<f64> {
    let n = dist.len();
    let mut run_start: Option<usize> = None;
    for k in from..n {
        if dist[k] < tube {
            let s = *run_start.get_or_insert(k);
            if grid.time(k) - grid.time(s) >= hold - 1e-9 {
                return Some(grid.time(s));
            }
        } else {
            run_start = None;
        }
    }
    None
}

/// Feedback rollouts from rest with and without the configured shock.
pub fn shock(cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    let params = load_params(cfg, checkpoint)?;
    let mut out = start(cfg)?;
    let grid = eval_grid(cfg)?;
    let reference = reference(cfg, &grid)?;
    let plant = cfg.plant.pathological();
    let spec = cfg.shock_spec()?;
    let node = spec.node(&grid)?;
    let controller = FeedbackController::new(&params, cfg.cost.lambda);
    let plain = rk4_rollout(State::ZERO, &controller, &grid, &plant)?;
    let shocked = rk4_rollout_shocked(State::ZERO, &controller, &grid, &plant, &spec)?;
    let dist: Vec<f64> = plain
        .states
        .iter()
        .zip(&shocked.states)
        .map(|(a, b)| (*a - *b).norm())
        .collect();
    let summary = ShockSummary {
        shock_time: spec.time,
        shock_node_time: grid.time(node),
        delta: spec.delta,
        tube: RECOVERY_TUBE,
        hold: RECOVERY_HOLD,
        recovery_time: recovery_time(&grid, &dist, node, RECOVERY_TUBE, RECOVERY_HOLD),
        unshocked: ocp::objective(&plain, &cfg.cost, &reference),
        shocked: ocp::objective(&shocked, &cfg.cost, &reference),
    };
    match summary.recovery_time {
        Some(t) => log::info!("recovered at t = {t} ms"),
        None => log::warn!("shocked rollout did not recover within the horizon"),
    }
    write_traj(&mut out, "unshocked.csv", &with_cost(plain, &cfg.cost, &reference))?;
    write_traj(&mut out, "shocked.csv", &with_cost(shocked, &cfg.cost, &reference))?;
    write_json(&mut out, "shock_summary.json", &summary)?;
    out.commit()
}

/// Default checkpoint location inside an output directory.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(CHECKPOINT)
}
