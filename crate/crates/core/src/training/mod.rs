//! Semi-global training of the value network.
//!
//! Initial states are drawn from `ρ`, each is rolled out under the feedback
//! `u = −∂_VΦ/(2λ)` together with the running cost `ℓ` and the accumulated
//! HJB residual `c_HJB`, and the per-sample loss
//!
//! ```text
//! ℓ(T) + G(z(T)) + γ₁ c_HJB(T) + γ₂ |Φ(T, z(T)) − G(z(T))|
//! ```
//!
//! is averaged over the batch. Gradients are exact for the discrete loss:
//! they run backward through every RK4 stage of the augmented system, and
//! through `∇Φ` into the network (see [`crate::valuenet::phi_param_grad`]).

mod adam;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{jacobian_unchecked, vector_field, HHParams, State};
use crate::error::{Error, Result};
use crate::ocp::CostWeights;
use crate::sim::{Controller, ReferenceTrajectory, TimeGrid, Trajectory};
use crate::valuenet::{phi_param_grad, space_time, Architecture, Normalization, Tape, ValueNetParams};

pub use adam::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Rollout horizon T (ms).
    pub horizon: f64,
    /// RK4 step of training rollouts (ms).
    pub dt: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Standard deviation of the initial voltage under `ρ` (mV).
    pub rho_std: f64,
    pub seed: u64,
    /// Fixed validation draws, evaluated every `validation_every` iterations.
    pub validation_size: usize,
    pub validation_every: usize,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub architecture: Architecture,
    pub normalization: Normalization,
    /// Samples whose state norm exceeds this are treated as blown up.
    pub blowup_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 20.0,
            dt: 0.025,
            // Sized to finish in under ten minutes on a single core.
            batch_size: 8,
            iterations: 1100,
            learning_rate: 0.005,
            gamma1: 1.0,
            gamma2: 1.0,
            rho_std: 10.0,
            seed: 0,
            validation_size: 8,
            validation_every: 25,
            checkpoint_every: 100,
            architecture: Architecture::default(),
            normalization: Normalization {
                input: [0.1, 0.02, 1.0, 1.0, 1.0],
                output: 5000.0,
            },
            blowup_norm: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("train.{name} must be finite and positive, got {v}")))
            }
        };
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        positive("learning_rate", self.learning_rate)?;
        positive("rho_std", self.rho_std)?;
        positive("blowup_norm", self.blowup_norm)?;
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("train.{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("validation_size", self.validation_size),
            ("validation_every", self.validation_every),
            ("architecture.width", self.architecture.width),
        ] {
            if v == 0 {
                return Err(Error::config(format!("train.{name} must be at least 1")));
            }
        }
        self.normalization.validate()?;
        self.grid().map(|_| ())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::with_step(self.horizon, self.dt)
    }

    /// SHA-256 of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Plant, weights and target shared by every rollout.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub plant: HHParams,
    pub weights: CostWeights,
    pub reference: &'a ReferenceTrajectory,
}

/// Terminal value of the augmented system `(z, ℓ, c_HJB)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub z: State,
    pub ell: f64,
    pub c_hjb: f64,
}

/// Batch-mean loss terms. `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ell: f64,
    pub terminal: f64,
    /// `γ₁ c_HJB(T)`.
    pub hjb: f64,
    /// `γ₂ |Φ(T, z(T)) − G(z(T))|`.
    pub terminal_match: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, other: &LossBreakdown) {
        self.ell += other.ell;
        self.terminal += other.terminal;
        self.hjb += other.hjb;
        self.terminal_match += other.terminal_match;
    }

    fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for it in items {
            acc.add(it);
        }
        let n = items.len() as f64;
        acc.ell /= n;
        acc.terminal /= n;
        acc.hjb /= n;
        acc.terminal_match /= n;
        acc.total = acc.ell + acc.terminal + acc.hjb + acc.terminal_match;
        acc
    }
}

/// Initial states `(ξ, 0, 0, 0)` with `ξ ~ N(0, rho_std²)`.
pub fn sample_rho<R: Rng + ?Sized>(count: usize, cfg: &TrainConfig, rng: &mut R) -> Vec<State> {
    (0..count)
        .map(|_| {
            let n: f64 = rng.sample(StandardNormal);
            State::new(cfg.rho_std * n, 0.0, 0.0, 0.0)
        })
        .collect()
}

/// Feedback law `u(t, z) = −∂_VΦ(t, z)/(2λ)` of a value network.
pub struct FeedbackController<'a> {
    params: &'a ValueNetParams,
    lambda: f64,
    tape: RefCell<Tape>,
}

impl<'a> FeedbackController<'a> {
    pub fn new(params: &'a ValueNetParams, lambda: f64) -> Self {
        FeedbackController {
            params,
            lambda,
            tape: RefCell::new(Tape::new(params.arch())),
        }
    }
}

impl Controller for FeedbackController<'_> {
    fn control(&self, t: f64, z: &State) -> f64 {
        let mut tape = self.tape.borrow_mut();
        tape.record(self.params, &space_time(t, z));
        -tape.gradient()[1] / (2.0 * self.lambda)
    }
}

const STAGE_WEIGHTS: [f64; 4] = [1.0, 2.0, 2.0, 1.0];

/// Grid and per-stage targets shared by all rollouts of one horizon.
struct Context<'a> {
    problem: Problem<'a>,
    grid: TimeGrid,
    /// Target at node `k` is `targets[2k]`, at `t_k + dt/2` it is
    /// `targets[2k + 1]`.
    targets: Vec<State>,
    gamma1: f64,
    gamma2: f64,
    blowup_norm: f64,
}

impl<'a> Context<'a> {
    fn new(problem: Problem<'a>, cfg: &TrainConfig) -> Result<Self> {
        problem.weights.validate()?;
        let grid = cfg.grid()?;
        if !problem.reference.covers(grid.t0, grid.t_end) {
            return Err(Error::domain("reference does not cover the training horizon"));
        }
        let half = 0.5 * grid.dt();
        let targets = (0..=2 * grid.n_steps)
            .map(|i| {
                let t = if i % 2 == 0 { grid.time(i / 2) } else { grid.time(i / 2) + half };
                problem.reference.state_at(t)
            })
            .collect();
        Ok(Context {
            problem,
            grid,
            targets,
            gamma1: cfg.gamma1,
            gamma2: cfg.gamma2,
            blowup_norm: cfg.blowup_norm,
        })
    }

    /// Target of stage `j` of step `k`.
    #[inline]
    fn stage_target(&self, k: usize, j: usize) -> &State {
        &self.targets[2 * k + [0, 1, 1, 2][j]]
    }
}

/// Per-stage quantities derived from a recorded tape.
struct StageEval {
    u: f64,
    /// `f(z) + e₁u`.
    k: State,
    running: f64,
    /// `−∂_tΦ + H`, whose absolute value is the HJB residual.
    residual: f64,
}

#[inline]
fn stage_eval(ctx: &Context<'_>, tape: &Tape, target: &State) -> StageEval {
    let w = &ctx.problem.weights;
    let y = tape.input();
    let g = tape.gradient();
    let z = State([y[1], y[2], y[3], y[4]]);
    let u = -g[1] / (2.0 * w.lambda);
    let mut k = State(vector_field(&z.0, &ctx.problem.plant));
    k.0[0] += u;
    let running = w.lambda * u * u + 0.5 * w.q * (z - *target).norm_sq();
    let p = State([g[1], g[2], g[3], g[4]]);
    let h = -running - p.dot(&k);
    StageEval {
        u,
        k,
        running,
        residual: -g[0] + h,
    }
}

struct Forward {
    nodes: Vec<State>,
    controls: Vec<f64>,
    ell: f64,
    c_hjb: f64,
    terminal: f64,
    /// `Φ(T, z(T)) − G(z(T))`.
    mismatch: f64,
}

impl Forward {
    fn breakdown(&self, ctx: &Context<'_>) -> LossBreakdown {
        let hjb = ctx.gamma1 * self.c_hjb;
        let terminal_match = ctx.gamma2 * self.mismatch.abs();
        LossBreakdown {
            ell: self.ell,
            terminal: self.terminal,
            hjb,
            terminal_match,
            total: self.ell + self.terminal + hjb + terminal_match,
        }
    }
}

/// Augmented RK4 rollout; `tapes` receives the `4N` stage evaluations
/// followed by the terminal one. `None` on blow-up.
fn forward(ctx: &Context<'_>, params: &ValueNetParams, x: &State, tapes: &mut Vec<Tape>) -> Option<Forward> {
    let grid = &ctx.grid;
    let n = grid.n_steps;
    let dt = grid.dt();
    let half = 0.5 * dt;
    if tapes.len() != 4 * n + 1 || tapes.first().is_some_and(|t| t.arch() != params.arch()) {
        tapes.clear();
        tapes.resize_with(4 * n + 1, || Tape::new(params.arch()));
    }
    let mut nodes = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n + 1);
    let mut z = *x;
    let mut ell = 0.0;
    let mut c_hjb = 0.0;
    for k in 0..n {
        nodes.push(z);
        let t = grid.time(k);
        let mut acc = State::ZERO;
        let mut prev_k = State::ZERO;
        for j in 0..4 {
            let (ts, zs) = match j {
                0 => (t, z),
                1 | 2 => (t + half, z + prev_k * half),
                _ => (t + dt, z + prev_k * dt),
            };
            let tape = &mut tapes[4 * k + j];
            tape.record(params, &space_time(ts, &zs));
            let e = stage_eval(ctx, tape, ctx.stage_target(k, j));
            if j == 0 {
                controls.push(e.u);
            }
            let c = STAGE_WEIGHTS[j] * dt / 6.0;
            acc += e.k * c;
            ell += c * e.running;
            c_hjb += c * e.residual.abs();
            prev_k = e.k;
        }
        z += acc;
        if !z.is_finite() || z.norm() > ctx.blowup_norm || !ell.is_finite() || !c_hjb.is_finite() {
            return None;
        }
    }
    nodes.push(z);
    let tape = &mut tapes[4 * n];
    tape.record(params, &space_time(grid.t_end, &z));
    controls.push(-tape.gradient()[1] / (2.0 * ctx.problem.weights.lambda));
    let terminal = 0.5 * (z - ctx.targets[2 * n]).norm_sq();
    let mismatch = tape.value() - terminal;
    if !mismatch.is_finite() {
        return None;
    }
    Some(Forward {
        nodes,
        controls,
        ell,
        c_hjb,
        terminal,
        mismatch,
    })
}

/// Adds `∂(sample loss)/∂θ` to `grad`, scaled by `scale`.
fn backward(ctx: &Context<'_>, params: &ValueNetParams, fwd: &Forward, tapes: &[Tape], scale: f64, grad: &mut [f64]) {
    let grid = &ctx.grid;
    let n = grid.n_steps;
    let dt = grid.dt();
    let half = 0.5 * dt;
    let w = &ctx.problem.weights;

    // Terminal: G + γ₂|Φ − G|.
    let z_n = fwd.nodes[n];
    let sign = ctx.gamma2 * fwd.mismatch.signum();
    let g_grad = z_n - ctx.targets[2 * n];
    let y_bar = phi_param_grad(params, &tapes[4 * n], scale * sign, &[0.0; 5], grad);
    let mut z_bar = g_grad * (scale * (1.0 - sign));
    for i in 0..4 {
        z_bar.0[i] += y_bar[i + 1];
    }

    let ell_bar = scale;
    let c_bar = scale * ctx.gamma1;
    for k in (0..n).rev() {
        // z_{k+1} = z_k + Σ c_j k_j; stage j reads z_k + a_j k_{j−1}.
        let mut k_bar = [State::ZERO; 4];
        for j in 0..4 {
            k_bar[j] = z_bar * (STAGE_WEIGHTS[j] * dt / 6.0);
        }
        let mut zk_bar = z_bar;
        for j in (0..4).rev() {
            let tape = &tapes[4 * k + j];
            let target = ctx.stage_target(k, j);
            let e = stage_eval(ctx, tape, target);
            let c = STAGE_WEIGHTS[j] * dt / 6.0;
            let y = tape.input();
            let g = tape.gradient();
            let zs = State([y[1], y[2], y[3], y[4]]);
            let p = State([g[1], g[2], g[3], g[4]]);

            // residual = −g_t + H, H = −L − p·k.
            let r_bar = c_bar * c * e.residual.signum();
            let mut g_bar = [0.0; 5];
            g_bar[0] = -r_bar;
            let l_bar = ell_bar * c - r_bar;
            let kb = k_bar[j] - p * r_bar;
            for i in 0..4 {
                g_bar[i + 1] -= r_bar * e.k.0[i];
            }
            // L = λu² + (Q/2)‖z − z*‖², k = f(z) + e₁u, u = −g_V/(2λ).
            let u_bar = 2.0 * w.lambda * e.u * l_bar + kb.0[0];
            g_bar[1] -= u_bar / (2.0 * w.lambda);
            let mut zs_bar = (zs - *target) * (w.q * l_bar);
            let jac = jacobian_unchecked(&zs.0, &ctx.problem.plant);
            for i in 0..4 {
                for m in 0..4 {
                    zs_bar.0[m] += jac[i][m] * kb.0[i];
                }
            }
            let y_bar = phi_param_grad(params, tape, 0.0, &g_bar, grad);
            for i in 0..4 {
                zs_bar.0[i] += y_bar[i + 1];
            }
            zk_bar += zs_bar;
            match j {
                1 | 2 => k_bar[j - 1] += zs_bar * half,
                3 => k_bar[2] += zs_bar * dt,
                _ => {}
            }
        }
        z_bar = zk_bar;
    }
}

/// Rollout of the augmented system from `x` under the network's feedback.
/// The returned trajectory carries node controls only.
pub fn augmented_rollout(
    params: &ValueNetParams,
    x: &State,
    problem: Problem<'_>,
    cfg: &TrainConfig,
) -> Result<(Trajectory, AugmentedState)> {
    if !x.is_finite() {
        return Err(Error::domain("augmented rollout: non-finite initial state"));
    }
    let ctx = Context::new(problem, cfg)?;
    let mut tapes = Vec::new();
    let fwd = forward(&ctx, params, x, &mut tapes).ok_or_else(|| Error::Training("augmented rollout blew up".into()))?;
    let aug = AugmentedState {
        z: fwd.nodes[ctx.grid.n_steps],
        ell: fwd.ell,
        c_hjb: fwd.c_hjb,
    };
    Ok((
        Trajectory {
            grid: ctx.grid,
            states: fwd.nodes,
            controls: fwd.controls,
            running_cost: None,
        },
        aug,
    ))
}

/// Batch evaluation: mean loss over the samples that did not blow up.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    /// Mean `c_HJB(T)` and `|Φ(T, z(T)) − G(z(T))|` without the γ weights.
    pub c_hjb: f64,
    pub mismatch: f64,
    pub dropped: usize,
    /// Gradient of `breakdown.total`, when requested.
    pub gradient: Option<Vec<f64>>,
}

fn evaluate(
    ctx: &Context<'_>,
    params: &ValueNetParams,
    batch: &[State],
    with_gradient: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    // Collected in batch order, so the reduction below is deterministic for
    // any thread count.
    let per_sample: Vec<Option<(LossBreakdown, f64, f64, Option<Vec<f64>>)>> = batch
        .par_iter()
        .map_init(Vec::new, |tapes, x| {
            let fwd = forward(ctx, params, x, tapes)?;
            let bd = fwd.breakdown(ctx);
            if !bd.total.is_finite() {
                return None;
            }
            let grad = with_gradient.then(|| {
                let mut g = vec![0.0; params.len()];
                backward(ctx, params, &fwd, tapes, 1.0, &mut g);
                g
            });
            if grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return None;
            }
            Some((bd, fwd.c_hjb, fwd.mismatch.abs(), grad))
        })
        .collect();
    let kept: Vec<_> = per_sample.into_iter().flatten().collect();
    let dropped = batch.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::Training(format!("all {} samples blew up", batch.len())));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} of {} samples after blow-up", batch.len());
    }
    let n = kept.len() as f64;
    let breakdowns: Vec<LossBreakdown> = kept.iter().map(|s| s.0).collect();
    let gradient = with_gradient.then(|| {
        let mut g = vec![0.0; params.len()];
        for s in &kept {
            for (gi, si) in g.iter_mut().zip(s.3.as_ref().unwrap()) {
                *gi += si;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        g
    });
    Ok(BatchLoss {
        breakdown: LossBreakdown::mean_of(&breakdowns),
        c_hjb: kept.iter().map(|s| s.1).sum::<f64>() / n,
        mismatch: kept.iter().map(|s| s.2).sum::<f64>() / n,
        dropped,
        gradient,
    })
}

/// Mean loss over `batch`.
pub fn loss(params: &ValueNetParams, batch: &[State], problem: Problem<'_>, cfg: &TrainConfig) -> Result<BatchLoss> {
    let ctx = Context::new(problem, cfg)?;
    evaluate(&ctx, params, batch, false)
}

/// Mean loss over `batch` and its exact parameter gradient.
pub fn loss_and_gradient(
    params: &ValueNetParams,
    batch: &[State],
    problem: Problem<'_>,
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    let ctx = Context::new(problem, cfg)?;
    evaluate(&ctx, params, batch, true)
}

/// One training-log row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub dropped_samples: usize,
}

pub const LOG_HEADER: &str = "iter,loss_total,ell,terminal,hjb,terminal_match,dropped_samples";

pub fn write_log_csv<W: std::io::Write>(rows: &[LogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{}",
            r.iter, l.total, l.ell, l.terminal, l.hjb, l.terminal_match, r.dropped_samples
        )?;
    }
    Ok(())
}

/// Validation-set evaluation at a given iteration (0 = initialization).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub c_hjb: f64,
    pub terminal_mismatch: f64,
    pub dropped_samples: usize,
}

pub const VALIDATION_HEADER: &str =
    "iter,loss_total,ell,terminal,hjb,terminal_match,c_hjb,terminal_mismatch,dropped_samples";

/// Validation rows as CSV. Floats use the shortest round-trip notation.
pub fn write_validation_csv<W: std::io::Write>(rows: &[ValidationRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{VALIDATION_HEADER}")?;
    for r in rows {
        let l = &r.loss;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            r.iter,
            l.total,
            l.ell,
            l.terminal,
            l.hjb,
            l.terminal_match,
            r.c_hjb,
            r.terminal_mismatch,
            r.dropped_samples
        )?;
    }
    Ok(())
}

fn validation_row(ctx: &Context<'_>, params: &ValueNetParams, set: &[State], iter: usize) -> Result<ValidationRow> {
    let v = evaluate(ctx, params, set, false)?;
    Ok(ValidationRow {
        iter,
        loss: v.breakdown,
        c_hjb: v.c_hjb,
        terminal_mismatch: v.mismatch,
        dropped_samples: v.dropped,
    })
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    /// Periodic checkpoint after `iteration` optimizer steps.
    Checkpoint { iteration: usize, params: &'a ValueNetParams, loss: f64 },
    /// A new best validation loss.
    BestValidation { row: &'a ValidationRow, params: &'a ValueNetParams },
    Validation { row: &'a ValidationRow },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub initial: ValueNetParams,
    pub params: ValueNetParams,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValidationRow>,
}

/// Initial parameters of a run: deterministic in `cfg.seed`.
pub fn initial_params(cfg: &TrainConfig) -> Result<ValueNetParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ValueNetParams::init(cfg.architecture, &mut rng)?.with_normalization(cfg.normalization)
}

/// Fixed validation draws of a run.
pub fn validation_set(cfg: &TrainConfig) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    sample_rho(cfg.validation_size, cfg, &mut rng)
}

/// Adam on the batch loss. Every `checkpoint_every` steps and on each
/// validation the hook is called; an error from the hook aborts training.
pub fn train(
    cfg: &TrainConfig,
    problem: Problem<'_>,
    hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = Context::new(problem, cfg)?;
    let initial = initial_params(cfg)?;
    let mut params = initial.clone();
    let validation = validation_set(cfg);
    // Batches come from their own stream so the validation set and the
    // initialization do not shift when the batch size changes.
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut val_rows = Vec::new();
    let mut best = f64::INFINITY;
    let mut last_good = 0;

    let mut on_validation = |row: ValidationRow, params: &ValueNetParams, hook: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>| {
        log::info!(
            "validation {}: loss {:.6e} c_hjb {:.6e} mismatch {:.6e}",
            row.iter,
            row.loss.total,
            row.c_hjb,
            row.terminal_mismatch
        );
        val_rows.push(row);
        hook(TrainEvent::Validation { row: &row })?;
        if row.loss.total < best {
            best = row.loss.total;
            hook(TrainEvent::BestValidation { row: &row, params })?;
        }
        Ok::<_, Error>(())
    };

    on_validation(validation_row(&ctx, &params, &validation, 0)?, &params, hook)?;
    for iter in 1..=cfg.iterations {
        let batch = sample_rho(cfg.batch_size, cfg, &mut batch_rng);
        let out = evaluate(&ctx, &params, &batch, true).map_err(|e| {
            Error::Training(format!("iteration {iter}: {e}; last good checkpoint at iteration {last_good}"))
        })?;
        let grad = out.gradient.expect("gradient requested");
        if !out.breakdown.total.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged at iteration {iter}; last good checkpoint at iteration {last_good}"
            )));
        }
        adam.step(params.as_mut_slice(), &grad);
        if !params.is_finite() {
            return Err(Error::Training(format!(
                "parameters diverged at iteration {iter}; last good checkpoint at iteration {last_good}"
            )));
        }
        log::debug!("iteration {iter}: loss {:.6e} dropped {}", out.breakdown.total, out.dropped);
        log.push(LogRow {
            iter,
            loss: out.breakdown,
            dropped_samples: out.dropped,
        });
        if iter % cfg.validation_every == 0 || iter == cfg.iterations {
            on_validation(validation_row(&ctx, &params, &validation, iter)?, &params, hook)?;
        }
        if cfg.checkpoint_every > 0 && (iter % cfg.checkpoint_every == 0 || iter == cfg.iterations) {
            hook(TrainEvent::Checkpoint {
                iteration: iter,
                params: &params,
                loss: out.breakdown.total,
            })?;
            last_good = iter;
        }
    }
    Ok(TrainOutcome {
        initial,
        params,
        log,
        validation: val_rows,
    })
}
