//! Limited-memory BFGS with a backtracking Armijo line search.
//!
//! The objective callback fills the gradient and returns the value, or `None`
//! when the point cannot be evaluated (e.g. the rollout blew up); the line
//! search treats such points as infinitely bad.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 20,
            max_iterations: 20_000,
            c1: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f` from `x0` until `‖∇f‖ <= tolerance(f)`.
pub fn minimize<F, T>(mut f: F, x0: Vec<f64>, tolerance: T, cfg: &LbfgsConfig) -> Option<LbfgsOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> Option<f64>,
    T: Fn(f64) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut value = f(&x, &mut g)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut trial = vec![0.0; n];
    let mut g_trial = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];
    let mut iterations = 0;
    let mut restarted = false;

    loop {
        let gn = norm(&g);
        if gn <= tolerance(value) {
            return Some(LbfgsOutcome {
                x,
                value,
                grad_norm: gn,
                iterations,
                converged: true,
            });
        }
        if iterations >= cfg.max_iterations {
            return Some(LbfgsOutcome {
                x,
                value,
                grad_norm: gn,
                iterations,
                converged: false,
            });
        }

        // Two-loop recursion.
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[i] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / gn.max(1e-300));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha_buf[i];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi / gn);
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_backtracks {
            trial.iter_mut().zip(x.iter().zip(&dir)).for_each(|(t, (xi, di))| *t = xi + step * di);
            match f(&trial, &mut g_trial) {
                Some(v) if v <= value + cfg.c1 * step * slope => {
                    accepted = Some(v);
                    break;
                }
                Some(v) if v.is_finite() => {
                    // Safeguarded quadratic interpolation.
                    let q = -slope * step * step / (2.0 * (v - value - slope * step));
                    step = q.clamp(0.1 * step, 0.5 * step);
                }
                _ => step *= 0.25,
            }
        }
        let Some(new_value) = accepted else {
            if restarted || history.is_empty() {
                return Some(LbfgsOutcome {
                    x,
                    value,
                    grad_norm: gn,
                    iterations,
                    converged: false,
                });
            }
            history.clear();
            restarted = true;
            continue;
        };
        restarted = false;

        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_trial.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut g, &mut g_trial);
        value = new_value;
        iterations += 1;
    }
}
