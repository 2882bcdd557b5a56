//! Neural value function
//!
//! ```text
//! Φ_θ(y) = wᵀN(y) + ½ yᵀ(AᵀA)y + bᵀy + c,    y = (t, z) ∈ R⁵
//! ```
//!
//! with `N` an opening affine map `R⁵ → R^width` followed by `depth` residual
//! updates `h ← h + tanh(K h + β)`. All parameters live in one flat vector
//! (see [`Layout`]) so optimizers and finite-difference checks can treat them
//! uniformly.
//!
//! Evaluation records a [`Tape`]. [`phi_param_grad`] reverse-accumulates
//! sensitivities of both outputs, `Φ` and `∇_yΦ`, into the parameters and the
//! input; the second output makes this a Hessian-vector product, computed by
//! a tangent pass along the incoming gradient sensitivity followed by a
//! reverse sweep over it.

mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::State;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMetadata, FORMAT_VERSION};

/// Input dimension: time followed by the four state components.
pub const INPUT_DIM: usize = 5;
/// Rows of the quadratic factor `A`.
pub const QUAD_ROWS: usize = 4;

/// Space-time input `y = (t, z)`.
pub type SpaceTimeInput = [f64; INPUT_DIM];

pub fn space_time(t: f64, z: &State) -> SpaceTimeInput {
    [t, z.0[0], z.0[1], z.0[2], z.0[3]]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub width: usize,
    pub depth: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { width: 64, depth: 2 }
    }
}

/// Fixed affine change of units around the trainable form: the network sees
/// `ŷ = input ⊙ y` and its output is multiplied by `output`. Identity by
/// default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub input: [f64; INPUT_DIM],
    pub output: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            input: [1.0; INPUT_DIM],
            output: 1.0,
        }
    }
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        if self.input.iter().chain([&self.output]).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config("normalization factors must be finite and positive"));
        }
        Ok(())
    }

    fn apply(&self, y: &SpaceTimeInput) -> SpaceTimeInput {
        std::array::from_fn(|i| self.input[i] * y[i])
    }
}

/// Offsets of each weight block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub arch: Architecture,
}

impl Layout {
    pub fn w(&self) -> std::ops::Range<usize> {
        0..self.arch.width
    }

    /// Opening weight, `width × 5` row-major.
    pub fn opening_weight(&self) -> std::ops::Range<usize> {
        let s = self.arch.width;
        s..s + INPUT_DIM * self.arch.width
    }

    pub fn opening_bias(&self) -> std::ops::Range<usize> {
        let s = self.opening_weight().end;
        s..s + self.arch.width
    }

    fn layer_start(&self, i: usize) -> usize {
        let wd = self.arch.width;
        self.opening_bias().end + i * (wd * wd + wd)
    }

    /// Residual weight `K_i`, `width × width` row-major.
    pub fn layer_weight(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.layer_start(i);
        s..s + self.arch.width * self.arch.width
    }

    pub fn layer_bias(&self, i: usize) -> std::ops::Range<usize> {
        let s = self.layer_weight(i).end;
        s..s + self.arch.width
    }

    /// `A`, `4 × 5` row-major.
    pub fn a(&self) -> std::ops::Range<usize> {
        let s = self.layer_start(self.arch.depth);
        s..s + QUAD_ROWS * INPUT_DIM
    }

    pub fn b(&self) -> std::ops::Range<usize> {
        let s = self.a().end;
        s..s + INPUT_DIM
    }

    pub fn c(&self) -> usize {
        self.b().end
    }

    pub fn len(&self) -> usize {
        self.c() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Trainable parameters `θ = (w, θ_N, A, b, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNetParams {
    layout: Layout,
    norm: Normalization,
    theta: Vec<f64>,
}

impl ValueNetParams {
    pub fn zeros(arch: Architecture) -> Result<Self> {
        if arch.width == 0 {
            return Err(Error::config("value network width must be positive"));
        }
        let layout = Layout { arch };
        Ok(ValueNetParams {
            layout,
            norm: Normalization::default(),
            theta: vec![0.0; layout.len()],
        })
    }

    /// Feature weights uniform in `±√(1/fan_in)`, `A` with entries `±0.01`,
    /// everything else zero.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(arch)?;
        let l = p.layout;
        let bound = (1.0 / INPUT_DIM as f64).sqrt();
        for v in &mut p.theta[l.opening_weight()] {
            *v = rng.random_range(-bound..=bound);
        }
        for v in &mut p.theta[l.opening_bias()] {
            *v = rng.random_range(-bound..=bound);
        }
        let bound = (1.0 / arch.width as f64).sqrt();
        for i in 0..arch.depth {
            for v in &mut p.theta[l.layer_weight(i)] {
                *v = rng.random_range(-bound..=bound);
            }
            for v in &mut p.theta[l.layer_bias(i)] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        for v in &mut p.theta[l.a()] {
            *v = if rng.random::<bool>() { 0.01 } else { -0.01 };
        }
        Ok(p)
    }

    pub fn from_flat(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        let p = Self::zeros(arch)?;
        if theta.len() != p.theta.len() {
            return Err(Error::config(format!(
                "expected {} parameters for width {} depth {}, got {}",
                p.theta.len(),
                arch.width,
                arch.depth,
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite value-network parameter"));
        }
        Ok(ValueNetParams { theta, ..p })
    }

    pub fn with_normalization(mut self, norm: Normalization) -> Result<Self> {
        norm.validate()?;
        self.norm = norm;
        Ok(self)
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn arch(&self) -> Architecture {
        self.layout.arch
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = M v` for row-major `M` with `out.len()` rows.
#[inline]
fn matvec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(&m[i * cols..(i + 1) * cols], v);
    }
}

/// `out += Mᵀ r` for row-major `M` with `r.len()` rows.
#[inline]
fn matvec_t_add(m: &[f64], r: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (i, &ri) in r.iter().enumerate() {
        axpy(ri, &m[i * cols..(i + 1) * cols], out);
    }
}

/// `M += a ⊗ b` for row-major `M`.
#[inline]
fn outer_add(a: &[f64], b: &[f64], m: &mut [f64]) {
    let cols = b.len();
    for (i, &ai) in a.iter().enumerate() {
        axpy(ai, b, &mut m[i * cols..(i + 1) * cols]);
    }
}

/// Intermediates of one evaluation of `Φ` and `∇_yΦ`.
#[derive(Debug, Clone)]
pub struct Tape {
    arch: Architecture,
    y: SpaceTimeInput,
    /// Hidden states `h_0 … h_depth`.
    h: Vec<f64>,
    /// Activations `tanh(K_i h_i + β_i)`.
    s: Vec<f64>,
    /// `∂Φ/∂h_i`, `i = 0 … depth`.
    h_bar: Vec<f64>,
    ay: [f64; QUAD_ROWS],
    value: f64,
    grad: SpaceTimeInput,
    scratch: Vec<f64>,
}

impl Tape {
    pub fn new(arch: Architecture) -> Self {
        let w = arch.width;
        Tape {
            arch,
            y: [0.0; INPUT_DIM],
            h: vec![0.0; (arch.depth + 1) * w],
            s: vec![0.0; arch.depth * w],
            h_bar: vec![0.0; (arch.depth + 1) * w],
            ay: [0.0; QUAD_ROWS],
            value: 0.0,
            grad: [0.0; INPUT_DIM],
            scratch: vec![0.0; w],
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn input(&self) -> &SpaceTimeInput {
        &self.y
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `∇_yΦ` at the recorded input.
    pub fn gradient(&self) -> &SpaceTimeInput {
        &self.grad
    }

    /// Network features `N(y)`.
    pub fn features(&self) -> &[f64] {
        let w = self.arch.width;
        &self.h[self.arch.depth * w..]
    }

    /// Evaluates `Φ` and `∇_yΦ` at `y`, overwriting the tape.
    pub fn record(&mut self, params: &ValueNetParams, y: &SpaceTimeInput) {
        assert_eq!(self.arch, params.arch(), "tape and parameters disagree on architecture");
        let l = params.layout;
        let th = &params.theta;
        let wd = self.arch.width;
        let depth = self.arch.depth;
        self.y = *y;
        let y = &params.norm.apply(y);

        let h0 = &mut self.h[..wd];
        matvec(&th[l.opening_weight()], y, h0);
        for (hi, bi) in h0.iter_mut().zip(&th[l.opening_bias()]) {
            *hi += bi;
        }
        for i in 0..depth {
            let (prev, next) = self.h.split_at_mut((i + 1) * wd);
            let h = &prev[i * wd..];
            let next = &mut next[..wd];
            let s = &mut self.s[i * wd..(i + 1) * wd];
            matvec(&th[l.layer_weight(i)], h, s);
            for ((sj, bj), (nj, hj)) in s.iter_mut().zip(&th[l.layer_bias(i)]).zip(next.iter_mut().zip(h)) {
                *sj = (*sj + bj).tanh();
                *nj = hj + *sj;
            }
        }

        let a = &th[l.a()];
        for r in 0..QUAD_ROWS {
            self.ay[r] = dot(&a[r * INPUT_DIM..(r + 1) * INPUT_DIM], y);
        }
        let b = &th[l.b()];
        let w = &th[l.w()];
        self.value = dot(w, &self.h[depth * wd..])
            + 0.5 * self.ay.iter().map(|v| v * v).sum::<f64>()
            + dot(b, y)
            + th[l.c()];

        // Reverse pass for ∇_yΦ.
        self.h_bar[depth * wd..].copy_from_slice(w);
        for i in (0..depth).rev() {
            let (lo, hi) = self.h_bar.split_at_mut((i + 1) * wd);
            let up = &hi[..wd];
            let cur = &mut lo[i * wd..];
            cur.copy_from_slice(up);
            let s = &self.s[i * wd..(i + 1) * wd];
            for ((rj, u), sj) in self.scratch.iter_mut().zip(up).zip(s) {
                *rj = u * (1.0 - sj * sj);
            }
            matvec_t_add(&th[l.layer_weight(i)], &self.scratch, cur);
        }
        let mut g = [0.0; INPUT_DIM];
        matvec_t_add(&th[l.opening_weight()], &self.h_bar[..wd], &mut g);
        matvec_t_add(a, &self.ay, &mut g);
        let k = params.norm.output;
        for i in 0..INPUT_DIM {
            g[i] = k * params.norm.input[i] * (g[i] + b[i]);
        }
        self.value *= k;
        self.grad = g;
    }
}

/// `Φ_θ(y)`.
pub fn phi(params: &ValueNetParams, y: &SpaceTimeInput) -> f64 {
    let mut tape = Tape::new(params.arch());
    tape.record(params, y);
    tape.value
}

/// `(∂Φ/∂t, ∇_zΦ)` at `y`.
pub fn phi_input_grad(params: &ValueNetParams, y: &SpaceTimeInput) -> (f64, State) {
    let mut tape = Tape::new(params.arch());
    tape.record(params, y);
    let g = tape.grad;
    (g[0], State([g[1], g[2], g[3], g[4]]))
}

/// Reverse accumulation through one recorded evaluation.
///
/// Given sensitivities `phi_bar = ∂ℒ/∂Φ` and `grad_bar = ∂ℒ/∂(∇_yΦ)` of a
/// downstream scalar `ℒ`, adds `∂ℒ/∂θ` into `theta_bar` and returns
/// `∂ℒ/∂y = phi_bar ∇_yΦ + (∇²_yΦ) grad_bar`.
pub fn phi_param_grad(
    params: &ValueNetParams,
    tape: &Tape,
    phi_bar: f64,
    grad_bar: &SpaceTimeInput,
    theta_bar: &mut [f64],
) -> SpaceTimeInput {
    assert_eq!(tape.arch, params.arch(), "tape and parameters disagree on architecture");
    assert_eq!(theta_bar.len(), params.len(), "gradient buffer has the wrong length");
    let l = params.layout;
    let th = &params.theta;
    let wd = tape.arch.width;
    let depth = tape.arch.depth;
    // Work in normalized units throughout.
    let norm = &params.norm;
    let y = &norm.apply(&tape.y);
    let phi_bar = norm.output * phi_bar;
    let v: &SpaceTimeInput = &std::array::from_fn(|i| norm.output * norm.input[i] * grad_bar[i]);

    // Tangent pass along v: dh_i = ∂h_i/∂y · v.
    let mut dh = vec![0.0; (depth + 1) * wd];
    let mut dpre = vec![0.0; depth * wd];
    matvec(&th[l.opening_weight()], v, &mut dh[..wd]);
    for i in 0..depth {
        let (prev, next) = dh.split_at_mut((i + 1) * wd);
        let cur = &prev[i * wd..];
        let dp = &mut dpre[i * wd..(i + 1) * wd];
        matvec(&th[l.layer_weight(i)], cur, dp);
        let s = &tape.s[i * wd..(i + 1) * wd];
        for j in 0..wd {
            next[j] = cur[j] + (1.0 - s[j] * s[j]) * dp[j];
        }
    }

    // Output head: Φ̇ = w·dh_D, Φ = w·h_D.
    let h_top = &tape.h[depth * wd..];
    {
        let wb = &mut theta_bar[l.w()];
        axpy(1.0, &dh[depth * wd..], wb);
        axpy(phi_bar, h_top, wb);
    }
    let mut h_adj: Vec<f64> = th[l.w()].iter().map(|w| phi_bar * w).collect();
    let mut r = vec![0.0; wd];
    let mut q = vec![0.0; wd];
    for i in (0..depth).rev() {
        let s = &tape.s[i * wd..(i + 1) * wd];
        let d_up = &tape.h_bar[(i + 1) * wd..(i + 2) * wd];
        let dp = &dpre[i * wd..(i + 1) * wd];
        for j in 0..wd {
            let ds = 1.0 - s[j] * s[j];
            q[j] = ds * d_up[j];
            r[j] = h_adj[j] * ds - 2.0 * s[j] * ds * d_up[j] * dp[j];
        }
        let kb = &mut theta_bar[l.layer_weight(i)];
        outer_add(&q, &dh[i * wd..(i + 1) * wd], kb);
        outer_add(&r, &tape.h[i * wd..(i + 1) * wd], kb);
        axpy(1.0, &r, &mut theta_bar[l.layer_bias(i)]);
        matvec_t_add(&th[l.layer_weight(i)], &r, &mut h_adj);
    }
    {
        let wb = &mut theta_bar[l.opening_weight()];
        outer_add(&h_adj, y, wb);
        outer_add(&tape.h_bar[..wd], v, wb);
    }
    axpy(1.0, &h_adj, &mut theta_bar[l.opening_bias()]);
    let mut y_bar = [0.0; INPUT_DIM];
    matvec_t_add(&th[l.opening_weight()], &h_adj, &mut y_bar);

    // Quadratic: Φ = ½‖Ay‖², Φ̇ = (Ay)·(Av).
    let a = &th[l.a()];
    let mut av = [0.0; QUAD_ROWS];
    for (rr, avr) in av.iter_mut().enumerate() {
        *avr = dot(&a[rr * INPUT_DIM..(rr + 1) * INPUT_DIM], v);
    }
    let ay = &tape.ay;
    {
        let ab = &mut theta_bar[l.a()];
        for rr in 0..QUAD_ROWS {
            for c in 0..INPUT_DIM {
                ab[rr * INPUT_DIM + c] += (phi_bar * ay[rr] + av[rr]) * y[c] + ay[rr] * v[c];
            }
        }
    }
    let weights: Vec<f64> = (0..QUAD_ROWS).map(|rr| phi_bar * ay[rr] + av[rr]).collect();
    matvec_t_add(a, &weights, &mut y_bar);

    // Affine part.
    let b = &th[l.b()];
    for c in 0..INPUT_DIM {
        theta_bar[l.b().start + c] += phi_bar * y[c] + v[c];
        y_bar[c] += phi_bar * b[c];
    }
    theta_bar[l.c()] += phi_bar;
    std::array::from_fn(|i| norm.input[i] * y_bar[i])
}
