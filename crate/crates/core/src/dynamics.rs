//! Hodgkin–Huxley membrane dynamics.
//!
//! Units are ms, mV, µA/cm², mS/cm² and µF/cm² throughout, with the resting
//! potential shifted to V = 0. The stimulation current enters the voltage row
//! additively (it is not divided by the capacitance).

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the HH state.
pub const STATE_DIM: usize = 4;

/// Physiological constants of the single-compartment HH model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HHParams {
    /// Membrane capacitance (µF/cm²).
    pub c_m: f64,
    /// Maximal sodium conductance (mS/cm²).
    pub g_na: f64,
    /// Maximal potassium conductance (mS/cm²).
    pub g_k: f64,
    /// Leak conductance (mS/cm²).
    pub g_l: f64,
    /// Reversal potentials (mV).
    pub e_na: f64,
    pub e_k: f64,
    pub e_l: f64,
}

impl HHParams {
    /// The classic squid-axon constants.
    pub const fn normal() -> Self {
        HHParams {
            c_m: 1.0,
            g_na: 120.0,
            g_k: 36.0,
            g_l: 0.3,
            e_na: 115.0,
            e_k: -12.0,
            e_l: 10.613,
        }
    }

    /// Normal constants with the sodium conductance raised to 380 mS/cm²,
    /// which produces repetitive abnormal spiking.
    pub const fn pathological() -> Self {
        HHParams {
            g_na: 380.0,
            ..Self::normal()
        }
    }

    /// Applies every `Some` field of `overrides` on top of `self`.
    pub fn with_overrides(mut self, overrides: &ParamOverrides) -> Self {
        let ParamOverrides {
            c_m,
            g_na,
            g_k,
            g_l,
            e_na,
            e_k,
            e_l,
        } = *overrides;
        if let Some(v) = c_m {
            self.c_m = v;
        }
        if let Some(v) = g_na {
            self.g_na = v;
        }
        if let Some(v) = g_k {
            self.g_k = v;
        }
        if let Some(v) = g_l {
            self.g_l = v;
        }
        if let Some(v) = e_na {
            self.e_na = v;
        }
        if let Some(v) = e_k {
            self.e_k = v;
        }
        if let Some(v) = e_l {
            self.e_l = v;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.c_m, self.g_na, self.g_k, self.g_l, self.e_na, self.e_k, self.e_l,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("HH parameters must be finite"));
        }
        if self.c_m <= 0.0 {
            return Err(Error::domain(format!("C_m must be positive, got {}", self.c_m)));
        }
        if self.g_na < 0.0 || self.g_k < 0.0 || self.g_l < 0.0 {
            return Err(Error::domain("conductances must be non-negative"));
        }
        Ok(())
    }
}

impl Default for HHParams {
    fn default() -> Self {
        Self::normal()
    }
}

/// Optional per-field replacements used to build distorted parameter sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamOverrides {
    pub c_m: Option<f64>,
    pub g_na: Option<f64>,
    pub g_k: Option<f64>,
    pub g_l: Option<f64>,
    pub e_na: Option<f64>,
    pub e_k: Option<f64>,
    pub e_l: Option<f64>,
}

/// HH state `(V, m, n, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State(pub [f64; STATE_DIM]);

impl State {
    pub const ZERO: State = State([0.0; STATE_DIM]);

    pub const fn new(v: f64, m: f64, n: f64, h: f64) -> Self {
        State([v, m, n, h])
    }

    /// Membrane potential (mV).
    #[inline]
    pub fn v(&self) -> f64 {
        self.0[0]
    }

    /// Sodium activation.
    #[inline]
    pub fn m(&self) -> f64 {
        self.0[1]
    }

    /// Potassium activation.
    #[inline]
    pub fn n(&self) -> f64 {
        self.0[2]
    }

    /// Sodium inactivation.
    #[inline]
    pub fn h(&self) -> f64 {
        self.0[3]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &State) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum()
    }

    /// Resting-type state at potential `v` with every gate at its
    /// voltage-clamped steady state.
    pub fn steady_at(v: f64) -> Result<Self> {
        let (m, n, h) = gating_steady_state(v)?;
        Ok(State::new(v, m, n, h))
    }
}

impl Index<usize> for State {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for State {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for State {
    type Output = State;
    fn add(mut self, rhs: State) -> State {
        self += rhs;
        self
    }
}

impl AddAssign for State {
    fn add_assign(&mut self, rhs: State) {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a += b;
        }
    }
}

impl Sub for State {
    type Output = State;
    fn sub(mut self, rhs: State) -> State {
        for (a, b) in self.0.iter_mut().zip(rhs.0) {
            *a -= b;
        }
        self
    }
}

impl Mul<f64> for State {
    type Output = State;
    fn mul(mut self, k: f64) -> State {
        for a in self.0.iter_mut() {
            *a *= k;
        }
        self
    }
}

/// Voltage-dependent opening (`alpha_*`) and closing (`beta_*`) rates, 1/ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub alpha_m: f64,
    pub beta_m: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub alpha_h: f64,
    pub beta_h: f64,
}

/// `x / (e^x - 1)`, continuous through the removable singularity at 0.
#[inline]
pub(crate) fn exprel_inv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x / 2.0 + x * x / 12.0
    } else {
        x / x.exp_m1()
    }
}

/// Derivative of [`exprel_inv`].
#[inline]
fn exprel_inv_deriv(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        -0.5 + x / 6.0
    } else {
        // With q = x/(e^x - 1) we have q e^x = q + x, which keeps this finite
        // for large |x|.
        let q = x / x.exp_m1();
        q * (1.0 - q - x) / x
    }
}

#[inline]
pub(crate) fn rates_unchecked(v: f64) -> Rates {
    let beta_h = 1.0 / ((3.0 - 0.1 * v).exp() + 1.0);
    Rates {
        alpha_m: exprel_inv(2.5 - 0.1 * v),
        beta_m: 4.0 * (-v / 18.0).exp(),
        alpha_n: 0.1 * exprel_inv(1.0 - 0.1 * v),
        beta_n: 0.125 * (-v / 80.0).exp(),
        alpha_h: 0.07 * (-v / 20.0).exp(),
        beta_h,
    }
}

/// Rates and their derivatives with respect to V.
#[inline]
pub(crate) fn rates_and_derivs(v: f64) -> (Rates, Rates) {
    let r = rates_unchecked(v);
    let d = Rates {
        alpha_m: -0.1 * exprel_inv_deriv(2.5 - 0.1 * v),
        beta_m: -r.beta_m / 18.0,
        alpha_n: -0.01 * exprel_inv_deriv(1.0 - 0.1 * v),
        beta_n: -r.beta_n / 80.0,
        alpha_h: -r.alpha_h / 20.0,
        beta_h: 0.1 * r.beta_h * (1.0 - r.beta_h),
    };
    (r, d)
}

/// Gating rate constants at membrane potential `v`.
pub fn rates(v: f64) -> Result<Rates> {
    if !v.is_finite() {
        return Err(Error::domain(format!("rates: non-finite voltage {v}")));
    }
    Ok(rates_unchecked(v))
}

/// Voltage-clamped steady state `(m∞, n∞, h∞)`.
pub fn gating_steady_state(v: f64) -> Result<(f64, f64, f64)> {
    let r = rates(v)?;
    Ok((
        r.alpha_m / (r.alpha_m + r.beta_m),
        r.alpha_n / (r.alpha_n + r.beta_n),
        r.alpha_h / (r.alpha_h + r.beta_h),
    ))
}

/// Uncontrolled vector field f(z), no input validation.
#[inline]
pub(crate) fn vector_field(z: &[f64; 4], p: &HHParams) -> [f64; 4] {
    let [v, m, n, h] = *z;
    let r = rates_unchecked(v);
    let m3 = m * m * m;
    let n4 = (n * n) * (n * n);
    let i_ion = p.g_na * m3 * h * (v - p.e_na) + p.g_k * n4 * (v - p.e_k) + p.g_l * (v - p.e_l);
    [
        -i_ion / p.c_m,
        r.alpha_m * (1.0 - m) - r.beta_m * m,
        r.alpha_n * (1.0 - n) - r.beta_n * n,
        r.alpha_h * (1.0 - h) - r.beta_h * h,
    ]
}

/// ∂f/∂z, row-major, no input validation.
#[inline]
pub(crate) fn jacobian_unchecked(z: &[f64; 4], p: &HHParams) -> [[f64; 4]; 4] {
    let [v, m, n, h] = *z;
    let (r, d) = rates_and_derivs(v);
    let inv_c = 1.0 / p.c_m;
    let m2 = m * m;
    let n3 = n * n * n;
    [
        [
            -(p.g_na * m2 * m * h + p.g_k * n3 * n + p.g_l) * inv_c,
            -3.0 * p.g_na * m2 * h * (v - p.e_na) * inv_c,
            -4.0 * p.g_k * n3 * (v - p.e_k) * inv_c,
            -p.g_na * m2 * m * (v - p.e_na) * inv_c,
        ],
        [
            d.alpha_m * (1.0 - m) - d.beta_m * m,
            -(r.alpha_m + r.beta_m),
            0.0,
            0.0,
        ],
        [
            d.alpha_n * (1.0 - n) - d.beta_n * n,
            0.0,
            -(r.alpha_n + r.beta_n),
            0.0,
        ],
        [
            d.alpha_h * (1.0 - h) - d.beta_h * h,
            0.0,
            0.0,
            -(r.alpha_h + r.beta_h),
        ],
    ]
}

/// Controlled HH right-hand side `f(t, z) + e₁ u`.
///
/// The model is autonomous; `t` is accepted for signature uniformity with
/// time-varying controllers.
pub fn rhs(_t: f64, z: &State, u: f64, p: &HHParams) -> Result<State> {
    if !z.is_finite() || !u.is_finite() {
        return Err(Error::domain("rhs: non-finite state or control"));
    }
    let mut dz = vector_field(&z.0, p);
    dz[0] += u;
    Ok(State(dz))
}

/// Analytic state Jacobian ∂f/∂z (independent of the control).
pub fn jacobian(z: &State, p: &HHParams) -> Result<[[f64; 4]; 4]> {
    if !z.is_finite() {
        return Err(Error::domain("jacobian: non-finite state"));
    }
    Ok(jacobian_unchecked(&z.0, p))
}
