//! Filtered dynamic-inversion controller.
//!
//! With `Q(s) = 1/(εs + 1)` the controller `u = −Q·G⁻¹·d̂`, where
//! `d̂ = y − G·u` is the lumped disturbance seen at the virtual output,
//! reduces to the PI law
//!
//! ```text
//! u = −K_p·x − ∫ K_i·x dt,   K_p = (1/ε)(CᵀB)⁻¹Cᵀ,   K_i = (1/ε)(CᵀB)⁻¹ΛCᵀ
//! ```
//!
//! Both realizations are available; they coincide exactly when the input is
//! not saturated.

use std::sync::Arc;

use thiserror::Error;

use crate::design::{LinearCore, LtiRealization};
use crate::numlin::{Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("CᵀB is singular")]
    SingularCB,
    #[error("ε must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("saturation limits must satisfy u_min < u_max componentwise")]
    InvalidLimits,
    #[error("non-finite controller input")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Realization {
    /// Output observer `y_p` plus the biproper filter `Q·G⁻¹`.
    #[default]
    Observer,
    /// Proportional-integral form on the full state.
    PiClosed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AntiWindup {
    /// Clamp the output only; the integrator keeps running.
    #[default]
    None,
    /// Freeze an integrator channel while its saturation would deepen.
    /// Affects the PI realization only.
    ConditionalIntegration,
}

/// `(CᵀB)⁻¹`, `K_p` and `K_i` from raw matrices.
pub fn pi_gains_raw(
    c: &Matrix,
    b: &Matrix,
    lambda: &Vector,
    epsilon: f64,
) -> Result<(Matrix, Matrix, Matrix), ControlError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ControlError::InvalidEpsilon(epsilon));
    }
    let ct = c.transpose();
    let cb_inv = (&ct * b).try_inverse().ok_or(ControlError::SingularCB)?;
    if !cb_inv.iter().all(|v| v.is_finite()) {
        return Err(ControlError::SingularCB);
    }
    let kp = &cb_inv * &ct / epsilon;
    let ki = &cb_inv * Matrix::from_diagonal(lambda) * &ct / epsilon;
    Ok((cb_inv, kp, ki))
}

/// `(K_p, K_i)` for a designed core.
pub fn pi_gains(core: &LinearCore, epsilon: f64) -> Result<(Matrix, Matrix), ControlError> {
    let (_, kp, ki) = pi_gains_raw(&core.c, &core.b, &core.lambda, epsilon)?;
    Ok((kp, ki))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSpec {
    pub core: Arc<LinearCore>,
    pub epsilon: f64,
    pub u_min: Vector,
    pub u_max: Vector,
    pub realization: Realization,
    pub anti_windup: AntiWindup,
    cb: Matrix,
    cb_inv: Matrix,
    kp: Matrix,
    ki: Matrix,
}

/// Control value before and after clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: Vector,
    pub u_unsat: Vector,
}

impl ControlOutput {
    pub fn saturated(&self) -> bool {
        self.u != self.u_unsat
    }
}

impl ControllerSpec {
    /// Unsaturated observer-form controller.
    pub fn new(core: impl Into<Arc<LinearCore>>, epsilon: f64) -> Result<Self, ControlError> {
        let core = core.into();
        let (cb_inv, kp, ki) = pi_gains_raw(&core.c, &core.b, &core.lambda, epsilon)?;
        let m = core.m;
        Ok(Self {
            cb: core.ctb(),
            core,
            epsilon,
            u_min: Vector::from_element(m, f64::NEG_INFINITY),
            u_max: Vector::from_element(m, f64::INFINITY),
            realization: Realization::Observer,
            anti_windup: AntiWindup::None,
            cb_inv,
            kp,
            ki,
        })
    }

    pub fn with_limits(mut self, u_min: Vector, u_max: Vector) -> Result<Self, ControlError> {
        let m = self.m();
        if u_min.len() != m || u_max.len() != m {
            return Err(ControlError::DimensionMismatch(format!("limits must have length {m}")));
        }
        if u_min
            .iter()
            .zip(u_max.iter())
            .any(|(lo, hi)| lo.is_nan() || hi.is_nan() || lo >= hi)
        {
            return Err(ControlError::InvalidLimits);
        }
        self.u_min = u_min;
        self.u_max = u_max;
        Ok(self)
    }

    /// Limits `±limit` on every channel.
    pub fn with_symmetric_limit(self, limit: f64) -> Result<Self, ControlError> {
        let m = self.m();
        self.with_limits(Vector::from_element(m, -limit), Vector::from_element(m, limit))
    }

    pub fn with_realization(mut self, r: Realization) -> Self {
        self.realization = r;
        self
    }

    pub fn with_anti_windup(mut self, a: AntiWindup) -> Self {
        self.anti_windup = a;
        self
    }

    pub fn m(&self) -> usize {
        self.core.m
    }

    pub fn n(&self) -> usize {
        self.core.n
    }

    pub fn kp(&self) -> &Matrix {
        &self.kp
    }

    pub fn ki(&self) -> &Matrix {
        &self.ki
    }

    pub fn cb_inv(&self) -> &Matrix {
        &self.cb_inv
    }

    pub fn is_saturating(&self) -> bool {
        self.u_min.iter().any(|v| v.is_finite()) || self.u_max.iter().any(|v| v.is_finite())
    }

    /// Controller state length: observer `[y_p, w]`, PI `[z, y_p]`.
    pub fn state_dim(&self) -> usize {
        2 * self.m()
    }

    pub fn initial_state(&self) -> Vector {
        Vector::zeros(self.state_dim())
    }

    fn observer_parts(&self, state: &Vector) -> (Vector, Vector) {
        let m = self.m();
        (state.rows(0, m).into_owned(), state.rows(m, m).into_owned())
    }

    fn pi_parts(&self, state: &Vector) -> (Vector, Vector) {
        let m = self.m();
        (state.rows(0, m).into_owned(), state.rows(m, m).into_owned())
    }

    fn clamp(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.u_min.iter().zip(self.u_max.iter()))
                .map(|(&v, (&lo, &hi))| v.clamp(lo, hi)),
        )
    }

    /// Observer filter output for a virtual output `y`; returns `(u, d̂)` unclamped.
    fn observer_law(&self, state: &Vector, y: &Vector) -> (Vector, Vector) {
        let (yp, w) = self.observer_parts(state);
        let d_hat = y - yp;
        let inv_eps = 1.0 / self.epsilon;
        let filt = &d_hat * inv_eps + (&self.core.lambda - Vector::from_element(self.m(), inv_eps)).component_mul(&w);
        (-(&self.cb_inv * filt), d_hat)
    }

    /// Lumped-disturbance estimate `d̂ = Cᵀx − y_p`.
    pub fn d_hat(&self, state: &Vector, x: &Vector) -> Vector {
        let y = self.core.output(x);
        let y_p = match self.realization {
            Realization::Observer => self.observer_parts(state).0,
            Realization::PiClosed => self.pi_parts(state).1,
        };
        y - y_p
    }

    pub fn output(&self, state: &Vector, x: &Vector) -> ControlOutput {
        let u_unsat = match self.realization {
            Realization::Observer => self.observer_law(state, &self.core.output(x)).0,
            Realization::PiClosed => {
                let (z, _) = self.pi_parts(state);
                -(&self.kp * x) - z
            }
        };
        ControlOutput {
            u: self.clamp(&u_unsat),
            u_unsat,
        }
    }

    /// Controller state derivative given the plant state and the control
    /// value computed from the same state.
    pub fn state_derivative(&self, state: &Vector, x: &Vector, out: &ControlOutput) -> Vector {
        let m = self.m();
        let mut d = Vector::zeros(2 * m);
        match self.realization {
            Realization::Observer => {
                let (yp, w) = self.observer_parts(state);
                let d_hat = self.core.output(x) - &yp;
                let dyp = -self.core.lambda.component_mul(&yp) + &self.cb * &out.u;
                let dw = (d_hat - w) / self.epsilon;
                d.rows_mut(0, m).copy_from(&dyp);
                d.rows_mut(m, m).copy_from(&dw);
            }
            Realization::PiClosed => {
                let (_, yp) = self.pi_parts(state);
                let mut dz = &self.ki * x;
                if self.anti_windup == AntiWindup::ConditionalIntegration {
                    for i in 0..m {
                        let excess = out.u_unsat[i] - out.u[i];
                        // ż enters u with a minus sign
                        if excess * -dz[i] > 0.0 {
                            dz[i] = 0.0;
                        }
                    }
                }
                let dyp = -self.core.lambda.component_mul(&yp) + &self.cb * &out.u;
                d.rows_mut(0, m).copy_from(&dz);
                d.rows_mut(m, m).copy_from(&dyp);
            }
        }
        d
    }

    /// Unsaturated `x ↦ u` map as a state-space system.
    pub fn linear_map(&self) -> LtiRealization {
        let m = self.m();
        let n = self.n();
        let ct = self.core.c.transpose();
        let inv_eps = 1.0 / self.epsilon;
        match self.realization {
            Realization::PiClosed => LtiRealization {
                f: Matrix::zeros(m, m),
                g: self.ki.clone(),
                h: -Matrix::identity(m, m),
                d: -self.kp.clone(),
                state: Vector::zeros(m),
            },
            Realization::Observer => {
                let shift = self.core.lambda_matrix() - Matrix::identity(m, m) * inv_eps;
                let mut f = Matrix::zeros(2 * m, 2 * m);
                f.view_mut((0, 0), (m, m)).copy_from(&(-&shift));
                f.view_mut((0, m), (m, m)).copy_from(&(-&shift));
                f.view_mut((m, 0), (m, m))
                    .copy_from(&(Matrix::identity(m, m) * -inv_eps));
                f.view_mut((m, m), (m, m))
                    .copy_from(&(Matrix::identity(m, m) * -inv_eps));
                let mut g = Matrix::zeros(2 * m, n);
                g.view_mut((0, 0), (m, n)).copy_from(&(&ct * -inv_eps));
                g.view_mut((m, 0), (m, n)).copy_from(&(&ct * inv_eps));
                let mut h = Matrix::zeros(m, 2 * m);
                h.view_mut((0, 0), (m, m)).copy_from(&(&self.cb_inv * inv_eps));
                h.view_mut((0, m), (m, m)).copy_from(&(-(&self.cb_inv * &shift)));
                LtiRealization {
                    f,
                    g,
                    h,
                    d: -(&self.cb_inv * &ct) * inv_eps,
                    state: Vector::zeros(2 * m),
                }
            }
        }
    }
}

/// Standalone discrete stepping of a controller, for use outside [`crate::sim`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub state: Vector,
    pub last_u: Vector,
    pub saturated: bool,
}

fn check_finite(v: &Vector) -> Result<(), ControlError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ControlError::NonFiniteInput)
    }
}

impl ControllerState {
    pub fn new(spec: &ControllerSpec) -> Self {
        Self {
            state: spec.initial_state(),
            last_u: Vector::zeros(spec.m()),
            saturated: false,
        }
    }

    /// Observer form driven by the virtual output `y`. Returns the clamped
    /// `u` for this sample, then advances `[y_p, w]` over `dt` with `y` and
    /// `u` held.
    pub fn step_observer(&mut self, spec: &ControllerSpec, y: &Vector, dt: f64) -> Result<Vector, ControlError> {
        let m = spec.m();
        if y.len() != m {
            return Err(ControlError::DimensionMismatch(format!("y must have length {m}")));
        }
        check_finite(y)?;
        let (u_unsat, _) = spec.observer_law(&self.state, y);
        let u = spec.clamp(&u_unsat);
        let cb_u = &spec.cb * &u;
        let lambda = &spec.core.lambda;
        let eps = spec.epsilon;
        let f = |_t: f64, s: &Vector| {
            let yp = s.rows(0, m).into_owned();
            let w = s.rows(m, m).into_owned();
            let mut d = Vector::zeros(2 * m);
            d.rows_mut(0, m).copy_from(&(-lambda.component_mul(&yp) + &cb_u));
            d.rows_mut(m, m).copy_from(&((y - &yp - w) / eps));
            d
        };
        self.state = crate::sim::rk4_step(&f, 0.0, &self.state, dt);
        self.saturated = u != u_unsat;
        self.last_u = u.clone();
        Ok(u)
    }

    /// PI form driven by the full state `x`; same timing as
    /// [`ControllerState::step_observer`].
    pub fn step_pi(&mut self, spec: &ControllerSpec, x: &Vector, dt: f64) -> Result<Vector, ControlError> {
        if x.len() != spec.n() {
            return Err(ControlError::DimensionMismatch(format!(
                "x must have length {}",
                spec.n()
            )));
        }
        check_finite(x)?;
        let pi = ControllerSpec {
            realization: Realization::PiClosed,
            ..spec.clone()
        };
        let out = pi.output(&self.state, x);
        let f = |_t: f64, s: &Vector| pi.state_derivative(s, x, &out);
        self.state = crate::sim::rk4_step(&f, 0.0, &self.state, dt);
        self.saturated = out.saturated();
        self.last_u = out.u.clone();
        Ok(out.u)
    }
}
