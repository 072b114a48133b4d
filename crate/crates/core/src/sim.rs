//! Fixed-step closed-loop simulation.
//!
//! Plant and controller states are stacked and integrated together with the
//! classical fourth-order Runge–Kutta scheme. The control value is recomputed
//! (and clamped) at every stage, so the plant always sees the saturated input.

use std::cell::RefCell;
use std::fmt::Write as _;

use thiserror::Error;

use crate::controller::ControllerSpec;
use crate::numlin::Vector;
use crate::plants::{plant_rhs, UncertainPlant};

/// States whose norm exceeds this are treated as diverged.
pub const BLOWUP_NORM: f64 = 1e10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("state diverged at t = {time}")]
    NonFiniteState { time: f64, trace: Box<Trace> },
    #[error("trace is empty")]
    EmptyTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub x0: Vector,
    pub record_stride: usize,
}

impl SimConfig {
    pub fn new(dt: f64, t_final: f64, x0: Vector) -> Self {
        Self {
            dt,
            t_final,
            x0,
            record_stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt = {}", self.dt)));
        }
        if !(self.t_final >= self.dt && self.t_final.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "t_final = {} must be at least dt = {}",
                self.t_final, self.dt
            )));
        }
        if self.record_stride == 0 {
            return Err(SimError::InvalidConfig("record_stride must be positive".into()));
        }
        if !self.x0.iter().all(|v| v.is_finite()) {
            return Err(SimError::InvalidConfig("x0 is not finite".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceMeta {
    pub scenario: String,
    pub epsilon: f64,
    pub dt: f64,
    pub record_stride: usize,
    pub warnings: Vec<String>,
}

/// Recorded closed-loop signals on a uniform grid.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub t: Vec<f64>,
    pub x: Vec<Vector>,
    /// Applied (clamped) input.
    pub u: Vec<Vector>,
    pub y: Vec<Vector>,
    pub d_hat: Vec<Vector>,
    pub sat: Vec<bool>,
    pub meta: TraceMeta,
    /// The four Runge–Kutta stage evaluations of every step, kept when each
    /// step is recorded (`record_stride == 1`); empty otherwise.
    pub stages: Vec<StageSample>,
}

/// Signals as seen by one integrator stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSample {
    pub t: f64,
    pub x: Vector,
    /// Applied input.
    pub u: Vector,
    /// Input reaching the plant (differs from `u` under an input delay).
    pub u_seen: Vector,
}

fn lerp_at(t: &[f64], v: &[Vector], at: f64) -> Vector {
    let last = t.len() - 1;
    if at <= t[0] {
        return v[0].clone();
    }
    if at >= t[last] {
        return v[last].clone();
    }
    // uniform grid
    let h = (t[last] - t[0]) / last as f64;
    let mut i = (((at - t[0]) / h).floor() as usize).min(last - 1);
    while i > 0 && t[i] > at {
        i -= 1;
    }
    while i + 1 < last && t[i + 1] < at {
        i += 1;
    }
    let s = (at - t[i]) / (t[i + 1] - t[i]);
    &v[i] * (1.0 - s) + &v[i + 1] * s
}

impl Trace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn n(&self) -> usize {
        self.x.first().map_or(0, |v| v.len())
    }

    pub fn m(&self) -> usize {
        self.u.first().map_or(0, |v| v.len())
    }

    /// Linearly interpolated state, clamped to the recorded span.
    pub fn state_at(&self, t: f64) -> Vector {
        lerp_at(&self.t, &self.x, t)
    }

    /// Linearly interpolated input; zero before the first sample.
    pub fn input_at(&self, t: f64) -> Vector {
        if t < self.t[0] {
            return Vector::zeros(self.m());
        }
        lerp_at(&self.t, &self.u, t)
    }

    fn push(&mut self, t: f64, x: &Vector, u: &Vector, y: Vector, d_hat: Vector, sat: bool) {
        self.t.push(t);
        self.x.push(x.clone());
        self.u.push(u.clone());
        self.y.push(y);
        self.d_hat.push(d_hat);
        self.sat.push(sat);
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.n()).map(|i| format!("x{i}")));
        cols.extend((1..=self.m()).map(|i| format!("u{i}")));
        cols.extend((1..=self.m()).map(|i| format!("y{i}")));
        cols.extend((1..=self.m()).map(|i| format!("dhat{i}")));
        cols.push("sat".into());
        cols.join(",")
    }

    /// CSV with full-precision (round-trip) numbers.
    pub fn to_csv(&self) -> String {
        let mut out = self.csv_header();
        out.push('\n');
        for k in 0..self.len() {
            let _ = write!(out, "{:?}", self.t[k]);
            for v in [&self.x[k], &self.u[k], &self.y[k], &self.d_hat[k]] {
                for e in v.iter() {
                    let _ = write!(out, ",{e:?}");
                }
            }
            let _ = writeln!(out, ",{}", u8::from(self.sat[k]));
        }
        out
    }

    /// True if every step carries its four stage samples.
    pub fn has_stages(&self) -> bool {
        !self.is_empty() && self.stages.len() == 4 * (self.len() - 1)
    }

    pub fn saturation_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.sat.iter().filter(|&&s| s).count() as f64 / self.len() as f64
    }
}

/// One classical Runge–Kutta step.
pub fn rk4_step<F>(f: &F, t: f64, y: &Vector, h: f64) -> Vector
where
    F: Fn(f64, &Vector) -> Vector,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Past applied inputs, sampled at step boundaries.
struct InputHistory {
    dt: f64,
    u: Vec<Vector>,
}

impl InputHistory {
    fn at(&self, t: f64) -> Vector {
        let m = self.u[0].len();
        if t < 0.0 {
            return Vector::zeros(m);
        }
        let pos = t / self.dt;
        let i = pos.floor() as usize;
        if i + 1 >= self.u.len() {
            return self.u[self.u.len() - 1].clone();
        }
        let s = pos - i as f64;
        &self.u[i] * (1.0 - s) + &self.u[i + 1] * s
    }
}

/// Warnings about step size relative to the fastest closed-loop time constant.
pub fn step_warnings(ctrl: &ControllerSpec, dt: f64) -> Vec<String> {
    let mut w = Vec::new();
    let fastest = ctrl.core.spectrum.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if dt * fastest >= 2.5 {
        w.push(format!("dt·max|λ(A)| = {:.3} is at or above 2.5", dt * fastest));
    }
    if dt / ctrl.epsilon >= 2.5 {
        w.push(format!("dt/ε = {:.3} is at or above 2.5", dt / ctrl.epsilon));
    }
    w
}

/// Runs the closed loop from `x0` with zero controller state.
pub fn simulate(plant: &dyn UncertainPlant, ctrl: &ControllerSpec, cfg: &SimConfig) -> Result<Trace, SimError> {
    cfg.validate()?;
    let n = plant.n();
    let m = plant.m();
    if cfg.x0.len() != n || ctrl.n() != n || ctrl.m() != m {
        return Err(SimError::DimensionMismatch(format!(
            "plant {n}x{m}, controller {}x{}, x0 length {}",
            ctrl.n(),
            ctrl.m(),
            cfg.x0.len()
        )));
    }
    if ctrl.core.a0 != *plant.a0() || ctrl.core.b != *plant.b() {
        return Err(SimError::DimensionMismatch(
            "controller was designed for a different (A0, B)".into(),
        ));
    }

    let q = ctrl.state_dim();
    let mut s = Vector::zeros(n + q);
    s.rows_mut(0, n).copy_from(&cfg.x0);
    let delay = plant.input_delay();
    let mut history = InputHistory {
        dt: cfg.dt,
        u: Vec::new(),
    };

    let mut trace = Trace {
        meta: TraceMeta {
            scenario: plant.name().to_string(),
            epsilon: ctrl.epsilon,
            dt: cfg.dt,
            record_stride: cfg.record_stride,
            warnings: step_warnings(ctrl, cfg.dt),
        },
        ..Trace::default()
    };

    let split = |s: &Vector| (s.rows(0, n).into_owned(), s.rows(n, q).into_owned());
    let steps = cfg.steps();
    let dense = cfg.record_stride == 1;
    let stages = RefCell::new(Vec::with_capacity(if dense { 4 * steps } else { 0 }));
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let (x, c) = split(&s);
        let out = ctrl.output(&c, &x);
        if k % cfg.record_stride == 0 {
            trace.push(t, &x, &out.u, ctrl.core.output(&x), ctrl.d_hat(&c, &x), out.saturated());
        }
        if k == steps {
            break;
        }
        history.u.push(out.u.clone());

        let rhs = |tt: f64, s: &Vector| -> Vector {
            let (x, c) = split(s);
            let out = ctrl.output(&c, &x);
            let u_seen = match delay {
                Some(tau) => history.at(tt - tau),
                None => out.u.clone(),
            };
            if dense {
                stages.borrow_mut().push(StageSample {
                    t: tt,
                    x: x.clone(),
                    u: out.u.clone(),
                    u_seen: u_seen.clone(),
                });
            }
            let mut d = Vector::zeros(n + q);
            d.rows_mut(0, n).copy_from(&plant_rhs(plant, tt, &x, &u_seen));
            d.rows_mut(n, q).copy_from(&ctrl.state_derivative(&c, &x, &out));
            d
        };
        s = rk4_step(&rhs, t, &s, cfg.dt);
        if !s.iter().all(|v| v.is_finite()) || s.norm() > BLOWUP_NORM {
            trace.stages = stages.into_inner();
            trace.stages.truncate(4 * (trace.len() - 1));
            return Err(SimError::NonFiniteState {
                time: t + cfg.dt,
                trace: Box::new(trace),
            });
        }
    }
    trace.stages = stages.into_inner();
    Ok(trace)
}

/// Cumulative `Σ‖u(t_{k+1}) − u(t_k)‖₁`, starting at zero.
pub fn energy_index(trace: &Trace) -> Result<Vec<f64>, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    Ok(energy_of(&trace.u))
}

pub fn energy_of(u: &[Vector]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(u.len());
    if u.is_empty() {
        return out;
    }
    out.push(0.0);
    for w in u.windows(2) {
        acc += (&w[1] - &w[0]).lp_norm(1);
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub energy: f64,
    /// `max ‖x‖` over the last 20% of the horizon.
    pub sup_tail: f64,
    pub threshold: f64,
    /// First time after which `‖x‖ ≤ threshold` holds on every later sample.
    pub time_to_threshold: Option<f64>,
    pub max_abs_u: Vec<f64>,
    pub saturation_fraction: f64,
    pub final_norm: f64,
}

/// Index of the first sample in the last 20% of the horizon.
pub fn tail_start(trace: &Trace) -> usize {
    let t0 = trace.t[0];
    let t1 = trace.t[trace.len() - 1];
    let cut = t1 - 0.2 * (t1 - t0);
    trace
        .t
        .iter()
        .position(|&t| t >= cut - 1e-12 * t1.abs().max(1.0))
        .unwrap_or(0)
}

pub fn sup_tail(trace: &Trace) -> f64 {
    trace.x[tail_start(trace)..]
        .iter()
        .map(|x| x.norm())
        .fold(0.0, f64::max)
}

pub fn metrics(trace: &Trace, threshold: f64) -> Result<Metrics, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let energy = *energy_index(trace)?.last().unwrap_or(&0.0);
    let norms: Vec<f64> = trace.x.iter().map(|x| x.norm()).collect();
    let time_to_threshold = match norms.iter().rposition(|&v| v > threshold) {
        None => Some(trace.t[0]),
        Some(i) if i + 1 < norms.len() => Some(trace.t[i + 1]),
        Some(_) => None,
    };
    let m = trace.m();
    let max_abs_u = (0..m)
        .map(|i| trace.u.iter().map(|u| u[i].abs()).fold(0.0, f64::max))
        .collect();
    Ok(Metrics {
        energy,
        sup_tail: sup_tail(trace),
        threshold,
        time_to_threshold,
        max_abs_u,
        saturation_fraction: trace.saturation_fraction(),
        final_norm: norms[norms.len() - 1],
    })
}

/// `max_k ‖ε·ẏ + y − ε·ḋ̂‖` with five-point central differences over
/// interior samples, together with `max ‖y‖`. Small values mean
/// `y = (I − Q)·d̂`.
pub fn attenuation_residual(trace: &Trace, epsilon: f64) -> Result<(f64, f64), SimError> {
    if trace.len() < 5 {
        return Err(SimError::EmptyTrace);
    }
    let diff = |v: &[Vector], k: usize| {
        let h = (trace.t[k + 2] - trace.t[k - 2]) / 4.0;
        (&v[k - 2] - &v[k - 1] * 8.0 + &v[k + 1] * 8.0 - &v[k + 2]) / (12.0 * h)
    };
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in 2..trace.len() - 2 {
        let r = diff(&trace.y, k) * epsilon + &trace.y[k] - diff(&trace.d_hat, k) * epsilon;
        worst = worst.max(r.norm());
        scale = scale.max(trace.y[k].norm());
    }
    Ok((worst, scale))
}
