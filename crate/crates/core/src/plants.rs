//! Uncertain plants `ẋ = A0·x + B·(h(t, u) + σ(t, x))`.
//!
//! The controller never evaluates `h` or `σ`; they exist so the simulator can
//! integrate the true dynamics and so the analysis tools can reconstruct the
//! decomposition and the Lyapunov certificate along a trace.

use nalgebra::dmatrix;
use thiserror::Error;

use crate::analysis::AssumptionConstants;
use crate::numlin::{self, norm2, Matrix, NumError, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("(A0, B) is not controllable (rank {rank} < {n})")]
    Uncontrollable { rank: usize, n: usize },
    #[error("inertia matrix is singular or not positive definite")]
    SingularInertia,
    #[error("invalid plant parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Numerics(#[from] NumError),
}

/// An uncertain plant in the input-channel form.
pub trait UncertainPlant: Send + Sync {
    fn name(&self) -> &str;
    fn a0(&self) -> &Matrix;
    fn b(&self) -> &Matrix;

    fn n(&self) -> usize {
        self.a0().nrows()
    }

    fn m(&self) -> usize {
        self.b().ncols()
    }

    /// Input nonlinearity `h(t, u)`.
    fn h(&self, t: f64, u: &Vector) -> Vector;

    /// State-dependent disturbance `σ(t, x)`.
    fn sigma(&self, t: f64, x: &Vector) -> Vector;

    /// Everything entering through `B`: `h(t, u) + σ(t, x)`. Plants whose
    /// input gain also depends on the state override this.
    fn lumped(&self, t: f64, x: &Vector, u: &Vector) -> Vector {
        self.h(t, u) + self.sigma(t, x)
    }

    /// Assumption constants when they are known in closed form.
    fn constants(&self) -> Option<AssumptionConstants> {
        None
    }

    /// Pure input delay: the plant sees `u(t − τ)` instead of `u(t)`.
    fn input_delay(&self) -> Option<f64> {
        None
    }

    /// False for black-box plants whose `h`/`σ` only stand in for the truth.
    fn uncertainty_known(&self) -> bool {
        true
    }
}

/// `ẋ = A0·x + B·lumped(t, x, u)`.
pub fn plant_rhs(plant: &dyn UncertainPlant, t: f64, x: &Vector, u: &Vector) -> Vector {
    plant.a0() * x + plant.b() * plant.lumped(t, x, u)
}

fn check_controllable(a0: &Matrix, b: &Matrix) -> Result<(), PlantError> {
    let n = a0.nrows();
    let rank = numlin::controllability_rank(a0, b, 1e-10)?;
    if rank < n {
        return Err(PlantError::Uncontrollable { rank, n });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SISO benchmark with a sector input nonlinearity

#[derive(Debug, Clone)]
pub struct SisoPlant {
    a0: Matrix,
    b: Matrix,
}

/// Third-order SISO benchmark with an input gain that wobbles between roughly
/// 1.3 and 2.0 and a state-dependent disturbance.
pub fn benchmark_siso() -> SisoPlant {
    SisoPlant {
        a0: dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; -1.0, -3.0, -1.0],
        b: dmatrix![0.0; 0.0; 1.0],
    }
}

/// `Φ(u) = (0.5 + 0.3·sin u + e^{0.2·|cos u|})·u`
pub fn siso_input_map(u: f64) -> f64 {
    (0.5 + 0.3 * u.sin() + (0.2 * u.cos().abs()).exp()) * u
}

/// `e(x) = (0.3 + 0.2·cos x₁)·‖x‖ − 0.5·sin x₂`
pub fn siso_disturbance(x: &Vector) -> f64 {
    (0.3 + 0.2 * x[0].cos()) * x.norm() - 0.5 * x[1].sin()
}

impl UncertainPlant for SisoPlant {
    fn name(&self) -> &str {
        "benchmark_siso"
    }
    fn a0(&self) -> &Matrix {
        &self.a0
    }
    fn b(&self) -> &Matrix {
        &self.b
    }
    fn h(&self, _t: f64, u: &Vector) -> Vector {
        Vector::from_element(1, siso_input_map(u[0]))
    }
    fn sigma(&self, _t: f64, x: &Vector) -> Vector {
        Vector::from_element(1, siso_disturbance(x))
    }
}

// ---------------------------------------------------------------------------
// F-16 lateral/directional model

/// Coefficients of the F-16 aileron/rudder nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F16Coefficients {
    pub a: [f64; 4],
    pub d: [f64; 4],
    pub w: [f64; 4],
    pub c: [f64; 2],
    pub h: [f64; 2],
    pub width: [f64; 2],
    pub beta0: f64,
}

impl Default for F16Coefficients {
    fn default() -> Self {
        Self {
            a: [0.33, 0.195, 0.45, 1.85],
            d: [0.295, -0.0865, 0.055, -0.007],
            w: [1.6, 0.0, -1.9, 0.0],
            c: [0.3, 0.3],
            h: [7.0, 2.7],
            width: [0.25, 0.25],
            beta0: 0.0,
        }
    }
}

/// Roll/yaw dynamics of an F-16 at 502 ft/s, states `[β, φ, p_s, r_s]`,
/// inputs `[δ_a, δ_r]`.
///
/// The control-effectiveness nonlinearity is scaled by a Gaussian in β, so
/// the input term depends on the state as well; [`UncertainPlant::lumped`] is
/// the exact model, while `h` is its slice at `β = β₀` and `σ` holds the
/// rate-coupling terms.
#[derive(Debug, Clone)]
pub struct F16Plant {
    a0: Matrix,
    b: Matrix,
    pub coeffs: F16Coefficients,
    /// Use `δ_r` in the second `tanh` of `f₂` instead of `δ_a`.
    pub f2_typo_fix: bool,
}

/// Reference stabilizing gain for the roll/yaw model (four decimals), placing
/// `A0 + B·Kᵀ` near `{−1, −2, −3, −4}`.
pub fn f16_reference_gain() -> Matrix {
    dmatrix![
        -27.5037, 93.4020;
        14.2953, 35.0244;
        4.5010, 13.9005;
        12.7039, 58.8096
    ]
}

pub fn f16_rollyaw() -> F16Plant {
    F16Plant {
        a0: dmatrix![
            -0.3220, 0.064, 0.0364, -0.9917;
            0.0, 0.0, 1.0, 0.0393;
            -30.6490, 0.0, -3.6784, 0.6646;
            8.5395, 0.0, -0.0254, -0.4764
        ],
        b: dmatrix![
            0.0, 0.0;
            0.0, 0.0;
            -0.7331, 0.1315;
            -0.0319, -0.0620
        ],
        coeffs: F16Coefficients::default(),
        f2_typo_fix: false,
    }
}

impl F16Plant {
    pub fn with_f2_typo_fix(mut self, fix: bool) -> Self {
        self.f2_typo_fix = fix;
        self
    }

    fn effectiveness(&self, beta: f64, i: usize) -> f64 {
        let c = self.coeffs.c[i];
        let s = self.coeffs.width[i];
        let db = beta - self.coeffs.beta0;
        (1.0 - c) * (-(db * db) / (2.0 * s * s)).exp() + c
    }

    fn input_shapes(&self, u: &Vector) -> (f64, f64) {
        let (da, dr) = (u[0], u[1]);
        let [h1, h2] = self.coeffs.h;
        let g1 = (da + h1).tanh() + (da - h1).tanh() + 0.001 * da;
        let second = if self.f2_typo_fix { dr } else { da };
        let g2 = (dr + h2).tanh() + (second - h2).tanh() + 0.001 * dr;
        (g1, g2)
    }

    fn rate_terms(&self, x: &Vector) -> (f64, f64) {
        let (p, r) = (x[2], x[3]);
        let F16Coefficients { a, d, w, .. } = self.coeffs;
        let t1 = d[0] * (a[0] * p - w[0]).cos() * (a[1] * r - w[1]).sin() + d[1];
        let t2 = d[2] * (a[2] * p - w[2]).cos() * (a[3] * r - w[3]).sin() + d[3];
        (t1, t2)
    }

    /// The default `[f₁, f₂]` at state `x` and input `u`.
    pub fn nonlinearity(&self, x: &Vector, u: &Vector) -> Vector {
        let beta = x[0];
        let (g1, g2) = self.input_shapes(u);
        let (t1, t2) = self.rate_terms(x);
        Vector::from_vec(vec![
            self.effectiveness(beta, 0) * g1 + t1,
            self.effectiveness(beta, 1) * g2 + t2,
        ])
    }
}

impl UncertainPlant for F16Plant {
    fn name(&self) -> &str {
        "f16_rollyaw"
    }
    fn a0(&self) -> &Matrix {
        &self.a0
    }
    fn b(&self) -> &Matrix {
        &self.b
    }
    fn h(&self, _t: f64, u: &Vector) -> Vector {
        let (g1, g2) = self.input_shapes(u);
        let b0 = self.coeffs.beta0;
        Vector::from_vec(vec![
            u[0] + self.effectiveness(b0, 0) * g1,
            u[1] + self.effectiveness(b0, 1) * g2,
        ])
    }
    fn sigma(&self, _t: f64, x: &Vector) -> Vector {
        let (t1, t2) = self.rate_terms(x);
        Vector::from_vec(vec![t1, t2])
    }
    fn lumped(&self, _t: f64, x: &Vector, u: &Vector) -> Vector {
        u + self.nonlinearity(x, u)
    }
}

// ---------------------------------------------------------------------------
// Quadrotor attitude with inertia uncertainty

/// The gain `K₀` given for the quadrotor (two significant digits).
pub const QUAD_REFERENCE_K0: [f64; 3] = [-3.0, -4.2, -0.27];

/// Poles each attitude channel is placed at.
pub const QUAD_CHANNEL_POLES: [f64; 3] = [-15.0, -3.0, -1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorConfig {
    /// Actuator bandwidth (rad/s).
    pub omega: f64,
    /// Nominal inertia (kg·m²).
    pub j0: Matrix,
    /// Actual inertia (kg·m²).
    pub j_true: Matrix,
    /// 9×3 inner stabilizing gain.
    pub k_bar: Matrix,
}

impl QuadrotorConfig {
    /// Qball-X4 numbers: ω = 15 rad/s, J₀ = diag(0.03, 0.03, 0.04), no
    /// uncertainty, `K̄` placed exactly at {−15, −3, −1} per channel.
    pub fn nominal() -> Self {
        let omega = 15.0;
        let j0 = Matrix::from_diagonal(&Vector::from_vec(vec![0.03, 0.03, 0.04]));
        let k0 = placed_channel_gain(omega).expect("channel pair is controllable");
        Self {
            omega,
            j_true: j0.clone(),
            j0,
            k_bar: block_column_gain(&k0),
        }
    }

    /// Same gains with the true inertia scaled by `scale` (payload).
    pub fn with_inertia_scale(mut self, scale: f64) -> Self {
        self.j_true = &self.j0 * scale;
        self
    }

    pub fn with_channel_gain(mut self, k0: &[f64; 3]) -> Self {
        self.k_bar = block_column_gain(&Matrix::from_column_slice(3, 1, k0));
        self
    }

    fn validate(&self) -> Result<(), PlantError> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(PlantError::InvalidParameter(format!(
                "actuator bandwidth must be positive, got {}",
                self.omega
            )));
        }
        for j in [&self.j0, &self.j_true] {
            if j.shape() != (3, 3) || !numlin::is_symmetric(j, 1e-12) {
                return Err(PlantError::SingularInertia);
            }
            if numlin::symmetric_eigenvalue_range(j).0 <= 0.0 {
                return Err(PlantError::SingularInertia);
            }
        }
        if self.k_bar.shape() != (9, 3) {
            return Err(PlantError::InvalidParameter(format!(
                "K̄ must be 9x3, got {:?}",
                self.k_bar.shape()
            )));
        }
        Ok(())
    }
}

/// Single roll/pitch/yaw channel `[angle, rate, torque]` with first-order
/// actuator: returns `(A0, B0)`.
pub fn quad_channel(omega: f64) -> (Matrix, Matrix) {
    (
        dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 1.0; 0.0, 0.0, -omega],
        dmatrix![0.0; 0.0; omega],
    )
}

/// Per-channel gain placing the channel at [`QUAD_CHANNEL_POLES`].
pub fn placed_channel_gain(omega: f64) -> Result<Matrix, NumError> {
    let (a, b) = quad_channel(omega);
    numlin::ackermann_gain(&a, &b, &QUAD_CHANNEL_POLES)
}

fn block_diag3(blk: &Matrix) -> Matrix {
    let (r, c) = blk.shape();
    let mut out = Matrix::zeros(3 * r, 3 * c);
    for i in 0..3 {
        out.view_mut((i * r, i * c), (r, c)).copy_from(blk);
    }
    out
}

fn block_column_gain(k0: &Matrix) -> Matrix {
    block_diag3(k0)
}

#[derive(Debug, Clone)]
pub struct QuadrotorPlant {
    cfg: QuadrotorConfig,
    a0_bar: Matrix,
    a0: Matrix,
    b: Matrix,
    /// J⁻¹·J₀
    gain: Matrix,
}

/// Linearized attitude model around hover, already closed with the inner gain
/// `K̄`: `A0 = Ā0 + B·K̄ᵀ`, `h = J⁻¹J₀·u`, `σ = (J⁻¹J₀ − I)·K̄ᵀx`.
pub fn quadrotor_attitude(cfg: QuadrotorConfig) -> Result<QuadrotorPlant, PlantError> {
    cfg.validate()?;
    let (a_ch, b_ch) = quad_channel(cfg.omega);
    let a0_bar = block_diag3(&a_ch);
    let b = block_diag3(&b_ch);
    let a0 = &a0_bar + &b * cfg.k_bar.transpose();
    let gain = cfg
        .j_true
        .clone()
        .lu()
        .solve(&cfg.j0)
        .ok_or(PlantError::SingularInertia)?;
    check_controllable(&a0, &b)?;
    Ok(QuadrotorPlant {
        cfg,
        a0_bar,
        a0,
        b,
        gain,
    })
}

impl QuadrotorPlant {
    pub fn config(&self) -> &QuadrotorConfig {
        &self.cfg
    }

    /// Open-loop block-diagonal `Ā0`.
    pub fn a0_bar(&self) -> &Matrix {
        &self.a0_bar
    }

    /// Command torque `τ = J₀(K̄ᵀx + u)` that realizes the virtual input `u`.
    pub fn torque(&self, x: &Vector, u: &Vector) -> Vector {
        &self.cfg.j0 * (self.cfg.k_bar.transpose() * x + u)
    }
}

impl UncertainPlant for QuadrotorPlant {
    fn name(&self) -> &str {
        "quadrotor_attitude"
    }
    fn a0(&self) -> &Matrix {
        &self.a0
    }
    fn b(&self) -> &Matrix {
        &self.b
    }
    fn h(&self, _t: f64, u: &Vector) -> Vector {
        &self.gain * u
    }
    fn sigma(&self, _t: f64, x: &Vector) -> Vector {
        (&self.gain - Matrix::identity(3, 3)) * (self.cfg.k_bar.transpose() * x)
    }
}

// ---------------------------------------------------------------------------
// Synthetic plant with closed-form assumption constants

#[derive(Debug, Clone)]
pub struct SyntheticPlant {
    a0: Matrix,
    b: Matrix,
    pub g: f64,
    pub s: Matrix,
    pub d_amp: f64,
    pub d_freq: f64,
}

/// Base `(A0, B)` of [`synthetic_lti`]: a double integrator.
pub fn double_integrator() -> (Matrix, Matrix) {
    (dmatrix![0.0, 1.0; 0.0, 0.0], dmatrix![0.0; 1.0])
}

/// `h = g·u`, `σ = S·x + d_amp·sin(d_freq·t)·𝟙` on a double integrator.
pub fn synthetic_lti(g: f64, s: Matrix, d_amp: f64, d_freq: f64) -> Result<SyntheticPlant, PlantError> {
    let (a0, b) = double_integrator();
    SyntheticPlant::with_base(a0, b, g, s, d_amp, d_freq)
}

impl SyntheticPlant {
    pub fn with_base(a0: Matrix, b: Matrix, g: f64, s: Matrix, d_amp: f64, d_freq: f64) -> Result<Self, PlantError> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(PlantError::InvalidParameter(format!(
                "input gain must be positive, got {g}"
            )));
        }
        if !a0.is_square() || b.nrows() != a0.nrows() {
            return Err(PlantError::InvalidParameter("A0/B dimensions disagree".into()));
        }
        if s.shape() != (b.ncols(), a0.nrows()) {
            return Err(PlantError::InvalidParameter(format!(
                "S must be {}x{}, got {:?}",
                b.ncols(),
                a0.nrows(),
                s.shape()
            )));
        }
        if !d_amp.is_finite() || !d_freq.is_finite() {
            return Err(PlantError::InvalidParameter("disturbance must be finite".into()));
        }
        check_controllable(&a0, &b)?;
        Ok(Self {
            a0,
            b,
            g,
            s,
            d_amp,
            d_freq,
        })
    }
}

impl UncertainPlant for SyntheticPlant {
    fn name(&self) -> &str {
        "synthetic_lti"
    }
    fn a0(&self) -> &Matrix {
        &self.a0
    }
    fn b(&self) -> &Matrix {
        &self.b
    }
    fn h(&self, _t: f64, u: &Vector) -> Vector {
        u * self.g
    }
    fn sigma(&self, t: f64, x: &Vector) -> Vector {
        let d = self.d_amp * (self.d_freq * t).sin();
        &self.s * x + Vector::from_element(self.m(), d)
    }
    fn constants(&self) -> Option<AssumptionConstants> {
        let s_norm = norm2(&self.s);
        let root_m = (self.m() as f64).sqrt();
        Some(AssumptionConstants {
            l_ht: 0.0,
            l_hu_lower: self.g,
            l_hu_upper: self.g,
            k_sigma: s_norm,
            delta_sigma: self.d_amp.abs() * root_m,
            l_sigma_x: s_norm,
            l_sigma_t: 0.0,
            d_sigma: (self.d_amp * self.d_freq).abs() * root_m,
        })
    }
}

// ---------------------------------------------------------------------------
// Decorators

/// Componentwise dead zone of half-width `mu`.
pub fn dead_zone_map(mu: f64, u: &Vector) -> Vector {
    u.map(|v| if v.abs() >= mu { v } else { 0.0 })
}

/// Puts a dead zone in front of a plant's input nonlinearity.
pub struct DeadZone {
    inner: Box<dyn UncertainPlant>,
    mu: f64,
    name: String,
}

pub fn dead_zone(inner: Box<dyn UncertainPlant>, mu: f64) -> Result<DeadZone, PlantError> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(PlantError::InvalidParameter(format!(
            "dead-zone width must be positive, got {mu}"
        )));
    }
    let name = format!("{}+dead_zone", inner.name());
    Ok(DeadZone { inner, mu, name })
}

impl DeadZone {
    pub fn width(&self) -> f64 {
        self.mu
    }
}

impl UncertainPlant for DeadZone {
    fn name(&self) -> &str {
        &self.name
    }
    fn a0(&self) -> &Matrix {
        self.inner.a0()
    }
    fn b(&self) -> &Matrix {
        self.inner.b()
    }
    fn h(&self, t: f64, u: &Vector) -> Vector {
        self.inner.h(t, &dead_zone_map(self.mu, u))
    }
    fn sigma(&self, t: f64, x: &Vector) -> Vector {
        self.inner.sigma(t, x)
    }
    fn lumped(&self, t: f64, x: &Vector, u: &Vector) -> Vector {
        self.inner.lumped(t, x, &dead_zone_map(self.mu, u))
    }
    fn input_delay(&self) -> Option<f64> {
        self.inner.input_delay()
    }
    fn uncertainty_known(&self) -> bool {
        self.inner.uncertainty_known()
    }
}

/// The plant receives the control signal `tau` seconds late. The simulator
/// keeps the input history; `h`/`σ` are the inner plant's.
pub struct InputDelay {
    inner: Box<dyn UncertainPlant>,
    tau: f64,
    name: String,
}

pub fn input_delay(inner: Box<dyn UncertainPlant>, tau: f64) -> Result<InputDelay, PlantError> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(PlantError::InvalidParameter(format!(
            "delay must be nonnegative, got {tau}"
        )));
    }
    let name = format!("{}+delay", inner.name());
    Ok(InputDelay { inner, tau, name })
}

impl UncertainPlant for InputDelay {
    fn name(&self) -> &str {
        &self.name
    }
    fn a0(&self) -> &Matrix {
        self.inner.a0()
    }
    fn b(&self) -> &Matrix {
        self.inner.b()
    }
    fn h(&self, t: f64, u: &Vector) -> Vector {
        self.inner.h(t, u)
    }
    fn sigma(&self, t: f64, x: &Vector) -> Vector {
        self.inner.sigma(t, x)
    }
    fn lumped(&self, t: f64, x: &Vector, u: &Vector) -> Vector {
        self.inner.lumped(t, x, u)
    }
    fn input_delay(&self) -> Option<f64> {
        Some(self.tau + self.inner.input_delay().unwrap_or(0.0))
    }
    fn uncertainty_known(&self) -> bool {
        self.inner.uncertainty_known()
    }
}

/// Finite-difference estimates of `min λ(sym ∂h/∂u)` and `max ‖∂h/∂u‖` over
/// sampled inputs at time `t`. Diagnostic only.
pub fn sample_input_jacobian_bounds(plant: &dyn UncertainPlant, t: f64, samples: &[Vector]) -> (f64, f64) {
    let m = plant.m();
    let step = 1e-6;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for u in samples {
        let mut jac = Matrix::zeros(m, m);
        for j in 0..m {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += step;
            dn[j] -= step;
            let col = (plant.h(t, &up) - plant.h(t, &dn)) / (2.0 * step);
            jac.set_column(j, &col);
        }
        let sym = (&jac + jac.transpose()) * 0.5;
        lo = lo.min(numlin::symmetric_eigenvalue_range(&sym).0);
        hi = hi.max(norm2(&jac));
    }
    (lo, hi)
}
