//! Design of the linear skeleton and the redefined output.
//!
//! Given a controllable `(A0, B)`, a stabilizing `K` makes `A = A0 + B·Kᵀ`
//! Hurwitz with a real spectrum. Unit eigenvectors of `Aᵀ` for `m` selected
//! eigenvalues `−λᵢ` form the output matrix `C`, so that `y = Cᵀx` obeys
//!
//! ```text
//! ẏ = −Λ·y + CᵀB·(h(t, u) − Kᵀx + σ(t, x))
//! ```
//!
//! and the plant becomes, from the controller's point of view, `y = G·u + d_l`
//! with `G(s) = (sI + Λ)⁻¹CᵀB` and a lumped output disturbance `d_l`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::numlin::{self, Matrix, NumError, Vector};
use crate::plants::UncertainPlant;
use crate::sim::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("(A0, B) is not controllable (rank {rank} < {n})")]
    Uncontrollable { rank: usize, n: usize },
    #[error("closed-loop matrix has a non-real or non-negative spectrum: {0}")]
    ComplexSpectrum(String),
    #[error("selected value {0} is not an eigenvalue of A0 + B·Kᵀ")]
    SelectionNotEigenvalue(f64),
    #[error("CᵀB is singular (smallest singular value {0:e})")]
    SingularCB(f64),
    #[error("Lyapunov solve failed: {0}")]
    LyapunovFailure(NumError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("plant uncertainty is not evaluable")]
    UnknownUncertainty,
    #[error("trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Numerics(#[from] NumError),
}

/// Where the state-feedback gain comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum GainSource {
    /// User-supplied `K` (n×m). Required for multi-input plants.
    Explicit(Matrix),
    /// Single-input placement at these real poles.
    Poles(Vec<f64>),
}

/// Relative distance at which a requested eigenvalue is matched to a computed one.
pub const SELECTION_TOL: f64 = 1e-2;

/// The designed linear skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCore {
    pub n: usize,
    pub m: usize,
    pub a0: Matrix,
    pub b: Matrix,
    pub k: Matrix,
    /// `A0 + B·Kᵀ`
    pub a: Matrix,
    /// Unit-norm columns: eigenvectors of `Aᵀ`.
    pub c: Matrix,
    /// Diagonal of Λ (positive).
    pub lambda: Vector,
    /// Lyapunov pair `P·A + Aᵀ·P = −M`.
    pub p: Matrix,
    pub m_weight: Matrix,
    /// Full real spectrum of `A`, ascending.
    pub spectrum: Vec<f64>,
}

impl LinearCore {
    pub fn lambda_matrix(&self) -> Matrix {
        Matrix::from_diagonal(&self.lambda)
    }

    pub fn ctb(&self) -> Matrix {
        self.c.transpose() * &self.b
    }

    /// Virtual output `y = Cᵀx`.
    pub fn output(&self, x: &Vector) -> Vector {
        self.c.transpose() * x
    }
}

fn sigma_min(a: &Matrix) -> f64 {
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Builds the skeleton: gain, spectrum check, output matrix, Lyapunov pair.
///
/// `selected` lists the `m` eigenvalues of `A` (negative numbers) whose
/// eigenvectors become the columns of `C`; a value may repeat when the
/// eigenvalue does. `m_weight` defaults to the identity.
pub fn build_core(
    a0: &Matrix,
    b: &Matrix,
    gain: &GainSource,
    selected: &[f64],
    m_weight: Option<Matrix>,
) -> Result<LinearCore, DesignError> {
    let n = a0.nrows();
    if !a0.is_square() || b.nrows() != n {
        return Err(DesignError::DimensionMismatch(format!(
            "A0 is {:?}, B is {:?}",
            a0.shape(),
            b.shape()
        )));
    }
    let m = b.ncols();
    if selected.len() != m {
        return Err(DesignError::DimensionMismatch(format!(
            "{} eigenvalues selected for {m} inputs",
            selected.len()
        )));
    }
    let rank = numlin::controllability_rank(a0, b, 1e-10)?;
    if rank < n {
        return Err(DesignError::Uncontrollable { rank, n });
    }
    let k = match gain {
        GainSource::Explicit(k) => {
            if k.shape() != (n, m) {
                return Err(DesignError::DimensionMismatch(format!(
                    "K must be {n}x{m}, got {:?}",
                    k.shape()
                )));
            }
            k.clone()
        }
        GainSource::Poles(poles) => numlin::ackermann_gain(a0, b, poles)?,
    };
    let a = a0 + b * k.transpose();
    let pairs = match numlin::real_eig(&a, 1e-8) {
        Ok(p) => p,
        Err(NumError::ComplexSpectrum { re, im }) => return Err(DesignError::ComplexSpectrum(format!("{re}{im:+}i"))),
        Err(e) => return Err(e.into()),
    };
    if let Some(bad) = pairs.iter().find(|p| p.value >= 0.0) {
        return Err(DesignError::ComplexSpectrum(format!(
            "eigenvalue {} is not negative",
            bad.value
        )));
    }

    let mut used = vec![false; pairs.len()];
    let mut cols = Vec::with_capacity(m);
    let mut lambda = Vector::zeros(m);
    for (j, &want) in selected.iter().enumerate() {
        let best = pairs
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .min_by(|(_, p), (_, q)| (p.value - want).abs().total_cmp(&(q.value - want).abs()));
        match best {
            Some((i, p)) if (p.value - want).abs() <= SELECTION_TOL * want.abs().max(1.0) => {
                used[i] = true;
                cols.push(p.vector.clone());
                lambda[j] = -p.value;
            }
            _ => return Err(DesignError::SelectionNotEigenvalue(want)),
        }
    }
    let c = Matrix::from_columns(&cols);
    let ctb = c.transpose() * b;
    let smin = sigma_min(&ctb);
    if smin <= 1e-10 * numlin::norm2(b).max(1.0) {
        return Err(DesignError::SingularCB(smin));
    }

    let m_weight = m_weight.unwrap_or_else(|| Matrix::identity(n, n));
    let p = numlin::solve_lyapunov(&a, &m_weight).map_err(DesignError::LyapunovFailure)?;

    Ok(LinearCore {
        n,
        m,
        a0: a0.clone(),
        b: b.clone(),
        k,
        a,
        c,
        lambda,
        p,
        m_weight,
        spectrum: pairs.iter().map(|p| p.value).collect(),
    })
}

/// State-space realization `ẋ = F·x + G·u`, `y = H·x + D·u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiRealization {
    pub f: Matrix,
    pub g: Matrix,
    pub h: Matrix,
    pub d: Matrix,
    pub state: Vector,
}

impl LtiRealization {
    pub fn new(f: Matrix, g: Matrix, h: Matrix, d: Matrix) -> Result<Self, DesignError> {
        let q = f.nrows();
        if !f.is_square() || g.nrows() != q || h.ncols() != q || d.nrows() != h.nrows() || d.ncols() != g.ncols() {
            return Err(DesignError::DimensionMismatch(format!(
                "F {:?}, G {:?}, H {:?}, D {:?}",
                f.shape(),
                g.shape(),
                h.shape(),
                d.shape()
            )));
        }
        Ok(Self {
            f,
            g,
            h,
            d,
            state: Vector::zeros(q),
        })
    }

    pub fn order(&self) -> usize {
        self.f.nrows()
    }

    pub fn derivative(&self, state: &Vector, input: &Vector) -> Vector {
        &self.f * state + &self.g * input
    }

    pub fn output(&self, state: &Vector, input: &Vector) -> Vector {
        &self.h * state + &self.d * input
    }

    /// `D + H(jωI − F)⁻¹G`.
    pub fn freq_response(&self, omega: f64) -> DMatrix<Complex64> {
        let q = self.order();
        let to_c = |m: &Matrix| m.map(|v| Complex64::new(v, 0.0));
        let d = to_c(&self.d);
        if q == 0 {
            return d;
        }
        let jw = DMatrix::<Complex64>::identity(q, q) * Complex64::new(0.0, omega);
        let resolvent = (jw - to_c(&self.f)).lu();
        let mut x = resolvent.solve(&to_c(&self.g)).expect("jω is not an eigenvalue of F");
        // Near a pole of F the solve loses digits that the sum below cannot
        // afford; refine with an exactly-rounded residual.
        for _ in 0..2 {
            let r = self.resolvent_residual(omega, &x);
            match resolvent.solve(&r) {
                Some(dx) => x += dx,
                None => break,
            }
        }
        d + to_c(&self.h) * x
    }

    /// `G − (jωI − F)·X`, accumulated in double-double.
    fn resolvent_residual(&self, omega: f64, x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
        let q = self.order();
        DMatrix::from_fn(q, x.ncols(), |i, j| {
            let mut re = Dd::new(self.g[(i, j)]);
            let mut im = Dd::new(0.0);
            re.add_prod(omega, x[(i, j)].im);
            im.add_prod(-omega, x[(i, j)].re);
            for k in 0..q {
                re.add_prod(self.f[(i, k)], x[(k, j)].re);
                im.add_prod(self.f[(i, k)], x[(k, j)].im);
            }
            Complex64::new(re.value(), im.value())
        })
    }

    /// `D − H·F⁻¹·G`; `None` if `F` is singular.
    pub fn dc_gain(&self) -> Option<Matrix> {
        let x = self.f.clone().lu().solve(&self.g)?;
        Some(&self.d - &self.h * x)
    }
}

/// Double-double accumulator (error-free sums and FMA products).
#[derive(Debug, Clone, Copy)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn add(&mut self, v: f64) {
        let s = self.hi + v;
        let bb = s - self.hi;
        let err = (self.hi - (s - bb)) + (v - bb);
        self.hi = s;
        self.lo += err;
    }

    fn add_prod(&mut self, a: f64, b: f64) {
        let p = a * b;
        self.add(p);
        self.lo += a.mul_add(b, -p);
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// `G(s) = (sI + Λ)⁻¹CᵀB` as an m-state realization.
pub fn build_g(core: &LinearCore) -> LtiRealization {
    LtiRealization {
        f: -core.lambda_matrix(),
        g: core.ctb(),
        h: Matrix::identity(core.m, core.m),
        d: Matrix::zeros(core.m, core.m),
        state: Vector::zeros(core.m),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    /// `‖CᵀA + ΛCᵀ‖₂`
    pub eigen_residual: f64,
    /// Tolerance used for `eigen_residual` (`1e-8·‖A‖`).
    pub eigen_tol: f64,
    pub det_ctb: f64,
    pub rank_c: usize,
    pub columns_unit: bool,
    pub eigen_ok: bool,
    pub det_ok: bool,
    pub rank_ok: bool,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.eigen_ok && self.det_ok && self.rank_ok && self.columns_unit
    }
}

/// Minimum `|det(CᵀB)|` accepted by [`verify_structure`].
pub const DET_CTB_MIN: f64 = 1e-6;

/// Checks `CᵀA = −ΛCᵀ`, `det(CᵀB) ≠ 0` and full column rank of `C` for raw
/// matrices.
pub fn verify_structure(a: &Matrix, b: &Matrix, c: &Matrix, lambda: &Vector) -> StructureReport {
    let ct = c.transpose();
    let lam = Matrix::from_diagonal(lambda);
    let eigen_residual = numlin::norm2(&(&ct * a + &lam * &ct));
    let eigen_tol = 1e-8 * numlin::norm2(a).max(f64::MIN_POSITIVE);
    let ctb = &ct * b;
    let det_ctb = if ctb.is_square() { ctb.determinant() } else { 0.0 };
    let sv = c.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let rank_c = if smax == 0.0 {
        0
    } else {
        sv.iter().filter(|&&s| s > 1e-10 * smax).count()
    };
    let columns_unit = c.column_iter().all(|col| (col.norm() - 1.0).abs() < 1e-12);
    StructureReport {
        eigen_residual,
        eigen_tol,
        det_ctb,
        rank_c,
        columns_unit,
        eigen_ok: eigen_residual <= eigen_tol,
        det_ok: det_ctb.abs() > DET_CTB_MIN,
        rank_ok: rank_c == c.ncols(),
    }
}

pub fn verify_output_structure(core: &LinearCore) -> StructureReport {
    verify_structure(&core.a, &core.b, &core.c, &core.lambda)
}

/// Primary and secondary outputs reconstructed along a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub t: Vec<f64>,
    pub y_p: Vec<Vector>,
    pub y_s: Vec<Vector>,
}

impl Decomposition {
    /// `(max_t ‖y_p + y_s − Cᵀx‖, max_t ‖Cᵀx‖)`.
    pub fn identity_error(&self, core: &LinearCore, trace: &Trace) -> (f64, f64) {
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for (k, x) in trace.x.iter().enumerate() {
            let y = core.output(x);
            err = err.max((&self.y_p[k] + &self.y_s[k] - &y).norm());
            scale = scale.max(y.norm());
        }
        (err, scale)
    }
}

/// Integrates the primary system `ẏ_p = −Λy_p + CᵀB·u`, `y_p(0) = 0` and the
/// secondary system `ẏ_s = −Λy_s + CᵀB(−u + h + σ − Kᵀx)`, `y_s(0) = Cᵀx₀`
/// with RK4 on the trace grid.
///
/// When the trace carries the simulator's stage samples the signals are taken
/// there. Otherwise steps run over pairs of intervals so that every stage
/// lands on a recorded sample; odd samples (and a trailing odd interval) take
/// a single step with linearly interpolated midpoints.
pub fn decompose(core: &LinearCore, plant: &dyn UncertainPlant, trace: &Trace) -> Result<Decomposition, DesignError> {
    if !plant.uncertainty_known() {
        return Err(DesignError::UnknownUncertainty);
    }
    if trace.is_empty() {
        return Err(DesignError::EmptyTrace);
    }
    let m = core.m;
    let lam = core.lambda_matrix();
    let ctb = core.ctb();
    let kt = core.k.transpose();
    let delay = plant.input_delay();

    // forcing terms at time t for given (x, u)
    let forcing = |t: f64, x: &Vector, u: &Vector| -> (Vector, Vector) {
        let u_seen = match delay {
            Some(tau) => trace.input_at(t - tau),
            None => u.clone(),
        };
        let fp = &ctb * u;
        let fs = &ctb * (-u + plant.lumped(t, x, &u_seen) - &kt * x);
        (fp, fs)
    };
    let at_sample = |k: usize| forcing(trace.t[k], &trace.x[k], &trace.u[k]);
    let at_time = |t: f64| forcing(t, &trace.state_at(t), &trace.input_at(t));

    let stage = |s: &Vector, f: &(Vector, Vector)| -> Vector {
        let yp = s.rows(0, m).into_owned();
        let ys = s.rows(m, m).into_owned();
        let mut out = Vector::zeros(2 * m);
        out.rows_mut(0, m).copy_from(&(-&lam * yp + &f.0));
        out.rows_mut(m, m).copy_from(&(-&lam * ys + &f.1));
        out
    };
    let rk4 = |s: &Vector, h: f64, f0: &(Vector, Vector), fm: &(Vector, Vector), f1: &(Vector, Vector)| {
        let k1 = stage(s, f0);
        let k2 = stage(&(s + &k1 * (0.5 * h)), fm);
        let k3 = stage(&(s + &k2 * (0.5 * h)), fm);
        let k4 = stage(&(s + &k3 * h), f1);
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    };
    let single = |s: &Vector, k: usize| {
        let (t0, t1) = (trace.t[k], trace.t[k + 1]);
        rk4(s, t1 - t0, &at_sample(k), &at_time(0.5 * (t0 + t1)), &at_sample(k + 1))
    };

    let len = trace.len();
    let mut states = vec![Vector::zeros(2 * m); len];
    states[0].rows_mut(m, m).copy_from(&core.output(&trace.x[0]));
    if trace.has_stages() {
        for (k, st) in trace.stages.chunks_exact(4).enumerate() {
            let f: Vec<(Vector, Vector)> = st
                .iter()
                .map(|p| {
                    let fp = &ctb * &p.u;
                    let fs = &ctb * (-&p.u + plant.lumped(p.t, &p.x, &p.u_seen) - &kt * &p.x);
                    (fp, fs)
                })
                .collect();
            let s = &states[k];
            let h = trace.t[k + 1] - trace.t[k];
            let k1 = stage(s, &f[0]);
            let k2 = stage(&(s + &k1 * (0.5 * h)), &f[1]);
            let k3 = stage(&(s + &k2 * (0.5 * h)), &f[2]);
            let k4 = stage(&(s + &k3 * h), &f[3]);
            states[k + 1] = s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        return Ok(Decomposition {
            t: trace.t.clone(),
            y_p: states.iter().map(|s| s.rows(0, m).into_owned()).collect(),
            y_s: states.iter().map(|s| s.rows(m, m).into_owned()).collect(),
        });
    }
    let mut k = 0;
    while k + 2 < len {
        states[k + 1] = single(&states[k], k);
        let h = trace.t[k + 2] - trace.t[k];
        states[k + 2] = rk4(&states[k], h, &at_sample(k), &at_sample(k + 1), &at_sample(k + 2));
        k += 2;
    }
    if k + 1 < len {
        states[k + 1] = single(&states[k], k);
    }
    Ok(Decomposition {
        t: trace.t.clone(),
        y_p: states.iter().map(|s| s.rows(0, m).into_owned()).collect(),
        y_s: states.iter().map(|s| s.rows(m, m).into_owned()).collect(),
    })
}
