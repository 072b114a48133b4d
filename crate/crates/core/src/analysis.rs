//! Ultimate-boundedness analysis for the filtered inversion loop.
//!
//! With the Lyapunov pair `P·A + Aᵀ·P = −M` of the skeleton and the constants
//! describing how far `h` and `σ` stray from a linear, time-invariant model,
//!
//! ```text
//! γ0 = λmin(M)
//! γ1 = 2(‖K‖ + l_σx)‖B‖ + 2·l_ht / l̲_hu
//! γ2 = ‖P‖‖B‖ + ‖A‖(‖K‖ + l_σx) + ‖K‖ + k_σ
//! ```
//!
//! any `ε < l̲_hu / (γ1 + (2/γ0)(γ2 + l_σt)²)` keeps the state uniformly
//! ultimately bounded. All matrix norms are spectral.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::design::LinearCore;
use crate::numlin::{self, Vector};
use crate::plants::UncertainPlant;
use crate::sim::Trace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid assumption constant: {0}")]
    InvalidConstants(String),
    #[error("η(ε) = {eta} is not positive for ε = {epsilon}")]
    EtaNonpositive { epsilon: f64, eta: f64 },
    #[error("ε must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("plant uncertainty is not evaluable")]
    UnknownUncertainty,
    #[error("trace is empty")]
    EmptyTrace,
}

/// Constants bounding the input nonlinearity and the disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    /// Time-Lipschitz constant of `h`.
    pub l_ht: f64,
    /// Lower and upper bounds on the symmetric part of `∂h/∂u`.
    pub l_hu_lower: f64,
    pub l_hu_upper: f64,
    /// `‖σ(t, x)‖ ≤ k_σ‖x‖ + δ_σ`
    pub k_sigma: f64,
    pub delta_sigma: f64,
    /// State- and time-Lipschitz constants of `σ`.
    pub l_sigma_x: f64,
    pub l_sigma_t: f64,
    /// Bound on the time-variation of `σ` not covered by `l_σt‖x‖`.
    pub d_sigma: f64,
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let fields = [
            ("l_ht", self.l_ht),
            ("l_hu_lower", self.l_hu_lower),
            ("l_hu_upper", self.l_hu_upper),
            ("k_sigma", self.k_sigma),
            ("delta_sigma", self.delta_sigma),
            ("l_sigma_x", self.l_sigma_x),
            ("l_sigma_t", self.l_sigma_t),
            ("d_sigma", self.d_sigma),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(AnalysisError::InvalidConstants(format!("{name} = {v}")));
            }
        }
        if self.l_hu_lower <= 0.0 {
            return Err(AnalysisError::InvalidConstants("l_hu_lower must be positive".into()));
        }
        if self.l_hu_lower > self.l_hu_upper {
            return Err(AnalysisError::InvalidConstants("l_hu_lower exceeds l_hu_upper".into()));
        }
        Ok(())
    }

    /// Additive term of the ultimate bound, `(l_ht/l̲_hu)·δ_σ + d_σ`.
    pub fn forcing(&self) -> f64 {
        self.l_ht / self.l_hu_lower * self.delta_sigma + self.d_sigma
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gammas {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
}

pub fn gammas(core: &LinearCore, c: &AssumptionConstants) -> Gammas {
    let (m_min, _) = numlin::symmetric_eigenvalue_range(&core.m_weight);
    let nb = numlin::norm2(&core.b);
    let nk = numlin::norm2(&core.k);
    let na = numlin::norm2(&core.a);
    let np = numlin::norm2(&core.p);
    Gammas {
        gamma0: m_min,
        gamma1: 2.0 * (nk + c.l_sigma_x) * nb + 2.0 * c.l_ht / c.l_hu_lower,
        gamma2: np * nb + na * (nk + c.l_sigma_x) + nk + c.k_sigma,
    }
}

fn eps_denominator(g: &Gammas, c: &AssumptionConstants) -> f64 {
    let s = g.gamma2 + c.l_sigma_t;
    g.gamma1 + 2.0 / g.gamma0 * s * s
}

/// Largest admissible filter constant; `+∞` when the denominator vanishes.
pub fn epsilon_bound(g: &Gammas, c: &AssumptionConstants) -> f64 {
    let den = eps_denominator(g, c);
    if den == 0.0 {
        f64::INFINITY
    } else {
        c.l_hu_lower / den
    }
}

/// `η(ε) = min(γ0 / (2λmax(P)), l̲_hu/ε − γ1 − (2/γ0)(γ2 + l_σt)²)`
pub fn eta(epsilon: f64, g: &Gammas, c: &AssumptionConstants, p_max: f64) -> f64 {
    let first = g.gamma0 / (2.0 * p_max);
    let second = c.l_hu_lower / epsilon - eps_denominator(g, c);
    first.min(second)
}

/// Two forms of the ultimate bound on `‖x‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UltimateBound {
    pub epsilon: f64,
    pub eta: f64,
    /// `√(ε/(λmin(P)·η·l̲_hu))·forcing`, from the full Lyapunov argument.
    pub full: f64,
    /// Same without the `λmin(P)` factor.
    pub compact: f64,
}

pub fn ultimate_bound(
    epsilon: f64,
    g: &Gammas,
    c: &AssumptionConstants,
    p_min: f64,
    p_max: f64,
) -> Result<UltimateBound, AnalysisError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(AnalysisError::InvalidEpsilon(epsilon));
    }
    let e = eta(epsilon, g, c, p_max);
    if e.is_nan() || e <= 0.0 {
        return Err(AnalysisError::EtaNonpositive { epsilon, eta: e });
    }
    let f = c.forcing();
    let base = epsilon / (e * c.l_hu_lower);
    Ok(UltimateBound {
        epsilon,
        eta: e,
        full: (base / p_min).sqrt() * f,
        compact: base.sqrt() * f,
    })
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else if *v < 0.0 {
        s.serialize_str("-inf")
    } else {
        s.serialize_str("nan")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaSample {
    pub epsilon: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(serialize_with = "ser_extended")]
    pub epsilon_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub constants: AssumptionConstants,
    pub eta_grid: Vec<EtaSample>,
    /// Bound at the requested ε, if η is positive there.
    pub bound: Option<UltimateBound>,
}

impl BoundReport {
    pub fn gammas(&self) -> Gammas {
        Gammas {
            gamma0: self.gamma0,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
        }
    }

    pub fn eta(&self, epsilon: f64) -> f64 {
        eta(epsilon, &self.gammas(), &self.constants, self.p_max)
    }

    pub fn ultimate_bound(&self, epsilon: f64) -> Result<UltimateBound, AnalysisError> {
        ultimate_bound(epsilon, &self.gammas(), &self.constants, self.p_min, self.p_max)
    }
}

/// Log-spaced grid of `count` points between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..count)
                .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
                .collect()
        }
    }
}

/// Evaluates everything for one core and one set of constants. The η grid
/// spans two decades on either side of `ε_max` (or of `epsilon` when `ε_max`
/// is infinite).
pub fn bound_report(
    core: &LinearCore,
    c: &AssumptionConstants,
    epsilon: Option<f64>,
) -> Result<BoundReport, AnalysisError> {
    c.validate()?;
    let g = gammas(core, c);
    let eps_max = epsilon_bound(&g, c);
    let (p_min, p_max) = numlin::symmetric_eigenvalue_range(&core.p);
    let centre = if eps_max.is_finite() {
        eps_max
    } else {
        epsilon.unwrap_or(1.0)
    };
    let eta_grid = log_grid(centre * 1e-2, centre * 1e2, 41)
        .into_iter()
        .map(|e| EtaSample {
            epsilon: e,
            eta: eta(e, &g, c, p_max),
        })
        .collect();
    let bound = epsilon.and_then(|e| ultimate_bound(e, &g, c, p_min, p_max).ok());
    Ok(BoundReport {
        gamma0: g.gamma0,
        gamma1: g.gamma1,
        gamma2: g.gamma2,
        epsilon_max: eps_max,
        p_min,
        p_max,
        constants: *c,
        eta_grid,
        bound,
    })
}

/// `V = xᵀPx + vᵀv` along a trace, with `v = h(t, u) − Kᵀx + σ(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub t: Vec<f64>,
    pub v: Vec<f64>,
    /// `(1/η)(ε/l̲_hu)·forcing²`, when constants and ε give a positive η.
    pub level: Option<f64>,
    /// First sample after which `V` stays at or below `level`.
    pub entry_time: Option<f64>,
}

impl Certificate {
    pub fn entered(&self) -> bool {
        self.entry_time.is_some()
    }

    /// True if `V` never grows by more than `slack` (relative) between samples
    /// after `t_from`.
    pub fn decreasing_after(&self, t_from: f64, slack: f64) -> bool {
        let start = self.t.iter().position(|&t| t >= t_from).unwrap_or(self.t.len());
        self.v[start..]
            .windows(2)
            .all(|w| w[1] <= w[0] * (1.0 + slack) + f64::MIN_POSITIVE)
    }
}

pub fn lyapunov_certificate(
    trace: &Trace,
    core: &LinearCore,
    plant: &dyn UncertainPlant,
    bound: Option<(&AssumptionConstants, f64)>,
) -> Result<Certificate, AnalysisError> {
    if !plant.uncertainty_known() {
        return Err(AnalysisError::UnknownUncertainty);
    }
    if trace.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    let kt = core.k.transpose();
    let delay = plant.input_delay();
    let v: Vec<f64> = trace
        .t
        .iter()
        .zip(&trace.x)
        .zip(&trace.u)
        .map(|((&t, x), u)| {
            let u_seen: Vector = match delay {
                Some(tau) => trace.input_at(t - tau),
                None => u.clone(),
            };
            let w = plant.lumped(t, x, &u_seen) - &kt * x;
            x.dot(&(&core.p * x)) + w.norm_squared()
        })
        .collect();

    let level = match bound {
        Some((c, eps)) => {
            let g = gammas(core, c);
            let (_, p_max) = numlin::symmetric_eigenvalue_range(&core.p);
            let e = eta(eps, &g, c, p_max);
            (e > 0.0).then(|| eps / c.l_hu_lower * c.forcing().powi(2) / e)
        }
        None => None,
    };
    let entry_time = level.and_then(|lvl| {
        let last_above = v.iter().rposition(|&val| val > lvl);
        match last_above {
            None => Some(trace.t[0]),
            Some(i) if i + 1 < v.len() => Some(trace.t[i + 1]),
            Some(_) => None,
        }
    });
    Ok(Certificate {
        t: trace.t.clone(),
        v,
        level,
        entry_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn consts() -> AssumptionConstants {
        AssumptionConstants {
            l_ht: 0.0,
            l_hu_lower: 1.0,
            l_hu_upper: 1.0,
            k_sigma: 0.0,
            delta_sigma: 0.0,
            l_sigma_x: 0.0,
            l_sigma_t: 0.0,
            d_sigma: 0.0,
        }
    }

    #[test]
    fn epsilon_bound_arithmetic() {
        let g = Gammas {
            gamma0: 2.0,
            gamma1: 1.0,
            gamma2: 1.0,
        };
        assert_eq!(epsilon_bound(&g, &consts()), 0.5);
        let g0 = Gammas {
            gamma0: 2.0,
            gamma1: 0.0,
            gamma2: 0.0,
        };
        assert_eq!(epsilon_bound(&g0, &consts()), f64::INFINITY);
    }

    #[test]
    fn eta_limits() {
        let g = Gammas {
            gamma0: 2.0,
            gamma1: 1.0,
            gamma2: 1.0,
        };
        let c = consts();
        assert_eq!(eta(1e-12, &g, &c, 4.0), 0.25);
        assert_eq!(eta(0.5, &g, &c, 4.0), 0.0);
        assert!(eta(0.6, &g, &c, 4.0) < 0.0);
    }

    #[test]
    fn bound_linear_in_forcing() {
        let g = Gammas {
            gamma0: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
        };
        let mut c = consts();
        let zero = ultimate_bound(0.1, &g, &c, 0.5, 2.0).unwrap();
        assert_eq!(zero.full, 0.0);
        c.d_sigma = 1.0;
        let one = ultimate_bound(0.1, &g, &c, 0.5, 2.0).unwrap();
        c.d_sigma = 2.0;
        let two = ultimate_bound(0.1, &g, &c, 0.5, 2.0).unwrap();
        assert_relative_eq!(two.full, 2.0 * one.full, max_relative = 1e-15);
        assert_relative_eq!(one.full, one.compact / 0.5_f64.sqrt(), max_relative = 1e-15);
        assert!(matches!(
            ultimate_bound(1.0, &g, &c, 0.5, 2.0),
            Err(AnalysisError::EtaNonpositive { .. })
        ));
    }

    #[test]
    fn validation() {
        let mut c = consts();
        assert!(c.validate().is_ok());
        c.l_hu_lower = 0.0;
        assert!(c.validate().is_err());
        c.l_hu_lower = 2.0;
        assert!(c.validate().is_err());
        c.l_hu_upper = 2.0;
        c.k_sigma = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn infinite_sentinel_serializes_as_string() {
        let core = crate::design::build_core(
            &(-crate::Matrix::identity(1, 1)),
            &crate::Matrix::identity(1, 1),
            &crate::GainSource::Explicit(crate::Matrix::zeros(1, 1)),
            &[-1.0],
            None,
        )
        .unwrap();
        let rep = bound_report(&core, &consts(), None).unwrap();
        // K = 0 and no uncertainty leave only ‖P‖‖B‖ in γ2
        assert_eq!(rep.gamma1, 0.0);
        assert_relative_eq!(rep.gamma2, 0.5, max_relative = 1e-14);
        assert!(rep.epsilon_max.is_finite());
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["epsilon_max"].is_number());
        let g = Gammas {
            gamma0: 1.0,
            gamma1: 0.0,
            gamma2: 0.0,
        };
        let mut r = rep.clone();
        r.epsilon_max = epsilon_bound(&g, &consts());
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["epsilon_max"], "inf");
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 1e1, 5);
        assert_eq!(g.len(), 5);
        assert_relative_eq!(g[0], 1e-3, max_relative = 1e-14);
        assert_relative_eq!(g[2], 1e-1, max_relative = 1e-14);
        assert_relative_eq!(g[4], 1e1, max_relative = 1e-14);
    }
}
