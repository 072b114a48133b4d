//! Fixtures shared by the benchmarks.

use asdinv_core::design::{build_core, GainSource};
use asdinv_core::plants::{self, UncertainPlant};
use asdinv_core::{ControllerSpec, LinearCore, Matrix, SimConfig, Vector};

/// Upper-triangular stable matrix of size `n` with distinct real eigenvalues.
pub fn stable_matrix(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => -1.0 - i as f64,
        std::cmp::Ordering::Less => 0.1 * ((i + 2 * j) % 5) as f64,
        std::cmp::Ordering::Greater => 0.0,
    })
}

pub fn siso_core() -> LinearCore {
    let p = plants::benchmark_siso();
    build_core(p.a0(), p.b(), &GainSource::Poles(vec![-1.0, -2.0, -3.0]), &[-1.0], None).expect("SISO design")
}

pub fn siso_setup(t_final: f64) -> (plants::SisoPlant, ControllerSpec, SimConfig) {
    let spec = ControllerSpec::new(siso_core(), 0.1)
        .and_then(|c| c.with_symmetric_limit(5.0))
        .expect("SISO controller");
    let cfg = SimConfig::new(1e-3, t_final, Vector::from_element(3, 1.0));
    (plants::benchmark_siso(), spec, cfg)
}
