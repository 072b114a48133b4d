//! Additive-state-decomposition (ASD) dynamic inversion stabilization for
//! uncertain MIMO systems of the form
//!
//! ```text
//! ẋ = A0·x + B·(h(t, u) + σ(t, x))
//! ```
//!
//! The crate covers the whole pipeline: designing the linear skeleton and the
//! redefined output matrix ([`design`]), the runtime controller in observer and
//! PI form ([`controller`]), the built-in uncertain plants ([`plants`]), the
//! fixed-step closed-loop simulator ([`sim`]) and the stability-bound analysis
//! ([`analysis`]). [`numlin`] holds the small dense linear algebra underneath.

pub mod analysis;
pub mod controller;
pub mod design;
pub mod numlin;
pub mod plants;
pub mod sim;

pub use analysis::{AssumptionConstants, BoundReport, UltimateBound};
pub use controller::{AntiWindup, ControllerSpec, ControllerState, Realization};
pub use design::{build_core, GainSource, LinearCore, LtiRealization, StructureReport};
pub use numlin::{EigenPair, Matrix, Vector};
pub use plants::{QuadrotorConfig, UncertainPlant};
pub use sim::{simulate, Metrics, SimConfig, SimError, Trace};
