//! Desk-scale numerical laboratory for Cucker-Smale flocking under
//! multiplicative common white noise.
//!
//! The crate simulates the stochastic Cucker-Smale ensemble at two levels —
//! N particles driven by one shared Wiener path, and the d = 1 kinetic
//! density solved along the same path by stochastic characteristics — and
//! measures everything the theory pins down at desk scale: moment
//! conservation, pathwise and expected flocking decay rates, Wong-Zakai
//! convergence of smoothed-noise runs, propagation of chaos in
//! Wasserstein-2, and the factorial contraction of the successive
//! approximation kinetic solver.
//!
//! Entry points:
//! - [`particle`]: the N-particle SDE engines (Stratonovich Heun,
//!   Ito Euler-Maruyama, smoothed-noise RK4).
//! - [`kinetic`]: the phase-space grid solver.
//! - [`meanfield`]: exact Wasserstein-2 machinery and the chaos/stability
//!   experiments.
//! - [`sde`]: scalar integrators plus the closed-form oracles every engine
//!   is validated against.
//! - [`experiment`]: the named, seeded experiment harness behind the `flock`
//!   binary; each experiment is also a runnable example.
//!
//! Reproducibility: every stochastic operation is seeded through ChaCha
//! streams derived from one master seed, and results are bit-identical
//! single- or multi-threaded (parallel loops keep serial reduction order).

pub mod config;
pub mod error;
pub mod kinetic;
pub mod meanfield;
pub mod observables;
pub mod particle;
pub mod sde;
pub mod weight;
pub mod wiener;

pub use config::{NoiseMode, SimConfig};
pub use error::{Error, Result};
pub use weight::CommWeight;
pub use wiener::{SmoothPath, WienerPath};
