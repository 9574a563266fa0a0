//! Robust state-and-disturbance estimation with generalized multi-kernel
//! maximum-correntropy Kalman filtering.
//!
//! The crate implements, end to end:
//!
//! * [`correntropy`] — generalized-Gaussian kernels, the generalized
//!   correntropy loss and its induced metric, influence functions, and the
//!   fixed-point channel weights;
//! * [`filters`] — the Kalman recursion, the whitened regression form, and
//!   the iterated reweighted (fixed-point) robust update from which the
//!   classical Kalman and single-kernel correntropy filters fall out as
//!   kernel parameterizations;
//! * [`convergence`] — sufficient-condition certificates (`ξ`, `φ(β)`,
//!   `ψ(β)`, `β*`, `β⁺`) guaranteeing the fixed-point iteration contracts;
//! * [`plant`] — a one-link manipulator with feedback linearization, Euler
//!   discretization, a PD + feedforward + disturbance-compensation
//!   controller, and a step disturbance profile;
//! * [`noise`] — Gaussian/Laplace/uniform/mixture variate generation, the
//!   loss-induced probability density, and a least-squares Gaussian fit;
//! * [`baselines`] — comparison observers: the Kalman disturbance observer,
//!   an extended state observer, the single-kernel correntropy filter
//!   wrapper, and a bootstrap particle filter;
//! * [`harness`] — a reproducible Monte Carlo experiment driver with JSON
//!   config in, CSV/JSON reports out, exposed through the `gmkmckf` CLI.

pub mod baselines;
pub mod convergence;
pub mod correntropy;
pub mod error;
pub mod filters;
pub mod harness;
pub mod noise;
pub mod plant;

pub use error::{Error, Result};
