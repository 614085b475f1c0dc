//! Twisted diffusion sampling on analytic-score diffusion models.
//!
//! The crate is organised bottom-up: [`schedule`] defines the forward noise
//! process, [`score_model`] supplies exact denoisers for closed-form data
//! distributions, [`twisting`] builds twisting functions from a likelihood,
//! and [`smc`] runs the particle samplers. [`oracle`] computes ground-truth
//! conditional means and benchmark sweeps; [`riemannian`] holds the SO(3)
//! machinery for manifold-valued particles.

// `!(a > b)` is deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod oracle;
pub mod riemannian;
pub mod schedule;
pub mod score_model;
pub mod smc;
pub mod twisting;

pub use error::{Error, Result};
pub use schedule::{Framework, NoiseSchedule};
pub use score_model::{AnalyticTarget, DenoiserOutput, ScoreModel};
pub use twisting::{FinalStepMode, Likelihood, TwistConfig, VarianceScheme};
