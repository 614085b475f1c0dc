//! Particle samplers for conditional generation with a diffusion model.
//!
//! All samplers share one engine ([`engine`]): particles start from the
//! reference distribution `p(x^T)`, move through the reverse chain one step
//! at a time, and carry log-weights that are optionally resampled. The
//! samplers differ in the twisting function, in how weights are used, and
//! (for the replacement family) in how observed coordinates are proposed.
//! Each is exposed behind the [`Sampler`] trait and looked up by name in a
//! [`SamplerRegistry`].

pub mod engine;
mod resample;
mod rng;
mod samplers;

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_model::ScoreModel;
use crate::twisting::{Likelihood, TwistConfig};

pub use resample::{
    ess, ess_from_log_weights, normalize_log_weights, resample_multinomial, resample_systematic,
    Resampling,
};
pub use rng::StreamFactory;
pub use samplers::{run_sampler, Sampler, SamplerRegistry};

/// Sampling algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Twisted proposals and weights with adaptive resampling.
    Tds,
    /// TDS without resampling.
    TdsIs,
    /// Twisted proposals, no weighting (independent guided chains).
    Guidance,
    /// Unconditional proposals weighted by the final likelihood.
    NaiveIs,
    /// Unconditional proposals with observed coordinates overwritten.
    Replacement,
    /// Replacement proposals with importance weights and resampling.
    SmcDiff,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Tds,
        Method::TdsIs,
        Method::Guidance,
        Method::NaiveIs,
        Method::Replacement,
        Method::SmcDiff,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tds => "tds",
            Method::TdsIs => "tds_is",
            Method::Guidance => "guidance",
            Method::NaiveIs => "naive_is",
            Method::Replacement => "replacement",
            Method::SmcDiff => "smc_diff",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownSampler(s.to_string()))
    }
}

/// Variance `σ̃²` of the proposal at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProposalVarMode {
    /// The model transition variance `σ_t²`.
    ModelVar,
    /// `factor · σ_t²` with `factor > 1`.
    Inflated { factor: f64 },
}

impl ProposalVarMode {
    pub fn variance(self, step_var: f64) -> f64 {
        match self {
            ProposalVarMode::ModelVar => step_var,
            ProposalVarMode::Inflated { factor } => factor * step_var,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    /// Number of particles `K`.
    pub particles: usize,
    pub resampling: Resampling,
    /// Resample when `ESS < ess_threshold · K`; `1.0` resamples every step
    /// and `0.0` never does.
    pub ess_threshold: f64,
    pub proposal_var: ProposalVarMode,
    /// Stop at this step and return the denoised particles `x̂(x^t)`.
    pub truncate_at: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            method: Method::Tds,
            particles: 64,
            resampling: Resampling::Systematic,
            ess_threshold: 0.5,
            proposal_var: ProposalVarMode::ModelVar,
            truncate_at: None,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::InvalidConfig(
                "particle count K must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::InvalidConfig(format!(
                "ess_threshold must lie in [0, 1], got {}",
                self.ess_threshold
            )));
        }
        if let ProposalVarMode::Inflated { factor } = self.proposal_var {
            if !(factor > 1.0 && factor.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "inflation factor must exceed 1, got {factor}"
                )));
            }
        }
        if let Some(t) = self.truncate_at {
            if t >= s.steps() {
                return Err(Error::InvalidConfig(format!(
                    "truncate_at must be below the number of steps {}, got {t}",
                    s.steps()
                )));
            }
        }
        Ok(())
    }
}

/// Everything a sampler needs besides its own configuration.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub schedule: &'a NoiseSchedule,
    pub model: &'a dyn ScoreModel,
    pub likelihood: &'a Likelihood,
    pub twist: TwistConfig,
}

impl<'a> Problem<'a> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        model: &'a dyn ScoreModel,
        likelihood: &'a Likelihood,
        twist: TwistConfig,
    ) -> Self {
        Self {
            schedule,
            model,
            likelihood,
            twist,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.likelihood.validate(self.model.dim())?;
        self.twist.validate(self.schedule)
    }
}

/// One row of the per-step diagnostics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    /// Level `t` of the particles after this step.
    pub t: usize,
    /// ESS of the weights after reweighting at this step.
    pub ess: f64,
    /// Whether the ensemble was resampled before this step's proposal.
    pub resampled: bool,
    pub max_abs_log_incr_weight: f64,
    /// `max − min` of the log incremental weights; zero means the normalised
    /// incremental weights are exactly uniform.
    pub log_incr_spread: f64,
    /// Particles whose twist variance hit the floor.
    pub clamped_twists: usize,
}

/// Weighted particles at the end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub states: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    /// Level of `states`; nonzero after a truncated run.
    pub t: usize,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalize_log_weights(&self.log_weights)
    }

    pub fn ess(&self) -> Result<f64> {
        ess_from_log_weights(&self.log_weights)
    }

    pub fn resample_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.resampled).count()
    }

    pub fn max_abs_log_incr_weight(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.max_abs_log_incr_weight)
            .fold(0.0, f64::max)
    }

    /// `Σ_k w_k x_k` with normalised weights.
    pub fn conditional_mean(&self) -> Result<DVector<f64>> {
        Ok(estimate_conditional_mean(
            &self.states,
            &self.normalized_weights()?,
        ))
    }

    /// `particle_index,weight,x0,x1,...`
    pub fn write_particles_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = self.states.first().map_or(0, |x| x.len());
        let mut header = String::from("particle_index,weight");
        for i in 0..d {
            header.push_str(&format!(",x{i}"));
        }
        writeln!(out, "{header}")?;
        let w = self
            .normalized_weights()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        for (k, (x, wk)) in self.states.iter().zip(&w).enumerate() {
            write!(out, "{k},{wk}")?;
            for v in x.iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// `t,ess,resampled,max_abs_log_incr_weight`
    pub fn write_diagnostics_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "t,ess,resampled,max_abs_log_incr_weight")?;
        for d in &self.diagnostics {
            writeln!(
                out,
                "{},{},{},{}",
                d.t, d.ess, d.resampled, d.max_abs_log_incr_weight
            )?;
        }
        Ok(())
    }
}

/// `Σ_k w_k x_k` for normalised `weights`.
pub fn estimate_conditional_mean(states: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let d = states.first().map_or(0, |x| x.len());
    let mut acc = DVector::zeros(d);
    for (x, w) in states.iter().zip(weights) {
        acc.axpy(*w, x, 1.0);
    }
    acc
}
