//! Named samplers behind a common trait.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;

use super::engine::{accumulate, maybe_resample, run_twisted, Weighting};
use super::rng::{standard_normal_vec, StreamFactory};
use super::{
    ess_from_log_weights, Method, ParticleEnsemble, Problem, SamplerConfig, StepDiagnostics,
};
use crate::error::{Error, Result};
use crate::score_model::{iso_normal_logpdf, tweedie_score};
use crate::twisting::{DenoiserTwist, Likelihood, UntwistedLikelihood};

/// A conditional sampling algorithm.
pub trait Sampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Rejects likelihoods the algorithm cannot handle.
    fn supports(&self, _likelihood: &Likelihood) -> Result<()> {
        Ok(())
    }

    fn run(&self, problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<ParticleEnsemble>;
}

/// Samplers indexed by name.
pub struct SamplerRegistry {
    entries: BTreeMap<&'static str, Box<dyn Sampler>>,
}

impl SamplerRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// The six built-in samplers, keyed by [`Method::as_str`].
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        for m in Method::ALL {
            r.register(builtin(m));
        }
        r
    }

    /// Adds or replaces a sampler under its own name.
    pub fn register(&mut self, sampler: Box<dyn Sampler>) {
        self.entries.insert(sampler.name(), sampler);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Sampler> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::UnknownSampler(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }

    pub fn run(
        &self,
        name: &str,
        problem: &Problem<'_>,
        cfg: &SamplerConfig,
    ) -> Result<ParticleEnsemble> {
        let sampler = self.get(name)?;
        sampler.supports(problem.likelihood)?;
        sampler.run(problem, cfg)
    }
}

/// Runs the built-in sampler selected by `cfg.method`.
pub fn run_sampler(cfg: &SamplerConfig, problem: &Problem<'_>) -> Result<ParticleEnsemble> {
    SamplerRegistry::builtin().run(cfg.method.as_str(), problem, cfg)
}

fn builtin(m: Method) -> Box<dyn Sampler> {
    match m {
        Method::Tds => Box::new(Twisted {
            method: m,
            weighting: Weighting::Resampled,
        }),
        Method::TdsIs => Box::new(Twisted {
            method: m,
            weighting: Weighting::Accumulated,
        }),
        Method::Guidance => Box::new(Twisted {
            method: m,
            weighting: Weighting::Discarded,
        }),
        Method::NaiveIs => Box::new(NaiveIs),
        Method::Replacement => Box::new(Replacement { weighted: false }),
        Method::SmcDiff => Box::new(Replacement { weighted: true }),
    }
}

struct Twisted {
    method: Method,
    weighting: Weighting,
}

impl Sampler for Twisted {
    fn name(&self) -> &'static str {
        self.method.as_str()
    }

    fn run(&self, problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<ParticleEnsemble> {
        let twist = DenoiserTwist {
            likelihood: problem.likelihood,
            config: &problem.twist,
            schedule: problem.schedule,
        };
        run_twisted(problem, cfg, &twist, self.weighting)
    }
}

struct NaiveIs;

impl Sampler for NaiveIs {
    fn name(&self) -> &'static str {
        Method::NaiveIs.as_str()
    }

    fn run(&self, problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<ParticleEnsemble> {
        let twist = UntwistedLikelihood {
            likelihood: problem.likelihood,
            config: &problem.twist,
            schedule: problem.schedule,
        };
        run_twisted(problem, cfg, &twist, Weighting::Accumulated)
    }
}

/// Unconditional proposals whose observed coordinates are redrawn from the
/// forward marginal `q(x^t_M | x^0_M = y)` at every level.
///
/// Unweighted, this is the replacement heuristic. Weighted by
/// `p(x^t_M | x^{t+1}) / q(x^t_M | y)` with resampling, the weights correct
/// the proposal exactly for the model's conditional.
struct Replacement {
    weighted: bool,
}

struct RepParticle {
    x: DVector<f64>,
    model_mean: DVector<f64>,
}

impl Clone for RepParticle {
    fn clone(&self) -> Self {
        Self {
            x: self.x.clone(),
            model_mean: self.model_mean.clone(),
        }
    }
}

impl Sampler for Replacement {
    fn name(&self) -> &'static str {
        if self.weighted {
            Method::SmcDiff.as_str()
        } else {
            Method::Replacement.as_str()
        }
    }

    fn supports(&self, likelihood: &Likelihood) -> Result<()> {
        match likelihood {
            Likelihood::Inpaint { .. } => Ok(()),
            other => Err(Error::Unsupported(format!(
                "{} requires an inpaint likelihood, got {}",
                self.name(),
                other.kind()
            ))),
        }
    }

    fn run(&self, problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<ParticleEnsemble> {
        self.supports(problem.likelihood)?;
        problem.validate()?;
        cfg.validate(problem.schedule)?;
        if cfg.truncate_at.is_some_and(|t| t > 0) {
            return Err(Error::Unsupported(format!(
                "{} does not support truncation",
                self.name()
            )));
        }
        let (mask, y) = match problem.likelihood {
            Likelihood::Inpaint { mask, y } => (mask.as_slice(), y),
            _ => unreachable!("checked by supports"),
        };
        let weighting = if self.weighted {
            Weighting::Resampled
        } else {
            Weighting::Discarded
        };
        let s = problem.schedule;
        let d = problem.model.dim();
        let k = cfg.particles;
        let big_t = s.steps();
        let streams = StreamFactory::new(cfg.seed);
        let gather =
            |x: &DVector<f64>| DVector::from_iterator(mask.len(), mask.iter().map(|&i| x[i]));

        // Redraw x_M from q(x^t_M | y); returns log q of the draw.
        let replace = |x: &mut DVector<f64>, t: usize, z: &DVector<f64>| -> Result<f64> {
            let (a, v) = s.forward_marginal_params(t)?;
            let sd = v.sqrt();
            for (j, &i) in mask.iter().enumerate() {
                x[i] = a * y[j] + sd * z[j];
            }
            Ok(iso_normal_logpdf(&gather(x), &(y * a), v))
        };
        let model_mean = |x: &DVector<f64>, t: usize| -> Result<DVector<f64>> {
            let den = problem.model.denoise(s, x, t)?;
            let score = tweedie_score(s, x, t, &den)?;
            Ok(s.reverse_transition_params(t, x, &score)?.0)
        };

        let prior_var = s.prior_var();
        let zero_m = DVector::zeros(mask.len());
        let init: Vec<Result<(RepParticle, f64)>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let mut rng = streams.particle(big_t, i);
                let mut x = standard_normal_vec(d, &mut rng) * prior_var.sqrt();
                let zm = standard_normal_vec(mask.len(), &mut rng);
                let log_q = replace(&mut x, big_t, &zm)?;
                let w = iso_normal_logpdf(&gather(&x), &zero_m, prior_var) - log_q;
                let mm = model_mean(&x, big_t)?;
                Ok((RepParticle { x, model_mean: mm }, w))
            })
            .collect();
        let mut particles = Vec::with_capacity(k);
        let mut incr = Vec::with_capacity(k);
        for r in init {
            let (p, w) = r?;
            particles.push(p);
            incr.push(w);
        }
        let mut log_weights = vec![0.0; k];
        accumulate(weighting, &mut log_weights, &incr);
        let mut diagnostics = vec![diag(big_t, &log_weights, &incr, false)?];

        for t in (1..=big_t).rev() {
            let next = t - 1;
            let resampled = maybe_resample(
                cfg,
                weighting,
                &streams,
                t,
                &mut particles,
                &mut log_weights,
            )?;
            let step_var = s.step_var(t)?;
            let prop_sd = cfg.proposal_var.variance(step_var).sqrt();
            let moved: Vec<Result<(RepParticle, f64)>> = particles
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let mut rng = streams.particle(next, i);
                    let z = standard_normal_vec(d, &mut rng);
                    let mut x = &p.model_mean + z * prop_sd;
                    let m_obs = gather(&p.model_mean);
                    let incr = if next >= 1 {
                        let zm = standard_normal_vec(mask.len(), &mut rng);
                        let log_q = replace(&mut x, next, &zm)?;
                        iso_normal_logpdf(&gather(&x), &m_obs, step_var) - log_q
                    } else {
                        for (j, &idx) in mask.iter().enumerate() {
                            x[idx] = y[j];
                        }
                        iso_normal_logpdf(y, &m_obs, step_var)
                    };
                    if !incr.is_finite() {
                        return Err(Error::NumericalFailure {
                            step: next,
                            particle: i,
                            detail: format!("log incremental weight is {incr}"),
                        });
                    }
                    let mm = if next >= 1 {
                        model_mean(&x, next)?
                    } else {
                        DVector::zeros(0)
                    };
                    Ok((RepParticle { x, model_mean: mm }, incr))
                })
                .collect();
            particles.clear();
            incr.clear();
            for r in moved {
                let (p, w) = r?;
                particles.push(p);
                incr.push(w);
            }
            accumulate(weighting, &mut log_weights, &incr);
            diagnostics.push(diag(next, &log_weights, &incr, resampled)?);
        }

        Ok(ParticleEnsemble {
            states: particles.into_iter().map(|p| p.x).collect(),
            log_weights,
            t: 0,
            diagnostics,
        })
    }
}

fn diag(t: usize, log_weights: &[f64], incr: &[f64], resampled: bool) -> Result<StepDiagnostics> {
    let lo = incr.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = incr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(StepDiagnostics {
        t,
        ess: ess_from_log_weights(log_weights)?,
        resampled,
        max_abs_log_incr_weight: incr.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        log_incr_spread: hi - lo,
        clamped_twists: 0,
    })
}
