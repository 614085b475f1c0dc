//! The shared particle loop.
//!
//! Levels run from `T` down to `0`. A particle at level `t >= 1` caches its
//! denoiser-derived quantities, so each particle costs one model evaluation
//! per step. The incremental log-weight for the move `x^t -> x^{t-1}` is
//!
//! `log p(x^{t-1} | x^t) + log p̃(y | x^{t-1}) − log r(x^{t-1} | x^t) − log p̃(y | x^t)`
//!
//! where `r` is the proposal. Proposal draws use per-particle streams and all
//! reductions are serial, so results do not depend on the thread count.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use super::rng::{standard_normal_vec, StreamFactory};
use super::{
    ess_from_log_weights, normalize_log_weights, ParticleEnsemble, Problem, SamplerConfig,
    StepDiagnostics,
};
use crate::error::{Error, Result};
use crate::score_model::{iso_normal_logpdf, tweedie_score};
use crate::twisting::{
    exact_final_from_transition, FinalStepMode, GaussianTwistForm, TwistFunction,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// How a sampler uses its importance weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Accumulate and resample when the ESS drops below the threshold.
    Resampled,
    /// Accumulate, never resample.
    Accumulated,
    /// Report uniform weights.
    Discarded,
}

#[derive(Debug, Clone)]
struct Particle {
    x: DVector<f64>,
    x_hat: DVector<f64>,
    log_twist: f64,
    // Model transition and gradient-proposal means for the move out of x.
    model_mean: DVector<f64>,
    proposal_mean: DVector<f64>,
}

struct Moved {
    particle: Particle,
    incr: f64,
    clamped: bool,
}

// Gaussian proposal `N(mean, cov)` in Cholesky form.
struct FullGaussian {
    chol: Cholesky<f64, Dyn>,
    cov_inv: DMatrix<f64>,
    log_norm: f64,
}

impl FullGaussian {
    fn new(cov: DMatrix<f64>) -> Result<Self> {
        let d = cov.nrows();
        let chol = Cholesky::new(cov).ok_or_else(|| {
            Error::NonFinite("optimal proposal covariance is not positive definite".into())
        })?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let cov_inv = chol.inverse();
        Ok(Self {
            chol,
            cov_inv,
            log_norm: -0.5 * (d as f64 * LN_2PI + logdet),
        })
    }

    fn sample(&self, mean: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        mean + self.chol.l() * z
    }

    fn logpdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let r = x - mean;
        self.log_norm - 0.5 * r.dot(&(&self.cov_inv * &r))
    }
}

// Product of `N(x; ·, v·I)` with the twist `N(y; Bx + c, C)`:
// covariance `(I/v + BᵀC⁻¹B)⁻¹`, mean `Σ(m/v + BᵀC⁻¹(y − c))`.
struct OptimalProposal {
    gauss: FullGaussian,
    cov: DMatrix<f64>,
    bt_cinv: DMatrix<f64>,
    shift: DVector<f64>,
    inv_var: f64,
}

impl OptimalProposal {
    fn new(form: &GaussianTwistForm, var: f64) -> Result<Self> {
        let d = form.b.ncols();
        let c_inv = form
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NonFinite("twist covariance is not positive definite".into()))?
            .inverse();
        let bt_cinv = form.b.transpose() * c_inv;
        let precision = DMatrix::identity(d, d) / var + &bt_cinv * &form.b;
        let cov = precision
            .cholesky()
            .ok_or_else(|| Error::NonFinite("optimal proposal precision is singular".into()))?
            .inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            gauss: FullGaussian::new(cov.clone())?,
            cov,
            shift: &form.y - &form.c,
            bt_cinv,
            inv_var: 1.0 / var,
        })
    }

    fn mean(&self, m: &DVector<f64>) -> DVector<f64> {
        &self.cov * (m * self.inv_var + &self.bt_cinv * &self.shift)
    }
}

fn check_finite(v: f64, step: usize, particle: usize, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalFailure {
            step,
            particle,
            detail: format!("{what} is {v}"),
        })
    }
}

fn evaluate(
    problem: &Problem<'_>,
    twist: &dyn TwistFunction,
    x: DVector<f64>,
    t: usize,
) -> Result<(Particle, bool)> {
    let s = problem.schedule;
    let den = problem.model.denoise(s, &x, t)?;
    let score = tweedie_score(s, &x, t, &den)?;
    let tw = twist.evaluate(&x, t, &den)?;
    let (model_mean, _) = s.reverse_transition_params(t, &x, &score)?;
    let (proposal_mean, _) = s.reverse_transition_params(t, &x, &(&score + &tw.grad))?;
    Ok((
        Particle {
            x,
            x_hat: den.x_hat,
            log_twist: tw.log,
            model_mean,
            proposal_mean,
        },
        tw.clamped,
    ))
}

fn annotate(e: Error, step: usize, particle: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::NumericalFailure {
            step,
            particle,
            detail,
        },
        other => other,
    }
}

fn summarize(
    t: usize,
    log_weights: &[f64],
    incr: &[f64],
    resampled: bool,
    clamped: usize,
) -> Result<StepDiagnostics> {
    let (mut lo, mut hi, mut max_abs) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for &v in incr {
        lo = lo.min(v);
        hi = hi.max(v);
        max_abs = max_abs.max(v.abs());
    }
    Ok(StepDiagnostics {
        t,
        ess: ess_from_log_weights(log_weights)?,
        resampled,
        max_abs_log_incr_weight: max_abs,
        log_incr_spread: if incr.is_empty() { 0.0 } else { hi - lo },
        clamped_twists: clamped,
    })
}

/// Resamples in place when the policy and ESS call for it.
pub(super) fn maybe_resample<P: Clone>(
    cfg: &SamplerConfig,
    weighting: Weighting,
    streams: &StreamFactory,
    step: usize,
    particles: &mut Vec<P>,
    log_weights: &mut [f64],
) -> Result<bool> {
    if weighting != Weighting::Resampled || cfg.ess_threshold <= 0.0 {
        return Ok(false);
    }
    let k = particles.len();
    let ess = ess_from_log_weights(log_weights)?;
    if cfg.ess_threshold < 1.0 && ess >= cfg.ess_threshold * k as f64 {
        return Ok(false);
    }
    let w = normalize_log_weights(log_weights)?;
    let idx = cfg
        .resampling
        .ancestors(&w, k, &mut streams.resampling(step));
    *particles = idx.iter().map(|&i| particles[i].clone()).collect();
    log_weights.fill(0.0);
    Ok(true)
}

pub(super) fn accumulate(weighting: Weighting, log_weights: &mut [f64], incr: &[f64]) {
    if weighting != Weighting::Discarded {
        for (l, d) in log_weights.iter_mut().zip(incr) {
            *l += d;
        }
    }
}

/// Runs the twisted particle loop with an arbitrary twisting function.
///
/// When the twist exposes a linear-Gaussian closed form at the target level,
/// particles are drawn from the exact product of the model transition and
/// the twist instead of the gradient proposal.
pub fn run_twisted(
    problem: &Problem<'_>,
    cfg: &SamplerConfig,
    twist: &dyn TwistFunction,
    weighting: Weighting,
) -> Result<ParticleEnsemble> {
    problem.validate()?;
    cfg.validate(problem.schedule)?;
    let s = problem.schedule;
    let big_t = s.steps();
    let d = problem.model.dim();
    let k = cfg.particles;
    let streams = StreamFactory::new(cfg.seed);
    let exact_final =
        problem.twist.final_step == FinalStepMode::Exact && problem.likelihood.is_masked();
    let stop = cfg.truncate_at.unwrap_or(0);

    // Level T: x^T ~ p(x^T), weighted by the twist.
    let prior_var = s.prior_var();
    let init_prop = twist
        .gaussian_form(big_t)
        .map(|form| OptimalProposal::new(&form, prior_var))
        .transpose()?;
    let zero = DVector::zeros(d);
    let init: Vec<Result<(Particle, f64, bool)>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.particle(big_t, i);
            let z = standard_normal_vec(d, &mut rng);
            let (x, log_r) = match &init_prop {
                Some(p) => {
                    let mean = p.mean(&zero);
                    let x = p.gauss.sample(&mean, &z);
                    let lr = p.gauss.logpdf(&x, &mean);
                    (x, Some(lr))
                }
                None => (z * prior_var.sqrt(), None),
            };
            let log_prior = log_r.map(|_| iso_normal_logpdf(&x, &zero, prior_var));
            let (p, clamped) =
                evaluate(problem, twist, x, big_t).map_err(|e| annotate(e, big_t, i))?;
            let w = match (log_prior, log_r) {
                (Some(lp), Some(lr)) => lp + p.log_twist - lr,
                _ => p.log_twist,
            };
            let w = check_finite(w, big_t, i, "initial log-weight")?;
            Ok((p, w, clamped))
        })
        .collect();
    let mut particles = Vec::with_capacity(k);
    let mut init_w = Vec::with_capacity(k);
    let mut clamped = 0;
    for r in init {
        let (p, w, c) = r?;
        particles.push(p);
        init_w.push(w);
        clamped += c as usize;
    }
    let mut log_weights = vec![0.0; k];
    accumulate(weighting, &mut log_weights, &init_w);
    let mut diagnostics = vec![summarize(big_t, &log_weights, &init_w, false, clamped)?];

    for t in (stop + 1..=big_t).rev() {
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
        let prop_var = cfg.proposal_var.variance(step_var);
        let optimal = if next >= 1 {
            twist
                .gaussian_form(next)
                .map(|form| OptimalProposal::new(&form, prop_var))
                .transpose()?
        } else {
            None
        };
        let moved: Vec<Result<Moved>> = particles
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = streams.particle(next, i);
                if next == 0 && exact_final {
                    let (x0, incr) = exact_final_from_transition(
                        problem.likelihood,
                        &p.model_mean,
                        step_var,
                        p.log_twist,
                        &mut rng,
                    )?;
                    let incr = check_finite(incr, 0, i, "log incremental weight")?;
                    return Ok(Moved {
                        particle: Particle {
                            x_hat: x0.clone(),
                            x: x0,
                            log_twist: 0.0,
                            model_mean: DVector::zeros(0),
                            proposal_mean: DVector::zeros(0),
                        },
                        incr,
                        clamped: false,
                    });
                }
                let z = standard_normal_vec(d, &mut rng);
                let (x, log_r) = match &optimal {
                    Some(o) => {
                        let mean = o.mean(&p.model_mean);
                        let x = o.gauss.sample(&mean, &z);
                        let lr = o.gauss.logpdf(&x, &mean);
                        (x, lr)
                    }
                    None => {
                        let x = &p.proposal_mean + z * prop_var.sqrt();
                        let lr = iso_normal_logpdf(&x, &p.proposal_mean, prop_var);
                        (x, lr)
                    }
                };
                let log_p = iso_normal_logpdf(&x, &p.model_mean, step_var);
                let (particle, clamped) = if next >= 1 {
                    evaluate(problem, twist, x, next).map_err(|e| annotate(e, next, i))?
                } else {
                    let log_twist = twist.evaluate_final(&x).map_err(|e| annotate(e, 0, i))?;
                    (
                        Particle {
                            x_hat: x.clone(),
                            x,
                            log_twist,
                            model_mean: DVector::zeros(0),
                            proposal_mean: DVector::zeros(0),
                        },
                        false,
                    )
                };
                let incr = log_p + particle.log_twist - log_r - p.log_twist;
                let incr = check_finite(incr, next, i, "log incremental weight")?;
                Ok(Moved {
                    particle,
                    incr,
                    clamped,
                })
            })
            .collect();
        let mut incr = Vec::with_capacity(k);
        let mut clamped = 0;
        particles.clear();
        for m in moved {
            let m = m?;
            incr.push(m.incr);
            clamped += m.clamped as usize;
            particles.push(m.particle);
        }
        accumulate(weighting, &mut log_weights, &incr);
        diagnostics.push(summarize(next, &log_weights, &incr, resampled, clamped)?);
    }

    let states = if stop > 0 {
        particles.into_iter().map(|p| p.x_hat).collect()
    } else {
        particles.into_iter().map(|p| p.x).collect()
    };
    Ok(ParticleEnsemble {
        states,
        log_weights,
        t: stop,
        diagnostics,
    })
}
