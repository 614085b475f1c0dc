//! Likelihoods, tractable twisting functions and their gradients.
//!
//! A twisting function approximates `p(y | x^t)` by evaluating the
//! likelihood at the denoiser output `x̂(x^t)`. Gradients are obtained by the
//! chain rule through the denoiser Jacobian, so every quantity here needs a
//! single denoiser evaluation per state.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_model::{
    denoiser_at_zero, log_sum_exp, softmax, tweedie_score, DenoiserOutput, ScoreModel,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest twist variance; smaller values are clamped and flagged.
pub const TWIST_VARIANCE_FLOOR: f64 = 1e-8;

/// Conditioning information `p(y | x^0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Likelihood {
    /// Laplace observation of the Euclidean norm: `exp(-|‖x‖ - y|) / 2`.
    SmoothNorm { y: f64 },
    /// Exact observation `x_M = y` of the coordinates in `mask`.
    Inpaint { mask: Vec<usize>, y: DVector<f64> },
    /// `x_M = y` for one of several equally likely masks.
    InpaintDof {
        masks: Vec<Vec<usize>>,
        y: DVector<f64>,
    },
}

impl Likelihood {
    pub fn smooth_norm(y: f64) -> Self {
        Likelihood::SmoothNorm { y }
    }

    pub fn inpaint(mask: Vec<usize>, y: Vec<f64>) -> Self {
        Likelihood::Inpaint {
            mask,
            y: DVector::from_vec(y),
        }
    }

    pub fn inpaint_dof(masks: Vec<Vec<usize>>, y: Vec<f64>) -> Self {
        Likelihood::InpaintDof {
            masks,
            y: DVector::from_vec(y),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Likelihood::SmoothNorm { .. } => "smooth_norm",
            Likelihood::Inpaint { .. } => "inpaint",
            Likelihood::InpaintDof { .. } => "inpaint_dof",
        }
    }

    /// Checks mask invariants against the state dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        let check_mask = |mask: &[usize], y_len: usize| -> Result<()> {
            if mask.is_empty() {
                return Err(Error::InvalidLikelihood("mask is empty".into()));
            }
            if mask.len() != y_len {
                return Err(Error::InvalidLikelihood(format!(
                    "mask has {} entries but y has {}",
                    mask.len(),
                    y_len
                )));
            }
            for (i, &m) in mask.iter().enumerate() {
                if m >= dim {
                    return Err(Error::InvalidLikelihood(format!(
                        "mask index {m} out of range for dimension {dim}"
                    )));
                }
                if mask[..i].contains(&m) {
                    return Err(Error::InvalidLikelihood(format!("mask index {m} repeated")));
                }
            }
            Ok(())
        };
        match self {
            Likelihood::SmoothNorm { y } => {
                if !y.is_finite() {
                    return Err(Error::InvalidLikelihood("y must be finite".into()));
                }
                Ok(())
            }
            Likelihood::Inpaint { mask, y } => check_mask(mask, y.len()),
            Likelihood::InpaintDof { masks, y } => {
                if masks.is_empty() {
                    return Err(Error::InvalidLikelihood("mask set is empty".into()));
                }
                masks.iter().try_for_each(|m| check_mask(m, y.len()))
            }
        }
    }

    /// Masks as a slice; a single mask for `Inpaint`, none for `SmoothNorm`.
    pub fn masks(&self) -> Vec<&[usize]> {
        match self {
            Likelihood::SmoothNorm { .. } => Vec::new(),
            Likelihood::Inpaint { mask, .. } => vec![mask.as_slice()],
            Likelihood::InpaintDof { masks, .. } => masks.iter().map(Vec::as_slice).collect(),
        }
    }

    pub fn observation(&self) -> Option<&DVector<f64>> {
        match self {
            Likelihood::SmoothNorm { .. } => None,
            Likelihood::Inpaint { y, .. } | Likelihood::InpaintDof { y, .. } => Some(y),
        }
    }

    pub fn is_masked(&self) -> bool {
        !matches!(self, Likelihood::SmoothNorm { .. })
    }

    /// `log p(y | x^0)` for the smooth likelihood.
    pub fn smooth_log_likelihood(&self, x0: &DVector<f64>) -> Option<f64> {
        match self {
            Likelihood::SmoothNorm { y } => Some(-(x0.norm() - y).abs() - std::f64::consts::LN_2),
            _ => None,
        }
    }
}

/// Selects the variance of the Gaussian twist for masked likelihoods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceScheme {
    /// `σ̃²τ²/(σ̃² + τ²)` with `σ̃² = (1 - ᾱ_t)/ᾱ_t`.
    TdsScaling { data_var: f64 },
    /// `2‖x̂_M - y‖·σ_t²`.
    Dps,
    /// `σ_t² / √ᾱ_t`.
    Pigdm,
    /// `Var[x^t | x^0]`: `σ̄_t²` for VE, `1 - ᾱ_t` for VP.
    ForwardVar,
}

impl VarianceScheme {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceScheme::TdsScaling { .. } => "tds_scaling",
            VarianceScheme::Dps => "dps",
            VarianceScheme::Pigdm => "pigdm",
            VarianceScheme::ForwardVar => "forward_var",
        }
    }
}

/// Final-step handling for masked likelihoods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalStepMode {
    /// Gaussian final twist with variance `σ_1²`.
    Heuristic,
    /// Observed coordinates are set to `y` exactly.
    Exact,
}

impl FinalStepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FinalStepMode::Heuristic => "heuristic",
            FinalStepMode::Exact => "exact",
        }
    }
}

impl fmt::Display for FinalStepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FinalStepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(FinalStepMode::Heuristic),
            "exact" => Ok(FinalStepMode::Exact),
            other => Err(Error::InvalidConfig(format!(
                "unknown final step mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistConfig {
    /// Exponent `γ` applied to every twisting function, including at `t = 0`.
    pub twist_scale: f64,
    pub variance_scheme: VarianceScheme,
    pub final_step: FinalStepMode,
}

impl Default for TwistConfig {
    fn default() -> Self {
        Self {
            twist_scale: 1.0,
            variance_scheme: VarianceScheme::ForwardVar,
            final_step: FinalStepMode::Exact,
        }
    }
}

impl TwistConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        // γ = 0 is accepted and means "no conditioning".
        if !(self.twist_scale >= 0.0 && self.twist_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "twist_scale must be non-negative, got {}",
                self.twist_scale
            )));
        }
        match self.variance_scheme {
            VarianceScheme::TdsScaling { data_var } if !(data_var > 0.0) => {
                Err(Error::InvalidConfig(format!(
                    "tds_scaling needs a positive data variance, got {data_var}"
                )))
            }
            VarianceScheme::TdsScaling { .. } | VarianceScheme::Dps | VarianceScheme::Pigdm
                if !s.framework().is_vp() =>
            {
                Err(Error::Unsupported(format!(
                    "variance scheme {} requires a VP schedule",
                    self.variance_scheme.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// A twist variance, flagged when it hit [`TWIST_VARIANCE_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistVariance {
    pub value: f64,
    pub clamped: bool,
}

/// Variance `γ̃_t` of the Gaussian inpainting twist at step `t >= 1`.
///
/// `x_hat_m` is the denoiser output restricted to the mask.
pub fn twist_variance(
    cfg: &TwistConfig,
    s: &NoiseSchedule,
    t: usize,
    x_hat_m: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<TwistVariance> {
    let value = match cfg.variance_scheme {
        VarianceScheme::ForwardVar => s.forward_marginal_params(t)?.1,
        VarianceScheme::TdsScaling { data_var } => {
            let ab = s.cum_alpha(t)?;
            let sig = (1.0 - ab) / ab;
            sig * data_var / (sig + data_var)
        }
        VarianceScheme::Dps => 2.0 * (x_hat_m - y).norm() * s.step_var(t)?,
        VarianceScheme::Pigdm => s.step_var(t)? / s.cum_alpha(t)?.sqrt(),
    };
    Ok(if value < TWIST_VARIANCE_FLOOR {
        TwistVariance {
            value: TWIST_VARIANCE_FLOOR,
            clamped: true,
        }
    } else {
        TwistVariance {
            value,
            clamped: false,
        }
    })
}

/// Value of a log twist together with its gradient with respect to `x̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistTerms {
    pub log: f64,
    pub grad_x_hat: DVector<f64>,
    pub clamped: bool,
}

fn gather(x: &DVector<f64>, mask: &[usize]) -> DVector<f64> {
    DVector::from_iterator(mask.len(), mask.iter().map(|&i| x[i]))
}

// log N(y; μ, v·I) and its gradient in μ, with v possibly depending on μ.
fn gaussian_terms(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    v: f64,
    dv_dmu: Option<DVector<f64>>,
) -> (f64, DVector<f64>) {
    let m = y.len() as f64;
    let resid = y - mu;
    let r2 = resid.norm_squared();
    let log = -0.5 * (m * (LN_2PI + v.ln()) + r2 / v);
    let mut grad = &resid / v;
    if let Some(dv) = dv_dmu {
        grad += dv * (-0.5 * m / v + 0.5 * r2 / (v * v));
    }
    (log, grad)
}

/// Twist terms as a function of the denoiser output `x̂` at step `t`.
///
/// At `t = 0` the denoiser is the identity and masked likelihoods use the
/// heuristic Gaussian final twist with variance `σ_1²`.
pub fn twist_terms(
    lik: &Likelihood,
    cfg: &TwistConfig,
    s: &NoiseSchedule,
    t: usize,
    x_hat: &DVector<f64>,
) -> Result<TwistTerms> {
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("denoiser output at step {t}")));
    }
    let gamma = cfg.twist_scale;
    let d = x_hat.len();
    let (log, grad, clamped) = match lik {
        Likelihood::SmoothNorm { y } => {
            let norm = x_hat.norm();
            let resid = norm - y;
            let log = -resid.abs() - std::f64::consts::LN_2;
            let grad = if norm > 0.0 && resid != 0.0 {
                x_hat * (-resid.signum() / norm)
            } else {
                DVector::zeros(d)
            };
            (log, grad, false)
        }
        Likelihood::Inpaint { .. } | Likelihood::InpaintDof { .. } => {
            let y = lik.observation().expect("masked likelihood");
            let masks = lik.masks();
            let mut logs = Vec::with_capacity(masks.len());
            let mut grads = Vec::with_capacity(masks.len());
            let mut clamped = false;
            for mask in &masks {
                let mu = gather(x_hat, mask);
                let (v, dv) = if t == 0 {
                    (s.step_var(1)?, None)
                } else {
                    let tv = twist_variance(cfg, s, t, &mu, y)?;
                    clamped |= tv.clamped;
                    let dv = match cfg.variance_scheme {
                        VarianceScheme::Dps if !tv.clamped => {
                            let r = (&mu - y).norm();
                            Some((&mu - y) * (2.0 * s.step_var(t)? / r))
                        }
                        _ => None,
                    };
                    (tv.value, dv)
                };
                let (l, g_m) = gaussian_terms(y, &mu, v, dv);
                let mut g = DVector::zeros(d);
                for (k, &i) in mask.iter().enumerate() {
                    g[i] += g_m[k];
                }
                logs.push(l);
                grads.push(g);
            }
            if logs.len() == 1 {
                (logs[0], grads.pop().expect("one mask"), clamped)
            } else {
                let log = log_sum_exp(&logs) - (logs.len() as f64).ln();
                let resp = softmax(&logs);
                let grad = resp
                    .iter()
                    .zip(&grads)
                    .fold(DVector::zeros(d), |acc, (r, g)| acc + g * *r);
                (log, grad, clamped)
            }
        }
    };
    let terms = TwistTerms {
        log: gamma * log,
        grad_x_hat: grad * gamma,
        clamped,
    };
    if !terms.log.is_finite() && terms.log != f64::NEG_INFINITY {
        return Err(Error::NonFinite(format!("log twist at step {t}")));
    }
    Ok(terms)
}

/// `log p̃(y | x^t)` from a denoiser output computed at `(x^t, t)`.
pub fn twist_log(
    lik: &Likelihood,
    cfg: &TwistConfig,
    den: &DenoiserOutput,
    s: &NoiseSchedule,
    t: usize,
) -> Result<f64> {
    Ok(twist_terms(lik, cfg, s, t, &den.x_hat)?.log)
}

/// Gradient of the log twist with respect to `x^t`, `t >= 1`.
pub fn twist_grad(
    lik: &Likelihood,
    cfg: &TwistConfig,
    model: &dyn ScoreModel,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    s.step_var(t)?;
    let den = model.denoise(s, x, t)?;
    let terms = twist_terms(lik, cfg, s, t, &den.x_hat)?;
    Ok(den.jacobian.tr_mul(&terms.grad_x_hat))
}

/// Score, twist value and twist gradient at one state from one denoiser call.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistedScore {
    pub score: DVector<f64>,
    pub log_twist: f64,
    pub twist_grad: DVector<f64>,
    pub clamped: bool,
}

impl TwistedScore {
    pub fn conditional_score(&self) -> DVector<f64> {
        &self.score + &self.twist_grad
    }
}

pub fn evaluate_twisted_score(
    lik: &Likelihood,
    cfg: &TwistConfig,
    model: &dyn ScoreModel,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
) -> Result<TwistedScore> {
    let den = model.denoise(s, x, t)?;
    let score = tweedie_score(s, x, t, &den)?;
    let terms = twist_terms(lik, cfg, s, t, &den.x_hat)?;
    Ok(TwistedScore {
        score,
        log_twist: terms.log,
        twist_grad: den.jacobian.tr_mul(&terms.grad_x_hat),
        clamped: terms.clamped,
    })
}

/// Approximate conditional score `∇log q(x^t) + ∇log p̃(y | x^t)`.
pub fn conditional_score(
    model: &dyn ScoreModel,
    lik: &Likelihood,
    cfg: &TwistConfig,
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    Ok(evaluate_twisted_score(lik, cfg, model, s, x, t)?.conditional_score())
}

/// Final twist `log p̃(y | x^0)`.
pub fn final_twist_log(
    lik: &Likelihood,
    cfg: &TwistConfig,
    s: &NoiseSchedule,
    x0: &DVector<f64>,
) -> Result<f64> {
    twist_log(lik, cfg, &denoiser_at_zero(x0), s, 0)
}

/// Draws `x^0` with observed coordinates pinned to `y` and the rest from the
/// unconditional model transition out of `x^1`.
///
/// Returns the state and the log-weight increment
/// `log p_θ(x^0_M = y | x^1) − log p̃(y | x^1)`, where `log_twist_prev` is the
/// cached twist at `x^1`. For mask sets the mask is drawn with probability
/// proportional to `p_θ(x^0_M = y | x^1)` and the density is averaged over
/// masks.
pub fn exact_final_proposal<R: Rng + ?Sized>(
    lik: &Likelihood,
    model: &dyn ScoreModel,
    s: &NoiseSchedule,
    x1: &DVector<f64>,
    log_twist_prev: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let den = model.denoise(s, x1, 1)?;
    let score = tweedie_score(s, x1, 1, &den)?;
    let (mean, var) = s.reverse_transition_params(1, x1, &score)?;
    exact_final_from_transition(lik, &mean, var, log_twist_prev, rng)
}

/// [`exact_final_proposal`] given the model transition `N(mean, var·I)`.
pub fn exact_final_from_transition<R: Rng + ?Sized>(
    lik: &Likelihood,
    mean: &DVector<f64>,
    var: f64,
    log_twist_prev: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, f64)> {
    let y = lik.observation().ok_or_else(|| {
        Error::Unsupported("exact final step requires an inpainting likelihood".into())
    })?;
    let masks = lik.masks();
    let log_obs: Vec<f64> = masks
        .iter()
        .map(|mask| {
            let mu = gather(mean, mask);
            -0.5 * (mask.len() as f64 * (LN_2PI + var.ln()) + (y - mu).norm_squared() / var)
        })
        .collect();
    let chosen = if masks.len() == 1 {
        0
    } else {
        let probs = softmax(&log_obs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    let sd = var.sqrt();
    let mut x0 = DVector::from_iterator(
        mean.len(),
        mean.iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal)),
    );
    for (k, &i) in masks[chosen].iter().enumerate() {
        x0[i] = y[k];
    }
    let log_density = log_sum_exp(&log_obs) - (log_obs.len() as f64).ln();
    Ok((x0, log_density - log_twist_prev))
}

/// A twist of the form `log N(y; B·x + c, C)`, which admits closed-form
/// optimal proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTwistForm {
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Evaluation of a twisting function at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct TwistEval {
    pub log: f64,
    pub grad: DVector<f64>,
    pub clamped: bool,
}

/// A sequence of twisting functions `p̃(y | x^t)` used by the samplers.
pub trait TwistFunction: Sync {
    /// Twist at step `t >= 1` given the model's denoiser output there.
    fn evaluate(&self, x: &DVector<f64>, t: usize, den: &DenoiserOutput) -> Result<TwistEval>;

    /// Twist at `t = 0`.
    fn evaluate_final(&self, x0: &DVector<f64>) -> Result<f64>;

    /// Closed form, when the twist is Gaussian in a linear function of `x^t`.
    fn gaussian_form(&self, _t: usize) -> Option<GaussianTwistForm> {
        None
    }
}

/// `p̃(y | x^t) = p(y; x̂(x^t))^γ`, the tractable twist.
#[derive(Debug, Clone)]
pub struct DenoiserTwist<'a> {
    pub likelihood: &'a Likelihood,
    pub config: &'a TwistConfig,
    pub schedule: &'a NoiseSchedule,
}

impl TwistFunction for DenoiserTwist<'_> {
    fn evaluate(&self, _x: &DVector<f64>, t: usize, den: &DenoiserOutput) -> Result<TwistEval> {
        let terms = twist_terms(self.likelihood, self.config, self.schedule, t, &den.x_hat)?;
        Ok(TwistEval {
            log: terms.log,
            grad: den.jacobian.tr_mul(&terms.grad_x_hat),
            clamped: terms.clamped,
        })
    }

    fn evaluate_final(&self, x0: &DVector<f64>) -> Result<f64> {
        final_twist_log(self.likelihood, self.config, self.schedule, x0)
    }
}

/// Constant twist for `t >= 1` and the likelihood at `t = 0`: plain
/// importance sampling with the unconditional model as proposal.
#[derive(Debug, Clone)]
pub struct UntwistedLikelihood<'a> {
    pub likelihood: &'a Likelihood,
    pub config: &'a TwistConfig,
    pub schedule: &'a NoiseSchedule,
}

impl TwistFunction for UntwistedLikelihood<'_> {
    fn evaluate(&self, x: &DVector<f64>, _t: usize, _den: &DenoiserOutput) -> Result<TwistEval> {
        Ok(TwistEval {
            log: 0.0,
            grad: DVector::zeros(x.len()),
            clamped: false,
        })
    }

    fn evaluate_final(&self, x0: &DVector<f64>) -> Result<f64> {
        final_twist_log(self.likelihood, self.config, self.schedule, x0)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::score_model::AnalyticTarget;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn vp() -> NoiseSchedule {
        NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap()
    }

    fn den_at(x_hat: DVector<f64>) -> DenoiserOutput {
        denoiser_at_zero(&x_hat)
    }

    struct Counting<'a> {
        inner: &'a AnalyticTarget,
        calls: AtomicUsize,
    }

    impl ScoreModel for Counting<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }

        fn denoise(&self, s: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DenoiserOutput> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.denoiser(s, x, t)
        }
    }

    #[test]
    fn inpaint_log_twist_example() {
        // Unit twist variance: the quadratic VE schedule has σ̄² = 1 at t = 10.
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        let lik = Likelihood::inpaint(vec![0], vec![0.0]);
        let cfg = TwistConfig::default();
        let got = twist_log(&lik, &cfg, &den_at(vec2(0.3, 7.0)), &s, 10).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.045;
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn single_mask_dof_equals_inpaint() {
        let s = vp();
        let cfg = TwistConfig::default();
        let a = Likelihood::inpaint(vec![1], vec![0.4]);
        let b = Likelihood::inpaint_dof(vec![vec![1]], vec![0.4]);
        let den = den_at(vec2(-0.2, 1.1));
        for t in [1, 50, 100] {
            assert_eq!(
                twist_log(&a, &cfg, &den, &s, t).unwrap(),
                twist_log(&b, &cfg, &den, &s, t).unwrap()
            );
        }
    }

    #[test]
    fn smooth_norm_zero_residual() {
        let s = vp();
        let lik = Likelihood::smooth_norm(5.0);
        let cfg = TwistConfig::default();
        let got = twist_log(&lik, &cfg, &den_at(vec2(3.0, 4.0)), &s, 7).unwrap();
        assert!((got - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn final_smooth_twist_is_exact_likelihood() {
        let s = vp();
        let lik = Likelihood::smooth_norm(0.0);
        let cfg = TwistConfig::default();
        let x0 = vec2(0.3, -0.4);
        assert_eq!(
            final_twist_log(&lik, &cfg, &s, &x0).unwrap(),
            lik.smooth_log_likelihood(&x0).unwrap()
        );
    }

    #[test]
    fn twist_variance_examples() {
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        let y = DVector::from_vec(vec![0.0]);
        let xm = DVector::from_vec(vec![0.3]);
        let fwd = twist_variance(&TwistConfig::default(), &s, 5, &xm, &y).unwrap();
        assert_eq!(fwd.value, 0.5);
        assert!(!fwd.clamped);

        // σ̃_t² = τ² = 0.12 gives the harmonic combination 0.06.
        let ab = 1.0 / 1.12;
        let one = NoiseSchedule::vp(vec![1.0 - ab]).unwrap();
        let cfg = TwistConfig {
            variance_scheme: VarianceScheme::TdsScaling { data_var: 0.12 },
            ..TwistConfig::default()
        };
        let v = twist_variance(&cfg, &one, 1, &xm, &y).unwrap();
        assert!((v.value - 0.06).abs() < 1e-15);

        let tiny = NoiseSchedule::vp(vec![1e-12]).unwrap();
        let cfg = TwistConfig {
            variance_scheme: VarianceScheme::Pigdm,
            ..TwistConfig::default()
        };
        let v = twist_variance(&cfg, &tiny, 1, &xm, &y).unwrap();
        assert!(v.clamped);

        let unit = NoiseSchedule::vp(vec![0.01]).unwrap();
        let v = twist_variance(&cfg, &unit, 1, &xm, &y).unwrap();
        assert!((v.value - 0.01 / 0.99f64.sqrt()).abs() < 1e-16);
    }

    #[test]
    fn dps_variance_is_clamped_at_zero_residual() {
        let s = vp();
        let cfg = TwistConfig {
            variance_scheme: VarianceScheme::Dps,
            ..TwistConfig::default()
        };
        let y = DVector::from_vec(vec![0.25]);
        let v = twist_variance(&cfg, &s, 40, &y.clone(), &y).unwrap();
        assert_eq!(v.value, TWIST_VARIANCE_FLOOR);
        assert!(v.clamped);
        let lik = Likelihood::inpaint(vec![0], vec![0.25]);
        let terms = twist_terms(&lik, &cfg, &s, 40, &vec2(0.25, 0.0)).unwrap();
        assert!(terms.clamped);
        assert!(terms.log.is_finite());
    }

    #[test]
    fn scheme_framework_checks() {
        let ve = NoiseSchedule::ve_const(10, 0.1).unwrap();
        for scheme in [
            VarianceScheme::Dps,
            VarianceScheme::Pigdm,
            VarianceScheme::TdsScaling { data_var: 0.12 },
        ] {
            let cfg = TwistConfig {
                variance_scheme: scheme,
                ..TwistConfig::default()
            };
            assert!(cfg.validate(&ve).is_err());
            assert!(cfg.validate(&vp()).is_ok());
        }
        let bad = TwistConfig {
            twist_scale: -1.0,
            ..TwistConfig::default()
        };
        assert!(bad.validate(&ve).is_err());
    }

    #[test]
    fn constant_twist_has_zero_gradient() {
        let s = vp();
        let lik = Likelihood::inpaint(vec![0], vec![0.0]);
        let cfg = TwistConfig {
            twist_scale: 0.0,
            ..TwistConfig::default()
        };
        let target = AnalyticTarget::synthetic_gaussian();
        let g = twist_grad(&lik, &cfg, &target, &s, &vec2(0.4, -1.0), 30).unwrap();
        assert_eq!(g, DVector::zeros(2));
    }

    fn fd_check(
        lik: &Likelihood,
        cfg: &TwistConfig,
        target: &AnalyticTarget,
        x: &DVector<f64>,
        t: usize,
    ) {
        let s = vp();
        let h = 1e-5;
        let g = twist_grad(lik, cfg, target, &s, x, t).unwrap();
        let f = |x: &DVector<f64>| {
            twist_log(lik, cfg, &target.denoiser(&s, x, t).unwrap(), &s, t).unwrap()
        };
        for i in 0..x.len() {
            // Five-point stencil: near t = 0 the twist is sharply curved and
            // the two-point difference has visible truncation error.
            let at = |k: f64| {
                let mut xp = x.clone();
                xp[i] += k * h;
                f(&xp)
            };
            let fd = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
            assert!(
                (fd - g[i]).abs() <= 1e-5 * (1.0 + g[i].abs()),
                "{} t={t} i={i}: fd={fd} exact={}",
                lik.kind(),
                g[i]
            );
        }
    }

    #[test]
    fn twist_gradients_match_finite_differences() {
        let x = vec2(0.7, -0.3);
        for target in [
            AnalyticTarget::synthetic_gaussian(),
            AnalyticTarget::synthetic_mixture(),
        ] {
            for scheme in [
                VarianceScheme::ForwardVar,
                VarianceScheme::Dps,
                VarianceScheme::Pigdm,
                VarianceScheme::TdsScaling { data_var: 0.12 },
            ] {
                let cfg = TwistConfig {
                    variance_scheme: scheme,
                    twist_scale: 1.5,
                    ..TwistConfig::default()
                };
                for t in [5, 40, 90] {
                    fd_check(
                        &Likelihood::inpaint(vec![0], vec![0.0]),
                        &cfg,
                        &target,
                        &x,
                        t,
                    );
                    fd_check(
                        &Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![0.2]),
                        &cfg,
                        &target,
                        &x,
                        t,
                    );
                    fd_check(&Likelihood::smooth_norm(0.5), &cfg, &target, &x, t);
                }
            }
        }
    }

    #[test]
    fn duplicated_masks_match_single_mask_gradient() {
        let s = vp();
        let cfg = TwistConfig::default();
        let target = AnalyticTarget::synthetic_mixture();
        let x = vec2(-0.4, 0.9);
        let single = Likelihood::inpaint(vec![1], vec![0.3]);
        let dup = Likelihood::inpaint_dof(vec![vec![1], vec![1], vec![1]], vec![0.3]);
        for t in [3, 60] {
            let a = twist_grad(&single, &cfg, &target, &s, &x, t).unwrap();
            let b = twist_grad(&dup, &cfg, &target, &s, &x, t).unwrap();
            assert!((&a - &b).amax() <= 1e-12 * (1.0 + a.amax()), "{a} vs {b}");
        }
    }

    #[test]
    fn dof_twist_log_sum_exp_bounds() {
        let s = vp();
        let cfg = TwistConfig::default();
        let masks = vec![vec![0], vec![1]];
        let lik = Likelihood::inpaint_dof(masks.clone(), vec![0.1]);
        let den = den_at(vec2(1.3, -0.6));
        for t in [1, 20, 100] {
            let dof = twist_log(&lik, &cfg, &den, &s, t).unwrap();
            let best = masks
                .iter()
                .map(|m| {
                    twist_log(
                        &Likelihood::inpaint(m.clone(), vec![0.1]),
                        &cfg,
                        &den,
                        &s,
                        t,
                    )
                    .unwrap()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(dof >= best - 2f64.ln() - 1e-12);
            assert!(dof <= best + 1e-12);
        }
    }

    #[test]
    fn dof_twist_shares_one_denoiser_call() {
        let s = vp();
        let target = AnalyticTarget::synthetic_gaussian();
        let counting = Counting {
            inner: &target,
            calls: AtomicUsize::new(0),
        };
        let masks: Vec<Vec<usize>> = (0..64).map(|i| vec![i % 2]).collect();
        let lik = Likelihood::inpaint_dof(masks, vec![0.0]);
        evaluate_twisted_score(
            &lik,
            &TwistConfig::default(),
            &counting,
            &s,
            &vec2(0.1, 0.2),
            12,
        )
        .unwrap();
        assert_eq!(counting.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn conditional_score_is_additive_and_linear_in_scale() {
        let s = vp();
        let target = AnalyticTarget::synthetic_gaussian();
        let lik = Likelihood::inpaint(vec![0], vec![0.0]);
        let x = vec2(0.5, -0.2);
        let t = 25;
        let score = target.marginal_score(&s, &x, t).unwrap();

        let zero = TwistConfig {
            twist_scale: 0.0,
            ..TwistConfig::default()
        };
        let c0 = conditional_score(&target, &lik, &zero, &s, &x, t).unwrap();
        assert!((&c0 - &score).amax() < 1e-12);

        let one = TwistConfig::default();
        let two = TwistConfig {
            twist_scale: 2.0,
            ..TwistConfig::default()
        };
        let c1 = conditional_score(&target, &lik, &one, &s, &x, t).unwrap();
        let c2 = conditional_score(&target, &lik, &two, &s, &x, t).unwrap();
        assert!(((&c2 - &score) - (&c1 - &score) * 2.0).amax() < 1e-12);
    }

    #[test]
    fn conditional_score_matches_linear_gaussian_closed_form() {
        // For the Gaussian target x̂ = μ + J(x − aμ) is affine, so
        // log N(y; x̂_0, v) is quadratic in x with gradient J₀ᵀ(y − x̂_0)/v.
        let s = vp();
        let target = AnalyticTarget::synthetic_gaussian();
        let g = target.as_gaussian().unwrap();
        let lik = Likelihood::inpaint(vec![0], vec![0.0]);
        let cfg = TwistConfig::default();
        let x = vec2(-0.3, 0.8);
        let t = 35;
        let (a, v) = s.forward_marginal_params(t).unwrap();
        let cov_t = g.cov() * (a * a) + DMatrix::identity(2, 2) * v;
        let prec = cov_t.clone().try_inverse().unwrap();
        let centred = &x - g.mean() * a;
        let score = -(&prec * &centred);
        let jac = g.cov() * a * &prec;
        let x_hat = g.mean() + &jac * &centred;
        let twist_grad = jac.row(0).transpose() * ((0.0 - x_hat[0]) / v);
        let expected = score + twist_grad;
        let got = conditional_score(&target, &lik, &cfg, &s, &x, t).unwrap();
        assert!((got - expected).amax() < 1e-12);
    }

    #[test]
    fn exact_final_pins_observed_coordinates() {
        let s = vp();
        let target = AnalyticTarget::synthetic_gaussian();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lik = Likelihood::inpaint(vec![1], vec![0.123456789]);
        for _ in 0..20 {
            let (x0, _) =
                exact_final_proposal(&lik, &target, &s, &vec2(0.2, 0.3), -1.0, &mut rng).unwrap();
            assert_eq!(x0[1].to_bits(), 0.123456789f64.to_bits());
        }
        let full = Likelihood::inpaint(vec![0, 1], vec![0.5, -0.25]);
        let (x0, _) =
            exact_final_proposal(&full, &target, &s, &vec2(0.2, 0.3), 0.0, &mut rng).unwrap();
        assert_eq!(x0, vec2(0.5, -0.25));

        let smooth = Likelihood::smooth_norm(0.0);
        assert!(matches!(
            exact_final_proposal(&smooth, &target, &s, &vec2(0.2, 0.3), 0.0, &mut rng),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn exact_final_dof_mask_frequencies() {
        // Model transition centred at (0, 2): mask {0} is far more likely
        // for y = 0 than mask {1}.
        let mean = vec2(0.0, 0.05);
        let var = 0.01;
        let lik = Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let mut first = 0usize;
        for _ in 0..n {
            let (x0, _) = exact_final_from_transition(&lik, &mean, var, 0.0, &mut rng).unwrap();
            if x0[0] == 0.0 {
                first += 1;
            }
        }
        // Responsibilities ∝ N(0; 0, var) and N(0; 0.05, var).
        let l0 = 0.0f64;
        let l1 = -0.05f64 * 0.05 / (2.0 * var);
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        let freq = first as f64 / n as f64;
        let se = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((freq - p0).abs() < 4.0 * se, "freq {freq} expected {p0}");
    }
}
