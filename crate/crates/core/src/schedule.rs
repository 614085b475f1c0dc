//! Forward-process noise schedules.
//!
//! States are indexed `x^0 ..= x^T`; `step_var(t)` is the variance of the
//! transition between `x^{t-1}` and `x^t`. All cumulative quantities are
//! computed once at construction.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Diffusion framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    /// Variance exploding with one constant per-step variance.
    VeConst,
    /// Variance exploding with an arbitrary nondecreasing schedule.
    VeGeneral,
    /// Variance preserving.
    Vp,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::VeConst => "ve_const",
            Framework::VeGeneral => "ve_general",
            Framework::Vp => "vp",
        }
    }

    pub fn is_vp(self) -> bool {
        matches!(self, Framework::Vp)
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ve_const" | "ve-const" => Ok(Framework::VeConst),
            "ve_general" | "ve-general" => Ok(Framework::VeGeneral),
            "vp" => Ok(Framework::Vp),
            other => Err(Error::InvalidSchedule(format!(
                "unknown framework `{other}`"
            ))),
        }
    }
}

/// Immutable noise schedule with cached cumulative quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    framework: Framework,
    step_vars: Vec<f64>,
    // VP only; all ones for VE.
    cum_alpha: Vec<f64>,
    cum_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Variance-exploding schedule with `steps` transitions of variance `sigma2`.
    pub fn ve_const(steps: usize, sigma2: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        Self::build(Framework::VeConst, vec![sigma2; steps])
    }

    /// Variance-exploding schedule with per-step variances `step_vars[t-1]`.
    pub fn ve_general(step_vars: Vec<f64>) -> Result<Self> {
        Self::build(Framework::VeGeneral, step_vars)
    }

    /// Variance-preserving schedule with per-step variances `step_vars[t-1]`.
    pub fn vp(step_vars: Vec<f64>) -> Result<Self> {
        Self::build(Framework::Vp, step_vars)
    }

    /// VP schedule with `σ_t² = var_min + (t/T)²·var_max`.
    pub fn quadratic_vp(steps: usize, var_min: f64, var_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        if !(var_min > 0.0 && var_min.is_finite()) {
            return Err(Error::InvalidSchedule(format!(
                "var_min must be positive, got {var_min}"
            )));
        }
        if !(var_max > var_min) {
            return Err(Error::InvalidSchedule(format!(
                "var_max ({var_max}) must exceed var_min ({var_min})"
            )));
        }
        if var_max >= 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "VP requires var_max < 1, got {var_max}"
            )));
        }
        let t_max = steps as f64;
        let step_vars = (1..=steps)
            .map(|t| {
                let frac = t as f64 / t_max;
                var_min + frac * frac * var_max
            })
            .collect();
        Self::build(Framework::Vp, step_vars)
    }

    fn build(framework: Framework, step_vars: Vec<f64>) -> Result<Self> {
        if step_vars.is_empty() {
            return Err(Error::InvalidSchedule("steps must be positive".into()));
        }
        for (i, &v) in step_vars.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSchedule(format!(
                    "step variance at t={} must be positive and finite, got {v}",
                    i + 1
                )));
            }
        }
        if framework != Framework::VeConst && step_vars.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidSchedule(
                "step variances must be nondecreasing".into(),
            ));
        }
        if framework == Framework::VeConst && step_vars.iter().any(|&v| v != step_vars[0]) {
            return Err(Error::InvalidSchedule(
                "ve_const requires a single step variance".into(),
            ));
        }

        let steps = step_vars.len();
        let (cum_alpha, cum_var) = match framework {
            Framework::Vp => {
                if let Some(v) = step_vars.iter().find(|&&v| v >= 1.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "VP step variances must be < 1, got {v}"
                    )));
                }
                let mut cum_alpha = Vec::with_capacity(steps);
                let mut acc = 1.0;
                for &v in &step_vars {
                    acc *= 1.0 - v;
                    cum_alpha.push(acc);
                }
                let cum_var = cum_alpha.iter().map(|a| 1.0 - a).collect();
                (cum_alpha, cum_var)
            }
            Framework::VeConst | Framework::VeGeneral => {
                // A constant schedule uses t·σ² so that VE_GENERAL with equal
                // variances is bit-identical to VE_CONST.
                let constant = step_vars.iter().all(|&v| v == step_vars[0]);
                let cum_var = if constant {
                    (1..=steps).map(|t| t as f64 * step_vars[0]).collect()
                } else {
                    step_vars
                        .iter()
                        .scan(0.0, |acc, &v| {
                            *acc += v;
                            Some(*acc)
                        })
                        .collect()
                };
                (vec![1.0; steps], cum_var)
            }
        };

        Ok(Self {
            framework,
            step_vars,
            cum_alpha,
            cum_var,
        })
    }

    pub fn framework(&self) -> Framework {
        self.framework
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.step_vars.len()
    }

    pub fn step_vars(&self) -> &[f64] {
        &self.step_vars
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(t - 1)
        }
    }

    /// `σ_t²`.
    pub fn step_var(&self, t: usize) -> Result<f64> {
        Ok(self.step_vars[self.index(t)?])
    }

    /// `α_t = 1 − σ_t²` for VP, 1 for VE.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        let v = self.step_var(t)?;
        Ok(if self.framework.is_vp() { 1.0 - v } else { 1.0 })
    }

    /// `ᾱ_t` (VP), 1 for VE.
    pub fn cum_alpha(&self, t: usize) -> Result<f64> {
        Ok(self.cum_alpha[self.index(t)?])
    }

    /// `σ̄_t²`: running sum for VE, `1 − ᾱ_t` for VP.
    pub fn cum_var(&self, t: usize) -> Result<f64> {
        Ok(self.cum_var[self.index(t)?])
    }

    /// Variance of the reference distribution `p(x^T)`.
    pub fn prior_var(&self) -> f64 {
        match self.framework {
            Framework::Vp => 1.0,
            Framework::VeConst | Framework::VeGeneral => self.cum_var[self.steps() - 1],
        }
    }

    /// `(scale, var)` with `q(x^t | x^0) = N(scale·x^0, var·I)`.
    pub fn forward_marginal_params(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.index(t)?;
        Ok(match self.framework {
            Framework::Vp => (self.cum_alpha[i].sqrt(), self.cum_var[i]),
            Framework::VeConst | Framework::VeGeneral => (1.0, self.cum_var[i]),
        })
    }

    /// Mean and isotropic variance of the model transition `x^t -> x^{t-1}`
    /// given the score at `(x_next, t)`, where `x_next` is the state `x^t`.
    pub fn reverse_transition_params(
        &self,
        t: usize,
        x_next: &DVector<f64>,
        score: &DVector<f64>,
    ) -> Result<(DVector<f64>, f64)> {
        let var = self.step_var(t)?;
        let mut mean = x_next + score * var;
        if self.framework.is_vp() {
            mean /= (1.0 - var).sqrt();
        }
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_vp_endpoints() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.step_var(100).unwrap(), 1e-5 + 1e-1);
        assert!((s.step_var(1).unwrap() - (1e-5 + 1e-5)).abs() < 1e-18);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::quadratic_vp(1, 1e-5, 1e-1).unwrap();
        assert!((s.step_var(1).unwrap() - 0.10001).abs() < 1e-15);
        assert!((s.cum_alpha(1).unwrap() - 0.89999).abs() < 1e-15);
    }

    #[test]
    fn cum_alpha_matches_product_loop() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let mut prod = 1.0;
        for t in 1..=100 {
            let v = 1e-5 + (t as f64 / 100.0).powi(2) * 1e-1;
            prod *= 1.0 - v;
        }
        assert!((s.cum_alpha(100).unwrap() - prod).abs() < 1e-14);
        let (scale, var) = s.forward_marginal_params(100).unwrap();
        assert!((var - (1.0 - prod)).abs() < 1e-14);
        assert!((scale - prod.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn cum_alpha_strictly_decreasing() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        for t in 2..=100 {
            assert!(s.cum_alpha(t).unwrap() < s.cum_alpha(t - 1).unwrap());
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::quadratic_vp(0, 1e-5, 1e-1).is_err());
        assert!(NoiseSchedule::quadratic_vp(10, 1e-5, 1.0).is_err());
        assert!(NoiseSchedule::quadratic_vp(10, 1e-1, 1e-2).is_err());
        assert!(NoiseSchedule::quadratic_vp(10, 0.3, 0.8).is_err());
        assert!(NoiseSchedule::ve_const(0, 0.1).is_err());
        assert!(NoiseSchedule::ve_general(vec![0.2, 0.1]).is_err());
        assert!(NoiseSchedule::vp(vec![0.1, -0.1]).is_err());
    }

    #[test]
    fn forward_params_ve_const() {
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        assert_eq!(s.forward_marginal_params(5).unwrap(), (1.0, 0.5));
        assert!(matches!(
            s.forward_marginal_params(0),
            Err(Error::StepOutOfRange { t: 0, max: 10 })
        ));
        assert!(s.forward_marginal_params(11).is_err());
    }

    #[test]
    fn vp_variance_preservation() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        for t in 1..=100 {
            let (scale, var) = s.forward_marginal_params(t).unwrap();
            assert!((scale * scale + var - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn two_step_composition_matches_marginal() {
        // Chaining q(x^{t-1}|x^0) with q(x^t|x^{t-1}) gives the same Gaussian.
        for s in [
            NoiseSchedule::quadratic_vp(50, 1e-4, 0.2).unwrap(),
            NoiseSchedule::ve_general((1..=50).map(|t| 0.01 * t as f64).collect()).unwrap(),
        ] {
            for t in 2..=50 {
                let (a_prev, v_prev) = s.forward_marginal_params(t - 1).unwrap();
                let step = s.step_var(t).unwrap();
                let a_step = if s.framework().is_vp() {
                    (1.0 - step).sqrt()
                } else {
                    1.0
                };
                let (a, v) = s.forward_marginal_params(t).unwrap();
                assert!((a_step * a_prev - a).abs() < 1e-12);
                assert!((a_step * a_step * v_prev + step - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ve_general_constant_is_bit_identical_to_ve_const() {
        let c = NoiseSchedule::ve_const(37, 0.1).unwrap();
        let g = NoiseSchedule::ve_general(vec![0.1; 37]).unwrap();
        for t in 1..=37 {
            assert_eq!(
                c.forward_marginal_params(t).unwrap(),
                g.forward_marginal_params(t).unwrap()
            );
        }
        assert_eq!(c.prior_var().to_bits(), g.prior_var().to_bits());
    }

    #[test]
    fn reverse_transition_examples() {
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let (m, v) = s
            .reverse_transition_params(3, &x, &DVector::zeros(2))
            .unwrap();
        assert_eq!(m, x);
        assert_eq!(v, 0.1);
        let (m, _) = s
            .reverse_transition_params(3, &x, &DVector::from_vec(vec![-1.0, 0.0]))
            .unwrap();
        assert!((m[0] - 0.9).abs() < 1e-15 && m[1] == 0.0);

        let vp = NoiseSchedule::vp(vec![1e-12; 4]).unwrap();
        let score = DVector::from_vec(vec![3.0, -2.0]);
        let (m, _) = vp.reverse_transition_params(2, &x, &score).unwrap();
        assert!((&m - &x).norm() < 1e-10);
    }
}
