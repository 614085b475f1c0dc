//! Closed-form data distributions standing in for a trained denoiser.
//!
//! Both targets have Gaussian forward marginals per component, so the
//! marginal score, the posterior mean `E[x^0 | x^t]` and its Jacobian are
//! exact.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Posterior mean estimate and its derivative with respect to the noisy state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub x_hat: DVector<f64>,
    pub jacobian: DMatrix<f64>,
}

/// Full-covariance Gaussian data distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    // cov = Q diag(λ) Qᵀ
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
}

/// Mixture of isotropic Gaussians sharing one variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    iso_var: f64,
}

/// Analytic data distribution `q(x^0)`.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticTarget {
    Gaussian(GaussianTarget),
    Mixture(GaussianMixture),
}

impl AnalyticTarget {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidTarget("dimension must be positive".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::InvalidTarget(format!(
                "covariance must be {d}x{d}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-12 * (1.0 + cov.amax()) {
            return Err(Error::InvalidTarget("covariance is not symmetric".into()));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::InvalidTarget(
                "covariance is not positive definite".into(),
            ));
        }
        let eig = SymmetricEigen::new(cov.clone());
        if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidTarget(
                "covariance is not positive definite".into(),
            ));
        }
        Ok(AnalyticTarget::Gaussian(GaussianTarget {
            mean,
            cov,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
        }))
    }

    pub fn mixture(weights: Vec<f64>, means: Vec<DVector<f64>>, std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(Error::InvalidTarget(format!(
                "need one weight per component ({} weights, {} means)",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidTarget(
                "mixture weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidTarget(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) {
            return Err(Error::InvalidTarget(
                "component means must share a positive dimension".into(),
            ));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::InvalidTarget(format!(
                "component std must be positive, got {std}"
            )));
        }
        Ok(AnalyticTarget::Mixture(GaussianMixture {
            log_weights: weights.iter().map(|w| w.ln()).collect(),
            weights,
            means,
            iso_var: std * std,
        }))
    }

    /// Bivariate Gaussian with mean (1/2, 1/2), unit variances and covariance 0.9.
    pub fn synthetic_gaussian() -> Self {
        Self::gaussian(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]),
        )
        .expect("valid preset")
    }

    /// Three-component mixture with proportions [0.3, 0.5, 0.2] and std 0.2.
    pub fn synthetic_mixture() -> Self {
        Self::mixture(
            vec![0.3, 0.5, 0.2],
            vec![
                DVector::from_vec(vec![1.54, -0.29]),
                DVector::from_vec(vec![-2.18, 0.57]),
                DVector::from_vec(vec![-1.09, -1.40]),
            ],
            0.2,
        )
        .expect("valid preset")
    }

    pub fn dim(&self) -> usize {
        match self {
            AnalyticTarget::Gaussian(g) => g.mean.len(),
            AnalyticTarget::Mixture(m) => m.means[0].len(),
        }
    }

    /// Unconditional mean of `q(x^0)`.
    pub fn mean(&self) -> DVector<f64> {
        match self {
            AnalyticTarget::Gaussian(g) => g.mean.clone(),
            AnalyticTarget::Mixture(m) => m
                .weights
                .iter()
                .zip(&m.means)
                .fold(DVector::zeros(self.dim()), |acc, (w, mu)| acc + mu * *w),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnalyticTarget::Gaussian(_) => "gaussian",
            AnalyticTarget::Mixture(_) => "gmm",
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianTarget> {
        match self {
            AnalyticTarget::Gaussian(g) => Some(g),
            AnalyticTarget::Mixture(_) => None,
        }
    }

    pub fn as_mixture(&self) -> Option<&GaussianMixture> {
        match self {
            AnalyticTarget::Mixture(m) => Some(m),
            AnalyticTarget::Gaussian(_) => None,
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::InvalidTarget(format!(
                "state has dimension {}, target has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `log q(x^t)` for `t >= 1`.
    pub fn marginal_log_density(
        &self,
        s: &NoiseSchedule,
        x: &DVector<f64>,
        t: usize,
    ) -> Result<f64> {
        self.check_dim(x)?;
        let (a, v) = s.forward_marginal_params(t)?;
        Ok(self.convolved_log_density(x, a, v))
    }

    /// `log q(x^0)`.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.convolved_log_density(x, 1.0, 0.0))
    }

    // log density of `a·x^0 + N(0, v·I)` with `x^0 ~ q`.
    fn convolved_log_density(&self, x: &DVector<f64>, a: f64, v: f64) -> f64 {
        match self {
            AnalyticTarget::Gaussian(g) => {
                let z = g.eigvecs.tr_mul(&(x - &g.mean * a));
                let mut quad = 0.0;
                let mut logdet = 0.0;
                for (zi, &l) in z.iter().zip(g.eigvals.iter()) {
                    let var = a * a * l + v;
                    quad += zi * zi / var;
                    logdet += var.ln();
                }
                -0.5 * (quad + logdet + z.len() as f64 * LN_2PI)
            }
            AnalyticTarget::Mixture(m) => {
                let c = a * a * m.iso_var + v;
                let terms: Vec<f64> = m
                    .log_weights
                    .iter()
                    .zip(&m.means)
                    .map(|(lw, mu)| lw + iso_normal_logpdf(x, &(mu * a), c))
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    /// Exact score `∇ log q(x^t)`.
    pub fn marginal_score(
        &self,
        s: &NoiseSchedule,
        x: &DVector<f64>,
        t: usize,
    ) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        let (a, v) = s.forward_marginal_params(t)?;
        Ok(match self {
            AnalyticTarget::Gaussian(g) => {
                let z = g.eigvecs.tr_mul(&(x - &g.mean * a));
                let scaled = DVector::from_iterator(
                    z.len(),
                    z.iter()
                        .zip(g.eigvals.iter())
                        .map(|(zi, &l)| -zi / (a * a * l + v)),
                );
                &g.eigvecs * scaled
            }
            AnalyticTarget::Mixture(m) => {
                let c = a * a * m.iso_var + v;
                let resp = m.responsibilities(x, a, c);
                let mut score = DVector::zeros(x.len());
                for (r, mu) in resp.iter().zip(&m.means) {
                    score.axpy(-r / c, &(x - mu * a), 1.0);
                }
                score
            }
        })
    }

    /// Exact posterior mean `E_q[x^0 | x^t]` and its Jacobian, `t >= 1`.
    pub fn denoiser(
        &self,
        s: &NoiseSchedule,
        x: &DVector<f64>,
        t: usize,
    ) -> Result<DenoiserOutput> {
        self.check_dim(x)?;
        let (a, v) = s.forward_marginal_params(t)?;
        Ok(match self {
            AnalyticTarget::Gaussian(g) => {
                // x̂ = μ + aΣ(a²Σ + vI)⁻¹(x − aμ), diagonal in Σ's eigenbasis.
                let gains = DVector::from_iterator(
                    g.eigvals.len(),
                    g.eigvals.iter().map(|&l| a * l / (a * a * l + v)),
                );
                let z = g.eigvecs.tr_mul(&(x - &g.mean * a));
                let x_hat = &g.mean + &g.eigvecs * z.component_mul(&gains);
                let jacobian = &g.eigvecs * DMatrix::from_diagonal(&gains) * g.eigvecs.transpose();
                DenoiserOutput { x_hat, jacobian }
            }
            AnalyticTarget::Mixture(m) => {
                let d = x.len();
                let c = a * a * m.iso_var + v;
                let gain = a * m.iso_var / c;
                let resp = m.responsibilities(x, a, c);
                let mu_bar = resp
                    .iter()
                    .zip(&m.means)
                    .fold(DVector::zeros(d), |acc, (r, mu)| acc + mu * *r);
                let x_hat = &mu_bar + (x - &mu_bar * a) * gain;
                // J = gain·I + (a·v/c²)·Cov_r(μ)
                let mut cov = DMatrix::zeros(d, d);
                for (r, mu) in resp.iter().zip(&m.means) {
                    let dm = mu - &mu_bar;
                    cov.ger(*r, &dm, &dm, 1.0);
                }
                let jacobian = DMatrix::identity(d, d) * gain + cov * (a * v / (c * c));
                DenoiserOutput { x_hat, jacobian }
            }
        })
    }

    /// Draw `x^0 ~ q`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        match self {
            AnalyticTarget::Gaussian(g) => {
                let root = g.eigvals.map(f64::sqrt);
                &g.mean + &g.eigvecs * z.component_mul(&root)
            }
            AnalyticTarget::Mixture(m) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut j = m.weights.len() - 1;
                for (i, w) in m.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        j = i;
                        break;
                    }
                }
                &m.means[j] + z * m.iso_var.sqrt()
            }
        }
    }
}

impl GaussianTarget {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }
}

impl GaussianMixture {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn iso_var(&self) -> f64 {
        self.iso_var
    }

    // Component responsibilities for x under N(a·μ_j, c·I), via log-sum-exp.
    fn responsibilities(&self, x: &DVector<f64>, a: f64, c: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .log_weights
            .iter()
            .zip(&self.means)
            .map(|(lw, mu)| lw - (x - mu * a).norm_squared() / (2.0 * c))
            .collect();
        softmax(&logits)
    }
}

/// Anything that yields a denoiser output at `(x^t, t)`.
///
/// The samplers and twisting functions evaluate the model only through this
/// trait; the score is recovered from the same evaluation via Tweedie.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn denoise(&self, s: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DenoiserOutput>;
}

impl ScoreModel for AnalyticTarget {
    fn dim(&self) -> usize {
        AnalyticTarget::dim(self)
    }

    fn denoise(&self, s: &NoiseSchedule, x: &DVector<f64>, t: usize) -> Result<DenoiserOutput> {
        self.denoiser(s, x, t)
    }
}

/// `x̂ = x^0` with identity Jacobian, used at the final step.
pub fn denoiser_at_zero(x0: &DVector<f64>) -> DenoiserOutput {
    let d = x0.len();
    DenoiserOutput {
        x_hat: x0.clone(),
        jacobian: DMatrix::identity(d, d),
    }
}

/// Score recovered from a denoiser output through Tweedie's formula.
pub fn tweedie_score(
    s: &NoiseSchedule,
    x: &DVector<f64>,
    t: usize,
    den: &DenoiserOutput,
) -> Result<DVector<f64>> {
    let (a, v) = s.forward_marginal_params(t)?;
    Ok((&den.x_hat * a - x) / v)
}

/// Log density of `N(mean, var·I)` at `x`.
pub fn iso_normal_logpdf(x: &DVector<f64>, mean: &DVector<f64>, var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * (d * (LN_2PI + var.ln()) + (x - mean).norm_squared() / var)
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn standard_gaussian() -> AnalyticTarget {
        AnalyticTarget::gaussian(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn gaussian_score_example() {
        // q(x^10) = N(0, 2I) so the score at (2, 0) is (-1, 0).
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        let score = standard_gaussian()
            .marginal_score(&s, &vec2(2.0, 0.0), 10)
            .unwrap();
        assert!((score - vec2(-1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn score_vanishes_at_mode() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let target = AnalyticTarget::synthetic_gaussian();
        let (a, _) = s.forward_marginal_params(40).unwrap();
        let mode = target.mean() * a;
        assert!(target.marginal_score(&s, &mode, 40).unwrap().norm() < 1e-12);
    }

    #[test]
    fn gaussian_denoiser_example() {
        // τ² = 1, σ̄² = 1: posterior mean is x/2.
        let s = NoiseSchedule::ve_const(10, 0.1).unwrap();
        let out = standard_gaussian()
            .denoiser(&s, &vec2(2.0, 0.0), 10)
            .unwrap();
        assert!((out.x_hat - vec2(1.0, 0.0)).norm() < 1e-12);
        assert!((out.jacobian - DMatrix::identity(2, 2) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn denoiser_tends_to_identity_without_noise() {
        let s = NoiseSchedule::ve_const(3, 1e-14).unwrap();
        let x = vec2(0.7, -1.3);
        for target in [
            AnalyticTarget::synthetic_gaussian(),
            AnalyticTarget::synthetic_mixture(),
        ] {
            let out = target.denoiser(&s, &x, 1).unwrap();
            assert!((out.x_hat - &x).norm() < 1e-9);
        }
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let target = AnalyticTarget::synthetic_mixture();
        let h = 1e-5;
        for (t, x) in [
            (5, vec2(1.4, -0.2)),
            (50, vec2(-1.0, 0.3)),
            (100, vec2(0.2, 0.9)),
        ] {
            let score = target.marginal_score(&s, &x, t).unwrap();
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (target.marginal_log_density(&s, &xp, t).unwrap()
                    - target.marginal_log_density(&s, &xm, t).unwrap())
                    / (2.0 * h);
                assert!(
                    (fd - score[i]).abs() <= 1e-6 * (1.0 + score[i].abs()),
                    "t={t} i={i} fd={fd} score={}",
                    score[i]
                );
            }
        }
    }

    #[test]
    fn mixture_jacobian_matches_finite_differences() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let target = AnalyticTarget::synthetic_mixture();
        let h = 1e-5;
        for (t, x) in [
            (10, vec2(1.2, -0.1)),
            (60, vec2(-0.5, 0.1)),
            (95, vec2(0.4, -0.8)),
        ] {
            let out = target.denoiser(&s, &x, t).unwrap();
            for j in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let col = (target.denoiser(&s, &xp, t).unwrap().x_hat
                    - target.denoiser(&s, &xm, t).unwrap().x_hat)
                    / (2.0 * h);
                for i in 0..2 {
                    let exact = out.jacobian[(i, j)];
                    assert!(
                        (col[i] - exact).abs() <= 1e-5 * (1.0 + exact.abs()),
                        "t={t} ({i},{j}) fd={} exact={exact}",
                        col[i]
                    );
                }
            }
        }
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let mu = vec2(0.3, -0.4);
        let g = AnalyticTarget::gaussian(mu.clone(), DMatrix::identity(2, 2) * 0.25).unwrap();
        let m = AnalyticTarget::mixture(vec![1.0], vec![mu], 0.5).unwrap();
        let x = vec2(0.8, 0.1);
        for t in [1, 30, 100] {
            let dg = g.denoiser(&s, &x, t).unwrap();
            let dm = m.denoiser(&s, &x, t).unwrap();
            assert!((dg.x_hat - dm.x_hat).amax() < 1e-12);
            assert!((dg.jacobian - dm.jacobian).amax() < 1e-12);
            let sg = g.marginal_score(&s, &x, t).unwrap();
            let sm = m.marginal_score(&s, &x, t).unwrap();
            assert!((sg - sm).amax() < 1e-12);
        }
    }

    #[test]
    fn gaussian_translation_equivariance() {
        let s = NoiseSchedule::ve_const(20, 0.05).unwrap();
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]);
        let base = AnalyticTarget::gaussian(vec2(0.5, 0.5), cov.clone()).unwrap();
        let shift = vec2(-1.5, 2.0);
        let moved = AnalyticTarget::gaussian(vec2(0.5, 0.5) + &shift, cov).unwrap();
        let x = vec2(0.2, -0.7);
        let xs = &x + &shift;
        for t in [1, 10, 20] {
            let d0 = base.denoiser(&s, &x, t).unwrap();
            let d1 = moved.denoiser(&s, &xs, t).unwrap();
            assert!((d1.x_hat - (d0.x_hat + &shift)).amax() < 1e-12);
            let s0 = base.marginal_score(&s, &x, t).unwrap();
            let s1 = moved.marginal_score(&s, &xs, t).unwrap();
            assert!((s0 - s1).amax() < 1e-12);
        }
    }

    #[test]
    fn gaussian_jacobian_symmetric() {
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let out = AnalyticTarget::synthetic_gaussian()
            .denoiser(&s, &vec2(0.1, 0.2), 30)
            .unwrap();
        assert!((&out.jacobian - out.jacobian.transpose()).amax() < 1e-15);
    }

    #[test]
    fn denoiser_at_zero_is_identity() {
        let x0 = vec2(0.3, -1.0);
        let out = denoiser_at_zero(&x0);
        assert_eq!(out.x_hat, x0);
        assert_eq!(out.jacobian, DMatrix::identity(2, 2));
    }

    #[test]
    fn rejects_invalid_targets() {
        assert!(AnalyticTarget::gaussian(
            vec2(0.0, 0.0),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])
        )
        .is_err());
        assert!(
            AnalyticTarget::mixture(vec![0.5, 0.4], vec![vec2(0.0, 0.0), vec2(1.0, 1.0)], 0.2)
                .is_err()
        );
        assert!(AnalyticTarget::mixture(vec![1.0], vec![vec2(0.0, 0.0)], 0.0).is_err());
    }
}
