//! SO(3) geometry for manifold-valued particles.
//!
//! Tangent vectors are axis-angle coordinates, so `‖v‖` is the geodesic
//! distance under the metric `⟨A, B⟩ = tr(AᵀB)/2`. Densities are taken with
//! respect to the Riemannian volume, under which `Vol(SO(3)) = 8π²` and the
//! volume element in exponential coordinates is `2(1 − cos θ)/θ² dv`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const SMALL_ANGLE: f64 = 1e-8;
const REORTHO_TOL: f64 = 1e-12;
/// Largest geodesic distance accepted by [`log_so3`].
pub const MAX_LOG_ANGLE: f64 = PI - 1e-6;

/// A rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts `m` when `‖mᵀm − I‖ ≤ 1e-9` and `|det m − 1| ≤ 1e-9`.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if orthonormality_residual(&m) > 1e-9 || (m.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("matrix is not a rotation".into()));
        }
        Ok(Rotation(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        angle_of(&self.0)
    }

    /// Haar-uniform rotation from a uniformly distributed unit quaternion.
    pub fn random_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        Rotation(
            *UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .matrix(),
        )
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }
}

/// Axis-angle coordinates of a tangent vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector(pub Vector3<f64>);

impl TangentVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        TangentVector(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        TangentVector(Vector3::zeros())
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// `‖mᵀm − I‖_max`.
pub fn orthonormality_residual(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_antisym(m: &Matrix3<f64>) -> Vector3<f64> {
    // vee(m − mᵀ)
    Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
}

fn angle_of(m: &Matrix3<f64>) -> f64 {
    let c = 0.5 * (m.trace() - 1.0);
    let s = 0.5 * vee_antisym(m).norm();
    s.atan2(c)
}

/// Rodrigues' formula, with a second-order series below `1e-8`.
pub fn rodrigues(v: &TangentVector) -> Matrix3<f64> {
    let theta = v.norm();
    let k = hat(&v.0);
    if theta < SMALL_ANGLE {
        Matrix3::identity() + k + k * k * 0.5
    } else {
        Matrix3::identity()
            + k * (theta.sin() / theta)
            + k * k * ((1.0 - theta.cos()) / (theta * theta))
    }
}

/// Nearest rotation in Frobenius norm, via the SVD.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        r = u * flip * vt;
    }
    r
}

fn reorthonormalize(m: Matrix3<f64>) -> Matrix3<f64> {
    if orthonormality_residual(&m) > REORTHO_TOL {
        project_to_so3(&m)
    } else {
        m
    }
}

/// `base · exp(v)`, re-projected onto SO(3) when roundoff has accumulated.
pub fn exp_so3(base: &Rotation, v: &TangentVector) -> Rotation {
    Rotation(reorthonormalize(base.0 * rodrigues(v)))
}

/// Tangent vector at `base` pointing to `target`.
///
/// Fails when the geodesic distance exceeds [`MAX_LOG_ANGLE`], where the
/// logarithm stops being unique.
pub fn log_so3(base: &Rotation, target: &Rotation) -> Result<TangentVector> {
    let r = base.0.transpose() * target.0;
    let theta = angle_of(&r);
    if theta > MAX_LOG_ANGLE {
        return Err(Error::Domain(format!(
            "rotations are {theta} apart; the logarithm needs a distance below π − 1e-6"
        )));
    }
    let w = vee_antisym(&r);
    let scale = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(TangentVector(w * scale))
}

/// `log |det ∂exp⁻¹/∂y|` at geodesic distance `theta`: `−log(2(1 − cos θ)/θ²)`.
pub fn log_inverse_exp_jacobian(theta: f64) -> f64 {
    let half = 0.5 * theta;
    if half < SMALL_ANGLE {
        theta * theta / 12.0
    } else {
        -2.0 * (half.sin() / half).ln()
    }
}

fn flat_logpdf(v: &Vector3<f64>, mu: &Vector3<f64>, var: f64) -> f64 {
    -0.5 * (3.0 * (LN_2PI + var.ln()) + (v - mu).norm_squared() / var)
}

/// Log density of `exp_center(N(mu, var·I))` at `point` with respect to the
/// Riemannian volume.
pub fn tangent_normal_logpdf(
    center: &Rotation,
    point: &Rotation,
    mu: &TangentVector,
    var: f64,
) -> Result<f64> {
    let v = log_so3(center, point)?;
    Ok(flat_logpdf(&v.0, &mu.0, var) + log_inverse_exp_jacobian(v.norm()))
}

/// One reverse step: `exp_x(step_var · score + √step_var · ξ)`.
pub fn geodesic_walk_step<R: Rng + ?Sized>(
    x_next: &Rotation,
    score: &TangentVector,
    step_var: f64,
    rng: &mut R,
) -> Rotation {
    let xi = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    exp_so3(
        x_next,
        &TangentVector(score.0 * step_var + xi * step_var.sqrt()),
    )
}

/// Inputs of a twisted weight for one move `x^{t+1} -> x^t`.
#[derive(Debug, Clone, Copy)]
pub struct RiemannianMove<'a> {
    pub x_t: &'a Rotation,
    pub x_next: &'a Rotation,
    pub uncond_score: &'a TangentVector,
    pub cond_score: &'a TangentVector,
    pub step_var: f64,
    pub proposal_var: f64,
    pub twist_log_t: f64,
    pub twist_log_next: f64,
}

/// `log p(x^t | x^{t+1}) + log p̃_t − log p̃(x^t | x^{t+1}, y) − log p̃_{t+1}`.
///
/// Both transitions are tangent normals at `x^{t+1}` evaluated at the same
/// point, so their exp-map Jacobians cancel and are not computed.
pub fn riemannian_weight(m: &RiemannianMove<'_>) -> Result<f64> {
    let v = log_so3(m.x_next, m.x_t)?;
    let model = flat_logpdf(&v.0, &(m.uncond_score.0 * m.step_var), m.step_var);
    let proposal = flat_logpdf(&v.0, &(m.cond_score.0 * m.step_var), m.proposal_var);
    Ok(model + m.twist_log_t - proposal - m.twist_log_next)
}

/// [`riemannian_weight`] with both Jacobian terms evaluated explicitly.
pub fn riemannian_weight_explicit(m: &RiemannianMove<'_>) -> Result<f64> {
    let model = tangent_normal_logpdf(
        m.x_next,
        m.x_t,
        &TangentVector(m.uncond_score.0 * m.step_var),
        m.step_var,
    )?;
    let proposal = tangent_normal_logpdf(
        m.x_next,
        m.x_t,
        &TangentVector(m.cond_score.0 * m.step_var),
        m.proposal_var,
    )?;
    Ok(model + m.twist_log_t - proposal - m.twist_log_next)
}

/// Squared-Frobenius approximation of the zero-mean tangent normal log
/// density: `−‖R_a − R_b‖²_F / (4 var) − (3/2) log(2π var)`.
pub fn frobenius_twist_log(a: &Rotation, b: &Rotation, var: f64) -> f64 {
    -(a.0 - b.0).norm_squared() / (4.0 * var) - 1.5 * (LN_2PI + var.ln())
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_tangent<R: Rng + ?Sized>(rng: &mut R, max_norm: f64) -> TangentVector {
    let dir = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
    TangentVector(dir * (rng.random::<f64>() * max_norm))
}

/// Runs the SO(3) property suite.
///
/// `mc_samples` controls the Haar Monte Carlo estimate of the tangent normal
/// normalising constant.
pub fn property_suite(seed: u64, mc_samples: usize) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let base = Rotation::random_uniform(&mut rng);
        let v = random_tangent(&mut rng, PI - 0.1);
        let back = log_so3(&base, &exp_so3(&base, &v)).map(|w| (w.0 - v.0).norm());
        worst = worst.max(back.unwrap_or(f64::INFINITY));
    }
    out.push(PropertyResult {
        name: "exp/log round trip",
        passed: worst <= 1e-9,
        detail: format!("max error {worst:.3e} over 10^4 pairs (tolerance 1e-9)"),
    });

    let mut r = Rotation::identity();
    let mut drift: f64 = 0.0;
    let score = TangentVector::new(0.3, -0.2, 0.1);
    for _ in 0..10_000 {
        r = geodesic_walk_step(&r, &score, 0.05, &mut rng);
        drift = drift
            .max(orthonormality_residual(&r.0))
            .max((r.0.determinant() - 1.0).abs());
    }
    out.push(PropertyResult {
        name: "walk stays on SO(3)",
        passed: drift <= 1e-9,
        detail: format!("max invariant residual {drift:.3e} over 10^4 steps (tolerance 1e-9)"),
    });

    let var = 0.1;
    let center = Rotation::random_uniform(&mut rng);
    let mut acc = 0.0;
    for _ in 0..mc_samples {
        let p = Rotation::random_uniform(&mut rng);
        if let Ok(l) = tangent_normal_logpdf(&center, &p, &TangentVector::zero(), var) {
            acc += l.exp();
        }
    }
    let mass = 8.0 * PI * PI * acc / mc_samples as f64;
    out.push(PropertyResult {
        name: "tangent normal normalisation",
        passed: (mass - 1.0).abs() <= 0.02,
        detail: format!(
            "Haar Monte Carlo mass {mass:.4} at var 0.1 ({mc_samples} samples, tolerance 2%)"
        ),
    });

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x_next = Rotation::random_uniform(&mut rng);
        let uncond = random_tangent(&mut rng, 2.0);
        let cond = random_tangent(&mut rng, 2.0);
        let step_var = 0.01 + 0.2 * rng.random::<f64>();
        let proposal_var = step_var * (1.0 + rng.random::<f64>());
        let x_t = geodesic_walk_step(&x_next, &cond, step_var, &mut rng);
        let m = RiemannianMove {
            x_t: &x_t,
            x_next: &x_next,
            uncond_score: &uncond,
            cond_score: &cond,
            step_var,
            proposal_var,
            twist_log_t: rng.random::<f64>(),
            twist_log_next: rng.random::<f64>(),
        };
        let diff = match (riemannian_weight(&m), riemannian_weight_explicit(&m)) {
            (Ok(a), Ok(b)) => (a - b).abs(),
            _ => 0.0,
        };
        worst = worst.max(diff);
    }
    out.push(PropertyResult {
        name: "Jacobian cancellation",
        passed: worst <= 1e-10,
        detail: format!(
            "max |explicit − Jacobian-free| {worst:.3e} over 1000 moves (tolerance 1e-10)"
        ),
    });

    let mut worst: f64 = 0.0;
    let var = 1e-4;
    for _ in 0..1000 {
        let b = Rotation::random_uniform(&mut rng);
        let a = geodesic_walk_step(&b, &TangentVector::zero(), var, &mut rng);
        let exact = tangent_normal_logpdf(&b, &a, &TangentVector::zero(), var).unwrap_or(f64::NAN);
        let ratio = (frobenius_twist_log(&a, &b, var) - exact).exp();
        worst = worst.max((ratio - 1.0).abs());
    }
    out.push(PropertyResult {
        name: "Frobenius approximation",
        passed: worst <= 1e-3,
        detail: format!("max |density ratio − 1| {worst:.3e} at var 1e-4 (tolerance 1e-3)"),
    });

    let mut worst: f64 = 0.0;
    let var = 1e-3;
    for _ in 0..1000 {
        // Probes cover the 3σ tangent ball, where the mass concentrates.
        let c = Rotation::random_uniform(&mut rng);
        let mu = random_tangent(&mut rng, var);
        let offset = random_tangent(&mut rng, 3.0 * var.sqrt());
        let p = exp_so3(&c, &TangentVector(mu.0 + offset.0));
        let v = log_so3(&c, &p)
            .map(|v| v.0)
            .unwrap_or(Vector3::repeat(f64::NAN));
        let curved = tangent_normal_logpdf(&c, &p, &mu, var).unwrap_or(f64::NAN);
        worst = worst.max((curved - flat_logpdf(&v, &mu.0, var)).abs());
    }
    out.push(PropertyResult {
        name: "locally Euclidean limit",
        passed: worst <= 1e-3,
        detail: format!(
            "max |curved − flat log density| {worst:.3e} at var 1e-3 within 3σ (tolerance 1e-3)"
        ),
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_of_zero_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Rotation::random_uniform(&mut rng);
        assert_eq!(exp_so3(&base, &TangentVector::zero()), base);
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = exp_so3(
            &Rotation::identity(),
            &TangentVector::new(0.0, 0.0, PI / 2.0),
        );
        let col = r.matrix().column(0);
        assert!((col - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-15);
        let v = log_so3(&Rotation::identity(), &r).unwrap();
        assert!((v.0 - Vector3::new(0.0, 0.0, PI / 2.0)).amax() < 1e-12);
    }

    #[test]
    fn log_of_self_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = Rotation::random_uniform(&mut rng);
        assert!(log_so3(&base, &base).unwrap().norm() < 1e-15);
    }

    #[test]
    fn log_norm_is_relative_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = Rotation::random_uniform(&mut rng);
            let b = Rotation::random_uniform(&mut rng);
            if let Ok(v) = log_so3(&a, &b) {
                let rel = Rotation(a.matrix().transpose() * b.matrix());
                assert!((v.norm() - rel.angle()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn antipodal_pair_is_rejected() {
        let r = exp_so3(&Rotation::identity(), &TangentVector::new(PI, 0.0, 0.0));
        assert!(matches!(
            log_so3(&Rotation::identity(), &r),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        for theta in [1e-10, 5e-9, 1.5e-8, 1e-6] {
            let v = TangentVector::new(theta, -0.5 * theta, 0.2 * theta);
            let back = log_so3(&Rotation::identity(), &exp_so3(&Rotation::identity(), &v)).unwrap();
            assert!((back.0 - v.0).norm() <= 1e-9 * theta.max(1e-9));
        }
    }

    #[test]
    fn logpdf_at_center() {
        let c = Rotation::identity();
        let l = tangent_normal_logpdf(&c, &c, &TangentVector::zero(), 0.3).unwrap();
        assert!((l + 1.5 * (2.0 * PI * 0.3).ln()).abs() < 1e-14);
        assert_eq!(log_inverse_exp_jacobian(0.0), 0.0);
    }

    #[test]
    fn logpdf_concentrates_like_a_gaussian() {
        // Along a fixed geodesic the curvature correction stays O(1).
        let c = Rotation::identity();
        let p = exp_so3(&c, &TangentVector::new(0.0, 0.2, 0.0));
        for var in [1e-2, 1e-3, 1e-4] {
            let l = tangent_normal_logpdf(&c, &p, &TangentVector::zero(), var).unwrap();
            let gauss = -0.04 / (2.0 * var) - 1.5 * (2.0 * PI * var).ln();
            assert!((l - gauss).abs() < 0.01);
        }
    }

    #[test]
    fn walk_without_noise_returns_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Rotation::random_uniform(&mut rng);
        let y = geodesic_walk_step(&x, &TangentVector::new(1.0, 2.0, 3.0), 0.0, &mut rng);
        assert!((y.matrix() - x.matrix()).amax() < 1e-15);
    }

    #[test]
    fn walk_mean_tangent_is_zero_without_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Rotation::random_uniform(&mut rng);
        let n = 20_000;
        let var: f64 = 0.05;
        let mut sum = Vector3::zeros();
        for _ in 0..n {
            let y = geodesic_walk_step(&x, &TangentVector::zero(), var, &mut rng);
            sum += log_so3(&x, &y).unwrap().0;
        }
        let mean = sum / n as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.amax() < 4.0 * se, "{mean}");
    }

    #[test]
    fn weight_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_next = Rotation::random_uniform(&mut rng);
        let s = TangentVector::new(0.2, 0.1, -0.3);
        let x_t = geodesic_walk_step(&x_next, &s, 0.1, &mut rng);
        let mut m = RiemannianMove {
            x_t: &x_t,
            x_next: &x_next,
            uncond_score: &s,
            cond_score: &s,
            step_var: 0.1,
            proposal_var: 0.1,
            twist_log_t: 0.0,
            twist_log_next: 0.0,
        };
        assert_eq!(riemannian_weight(&m).unwrap(), 0.0);
        m.twist_log_t = -1.25;
        m.twist_log_next = 0.5;
        assert_eq!(riemannian_weight(&m).unwrap(), -1.75);
    }

    #[test]
    fn projection_restores_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Rotation::random_uniform(&mut rng);
        let noisy =
            r.matrix() + Matrix3::from_fn(|_, _| 1e-6 * rng.sample::<f64, _>(StandardNormal));
        let p = project_to_so3(&noisy);
        assert!(orthonormality_residual(&p) < 1e-14);
        assert!((p.determinant() - 1.0).abs() < 1e-14);
        assert!(Rotation::new(noisy).is_err());
    }

    #[test]
    fn suite_passes() {
        for r in property_suite(11, 400_000) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
