//! Ground truth for the synthetic targets and the benchmark sweep.
//!
//! Inpainting conditionals are available in closed form. The smooth norm
//! likelihood is integrated numerically on a two-dimensional grid with the
//! trapezoid rule. [`LinearGaussianOptimalTwist`] is the exact `p(y | x^t)`
//! under the discretised reverse chain of a Gaussian target, which makes the
//! twisted sampler's incremental weights constant.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::score_model::{log_sum_exp, softmax, AnalyticTarget, DenoiserOutput, GaussianTarget};
use crate::smc::{run_sampler, Method, Problem, SamplerConfig};
use crate::twisting::{GaussianTwistForm, Likelihood, TwistConfig, TwistEval, TwistFunction};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Rectangular integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points_per_dim: usize,
}

impl Default for GridSpec {
    /// `[-6, 6]²` with 1024 points per dimension.
    fn default() -> Self {
        Self {
            lo: vec![-6.0, -6.0],
            hi: vec![6.0, 6.0],
            points_per_dim: 1024,
        }
    }
}

impl GridSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if dim != 2 || self.lo.len() != 2 || self.hi.len() != 2 {
            return Err(Error::Oracle(format!(
                "grid integration is two-dimensional; target has dimension {dim}"
            )));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Oracle(
                "grid needs lo < hi in every dimension".into(),
            ));
        }
        if self.points_per_dim < 2 {
            return Err(Error::Oracle(
                "grid needs at least two points per dimension".into(),
            ));
        }
        Ok(())
    }

    fn spacing(&self, i: usize) -> f64 {
        (self.hi[i] - self.lo[i]) / (self.points_per_dim - 1) as f64
    }

    /// Same spacing, twice the extent, same centre.
    fn enlarged(&self) -> Self {
        // Whole steps on each side keep the original nodes on the new grid,
        // so the comparison sees truncation and not a shifted quadrature.
        let n = self.points_per_dim;
        let m = n / 2;
        let step = |i: usize| (self.hi[i] - self.lo[i]) / (n - 1) as f64;
        let lo = (0..2)
            .map(|i| self.lo[i] - m as f64 * step(i))
            .collect::<Vec<_>>();
        let hi = (0..2).map(|i| self.hi[i] + m as f64 * step(i)).collect();
        Self {
            lo,
            hi,
            points_per_dim: n + 2 * m,
        }
    }
}

/// Unnormalised mass and first moment of `exp(log_f)` on the grid.
fn trapezoid_moments<F>(grid: &GridSpec, log_f: F) -> (f64, [f64; 2])
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = grid.points_per_dim;
    let (h0, h1) = (grid.spacing(0), grid.spacing(1));
    let coord = |i: usize, k: usize| grid.lo[i] + k as f64 * grid.spacing(i);
    let end_weight = |k: usize| if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            (0..n)
                .map(|b| log_f(&DVector::from_vec(vec![coord(0, a), coord(1, b)])))
                .collect()
        })
        .collect();
    let max = rows
        .iter()
        .flatten()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut mass = 0.0;
    let mut first = [0.0; 2];
    for (a, row) in rows.iter().enumerate() {
        for (b, l) in row.iter().enumerate() {
            let w = end_weight(a) * end_weight(b) * (l - max).exp();
            mass += w;
            first[0] += w * coord(0, a);
            first[1] += w * coord(1, b);
        }
    }
    let scale = h0 * h1 * max.exp();
    (mass * scale, [first[0] * scale, first[1] * scale])
}

/// `E[x | y]` under `q(x) · p(y | x)^γ`.
///
/// Masked likelihoods are exact observations and use closed forms; `γ` then
/// only matters through `γ = 0`, which removes the conditioning. The smooth
/// likelihood is integrated on `grid`, which must hold all but `1e-6` of the
/// mass seen on a grid of twice the extent.
pub fn conditional_mean_oracle(
    target: &AnalyticTarget,
    lik: &Likelihood,
    gamma: f64,
    grid: &GridSpec,
) -> Result<DVector<f64>> {
    lik.validate(target.dim())?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Oracle(format!(
            "twist scale must be non-negative, got {gamma}"
        )));
    }
    if gamma == 0.0 {
        return Ok(target.mean());
    }
    match lik {
        Likelihood::SmoothNorm { y } => {
            grid.validate(target.dim())?;
            let log_f = |x: &DVector<f64>| {
                target.log_density(x).expect("dimension checked")
                    + gamma * (-(x.norm() - y).abs() - std::f64::consts::LN_2)
            };
            let (mass, first) = trapezoid_moments(grid, log_f);
            let (big_mass, _) = trapezoid_moments(&grid.enlarged(), log_f);
            if !(mass >= (1.0 - 1e-6) * big_mass) {
                return Err(Error::Oracle(format!(
                    "integration grid holds only {:.9} of the mass",
                    mass / big_mass
                )));
            }
            Ok(DVector::from_vec(vec![first[0] / mass, first[1] / mass]))
        }
        Likelihood::Inpaint { mask, y } => Ok(slice_mean(target, mask, y)?.0),
        Likelihood::InpaintDof { masks, y } => {
            let parts = masks
                .iter()
                .map(|m| slice_mean(target, m, y))
                .collect::<Result<Vec<_>>>()?;
            let logs: Vec<f64> = parts.iter().map(|p| p.1).collect();
            let resp = softmax(&logs);
            Ok(parts
                .iter()
                .zip(&resp)
                .fold(DVector::zeros(target.dim()), |acc, (p, r)| acc + &p.0 * *r))
        }
    }
}

/// `E[x | x_M = y]` and `log q(x_M = y)`.
fn slice_mean(
    target: &AnalyticTarget,
    mask: &[usize],
    y: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let d = target.dim();
    let free: Vec<usize> = (0..d).filter(|i| !mask.contains(i)).collect();
    let mut out = DVector::zeros(d);
    for (k, &i) in mask.iter().enumerate() {
        out[i] = y[k];
    }
    match target {
        AnalyticTarget::Gaussian(g) => {
            let (mu, cov) = (g.mean(), g.cov());
            let mu_m = DVector::from_iterator(mask.len(), mask.iter().map(|&i| mu[i]));
            let s_mm = DMatrix::from_fn(mask.len(), mask.len(), |a, b| cov[(mask[a], mask[b])]);
            let chol = s_mm
                .cholesky()
                .ok_or_else(|| Error::Oracle("observed covariance block is singular".into()))?;
            let resid = y - mu_m;
            let alpha = chol.solve(&resid);
            for &i in &free {
                let s_im = DVector::from_iterator(mask.len(), mask.iter().map(|&j| cov[(i, j)]));
                out[i] = mu[i] + s_im.dot(&alpha);
            }
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_marg = -0.5 * (mask.len() as f64 * LN_2PI + logdet + resid.dot(&alpha));
            Ok((out, log_marg))
        }
        AnalyticTarget::Mixture(m) => {
            let var = m.iso_var();
            let logs: Vec<f64> = m
                .weights()
                .iter()
                .zip(m.means())
                .map(|(w, mu)| {
                    let r2: f64 = mask
                        .iter()
                        .enumerate()
                        .map(|(k, &i)| (y[k] - mu[i]).powi(2))
                        .sum();
                    w.ln() - 0.5 * (mask.len() as f64 * (LN_2PI + var.ln()) + r2 / var)
                })
                .collect();
            let resp = softmax(&logs);
            for &i in &free {
                out[i] = resp.iter().zip(m.means()).map(|(r, mu)| r * mu[i]).sum();
            }
            Ok((out, log_sum_exp(&logs)))
        }
    }
}

/// `‖estimate − oracle‖₂`.
pub fn estimation_error(estimate: &DVector<f64>, oracle: &DVector<f64>) -> f64 {
    (estimate - oracle).norm()
}

/// Least-squares slope of `log MSE` against `log K`.
pub fn fit_loglog_slope(rows: &[(f64, f64)]) -> Result<f64> {
    if let Some(&(k, e)) = rows
        .iter()
        .find(|(k, e)| !(*e > 0.0 && e.is_finite() && *k > 0.0))
    {
        return Err(Error::Oracle(format!(
            "slope fit needs positive K and MSE, got ({k}, {e})"
        )));
    }
    let mut ks: Vec<f64> = rows.iter().map(|r| r.0).collect();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    if ks.len() < 3 {
        return Err(Error::Oracle(
            "slope fit needs at least three distinct K".into(),
        ));
    }
    let n = rows.len() as f64;
    let xs: Vec<f64> = rows.iter().map(|r| r.0.ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Exact `p(y | x^t)` for an inpainting observation of a Gaussian target
/// under the model's reverse chain.
///
/// For a Gaussian target each reverse mean is affine, `m_t(x) = L_t x + b_t`,
/// so `x^0 | x^t ~ N(G_t x + g_t, C_t)` with `G_t = G_{t-1} L_t`,
/// `g_t = G_{t-1} b_t + g_{t-1}` and `C_t = C_{t-1} + σ_t² G_{t-1} G_{t-1}ᵀ`.
#[derive(Debug, Clone)]
pub struct LinearGaussianOptimalTwist {
    mask: Vec<usize>,
    y: DVector<f64>,
    final_var: f64,
    // Index t-1 holds the observed rows of (G_t, g_t, C_t).
    forms: Vec<GaussianTwistForm>,
    cov_inv: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl LinearGaussianOptimalTwist {
    pub fn new(target: &GaussianTarget, s: &NoiseSchedule, lik: &Likelihood) -> Result<Self> {
        let (mask, y) = match lik {
            Likelihood::Inpaint { mask, y } => (mask.clone(), y.clone()),
            other => {
                return Err(Error::Unsupported(format!(
                    "the closed-form optimal twist needs an inpaint likelihood, got {}",
                    other.kind()
                )))
            }
        };
        let d = target.mean().len();
        lik.validate(d)?;
        let eye = DMatrix::<f64>::identity(d, d);
        let (mut g, mut gv, mut c) = (eye.clone(), DVector::zeros(d), DMatrix::zeros(d, d));
        let mut forms = Vec::with_capacity(s.steps());
        let mut cov_inv = Vec::with_capacity(s.steps());
        let mut log_norm = Vec::with_capacity(s.steps());
        for t in 1..=s.steps() {
            let (a, v) = s.forward_marginal_params(t)?;
            let var = s.step_var(t)?;
            let root_alpha = s.alpha(t)?.sqrt();
            let p = (target.cov() * (a * a) + &eye * v)
                .try_inverse()
                .ok_or_else(|| Error::Oracle("singular marginal covariance".into()))?;
            let l = (&eye - &p * var) / root_alpha;
            let b = &p * target.mean() * (var * a / root_alpha);
            c += (&g * g.transpose()) * var;
            gv += &g * b;
            g *= l;
            let rows = |m: &DMatrix<f64>| DMatrix::from_fn(mask.len(), d, |r, j| m[(mask[r], j)]);
            let cov = DMatrix::from_fn(mask.len(), mask.len(), |r, q| c[(mask[r], mask[q])]);
            let chol = cov
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Oracle("optimal twist covariance is singular".into()))?;
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_norm.push(-0.5 * (mask.len() as f64 * LN_2PI + logdet));
            cov_inv.push(chol.inverse());
            forms.push(GaussianTwistForm {
                b: rows(&g),
                c: DVector::from_iterator(mask.len(), mask.iter().map(|&i| gv[i])),
                cov,
                y: y.clone(),
            });
        }
        Ok(Self {
            mask,
            y,
            final_var: s.step_var(1)?,
            forms,
            cov_inv,
            log_norm,
        })
    }

    /// `log p(y | x^t)` and its gradient, `t >= 1`.
    pub fn log_likelihood(&self, x: &DVector<f64>, t: usize) -> Result<(f64, DVector<f64>)> {
        let i =
            t.checked_sub(1)
                .filter(|&i| i < self.forms.len())
                .ok_or(Error::StepOutOfRange {
                    t,
                    max: self.forms.len(),
                })?;
        let f = &self.forms[i];
        let r = &self.y - (&f.b * x + &f.c);
        let w = &self.cov_inv[i] * &r;
        Ok((self.log_norm[i] - 0.5 * r.dot(&w), f.b.tr_mul(&w)))
    }
}

impl TwistFunction for LinearGaussianOptimalTwist {
    fn evaluate(&self, x: &DVector<f64>, t: usize, _den: &DenoiserOutput) -> Result<TwistEval> {
        let (log, grad) = self.log_likelihood(x, t)?;
        Ok(TwistEval {
            log,
            grad,
            clamped: false,
        })
    }

    /// Heuristic Gaussian with variance `σ_1²`; the exact final step never
    /// calls this.
    fn evaluate_final(&self, x0: &DVector<f64>) -> Result<f64> {
        let r2: f64 = self
            .mask
            .iter()
            .enumerate()
            .map(|(k, &i)| (self.y[k] - x0[i]).powi(2))
            .sum();
        Ok(-0.5 * (self.mask.len() as f64 * (LN_2PI + self.final_var.ln()) + r2 / self.final_var))
    }

    fn gaussian_form(&self, t: usize) -> Option<GaussianTwistForm> {
        t.checked_sub(1).and_then(|i| self.forms.get(i)).cloned()
    }
}

/// A named conditioning task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub name: String,
    pub likelihood: Likelihood,
}

/// The three two-dimensional tasks with observation `y = 0`: the norm, the
/// first coordinate, and either coordinate.
pub fn synthetic_tasks() -> Vec<Task> {
    vec![
        Task {
            name: "smooth_norm".into(),
            likelihood: Likelihood::smooth_norm(0.0),
        },
        Task {
            name: "inpaint".into(),
            likelihood: Likelihood::inpaint(vec![0], vec![0.0]),
        },
        Task {
            name: "inpaint_dof".into(),
            likelihood: Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![0.0]),
        },
    ]
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub methods: Vec<Method>,
    pub tasks: Vec<Task>,
    pub particle_counts: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    /// Method, particle count and seed are overwritten per row.
    pub sampler: SamplerConfig,
    pub twist: TwistConfig,
    pub grid: GridSpec,
    /// When false, `wall_ms` is written as 0 so tables are reproducible.
    pub record_timing: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            methods: vec![Method::Tds],
            tasks: synthetic_tasks(),
            particle_counts: vec![16, 64, 256, 1024, 4096],
            replicates: 25,
            seed: 0,
            sampler: SamplerConfig::default(),
            twist: TwistConfig::default(),
            grid: GridSpec::default(),
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: Method,
    pub task: String,
    pub particles: usize,
    pub replicate: usize,
    pub seed: u64,
    pub error: f64,
    pub mse: f64,
    pub final_ess: f64,
    pub resample_count: usize,
    pub wall_ms: f64,
    /// Weighted conditional-mean estimate; empty when the run failed.
    pub estimate: Vec<f64>,
    /// Set when the run failed; numeric fields are then NaN.
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub task: String,
    pub particles: usize,
    pub mean_error: f64,
    /// Twice the standard error of the mean error.
    pub sem2: f64,
    pub mse: f64,
}

/// Benchmark rows in sweep order (method, task, K, replicate).
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

/// Seed of one benchmark row: the base seed XOR a 64-bit FNV-1a hash of the
/// row key.
pub fn row_seed(seed: u64, method: Method, task: &str, particles: usize, replicate: usize) -> u64 {
    let key = format!("{}|{}|{}|{}", method.as_str(), task, particles, replicate);
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Runs every (method, task, K, replicate) combination.
///
/// Oracle failures abort the sweep; sampler failures are recorded in the
/// affected row.
pub fn run_benchmark(
    spec: &BenchmarkSpec,
    target: &AnalyticTarget,
    schedule: &NoiseSchedule,
) -> Result<BenchmarkTable> {
    if spec.replicates == 0 || spec.particle_counts.is_empty() {
        return Err(Error::InvalidConfig(
            "benchmark needs replicates and particle counts".into(),
        ));
    }
    let oracles = spec
        .tasks
        .iter()
        .map(|task| {
            conditional_mean_oracle(target, &task.likelihood, spec.twist.twist_scale, &spec.grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &method in &spec.methods {
        for (ti, task) in spec.tasks.iter().enumerate() {
            for &k in &spec.particle_counts {
                for r in 0..spec.replicates {
                    jobs.push((method, ti, task, k, r));
                }
            }
        }
    }
    let rows = jobs
        .into_par_iter()
        .map(|(method, ti, task, k, r)| {
            let seed = row_seed(spec.seed, method, &task.name, k, r);
            let cfg = SamplerConfig {
                method,
                particles: k,
                seed,
                ..spec.sampler.clone()
            };
            let problem = Problem::new(schedule, target, &task.likelihood, spec.twist);
            let start = Instant::now();
            let outcome = run_sampler(&cfg, &problem).and_then(|ens| {
                let est = ens.conditional_mean()?;
                Ok((
                    estimation_error(&est, &oracles[ti]),
                    est,
                    ens.ess()?,
                    ens.resample_count(),
                ))
            });
            let wall_ms = if spec.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let base = BenchmarkRow {
                method,
                task: task.name.clone(),
                particles: k,
                replicate: r,
                seed,
                error: f64::NAN,
                mse: f64::NAN,
                final_ess: f64::NAN,
                resample_count: 0,
                wall_ms,
                estimate: Vec::new(),
                failure: None,
            };
            match outcome {
                Ok((error, est, ess, resamples)) => BenchmarkRow {
                    error,
                    estimate: est.as_slice().to_vec(),
                    mse: error * error,
                    final_ess: ess,
                    resample_count: resamples,
                    ..base
                },
                Err(e) => BenchmarkRow {
                    failure: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();
    Ok(BenchmarkTable { rows })
}

impl BenchmarkTable {
    /// Mean error, `2·SEM` and MSE per (method, task, K), over successful rows.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut out: Vec<AggregateRow> = Vec::new();
        let mut i = 0;
        while i < self.rows.len() {
            let head = &self.rows[i];
            let mut j = i;
            while j < self.rows.len()
                && self.rows[j].method == head.method
                && self.rows[j].task == head.task
                && self.rows[j].particles == head.particles
            {
                j += 1;
            }
            let errs: Vec<f64> = self.rows[i..j]
                .iter()
                .filter(|r| r.failure.is_none())
                .map(|r| r.error)
                .collect();
            let n = errs.len() as f64;
            let mean = errs.iter().sum::<f64>() / n;
            let var = if errs.len() > 1 {
                errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                f64::NAN
            };
            out.push(AggregateRow {
                method: head.method,
                task: head.task.clone(),
                particles: head.particles,
                mean_error: mean,
                sem2: 2.0 * (var / n).sqrt(),
                mse: errs.iter().map(|e| e * e).sum::<f64>() / n,
            });
            i = j;
        }
        out
    }

    /// Log-log slope of MSE against K for one method and task.
    pub fn slope(&self, method: Method, task: &str) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .aggregate()
            .into_iter()
            .filter(|a| a.method == method && a.task == task)
            .map(|a| (a.particles as f64, a.mse))
            .collect();
        fit_loglog_slope(&pts)
    }

    /// Slope of the MSE in excess of a constant `floor` (squared bias of the
    /// sampler's own limit). Fails if any excess is non-positive.
    pub fn slope_above_floor(&self, method: Method, task: &str, floor: f64) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .aggregate()
            .into_iter()
            .filter(|a| a.method == method && a.task == task)
            .map(|a| (a.particles as f64, a.mse - floor))
            .collect();
        fit_loglog_slope(&pts)
    }

    /// Mean of the successful estimates for one (method, task, K).
    pub fn mean_estimate(
        &self,
        method: Method,
        task: &str,
        particles: usize,
    ) -> Option<DVector<f64>> {
        let ests: Vec<&Vec<f64>> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.task == task && r.particles == particles)
            .filter(|r| r.failure.is_none())
            .map(|r| &r.estimate)
            .collect();
        let first = ests.first()?;
        let mut acc = DVector::zeros(first.len());
        for e in &ests {
            acc += DVector::from_column_slice(e);
        }
        Some(acc / ests.len() as f64)
    }

    pub fn mean_error(&self, method: Method, task: &str, particles: usize) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.method == method && a.task == task && a.particles == particles)
            .map(|a| a.mean_error)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BenchmarkRow> {
        self.rows.iter().filter(|r| r.failure.is_some())
    }

    /// `method,task,K,replicate,seed,error,mse,final_ess,resample_count,wall_ms`
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "method,task,K,replicate,seed,error,mse,final_ess,resample_count,wall_ms"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.method,
                r.task,
                r.particles,
                r.replicate,
                r.seed,
                r.error,
                r.mse,
                r.final_ess,
                r.resample_count,
                r.wall_ms
            )?;
        }
        Ok(())
    }

    /// `method,task,K,mean_error,sem2`
    pub fn write_aggregate_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let mut s = String::from("method,task,K,mean_error,sem2\n");
        for a in self.aggregate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                a.method, a.task, a.particles, a.mean_error, a.sem2
            );
        }
        out.write_all(s.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn gaussian_inpaint_closed_form() {
        let m = conditional_mean_oracle(
            &AnalyticTarget::synthetic_gaussian(),
            &Likelihood::inpaint(vec![0], vec![0.0]),
            1.0,
            &GridSpec::default(),
        )
        .unwrap();
        assert_eq!(m[0], 0.0);
        assert!((m[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn symmetric_dof_is_swap_average() {
        let target = AnalyticTarget::gaussian(
            vec2(0.3, 0.3),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]),
        )
        .unwrap();
        let g = GridSpec::default();
        let dof = conditional_mean_oracle(
            &target,
            &Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![0.0]),
            1.0,
            &g,
        )
        .unwrap();
        let a = conditional_mean_oracle(&target, &Likelihood::inpaint(vec![0], vec![0.0]), 1.0, &g)
            .unwrap();
        let b = conditional_mean_oracle(&target, &Likelihood::inpaint(vec![1], vec![0.0]), 1.0, &g)
            .unwrap();
        assert!((&dof - (a + b) * 0.5).amax() < 1e-15);
        assert!((dof[0] - dof[1]).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_returns_unconditional_mean() {
        for target in [
            AnalyticTarget::synthetic_gaussian(),
            AnalyticTarget::synthetic_mixture(),
        ] {
            for task in synthetic_tasks() {
                let m =
                    conditional_mean_oracle(&target, &task.likelihood, 0.0, &GridSpec::default())
                        .unwrap();
                assert_eq!(m, target.mean());
            }
        }
    }

    #[test]
    fn small_grid_is_rejected() {
        let grid = GridSpec {
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
            points_per_dim: 128,
        };
        let err = conditional_mean_oracle(
            &AnalyticTarget::synthetic_gaussian(),
            &Likelihood::smooth_norm(0.0),
            1.0,
            &grid,
        );
        assert!(matches!(err, Err(Error::Oracle(_))));
    }

    #[test]
    fn smooth_norm_grid_refinement() {
        for (target, gamma) in [
            (AnalyticTarget::synthetic_gaussian(), 1.0),
            (AnalyticTarget::synthetic_mixture(), 1.0),
            (AnalyticTarget::synthetic_gaussian(), 2.0),
        ] {
            let coarse = conditional_mean_oracle(
                &target,
                &Likelihood::smooth_norm(0.0),
                gamma,
                &GridSpec::default(),
            )
            .unwrap();
            let fine = conditional_mean_oracle(
                &target,
                &Likelihood::smooth_norm(0.0),
                gamma,
                &GridSpec {
                    points_per_dim: 2048,
                    ..GridSpec::default()
                },
            )
            .unwrap();
            assert!((&coarse - &fine).amax() <= 1e-6, "{coarse} vs {fine}");
        }
    }

    #[test]
    fn inpaint_closed_form_matches_narrow_slice_integration() {
        // Approximate the observation x_0 = y by a band one grid cell wide.
        let grid = GridSpec::default();
        let h = grid.spacing(0);
        for target in [
            AnalyticTarget::synthetic_gaussian(),
            AnalyticTarget::synthetic_mixture(),
        ] {
            for y in [0.0, 0.4] {
                // Put the observation on a grid column.
                let y = grid.lo[0] + ((y - grid.lo[0]) / h).round() * h;
                let exact = conditional_mean_oracle(
                    &target,
                    &Likelihood::inpaint(vec![0], vec![y]),
                    1.0,
                    &grid,
                )
                .unwrap();
                let (mass, first) = trapezoid_moments(&grid, |x| {
                    if (x[0] - y).abs() <= 0.5 * h {
                        target.log_density(x).unwrap()
                    } else {
                        f64::NEG_INFINITY
                    }
                });
                let approx = first[1] / mass;
                assert!((approx - exact[1]).abs() < 1e-3, "{approx} vs {}", exact[1]);
            }
        }
    }

    #[test]
    fn error_metric() {
        assert_eq!(estimation_error(&vec2(0.2, 0.3), &vec2(0.2, 0.3)), 0.0);
        assert_eq!(estimation_error(&vec2(1.0, 0.0), &vec2(0.0, 0.0)), 1.0);
        let rot = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
        let (a, b) = (vec2(0.3, -1.2), vec2(2.0, 0.5));
        let e = estimation_error(&(&rot * &a), &(&rot * &b));
        assert!((e - estimation_error(&a, &b)).abs() < 1e-15);
    }

    #[test]
    fn slope_examples() {
        let ks: [f64; 4] = [16.0, 64.0, 256.0, 1024.0];
        let on = |p: i32| ks.iter().map(|&k| (k, 3.0 / k.powi(p))).collect::<Vec<_>>();
        assert!((fit_loglog_slope(&on(1)).unwrap() + 1.0).abs() < 1e-12);
        assert!((fit_loglog_slope(&on(2)).unwrap() + 2.0).abs() < 1e-12);
        assert!(fit_loglog_slope(&on(0)).unwrap().abs() < 1e-12);
        assert!(fit_loglog_slope(&[(16.0, 0.1), (64.0, 0.0), (256.0, 0.1)]).is_err());
        assert!(fit_loglog_slope(&[(16.0, 0.1), (16.0, 0.2), (64.0, 0.1)]).is_err());
    }

    #[test]
    fn row_seeds_differ_by_key() {
        let a = row_seed(1, Method::Tds, "inpaint", 16, 0);
        assert_eq!(a, row_seed(1, Method::Tds, "inpaint", 16, 0));
        assert_ne!(a, row_seed(1, Method::Tds, "inpaint", 16, 1));
        assert_ne!(a, row_seed(1, Method::Guidance, "inpaint", 16, 0));
        assert_ne!(a, row_seed(2, Method::Tds, "inpaint", 16, 0));
    }

    #[test]
    fn optimal_twist_matches_monte_carlo_reverse_chain() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        use rand_distr::{Distribution, StandardNormal};

        // Check the affine moments of x^0 | x^t by simulating the reverse chain.
        let target = AnalyticTarget::synthetic_gaussian();
        let s = NoiseSchedule::quadratic_vp(20, 1e-3, 0.2).unwrap();
        let lik = Likelihood::inpaint(vec![1], vec![0.0]);
        let tw = LinearGaussianOptimalTwist::new(target.as_gaussian().unwrap(), &s, &lik).unwrap();
        let t = 12;
        let x_t = vec2(0.4, -0.7);
        let form = tw.gaussian_form(t).unwrap();
        let mean = &form.b * &x_t + &form.c;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let (mut m1, mut m2) = (0.0, 0.0);
        for _ in 0..n {
            let mut x = x_t.clone();
            for step in (1..=t).rev() {
                let score = target.marginal_score(&s, &x, step).unwrap();
                let (m, v) = s.reverse_transition_params(step, &x, &score).unwrap();
                x = m + DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng)) * v.sqrt();
            }
            m1 += x[1];
            m2 += x[1] * x[1];
        }
        let mc_mean = m1 / n as f64;
        let mc_var = m2 / n as f64 - mc_mean * mc_mean;
        let se = (mc_var / n as f64).sqrt();
        assert!(
            (mc_mean - mean[0]).abs() < 4.0 * se,
            "{mc_mean} vs {}",
            mean[0]
        );
        assert!(
            (mc_var / form.cov[(0, 0)] - 1.0).abs() < 0.03,
            "{mc_var} vs {}",
            form.cov[(0, 0)]
        );
    }

    #[test]
    fn optimal_twist_at_step_one_is_model_transition() {
        let target = AnalyticTarget::synthetic_gaussian();
        let s = NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).unwrap();
        let lik = Likelihood::inpaint(vec![0], vec![0.3]);
        let tw = LinearGaussianOptimalTwist::new(target.as_gaussian().unwrap(), &s, &lik).unwrap();
        let x = vec2(0.2, 1.1);
        let score = target.marginal_score(&s, &x, 1).unwrap();
        let (m, v) = s.reverse_transition_params(1, &x, &score).unwrap();
        let expect = -0.5 * (LN_2PI + v.ln() + (0.3 - m[0]).powi(2) / v);
        let (log, _) = tw.log_likelihood(&x, 1).unwrap();
        assert!((log - expect).abs() < 1e-9 * expect.abs().max(1.0));
    }
}
