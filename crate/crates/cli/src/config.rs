//! Flat `key = value` experiment configuration.
//!
//! Every key maps onto one field of a library type. Parsing applies keys in
//! order on top of [`ExperimentConfig::default`], then validates the whole
//! document so that cross-key constraints (a mask index beyond the target
//! dimension, say) are reported against the line that set the offending key.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use tds_core::oracle::{synthetic_tasks, BenchmarkSpec, GridSpec, Task};
use tds_core::smc::{Method, ProposalVarMode, Resampling, SamplerConfig};
use tds_core::{
    AnalyticTarget, FinalStepMode, Framework, Likelihood, NoiseSchedule, TwistConfig,
    VarianceScheme,
};

/// Environment variable supplying the default worker count.
pub const WORKERS_ENV: &str = "TDS_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Gaussian,
    Gmm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodKind {
    SmoothNorm,
    Inpaint,
    InpaintDof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    ForwardVar,
    TdsScaling,
    Dps,
    Pigdm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    Model,
    Inflated,
}

/// Which tasks a benchmark sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSet {
    /// Smooth norm, inpainting and mask-set inpainting with `y = 0`.
    Synthetic,
    /// Only the likelihood described by this config.
    Configured,
}

/// A fully specified experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub framework: Framework,
    pub steps: usize,
    pub var_min: f64,
    pub var_max: f64,
    pub sigma2: f64,

    pub target: TargetKind,
    pub mean: Vec<f64>,
    /// Row-major `d × d`.
    pub cov: Vec<f64>,
    pub gmm_weights: Vec<f64>,
    pub gmm_means: Vec<Vec<f64>>,
    pub gmm_std: f64,

    pub likelihood: LikelihoodKind,
    pub y: Vec<f64>,
    pub mask: Vec<usize>,
    pub mask_set: Vec<Vec<usize>>,
    pub twist_scale: f64,
    pub variance_scheme: SchemeKind,
    pub data_var: f64,
    pub final_step: FinalStepMode,

    pub method: Method,
    pub particles: usize,
    pub resampling: Resampling,
    pub ess_threshold: f64,
    pub proposal_var: ProposalKind,
    pub inflation_factor: f64,
    pub truncate_at: Option<usize>,
    pub seed: u64,

    pub methods: Vec<Method>,
    pub particle_counts: Vec<usize>,
    pub replicates: usize,
    pub benchmark_tasks: TaskSet,
    pub grid_lo: Vec<f64>,
    pub grid_hi: Vec<f64>,
    pub grid_points: usize,
    pub record_timing: bool,

    pub riemannian_samples: usize,
    pub output_dir: PathBuf,
    pub workers: usize,
}

/// Worker count from `TDS_WORKERS`, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let grid = GridSpec::default();
        Self {
            framework: Framework::Vp,
            steps: 100,
            var_min: 1e-5,
            var_max: 0.1,
            sigma2: 0.1,

            target: TargetKind::Gaussian,
            mean: vec![0.5, 0.5],
            cov: vec![1.0, 0.9, 0.9, 1.0],
            gmm_weights: vec![0.3, 0.5, 0.2],
            gmm_means: vec![vec![1.54, -0.29], vec![-2.18, 0.57], vec![-1.09, -1.40]],
            gmm_std: 0.2,

            likelihood: LikelihoodKind::Inpaint,
            y: vec![0.0],
            mask: vec![0],
            mask_set: vec![vec![0], vec![1]],
            twist_scale: 1.0,
            variance_scheme: SchemeKind::ForwardVar,
            data_var: 0.12,
            final_step: FinalStepMode::Exact,

            method: Method::Tds,
            particles: 64,
            resampling: Resampling::Systematic,
            ess_threshold: 0.5,
            proposal_var: ProposalKind::Model,
            inflation_factor: 2.0,
            truncate_at: None,
            seed: 0,

            methods: vec![Method::Tds, Method::Guidance],
            particle_counts: vec![16, 64, 256, 1024, 4096],
            replicates: 25,
            benchmark_tasks: TaskSet::Synthetic,
            grid_lo: grid.lo,
            grid_hi: grid.hi,
            grid_points: grid.points_per_dim,
            record_timing: true,

            riemannian_samples: 1_000_000,
            output_dir: PathBuf::from("."),
            workers: default_workers(),
        }
    }
}

/// Every recognised key, in `--print-config` order.
pub const KEYS: &[&str] = &[
    "framework",
    "steps",
    "var_min",
    "var_max",
    "sigma2",
    "target",
    "mean",
    "cov",
    "gmm_weights",
    "gmm_means",
    "gmm_std",
    "likelihood",
    "y",
    "mask",
    "mask_set",
    "twist_scale",
    "variance_scheme",
    "data_var",
    "final_step",
    "method",
    "particles",
    "resampling",
    "ess_threshold",
    "proposal_var",
    "inflation_factor",
    "truncate_at",
    "seed",
    "methods",
    "particle_counts",
    "replicates",
    "benchmark_tasks",
    "grid_lo",
    "grid_hi",
    "grid_points",
    "record_timing",
    "riemannian_samples",
    "output_dir",
    "workers",
];

/// Where a key's value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
    Default,
}

/// A rejected key, value or constraint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: Origin,
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.origin {
            Origin::Line(n) => write!(f, "line {n}: `{}`: {}", self.key, self.message),
            Origin::Flag => write!(f, "flag `{}`: {}", self.key, self.message),
            Origin::Default => write!(f, "`{}`: {}", self.key, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Tracks which line or flag set each key.
#[derive(Debug, Default, Clone)]
pub struct Origins(HashMap<String, Origin>);

impl Origins {
    fn of(&self, key: &str) -> Origin {
        self.0.get(key).cloned().unwrap_or(Origin::Default)
    }

    fn error(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError {
            origin: self.of(key),
            key: key.to_string(),
            message: message.into(),
        }
    }
}

/// Parses a document without validating it; see [`parse_config`].
pub fn parse_document(text: &str) -> Result<(ExperimentConfig, Origins), ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut origins = Origins::default();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
            origin: Origin::Line(n),
            key: line.to_string(),
            message: "expected `key = value`".into(),
        })?;
        let key = key.trim();
        let err = |message: String| ConfigError {
            origin: Origin::Line(n),
            key: key.to_string(),
            message,
        };
        if let Some(Origin::Line(prev)) = origins.0.get(key) {
            return Err(err(format!("duplicate key, first set on line {prev}")));
        }
        cfg.set(key, value.trim()).map_err(err)?;
        origins.0.insert(key.to_string(), Origin::Line(n));
    }
    Ok((cfg, origins))
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let (cfg, origins) = parse_document(text)?;
    cfg.validate(&origins)?;
    Ok(cfg)
}

/// Applies `key=value` overrides from the command line.
pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    origins: &mut Origins,
    overrides: &[(String, String)],
) -> Result<(), ConfigError> {
    for (key, value) in overrides {
        cfg.set(key, value).map_err(|message| ConfigError {
            origin: Origin::Flag,
            key: key.clone(),
            message,
        })?;
        origins.0.insert(key.clone(), Origin::Flag);
    }
    Ok(())
}

fn scalar<T: std::str::FromStr>(v: &str, what: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("expected {what}, got `{v}`"))
}

fn list<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| scalar(p.trim(), what)).collect()
}

fn nested<T: std::str::FromStr>(v: &str, what: &str) -> Result<Vec<Vec<T>>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(';').map(|g| list(g.trim(), what)).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

fn join_nested<T: fmt::Display>(v: &[Vec<T>]) -> String {
    v.iter().map(|g| join(g)).collect::<Vec<_>>().join("; ")
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        const REAL: &str = "a real number";
        const COUNT: &str = "a non-negative integer";
        match key {
            "framework" => {
                self.framework = v
                    .parse()
                    .map_err(|_| format!("expected vp, ve_const or ve_general, got `{v}`"))?
            }
            "steps" => self.steps = scalar(v, COUNT)?,
            "var_min" => self.var_min = scalar(v, REAL)?,
            "var_max" => self.var_max = scalar(v, REAL)?,
            "sigma2" => self.sigma2 = scalar(v, REAL)?,
            "target" => {
                self.target = match v {
                    "gaussian" => TargetKind::Gaussian,
                    "gmm" => TargetKind::Gmm,
                    _ => return Err(format!("expected gaussian or gmm, got `{v}`")),
                }
            }
            "mean" => self.mean = list(v, REAL)?,
            "cov" => self.cov = list(v, REAL)?,
            "gmm_weights" => self.gmm_weights = list(v, REAL)?,
            "gmm_means" => self.gmm_means = nested(v, REAL)?,
            "gmm_std" => self.gmm_std = scalar(v, REAL)?,
            "likelihood" => {
                self.likelihood = match v {
                    "smooth_norm" => LikelihoodKind::SmoothNorm,
                    "inpaint" => LikelihoodKind::Inpaint,
                    "inpaint_dof" => LikelihoodKind::InpaintDof,
                    _ => {
                        return Err(format!(
                            "expected smooth_norm, inpaint or inpaint_dof, got `{v}`"
                        ))
                    }
                }
            }
            "y" => self.y = list(v, REAL)?,
            "mask" => self.mask = list(v, "a coordinate index")?,
            "mask_set" => self.mask_set = nested(v, "a coordinate index")?,
            "twist_scale" => self.twist_scale = scalar(v, REAL)?,
            "variance_scheme" => {
                self.variance_scheme = match v {
                    "forward_var" => SchemeKind::ForwardVar,
                    "tds_scaling" => SchemeKind::TdsScaling,
                    "dps" => SchemeKind::Dps,
                    "pigdm" => SchemeKind::Pigdm,
                    _ => {
                        return Err(format!(
                            "expected forward_var, tds_scaling, dps or pigdm, got `{v}`"
                        ))
                    }
                }
            }
            "data_var" => self.data_var = scalar(v, REAL)?,
            "final_step" => {
                self.final_step = v
                    .parse()
                    .map_err(|_| format!("expected heuristic or exact, got `{v}`"))?
            }
            "method" => self.method = v.parse().map_err(|e: tds_core::Error| e.to_string())?,
            "particles" => self.particles = scalar(v, COUNT)?,
            "resampling" => {
                self.resampling = v.parse().map_err(|e: tds_core::Error| e.to_string())?
            }
            "ess_threshold" => self.ess_threshold = scalar(v, REAL)?,
            "proposal_var" => {
                self.proposal_var = match v {
                    "model" => ProposalKind::Model,
                    "inflated" => ProposalKind::Inflated,
                    _ => return Err(format!("expected model or inflated, got `{v}`")),
                }
            }
            "inflation_factor" => self.inflation_factor = scalar(v, REAL)?,
            "truncate_at" => {
                self.truncate_at = if v == "none" {
                    None
                } else {
                    Some(scalar(v, COUNT)?)
                }
            }
            "seed" => self.seed = scalar(v, "an unsigned 64-bit integer")?,
            "methods" => {
                self.methods = v
                    .split(',')
                    .map(|m| m.trim().parse().map_err(|e: tds_core::Error| e.to_string()))
                    .collect::<Result<_, _>>()?
            }
            "particle_counts" => self.particle_counts = list(v, COUNT)?,
            "replicates" => self.replicates = scalar(v, COUNT)?,
            "benchmark_tasks" => {
                self.benchmark_tasks = match v {
                    "synthetic" => TaskSet::Synthetic,
                    "configured" => TaskSet::Configured,
                    _ => return Err(format!("expected synthetic or configured, got `{v}`")),
                }
            }
            "grid_lo" => self.grid_lo = list(v, REAL)?,
            "grid_hi" => self.grid_hi = list(v, REAL)?,
            "grid_points" => self.grid_points = scalar(v, COUNT)?,
            "record_timing" => self.record_timing = scalar(v, "true or false")?,
            "riemannian_samples" => self.riemannian_samples = scalar(v, COUNT)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "workers" => self.workers = scalar(v, COUNT)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The value of `key` as it would appear in a config document.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "framework" => self.framework.to_string(),
            "steps" => self.steps.to_string(),
            "var_min" => self.var_min.to_string(),
            "var_max" => self.var_max.to_string(),
            "sigma2" => self.sigma2.to_string(),
            "target" => match self.target {
                TargetKind::Gaussian => "gaussian",
                TargetKind::Gmm => "gmm",
            }
            .into(),
            "mean" => join(&self.mean),
            "cov" => join(&self.cov),
            "gmm_weights" => join(&self.gmm_weights),
            "gmm_means" => join_nested(&self.gmm_means),
            "gmm_std" => self.gmm_std.to_string(),
            "likelihood" => match self.likelihood {
                LikelihoodKind::SmoothNorm => "smooth_norm",
                LikelihoodKind::Inpaint => "inpaint",
                LikelihoodKind::InpaintDof => "inpaint_dof",
            }
            .into(),
            "y" => join(&self.y),
            "mask" => join(&self.mask),
            "mask_set" => join_nested(&self.mask_set),
            "twist_scale" => self.twist_scale.to_string(),
            "variance_scheme" => match self.variance_scheme {
                SchemeKind::ForwardVar => "forward_var",
                SchemeKind::TdsScaling => "tds_scaling",
                SchemeKind::Dps => "dps",
                SchemeKind::Pigdm => "pigdm",
            }
            .into(),
            "data_var" => self.data_var.to_string(),
            "final_step" => self.final_step.to_string(),
            "method" => self.method.to_string(),
            "particles" => self.particles.to_string(),
            "resampling" => self.resampling.to_string(),
            "ess_threshold" => self.ess_threshold.to_string(),
            "proposal_var" => match self.proposal_var {
                ProposalKind::Model => "model",
                ProposalKind::Inflated => "inflated",
            }
            .into(),
            "inflation_factor" => self.inflation_factor.to_string(),
            "truncate_at" => self.truncate_at.map_or("none".into(), |t| t.to_string()),
            "seed" => self.seed.to_string(),
            "methods" => join(&self.methods),
            "particle_counts" => join(&self.particle_counts),
            "replicates" => self.replicates.to_string(),
            "benchmark_tasks" => match self.benchmark_tasks {
                TaskSet::Synthetic => "synthetic",
                TaskSet::Configured => "configured",
            }
            .into(),
            "grid_lo" => join(&self.grid_lo),
            "grid_hi" => join(&self.grid_hi),
            "grid_points" => self.grid_points.to_string(),
            "record_timing" => self.record_timing.to_string(),
            "riemannian_samples" => self.riemannian_samples.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "workers" => self.workers.to_string(),
            _ => return None,
        })
    }

    /// A document that re-parses to `self`.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = self.get(key).expect("every listed key has a value");
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn schedule(&self) -> tds_core::Result<NoiseSchedule> {
        match self.framework {
            Framework::Vp => NoiseSchedule::quadratic_vp(self.steps, self.var_min, self.var_max),
            Framework::VeConst => NoiseSchedule::ve_const(self.steps, self.sigma2),
            Framework::VeGeneral => {
                let t_max = self.steps as f64;
                let vars = (1..=self.steps)
                    .map(|t| self.var_min + (t as f64 / t_max).powi(2) * self.var_max)
                    .collect();
                NoiseSchedule::ve_general(vars)
            }
        }
    }

    pub fn analytic_target(&self) -> tds_core::Result<AnalyticTarget> {
        match self.target {
            TargetKind::Gaussian => {
                let d = self.mean.len();
                if self.cov.len() != d * d {
                    return Err(tds_core::Error::InvalidTarget(format!(
                        "cov needs {} entries for a {d}-dimensional mean, got {}",
                        d * d,
                        self.cov.len()
                    )));
                }
                AnalyticTarget::gaussian(
                    DVector::from_column_slice(&self.mean),
                    DMatrix::from_row_slice(d, d, &self.cov),
                )
            }
            TargetKind::Gmm => {
                if self.gmm_weights.len() != self.gmm_means.len() {
                    return Err(tds_core::Error::InvalidTarget(format!(
                        "{} weights for {} component means",
                        self.gmm_weights.len(),
                        self.gmm_means.len()
                    )));
                }
                AnalyticTarget::mixture(
                    self.gmm_weights.clone(),
                    self.gmm_means
                        .iter()
                        .map(|m| DVector::from_column_slice(m))
                        .collect(),
                    self.gmm_std,
                )
            }
        }
    }

    pub fn build_likelihood(&self) -> tds_core::Result<Likelihood> {
        match self.likelihood {
            LikelihoodKind::SmoothNorm => match self.y.as_slice() {
                [y] => Ok(Likelihood::smooth_norm(*y)),
                _ => Err(tds_core::Error::InvalidLikelihood(format!(
                    "smooth_norm takes one observed value, got {}",
                    self.y.len()
                ))),
            },
            LikelihoodKind::Inpaint => Ok(Likelihood::inpaint(self.mask.clone(), self.y.clone())),
            LikelihoodKind::InpaintDof => Ok(Likelihood::inpaint_dof(
                self.mask_set.clone(),
                self.y.clone(),
            )),
        }
    }

    pub fn twist(&self) -> TwistConfig {
        TwistConfig {
            twist_scale: self.twist_scale,
            variance_scheme: match self.variance_scheme {
                SchemeKind::ForwardVar => VarianceScheme::ForwardVar,
                SchemeKind::TdsScaling => VarianceScheme::TdsScaling {
                    data_var: self.data_var,
                },
                SchemeKind::Dps => VarianceScheme::Dps,
                SchemeKind::Pigdm => VarianceScheme::Pigdm,
            },
            final_step: self.final_step,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            method: self.method,
            particles: self.particles,
            resampling: self.resampling,
            ess_threshold: self.ess_threshold,
            proposal_var: match self.proposal_var {
                ProposalKind::Model => ProposalVarMode::ModelVar,
                ProposalKind::Inflated => ProposalVarMode::Inflated {
                    factor: self.inflation_factor,
                },
            },
            truncate_at: self.truncate_at,
            seed: self.seed,
        }
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            lo: self.grid_lo.clone(),
            hi: self.grid_hi.clone(),
            points_per_dim: self.grid_points,
        }
    }

    pub fn tasks(&self) -> tds_core::Result<Vec<Task>> {
        Ok(match self.benchmark_tasks {
            TaskSet::Synthetic => synthetic_tasks(),
            TaskSet::Configured => vec![Task {
                name: self.get("likelihood").expect("known key"),
                likelihood: self.build_likelihood()?,
            }],
        })
    }

    pub fn benchmark_spec(&self) -> tds_core::Result<BenchmarkSpec> {
        Ok(BenchmarkSpec {
            methods: self.methods.clone(),
            tasks: self.tasks()?,
            particle_counts: self.particle_counts.clone(),
            replicates: self.replicates,
            seed: self.seed,
            sampler: self.sampler(),
            twist: self.twist(),
            grid: self.grid(),
            record_timing: self.record_timing,
        })
    }

    /// Checks every constraint, blaming the key that violates it.
    pub fn validate(&self, origins: &Origins) -> Result<(), ConfigError> {
        let fail = |key: &str, msg: String| Err(origins.error(key, msg));
        if self.steps == 0 {
            return fail("steps", "must be at least 1".into());
        }
        let schedule = match self.schedule() {
            Ok(s) => s,
            Err(e) => {
                let key = match self.framework {
                    Framework::VeConst => "sigma2",
                    _ if !(self.var_min > 0.0) => "var_min",
                    _ => "var_max",
                };
                return fail(key, e.to_string());
            }
        };
        let target = match self.analytic_target() {
            Ok(t) => t,
            Err(e) => {
                let key = match self.target {
                    TargetKind::Gaussian if self.mean.is_empty() => "mean",
                    TargetKind::Gaussian => "cov",
                    TargetKind::Gmm if !(self.gmm_std > 0.0) => "gmm_std",
                    TargetKind::Gmm => "gmm_weights",
                };
                return fail(key, e.to_string());
            }
        };
        let lik_key = match self.likelihood {
            LikelihoodKind::SmoothNorm => "y",
            LikelihoodKind::Inpaint => {
                if self.mask.iter().any(|&i| i >= target.dim()) {
                    "mask"
                } else {
                    "y"
                }
            }
            LikelihoodKind::InpaintDof => {
                if self.mask_set.iter().flatten().any(|&i| i >= target.dim()) {
                    "mask_set"
                } else {
                    "y"
                }
            }
        };
        match self.build_likelihood() {
            Ok(lik) => {
                if let Err(e) = lik.validate(target.dim()) {
                    return fail(lik_key, e.to_string());
                }
            }
            Err(e) => return fail(lik_key, e.to_string()),
        }
        let twist = self.twist();
        if let Err(e) = twist.validate(&schedule) {
            let key = match self.variance_scheme {
                SchemeKind::TdsScaling if !(self.data_var > 0.0) => "data_var",
                _ if !(self.twist_scale >= 0.0) => "twist_scale",
                _ => "variance_scheme",
            };
            return fail(key, e.to_string());
        }
        if let Err(e) = self.sampler().validate(&schedule) {
            let key = if self.particles == 0 {
                "particles"
            } else if !(0.0..=1.0).contains(&self.ess_threshold) {
                "ess_threshold"
            } else if self.truncate_at.is_some_and(|t| t >= self.steps) {
                "truncate_at"
            } else {
                "inflation_factor"
            };
            return fail(key, e.to_string());
        }
        if self.methods.is_empty() {
            return fail("methods", "must name at least one method".into());
        }
        if self.particle_counts.is_empty() || self.particle_counts.contains(&0) {
            return fail(
                "particle_counts",
                "must list positive particle counts".into(),
            );
        }
        if self.replicates == 0 {
            return fail("replicates", "must be at least 1".into());
        }
        if self.grid_lo.len() != self.grid_hi.len() {
            return fail(
                "grid_hi",
                "grid_lo and grid_hi must have the same length".into(),
            );
        }
        if self.likelihood == LikelihoodKind::SmoothNorm
            || self.benchmark_tasks == TaskSet::Synthetic
        {
            if let Err(e) = self.grid().validate(target.dim()) {
                let key = if self.grid_points < 128 {
                    "grid_points"
                } else {
                    "grid_lo"
                };
                return fail(key, e.to_string());
            }
        }
        if self.riemannian_samples == 0 {
            return fail("riemannian_samples", "must be at least 1".into());
        }
        if self.workers == 0 {
            return fail("workers", "must be at least 1".into());
        }
        Ok(())
    }
}
