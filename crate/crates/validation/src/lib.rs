//! Randomised property probes and a scorecard for acceptance runs.
//!
//! Each probe draws its own inputs from a seeded generator and returns the
//! worst observed discrepancy, so callers decide the tolerance.

use std::fmt;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tds_core::oracle::{run_benchmark, synthetic_tasks, BenchmarkSpec};
use tds_core::smc::{
    ess, ess_from_log_weights, resample_systematic, run_sampler, Method, Problem, SamplerConfig,
};
use tds_core::twisting::{twist_grad, twist_log};
use tds_core::{
    score_model::tweedie_score, AnalyticTarget, Likelihood, NoiseSchedule, ScoreModel, TwistConfig,
    VarianceScheme,
};

/// Pass/fail record of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} criterion {} ({}): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

/// Ordered collection of verdicts.
#[derive(Debug, Default)]
pub struct Scorecard {
    pub verdicts: Vec<Verdict>,
}

impl Scorecard {
    /// Records and prints a verdict.
    pub fn record(&mut self, id: usize, name: &str, passed: bool, detail: String) {
        let v = Verdict {
            id,
            name: name.to_string(),
            passed,
            detail,
        };
        println!("{v}");
        self.verdicts.push(v);
    }

    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }
}

/// Schedule used throughout the synthetic study.
pub fn study_schedule() -> NoiseSchedule {
    NoiseSchedule::quadratic_vp(100, 1e-5, 1e-1).expect("valid schedule")
}

fn random_target(rng: &mut ChaCha8Rng) -> AnalyticTarget {
    if rng.random::<bool>() {
        AnalyticTarget::synthetic_gaussian()
    } else {
        AnalyticTarget::synthetic_mixture()
    }
}

fn random_schedule(rng: &mut ChaCha8Rng) -> NoiseSchedule {
    match rng.random_range(0..3) {
        0 => study_schedule(),
        1 => NoiseSchedule::ve_const(60, 0.05).expect("valid schedule"),
        _ => NoiseSchedule::ve_general(
            (1..=60)
                .map(|t| 1e-4 + 0.1 * (t as f64 / 60.0).powi(2))
                .collect(),
        )
        .expect("valid schedule"),
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Worst `‖score − Tweedie(denoiser)‖ / (1 + ‖score‖)` over `n` random
/// `(target, schedule, x, t)` probes.
pub fn tweedie_probe(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let target = random_target(&mut rng);
        let s = random_schedule(&mut rng);
        let t = rng.random_range(1..=s.steps());
        let x = gaussian_vec(&mut rng, 2, 3.0);
        let score = target.marginal_score(&s, &x, t).expect("valid step");
        let den = target.denoise(&s, &x, t).expect("valid step");
        let via = tweedie_score(&s, &x, t, &den).expect("valid step");
        worst = worst.max((&score - via).norm() / (1.0 + score.norm()));
    }
    worst
}

/// Result of [`twist_gradient_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientProbe {
    /// Worst `|fd − exact| / (1 + |exact|)` over all coordinates.
    pub worst: f64,
    /// Probes evaluated; draws at non-smooth points are redrawn.
    pub probes: usize,
}

/// Compares analytic twist gradients against five-point finite differences
/// (step `1e-5`) at `n` random `(target, likelihood, scheme, x, t)` probes.
pub fn twist_gradient_probe(n: usize, seed: u64) -> GradientProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    while probes < n {
        let target = random_target(&mut rng);
        let vp = rng.random::<f64>() < 0.7;
        let s = if vp {
            study_schedule()
        } else {
            NoiseSchedule::ve_const(60, 0.05).expect("valid schedule")
        };
        let y = rng.random_range(-1.5..1.5);
        let lik = match rng.random_range(0..4) {
            0 => Likelihood::smooth_norm(rng.random_range(0.0..2.5)),
            1 => Likelihood::inpaint(vec![0], vec![y]),
            2 => Likelihood::inpaint(vec![1], vec![y]),
            _ => Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![y]),
        };
        let scheme = if vp {
            match rng.random_range(0..4) {
                0 => VarianceScheme::ForwardVar,
                1 => VarianceScheme::Dps,
                2 => VarianceScheme::Pigdm,
                _ => VarianceScheme::TdsScaling { data_var: 0.12 },
            }
        } else {
            VarianceScheme::ForwardVar
        };
        let cfg = TwistConfig {
            twist_scale: rng.random_range(0.5..3.0),
            variance_scheme: scheme,
            ..TwistConfig::default()
        };
        let t = rng.random_range(1..=s.steps());
        let x = gaussian_vec(&mut rng, 2, 1.5);

        // Skip the kinks of |‖x̂‖ − y| and of the DPS residual norm.
        let x_hat = target.denoise(&s, &x, t).expect("valid step").x_hat;
        let near_kink = match &lik {
            Likelihood::SmoothNorm { y } => (x_hat.norm() - y).abs() < 1e-3 || x_hat.norm() < 1e-3,
            _ if scheme == VarianceScheme::Dps => lik
                .masks()
                .iter()
                .any(|m| m.iter().any(|&i| (x_hat[i] - y).abs() < 1e-3)),
            _ => false,
        };
        if near_kink {
            continue;
        }
        let f = |p: &DVector<f64>| {
            let den = target.denoise(&s, p, t).expect("valid step");
            twist_log(&lik, &cfg, &den, &s, t).expect("finite twist")
        };
        let g = twist_grad(&lik, &cfg, &target, &s, &x, t).expect("finite gradient");
        for i in 0..2 {
            let at = |k: f64| {
                let mut p = x.clone();
                p[i] += k * h;
                f(&p)
            };
            let fd = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
            worst = worst.max((fd - g[i]).abs() / (1.0 + g[i].abs()));
        }
        probes += 1;
    }
    GradientProbe { worst, probes }
}

/// Systematic resampling checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystematicProbe {
    /// Every ancestor count was `⌊K·w⌋` or `⌈K·w⌉` and indices were sorted.
    pub bounds_hold: bool,
    /// Largest `|mean count − K·w| / SE` over indices with random counts.
    pub worst_z: f64,
    /// Indices with deterministic counts matched `K·w` exactly.
    pub deterministic_exact: bool,
}

pub fn systematic_probe(vectors: usize, draws: usize, seed: u64) -> SystematicProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bounds_hold = true;
    for _ in 0..vectors {
        let len = rng.random_range(1..40);
        let n = rng.random_range(1..80);
        let raw: Vec<f64> = (0..len)
            .map(|_| {
                if rng.random::<f64>() < 0.2 {
                    0.0
                } else {
                    rng.random::<f64>()
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if total == 0.0 {
            continue;
        }
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let a = resample_systematic(&w, n, rng.random::<f64>());
        bounds_hold &= a.len() == n && a.windows(2).all(|p| p[0] <= p[1]);
        for (k, wk) in w.iter().enumerate() {
            let c = a.iter().filter(|&&j| j == k).count() as f64;
            let target = n as f64 * wk;
            bounds_hold &= c >= target.floor() - 1e-9 && c <= target.ceil() + 1e-9;
        }
    }

    let w = [0.05, 0.3, 0.0, 0.125, 0.4, 0.125];
    let n = 8;
    let mut sum = [0.0; 6];
    let mut sum2 = [0.0; 6];
    for _ in 0..draws {
        let mut counts = [0.0; 6];
        for j in resample_systematic(&w, n, rng.random::<f64>()) {
            counts[j] += 1.0;
        }
        for k in 0..6 {
            sum[k] += counts[k];
            sum2[k] += counts[k] * counts[k];
        }
    }
    let m = draws as f64;
    let mut worst_z: f64 = 0.0;
    let mut deterministic_exact = true;
    for k in 0..6 {
        let mean = sum[k] / m;
        let var = sum2[k] / m - mean * mean;
        let expect = n as f64 * w[k];
        if var <= 1e-12 {
            deterministic_exact &= mean == expect;
        } else {
            worst_z = worst_z.max((mean - expect).abs() / (var / m).sqrt());
        }
    }
    SystematicProbe {
        bounds_hold,
        worst_z,
        deterministic_exact,
    }
}

/// Exact ESS identities: uniform, one-hot, half-support and constant
/// log-weights.
pub fn ess_identities_hold() -> bool {
    let checks = [
        ess(&[0.25; 4]).ok() == Some(4.0),
        ess(&[0.0, 1.0, 0.0]).ok() == Some(1.0),
        ess(&[0.5, 0.5, 0.0, 0.0]).ok() == Some(2.0),
        ess_from_log_weights(&[-3.7; 10]).ok() == Some(10.0),
        ess_from_log_weights(&[0.0, f64::NEG_INFINITY]).ok() == Some(1.0),
        ess_from_log_weights(&[1e300_f64.ln(), 1e300_f64.ln()]).ok() == Some(2.0),
    ];
    checks.iter().all(|&c| c)
}

/// True when every method's particle and diagnostics CSVs, and a small
/// benchmark table, are byte-identical across the given thread counts.
pub fn determinism_across_workers(threads: &[usize]) -> bool {
    let s = study_schedule();
    let target = AnalyticTarget::synthetic_mixture();
    let runs = |pool: &rayon::ThreadPool| -> Vec<u8> {
        pool.install(|| {
            let mut out = Vec::new();
            for method in Method::ALL {
                let lik = match method {
                    Method::Replacement | Method::SmcDiff => {
                        Likelihood::inpaint(vec![0], vec![0.0])
                    }
                    _ => Likelihood::inpaint_dof(vec![vec![0], vec![1]], vec![0.0]),
                };
                let problem = Problem::new(&s, &target, &lik, TwistConfig::default());
                let cfg = SamplerConfig {
                    method,
                    particles: 128,
                    seed: 17,
                    ..SamplerConfig::default()
                };
                let ens = run_sampler(&cfg, &problem).expect("sampler runs");
                ens.write_particles_csv(&mut out).expect("in-memory write");
                ens.write_diagnostics_csv(&mut out)
                    .expect("in-memory write");
            }
            let spec = BenchmarkSpec {
                methods: vec![Method::Tds, Method::Guidance],
                tasks: synthetic_tasks(),
                particle_counts: vec![16, 64],
                replicates: 3,
                seed: 5,
                record_timing: false,
                ..BenchmarkSpec::default()
            };
            let table = run_benchmark(&spec, &AnalyticTarget::synthetic_gaussian(), &s)
                .expect("benchmark runs");
            table.write_csv(&mut out).expect("in-memory write");
            out
        })
    };
    let outputs: Vec<Vec<u8>> = threads
        .iter()
        .map(|&n| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .expect("thread pool");
            runs(&pool)
        })
        .collect();
    outputs.windows(2).all(|w| w[0] == w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_probes_pass() {
        assert!(tweedie_probe(100, 1) <= 1e-9);
        let g = twist_gradient_probe(60, 2);
        assert_eq!(g.probes, 60);
        assert!(g.worst <= 1e-5, "{}", g.worst);
        let sys = systematic_probe(200, 20_000, 3);
        assert!(sys.bounds_hold && sys.deterministic_exact);
        assert!(sys.worst_z < 4.5);
        assert!(ess_identities_hold());
    }

    #[test]
    fn scorecard_tracks_failures() {
        let mut card = Scorecard::default();
        card.record(1, "first", true, "ok".into());
        assert!(card.all_passed());
        card.record(2, "second", false, "bad".into());
        assert!(!card.all_passed());
        assert!(card.verdicts[1].to_string().starts_with("FAIL criterion 2"));
    }
}
