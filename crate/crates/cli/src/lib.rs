//! Command-line front end for the twisted diffusion sampler.
//!
//! [`run`] parses arguments, loads the config, applies flag overrides and
//! dispatches to a subcommand. It returns the process exit code: 0 on
//! success, 1 for configuration errors and 2 for runtime failures.

// `!(a > b)` is deliberate: NaN must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use tds_core::oracle::{conditional_mean_oracle, run_benchmark};
use tds_core::riemannian::property_suite;
use tds_core::smc::{run_sampler, Problem};

use config::{apply_overrides, parse_document, ExperimentConfig, Origins};

/// Exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 1;
/// Exit code for runtime failures.
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "tds",
    version,
    about = "Twisted diffusion sampler and baselines on analytic diffusion models",
    after_help = "Config files hold `key = value` lines; `#` starts a comment. \
                  Run any subcommand with --print-config to see every key and its default."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one sampler; write particles.csv and diagnostics.csv.
    Sample(Common),
    /// Sweep methods, tasks, particle counts and replicates; write benchmark CSVs.
    Benchmark(Common),
    /// Print the ground-truth conditional mean.
    Oracle(Common),
    /// Run the SO(3) property suite.
    RiemannianCheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    particles: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_name = "DIR")]
    output_dir: Option<String>,
    /// Worker threads (default: $TDS_WORKERS, else all cores).
    #[arg(long)]
    workers: Option<String>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl Common {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        let named = [
            ("seed", &self.seed),
            ("particles", &self.particles),
            ("method", &self.method),
            ("output_dir", &self.output_dir),
            ("workers", &self.workers),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                out.push((key.to_string(), v.clone()));
            }
        }
        out
    }

    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let text = match &self.config {
            Some(path) => fs::read_to_string(path).map_err(|e| {
                Failure::Config(format!("cannot read config {}: {e}", path.display()))
            })?,
            None => String::new(),
        };
        let (mut cfg, mut origins): (ExperimentConfig, Origins) =
            parse_document(&text).map_err(|e| Failure::Config(e.to_string()))?;
        apply_overrides(&mut cfg, &mut origins, &self.overrides())
            .map_err(|e| Failure::Config(e.to_string()))?;
        cfg.validate(&origins)
            .map_err(|e| Failure::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Runs the CLI and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            if e.use_stderr() {
                eprintln!(
                    "ERROR: {}",
                    e.to_string().trim_start_matches("error: ").trim_end()
                );
            } else {
                print!("{e}");
            }
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Config(msg)) => {
            eprintln!("ERROR: config: {msg}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("ERROR: {msg}");
            EXIT_RUNTIME
        }
    }
}

type Action = fn(&ExperimentConfig) -> Result<(), Failure>;

fn dispatch(command: Command) -> Result<(), Failure> {
    let (common, action): (&Common, Action) = match &command {
        Command::Sample(c) => (c, sample),
        Command::Benchmark(c) => (c, benchmark),
        Command::Oracle(c) => (c, oracle),
        Command::RiemannianCheck(c) => (c, riemannian_check),
    };
    let cfg = common.load()?;
    if common.print_config {
        print!("{}", cfg.to_document());
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Failure::Runtime(format!("cannot start worker pool: {e}")))?;
    pool.install(|| action(&cfg))
}

fn runtime(e: impl ToString) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Writes `path` through a temporary file in the same directory, so a
/// failure never leaves a partial file behind.
pub fn write_atomic<F>(path: &Path, fill: F) -> io::Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<(), Failure> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", cfg.output_dir.display())))
}

fn write_output<F>(cfg: &ExperimentConfig, name: &str, fill: F) -> Result<PathBuf, Failure>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    let path = cfg.output_dir.join(name);
    write_atomic(&path, fill)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn format_vector(v: &[f64]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn sample(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let schedule = cfg.schedule().map_err(runtime)?;
    let target = cfg.analytic_target().map_err(runtime)?;
    let lik = cfg.build_likelihood().map_err(runtime)?;
    let problem = Problem::new(&schedule, &target, &lik, cfg.twist());
    let ens = run_sampler(&cfg.sampler(), &problem).map_err(runtime)?;
    let mean = ens.conditional_mean().map_err(runtime)?;
    let ess = ens.ess().map_err(runtime)?;
    prepare_output_dir(cfg)?;
    let particles = write_output(cfg, "particles.csv", |w| ens.write_particles_csv(w))?;
    let diagnostics = write_output(cfg, "diagnostics.csv", |w| ens.write_diagnostics_csv(w))?;
    println!("method = {}", cfg.method);
    println!("particles = {}", ens.len());
    println!("final_ess = {ess}");
    println!("resample_count = {}", ens.resample_count());
    println!("conditional_mean = {}", format_vector(mean.as_slice()));
    println!("wrote {}", particles.display());
    println!("wrote {}", diagnostics.display());
    Ok(())
}

fn benchmark(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let schedule = cfg.schedule().map_err(runtime)?;
    let target = cfg.analytic_target().map_err(runtime)?;
    let spec = cfg.benchmark_spec().map_err(runtime)?;
    let table = run_benchmark(&spec, &target, &schedule).map_err(runtime)?;
    prepare_output_dir(cfg)?;
    let rows = write_output(cfg, "benchmark.csv", |w| table.write_csv(w))?;
    let agg = write_output(cfg, "benchmark_aggregate.csv", |w| {
        table.write_aggregate_csv(w)
    })?;
    for method in &spec.methods {
        for task in &spec.tasks {
            match table.slope(*method, &task.name) {
                Ok(slope) => println!("{method} {} slope = {slope:.3}", task.name),
                Err(_) => println!("{method} {} slope = n/a", task.name),
            }
        }
    }
    let failed = table.failures().count();
    if failed > 0 {
        eprintln!(
            "WARNING: {failed} of {} runs failed; see the CSV",
            table.rows.len()
        );
    }
    println!("wrote {}", rows.display());
    println!("wrote {}", agg.display());
    Ok(())
}

fn oracle(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let target = cfg.analytic_target().map_err(runtime)?;
    let lik = cfg.build_likelihood().map_err(runtime)?;
    let mean =
        conditional_mean_oracle(&target, &lik, cfg.twist_scale, &cfg.grid()).map_err(runtime)?;
    println!("{}", format_vector(mean.as_slice()));
    Ok(())
}

fn riemannian_check(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let results = property_suite(cfg.seed, cfg.riemannian_samples);
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} SO(3) properties failed"
        )));
    }
    Ok(())
}
