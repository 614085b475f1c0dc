use std::fs;
use std::io;
use std::path::Path;
use std::process::{Command, Output};

use tds_cli::{write_atomic, EXIT_CONFIG, EXIT_RUNTIME};

fn tds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(args)
        .env_remove("TDS_WORKERS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_prints_the_gaussian_conditional_mean() {
    let out = tds(&["oracle"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mean: Vec<f64> = stdout(&out)
        .trim()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    // x^0_0 = 0 under N([0.5, 0.5], [[1, 0.9], [0.9, 1]]) gives E[x_1] = 0.5 - 0.9·0.5.
    assert!(mean[0].abs() < 1e-6, "{mean:?}");
    assert!((mean[1] - 0.05).abs() < 1e-6, "{mean:?}");
}

#[test]
fn sample_is_reproducible_for_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = tds(&[
            "sample",
            "--seed",
            "7",
            "--particles",
            "128",
            "--output-dir",
            dir_str(dir.path()),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stdout(&out).contains("particles = 128"));
    }
    for name in ["particles.csv", "diagnostics.csv"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
    let c = tempfile::tempdir().unwrap();
    tds(&[
        "sample",
        "--seed",
        "8",
        "--particles",
        "128",
        "--output-dir",
        dir_str(c.path()),
    ]);
    assert_ne!(
        fs::read(a.path().join("particles.csv")).unwrap(),
        fs::read(c.path().join("particles.csv")).unwrap()
    );
}

#[test]
fn benchmark_output_does_not_depend_on_worker_count() {
    let dirs: Vec<_> = ["1", "8"]
        .into_iter()
        .map(|workers| {
            let dir = tempfile::tempdir().unwrap();
            let out = tds(&[
                "benchmark",
                "--workers",
                workers,
                "--set",
                "particle_counts=16,64",
                "--set",
                "replicates=2",
                "--set",
                "record_timing=false",
                "--set",
                "grid_points=101",
                "--output-dir",
                dir_str(dir.path()),
            ]);
            assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
            assert!(stdout(&out).contains("slope"));
            dir
        })
        .collect();
    for name in ["benchmark.csv", "benchmark_aggregate.csv"] {
        let x = fs::read(dirs[0].path().join(name)).unwrap();
        let y = fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn config_errors_exit_one_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "# schedule\nsteps = 0\n").unwrap();
    let out = tds(&["sample", "--config", dir_str(&path)]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let err = stderr(&out);
    assert!(err.starts_with("ERROR:"), "{err}");
    assert!(err.contains("line 2") && err.contains("steps"), "{err}");

    let out = tds(&["sample", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("no_such_key"));

    let out = tds(&["sample", "--particles", "many"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).contains("particles"));

    let out = tds(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(stderr(&out).starts_with("ERROR:"));
}

#[test]
fn runtime_failures_exit_two_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("taken");
    fs::write(&blocker, "not a directory").unwrap();
    let out = tds(&[
        "sample",
        "--particles",
        "16",
        "--output-dir",
        dir_str(&blocker),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME), "{}", stderr(&out));
    assert!(stderr(&out).starts_with("ERROR:"));
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn failed_writes_leave_nothing_behind() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    let result = write_atomic(&path, |w| {
        w.write_all(b"a,b\n1,")?;
        Err(io::Error::other("interrupted"))
    });
    assert!(result.is_err());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);

    write_atomic(&path, |w| w.write_all(b"a,b\n1,2\n")).unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"a,b\n1,2\n");
}

#[test]
fn printed_config_round_trips() {
    let out = tds(&[
        "sample",
        "--print-config",
        "--set",
        "ess_threshold=0.3",
        "--seed",
        "11",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let doc = stdout(&out);
    assert!(doc.contains("ess_threshold = 0.3"), "{doc}");
    assert!(doc.contains("seed = 11"), "{doc}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round.conf");
    fs::write(&path, &doc).unwrap();
    let again = tds(&["sample", "--print-config", "--config", dir_str(&path)]);
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(stdout(&again), doc);
}

#[test]
fn worker_count_defaults_to_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(["oracle", "--print-config"])
        .env("TDS_WORKERS", "3")
        .output()
        .unwrap();
    assert!(stdout(&out).contains("workers = 3"), "{}", stdout(&out));
    let out = Command::new(env!("CARGO_BIN_EXE_tds"))
        .args(["oracle", "--print-config", "--workers", "5"])
        .env("TDS_WORKERS", "3")
        .output()
        .unwrap();
    assert!(stdout(&out).contains("workers = 5"));
}

#[test]
fn riemannian_check_reports_each_property() {
    let out = tds(&["riemannian-check", "--set", "riemannian_samples=20000"]);
    let text = stdout(&out);
    assert!(text.lines().count() >= 5, "{text}");
    assert!(
        text.lines()
            .all(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")),
        "{text}"
    );
    let expected = if text.contains("FAIL ") {
        EXIT_RUNTIME
    } else {
        0
    };
    assert_eq!(out.status.code(), Some(expected));
}

#[test]
fn help_and_version_succeed() {
    for flag in ["--help", "--version"] {
        let out = tds(&[flag]);
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}
