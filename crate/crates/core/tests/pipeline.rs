use std::fs;
use std::path::Path;
use std::process::Command;

use spin_deom::bath::{BathSpec, Beta};
use spin_deom::deom::{Checkpoint, HierarchyParams, Propagator, SystemSpec};
use spin_deom::expfit::{fit_bath, FitStrategy};
use spin_deom::observables::Trajectory;
use spin_deom::quadrature::QuadratureSpec;
use spin_deom::runner::{self, RunConfig, RunOptions, SweepConfig};
use spin_deom::Execution;

/// Cheap dephasing-free configuration: weak coupling, low tier, short window.
fn small_config(dir: &Path) -> RunConfig {
    let mut c = runner::preset("fig1b").unwrap();
    c.fit = FitStrategy::new(3, 3);
    c.hierarchy.tier = 3;
    c.hierarchy.t_final = 1.0;
    c.hierarchy.stride = 20;
    c.output.dir = dir.to_path_buf();
    c
}

#[test]
fn run_writes_three_artifacts_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_config(&tmp.path().join("a"));
    let mut b = a.clone();
    b.output.dir = tmp.path().join("b");
    b.hierarchy.execution = Execution::Sequential;
    let ra = runner::run(&a, &RunOptions::default()).unwrap();
    runner::run(&b, &RunOptions::default()).unwrap();
    for f in [runner::TRAJECTORY_FILE, runner::RUN_FILE, runner::FIT_FILE] {
        assert!(a.output.dir.join(f).is_file(), "{f}");
    }
    let csv_a = fs::read(a.output.dir.join(runner::TRAJECTORY_FILE)).unwrap();
    let csv_b = fs::read(b.output.dir.join(runner::TRAJECTORY_FILE)).unwrap();
    assert_eq!(csv_a, csv_b, "sequential and parallel runs differ");
    runner::run(&a, &RunOptions::default()).unwrap();
    assert_eq!(csv_a, fs::read(a.output.dir.join(runner::TRAJECTORY_FILE)).unwrap());

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.output.dir.join(runner::RUN_FILE)).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], a.hash());
    assert_eq!(summary["n_records"], ra.trajectory.len());
    let fit: serde_json::Value = serde_json::from_slice(&fs::read(a.output.dir.join(runner::FIT_FILE)).unwrap()).unwrap();
    assert_eq!(fit["terms"].as_array().unwrap().len(), ra.fit.series.len());
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let spec = BathSpec::ohmic(0.1, 6.0, Beta::Infinite).unwrap();
    let (series, _, _) = fit_bath(&spec, &FitStrategy::new(3, 3), &QuadratureSpec::default(), Execution::Parallel).unwrap();
    let sys = SystemSpec::new(0.3, 1.0);
    let params = HierarchyParams { tier: 4, t_final: 1.0, stride: 10, ..HierarchyParams::default() };

    let mut straight = Propagator::new(&sys, &series, &params).unwrap();
    let mut full = Trajectory::default();
    straight.run_into(&mut full).unwrap();

    let mut first = Propagator::new(&sys, &series, &params).unwrap();
    let mut split = Trajectory::default();
    first.run_until(170, &mut split).unwrap();
    let json = serde_json::to_string(&first.checkpoint()).unwrap();
    let cp: Checkpoint = serde_json::from_str(&json).unwrap();
    let mut second = Propagator::resume(&sys, &cp).unwrap();
    second.run_into(&mut split).unwrap();

    assert_eq!(full.times, split.times);
    assert_eq!(full.population, split.population);
    assert_eq!(full.states, split.states);
    assert_eq!(straight.rho(), second.rho());
}

#[test]
fn runner_resume_reproduces_the_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(tmp.path());
    c.output.checkpoint_every = 150;
    runner::run(&c, &RunOptions::default()).unwrap();
    let first = fs::read(tmp.path().join(runner::TRAJECTORY_FILE)).unwrap();
    assert!(tmp.path().join(runner::CHECKPOINT_FILE).is_file());
    runner::run(&c, &RunOptions { resume: true, ..RunOptions::default() }).unwrap();
    assert_eq!(first, fs::read(tmp.path().join(runner::TRAJECTORY_FILE)).unwrap());

    // A checkpoint from another configuration is refused.
    let mut other = c.clone();
    other.system.epsilon = 0.5;
    let err = runner::run(&other, &RunOptions { resume: true, ..RunOptions::default() }).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn sweep_runs_members_and_tabulates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(tmp.path());
    c.sweep = Some(SweepConfig { tiers: vec![2, 3], filter_tols: vec![5e-7, 0.0], ..SweepConfig::default() });
    let out = runner::run_sweep(&c, &RunOptions::default()).unwrap();
    assert_eq!(out.members.len(), 4);
    for (label, o) in &out.members {
        assert!(o.dir.join(runner::TRAJECTORY_FILE).is_file(), "{label}");
    }
    for i in 0..4 {
        assert_eq!(out.deviation[i][i], 0.0);
        for j in 0..4 {
            assert_eq!(out.deviation[i][j], out.deviation[j][i]);
            assert!(out.deviation[i][j] < 1e-2);
        }
    }
    let table = fs::read_to_string(tmp.path().join(runner::SWEEP_SUMMARY_FILE)).unwrap();
    assert!(table.contains("tier2_filter5e-7") && table.contains("tier3_filter0e0"), "{table}");
}

#[test]
fn isolated_preset_passes_the_rabi_check() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = runner::preset("rabi").unwrap();
    c.output.dir = tmp.path().to_path_buf();
    let out = runner::run(&c, &RunOptions::default()).unwrap();
    assert!(out.summary.rabi_max_error.unwrap() < 1e-8);
}

fn cli(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_spin-deom"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let (code, _) = cli(&["preset", "rabi", "--out", "rabi"], dir);
    assert_eq!(code, 0);
    for f in [runner::TRAJECTORY_FILE, runner::RUN_FILE, runner::FIT_FILE] {
        assert!(dir.join("rabi").join(f).is_file());
    }

    fs::write(dir.join("bad.toml"), "[bath]\nalpha = -1.0\n[hierarchy]\ndt = -0.1\n").unwrap();
    let (code, text) = cli(&["validate", "bad.toml"], dir);
    assert_eq!(code, 1);
    assert!(text.contains("bath.alpha") && text.contains("hierarchy.dt"), "{text}");

    let (code, text) = cli(&["preset", "fig2"], dir);
    assert_eq!(code, 1);
    assert!(text.contains("--allow-expensive"), "{text}");

    let (code, text) = cli(&["preset", "nope"], dir);
    assert_eq!(code, 1);
    assert!(text.contains("fig1a"), "{text}");

    // Explicit RK4 at dt = 2 is unstable for the Rabi frequency 2.
    fs::write(
        dir.join("unstable.toml"),
        "[bath]\nstatistics = \"none\"\n[hierarchy]\ndt = 2.0\nt_final = 20.0\nstride = 1000\n[output]\ndir = \"unstable\"\n",
    )
    .unwrap();
    let (code, text) = cli(&["run", "unstable.toml"], dir);
    assert_eq!(code, 3, "{text}");

    let (code, text) = cli(&["preset", "rabi", "--print"], dir);
    assert_eq!(code, 0);
    fs::write(dir.join("rabi.toml"), &text).unwrap();
    let (code, _) = cli(&["validate", "rabi.toml", "--override", "hierarchy.tier=3"], dir);
    assert_eq!(code, 0);
}
