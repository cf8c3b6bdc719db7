use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use queue_lottery::benchmarks::fifo_wait;
use queue_lottery::lower_solver::solve_lower;
use queue_lottery::model::{CapacityVector, LotteryPolicy};
use queue_lottery::upper_ga::run_ga;
use queue_lottery_cli::commands::{cmd_benchmark, cmd_simulate, cmd_solve, cmd_sweep};
use queue_lottery_cli::config::{ConfigError, ExperimentConfig};
use queue_lottery_cli::{exit_code, output, output_dir, EXIT_CONFIG, EXIT_OK};

const SMALL: &str = r#"
objective = "profit"
seed = 7

[market]
arrival_rates_per_hour = [1.0, 0.8]
passenger_rate_per_hour = 3.0
rewards_per_trip = [12.0, 14.0]
driver_opportunity_cost_per_hour = 4.0
platform_opportunity_cost_per_hour = 1.0
trip_duration_minutes = 30.0

[ga]
population = 10
max_generations = 20

[simulator]
events = 200000
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

fn with_sweep(steps: usize) -> ExperimentConfig {
    let text = format!(
        "{SMALL}\n[sweep]\nparameter = \"demand_supply_ratio\"\nstart = 1.2\nstop = 2.0\nsteps = {steps}\n"
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

/// Every file of a run except the manifest, which carries timestamps.
fn result_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != output::MANIFEST)
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_queue-lottery"));
    c.env("RUST_LOG", "error").stderr(Stdio::null());
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn solve_files_round_trip() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("solve");
    assert!(cmd_solve(&cfg, &out).unwrap().converged);

    let params = cfg.market.to_params().unwrap();
    let ga = run_ga(&params, cfg.objective, &cfg.ga, &cfg.solver).unwrap();
    let res = &ga.best_result;

    assert_eq!(output::read_summary(&out).unwrap(), output::summary_rows(res));
    let caps = CapacityVector::new(output::read_summary(&out).unwrap().iter().map(|r| r.capacity).collect()).unwrap();
    assert_eq!(caps, ga.best);
    let rule = output::read_summary(&out).unwrap()[0].over_capacity;
    assert_eq!(output::read_lottery(&out, &caps, rule).unwrap(), res.lottery);
    assert_eq!(output::read_expected_waits(&out).unwrap(), res.equilibrium.waits.expected);
    assert_eq!(output::read_steady_state(&out).unwrap(), res.equilibrium.steady.probabilities);
    assert_eq!(output::read_history(&out).unwrap(), ga.history);

    let manifest = output::read_manifest(&out).unwrap();
    assert_eq!(manifest.command, "solve");
    assert_eq!(manifest.seed, Some(7));
    assert!(manifest.converged);
    assert_eq!(ExperimentConfig::from_toml(&manifest.config).unwrap(), cfg);
    for f in &manifest.files {
        assert!(out.join(f).exists(), "{f} listed but missing");
    }
    assert_eq!(manifest.files.len(), result_files(&out).len() + 1);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg = with_sweep(3);
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let root = tmp.path().join(tag);
        cmd_solve(&cfg, &root.join("solve")).unwrap();
        cmd_benchmark(&cfg, &root.join("benchmark")).unwrap();
        cmd_sweep(&cfg, &root.join("sweep")).unwrap();
        cmd_simulate(None, &root.join("solve"), &root.join("simulate"), true).unwrap();
        root
    };
    let a = run("a");
    let b = run("b");
    for cmd in ["solve", "benchmark", "sweep", "simulate"] {
        let fa = result_files(&a.join(cmd));
        assert!(!fa.is_empty());
        assert_eq!(fa, result_files(&b.join(cmd)), "{cmd} outputs differ");
    }
}

#[test]
fn benchmark_and_sweep_round_trip() {
    let cfg = with_sweep(3);
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("benchmark");
    cmd_benchmark(&cfg, &bench).unwrap();
    let rows = output::read_benchmark(&bench).unwrap();
    let schemes: Vec<&str> = rows.iter().map(|r| r.scheme.as_str()).collect();
    assert_eq!(schemes, ["lottery", "dynamic", "static"]);
    // lottery control nests both pricing schemes
    assert!(rows[0].objective_value >= rows[1].objective_value - 1e-6);
    assert!(rows[1].objective_value >= rows[2].objective_value);

    let sweep = tmp.path().join("sweep");
    cmd_sweep(&cfg, &sweep).unwrap();
    let rows = output::read_sweep(&sweep).unwrap();
    assert_eq!(rows.len(), 9);
    let values: Vec<f64> = rows.iter().step_by(3).map(|r| r.value).collect();
    assert_eq!(values, [1.2, 1.6, 2.0]);
    assert!(rows.iter().all(|r| r.parameter == "demand_supply_ratio"));
}

#[test]
fn empty_sweep_matches_solve() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    cmd_solve(&cfg, &tmp.path().join("solve")).unwrap();
    cmd_sweep(&cfg, &tmp.path().join("sweep")).unwrap();
    let summary = output::read_summary(&tmp.path().join("solve")).unwrap();
    let rows = output::read_sweep(&tmp.path().join("sweep")).unwrap();
    assert_eq!(rows.len(), 3);
    let lottery = &rows[0];
    assert_eq!(lottery.parameter, "none");
    assert!(lottery.value.is_nan());
    assert_eq!(lottery.row.scheme, "lottery");
    let caps: Vec<String> = summary.iter().map(|r| r.capacity.to_string()).collect();
    assert_eq!(lottery.row.capacities, caps.join(";"));
    assert_eq!(lottery.row.objective_value, summary[0].objective_value);
}

#[test]
fn injected_fifo_policy_reproduces_back_of_queue_waits() {
    let cfg = small();
    let params = cfg.market.to_params().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("solve");
    cmd_solve(&cfg, &run).unwrap();

    let caps = CapacityVector::new(output::read_summary(&run).unwrap().iter().map(|r| r.capacity).collect()).unwrap();
    let fifo = LotteryPolicy::fifo(&caps);
    output::write_lottery(&run, &fifo).unwrap();
    let waits: Vec<Vec<f64>> = (0..caps.len())
        .map(|m| (0..caps.get(m)).map(|n| fifo_wait(&params, n)).collect())
        .collect();
    output::write_expected_waits(&run, &waits).unwrap();

    let out = tmp.path().join("simulate");
    cmd_simulate(None, &run, &out, false).unwrap();
    let rows = output::read_agreement(&out).unwrap();
    let tested: Vec<_> = rows.iter().filter(|r| r.tested).collect();
    assert!(tested.len() >= caps.rejection_threshold());
    assert!(tested.iter().all(|r| r.covered), "{tested:?}");
    let summary: BTreeMap<String, f64> = output::read_sim_summary(&out).unwrap().into_iter().collect();
    assert_eq!(summary["states_tested"], summary["states_covered"]);
}

#[test]
fn simulate_settings_can_be_overridden() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("solve");
    cmd_solve(&cfg, &run).unwrap();
    let mut other = cfg.clone();
    other.simulator.events = 50_000;
    let other = other.resolve(Some(99), None);
    cmd_simulate(Some(&other), &run, &tmp.path().join("sim"), false).unwrap();
    let manifest = output::read_manifest(&tmp.path().join("sim")).unwrap();
    let used = ExperimentConfig::from_toml(&manifest.config).unwrap();
    assert_eq!(used.simulator.events, 50_000);
    assert_eq!(used.simulator.seed, 99);
    assert_eq!(used.market, cfg.market);
}

#[test]
fn simulating_a_non_solve_run_is_a_config_error() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    let bench = tmp.path().join("benchmark");
    cmd_benchmark(&cfg, &bench).unwrap();
    let err = cmd_simulate(None, &bench, &tmp.path().join("sim"), false).unwrap_err();
    assert!(err.downcast_ref::<ConfigError>().is_some());
    assert_eq!(exit_code(&Err(err)), EXIT_CONFIG);
}

#[test]
fn output_directory_precedence() {
    let flag = Path::new("/tmp/flag");
    let configured = Path::new("/tmp/configured");
    assert_eq!(output_dir(Some(flag), Some(configured), "solve"), flag);
    assert_eq!(output_dir(None, Some(configured), "solve"), configured);
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();

    let cfg = write_config(tmp.path(), SMALL);
    let run = tmp.path().join("run");
    let status = binary()
        .args(["solve", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));

    // zero-length simulation is rejected before it starts
    let zero = tmp.path().join("zero.toml");
    std::fs::write(&zero, SMALL.replace("events = 200000", "events = 0")).unwrap();
    let status = binary()
        .args(["simulate", "--run"])
        .arg(&run)
        .arg("--config")
        .arg(&zero)
        .arg("--out")
        .arg(tmp.path().join("sim"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
    assert!(!tmp.path().join("sim").exists());

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, SMALL.replace("[ga]", "[ga]\nunknown_key = 1")).unwrap();
    let status = binary().args(["solve", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));

    let status = binary()
        .args(["simulate", "--run"])
        .arg(tmp.path().join("missing"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
}

#[test]
fn binary_uses_environment_output_root_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let root = tmp.path().join("root");
    let status = binary()
        .env("QUEUE_LOTTERY_OUT", &root)
        .args(["solve", "--seed", "3", "--objective", "welfare", "--workers", "2", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_OK));
    let manifest = output::read_manifest(&root.join("solve")).unwrap();
    assert_eq!(manifest.seed, Some(3));
    assert_eq!(manifest.objective, queue_lottery::model::ObjectiveKind::Welfare);
    let used = ExperimentConfig::from_toml(&manifest.config).unwrap();
    assert_eq!((used.ga.seed, used.solver.seed, used.simulator.seed), (3, 3, 3));

    let params = used.market.to_params().unwrap();
    let summary = output::read_summary(&root.join("solve")).unwrap();
    let caps = CapacityVector::new(summary.iter().map(|r| r.capacity).collect()).unwrap();
    let direct = solve_lower(&params, &caps, used.objective, &used.solver).unwrap();
    assert_eq!(summary[0].objective_value, direct.objective_value);
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
