use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use queue_lottery::benchmarks::{dynamic_pricing_optimum, static_pricing_optimum};
use queue_lottery::equilibrium::{SteadyState, WaitingTimes};
use queue_lottery::model::{MarketParams, ObjectiveKind, PricePolicy};
use queue_lottery::simulator::{agreement, simulate, simulate_with_log, PriceSchedule, SimPolicy};
use queue_lottery::upper_ga::{run_ga_cached, FitnessCache, GaResult};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{self, Manifest, SchemeRow, SweepRow};

/// Simulation intervals are judged jointly at this level.
pub const SIM_CONFIDENCE: f64 = 0.95;
pub const SIM_MIN_SAMPLES: u64 = 100;

/// Result of a command; `converged = false` maps to exit code 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outcome {
    pub converged: bool,
}

struct Run {
    command: &'static str,
    dir: PathBuf,
    started: Instant,
    started_unix: u64,
    files: Vec<String>,
}

impl Run {
    fn start(command: &'static str, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Run {
            command,
            dir: dir.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            files: Vec::new(),
        })
    }

    fn wrote(&mut self, name: impl Into<String>) {
        self.files.push(name.into());
    }

    fn finish(mut self, cfg: &ExperimentConfig, converged: bool) -> Result<Outcome> {
        self.files.push(output::MANIFEST.into());
        let manifest = Manifest {
            command: self.command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            core_version: queue_lottery::VERSION.into(),
            config: cfg.to_toml(),
            seed: cfg.seed,
            objective: cfg.objective,
            files: self.files,
            converged,
            started_unix_seconds: self.started_unix,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
        };
        output::write_manifest(&self.dir, &manifest)?;
        if !converged {
            log::warn!("lower level did not converge; results in {} are flagged", self.dir.display());
        }
        Ok(Outcome { converged })
    }
}

fn solve_lottery(params: &MarketParams, cfg: &ExperimentConfig, kind: ObjectiveKind) -> Result<GaResult> {
    Ok(run_ga_cached(params, kind, &cfg.ga, &cfg.solver, &FitnessCache::new())?)
}

pub fn cmd_solve(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let params = cfg.market.to_params()?;
    let mut run = Run::start("solve", out)?;
    let ga = solve_lottery(&params, cfg, cfg.objective)?;
    let res = &ga.best_result;
    log::info!("solve best={} objective={:.9}", ga.best, res.objective_value);

    output::write_summary(out, &output::summary_rows(res))?;
    run.wrote(output::SUMMARY);
    output::write_lottery(out, &res.lottery)?;
    for m in 0..res.lottery.group_count() {
        run.wrote(output::lottery_file(m));
    }
    output::write_expected_waits(out, &res.equilibrium.waits.expected)?;
    run.wrote(output::EXPECTED_WAITS);
    output::write_steady_state(out, &res.equilibrium.steady.probabilities)?;
    run.wrote(output::STEADY_STATE);
    output::write_history(out, &ga.history)?;
    run.wrote(output::GA_HISTORY);
    run.finish(cfg, res.converged)
}

fn scheme_rows(params: &MarketParams, cfg: &ExperimentConfig) -> Result<Vec<SchemeRow>> {
    let ga = solve_lottery(params, cfg, cfg.objective)?;
    let dynamic = dynamic_pricing_optimum(params, cfg.objective)?;
    let fixed = static_pricing_optimum(params, cfg.objective)?;
    Ok(vec![
        SchemeRow::lottery(params, &ga.best_result),
        SchemeRow::benchmark(params, &dynamic),
        SchemeRow::benchmark(params, &fixed),
    ])
}

pub fn cmd_benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let params = cfg.market.to_params()?;
    let mut run = Run::start("benchmark", out)?;
    let rows = scheme_rows(&params, cfg)?;
    for r in &rows {
        log::info!("benchmark scheme={} capacities={} objective={:.9}", r.scheme, r.capacities, r.objective_value);
    }
    output::write_benchmark(out, &rows)?;
    run.wrote(output::BENCHMARK);
    let converged = rows.iter().all(|r| r.converged);
    run.finish(cfg, converged)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let params = cfg.market.to_params()?;
    let mut run = Run::start("sweep", out)?;
    let grid = cfg.sweep.grid()?;
    let points: Vec<(String, f64, MarketParams)> = match grid {
        None => vec![("none".into(), f64::NAN, params.clone())],
        Some((p, values)) => values
            .iter()
            .map(|&v| Ok((p.name().to_string(), v, p.apply(&params, v)?)))
            .collect::<Result<_>>()?,
    };
    let per_point: Vec<Vec<SweepRow>> = points
        .par_iter()
        .map(|(name, value, p)| {
            let rows = scheme_rows(p, cfg)?;
            log::info!("sweep {name}={value} done");
            Ok(rows
                .into_iter()
                .map(|row| SweepRow {
                    parameter: name.clone(),
                    value: *value,
                    row,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = per_point.into_iter().flatten().collect();
    output::write_sweep(out, &rows)?;
    run.wrote(output::SWEEP);
    let converged = rows.iter().all(|r| r.row.converged);
    run.finish(cfg, converged)
}

/// Simulates the policy stored in `run_dir` and compares it with the stored
/// analytic waits and occupancies.
pub fn cmd_simulate(
    cfg: Option<&ExperimentConfig>,
    run_dir: &Path,
    out: &Path,
    event_log: bool,
) -> Result<Outcome> {
    let manifest = output::read_manifest(run_dir).map_err(|e| ConfigError(format!("{e:#}")))?;
    if manifest.command != "solve" {
        return Err(ConfigError(format!("{} is not a solve run", run_dir.display())).into());
    }
    let stored = ExperimentConfig::from_toml(&manifest.config)?;
    let cfg = match cfg {
        Some(c) => ExperimentConfig {
            simulator: c.simulator.clone(),
            seed: c.seed,
            ..stored
        }
        .resolve(c.seed, None),
        None => stored,
    };
    let params = cfg.market.to_params()?;
    let summary = output::read_summary(run_dir)?;
    let caps = queue_lottery::model::CapacityVector::new(summary.iter().map(|r| r.capacity).collect())?;
    let lottery = output::read_lottery(run_dir, &caps, summary[0].over_capacity)?;
    let prices = PricePolicy::new(&params, summary.iter().map(|r| r.price).collect())?;
    let policy = SimPolicy::new(caps, lottery, PriceSchedule::Static(prices.prices().to_vec()))?;
    let waits = WaitingTimes {
        conditional: Vec::new(),
        expected: output::read_expected_waits(run_dir)?,
    };
    let steady = SteadyState {
        probabilities: output::read_steady_state(run_dir)?,
    };

    let mut run = Run::start("simulate", out)?;
    let stats = if event_log {
        let path = out.join(output::EVENTS);
        let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = std::io::BufWriter::new(file);
        let s = simulate_with_log(&params, &policy, &cfg.simulator, &mut w)?;
        std::io::Write::flush(&mut w)?;
        run.wrote(output::EVENTS);
        s
    } else {
        simulate(&params, &policy, &cfg.simulator)?
    };
    let report = agreement(&waits, &steady, &stats, cfg.simulator.batches, SIM_CONFIDENCE, SIM_MIN_SAMPLES, true);
    log::info!(
        "simulate covered={}/{} events={} profit_rate={:.6} welfare_rate={:.6}",
        report.covered(),
        report.tested(),
        stats.total_events,
        stats.profit_rate,
        stats.welfare_rate
    );
    output::write_agreement(out, &report)?;
    run.wrote(output::SIM_STATES);
    output::write_sim_summary(out, &output::sim_summary(&stats, &report))?;
    run.wrote(output::SIM_SUMMARY);
    run.finish(&cfg, true)
}
