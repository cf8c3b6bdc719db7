//! Discrete-event simulation of the virtual queue with lottery insertions.
//!
//! One exponential clock with the total rate `sum_m lambda_m + mu` drives the
//! run; each tick is a group-`m` driver arrival or a passenger arrival by
//! categorical thinning. Drivers arriving in the measurement window are
//! tracked until matched, so the run continues past the horizon (without
//! tracking new arrivals) until every tracked driver has left.

use std::collections::VecDeque;
use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::benchmarks::BenchmarkResult;
use crate::equilibrium::{SteadyState, WaitingTimes};
use crate::error::{Error, Result};
use crate::lower_solver::LowerLevelResult;
use crate::model::{CapacityVector, LotteryPolicy, MarketParams};

pub const EVENT_LOG_HEADER: &str = "time,event,group,position,length_before,length_after";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Events in the run, warmup included.
    pub events: u64,
    /// Fraction of `events` discarded before measurement.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Batches for batch-means standard errors.
    pub batches: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            events: 1_000_000,
            warmup_fraction: 0.1,
            seed: 0,
            batches: 50,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.events == 0 {
            return Err(Error::InvalidOptions("simulation horizon must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return Err(Error::InvalidOptions("warmup_fraction must lie in [0, 0.5]".into()));
        }
        if self.batches < 2 {
            return Err(Error::InvalidOptions("at least two batches are needed".into()));
        }
        let measured = self.events - self.warmup_events();
        if measured < self.batches as u64 {
            return Err(Error::InvalidOptions("fewer measured events than batches".into()));
        }
        Ok(())
    }

    fn warmup_events(&self) -> u64 {
        (self.events as f64 * self.warmup_fraction).floor() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceSchedule {
    /// One price per group.
    Static(Vec<f64>),
    /// `prices[m][n]` for `n < N_m`.
    StateDependent(Vec<Vec<f64>>),
}

impl PriceSchedule {
    fn price(&self, group: usize, queue_length: usize) -> f64 {
        match self {
            PriceSchedule::Static(p) => p[group],
            PriceSchedule::StateDependent(p) => p[group][queue_length],
        }
    }
}

/// Policy under test: thresholds, insertion lotteries and prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub capacities: CapacityVector,
    pub lottery: LotteryPolicy,
    pub prices: PriceSchedule,
}

impl SimPolicy {
    pub fn new(capacities: CapacityVector, lottery: LotteryPolicy, prices: PriceSchedule) -> Result<Self> {
        lottery.check_capacities(&capacities)?;
        let ok = match &prices {
            PriceSchedule::Static(p) => p.len() == capacities.len(),
            PriceSchedule::StateDependent(p) => {
                p.len() == capacities.len()
                    && p.iter().enumerate().all(|(m, row)| row.len() == capacities.get(m))
            }
        };
        if !ok {
            return Err(Error::DimensionMismatch("price schedule does not match capacities".into()));
        }
        Ok(SimPolicy {
            capacities,
            lottery,
            prices,
        })
    }

    pub fn from_lower(result: &LowerLevelResult) -> Self {
        SimPolicy {
            capacities: result.equilibrium.capacities.clone(),
            lottery: result.lottery.clone(),
            prices: PriceSchedule::Static(result.prices.prices().to_vec()),
        }
    }

    /// FIFO insertion with the benchmark's state prices.
    pub fn from_benchmark(result: &BenchmarkResult) -> Self {
        SimPolicy {
            capacities: result.capacities.clone(),
            lottery: LotteryPolicy::fifo(&result.capacities),
            prices: PriceSchedule::StateDependent(result.prices.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Conservation {
    pub arrived: u64,
    pub joined: u64,
    pub balked: u64,
    pub matched: u64,
    pub in_queue_at_end: u64,
    /// Passengers who found the queue empty.
    pub unserved_passengers: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.arrived == self.matched + self.balked + self.in_queue_at_end
            && self.joined == self.matched + self.in_queue_at_end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    /// Time-average occupancy of each queue length in the measurement window.
    pub occupancy: Vec<f64>,
    pub occupancy_se: Vec<f64>,
    /// Events observed at each length in the window.
    pub occupancy_samples: Vec<u64>,
    /// `waits[m][n]`: mean wait of group-`m` drivers who joined at length `n`.
    pub waits: Vec<Vec<f64>>,
    pub wait_se: Vec<Vec<f64>>,
    pub wait_samples: Vec<Vec<u64>>,
    pub profit_rate: f64,
    pub profit_rate_se: f64,
    pub welfare_rate: f64,
    pub welfare_rate_se: f64,
    /// Events including the drain after the horizon.
    pub total_events: u64,
    pub measured_hours: f64,
    pub max_queue_length: usize,
    pub conservation: Conservation,
}

struct Driver {
    group: usize,
    arrival: f64,
    length: usize,
    /// Batch index when the arrival falls in the measurement window.
    batch: Option<usize>,
    price: f64,
}

/// Per-batch sums for ratio estimators.
#[derive(Clone)]
struct Batch {
    duration: f64,
    time_at: Vec<f64>,
    wait_sum: Vec<Vec<f64>>,
    wait_count: Vec<Vec<u64>>,
    profit: f64,
    welfare: f64,
}

/// Ratio estimator `sum y / sum x` with batch-means standard error.
fn ratio_estimate(y: &[f64], x: &[f64]) -> (f64, f64) {
    let b = y.len() as f64;
    let sx: f64 = x.iter().sum();
    if sx == 0.0 {
        return (f64::NAN, f64::NAN);
    }
    let est = y.iter().sum::<f64>() / sx;
    let mean_x = sx / b;
    let ss: f64 = y.iter().zip(x).map(|(yi, xi)| (yi - est * xi).powi(2)).sum();
    (est, (ss / (b * (b - 1.0))).sqrt() / mean_x)
}

pub fn simulate(params: &MarketParams, policy: &SimPolicy, config: &SimConfig) -> Result<SimStats> {
    run(params, policy, config, None)
}

/// As [`simulate`], also writing one CSV record per event.
pub fn simulate_with_log(
    params: &MarketParams,
    policy: &SimPolicy,
    config: &SimConfig,
    log: &mut dyn Write,
) -> Result<SimStats> {
    run(params, policy, config, Some(log))
}

fn io_err(e: std::io::Error) -> Error {
    Error::InvalidOptions(format!("event log: {e}"))
}

fn run(
    params: &MarketParams,
    policy: &SimPolicy,
    config: &SimConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<SimStats> {
    config.validate()?;
    policy.capacities.check_groups(params)?;
    policy.lottery.check_capacities(&policy.capacities)?;
    let groups = params.group_count();
    let caps = &policy.capacities;
    let top = caps.rejection_threshold();
    let mu = params.passenger_rate();
    let r = params.driver_opportunity_rate();
    let nu = params.platform_opportunity_rate();

    let mut weights: Vec<f64> = params.arrival_rates().to_vec();
    weights.push(mu);
    let total_rate: f64 = weights.iter().sum();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let clock = Exp::new(total_rate).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let positions: Vec<Vec<WeightedIndex<f64>>> = (0..groups)
        .map(|m| {
            (0..caps.get(m))
                .map(|n| WeightedIndex::new(policy.lottery.row(m, n)).expect("lottery rows are normalized"))
                .collect()
        })
        .collect();

    let warmup = config.warmup_events();
    let measured = config.events - warmup;
    let batch_len = measured.div_ceil(config.batches as u64);
    let empty_batch = Batch {
        duration: 0.0,
        time_at: vec![0.0; top + 1],
        wait_sum: (0..groups).map(|m| vec![0.0; caps.get(m)]).collect(),
        wait_count: (0..groups).map(|m| vec![0; caps.get(m)]).collect(),
        profit: 0.0,
        welfare: 0.0,
    };
    let mut batches = vec![empty_batch; config.batches];
    let mut occupancy_samples = vec![0u64; top + 1];

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut queue: VecDeque<Driver> = VecDeque::with_capacity(top + 1);
    let mut counters = Conservation::default();
    let mut tracked_in_queue = 0u64;
    let mut time = 0.0;
    let mut event = 0u64;
    let mut max_len = 0;
    if let Some(w) = log.as_mut() {
        writeln!(w, "{EVENT_LOG_HEADER}").map_err(io_err)?;
    }

    while event < config.events || tracked_in_queue > 0 {
        let dt = clock.sample(&mut rng);
        let len = queue.len();
        let batch = (event >= warmup && event < config.events).then(|| ((event - warmup) / batch_len) as usize);
        if let Some(b) = batch {
            batches[b].duration += dt;
            batches[b].time_at[len] += dt;
            occupancy_samples[len] += 1;
        }
        time += dt;
        event += 1;

        let kind = pick.sample(&mut rng);
        if kind < groups {
            counters.arrived += 1;
            if len < caps.get(kind) {
                let pos = positions[kind][len].sample(&mut rng);
                queue.insert(
                    pos,
                    Driver {
                        group: kind,
                        arrival: time,
                        length: len,
                        batch,
                        price: policy.prices.price(kind, len),
                    },
                );
                counters.joined += 1;
                if batch.is_some() {
                    tracked_in_queue += 1;
                }
                max_len = max_len.max(queue.len());
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{time},arrival,{},{},{len},{}", kind + 1, pos + 1, len + 1).map_err(io_err)?;
                }
            } else {
                counters.balked += 1;
                if let Some(w) = log.as_mut() {
                    writeln!(w, "{time},balk,{},,{len},{len}", kind + 1).map_err(io_err)?;
                }
            }
        } else if let Some(d) = queue.pop_front() {
            counters.matched += 1;
            if let Some(b) = d.batch {
                tracked_in_queue -= 1;
                let wait = time - d.arrival;
                let bt = &mut batches[b];
                bt.wait_sum[d.group][d.length] += wait;
                bt.wait_count[d.group][d.length] += 1;
                bt.profit += d.price - params.platform_trip_cost() - nu * wait;
                bt.welfare += params.trip_surplus(d.group) - (r + nu) * wait;
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{time},match,{},1,{len},{}", d.group + 1, len - 1).map_err(io_err)?;
            }
        } else {
            counters.unserved_passengers += 1;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{time},passenger,,,0,0").map_err(io_err)?;
            }
        }
    }
    counters.in_queue_at_end = queue.len() as u64;

    let durations: Vec<f64> = batches.iter().map(|b| b.duration).collect();
    let mut occupancy = Vec::with_capacity(top + 1);
    let mut occupancy_se = Vec::with_capacity(top + 1);
    for n in 0..=top {
        let y: Vec<f64> = batches.iter().map(|b| b.time_at[n]).collect();
        let (p, se) = ratio_estimate(&y, &durations);
        occupancy.push(p);
        occupancy_se.push(se);
    }
    let mut waits = Vec::with_capacity(groups);
    let mut wait_se = Vec::with_capacity(groups);
    let mut wait_samples = Vec::with_capacity(groups);
    for m in 0..groups {
        let (mut w, mut s, mut c) = (Vec::new(), Vec::new(), Vec::new());
        for n in 0..caps.get(m) {
            let y: Vec<f64> = batches.iter().map(|b| b.wait_sum[m][n]).collect();
            let x: Vec<f64> = batches.iter().map(|b| b.wait_count[m][n] as f64).collect();
            let (est, se) = ratio_estimate(&y, &x);
            w.push(est);
            s.push(se);
            c.push(batches.iter().map(|b| b.wait_count[m][n]).sum());
        }
        waits.push(w);
        wait_se.push(s);
        wait_samples.push(c);
    }
    let (profit_rate, profit_rate_se) =
        ratio_estimate(&batches.iter().map(|b| b.profit).collect::<Vec<_>>(), &durations);
    let (welfare_rate, welfare_rate_se) =
        ratio_estimate(&batches.iter().map(|b| b.welfare).collect::<Vec<_>>(), &durations);
    Ok(SimStats {
        occupancy,
        occupancy_se,
        occupancy_samples,
        waits,
        wait_se,
        wait_samples,
        profit_rate,
        profit_rate_se,
        welfare_rate,
        welfare_rate_se,
        total_events: event,
        measured_hours: durations.iter().sum(),
        max_queue_length: max_len,
        conservation: counters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Wait,
    Occupancy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub quantity: Quantity,
    /// `None` for occupancy.
    pub group: Option<usize>,
    pub queue_length: usize,
    pub analytic: f64,
    pub empirical: f64,
    pub standard_error: f64,
    pub samples: u64,
    /// Row had enough samples to be judged.
    pub tested: bool,
    pub half_width: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub confidence: f64,
    pub min_samples: u64,
    /// Intervals are simultaneous over all tested rows (Bonferroni).
    pub family_wise: bool,
    pub rows: Vec<AgreementRow>,
}

impl AgreementReport {
    pub fn tested(&self) -> usize {
        self.rows.iter().filter(|r| r.tested).count()
    }

    pub fn covered(&self) -> usize {
        self.rows.iter().filter(|r| r.tested && r.covered).count()
    }

    pub fn all_covered(&self) -> bool {
        self.tested() == self.covered()
    }
}

/// Compares analytic waits and occupancies with simulation estimates.
///
/// Batch-means intervals use Student's t with `batches - 1` degrees of
/// freedom. With `family_wise` the level is split over the tested rows so
/// that all intervals hold jointly with probability `confidence`.
pub fn agreement(
    waits: &WaitingTimes,
    steady: &SteadyState,
    stats: &SimStats,
    batches: usize,
    confidence: f64,
    min_samples: u64,
    family_wise: bool,
) -> AgreementReport {
    let mut rows = Vec::new();
    for (m, row) in waits.expected.iter().enumerate() {
        for (n, &w) in row.iter().enumerate() {
            rows.push(AgreementRow {
                quantity: Quantity::Wait,
                group: Some(m),
                queue_length: n,
                analytic: w,
                empirical: stats.waits[m][n],
                standard_error: stats.wait_se[m][n],
                samples: stats.wait_samples[m][n],
                tested: stats.wait_samples[m][n] >= min_samples,
                half_width: f64::NAN,
                covered: false,
            });
        }
    }
    for (n, &p) in steady.probabilities.iter().enumerate() {
        rows.push(AgreementRow {
            quantity: Quantity::Occupancy,
            group: None,
            queue_length: n,
            analytic: p,
            empirical: stats.occupancy.get(n).copied().unwrap_or(0.0),
            standard_error: stats.occupancy_se.get(n).copied().unwrap_or(0.0),
            samples: stats.occupancy_samples.get(n).copied().unwrap_or(0),
            tested: stats.occupancy_samples.get(n).copied().unwrap_or(0) >= min_samples,
            half_width: f64::NAN,
            covered: false,
        });
    }
    let tested = rows.iter().filter(|r| r.tested).count().max(1);
    let alpha = 1.0 - confidence;
    let alpha = if family_wise { alpha / tested as f64 } else { alpha };
    let t = StudentsT::new(0.0, 1.0, (batches - 1) as f64).expect("at least two batches");
    let quantile = t.inverse_cdf(1.0 - alpha / 2.0);
    for row in &mut rows {
        row.half_width = quantile * row.standard_error;
        row.covered = (row.analytic - row.empirical).abs() <= row.half_width;
    }
    AgreementReport {
        confidence,
        min_samples,
        family_wise,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_waiting_times, steady_state};

    fn single(lambda: f64, mu: f64) -> MarketParams {
        MarketParams::new(vec![lambda], mu, vec![100.0], 1.0, 1.0, 0.1).unwrap()
    }

    fn policy(caps: &CapacityVector, lottery: LotteryPolicy) -> SimPolicy {
        SimPolicy::new(caps.clone(), lottery, PriceSchedule::Static(vec![10.0; caps.len()])).unwrap()
    }

    #[test]
    fn fifo_waits_and_symmetric_occupancy() {
        let p = single(1.0, 1.0);
        let caps = CapacityVector::new(vec![2]).unwrap();
        let cfg = SimConfig { events: 400_000, seed: 5, ..SimConfig::default() };
        let s = simulate(&p, &policy(&caps, LotteryPolicy::fifo(&caps)), &cfg).unwrap();
        for n in 0..2 {
            assert!((s.waits[0][n] - (n + 1) as f64).abs() <= 4.0 * s.wait_se[0][n], "n={n}");
        }
        for n in 0..3 {
            assert!((s.occupancy[n] - 1.0 / 3.0).abs() <= 4.0 * s.occupancy_se[n]);
        }
        assert!((s.occupancy.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.conservation.holds());
        assert!(s.max_queue_length <= 2);
    }

    #[test]
    fn lifo_hand_solved_waits() {
        let p = single(1.0, 1.0);
        let caps = CapacityVector::new(vec![2]).unwrap();
        let cfg = SimConfig { events: 400_000, seed: 9, ..SimConfig::default() };
        let s = simulate(&p, &policy(&caps, LotteryPolicy::lifo(&caps)), &cfg).unwrap();
        assert!((s.waits[0][0] - 2.0).abs() <= 4.0 * s.wait_se[0][0]);
        assert!((s.waits[0][1] - 1.0).abs() <= 4.0 * s.wait_se[0][1]);
    }

    #[test]
    fn deterministic_and_logged() {
        let p = MarketParams::airport();
        let caps = CapacityVector::new(vec![3, 5]).unwrap();
        let pol = policy(&caps, LotteryPolicy::uniform(&caps));
        let cfg = SimConfig { events: 2_000, seed: 1, batches: 10, ..SimConfig::default() };
        let mut buf = Vec::new();
        let a = simulate_with_log(&p, &pol, &cfg, &mut buf).unwrap();
        let b = simulate(&p, &pol, &cfg).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(EVENT_LOG_HEADER));
        let records: Vec<&str> = lines.collect();
        assert_eq!(records.len() as u64, a.total_events);
        let arrivals = records.iter().filter(|l| l.split(',').nth(1) == Some("arrival")).count() as u64;
        let balks = records.iter().filter(|l| l.split(',').nth(1) == Some("balk")).count() as u64;
        let matches = records.iter().filter(|l| l.split(',').nth(1) == Some("match")).count() as u64;
        assert_eq!(arrivals, a.conservation.joined);
        assert_eq!(balks, a.conservation.balked);
        assert_eq!(matches, a.conservation.matched);
        let counted: u64 = a.wait_samples.iter().flatten().sum();
        assert!(counted <= matches);
    }

    #[test]
    fn config_validation() {
        let p = single(1.0, 1.0);
        let caps = CapacityVector::new(vec![1]).unwrap();
        let pol = policy(&caps, LotteryPolicy::fifo(&caps));
        for cfg in [
            SimConfig { events: 0, ..SimConfig::default() },
            SimConfig { warmup_fraction: 0.6, ..SimConfig::default() },
            SimConfig { batches: 1, ..SimConfig::default() },
        ] {
            assert!(simulate(&p, &pol, &cfg).is_err());
        }
    }

    #[test]
    fn agreement_on_random_lottery() {
        let p = MarketParams::airport();
        let caps = CapacityVector::new(vec![4, 7]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lot = LotteryPolicy::random(&caps, &mut rng);
        let waits = solve_waiting_times(&p, &caps, &lot).unwrap();
        let steady = steady_state(&p, &caps).unwrap();
        let cfg = SimConfig { events: 500_000, seed: 3, ..SimConfig::default() };
        let s = simulate(&p, &policy(&caps, lot), &cfg).unwrap();
        let rep = agreement(&waits, &steady, &s, cfg.batches, 0.99, 100, true);
        assert!(rep.tested() > 10);
        assert!(rep.all_covered(), "{:?}", rep.rows.iter().filter(|r| r.tested && !r.covered).collect::<Vec<_>>());
    }
}
