//! Waiting-time equilibrium for fixed capacities and lotteries, and the
//! stationary distribution of the queue length.
//!
//! A driver who joined a queue of length `n` at position `l` is tracked in
//! state `(l, n + 1)`. The next event is a passenger (rate `mu`), which
//! matches the front driver or moves the tracked driver forward, or a joining
//! driver (rate `sum_c lambda_c` over groups still joining at length `n + 1`),
//! who lands ahead of the tracked driver with probability
//! `sum_{i <= l} delta_c^{i, n+1}`. First-step analysis gives one linear
//! equation per `(n, l)` with `n < max_m N_m`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BlockTridiagonal;
use crate::model::{
    effective_arrival_rate, total_joining_rate, CapacityVector, LotteryPolicy, MarketParams,
    PricePolicy,
};

/// Conditional and lottery-averaged waiting times, in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitingTimes {
    /// `conditional[n][l - 1]`: expected wait after joining a length-`n` queue at position `l`.
    pub conditional: Vec<Vec<f64>>,
    /// `expected[m][n]`: expected wait of a group-`m` joiner at length `n < N_m`.
    pub expected: Vec<Vec<f64>>,
}

impl WaitingTimes {
    pub fn conditional(&self, queue_length: usize, position: usize) -> f64 {
        self.conditional[queue_length][position - 1]
    }

    pub fn max_expected(&self, group: usize) -> f64 {
        self.expected[group].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_expected(&self, group: usize) -> f64 {
        self.expected[group].iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_expected(&self, group: usize) -> f64 {
        let row = &self.expected[group];
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Stationary queue-length distribution over `0..=max_m N_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub probabilities: Vec<f64>,
}

impl SteadyState {
    pub fn probability(&self, queue_length: usize) -> f64 {
        self.probabilities.get(queue_length).copied().unwrap_or(0.0)
    }

    pub fn mean_queue_length(&self) -> f64 {
        self.probabilities
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Long-run joining rate of a group: `lambda_m * P(n < N_m)`.
    pub fn group_throughput(&self, params: &MarketParams, capacities: &CapacityVector, group: usize) -> f64 {
        let cap = capacities.get(group);
        params.arrival_rate(group) * self.probabilities[..cap].iter().sum::<f64>()
    }
}

/// A solved market state for one control.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    pub capacities: CapacityVector,
    pub lottery: LotteryPolicy,
    pub prices: PricePolicy,
    pub waits: WaitingTimes,
    pub steady: SteadyState,
}

impl EquilibriumSolution {
    pub fn solve(
        params: &MarketParams,
        capacities: CapacityVector,
        lottery: LotteryPolicy,
        prices: PricePolicy,
    ) -> Result<Self> {
        let waits = solve_waiting_times(params, &capacities, &lottery)?;
        let steady = steady_state(params, &capacities)?;
        Ok(EquilibriumSolution {
            capacities,
            lottery,
            prices,
            waits,
            steady,
        })
    }

    /// Joiner-weighted mean wait of a group, `sum_n P_n W_m^n / P(n < N_m)`.
    pub fn average_wait(&self, group: usize) -> f64 {
        let cap = self.capacities.get(group);
        let mass: f64 = self.steady.probabilities[..cap].iter().sum();
        (0..cap)
            .map(|n| self.steady.probabilities[n] * self.waits.expected[group][n])
            .sum::<f64>()
            / mass
    }
}

/// The assembled waiting-time system and its factorization.
#[derive(Debug, Clone)]
pub(crate) struct WaitSystem {
    pub matrix: BlockTridiagonal,
    pub solution: Vec<DVector<f64>>,
}

impl WaitSystem {
    pub fn build(
        params: &MarketParams,
        capacities: &CapacityVector,
        lottery: &LotteryPolicy,
    ) -> Result<Self> {
        capacities.check_groups(params)?;
        lottery.check_capacities(capacities)?;
        let blocks = capacities.rejection_threshold();
        let mu = params.passenger_rate();
        let groups = params.group_count();

        let mut diag = Vec::with_capacity(blocks);
        let mut upper = Vec::with_capacity(blocks.saturating_sub(1));
        let mut lower = Vec::with_capacity(blocks);
        for n in 0..blocks {
            let size = n + 1;
            // Joining rates are evaluated at the post-join length n + 1: the
            // tracked driver is already in the queue.
            let joining = total_joining_rate(params, n + 1, capacities);
            diag.push(DMatrix::identity(size, size) * (joining + mu));

            if n + 1 < blocks {
                let mut u = DMatrix::zeros(size, size + 1);
                for m in 0..groups {
                    let rate = effective_arrival_rate(params, m, n + 1, capacities);
                    if rate == 0.0 {
                        continue;
                    }
                    let row = lottery.row(m, n + 1);
                    let mut ahead = 0.0;
                    for l in 1..=size {
                        ahead += row[l - 1];
                        u[(l - 1, l)] -= rate * ahead;
                        u[(l - 1, l - 1)] -= rate * (1.0 - ahead);
                    }
                }
                upper.push(u);
            }

            let mut low = DMatrix::zeros(size, n);
            for l in 2..=size {
                low[(l - 1, l - 2)] = -mu;
            }
            lower.push(low);
        }

        let matrix = BlockTridiagonal { diag, upper, lower };
        let factor = matrix.factor()?;
        let rhs: Vec<DVector<f64>> = (0..blocks).map(|n| DVector::from_element(n + 1, 1.0)).collect();
        let solution = factor.solve(&rhs)?;
        Ok(WaitSystem {
            matrix,
            solution,
        })
    }

    pub fn conditional(&self) -> Vec<Vec<f64>> {
        self.solution.iter().map(|v| v.iter().copied().collect()).collect()
    }
}

/// Solves the conditional waiting times and aggregates them per group.
pub fn solve_waiting_times(
    params: &MarketParams,
    capacities: &CapacityVector,
    lottery: &LotteryPolicy,
) -> Result<WaitingTimes> {
    let system = WaitSystem::build(params, capacities, lottery)?;
    let conditional = system.conditional();
    let expected = expected_waits(&conditional, lottery, capacities)?;
    Ok(WaitingTimes {
        conditional,
        expected,
    })
}

/// `W_m^n = sum_l delta_m^{l,n} w_n^l` for every `n < N_m`.
pub fn expected_waits(
    conditional: &[Vec<f64>],
    lottery: &LotteryPolicy,
    capacities: &CapacityVector,
) -> Result<Vec<Vec<f64>>> {
    lottery.check_capacities(capacities)?;
    if conditional.len() < capacities.rejection_threshold() {
        return Err(Error::DimensionMismatch(format!(
            "{} conditional rows for rejection threshold {}",
            conditional.len(),
            capacities.rejection_threshold()
        )));
    }
    Ok((0..capacities.len())
        .map(|m| {
            (0..capacities.get(m))
                .map(|n| {
                    lottery
                        .row(m, n)
                        .iter()
                        .zip(&conditional[n])
                        .map(|(d, w)| d * w)
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Birth-death stationary distribution with birth rate `sum_c lambda_c 1(n < N_c)`
/// and death rate `mu`.
pub fn steady_state(params: &MarketParams, capacities: &CapacityVector) -> Result<SteadyState> {
    capacities.check_groups(params)?;
    let top = capacities.rejection_threshold();
    let mu = params.passenger_rate();
    // log-space keeps long queues with lambda > mu from overflowing
    let mut logs = Vec::with_capacity(top + 1);
    logs.push(0.0f64);
    for n in 0..top {
        let prev = logs[n];
        logs.push(prev + (total_joining_rate(params, n, capacities) / mu).ln());
    }
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = logs.iter().map(|l| (l - peak).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    Ok(SteadyState {
        probabilities: unnormalized.into_iter().map(|p| p / total).collect(),
    })
}

/// Largest relative residual of the balance equations at `conditional`,
/// evaluated group by group straight from the lottery.
pub fn balance_residual(
    params: &MarketParams,
    capacities: &CapacityVector,
    lottery: &LotteryPolicy,
    conditional: &[Vec<f64>],
) -> f64 {
    let top = capacities.rejection_threshold();
    let mu = params.passenger_rate();
    let mut worst: f64 = 0.0;
    for n in 0..top {
        let total = total_joining_rate(params, n + 1, capacities) + mu;
        for l in 1..=n + 1 {
            let mut rhs = 1.0 / total;
            for m in 0..params.group_count() {
                let rate = effective_arrival_rate(params, m, n + 1, capacities);
                if rate == 0.0 {
                    continue;
                }
                let ahead = lottery.cumulative(m, n + 1, l);
                rhs += rate / total
                    * (ahead * conditional[n + 1][l] + (1.0 - ahead) * conditional[n + 1][l - 1]);
            }
            if l >= 2 {
                rhs += mu / total * conditional[n - 1][l - 2];
            }
            let lhs = conditional[n][l - 1];
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(f64::MIN_POSITIVE));
        }
    }
    worst
}
