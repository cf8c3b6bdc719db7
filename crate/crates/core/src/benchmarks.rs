//! FIFO comparators: queue-length-dependent (dynamic) and per-group static pricing.
//!
//! Both place every joiner at the back, so a driver joining at length `n`
//! waits `(n + 1) / mu`. A commission cap limits how far a price can rise to
//! deter joining: group `m` joins at every `n` with
//! `R_m - r (T_d + (n + 1) / mu) >= p_max`, which forces `N_m >= K_m`.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{steady_state, SteadyState};
use crate::error::Result;
use crate::model::{CapacityVector, MarketParams, ObjectiveKind};
use crate::objectives::capacity_upper_bound;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Dynamic,
    Static,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Dynamic => "dynamic",
            Scheme::Static => "static",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub scheme: Scheme,
    pub kind: ObjectiveKind,
    pub capacities: CapacityVector,
    /// `prices[m][n]` for `n < N_m`; constant across `n` for the static scheme.
    pub prices: Vec<Vec<f64>>,
    /// `waits[n] = (n + 1) / mu`.
    pub waits: Vec<f64>,
    pub objective_value: f64,
    pub steady: SteadyState,
}

impl BenchmarkResult {
    /// Joiner-weighted mean wait of a group.
    pub fn average_wait(&self, group: usize) -> f64 {
        let cap = self.capacities.get(group);
        let p = &self.steady.probabilities[..cap];
        p.iter().zip(&self.waits).map(|(p, w)| p * w).sum::<f64>() / p.iter().sum::<f64>()
    }
}

/// Wait of a back-joiner at length `n`.
pub fn fifo_wait(params: &MarketParams, n: usize) -> f64 {
    (n + 1) as f64 / params.passenger_rate()
}

/// Smallest threshold the commission cap allows for a group.
pub fn cap_forced_threshold(params: &MarketParams, group: usize) -> usize {
    let Some(cap) = params.commission_cap() else { return 0 };
    let r = params.driver_opportunity_rate();
    let mut n = 0;
    while params.reward(group) - r * (params.trip_duration() + fifo_wait(params, n)) >= cap {
        n += 1;
    }
    n
}

fn clip(params: &MarketParams, price: f64) -> f64 {
    params.commission_cap().map_or(price, |c| price.min(c))
}

fn evaluate(
    params: &MarketParams,
    kind: ObjectiveKind,
    scheme: Scheme,
    caps: &CapacityVector,
) -> Result<BenchmarkResult> {
    let steady = steady_state(params, caps)?;
    let r = params.driver_opportunity_rate();
    let nu = params.platform_opportunity_rate();
    let td = params.trip_duration();
    let waits: Vec<f64> = (0..caps.rejection_threshold()).map(|n| fifo_wait(params, n)).collect();
    let mut prices = Vec::with_capacity(caps.len());
    let mut total = 0.0;
    for m in 0..caps.len() {
        let cap = caps.get(m);
        let row: Vec<f64> = match scheme {
            Scheme::Dynamic => (0..cap)
                .map(|n| clip(params, params.reward(m) - r * (td + waits[n])))
                .collect(),
            // largest price that still admits a joiner at length N_m - 1
            Scheme::Static => vec![clip(params, params.reward(m) - r * (td + waits[cap - 1])); cap],
        };
        let lambda = params.arrival_rate(m);
        for n in 0..cap {
            let per_driver = match kind {
                ObjectiveKind::Profit => row[n] - params.platform_trip_cost() - nu * waits[n],
                ObjectiveKind::Welfare => params.trip_surplus(m) - (r + nu) * waits[n],
            };
            total += steady.probabilities[n] * lambda * per_driver;
        }
        prices.push(row);
    }
    Ok(BenchmarkResult {
        scheme,
        kind,
        capacities: caps.clone(),
        prices,
        waits,
        objective_value: total,
        steady,
    })
}

/// Objective of a scheme at given thresholds; thresholds below the cap-forced
/// minimum are not implementable and return `None`.
pub fn evaluate_scheme(
    params: &MarketParams,
    kind: ObjectiveKind,
    scheme: Scheme,
    capacities: &CapacityVector,
) -> Result<Option<BenchmarkResult>> {
    capacities.check_groups(params)?;
    for m in 0..capacities.len() {
        if capacities.get(m) < cap_forced_threshold(params, m) {
            return Ok(None);
        }
    }
    evaluate(params, kind, scheme, capacities).map(Some)
}

/// Queue length beyond which the stationary mass is negligible for every
/// threshold choice: birth rates never exceed `Lambda`, so
/// `P_n <= (Lambda / mu)^n`, and states past the returned length change the
/// objective by less than rounding. `None` when `Lambda >= mu`.
pub fn negligible_tail_length(params: &MarketParams) -> Option<usize> {
    let rho = params.total_arrival_rate() / params.passenger_rate();
    if rho >= 1.0 {
        return None;
    }
    let scale = (1.0 - rho).powi(2);
    let mut n = 1usize;
    while rho.powi(n as i32) * ((n + 1) as f64).powi(2) > 1e-20 * scale {
        n += 1;
    }
    Some(n)
}

/// Exhaustive search over `[max(1, K_m), max(bound_m, K_m)]`, with the upper
/// end also limited by [`negligible_tail_length`].
fn optimum(params: &MarketParams, kind: ObjectiveKind, scheme: Scheme) -> Result<BenchmarkResult> {
    let tail = negligible_tail_length(params);
    let ranges: Vec<(usize, usize)> = (0..params.group_count())
        .map(|m| {
            let low = cap_forced_threshold(params, m).max(1);
            capacity_upper_bound(params, m, kind).map(|b| {
                let high = tail.map_or(b.limit, |t| b.limit.min(t + 1));
                (low, high.max(low))
            })
        })
        .collect::<Result<_>>()?;
    let mut genes: Vec<usize> = ranges.iter().map(|r| r.0).collect();
    let mut best: Option<BenchmarkResult> = None;
    loop {
        let caps = CapacityVector::new(genes.clone())?;
        let candidate = evaluate(params, kind, scheme, &caps)?;
        if best.as_ref().is_none_or(|b| candidate.objective_value > b.objective_value) {
            best = Some(candidate);
        }
        // odometer increment, last group fastest
        let mut m = genes.len();
        loop {
            if m == 0 {
                return Ok(best.expect("non-empty box"));
            }
            m -= 1;
            if genes[m] < ranges[m].1 {
                genes[m] += 1;
                break;
            }
            genes[m] = ranges[m].0;
        }
    }
}

pub fn dynamic_pricing_optimum(params: &MarketParams, kind: ObjectiveKind) -> Result<BenchmarkResult> {
    optimum(params, kind, Scheme::Dynamic)
}

/// Per-group static prices; only threshold-changing prices are candidates,
/// so the search runs over the induced thresholds.
pub fn static_pricing_optimum(params: &MarketParams, kind: ObjectiveKind) -> Result<BenchmarkResult> {
    optimum(params, kind, Scheme::Static)
}
