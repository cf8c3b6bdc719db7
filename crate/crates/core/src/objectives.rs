//! Profit and welfare rates, capacity bounds, the price/wait coupling and
//! the over-capacity lottery extension.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{EquilibriumSolution, SteadyState, WaitingTimes};
use crate::error::{Error, Result};
use crate::model::{
    CapacityVector, LotteryPolicy, MarketParams, ObjectiveKind, OverCapacityRule,
};

/// States beyond the rejection threshold checked by the over-capacity certificate.
pub const DEFAULT_CERTIFICATE_SLACK: usize = 10;

/// How per-state contributions are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveWeighting {
    /// Long-run rate: each state weighted by its stationary probability.
    #[default]
    SteadyState,
    /// Plain sum over under-capacity states, kept for diagnosis only.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub kind: ObjectiveKind,
    /// Currency per hour.
    pub total_rate: f64,
    pub per_group: Vec<f64>,
}

/// Weight of state `(m, n)` in the aggregate.
pub(crate) fn state_weight(
    params: &MarketParams,
    steady: &SteadyState,
    weighting: ObjectiveWeighting,
    group: usize,
    queue_length: usize,
) -> f64 {
    match weighting {
        ObjectiveWeighting::SteadyState => {
            steady.probability(queue_length) * params.arrival_rate(group)
        }
        ObjectiveWeighting::Unweighted => params.arrival_rate(group),
    }
}

/// Aggregates a per-joiner integrand over all under-capacity states.
pub(crate) fn aggregate(
    params: &MarketParams,
    capacities: &CapacityVector,
    steady: &SteadyState,
    weighting: ObjectiveWeighting,
    kind: ObjectiveKind,
    integrand: impl Fn(usize, usize) -> f64,
) -> ObjectiveReport {
    let per_group: Vec<f64> = (0..params.group_count())
        .map(|m| {
            (0..capacities.get(m))
                .map(|n| state_weight(params, steady, weighting, m, n) * integrand(m, n))
                .sum()
        })
        .collect();
    ObjectiveReport {
        kind,
        total_rate: per_group.iter().sum(),
        per_group,
    }
}

/// Per-joiner profit: price minus the platform's opportunity cost.
pub(crate) fn profit_integrand(params: &MarketParams, price: f64, wait: f64) -> f64 {
    price - params.platform_trip_cost() - params.platform_opportunity_rate() * wait
}

/// Per-joiner social surplus.
pub(crate) fn welfare_integrand(params: &MarketParams, group: usize, wait: f64) -> f64 {
    params.trip_surplus(group)
        - (params.driver_opportunity_rate() + params.platform_opportunity_rate()) * wait
}

pub fn profit_rate(params: &MarketParams, eq: &EquilibriumSolution) -> ObjectiveReport {
    objective_rate(params, eq, ObjectiveKind::Profit, ObjectiveWeighting::SteadyState)
}

pub fn welfare_rate(params: &MarketParams, eq: &EquilibriumSolution) -> ObjectiveReport {
    objective_rate(params, eq, ObjectiveKind::Welfare, ObjectiveWeighting::SteadyState)
}

pub fn objective_rate(
    params: &MarketParams,
    eq: &EquilibriumSolution,
    kind: ObjectiveKind,
    weighting: ObjectiveWeighting,
) -> ObjectiveReport {
    let w = &eq.waits.expected;
    match kind {
        ObjectiveKind::Profit => aggregate(params, &eq.capacities, &eq.steady, weighting, kind, |m, n| {
            profit_integrand(params, eq.prices.price(m), w[m][n])
        }),
        ObjectiveKind::Welfare => aggregate(params, &eq.capacities, &eq.steady, weighting, kind, |m, n| {
            welfare_integrand(params, m, w[m][n])
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityBound {
    pub limit: usize,
    /// The group cannot create surplus; no admission helps the objective.
    pub degenerate: bool,
}

/// Upper bound on the optimal threshold of a group.
///
/// Profit: `ceil(mu (p - c_T) / nu - 1/2)` evaluated at the zero-wait price
/// ceiling `p = R_m - r T_d`, where `c_T` is the platform's trip cost.
/// Welfare: `ceil(mu (R_m - r T_d - c_T) / (nu + r) - 1/2)`.
pub fn capacity_upper_bound(
    params: &MarketParams,
    group: usize,
    kind: ObjectiveKind,
) -> Result<CapacityBound> {
    params.check_group(group)?;
    let mu = params.passenger_rate();
    let nu = params.platform_opportunity_rate();
    let r = params.driver_opportunity_rate();
    let (margin, denom) = match kind {
        ObjectiveKind::Profit => (params.price_ceiling(group) - params.platform_trip_cost(), nu),
        ObjectiveKind::Welfare => (params.trip_surplus(group), nu + r),
    };
    if !(denom > 0.0) {
        return Err(Error::NonPositiveDenominator(format!(
            "{kind} bound of group {group} has denominator {denom}"
        )));
    }
    let raw = (mu * margin / denom - 0.5).ceil();
    if raw <= 0.0 {
        Ok(CapacityBound {
            limit: 0,
            degenerate: true,
        })
    } else {
        Ok(CapacityBound {
            limit: raw as usize,
            degenerate: false,
        })
    }
}

/// `p_m = R_m - r (T_d + xi)`. Negative prices (subsidies) are allowed and logged.
pub fn price_from_wait(params: &MarketParams, group: usize, xi: f64) -> Result<f64> {
    params.check_group(group)?;
    if !(xi >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "tolerable wait must be non-negative, got {xi}"
        )));
    }
    let price =
        params.reward(group) - params.driver_opportunity_rate() * (params.trip_duration() + xi);
    if price < 0.0 {
        log::debug!("group {group}: tolerable wait {xi} h implies a subsidy of {}", -price);
    }
    Ok(price)
}

/// Inverse of [`price_from_wait`]: `xi = (R_m - p) / r - T_d`.
pub fn wait_from_price(params: &MarketParams, group: usize, price: f64) -> Result<f64> {
    params.check_group(group)?;
    Ok((params.reward(group) - price) / params.driver_opportunity_rate() - params.trip_duration())
}

/// Smallest tolerable wait compatible with the commission cap, if any.
pub fn min_tolerable_wait(params: &MarketParams, group: usize) -> Option<f64> {
    params
        .commission_cap()
        .map(|cap| (params.reward(group) - cap) / params.driver_opportunity_rate() - params.trip_duration())
}

/// Per-group evidence that back placement deters over-capacity joiners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCertificate {
    /// `max_{n < N_m} W_m^n`.
    pub max_under_capacity_wait: f64,
    /// `(n, wait)` for a back-placed joiner at each checked `n >= N_m`.
    pub over_capacity_waits: Vec<(usize, f64)>,
}

impl GroupCertificate {
    pub fn min_over_capacity_wait(&self) -> f64 {
        self.over_capacity_waits
            .iter()
            .map(|&(_, w)| w)
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverCapacityCertificate {
    /// Queue lengths `N_m..horizon` were checked for each group.
    pub horizon: usize,
    pub groups: Vec<GroupCertificate>,
}

impl OverCapacityCertificate {
    /// Whether every checked over-capacity wait exceeds `tolerable_wait`,
    /// i.e. a driver with that tolerance would balk.
    pub fn deters(&self, group: usize, tolerable_wait: f64) -> bool {
        self.groups[group].min_over_capacity_wait() > tolerable_wait
    }
}

/// Back-placement waits for over-capacity joiners, `n = N_m .. N̂ + slack`.
///
/// Below `N̂` these are conditional waits already in the solved system; above
/// it nobody else joins until the queue drains, so each extra driver ahead
/// adds exactly one passenger interarrival.
pub fn certify_over_capacity(
    params: &MarketParams,
    capacities: &CapacityVector,
    waits: &WaitingTimes,
    slack: usize,
) -> Result<OverCapacityCertificate> {
    let top = capacities.rejection_threshold();
    let horizon = top + slack;
    let mu = params.passenger_rate();
    let mut back = Vec::with_capacity(horizon);
    for n in 0..horizon {
        let w = if n < top {
            waits.conditional(n, n + 1)
        } else {
            1.0 / mu + back[n - 1]
        };
        back.push(w);
    }
    let mut groups = Vec::with_capacity(capacities.len());
    for m in 0..capacities.len() {
        let threshold = waits.max_expected(m);
        let over: Vec<(usize, f64)> = (capacities.get(m)..horizon).map(|n| (n, back[n])).collect();
        if let Some(&(n, w)) = over.iter().find(|&&(_, w)| w <= threshold) {
            return Err(Error::CertificateFailed {
                group: m,
                queue_length: n,
                wait: w,
                threshold,
            });
        }
        groups.push(GroupCertificate {
            max_under_capacity_wait: threshold,
            over_capacity_waits: over,
        });
    }
    Ok(OverCapacityCertificate { horizon, groups })
}

/// Attaches back placement as the over-capacity rule after checking that it
/// makes every over-capacity joiner wait longer than any under-capacity one.
pub fn extend_policy(
    params: &MarketParams,
    capacities: &CapacityVector,
    lottery: &LotteryPolicy,
    waits: &WaitingTimes,
) -> Result<(LotteryPolicy, OverCapacityCertificate)> {
    let certificate = certify_over_capacity(params, capacities, waits, DEFAULT_CERTIFICATE_SLACK)?;
    Ok((
        lottery.clone().with_over_capacity_rule(OverCapacityRule::BackPlacement),
        certificate,
    ))
}
