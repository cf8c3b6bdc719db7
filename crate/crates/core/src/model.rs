//! Market primitives: the economic environment, capacity thresholds, entry
//! lotteries, commission prices and the driver joining rule.
//!
//! Units are fixed throughout the crate: time in hours, rates per hour,
//! rewards and prices in currency per order, opportunity costs in currency
//! per hour.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization tolerance for a lottery row.
pub const LOTTERY_TOLERANCE: f64 = 1e-12;

/// Which objective the platform optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Profit,
    Welfare,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObjectiveKind::Profit => f.write_str("profit"),
            ObjectiveKind::Welfare => f.write_str("welfare"),
        }
    }
}

/// Who bears the opportunity cost of the delivery trip itself.
///
/// Drivers always pay `r * T_d`. Under `DriverAndPlatform` the platform is
/// also charged `nu * T_d` per admitted driver; under `DriverOnly` the
/// platform's opportunity cost accrues only while the driver idles in queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripCostAccounting {
    #[default]
    DriverOnly,
    DriverAndPlatform,
}

/// The economic environment of the terminal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarketParams {
    arrival_rates: Vec<f64>,
    passenger_rate: f64,
    rewards: Vec<f64>,
    driver_opportunity_rate: f64,
    platform_opportunity_rate: f64,
    trip_duration: f64,
    commission_cap: Option<f64>,
    trip_cost: TripCostAccounting,
}

impl MarketParams {
    /// Builds and validates a market. Rates are per hour, `trip_duration` in hours.
    pub fn new(
        arrival_rates: Vec<f64>,
        passenger_rate: f64,
        rewards: Vec<f64>,
        driver_opportunity_rate: f64,
        platform_opportunity_rate: f64,
        trip_duration: f64,
    ) -> Result<Self> {
        let params = MarketParams {
            arrival_rates,
            passenger_rate,
            rewards,
            driver_opportunity_rate,
            platform_opportunity_rate,
            trip_duration,
            commission_cap: None,
            trip_cost: TripCostAccounting::default(),
        };
        params.validate()?;
        Ok(params)
    }

    /// Two-group airport market: involuntary and voluntary drivers.
    pub fn airport() -> Self {
        MarketParams::new(vec![31.3, 10.6], 46.1, vec![80.0, 90.0], 40.0, 5.0, 0.5)
            .expect("airport preset is valid")
    }

    /// The regulated airport market with a commission cap of 4.25.
    pub fn airport_capped() -> Self {
        MarketParams::new(vec![93.8, 31.9], 132.0, vec![7.5, 12.5], 40.0, 10.0, 0.25)
            .and_then(|p| p.with_commission_cap(Some(4.25)))
            .expect("capped airport preset is valid")
    }

    pub fn with_commission_cap(mut self, cap: Option<f64>) -> Result<Self> {
        self.commission_cap = cap;
        self.validate()?;
        Ok(self)
    }

    pub fn with_trip_cost(mut self, trip_cost: TripCostAccounting) -> Result<Self> {
        self.trip_cost = trip_cost;
        self.validate()?;
        Ok(self)
    }

    pub fn with_passenger_rate(mut self, passenger_rate: f64) -> Result<Self> {
        self.passenger_rate = passenger_rate;
        self.validate()?;
        Ok(self)
    }

    pub fn with_arrival_rates(mut self, arrival_rates: Vec<f64>) -> Result<Self> {
        self.arrival_rates = arrival_rates;
        self.validate()?;
        Ok(self)
    }

    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Result<Self> {
        self.rewards = rewards;
        self.validate()?;
        Ok(self)
    }

    pub fn with_opportunity_rates(mut self, driver: f64, platform: f64) -> Result<Self> {
        self.driver_opportunity_rate = driver;
        self.platform_opportunity_rate = platform;
        self.validate()?;
        Ok(self)
    }

    pub fn with_trip_duration(mut self, trip_duration: f64) -> Result<Self> {
        self.trip_duration = trip_duration;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.arrival_rates.is_empty() {
            return bad("at least one driver group is required".into());
        }
        if self.rewards.len() != self.arrival_rates.len() {
            return bad(format!(
                "{} arrival rates but {} rewards",
                self.arrival_rates.len(),
                self.rewards.len()
            ));
        }
        for (m, &rate) in self.arrival_rates.iter().enumerate() {
            if !(rate.is_finite() && rate > 0.0) {
                return bad(format!("arrival rate of group {m} must be positive, got {rate}"));
            }
        }
        for (name, value) in [
            ("passenger rate", self.passenger_rate),
            ("driver opportunity rate", self.driver_opportunity_rate),
            ("platform opportunity rate", self.platform_opportunity_rate),
            ("trip duration", self.trip_duration),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return bad(format!("{name} must be positive, got {value}"));
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return bad("rewards must be finite".into());
        }
        if let Some(cap) = self.commission_cap {
            if !cap.is_finite() {
                return bad(format!("commission cap must be finite, got {cap}"));
            }
        }
        if !(0..self.group_count()).any(|m| self.trip_surplus(m) > 0.0) {
            return bad("no group earns a positive surplus per trip".into());
        }
        Ok(())
    }

    pub fn group_count(&self) -> usize {
        self.arrival_rates.len()
    }

    pub fn arrival_rates(&self) -> &[f64] {
        &self.arrival_rates
    }

    pub fn arrival_rate(&self, group: usize) -> f64 {
        self.arrival_rates[group]
    }

    pub fn total_arrival_rate(&self) -> f64 {
        self.arrival_rates.iter().sum()
    }

    pub fn passenger_rate(&self) -> f64 {
        self.passenger_rate
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn reward(&self, group: usize) -> f64 {
        self.rewards[group]
    }

    pub fn driver_opportunity_rate(&self) -> f64 {
        self.driver_opportunity_rate
    }

    pub fn platform_opportunity_rate(&self) -> f64 {
        self.platform_opportunity_rate
    }

    pub fn trip_duration(&self) -> f64 {
        self.trip_duration
    }

    pub fn commission_cap(&self) -> Option<f64> {
        self.commission_cap
    }

    pub fn trip_cost(&self) -> TripCostAccounting {
        self.trip_cost
    }

    /// `mu / sum(lambda)`.
    pub fn demand_supply_ratio(&self) -> f64 {
        self.passenger_rate / self.total_arrival_rate()
    }

    /// Platform opportunity cost charged for the trip itself, per admitted driver.
    pub fn platform_trip_cost(&self) -> f64 {
        match self.trip_cost {
            TripCostAccounting::DriverOnly => 0.0,
            TripCostAccounting::DriverAndPlatform => {
                self.platform_opportunity_rate * self.trip_duration
            }
        }
    }

    /// Social surplus of one trip before any waiting cost.
    pub fn trip_surplus(&self, group: usize) -> f64 {
        self.rewards[group]
            - self.driver_opportunity_rate * self.trip_duration
            - self.platform_trip_cost()
    }

    /// Largest price at which a driver of `group` would still join with zero wait.
    pub fn price_ceiling(&self, group: usize) -> f64 {
        self.rewards[group] - self.driver_opportunity_rate * self.trip_duration
    }

    pub(crate) fn check_group(&self, group: usize) -> Result<()> {
        if group < self.group_count() {
            Ok(())
        } else {
            Err(Error::InvalidGroup {
                group,
                count: self.group_count(),
            })
        }
    }
}

/// Per-group joining thresholds `N_m`: group `m` joins iff the queue holds fewer than `N_m`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CapacityVector(Vec<usize>);

impl CapacityVector {
    pub fn new(capacities: Vec<usize>) -> Result<Self> {
        if capacities.is_empty() {
            return Err(Error::InvalidCapacity("empty capacity vector".into()));
        }
        if let Some(m) = capacities.iter().position(|&n| n == 0) {
            return Err(Error::InvalidCapacity(format!("capacity of group {m} is zero")));
        }
        Ok(CapacityVector(capacities))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn get(&self, group: usize) -> usize {
        self.0[group]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The rejection threshold: no queue ever grows beyond `max_m N_m`.
    pub fn rejection_threshold(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn check_groups(&self, params: &MarketParams) -> Result<()> {
        if self.len() == params.group_count() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{} capacities for {} groups",
                self.len(),
                params.group_count()
            )))
        }
    }
}

impl std::fmt::Display for CapacityVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|n| n.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// How drivers arriving at or beyond their group's capacity would be placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverCapacityRule {
    #[default]
    Unspecified,
    /// Every over-capacity joiner goes to the back of the queue.
    BackPlacement,
}

/// Entry-position lotteries: `rows[m][n][l - 1]` is the probability that a
/// group-`m` driver joining a queue of length `n` is inserted at position `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LotteryPolicy {
    rows: Vec<Vec<Vec<f64>>>,
    over_capacity: OverCapacityRule,
}

impl LotteryPolicy {
    /// Validates shape against `capacities` and normalization of each row.
    pub fn new(rows: Vec<Vec<Vec<f64>>>, capacities: &CapacityVector) -> Result<Self> {
        if rows.len() != capacities.len() {
            return Err(Error::DimensionMismatch(format!(
                "lottery has {} groups, capacities have {}",
                rows.len(),
                capacities.len()
            )));
        }
        for (m, group_rows) in rows.iter().enumerate() {
            if group_rows.len() != capacities.get(m) {
                return Err(Error::DimensionMismatch(format!(
                    "group {m} has {} lottery rows, capacity is {}",
                    group_rows.len(),
                    capacities.get(m)
                )));
            }
            for (n, row) in group_rows.iter().enumerate() {
                check_row(m, n, row)?;
            }
        }
        Ok(LotteryPolicy {
            rows,
            over_capacity: OverCapacityRule::Unspecified,
        })
    }

    fn from_fn(capacities: &CapacityVector, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let rows = capacities
            .as_slice()
            .iter()
            .enumerate()
            .map(|(m, &cap)| (0..cap).map(|n| f(m, n)).collect())
            .collect();
        LotteryPolicy {
            rows,
            over_capacity: OverCapacityRule::Unspecified,
        }
    }

    /// Every joiner at the back (first in, first out).
    pub fn fifo(capacities: &CapacityVector) -> Self {
        Self::from_fn(capacities, |_, n| {
            let mut row = vec![0.0; n + 1];
            row[n] = 1.0;
            row
        })
    }

    /// Every joiner at the front.
    pub fn lifo(capacities: &CapacityVector) -> Self {
        Self::from_fn(capacities, |_, n| {
            let mut row = vec![0.0; n + 1];
            row[0] = 1.0;
            row
        })
    }

    pub fn uniform(capacities: &CapacityVector) -> Self {
        Self::from_fn(capacities, |_, n| vec![1.0 / (n + 1) as f64; n + 1])
    }

    /// Rows drawn uniformly from each simplex.
    pub fn random<R: Rng + ?Sized>(capacities: &CapacityVector, rng: &mut R) -> Self {
        Self::from_fn(capacities, |_, n| {
            let draws: Vec<f64> = (0..=n).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            draws.into_iter().map(|d| d / total).collect()
        })
    }

    pub fn group_count(&self) -> usize {
        self.rows.len()
    }

    /// Number of under-capacity rows of a group, i.e. its capacity.
    pub fn rows_of(&self, group: usize) -> usize {
        self.rows[group].len()
    }

    /// The lottery used by `group` at queue length `queue_length`.
    pub fn row(&self, group: usize, queue_length: usize) -> &[f64] {
        &self.rows[group][queue_length]
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.rows
    }

    pub fn over_capacity_rule(&self) -> OverCapacityRule {
        self.over_capacity
    }

    pub fn with_over_capacity_rule(mut self, rule: OverCapacityRule) -> Self {
        self.over_capacity = rule;
        self
    }

    /// Cumulative probability of landing at positions `1..=position`.
    pub fn cumulative(&self, group: usize, queue_length: usize, position: usize) -> f64 {
        self.rows[group][queue_length][..position].iter().sum()
    }

    /// Shape check against a capacity vector.
    pub fn check_capacities(&self, capacities: &CapacityVector) -> Result<()> {
        if self.rows.len() != capacities.len()
            || self
                .rows
                .iter()
                .zip(capacities.as_slice())
                .any(|(r, &c)| r.len() != c)
        {
            return Err(Error::DimensionMismatch(
                "lottery rows do not match capacities".into(),
            ));
        }
        Ok(())
    }

    /// Largest normalization error over all rows.
    pub fn max_normalization_error(&self) -> f64 {
        self.rows
            .iter()
            .flatten()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_row(group: usize, n: usize, row: &[f64]) -> Result<()> {
    if row.len() != n + 1 {
        return Err(Error::InvalidLottery(format!(
            "group {group} row {n} has {} entries, expected {}",
            row.len(),
            n + 1
        )));
    }
    if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidLottery(format!(
            "group {group} row {n} has a negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > LOTTERY_TOLERANCE {
        return Err(Error::InvalidLottery(format!(
            "group {group} row {n} sums to {total}"
        )));
    }
    Ok(())
}

/// Per-group commission fee `p_m`, charged per terminal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PricePolicy {
    prices: Vec<f64>,
}

impl PricePolicy {
    pub fn new(params: &MarketParams, prices: Vec<f64>) -> Result<Self> {
        if prices.len() != params.group_count() {
            return Err(Error::DimensionMismatch(format!(
                "{} prices for {} groups",
                prices.len(),
                params.group_count()
            )));
        }
        for (m, &p) in prices.iter().enumerate() {
            if p > params.price_ceiling(m) + 1e-9 {
                return Err(Error::InvalidParams(format!(
                    "price {p} of group {m} exceeds the zero-wait ceiling {}",
                    params.price_ceiling(m)
                )));
            }
            if let Some(cap) = params.commission_cap() {
                if p > cap + 1e-9 {
                    return Err(Error::InvalidParams(format!(
                        "price {p} of group {m} exceeds the commission cap {cap}"
                    )));
                }
            }
        }
        Ok(PricePolicy { prices })
    }

    /// Prices from per-group maximum tolerable waits, clipped at the commission cap.
    pub fn from_tolerable_waits(params: &MarketParams, xi: &[f64]) -> Result<Self> {
        let prices = xi
            .iter()
            .enumerate()
            .map(|(m, &x)| {
                let p = crate::objectives::price_from_wait(params, m, x)?;
                Ok(params.commission_cap().map_or(p, |cap| p.min(cap)))
            })
            .collect::<Result<Vec<_>>>()?;
        PricePolicy::new(params, prices)
    }

    pub fn zero(params: &MarketParams) -> Self {
        PricePolicy {
            prices: vec![0.0; params.group_count()],
        }
    }

    pub fn price(&self, group: usize) -> f64 {
        self.prices[group]
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }
}

/// Expected utility of joining: `R_m - p - r (T_d + W)`.
pub fn joining_utility(
    params: &MarketParams,
    group: usize,
    price: f64,
    expected_wait: f64,
) -> Result<f64> {
    params.check_group(group)?;
    if !(expected_wait >= 0.0) {
        return Err(Error::InvalidParams(format!(
            "expected wait must be non-negative, got {expected_wait}"
        )));
    }
    Ok(params.reward(group)
        - price
        - params.driver_opportunity_rate() * (params.trip_duration() + expected_wait))
}

/// Threshold joining rate: `lambda_m` below capacity, zero at or above it.
pub fn effective_arrival_rate(
    params: &MarketParams,
    group: usize,
    queue_length: usize,
    capacities: &CapacityVector,
) -> f64 {
    if queue_length < capacities.get(group) {
        params.arrival_rate(group)
    } else {
        0.0
    }
}

/// Total joining rate at a queue length.
pub fn total_joining_rate(
    params: &MarketParams,
    queue_length: usize,
    capacities: &CapacityVector,
) -> f64 {
    (0..params.group_count())
        .map(|m| effective_arrival_rate(params, m, queue_length, capacities))
        .sum()
}
