//! Experiment configuration: one TOML file with explicit units in key names.

use std::path::{Path, PathBuf};

use queue_lottery::lower_solver::LowerOptions;
use queue_lottery::model::{MarketParams, ObjectiveKind, TripCostAccounting};
use queue_lottery::simulator::SimConfig;
use queue_lottery::upper_ga::GaOptions;
use serde::{Deserialize, Serialize};

/// Invalid or unreadable configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub arrival_rates_per_hour: Vec<f64>,
    pub passenger_rate_per_hour: f64,
    pub rewards_per_trip: Vec<f64>,
    pub driver_opportunity_cost_per_hour: f64,
    pub platform_opportunity_cost_per_hour: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trip_duration_hours: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trip_duration_minutes: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commission_cap_per_trip: Option<f64>,
    #[serde(default)]
    pub trip_cost: TripCostAccounting,
}

impl MarketBlock {
    pub fn trip_duration(&self) -> anyhow::Result<f64> {
        match (self.trip_duration_hours, self.trip_duration_minutes) {
            (Some(h), None) => Ok(h),
            (None, Some(m)) => Ok(m / 60.0),
            _ => Err(config_err(
                "exactly one of market.trip_duration_hours and market.trip_duration_minutes is required",
            )),
        }
    }

    pub fn to_params(&self) -> anyhow::Result<MarketParams> {
        MarketParams::new(
            self.arrival_rates_per_hour.clone(),
            self.passenger_rate_per_hour,
            self.rewards_per_trip.clone(),
            self.driver_opportunity_cost_per_hour,
            self.platform_opportunity_cost_per_hour,
            self.trip_duration()?,
        )
        .and_then(|p| p.with_commission_cap(self.commission_cap_per_trip))
        .and_then(|p| p.with_trip_cost(self.trip_cost))
        .map_err(|e| config_err(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    /// `mu / sum(lambda)`; sets the passenger rate.
    DemandSupplyRatio,
    PassengerRatePerHour,
    TripDurationHours,
    DriverOpportunityCostPerHour,
    PlatformOpportunityCostPerHour,
    CommissionCapPerTrip,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::DemandSupplyRatio => "demand_supply_ratio",
            SweepParameter::PassengerRatePerHour => "passenger_rate_per_hour",
            SweepParameter::TripDurationHours => "trip_duration_hours",
            SweepParameter::DriverOpportunityCostPerHour => "driver_opportunity_cost_per_hour",
            SweepParameter::PlatformOpportunityCostPerHour => "platform_opportunity_cost_per_hour",
            SweepParameter::CommissionCapPerTrip => "commission_cap_per_trip",
        }
    }

    pub fn current(self, params: &MarketParams) -> f64 {
        match self {
            SweepParameter::DemandSupplyRatio => params.demand_supply_ratio(),
            SweepParameter::PassengerRatePerHour => params.passenger_rate(),
            SweepParameter::TripDurationHours => params.trip_duration(),
            SweepParameter::DriverOpportunityCostPerHour => params.driver_opportunity_rate(),
            SweepParameter::PlatformOpportunityCostPerHour => params.platform_opportunity_rate(),
            SweepParameter::CommissionCapPerTrip => params.commission_cap().unwrap_or(f64::NAN),
        }
    }

    pub fn apply(self, params: &MarketParams, value: f64) -> anyhow::Result<MarketParams> {
        let p = params.clone();
        let out = match self {
            SweepParameter::DemandSupplyRatio => {
                let total = p.total_arrival_rate();
                p.with_passenger_rate(value * total)
            }
            SweepParameter::PassengerRatePerHour => p.with_passenger_rate(value),
            SweepParameter::TripDurationHours => p.with_trip_duration(value),
            SweepParameter::DriverOpportunityCostPerHour => {
                let nu = p.platform_opportunity_rate();
                p.with_opportunity_rates(value, nu)
            }
            SweepParameter::PlatformOpportunityCostPerHour => {
                let r = p.driver_opportunity_rate();
                p.with_opportunity_rates(r, value)
            }
            SweepParameter::CommissionCapPerTrip => p.with_commission_cap(Some(value)),
        };
        out.map_err(|e| config_err(format!("sweep {} = {value}: {e}", self.name())))
    }
}

/// An empty block means a single run at the configured parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parameter: Option<SweepParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl SweepBlock {
    /// `(parameter, grid)`, or `None` for a single run.
    pub fn grid(&self) -> anyhow::Result<Option<(SweepParameter, Vec<f64>)>> {
        match (self.parameter, self.start, self.stop, self.steps) {
            (None, None, None, None) => Ok(None),
            (Some(p), Some(a), Some(b), Some(n)) => {
                if n == 0 {
                    return Err(config_err("sweep.steps must be at least 1"));
                }
                if !(a.is_finite() && b.is_finite()) {
                    return Err(config_err("sweep.start and sweep.stop must be finite"));
                }
                let grid = if n == 1 {
                    vec![a]
                } else {
                    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
                };
                Ok(Some((p, grid)))
            }
            _ => Err(config_err(
                "sweep needs all of parameter, start, stop and steps, or none of them",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_objective")]
    pub objective: ObjectiveKind,
    /// Overrides the seeds of the ga, solver and simulator blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub market: MarketBlock,
    #[serde(default)]
    pub ga: GaOptions,
    #[serde(default)]
    pub solver: LowerOptions,
    #[serde(default)]
    pub simulator: SimConfig,
    #[serde(default)]
    pub sweep: SweepBlock,
}

fn default_objective() -> ObjectiveKind {
    ObjectiveKind::Profit
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every block before any computation starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.market.to_params()?;
        self.ga.validate().map_err(|e| config_err(e.to_string()))?;
        self.solver.validate().map_err(|e| config_err(e.to_string()))?;
        self.simulator.validate().map_err(|e| config_err(e.to_string()))?;
        self.sweep.grid()?;
        Ok(())
    }

    /// Applies command-line overrides and propagates the global seed.
    pub fn resolve(mut self, seed: Option<u64>, objective: Option<ObjectiveKind>) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(k) = objective {
            self.objective = k;
        }
        if let Some(s) = self.seed {
            self.ga.seed = s;
            self.solver.seed = s;
            self.simulator.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AIRPORT: &str = r#"
objective = "profit"

[market]
arrival_rates_per_hour = [31.3, 10.6]
passenger_rate_per_hour = 46.1
rewards_per_trip = [80.0, 90.0]
driver_opportunity_cost_per_hour = 40.0
platform_opportunity_cost_per_hour = 5.0
trip_duration_minutes = 30.0
"#;

    #[test]
    fn minutes_and_hours_agree() {
        let cfg = ExperimentConfig::from_toml(AIRPORT).unwrap();
        assert_eq!(cfg.market.to_params().unwrap(), MarketParams::airport());
        let hours = AIRPORT.replace("trip_duration_minutes = 30.0", "trip_duration_hours = 0.5");
        let cfg = ExperimentConfig::from_toml(&hours).unwrap();
        assert_eq!(cfg.market.to_params().unwrap(), MarketParams::airport());
    }

    #[test]
    fn unknown_and_ambiguous_keys_are_rejected() {
        let extra = AIRPORT.replace("[market]", "colour = 1\n[market]");
        assert!(ExperimentConfig::from_toml(&extra).is_err());
        let both = format!("{AIRPORT}trip_duration_hours = 0.5\n");
        assert!(ExperimentConfig::from_toml(&both).is_err());
        let bad_ga = format!("{AIRPORT}[ga]\npopulation = 2\nelite = 2\n");
        assert!(ExperimentConfig::from_toml(&bad_ga).is_err());
        let zero_events = format!("{AIRPORT}[simulator]\nevents = 0\n");
        let err = ExperimentConfig::from_toml(&zero_events).unwrap_err();
        assert!(err.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn sweep_grid() {
        let cfg = ExperimentConfig::from_toml(&format!(
            "{AIRPORT}[sweep]\nparameter = \"demand_supply_ratio\"\nstart = 1.0\nstop = 1.5\nsteps = 6\n"
        ))
        .unwrap();
        let (p, grid) = cfg.sweep.grid().unwrap().unwrap();
        assert_eq!(p, SweepParameter::DemandSupplyRatio);
        assert_eq!(grid.len(), 6);
        assert!((grid[5] - 1.5).abs() < 1e-15);
        let empty = ExperimentConfig::from_toml(&format!("{AIRPORT}[sweep]\n")).unwrap();
        assert!(empty.sweep.grid().unwrap().is_none());
        let partial = format!("{AIRPORT}[sweep]\nstart = 1.0\n");
        assert!(ExperimentConfig::from_toml(&partial).is_err());
    }

    #[test]
    fn seed_override_reaches_every_block() {
        let cfg = ExperimentConfig::from_toml(AIRPORT).unwrap().resolve(Some(9), Some(ObjectiveKind::Welfare));
        assert_eq!((cfg.ga.seed, cfg.solver.seed, cfg.simulator.seed), (9, 9, 9));
        assert_eq!(cfg.objective, ObjectiveKind::Welfare);
        let round = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(round, cfg);
    }
}
