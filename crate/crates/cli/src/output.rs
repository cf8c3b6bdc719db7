//! Result files: CSV tables with fixed headers plus a JSON manifest per run.
//! Floats are written in shortest round-trip form, so reading a file back
//! yields bit-identical values.

use std::fs::File;
use std::path::Path;

use anyhow::{bail, Context, Result};
use queue_lottery::benchmarks::BenchmarkResult;
use queue_lottery::lower_solver::LowerLevelResult;
use queue_lottery::model::{CapacityVector, LotteryPolicy, MarketParams, ObjectiveKind, OverCapacityRule};
use queue_lottery::simulator::{AgreementReport, AgreementRow, Quantity, SimStats};
use serde::{Deserialize, Serialize};

pub const SUMMARY: &str = "summary.csv";
pub const EXPECTED_WAITS: &str = "expected_waits.csv";
pub const STEADY_STATE: &str = "steady_state.csv";
pub const GA_HISTORY: &str = "ga_history.csv";
pub const BENCHMARK: &str = "benchmark.csv";
pub const SWEEP: &str = "sweep.csv";
pub const SIM_STATES: &str = "sim_states.csv";
pub const SIM_SUMMARY: &str = "sim_summary.csv";
pub const EVENTS: &str = "events.csv";
pub const MANIFEST: &str = "manifest.json";

pub fn lottery_file(group: usize) -> String {
    format!("lottery_group{}.csv", group + 1)
}

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<File>> {
    let path = dir.join(name);
    csv::WriterBuilder::new()
        .flexible(true)
        .from_path(&path)
        .with_context(|| format!("creating {}", path.display()))
}

fn reader(dir: &Path, name: &str) -> Result<csv::Reader<File>> {
    let path = dir.join(name);
    csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(&path)
        .with_context(|| format!("reading {}", path.display()))
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} {s:?}: {e}"))
}

pub fn format_capacities(c: &CapacityVector) -> String {
    c.as_slice().iter().map(|n| n.to_string()).collect::<Vec<_>>().join(";")
}

pub fn parse_capacities(s: &str) -> Result<CapacityVector> {
    let v = s.split(';').map(|x| parse(x, "capacity")).collect::<Result<Vec<usize>>>()?;
    Ok(CapacityVector::new(v)?)
}

/// One row per group of a solved lower level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub objective: ObjectiveKind,
    pub group: usize,
    pub capacity: usize,
    pub price: f64,
    pub xi_hours: f64,
    pub max_wait_hours: f64,
    pub objective_value: f64,
    pub converged: bool,
    pub certified: bool,
    /// Placement of joiners beyond the group's capacity.
    pub over_capacity: OverCapacityRule,
}

pub fn summary_rows(result: &LowerLevelResult) -> Vec<SummaryRow> {
    let caps = &result.equilibrium.capacities;
    (0..caps.len())
        .map(|m| SummaryRow {
            objective: result.kind,
            group: m + 1,
            capacity: caps.get(m),
            price: result.prices.price(m),
            xi_hours: result.xi[m],
            max_wait_hours: result.equilibrium.waits.max_expected(m),
            objective_value: result.objective_value,
            converged: result.converged,
            certified: result.certified,
            over_capacity: result.lottery.over_capacity_rule(),
        })
        .collect()
}

pub fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = writer(dir, SUMMARY)?;
    w.write_record([
        "objective", "group", "capacity", "price", "xi_hours", "max_wait_hours", "objective_value",
        "converged", "certified", "over_capacity",
    ])?;
    for r in rows {
        w.write_record([
            r.objective.to_string(),
            r.group.to_string(),
            r.capacity.to_string(),
            num(r.price),
            num(r.xi_hours),
            num(r.max_wait_hours),
            num(r.objective_value),
            r.converged.to_string(),
            r.certified.to_string(),
            rule_name(r.over_capacity).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for rec in reader(dir, SUMMARY)?.records() {
        let rec = rec?;
        let objective = parse_kind(&rec[0])?;
        rows.push(SummaryRow {
            objective,
            group: parse(&rec[1], "group")?,
            capacity: parse(&rec[2], "capacity")?,
            price: parse(&rec[3], "price")?,
            xi_hours: parse(&rec[4], "xi")?,
            max_wait_hours: parse(&rec[5], "max wait")?,
            objective_value: parse(&rec[6], "objective value")?,
            converged: parse(&rec[7], "converged")?,
            certified: parse(&rec[8], "certified")?,
            over_capacity: parse_rule(&rec[9])?,
        });
    }
    Ok(rows)
}

fn rule_name(rule: OverCapacityRule) -> &'static str {
    match rule {
        OverCapacityRule::Unspecified => "unspecified",
        OverCapacityRule::BackPlacement => "back_placement",
    }
}

fn parse_rule(s: &str) -> Result<OverCapacityRule> {
    match s {
        "unspecified" => Ok(OverCapacityRule::Unspecified),
        "back_placement" => Ok(OverCapacityRule::BackPlacement),
        other => bail!("unknown over-capacity rule {other:?}"),
    }
}

/// Rows are queue lengths, columns insertion positions (1 = front).
pub fn write_lottery(dir: &Path, lottery: &LotteryPolicy) -> Result<()> {
    for m in 0..lottery.group_count() {
        let rows = lottery.rows_of(m);
        let mut w = writer(dir, &lottery_file(m))?;
        let mut header = vec!["queue_length".to_string()];
        header.extend((1..=rows).map(|l| format!("position_{l}")));
        w.write_record(&header)?;
        for n in 0..rows {
            let mut rec = vec![n.to_string()];
            rec.extend(lottery.row(m, n).iter().map(|&x| num(x)));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn read_lottery(dir: &Path, capacities: &CapacityVector, rule: OverCapacityRule) -> Result<LotteryPolicy> {
    let mut groups = Vec::with_capacity(capacities.len());
    for m in 0..capacities.len() {
        let mut rows = Vec::new();
        for (n, rec) in reader(dir, &lottery_file(m))?.records().enumerate() {
            let rec = rec?;
            if parse::<usize>(&rec[0], "queue length")? != n {
                bail!("{}: rows out of order", lottery_file(m));
            }
            rows.push(
                rec.iter()
                    .skip(1)
                    .map(|x| parse::<f64>(x, "probability"))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        groups.push(rows);
    }
    Ok(LotteryPolicy::new(groups, capacities)?.with_over_capacity_rule(rule))
}

pub fn write_expected_waits(dir: &Path, expected: &[Vec<f64>]) -> Result<()> {
    let mut w = writer(dir, EXPECTED_WAITS)?;
    w.write_record(["group", "queue_length", "expected_wait_hours"])?;
    for (m, row) in expected.iter().enumerate() {
        for (n, &x) in row.iter().enumerate() {
            w.write_record([(m + 1).to_string(), n.to_string(), num(x)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_expected_waits(dir: &Path) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for rec in reader(dir, EXPECTED_WAITS)?.records() {
        let rec = rec?;
        let m: usize = parse(&rec[0], "group")?;
        let n: usize = parse(&rec[1], "queue length")?;
        if m == 0 || m > out.len() + 1 {
            bail!("{EXPECTED_WAITS}: groups out of order");
        }
        if m > out.len() {
            out.push(Vec::new());
        }
        if n != out[m - 1].len() {
            bail!("{EXPECTED_WAITS}: queue lengths out of order");
        }
        out[m - 1].push(parse(&rec[2], "wait")?);
    }
    Ok(out)
}

pub fn write_steady_state(dir: &Path, probabilities: &[f64]) -> Result<()> {
    let mut w = writer(dir, STEADY_STATE)?;
    w.write_record(["queue_length", "probability"])?;
    for (n, &p) in probabilities.iter().enumerate() {
        w.write_record([n.to_string(), num(p)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_steady_state(dir: &Path) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for rec in reader(dir, STEADY_STATE)?.records() {
        let rec = rec?;
        if parse::<usize>(&rec[0], "queue length")? != out.len() {
            bail!("{STEADY_STATE}: rows out of order");
        }
        out.push(parse(&rec[1], "probability")?);
    }
    Ok(out)
}

pub fn write_history(dir: &Path, history: &[f64]) -> Result<()> {
    let mut w = writer(dir, GA_HISTORY)?;
    w.write_record(["generation", "best_fitness"])?;
    for (g, &f) in history.iter().enumerate() {
        w.write_record([(g + 1).to_string(), num(f)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(dir: &Path) -> Result<Vec<f64>> {
    reader(dir, GA_HISTORY)?
        .records()
        .map(|rec| parse(&rec?[1], "fitness"))
        .collect()
}

/// Joiner-weighted mean wait over all groups.
pub fn joiner_average_wait(
    params: &MarketParams,
    capacities: &CapacityVector,
    probabilities: &[f64],
    wait: impl Fn(usize, usize) -> f64,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for m in 0..capacities.len() {
        for (n, &p) in probabilities.iter().enumerate().take(capacities.get(m)) {
            let w = p * params.arrival_rate(m);
            num += w * wait(m, n);
            den += w;
        }
    }
    num / den
}

/// One scheme's outcome in benchmark and sweep tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRow {
    pub scheme: String,
    pub objective: ObjectiveKind,
    pub capacities: String,
    pub average_wait_hours: f64,
    pub objective_value: f64,
    pub converged: bool,
}

impl SchemeRow {
    pub fn lottery(params: &MarketParams, result: &LowerLevelResult) -> Self {
        let eq = &result.equilibrium;
        SchemeRow {
            scheme: "lottery".into(),
            objective: result.kind,
            capacities: format_capacities(&eq.capacities),
            average_wait_hours: joiner_average_wait(params, &eq.capacities, &eq.steady.probabilities, |m, n| {
                eq.waits.expected[m][n]
            }),
            objective_value: result.objective_value,
            converged: result.converged,
        }
    }

    pub fn benchmark(params: &MarketParams, result: &BenchmarkResult) -> Self {
        SchemeRow {
            scheme: result.scheme.to_string(),
            objective: result.kind,
            capacities: format_capacities(&result.capacities),
            average_wait_hours: joiner_average_wait(params, &result.capacities, &result.steady.probabilities, |_, n| {
                result.waits[n]
            }),
            objective_value: result.objective_value,
            converged: true,
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.scheme.clone(),
            self.objective.to_string(),
            self.capacities.clone(),
            num(self.average_wait_hours),
            num(self.objective_value),
            self.converged.to_string(),
        ]
    }

    fn parse(rec: &csv::StringRecord, offset: usize) -> Result<Self> {
        Ok(SchemeRow {
            scheme: rec[offset].to_string(),
            objective: parse_kind(&rec[offset + 1])?,
            capacities: rec[offset + 2].to_string(),
            average_wait_hours: parse(&rec[offset + 3], "wait")?,
            objective_value: parse(&rec[offset + 4], "objective value")?,
            converged: parse(&rec[offset + 5], "converged")?,
        })
    }
}

const SCHEME_HEADER: [&str; 6] = [
    "scheme", "objective", "capacities", "average_wait_hours", "objective_value", "converged",
];

pub fn parse_kind(s: &str) -> Result<ObjectiveKind> {
    match s {
        "profit" => Ok(ObjectiveKind::Profit),
        "welfare" => Ok(ObjectiveKind::Welfare),
        other => bail!("bad objective {other:?}"),
    }
}

pub fn write_benchmark(dir: &Path, rows: &[SchemeRow]) -> Result<()> {
    let mut w = writer(dir, BENCHMARK)?;
    let mut header = SCHEME_HEADER.to_vec();
    header.push("shortfall_vs_lottery");
    w.write_record(&header)?;
    let lottery = rows.iter().find(|r| r.scheme == "lottery").map(|r| r.objective_value);
    for r in rows {
        let mut rec = r.record();
        // (lottery - scheme) / |lottery|; positive when the scheme does worse
        rec.push(lottery.map_or(String::new(), |l| num((l - r.objective_value) / l.abs())));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_benchmark(dir: &Path) -> Result<Vec<SchemeRow>> {
    reader(dir, BENCHMARK)?
        .records()
        .map(|rec| SchemeRow::parse(&rec?, 0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub row: SchemeRow,
}

pub fn write_sweep(dir: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = writer(dir, SWEEP)?;
    let mut header = vec!["parameter", "value"];
    header.extend(SCHEME_HEADER);
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.parameter.clone(), num(r.value)];
        rec.extend(r.row.record());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep(dir: &Path) -> Result<Vec<SweepRow>> {
    reader(dir, SWEEP)?
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(SweepRow {
                parameter: rec[0].to_string(),
                value: parse(&rec[1], "value")?,
                row: SchemeRow::parse(&rec, 2)?,
            })
        })
        .collect()
}

pub fn write_agreement(dir: &Path, report: &AgreementReport) -> Result<()> {
    let mut w = writer(dir, SIM_STATES)?;
    w.write_record([
        "quantity", "group", "queue_length", "analytic", "empirical", "standard_error", "samples",
        "tested", "half_width", "covered",
    ])?;
    for r in &report.rows {
        w.write_record([
            match r.quantity {
                Quantity::Wait => "wait".to_string(),
                Quantity::Occupancy => "occupancy".to_string(),
            },
            r.group.map_or(String::new(), |g| (g + 1).to_string()),
            r.queue_length.to_string(),
            num(r.analytic),
            num(r.empirical),
            num(r.standard_error),
            r.samples.to_string(),
            r.tested.to_string(),
            num(r.half_width),
            r.covered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_agreement(dir: &Path) -> Result<Vec<AgreementRow>> {
    reader(dir, SIM_STATES)?
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok(AgreementRow {
                quantity: match &rec[0] {
                    "wait" => Quantity::Wait,
                    "occupancy" => Quantity::Occupancy,
                    other => bail!("bad quantity {other:?}"),
                },
                group: if rec[1].is_empty() { None } else { Some(parse::<usize>(&rec[1], "group")? - 1) },
                queue_length: parse(&rec[2], "queue length")?,
                analytic: parse(&rec[3], "analytic")?,
                empirical: parse(&rec[4], "empirical")?,
                standard_error: parse(&rec[5], "standard error")?,
                samples: parse(&rec[6], "samples")?,
                tested: parse(&rec[7], "tested")?,
                half_width: parse(&rec[8], "half width")?,
                covered: parse(&rec[9], "covered")?,
            })
        })
        .collect()
}

/// `metric,value` pairs of a simulation run.
pub fn sim_summary(stats: &SimStats, report: &AgreementReport) -> Vec<(String, f64)> {
    let c = &stats.conservation;
    vec![
        ("total_events".into(), stats.total_events as f64),
        ("measured_hours".into(), stats.measured_hours),
        ("profit_rate".into(), stats.profit_rate),
        ("profit_rate_se".into(), stats.profit_rate_se),
        ("welfare_rate".into(), stats.welfare_rate),
        ("welfare_rate_se".into(), stats.welfare_rate_se),
        ("max_queue_length".into(), stats.max_queue_length as f64),
        ("arrived".into(), c.arrived as f64),
        ("joined".into(), c.joined as f64),
        ("balked".into(), c.balked as f64),
        ("matched".into(), c.matched as f64),
        ("in_queue_at_end".into(), c.in_queue_at_end as f64),
        ("states_tested".into(), report.tested() as f64),
        ("states_covered".into(), report.covered() as f64),
        ("confidence".into(), report.confidence),
    ]
}

pub fn write_sim_summary(dir: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = writer(dir, SIM_SUMMARY)?;
    w.write_record(["metric", "value"])?;
    for (k, v) in rows {
        w.write_record([k.clone(), num(*v)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sim_summary(dir: &Path) -> Result<Vec<(String, f64)>> {
    reader(dir, SIM_SUMMARY)?
        .records()
        .map(|rec| {
            let rec = rec?;
            Ok((rec[0].to_string(), parse(&rec[1], "value")?))
        })
        .collect()
}

/// Machine-readable record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub core_version: String,
    /// Resolved configuration in TOML form.
    pub config: String,
    pub seed: Option<u64>,
    pub objective: ObjectiveKind,
    pub files: Vec<String>,
    pub converged: bool,
    pub started_unix_seconds: u64,
    pub wall_time_seconds: f64,
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
