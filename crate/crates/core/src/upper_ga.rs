//! Upper level: genetic search over integer capacity vectors.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lower_solver::{solve_lower, LowerLevelResult, LowerOptions};
use crate::model::{CapacityVector, MarketParams, ObjectiveKind};
use crate::objectives::capacity_upper_bound;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaOptions {
    pub population: usize,
    pub max_generations: usize,
    pub elite: usize,
    pub tournament: usize,
    pub mutation_probability: f64,
    /// Stop after this many generations without improvement.
    pub stall_limit: usize,
    pub seed: u64,
    pub grid_step: usize,
}

impl Default for GaOptions {
    fn default() -> Self {
        GaOptions {
            population: 30,
            max_generations: 200,
            elite: 2,
            tournament: 3,
            mutation_probability: 0.2,
            stall_limit: 10,
            seed: 0,
            grid_step: 5,
        }
    }
}

impl GaOptions {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::InvalidOptions(msg.to_string()));
        if self.elite < 1 || self.population <= self.elite {
            return fail("population must exceed elite count and elite must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_probability) {
            return fail("mutation_probability must lie in [0, 1]");
        }
        if self.stall_limit < 1 || self.tournament < 1 || self.grid_step < 1 || self.max_generations < 1 {
            return fail("stall_limit, tournament, grid_step and max_generations must be at least 1");
        }
        Ok(())
    }
}

/// Lower-level results keyed by capacity vector; failures are stored as `None`.
///
/// The lower level is deterministic for fixed options, so one cache may be
/// shared by several GA runs on the same market and objective.
#[derive(Debug, Default)]
pub struct FitnessCache {
    entries: Mutex<HashMap<CapacityVector, Option<Arc<LowerLevelResult>>>>,
}

impl FitnessCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, caps: &CapacityVector) -> Option<Option<Arc<LowerLevelResult>>> {
        self.entries.lock().expect("cache lock").get(caps).cloned()
    }

    fn insert(&self, caps: CapacityVector, value: Option<Arc<LowerLevelResult>>) {
        self.entries.lock().expect("cache lock").insert(caps, value);
    }
}

fn fitness_of(entry: &Option<Arc<LowerLevelResult>>) -> f64 {
    entry.as_ref().map_or(f64::NEG_INFINITY, |r| r.objective_value)
}

/// Shared evaluation context of one market/objective pair.
struct Evaluator<'a> {
    params: &'a MarketParams,
    kind: ObjectiveKind,
    lower: &'a LowerOptions,
    cache: &'a FitnessCache,
}

impl Evaluator<'_> {
    fn solve(&self, caps: &CapacityVector) -> Option<Arc<LowerLevelResult>> {
        match solve_lower(self.params, caps, self.kind, self.lower) {
            Ok(r) => Some(Arc::new(r)),
            Err(e) => {
                log::warn!("lower level failed at {caps}: {e}");
                None
            }
        }
    }

    /// Evaluates the uncached members in parallel, then returns all fitnesses.
    fn evaluate(&self, population: &[CapacityVector]) -> Vec<f64> {
        let mut missing: Vec<&CapacityVector> =
            population.iter().filter(|c| self.cache.get(c).is_none()).collect();
        missing.sort();
        missing.dedup();
        let solved: Vec<(CapacityVector, Option<Arc<LowerLevelResult>>)> = missing
            .par_iter()
            .map(|c| ((*c).clone(), self.solve(c)))
            .collect();
        for (c, r) in solved {
            self.cache.insert(c, r);
        }
        population
            .iter()
            .map(|c| fitness_of(&self.cache.get(c).expect("evaluated")))
            .collect()
    }

    fn fitness(&self, caps: &CapacityVector) -> f64 {
        self.evaluate(std::slice::from_ref(caps))[0]
    }
}

/// Per-group upper limits from [`capacity_upper_bound`], at least 1.
pub fn capacity_bounds(params: &MarketParams, kind: ObjectiveKind) -> Result<Vec<usize>> {
    (0..params.group_count())
        .map(|m| capacity_upper_bound(params, m, kind).map(|b| b.limit.max(1)))
        .collect()
}

/// Coarse coordinate ascent on a grid of `step`: each group's capacity grows
/// by `step` until the objective first drops, and the first worse grid point
/// is kept so that the returned bounds bracket the optimum.
pub fn grid_initialize(
    params: &MarketParams,
    kind: ObjectiveKind,
    lower: &LowerOptions,
    step: usize,
) -> Result<Vec<usize>> {
    grid_initialize_cached(params, kind, lower, step, &FitnessCache::new())
}

pub fn grid_initialize_cached(
    params: &MarketParams,
    kind: ObjectiveKind,
    lower: &LowerOptions,
    step: usize,
    cache: &FitnessCache,
) -> Result<Vec<usize>> {
    if step == 0 {
        return Err(Error::InvalidOptions("grid step must be positive".into()));
    }
    let bounds = capacity_bounds(params, kind)?;
    let degenerate: Vec<bool> = (0..params.group_count())
        .map(|m| capacity_upper_bound(params, m, kind).map(|b| b.degenerate))
        .collect::<Result<_>>()?;
    let eval = Evaluator {
        params,
        kind,
        lower,
        cache,
    };
    let mut current: Vec<usize> = bounds.iter().map(|&b| step.min(b)).collect();
    let mut top = vec![1; bounds.len()];
    for (m, &d) in degenerate.iter().enumerate() {
        if d {
            current[m] = 1;
        }
    }
    // two sweeps let each group react to the other's ascent
    for _ in 0..2 {
        for m in 0..bounds.len() {
            if degenerate[m] {
                continue;
            }
            let mut caps = current.clone();
            caps[m] = step.min(bounds[m]);
            let mut best = eval.fitness(&CapacityVector::new(caps.clone())?);
            let mut best_n = caps[m];
            while caps[m] < bounds[m] {
                caps[m] = (caps[m] + step).min(bounds[m]);
                let f = eval.fitness(&CapacityVector::new(caps.clone())?);
                if f < best {
                    break;
                }
                best = f;
                best_n = caps[m];
            }
            current[m] = best_n;
            top[m] = top[m].max(caps[m]);
        }
    }
    log::info!("ga grid_bounds={top:?}");
    Ok(top)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaResult {
    pub best: CapacityVector,
    pub best_result: LowerLevelResult,
    /// Best fitness after each generation.
    pub history: Vec<f64>,
    /// Distinct capacity vectors evaluated by this run (cache hits excluded).
    pub evaluations: usize,
    pub generations: usize,
    /// Upper end of the initialization box.
    pub init_bounds: Vec<usize>,
    /// Mutation clamp.
    pub capacity_bounds: Vec<usize>,
}

impl GaResult {
    pub fn best_fitness(&self) -> f64 {
        self.best_result.objective_value
    }
}

pub fn run_ga(
    params: &MarketParams,
    kind: ObjectiveKind,
    options: &GaOptions,
    lower: &LowerOptions,
) -> Result<GaResult> {
    run_ga_cached(params, kind, options, lower, &FitnessCache::new())
}

/// Ordering used everywhere a best chromosome is picked: higher fitness, then
/// the lexicographically smaller capacity vector.
fn better(a: (f64, &CapacityVector), b: (f64, &CapacityVector)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub fn run_ga_cached(
    params: &MarketParams,
    kind: ObjectiveKind,
    options: &GaOptions,
    lower: &LowerOptions,
    cache: &FitnessCache,
) -> Result<GaResult> {
    options.validate()?;
    lower.validate()?;
    let start_size = cache.len();
    let bounds = capacity_bounds(params, kind)?;
    let init = grid_initialize_cached(params, kind, lower, options.grid_step, cache)?;
    let eval = Evaluator {
        params,
        kind,
        lower,
        cache,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let groups = bounds.len();

    let mut population: Vec<CapacityVector> = Vec::with_capacity(options.population);
    for corner in 0..(1usize << groups.min(16)) {
        if population.len() >= options.population {
            break;
        }
        let genes = (0..groups).map(|m| if corner >> m & 1 == 1 { init[m] } else { 1 }).collect();
        population.push(CapacityVector::new(genes)?);
    }
    if population.len() < options.population {
        population.push(CapacityVector::new(init.iter().map(|&h| h.div_ceil(2)).collect())?);
    }
    while population.len() < options.population {
        let genes = init.iter().map(|&h| rng.gen_range(1..=h)).collect();
        population.push(CapacityVector::new(genes)?);
    }

    let mut history = Vec::new();
    let mut best: Option<(f64, CapacityVector)> = None;
    let mut stall = 0;
    let mut generations = 0;
    loop {
        let fitness = eval.evaluate(&population);
        generations += 1;
        let mut improved = false;
        for (c, &f) in population.iter().zip(&fitness) {
            let replace = match &best {
                None => true,
                Some((bf, bc)) => better((f, c), (*bf, bc)),
            };
            if replace {
                improved = improved || best.as_ref().is_none_or(|(bf, _)| f > *bf);
                best = Some((f, c.clone()));
            }
        }
        let (best_f, best_c) = best.clone().expect("population is not empty");
        history.push(best_f);
        log::info!(
            "ga generation={} best_fitness={:.9} best={} evaluations={}",
            generations,
            best_f,
            best_c,
            cache.len() - start_size
        );
        stall = if improved { 0 } else { stall + 1 };
        if stall >= options.stall_limit || generations >= options.max_generations {
            break;
        }

        let mut order: Vec<usize> = (0..population.len()).collect();
        order.sort_by(|&i, &j| {
            fitness[j]
                .total_cmp(&fitness[i])
                .then_with(|| population[i].cmp(&population[j]))
        });
        let mut next: Vec<CapacityVector> =
            order[..options.elite].iter().map(|&i| population[i].clone()).collect();
        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let picks: Vec<usize> = (0..options.tournament)
                .map(|_| rng.gen_range(0..population.len()))
                .collect();
            *picks
                .iter()
                .reduce(|a, b| {
                    if better((fitness[*b], &population[*b]), (fitness[*a], &population[*a])) {
                        b
                    } else {
                        a
                    }
                })
                .expect("tournament size is positive")
        };
        while next.len() < options.population {
            let a = &population[tournament(&mut rng)];
            let b = &population[tournament(&mut rng)];
            let genes: Vec<usize> = (0..groups)
                .map(|m| {
                    let gene = if rng.gen_bool(0.5) { a.get(m) } else { b.get(m) };
                    if rng.gen_bool(options.mutation_probability) {
                        let delta = *[-1i64, 0, 1].choose(&mut rng).expect("non-empty");
                        (gene as i64 + delta).clamp(1, bounds[m] as i64) as usize
                    } else {
                        gene
                    }
                })
                .collect();
            next.push(CapacityVector::new(genes)?);
        }
        population = next;
    }

    let (_, best_c) = best.expect("population is not empty");
    let best_result = cache
        .get(&best_c)
        .flatten()
        .ok_or_else(|| Error::Subproblem(format!("every lower-level solve failed; last best {best_c}")))?;
    Ok(GaResult {
        best: best_c,
        best_result: (*best_result).clone(),
        history,
        evaluations: cache.len() - start_size,
        generations,
        init_bounds: init,
        capacity_bounds: bounds,
    })
}

/// Exhaustive search over the box `[1, bounds_m]`, for validation.
pub fn enumerate_capacities(
    params: &MarketParams,
    kind: ObjectiveKind,
    bounds: &[usize],
    lower: &LowerOptions,
    cache: &FitnessCache,
) -> Result<(CapacityVector, f64)> {
    let mut all = vec![Vec::new()];
    for &b in bounds {
        all = all
            .into_iter()
            .flat_map(|prefix: Vec<usize>| {
                (1..=b).map(move |n| {
                    let mut v = prefix.clone();
                    v.push(n);
                    v
                })
            })
            .collect();
    }
    let population = all.into_iter().map(CapacityVector::new).collect::<Result<Vec<_>>>()?;
    let eval = Evaluator {
        params,
        kind,
        lower,
        cache,
    };
    let fitness = eval.evaluate(&population);
    let mut best = (fitness[0], &population[0]);
    for (c, &f) in population.iter().zip(&fitness) {
        if better((f, c), best) {
            best = (f, c);
        }
    }
    Ok((best.1.clone(), best.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_market() -> MarketParams {
        // profit bound ceil(mu (R - r T_d) / nu - 1/2) = ceil(2 * 2 / 1.5 - 0.5) = 3
        MarketParams::new(vec![1.5], 2.0, vec![4.0], 4.0, 1.5, 0.5).unwrap()
    }

    #[test]
    fn options_validation() {
        assert!(GaOptions::default().validate().is_ok());
        let bad = GaOptions { elite: 30, ..GaOptions::default() };
        assert!(bad.validate().is_err());
        let bad = GaOptions { mutation_probability: 1.5, ..GaOptions::default() };
        assert!(bad.validate().is_err());
        let bad = GaOptions { stall_limit: 0, ..GaOptions::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_instance_matches_enumeration() {
        let p = small_market();
        let bounds = capacity_bounds(&p, ObjectiveKind::Profit).unwrap();
        assert_eq!(bounds, vec![3]);
        let lower = LowerOptions::default();
        let cache = FitnessCache::new();
        let ga = run_ga_cached(&p, ObjectiveKind::Profit, &GaOptions::default(), &lower, &cache).unwrap();
        let (caps, f) = enumerate_capacities(&p, ObjectiveKind::Profit, &bounds, &lower, &cache).unwrap();
        assert_eq!(ga.best, caps);
        assert_eq!(ga.best_fitness(), f);
    }

    #[test]
    fn elitism_and_determinism() {
        let p = MarketParams::new(vec![2.0, 1.0], 4.0, vec![30.0, 40.0], 20.0, 4.0, 0.5).unwrap();
        let opts = GaOptions { seed: 7, ..GaOptions::default() };
        let a = run_ga(&p, ObjectiveKind::Profit, &opts, &LowerOptions::default()).unwrap();
        for w in a.history.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(*a.history.last().unwrap(), a.best_fitness());
        for (m, &b) in a.capacity_bounds.iter().enumerate() {
            assert!(a.best.get(m) >= 1 && a.best.get(m) <= b);
        }
        let b = run_ga(&p, ObjectiveKind::Profit, &opts, &LowerOptions::default()).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn degenerate_group_gets_unit_bound() {
        // group 0 has no surplus under the charged accounting: R = (r + nu) T_d
        let p = MarketParams::new(vec![1.0, 1.0], 3.0, vec![22.5, 60.0], 40.0, 5.0, 0.5)
            .unwrap()
            .with_trip_cost(crate::model::TripCostAccounting::DriverAndPlatform)
            .unwrap();
        let h = grid_initialize(&p, ObjectiveKind::Welfare, &LowerOptions::default(), 5).unwrap();
        assert_eq!(h[0], 1);
    }
}
