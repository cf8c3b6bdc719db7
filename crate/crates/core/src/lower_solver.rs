//! Lower level: for fixed capacities, choose the entry lotteries (and with
//! them the prices) that maximize profit or welfare.
//!
//! Both objectives have the form `C - phi(x)` with
//!
//! ```text
//! phi(x) = sum_m a_m max(floor_m, max_n W_m^n(x)) + sum_{m,n} c_mn W_m^n(x)
//! ```
//!
//! where `x` stacks the lottery rows `delta_m^n` for `1 <= n < N_m` (row 0 is
//! fixed). `phi` is minimized by a prox-linear method: each step linearizes
//! `W` through the adjoint of the waiting-time system and solves the convex
//! subproblem
//!
//! ```text
//! min  sum_m a_m t_m + c'(W + J d) + rho/2 |d|^2
//! s.t. W + J d <= t_m,  t_m >= floor_m,  row sums of d = 0,  x + d >= 0
//! ```
//!
//! with Clarabel. `rho` adapts to the ratio of actual to predicted decrease.
//!
//! Under steady-state weighting `sum_n P_n sum_m lambda_m W_m^n` equals the
//! mean queue length `L` for every lottery, so `phi >= (r + nu) L` with
//! equality exactly when each group's waits are constant. Hitting the bound
//! certifies a global optimum and ends the multi-start early.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT,
    ZeroConeT,
};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{expected_waits, steady_state, EquilibriumSolution, SteadyState, WaitSystem, WaitingTimes};
use crate::error::{Error, Result};
use crate::model::{CapacityVector, LotteryPolicy, MarketParams, ObjectiveKind, PricePolicy};
use crate::objectives::{
    extend_policy, min_tolerable_wait, objective_rate, state_weight, ObjectiveWeighting,
    OverCapacityCertificate,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowerOptions {
    /// Stop when the predicted decrease falls below this fraction of the objective.
    pub tol_obj: f64,
    pub max_iterations: usize,
    /// FIFO, LIFO, uniform, then seeded random lotteries.
    pub starts: usize,
    pub seed: u64,
    pub weighting: ObjectiveWeighting,
    /// Relative gap to the queue-length lower bound accepted as a global certificate.
    pub certificate_tol: f64,
    /// Steps shorter than this (max norm) count as stationary.
    pub step_min: f64,
}

impl Default for LowerOptions {
    fn default() -> Self {
        LowerOptions {
            tol_obj: 1e-8,
            max_iterations: 5000,
            starts: 5,
            seed: 0,
            weighting: ObjectiveWeighting::SteadyState,
            certificate_tol: 1e-10,
            step_min: 1e-12,
        }
    }
}

impl LowerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_obj > 0.0) || !(self.certificate_tol >= 0.0) || !(self.step_min >= 0.0) {
            return Err(Error::InvalidOptions(
                "tolerances must be non-negative and tol_obj positive".into(),
            ));
        }
        if self.max_iterations == 0 || self.starts == 0 {
            return Err(Error::InvalidOptions(
                "max_iterations and starts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowerLevelResult {
    pub kind: ObjectiveKind,
    pub lottery: LotteryPolicy,
    pub prices: PricePolicy,
    /// Maximum tolerable expected wait per group, hours.
    pub xi: Vec<f64>,
    pub equilibrium: EquilibriumSolution,
    /// Currency per hour.
    pub objective_value: f64,
    pub converged: bool,
    /// Iterations of the winning start.
    pub iterations: usize,
    /// Iterations over all starts.
    pub total_iterations: usize,
    /// Index of the winning start.
    pub start: usize,
    /// Objective after each accepted iterate of the winning start.
    pub trace: Vec<f64>,
    /// `phi / ((r + nu) L) - 1` under steady-state weighting.
    pub certificate_gap: Option<f64>,
    pub certified: bool,
    /// Present when back placement was verified for over-capacity joiners.
    pub over_capacity: Option<OverCapacityCertificate>,
}

impl LowerLevelResult {
    /// `(max_n W - min_n W) / mean_n W` for a group.
    pub fn wait_spread(&self, group: usize) -> f64 {
        let w = &self.equilibrium.waits;
        (w.max_expected(group) - w.min_expected(group)) / w.mean_expected(group)
    }
}

/// Position of every free lottery entry in the stacked vector.
#[derive(Debug, Clone)]
struct Layout {
    /// `offsets[m][n - 1]` is the first index of row `delta_m^n`.
    offsets: Vec<Vec<usize>>,
    len: usize,
}

impl Layout {
    fn new(capacities: &CapacityVector) -> Self {
        let mut len = 0;
        let offsets = capacities
            .as_slice()
            .iter()
            .map(|&cap| {
                (1..cap)
                    .map(|n| {
                        let o = len;
                        len += n + 1;
                        o
                    })
                    .collect()
            })
            .collect();
        Layout { offsets, len }
    }

    fn rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.offsets
            .iter()
            .enumerate()
            .flat_map(|(m, rows)| rows.iter().enumerate().map(move |(k, &o)| (m, k + 1, o)))
    }

    fn pack(&self, lottery: &LotteryPolicy) -> Vec<f64> {
        let mut x = vec![0.0; self.len];
        for (m, n, o) in self.rows() {
            x[o..o + n + 1].copy_from_slice(lottery.row(m, n));
        }
        x
    }

    fn unpack(&self, x: &[f64], capacities: &CapacityVector) -> Result<LotteryPolicy> {
        let rows = self
            .offsets
            .iter()
            .map(|offs| {
                let mut group = vec![vec![1.0]];
                group.extend(offs.iter().enumerate().map(|(k, &o)| x[o..o + k + 2].to_vec()));
                group
            })
            .collect();
        LotteryPolicy::new(rows, capacities)
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &mut [f64]) {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - 1.0) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    for x in v.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
    // exact renormalization keeps the row sum within a few ulps of one
    let sum: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Fixed data of `phi` for one capacity vector.
#[derive(Debug, Clone)]
struct Problem<'a> {
    params: &'a MarketParams,
    capacities: &'a CapacityVector,
    kind: ObjectiveKind,
    weighting: ObjectiveWeighting,
    layout: Layout,
    steady: SteadyState,
    /// Weight of each group's maximum wait.
    a: Vec<f64>,
    /// `c[m][n]`, weight of `W_m^n`.
    c: Vec<Vec<f64>>,
    floor: Vec<Option<f64>>,
    /// Objective value is `constant - phi`.
    constant: f64,
    /// `(r + nu) L` when it bounds `phi` from below.
    lower_bound: Option<f64>,
}

impl<'a> Problem<'a> {
    fn new(
        params: &'a MarketParams,
        capacities: &'a CapacityVector,
        kind: ObjectiveKind,
        weighting: ObjectiveWeighting,
    ) -> Result<Self> {
        capacities.check_groups(params)?;
        let steady = steady_state(params, capacities)?;
        let r = params.driver_opportunity_rate();
        let nu = params.platform_opportunity_rate();
        let groups = params.group_count();
        let weights: Vec<Vec<f64>> = (0..groups)
            .map(|m| {
                (0..capacities.get(m))
                    .map(|n| state_weight(params, &steady, weighting, m, n))
                    .collect()
            })
            .collect();
        let mass: Vec<f64> = weights.iter().map(|w| w.iter().sum()).collect();
        let (a, c, floor) = match kind {
            ObjectiveKind::Profit => (
                mass.iter().map(|&t| r * t).collect(),
                weights.iter().map(|w| w.iter().map(|x| nu * x).collect()).collect(),
                (0..groups).map(|m| min_tolerable_wait(params, m)).collect(),
            ),
            ObjectiveKind::Welfare => (
                vec![0.0; groups],
                weights.iter().map(|w| w.iter().map(|x| (r + nu) * x).collect()).collect(),
                vec![None; groups],
            ),
        };
        let constant = (0..groups).map(|m| mass[m] * params.trip_surplus(m)).sum();
        let lower_bound = match weighting {
            ObjectiveWeighting::SteadyState => Some((r + nu) * steady.mean_queue_length()),
            ObjectiveWeighting::Unweighted => None,
        };
        Ok(Problem {
            params,
            capacities,
            kind,
            weighting,
            layout: Layout::new(capacities),
            steady,
            a,
            c,
            floor,
            constant,
            lower_bound,
        })
    }

    fn group_level(&self, m: usize, max_wait: f64) -> f64 {
        self.floor[m].map_or(max_wait, |f| f.max(max_wait))
    }

    fn phi(&self, expected: &[Vec<f64>]) -> f64 {
        let mut phi = 0.0;
        for (m, w) in expected.iter().enumerate() {
            let max_wait = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            phi += self.a[m] * self.group_level(m, max_wait);
            phi += self.c[m].iter().zip(w).map(|(c, w)| c * w).sum::<f64>();
        }
        phi
    }

    fn evaluate(&self, lottery: LotteryPolicy) -> Result<Iterate> {
        let system = WaitSystem::build(self.params, self.capacities, &lottery)?;
        let conditional = system.conditional();
        let expected = expected_waits(&conditional, &lottery, self.capacities)?;
        let phi = self.phi(&expected);
        Ok(Iterate {
            lottery,
            system,
            waits: WaitingTimes {
                conditional,
                expected,
            },
            phi,
        })
    }

    /// Rows `(m, n)` of `dW_m^n / dx`, densely over the stacked lottery vector.
    fn jacobian(&self, it: &Iterate) -> Result<Vec<Vec<f64>>> {
        let transposed = it.system.matrix.transpose().factor()?;
        let blocks = self.capacities.rejection_threshold();
        let w = &it.waits.conditional;
        let mut rows = Vec::new();
        for m in 0..self.capacities.len() {
            for n in 0..self.capacities.get(m) {
                let rhs: Vec<DVector<f64>> = (0..blocks)
                    .map(|k| {
                        if k == n {
                            DVector::from_column_slice(it.lottery.row(m, n))
                        } else {
                            DVector::zeros(k + 1)
                        }
                    })
                    .collect();
                let y = transposed.solve(&rhs)?;
                let mut grad = vec![0.0; self.layout.len];
                for (c, k, o) in self.layout.rows() {
                    let rate = self.params.arrival_rate(c);
                    // suffix sums over l = i..=k of y_{k-1,l} (w_k^{l+1} - w_k^l)
                    let mut acc = 0.0;
                    for i in (1..=k).rev() {
                        acc += y[k - 1][i - 1] * (w[k][i] - w[k][i - 1]);
                        grad[o + i - 1] = rate * acc;
                    }
                    grad[o + k] = 0.0;
                    if c == m && k == n {
                        for (g, wl) in grad[o..o + k + 1].iter_mut().zip(&w[k]) {
                            *g += wl;
                        }
                    }
                }
                rows.push(grad);
            }
        }
        Ok(rows)
    }

    fn certified(&self, phi: f64, tol: f64) -> Option<(f64, bool)> {
        self.lower_bound.map(|lb| {
            let gap = if lb > 0.0 { phi / lb - 1.0 } else { 0.0 };
            (gap, gap <= tol)
        })
    }

    /// One proximal step; returns `(d, predicted decrease)`.
    fn step(&self, it: &Iterate, x: &[f64], jac: &[Vec<f64>], rho: f64) -> Result<(Vec<f64>, f64)> {
        let v = self.layout.len;
        let active: Vec<usize> = (0..self.a.len()).filter(|&m| self.a[m] > 0.0).collect();
        let slot = |m: usize| active.iter().position(|&g| g == m);
        let nvar = v + active.len();

        let mut q = vec![0.0; nvar];
        let mut row = 0;
        let mut wrow = Vec::new();
        for m in 0..self.capacities.len() {
            for n in 0..self.capacities.get(m) {
                for (qj, jj) in q[..v].iter_mut().zip(&jac[row]) {
                    *qj += self.c[m][n] * jj;
                }
                wrow.push((m, n));
                row += 1;
            }
        }
        for (s, &m) in active.iter().enumerate() {
            q[v + s] = self.a[m];
        }
        let p = CscMatrix::new_from_triplets(nvar, nvar, (0..v).collect(), (0..v).collect(), vec![rho; v]);

        let (mut ai, mut aj, mut av, mut b) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut cons = 0;
        for (_, n, o) in self.layout.rows() {
            for j in o..o + n + 1 {
                ai.push(cons);
                aj.push(j);
                av.push(1.0);
            }
            b.push(0.0);
            cons += 1;
        }
        let zero_rows = cons;
        for (r, &(m, n)) in wrow.iter().enumerate() {
            let Some(s) = slot(m) else { continue };
            for (j, &g) in jac[r].iter().enumerate() {
                if g != 0.0 {
                    ai.push(cons);
                    aj.push(j);
                    av.push(g);
                }
            }
            ai.push(cons);
            aj.push(v + s);
            av.push(-1.0);
            b.push(-it.waits.expected[m][n]);
            cons += 1;
        }
        for (j, &xj) in x.iter().enumerate() {
            ai.push(cons);
            aj.push(j);
            av.push(-1.0);
            b.push(xj);
            cons += 1;
        }
        for (s, &m) in active.iter().enumerate() {
            if let Some(f) = self.floor[m] {
                ai.push(cons);
                aj.push(v + s);
                av.push(-1.0);
                b.push(-f);
                cons += 1;
            }
        }
        let a = CscMatrix::new_from_triplets(cons, nvar, ai, aj, av);
        let cones: Vec<SupportedConeT<f64>> = vec![ZeroConeT(zero_rows), NonnegativeConeT(cons - zero_rows)];

        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: 1e-12,
            tol_gap_rel: 1e-12,
            tol_feas: 1e-12,
            max_iter: 200,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Subproblem(e.to_string()))?;
        solver.solve();
        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            other => return Err(Error::Subproblem(format!("{other:?}"))),
        }
        let z = &solver.solution.x;
        let d = z[..v].to_vec();

        // model value without the proximal term
        let mut model = 0.0;
        let mut row = 0;
        for m in 0..self.capacities.len() {
            let mut level = f64::NEG_INFINITY;
            for n in 0..self.capacities.get(m) {
                let lin = it.waits.expected[m][n] + dot(&jac[row], &d);
                level = level.max(lin);
                model += self.c[m][n] * lin;
                row += 1;
            }
            model += self.a[m] * self.group_level(m, level);
        }
        Ok((d, it.phi - model))
    }

    fn finish(&self, run: StartRun, options: &LowerOptions) -> Result<LowerLevelResult> {
        let params = self.params;
        let groups = params.group_count();
        let cap = params.commission_cap();
        let mut xi = Vec::with_capacity(groups);
        let mut prices = Vec::with_capacity(groups);
        for m in 0..groups {
            let max_wait = run.best.waits.max_expected(m);
            let level = match self.kind {
                ObjectiveKind::Profit => self.group_level(m, max_wait),
                ObjectiveKind::Welfare => max_wait,
            };
            let price = params.reward(m) - params.driver_opportunity_rate() * (params.trip_duration() + level);
            xi.push(level);
            prices.push(cap.map_or(price, |c| price.min(c)));
        }
        let prices = PricePolicy::new(params, prices)?;
        let equilibrium = EquilibriumSolution {
            capacities: self.capacities.clone(),
            lottery: run.best.lottery.clone(),
            prices: prices.clone(),
            waits: run.best.waits.clone(),
            steady: self.steady.clone(),
        };
        let objective_value = objective_rate(params, &equilibrium, self.kind, self.weighting).total_rate;
        let certificate = self.certified(run.best.phi, options.certificate_tol);
        let (lottery, over_capacity) =
            match extend_policy(params, self.capacities, &run.best.lottery, &run.best.waits) {
                Ok((lottery, cert)) => (lottery, Some(cert)),
                Err(e) => {
                    log::warn!("capacities {}: {e}", self.capacities);
                    (run.best.lottery.clone(), None)
                }
            };
        let equilibrium = EquilibriumSolution {
            lottery: lottery.clone(),
            ..equilibrium
        };
        Ok(LowerLevelResult {
            kind: self.kind,
            lottery,
            prices,
            xi,
            equilibrium,
            objective_value,
            converged: run.converged,
            iterations: run.iterations,
            total_iterations: 0,
            start: 0,
            trace: run.trace.iter().map(|phi| self.constant - phi).collect(),
            certificate_gap: certificate.map(|c| c.0),
            certified: certificate.is_some_and(|c| c.1),
            over_capacity,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Iterate {
    lottery: LotteryPolicy,
    system: WaitSystem,
    waits: WaitingTimes,
    phi: f64,
}

struct StartRun {
    best: Iterate,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

fn run_start(problem: &Problem, start: LotteryPolicy, options: &LowerOptions) -> Result<StartRun> {
    let layout = &problem.layout;
    let mut current = problem.evaluate(start)?;
    let mut x = layout.pack(&current.lottery);
    let mut trace = vec![current.phi];
    let mut rho = 1.0;
    let mut converged = layout.len == 0;
    let mut iterations = 0;
    while !converged && iterations < options.max_iterations {
        if problem
            .certified(current.phi, options.certificate_tol)
            .is_some_and(|c| c.1)
        {
            converged = true;
            break;
        }
        iterations += 1;
        let jac = problem.jacobian(&current)?;
        let (d, predicted) = match problem.step(&current, &x, &jac, rho) {
            Ok(step) => step,
            Err(e) => {
                log::debug!("capacities {}: {e}; raising rho", problem.capacities);
                rho *= 5.0;
                if rho > 1e12 {
                    break;
                }
                continue;
            }
        };
        if predicted <= options.tol_obj * current.phi.abs().max(1.0) {
            converged = true;
            break;
        }
        let step_len = d.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if step_len < options.step_min {
            converged = true;
            break;
        }
        let mut candidate = x.clone();
        for (c, dv) in candidate.iter_mut().zip(&d) {
            *c += dv;
        }
        for (_, n, o) in layout.rows() {
            project_simplex(&mut candidate[o..o + n + 1]);
        }
        let next = problem.evaluate(layout.unpack(&candidate, problem.capacities)?)?;
        if next.phi <= current.phi - 0.1 * predicted {
            x = candidate;
            current = next;
            trace.push(current.phi);
            rho = (rho / 3.0).max(1e-8);
        } else {
            rho *= 5.0;
            if rho > 1e12 {
                // steps have shrunk far below any meaningful lottery change
                converged = true;
                break;
            }
        }
    }
    Ok(StartRun {
        best: current,
        converged,
        iterations,
        trace,
    })
}

fn start_lottery(index: usize, capacities: &CapacityVector, rng: &mut ChaCha8Rng) -> LotteryPolicy {
    match index {
        0 => LotteryPolicy::fifo(capacities),
        1 => LotteryPolicy::lifo(capacities),
        2 => LotteryPolicy::uniform(capacities),
        _ => LotteryPolicy::random(capacities, rng),
    }
}

/// Seed for the random starts, mixing the capacities so that different
/// chromosomes get different draws under one global seed.
fn start_seed(seed: u64, capacities: &CapacityVector) -> u64 {
    capacities
        .as_slice()
        .iter()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, &n| {
            (h ^ n as u64).wrapping_mul(0x0100_0000_01b3).rotate_left(17)
        })
}

/// Solves the lower-level problem for one capacity vector.
pub fn solve_lower(
    params: &MarketParams,
    capacities: &CapacityVector,
    kind: ObjectiveKind,
    options: &LowerOptions,
) -> Result<LowerLevelResult> {
    options.validate()?;
    let problem = Problem::new(params, capacities, kind, options.weighting)?;
    let mut rng = ChaCha8Rng::seed_from_u64(start_seed(options.seed, capacities));
    let mut best: Option<(usize, StartRun)> = None;
    let mut total_iterations = 0;
    for index in 0..options.starts {
        let start = start_lottery(index, capacities, &mut rng);
        let run = run_start(&problem, start, options)?;
        total_iterations += run.iterations;
        let done = problem
            .certified(run.best.phi, options.certificate_tol)
            .is_some_and(|c| c.1);
        let better = best.as_ref().is_none_or(|(_, b)| run.best.phi < b.best.phi);
        if better {
            best = Some((index, run));
        }
        if done || problem.layout.len == 0 {
            break;
        }
    }
    let (index, run) = best.expect("at least one start");
    let mut result = problem.finish(run, options)?;
    result.total_iterations = total_iterations;
    result.start = index;
    log::debug!(
        "lower {kind} {capacities}: objective {:.9} start {index} iterations {total_iterations} certified {}",
        result.objective_value,
        result.certified
    );
    Ok(result)
}

/// Objective of a given lottery under the solver's price rule, steady-state weighted.
pub fn evaluate_candidate(
    params: &MarketParams,
    capacities: &CapacityVector,
    lottery: &LotteryPolicy,
    kind: ObjectiveKind,
) -> Result<f64> {
    evaluate_candidate_weighted(params, capacities, lottery, kind, ObjectiveWeighting::SteadyState)
}

pub fn evaluate_candidate_weighted(
    params: &MarketParams,
    capacities: &CapacityVector,
    lottery: &LotteryPolicy,
    kind: ObjectiveKind,
    weighting: ObjectiveWeighting,
) -> Result<f64> {
    let problem = Problem::new(params, capacities, kind, weighting)?;
    let it = problem.evaluate(lottery.clone())?;
    Ok(problem.constant - it.phi)
}
