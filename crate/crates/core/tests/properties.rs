//! Cross-module invariants over randomly drawn markets and lotteries.

use proptest::prelude::*;
use queue_lottery::benchmarks::{dynamic_pricing_optimum, evaluate_scheme, fifo_wait, Scheme};
use queue_lottery::equilibrium::{balance_residual, solve_waiting_times, steady_state, EquilibriumSolution};
use queue_lottery::lower_solver::{solve_lower, LowerOptions};
use queue_lottery::model::{
    effective_arrival_rate, CapacityVector, LotteryPolicy, MarketParams, ObjectiveKind, PricePolicy,
};
use queue_lottery::objectives::{capacity_upper_bound, extend_policy, profit_rate, welfare_rate};
use queue_lottery::simulator::{simulate, PriceSchedule, SimConfig, SimPolicy};
use queue_lottery::upper_ga::{run_ga, GaOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn market() -> impl Strategy<Value = MarketParams> {
    (
        prop::collection::vec(0.2f64..5.0, 1..=3),
        0.5f64..8.0,
        5.0f64..30.0,
        0.5f64..6.0,
        0.5f64..6.0,
        0.0f64..1.0,
    )
        .prop_flat_map(|(lambda, mu, reward, r, nu, td)| {
            let m = lambda.len();
            (Just((lambda, mu, r, nu, td)), prop::collection::vec(reward..reward + 10.0, m))
        })
        .prop_map(|((lambda, mu, r, nu, td), rewards)| MarketParams::new(lambda, mu, rewards, r, nu, td).unwrap())
}

fn capacities(groups: usize, max: usize) -> impl Strategy<Value = CapacityVector> {
    prop::collection::vec(1..=max, groups).prop_map(|v| CapacityVector::new(v).unwrap())
}

/// Market, capacities and a random lottery.
fn instance(max: usize) -> impl Strategy<Value = (MarketParams, CapacityVector, LotteryPolicy)> {
    market()
        .prop_flat_map(move |p| {
            let m = p.group_count();
            (Just(p), capacities(m, max), any::<u64>())
        })
        .prop_map(|(p, caps, seed)| {
            let lottery = LotteryPolicy::random(&caps, &mut ChaCha8Rng::seed_from_u64(seed));
            (p, caps, lottery)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn effective_rate_non_increasing((p, caps, _) in instance(12)) {
        for m in 0..p.group_count() {
            for n in 0..=caps.rejection_threshold() + 2 {
                prop_assert!(effective_arrival_rate(&p, m, n + 1, &caps) <= effective_arrival_rate(&p, m, n, &caps));
            }
        }
    }

    #[test]
    fn random_lotteries_are_normalized((_, caps, lot) in instance(15)) {
        prop_assert!(lot.max_normalization_error() <= 1e-12);
        prop_assert!(lot.check_capacities(&caps).is_ok());
    }

    #[test]
    fn waits_solve_the_balance_equations((p, caps, lot) in instance(15)) {
        let w = solve_waiting_times(&p, &caps, &lot).unwrap();
        prop_assert!(balance_residual(&p, &caps, &lot, &w.conditional) <= 1e-10);
        for n in 0..caps.rejection_threshold() {
            for l in 1..=n {
                prop_assert!(w.conditional(n, l + 1) > w.conditional(n, l));
            }
        }
    }

    #[test]
    fn fifo_waits_are_closed_form((p, caps, _) in instance(30)) {
        let w = solve_waiting_times(&p, &caps, &LotteryPolicy::fifo(&caps)).unwrap();
        for n in 0..caps.rejection_threshold() {
            for l in 1..=n + 1 {
                prop_assert!((w.conditional(n, l) - l as f64 / p.passenger_rate()).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn steady_state_is_normalized_and_balanced((p, caps, _) in instance(40)) {
        let s = steady_state(&p, &caps).unwrap();
        prop_assert!((s.probabilities.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for n in 0..caps.rejection_threshold() {
            let up: f64 = (0..p.group_count()).map(|m| effective_arrival_rate(&p, m, n, &caps)).sum();
            let flow_up = s.probabilities[n] * up;
            let flow_down = s.probabilities[n + 1] * p.passenger_rate();
            prop_assert!((flow_up - flow_down).abs() <= 1e-12 * flow_up.max(flow_down).max(1.0));
        }
    }

    #[test]
    fn welfare_ignores_prices((p, caps, lot) in instance(10), shift in -3.0f64..0.0) {
        let a = EquilibriumSolution::solve(&p, caps.clone(), lot.clone(), PricePolicy::zero(&p)).unwrap();
        let prices: Vec<f64> = (0..p.group_count()).map(|m| p.price_ceiling(m) + shift).collect();
        let b = EquilibriumSolution::solve(&p, caps, lot, PricePolicy::new(&p, prices).unwrap()).unwrap();
        prop_assert_eq!(welfare_rate(&p, &a), welfare_rate(&p, &b));
    }

    #[test]
    fn profit_falls_with_any_wait((p, caps, lot) in instance(10), pick in any::<prop::sample::Index>()) {
        let eq = EquilibriumSolution::solve(&p, caps.clone(), lot, PricePolicy::zero(&p)).unwrap();
        let cells: Vec<(usize, usize)> = (0..caps.len()).flat_map(|m| (0..caps.get(m)).map(move |n| (m, n))).collect();
        let (m, n) = cells[pick.index(cells.len())];
        let mut worse = eq.clone();
        worse.waits.expected[m][n] += 0.1;
        prop_assert!(profit_rate(&p, &worse).total_rate < profit_rate(&p, &eq).total_rate);
    }

    #[test]
    fn welfare_bound_monotone_in_rate_and_reward(p in market(), dmu in 0.0f64..5.0, dr in 0.0f64..5.0) {
        for m in 0..p.group_count() {
            let base = capacity_upper_bound(&p, m, ObjectiveKind::Welfare).unwrap().limit;
            let faster = p.clone().with_passenger_rate(p.passenger_rate() + dmu).unwrap();
            prop_assert!(capacity_upper_bound(&faster, m, ObjectiveKind::Welfare).unwrap().limit >= base);
            let mut rewards = p.rewards().to_vec();
            rewards[m] += dr;
            let richer = p.clone().with_rewards(rewards).unwrap();
            prop_assert!(capacity_upper_bound(&richer, m, ObjectiveKind::Welfare).unwrap().limit >= base);
        }
    }

    #[test]
    fn extension_keeps_lottery_rows((p, caps, lot) in instance(10)) {
        let w = solve_waiting_times(&p, &caps, &lot).unwrap();
        let (ext, _) = extend_policy(&p, &caps, &lot, &w).unwrap();
        for m in 0..caps.len() {
            for n in 0..caps.get(m) {
                prop_assert_eq!(ext.row(m, n), lot.row(m, n));
            }
        }
    }

    #[test]
    fn benchmark_waits_are_back_of_queue((p, caps, _) in instance(20)) {
        if let Some(b) = evaluate_scheme(&p, ObjectiveKind::Profit, Scheme::Dynamic, &caps).unwrap() {
            for (n, &w) in b.waits.iter().enumerate() {
                prop_assert_eq!(w, fifo_wait(&p, n));
                prop_assert_eq!(w, (n + 1) as f64 / p.passenger_rate());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lower_level_iterates_stay_feasible_and_improve((p, caps, _) in instance(6), seed in any::<u64>()) {
        let options = LowerOptions { seed, ..LowerOptions::default() };
        for kind in [ObjectiveKind::Profit, ObjectiveKind::Welfare] {
            let a = solve_lower(&p, &caps, kind, &options).unwrap();
            prop_assert!(a.lottery.max_normalization_error() <= 1e-12);
            prop_assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
            let b = solve_lower(&p, &caps, kind, &options).unwrap();
            prop_assert_eq!(a.objective_value, b.objective_value);
            prop_assert_eq!(a.lottery, b.lottery);
        }
    }

    #[test]
    fn ga_keeps_elitism(p in market(), seed in any::<u64>()) {
        let options = GaOptions { population: 8, max_generations: 15, seed, ..GaOptions::default() };
        for kind in [ObjectiveKind::Profit, ObjectiveKind::Welfare] {
            let ga = run_ga(&p, kind, &options, &LowerOptions::default()).unwrap();
            prop_assert!(ga.history.windows(2).all(|w| w[1] >= w[0]));
            prop_assert_eq!(*ga.history.last().unwrap(), ga.best_fitness());
            prop_assert!(ga.best.as_slice().iter().all(|&n| n >= 1));
        }
    }

    #[test]
    fn lottery_welfare_dominates_dynamic_pricing(p in market()) {
        // at the dynamic optimum's thresholds, so the comparison is exact
        let dynamic = dynamic_pricing_optimum(&p, ObjectiveKind::Welfare).unwrap();
        let lottery = solve_lower(&p, &dynamic.capacities, ObjectiveKind::Welfare, &LowerOptions::default()).unwrap();
        prop_assert!(lottery.objective_value >= dynamic.objective_value - 1e-6);
    }

    #[test]
    fn simulated_queue_respects_thresholds((p, caps, lot) in instance(8), seed in any::<u64>()) {
        let policy = SimPolicy::new(
            caps.clone(),
            lot,
            PriceSchedule::Static(PricePolicy::zero(&p).prices().to_vec()),
        ).unwrap();
        let config = SimConfig { events: 20_000, seed, ..SimConfig::default() };
        let stats = simulate(&p, &policy, &config).unwrap();
        prop_assert!(stats.max_queue_length <= caps.rejection_threshold());
        prop_assert!(stats.conservation.holds());
        prop_assert!((stats.occupancy.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}
