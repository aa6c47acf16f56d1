//! Property tests over the public API.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdqn_core::dual::{softplus, softplus_inverse, solve_lambda, stable_log_mean_exp, DualObjective};
use rdqn_core::oracle::{dual_robust_value_discrete, primal_robust_value, random_instance, DiscreteRobustInstance};
use rdqn_core::rdqn::{derive_seed, max_drawdown, TradingMetrics};
use rdqn_core::{Activation, QNetwork, ReplayBuffer, SolverConfig, Summary, Transition};

/// Payoffs and a row-major distance matrix for `rows` outer samples.
fn dual_inputs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (2usize..12, 1usize..4).prop_flat_map(|(n, rows)| {
        (
            prop::collection::vec(-2.0..2.0f64, n),
            prop::collection::vec(0.0..1.0f64, n * rows),
            Just(rows),
        )
    })
}

fn robust_value(payoffs: &[f64], distances: &[f64], rows: usize, eps: f64, delta: f64) -> Option<f64> {
    let obj = DualObjective::new(payoffs, distances, vec![1.0 / rows as f64; rows], eps, delta).unwrap();
    if obj.epsilon_bar() < 1e-3 {
        return None;
    }
    let res = solve_lambda(&obj, None, &SolverConfig::default()).unwrap();
    Some(res.value)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn robust_value_lies_between_worst_payoff_and_nominal_bound(
        (f, d, rows) in dual_inputs(), eps in 0.05..1.0f64, delta in 0.01..1.0f64,
    ) {
        if let Some(v) = robust_value(&f, &d, rows, eps, delta) {
            let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn larger_radius_never_raises_the_value(
        (f, d, rows) in dual_inputs(), eps in 0.05..0.5f64, extra in 0.01..0.5f64, delta in 0.01..0.5f64,
    ) {
        if let (Some(small), Some(big)) =
            (robust_value(&f, &d, rows, eps, delta), robust_value(&f, &d, rows, eps + extra, delta))
        {
            prop_assert!(big <= small + 1e-6, "{big} > {small}");
        }
    }

    #[test]
    fn constant_shift_moves_the_value_by_the_shift(
        (f, d, rows) in dual_inputs(), eps in 0.05..0.5f64, delta in 0.01..0.5f64, shift in -3.0..3.0f64,
    ) {
        let shifted: Vec<f64> = f.iter().map(|x| x + shift).collect();
        if let (Some(a), Some(b)) =
            (robust_value(&f, &d, rows, eps, delta), robust_value(&shifted, &d, rows, eps, delta))
        {
            prop_assert!((b - a - shift).abs() < 1e-6, "{a} + {shift} vs {b}");
        }
    }

    #[test]
    fn primal_and_dual_agree_on_random_instances(seed in any::<u64>()) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed), (0.05, 1.0));
        let p = primal_robust_value(&inst).unwrap();
        let q = dual_robust_value_discrete(&inst).unwrap();
        prop_assert!((p - q).abs() <= 1e-3, "primal {p} dual {q}");
    }

    #[test]
    fn instance_json_round_trips(seed in any::<u64>()) {
        let inst = random_instance(&mut ChaCha8Rng::seed_from_u64(seed), (0.05, 1.0));
        let file = tempfile::NamedTempFile::new().unwrap();
        inst.save(file.path()).unwrap();
        prop_assert_eq!(DiscreteRobustInstance::load(file.path()).unwrap(), inst);
    }

    #[test]
    fn softplus_inverse_round_trips(y in 1e-8..200.0f64) {
        let back = softplus(softplus_inverse(y));
        prop_assert!((back - y).abs() <= 1e-9 * y.max(1.0), "{y} -> {back}");
    }

    #[test]
    fn log_mean_exp_is_bounded_by_extremes(v in prop::collection::vec(-700.0..700.0f64, 1..20)) {
        let l = stable_log_mean_exp(&v).unwrap();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(l.is_finite() && l >= lo - 1e-9 && l <= hi + 1e-9);
    }

    #[test]
    fn replay_buffer_keeps_the_newest_transitions(cap in 1usize..20, pushes in 0usize..60) {
        let mut buf = ReplayBuffer::new(cap).unwrap();
        for i in 0..pushes {
            let p = buf.push(Transition::new(vec![i as f64], 0, i as f64, vec![0.0]));
            prop_assert_eq!(p.slot, i % cap);
            prop_assert_eq!(p.evicted, i >= cap);
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        let mut rewards: Vec<usize> = (0..buf.len()).map(|s| buf.get(s).unwrap().reward as usize).collect();
        rewards.sort_unstable();
        prop_assert_eq!(rewards, (pushes.saturating_sub(cap)..pushes).collect::<Vec<_>>());
    }

    #[test]
    fn summary_quantiles_are_ordered(v in prop::collection::vec(-1e3..1e3f64, 1..50)) {
        let s = Summary::from_values(&v).unwrap();
        prop_assert!(s.min <= s.q05 && s.q05 <= s.q10 && s.q10 <= s.q50 && s.q50 <= s.max);
        prop_assert!(s.mean >= s.min - 1e-9 && s.mean <= s.max + 1e-9 && s.std >= 0.0);
    }

    #[test]
    fn trading_metrics_are_consistent(r in prop::collection::vec(-0.1..0.1f64, 2..100)) {
        let m = TradingMetrics::from_log_returns(&r).unwrap();
        let total: f64 = r.iter().sum();
        prop_assert!((m.wealth.ln() - total).abs() < 1e-9);
        prop_assert!((-1.0..=0.0).contains(&m.max_drawdown));
        prop_assert!(m.downside_deviation >= 0.0 && m.volatility >= 0.0);
        let mut w = vec![1.0];
        for x in &r {
            w.push(w.last().unwrap() * x.exp());
        }
        prop_assert!((max_drawdown(&w) - m.max_drawdown).abs() < 1e-12);
    }

    #[test]
    fn network_checkpoints_round_trip(seed in any::<u64>(), width in 1usize..10) {
        let net = QNetwork::new(&[2, width, 3], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let file = tempfile::NamedTempFile::new().unwrap();
        net.save(file.path()).unwrap();
        let back = QNetwork::load(file.path()).unwrap();
        let x = [0.3, -0.7];
        prop_assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn derived_seeds_separate_streams(base in any::<u64>(), i in 0u64..1000, j in 0u64..1000) {
        prop_assert_eq!(derive_seed(base, 1, i), derive_seed(base, 1, i));
        prop_assert_ne!(derive_seed(base, 1, i), derive_seed(base, 2, i));
        if i != j {
            prop_assert_ne!(derive_seed(base, 10, i), derive_seed(base, 10, j));
        }
    }
}
