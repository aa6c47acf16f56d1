use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdqn_core::dual::{robust_target_batch, solve_lambda, DualObjective, SlotTransition};
use rdqn_core::envs::{GamblingEnv, GamblingParams};
use rdqn_core::oracle::{dual_robust_value_discrete, primal_robust_value, random_instance};
use rdqn_core::{Activation, AmbiguityConfig, LambdaCache, NuSpec, QNetwork, SolverConfig, Transition};

fn dual_solve(c: &mut Criterion) {
    let mut g = c.benchmark_group("dual_solve");
    for n in [100usize, 1000] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let payoffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let distances: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let obj = DualObjective::new(&payoffs, &distances, vec![1.0], 0.1, 0.01).unwrap();
        let solver = SolverConfig::default();
        g.bench_with_input(BenchmarkId::new("cold", n), &n, |b, _| {
            b.iter(|| solve_lambda(black_box(&obj), None, &solver).unwrap())
        });
        let warm = solve_lambda(&obj, None, &solver).unwrap().lambda_raw;
        g.bench_with_input(BenchmarkId::new("warm", n), &n, |b, _| {
            b.iter(|| solve_lambda(black_box(&obj), Some(warm), &solver).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = QNetwork::new(&[4, 64, 64, 3], Activation::Relu, &mut rng).unwrap();
    let states: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let grads: Vec<Vec<f64>> = (0..32).map(|_| vec![0.1, -0.2, 0.3]).collect();
    c.bench_function("nn_forward", |b| b.iter(|| net.forward(black_box(&states[0])).unwrap()));
    c.bench_function("nn_backward_batch32", |b| {
        b.iter(|| net.backward(black_box(&states), black_box(&grads)).unwrap())
    });
}

fn robust_targets(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = QNetwork::new(&[1, 32, 32, 3], Activation::Relu, &mut rng).unwrap();
    let env = GamblingEnv::new(GamblingParams::new(2.0, 2.0, 5.0).unwrap(), 0).unwrap();
    let transitions: Vec<Transition> = (0..32)
        .map(|_| Transition::new(vec![rng.random()], rng.random_range(0..3), 0.0, vec![rng.random()]))
        .collect();
    let batch: Vec<SlotTransition> = transitions
        .iter()
        .enumerate()
        .map(|(slot, transition)| SlotTransition { slot, transition })
        .collect();
    let cfg = AmbiguityConfig::new(0.1, 1e-2, NuSpec::uniform(0.0, 1.0), 100);
    let mut step = 0;
    c.bench_function("robust_targets_batch32_nu100", |b| {
        b.iter(|| {
            // a fresh cache each step keeps every solve cold
            let mut cache = LambdaCache::new(64);
            step += 1;
            robust_target_batch(&batch, &net, &env, 0.9, &cfg, &mut cache, 0, step).unwrap()
        })
    });
}

fn oracle(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances: Vec<_> = (0..8).map(|_| random_instance(&mut rng, (0.05, 1.0))).collect();
    c.bench_function("oracle_primal_8_instances", |b| {
        b.iter(|| instances.iter().map(|i| primal_robust_value(i).unwrap()).sum::<f64>())
    });
    c.bench_function("oracle_dual_8_instances", |b| {
        b.iter(|| instances.iter().map(|i| dual_robust_value_discrete(i).unwrap()).sum::<f64>())
    });
}

criterion_group!(benches, dual_solve, network, robust_targets, oracle);
criterion_main!(benches);
