//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdqn_core::dual::{
    dual_objective, robust_target_batch, LambdaCache, NuFamily, NuSpec, RobustModel, SlotTransition, TabularQ,
};
use rdqn_core::envs::{
    gambling_expected_reward, gambling_step, portfolio_build_next_state, portfolio_reward, worst_case_cdf,
    CdfProbeParams, Environment, GamblingMode, GamblingParams, PortfolioConfig, PortfolioEnv, SyntheticHeavyTail,
    GAMBLING_ACTIONS,
};
use rdqn_core::nn::{Activation, QNetwork};
use rdqn_core::oracle::{
    delta_limit_suite, dual_robust_value_discrete, strong_duality_suite, DiscreteRobustInstance, DualVariant,
};
use rdqn_core::rdqn::{evaluate_gambling_game, train_gambling_game, GamblingGameConfig, Summary};
use rdqn_core::{AmbiguityConfig, Transition};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn strong_duality() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let r = strong_duality_suite(&mut rng, 50, DualVariant::Exact).expect("suite runs");
    let elapsed = start.elapsed();
    verdict(
        r.passed && elapsed < Duration::from_secs(60),
        format!("worst |primal - dual| = {:.2e} over {} instances in {elapsed:.1?}", r.worst_error, r.instances),
    )
}

/// Payoff of the nearest support point; the reward only sees the first
/// coordinate so extra state coordinates can be appended freely.
struct Lookup {
    support: Vec<Vec<f64>>,
    payoffs: Vec<f64>,
    one_dim_cost: bool,
}

impl Lookup {
    fn index(&self, y: &[f64]) -> usize {
        let d = |p: &[f64]| p.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.support.len())
            .min_by(|&i, &j| d(&self.support[i]).total_cmp(&d(&self.support[j])))
            .expect("non-empty support")
    }
}

impl RobustModel for Lookup {
    fn reward(&self, _: &[f64], _: usize, next: &[f64]) -> f64 {
        let dim = self.support[0].len();
        self.payoffs[self.index(&next[..dim])]
    }

    fn embed_nu_sample(&self, _: &[f64], _: usize, _: &[f64], y: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(y);
        if self.one_dim_cost {
            // a coordinate the cost must ignore
            out.push(7.5);
        }
    }

    fn transport_cost(&self, next: &[f64], y: &[f64]) -> f64 {
        if self.one_dim_cost {
            (next[0] - y[0]).abs()
        } else {
            next.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        }
    }
}

fn dual_engine_vs_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let total = 25;
    for k in 0..total {
        // the last five use a one-dimensional cost with an extra ignored coordinate
        let one_dim = k >= 20;
        let n = rng.random_range(2..=4);
        let dim = if one_dim { 1 } else { rng.random_range(1..=2) };
        let support: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        // rational prior weights k_j / K via repeated atoms
        let counts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=5)).collect();
        let atoms: usize = counts.iter().sum();
        let prior: Vec<f64> = counts.iter().map(|&c| c as f64 / atoms as f64).collect();
        let observed = rng.random_range(0..n);
        let mut reference = vec![0.0; n];
        reference[observed] = 1.0;
        let payoffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta = rng.random_range(0.05..0.5);
        let mut inst = DiscreteRobustInstance::new(support.clone(), reference, prior, payoffs.clone(), 0.0, delta)
            .expect("valid instance");
        inst.epsilon = -inst.effective_radius() + rng.random_range(0.01..0.3);

        let points: Vec<Vec<f64>> = support
            .iter()
            .zip(&counts)
            .flat_map(|(p, &c)| std::iter::repeat_n(p.clone(), c))
            .collect();
        let mut cfg = AmbiguityConfig::new(inst.epsilon, delta, NuSpec::new(NuFamily::Empirical { points }, true), atoms);
        cfg.solver.grad_tol = 1e-10;
        let model = Lookup {
            support: support.clone(),
            payoffs,
            one_dim_cost: one_dim,
        };
        let mut next = support[observed].clone();
        if one_dim {
            next.push(7.5);
        }
        let t = Transition::new(next.clone(), 0, 0.0, next);
        let width = support[0].len() + usize::from(one_dim);
        let zero_q = TabularQ::new(vec![vec![0.0; width]], vec![vec![0.0]]).expect("table");
        let batch = [SlotTransition { slot: 0, transition: &t }];
        let mut cache = LambdaCache::new(1);
        let out = robust_target_batch(&batch, &zero_q, &model, 0.5, &cfg, &mut cache, 1, 0).expect("targets");
        let engine = out.targets[0].expect("feasible");
        let oracle = dual_robust_value_discrete(&inst).expect("oracle");
        worst = worst.max((engine - oracle).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        worst <= 1e-3 && elapsed < Duration::from_secs(60),
        format!("worst |batch target - oracle| = {worst:.2e} over {total} instances in {elapsed:.1?}"),
    )
}

fn delta_limit() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r = delta_limit_suite(&mut rng, 20, DualVariant::Exact).expect("suite runs");
    verdict(
        r.passed,
        format!("monotone decrease and final gap {:.2e} (tolerance {:.0e}) over {} instances", r.worst_error, r.tolerance, r.instances),
    )
}

/// Gambling reward, evaluated on probe states.
struct Gamble;

impl RobustModel for Gamble {
    fn reward(&self, x: &[f64], a: usize, next: &[f64]) -> f64 {
        rdqn_core::envs::gambling_reward(x[0], GAMBLING_ACTIONS[a], next[0], 5.0)
    }
}

fn contraction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let discount = 0.9;
    let probe: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 + 0.5) / 20.0]).collect();
    let cfg = AmbiguityConfig::new(0.2, 0.05, NuSpec::new(NuFamily::Empirical { points: probe.clone() }, true), 20);
    let mut worst_excess = f64::NEG_INFINITY;
    for trial in 0..100 {
        let v1: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        // independent tables, small perturbations, and constant shifts where the bound is tight
        let shift = rng.random_range(-1.0..1.0);
        let v2: Vec<Vec<f64>> = v1
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&q| match trial % 3 {
                        0 => rng.random_range(-2.0..2.0),
                        1 => q + rng.random_range(-0.1..0.1),
                        _ => q + shift,
                    })
                    .collect()
            })
            .collect();
        let gap = v1
            .iter()
            .flatten()
            .zip(v2.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let q1 = TabularQ::new(probe.clone(), v1).expect("table");
        let q2 = TabularQ::new(probe.clone(), v2).expect("table");
        // common transitions for both tables
        let ts: Vec<Transition> = (0..20)
            .map(|i| {
                let next = probe[rng.random_range(0..20)].clone();
                Transition::new(probe[i].clone(), rng.random_range(0..3), 0.0, next)
            })
            .collect();
        let batch: Vec<SlotTransition<'_>> =
            ts.iter().enumerate().map(|(slot, transition)| SlotTransition { slot, transition }).collect();
        let h1 = robust_target_batch(&batch, &q1, &Gamble, discount, &cfg, &mut LambdaCache::new(20), 0, 0).expect("h1");
        let h2 = robust_target_batch(&batch, &q2, &Gamble, discount, &cfg, &mut LambdaCache::new(20), 0, 0).expect("h2");
        let sup = h1
            .targets
            .iter()
            .zip(&h2.targets)
            .map(|(a, b)| (a.expect("feasible") - b.expect("feasible")).abs())
            .fold(0.0, f64::max);
        worst_excess = worst_excess.max(sup - discount * gap);
    }
    verdict(
        worst_excess <= 1e-6,
        format!("max of sup|H Q1 - H Q2| - alpha sup|Q1 - Q2| = {worst_excess:.2e} over 100 trials"),
    )
}

fn worst_case_cdf_probe() -> Verdict {
    let start = Instant::now();
    let base = CdfProbeParams::default();
    let curve = |delta: f64, nu: NuSpec| {
        worst_case_cdf(&CdfProbeParams { delta, nu, ..base.clone() }, 0).expect("probe runs")
    };
    let wide = curve(10.0, NuSpec::uniform(0.0, 1.0));
    let sharp = curve(0.01, NuSpec::uniform(0.0, 1.0));
    let skewed = curve(0.01, NuSpec::new(NuFamily::Beta { a: 1.0, b: 5.0 }, true));
    let to_uniform = wide.iter().map(|(x, v)| (v - x).abs()).fold(0.0, f64::max);
    let at_half = sharp.iter().find(|(x, _)| (x - 0.5).abs() < 1e-12).map(|p| p.1).expect("grid has 0.5");
    let prior_effect = sharp.iter().zip(&skewed).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    verdict(
        to_uniform <= 0.1 && at_half <= 0.15 && prior_effect >= 0.1 && elapsed < Duration::from_secs(600),
        format!(
            "delta=10 sup distance to uniform CDF {to_uniform:.3}; delta=0.01 value at 0.5 {at_half:.3}; \
             Beta(1,5) prior shifts curve by {prior_effect:.3}; {elapsed:.1?}"
        ),
    )
}

fn gambling_benchmark() -> Verdict {
    let p = GamblingParams::truth(5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut x = rdqn_core::dist::sample_beta(p.alpha_prime, p.beta_prime, &mut rng);
    let steps = 1_000_000;
    let mut total = 0.0;
    for _ in 0..steps {
        let a = GAMBLING_ACTIONS
            .iter()
            .copied()
            .max_by(|&a, &b| gambling_expected_reward(x, a, &p).total_cmp(&gambling_expected_reward(x, b, &p)))
            .expect("three actions");
        let (next, r) = gambling_step(x, a, &p, &mut rng).expect("step");
        total += r;
        x = next;
    }
    let mean = total / steps as f64;
    verdict((mean - 0.073).abs() <= 0.005, format!("greedy mean reward per step {mean:.5} over {steps} steps"))
}

struct GameResults {
    dqn_true: Summary,
    low_true: Summary,
    high_true: Summary,
    dqn_ref: Summary,
    high_ref: Summary,
    elapsed: Duration,
}

fn run_games() -> GameResults {
    let start = Instant::now();
    let games = 20;
    let base = GamblingGameConfig {
        eval_episodes: 10,
        eval_steps: 10_000,
        ..Default::default()
    };
    let with = |eps: Option<f64>| GamblingGameConfig {
        train: rdqn_core::TrainConfig {
            ambiguity: eps.map(|e| AmbiguityConfig::new(e, 1e-4, NuSpec::uniform(0.0, 1.0), 100)),
            ..base.train.clone()
        },
        ..base.clone()
    };
    let run = |cfg: GamblingGameConfig| -> (Summary, Summary) {
        let mut truth = Vec::new();
        let mut reference = Vec::new();
        for g in 0..games {
            let out = train_gambling_game(&cfg, 42, g).expect("training");
            let net = &out.training.network;
            truth.push(evaluate_gambling_game(net, &cfg, &out.reference, GamblingMode::TrueDist, 42, g).expect("eval").summary.mean);
            reference.push(
                evaluate_gambling_game(net, &cfg, &out.reference, GamblingMode::ReferenceDist, 42, g).expect("eval").summary.mean,
            );
        }
        (Summary::from_values(&truth).expect("summary"), Summary::from_values(&reference).expect("summary"))
    };
    let (dqn_true, dqn_ref) = run(with(None));
    let (low_true, _) = run(with(Some(0.1)));
    let (high_true, high_ref) = run(with(Some(0.2)));
    GameResults {
        dqn_true,
        low_true,
        high_true,
        dqn_ref,
        high_ref,
        elapsed: start.elapsed(),
    }
}

fn gambling_robustness(g: &GameResults) -> Verdict {
    verdict(
        g.low_true.q05 > g.dqn_true.q05 && g.dqn_true.q50 > g.high_true.q50,
        format!(
            "5% quantile RDQN(0.1) {:.4} vs DQN {:.4}; median DQN {:.4} vs RDQN(0.2) {:.4}; 60 games in {:.1?}",
            g.low_true.q05, g.dqn_true.q05, g.dqn_true.q50, g.high_true.q50, g.elapsed
        ),
    )
}

fn reference_evaluation(g: &GameResults) -> Verdict {
    verdict(
        g.dqn_ref.mean >= g.high_ref.mean,
        format!("reference-law mean DQN {:.4} vs RDQN(0.2) {:.4}", g.dqn_ref.mean, g.high_ref.mean),
    )
}

fn gradient_checks() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut checked, mut failed) = (0usize, 0usize);
    for trial in 0..20 {
        let depth = rng.random_range(1..=3);
        let mut sizes = vec![rng.random_range(1..=4)];
        for _ in 1..depth {
            sizes.push(rng.random_range(1..=16));
        }
        sizes.push(rng.random_range(1..=4));
        let act = if trial % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let mut net = QNetwork::new(&sizes, act, &mut rng).expect("net");
        let states: Vec<Vec<f64>> = (0..3).map(|_| (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<Vec<f64>> =
            (0..3).map(|_| (0..sizes[depth]).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let loss = |n: &QNetwork| -> f64 {
            states
                .iter()
                .zip(&targets)
                .map(|(s, t)| n.forward(s).expect("forward").iter().zip(t).map(|(q, y)| (q - y).powi(2)).sum::<f64>())
                .sum()
        };
        let out_grads: Vec<Vec<f64>> = states
            .iter()
            .zip(&targets)
            .map(|(s, t)| net.forward(s).expect("forward").iter().zip(t).map(|(q, y)| 2.0 * (q - y)).collect())
            .collect();
        let g = net.backward(&states, &out_grads).expect("backward");
        let h = 1e-5;
        for i in 0..net.num_parameters() {
            let p = net.parameter(i);
            net.set_parameter(i, p + h);
            let up = loss(&net);
            net.set_parameter(i, p - h);
            let down = loss(&net);
            net.set_parameter(i, p);
            let fd = (up - down) / (2.0 * h);
            let a = g.get(i);
            let ok = (a - fd).abs() < 1e-7 || (a - fd).abs() / a.abs().max(fd.abs()) < 1e-4;
            checked += 1;
            failed += usize::from(!ok);
        }
    }
    verdict(failed == 0, format!("{} of {checked} parameters match central differences", checked - failed))
}

fn stabilisation() -> Verdict {
    // reference values from 50-digit evaluation of the unshifted formula
    let cases: [([f64; 3], [f64; 3], f64, f64, f64); 3] = [
        ([10.0, -10.0, 3.0], [0.1, 0.2, 0.05], 0.1, 0.5, -9.949_999_450_693_856),
        ([10.0, 9.5, -7.0], [0.0, 0.3, 0.6], 0.05, 2.0, -5.899_997_802_775_423),
        ([-10.0, 10.0, 0.0], [0.01, 0.02, 0.03], 0.2, 1e-3, -10.000_189_998_901_388),
    ];
    let mut worst = 0.0f64;
    let mut finite = true;
    for (f, d, eps, lambda, want) in cases {
        let raw = rdqn_core::dual::softplus_inverse(lambda);
        let (value, grad) = dual_objective(raw, &f, &d, eps, 1e-6).expect("evaluates");
        finite &= value.is_finite() && grad.is_finite();
        worst = worst.max((value - want).abs());
    }
    verdict(finite && worst <= 1e-9, format!("delta = 1e-6, worst deviation {worst:.2e} from extended precision"))
}

fn portfolio_identities() -> Verdict {
    let cfg = PortfolioConfig::default();
    let delta = 1.0 / 252.0;
    let mut state = vec![0.0; 63];
    state[62] = delta;
    let cash = portfolio_reward(&state, 0.0, 0.03, &cfg).expect("reward");
    let cash_err = (cash - cfg.risk_free * delta).abs();
    state[61] = 1.0;
    let invested = portfolio_reward(&state, 1.0, -0.04, &cfg).expect("reward");
    let invested_err = (invested + 0.04).abs();

    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut env = PortfolioEnv::new(cfg.clone(), Box::new(SyntheticHeavyTail::default()), seed).expect("env");
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let start = env.reset().expect("reset");
        let mut s = start.clone();
        let mut sum = 0.0;
        for _ in 0..1000 {
            let a = rng.random_range(0..env.num_actions());
            let step = env.step(a).expect("step");
            // the next state can be rebuilt from its return alone
            let rebuilt =
                portfolio_build_next_state(&s, cfg.positions[a], step.next_state[59], step.next_state[62], &cfg)
                    .expect("rebuild");
            worst = worst.max(rebuilt.iter().zip(&step.next_state).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            sum += step.reward;
            s = step.next_state;
        }
        worst = worst.max((sum - (s[60] - start[60])).abs());
    }
    let err = cash_err.max(invested_err).max(worst);
    verdict(err < 1e-9, format!("worst identity error {err:.2e} (cash, invested, 5 x 1000-step telescoping)"))
}

fn main() {
    let games = std::cell::OnceCell::new();
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict + '_>)> = vec![
        ("strong duality on discrete instances", Box::new(strong_duality)),
        ("batch targets match the discrete dual", Box::new(dual_engine_vs_oracle)),
        ("vanishing regularisation reaches the transport LP", Box::new(delta_limit)),
        ("robust operator is a contraction", Box::new(contraction)),
        ("worst-case CDF probe", Box::new(worst_case_cdf_probe)),
        ("gambling greedy benchmark", Box::new(gambling_benchmark)),
        ("gambling robustness under the true law", Box::new(|| gambling_robustness(games.get_or_init(run_games)))),
        ("gambling under the reference law", Box::new(|| reference_evaluation(games.get_or_init(run_games)))),
        ("network gradients match finite differences", Box::new(gradient_checks)),
        ("dual objective stabilised for tiny regularisation", Box::new(stabilisation)),
        ("portfolio identities", Box::new(portfolio_identities)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        failures += usize::from(!v.passed);
        println!("criterion {:>2} {}: {name}: {}", i + 1, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
