//! Training loop for DQN and Robust DQN, greedy evaluation, and the repeated
//! gambling-game protocol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::sample_beta;
use crate::dual::{dqn_target_batch, robust_target_batch, AmbiguityConfig, LambdaCache, SlotTransition};
use crate::envs::{fit_beta_mom, BetaFit, Environment, GamblingEnv, GamblingMode, GamblingParams};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Gradients, QNetwork};
use crate::transition::Transition;

/// Trading periods per year used to annualise.
pub const PERIODS_PER_YEAR: f64 = 252.0;

/// SplitMix64 finaliser over `(base, stream, index)`; stable across platforms.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed-capacity ring of transitions. Slot ids are stable until the slot is
/// overwritten, which lets them key the multiplier cache.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

/// Where a pushed transition landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pushed {
    pub slot: usize,
    /// An older transition in this slot was replaced.
    pub evicted: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay buffer capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 20)),
            cursor: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Pushed {
        let slot = self.cursor;
        let evicted = if slot < self.items.len() {
            self.items[slot] = t;
            true
        } else {
            self.items.push(t);
            false
        };
        self.cursor = (self.cursor + 1) % self.capacity;
        Pushed { slot, evicted }
    }

    /// Pushes and drops the cached multiplier of an overwritten slot.
    pub fn push_invalidating(&mut self, t: Transition, cache: &mut LambdaCache) -> Pushed {
        let p = self.push(t);
        if p.evicted {
            cache.invalidate(p.slot);
        }
        p
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.items.get(slot)
    }

    /// Uniform draw of `n` filled slots, with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::input("cannot sample from an empty replay buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub discount: f64,
    pub batch_size: usize,
    /// Gradient steps per update, each on a freshly sampled batch.
    pub gradient_steps: usize,
    /// Environment steps between updates.
    pub update_every: usize,
    /// Gradient steps between hard target-network copies.
    pub target_sync: usize,
    pub explore_start: f64,
    pub explore_end: f64,
    /// Fraction of `total_steps` over which exploration decays linearly.
    pub explore_fraction: f64,
    /// Environment steps, counted across all parallel instances.
    pub total_steps: usize,
    /// Transitions collected before the first update.
    pub warmup: usize,
    pub buffer_capacity: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Absent for plain DQN.
    pub ambiguity: Option<AmbiguityConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            discount: 0.9,
            batch_size: 32,
            gradient_steps: 1,
            update_every: 1,
            target_sync: 1000,
            explore_start: 1.0,
            explore_end: 0.05,
            explore_fraction: 0.5,
            total_steps: 10_000,
            warmup: 256,
            buffer_capacity: 10_000,
            hidden: vec![32, 32],
            activation: Activation::Relu,
            adam: AdamConfig::default(),
            seed: 0,
            ambiguity: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return Err(Error::config(format!("discount must lie in (0, 1), got {}", self.discount)));
        }
        if self.batch_size == 0 || self.gradient_steps == 0 || self.update_every == 0 || self.target_sync == 0 {
            return Err(Error::config(
                "batch_size, gradient_steps, update_every and target_sync must be at least 1",
            ));
        }
        for (name, v) in [("explore_start", self.explore_start), ("explore_end", self.explore_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.explore_fraction) {
            return Err(Error::config("explore_fraction must lie in [0, 1]"));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::config("buffer_capacity must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden layer widths must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if let Some(a) = &self.ambiguity {
            a.validate()?;
        }
        Ok(())
    }

    /// Exploration rate before environment step `step`.
    pub fn exploration(&self, step: usize) -> f64 {
        let horizon = self.explore_fraction * self.total_steps as f64;
        if horizon <= 0.0 {
            return self.explore_end;
        }
        let t = (step as f64 / horizon).min(1.0);
        self.explore_start + t * (self.explore_end - self.explore_start)
    }
}

/// Epsilon-greedy choice; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(net: &QNetwork, state: &[f64], explore: f64, rng: &mut R) -> Result<usize> {
    let u: f64 = rng.random();
    if u < explore {
        return Ok(rng.random_range(0..net.num_actions()));
    }
    Ok(greedy_action(&net.forward(state)?))
}

pub fn greedy_action(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// One gradient step's diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Environment steps taken so far.
    pub step: usize,
    pub loss: f64,
    /// Mean optimal multiplier over the batch; NaN for plain DQN.
    pub mean_lambda: f64,
    pub eps_bar_negatives: usize,
    pub mean_target: f64,
    pub explore: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub log: Vec<LogRow>,
    pub gradient_steps: usize,
    pub non_converged_solves: usize,
    pub cache_hits: u64,
}

/// Writes the log as CSV with a header row.
pub fn write_log_csv<W: std::io::Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row).map_err(|e| Error::input(format!("writing training log: {e}")))?;
    }
    if log.is_empty() {
        w.write_record(["step", "loss", "mean_lambda", "eps_bar_negatives", "mean_target", "explore"])
            .map_err(|e| Error::input(format!("writing training log: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains a Q-network by stepping `envs` round-robin.
///
/// Robust targets use the first environment's reward and transport cost, so
/// all instances must share them.
pub fn train<E: Environment>(envs: &mut [E], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = envs.first().ok_or_else(|| Error::input("train needs at least one environment"))?;
    let (dim, actions) = (first.state_dim(), first.num_actions());
    if envs.iter().any(|e| e.state_dim() != dim || e.num_actions() != actions) {
        return Err(Error::input("parallel environments disagree on state or action dimensions"));
    }
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden);
    sizes.push(actions);

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1, 0));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0));
    let mut net = QNetwork::new(&sizes, cfg.activation, &mut init_rng)?;
    let mut target = net.sync_target();
    let mut adam = AdamState::new(&net, cfg.adam);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity)?;
    let mut cache = LambdaCache::new(cfg.buffer_capacity);
    let mut log = Vec::new();
    let mut grad_steps = 0usize;
    let mut non_converged = 0usize;

    let mut states = Vec::with_capacity(envs.len());
    if cfg.total_steps > 0 {
        for e in envs.iter_mut() {
            states.push(e.reset()?);
        }
    }
    for step in 0..cfg.total_steps {
        let k = step % envs.len();
        let explore = cfg.exploration(step);
        let a = select_action(&net, &states[k], explore, &mut rng)?;
        let s = envs[k].step(a)?;
        let t = Transition::new(std::mem::take(&mut states[k]), a, s.reward, s.next_state.clone());
        t.validate(actions)?;
        buffer.push_invalidating(t, &mut cache);
        states[k] = s.next_state;

        if buffer.len() < cfg.warmup.max(1) || (step + 1) % cfg.update_every != 0 {
            continue;
        }
        for _ in 0..cfg.gradient_steps {
            let slots = buffer.sample_slots(cfg.batch_size, &mut rng)?;
            let batch: Vec<SlotTransition<'_>> = slots
                .iter()
                .map(|&slot| SlotTransition {
                    slot,
                    transition: buffer.get(slot).expect("sampled slot is filled"),
                })
                .collect();
            let (targets, mean_lambda, negatives) = match &cfg.ambiguity {
                None => {
                    let t = dqn_target_batch(&batch, &target, cfg.discount)?;
                    (t.into_iter().map(Some).collect::<Vec<_>>(), f64::NAN, 0)
                }
                Some(amb) => {
                    let out = robust_target_batch(
                        &batch,
                        &target,
                        &envs[0],
                        cfg.discount,
                        amb,
                        &mut cache,
                        cfg.seed,
                        grad_steps as u64,
                    )?;
                    non_converged += out.non_converged;
                    let ml = out.mean_lambda();
                    (out.targets, ml, out.eps_bar_negatives)
                }
            };
            let (loss, mean_target) = squared_error_step(&mut net, &mut adam, &batch, &targets)?;
            grad_steps += 1;
            if grad_steps % cfg.target_sync == 0 {
                target = net.sync_target();
            }
            log.push(LogRow {
                step: step + 1,
                loss,
                mean_lambda,
                eps_bar_negatives: negatives,
                mean_target,
                explore,
            });
        }
    }
    Ok(TrainOutcome {
        network: net,
        log,
        gradient_steps: grad_steps,
        non_converged_solves: non_converged,
        cache_hits: cache.hits(),
    })
}

/// Loss `(1/n) Σ (Q(x_i, a_i) - y_i)^2` over transitions with a target, and
/// one Adam step on it. Targets are constants. Returns `(loss, mean target)`.
pub fn squared_error_step(
    net: &mut QNetwork,
    adam: &mut AdamState,
    batch: &[SlotTransition<'_>],
    targets: &[Option<f64>],
) -> Result<(f64, f64)> {
    let (loss, mean_target, grads) = squared_error_gradient(net, batch, targets)?;
    if let Some(grads) = grads {
        adam.step(net, &grads)?;
        if !net.all_finite() {
            return Err(Error::numerical("network parameters became non-finite"));
        }
    }
    Ok((loss, mean_target))
}

/// Value and parameter gradient of the batch loss; `None` when every target
/// was dropped.
pub fn squared_error_gradient(
    net: &QNetwork,
    batch: &[SlotTransition<'_>],
    targets: &[Option<f64>],
) -> Result<(f64, f64, Option<Gradients>)> {
    if batch.len() != targets.len() {
        return Err(Error::input("batch and target lengths differ"));
    }
    let used = targets.iter().flatten().count();
    if used == 0 {
        return Ok((f64::NAN, f64::NAN, None));
    }
    let n = used as f64;
    let mut grads = Gradients::zeros_like(net);
    let mut loss = 0.0;
    let mut target_sum = 0.0;
    let mut out_grad = vec![0.0; net.num_actions()];
    for (item, y) in batch.iter().zip(targets) {
        let Some(y) = *y else { continue };
        let t = item.transition;
        let trace = net.forward_trace(&t.state)?;
        let diff = trace.output()[t.action] - y;
        loss += diff * diff / n;
        target_sum += y;
        out_grad.iter_mut().for_each(|g| *g = 0.0);
        out_grad[t.action] = 2.0 * diff / n;
        net.accumulate(&trace, &out_grad, &mut grads);
    }
    Ok((loss, target_sum / n, Some(grads)))
}

/// Mean, population standard deviation, extremes and linearly interpolated
/// quantiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q05: f64,
    pub q10: f64,
    pub q50: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::input("cannot summarise an empty list"));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(Summary {
            mean,
            std: var.sqrt(),
            min: v[0],
            q05: quantile_sorted(&v, 0.05),
            q10: quantile_sorted(&v, 0.10),
            q50: quantile_sorted(&v, 0.50),
            max: v[v.len() - 1],
        })
    }
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Largest peak-to-trough loss of a wealth path, as a non-positive ratio.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &w in wealth {
        peak = peak.max(w);
        if peak > 0.0 {
            worst = worst.min(w / peak - 1.0);
        }
    }
    worst
}

/// Risk metrics of one path of per-period log returns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradingMetrics {
    /// Final wealth from a starting wealth of 1.
    pub wealth: f64,
    pub max_drawdown: f64,
    pub volatility: f64,
    pub sharpe: f64,
    /// Standard deviation after zeroing positive returns.
    pub downside_deviation: f64,
    pub sortino: f64,
}

impl TradingMetrics {
    pub fn from_log_returns(r: &[f64]) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::input("trading metrics need at least one return"));
        }
        let mut wealth = Vec::with_capacity(r.len() + 1);
        let mut log_w = 0.0;
        wealth.push(1.0);
        for x in r {
            log_w += x;
            wealth.push(log_w.exp());
        }
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let sd = population_std(r);
        let negative: Vec<f64> = r.iter().map(|x| x.min(0.0)).collect();
        let dd = population_std(&negative);
        let ann = PERIODS_PER_YEAR.sqrt();
        let ratio = |m: f64, s: f64| if s > 0.0 { m / s * ann } else { 0.0 };
        Ok(TradingMetrics {
            wealth: log_w.exp(),
            max_drawdown: max_drawdown(&wealth),
            volatility: sd * ann,
            sharpe: ratio(mean, sd),
            downside_deviation: dd * ann,
            sortino: ratio(mean, dd),
        })
    }

    /// Field-wise mean; `None` for an empty list.
    pub fn mean_of(items: &[TradingMetrics]) -> Option<TradingMetrics> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&TradingMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(TradingMetrics {
            wealth: avg(|m| m.wealth),
            max_drawdown: avg(|m| m.max_drawdown),
            volatility: avg(|m| m.volatility),
            sharpe: avg(|m| m.sharpe),
            downside_deviation: avg(|m| m.downside_deviation),
            sortino: avg(|m| m.sortino),
        })
    }
}

/// Greedy-policy evaluation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean reward per step over all episodes; the other fields of the
    /// summary describe the spread of per-episode means.
    pub summary: Summary,
    pub episode_means: Vec<f64>,
    /// Episode rewards read as log returns.
    pub trading: Vec<TradingMetrics>,
    pub trading_mean: Option<TradingMetrics>,
}

/// Runs `episodes` greedy episodes of `steps` steps, resetting in between.
pub fn evaluate_policy<E: Environment + ?Sized>(net: &QNetwork, env: &mut E, episodes: usize, steps: usize) -> Result<EvalStats> {
    if episodes == 0 || steps == 0 {
        return Err(Error::input("evaluation needs at least one episode and one step"));
    }
    let mut episode_means = Vec::with_capacity(episodes);
    let mut trading = Vec::with_capacity(episodes);
    let mut rewards = Vec::with_capacity(steps);
    let mut buffers = crate::nn::ForwardBuffers::default();
    for _ in 0..episodes {
        let mut state = env.reset()?;
        rewards.clear();
        for _ in 0..steps {
            let a = greedy_action(net.forward_with(&state, &mut buffers)?);
            let s = env.step(a)?;
            rewards.push(s.reward);
            state = s.next_state;
        }
        episode_means.push(rewards.iter().sum::<f64>() / steps as f64);
        trading.push(TradingMetrics::from_log_returns(&rewards)?);
    }
    Ok(EvalStats {
        summary: Summary::from_values(&episode_means)?,
        trading_mean: TradingMetrics::mean_of(&trading),
        episode_means,
        trading,
    })
}

/// One repetition of the gambling experiment: fit a reference law to a few
/// draws of the true initial law, train on the reference, evaluate greedily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GamblingGameConfig {
    pub reward_factor: f64,
    /// Draws from the true initial law given before the game.
    pub fit_samples: usize,
    /// Environments stepped round-robin during training.
    pub parallel_envs: usize,
    pub eval_episodes: usize,
    pub eval_steps: usize,
    pub train: TrainConfig,
}

impl Default for GamblingGameConfig {
    fn default() -> Self {
        GamblingGameConfig {
            reward_factor: 5.0,
            fit_samples: 5,
            parallel_envs: 1,
            eval_episodes: 100,
            eval_steps: 10_000,
            train: TrainConfig::default(),
        }
    }
}

impl GamblingGameConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reward_factor > 0.0) {
            return Err(Error::config("reward_factor must be positive"));
        }
        if self.fit_samples < 2 {
            return Err(Error::config("fit_samples must be at least 2"));
        }
        if self.parallel_envs == 0 || self.eval_episodes == 0 || self.eval_steps == 0 {
            return Err(Error::config("parallel_envs, eval_episodes and eval_steps must be positive"));
        }
        self.train.validate()
    }

    /// True parameters of the game.
    pub fn truth(&self) -> GamblingParams {
        GamblingParams::truth(self.reward_factor)
    }
}

/// Fitted reference law of game `game`; reproducible from `(seed, game)`.
pub fn gambling_reference(cfg: &GamblingGameConfig, seed: u64, game: usize) -> Result<(BetaFit, GamblingParams)> {
    let truth = cfg.truth();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, game as u64));
    let draws: Vec<f64> = (0..cfg.fit_samples)
        .map(|_| sample_beta(truth.alpha_prime, truth.beta_prime, &mut rng))
        .collect();
    let fit = fit_beta_mom(&draws)?;
    let params = GamblingParams::new(fit.alpha, fit.beta, cfg.reward_factor)?;
    Ok((fit, params))
}

#[derive(Debug, Clone)]
pub struct GameOutcome {
    pub game: usize,
    pub fit: BetaFit,
    pub reference: GamblingParams,
    pub training: TrainOutcome,
}

/// Fits and trains game `game`.
pub fn train_gambling_game(cfg: &GamblingGameConfig, seed: u64, game: usize) -> Result<GameOutcome> {
    cfg.validate()?;
    let (fit, reference) = gambling_reference(cfg, seed, game)?;
    let mut envs = (0..cfg.parallel_envs)
        .map(|k| GamblingEnv::new(reference, derive_seed(seed, 11, ((game as u64) << 16) | k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let train_cfg = TrainConfig {
        seed: derive_seed(seed, 12, game as u64),
        ..cfg.train.clone()
    };
    let training = train(&mut envs, &train_cfg)?;
    Ok(GameOutcome {
        game,
        fit,
        reference,
        training,
    })
}

/// Greedy evaluation of a trained game under the true or the reference law.
pub fn evaluate_gambling_game(
    net: &QNetwork,
    cfg: &GamblingGameConfig,
    reference: &GamblingParams,
    mode: GamblingMode,
    seed: u64,
    game: usize,
) -> Result<EvalStats> {
    let params = match mode {
        GamblingMode::TrueDist => cfg.truth(),
        GamblingMode::ReferenceDist => *reference,
    };
    let mut env = GamblingEnv::new(params, derive_seed(seed, 13, game as u64))?;
    evaluate_policy(net, &mut env, cfg.eval_episodes, cfg.eval_steps)
}
