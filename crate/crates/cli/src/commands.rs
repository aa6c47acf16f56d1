//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rdqn_core::envs::{load_price_csv, worst_case_cdf, BetaFit, GamblingParams, HistoricalReplay, PortfolioEnv, PriceSeries};
use rdqn_core::oracle::{delta_limit_suite, nesting_suite, strong_duality_suite, CheckReport, DualVariant};
use rdqn_core::rdqn::{
    derive_seed, evaluate_gambling_game, evaluate_policy, train, train_gambling_game, write_log_csv, TradingMetrics,
};
use rdqn_core::{EvalStats, QNetwork, Summary, TrainConfig};

use crate::config::{EnvSpec, EvalMode, ExperimentConfig, Kind};

/// Output directory for one invocation: fresh and timestamped, or a fixed
/// `<out>/<kind>` that is cleared when overwriting.
pub fn run_dir(out: &Path, kind: Kind, overwrite: bool) -> Result<PathBuf> {
    let dir = if overwrite {
        let d = out.join(kind.name());
        if d.exists() {
            fs::remove_dir_all(&d).with_context(|| format!("clearing {}", d.display()))?;
        }
        d
    } else {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let base = out.join(format!("{}-{stamp}", kind.name()));
        let mut d = base.clone();
        let mut k = 1;
        while d.exists() {
            d = PathBuf::from(format!("{}-{k}", base.display()));
            k += 1;
        }
        d
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Runs `job(0..n)` on `workers` threads; results come back in index order.
fn run_pool<T, F>(workers: usize, n: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = job(i);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

fn game_dir(run: &Path, game: usize) -> PathBuf {
    run.join(format!("game_{game:03}"))
}

const CHECKPOINT: &str = "checkpoint.txt";
const GAME_FILE: &str = "game.json";

/// Per-game metadata written next to the checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GameRecord {
    game: usize,
    fit: Option<BetaFit>,
    reference: Option<GamblingParams>,
    gradient_steps: usize,
    non_converged_solves: usize,
    cache_hits: u64,
}

#[derive(Debug, Clone, Serialize)]
struct GameStats {
    game: usize,
    summary: Summary,
    trading: Option<TradingMetrics>,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    command: &'a str,
    seed: u64,
    mode: Option<EvalMode>,
    games: Vec<GameStats>,
    /// Statistics of the per-game mean rewards.
    across_games: Summary,
    trading_mean: Option<TradingMetrics>,
}

fn write_summary(run: &Path, command: &str, cfg: &ExperimentConfig, mode: Option<EvalMode>, games: Vec<GameStats>) -> Result<Summary> {
    let means: Vec<f64> = games.iter().map(|g| g.summary.mean).collect();
    let across = Summary::from_values(&means)?;
    let trading: Vec<TradingMetrics> = games.iter().filter_map(|g| g.trading).collect();
    let trading_mean = match cfg.env {
        EnvSpec::Portfolio { .. } => TradingMetrics::mean_of(&trading),
        EnvSpec::Gambling { .. } => None,
    };

    let mut w = csv::Writer::from_path(run.join("summary.csv"))?;
    w.write_record(["game", "mean", "std", "min", "q05", "q10", "q50", "max"])?;
    let row = |label: String, s: &Summary| {
        vec![label]
            .into_iter()
            .chain([s.mean, s.std, s.min, s.q05, s.q10, s.q50, s.max].map(|v| v.to_string()))
            .collect::<Vec<_>>()
    };
    for g in &games {
        w.write_record(row(g.game.to_string(), &g.summary))?;
    }
    w.write_record(row("all".into(), &across))?;
    w.flush()?;

    let summary = RunSummary {
        command,
        seed: cfg.seed,
        mode,
        games,
        across_games: across,
        trading_mean,
    };
    fs::write(run.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(across)
}

fn load_prices(cfg: &ExperimentConfig) -> Result<Option<PriceSeries>> {
    match &cfg.env {
        EnvSpec::Portfolio { prices: Some(p), .. } => Ok(Some(load_price_csv(p)?)),
        _ => Ok(None),
    }
}

fn portfolio_env(cfg: &ExperimentConfig, prices: &Option<PriceSeries>, training: bool, seed: u64) -> Result<PortfolioEnv> {
    let EnvSpec::Portfolio {
        market,
        synthetic,
        train_transaction_cost,
        ..
    } = &cfg.env
    else {
        bail!("not a portfolio configuration");
    };
    let mut market = market.clone();
    if training {
        if let Some(c) = train_transaction_cost {
            market.transaction_cost = *c;
        }
    }
    let sim: Box<dyn rdqn_core::envs::ReturnSimulator> = match prices {
        Some(series) => Box::new(HistoricalReplay::new(series.clone(), market.return_bound)?),
        None => Box::new(synthetic.clone()),
    };
    Ok(PortfolioEnv::new(market, sim, seed)?)
}

fn eval_stats(stats: &EvalStats, game: usize) -> GameStats {
    GameStats {
        game,
        summary: stats.summary,
        trading: stats.trading_mean,
    }
}

pub fn run_train(cfg: &ExperimentConfig, run: &Path) -> Result<Summary> {
    fs::write(run.join("config.toml"), cfg.to_toml()?)?;
    let prices = load_prices(cfg)?;
    let stats = run_pool(cfg.workers, cfg.repetitions, |g| -> Result<GameStats> {
        let dir = game_dir(run, g);
        fs::create_dir_all(&dir)?;
        let (record, net, stats) = match &cfg.env {
            EnvSpec::Gambling { .. } => {
                let gcfg = cfg.gambling_game();
                let out = train_gambling_game(&gcfg, cfg.seed, g).with_context(|| format!("training game {g}"))?;
                let stats = evaluate_gambling_game(&out.training.network, &gcfg, &out.reference, cfg.eval.mode.into(), cfg.seed, g)?;
                let record = GameRecord {
                    game: g,
                    fit: Some(out.fit),
                    reference: Some(out.reference),
                    gradient_steps: out.training.gradient_steps,
                    non_converged_solves: out.training.non_converged_solves,
                    cache_hits: out.training.cache_hits,
                };
                write_log_csv(&out.training.log, fs::File::create(dir.join("train_log.csv"))?)?;
                (record, out.training.network, stats)
            }
            EnvSpec::Portfolio { parallel_envs, .. } => {
                let mut envs = (0..*parallel_envs)
                    .map(|k| portfolio_env(cfg, &prices, true, derive_seed(cfg.seed, 11, ((g as u64) << 16) | k as u64)))
                    .collect::<Result<Vec<_>>>()?;
                let tcfg = TrainConfig {
                    seed: derive_seed(cfg.seed, 12, g as u64),
                    ..cfg.train.clone()
                };
                let out = train(&mut envs, &tcfg).with_context(|| format!("training game {g}"))?;
                let mut env = portfolio_env(cfg, &prices, false, derive_seed(cfg.seed, 13, g as u64))?;
                let stats = evaluate_policy(&out.network, &mut env, cfg.eval.episodes, cfg.eval.steps)?;
                write_log_csv(&out.log, fs::File::create(dir.join("train_log.csv"))?)?;
                let record = GameRecord {
                    game: g,
                    fit: None,
                    reference: None,
                    gradient_steps: out.gradient_steps,
                    non_converged_solves: out.non_converged_solves,
                    cache_hits: out.cache_hits,
                };
                (record, out.network, stats)
            }
        };
        net.save(&dir.join(CHECKPOINT))?;
        fs::write(dir.join(GAME_FILE), serde_json::to_string_pretty(&record)?)?;
        log::info!("game {g}: mean reward per step {:.5}", stats.summary.mean);
        Ok(eval_stats(&stats, g))
    })?;
    write_summary(run, "train", cfg, Some(cfg.eval.mode), stats)
}

pub fn run_eval(cfg: &ExperimentConfig, from: &Path, run: &Path) -> Result<Summary> {
    let missing: Vec<String> = (0..cfg.repetitions)
        .flat_map(|g| [game_dir(from, g).join(CHECKPOINT), game_dir(from, g).join(GAME_FILE)])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing checkpoint files:\n  {}", missing.join("\n  "));
    }
    fs::write(run.join("config.toml"), cfg.to_toml()?)?;
    let prices = load_prices(cfg)?;
    let stats = run_pool(cfg.workers, cfg.repetitions, |g| -> Result<GameStats> {
        let dir = game_dir(from, g);
        let net = QNetwork::load(&dir.join(CHECKPOINT))?;
        let record: GameRecord = serde_json::from_str(&fs::read_to_string(dir.join(GAME_FILE))?)
            .with_context(|| format!("reading {}", dir.join(GAME_FILE).display()))?;
        let stats = match &cfg.env {
            EnvSpec::Gambling { .. } => {
                let reference = record
                    .reference
                    .ok_or_else(|| anyhow!("{} has no fitted reference law", dir.display()))?;
                evaluate_gambling_game(&net, &cfg.gambling_game(), &reference, cfg.eval.mode.into(), cfg.seed, g)?
            }
            EnvSpec::Portfolio { .. } => {
                let mut env = portfolio_env(cfg, &prices, false, derive_seed(cfg.seed, 13, g as u64))?;
                evaluate_policy(&net, &mut env, cfg.eval.episodes, cfg.eval.steps)?
            }
        };
        Ok(eval_stats(&stats, g))
    })?;
    write_summary(run, "eval", cfg, Some(cfg.eval.mode), stats)
}

fn delta_label(delta: f64) -> String {
    format!("{delta}").replace('.', "p")
}

pub fn run_cdf_probe(cfg: &ExperimentConfig, run: &Path) -> Result<Vec<PathBuf>> {
    fs::write(run.join("config.toml"), cfg.to_toml()?)?;
    let p = &cfg.probe;
    let jobs: Vec<(usize, usize)> = (0..p.priors.len()).flat_map(|i| (0..p.deltas.len()).map(move |j| (i, j))).collect();
    let files = run_pool(cfg.workers, jobs.len(), |k| -> Result<PathBuf> {
        let (i, j) = jobs[k];
        let delta = p.deltas[j];
        let params = p.params(delta, &p.priors[i]);
        let curve = worst_case_cdf(&params, derive_seed(cfg.seed, 20, k as u64))
            .with_context(|| format!("probe with prior {i} and delta {delta}"))?;
        let path = run.join(format!("cdf_prior{i}_delta{}.csv", delta_label(delta)));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["x0", "value"])?;
        for (x, v) in curve {
            w.write_record([x.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(path)
    })?;
    Ok(files)
}

#[derive(Debug, Serialize)]
struct OracleReport {
    passed: bool,
    variant: &'static str,
    checks: Vec<CheckReport>,
}

/// Returns whether every suite passed; the report is written either way.
pub fn run_oracle_check(cfg: &ExperimentConfig, run: &Path, mutate_sign: bool) -> Result<bool> {
    let variant = if mutate_sign { DualVariant::FlippedSign } else { DualVariant::Exact };
    let o = &cfg.oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checks = Vec::new();
    if o.duality_instances > 0 {
        checks.push(strong_duality_suite(&mut rng, o.duality_instances, variant)?);
    }
    if o.nesting_instances > 0 {
        checks.push(nesting_suite(&mut rng, o.nesting_instances, variant)?);
    }
    if o.delta_limit_instances > 0 {
        checks.push(delta_limit_suite(&mut rng, o.delta_limit_instances, variant)?);
    }
    for c in &checks {
        println!(
            "{:<16} {} worst error {:.3e} (tolerance {:.0e}, {} instances)",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.worst_error,
            c.tolerance,
            c.instances
        );
        if let Some(inst) = &c.failing_instance {
            let path = run.join(format!("failing_{}.json", c.name));
            inst.save(&path)?;
            println!("  offending instance written to {}", path.display());
        }
    }
    let passed = checks.iter().all(|c| c.passed);
    let report = OracleReport {
        passed,
        variant: if mutate_sign { "flipped_sign" } else { "exact" },
        checks,
    };
    fs::write(run.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(passed)
}
