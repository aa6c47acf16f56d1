//! Experiment configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rdqn_core::envs::{CdfProbeParams, GamblingMode, PortfolioConfig, SyntheticHeavyTail};
use rdqn_core::rdqn::GamblingGameConfig;
use rdqn_core::{NuSpec, SolverConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Parent directory of run directories.
    pub out: PathBuf,
    /// Independent games (train/eval), each with a seed derived from `seed`.
    pub repetitions: usize,
    pub workers: usize,
    pub env: EnvSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub probe: ProbeSpec,
    pub oracle: OracleSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            repetitions: 1,
            workers: 1,
            env: EnvSpec::default(),
            train: TrainConfig::default(),
            eval: EvalSpec::default(),
            probe: ProbeSpec::default(),
            oracle: OracleSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    Gambling {
        #[serde(default = "default_reward_factor")]
        reward_factor: f64,
        /// Draws from the true initial law used to fit the reference.
        #[serde(default = "default_fit_samples")]
        fit_samples: usize,
        #[serde(default = "one")]
        parallel_envs: usize,
    },
    Portfolio {
        #[serde(default)]
        market: PortfolioConfig,
        /// Price CSV (`date,close`); the synthetic model is used when absent.
        #[serde(default)]
        prices: Option<PathBuf>,
        #[serde(default)]
        synthetic: SyntheticHeavyTail,
        /// Transaction cost used while training, if different.
        #[serde(default)]
        train_transaction_cost: Option<f64>,
        #[serde(default = "one")]
        parallel_envs: usize,
    },
}

fn default_reward_factor() -> f64 {
    5.0
}

fn default_fit_samples() -> usize {
    5
}

fn one() -> usize {
    1
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Gambling {
            reward_factor: default_reward_factor(),
            fit_samples: default_fit_samples(),
            parallel_envs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    True,
    Reference,
}

impl From<EvalMode> for GamblingMode {
    fn from(m: EvalMode) -> Self {
        match m {
            EvalMode::True => GamblingMode::TrueDist,
            EvalMode::Reference => GamblingMode::ReferenceDist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub episodes: usize,
    pub steps: usize,
    pub mode: EvalMode,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            episodes: 100,
            steps: 10_000,
            mode: EvalMode::True,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSpec {
    pub reference: (f64, f64),
    pub epsilon: f64,
    pub discount: f64,
    pub deltas: Vec<f64>,
    pub priors: Vec<NuSpec>,
    /// Number of equally spaced thresholds on `[0, 1]`, endpoints included.
    pub grid_points: usize,
    pub n_outer: usize,
    pub n_nu: usize,
    pub sweeps: usize,
    pub solver: SolverConfig,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        let p = CdfProbeParams::default();
        ProbeSpec {
            reference: p.reference,
            epsilon: p.epsilon,
            discount: p.discount,
            deltas: vec![10.0, 1.0, 0.1, 0.01],
            priors: vec![p.nu.clone()],
            grid_points: p.grid.len(),
            n_outer: p.n_outer,
            n_nu: p.n_nu,
            sweeps: p.sweeps,
            solver: p.solver,
        }
    }
}

impl ProbeSpec {
    pub fn params(&self, delta: f64, nu: &NuSpec) -> CdfProbeParams {
        let k = self.grid_points.max(2) - 1;
        CdfProbeParams {
            reference: self.reference,
            nu: nu.clone(),
            epsilon: self.epsilon,
            delta,
            discount: self.discount,
            grid: (0..=k).map(|i| i as f64 / k as f64).collect(),
            n_outer: self.n_outer,
            n_nu: self.n_nu,
            sweeps: self.sweeps,
            solver: self.solver,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    pub duality_instances: usize,
    pub nesting_instances: usize,
    pub delta_limit_instances: usize,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            duality_instances: 50,
            nesting_instances: 50,
            delta_limit_instances: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Checks shared fields and those of the sections `kind` reads.
    pub fn validate(&self, kind: Kind) -> Result<()> {
        if self.workers == 0 {
            bail!("workers: must be at least 1");
        }
        match kind {
            Kind::Train | Kind::Eval => {
                if self.repetitions == 0 {
                    bail!("repetitions: must be at least 1");
                }
                self.train.validate().context("[train]")?;
                if self.eval.episodes == 0 || self.eval.steps == 0 {
                    bail!("[eval] episodes and steps must be positive");
                }
                match &self.env {
                    EnvSpec::Gambling { .. } => self.gambling_game().validate().context("[env]")?,
                    EnvSpec::Portfolio {
                        market,
                        prices,
                        train_transaction_cost,
                        parallel_envs,
                        ..
                    } => {
                        market.validate().context("[env.market]")?;
                        if *parallel_envs == 0 {
                            bail!("[env] parallel_envs must be at least 1");
                        }
                        if let Some(c) = train_transaction_cost {
                            if !(*c >= 0.0) {
                                bail!("[env] train_transaction_cost must be non-negative");
                            }
                        }
                        if let Some(p) = prices {
                            if !p.is_file() {
                                bail!("[env] prices file {} does not exist", p.display());
                            }
                        }
                    }
                }
            }
            Kind::CdfProbe => {
                let p = &self.probe;
                if p.deltas.is_empty() || p.priors.is_empty() {
                    bail!("[probe] deltas and priors must be non-empty");
                }
                if p.grid_points < 2 {
                    bail!("[probe] grid_points must be at least 2");
                }
                for nu in &p.priors {
                    for &d in &p.deltas {
                        p.params(d, nu).validate().context("[probe]")?;
                    }
                }
            }
            Kind::OracleCheck => {
                let o = &self.oracle;
                if o.duality_instances + o.nesting_instances + o.delta_limit_instances == 0 {
                    bail!("[oracle] at least one suite needs instances");
                }
            }
        }
        Ok(())
    }

    /// Game protocol settings; only meaningful for the gambling environment.
    pub fn gambling_game(&self) -> GamblingGameConfig {
        let (reward_factor, fit_samples, parallel_envs) = match &self.env {
            EnvSpec::Gambling {
                reward_factor,
                fit_samples,
                parallel_envs,
            } => (*reward_factor, *fit_samples, *parallel_envs),
            EnvSpec::Portfolio { parallel_envs, .. } => (default_reward_factor(), default_fit_samples(), *parallel_envs),
        };
        GamblingGameConfig {
            reward_factor,
            fit_samples,
            parallel_envs,
            eval_episodes: self.eval.episodes,
            eval_steps: self.eval.steps,
            train: self.train.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Train,
    Eval,
    CdfProbe,
    OracleCheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Train => "train",
            Kind::Eval => "eval",
            Kind::CdfProbe => "cdf-probe",
            Kind::OracleCheck => "oracle-check",
        }
    }
}
