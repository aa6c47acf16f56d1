//! Betting on the next draw of a state-dependent Beta distribution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, Step};
use crate::dist::{beta_cdf, sample_beta};
use crate::dual::{softplus, RobustModel};
use crate::error::{Error, Result};

/// Bet sizes behind action indices 0, 1, 2.
pub const GAMBLING_ACTIONS: [f64; 3] = [-1.0, 0.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GamblingParams {
    pub alpha_prime: f64,
    pub beta_prime: f64,
    /// Multiplier applied to negative rewards.
    pub reward_factor: f64,
}

impl GamblingParams {
    pub fn new(alpha_prime: f64, beta_prime: f64, reward_factor: f64) -> Result<Self> {
        let p = GamblingParams {
            alpha_prime,
            beta_prime,
            reward_factor,
        };
        p.validate()?;
        Ok(p)
    }

    /// The true law, Beta(1.2, 2), with the given penalty factor.
    pub fn truth(reward_factor: f64) -> Self {
        GamblingParams {
            alpha_prime: 1.2,
            beta_prime: 2.0,
            reward_factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_prime > 0.0 && self.beta_prime > 0.0) {
            return Err(Error::config(format!(
                "beta parameters must be positive, got ({}, {})",
                self.alpha_prime, self.beta_prime
            )));
        }
        if !(self.reward_factor > 0.0 && self.reward_factor.is_finite()) {
            return Err(Error::config("reward factor must be positive"));
        }
        Ok(())
    }
}

/// Which parameters drive the simulated dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GamblingMode {
    #[default]
    TrueDist,
    ReferenceDist,
}

/// Shape parameters of the next-state law after betting `a` in state `x`.
pub fn gambling_shapes(x: f64, a: f64, p: &GamblingParams) -> (f64, f64) {
    if a == 0.0 {
        (p.alpha_prime, p.beta_prime)
    } else {
        (softplus(p.alpha_prime - a * x), softplus(p.beta_prime + a * (1.0 - x)))
    }
}

pub fn gambling_reward(x: f64, a: f64, next: f64, reward_factor: f64) -> f64 {
    let r = a * (next - x);
    if r < 0.0 {
        reward_factor * r
    } else {
        r
    }
}

pub fn gambling_step<R: rand::Rng + ?Sized>(x: f64, a: f64, p: &GamblingParams, rng: &mut R) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::input(format!("gambling state {x} outside [0, 1]")));
    }
    let (sa, sb) = gambling_shapes(x, a, p);
    let next = sample_beta(sa, sb, rng);
    Ok((next, gambling_reward(x, a, next, p.reward_factor)))
}

/// `E[r | x, a]` under the given parameters.
///
/// Closed form through the regularized incomplete beta: with `X' ~ Beta(α, β)`
/// and `μ = α/(α+β)`, `E[X' 1{X' < x}] = μ I_x(α+1, β)`.
pub fn gambling_expected_reward(x: f64, a: f64, p: &GamblingParams) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    let (sa, sb) = gambling_shapes(x, a, p);
    let mu = sa / (sa + sb);
    let below = beta_cdf(x, sa, sb);
    let below_mean = mu * beta_cdf(x, sa + 1.0, sb);
    let k = p.reward_factor - 1.0;
    // r = a(X' - x), penalised on the losing side of x
    let linear = a * (mu - x);
    let losing = if a > 0.0 {
        below_mean - x * below
    } else {
        x * (1.0 - below) - (mu - below_mean)
    };
    linear + k * a.abs() * losing
}

/// Method-of-moments Beta estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaFit {
    pub alpha: f64,
    pub beta: f64,
    /// The sample variance was too large for a Beta law; the common factor
    /// was clamped to `1e-3`.
    pub degenerate: bool,
}

pub fn fit_beta_mom(samples: &[f64]) -> Result<BetaFit> {
    if samples.len() < 2 {
        return Err(Error::input("method of moments needs at least two samples"));
    }
    if let Some(bad) = samples.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::input(format!("sample {bad} outside (0, 1)")));
    }
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / n;
    if !(v > 0.0) {
        return Err(Error::input("samples have zero variance"));
    }
    // only reachable through rounding for samples inside (0, 1)
    let mut t = m * (1.0 - m) / v - 1.0;
    let degenerate = !(t > 0.0);
    if degenerate {
        t = 1e-3;
    }
    Ok(BetaFit {
        alpha: m * t,
        beta: (1.0 - m) * t,
        degenerate,
    })
}

/// Unit-interval gambling game. State is the last draw `x`; actions bet
/// `-1`, `0` or `1` on the next draw.
#[derive(Debug, Clone)]
pub struct GamblingEnv {
    params: GamblingParams,
    rng: ChaCha8Rng,
    state: [f64; 1],
}

impl GamblingEnv {
    pub fn new(params: GamblingParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = sample_beta(params.alpha_prime, params.beta_prime, &mut rng);
        Ok(GamblingEnv {
            params,
            rng,
            state: [x],
        })
    }

    pub fn params(&self) -> &GamblingParams {
        &self.params
    }

    pub fn set_state(&mut self, x: f64) {
        self.state[0] = x;
    }
}

impl RobustModel for GamblingEnv {
    fn reward(&self, state: &[f64], action: usize, next_state: &[f64]) -> f64 {
        gambling_reward(state[0], GAMBLING_ACTIONS[action], next_state[0], self.params.reward_factor)
    }

    fn transport_cost(&self, next_state: &[f64], y: &[f64]) -> f64 {
        (next_state[0] - y[0]).abs()
    }
}

impl Environment for GamblingEnv {
    fn state_dim(&self) -> usize {
        1
    }

    fn num_actions(&self) -> usize {
        GAMBLING_ACTIONS.len()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        self.state[0] = sample_beta(self.params.alpha_prime, self.params.beta_prime, &mut self.rng);
        Ok(self.state.to_vec())
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        let a = *GAMBLING_ACTIONS
            .get(action)
            .ok_or_else(|| Error::input(format!("gambling action {action} out of range")))?;
        let (next, reward) = gambling_step(self.state[0], a, &self.params, &mut self.rng)?;
        self.state[0] = next;
        Ok(Step {
            next_state: vec![next],
            reward,
        })
    }
}
