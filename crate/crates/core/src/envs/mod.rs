//! Environments behind one interface.

mod cdf_probe;
mod gambling;
mod portfolio;

pub use cdf_probe::{worst_case_cdf, CdfProbeParams};
pub use gambling::{
    fit_beta_mom, gambling_expected_reward, gambling_reward, gambling_shapes, gambling_step, BetaFit, GamblingEnv,
    GamblingMode, GamblingParams, GAMBLING_ACTIONS,
};
pub use portfolio::{
    load_price_csv, portfolio_build_next_state, portfolio_reward, HistoricalReplay, PortfolioConfig, PortfolioEnv,
    PriceSeries, ReturnSimulator, SyntheticHeavyTail, PORTFOLIO_STATE_DIM,
};

use crate::dual::RobustModel;
use crate::error::Result;

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
}

/// An infinite-horizon environment with a known reward function.
///
/// Every instance owns its random stream, so separate instances can be stepped
/// independently.
pub trait Environment: RobustModel {
    fn state_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// Starts a new episode and returns the initial state.
    fn reset(&mut self) -> Result<Vec<f64>>;
    fn state(&self) -> &[f64];
    fn step(&mut self, action: usize) -> Result<Step>;
}
