//! Single-asset portfolio allocation between a risky index and cash.
//!
//! State layout (63 entries): the last 60 log returns, log wealth, current
//! position, and the length of the coming period in years.

use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, Step};
use crate::dist::sample_student_t;
use crate::dual::RobustModel;
use crate::error::{Error, Result};

pub const WINDOW: usize = 60;
const WEALTH: usize = WINDOW;
const POSITION: usize = WINDOW + 1;
const DELTA: usize = WINDOW + 2;
pub const PORTFOLIO_STATE_DIM: usize = WINDOW + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioConfig {
    /// Proportional cost on position changes.
    pub transaction_cost: f64,
    /// Continuously compounded annual risk-free rate.
    pub risk_free: f64,
    /// Log returns are clamped to `[-bound, bound]`.
    pub return_bound: f64,
    /// Allowed positions, one action per entry.
    pub positions: Vec<f64>,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        PortfolioConfig {
            transaction_cost: 0.0005,
            risk_free: 0.024,
            return_bound: 0.25,
            positions: (0..9).map(|i| -1.0 + 0.25 * i as f64).collect(),
        }
    }
}

impl PortfolioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.transaction_cost >= 0.0) || !self.risk_free.is_finite() || !(self.return_bound > 0.0) {
            return Err(Error::config("portfolio cost, rate and return bound must be finite, bound positive"));
        }
        if self.positions.is_empty() || self.positions.iter().any(|p| !(p.abs() <= 1.0)) {
            return Err(Error::config("positions must be a non-empty list within [-1, 1]"));
        }
        Ok(())
    }
}

fn check_state(state: &[f64]) -> Result<()> {
    if state.len() != PORTFOLIO_STATE_DIM {
        return Err(Error::input(format!(
            "portfolio state has {} entries, expected {PORTFOLIO_STATE_DIM}",
            state.len()
        )));
    }
    Ok(())
}

/// Log return of the portfolio over one period when moving to position `a`
/// and the risky asset returns `y`.
pub fn portfolio_reward(state: &[f64], a: f64, y: f64, cfg: &PortfolioConfig) -> Result<f64> {
    check_state(state)?;
    let cash = (cfg.risk_free * state[DELTA]).exp_m1();
    let arg = 1.0 + a * y.exp_m1() + (1.0 - a) * cash - cfg.transaction_cost * (a - state[POSITION]).abs();
    if !(arg > 0.0) {
        return Err(Error::numerical(format!(
            "portfolio growth factor {arg} is not positive (position {a}, return {y})"
        )));
    }
    Ok(arg.ln())
}

/// Deterministic part of the transition: shift in `y`, book the portfolio
/// return, hold position `a`, and set the next period length.
pub fn portfolio_build_next_state(state: &[f64], a: f64, y: f64, delta_next: f64, cfg: &PortfolioConfig) -> Result<Vec<f64>> {
    let r = portfolio_reward(state, a, y, cfg)?;
    let mut next = Vec::with_capacity(PORTFOLIO_STATE_DIM);
    next.extend_from_slice(&state[1..WINDOW]);
    next.push(y);
    next.push(state[WEALTH] + r);
    next.push(a);
    next.push(delta_next);
    Ok(next)
}

/// Source of risky-asset log returns.
pub trait ReturnSimulator: Send {
    /// Initial window of `WINDOW` returns and the first period length.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)>;
    /// Next log return given the current window, and the period after it.
    fn advance(&mut self, window: &[f64], rng: &mut dyn RngCore) -> Result<(f64, f64)>;
    /// How many emitted returns were clamped to the bound.
    fn clamped(&self) -> u64;
}

/// Student-t innovations scaled by an exponentially weighted volatility of
/// the window, which produces volatility clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticHeavyTail {
    pub drift: f64,
    pub base_vol: f64,
    pub decay: f64,
    /// Weight of the long-run level in the variance estimate.
    pub mean_reversion: f64,
    pub dof: f64,
    pub bound: f64,
    pub period: f64,
    #[serde(skip)]
    clamped: u64,
}

impl Default for SyntheticHeavyTail {
    fn default() -> Self {
        SyntheticHeavyTail {
            drift: 0.0003,
            base_vol: 0.011,
            decay: 0.94,
            mean_reversion: 0.05,
            dof: 4.0,
            bound: 0.25,
            period: 1.0 / 252.0,
            clamped: 0,
        }
    }
}

impl SyntheticHeavyTail {
    fn variance(&self, window: &[f64]) -> f64 {
        let mut w = 1.0;
        let (mut num, mut den) = (0.0, 0.0);
        for r in window.iter().rev() {
            num += w * (r - self.drift).powi(2);
            den += w;
            w *= self.decay;
        }
        let ewma = if den > 0.0 { num / den } else { self.base_vol.powi(2) };
        self.mean_reversion * self.base_vol.powi(2) + (1.0 - self.mean_reversion) * ewma
    }

    fn draw(&mut self, window: &[f64], rng: &mut dyn RngCore) -> f64 {
        // unit-variance innovations need dof > 2
        let scale = if self.dof > 2.0 {
            ((self.dof - 2.0) / self.dof).sqrt()
        } else {
            1.0
        };
        let z = sample_student_t(0.0, scale, self.dof, rng);
        let y = self.drift + self.variance(window).sqrt() * z;
        if y.abs() > self.bound {
            self.clamped += 1;
        }
        y.clamp(-self.bound, self.bound)
    }
}

impl ReturnSimulator for SyntheticHeavyTail {
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        if !(self.base_vol > 0.0 && self.dof > 0.0 && (0.0..1.0).contains(&self.decay) && self.bound > 0.0) {
            return Err(Error::config("invalid synthetic return model parameters"));
        }
        let mut window = vec![self.drift; WINDOW];
        // burn in so that the window carries the model's own clustering
        for _ in 0..2 * WINDOW {
            let y = self.draw(&window, rng);
            window.remove(0);
            window.push(y);
        }
        Ok((window, self.period))
    }

    fn advance(&mut self, window: &[f64], rng: &mut dyn RngCore) -> Result<(f64, f64)> {
        Ok((self.draw(window, rng), self.period))
    }

    fn clamped(&self) -> u64 {
        self.clamped
    }
}

/// Log returns and period lengths from a price file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub log_returns: Vec<f64>,
    /// Calendar-day gap before each return, in years.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct PriceRow {
    date: String,
    close: f64,
}

/// Reads a `date,close` CSV with ISO dates in ascending order.
pub fn load_price_csv(path: &Path) -> Result<PriceSeries> {
    let ingest = |line: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "close"] {
        return Err(ingest(1, format!("expected header `date,close`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut prev: Option<(NaiveDate, f64)> = None;
    let mut series = PriceSeries {
        log_returns: Vec::new(),
        deltas: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| ingest(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let row: PriceRow = record.deserialize(Some(&headers)).map_err(|e| ingest(line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| ingest(line, format!("bad date `{}`: {e}", row.date)))?;
        if !(row.close > 0.0 && row.close.is_finite()) {
            return Err(ingest(line, format!("closing price {} is not positive", row.close)));
        }
        if let Some((pd, pc)) = prev {
            if date <= pd {
                return Err(ingest(line, format!("date {date} does not follow {pd}")));
            }
            series.log_returns.push((row.close / pc).ln());
            series.deltas.push((date - pd).num_days() as f64 / 365.25);
        }
        prev = Some((date, row.close));
    }
    if series.log_returns.is_empty() {
        return Err(ingest(0, "need at least two price rows".into()));
    }
    Ok(series)
}

/// Replays a historical series from a random offset, restarting at a fresh
/// offset when the data runs out.
#[derive(Debug, Clone)]
pub struct HistoricalReplay {
    series: PriceSeries,
    bound: f64,
    cursor: usize,
    clamped: u64,
}

impl HistoricalReplay {
    pub fn new(series: PriceSeries, bound: f64) -> Result<Self> {
        if series.log_returns.len() <= WINDOW + 1 {
            return Err(Error::input(format!(
                "historical replay needs more than {} returns, got {}",
                WINDOW + 1,
                series.log_returns.len()
            )));
        }
        if series.deltas.len() != series.log_returns.len() {
            return Err(Error::input("returns and period lengths differ in length"));
        }
        Ok(HistoricalReplay {
            series,
            bound,
            cursor: WINDOW,
            clamped: 0,
        })
    }

    fn clamp(&mut self, y: f64) -> f64 {
        if y.abs() > self.bound {
            self.clamped += 1;
        }
        y.clamp(-self.bound, self.bound)
    }

    fn restart(&mut self, rng: &mut dyn RngCore) {
        self.cursor = rng.random_range(WINDOW..self.series.log_returns.len());
    }
}

impl ReturnSimulator for HistoricalReplay {
    fn reset(&mut self, rng: &mut dyn RngCore) -> Result<(Vec<f64>, f64)> {
        self.restart(rng);
        let raw: Vec<f64> = self.series.log_returns[self.cursor - WINDOW..self.cursor].to_vec();
        let window = raw.into_iter().map(|y| self.clamp(y)).collect();
        Ok((window, self.series.deltas[self.cursor]))
    }

    fn advance(&mut self, _window: &[f64], rng: &mut dyn RngCore) -> Result<(f64, f64)> {
        let y = self.series.log_returns[self.cursor];
        let y = self.clamp(y);
        self.cursor += 1;
        if self.cursor >= self.series.log_returns.len() {
            self.restart(rng);
        }
        Ok((y, self.series.deltas[self.cursor]))
    }

    fn clamped(&self) -> u64 {
        self.clamped
    }
}

pub struct PortfolioEnv {
    cfg: PortfolioConfig,
    simulator: Box<dyn ReturnSimulator>,
    rng: ChaCha8Rng,
    state: Vec<f64>,
}

impl std::fmt::Debug for PortfolioEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PortfolioEnv").field("cfg", &self.cfg).field("state", &self.state).finish()
    }
}

impl PortfolioEnv {
    pub fn new(cfg: PortfolioConfig, simulator: Box<dyn ReturnSimulator>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut env = PortfolioEnv {
            cfg,
            simulator,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: Vec::new(),
        };
        env.reset()?;
        Ok(env)
    }

    pub fn config(&self) -> &PortfolioConfig {
        &self.cfg
    }

    pub fn clamped_returns(&self) -> u64 {
        self.simulator.clamped()
    }
}

impl RobustModel for PortfolioEnv {
    fn reward(&self, state: &[f64], action: usize, next_state: &[f64]) -> f64 {
        portfolio_reward(state, self.cfg.positions[action], next_state[WINDOW - 1], &self.cfg).unwrap_or(f64::NAN)
    }

    fn embed_nu_sample(&self, state: &[f64], action: usize, next_state: &[f64], y: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&state[1..WINDOW]);
        out.push(y[0]);
        let r = portfolio_reward(state, self.cfg.positions[action], y[0], &self.cfg).unwrap_or(f64::NAN);
        out.push(state[WEALTH] + r);
        out.push(self.cfg.positions[action]);
        out.push(next_state[DELTA]);
    }

    /// Only the newly revealed log return is uncertain.
    fn transport_cost(&self, next_state: &[f64], y: &[f64]) -> f64 {
        (next_state[WINDOW - 1] - y[0]).abs()
    }

    fn embedding_is_transition_free(&self) -> bool {
        false
    }
}

impl Environment for PortfolioEnv {
    fn state_dim(&self) -> usize {
        PORTFOLIO_STATE_DIM
    }

    fn num_actions(&self) -> usize {
        self.cfg.positions.len()
    }

    fn reset(&mut self) -> Result<Vec<f64>> {
        let (window, delta) = self.simulator.reset(&mut self.rng)?;
        let mut state = window;
        state.extend_from_slice(&[0.0, 0.0, delta]);
        self.state = state;
        Ok(self.state.clone())
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        let a = *self
            .cfg
            .positions
            .get(action)
            .ok_or_else(|| Error::input(format!("portfolio action {action} out of range")))?;
        let (y, delta_next) = self.simulator.advance(&self.state[..WINDOW], &mut self.rng)?;
        let reward = portfolio_reward(&self.state, a, y, &self.cfg)?;
        let next = portfolio_build_next_state(&self.state, a, y, delta_next, &self.cfg)?;
        self.state.clone_from(&next);
        Ok(Step { next_state: next, reward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn state_with(position: f64, delta: f64) -> Vec<f64> {
        let mut s: Vec<f64> = (0..WINDOW).map(|i| 0.001 * i as f64).collect();
        s.extend_from_slice(&[0.3, position, delta]);
        s
    }

    #[test]
    fn all_cash_earns_risk_free() {
        let cfg = PortfolioConfig::default();
        for &d in &[1.0 / 252.0, 3.0 / 365.25, 0.5] {
            let r = portfolio_reward(&state_with(0.0, d), 0.0, 0.07, &cfg).unwrap();
            assert!((r - cfg.risk_free * d).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_invested_without_trade_earns_asset_return() {
        let cfg = PortfolioConfig::default();
        for &y in &[-0.2, -0.01, 0.0, 0.03, 0.25] {
            let r = portfolio_reward(&state_with(1.0, 0.37), 1.0, y, &cfg).unwrap();
            assert!((r - y).abs() < 1e-15);
        }
    }

    #[test]
    fn half_invested_reference_value() {
        let cfg = PortfolioConfig::default();
        let r = portfolio_reward(&state_with(0.0, 1.0 / 252.0), 0.5, 0.02, &cfg).unwrap();
        assert!((r - 0.009_849_624_127_606_747).abs() < 1e-15, "{r}");
    }

    #[test]
    fn non_positive_growth_is_numerical_error() {
        let cfg = PortfolioConfig {
            transaction_cost: 1.5,
            ..Default::default()
        };
        let err = portfolio_reward(&state_with(-1.0, 0.01), 1.0, 0.0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(portfolio_reward(&[0.0; 5], 1.0, 0.0, &cfg).is_err());
    }

    #[test]
    fn next_state_shifts_window() {
        let cfg = PortfolioConfig::default();
        let s = state_with(0.25, 0.01);
        let n = portfolio_build_next_state(&s, -0.5, 0.04, 0.02, &cfg).unwrap();
        assert_eq!(&n[..WINDOW - 1], &s[1..WINDOW]);
        assert_eq!(n[WINDOW - 1], 0.04);
        assert_eq!(n[POSITION], -0.5);
        assert_eq!(n[DELTA], 0.02);
        let r = portfolio_reward(&s, -0.5, 0.04, &cfg).unwrap();
        assert_eq!(n[WEALTH], s[WEALTH] + r);
    }

    #[test]
    fn embedding_of_realised_return_equals_transition() {
        let mut env = PortfolioEnv::new(PortfolioConfig::default(), Box::new(SyntheticHeavyTail::default()), 4).unwrap();
        for i in 0..50 {
            let s = env.state().to_vec();
            let a = i % env.num_actions();
            let step = env.step(a).unwrap();
            let mut out = Vec::new();
            env.embed_nu_sample(&s, a, &step.next_state, &[step.next_state[WINDOW - 1]], &mut out);
            assert_eq!(out, step.next_state);
            assert_eq!(env.reward(&s, a, &out), step.reward);
        }
    }

    #[test]
    fn cost_only_sees_return_coordinate() {
        let env = PortfolioEnv::new(PortfolioConfig::default(), Box::new(SyntheticHeavyTail::default()), 4).unwrap();
        let mut a = state_with(0.0, 0.01);
        let mut b = a.clone();
        b[3] = 9.0;
        b[WEALTH] = -4.0;
        assert_eq!(env.transport_cost(&a, &[0.1]), env.transport_cost(&b, &[0.1]));
        a[WINDOW - 1] = 0.5;
        assert!((env.transport_cost(&a, &[0.1]) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn synthetic_returns_respect_bound() {
        let sim = SyntheticHeavyTail {
            base_vol: 0.2,
            dof: 2.5,
            ..Default::default()
        };
        let mut env = PortfolioEnv::new(PortfolioConfig::default(), Box::new(sim), 9).unwrap();
        for _ in 0..5000 {
            let s = env.step(8).unwrap();
            assert!(s.next_state[WINDOW - 1].abs() <= 0.25);
        }
        assert!(env.clamped_returns() > 0);
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_two_rows() {
        let f = write_csv("date,close\n2024-01-02,100\n2024-01-03,105\n");
        let s = load_price_csv(f.path()).unwrap();
        assert_eq!(s.log_returns.len(), 1);
        assert!((s.log_returns[0] - 0.048_790_164_169_432).abs() < 1e-15);
        assert!((s.deltas[0] - 1.0 / 365.25).abs() < 1e-15);
    }

    #[test]
    fn csv_weekend_gap() {
        // 2024-01-05 is a Friday
        let f = write_csv("date,close\n2024-01-05,50\n2024-01-08,51\n");
        assert!((load_price_csv(f.path()).unwrap().deltas[0] - 3.0 / 365.25).abs() < 1e-15);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let cases = [
            ("date,close\n2024-01-02,100\n2024-01-01,101\n", 3),
            ("date,close\n2024-01-02,100\n2024-01-03,-1\n", 3),
            ("date,close\n2024-01-02,100\n2024-13-03,100\n", 3),
            ("date,close\n2024-01-02,abc\n", 2),
        ];
        for (body, want) in cases {
            let f = write_csv(body);
            match load_price_csv(f.path()) {
                Err(Error::Ingestion { line, .. }) => assert_eq!(line, want, "{body}"),
                other => panic!("expected ingestion error, got {other:?}"),
            }
        }
        let f = write_csv("day,price\n2024-01-02,100\n2024-01-03,101\n");
        assert!(matches!(load_price_csv(f.path()), Err(Error::Ingestion { line: 1, .. })));
    }
}
