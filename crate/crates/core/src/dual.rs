//! Robust Bellman targets through the Sinkhorn dual.
//!
//! For a stored transition `(x, a, x')` the robust target is
//!
//! ```text
//! sup_{λ>0}  -λ ε - λ δ log( mean_j exp( (-f_j - λ c(x', y_j)) / (λ δ) ) )
//! f_j = r(x, a, y_j) + α max_b Q_target(y_j, b),   y_j ~ ν
//! ```
//!
//! The multiplier is optimised in the unconstrained parameter `λ_raw` with
//! `λ = softplus(λ_raw)`. Gradient ascent runs with a growing step size until
//! the derivative changes sign; the last step then brackets the maximiser and
//! is refined by bisection on the derivative. Every log-mean-exp is computed
//! with the running maximum subtracted, so tiny `δ` does not overflow.
//!
//! The effective radius `ε̄ = ε + δ log mean_j exp(-c(x', y_j) / δ)` must be
//! non-negative for the dual to be valid. When it is not, the configured
//! [`EpsilonBarPolicy`] decides between failing the batch and dropping the
//! transition.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{beta_quantile, sample_beta, sample_student_t, student_t_quantile};
use crate::error::{Error, Result};
use crate::nn::{ForwardBuffers, QNetwork};
use crate::transition::Transition;

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of [`softplus`].
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// `log((1/N) Σ e^{v_i})` with the maximum factored out.
pub fn stable_log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::input("log-mean-exp of an empty list"));
    }
    Ok(log_mean_exp(values))
}

fn log_mean_exp(values: &[f64]) -> f64 {
    let c = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if c == f64::NEG_INFINITY {
        return c;
    }
    let s: f64 = values.iter().map(|v| (v - c).exp()).sum();
    c + (s / values.len() as f64).ln()
}

/// Supported sampling measures `ν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NuFamily {
    Uniform { lo: f64, hi: f64 },
    Beta { a: f64, b: f64 },
    StudentT { loc: f64, scale: f64, dof: f64 },
    PointMass { point: Vec<f64> },
    /// Equal-weight atoms; repeat an atom to give it more weight.
    Empirical { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuSpec {
    #[serde(flatten)]
    pub family: NuFamily,
    #[serde(default = "default_true")]
    pub stratified: bool,
}

fn default_true() -> bool {
    true
}

impl NuSpec {
    pub fn new(family: NuFamily, stratified: bool) -> Self {
        NuSpec { family, stratified }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        NuSpec::new(NuFamily::Uniform { lo, hi }, true)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match &self.family {
            NuFamily::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            NuFamily::Beta { a, b } => *a > 0.0 && *b > 0.0,
            NuFamily::StudentT { loc, scale, dof } => loc.is_finite() && *scale > 0.0 && *dof > 0.0,
            NuFamily::PointMass { point } => !point.is_empty() && point.iter().all(|v| v.is_finite()),
            NuFamily::Empirical { points } => {
                !points.is_empty()
                    && !points[0].is_empty()
                    && points.iter().all(|p| p.len() == points[0].len() && p.iter().all(|v| v.is_finite()))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid parameters for sampling measure {:?}", self.family)))
        }
    }

    pub fn dim(&self) -> usize {
        match &self.family {
            NuFamily::PointMass { point } => point.len(),
            NuFamily::Empirical { points } => points.first().map_or(0, Vec::len),
            _ => 1,
        }
    }

    /// Sample does not depend on the random stream.
    pub fn is_deterministic(&self) -> bool {
        self.stratified || matches!(self.family, NuFamily::PointMass { .. })
    }
}

/// `n` points of dimension `dim`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct NuSamples {
    dim: usize,
    data: Vec<f64>,
}

impl NuSamples {
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::input("sample points must be non-empty and share one dimension"));
        }
        Ok(NuSamples {
            dim,
            data: points.iter().flatten().copied().collect(),
        })
    }

    pub fn from_scalars(values: Vec<f64>) -> Self {
        NuSamples { dim: 1, data: values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Draws `n` points from `ν`.
///
/// Stratified sampling maps the grid `i/(n+1)`, `i = 1..n`, through the
/// inverse CDF. For an empirical measure it enumerates the atoms in order,
/// which is exact only when `n` is a multiple of the atom count.
pub fn sample_nu<R: Rng + ?Sized>(nu_spec: &NuSpec, n: usize, rng: &mut R) -> Result<NuSamples> {
    nu_spec.validate()?;
    if n == 0 {
        return Err(Error::config("n_nu must be at least 1"));
    }
    let grid = |i: usize| (i + 1) as f64 / (n + 1) as f64;
    let samples = match (&nu_spec.family, nu_spec.stratified) {
        (NuFamily::Uniform { lo, hi }, true) => NuSamples::from_scalars((0..n).map(|i| lo + (hi - lo) * grid(i)).collect()),
        (NuFamily::Uniform { lo, hi }, false) => {
            NuSamples::from_scalars((0..n).map(|_| rng.random_range(*lo..*hi)).collect())
        }
        (NuFamily::Beta { a, b }, true) => NuSamples::from_scalars((0..n).map(|i| beta_quantile(grid(i), *a, *b)).collect()),
        (NuFamily::Beta { a, b }, false) => NuSamples::from_scalars((0..n).map(|_| sample_beta(*a, *b, rng)).collect()),
        (NuFamily::StudentT { loc, scale, dof }, true) => NuSamples::from_scalars(
            (0..n)
                .map(|i| student_t_quantile(grid(i), *loc, *scale, *dof))
                .collect::<Result<_>>()?,
        ),
        (NuFamily::StudentT { loc, scale, dof }, false) => {
            NuSamples::from_scalars((0..n).map(|_| sample_student_t(*loc, *scale, *dof, rng)).collect())
        }
        (NuFamily::PointMass { point }, _) => NuSamples {
            dim: point.len(),
            data: (0..n).flat_map(|_| point.iter().copied()).collect(),
        },
        (NuFamily::Empirical { points }, true) => {
            if n % points.len() != 0 {
                return Err(Error::config(format!(
                    "stratified empirical sampling needs n_nu to be a multiple of the {} atoms (got {n})",
                    points.len()
                )));
            }
            let idx: Vec<Vec<f64>> = (0..n).map(|i| points[i % points.len()].clone()).collect();
            NuSamples::from_points(&idx)?
        }
        (NuFamily::Empirical { points }, false) => {
            let idx: Vec<Vec<f64>> = (0..n).map(|_| points[rng.random_range(0..points.len())].clone()).collect();
            NuSamples::from_points(&idx)?
        }
    };
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsilonBarPolicy {
    #[default]
    Error,
    WarnAndDrop,
}

/// Ascent schedule for the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub initial_lambda_raw: f64,
    pub step_size: f64,
    pub schedule_horizon: f64,
    pub max_iters: usize,
    /// Bisection steps on the bracket found at the sign change.
    pub refine_iters: usize,
    /// Ascent stops once `|dV/dλ_raw|` falls below this.
    pub grad_tol: f64,
    /// Growth of the step multiplier while the derivative keeps its sign;
    /// `1.0` gives the plain schedule.
    pub expansion: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            initial_lambda_raw: 1.0,
            step_size: 0.05,
            schedule_horizon: 50.0,
            max_iters: 500,
            refine_iters: 60,
            grad_tol: 1e-7,
            expansion: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityConfig {
    pub epsilon: f64,
    pub delta: f64,
    pub nu: NuSpec,
    pub n_nu: usize,
    #[serde(default)]
    pub epsilon_bar_policy: EpsilonBarPolicy,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl AmbiguityConfig {
    pub fn new(epsilon: f64, delta: f64, nu: NuSpec, n_nu: usize) -> Self {
        AmbiguityConfig {
            epsilon,
            delta,
            nu,
            n_nu,
            epsilon_bar_policy: EpsilonBarPolicy::Error,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.n_nu == 0 {
            return Err(Error::config("n_nu must be at least 1"));
        }
        let s = &self.solver;
        if !(s.step_size > 0.0) || !(s.schedule_horizon > 0.0) {
            return Err(Error::config("solver step size and schedule horizon must be positive"));
        }
        if !(s.expansion >= 1.0) || !(s.grad_tol >= 0.0) {
            return Err(Error::config("solver expansion must be >= 1 and grad_tol >= 0"));
        }
        self.nu.validate()
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).unwrap_or_default().hash(&mut h);
        h.finish()
    }
}

/// Transport cost between an observed next state and a `ν`-sample.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn epsilon_bar_from_distances(epsilon: f64, delta: f64, distances: &[f64]) -> Result<f64> {
    let scaled: Vec<f64> = distances.iter().map(|d| -d / delta).collect();
    Ok(epsilon + delta * stable_log_mean_exp(&scaled)?)
}

/// `ε̄ = ε + δ log mean_j exp(-c(x', y_j) / δ)` for one observed next state.
pub fn epsilon_bar<C>(next_state: &[f64], nu_samples: &NuSamples, cfg: &AmbiguityConfig, cost: C) -> Result<f64>
where
    C: Fn(&[f64], &[f64]) -> f64,
{
    let d: Vec<f64> = nu_samples.iter().map(|y| cost(next_state, y)).collect();
    epsilon_bar_from_distances(cfg.epsilon, cfg.delta, &d)
}

/// Value and derivatives of the dual objective at one multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualEval {
    pub lambda: f64,
    pub value: f64,
    /// Derivative in `λ`.
    pub grad_lambda: f64,
    /// Derivative in `λ_raw`.
    pub grad_raw: f64,
}

/// Dual objective with payoffs `f_j` on the `ν`-samples and one row of
/// transport costs per outer (reference) sample.
#[derive(Debug, Clone)]
pub struct DualObjective<'a> {
    payoffs: &'a [f64],
    distances: &'a [f64],
    weights: Vec<f64>,
    epsilon: f64,
    delta: f64,
}

impl<'a> DualObjective<'a> {
    /// One outer sample: `distances[j] = c(x', y_j)`.
    pub fn single(payoffs: &'a [f64], distances: &'a [f64], epsilon: f64, delta: f64) -> Result<Self> {
        DualObjective::new(payoffs, distances, vec![1.0], epsilon, delta)
    }

    /// `distances` is row-major `weights.len() x payoffs.len()`.
    pub fn new(payoffs: &'a [f64], distances: &'a [f64], weights: Vec<f64>, epsilon: f64, delta: f64) -> Result<Self> {
        if payoffs.is_empty() {
            return Err(Error::input("dual objective needs at least one payoff"));
        }
        if weights.is_empty() || distances.len() != payoffs.len() * weights.len() {
            return Err(Error::input(format!(
                "{} distances do not match {} payoffs x {} outer samples",
                distances.len(),
                payoffs.len(),
                weights.len()
            )));
        }
        if !(delta > 0.0) {
            return Err(Error::config("delta must be positive"));
        }
        if let Some(j) = payoffs.iter().position(|f| !f.is_finite()) {
            return Err(Error::numerical(format!("payoff of sample {j} is {}", payoffs[j])));
        }
        if let Some(j) = distances.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::numerical(format!("transport cost entry {j} is {}", distances[j])));
        }
        Ok(DualObjective {
            payoffs,
            distances,
            weights,
            epsilon,
            delta,
        })
    }

    fn rows(&self) -> impl Iterator<Item = (&f64, &[f64])> {
        self.weights.iter().zip(self.distances.chunks_exact(self.payoffs.len()))
    }

    pub fn epsilon_bar(&self) -> f64 {
        let mut acc = 0.0;
        let mut scaled = vec![0.0; self.payoffs.len()];
        for (w, row) in self.rows() {
            for (s, d) in scaled.iter_mut().zip(row) {
                *s = -d / self.delta;
            }
            acc += w * log_mean_exp(&scaled);
        }
        self.epsilon + self.delta * acc
    }

    /// Limit of the objective as `λ -> 0+`.
    pub fn limit_at_zero(&self) -> f64 {
        self.payoffs.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn evaluate_lambda(&self, lambda: f64) -> Result<DualEval> {
        if !(lambda > 0.0) {
            return Err(Error::numerical(format!("multiplier must be positive, got {lambda}")));
        }
        let ld = lambda * self.delta;
        let mut lme_sum = 0.0;
        let mut mean_f = 0.0;
        let mut c = vec![0.0; self.payoffs.len()];
        for (w, row) in self.rows() {
            let mut cmax = f64::NEG_INFINITY;
            for ((cj, f), d) in c.iter_mut().zip(self.payoffs).zip(row) {
                *cj = (-f - lambda * d) / ld;
                cmax = cmax.max(*cj);
            }
            let mut s = 0.0;
            let mut sf = 0.0;
            for (cj, f) in c.iter().zip(self.payoffs) {
                let e = (cj - cmax).exp();
                s += e;
                sf += e * f;
            }
            lme_sum += w * (cmax + (s / c.len() as f64).ln());
            mean_f += w * sf / s;
        }
        let value = -lambda * self.epsilon - ld * lme_sum;
        let grad_lambda = -self.epsilon - self.delta * lme_sum - mean_f / lambda;
        if !value.is_finite() || !grad_lambda.is_finite() {
            let j = c.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::numerical(format!(
                "dual objective is not finite at lambda {lambda} (exponent of sample {j} is {})",
                c[j]
            )));
        }
        Ok(DualEval {
            lambda,
            value,
            grad_lambda,
            grad_raw: 0.0,
        })
    }

    pub fn evaluate(&self, lambda_raw: f64) -> Result<DualEval> {
        let mut e = self.evaluate_lambda(softplus(lambda_raw))?;
        e.grad_raw = e.grad_lambda * sigmoid(lambda_raw);
        Ok(e)
    }
}

/// Single-outer-sample dual objective at `λ = softplus(lambda_raw)`; returns
/// `(value, d value / d lambda_raw)`.
pub fn dual_objective(lambda_raw: f64, payoffs: &[f64], distances: &[f64], epsilon: f64, delta: f64) -> Result<(f64, f64)> {
    let e = DualObjective::single(payoffs, distances, epsilon, delta)?.evaluate(lambda_raw)?;
    Ok((e.value, e.grad_raw))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualSolveResult {
    pub lambda_star: f64,
    pub lambda_raw: f64,
    pub value: f64,
    pub epsilon_bar: f64,
    pub iterations: usize,
    pub from_cache: bool,
    pub converged: bool,
}

// keeps softplus away from underflow to zero
const RAW_MIN: f64 = -700.0;
const RAW_MAX: f64 = 700.0;

/// Maximises the dual objective over the multiplier.
///
/// Each ascent step is `η_k · boost_k · dV/dλ_raw` with `boost_k` multiplied
/// by [`SolverConfig::expansion`] while the derivative keeps its initial sign,
/// so flat stretches are crossed in a few steps. Once the sign flips, the last
/// step brackets the maximiser and false position on the derivative narrows it.
pub fn solve_lambda(obj: &DualObjective<'_>, init: Option<f64>, solver: &SolverConfig) -> Result<DualSolveResult> {
    let from_cache = init.is_some();
    let start = init.unwrap_or(solver.initial_lambda_raw).clamp(RAW_MIN, RAW_MAX);
    let epsilon_bar = obj.epsilon_bar();
    let first = obj.evaluate(start)?;
    // the supremum is never below the λ -> 0+ limit, min_j f_j
    let floor = obj.limit_at_zero();
    let finish = |raw: f64, e: DualEval, iterations: usize, converged: bool| DualSolveResult {
        lambda_star: e.lambda,
        lambda_raw: raw,
        value: e.value.max(floor),
        epsilon_bar,
        iterations,
        from_cache,
        converged,
    };
    if first.grad_raw.abs() <= solver.grad_tol {
        return Ok(finish(start, first, 0, true));
    }
    let ascending = first.grad_raw > 0.0;
    let (mut raw, mut cur) = (start, first);
    let mut boost = 1.0_f64;
    for k in 0..solver.max_iters {
        let eta = solver.step_size * (1.0 + k as f64 / solver.schedule_horizon);
        let next_raw = (raw + eta * boost * cur.grad_raw).clamp(RAW_MIN, RAW_MAX);
        if next_raw == raw {
            // pinned at a clamp, or the step is below floating resolution
            return Ok(finish(raw, cur, k + 1, raw < RAW_MAX));
        }
        let next = obj.evaluate(next_raw)?;
        if next.grad_raw.abs() <= solver.grad_tol {
            return Ok(finish(next_raw, next, k + 1, true));
        }
        if (next.grad_raw > 0.0) != ascending {
            let (raw_best, best, used) = refine_bracket(obj, (raw, cur), (next_raw, next), solver)?;
            return Ok(finish(raw_best, best, k + 1 + used, true));
        }
        raw = next_raw;
        cur = next;
        boost = (boost * solver.expansion).min(MAX_BOOST);
    }
    Ok(finish(raw, cur, solver.max_iters, false))
}

const MAX_BOOST: f64 = 1e12;

/// Illinois false position on the derivative inside a sign-change bracket.
/// Returns the best evaluated point and the number of evaluations used.
fn refine_bracket(
    obj: &DualObjective<'_>,
    a: (f64, DualEval),
    b: (f64, DualEval),
    solver: &SolverConfig,
) -> Result<(f64, DualEval, usize)> {
    let (mut lo, mut hi) = if a.0 < b.0 { (a, b) } else { (b, a) };
    let (mut g_lo, mut g_hi) = (lo.1.grad_raw, hi.1.grad_raw);
    let mut best = if lo.1.value >= hi.1.value { lo } else { hi };
    let mut side = 0i8;
    let mut used = 0;
    while used < solver.refine_iters {
        let mut x = lo.0 - g_lo * (hi.0 - lo.0) / (g_hi - g_lo);
        if !(x > lo.0 && x < hi.0) {
            x = 0.5 * (lo.0 + hi.0);
        }
        if x <= lo.0 || x >= hi.0 {
            break;
        }
        let e = obj.evaluate(x)?;
        used += 1;
        if e.value > best.1.value {
            best = (x, e);
        }
        if e.grad_raw.abs() <= solver.grad_tol * 1e-3 {
            best = (x, e);
            break;
        }
        if (e.grad_raw > 0.0) == (g_lo > 0.0) {
            lo = (x, e);
            g_lo = e.grad_raw;
            if side == -1 {
                g_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = (x, e);
            g_hi = e.grad_raw;
            if side == 1 {
                g_lo *= 0.5;
            }
            side = 1;
        }
        if hi.0 - lo.0 <= 1e-14 * lo.0.abs().max(1.0) {
            break;
        }
    }
    Ok((best.0, best.1, used))
}

/// Last optimised `λ_raw` per replay slot.
#[derive(Debug, Clone, Default)]
pub struct LambdaCache {
    entries: Vec<Option<f64>>,
    fingerprint: Option<u64>,
    hits: u64,
}

impl LambdaCache {
    pub fn new(capacity: usize) -> Self {
        LambdaCache {
            entries: vec![None; capacity],
            fingerprint: None,
            hits: 0,
        }
    }

    /// Clears all entries when the ambiguity configuration differs from the
    /// one the entries were computed under.
    pub fn bind(&mut self, cfg: &AmbiguityConfig) {
        let fp = cfg.fingerprint();
        if self.fingerprint != Some(fp) {
            self.clear();
            self.fingerprint = Some(fp);
        }
    }

    pub fn get(&self, slot: usize) -> Option<f64> {
        self.entries.get(slot).copied().flatten()
    }

    pub fn set(&mut self, slot: usize, lambda_raw: f64) {
        if !lambda_raw.is_finite() {
            return;
        }
        if slot >= self.entries.len() {
            self.entries.resize(slot + 1, None);
        }
        self.entries[slot] = Some(lambda_raw);
    }

    pub fn invalidate(&mut self, slot: usize) {
        if let Some(e) = self.entries.get_mut(slot) {
            *e = None;
        }
    }

    pub fn clear(&mut self) {
        self.entries.iter_mut().for_each(|e| *e = None);
    }

    pub fn len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }
}

/// Anything that can report `max_b Q(x, b)`.
pub trait QFunction {
    fn max_value(&self, state: &[f64], buffers: &mut ForwardBuffers) -> Result<f64>;
}

impl QFunction for QNetwork {
    fn max_value(&self, state: &[f64], buffers: &mut ForwardBuffers) -> Result<f64> {
        self.max_value_with(state, buffers)
    }
}

/// Q-values on a finite set of states, looked up by nearest state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    pub states: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl TabularQ {
    pub fn new(states: Vec<Vec<f64>>, values: Vec<Vec<f64>>) -> Result<Self> {
        if states.is_empty() || states.len() != values.len() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::input("tabular Q needs one non-empty value row per state"));
        }
        Ok(TabularQ { states, values })
    }

    pub fn index_of(&self, state: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, s) in self.states.iter().enumerate() {
            let d = euclidean(s, state);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

impl QFunction for TabularQ {
    fn max_value(&self, state: &[f64], _: &mut ForwardBuffers) -> Result<f64> {
        Ok(self.values[self.index_of(state)].iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Known reward and the geometry of the ambiguity set for an environment.
pub trait RobustModel {
    fn reward(&self, state: &[f64], action: usize, next_state: &[f64]) -> f64;

    /// Candidate next state when the uncertain part of the transition takes
    /// the value of the `ν`-sample `y`. Defaults to `y` itself.
    fn embed_nu_sample(&self, _state: &[f64], _action: usize, _next_state: &[f64], y: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(y);
    }

    /// Transport cost between the observed next state and a `ν`-sample.
    fn transport_cost(&self, next_state: &[f64], y: &[f64]) -> f64 {
        euclidean(next_state, y)
    }

    /// True when [`RobustModel::embed_nu_sample`] ignores the transition.
    fn embedding_is_transition_free(&self) -> bool {
        true
    }
}

/// Transition drawn from the replay buffer, tagged with its slot.
#[derive(Debug, Clone, Copy)]
pub struct SlotTransition<'a> {
    pub slot: usize,
    pub transition: &'a Transition,
}

/// Per-batch outcome of the robust target computation.
#[derive(Debug, Clone, Default)]
pub struct BatchTargets {
    /// `None` marks a transition dropped for `ε̄ < 0`.
    pub targets: Vec<Option<f64>>,
    pub solves: Vec<Option<DualSolveResult>>,
    pub eps_bar_negatives: usize,
    pub non_converged: usize,
}

impl BatchTargets {
    pub fn mean_lambda(&self) -> f64 {
        let l: Vec<f64> = self.solves.iter().flatten().map(|s| s.lambda_star).collect();
        if l.is_empty() {
            f64::NAN
        } else {
            l.iter().sum::<f64>() / l.len() as f64
        }
    }
}

/// Seed for the `ν` stream of a transition, derived from `(seed, slot, step)`.
pub fn transition_rng(seed: u64, slot: usize, step: u64) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    (seed, slot as u64, step).hash(&mut h);
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// Robust targets for a batch; optimised multipliers are written back into `cache`.
pub fn robust_target_batch<Q, M>(
    batch: &[SlotTransition<'_>],
    q_target: &Q,
    model: &M,
    discount: f64,
    cfg: &AmbiguityConfig,
    cache: &mut LambdaCache,
    seed: u64,
    step: u64,
) -> Result<BatchTargets>
where
    Q: QFunction + ?Sized,
    M: RobustModel + ?Sized,
{
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    cfg.validate()?;
    cache.bind(cfg);
    let mut buffers = ForwardBuffers::default();
    let mut embedded = Vec::new();
    let shared_samples = if cfg.nu.is_deterministic() {
        Some(sample_nu(&cfg.nu, cfg.n_nu, &mut transition_rng(seed, 0, step))?)
    } else {
        None
    };
    // continuation values on the shared samples, when they do not depend on the transition
    let shared_continuation = match &shared_samples {
        Some(s) if model.embedding_is_transition_free() => {
            let t = batch[0].transition;
            let mut cont = Vec::with_capacity(s.len());
            for y in s.iter() {
                model.embed_nu_sample(&t.state, t.action, &t.next_state, y, &mut embedded);
                cont.push(q_target.max_value(&embedded, &mut buffers)?);
            }
            Some(cont)
        }
        _ => None,
    };

    let mut out = BatchTargets {
        targets: Vec::with_capacity(batch.len()),
        solves: Vec::with_capacity(batch.len()),
        ..Default::default()
    };
    let mut payoffs = Vec::with_capacity(cfg.n_nu);
    let mut distances = Vec::with_capacity(cfg.n_nu);
    for (index, item) in batch.iter().enumerate() {
        let t = item.transition;
        let own;
        let samples = match &shared_samples {
            Some(s) => s,
            None => {
                own = sample_nu(&cfg.nu, cfg.n_nu, &mut transition_rng(seed, item.slot, step))?;
                &own
            }
        };
        payoffs.clear();
        distances.clear();
        for (j, y) in samples.iter().enumerate() {
            model.embed_nu_sample(&t.state, t.action, &t.next_state, y, &mut embedded);
            let cont = match &shared_continuation {
                Some(c) => c[j],
                None => q_target.max_value(&embedded, &mut buffers)?,
            };
            payoffs.push(model.reward(&t.state, t.action, &embedded) + discount * cont);
            distances.push(model.transport_cost(&t.next_state, y));
        }
        let obj = DualObjective::single(&payoffs, &distances, cfg.epsilon, cfg.delta)
            .map_err(|e| Error::numerical(format!("batch transition {index}: {e}")))?;
        let eps_bar = obj.epsilon_bar();
        if eps_bar < 0.0 {
            out.eps_bar_negatives += 1;
            match cfg.epsilon_bar_policy {
                EpsilonBarPolicy::Error => {
                    return Err(Error::NegativeEpsilonBar {
                        index,
                        epsilon_bar: eps_bar,
                    })
                }
                EpsilonBarPolicy::WarnAndDrop => {
                    log::warn!("dropping batch transition {index}: effective radius {eps_bar:.3e} < 0");
                    out.targets.push(None);
                    out.solves.push(None);
                    continue;
                }
            }
        }
        let init = cache.get(item.slot);
        if init.is_some() {
            cache.hits += 1;
        }
        let res = solve_lambda(&obj, init, &cfg.solver)
            .map_err(|e| Error::numerical(format!("batch transition {index}: {e}")))?;
        if !res.converged {
            out.non_converged += 1;
        }
        cache.set(item.slot, res.lambda_raw);
        out.targets.push(Some(res.value));
        out.solves.push(Some(res));
    }
    Ok(out)
}

/// Standard targets `r + α max_b Q_target(x', b)`.
pub fn dqn_target_batch<Q: QFunction + ?Sized>(batch: &[SlotTransition<'_>], q_target: &Q, discount: f64) -> Result<Vec<f64>> {
    let mut buffers = ForwardBuffers::default();
    batch
        .iter()
        .map(|item| {
            let t = item.transition;
            Ok(t.reward + discount * q_target.max_value(&t.next_state, &mut buffers)?)
        })
        .collect()
}
