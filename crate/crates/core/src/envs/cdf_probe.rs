//! Worst-case CDF probe: one action, indicator reward `1{x' <= x0}`.
//!
//! The robust value at threshold `x0` is the smallest probability any member
//! of the ambiguity ball assigns to `[0, x0]`, plus a small discounted
//! continuation. Because there is a single action, the robust values are
//! computed directly by solving the dual on a grid of thresholds, with the
//! reference law represented by stratified quantiles.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::beta_quantile;
use crate::dual::{sample_nu, solve_lambda, DualObjective, NuSpec, SolverConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CdfProbeParams {
    /// Beta shapes of the reference law.
    pub reference: (f64, f64),
    pub nu: NuSpec,
    pub epsilon: f64,
    pub delta: f64,
    pub discount: f64,
    pub grid: Vec<f64>,
    /// Stratified quantiles representing the reference law.
    pub n_outer: usize,
    pub n_nu: usize,
    /// Value-iteration sweeps over the grid.
    pub sweeps: usize,
    pub solver: SolverConfig,
}

impl Default for CdfProbeParams {
    fn default() -> Self {
        CdfProbeParams {
            reference: (2.0, 2.0),
            nu: NuSpec::uniform(0.0, 1.0),
            epsilon: 0.5,
            delta: 1.0,
            discount: 0.01,
            grid: (0..=20).map(|i| i as f64 / 20.0).collect(),
            n_outer: 200,
            n_nu: 1000,
            sweeps: 3,
            solver: SolverConfig::default(),
        }
    }
}

impl CdfProbeParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() || self.grid.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::config("probe grid must be a non-empty subset of [0, 1]"));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("probe grid must be strictly increasing"));
        }
        if !(self.reference.0 > 0.0 && self.reference.1 > 0.0) {
            return Err(Error::config("reference Beta shapes must be positive"));
        }
        if !(self.epsilon >= 0.0) || !(self.delta > 0.0) {
            return Err(Error::config("probe needs epsilon >= 0 and delta > 0"));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::config("probe discount must lie in [0, 1)"));
        }
        if self.n_outer == 0 || self.n_nu == 0 {
            return Err(Error::config("probe sample counts must be positive"));
        }
        self.nu.validate()?;
        if self.nu.dim() != 1 {
            return Err(Error::config("probe sampling measure must be one-dimensional"));
        }
        Ok(())
    }
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    if x <= grid[0] {
        return values[0];
    }
    let last = grid.len() - 1;
    if x >= grid[last] {
        return values[last];
    }
    let k = grid.partition_point(|g| *g <= x) - 1;
    let t = (x - grid[k]) / (grid[k + 1] - grid[k]);
    values[k] + t * (values[k + 1] - values[k])
}

/// Robust value of `1{x' <= x0} + α V(x')` at each grid threshold.
///
/// A zero radius is read as "no ambiguity" and returns the reference
/// expectation; a Sinkhorn ball of radius zero around a continuous law is
/// otherwise empty.
pub fn worst_case_cdf(params: &CdfProbeParams, seed: u64) -> Result<Vec<(f64, f64)>> {
    params.validate()?;
    let (ra, rb) = params.reference;
    let k = params.n_outer;
    let outer: Vec<f64> = (1..=k).map(|i| beta_quantile(i as f64 / (k + 1) as f64, ra, rb)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu: Vec<f64> = sample_nu(&params.nu, params.n_nu, &mut rng)?.iter().map(|p| p[0]).collect();
    let distances: Vec<f64> = outer.iter().flat_map(|o| nu.iter().map(move |y| (o - y).abs())).collect();
    let weights = vec![1.0 / k as f64; k];

    let grid = &params.grid;
    let mut values = vec![0.0; grid.len()];
    let mut payoffs = vec![0.0; nu.len()];
    let mut cached: Vec<Option<f64>> = vec![None; grid.len()];
    for _ in 0..params.sweeps.max(1) {
        let mut next = vec![0.0; grid.len()];
        for (g, &x0) in grid.iter().enumerate() {
            if params.epsilon == 0.0 {
                next[g] = outer
                    .iter()
                    .map(|&o| f64::from(u8::from(o <= x0)) + params.discount * interpolate(grid, &values, o))
                    .sum::<f64>()
                    / k as f64;
                continue;
            }
            for (f, &y) in payoffs.iter_mut().zip(&nu) {
                *f = f64::from(u8::from(y <= x0)) + params.discount * interpolate(grid, &values, y);
            }
            let obj = DualObjective::new(&payoffs, &distances, weights.clone(), params.epsilon, params.delta)?;
            let eps_bar = obj.epsilon_bar();
            if eps_bar < 0.0 {
                return Err(Error::Infeasible(format!(
                    "effective radius {eps_bar:.4e} < 0 for epsilon {} and delta {}",
                    params.epsilon, params.delta
                )));
            }
            let res = solve_lambda(&obj, cached[g], &params.solver)?;
            cached[g] = Some(res.lambda_raw);
            next[g] = res.value;
        }
        values = next;
    }
    Ok(grid.iter().copied().zip(values).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::beta_cdf;

    #[test]
    fn interpolation() {
        let g = [0.0, 0.5, 1.0];
        let v = [0.0, 1.0, 3.0];
        assert_eq!(interpolate(&g, &v, 0.25), 0.5);
        assert_eq!(interpolate(&g, &v, 0.75), 2.0);
        assert_eq!(interpolate(&g, &v, 1.0), 3.0);
        assert_eq!(interpolate(&g, &v, -1.0), 0.0);
    }

    #[test]
    fn zero_radius_gives_reference_cdf() {
        let p = CdfProbeParams {
            epsilon: 0.0,
            n_nu: 10,
            ..Default::default()
        };
        for (x0, v) in worst_case_cdf(&p, 0).unwrap() {
            assert!((v - beta_cdf(x0, 2.0, 2.0)).abs() < 0.02, "{x0}: {v}");
        }
    }

    #[test]
    fn rejects_empty_ball() {
        let p = CdfProbeParams {
            epsilon: 0.01,
            delta: 1.0,
            n_outer: 20,
            n_nu: 50,
            ..Default::default()
        };
        assert!(matches!(worst_case_cdf(&p, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn curve_is_monotone() {
        let p = CdfProbeParams {
            delta: 0.1,
            n_outer: 50,
            n_nu: 200,
            ..Default::default()
        };
        let c = worst_case_cdf(&p, 0).unwrap();
        for w in c.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-9);
        }
    }
}
