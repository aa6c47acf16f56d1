//! Brute-force robust expectations on small finite supports.
//!
//! Everything here is deliberately slow and direct so it can check the dual
//! engine. The entropic transport cost is computed with log-domain Sinkhorn
//! scaling; the unregularised transport problems are solved by enumerating
//! the vertices of their feasible polytopes.
//!
//! The primal robust value `min_q Σ_j q_j f_j` subject to `W_δ(p̂, q) <= ε`
//! minimises a linear function over a convex set that contains the
//! closest-point coupling centre `c`. It is solved by a central-cut
//! ellipsoid method, which tolerates optima pressed against a face of the
//! simplex where the constraint becomes very steep.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference and prior weights on a finite support, with a payoff per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteRobustInstance {
    pub support: Vec<Vec<f64>>,
    pub reference: Vec<f64>,
    pub prior: Vec<f64>,
    pub payoffs: Vec<f64>,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(skip)]
    cost: Vec<f64>,
}

fn simplex_ok(w: &[f64], strict: bool) -> bool {
    let s: f64 = w.iter().sum();
    (s - 1.0).abs() <= 1e-12 && w.iter().all(|x| if strict { *x > 0.0 } else { *x >= 0.0 })
}

impl DiscreteRobustInstance {
    pub fn new(
        support: Vec<Vec<f64>>,
        reference: Vec<f64>,
        prior: Vec<f64>,
        payoffs: Vec<f64>,
        epsilon: f64,
        delta: f64,
    ) -> Result<Self> {
        let mut inst = DiscreteRobustInstance {
            support,
            reference,
            prior,
            payoffs,
            epsilon,
            delta,
            cost: Vec::new(),
        };
        inst.finish()?;
        Ok(inst)
    }

    fn finish(&mut self) -> Result<()> {
        let n = self.support.len();
        if n == 0 || self.reference.len() != n || self.prior.len() != n || self.payoffs.len() != n {
            return Err(Error::input("support, weights and payoffs must share one non-zero length"));
        }
        if self.support.iter().any(|p| p.len() != self.support[0].len() || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::input("support points must be finite and share one dimension"));
        }
        if !simplex_ok(&self.reference, false) {
            return Err(Error::input("reference weights must be non-negative and sum to 1"));
        }
        if !simplex_ok(&self.prior, true) {
            return Err(Error::input("prior weights must be positive and sum to 1"));
        }
        if self.payoffs.iter().any(|f| !f.is_finite()) || !(self.epsilon >= 0.0) || !(self.delta >= 0.0) {
            return Err(Error::input("payoffs must be finite, epsilon and delta non-negative"));
        }
        self.cost = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| crate::dual::euclidean(&self.support[i], &self.support[j]))
            .collect();
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    #[inline]
    pub fn cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.len() + j]
    }

    pub fn with_delta(&self, delta: f64) -> Self {
        DiscreteRobustInstance { delta, ..self.clone() }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        DiscreteRobustInstance { epsilon, ..self.clone() }
    }

    /// `ε + δ Σ_i p̂_i log Σ_j ν_j exp(-d_ij / δ)`; equals `ε` minus the
    /// smallest entropic transport cost out of `p̂`.
    pub fn effective_radius(&self) -> f64 {
        if self.delta == 0.0 {
            return self.epsilon;
        }
        self.epsilon - self.min_transport_cost()
    }

    fn min_transport_cost(&self) -> f64 {
        let n = self.len();
        let mut acc = 0.0;
        for i in 0..n {
            if self.reference[i] == 0.0 {
                continue;
            }
            let terms: Vec<f64> = (0..n).map(|j| self.prior[j].ln() - self.cost(i, j) / self.delta).collect();
            acc += self.reference[i] * log_sum_exp(&terms);
        }
        -self.delta * acc
    }

    /// Column marginal of the closest entropic coupling out of `p̂`.
    pub fn center(&self) -> Vec<f64> {
        let n = self.len();
        let mut c = vec![0.0; n];
        for i in 0..n {
            if self.reference[i] == 0.0 {
                continue;
            }
            let terms: Vec<f64> = (0..n).map(|j| self.prior[j].ln() - self.cost(i, j) / self.delta).collect();
            let z = log_sum_exp(&terms);
            for j in 0..n {
                c[j] += self.reference[i] * (terms[j] - z).exp();
            }
        }
        c
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut inst: DiscreteRobustInstance =
            serde_json::from_str(text).map_err(|e| Error::input(format!("instance json: {e}")))?;
        inst.finish()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn scaling for the entropic transport cost relative to
/// `p̂ ⊗ ν`. Keeps its column potentials between calls as a warm start.
#[derive(Debug, Clone)]
pub struct SinkhornSolver {
    pub tolerance: f64,
    pub max_iters: usize,
    col: Vec<f64>,
}

/// Entropic transport cost and its derivative in the column marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    pub value: f64,
    /// Column potentials; `∂W/∂q_j` up to a common constant.
    pub potentials: Vec<f64>,
    pub iterations: usize,
}

impl Default for SinkhornSolver {
    fn default() -> Self {
        SinkhornSolver {
            tolerance: 1e-12,
            max_iters: 2_000_000,
            col: Vec::new(),
        }
    }
}

impl SinkhornSolver {
    pub fn solve(&mut self, inst: &DiscreteRobustInstance, q: &[f64]) -> Result<SinkhornResult> {
        let n = inst.len();
        if q.len() != n || q.iter().any(|x| !(*x >= 0.0)) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::input("candidate weights must lie on the support simplex"));
        }
        if !(inst.delta > 0.0) {
            return Err(Error::input("entropic transport cost needs delta > 0"));
        }
        let d = inst.delta;
        let p = &inst.reference;
        let rows: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
        let cols: Vec<usize> = (0..n).filter(|&j| q[j] > 0.0).collect();
        if self.col.len() != n {
            self.col = vec![0.0; n];
        }
        let mut a = vec![0.0; n];
        let mut terms = Vec::with_capacity(n);
        let mut iterations = 0;
        loop {
            // row update makes the row marginal exact
            for &i in &rows {
                terms.clear();
                terms.extend(cols.iter().map(|&j| inst.prior[j].ln() + (self.col[j] - inst.cost(i, j)) / d));
                a[i] = -d * log_sum_exp(&terms);
            }
            let mut err = 0.0_f64;
            for &j in &cols {
                terms.clear();
                terms.extend(rows.iter().map(|&i| p[i].ln() + (a[i] - inst.cost(i, j)) / d));
                let lse = log_sum_exp(&terms);
                let marginal = (inst.prior[j].ln() + self.col[j] / d + lse).exp();
                err = err.max((marginal - q[j]).abs());
                self.col[j] = d * (q[j].ln() - inst.prior[j].ln() - lse);
            }
            iterations += 1;
            if err <= self.tolerance || iterations >= self.max_iters {
                if err > self.tolerance * 1e3 {
                    return Err(Error::numerical(format!(
                        "Sinkhorn scaling stalled at marginal error {err:.3e} after {iterations} iterations"
                    )));
                }
                break;
            }
        }
        // refresh rows against the final columns
        for &i in &rows {
            terms.clear();
            terms.extend(cols.iter().map(|&j| inst.prior[j].ln() + (self.col[j] - inst.cost(i, j)) / d));
            a[i] = -d * log_sum_exp(&terms);
        }
        let value = rows.iter().map(|&i| p[i] * a[i]).sum::<f64>() + cols.iter().map(|&j| q[j] * self.col[j]).sum::<f64>();
        let mut potentials = vec![f64::NEG_INFINITY; n];
        for &j in &cols {
            potentials[j] = self.col[j];
        }
        Ok(SinkhornResult {
            value,
            potentials,
            iterations,
        })
    }
}

/// Transport cost between the reference weights and `q`: entropic when
/// `δ > 0`, the exact Wasserstein LP when `δ = 0`.
pub fn sinkhorn_distance_discrete(inst: &DiscreteRobustInstance, q: &[f64]) -> Result<f64> {
    if inst.delta == 0.0 {
        if q.len() != inst.len() || !simplex_ok(q, false) {
            return Err(Error::input("candidate weights must lie on the support simplex"));
        }
        return Ok(wasserstein_lp(&inst.reference, q, &inst.cost));
    }
    Ok(SinkhornSolver::default().solve(inst, q)?.value)
}

/// Optimal transport cost by enumerating basic feasible solutions. Only
/// meant for a handful of points.
pub fn wasserstein_lp(p: &[f64], q: &[f64], cost: &[f64]) -> f64 {
    let n = p.len();
    let cells = n * n;
    let basis = 2 * n - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(basis);
    enumerate_subsets(cells, basis, 0, &mut chosen, &mut |set: &[usize]| {
        if let Some(flow) = tree_flow(set, p, q, n) {
            let c: f64 = set.iter().zip(&flow).map(|(&cell, f)| f * cost[cell]).sum();
            best = best.min(c);
        }
    });
    best
}

fn enumerate_subsets(n: usize, k: usize, start: usize, chosen: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if chosen.len() == k {
        visit(chosen);
        return;
    }
    for c in start..n {
        if n - c < k - chosen.len() {
            break;
        }
        chosen.push(c);
        enumerate_subsets(n, k, c + 1, chosen, visit);
        chosen.pop();
    }
}

/// Flows on a candidate basis by peeling rows and columns with one open
/// cell. `None` when the cells contain a cycle or a flow is negative.
fn tree_flow(set: &[usize], p: &[f64], q: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut row_left = p.to_vec();
    let mut col_left = q.to_vec();
    let mut flow = vec![f64::NAN; set.len()];
    let mut open = set.len();
    while open > 0 {
        let mut progressed = false;
        for line in 0..2 * n {
            let members: Vec<usize> = (0..set.len())
                .filter(|&k| flow[k].is_nan() && if line < n { set[k] / n == line } else { set[k] % n == line - n })
                .collect();
            if members.len() != 1 {
                continue;
            }
            let k = members[0];
            let (i, j) = (set[k] / n, set[k] % n);
            let f = if line < n { row_left[i] } else { col_left[j] };
            flow[k] = f;
            row_left[i] -= f;
            col_left[j] -= f;
            open -= 1;
            progressed = true;
        }
        if !progressed {
            return None;
        }
    }
    let tol = 1e-12;
    if flow.iter().any(|f| *f < -tol) || row_left.iter().chain(&col_left).any(|r| r.abs() > tol) {
        return None;
    }
    Some(flow)
}

/// Unregularised robust value `min Σ π_ij f_j` over couplings with row
/// marginal `p̂` and transport budget `Σ π_ij d_ij <= ε`, by vertex
/// enumeration: every vertex sends each row to one column, except possibly
/// one row split between two columns with the budget tight.
pub fn wasserstein_robust_lp(inst: &DiscreteRobustInstance) -> f64 {
    let n = inst.len();
    let p = &inst.reference;
    let f = &inst.payoffs;
    let rows: Vec<usize> = (0..n).filter(|&i| p[i] > 0.0).collect();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; rows.len()];
    loop {
        let spend: f64 = rows.iter().zip(&assign).map(|(&i, &j)| p[i] * inst.cost(i, j)).sum();
        let value: f64 = rows.iter().zip(&assign).map(|(&i, &j)| p[i] * f[j]).sum();
        if spend <= inst.epsilon + 1e-15 {
            best = best.min(value);
        }
        // split one row between its assigned column and another one
        for (r, &i) in rows.iter().enumerate() {
            let j1 = assign[r];
            let rest = spend - p[i] * inst.cost(i, j1);
            for j2 in 0..n {
                let (c1, c2) = (inst.cost(i, j1), inst.cost(i, j2));
                if j2 == j1 || c1 == c2 {
                    continue;
                }
                // mass s on j2, p_i - s on j1, with the budget tight
                let s = (inst.epsilon - rest - p[i] * c1) / (c2 - c1);
                if s > 0.0 && s < p[i] {
                    let v = value - s * f[j1] + s * f[j2];
                    best = best.min(v);
                }
            }
        }
        // next assignment in lexicographic order
        let mut k = 0;
        while k < assign.len() {
            assign[k] += 1;
            if assign[k] < n {
                break;
            }
            assign[k] = 0;
            k += 1;
        }
        if k == assign.len() {
            break;
        }
    }
    best
}

/// Knobs of the primal solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimalOptions {
    pub max_iters: usize,
    /// Stop once the ellipsoid is this thin along the objective.
    pub objective_width: f64,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        PrimalOptions {
            max_iters: 20_000,
            objective_width: 1e-9,
        }
    }
}

/// `min_q E_q[f]` over the ambiguity ball.
pub fn primal_robust_value(inst: &DiscreteRobustInstance) -> Result<f64> {
    primal_robust_value_with(inst, &PrimalOptions::default())
}

/// Two points are handled by root finding on the segment; larger supports
/// by a central-cut ellipsoid method in tangent coordinates `q = c + B y`,
/// cutting on `q_j >= 0`, on the gradient of the transport constraint, and
/// on the objective at feasible points.
pub fn primal_robust_value_with(inst: &DiscreteRobustInstance, opts: &PrimalOptions) -> Result<f64> {
    if inst.delta == 0.0 {
        return Ok(wasserstein_robust_lp(inst));
    }
    let eps_bar = inst.effective_radius();
    if eps_bar < 0.0 {
        return Err(Error::Infeasible(format!("effective radius {eps_bar:.6e} is negative")));
    }
    let n = inst.len();
    let center = inst.center();
    let objective = |q: &[f64]| q.iter().zip(&inst.payoffs).map(|(a, b)| a * b).sum::<f64>();
    let at_center = objective(&center);
    if n == 1 || eps_bar == 0.0 {
        return Ok(at_center);
    }
    let basis = tangent_basis(n);
    let mut solver = SinkhornSolver::default();
    if n == 2 {
        let u = &basis[0];
        let back: Vec<f64> = u.iter().map(|x| -x).collect();
        let a = segment_end(inst, &center, u, &mut solver)?;
        let b = segment_end(inst, &center, &back, &mut solver)?;
        return Ok(objective(&a).min(objective(&b)).min(at_center));
    }

    let m = n - 1;
    let mut y = vec![0.0; m];
    // ball of radius sqrt(2) covers the simplex
    let mut shape = vec![0.0; m * m];
    for k in 0..m {
        shape[k * m + k] = 2.0;
    }
    let to_simplex = |y: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|j| center[j] + basis.iter().zip(y).map(|(b, yk)| b[j] * yk).sum::<f64>())
            .collect()
    };
    let to_tangent = |g: &[f64]| -> Vec<f64> { basis.iter().map(|b| b.iter().zip(g).map(|(x, y)| x * y).sum()).collect() };
    let f_tangent = to_tangent(&inst.payoffs);
    if f_tangent.iter().all(|x| x.abs() < 1e-15) {
        return Ok(at_center);
    }
    let mut best = at_center;
    for _ in 0..opts.max_iters {
        let q = to_simplex(&y);
        let cut = if let Some(j) = (0..n).find(|&j| !(q[j] > 0.0)) {
            let mut e = vec![0.0; n];
            e[j] = -1.0;
            to_tangent(&e)
        } else {
            let mut qn = q.clone();
            let s: f64 = qn.iter().sum();
            qn.iter_mut().for_each(|x| *x /= s);
            let r = solver.solve(inst, &qn)?;
            if r.value > inst.epsilon {
                to_tangent(&r.potentials)
            } else {
                best = best.min(objective(&qn));
                f_tangent.clone()
            }
        };
        let pg: Vec<f64> = (0..m).map(|r| (0..m).map(|c| shape[r * m + c] * cut[c]).sum()).collect();
        let gpg: f64 = cut.iter().zip(&pg).map(|(a, b)| a * b).sum();
        if !(gpg > 0.0) {
            break;
        }
        let norm = gpg.sqrt();
        let mf = m as f64;
        for k in 0..m {
            y[k] -= pg[k] / (norm * (mf + 1.0));
        }
        let scale = mf * mf / (mf * mf - 1.0);
        let shrink = 2.0 / (mf + 1.0);
        for r in 0..m {
            for c in 0..m {
                shape[r * m + c] = scale * (shape[r * m + c] - shrink * pg[r] * pg[c] / gpg);
            }
        }
        let fpf: f64 = (0..m)
            .map(|r| f_tangent[r] * (0..m).map(|c| shape[r * m + c] * f_tangent[c]).sum::<f64>())
            .sum();
        if fpf.sqrt() < opts.objective_width {
            break;
        }
    }
    Ok(best)
}

/// Orthonormal basis of `{u : Σ u_j = 0}` (Helmert vectors).
fn tangent_basis(n: usize) -> Vec<Vec<f64>> {
    (1..n)
        .map(|k| {
            let norm = ((k * (k + 1)) as f64).sqrt();
            (0..n)
                .map(|j| match j.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0 / norm,
                    std::cmp::Ordering::Equal => -(k as f64) / norm,
                    std::cmp::Ordering::Greater => 0.0,
                })
                .collect()
        })
        .collect()
}

/// Farthest feasible point from the centre along `u`.
fn segment_end(inst: &DiscreteRobustInstance, center: &[f64], u: &[f64], solver: &mut SinkhornSolver) -> Result<Vec<f64>> {
    let eps = inst.epsilon;
    let point = |t: f64| -> Vec<f64> {
        let mut q: Vec<f64> = center.iter().zip(u).map(|(c, d)| (c + t * d).max(0.0)).collect();
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= s);
        q
    };
    let t_edge = center
        .iter()
        .zip(u)
        .filter(|(_, d)| **d < -1e-15)
        .map(|(c, d)| c / -d)
        .fold(f64::INFINITY, f64::min);
    let edge = point(t_edge);
    if solver.solve(inst, &edge)?.value <= eps {
        return Ok(edge);
    }
    // W is convex along the segment and below ε at the centre
    let (mut lo, mut hi) = (0.0, t_edge);
    for _ in 0..200 {
        let t = 0.5 * (lo + hi);
        if t <= lo || t >= hi {
            break;
        }
        if solver.solve(inst, &point(t))?.value > eps {
            hi = t;
        } else {
            lo = t;
        }
    }
    Ok(point(lo))
}

/// Exact dual objective on the finite instance.
pub fn dual_objective_discrete(inst: &DiscreteRobustInstance, lambda: f64) -> f64 {
    let n = inst.len();
    let f = &inst.payoffs;
    let mut acc = 0.0;
    for i in 0..n {
        let p = inst.reference[i];
        if p == 0.0 {
            continue;
        }
        if inst.delta == 0.0 {
            acc += p * (0..n).map(|j| f[j] + lambda * inst.cost(i, j)).fold(f64::INFINITY, f64::min);
        } else {
            let ld = lambda * inst.delta;
            let terms: Vec<f64> = (0..n).map(|j| inst.prior[j].ln() - (f[j] + lambda * inst.cost(i, j)) / ld).collect();
            acc += p * -ld * log_sum_exp(&terms);
        }
    }
    -lambda * inst.epsilon + acc
}

/// Dual robust value by golden-section search over `log λ ∈ [log 1e-8, log 1e4]`.
pub fn dual_robust_value_discrete(inst: &DiscreteRobustInstance) -> Result<f64> {
    let eps_bar = inst.effective_radius();
    if eps_bar < 0.0 {
        return Err(Error::Infeasible(format!("effective radius {eps_bar:.6e} is negative")));
    }
    // the supremum also covers the λ -> 0+ limit, the smallest payoff
    let floor = inst.payoffs.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(golden_max_log_lambda(inst).max(floor))
}

fn golden_max_log_lambda(inst: &DiscreteRobustInstance) -> f64 {
    let h = |t: f64| dual_objective_discrete(inst, t.exp());
    let (mut a, mut b) = (1e-8f64.ln(), 1e4f64.ln());
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut hc, mut hd) = (h(c), h(d));
    while b - a > 1e-10 {
        if hc >= hd {
            b = d;
            d = c;
            hd = hc;
            c = b - r * (b - a);
            hc = h(c);
        } else {
            a = c;
            c = d;
            hc = hd;
            d = a + r * (b - a);
            hd = h(d);
        }
    }
    h(0.5 * (a + b)).max(hc).max(hd)
}

/// Random instance with `2..=4` points and a positive effective radius.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, delta_range: (f64, f64)) -> DiscreteRobustInstance {
    let n = rng.random_range(2..=4);
    let dim = rng.random_range(1..=2);
    let support: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    let normalise = |v: Vec<f64>| {
        let s: f64 = v.iter().sum();
        let mut w: Vec<f64> = v.iter().map(|x| x / s).collect();
        // absorb rounding so the weights sum to exactly one
        let fix = 1.0 - w.iter().sum::<f64>();
        w[0] += fix;
        w
    };
    let reference = normalise((0..n).map(|_| rng.random_range(0.05..1.0)).collect());
    let prior = normalise((0..n).map(|_| rng.random_range(0.2..1.0)).collect());
    let payoffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta = rng.random_range(delta_range.0..=delta_range.1);
    let mut inst = DiscreteRobustInstance::new(support, reference, prior, payoffs, 0.0, delta).expect("valid instance");
    let floor = -inst.effective_radius();
    inst.epsilon = floor + rng.random_range(0.01..0.4);
    inst
}

/// Outcome of one oracle property suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub tolerance: f64,
    pub instances: usize,
    pub worst_error: f64,
    pub passed: bool,
    /// First instance that violated the tolerance.
    pub failing_instance: Option<DiscreteRobustInstance>,
}

/// Which dual the suites check against the primal; the flipped variant is a
/// deliberately broken dual used to confirm the suites can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualVariant {
    #[default]
    Exact,
    FlippedSign,
}

fn dual_variant_value(inst: &DiscreteRobustInstance, variant: DualVariant) -> Result<f64> {
    match variant {
        DualVariant::Exact => dual_robust_value_discrete(inst),
        // −λε becomes +λε
        DualVariant::FlippedSign => Ok(golden_max_log_lambda(&inst.with_epsilon(-inst.epsilon))),
    }
}

struct Outcome {
    error: f64,
    ok: bool,
    instance: DiscreteRobustInstance,
}

fn report(name: &str, tolerance: f64, outcomes: Vec<Outcome>) -> CheckReport {
    let instances = outcomes.len();
    let worst_error = outcomes.iter().map(|o| o.error).fold(0.0, f64::max);
    let failing_instance = outcomes
        .into_iter()
        .find(|o| !(o.ok && o.error <= tolerance))
        .map(|o| o.instance);
    CheckReport {
        name: name.to_string(),
        tolerance,
        instances,
        worst_error,
        passed: failing_instance.is_none(),
        failing_instance,
    }
}

/// `|primal - dual|` over random instances.
pub fn strong_duality_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, variant: DualVariant) -> Result<CheckReport> {
    let mut outcomes = Vec::with_capacity(count);
    for _ in 0..count {
        let instance = random_instance(rng, (0.1, 1.0));
        let primal = primal_robust_value(&instance)?;
        let dual = dual_variant_value(&instance, variant)?;
        outcomes.push(Outcome {
            error: (primal - dual).abs(),
            ok: true,
            instance,
        });
    }
    Ok(report("strong_duality", 1e-3, outcomes))
}

/// Value is non-increasing in ε and non-decreasing in δ; the error is the
/// largest violation of either ordering.
pub fn nesting_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, variant: DualVariant) -> Result<CheckReport> {
    let mut outcomes = Vec::with_capacity(count);
    for _ in 0..count {
        let instance = random_instance(rng, (0.05, 0.5));
        let v = dual_variant_value(&instance, variant)?;
        let bigger_ball = dual_variant_value(&instance.with_epsilon(instance.epsilon * 1.5), variant)?;
        // halving δ enlarges the ball, so the radius stays feasible
        let smaller_delta = dual_variant_value(&instance.with_delta(instance.delta * 0.5), variant)?;
        let error = (bigger_ball - v).max(smaller_delta - v).max(0.0);
        outcomes.push(Outcome { error, ok: true, instance });
    }
    Ok(report("nesting", 1e-9, outcomes))
}

/// Values at δ = 1e-1, 1e-2, 1e-3 must decrease toward the unregularised LP
/// value and end within the tolerance of it. The error is the final gap.
pub fn delta_limit_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, variant: DualVariant) -> Result<CheckReport> {
    let mut outcomes = Vec::with_capacity(count);
    for _ in 0..count {
        let instance = random_instance(rng, (0.1, 0.1));
        let lp = wasserstein_robust_lp(&instance);
        let mut prev = f64::INFINITY;
        let mut ok = true;
        for &d in &[1e-1, 1e-2, 1e-3] {
            let v = dual_variant_value(&instance.with_delta(d), variant)?;
            ok &= v <= prev + 1e-9 && v >= lp - 1e-9;
            prev = v;
        }
        outcomes.push(Outcome {
            error: (prev - lp).abs(),
            ok,
            instance,
        });
    }
    Ok(report("delta_limit", 5e-3, outcomes))
}
