//! Optimal-transport solvers between two sets of neurons with uniform
//! marginals.
//!
//! Two solvers are provided:
//!
//! * [`solve_exact`] reduces the problem to linear assignment (uniform equal
//!   marginals put every optimum on a scaled permutation) and returns the
//!   lexicographically smallest optimal permutation, scaled by `1/m`.
//! * [`solve_sinkhorn`] runs entropic OT in the log domain with ε-scaling and
//!   finishes with a rounding step onto the transport polytope, so the
//!   returned plan is always feasible.
//!
//! [`brute_force_plan`] enumerates permutations and exists to check the exact
//! solver on small instances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Exact,
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Coupling matrix, rows indexed by source points and columns by target
    /// points.
    pub t: Matrix,
    /// Row marginals.
    pub alpha: Vec<f64>,
    /// Column marginals.
    pub beta: Vec<f64>,
    /// `⟨C, T⟩` for the cost the plan was solved on.
    pub cost: f64,
    pub mode: PlanMode,
    /// Always true for exact plans.
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    /// Column sums of `t`. These are the marginals the plan actually
    /// realizes, as opposed to the targets in `beta`.
    pub fn realized_beta(&self) -> Vec<f64> {
        self.t.col_sums()
    }

    /// L1 residuals of (row, column) marginals.
    pub fn marginal_residuals(&self) -> (f64, f64) {
        let l1 = |got: Vec<f64>, want: &[f64]| -> f64 { got.iter().zip(want).map(|(a, b)| (a - b).abs()).sum() };
        (l1(self.t.row_sums(), &self.alpha), l1(self.t.col_sums(), &self.beta))
    }

    /// For vertex plans, the column assigned to each row.
    pub fn assignment(&self) -> Option<Vec<usize>> {
        let (rows, cols) = self.t.shape();
        if rows != cols {
            return None;
        }
        (0..rows)
            .map(|i| {
                let row = self.t.row(i);
                let nz: Vec<usize> = (0..cols).filter(|&j| row[j] != 0.0).collect();
                (nz.len() == 1).then(|| nz[0])
            })
            .collect()
    }
}

/// Frobenius inner product `⟨C, T⟩`.
pub fn plan_cost(plan: &TransportPlan, cost: &Matrix) -> Result<f64> {
    frobenius_inner(&plan.t, cost)
}

fn frobenius_inner(t: &Matrix, cost: &Matrix) -> Result<f64> {
    if t.shape() != cost.shape() {
        return Err(Error::Shape(format!("plan {:?} vs cost {:?}", t.shape(), cost.shape())));
    }
    Ok(t.data().iter().zip(cost.data()).map(|(a, b)| a * b).sum())
}

fn check_cost(cost: &Matrix) -> Result<()> {
    if cost.rows() == 0 || cost.cols() == 0 {
        return Err(Error::Shape("empty cost matrix".into()));
    }
    if let Some(k) = cost.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidCost(format!(
            "entry ({}, {}) is {}",
            k / cost.cols(),
            k % cost.cols(),
            cost.data()[k]
        )));
    }
    Ok(())
}

fn check_square(cost: &Matrix) -> Result<usize> {
    check_cost(cost)?;
    if cost.rows() != cost.cols() {
        return Err(Error::Shape(format!(
            "exact solver needs a square cost, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    Ok(cost.rows())
}

fn vertex_plan(perm: &[usize], cost: &Matrix, iterations: usize) -> TransportPlan {
    let m = perm.len();
    let w = 1.0 / m as f64;
    let mut t = Matrix::zeros(m, m);
    for (i, &j) in perm.iter().enumerate() {
        t.set(i, j, w);
    }
    let c = frobenius_inner(&t, cost).expect("square");
    TransportPlan {
        t,
        alpha: vec![w; m],
        beta: vec![w; m],
        cost: c,
        mode: PlanMode::Exact,
        converged: true,
        iterations,
    }
}

/// Exact OT with uniform marginals on a square cost.
pub fn solve_exact(cost: &Matrix) -> Result<TransportPlan> {
    check_square(cost)?;
    let perm = lex_min_assignment(cost);
    Ok(vertex_plan(&perm, cost, 0))
}

/// Minimum-cost assignment with ties broken towards the lexicographically
/// smallest permutation.
pub fn lex_min_assignment(cost: &Matrix) -> Vec<usize> {
    let m = cost.rows();
    let (mut row_to_col, u, v) = hungarian(cost);

    let scale = cost.data().iter().fold(1.0_f64, |a, &x| a.max(x.abs()));
    let tol = 1e-11 * scale * m as f64;
    // Any optimal assignment uses only edges that are tight under an optimal
    // dual, so the search is confined to that subgraph.
    let tight: Vec<Vec<usize>> = (0..m)
        .map(|i| (0..m).filter(|&j| cost.get(i, j) - u[i] - v[j] <= tol).collect())
        .collect();

    let mut col_to_row = vec![usize::MAX; m];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }

    for i in 0..m {
        for &j in &tight[i] {
            if j >= row_to_col[i] {
                break;
            }
            let owner = col_to_row[j];
            if owner < i {
                continue;
            }
            if let Some(path) = alternating_path(owner, row_to_col[i], i, &tight, &col_to_row) {
                // path: rows to reassign, each taking the listed column.
                row_to_col[i] = j;
                col_to_row[j] = i;
                for (r, c) in path {
                    row_to_col[r] = c;
                    col_to_row[c] = r;
                }
                break;
            }
        }
    }
    row_to_col
}

/// Breadth-first search for a way to re-seat `start` (and whoever it
/// displaces) using tight edges among rows after `fixed`, ending on column
/// `target`. Returns the `(row, new column)` reassignments.
fn alternating_path(
    start: usize,
    target: usize,
    fixed: usize,
    tight: &[Vec<usize>],
    col_to_row: &[usize],
) -> Option<Vec<(usize, usize)>> {
    let m = col_to_row.len();
    let mut prev_col = vec![usize::MAX; m]; // row -> column through which we reached it
    let mut seen_row = vec![false; m];
    let mut queue = std::collections::VecDeque::new();
    seen_row[start] = true;
    queue.push_back(start);
    // parent of column c (the row that would take c)
    let mut taker = vec![usize::MAX; m];
    while let Some(r) = queue.pop_front() {
        for &c in &tight[r] {
            if taker[c] != usize::MAX {
                continue;
            }
            let owner = col_to_row[c];
            if c != target && (owner <= fixed || owner == r) {
                continue;
            }
            taker[c] = r;
            if c == target {
                let mut path = Vec::new();
                let mut col = c;
                loop {
                    let row = taker[col];
                    path.push((row, col));
                    if row == start {
                        return Some(path);
                    }
                    col = prev_col[row];
                }
            }
            if !seen_row[owner] {
                seen_row[owner] = true;
                prev_col[owner] = c;
                queue.push_back(owner);
            }
        }
    }
    None
}

/// Shortest-augmenting-path Hungarian algorithm on a dense square cost.
/// Returns the assignment and optimal duals `(u, v)` with
/// `cost[i][j] - u[i] - v[j] >= 0`.
fn hungarian(cost: &Matrix) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.rows();
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Largest instance [`brute_force_plan`] accepts.
pub const BRUTE_FORCE_MAX: usize = 7;

/// Exhaustive search over all permutations in lexicographic order; keeps the
/// first strict minimum.
pub fn brute_force_plan(cost: &Matrix) -> Result<TransportPlan> {
    let m = check_square(cost)?;
    if m > BRUTE_FORCE_MAX {
        return Err(Error::SizeLimit(format!(
            "brute force limited to m <= {BRUTE_FORCE_MAX}, got {m}"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = perm.clone();
    let mut best_cost = assignment_cost(cost, &perm);
    let mut count = 1;
    while next_permutation(&mut perm) {
        count += 1;
        let c = assignment_cost(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best.copy_from_slice(&perm);
        }
    }
    Ok(vertex_plan(&best, cost, count))
}

fn assignment_cost(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    /// Entropic regularization. `None` picks `0.05 · mean(cost)`.
    pub epsilon: Option<f64>,
    pub max_iters: usize,
    /// L1 tolerance on the row marginal after each column update.
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: None,
            max_iters: 10_000,
            tol: 1e-9,
        }
    }
}

impl SinkhornParams {
    pub fn with_epsilon(epsilon: f64) -> Self {
        SinkhornParams {
            epsilon: Some(epsilon),
            ..Default::default()
        }
    }

    pub fn resolve_epsilon(&self, cost: &Matrix) -> f64 {
        self.epsilon.unwrap_or_else(|| default_epsilon(cost))
    }
}

pub fn default_epsilon(cost: &Matrix) -> f64 {
    let e = 0.05 * cost.mean();
    if e > 0.0 {
        e
    } else {
        1.0
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Entropic OT with uniform marginals.
///
/// Potentials are updated in the log domain. The regularization is annealed
/// geometrically from `max(cost)` down to the target ε, warm-starting each
/// stage, which leaves the fixed point unchanged but cuts the iteration count
/// for small ε. The final plan is rounded onto the transport polytope so its
/// marginals hold to rounding error even when `converged` is false.
pub fn solve_sinkhorn(cost: &Matrix, params: &SinkhornParams) -> Result<TransportPlan> {
    check_cost(cost)?;
    let eps = params.resolve_epsilon(cost);
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidCost(format!("epsilon must be positive, got {eps}")));
    }
    if !(params.tol > 0.0) {
        return Err(Error::InvalidCost(format!("tol must be positive, got {}", params.tol)));
    }
    let (ma, mb) = cost.shape();
    let alpha = vec![1.0 / ma as f64; ma];
    let beta = vec![1.0 / mb as f64; mb];
    let log_a = -(ma as f64).ln();
    let log_b = -(mb as f64).ln();

    let mut f = vec![0.0; ma];
    let mut g = vec![0.0; mb];

    let cmax = cost.data().iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
    let mut stages = Vec::new();
    let mut e = cmax.max(eps);
    while e > eps {
        stages.push(e);
        e *= 0.5;
    }
    stages.push(eps);

    let mut iterations = 0;
    let mut converged = false;
    let last = stages.len() - 1;
    for (k, &e) in stages.iter().enumerate() {
        let final_stage = k == last;
        let stage_tol = if final_stage { params.tol } else { params.tol.max(1e-3) };
        let mut stage_iters = 0;
        while iterations < params.max_iters {
            iterations += 1;
            stage_iters += 1;
            let polished = final_stage && stage_iters > NEWTON_AFTER && newton_step(cost, e, &alpha, &mut f, &g);
            if !polished {
                row_update(cost, e, log_a, &g, &mut f);
            }
            col_update(cost, e, log_b, &f, &mut g);
            if row_residual(cost, e, &alpha, &f, &g) <= stage_tol {
                converged = final_stage;
                break;
            }
        }
        if iterations >= params.max_iters && !converged {
            break;
        }
    }

    let mut t = Matrix::from_fn(ma, mb, |i, j| ((f[i] + g[j] - cost.get(i, j)) / eps).exp());
    round_to_polytope(&mut t, &alpha, &beta);
    let c = frobenius_inner(&t, cost)?;
    Ok(TransportPlan {
        t,
        alpha,
        beta,
        cost: c,
        mode: PlanMode::Sinkhorn,
        converged,
        iterations,
    })
}

/// Plain Sinkhorn sweeps before switching to Newton steps in the final
/// stage; enough for well-separated problems to finish on their own.
const NEWTON_AFTER: usize = 200;

fn row_update(cost: &Matrix, e: f64, log_a: f64, g: &[f64], f: &mut [f64]) {
    for (i, fi) in f.iter_mut().enumerate() {
        let row = cost.row(i);
        *fi = e * log_a - e * log_sum_exp(g.iter().zip(row).map(|(gj, c)| (gj - c) / e));
    }
}

fn col_update(cost: &Matrix, e: f64, log_b: f64, f: &[f64], g: &mut [f64]) {
    for (j, gj) in g.iter_mut().enumerate() {
        *gj = e * log_b - e * log_sum_exp(f.iter().enumerate().map(|(i, fi)| (fi - cost.get(i, j)) / e));
    }
}

fn kernel(cost: &Matrix, e: f64, f: &[f64], g: &[f64]) -> Matrix {
    Matrix::from_fn(f.len(), g.len(), |i, j| ((f[i] + g[j] - cost.get(i, j)) / e).exp())
}

fn row_residual(cost: &Matrix, e: f64, alpha: &[f64], f: &[f64], g: &[f64]) -> f64 {
    kernel(cost, e, f, g)
        .row_sums()
        .iter()
        .zip(alpha)
        .map(|(s, a)| (s - a).abs())
        .sum()
}

/// Dual objective with `g` at its exact column optimum (so `ΣT = 1`).
fn dual_value(cost: &Matrix, e: f64, log_b: f64, alpha: &[f64], f: &[f64]) -> (f64, Vec<f64>) {
    let mut g = vec![0.0; cost.cols()];
    col_update(cost, e, log_b, f, &mut g);
    let b = log_b.exp();
    let v = crate::linalg::dot(alpha, f) + b * g.iter().sum::<f64>();
    (v, g)
}

/// One damped Newton step on the row potentials of the semi-dual, with the
/// column potentials eliminated. With `g` column-optimal the Hessian is
/// `−(diag(r) − T diag(1/c) Tᵀ)/ε`, singular along the all-ones vector; the
/// step is taken in the complement of that direction.
fn newton_step(cost: &Matrix, e: f64, alpha: &[f64], f: &mut [f64], g: &[f64]) -> bool {
    let (ma, mb) = cost.shape();
    let log_b = -(mb as f64).ln();
    let t = kernel(cost, e, f, g);
    let r = t.row_sums();
    let c = t.col_sums();
    let h = Matrix::from_fn(ma, ma, |i, k| {
        let mut s = 0.0;
        for j in 0..mb {
            s += t.get(i, j) * t.get(k, j) / c[j];
        }
        let diag = if i == k { r[i] } else { 0.0 };
        // the 1/m term fixes the null direction
        diag - s + 1.0 / ma as f64
    });
    let rhs: Vec<f64> = alpha.iter().zip(&r).map(|(a, ri)| e * (a - ri)).collect();
    // Levenberg damping: raised until the factorization goes through.
    let rmax = r.iter().fold(0.0_f64, |a, &x| a.max(x));
    let mut lambda = 1e-12 * rmax;
    let step = loop {
        let mut damped = h.clone();
        for i in 0..ma {
            damped.set(i, i, h.get(i, i) + lambda);
        }
        if let Some(step) = cholesky_solve(&mut damped, &rhs) {
            break step;
        }
        lambda *= 100.0;
        if lambda > rmax {
            return false;
        }
    };
    let (base, _) = dual_value(cost, e, log_b, alpha, f);
    let mut scale = 1.0;
    for _ in 0..30 {
        let trial: Vec<f64> = f.iter().zip(&step).map(|(x, d)| x + scale * d).collect();
        let (v, _) = dual_value(cost, e, log_b, alpha, &trial);
        if v >= base {
            f.copy_from_slice(&trial);
            return true;
        }
        scale *= 0.5;
    }
    false
}

/// Solves `h x = rhs` for symmetric positive definite `h` (overwritten).
fn cholesky_solve(h: &mut Matrix, rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    for j in 0..n {
        let mut d = h.get(j, j);
        for k in 0..j {
            d -= h.get(j, k) * h.get(j, k);
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        h.set(j, j, d);
        for i in j + 1..n {
            let mut s = h.get(i, j);
            for k in 0..j {
                s -= h.get(i, k) * h.get(j, k);
            }
            h.set(i, j, s / d);
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= h.get(i, k) * y[k];
        }
        y[i] /= h.get(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= h.get(k, i) * y[k];
        }
        y[i] /= h.get(i, i);
    }
    Some(y)
}

/// Projects a nonnegative matrix onto `{T ≥ 0 : T1 = a, Tᵀ1 = b}` by row
/// and column down-scaling followed by a rank-one correction.
fn round_to_polytope(t: &mut Matrix, a: &[f64], b: &[f64]) {
    let (ma, mb) = t.shape();
    let rs = t.row_sums();
    for i in 0..ma {
        if rs[i] > a[i] {
            let x = a[i] / rs[i];
            t.row_mut(i).iter_mut().for_each(|v| *v *= x);
        }
    }
    let cs = t.col_sums();
    for j in 0..mb {
        if cs[j] > b[j] {
            let y = b[j] / cs[j];
            for i in 0..ma {
                let v = t.get(i, j) * y;
                t.set(i, j, v);
            }
        }
    }
    let er: Vec<f64> = t.row_sums().iter().zip(a).map(|(s, ai)| (ai - s).max(0.0)).collect();
    let ec: Vec<f64> = t.col_sums().iter().zip(b).map(|(s, bj)| (bj - s).max(0.0)).collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..ma {
            for j in 0..mb {
                let v = t.get(i, j) + er[i] * ec[j] / total;
                t.set(i, j, v);
            }
        }
    }
}
