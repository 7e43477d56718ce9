//! Entropic optimal transport in the log domain, plus an exact enumerating
//! solver for tiny instances.
//!
//! The entropic solver alternates the dual updates
//!
//! ```text
//! f_i = ε ln a_i − ε LSE_j((g_j − C_ij) / ε)
//! g_j = ε ln b_j − ε LSE_i((f_i − C_ij) / ε)
//! ```
//!
//! and reads the plan off as `T_ij = exp((f_i + g_j − C_ij) / ε)`. Working
//! with the potentials instead of the Gibbs kernel `exp(−C/ε)` keeps every
//! intermediate finite for ε as small as `1e-3` on costs in `[0, 2]`.

use crate::error::{Error, Result};
use crate::primitives::{Matrix, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop once the largest marginal error drops to this value.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.1,
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("tolerance must be > 0, got {}", self.tolerance)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtSolution {
    pub plan: Matrix,
    /// `⟨plan, cost⟩`, without the entropy term.
    pub transport_cost: f64,
    pub iterations: usize,
    /// Largest absolute row or column marginal error of `plan`.
    pub marginal_violation: f64,
}

impl OtSolution {
    fn from_plan(plan: Matrix, a: &ProbVector, b: &ProbVector, cost: &Matrix, iterations: usize) -> Result<Self> {
        let transport_cost = plan.frobenius_dot(cost)?;
        let marginal_violation = marginal_violation(&plan, a, b);
        Ok(OtSolution {
            plan,
            transport_cost,
            iterations,
            marginal_violation,
        })
    }
}

/// Largest absolute deviation of the plan's row and column sums from `a` and `b`.
pub fn marginal_violation(plan: &Matrix, a: &ProbVector, b: &ProbVector) -> f64 {
    let rows = plan
        .row_sums()
        .into_iter()
        .zip(a.as_slice())
        .map(|(r, a)| (r - a).abs());
    let cols = plan
        .col_sums()
        .into_iter()
        .zip(b.as_slice())
        .map(|(c, b)| (c - b).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

fn check_problem(a: &ProbVector, b: &ProbVector, cost: &Matrix) -> Result<()> {
    if cost.rows() != a.len() {
        return Err(Error::dim(a.len(), cost.rows(), "cost rows vs source marginal"));
    }
    if cost.cols() != b.len() {
        return Err(Error::dim(b.len(), cost.cols(), "cost columns vs target marginal"));
    }
    if cost.as_slice().iter().any(|c| *c < 0.0) {
        return Err(Error::Numeric("transport cost has a negative entry".into()));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic OT plan between `a` and `b` under `cost`.
///
/// Rows and columns whose marginal mass is zero are excluded from the
/// updates and receive zero plan entries.
pub fn solve_sinkhorn(a: &ProbVector, b: &ProbVector, cost: &Matrix, config: &SinkhornConfig) -> Result<OtSolution> {
    config.validate()?;
    check_problem(a, b, cost)?;
    let eps = config.epsilon;
    let (n, k) = (a.len(), b.len());

    let rows: Vec<usize> = (0..n).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..k).filter(|&j| b[j] > 0.0).collect();
    let log_a: Vec<f64> = a.as_slice().iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.as_slice().iter().map(|v| v.ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; k];
    let mut lse_rows = vec![0.0; n];
    let mut iterations = 0;

    // Row sums of the current plan are exp(f_i/ε + LSE_i), with the same LSE
    // that drives the next f update, so the stopping test comes for free.
    loop {
        for &i in &rows {
            lse_rows[i] = log_sum_exp(cols.iter().map(|&j| (g[j] - cost.get(i, j)) / eps));
        }
        if iterations > 0 {
            let violation = rows
                .iter()
                .map(|&i| ((f[i] / eps + lse_rows[i]).exp() - a[i]).abs())
                .fold(0.0, f64::max);
            if !violation.is_finite() {
                return Err(Error::Numeric(format!(
                    "sinkhorn diverged after {iterations} iterations"
                )));
            }
            if violation <= config.tolerance || iterations >= config.max_iterations {
                break;
            }
        }
        for &i in &rows {
            f[i] = eps * (log_a[i] - lse_rows[i]);
        }
        for &j in &cols {
            let lse = log_sum_exp(rows.iter().map(|&i| (f[i] - cost.get(i, j)) / eps));
            g[j] = eps * (log_b[j] - lse);
        }
        iterations += 1;
    }

    let mut plan = vec![0.0; n * k];
    for &i in &rows {
        for &j in &cols {
            plan[i * k + j] = ((f[i] + g[j] - cost.get(i, j)) / eps).exp();
        }
    }
    let plan =
        Matrix::from_rows(n, k, plan).map_err(|_| Error::Numeric("sinkhorn produced a non-finite plan".into()))?;
    OtSolution::from_plan(plan, a, b, cost, iterations)
}

/// Largest `N·K` accepted by [`solve_exact_ot`].
pub const EXACT_OT_MAX_CELLS: usize = 25;

/// Exact (unregularized) OT by vertex enumeration.
///
/// Every vertex of the transport polytope is supported on at most `N+K−1`
/// cells and is the unique solution of the marginal equations restricted to
/// its support. This tries every such support, keeps the feasible ones and
/// returns the cheapest. Exponential; test-scale only.
pub fn solve_exact_ot(a: &ProbVector, b: &ProbVector, cost: &Matrix) -> Result<OtSolution> {
    check_problem(a, b, cost)?;
    let (n, k) = (a.len(), b.len());
    let cells = n * k;
    if cells > EXACT_OT_MAX_CELLS {
        return Err(Error::Size(format!(
            "exact OT limited to {EXACT_OT_MAX_CELLS} cells, got {n}x{k}"
        )));
    }
    let max_support = n + k - 1;
    let row_need: u32 = (0..n).filter(|&i| a[i] > 0.0).fold(0, |m, i| m | 1 << i);
    let col_need: u32 = (0..k).filter(|&j| b[j] > 0.0).fold(0, |m, j| m | 1 << j);

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut support = Vec::with_capacity(max_support);
    for size in 1..=max_support.min(cells) {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            support.clear();
            support.extend_from_slice(&combo);
            let (mut rmask, mut cmask) = (0u32, 0u32);
            for &c in &support {
                rmask |= 1 << (c / k);
                cmask |= 1 << (c % k);
            }
            if rmask & row_need == row_need && cmask & col_need == col_need {
                if let Some(x) = solve_on_support(&support, a, b, n, k) {
                    let total: f64 = support.iter().zip(&x).map(|(&c, v)| v * cost.get(c / k, c % k)).sum();
                    if best.as_ref().is_none_or(|(bc, _)| total < *bc) {
                        let mut plan = vec![0.0; cells];
                        for (&c, v) in support.iter().zip(&x) {
                            plan[c] = *v;
                        }
                        best = Some((total, plan));
                    }
                }
            }
            if !next_combination(&mut combo, cells) {
                break;
            }
        }
    }

    let (_, plan) = best.ok_or_else(|| Error::Numeric("no feasible transport plan found".into()))?;
    OtSolution::from_plan(Matrix::from_rows(n, k, plan)?, a, b, cost, 0)
}

fn next_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if combo[i] < n - k + i {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Solves the marginal equations restricted to `support` by Gaussian
/// elimination. `None` unless the solution is unique, consistent and
/// nonnegative.
fn solve_on_support(support: &[usize], a: &ProbVector, b: &ProbVector, n: usize, k: usize) -> Option<Vec<f64>> {
    const EPS: f64 = 1e-12;
    let unknowns = support.len();
    let eqs = n + k;
    let width = unknowns + 1;
    let mut m = vec![0.0; eqs * width];
    for (col, &cell) in support.iter().enumerate() {
        m[(cell / k) * width + col] = 1.0;
        m[(n + cell % k) * width + col] = 1.0;
    }
    for i in 0..n {
        m[i * width + unknowns] = a[i];
    }
    for j in 0..k {
        m[(n + j) * width + unknowns] = b[j];
    }

    for col in 0..unknowns {
        let best = (col..eqs).max_by(|&r, &s| m[r * width + col].abs().total_cmp(&m[s * width + col].abs()))?;
        if m[best * width + col].abs() < EPS {
            return None; // rank deficient: support is not a vertex
        }
        for c in 0..width {
            m.swap(col * width + c, best * width + c);
        }
        let p = m[col * width + col];
        for c in 0..width {
            m[col * width + c] /= p;
        }
        for r in 0..eqs {
            if r != col {
                let factor = m[r * width + col];
                if factor != 0.0 {
                    for c in 0..width {
                        m[r * width + c] -= factor * m[col * width + c];
                    }
                }
            }
        }
    }
    if (unknowns..eqs).any(|r| m[r * width + unknowns].abs() > 1e-9) {
        return None;
    }
    let x: Vec<f64> = (0..unknowns).map(|r| m[r * width + unknowns]).collect();
    if x.iter().any(|v| *v < -1e-12) {
        return None;
    }
    Some(x.into_iter().map(|v| v.max(0.0)).collect())
}
