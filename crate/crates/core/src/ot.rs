//! Debiased entropic optimal transport between patch-token sets.
//!
//! Both sets carry uniform weights and the ground cost is `c(x, y) = ½‖x − y‖²`.
//! Potentials are updated in the log domain; iteration stops once the largest
//! row-marginal violation drops below `tol`. Self terms use the symmetric
//! averaged update, and cross terms are solved in a canonical argument order
//! so that `S(A, B)` and `S(B, A)` agree bit for bit.
//!
//! The divergence is
//! `S(A, B) = OT(A, B) − ½ OT(A, A) − ½ OT(B, B)`,
//! with `OT` the dual value `⟨a, f⟩ + ⟨b, g⟩` of the KL-regularised problem.
//! Gradients use the converged transport plans (envelope theorem) rather than
//! differentiating through the iterations.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularisation strength.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Largest tolerated row-marginal violation.
    pub tol: f64,
    /// Sets with more rows than this are uniformly subsampled.
    pub max_tokens: usize,
    pub debiased: bool,
    /// L2-normalise every row before computing costs.
    pub normalize: bool,
    /// Seed for token subsampling.
    pub seed: u64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iters: 500,
            tol: 1e-6,
            max_tokens: 1024,
            debiased: true,
            normalize: true,
            seed: 0,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_tokens == 0 || self.max_iters == 0 {
            return Err(Error::invalid("max_tokens and max_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Divergence value with solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    /// False when any inner solve hit `max_iters`; `value` is then the last iterate.
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct DivergenceGrad {
    pub divergence: Divergence,
    /// Gradient w.r.t. the raw (pre-normalisation, pre-subsampling) rows of A.
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

struct Solution {
    value: f64,
    plan: Array2<f64>,
    converged: bool,
    iterations: usize,
}

fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let xx: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let yy: Vec<f64> = y.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut c = x.dot(&y.t());
    for ((i, j), v) in c.indexed_iter_mut() {
        *v = (0.5 * (xx[i] + yy[j]) - *v).max(0.0);
    }
    c
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmin(eps: f64, log_w: f64, pot: &Array1<f64>, costs: ArrayView1<f64>) -> f64 {
    -eps * log_sum_exp(pot.iter().zip(costs.iter()).map(|(&p, &c)| log_w + (p - c) / eps))
}

/// Largest marginal violation of the plan built from `old`, given the update `new`.
fn marginal_error(old: &Array1<f64>, new: &Array1<f64>, w: f64, eps: f64) -> f64 {
    old.iter()
        .zip(new.iter())
        .map(|(&o, &n)| (w * (((o - n) / eps).exp() - 1.0)).abs())
        .fold(0.0, f64::max)
}

fn plan_from(c: Array2<f64>, f: &Array1<f64>, g: &Array1<f64>, log_ab: f64, eps: f64) -> Array2<f64> {
    let mut plan = c;
    for ((i, j), v) in plan.indexed_iter_mut() {
        *v = (log_ab + (f[i] + g[j] - *v) / eps).exp();
    }
    plan
}

fn solve(x: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &SinkhornConfig) -> Solution {
    let (n, m) = (x.nrows(), y.nrows());
    let eps = cfg.epsilon;
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let a = 1.0 / n as f64;
    let c = cost_matrix(x, y);

    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut f_new = Array1::<f64>::zeros(n);
    let mut converged = false;
    let mut iterations = 0;

    let update_g = |f: &Array1<f64>, g: &mut Array1<f64>| {
        for j in 0..m {
            g[j] = softmin(eps, log_a, f, c.column(j));
        }
    };

    let mut fresh = true;
    loop {
        for i in 0..n {
            f_new[i] = softmin(eps, log_b, &g, c.row(i));
        }
        if !fresh && marginal_error(&f, &f_new, a, eps) <= cfg.tol {
            converged = true;
            break;
        }
        if iterations == cfg.max_iters {
            break;
        }
        fresh = false;
        f.assign(&f_new);
        update_g(&f, &mut g);
        iterations += 1;
    }

    let value = a * f.sum() + g.sum() / m as f64;
    Solution {
        value,
        plan: plan_from(c, &f, &g, log_a + log_b, eps),
        converged,
        iterations,
    }
}

/// `OT(X, X)` with the symmetric averaged update `f ← ½(f + T(f))`.
fn solve_self(x: ArrayView2<f64>, cfg: &SinkhornConfig) -> Solution {
    let n = x.nrows();
    let eps = cfg.epsilon;
    let log_a = -(n as f64).ln();
    let a = 1.0 / n as f64;
    let c = cost_matrix(x, x);

    let mut f = Array1::<f64>::zeros(n);
    let mut tf = Array1::<f64>::zeros(n);
    let mut converged = false;
    let mut iterations = 0;

    let apply = |f: &Array1<f64>, tf: &mut Array1<f64>| {
        for i in 0..n {
            tf[i] = softmin(eps, log_a, f, c.row(i));
        }
    };

    loop {
        apply(&f, &mut tf);
        if marginal_error(&f, &tf, a, eps) <= cfg.tol {
            converged = true;
            break;
        }
        if iterations == cfg.max_iters {
            break;
        }
        f = 0.5 * (&f + &tf);
        iterations += 1;
    }

    let value = 2.0 * a * f.sum();
    Solution {
        value,
        plan: plan_from(c, &f, &f, 2.0 * log_a, eps),
        converged,
        iterations,
    }
}

/// Lexicographic order on (rows, values), used to fix the argument order of cross solves.
fn canonical_cmp(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Ordering {
    x.nrows()
        .cmp(&y.nrows())
        .then_with(|| {
            x.iter()
                .zip(y.iter())
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Uniform subsample of at most `max_tokens` rows, kept in original order.
///
/// Returns the input unchanged when it already fits.
pub fn subsample_tokens(z: ArrayView2<f64>, max_tokens: usize, seed: u64) -> Array2<f64> {
    match subsample_indices(z.nrows(), max_tokens, seed) {
        None => z.to_owned(),
        Some(idx) => z.select(Axis(0), &idx),
    }
}

fn subsample_indices(rows: usize, max_tokens: usize, seed: u64) -> Option<Vec<usize>> {
    if rows <= max_tokens {
        return None;
    }
    let mut rng = crate::rng::stream(seed, 0x5ab5);
    let mut idx = index::sample(&mut rng, rows, max_tokens.max(1)).into_vec();
    idx.sort_unstable();
    Some(idx)
}

/// Preprocessed token set: subsampled rows, optional normalisation, and what
/// is needed to pull gradients back to the raw input.
struct Prepared {
    points: Array2<f64>,
    picked: Option<Vec<usize>>,
    norms: Option<Vec<f64>>,
    raw_rows: usize,
}

fn prepare(z: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<Prepared> {
    if z.nrows() == 0 || z.ncols() == 0 {
        return Err(Error::invalid("empty patch matrix"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("patch matrix has non-finite entries"));
    }
    let picked = subsample_indices(z.nrows(), cfg.max_tokens, cfg.seed);
    let sub = match &picked {
        Some(idx) => z.select(Axis(0), idx),
        None => z.to_owned(),
    };
    let (points, norms) = if cfg.normalize {
        let (p, n) = linalg::normalize_rows(sub.view())?;
        (p, Some(n))
    } else {
        (sub, None)
    };
    Ok(Prepared {
        points,
        picked,
        norms,
        raw_rows: z.nrows(),
    })
}

impl Prepared {
    fn pull_back(&self, grad: Array2<f64>) -> Array2<f64> {
        let grad = match &self.norms {
            Some(n) => linalg::normalize_rows_backward(self.points.view(), n, grad.view()),
            None => grad,
        };
        match &self.picked {
            None => grad,
            Some(idx) => {
                let mut full = Array2::zeros((self.raw_rows, grad.ncols()));
                for (k, &i) in idx.iter().enumerate() {
                    full.row_mut(i).assign(&grad.row(k));
                }
                full
            }
        }
    }
}

fn check_pair(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<()> {
    cfg.validate()?;
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "patch dims differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Raw entropic OT cost `OT_ε(A, B)` (not debiased).
pub fn entropic_ot(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<Divergence> {
    check_pair(a, b, cfg)?;
    let pa = prepare(a, cfg)?;
    let pb = prepare(b, cfg)?;
    let s = solve(pa.points.view(), pb.points.view(), cfg);
    Ok(Divergence {
        value: s.value,
        converged: s.converged,
        iterations: s.iterations,
    })
}

/// Sinkhorn divergence between two token sets (debiased unless `cfg.debiased` is false).
pub fn sinkhorn_divergence(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<Divergence> {
    Ok(sinkhorn_divergence_grad(a, b, cfg)?.divergence)
}

/// Divergence together with its gradient w.r.t. both inputs.
pub fn sinkhorn_divergence_grad(
    a: ArrayView2<f64>,
    b: ArrayView2<f64>,
    cfg: &SinkhornConfig,
) -> Result<DivergenceGrad> {
    check_pair(a, b, cfg)?;
    let pa = prepare(a, cfg)?;
    let pb = prepare(b, cfg)?;
    let (x, y) = (pa.points.view(), pb.points.view());

    let (xy, plan_xy) = match canonical_cmp(x, y) {
        Ordering::Equal => {
            let s = solve_self(x, cfg);
            let p = s.plan.clone();
            (s, p)
        }
        Ordering::Less => {
            let s = solve(x, y, cfg);
            let p = s.plan.clone();
            (s, p)
        }
        Ordering::Greater => {
            let s = solve(y, x, cfg);
            let p = s.plan.t().to_owned();
            (s, p)
        }
    };
    let mut gx = cross_grad(x, y, &plan_xy);
    let mut gy = cross_grad(y, x, &plan_xy.t().to_owned());
    let mut value = xy.value;
    let mut converged = xy.converged;
    let mut iterations = xy.iterations;

    if cfg.debiased {
        let xx = solve_self(x, cfg);
        let yy = solve_self(y, cfg);
        value -= 0.5 * (xx.value + yy.value);
        gx -= &(self_grad(x, &xx.plan) * 0.5);
        gy -= &(self_grad(y, &yy.plan) * 0.5);
        converged &= xx.converged && yy.converged;
        iterations = iterations.max(xx.iterations).max(yy.iterations);
    }

    Ok(DivergenceGrad {
        divergence: Divergence {
            value,
            converged,
            iterations,
        },
        grad_a: pa.pull_back(gx),
        grad_b: pb.pull_back(gy),
    })
}

/// `∂/∂x_i Σ_ij P_ij ½‖x_i − y_j‖² = r_i x_i − Σ_j P_ij y_j`.
fn cross_grad(x: ArrayView2<f64>, y: ArrayView2<f64>, plan: &Array2<f64>) -> Array2<f64> {
    let row_mass = plan.sum_axis(Axis(1));
    let mut g = plan.dot(&y);
    for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
        row.zip_mut_with(&x.row(i), |gv, &xv| *gv = row_mass[i] * xv - *gv);
    }
    g
}

/// Gradient of `Σ_jk Q_jk ½‖x_j − x_k‖²` when both arguments move together.
fn self_grad(x: ArrayView2<f64>, plan: &Array2<f64>) -> Array2<f64> {
    let sym = plan + &plan.t();
    cross_grad(x, x, &sym)
}

/// Patch similarity: the negated divergence.
pub fn sim_patch(a: ArrayView2<f64>, b: ArrayView2<f64>, cfg: &SinkhornConfig) -> Result<f64> {
    Ok(-sinkhorn_divergence(a, b, cfg)?.value)
}
