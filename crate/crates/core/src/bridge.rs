//! Schrödinger bridges on finite models by iterative proportional fitting.
//!
//! With `V = 0` the h-process has two-time joint law
//! `q(x, y) = f0(x) K(x, y) γ(y)`, `K = diag(m) e^{Q}`, so matching the
//! endpoint marginals is a matrix scaling problem for `K`.

use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::{InitialWeight, PotentialField, TerminalWeight};
use crate::grid::TimeGrid;
use crate::h_transform::HProcess;
use crate::markov::ReversibleModel;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 10_000;
const PROBABILITY_TOL: f64 = 1e-12;
/// Slack for rounding when asserting that the IPF error never increases.
pub const MONOTONE_SLACK: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct BridgeProblem {
    model: ReversibleModel,
    mu0: Array1<f64>,
    mu1: Array1<f64>,
    kernel: Array2<f64>,
}

fn check_probability(p: ArrayView1<f64>, what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} must be finite and nonnegative")));
    }
    let s = p.sum();
    if (s - 1.0).abs() > PROBABILITY_TOL {
        return Err(Error::InvalidInput(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

impl BridgeProblem {
    pub fn new(model: &ReversibleModel, mu0: Array1<f64>, mu1: Array1<f64>) -> Result<Self> {
        check_len("mu0", model.n(), mu0.len())?;
        check_len("mu1", model.n(), mu1.len())?;
        check_probability(mu0.view(), "mu0")?;
        check_probability(mu1.view(), "mu1")?;
        let transition = model.transition_matrix(1.0)?;
        let mut kernel = transition;
        for (mut row, &mx) in kernel.rows_mut().into_iter().zip(model.m().iter()) {
            row *= mx;
        }
        let rows = kernel.sum_axis(ndarray::Axis(1));
        let cols = kernel.sum_axis(ndarray::Axis(0));
        for x in 0..model.n() {
            if (mu0[x] > 0.0 && !(rows[x] > 0.0)) || (mu1[x] > 0.0 && !(cols[x] > 0.0)) {
                return Err(Error::DegenerateInput(format!(
                    "marginal charges state {x} that the two-time kernel never reaches"
                )));
            }
        }
        Ok(Self {
            model: model.clone(),
            mu0,
            mu1,
            kernel,
        })
    }

    pub fn model(&self) -> &ReversibleModel {
        &self.model
    }

    pub fn mu0(&self) -> &Array1<f64> {
        &self.mu0
    }

    pub fn mu1(&self) -> &Array1<f64> {
        &self.mu1
    }

    /// `K(x, y) = m(x) e^{Q}(x, y)`, the two-time joint law of `R`.
    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    /// `a(x) K(x, y) b(y)`.
    pub fn joint(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
        let n = a.len();
        Array2::from_shape_fn((n, n), |(x, y)| a[x] * self.kernel[[x, y]] * b[y])
    }
}

#[derive(Debug, Clone)]
pub struct IpfResult {
    pub f0: Array1<f64>,
    pub gamma1: Array1<f64>,
    pub iterations: usize,
    pub final_error: f64,
    /// Marginal error after each iteration.
    pub history: Vec<f64>,
    /// Whether states with zero marginal mass were dropped from a scaling.
    pub restricted: bool,
}

impl IpfResult {
    pub fn write_log<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# restricted={}", self.restricted)?;
        writeln!(w, "iteration,error")?;
        for (i, e) in self.history.iter().enumerate() {
            writeln!(w, "{},{:e}", i + 1, e)?;
        }
        Ok(())
    }
}

fn l1(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum()
}

/// Largest of the two marginal `ℓ¹` errors of `a K b`.
pub fn marginal_error(problem: &BridgeProblem, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let k = &problem.kernel;
    let row = &a * &k.dot(&b);
    let col = &b * &k.t().dot(&a);
    l1(row.view(), problem.mu0.view()).max(l1(col.view(), problem.mu1.view()))
}

/// Alternating scalings `a ← μ₀ ⊘ K b`, `b ← μ₁ ⊘ Kᵀ a` until the marginal
/// error drops below `tol`, with the gauge fixed by `Σ m γ = 1`.
pub fn ipf_solve(problem: &BridgeProblem, tol: f64, max_iter: usize) -> Result<IpfResult> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput("need tol > 0 and max_iter >= 1".into()));
    }
    let n = problem.model.n();
    let k = &problem.kernel;
    let (mu0, mu1) = (&problem.mu0, &problem.mu1);
    let restricted = mu0.iter().chain(mu1.iter()).any(|&p| p == 0.0);
    let mut a = Array1::<f64>::zeros(n);
    let mut b = mu1.mapv(|p| if p > 0.0 { 1.0 } else { 0.0 });
    let mut history = Vec::new();
    for iter in 1..=max_iter {
        let kb = k.dot(&b);
        for x in 0..n {
            a[x] = if mu0[x] > 0.0 { mu0[x] / kb[x] } else { 0.0 };
        }
        let kta = k.t().dot(&a);
        for y in 0..n {
            b[y] = if mu1[y] > 0.0 { mu1[y] / kta[y] } else { 0.0 };
        }
        let err = marginal_error(problem, a.view(), b.view());
        if !err.is_finite() {
            return Err(Error::DegenerateInput("scaling produced non-finite values".into()));
        }
        if let Some(&prev) = history.last() {
            if err > prev * (1.0 + MONOTONE_SLACK) + MONOTONE_SLACK {
                return Err(Error::Inconsistency(format!(
                    "IPF error increased from {prev:e} to {err:e} at iteration {iter}"
                )));
            }
        }
        history.push(err);
        if err < tol {
            let gauge = problem.model.m().dot(&b);
            return Ok(IpfResult {
                f0: a * gauge,
                gamma1: b / gauge,
                iterations: iter,
                final_error: err,
                history,
                restricted,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        last_error: *history.last().expect("max_iter >= 1"),
    })
}

/// `Σ q log(q / K)` over the support of `q`.
pub fn static_entropy(q: &Array2<f64>, kernel: &Array2<f64>) -> f64 {
    q.iter()
        .zip(kernel.iter())
        .filter(|(qv, _)| **qv > 0.0)
        .map(|(qv, kv)| qv * (qv / kv).ln())
        .sum()
}

/// The h-process with `V = 0` and the IPF multipliers, checked to reproduce
/// both marginals within `10 · tol`.
pub fn bridge_to_hprocess(
    problem: &BridgeProblem,
    result: &IpfResult,
    grid: TimeGrid,
    tol: f64,
) -> Result<HProcess> {
    let n = problem.model.n();
    let hp = HProcess::build(
        &problem.model,
        &InitialWeight::new(result.f0.clone())?,
        &TerminalWeight::new(result.gamma1.clone())?,
        &PotentialField::zero(grid, n),
        grid,
    )?;
    let start = l1(hp.marginal_at(0).view(), problem.mu0.view());
    let end = l1(hp.marginal_at(grid.steps()).view(), problem.mu1.view());
    if start.max(end) > 10.0 * tol {
        return Err(Error::Inconsistency(format!(
            "h-process marginals miss the targets by {start:e} at t=0 and {end:e} at t=1"
        )));
    }
    Ok(hp)
}

pub fn write_vector_csv<W: Write>(
    mut w: W,
    labels: impl Iterator<Item = String>,
    name: &str,
    v: ArrayView1<f64>,
) -> io::Result<()> {
    writeln!(w, "state,{name}")?;
    for (label, x) in labels.zip(v.iter()) {
        writeln!(w, "{label},{x}")?;
    }
    Ok(())
}
