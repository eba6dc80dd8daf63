//! One-dimensional Kolmogorov diffusion `dX = -U'(X) dt + dW` on a bounded
//! interval with reflecting walls, and its h-transform.
//!
//! The generator `½ u'' - U' u' = ½ e^{2U} (e^{-2U} u')'` is discretised in
//! conservative form on `M + 1` nodes, which makes it self-adjoint for the
//! trapezoid-weighted inner product `⟨u, v⟩ = Σ w_i m_i u_i v_i Δx`. A time
//! step for `g` is
//!
//! ```text
//! g^k = E_k (I - ½Δt A)^{-1} (I + ½Δt A) E_{k+1} g^{k+1},   E_k = diag(e^{-½Δt V_k})
//! ```
//!
//! and the forward solver for `f` applies the adjoint step, so
//! `⟨f^k, g^k⟩` does not depend on `k` beyond rounding.

use std::io::{self, Write};

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::time_derivative;
use crate::grid::TimeGrid;
use crate::markov::sample_index;
use crate::rng::Seed;

pub const MIN_CELLS: usize = 16;
pub const MIN_EM_STEPS: usize = 100;
pub const DEFAULT_BINS: usize = 64;

/// Uniform spatial grid with `cells + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
}

impl SpaceGrid {
    pub fn new(x_min: f64, x_max: f64, cells: usize) -> Result<Self> {
        if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::InvalidInput(format!(
                "need finite x_min < x_max, got [{x_min}, {x_max}]"
            )));
        }
        if cells < MIN_CELLS {
            return Err(Error::InvalidInput(format!(
                "need at least {MIN_CELLS} cells, got {cells}"
            )));
        }
        Ok(Self {
            x_min,
            x_max,
            cells,
        })
    }

    pub fn len(&self) -> usize {
        self.cells + 1
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.cells as f64
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.cells {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Array1<f64> {
        Array1::from_iter((0..self.len()).map(|i| self.node(i)))
    }

    /// Trapezoid weights `w_i`, without the factor `Δx`.
    pub fn weights(&self) -> Array1<f64> {
        let mut w = Array1::ones(self.len());
        w[0] = 0.5;
        w[self.cells] = 0.5;
        w
    }

    /// Cell index and fractional position, clamped to the domain.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let pos = ((x - self.x_min) / self.dx()).clamp(0.0, self.cells as f64);
        let i = (pos.floor() as usize).min(self.cells - 1);
        (i, pos - i as f64)
    }

    /// Nodes whose coordinate lies in `[a, b]`.
    pub fn nodes_within(&self, a: f64, b: f64) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| {
            let x = self.node(i);
            x >= a - 1e-12 && x <= b + 1e-12
        })
    }
}

/// Values on a time grid × space grid, rows indexed by time.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub time: TimeGrid,
    pub space: SpaceGrid,
    pub values: Array2<f64>,
}

impl GridFunction {
    pub fn new(time: TimeGrid, space: SpaceGrid, values: Array2<f64>) -> Result<Self> {
        check_len("grid function time nodes", time.len(), values.nrows())?;
        check_len("grid function space nodes", space.len(), values.ncols())?;
        Ok(Self {
            time,
            space,
            values,
        })
    }

    pub fn constant(time: TimeGrid, space: SpaceGrid, c: f64) -> Self {
        Self {
            time,
            space,
            values: Array2::from_elem((time.len(), space.len()), c),
        }
    }

    pub fn from_fn(time: TimeGrid, space: SpaceGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values =
            Array2::from_shape_fn((time.len(), space.len()), |(k, i)| f(time.node(k), space.node(i)));
        Self {
            time,
            space,
            values,
        }
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.values.row(k)
    }

    /// Bilinear interpolation in `(t, x)`; NaN propagates.
    pub fn interpolate(&self, t: f64, x: f64) -> f64 {
        let (k, a) = self.time.locate(t.clamp(0.0, 1.0));
        let (i, b) = self.space.locate(x);
        let v = &self.values;
        let lo = v[[k, i]] * (1.0 - b) + v[[k, i + 1]] * b;
        if a == 0.0 {
            return lo;
        }
        let hi = v[[k + 1, i]] * (1.0 - b) + v[[k + 1, i + 1]] * b;
        lo * (1.0 - a) + hi * a
    }

    /// Largest `|value|` over nodes with `x ∈ [a, b]` and `t ≤ t_max`,
    /// skipping NaN entries.
    pub fn max_abs_over(&self, a: f64, b: f64, t_max: f64) -> f64 {
        let cols: Vec<usize> = self.space.nodes_within(a, b).collect();
        let mut out = 0.0f64;
        for k in 0..self.time.len() {
            if self.time.node(k) > t_max + 1e-12 {
                break;
            }
            for &i in &cols {
                let v = self.values[[k, i]];
                if !v.is_nan() {
                    out = out.max(v.abs());
                }
            }
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "# grid_N={} M={} x_min={} x_max={}",
            self.time.steps(),
            self.space.cells,
            self.space.x_min,
            self.space.x_max
        )?;
        writeln!(w, "t,x,value")?;
        for ((k, i), v) in self.values.indexed_iter() {
            writeln!(w, "{},{},{}", self.time.node(k), self.space.node(i), v)?;
        }
        Ok(())
    }
}

/// Reference diffusion with potential `U` given at the spatial nodes.
#[derive(Debug, Clone)]
pub struct Diffusion1DModel {
    space: SpaceGrid,
    u: Array1<f64>,
    u_prime: Array1<f64>,
    /// Reversing density `∝ e^{-2U}`, normalised by the trapezoid rule.
    m: Array1<f64>,
    weights: Array1<f64>,
    /// `m` at the midpoints `x_{i+½}`, `i = 0..M`.
    m_face: Array1<f64>,
}

/// Index of the mirror image of node `j` under even reflection at both walls.
fn mirror(j: isize, cells: usize) -> usize {
    let c = cells as isize;
    let r = if j < 0 {
        -j
    } else if j > c {
        2 * c - j
    } else {
        j
    };
    r as usize
}

impl Diffusion1DModel {
    pub fn new(x_min: f64, x_max: f64, u: Array1<f64>) -> Result<Self> {
        if u.len() < 2 {
            return Err(Error::InvalidInput("potential needs at least two nodes".into()));
        }
        let space = SpaceGrid::new(x_min, x_max, u.len() - 1)?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("potential must be finite".into()));
        }
        let dx = space.dx();
        let weights = space.weights();
        let u_min = u.iter().copied().fold(f64::INFINITY, f64::min);
        let raw = u.mapv(|v| (-2.0 * (v - u_min)).exp());
        let z = (&raw * &weights).sum() * dx;
        if !(z > 0.0) || !z.is_finite() {
            return Err(Error::InvalidInput("e^{-2U} is not normalisable".into()));
        }
        let m = raw / z;

        let mc = space.cells;
        let mut u_prime = Array1::zeros(space.len());
        for i in 1..mc {
            u_prime[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        }
        u_prime[0] = (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * dx);
        u_prime[mc] = (3.0 * u[mc] - 4.0 * u[mc - 1] + u[mc - 2]) / (2.0 * dx);

        let ue = |j: isize| u[mirror(j, mc)];
        let m_face = Array1::from_shape_fn(mc, |i| {
            let i = i as isize;
            let uf = (9.0 * (ue(i) + ue(i + 1)) - ue(i - 1) - ue(i + 2)) / 16.0;
            (-2.0 * (uf - u_min)).exp() / z
        });
        Ok(Self {
            space,
            u,
            u_prime,
            m,
            weights,
            m_face,
        })
    }

    pub fn from_fn(x_min: f64, x_max: f64, cells: usize, u: impl Fn(f64) -> f64) -> Result<Self> {
        let space = SpaceGrid::new(x_min, x_max, cells)?;
        Self::new(x_min, x_max, space.nodes().mapv(u))
    }

    pub fn space(&self) -> SpaceGrid {
        self.space
    }

    pub fn potential(&self) -> ArrayView1<'_, f64> {
        self.u.view()
    }

    pub fn potential_derivative(&self) -> ArrayView1<'_, f64> {
        self.u_prime.view()
    }

    pub fn m(&self) -> ArrayView1<'_, f64> {
        self.m.view()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    /// `⟨u, v⟩ = Σ w_i m_i u_i v_i Δx`.
    pub fn inner(&self, u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
        let dx = self.space.dx();
        (0..self.space.len())
            .map(|i| self.weights[i] * self.m[i] * u[i] * v[i])
            .sum::<f64>()
            * dx
    }

    /// Discrete generator applied to `u`.
    ///
    /// Fluxes `m_{i+½} u'(x_{i+½})` use the fourth-order staggered
    /// difference, and the divergence is its adjoint; values beyond the
    /// walls are even reflections, which encodes the no-flux condition.
    pub fn generator_apply(&self, u: ArrayView1<f64>) -> Array1<f64> {
        let mc = self.space.cells;
        let dx = self.space.dx();
        let ue = |j: isize| u[mirror(j, mc)];
        // Face i + ½ for i in -2..=M+1, stored at offset i + 2.
        let flux: Vec<f64> = (-2..=mc as isize + 1)
            .map(|i| {
                let face = if i < 0 {
                    (-i - 1) as usize
                } else if i >= mc as isize {
                    (2 * mc as isize - i - 1) as usize
                } else {
                    i as usize
                };
                let grad = (27.0 * (ue(i + 1) - ue(i)) - (ue(i + 2) - ue(i - 1))) / (24.0 * dx);
                self.m_face[face] * grad
            })
            .collect();
        Array1::from_shape_fn(mc + 1, |i| {
            let f = |j: isize| flux[(i as isize + j + 2) as usize];
            let div = (27.0 * (f(0) - f(-1)) - (f(1) - f(-2))) / (24.0 * dx);
            div / (2.0 * self.m[i])
        })
    }
}

/// Banded Cholesky factor of `diag(w m) (I - ½Δt A)`, which is symmetric
/// positive definite because `A` is self-adjoint and nonpositive.
#[derive(Debug, Clone)]
struct CnSolver {
    dt: f64,
    wm: Array1<f64>,
    /// `chol[[i, d]] = L[i, i - d]`.
    chol: Array2<f64>,
}

const HALF_BAND: usize = 3;

impl CnSolver {
    fn new(model: &Diffusion1DModel, dt: f64) -> Result<Self> {
        let n = model.space.len();
        let wm = &model.weights * &model.m;
        let stride = 2 * HALF_BAND + 1;
        // Columns `stride` apart never share a row of the band, so one
        // generator application recovers all of them at once.
        let mut band = Array2::<f64>::zeros((n, HALF_BAND + 1));
        let mut upper = Array2::<f64>::zeros((n, HALF_BAND + 1));
        for r in 0..stride {
            let comb = Array1::from_shape_fn(n, |j| if j % stride == r { 1.0 } else { 0.0 });
            let ac = model.generator_apply(comb.view());
            for i in 0..n {
                let lo = i.saturating_sub(HALF_BAND);
                let hi = (i + HALF_BAND).min(n - 1);
                for j in lo..=hi {
                    if j % stride != r {
                        continue;
                    }
                    let identity = if i == j { 1.0 } else { 0.0 };
                    let s = wm[i] * (identity - 0.5 * dt * ac[i]);
                    if j <= i {
                        band[[i, i - j]] += s;
                    } else {
                        upper[[j, j - i]] += s;
                    }
                }
            }
        }
        for i in 0..n {
            for d in 1..=HALF_BAND.min(i) {
                band[[i, d]] = 0.5 * (band[[i, d]] + upper[[i, d]]);
            }
        }
        let mut chol = Array2::<f64>::zeros((n, HALF_BAND + 1));
        for j in 0..n {
            let lo = j.saturating_sub(HALF_BAND);
            let mut s = band[[j, 0]];
            for k in lo..j {
                s -= chol[[j, j - k]].powi(2);
            }
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::FactorizationBreakdown { row: j });
            }
            let djj = s.sqrt();
            chol[[j, 0]] = djj;
            for i in j + 1..(j + HALF_BAND + 1).min(n) {
                let mut s = band[[i, i - j]];
                for k in i.saturating_sub(HALF_BAND)..j {
                    s -= chol[[i, i - k]] * chol[[j, j - k]];
                }
                chol[[i, i - j]] = s / djj;
            }
        }
        Ok(Self { dt, wm, chol })
    }

    /// Solves `(I - ½Δt A) y = r`.
    fn implicit_half(&self, r: ArrayView1<f64>) -> Array1<f64> {
        let n = r.len();
        let mut y = &r * &self.wm;
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(HALF_BAND)..i {
                s -= self.chol[[i, i - k]] * y[k];
            }
            y[i] = s / self.chol[[i, 0]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + HALF_BAND + 1).min(n) {
                s -= self.chol[[k, k - i]] * y[k];
            }
            y[i] = s / self.chol[[i, 0]];
        }
        y
    }

    /// `(I - ½Δt A)^{-1} (I + ½Δt A) u`, evaluated as
    /// `u + (I - ½Δt A)^{-1} Δt A u` so that constants pass through exactly.
    fn step(&self, model: &Diffusion1DModel, u: ArrayView1<f64>) -> Array1<f64> {
        let au = model.generator_apply(u) * self.dt;
        self.implicit_half(au.view()) + u
    }
}

/// A solved field together with the number of negative values clipped to 0.
#[derive(Debug, Clone)]
pub struct PdeSolution {
    pub field: GridFunction,
    pub clipped: usize,
}

fn check_potential(model: &Diffusion1DModel, v: &GridFunction, grid: TimeGrid) -> Result<()> {
    check_len("potential time nodes", grid.len(), v.values.nrows())?;
    check_len("potential space nodes", model.space.len(), v.values.ncols())?;
    if v.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("potential must be finite".into()));
    }
    Ok(())
}

fn check_weight(model: &Diffusion1DModel, w: ArrayView1<f64>, what: &'static str) -> Result<()> {
    check_len(what, model.space.len(), w.len())?;
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} must be finite and nonnegative")));
    }
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateInput(format!("{what} vanishes identically")));
    }
    Ok(())
}

fn clip(row: &mut Array1<f64>) -> usize {
    let mut count = 0;
    for x in row.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
            count += 1;
        }
    }
    count
}

fn half_decay(v: ArrayView1<f64>, dt: f64) -> Array1<f64> {
    v.mapv(|x| (-0.5 * dt * x).exp())
}

/// Backward solve of `∂_t g + ½ g'' - U' g' = V g`, `g(1) = gamma1`.
pub fn solve_g_pde(
    model: &Diffusion1DModel,
    v: &GridFunction,
    gamma1: ArrayView1<f64>,
    grid: TimeGrid,
) -> Result<PdeSolution> {
    check_potential(model, v, grid)?;
    check_weight(model, gamma1, "gamma1")?;
    let dt = grid.dt();
    let solver = CnSolver::new(model, dt)?;
    let mut values = Array2::zeros((grid.len(), model.space.len()));
    values.row_mut(grid.steps()).assign(&gamma1);
    let mut clipped = 0;
    for k in (0..grid.steps()).rev() {
        let next = &values.row(k + 1) * &half_decay(v.row(k + 1), dt);
        let mut row = solver.step(model, next.view()) * half_decay(v.row(k), dt);
        clipped += clip(&mut row);
        values.row_mut(k).assign(&row);
    }
    Ok(PdeSolution {
        field: GridFunction::new(grid, model.space, values)?,
        clipped,
    })
}

/// Forward solve for the `m`-density `f` with `f(0) = f0`, built as the
/// adjoint of the step used by [`solve_g_pde`].
pub fn solve_f_pde(
    model: &Diffusion1DModel,
    v: &GridFunction,
    f0: ArrayView1<f64>,
    grid: TimeGrid,
) -> Result<PdeSolution> {
    check_potential(model, v, grid)?;
    check_weight(model, f0, "f0")?;
    let dt = grid.dt();
    let solver = CnSolver::new(model, dt)?;
    let mut values = Array2::zeros((grid.len(), model.space.len()));
    values.row_mut(0).assign(&f0);
    let mut clipped = 0;
    for k in 0..grid.steps() {
        let prev = &values.row(k) * &half_decay(v.row(k), dt);
        let mut row = solver.step(model, prev.view()) * half_decay(v.row(k + 1), dt);
        clipped += clip(&mut row);
        values.row_mut(k + 1).assign(&row);
    }
    Ok(PdeSolution {
        field: GridFunction::new(grid, model.space, values)?,
        clipped,
    })
}

/// `⟨f_t, g_t⟩` for every time node.
pub fn duality_profile(model: &Diffusion1DModel, f: &GridFunction, g: &GridFunction) -> Array1<f64> {
    Array1::from_iter((0..f.time.len()).map(|k| model.inner(f.row(k), g.row(k))))
}

/// `ψ = log g` (`-∞` where `g = 0`) and the transformed drift
/// `-U' + ∂_x ψ` (NaN where a needed `ψ` is not finite).
///
/// At the walls `∂_x ψ` is taken as 0, matching the no-flux condition.
pub fn psi_and_drift(model: &Diffusion1DModel, g: &GridFunction) -> Result<(GridFunction, GridFunction)> {
    check_len("g space nodes", model.space.len(), g.values.ncols())?;
    let psi = g.values.mapv(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
    let dx = model.space.dx();
    let mc = model.space.cells;
    let drift = Array2::from_shape_fn(psi.dim(), |(k, i)| {
        let grad = if i == 0 || i == mc {
            if psi[[k, i]].is_finite() {
                0.0
            } else {
                f64::NAN
            }
        } else {
            let d = (psi[[k, i + 1]] - psi[[k, i - 1]]) / (2.0 * dx);
            if psi[[k, i + 1]].is_finite() && psi[[k, i - 1]].is_finite() {
                d
            } else {
                f64::NAN
            }
        };
        -model.u_prime[i] + grad
    });
    Ok((
        GridFunction::new(g.time, g.space, psi)?,
        GridFunction::new(g.time, g.space, drift)?,
    ))
}

/// Central-difference `(∂_x u, ∂_xx u)` at interior node `i` of row `k`.
fn space_derivatives(values: &Array2<f64>, k: usize, i: usize, dx: f64) -> (f64, f64) {
    let (a, b, c) = (values[[k, i - 1]], values[[k, i]], values[[k, i + 1]]);
    ((c - a) / (2.0 * dx), (c - 2.0 * b + a) / (dx * dx))
}

/// `∂̂_t ψ - U' ∂̂_x ψ + ½ ∂̂_xx ψ + ½ (∂̂_x ψ)² - V` at interior nodes; NaN
/// at the walls and wherever a stencil touches a non-finite `ψ`.
pub fn diffusion_hjb_residual(
    psi: &GridFunction,
    model: &Diffusion1DModel,
    v: &GridFunction,
) -> Result<GridFunction> {
    check_potential(model, v, psi.time)?;
    check_len("psi space nodes", model.space.len(), psi.values.ncols())?;
    let grid = psi.time;
    let dx = model.space.dx();
    let p = &psi.values;
    let dt_psi = time_derivative(p.view(), grid.dt());
    let mut out = Array2::from_elem(p.dim(), f64::NAN);
    for k in 0..grid.len() {
        for i in 1..model.space.cells {
            if !dt_psi[[k, i]].is_finite() || !(i - 1..=i + 1).all(|j| p[[k, j]].is_finite()) {
                continue;
            }
            let (d1, d2) = space_derivatives(p, k, i, dx);
            out[[k, i]] =
                dt_psi[[k, i]] - model.u_prime[i] * d1 + 0.5 * d2 + 0.5 * d1 * d1 - v.values[[k, i]];
        }
    }
    GridFunction::new(grid, model.space, out)
}

/// `∂̂_t g - U' ∂̂_x g + ½ ∂̂_xx g - V g` at interior nodes, NaN at the walls.
pub fn fk_pde_residual(
    model: &Diffusion1DModel,
    v: &GridFunction,
    g: &GridFunction,
) -> Result<GridFunction> {
    check_potential(model, v, g.time)?;
    check_len("g space nodes", model.space.len(), g.values.ncols())?;
    let dx = model.space.dx();
    let dt_g = time_derivative(g.values.view(), g.time.dt());
    let mut out = Array2::from_elem(g.values.dim(), f64::NAN);
    for k in 0..g.time.len() {
        for i in 1..model.space.cells {
            let (d1, d2) = space_derivatives(&g.values, k, i, dx);
            out[[k, i]] = dt_g[[k, i]] - model.u_prime[i] * d1 + 0.5 * d2
                - v.values[[k, i]] * g.values[[k, i]];
        }
    }
    GridFunction::new(g.time, model.space, out)
}

/// Drift fed to the Euler-Maruyama sampler.
#[derive(Debug, Clone, Copy)]
pub enum Drift<'a> {
    /// `-U'` of the reference model, linear in `x`.
    Reference,
    /// A tabulated drift on `[0, 1]`, bilinear in `(t, x)`.
    Grid(&'a GridFunction),
}

/// Positions at the `steps + 1` Euler-Maruyama times on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmPath {
    pub horizon: f64,
    pub positions: Vec<f64>,
    pub seed: Seed,
}

impl EmPath {
    pub fn dt(&self) -> f64 {
        self.horizon / (self.positions.len() - 1) as f64
    }

    pub fn terminal(&self) -> f64 {
        *self.positions.last().expect("paths are never empty")
    }
}

fn reference_drift(model: &Diffusion1DModel, x: f64) -> f64 {
    let (i, b) = model.space.locate(x);
    -(model.u_prime[i] * (1.0 - b) + model.u_prime[i + 1] * b)
}

/// Reflects `x` into the domain; errors once it leaves the domain padded by
/// half its width on each side.
fn reflect(space: &SpaceGrid, t: f64, x: f64) -> Result<f64> {
    let pad = 0.5 * space.width();
    if !x.is_finite() || x < space.x_min - pad || x > space.x_max + pad {
        return Err(Error::LeftDomain { t, x });
    }
    let mut y = x;
    loop {
        if y < space.x_min {
            y = 2.0 * space.x_min - y;
        } else if y > space.x_max {
            y = 2.0 * space.x_max - y;
        } else {
            return Ok(y);
        }
    }
}

fn em_run<R: Rng>(
    model: &Diffusion1DModel,
    drift: Drift<'_>,
    x0: f64,
    steps: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let dt = horizon / steps as f64;
    let sq = dt.sqrt();
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = reflect(&model.space, 0.0, x0)?;
    out.push(x);
    for k in 0..steps {
        let t = k as f64 * dt;
        let b = match drift {
            Drift::Reference => reference_drift(model, x),
            Drift::Grid(field) => field.interpolate(t, x),
        };
        if !b.is_finite() {
            let (i, _) = model.space.locate(x);
            return Err(Error::DivisionGuard { t, state: i });
        }
        let xi: f64 = rng.sample(StandardNormal);
        x = reflect(&model.space, t + dt, x + b * dt + sq * xi)?;
        out.push(x);
    }
    Ok(out)
}

fn check_em(model: &Diffusion1DModel, drift: Drift<'_>, steps: usize, horizon: f64) -> Result<()> {
    if steps < MIN_EM_STEPS {
        return Err(Error::InvalidInput(format!(
            "need at least {MIN_EM_STEPS} steps, got {steps}"
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    if let Drift::Grid(field) = drift {
        check_len("drift space nodes", model.space.len(), field.values.ncols())?;
        if horizon > 1.0 + 1e-12 {
            return Err(Error::InvalidInput("tabulated drift only covers [0, 1]".into()));
        }
    }
    Ok(())
}

/// Euler-Maruyama path `X_{k+1} = X_k + b(t_k, X_k) Δt + √Δt ξ_k`, reflected
/// at the walls.
pub fn sample_em(
    model: &Diffusion1DModel,
    drift: Drift<'_>,
    x0: f64,
    seed: Seed,
    steps: usize,
    horizon: f64,
) -> Result<EmPath> {
    check_em(model, drift, steps, horizon)?;
    let positions = em_run(model, drift, x0, steps, horizon, &mut seed.rng())?;
    Ok(EmPath {
        horizon,
        positions,
        seed,
    })
}

/// Draws a point from the density `p` (tabulated at the nodes) by picking a
/// node with probability `w_i p_i` and jittering uniformly within its cell.
fn sample_from_density<R: Rng>(space: &SpaceGrid, mass: ArrayView1<f64>, total: f64, rng: &mut R) -> f64 {
    let i = sample_index(mass, total, rng);
    let dx = space.dx();
    let lo = (space.node(i) - 0.5 * dx).max(space.x_min);
    let hi = (space.node(i) + 0.5 * dx).min(space.x_max);
    lo + (hi - lo) * rng.random::<f64>()
}

/// Independent paths whose starting points follow the nodal density
/// `initial` (w.r.t. Lebesgue measure), path `i` on stream `i`.
pub fn sample_em_paths(
    model: &Diffusion1DModel,
    drift: Drift<'_>,
    initial: ArrayView1<f64>,
    count: usize,
    seed: u64,
    steps: usize,
    horizon: f64,
) -> Result<Vec<EmPath>> {
    check_em(model, drift, steps, horizon)?;
    check_weight(model, initial, "initial density")?;
    let mass = &initial * &model.weights;
    let total = mass.sum();
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let s = Seed::new(seed).with_stream(i);
            let mut rng = s.rng();
            let x0 = sample_from_density(&model.space, mass.view(), total, &mut rng);
            let positions = em_run(model, drift, x0, steps, horizon, &mut rng)?;
            Ok(EmPath {
                horizon,
                positions,
                seed: s,
            })
        })
        .collect()
}

pub fn write_em_paths_csv<W: Write>(mut w: W, paths: &[EmPath]) -> io::Result<()> {
    writeln!(w, "# paths={}", paths.len())?;
    writeln!(w, "path_id,time,x")?;
    for (id, p) in paths.iter().enumerate() {
        let dt = p.dt();
        for (k, x) in p.positions.iter().enumerate() {
            writeln!(w, "{id},{},{x}", k as f64 * dt)?;
        }
    }
    Ok(())
}

/// `h`-transform of the reference diffusion: `g`, normalised `f`, `ψ` and
/// the transformed drift.
#[derive(Debug, Clone)]
pub struct DiffusionTransform {
    pub model: Diffusion1DModel,
    pub potential: GridFunction,
    pub g: PdeSolution,
    pub f: PdeSolution,
    pub psi: GridFunction,
    pub drift: GridFunction,
    pub normalization: f64,
}

impl DiffusionTransform {
    pub fn build(
        model: Diffusion1DModel,
        potential: GridFunction,
        f0: ArrayView1<f64>,
        gamma1: ArrayView1<f64>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let g = solve_g_pde(&model, &potential, gamma1, grid)?;
        let c = model.inner(f0, g.field.row(0));
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "normalisation ⟨f0, g0⟩ = {c} is not positive"
            )));
        }
        let f0n = f0.mapv(|x| x / c);
        let f = solve_f_pde(&model, &potential, f0n.view(), grid)?;
        let (psi, drift) = psi_and_drift(&model, &g.field)?;
        Ok(Self {
            model,
            potential,
            g,
            f,
            psi,
            drift,
            normalization: c,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.g.field.time
    }

    /// Density of `P_k` w.r.t. Lebesgue measure: `f g m`.
    pub fn marginal_density(&self, k: usize) -> Array1<f64> {
        &(&self.f.field.row(k) * &self.g.field.row(k)) * &self.model.m
    }
}

/// Exact integral of the piecewise-linear interpolant of nodal values over
/// `[a, b]`.
fn integrate_linear(space: &SpaceGrid, p: ArrayView1<f64>, a: f64, b: f64) -> f64 {
    let dx = space.dx();
    let at = |x: f64| {
        let (i, f) = space.locate(x);
        p[i] * (1.0 - f) + p[i + 1] * f
    };
    let mut total = 0.0;
    let mut x = a;
    while x < b - 1e-15 {
        let (i, _) = space.locate(x);
        let cell_end = (space.node(i + 1)).min(b);
        let end = if cell_end <= x { (x + dx).min(b) } else { cell_end };
        total += 0.5 * (at(x) + at(end)) * (end - x);
        x = end;
    }
    total
}

/// Probability of each of `bins` equal bins under the nodal density `p`.
pub fn bin_masses(space: &SpaceGrid, p: ArrayView1<f64>, bins: usize) -> Array1<f64> {
    let width = space.width() / bins as f64;
    let raw = Array1::from_iter((0..bins).map(|j| {
        let a = space.x_min + j as f64 * width;
        let b = if j + 1 == bins { space.x_max } else { a + width };
        integrate_linear(space, p, a, b)
    }));
    let total = raw.sum();
    raw / total
}

pub fn histogram(space: &SpaceGrid, xs: impl Iterator<Item = f64>, bins: usize) -> Array1<f64> {
    let mut counts = Array1::<f64>::zeros(bins);
    let mut n = 0usize;
    for x in xs {
        let j = (((x - space.x_min) / space.width()) * bins as f64).floor();
        counts[(j.max(0.0) as usize).min(bins - 1)] += 1.0;
        n += 1;
    }
    counts / n.max(1) as f64
}

pub fn total_variation(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    0.5 * p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation between the histogram of `n_paths` transformed-drift
/// paths at time `t` and the bin masses of `f_t g_t m`.
///
/// Off-grid times are reached with a proportionally shorter sampler run and
/// a target density interpolated linearly in time.
pub fn empirical_vs_fk_marginal(
    tr: &DiffusionTransform,
    t: f64,
    n_paths: usize,
    seed: u64,
    bins: usize,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidInput(format!("time {t} outside [0, 1]")));
    }
    let grid = tr.grid();
    let space = tr.model.space;
    let (k, a) = grid.locate(t);
    let density = tr.marginal_density(k) * (1.0 - a) + tr.marginal_density(k + 1) * a;
    let target = bin_masses(&space, density.view(), bins);
    let p0 = tr.marginal_density(0);
    let positions: Vec<f64> = if t == 0.0 {
        let mass = &p0 * &tr.model.weights;
        let total = mass.sum();
        (0..n_paths as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = Seed::new(seed).with_stream(i).rng();
                sample_from_density(&space, mass.view(), total, &mut rng)
            })
            .collect()
    } else {
        let steps = ((t * grid.steps() as f64).ceil() as usize).max(MIN_EM_STEPS);
        sample_em_paths(&tr.model, Drift::Grid(&tr.drift), p0.view(), n_paths, seed, steps, t)?
            .iter()
            .map(EmPath::terminal)
            .collect()
    };
    let hist = histogram(&space, positions.into_iter(), bins);
    Ok(total_variation(hist.view(), target.view()))
}

/// Restriction of a nodal vector to the middle of the domain, used to keep
/// wall effects out of comparisons.
pub fn middle_range(space: &SpaceGrid, fraction: f64) -> (f64, f64) {
    let centre = 0.5 * (space.x_min + space.x_max);
    let half = 0.5 * fraction * space.width();
    (centre - half, centre + half)
}

pub fn gaussian_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Rows `k` of a field restricted to nodes in `[a, b]`.
pub fn row_slice(field: &GridFunction, k: usize, a: f64, b: f64) -> Array1<f64> {
    let idx: Vec<usize> = field.space.nodes_within(a, b).collect();
    let (lo, hi) = (idx[0], idx[idx.len() - 1]);
    field.values.slice(s![k, lo..=hi]).to_owned()
}
