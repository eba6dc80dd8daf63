//! Feynman-Kac propagators and the functions `g` and `f`.
//!
//! For a reversible model with generator `Q` and a potential `V(t, x)` the
//! propagator
//!
//! ```text
//! Φ(s, t)(x, y) = E_R[ exp(-∫_s^t V_r(X_r) dr) 1{X_t = y} | X_s = x ]
//! ```
//!
//! solves `∂_t Φ(s, t) = Φ(s, t) (Q - diag V_t)` with `Φ(s, s) = I`. From it,
//!
//! ```text
//! g(t, ·) = Φ(t, 1) γ                          (backward, terminal weight γ)
//! f(t, y) = Σ_x m(x) f0(x) Φ(0, t)(x, y) / m(y) (forward, initial weight f0)
//! ```
//!
//! Time stepping is classical RK4 on the uniform grid with `V` linear in time
//! inside each cell.

use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grid::TimeGrid;
use crate::markov::{ReversibleModel, StateSpace};

/// Default threshold below which `g` is flagged as unsafe to divide by.
pub const POSITIVITY_THRESHOLD: f64 = 1e-300;

/// Potential values `V(t_k, x)` on the grid nodes, bounded below by `-lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    values: Array2<f64>,
    lo: f64,
}

impl PotentialField {
    /// Uses the tightest lower bound `lo = max(0, -min V)`.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        Self::with_lower_bound(values, (-min).max(0.0))
    }

    pub fn with_lower_bound(values: Array2<f64>, lo: f64) -> Result<Self> {
        if values.nrows() < 3 || values.ncols() == 0 {
            return Err(Error::InvalidInput(
                "potential needs at least 3 time nodes and one state".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("potential values must be finite".into()));
        }
        if !(lo >= 0.0) || !lo.is_finite() {
            return Err(Error::InvalidInput(format!("lower bound lo={lo} must be >= 0")));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -lo {
            return Err(Error::InvalidInput(format!(
                "potential minimum {min} is below -lo = {}",
                -lo
            )));
        }
        Ok(Self { values, lo })
    }

    pub fn zero(grid: TimeGrid, n: usize) -> Self {
        Self::constant(grid, n, 0.0)
    }

    pub fn constant(grid: TimeGrid, n: usize, c: f64) -> Self {
        Self::new(Array2::from_elem((grid.len(), n), c)).expect("finite constant potential")
    }

    /// Time-independent potential `V(t, x) = v(x)`.
    pub fn stationary(grid: TimeGrid, v: ArrayView1<f64>) -> Result<Self> {
        Self::new(Array2::from_shape_fn((grid.len(), v.len()), |(_, x)| v[x]))
    }

    pub fn from_fn(grid: TimeGrid, n: usize, f: impl Fn(f64, usize) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn((grid.len(), n), |(k, x)| {
            f(grid.node(k), x)
        }))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn n(&self) -> usize {
        self.values.ncols()
    }

    pub fn steps(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn check_shape(&self, grid: TimeGrid, n: usize) -> Result<()> {
        check_len("potential time nodes", grid.len(), self.values.nrows())?;
        check_len("potential states", n, self.values.ncols())
    }

    /// `V(t, ·)` with linear interpolation between nodes.
    pub fn row_at(&self, t: f64) -> Array1<f64> {
        let steps = self.steps();
        let scaled = t.clamp(0.0, 1.0) * steps as f64;
        let k = (scaled.floor() as usize).min(steps - 1);
        let w = scaled - k as f64;
        let a = self.values.row(k);
        let b = self.values.row(k + 1);
        Array1::from_shape_fn(self.n(), |x| (1.0 - w) * a[x] + w * b[x])
    }

    /// `∫_a^b V(r, x) dr` for a fixed state, exact for the piecewise-linear
    /// interpolant.
    pub fn integrate(&self, x: usize, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let steps = self.steps();
        let dt = 1.0 / steps as f64;
        let (a, b) = (a.max(0.0), b.min(1.0));
        let first = ((a / dt).floor() as usize).min(steps - 1);
        let mut total = 0.0;
        let mut k = first;
        while k < steps {
            let lo = (k as f64 * dt).max(a);
            let hi = ((k + 1) as f64 * dt).min(b);
            if hi > lo {
                let va = self.values[[k, x]];
                let vb = self.values[[k + 1, x]];
                let at = |t: f64| va + (vb - va) * (t / dt - k as f64);
                total += 0.5 * (hi - lo) * (at(lo) + at(hi));
            }
            if (k + 1) as f64 * dt >= b {
                break;
            }
            k += 1;
        }
        total
    }
}

fn nonnegative_weight(v: &Array1<f64>, what: &str) -> Result<()> {
    if v.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidInput(format!(
            "{what} entries must be finite and nonnegative"
        )));
    }
    if v.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidInput(format!("{what} is identically zero")));
    }
    Ok(())
}

/// Terminal weight `γ ≥ 0`, not identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalWeight(Array1<f64>);

impl TerminalWeight {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        nonnegative_weight(&values, "terminal weight")?;
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(Array1::ones(n))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }
}

/// Initial weight `f0 ≥ 0`, not identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialWeight(Array1<f64>);

impl InitialWeight {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        nonnegative_weight(&values, "initial weight")?;
        Ok(Self(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(Array1::ones(n))
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.0
    }
}

/// One RK4 step of `M' = M (Q - diag V(τ))` over `[a, a + h]` from `M = I`.
fn rk4_factor(
    q: &Array2<f64>,
    v_start: ArrayView1<f64>,
    v_mid: ArrayView1<f64>,
    v_end: ArrayView1<f64>,
    h: f64,
) -> Array2<f64> {
    let n = q.nrows();
    let eye = Array2::<f64>::eye(n);
    let shifted = |v: ArrayView1<f64>| {
        let mut a = q.clone();
        for x in 0..n {
            a[[x, x]] -= v[x];
        }
        a
    };
    let a0 = shifted(v_start);
    let am = shifted(v_mid);
    let a1 = shifted(v_end);
    let k1 = a0;
    let k2 = (&eye + &(&k1 * (0.5 * h))).dot(&am);
    let k3 = (&eye + &(&k2 * (0.5 * h))).dot(&am);
    let k4 = (&eye + &(&k3 * h)).dot(&a1);
    let mut incr = k1;
    incr.scaled_add(2.0, &k2);
    incr.scaled_add(2.0, &k3);
    incr += &k4;
    incr *= h / 6.0;
    incr + eye
}

/// Feynman-Kac propagator on a time grid.
///
/// Holds the per-cell factors `Φ(t_k, t_{k+1})` together with the prefix
/// products `Φ(0, t_k)` and suffix products `Φ(t_k, 1)`; any other
/// `Φ(t_k, t_l)` is assembled on demand.
#[derive(Debug, Clone)]
pub struct FKPropagator {
    grid: TimeGrid,
    factors: Vec<Array2<f64>>,
    prefix: Vec<Array2<f64>>,
    suffix: Vec<Array2<f64>>,
}

impl FKPropagator {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn factor(&self, k: usize) -> &Array2<f64> {
        &self.factors[k]
    }

    /// `Φ(t_k, t_l)` for node indices `k ≤ l`.
    pub fn between(&self, k: usize, l: usize) -> Array2<f64> {
        assert!(k <= l && l <= self.grid.steps(), "invalid node pair ({k}, {l})");
        if k == 0 {
            return self.prefix[l].clone();
        }
        if l == self.grid.steps() {
            return self.suffix[k].clone();
        }
        let n = self.factors[0].nrows();
        self.factors[k..l]
            .iter()
            .fold(Array2::eye(n), |acc, f| acc.dot(f))
    }

    /// `Φ(s, t)` for grid times `s ≤ t`.
    pub fn at(&self, s: f64, t: f64) -> Result<Array2<f64>> {
        let k = self.grid.index_of(s)?;
        let l = self.grid.index_of(t)?;
        if k > l {
            return Err(Error::Domain(format!("propagator needs s <= t, got s={s}, t={t}")));
        }
        Ok(self.between(k, l))
    }

    /// Backward sweep `g(t_k) = Φ(t_k, t_{k+1}) g(t_{k+1})`, `g(1) = γ`.
    pub fn solve_g(&self, gamma1: &TerminalWeight) -> Result<Array2<f64>> {
        let n = self.factors[0].nrows();
        check_len("terminal weight", n, gamma1.values().len())?;
        let steps = self.grid.steps();
        let mut g = Array2::zeros((steps + 1, n));
        g.row_mut(steps).assign(gamma1.values());
        for k in (0..steps).rev() {
            let next = self.factors[k].dot(&g.row(k + 1));
            g.row_mut(k).assign(&next);
        }
        Ok(g)
    }

    /// Forward sweep of the row vector `m ⊙ f0` divided by `m`.
    pub fn solve_f(&self, m: ArrayView1<f64>, f0: &InitialWeight) -> Result<Array2<f64>> {
        let n = self.factors[0].nrows();
        check_len("initial weight", n, f0.values().len())?;
        check_len("reversing measure", n, m.len())?;
        let steps = self.grid.steps();
        let mut mass = Array2::zeros((steps + 1, n));
        mass.row_mut(0).assign(&(&m * f0.values()));
        for k in 0..steps {
            let next = mass.row(k).dot(&self.factors[k]);
            mass.row_mut(k + 1).assign(&next);
        }
        for mut row in mass.rows_mut() {
            row /= &m;
        }
        Ok(mass)
    }
}

pub fn fk_propagator(
    model: &ReversibleModel,
    potential: &PotentialField,
    grid: TimeGrid,
) -> Result<FKPropagator> {
    potential.check_shape(grid, model.n())?;
    let q = model.generator();
    let h = grid.dt();
    let vals = potential.values();
    let steps = grid.steps();
    let factors: Vec<Array2<f64>> = (0..steps)
        .map(|k| {
            let mid = (&vals.row(k) + &vals.row(k + 1)) * 0.5;
            rk4_factor(q, vals.row(k), mid.view(), vals.row(k + 1), h)
        })
        .collect();
    let n = model.n();
    let mut prefix = Vec::with_capacity(steps + 1);
    prefix.push(Array2::eye(n));
    for f in &factors {
        let next = prefix.last().unwrap().dot(f);
        prefix.push(next);
    }
    let mut suffix = vec![Array2::eye(n); steps + 1];
    for k in (0..steps).rev() {
        suffix[k] = factors[k].dot(&suffix[k + 1]);
    }
    Ok(FKPropagator {
        grid,
        factors,
        prefix,
        suffix,
    })
}

/// `Φ(s, t)` for arbitrary real `0 ≤ s ≤ t ≤ 1`, stepping through the grid
/// nodes in between and using partial RK4 steps at the ends.
pub fn propagate_interval(
    model: &ReversibleModel,
    potential: &PotentialField,
    s: f64,
    t: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t {
        return Err(Error::Domain(format!("need 0 <= s <= t <= 1, got s={s}, t={t}")));
    }
    check_len("potential states", model.n(), potential.n())?;
    let steps = potential.steps() as f64;
    let q = model.generator();
    let mut acc = Array2::<f64>::eye(model.n());
    let mut a = s;
    while t - a > 1e-15 {
        let next_node = ((a * steps + 1e-9).floor() + 1.0) / steps;
        let b = next_node.min(t);
        let h = b - a;
        let fac = rk4_factor(
            q,
            potential.row_at(a).view(),
            potential.row_at(0.5 * (a + b)).view(),
            potential.row_at(b).view(),
            h,
        );
        acc = acc.dot(&fac);
        a = b;
    }
    Ok(acc)
}

/// `g(t_k, ·) = Φ(t_k, 1) γ`.
pub fn solve_g(
    model: &ReversibleModel,
    potential: &PotentialField,
    gamma1: &TerminalWeight,
    grid: TimeGrid,
) -> Result<Array2<f64>> {
    fk_propagator(model, potential, grid)?.solve_g(gamma1)
}

/// `f(t, y) = Σ_x m(x) f0(x) Φ(0, t)(x, y) / m(y)`.
pub fn solve_f(
    model: &ReversibleModel,
    potential: &PotentialField,
    f0: &InitialWeight,
    grid: TimeGrid,
) -> Result<Array2<f64>> {
    fk_propagator(model, potential, grid)?.solve_f(model.m().view(), f0)
}

/// Grid values of `g` and `f`.
#[derive(Debug, Clone)]
pub struct FKSolution {
    pub grid: TimeGrid,
    pub g: Array2<f64>,
    pub f: Array2<f64>,
}

impl FKSolution {
    pub fn solve(
        model: &ReversibleModel,
        potential: &PotentialField,
        f0: &InitialWeight,
        gamma1: &TerminalWeight,
        grid: TimeGrid,
    ) -> Result<Self> {
        let prop = fk_propagator(model, potential, grid)?;
        Self::from_propagator(&prop, model, f0, gamma1)
    }

    pub fn from_propagator(
        prop: &FKPropagator,
        model: &ReversibleModel,
        f0: &InitialWeight,
        gamma1: &TerminalWeight,
    ) -> Result<Self> {
        Ok(Self {
            grid: prop.grid(),
            g: prop.solve_g(gamma1)?,
            f: prop.solve_f(model.m().view(), f0)?,
        })
    }

    /// `Σ_y m(y) f(t_k, y) g(t_k, y)` per node.
    pub fn duality_profile(&self, m: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_shape_fn(self.grid.len(), |k| {
            (0..m.len()).map(|y| m[y] * self.f[[k, y]] * self.g[[k, y]]).sum()
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W, space: &StateSpace) -> io::Result<()> {
        writeln!(w, "# grid_N={}", self.grid.steps())?;
        writeln!(w, "t,state,g,f")?;
        for k in 0..self.grid.len() {
            let t = self.grid.node(k);
            for x in 0..space.len() {
                writeln!(
                    w,
                    "{t},{},{},{}",
                    space.label(x),
                    self.g[[k, x]],
                    self.f[[k, x]]
                )?;
            }
        }
        Ok(())
    }
}

/// `‖Φ(s, u) - Φ(s, t) Φ(t, u)‖_∞` (max absolute entry).
pub fn check_semigroup(prop: &FKPropagator, s: f64, t: f64, u: f64) -> Result<f64> {
    let grid = prop.grid();
    let (i, j, k) = (grid.index_of(s)?, grid.index_of(t)?, grid.index_of(u)?);
    if !(i <= j && j <= k) {
        return Err(Error::Domain(format!("need s <= t <= u, got {s}, {t}, {u}")));
    }
    if i == j || j == k {
        return Ok(0.0);
    }
    let whole = prop.between(i, k);
    let split = prop.between(i, j).dot(&prop.between(j, k));
    Ok(max_abs_diff(whole.view(), split.view()))
}

pub(crate) fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Second-order time derivative of node values: centered in the interior,
/// three-point one-sided at `t = 0` and `t = 1`.
pub fn time_derivative(values: ArrayView2<f64>, dt: f64) -> Array2<f64> {
    let rows = values.nrows();
    let mut d = Array2::zeros(values.dim());
    for k in 0..rows {
        let row = if k == 0 {
            (&values.row(1) * 4.0 - &values.row(2) - &values.row(0) * 3.0) / (2.0 * dt)
        } else if k == rows - 1 {
            (&values.row(k) * 3.0 - &values.row(k - 1) * 4.0 + &values.row(k - 2)) / (2.0 * dt)
        } else {
            (&values.row(k + 1) - &values.row(k - 1)) / (2.0 * dt)
        };
        d.row_mut(k).assign(&row);
    }
    d
}

/// Summary of a pointwise residual field.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub residual: Array2<f64>,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub grid_n: usize,
}

impl ResidualReport {
    /// Summarises `|residual|`, ignoring NaN entries (masked points).
    pub fn from_field(residual: Array2<f64>, grid_n: usize) -> Self {
        let finite: Vec<f64> = residual.iter().filter(|v| !v.is_nan()).map(|v| v.abs()).collect();
        let max_residual = finite.iter().copied().fold(0.0, f64::max);
        let mean_residual = if finite.is_empty() {
            0.0
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        Self {
            residual: residual.mapv(f64::abs),
            max_residual,
            mean_residual,
            grid_n,
        }
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "max_residual = {}", self.max_residual)?;
        writeln!(w, "mean_residual = {}", self.mean_residual)?;
        writeln!(w, "grid_N = {}", self.grid_n)
    }
}

/// Signed residual `∂̂_t g + Q g - V g` on every node.
pub fn fk_residual_signed(
    model: &ReversibleModel,
    potential: &PotentialField,
    g: ArrayView2<f64>,
    grid: TimeGrid,
) -> Result<Array2<f64>> {
    potential.check_shape(grid, model.n())?;
    check_len("g time nodes", grid.len(), g.nrows())?;
    check_len("g states", model.n(), g.ncols())?;
    let mut r = time_derivative(g, grid.dt());
    r += &g.dot(&model.generator().t());
    r -= &(&g * potential.values());
    Ok(r)
}

/// Pointwise `|∂̂_t g + Q g - V g|` with max and mean.
pub fn check_fk_generator(
    model: &ReversibleModel,
    potential: &PotentialField,
    g: ArrayView2<f64>,
    grid: TimeGrid,
) -> Result<ResidualReport> {
    let r = fk_residual_signed(model, potential, g, grid)?;
    Ok(ResidualReport::from_field(r, grid.steps()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub k: usize,
    pub t: f64,
    pub state: usize,
}

/// Grid points where `g ≤ threshold`.
pub fn positivity_report(g: ArrayView2<f64>, grid: TimeGrid, threshold: f64) -> Vec<GridPoint> {
    g.indexed_iter()
        .filter(|(_, &v)| !(v > threshold))
        .map(|((k, state), _)| GridPoint {
            k,
            t: grid.node(k),
            state,
        })
        .collect()
}
