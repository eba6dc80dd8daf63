//! The h-process `P = f0(X_0) exp(-∫_0^1 V_t(X_t) dt) γ(X_1) R`.
//!
//! Built from a reversible model, weights `(f0, γ)` and a potential `V`. The
//! normalisation constant `c = Σ_x m(x) f0(x) g(0, x)` is folded into `f0`,
//! after which
//!
//! * the time-`t` marginal is `P_t(x) = f(t, x) g(t, x) m(x)`;
//! * `P` jumps with rates `J^P(t, x, y) = g(t, y) / g(t, x) · J(x, y)`.
//!
//! Between grid nodes `g` is interpolated linearly for the thinning sampler
//! and by cubic Hermite interpolation (using `∂_t g = -Q g + V g` at the
//! nodes) inside RK4 stages of the master equation.

use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::{
    fk_propagator, positivity_report, FKPropagator, FKSolution, InitialWeight, PotentialField,
    TerminalWeight, POSITIVITY_THRESHOLD,
};
use crate::grid::TimeGrid;
use crate::markov::{sample_index, Jump, PathSample, ReversibleModel};
use crate::rng::Seed;

/// Tolerance on `|Σ m f0 g0 - 1|` after normalisation.
pub const NORMALIZATION_TOL: f64 = 1e-10;
const THINNING_MARGIN: f64 = 1.1;
const MAX_SUBDIVISION_DEPTH: usize = 20;
/// Grid cells sharing one thinning bound.
const THINNING_BLOCK: usize = 16;

#[derive(Debug, Clone)]
pub struct HProcess {
    model: ReversibleModel,
    f0: InitialWeight,
    gamma1: TerminalWeight,
    potential: PotentialField,
    propagator: FKPropagator,
    fk: FKSolution,
    normalization: f64,
    g_rate: Array2<f64>,
    /// Per block of cells and state, an upper bound on the exit rate of `P`
    /// with linearly interpolated `g`; infinite where `g` vanishes.
    block_bounds: Array2<f64>,
    /// Nodes before `t = 1` where `g` is not positive.
    vanishing_before_end: usize,
}

/// Rates `g(y)/g(x) J(x, y)`; rows where `g(x) ≤ threshold` are zero and
/// marked unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedRates {
    pub rates: Array2<f64>,
    pub usable: Vec<bool>,
}

pub fn h_transform_rates(j: &Array2<f64>, g: ArrayView1<f64>) -> Result<TransformedRates> {
    let n = j.nrows();
    check_len("g", n, g.len())?;
    let mut rates = Array2::zeros((n, n));
    let mut usable = vec![true; n];
    for x in 0..n {
        if !(g[x] > POSITIVITY_THRESHOLD) {
            usable[x] = false;
            continue;
        }
        for y in 0..n {
            if j[[x, y]] > 0.0 {
                rates[[x, y]] = g[y] / g[x] * j[[x, y]];
            }
        }
    }
    Ok(TransformedRates { rates, usable })
}

/// `J^P(t_k, ·, ·)` for every node.
#[derive(Debug, Clone)]
pub struct TimeDependentKernel {
    pub grid: TimeGrid,
    pub rates: Vec<TransformedRates>,
}

impl HProcess {
    /// Solves for `g`, normalises `f0` so that `Σ m f0 g0 = 1`, then solves for `f`.
    pub fn build(
        model: &ReversibleModel,
        f0: &InitialWeight,
        gamma1: &TerminalWeight,
        potential: &PotentialField,
        grid: TimeGrid,
    ) -> Result<Self> {
        let n = model.n();
        check_len("initial weight", n, f0.values().len())?;
        check_len("terminal weight", n, gamma1.values().len())?;
        let propagator = fk_propagator(model, potential, grid)?;
        let g = propagator.solve_g(gamma1)?;
        let m = model.m();
        let c: f64 = (0..n).map(|x| m[x] * f0.values()[x] * g[[0, x]]).sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "normalisation constant {c} is not positive; P would be the null measure"
            )));
        }
        let f0 = InitialWeight::new(f0.values() / c)?;
        let f = propagator.solve_f(m.view(), &f0)?;
        let fk = FKSolution { grid, g, f };
        let mut g_rate = fk.g.dot(&model.generator().t()) * -1.0;
        g_rate += &(&fk.g * potential.values());
        let mut hp = Self {
            model: model.clone(),
            f0,
            gamma1: gamma1.clone(),
            potential: potential.clone(),
            propagator,
            fk,
            normalization: c,
            g_rate,
            block_bounds: Array2::zeros((0, 0)),
            vanishing_before_end: 0,
        };
        hp.block_bounds = hp.thinning_bounds();
        let last = grid.steps();
        hp.vanishing_before_end = positivity_report(hp.fk.g.view(), grid, POSITIVITY_THRESHOLD)
            .into_iter()
            .filter(|p| p.k < last)
            .count();
        let mass = hp.marginal_at(0).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::Inconsistency(format!(
                "initial mass {mass} after normalisation"
            )));
        }
        Ok(hp)
    }

    pub fn model(&self) -> &ReversibleModel {
        &self.model
    }

    pub fn f0(&self) -> &InitialWeight {
        &self.f0
    }

    pub fn gamma1(&self) -> &TerminalWeight {
        &self.gamma1
    }

    pub fn potential(&self) -> &PotentialField {
        &self.potential
    }

    pub fn propagator(&self) -> &FKPropagator {
        &self.propagator
    }

    pub fn fk(&self) -> &FKSolution {
        &self.fk
    }

    pub fn grid(&self) -> TimeGrid {
        self.fk.grid
    }

    /// The constant `c` that `f0` was divided by.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn marginal_at(&self, k: usize) -> Array1<f64> {
        let m = self.model.m();
        Array1::from_shape_fn(self.n(), |x| self.fk.f[[k, x]] * self.fk.g[[k, x]] * m[x])
    }

    /// `P_t = f_t g_t m` at a grid time.
    pub fn marginal(&self, t: f64) -> Result<Array1<f64>> {
        Ok(self.marginal_at(self.grid().index_of(t)?))
    }

    /// All marginals, one row per node.
    pub fn marginals(&self) -> Array2<f64> {
        let mut out = &self.fk.f * &self.fk.g;
        for mut row in out.rows_mut() {
            row *= self.model.m();
        }
        out
    }

    /// `g(τ, ·)` linearly interpolated between nodes.
    pub fn g_linear(&self, tau: f64) -> Array1<f64> {
        let (k, w) = self.grid().locate(tau);
        let a = self.fk.g.row(k);
        let b = self.fk.g.row(k + 1);
        Array1::from_shape_fn(self.n(), |x| (1.0 - w) * a[x] + w * b[x])
    }

    /// `g(τ, ·)` by cubic Hermite interpolation with node derivatives
    /// `-Q g + V g`.
    pub fn g_hermite(&self, tau: f64) -> Array1<f64> {
        let grid = self.grid();
        let (k, w) = grid.locate(tau);
        let h = grid.dt();
        let (w2, w3) = (w * w, w * w * w);
        let h00 = 2.0 * w3 - 3.0 * w2 + 1.0;
        let h10 = w3 - 2.0 * w2 + w;
        let h01 = -2.0 * w3 + 3.0 * w2;
        let h11 = w3 - w2;
        Array1::from_shape_fn(self.n(), |x| {
            h00 * self.fk.g[[k, x]]
                + h10 * h * self.g_rate[[k, x]]
                + h01 * self.fk.g[[k + 1, x]]
                + h11 * h * self.g_rate[[k + 1, x]]
        })
    }

    /// `J^P(t, ·, ·)` at a grid time.
    pub fn jump_kernel(&self, t: f64) -> Result<TransformedRates> {
        let k = self.grid().index_of(t)?;
        self.jump_kernel_at(k)
    }

    pub fn jump_kernel_at(&self, k: usize) -> Result<TransformedRates> {
        let kernel = h_transform_rates(self.model.rates(), self.fk.g.row(k))?;
        let p = self.marginal_at(k);
        for (x, &ok) in kernel.usable.iter().enumerate() {
            if !ok && p[x] > 0.0 {
                return Err(Error::Inconsistency(format!(
                    "g vanishes at t={}, state {x}, where P_t has mass {}",
                    self.grid().node(k),
                    p[x]
                )));
            }
        }
        Ok(kernel)
    }

    pub fn time_dependent_kernel(&self) -> Result<TimeDependentKernel> {
        let grid = self.grid();
        let rates = (0..grid.len())
            .map(|k| self.jump_kernel_at(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(TimeDependentKernel { grid, rates })
    }

    /// Generator of `P` at an arbitrary time, built from Hermite-interpolated `g`.
    pub fn generator_at(&self, tau: f64) -> Result<Array2<f64>> {
        let g = self.g_hermite(tau);
        let mut q = h_transform_rates(self.model.rates(), g.view())?.rates;
        for x in 0..self.n() {
            if !(g[x] > POSITIVITY_THRESHOLD) {
                return Err(Error::DivisionGuard { t: tau, state: x });
            }
            let out: f64 = q.row(x).sum();
            q[[x, x]] = -out;
        }
        Ok(q)
    }

    pub(crate) fn require_positive_g(&self) -> Result<()> {
        let flags = positivity_report(self.fk.g.view(), self.grid(), POSITIVITY_THRESHOLD);
        if !flags.is_empty() {
            return Err(Error::PositivityViolation {
                flagged: flags.len(),
            });
        }
        Ok(())
    }

    /// Master equation `dp/dt = p Q^P(t)` from `p_0 = P_0`, RK4 on the grid.
    pub fn forward_marginal_evolve(&self) -> Result<Array2<f64>> {
        self.require_positive_g()?;
        let grid = self.grid();
        let h = grid.dt();
        let mut out = Array2::zeros((grid.len(), self.n()));
        out.row_mut(0).assign(&self.marginal_at(0));
        let mut q_start = self.generator_at(0.0)?;
        for k in 0..grid.steps() {
            let t = grid.node(k);
            let q_mid = self.generator_at(t + 0.5 * h)?;
            let q_end = self.generator_at(grid.node(k + 1))?;
            let p = out.row(k).to_owned();
            let k1 = p.dot(&q_start);
            let k2 = (&p + &(&k1 * (0.5 * h))).dot(&q_mid);
            let k3 = (&p + &(&k2 * (0.5 * h))).dot(&q_mid);
            let k4 = (&p + &(&k3 * h)).dot(&q_end);
            let next = &p + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0));
            out.row_mut(k + 1).assign(&next);
            q_start = q_end;
        }
        Ok(out)
    }

    /// `H(P|R) = Σ P_0 log f0 - ∫ Σ P_t V_t dt + Σ P_1 log γ`, with the time
    /// integral by the trapezoidal rule on the grid and `0 log 0 = 0`.
    pub fn relative_entropy(&self) -> Result<f64> {
        let grid = self.grid();
        let steps = grid.steps();
        let marg = self.marginals();
        let log_term = |p: ArrayView1<f64>, w: &Array1<f64>, what: &str| -> Result<f64> {
            let mut s = 0.0;
            for (x, (&px, &wx)) in p.iter().zip(w.iter()).enumerate() {
                if px > 0.0 {
                    if !(wx > 0.0) {
                        return Err(Error::Inconsistency(format!(
                            "P charges state {x} where {what} vanishes"
                        )));
                    }
                    s += px * wx.ln();
                }
            }
            Ok(s)
        };
        let start = log_term(marg.row(0), self.f0.values(), "f0")?;
        let end = log_term(marg.row(steps), self.gamma1.values(), "gamma1")?;
        let v = self.potential.values();
        let mut integral = 0.0;
        for k in 0..=steps {
            let w = if k == 0 || k == steps { 0.5 } else { 1.0 };
            integral += w * marg.row(k).dot(&v.row(k));
        }
        integral *= grid.dt();
        Ok(start - integral + end)
    }

    /// `dP_{[s,t]}/dR_{[s,t]}` on a path between grid times `s ≤ t`:
    /// `(dP_s/dm)(X_s) g(s, X_s)^{-1} exp(-∫_s^t V) g(t, X_t)`.
    pub fn path_density_ratio(&self, path: &PathSample, s: f64, t: f64) -> Result<f64> {
        let grid = self.grid();
        let (ks, kt) = (grid.index_of(s)?, grid.index_of(t)?);
        if ks > kt {
            return Err(Error::Domain(format!("need s <= t, got s={s}, t={t}")));
        }
        let xs = path.state_at(s);
        let xt = path.state_at(t);
        if xs >= self.n() || xt >= self.n() {
            return Err(Error::InvalidInput("path visits unknown state".into()));
        }
        let gs = self.fk.g[[ks, xs]];
        if !(gs > POSITIVITY_THRESHOLD) {
            return Err(Error::DivisionGuard { t: s, state: xs });
        }
        let density_s = self.fk.f[[ks, xs]] * gs;
        let exponent: f64 = path
            .pieces(s, t)
            .into_iter()
            .map(|(a, b, x)| self.potential.integrate(x, a, b))
            .sum();
        Ok(density_s / gs * (-exponent).exp() * self.fk.g[[kt, xt]])
    }

    /// Total jump rate out of `x` at time `tau` with linearly interpolated `g`.
    fn exit_rate_linear(&self, x: usize, tau: f64) -> f64 {
        let (k, w) = self.grid().locate(tau);
        let g = &self.fk.g;
        let lerp = |y: usize| (1.0 - w) * g[[k, y]] + w * g[[k + 1, y]];
        let gx = lerp(x);
        if !(gx > POSITIVITY_THRESHOLD) {
            return f64::INFINITY;
        }
        let j = self.model.rates().row(x);
        j.iter()
            .enumerate()
            .filter(|(_, r)| **r > 0.0)
            .map(|(y, r)| r * lerp(y))
            .sum::<f64>()
            / gx
    }

    /// Within a cell the exit rate is a ratio of linear functions of time,
    /// hence monotone, so its endpoint maximum bounds it on the cell.
    fn thinning_bounds(&self) -> Array2<f64> {
        let grid = self.grid();
        let steps = grid.steps();
        let node_rate = Array2::from_shape_fn((grid.len(), self.n()), |(k, x)| {
            self.exit_rate_linear(x, grid.node(k))
        });
        let blocks = steps.div_ceil(THINNING_BLOCK);
        Array2::from_shape_fn((blocks, self.n()), |(j, x)| {
            let (k0, k1) = (j * THINNING_BLOCK, ((j + 1) * THINNING_BLOCK).min(steps));
            THINNING_MARGIN * (k0..=k1).map(|k| node_rate[[k, x]]).fold(0.0, f64::max)
        })
    }

    /// One `P`-path by thinning against constant bounds on blocks of cells.
    pub fn sample_path(&self, seed: Seed) -> Result<PathSample> {
        if self.vanishing_before_end > 0 {
            return Err(Error::PositivityViolation {
                flagged: self.vanishing_before_end,
            });
        }
        let mut rng = seed.rng();
        let p0 = self.marginal_at(0);
        let x0 = sample_index(p0.view(), p0.sum(), &mut rng);
        let mut x = x0;
        let mut jumps = Vec::new();
        for j in 0..self.block_bounds.nrows() {
            self.thin_block(j, &mut x, &mut jumps, &mut rng)?;
        }
        Ok(PathSample {
            initial: x0,
            jumps,
            seed,
        })
    }

    /// `count` paths, path `i` on stream `i` of `seed`.
    pub fn sample_paths(&self, count: usize, seed: u64) -> Result<Vec<PathSample>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.sample_path(Seed::new(seed).with_stream(i)))
            .collect()
    }

    fn jump_from<R: Rng>(&self, x: usize, tau: f64, rng: &mut R) -> usize {
        let g = self.g_linear(tau);
        let weights = &self.model.rates().row(x) * &g;
        sample_index(weights.view(), weights.sum(), rng)
    }

    fn thin_block<R: Rng>(&self, j: usize, x: &mut usize, jumps: &mut Vec<Jump>, rng: &mut R) -> Result<()> {
        let grid = self.grid();
        let k0 = j * THINNING_BLOCK;
        let k1 = ((j + 1) * THINNING_BLOCK).min(grid.steps());
        let b = grid.node(k1);
        let mut now = grid.node(k0);
        loop {
            let bound = self.block_bounds[[j, *x]];
            if !bound.is_finite() {
                // Cell by cell, with subdivision near vanishing g.
                let (start, _) = grid.locate(now);
                for k in start..k1 {
                    let a = now.max(grid.node(k));
                    self.thin_interval(a, grid.node(k + 1), x, jumps, rng, 0)?;
                }
                return Ok(());
            }
            if bound == 0.0 {
                return Ok(());
            }
            let e: f64 = rng.sample(Exp1);
            let tau = now + e / bound;
            if tau >= b {
                return Ok(());
            }
            let rate = self.exit_rate_linear(*x, tau);
            if !(rate <= bound) {
                return Err(Error::Inconsistency(format!(
                    "exit rate {rate} exceeds its thinning bound {bound} at t={tau}"
                )));
            }
            now = tau;
            if rng.random::<f64>() * bound < rate {
                let y = self.jump_from(*x, tau, rng);
                jumps.push(Jump { time: tau, state: y });
                *x = y;
            }
        }
    }

    fn thin_interval<R: Rng>(
        &self,
        a: f64,
        b: f64,
        x: &mut usize,
        jumps: &mut Vec<Jump>,
        rng: &mut R,
        depth: usize,
    ) -> Result<()> {
        let mut now = a;
        loop {
            let bound = THINNING_MARGIN
                * self
                    .exit_rate_linear(*x, now)
                    .max(self.exit_rate_linear(*x, b));
            if !bound.is_finite() {
                return self.subdivide(now, b, x, jumps, rng, depth);
            }
            if bound == 0.0 {
                return Ok(());
            }
            let e: f64 = rng.sample(Exp1);
            let tau = now + e / bound;
            if tau >= b {
                return Ok(());
            }
            let rate = self.exit_rate_linear(*x, tau);
            if rate > bound {
                return self.subdivide(now, b, x, jumps, rng, depth);
            }
            now = tau;
            if rng.random::<f64>() * bound < rate {
                let y = self.jump_from(*x, tau, rng);
                jumps.push(Jump { time: tau, state: y });
                *x = y;
            }
        }
    }

    fn subdivide<R: Rng>(
        &self,
        a: f64,
        b: f64,
        x: &mut usize,
        jumps: &mut Vec<Jump>,
        rng: &mut R,
        depth: usize,
    ) -> Result<()> {
        if depth >= MAX_SUBDIVISION_DEPTH {
            return Err(Error::SubdivisionDepthExceeded(MAX_SUBDIVISION_DEPTH));
        }
        let mid = 0.5 * (a + b);
        self.thin_interval(a, mid, x, jumps, rng, depth + 1)?;
        self.thin_interval(mid, b, x, jumps, rng, depth + 1)
    }

    pub fn write_marginals_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let grid = self.grid();
        let marg = self.marginals();
        writeln!(w, "# grid_N={}", grid.steps())?;
        writeln!(w, "t,state,p")?;
        for k in 0..grid.len() {
            for x in 0..self.n() {
                writeln!(
                    w,
                    "{},{},{}",
                    grid.node(k),
                    self.model.space().label(x),
                    marg[[k, x]]
                )?;
            }
        }
        Ok(())
    }

    /// `t,from,to,rate` for every node and every positive base rate.
    pub fn write_kernel_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let kernel = self.time_dependent_kernel()?;
        let space = self.model.space();
        let base = self.model.rates();
        let io_err = |e: io::Error| Error::InvalidInput(format!("write failed: {e}"));
        writeln!(w, "# grid_N={}", kernel.grid.steps()).map_err(io_err)?;
        writeln!(w, "t,from,to,rate").map_err(io_err)?;
        for (k, r) in kernel.rates.iter().enumerate() {
            let t = kernel.grid.node(k);
            for x in 0..self.n() {
                for y in 0..self.n() {
                    if base[[x, y]] > 0.0 && r.usable[x] {
                        writeln!(
                            w,
                            "{t},{},{},{}",
                            space.label(x),
                            space.label(y),
                            r.rates[[x, y]]
                        )
                        .map_err(io_err)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// `∫ f0² log₊^p(f0) dm` and `∫ γ² log₊^p(γ) dm`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySufficiency {
    pub p: f64,
    pub f0_integral: f64,
    pub gamma1_integral: f64,
    pub satisfied: bool,
    pub verdict: String,
}

pub fn entropy_sufficiency_report(
    f0: ArrayView1<f64>,
    gamma1: ArrayView1<f64>,
    m: ArrayView1<f64>,
    p: f64,
) -> Result<EntropySufficiency> {
    if !(p > 1.0) {
        return Err(Error::Domain(format!("exponent p={p} must exceed 1")));
    }
    check_len("f0", m.len(), f0.len())?;
    check_len("gamma1", m.len(), gamma1.len())?;
    let integral = |w: ArrayView1<f64>| -> f64 {
        w.iter()
            .zip(m.iter())
            .map(|(&v, &mx)| {
                let lp = if v > 1.0 { v.ln() } else { 0.0 };
                if lp == 0.0 {
                    0.0
                } else {
                    mx * v * v * lp.powf(p)
                }
            })
            .sum()
    };
    let f0_integral = integral(f0);
    let gamma1_integral = integral(gamma1);
    let satisfied = f0_integral.is_finite() && gamma1_integral.is_finite();
    let verdict = if satisfied {
        "satisfied (finite space)".to_string()
    } else {
        "violated: infinite integral".to_string()
    };
    Ok(EntropySufficiency {
        p,
        f0_integral,
        gamma1_integral,
        satisfied,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::{JumpKernel, StateSpace};
    use ndarray::array;

    fn two_state() -> ReversibleModel {
        let base = JumpKernel::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        ReversibleModel::build_metropolis(
            StateSpace::numbered(2).unwrap(),
            &base,
            array![1.0, 1.0].view(),
            array![0.0, 2f64.ln()].view(),
        )
        .unwrap()
    }

    fn three_state() -> ReversibleModel {
        let base = JumpKernel::new(array![[0.0, 1.0, 0.5], [1.0, 0.0, 1.0], [0.5, 1.0, 0.0]])
            .unwrap();
        ReversibleModel::build_metropolis(
            StateSpace::numbered(3).unwrap(),
            &base,
            array![1.0, 1.0, 1.0].view(),
            array![0.0, 0.4, -0.3].view(),
        )
        .unwrap()
    }

    #[test]
    fn identity_transform() {
        let model = two_state();
        let grid = TimeGrid::new(100).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(2),
            &TerminalWeight::ones(2),
            &PotentialField::zero(grid, 2),
            grid,
        )
        .unwrap();
        assert!((hp.normalization() - 1.0).abs() < 1e-13);
        for k in [0, 37, 100] {
            let p = hp.marginal_at(k);
            assert!((&p - model.m()).iter().all(|d| d.abs() < 1e-12));
        }
        assert!(hp.relative_entropy().unwrap().abs() < 1e-12);
        let jp = hp.jump_kernel(0.5).unwrap();
        assert!((&jp.rates - model.rates()).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn constant_potential_normalisation() {
        let model = two_state();
        let grid = TimeGrid::new(200).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(2),
            &TerminalWeight::ones(2),
            &PotentialField::constant(grid, 2, 1.0),
            grid,
        )
        .unwrap();
        assert!((hp.normalization() - (-1f64).exp()).abs() < 1e-10);
        assert!(hp.f0().values().iter().all(|v| (v - 1f64.exp()).abs() < 1e-9));
        assert!(hp.relative_entropy().unwrap().abs() < 1e-9);
        for k in [0, 100, 200] {
            assert!((&hp.marginal_at(k) - model.m()).iter().all(|d| d.abs() < 1e-10));
        }
    }

    #[test]
    fn transformed_rates_two_state() {
        let j = array![[0.0, 0.5], [2.0, 0.0]];
        let r = h_transform_rates(&j, array![1.0, 2.0].view()).unwrap();
        assert_eq!(r.rates, array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(r.usable, vec![true, true]);
        let r = h_transform_rates(&j, array![0.0, 2.0].view()).unwrap();
        assert_eq!(r.usable, vec![false, true]);
        assert_eq!(r.rates.row(0).sum(), 0.0);
        assert_eq!(r.rates[[1, 0]], 0.0);
    }

    #[test]
    fn marginal_requires_grid_times() {
        let model = two_state();
        let grid = TimeGrid::new(10).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(2),
            &TerminalWeight::ones(2),
            &PotentialField::zero(grid, 2),
            grid,
        )
        .unwrap();
        assert!(hp.marginal(0.55).is_err());
        assert!(hp.jump_kernel(0.55).is_err());
    }

    #[test]
    fn pinning_to_a_state() {
        let model = three_state();
        let grid = TimeGrid::new(1000).unwrap();
        let z = 2;
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(3),
            &TerminalWeight::new(array![0.0, 0.0, 1.0]).unwrap(),
            &PotentialField::zero(grid, 3),
            grid,
        )
        .unwrap();
        let mut last_exit = f64::INFINITY;
        for k in [900, 950, 990, 999] {
            let t = grid.node(k);
            let jp = hp.jump_kernel_at(k).unwrap();
            let phi = model.transition_matrix(1.0 - t).unwrap();
            for y in 0..3 {
                if y == z {
                    continue;
                }
                let expected = phi[[y, z]] / phi[[z, z]] * model.rates()[[z, y]];
                assert!((jp.rates[[z, y]] - expected).abs() < 1e-9 * (1.0 + expected));
            }
            let exit = jp.rates.row(z).sum();
            assert!(exit < last_exit);
            last_exit = exit;
        }
        assert!(last_exit < 0.01);
        // P_1 concentrates on z.
        let p1 = hp.marginal_at(1000);
        assert!((p1[z] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pinned_paths_end_at_the_target() {
        let model = three_state();
        let grid = TimeGrid::new(200).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(3),
            &TerminalWeight::new(array![0.0, 0.0, 1.0]).unwrap(),
            &PotentialField::zero(grid, 3),
            grid,
        )
        .unwrap();
        let paths = hp.sample_paths(2000, 17).unwrap();
        assert!(paths.iter().all(|p| p.final_state() == 2 && p.is_well_formed()));
    }

    #[test]
    fn forward_evolution_refuses_vanishing_g() {
        let model = two_state();
        let grid = TimeGrid::new(50).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(2),
            &TerminalWeight::new(array![0.0, 1.0]).unwrap(),
            &PotentialField::zero(grid, 2),
            grid,
        )
        .unwrap();
        assert_eq!(
            hp.forward_marginal_evolve().unwrap_err().reason(),
            "positivity_flag"
        );
    }

    #[test]
    fn forward_evolution_identity() {
        let model = three_state();
        let grid = TimeGrid::new(100).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::ones(3),
            &TerminalWeight::ones(3),
            &PotentialField::zero(grid, 3),
            grid,
        )
        .unwrap();
        let p = hp.forward_marginal_evolve().unwrap();
        for row in p.rows() {
            assert!((&row - model.m()).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn hermite_interpolation_beats_linear() {
        let model = three_state();
        let grid = TimeGrid::new(20).unwrap();
        let fine = TimeGrid::new(2000).unwrap();
        let v = |g| PotentialField::from_fn(g, 3, |t, x| (x as f64) * (1.0 + t)).unwrap();
        let gamma = TerminalWeight::new(array![1.0, 2.0, 0.5]).unwrap();
        let coarse = HProcess::build(&model, &InitialWeight::ones(3), &gamma, &v(grid), grid)
            .unwrap();
        let reference =
            HProcess::build(&model, &InitialWeight::ones(3), &gamma, &v(fine), fine).unwrap();
        let tau = 0.525;
        let exact = reference.fk().g.row(fine.index_of(tau).unwrap()).to_owned();
        let herm = (&coarse.g_hermite(tau) - &exact).mapv(f64::abs).sum();
        let lin = (&coarse.g_linear(tau) - &exact).mapv(f64::abs).sum();
        assert!(herm < lin / 20.0, "hermite {herm} linear {lin}");
    }

    #[test]
    fn density_ratio_endpoints() {
        let model = two_state();
        let grid = TimeGrid::new(10).unwrap();
        let v = PotentialField::from_fn(grid, 2, |t, x| x as f64 * (1.0 + t)).unwrap();
        let gamma = TerminalWeight::new(array![2.0, 0.5]).unwrap();
        let hp = HProcess::build(&model, &InitialWeight::new(array![1.0, 3.0]).unwrap(), &gamma, &v, grid)
            .unwrap();
        let path = PathSample {
            initial: 1,
            jumps: vec![Jump { time: 0.3, state: 0 }],
            seed: Seed::new(0),
        };
        // ∫ V along the path: state 1 on [0, 0.3] gives 0.3 + 0.045.
        let expected = hp.f0().values()[1] * (-(0.3 + 0.045f64)).exp() * 2.0;
        let got = hp.path_density_ratio(&path, 0.0, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected);
        assert!(hp.path_density_ratio(&path, 0.05, 1.0).is_err());
    }

    #[test]
    fn sampler_is_deterministic() {
        let model = two_state();
        let grid = TimeGrid::new(100).unwrap();
        let hp = HProcess::build(
            &model,
            &InitialWeight::new(array![1.0, 2.0]).unwrap(),
            &TerminalWeight::new(array![0.2, 1.0]).unwrap(),
            &PotentialField::constant(grid, 2, 0.5),
            grid,
        )
        .unwrap();
        let a = hp.sample_path(Seed::new(4)).unwrap();
        assert_eq!(a, hp.sample_path(Seed::new(4)).unwrap());
        assert!(a.is_well_formed());
    }

    #[test]
    fn entropy_sufficiency_values() {
        let m = array![0.5, 0.5];
        let r = entropy_sufficiency_report(array![1.0, 1.0].view(), array![1.0, 1.0].view(), m.view(), 2.0)
            .unwrap();
        assert_eq!(r.f0_integral, 0.0);
        let e = 1f64.exp();
        let r = entropy_sufficiency_report(array![e, 1.0].view(), array![1.0, 1.0].view(), m.view(), 2.0)
            .unwrap();
        assert!((r.f0_integral - 0.5 * e * e).abs() < 1e-12);
        assert!((r.f0_integral - 3.6945).abs() < 1e-4);
        assert!(r.satisfied);
        assert_eq!(r.verdict, "satisfied (finite space)");
        assert!(entropy_sufficiency_report(m.view(), m.view(), m.view(), 1.0).is_err());
    }
}
