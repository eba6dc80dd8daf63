//! Finite-difference stochastic derivatives and carré du champ.
//!
//! The stochastic derivative of `u` at `(t, x)` is estimated from exact
//! transition matrices,
//!
//! ```text
//! D_h u(x) = ((T_{t,t+h} u)(x) - u(x)) / h
//! ```
//!
//! and sharpened by two levels of Richardson extrapolation over `h, h/2, h/4`.
//! For the h-process the transition matrix is the Doob transform of the
//! Feynman-Kac propagator, `T(x, y) = Φ(t, t+h)(x, y) g(t+h, y) / g(t, x)`,
//! which does not use the jump rates of `P`. Comparing its limit with
//! `Q u + Γ(g_t, u) / g_t` therefore checks the generator identity by two
//! independent routes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::{propagate_interval, PotentialField, POSITIVITY_THRESHOLD};
use crate::grid::TimeGrid;
use crate::h_transform::HProcess;
use crate::markov::ReversibleModel;

/// Default step sequence for stochastic derivatives.
pub const DEFAULT_STEPS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];
/// Steps below this are refused.
pub const MIN_STEP: f64 = 1e-8;
/// States with `P_t(x)` at or below this are excluded from residuals.
pub const MASS_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub enum Process<'a> {
    Reference(&'a ReversibleModel),
    Transformed(&'a HProcess),
}

#[derive(Debug, Clone)]
pub struct DerivativeEstimate {
    /// Plain difference quotient at the largest step.
    pub value: Array1<f64>,
    pub h_sequence: Vec<f64>,
    /// Two-level Richardson extrapolation.
    pub extrapolated: Array1<f64>,
    /// `log2` of successive differences of the plain quotients.
    pub observed_order: f64,
}

/// `g(τ, ·)` at an arbitrary time, propagated back from the next node.
fn g_at(hp: &HProcess, tau: f64) -> Result<Array1<f64>> {
    let grid = hp.grid();
    let scaled = tau * grid.steps() as f64;
    if (scaled - scaled.round()).abs() < 1e-9 {
        return Ok(hp.fk().g.row(scaled.round() as usize).to_owned());
    }
    let next = scaled.ceil() as usize;
    let phi = propagate_interval(hp.model(), hp.potential(), tau, grid.node(next))?;
    Ok(phi.dot(&hp.fk().g.row(next)))
}

/// Transition matrix of `P` from `s` to `t` as the Doob transform of the
/// Feynman-Kac propagator.
pub fn doob_transition(hp: &HProcess, s: f64, t: f64) -> Result<Array2<f64>> {
    let phi = propagate_interval(hp.model(), hp.potential(), s, t)?;
    let gs = g_at(hp, s)?;
    let gt = g_at(hp, t)?;
    let n = hp.n();
    let mut out = Array2::zeros((n, n));
    for x in 0..n {
        if !(gs[x] > POSITIVITY_THRESHOLD) {
            return Err(Error::DivisionGuard { t: s, state: x });
        }
        for y in 0..n {
            out[[x, y]] = phi[[x, y]] * gt[y] / gs[x];
        }
    }
    Ok(out)
}

/// Time-ordered exponential of `Q^P` from `s` to `t`: RK4 over the grid
/// cells (partial cells at the ends) with `Q^P(τ)` built from
/// Hermite-interpolated `g`.
pub fn transition_matrix_p(hp: &HProcess, s: f64, t: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t {
        return Err(Error::Domain(format!("need 0 <= s <= t <= 1, got s={s}, t={t}")));
    }
    let grid = hp.grid();
    let steps = grid.steps() as f64;
    let first = (s * steps + 1e-9).floor() as usize;
    let last = ((t * steps - 1e-9).ceil().max(0.0) as usize).min(grid.steps());
    let g = &hp.fk().g;
    for k in first..=last {
        for x in 0..hp.n() {
            if !(g[[k, x]] > POSITIVITY_THRESHOLD) {
                return Err(Error::DivisionGuard {
                    t: grid.node(k),
                    state: x,
                });
            }
        }
    }
    let n = hp.n();
    let mut acc = Array2::<f64>::eye(n);
    let mut a = s;
    while t - a > 1e-15 {
        let next_node = ((a * steps + 1e-9).floor() + 1.0) / steps;
        let b = next_node.min(t);
        let h = b - a;
        let q0 = hp.generator_at(a)?;
        let qm = hp.generator_at(0.5 * (a + b))?;
        let q1 = hp.generator_at(b)?;
        let k1 = acc.dot(&q0);
        let k2 = (&acc + &(&k1 * (0.5 * h))).dot(&qm);
        let k3 = (&acc + &(&k2 * (0.5 * h))).dot(&qm);
        let k4 = (&acc + &(&k3 * h)).dot(&q1);
        acc = &acc + &((&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0));
        a = b;
    }
    Ok(acc)
}

fn max_abs(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

fn richardson(quotients: &[Array1<f64>; 3]) -> Array1<f64> {
    let r_coarse = &quotients[1] * 2.0 - &quotients[0];
    let r_fine = &quotients[2] * 2.0 - &quotients[1];
    (&r_fine * 4.0 - &r_coarse) / 3.0
}

fn observed_order(quotients: &[Array1<f64>; 3]) -> f64 {
    let d1 = max_abs((&quotients[0] - &quotients[1]).view());
    let d2 = max_abs((&quotients[1] - &quotients[2]).view());
    (d1 / d2).log2()
}

/// Stochastic derivative of `u` at time `t` with steps `h, h/2, h/4`.
pub fn stochastic_derivative(
    process: Process<'_>,
    u: ArrayView1<f64>,
    t: f64,
    h: f64,
) -> Result<DerivativeEstimate> {
    let n = match process {
        Process::Reference(m) => m.n(),
        Process::Transformed(hp) => hp.n(),
    };
    check_len("test function", n, u.len())?;
    if !(h >= MIN_STEP) {
        return Err(Error::StepTooSmall(h));
    }
    let h_sequence = vec![h, h / 2.0, h / 4.0];
    if h_sequence[2] < MIN_STEP {
        return Err(Error::StepTooSmall(h_sequence[2]));
    }
    if !(0.0..=1.0).contains(&t) || t + h > 1.0 + 1e-12 {
        return Err(Error::Domain(format!("need t + h <= 1, got t={t}, h={h}")));
    }
    let quotient = |step: f64| -> Result<Array1<f64>> {
        let trans = match process {
            Process::Reference(m) => m.transition_matrix(step)?,
            Process::Transformed(hp) => doob_transition(hp, t, (t + step).min(1.0))?,
        };
        Ok((trans.dot(&u) - &u) / step)
    };
    let q = [
        quotient(h_sequence[0])?,
        quotient(h_sequence[1])?,
        quotient(h_sequence[2])?,
    ];
    Ok(DerivativeEstimate {
        value: q[0].clone(),
        extrapolated: richardson(&q),
        observed_order: observed_order(&q),
        h_sequence,
    })
}

/// `Γ(φ, u)(x) = Σ_y J(x, y) (φ(y) - φ(x)) (u(y) - u(x))`.
///
/// The product-rule form `Q(φu) - φ Qu - u Qφ` is evaluated alongside and
/// must agree to rounding.
pub fn carre_du_champ(
    model: &ReversibleModel,
    phi: ArrayView1<f64>,
    u: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let jump = carre_du_champ_jumps(model.rates(), phi, u)?;
    let product = carre_du_champ_product_rule(model, phi, u)?;
    let scale = model.kernel().exit_rates().iter().copied().fold(0.0, f64::max)
        * (1.0 + max_abs(phi).powi(2) + max_abs(u).powi(2));
    let gap = max_abs((&jump - &product).view());
    if gap > 64.0 * f64::EPSILON * scale {
        return Err(Error::Inconsistency(format!(
            "carré du champ forms disagree by {gap:e}"
        )));
    }
    Ok(jump)
}

pub fn carre_du_champ_jumps(
    rates: &Array2<f64>,
    phi: ArrayView1<f64>,
    u: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let n = rates.nrows();
    check_len("phi", n, phi.len())?;
    check_len("u", n, u.len())?;
    Ok(Array1::from_shape_fn(n, |x| {
        (0..n)
            .map(|y| rates[[x, y]] * (phi[y] - phi[x]) * (u[y] - u[x]))
            .sum()
    }))
}

pub fn carre_du_champ_product_rule(
    model: &ReversibleModel,
    phi: ArrayView1<f64>,
    u: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let prod = &phi * &u;
    let q_prod = model.generator_apply(prod.view())?;
    let q_u = model.generator_apply(u)?;
    let q_phi = model.generator_apply(phi)?;
    Ok(q_prod - &(&phi * &q_u) - &(&u * &q_phi))
}

#[derive(Debug, Clone)]
pub struct MainTheoremCheck {
    /// Extrapolated stochastic derivative of `u` under `P`.
    pub lhs: Array1<f64>,
    /// `Q u + Γ(g_t, u) / g_t`.
    pub rhs: Array1<f64>,
    /// `|lhs - rhs|`, NaN on states with `P_t(x) ≤ 1e-12`.
    pub residual: Array1<f64>,
    pub max_residual: f64,
    pub observed_order: f64,
}

/// Compares `L^P u(t, ·)` with `Q u + Γ(g_t, u) / g_t`.
pub fn check_main_theorem(hp: &HProcess, u: ArrayView1<f64>, t: f64) -> Result<MainTheoremCheck> {
    check_main_theorem_with_step(hp, u, t, DEFAULT_STEPS[0])
}

pub fn check_main_theorem_with_step(
    hp: &HProcess,
    u: ArrayView1<f64>,
    t: f64,
    h: f64,
) -> Result<MainTheoremCheck> {
    let k = hp.grid().index_of(t)?;
    let g = hp.fk().g.row(k);
    for (x, &gx) in g.iter().enumerate() {
        if !(gx > POSITIVITY_THRESHOLD) {
            return Err(Error::DivisionGuard { t, state: x });
        }
    }
    let est = stochastic_derivative(Process::Transformed(hp), u, t, h)?;
    let model = hp.model();
    let gamma = carre_du_champ(model, g, u)?;
    let rhs = model.generator_apply(u)? + &(&gamma / &g);
    let p = hp.marginal_at(k);
    let residual = Array1::from_shape_fn(hp.n(), |x| {
        if p[x] > MASS_THRESHOLD {
            (est.extrapolated[x] - rhs[x]).abs()
        } else {
            f64::NAN
        }
    });
    let max_residual = residual.iter().filter(|v| !v.is_nan()).copied().fold(0.0, f64::max);
    Ok(MainTheoremCheck {
        lhs: est.extrapolated,
        rhs,
        residual,
        max_residual,
        observed_order: est.observed_order,
    })
}

#[derive(Debug, Clone)]
pub struct FkDerivativeCheck {
    pub h_sequence: Vec<f64>,
    pub extrapolated: Array1<f64>,
    pub target: Array1<f64>,
    pub residual: Array1<f64>,
    pub max_residual: f64,
}

/// `(1/h)(e^{Qh} g(t+h, ·) - g(t, ·)) → V_t g_t` with grid-aligned steps.
///
/// Steps are `8Δt, 4Δt, 2Δt` scaled up by powers of two so that the largest
/// stays at or below `10⁻²` while the smallest is at least one cell.
pub fn check_fk_stochastic_derivative(
    model: &ReversibleModel,
    potential: &PotentialField,
    g: ArrayView2<f64>,
    grid: TimeGrid,
    t: f64,
) -> Result<FkDerivativeCheck> {
    potential.check_shape(grid, model.n())?;
    check_len("g time nodes", grid.len(), g.nrows())?;
    check_len("g states", model.n(), g.ncols())?;
    let k = grid.index_of(t)?;
    let mut cells = 4usize;
    while (2 * cells) as f64 * grid.dt() <= DEFAULT_STEPS[0] + 1e-12 {
        cells *= 2;
    }
    if k + cells > grid.steps() {
        return Err(Error::Domain(format!(
            "need t + h <= 1, got t={t}, h={}",
            cells as f64 * grid.dt()
        )));
    }
    let counts = [cells, cells / 2, cells / 4];
    let mut quotients: Vec<Array1<f64>> = Vec::with_capacity(3);
    for &c in &counts {
        let h = c as f64 * grid.dt();
        let ahead = model.transition_matrix(h)?.dot(&g.row(k + c));
        quotients.push((ahead - &g.row(k)) / h);
    }
    let q: [Array1<f64>; 3] = [
        quotients[0].clone(),
        quotients[1].clone(),
        quotients[2].clone(),
    ];
    let extrapolated = richardson(&q);
    let target = &potential.values().row(k) * &g.row(k);
    let residual = (&extrapolated - &target).mapv(f64::abs);
    let max_residual = max_abs(residual.view());
    Ok(FkDerivativeCheck {
        h_sequence: counts.iter().map(|&c| c as f64 * grid.dt()).collect(),
        extrapolated,
        target,
        residual,
        max_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feynman_kac::{solve_g, InitialWeight, TerminalWeight};
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

    #[test]
    fn constant_function_has_zero_derivative() {
        let model = two_state();
        let est = stochastic_derivative(Process::Reference(&model), array![2.0, 2.0].view(), 0.0, 1e-2)
            .unwrap();
        assert!(est.value.iter().all(|v| v.abs() < 1e-12));
        assert!(est.extrapolated.iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn reference_derivative_matches_generator() {
        let model = two_state();
        let u = array![0.0, 1.0];
        let est = stochastic_derivative(Process::Reference(&model), u.view(), 0.0, 1e-2).unwrap();
        assert!((est.extrapolated[0] - 0.5).abs() < 1e-7);
        assert!((est.extrapolated[1] + 2.0).abs() < 1e-6);
        assert!((est.observed_order - 1.0).abs() < 0.05);
        // Extrapolated error shrinks at least quadratically.
        let exact = model.generator_apply(u.view()).unwrap();
        let coarse = stochastic_derivative(Process::Reference(&model), u.view(), 0.0, 4e-2).unwrap();
        let e_coarse = max_abs((&coarse.extrapolated - &exact).view());
        let e_fine = max_abs((&est.extrapolated - &exact).view());
        assert!((e_coarse / e_fine).log2() >= 2.0);
    }

    #[test]
    fn step_guards() {
        let model = two_state();
        let u = array![0.0, 1.0];
        assert!(matches!(
            stochastic_derivative(Process::Reference(&model), u.view(), 0.0, 1e-9),
            Err(Error::StepTooSmall(_))
        ));
        assert!(stochastic_derivative(Process::Reference(&model), u.view(), 0.995, 1e-2).is_err());
    }

    #[test]
    fn carre_du_champ_two_state() {
        let model = two_state();
        let g = carre_du_champ(&model, array![1.0, 2.0].view(), array![0.0, 1.0].view()).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
        assert!((g[1] - 2.0).abs() < 1e-15);
        let flat = carre_du_champ(&model, array![3.0, 3.0].view(), array![0.0, 1.0].view()).unwrap();
        assert!(flat.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn main_theorem_two_state_indicator_potential() {
        let model = two_state();
        let grid = TimeGrid::new(1000).unwrap();
        let v = PotentialField::stationary(grid, array![0.0, 1.0].view()).unwrap();
        let hp = HProcess::build(&model, &InitialWeight::ones(2), &TerminalWeight::ones(2), &v, grid)
            .unwrap();
        let check = check_main_theorem(&hp, array![0.0, 1.0].view(), 0.5).unwrap();
        assert!(check.max_residual <= 1e-5, "{}", check.max_residual);
    }

    #[test]
    fn doob_and_master_equation_routes_agree() {
        let model = two_state();
        let grid = TimeGrid::new(400).unwrap();
        let v = PotentialField::from_fn(grid, 2, |t, x| x as f64 * (0.5 + t)).unwrap();
        let gamma = TerminalWeight::new(array![1.0, 0.3]).unwrap();
        let hp = HProcess::build(&model, &InitialWeight::ones(2), &gamma, &v, grid).unwrap();
        let a = doob_transition(&hp, 0.2, 0.6).unwrap();
        let b = transition_matrix_p(&hp, 0.2, 0.6).unwrap();
        let gap = (&a - &b).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "gap {gap}");
        for row in b.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
        assert_eq!(transition_matrix_p(&hp, 0.3, 0.3).unwrap(), Array2::eye(2));
    }

    #[test]
    fn fk_stochastic_derivative_constant_potential() {
        let model = two_state();
        let grid = TimeGrid::new(1000).unwrap();
        let v = PotentialField::constant(grid, 2, 1.0);
        let g = solve_g(&model, &v, &TerminalWeight::ones(2), grid).unwrap();
        let check = check_fk_stochastic_derivative(&model, &v, g.view(), grid, 0.3).unwrap();
        assert_eq!(check.h_sequence.len(), 3);
        assert!((check.h_sequence[0] - 8e-3).abs() < 1e-15);
        assert!(check.max_residual < 1e-8, "{}", check.max_residual);
        assert!(check_fk_stochastic_derivative(&model, &v, g.view(), grid, 0.995).is_err());
    }
}
