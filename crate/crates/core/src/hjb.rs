//! `θ`, `θ*` and the integro-differential HJB residual of `ψ = log g`.
//!
//! For a jump process `ψ` should satisfy
//!
//! ```text
//! ∂_t ψ + Σ_y J(x,y) Dψ(x;y) + Σ_y θ(Dψ(x;y)) J(x,y) - V = 0,   Dψ(x;y) = ψ(y) - ψ(x)
//! ```
//!
//! where the two sums combine to `Σ_y (e^{Dψ} - 1) J(x,y) = (Q g)(x) / g(x)`.
//! The residual is only evaluated, never solved for.

use std::io::{self, Write};

use ndarray::{Array2, ArrayView2};

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::{time_derivative, GridPoint, PotentialField};
use crate::grid::TimeGrid;
use crate::markov::{ReversibleModel, StateSpace};

/// `θ(a) = e^a - a - 1`.
pub fn theta(a: f64) -> f64 {
    a.exp_m1() - a
}

/// `θ*(b) = (b + 1) log(b + 1) - b` on `b ≥ -1`, with `0 log 0 = 0`.
pub fn theta_star(b: f64) -> Result<f64> {
    if !(b >= -1.0) {
        return Err(Error::Domain(format!("theta_star needs b >= -1, got {b}")));
    }
    if b == -1.0 {
        return Ok(1.0);
    }
    Ok((b + 1.0) * b.ln_1p() - b)
}

/// `ψ = log g`, with `-∞` exactly where `g = 0`.
#[derive(Debug, Clone)]
pub struct PsiField {
    pub grid: TimeGrid,
    pub psi: Array2<f64>,
}

impl PsiField {
    pub fn from_g(g: ArrayView2<f64>, grid: TimeGrid) -> Result<Self> {
        check_len("g time nodes", grid.len(), g.nrows())?;
        if g.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput("g must be finite and nonnegative".into()));
        }
        let psi = g.mapv(|v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY });
        Ok(Self { grid, psi })
    }
}

/// Discretisation of `∂_t ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeDifference {
    /// Difference quotients of `ψ` itself.
    Centered,
    /// Difference quotients of `e^ψ` divided by `e^ψ`; with this choice
    /// `residual · g` reproduces the Feynman-Kac residual of `g` exactly.
    LogConsistent,
}

#[derive(Debug, Clone)]
pub struct HjbResidual {
    /// Signed residual; NaN where a needed `ψ` value is `-∞`.
    pub residual: Array2<f64>,
    pub flagged: Vec<GridPoint>,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// Largest gap between `Σ (Dψ + θ(Dψ)) J` and `Σ (e^{Dψ} - 1) J`.
    pub identity_gap: f64,
}

impl HjbResidual {
    pub fn write_csv<W: Write>(&self, mut w: W, space: &StateSpace) -> io::Result<()> {
        let grid_n = self.residual.nrows() - 1;
        writeln!(w, "# grid_N={grid_n}")?;
        writeln!(w, "t,state,residual")?;
        for ((k, x), r) in self.residual.indexed_iter() {
            writeln!(w, "{},{},{}", k as f64 / grid_n as f64, space.label(x), r)?;
        }
        Ok(())
    }
}

/// Time stencil at node `k`: `(offset, weight)` pairs, weights already
/// divided by `dt`.
fn stencil(k: usize, last: usize, dt: f64) -> [(isize, f64); 3] {
    let c = 1.0 / (2.0 * dt);
    if k == 0 {
        [(0, -3.0 * c), (1, 4.0 * c), (2, -c)]
    } else if k == last {
        [(0, 3.0 * c), (-1, -4.0 * c), (-2, c)]
    } else {
        [(1, c), (-1, -c), (0, 0.0)]
    }
}

pub fn discrete_hjb_residual(
    psi: &PsiField,
    model: &ReversibleModel,
    potential: &PotentialField,
    mode: TimeDifference,
) -> Result<HjbResidual> {
    let grid = psi.grid;
    let n = model.n();
    check_len("psi states", n, psi.psi.ncols())?;
    check_len("psi time nodes", grid.len(), psi.psi.nrows())?;
    potential.check_shape(grid, n)?;
    let p = &psi.psi;
    let rates = model.rates();
    let v = potential.values();
    let last = grid.steps();
    let plain_dt = match mode {
        TimeDifference::Centered => Some(time_derivative(p.view(), grid.dt())),
        TimeDifference::LogConsistent => None,
    };

    let mut residual = Array2::from_elem((grid.len(), n), f64::NAN);
    let mut flagged = Vec::new();
    let mut identity_gap = 0.0f64;
    for k in 0..grid.len() {
        let st = stencil(k, last, grid.dt());
        for x in 0..n {
            let here = p[[k, x]];
            let time_ok = st.iter().all(|&(o, _)| p[[(k as isize + o) as usize, x]].is_finite());
            let space_ok = (0..n).all(|y| rates[[x, y]] == 0.0 || p[[k, y]].is_finite());
            if !(here.is_finite() && time_ok && space_ok) {
                flagged.push(GridPoint {
                    k,
                    t: grid.node(k),
                    state: x,
                });
                continue;
            }
            let dpsi_dt = match &plain_dt {
                Some(d) => d[[k, x]],
                None => st
                    .iter()
                    .map(|&(o, w)| w * (p[[(k as isize + o) as usize, x]] - here).exp())
                    .sum(),
            };
            let mut linear = 0.0;
            let mut convex = 0.0;
            let mut combined = 0.0;
            for y in 0..n {
                let j = rates[[x, y]];
                if j > 0.0 {
                    let d = p[[k, y]] - here;
                    linear += j * d;
                    convex += j * theta(d);
                    combined += j * d.exp_m1();
                }
            }
            identity_gap = identity_gap.max((linear + convex - combined).abs());
            residual[[k, x]] = dpsi_dt + combined - v[[k, x]];
        }
    }
    let finite: Vec<f64> = residual.iter().filter(|r| !r.is_nan()).map(|r| r.abs()).collect();
    let max_residual = finite.iter().copied().fold(0.0, f64::max);
    let mean_residual = if finite.is_empty() {
        0.0
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(HjbResidual {
        residual,
        flagged,
        max_residual,
        mean_residual,
        identity_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feynman_kac::{fk_residual_signed, solve_g, TerminalWeight};
    use crate::markov::JumpKernel;
    use ndarray::array;

    fn model() -> ReversibleModel {
        let base = JumpKernel::new(array![[0.0, 0.6, 0.2], [0.6, 0.0, 0.4], [0.2, 0.4, 0.0]])
            .unwrap();
        ReversibleModel::build_metropolis(
            StateSpace::numbered(3).unwrap(),
            &base,
            array![1.0, 1.0, 1.0].view(),
            array![0.1, -0.2, 0.3].view(),
        )
        .unwrap()
    }

    #[test]
    fn theta_values() {
        assert_eq!(theta(0.0), 0.0);
        assert_eq!(theta_star(0.0).unwrap(), 0.0);
        assert!((theta(1.0) - 0.718281828459045).abs() < 1e-15);
        assert_eq!(theta_star(-1.0).unwrap(), 1.0);
        assert!(theta_star(-1.5).is_err());
    }

    #[test]
    fn fenchel_inequality_and_equality() {
        for i in -40..=40 {
            let a = i as f64 * 0.1;
            let b_star = a.exp() - 1.0;
            let eq = a * b_star - theta(a) - theta_star(b_star).unwrap();
            assert!(eq.abs() < 1e-12 * (1.0 + (a * b_star).abs()), "a={a} gap={eq}");
            for j in -10..=60 {
                let b = j as f64 * 0.1;
                if b < -1.0 {
                    continue;
                }
                assert!(a * b <= theta(a) + theta_star(b).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn theta_convex_nonnegative() {
        let xs: Vec<f64> = (-50..=50).map(|i| i as f64 * 0.08).collect();
        for w in xs.windows(3) {
            assert!(theta(w[0]) + theta(w[2]) - 2.0 * theta(w[1]) >= -1e-14);
            if w[0] >= -1.0 {
                let (a, b, c) = (
                    theta_star(w[0]).unwrap(),
                    theta_star(w[1]).unwrap(),
                    theta_star(w[2]).unwrap(),
                );
                assert!(a + c - 2.0 * b >= -1e-14);
            }
        }
        for &x in &xs {
            assert!(theta(x) >= 0.0);
            assert_eq!(theta(x) == 0.0, x == 0.0);
            if x >= -1.0 {
                let ts = theta_star(x).unwrap();
                assert!(ts >= 0.0);
                assert_eq!(ts == 0.0, x == 0.0);
            }
        }
    }

    #[test]
    fn zero_potential_unit_terminal() {
        let model = model();
        let grid = TimeGrid::new(50).unwrap();
        let v = PotentialField::zero(grid, 3);
        let g = solve_g(&model, &v, &TerminalWeight::ones(3), grid).unwrap();
        let psi = PsiField::from_g(g.view(), grid).unwrap();
        let r = discrete_hjb_residual(&psi, &model, &v, TimeDifference::Centered).unwrap();
        assert!(r.max_residual < 1e-12);
        assert!(r.flagged.is_empty());
    }

    #[test]
    fn constant_potential_linear_psi() {
        let model = model();
        let grid = TimeGrid::new(1000).unwrap();
        let v = PotentialField::constant(grid, 3, 0.8);
        let g = solve_g(&model, &v, &TerminalWeight::ones(3), grid).unwrap();
        let psi = PsiField::from_g(g.view(), grid).unwrap();
        let r = discrete_hjb_residual(&psi, &model, &v, TimeDifference::Centered).unwrap();
        assert!(r.max_residual <= 1e-12, "{}", r.max_residual);
    }

    #[test]
    fn log_consistent_residual_times_g_is_fk_residual() {
        let model = model();
        let grid = TimeGrid::new(100).unwrap();
        let v = PotentialField::from_fn(grid, 3, |t, x| (x as f64 - 1.0) * (2.0 * t).sin()).unwrap();
        let g = solve_g(&model, &v, &TerminalWeight::new(array![1.0, 0.2, 3.0]).unwrap(), grid)
            .unwrap();
        let psi = PsiField::from_g(g.view(), grid).unwrap();
        let r = discrete_hjb_residual(&psi, &model, &v, TimeDifference::LogConsistent).unwrap();
        let fk = fk_residual_signed(&model, &v, g.view(), grid).unwrap();
        for ((k, x), res) in r.residual.indexed_iter() {
            let scale = g[[k, x]] / grid.dt();
            assert!((res * g[[k, x]] - fk[[k, x]]).abs() < 1e-13 * scale);
        }
        assert!(r.identity_gap < 1e-14);
    }

    #[test]
    fn vanishing_g_is_masked() {
        let model = model();
        let grid = TimeGrid::new(10).unwrap();
        let v = PotentialField::zero(grid, 3);
        let g = solve_g(&model, &v, &TerminalWeight::new(array![0.0, 1.0, 1.0]).unwrap(), grid)
            .unwrap();
        let psi = PsiField::from_g(g.view(), grid).unwrap();
        assert_eq!(psi.psi[[10, 0]], f64::NEG_INFINITY);
        let r = discrete_hjb_residual(&psi, &model, &v, TimeDifference::Centered).unwrap();
        assert!(r.residual[[10, 0]].is_nan());
        assert!(!r.flagged.is_empty());
        assert!(r.max_residual.is_finite());
    }
}
