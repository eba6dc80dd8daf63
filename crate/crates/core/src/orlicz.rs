//! Young functions, Luxemburg norms and the integrability diagnostics that
//! go with them.
//!
//! On a finite state space every integrability hypothesis holds; what is
//! useful is the value of each quantity, so reports carry numbers rather
//! than bare verdicts.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::feynman_kac::PotentialField;
use crate::h_transform::{entropy_sufficiency_report, EntropySufficiency};
use crate::hjb::{theta, theta_star};

pub const LUXEMBURG_RTOL: f64 = 1e-10;
/// Factor in `‖uv‖₁ ≤ 2 ‖u‖_γ ‖v‖_γ*`.
pub const HOLDER_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum YoungFunction {
    /// `|a|^p / p`, `p ≥ 1`.
    Power { p: f64 },
    /// `θ(|a|) = e^{|a|} - |a| - 1`.
    ThetaExp,
    /// `θ*(|a|) = (|a| + 1) log(|a| + 1) - |a|`.
    ThetaStarLlogL,
    /// `0` on `[-1, 1]`, `+∞` outside.
    SupNorm,
}

impl YoungFunction {
    pub fn power(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::Domain(format!("power Young function needs finite p >= 1, got {p}")));
        }
        Ok(Self::Power { p })
    }

    pub fn eval(&self, a: f64) -> f64 {
        let a = a.abs();
        match *self {
            Self::Power { p } => a.powf(p) / p,
            Self::ThetaExp => theta(a),
            Self::ThetaStarLlogL => theta_star(a).expect("|a| >= 0 is in the domain"),
            Self::SupNorm => {
                if a <= 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `γ*(b) = sup_{a ≥ 0} {a b - γ(a)}` in closed form.
    pub fn conjugate(&self) -> Self {
        match *self {
            Self::Power { p } if p == 1.0 => Self::SupNorm,
            Self::Power { p } => Self::Power { p: p / (p - 1.0) },
            Self::ThetaExp => Self::ThetaStarLlogL,
            Self::ThetaStarLlogL => Self::ThetaExp,
            Self::SupNorm => Self::Power { p: 1.0 },
        }
    }

    /// Whether `γ(2a) ≤ C γ(a)` for large `a`.
    pub fn delta2(&self) -> bool {
        matches!(self, Self::Power { .. } | Self::ThetaStarLlogL)
    }

    /// `γ(2a) / γ(a)`, whose boundedness as `a → ∞` is the `Δ₂` condition.
    pub fn doubling_ratio(&self, a: f64) -> f64 {
        self.eval(2.0 * a) / self.eval(a)
    }

    /// Right derivative at `a ≥ 0`, the maximiser's dual point in Fenchel's
    /// equality `a γ'(a) = γ(a) + γ*(γ'(a))`.
    pub fn derivative(&self, a: f64) -> f64 {
        let a = a.abs();
        match *self {
            Self::Power { p } => a.powf(p - 1.0),
            Self::ThetaExp => a.exp_m1(),
            Self::ThetaStarLlogL => a.ln_1p(),
            Self::SupNorm => {
                if a < 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }
}

/// `sup_{a ≥ 0} {a b - γ(a)}` by golden-section search, for kinds whose
/// conjugate is finite at `b`.
pub fn numeric_conjugate(gamma: YoungFunction, b: f64) -> f64 {
    let b = b.abs();
    let objective = |a: f64| a * b - gamma.eval(a);
    let mut hi = 1.0;
    while objective(hi) > objective(0.5 * hi) && hi < 1e12 {
        hi *= 2.0;
    }
    let (mut lo, mut hi) = (0.0, hi);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - r * (hi - lo);
    let mut d = lo + r * (hi - lo);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..200 {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = objective(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = objective(d);
        }
    }
    objective(0.5 * (lo + hi)).max(objective(0.0))
}

/// Probability weights on a finite set.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMeasure(Array1<f64>);

impl WeightedMeasure {
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn normalized(weights: Array1<f64>) -> Result<Self> {
        let total = weights.sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidInput("weights have no mass".into()));
        }
        Self::new(weights / total)
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `∫ φ(u) dm`.
    pub fn integrate(&self, u: ArrayView1<f64>, phi: impl Fn(f64) -> f64) -> f64 {
        self.0
            .iter()
            .zip(u.iter())
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, x)| w * phi(*x))
            .sum()
    }
}

/// `∫ γ(|u| / α) dm`.
pub fn modular(u: ArrayView1<f64>, m: &WeightedMeasure, gamma: YoungFunction, alpha: f64) -> f64 {
    m.integrate(u, |x| gamma.eval(x / alpha))
}

/// `inf {α > 0 : ∫ γ(|u|/α) dm ≤ 1}` by bisection to relative precision
/// [`LUXEMBURG_RTOL`]; the returned `α` always satisfies the constraint.
pub fn luxemburg_norm(u: ArrayView1<f64>, m: &WeightedMeasure, gamma: YoungFunction) -> Result<f64> {
    check_len("vector", m.len(), u.len())?;
    if u.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("vector must be finite".into()));
    }
    let sup = m
        .weights()
        .iter()
        .zip(u.iter())
        .filter(|(w, _)| **w > 0.0)
        .fold(0.0f64, |acc, (_, x)| acc.max(x.abs()));
    if sup == 0.0 || gamma == YoungFunction::SupNorm {
        return Ok(sup);
    }
    // γ(1) ≤ 1 for every kind here, so α = sup |u| is feasible.
    let mut hi = sup;
    let mut lo = 0.5 * sup;
    while modular(u, m, gamma, lo) <= 1.0 {
        hi = lo;
        lo *= 0.5;
    }
    while hi - lo > LUXEMBURG_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if modular(u, m, gamma, mid) <= 1.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolderCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// The same bound without the factor 2, which need not hold for general pairs.
    pub classical_satisfied: bool,
}

/// `‖uv‖_{L¹(m)}` against `2 ‖u‖_γ ‖v‖_{γ*}`.
pub fn holder_check(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    m: &WeightedMeasure,
    gamma: YoungFunction,
) -> Result<HolderCheck> {
    check_len("v", u.len(), v.len())?;
    let uv = &u * &v;
    let lhs = m.integrate(uv.view(), f64::abs);
    let product = luxemburg_norm(u, m, gamma)? * luxemburg_norm(v, m, gamma.conjugate())?;
    let rhs = HOLDER_FACTOR * product;
    Ok(HolderCheck {
        lhs,
        rhs,
        satisfied: lhs <= rhs,
        classical_satisfied: lhs <= product,
    })
}

/// `‖g_t‖_γ / ‖γ̂‖_γ` for each row of `g`, the empirical counterpart of the
/// constant bounding `g_t` in `L^γ`.
pub fn norm_ratio_profile(
    g: ArrayView2<f64>,
    m: &WeightedMeasure,
    gamma: YoungFunction,
) -> Result<Array1<f64>> {
    let last = g.nrows() - 1;
    let terminal = luxemburg_norm(g.row(last), m, gamma)?;
    if terminal == 0.0 {
        return Err(Error::DegenerateInput("terminal weight has zero norm".into()));
    }
    g.rows()
        .into_iter()
        .map(|row| Ok(luxemburg_norm(row, m, gamma)? / terminal))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub lo: f64,
    pub bounded_below: bool,
    /// `∫ γ(γ̂) dm`.
    pub gamma_integral: f64,
    /// `sup_t ∫ γ*(V_t) dm`.
    pub conjugate_potential_sup: f64,
    pub delta2: bool,
    pub entropy: EntropySufficiency,
    pub satisfied: bool,
    pub verdict: String,
}

impl HypothesisReport {
    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("lo = {}", self.lo),
            format!("bounded below: {}", if self.bounded_below { "yes" } else { "no" }),
            format!("integral gamma(gamma1) dm = {:e}", self.gamma_integral),
            format!("sup_t integral gamma*(V_t) dm = {:e}", self.conjugate_potential_sup),
            format!("delta2: {}", if self.delta2 { "yes" } else { "no" }),
            format!(
                "entropy sufficiency (p = {}): f0 {:e}, gamma1 {:e}, {}",
                self.entropy.p, self.entropy.f0_integral, self.entropy.gamma1_integral, self.entropy.verdict
            ),
            format!("verdict: {}", self.verdict),
        ]
    }
}

/// Lower bound of `V`, `∫ γ(γ̂) dm`, `sup_t ∫ γ*(V_t) dm` and the entropy
/// sufficiency integrals with exponent `p`.
pub fn hypothesis_report(
    f0: ArrayView1<f64>,
    gamma1: ArrayView1<f64>,
    potential: &PotentialField,
    m: &WeightedMeasure,
    gamma: YoungFunction,
    p: f64,
) -> Result<HypothesisReport> {
    check_len("gamma1", m.len(), gamma1.len())?;
    check_len("potential states", m.len(), potential.n())?;
    let vmin = potential.min();
    let lo = (-vmin).max(0.0);
    let bounded_below = vmin.is_finite();
    let gamma_integral = m.integrate(gamma1, |x| gamma.eval(x));
    let conj = gamma.conjugate();
    let conjugate_potential_sup = potential
        .values()
        .rows()
        .into_iter()
        .map(|row| m.integrate(row, |x| conj.eval(x)))
        .fold(0.0f64, f64::max);
    let entropy = entropy_sufficiency_report(f0, gamma1, m.weights(), p)?;
    let satisfied = bounded_below
        && gamma_integral.is_finite()
        && conjugate_potential_sup.is_finite()
        && entropy.satisfied;
    let verdict = if satisfied {
        "satisfied (finite space)".to_string()
    } else {
        let mut failed = Vec::new();
        if !bounded_below {
            failed.push("V not bounded below");
        }
        if !gamma_integral.is_finite() {
            failed.push("gamma(gamma1) not integrable");
        }
        if !conjugate_potential_sup.is_finite() {
            failed.push("gamma*(V) not integrable");
        }
        if !entropy.satisfied {
            failed.push("entropy sufficiency integrals infinite");
        }
        format!("violated: {}", failed.join(", "))
    };
    Ok(HypothesisReport {
        lo,
        bounded_below,
        gamma_integral,
        conjugate_potential_sup,
        delta2: gamma.delta2(),
        entropy,
        satisfied,
        verdict,
    })
}
