//! Finite-state reversible Markov jump processes.
//!
//! A [`ReversibleModel`] bundles a jump kernel `J` with its reversing
//! probability `m`. Models are usually built as Metropolis dynamics from a
//! reversible base kernel and a potential `U`:
//!
//! ```text
//! J(x, y) = exp(-[U(y) - U(x)]) J0(x, y)
//! m(x)    ∝ exp(-2 U(x)) m0(x)
//! ```
//!
//! The generator is `Q = J - diag(J 1)`, transition matrices `e^{Qt}` come from
//! uniformization, and paths are drawn with the Gillespie algorithm.

use std::collections::HashMap;
use std::io::{self, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::rng::Seed;

/// Relative detailed-balance tolerance for accepting inputs.
pub const DETAILED_BALANCE_TOL: f64 = 1e-10;

/// Uniformization rate relative to the largest exit rate.
const UNIFORMIZATION_FACTOR: f64 = 1.05;
/// Poisson tail mass at which the uniformization series is truncated.
const POISSON_TAIL: f64 = 1e-14;
/// Largest Poisson mean handled in one series; longer horizons are split.
const MAX_POISSON_MEAN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl StateSpace {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "state space needs at least 2 states, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate state label {l:?}")));
            }
        }
        Ok(Self { labels, index })
    }

    /// States labelled `"0"`, `"1"`, ...
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| i.to_string()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }
}

/// Off-diagonal jump rates `J(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpKernel {
    rates: Array2<f64>,
}

impl JumpKernel {
    pub fn new(rates: Array2<f64>) -> Result<Self> {
        let (r, c) = rates.dim();
        check_len("jump kernel columns", r, c)?;
        for ((x, y), &v) in rates.indexed_iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "rate J({x},{y}) = {v} must be finite and nonnegative"
                )));
            }
            if x == y && v != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "diagonal rate J({x},{x}) = {v} must be 0"
                )));
            }
        }
        for (x, row) in rates.rows().into_iter().enumerate() {
            if row.sum() <= 0.0 {
                return Err(Error::InvalidInput(format!("state {x} has no exit rate")));
            }
        }
        Ok(Self { rates })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut rates = Array2::zeros((n, n));
        for (i, row) in rows.iter().enumerate() {
            check_len("jump kernel row", n, row.len())?;
            for (j, &v) in row.iter().enumerate() {
                rates[[i, j]] = v;
            }
        }
        Self::new(rates)
    }

    pub fn rates(&self) -> &Array2<f64> {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn exit_rates(&self) -> Array1<f64> {
        self.rates.sum_axis(ndarray::Axis(1))
    }

    /// `Q = J - diag(J 1)`.
    pub fn generator(&self) -> Array2<f64> {
        let mut q = self.rates.clone();
        for (x, r) in self.exit_rates().iter().enumerate() {
            q[[x, x]] = -r;
        }
        q
    }
}

/// True iff the directed graph of strictly positive rates is strongly connected.
pub fn check_irreducibility(kernel: &JumpKernel) -> bool {
    let r = kernel.rates();
    let n = r.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(x) = stack.pop() {
            for y in 0..n {
                let w = if forward { r[[x, y]] } else { r[[y, x]] };
                if w > 0.0 && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    n > 0 && reach(true) && reach(false)
}

/// `max_{x,y} |m(x) J(x,y) - m(y) J(y,x)|`.
pub fn detailed_balance_violation(m: ArrayView1<f64>, kernel: &JumpKernel) -> f64 {
    let r = kernel.rates();
    let n = r.nrows();
    let mut worst = 0.0f64;
    for x in 0..n {
        for y in (x + 1)..n {
            worst = worst.max((m[x] * r[[x, y]] - m[y] * r[[y, x]]).abs());
        }
    }
    worst
}

fn relative_balance_violation(m: ArrayView1<f64>, kernel: &JumpKernel) -> f64 {
    let r = kernel.rates();
    let scale = r
        .indexed_iter()
        .map(|((x, _), &v)| m[x] * v)
        .fold(0.0f64, f64::max);
    detailed_balance_violation(m, kernel) / scale
}

/// A finite reversible jump process: kernel `J`, reversing law `m`, generator `Q`.
#[derive(Debug, Clone)]
pub struct ReversibleModel {
    space: StateSpace,
    kernel: JumpKernel,
    m: Array1<f64>,
    potential: Option<Array1<f64>>,
    generator: Array2<f64>,
}

impl ReversibleModel {
    /// Validates `m` (strictly positive, unit mass), detailed balance and
    /// irreducibility.
    pub fn new(space: StateSpace, kernel: JumpKernel, m: Array1<f64>) -> Result<Self> {
        Self::with_potential(space, kernel, m, None)
    }

    fn with_potential(
        space: StateSpace,
        kernel: JumpKernel,
        m: Array1<f64>,
        potential: Option<Array1<f64>>,
    ) -> Result<Self> {
        let n = space.len();
        check_len("jump kernel", n, kernel.len())?;
        check_len("reversing measure", n, m.len())?;
        if m.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "reversing measure must be strictly positive".into(),
            ));
        }
        if (m.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "reversing measure has mass {}, expected 1",
                m.sum()
            )));
        }
        if !check_irreducibility(&kernel) {
            return Err(Error::NotIrreducible);
        }
        let violation = relative_balance_violation(m.view(), &kernel);
        if violation > DETAILED_BALANCE_TOL {
            return Err(Error::DetailedBalanceViolation { violation });
        }
        let generator = kernel.generator();
        Ok(Self {
            space,
            kernel,
            m,
            potential,
            generator,
        })
    }

    /// Metropolis dynamics of `(J0, m0)` tilted by the potential `U`.
    pub fn build_metropolis(
        space: StateSpace,
        base: &JumpKernel,
        m0: ArrayView1<f64>,
        potential: ArrayView1<f64>,
    ) -> Result<Self> {
        let n = space.len();
        check_len("base kernel", n, base.len())?;
        check_len("base weights", n, m0.len())?;
        check_len("potential", n, potential.len())?;
        if m0.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidInput(
                "base weights m0 must be strictly positive".into(),
            ));
        }
        if potential.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("potential must be finite".into()));
        }
        if !check_irreducibility(base) {
            return Err(Error::NotIrreducible);
        }
        let m0_mass = m0.sum();
        let m0n = m0.mapv(|v| v / m0_mass);
        let violation = relative_balance_violation(m0n.view(), base);
        if violation > DETAILED_BALANCE_TOL {
            return Err(Error::DetailedBalanceViolation { violation });
        }

        let mut rates = base.rates().clone();
        for ((x, y), r) in rates.indexed_iter_mut() {
            if *r > 0.0 {
                *r *= (-(potential[y] - potential[x])).exp();
            }
        }
        // Shift by min U so the Boltzmann weights never overflow.
        let u_min = potential.iter().copied().fold(f64::INFINITY, f64::min);
        let mut m = Array1::from_shape_fn(n, |x| (-2.0 * (potential[x] - u_min)).exp() * m0[x]);
        let z = m.sum();
        m /= z;
        Self::with_potential(
            space,
            JumpKernel::new(rates)?,
            m,
            Some(potential.to_owned()),
        )
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn n(&self) -> usize {
        self.space.len()
    }

    pub fn kernel(&self) -> &JumpKernel {
        &self.kernel
    }

    pub fn rates(&self) -> &Array2<f64> {
        self.kernel.rates()
    }

    pub fn m(&self) -> &Array1<f64> {
        &self.m
    }

    pub fn potential(&self) -> Option<&Array1<f64>> {
        self.potential.as_ref()
    }

    pub fn generator(&self) -> &Array2<f64> {
        &self.generator
    }

    pub fn check_detailed_balance(&self) -> f64 {
        detailed_balance_violation(self.m.view(), &self.kernel)
    }

    /// `(Lu)(x) = Σ_y J(x,y) (u(y) - u(x))`.
    pub fn generator_apply(&self, u: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("generator argument", self.n(), u.len())?;
        let r = self.rates();
        Ok(Array1::from_shape_fn(self.n(), |x| {
            r.row(x)
                .iter()
                .zip(u.iter())
                .map(|(j, uy)| j * (uy - u[x]))
                .sum()
        }))
    }

    /// `e^{Qt}` by uniformization.
    pub fn transition_matrix(&self, t: f64) -> Result<Array2<f64>> {
        uniformized_exp(&self.generator, t)
    }

    /// Gillespie path on `[0, 1]` from `x0`.
    pub fn sample_path(&self, x0: usize, seed: Seed) -> Result<PathSample> {
        if x0 >= self.n() {
            return Err(Error::InvalidInput(format!("initial state {x0} out of range")));
        }
        let mut rng = seed.rng();
        Ok(self.gillespie(x0, seed, &mut rng))
    }

    /// `count` paths with initial states drawn from `law`; path `i` uses
    /// stream `i` of `seed`.
    pub fn sample_paths_from(
        &self,
        law: ArrayView1<f64>,
        count: usize,
        seed: u64,
    ) -> Result<Vec<PathSample>> {
        check_len("initial law", self.n(), law.len())?;
        let total = law.sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("initial law has no mass".into()));
        }
        Ok((0..count as u64)
            .into_par_iter()
            .map(|i| {
                let s = Seed::new(seed).with_stream(i);
                let mut rng = s.rng();
                let x0 = sample_index(law, total, &mut rng);
                self.gillespie(x0, s, &mut rng)
            })
            .collect())
    }

    fn gillespie<R: Rng>(&self, x0: usize, seed: Seed, rng: &mut R) -> PathSample {
        let exit = self.kernel.exit_rates();
        let mut jumps = Vec::new();
        let mut x = x0;
        let mut t = 0.0;
        loop {
            let hold: f64 = rng.sample(Exp1);
            t += hold / exit[x];
            if t >= 1.0 {
                break;
            }
            let y = sample_index(self.rates().row(x), exit[x], rng);
            jumps.push(Jump { time: t, state: y });
            x = y;
        }
        PathSample {
            initial: x0,
            jumps,
            seed,
        }
    }
}

/// Draws an index with probability proportional to `weights`.
pub(crate) fn sample_index<R: Rng>(weights: ArrayView1<f64>, total: f64, rng: &mut R) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}

/// `e^{Qt}` for a generator `Q` via Poisson-weighted powers of
/// `P = I + Q / Λ` with `Λ = 1.05 max_x |Q(x,x)|`.
///
/// Long horizons are split into equal pieces with Poisson mean at most 30 and
/// recombined by products, so every entry stays nonnegative.
pub fn uniformized_exp(q: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!("time {t} must be finite and >= 0")));
    }
    let n = q.nrows();
    let eye = Array2::<f64>::eye(n);
    let max_exit = (0..n).map(|i| -q[[i, i]]).fold(0.0f64, f64::max);
    if t == 0.0 || max_exit == 0.0 {
        return Ok(eye);
    }
    let lambda = UNIFORMIZATION_FACTOR * max_exit;
    let total = lambda * t;
    let pieces = (total / MAX_POISSON_MEAN).ceil().max(1.0) as u32;
    let mean = total / pieces as f64;

    let p = &eye + &(q / lambda);
    let mut weight = (-mean).exp();
    let mut cumulative = weight;
    let mut power = eye.clone();
    let mut acc = &eye * weight;
    let mut k = 0u32;
    let cap = (mean + 40.0 * mean.sqrt() + 200.0) as u32;
    while !((k as f64) > mean && 1.0 - cumulative < POISSON_TAIL) && k < cap {
        k += 1;
        power = power.dot(&p);
        weight *= mean / k as f64;
        cumulative += weight;
        acc.scaled_add(weight, &power);
    }
    Ok(matrix_power(&acc, pieces))
}

fn matrix_power(a: &Array2<f64>, mut e: u32) -> Array2<f64> {
    let mut result = Array2::<f64>::eye(a.nrows());
    let mut base = a.clone();
    while e > 0 {
        if e & 1 == 1 {
            result = result.dot(&base);
        }
        e >>= 1;
        if e > 0 {
            base = base.dot(&base);
        }
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// A right-continuous step path on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub initial: usize,
    pub jumps: Vec<Jump>,
    pub seed: Seed,
}

impl PathSample {
    /// State at time `t`; at a jump time this is the post-jump state.
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.jumps.partition_point(|j| j.time <= t);
        if idx == 0 {
            self.initial
        } else {
            self.jumps[idx - 1].state
        }
    }

    pub fn final_state(&self) -> usize {
        self.jumps.last().map_or(self.initial, |j| j.state)
    }

    /// Constant pieces `(start, end, state)` covering `[s, t]`.
    pub fn pieces(&self, s: f64, t: f64) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::new();
        let mut start = s;
        let mut state = self.state_at(s);
        for j in self.jumps.iter().filter(|j| j.time > s && j.time < t) {
            out.push((start, j.time, state));
            start = j.time;
            state = j.state;
        }
        out.push((start, t, state));
        out
    }

    pub fn is_well_formed(&self) -> bool {
        let mut prev_t = 0.0;
        let mut prev_x = self.initial;
        for j in &self.jumps {
            if !(j.time > prev_t && j.time <= 1.0) || j.state == prev_x {
                return false;
            }
            prev_t = j.time;
            prev_x = j.state;
        }
        true
    }
}

/// Occupation frequencies of `paths` at time `t`.
pub fn empirical_marginal(paths: &[PathSample], n: usize, t: f64) -> Result<Array1<f64>> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("empty path list".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let mut counts = Array1::<f64>::zeros(n);
    for p in paths {
        let x = p.state_at(t);
        if x >= n {
            return Err(Error::InvalidInput(format!("path visits unknown state {x}")));
        }
        counts[x] += 1.0;
    }
    Ok(counts / paths.len() as f64)
}

/// Writes `path_id,time,state` rows: one for the initial state at time 0
/// and one per jump.
pub fn write_paths_csv<W: Write>(
    mut w: W,
    space: &StateSpace,
    paths: &[PathSample],
) -> io::Result<()> {
    writeln!(w, "# paths={}", paths.len())?;
    writeln!(w, "path_id,time,state")?;
    for (id, p) in paths.iter().enumerate() {
        writeln!(w, "{id},0,{}", space.label(p.initial))?;
        for j in &p.jumps {
            writeln!(w, "{id},{},{}", j.time, space.label(j.state))?;
        }
    }
    Ok(())
}

/// Model description as read from a configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub states: Vec<String>,
    #[serde(rename = "J0")]
    pub j0: Vec<Vec<f64>>,
    pub m0: Vec<f64>,
    #[serde(rename = "U", default)]
    pub potential: Option<Vec<f64>>,
}

impl ModelDocument {
    pub fn build(&self) -> Result<ReversibleModel> {
        let space = StateSpace::new(self.states.iter().cloned())?;
        let base = JumpKernel::from_rows(&self.j0)?;
        let m0 = Array1::from_vec(self.m0.clone());
        let u = match &self.potential {
            Some(u) => Array1::from_vec(u.clone()),
            None => Array1::zeros(space.len()),
        };
        ReversibleModel::build_metropolis(space, &base, m0.view(), u.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    pub(crate) fn two_state() -> ReversibleModel {
        let base = JumpKernel::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        ReversibleModel::build_metropolis(
            StateSpace::numbered(2).unwrap(),
            &base,
            array![1.0, 1.0].view(),
            array![0.0, 2f64.ln()].view(),
        )
        .unwrap()
    }

    fn ring(n: usize, both: bool) -> JumpKernel {
        let mut r = Array2::zeros((n, n));
        for i in 0..n {
            r[[i, (i + 1) % n]] = 1.0;
            if both {
                r[[i, (i + n - 1) % n]] = 1.0;
            }
        }
        JumpKernel::new(r).unwrap()
    }

    #[test]
    fn metropolis_two_state() {
        let m = two_state();
        let r = m.rates();
        assert!((r[[0, 1]] - 0.5).abs() < 1e-15);
        assert!((r[[1, 0]] - 2.0).abs() < 1e-15);
        assert!((m.m()[0] - 0.8).abs() < 1e-15);
        assert!((m.m()[1] - 0.2).abs() < 1e-15);
        assert!(m.check_detailed_balance() <= 1e-14);
    }

    #[test]
    fn zero_potential_keeps_base() {
        let base = ring(3, true);
        let m = ReversibleModel::build_metropolis(
            StateSpace::numbered(3).unwrap(),
            &base,
            array![2.0, 2.0, 2.0].view(),
            Array1::zeros(3).view(),
        )
        .unwrap();
        assert_eq!(m.rates(), base.rates());
        for &v in m.m() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn ring_metropolis_balances() {
        let m = ReversibleModel::build_metropolis(
            StateSpace::numbered(3).unwrap(),
            &ring(3, true),
            array![1.0, 1.0, 1.0].view(),
            array![0.3, -1.2, 2.5].view(),
        )
        .unwrap();
        assert!(m.check_detailed_balance() < 1e-15);
    }

    #[test]
    fn detailed_balance_violation_values() {
        let sym = JumpKernel::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(detailed_balance_violation(array![0.5, 0.5].view(), &sym), 0.0);
        let skew = JumpKernel::new(array![[0.0, 1.0], [2.0, 0.0]]).unwrap();
        assert!((detailed_balance_violation(array![0.5, 0.5].view(), &skew) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rejects_unbalanced_or_reducible_base() {
        let skew = JumpKernel::new(array![[0.0, 1.0], [2.0, 0.0]]).unwrap();
        let err = ReversibleModel::build_metropolis(
            StateSpace::numbered(2).unwrap(),
            &skew,
            array![1.0, 1.0].view(),
            array![0.0, 0.0].view(),
        )
        .unwrap_err();
        assert_eq!(err.reason(), "detailed_balance_violation");

        let mut r = Array2::zeros((3, 3));
        r[[0, 1]] = 1.0;
        r[[1, 0]] = 1.0;
        r[[2, 0]] = 1.0;
        let reducible = JumpKernel::new(r).unwrap();
        let err = ReversibleModel::build_metropolis(
            StateSpace::numbered(3).unwrap(),
            &reducible,
            array![1.0, 1.0, 1.0].view(),
            Array1::zeros(3).view(),
        )
        .unwrap_err();
        assert_eq!(err, Error::NotIrreducible);
    }

    #[test]
    fn kernel_validation() {
        assert!(JumpKernel::new(array![[0.0, 1.0], [0.0, 0.0]]).is_err());
        assert!(JumpKernel::new(array![[1.0, 1.0], [1.0, 0.0]]).is_err());
        assert!(JumpKernel::new(array![[0.0, -1.0], [1.0, 0.0]]).is_err());
        assert!(StateSpace::new(["a", "a"]).is_err());
        assert!(StateSpace::new(["a"]).is_err());
    }

    #[test]
    fn irreducibility() {
        assert!(check_irreducibility(
            &JumpKernel::new(array![[0.0, 1.0], [3.0, 0.0]]).unwrap()
        ));
        let mut r = Array2::zeros((2, 2));
        r[[0, 1]] = 1.0;
        // Not a valid kernel (row 1 has no exit), so test the graph directly.
        let k = JumpKernel { rates: r };
        assert!(!check_irreducibility(&k));
        assert!(check_irreducibility(&ring(4, false)));
    }

    #[test]
    fn generator_action() {
        let m = two_state();
        let c = m.generator_apply(array![3.0, 3.0].view()).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        let lu = m.generator_apply(array![0.0, 1.0].view()).unwrap();
        assert!((lu[0] - 0.5).abs() < 1e-15);
        assert!((lu[1] + 2.0).abs() < 1e-15);
        assert!(m.m().dot(&lu).abs() < 1e-15);
        assert!(m.generator_apply(array![1.0].view()).is_err());
    }

    #[test]
    fn two_state_transition_matrix_closed_form() {
        let m = two_state();
        assert_eq!(m.transition_matrix(0.0).unwrap(), Array2::<f64>::eye(2));
        for &t in &[0.01, 0.3, 1.0, 4.0, 50.0] {
            let p = m.transition_matrix(t).unwrap();
            let e = (-2.5 * t).exp();
            let exact = array![[0.8 + 0.2 * e, 0.2 - 0.2 * e], [0.8 - 0.8 * e, 0.2 + 0.8 * e]];
            let err = (&p - &exact).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-12, "t={t} err={err}");
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        assert!(m.transition_matrix(-1.0).is_err());
    }

    #[test]
    fn ergodic_limit() {
        let m = ReversibleModel::build_metropolis(
            StateSpace::numbered(4).unwrap(),
            &ring(4, true),
            array![1.0, 1.0, 1.0, 1.0].view(),
            array![0.0, 0.5, -0.5, 1.0].view(),
        )
        .unwrap();
        let p = m.transition_matrix(200.0).unwrap();
        for row in p.rows() {
            for (a, b) in row.iter().zip(m.m().iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn path_evaluation_is_right_continuous() {
        let p = PathSample {
            initial: 0,
            jumps: vec![Jump { time: 0.25, state: 1 }, Jump { time: 0.5, state: 0 }],
            seed: Seed::new(0),
        };
        assert_eq!(p.state_at(0.0), 0);
        assert_eq!(p.state_at(0.25), 1);
        assert_eq!(p.state_at(0.49), 1);
        assert_eq!(p.state_at(0.5), 0);
        assert_eq!(p.final_state(), 0);
        assert_eq!(
            p.pieces(0.1, 0.6),
            vec![(0.1, 0.25, 0), (0.25, 0.5, 1), (0.5, 0.6, 0)]
        );
    }

    #[test]
    fn gillespie_is_deterministic_and_well_formed() {
        let m = two_state();
        let a = m.sample_path(0, Seed::new(11)).unwrap();
        let b = m.sample_path(0, Seed::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_well_formed());
        assert!(m.sample_path(5, Seed::new(1)).is_err());
    }

    #[test]
    fn empirical_marginal_edge_cases() {
        let constant = PathSample {
            initial: 1,
            jumps: vec![],
            seed: Seed::new(0),
        };
        let e = empirical_marginal(&[constant], 3, 0.7).unwrap();
        assert_eq!(e, array![0.0, 1.0, 0.0]);
        assert!(empirical_marginal(&[], 3, 0.5).is_err());

        let m = two_state();
        let paths = m.sample_paths_from(array![0.3, 0.7].view(), 1000, 3).unwrap();
        let e0 = empirical_marginal(&paths, 2, 0.0).unwrap();
        let count0 = paths.iter().filter(|p| p.initial == 0).count() as f64 / 1000.0;
        assert_eq!(e0[0], count0);
    }

    #[test]
    fn path_csv_layout() {
        let m = two_state();
        let p = PathSample {
            initial: 0,
            jumps: vec![Jump { time: 0.5, state: 1 }],
            seed: Seed::new(0),
        };
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, m.space(), &[p]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s, "# paths=1\npath_id,time,state\n0,0,0\n0,0.5,1\n");
    }
}
