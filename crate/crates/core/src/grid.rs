use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k / N`, `k = 0..=N`, on the unit time interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidInput(format!(
                "time grid needs at least 2 steps, got {steps}"
            )));
        }
        Ok(Self { steps })
    }

    /// Number of steps `N`; there are `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        k as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.steps).map(move |k| self.node(k))
    }

    /// Index of the node at time `t`, or `NotOnGrid` when `t` is not a node.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let scaled = t * self.steps as f64;
        let k = scaled.round();
        if !(0.0..=self.steps as f64).contains(&k) || (scaled - k).abs() > 1e-9 {
            return Err(Error::NotOnGrid { t });
        }
        Ok(k as usize)
    }

    /// Cell index `k` and local fraction in `[0, 1]` such that
    /// `t = t_k + frac * dt`. Times outside `[0, 1]` are clamped.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        let scaled = (t.clamp(0.0, 1.0)) * self.steps as f64;
        let k = (scaled.floor() as usize).min(self.steps - 1);
        (k, scaled - k as f64)
    }
}
