//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use htransform::diffusion::*;
use htransform::grid::TimeGrid;
use htransform::markov::{JumpKernel, ReversibleModel, StateSpace};
use ndarray::{array, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn three_state() -> ReversibleModel {
    let base = JumpKernel::new(array![[0.0, 0.8, 0.3], [0.8, 0.0, 0.5], [0.3, 0.5, 0.0]]).unwrap();
    ReversibleModel::build_metropolis(
        StateSpace::numbered(3).unwrap(),
        &base,
        array![1.0, 1.0, 1.0].view(),
        array![0.2, -0.1, 0.4].view(),
    )
    .unwrap()
}

/// Random marginal on 3 states in units of 1/50.
pub fn random_units(rng: &mut ChaCha8Rng) -> [i64; 3] {
    let a = rng.random_range(1..49);
    let b = rng.random_range(1..50 - a);
    [a, b, 50 - a - b]
}

pub fn units_to_probabilities(u: [i64; 3]) -> Array1<f64> {
    Array1::from_iter(u.iter().map(|&v| v as f64 / 50.0))
}

/// Minimum of `Σ q log(q/K)` over joint laws on a 0.02 lattice with the
/// given marginals.
pub fn brute_force_minimum(k: &Array2<f64>, r: [i64; 3], c: [i64; 3]) -> f64 {
    let unit = 0.02;
    let term = |units: i64, kv: f64| {
        if units == 0 {
            0.0
        } else {
            let q = units as f64 * unit;
            q * (q / kv).ln()
        }
    };
    let mut best = f64::INFINITY;
    for q00 in 0..=r[0].min(c[0]) {
        for q01 in 0..=(r[0] - q00).min(c[1]) {
            let q02 = r[0] - q00 - q01;
            if q02 > c[2] {
                continue;
            }
            for q10 in 0..=(r[1]).min(c[0] - q00) {
                for q11 in 0..=(r[1] - q10).min(c[1] - q01) {
                    let q12 = r[1] - q10 - q11;
                    let (q20, q21, q22) = (c[0] - q00 - q10, c[1] - q01 - q11, c[2] - q02 - q12);
                    if q12 < 0 || q20 < 0 || q21 < 0 || q22 < 0 {
                        continue;
                    }
                    let q = [[q00, q01, q02], [q10, q11, q12], [q20, q21, q22]];
                    let h: f64 = (0..3)
                        .flat_map(|x| (0..3).map(move |y| (x, y)))
                        .map(|(x, y)| term(q[x][y], k[[x, y]]))
                        .sum();
                    best = best.min(h);
                }
            }
        }
    }
    best
}

pub const EPS: f64 = 0.05;
pub const Y0: f64 = 0.0;

/// Brownian motion on `[-3, 3]` pinned near `Y0` by a Gaussian terminal weight.
pub fn brownian_bridge(cells: usize, steps: usize, eps: f64) -> DiffusionTransform {
    let model = Diffusion1DModel::new(-3.0, 3.0, Array1::zeros(cells + 1)).unwrap();
    let grid = TimeGrid::new(steps).unwrap();
    let space = model.space();
    let gamma = space.nodes().mapv(|x| gaussian_density(x, Y0, eps * eps));
    let f0 = Array1::ones(space.len());
    let v = GridFunction::constant(grid, space, 0.0);
    DiffusionTransform::build(model, v, f0.view(), gamma.view(), grid).unwrap()
}

pub fn bridge_variance(t: f64, eps: f64) -> f64 {
    1.0 - t + eps * eps
}

/// `max |drift - (Y0 - x)/(1 - t + ε²)| / max |target|` over the middle half
/// of the domain and `t ≤ 0.9`.
pub fn bridge_drift_error(tr: &DiffusionTransform, drift: &GridFunction) -> f64 {
    let grid = tr.grid();
    let space = tr.model.space();
    let (a, b) = middle_range(&space, 0.5);
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for k in 0..grid.len() {
        let t = grid.node(k);
        if t > 0.9 + 1e-12 {
            break;
        }
        for i in space.nodes_within(a, b) {
            let target = (Y0 - space.node(i)) / bridge_variance(t, EPS);
            err = err.max((drift.values[[k, i]] - target).abs());
            scale = scale.max(target.abs());
        }
    }
    err / scale
}

/// Sample standard deviation.
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
