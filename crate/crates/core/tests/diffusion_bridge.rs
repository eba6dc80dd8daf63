//! Brownian-bridge and reference-diffusion checks against closed forms and
//! Monte Carlo.

use htransform::diffusion::*;
use htransform::grid::TimeGrid;
use htransform::rng::Seed;
use ndarray::Array1;

mod common;

use common::*;

/// Largest relative error of `g` against the Gaussian convolution over
/// nodes in `[-half, half]` with `t ≤ t_max`.
fn g_error(tr: &DiffusionTransform, eps: f64, half: f64, t_max: f64) -> f64 {
    let grid = tr.grid();
    let space = tr.model.space();
    let mut worst = 0.0f64;
    for k in 0..grid.len() {
        let t = grid.node(k);
        if t > t_max + 1e-12 {
            break;
        }
        for i in space.nodes_within(-half, half) {
            let exact = gaussian_density(space.node(i), Y0, bridge_variance(t, eps));
            worst = worst.max((tr.g.field.values[[k, i]] - exact).abs() / exact);
        }
    }
    worst
}

#[test]
fn g_matches_gaussian_convolution_in_the_bulk() {
    let tr = brownian_bridge(256, 512, EPS);
    assert_eq!(tr.g.clipped, 0);
    let e = g_error(&tr, EPS, 0.75, 0.5);
    assert!(e <= 1e-3, "relative error {e:e}");
}

#[test]
fn g_error_drops_fourfold_under_refinement() {
    let sizes = [(64, 32), (128, 128), (256, 512)];
    let errs: Vec<f64> = sizes
        .iter()
        .map(|&(m, n)| g_error(&brownian_bridge(m, n, 0.2), 0.2, 1.5, 0.9))
        .collect();
    for w in errs.windows(2) {
        assert!(w[0] / w[1] >= 4.0, "{errs:?}");
    }
}

#[test]
fn bridge_drift_matches_closed_form() {
    let tr = brownian_bridge(256, 512, EPS);
    let e = bridge_drift_error(&tr, &tr.drift);
    assert!(e <= 1e-2, "relative drift error {e:e}");
}

#[test]
fn drift_is_gauge_invariant() {
    let tr = brownian_bridge(128, 128, EPS);
    let mut scaled = tr.g.field.clone();
    scaled.values.mapv_inplace(|v| v * 3.7);
    let (_, drift) = psi_and_drift(&tr.model, &scaled).unwrap();
    let dx = tr.model.space().dx();
    for ((k, i), b) in tr.drift.values.indexed_iter() {
        let a = drift.values[[k, i]];
        assert_eq!(a.is_nan(), b.is_nan());
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(tr.model.space().cells);
        let normal = (lo..=hi).all(|j| tr.g.field.values[[k, j]] >= f64::MIN_POSITIVE);
        if a.is_finite() && normal {
            // Rounding of log g scales with |log g|.
            let size = tr.psi.values[[k, lo]].abs() + tr.psi.values[[k, hi]].abs() + 2.0;
            assert!((a - b).abs() <= 64.0 * f64::EPSILON * size / dx, "{a} {b}");
        }
    }
}

#[test]
fn duality_holds_for_the_bridge() {
    let tr = brownian_bridge(256, 512, EPS);
    let d = duality_profile(&tr.model, &tr.f.field, &tr.g.field);
    assert!((d[0] - 1.0).abs() < 1e-12);
    for x in d.iter() {
        assert!((x - 1.0).abs() < 1e-12, "{x}");
    }
}

#[test]
fn hjb_residual_in_the_bulk_and_its_convergence() {
    let residual = |m: usize, n: usize| {
        let tr = brownian_bridge(m, n, EPS);
        let v = GridFunction::constant(tr.grid(), tr.model.space(), 0.0);
        let r = diffusion_hjb_residual(&tr.psi, &tr.model, &v).unwrap();
        let fk = fk_pde_residual(&tr.model, &v, &tr.g.field).unwrap();
        let (a, b) = middle_range(&tr.model.space(), 0.25);
        let mut gap = 0.0f64;
        let mut fk_scale = 0.0f64;
        for k in 0..tr.grid().len() {
            if tr.grid().node(k) > 0.9 + 1e-12 {
                break;
            }
            for i in tr.model.space().nodes_within(a, b) {
                let g = tr.g.field.values[[k, i]];
                gap = gap.max((r.values[[k, i]] * g - fk.values[[k, i]]).abs());
                fk_scale = fk_scale.max(g / tr.grid().dt());
            }
        }
        (r.max_abs_over(a, b, 0.9), gap / fk_scale)
    };
    let (coarse, gap_coarse) = residual(128, 128);
    let (fine, gap_fine) = residual(256, 512);
    assert!(fine <= 5e-2, "{fine:e}");
    assert!(coarse / fine >= 4.0, "{coarse:e} -> {fine:e}");
    assert!(gap_coarse / gap_fine >= 4.0, "{gap_coarse:e} -> {gap_fine:e}");
}

#[test]
fn transformed_paths_pin_to_the_target() {
    let tr = brownian_bridge(256, 512, EPS);
    let p0 = tr.marginal_density(0);
    let paths = sample_em_paths(
        &tr.model,
        Drift::Grid(&tr.drift),
        p0.view(),
        10_000,
        2024,
        512,
        1.0,
    )
    .unwrap();
    let xs: Vec<f64> = paths.iter().map(|p| p.terminal()).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(std <= 2.0 * EPS + 2.0 * tr.model.space().dx(), "std {std}");
}

#[test]
fn identity_transform_marginals_match_m() {
    let model = Diffusion1DModel::from_fn(-3.0, 3.0, 256, |x| 0.5 * x * x).unwrap();
    let grid = TimeGrid::new(512).unwrap();
    let ones = Array1::ones(257);
    let v = GridFunction::constant(grid, model.space(), 0.0);
    let tr = DiffusionTransform::build(model, v, ones.view(), ones.view(), grid).unwrap();
    for t in [0.0, 0.5, 1.0] {
        let tv = empirical_vs_fk_marginal(&tr, t, 100_000, 5, DEFAULT_BINS).unwrap();
        assert!(tv <= 0.02, "t={t} tv={tv}");
    }
}

#[test]
fn bridge_marginal_at_late_time() {
    let tr = brownian_bridge(256, 512, EPS);
    let tv = empirical_vs_fk_marginal(&tr, 0.9, 100_000, 9, DEFAULT_BINS).unwrap();
    assert!(tv <= 0.05, "tv={tv}");
}

#[test]
fn reflected_sampler_preserves_m() {
    let model = Diffusion1DModel::from_fn(-3.0, 3.0, 256, |x| x * x).unwrap();
    let horizon = 20_000.0;
    let steps = 2_000_000;
    let path = sample_em(&model, Drift::Reference, 0.0, Seed::new(77), steps, horizon).unwrap();
    let stride = steps / 20_000;
    let hist = histogram(
        &model.space(),
        path.positions.iter().step_by(stride).skip(1).copied(),
        DEFAULT_BINS,
    );
    let target = bin_masses(&model.space(), model.m(), DEFAULT_BINS);
    let tv = total_variation(hist.view(), target.view());
    assert!(tv <= 0.03, "tv={tv}");
}
