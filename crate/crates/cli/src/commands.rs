//! Subcommand implementations. Each returns the checks it evaluated; files
//! are written into the output directory as the run proceeds.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use htransform::bridge::{ipf_solve, static_entropy, write_vector_csv, BridgeProblem, MONOTONE_SLACK};
use htransform::diffusion::{
    diffusion_hjb_residual, duality_profile, empirical_vs_fk_marginal, fk_pde_residual, middle_range,
    sample_em_paths, write_em_paths_csv, DiffusionTransform, Drift, DEFAULT_BINS,
};
use htransform::feynman_kac::{check_fk_generator, check_semigroup, fk_residual_signed, FKSolution};
use htransform::generator_lab::{
    carre_du_champ_jumps, carre_du_champ_product_rule, check_fk_stochastic_derivative,
    check_main_theorem_with_step,
};
use htransform::grid::TimeGrid;
use htransform::h_transform::HProcess;
use htransform::hjb::{discrete_hjb_residual, PsiField, TimeDifference};
use htransform::markov::{empirical_marginal, write_paths_csv, StateSpace, DETAILED_BALANCE_TOL};
use htransform::orlicz::{holder_check, hypothesis_report, norm_ratio_profile, WeightedMeasure};
use log::info;
use ndarray::{Array1, ArrayView2};

use crate::config::{ChainInputs, ProcessKind, RunConfig};
use crate::failure::Failure;

/// `residual · g` against the Feynman-Kac residual, relative to `g / Δt`.
pub const HJB_IDENTITY_TOL: f64 = 1e-12;
pub const MASTER_EQUATION_TOL: f64 = 1e-6;
/// Residuals below this are rounding noise and carry no order.
const ORDER_FLOOR: f64 = 1e-13;

/// One evaluated check: the measured value passes when it is at most `tol`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub order: Option<f64>,
}

impl CheckLine {
    pub fn new(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tol,
            order: None,
        }
    }

    pub fn with_order(mut self, order: Option<f64>) -> Self {
        self.order = order;
        self
    }

    pub fn passed(&self) -> bool {
        self.value <= self.tol
    }

    pub fn render(&self) -> String {
        let order = match self.order {
            Some(o) => format!("{o:.3}"),
            None => "-".to_string(),
        };
        format!(
            "{} value={:e} tol={:e} order={} {}",
            self.name,
            self.value,
            self.tol,
            order,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn write_file(
    out: &Path,
    name: &str,
    body: impl FnOnce(&mut Vec<u8>) -> io::Result<()>,
) -> Result<(), Failure> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(out.join(name), buf)?;
    info!("wrote {}", out.join(name).display());
    Ok(())
}

pub fn write_report(out: &Path, name: &str, header: &[String], lines: &[CheckLine]) -> Result<(), Failure> {
    write_file(out, name, |w| {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        for l in lines {
            writeln!(w, "{}", l.render())?;
        }
        Ok(())
    })
}

fn write_state_matrix<W: Write>(
    mut w: W,
    grid: TimeGrid,
    space: &StateSpace,
    name: &str,
    values: ArrayView2<f64>,
) -> io::Result<()> {
    writeln!(w, "# grid_N={}", grid.steps())?;
    writeln!(w, "t,state,{name}")?;
    for k in 0..grid.len() {
        for x in 0..space.len() {
            writeln!(w, "{},{},{}", grid.node(k), space.label(x), values[[k, x]])?;
        }
    }
    Ok(())
}

fn labels(space: &StateSpace) -> impl Iterator<Item = String> + '_ {
    space.labels().iter().cloned()
}

fn build_hprocess(c: &ChainInputs) -> Result<HProcess, Failure> {
    Ok(HProcess::build(&c.model, &c.f0, &c.gamma1, &c.potential, c.grid)?)
}

pub fn model(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let model = cfg.reversible_model()?;
    let space = model.space();
    write_file(out, "m.csv", |w| write_vector_csv(w, labels(space), "m", model.m().view()))?;
    write_file(out, "rates.csv", |w| {
        writeln!(w, "from,to,rate")?;
        for ((x, y), r) in model.rates().indexed_iter() {
            if *r > 0.0 {
                writeln!(w, "{},{},{}", space.label(x), space.label(y), r)?;
            }
        }
        Ok(())
    })?;
    let violation = model.check_detailed_balance();
    write_file(out, "model_summary.txt", |w| {
        writeln!(w, "states = {}", model.n())?;
        writeln!(w, "max_exit_rate = {}", model.kernel().exit_rates().fold(0.0, |a: f64, b| a.max(*b)))?;
        writeln!(w, "detailed_balance_violation = {violation:e}")?;
        writeln!(w, "irreducible = yes")
    })?;
    Ok(vec![CheckLine::new("detailed_balance", violation, DETAILED_BALANCE_TOL)])
}

/// FK residual at `N` and its decay order against `N/2`.
fn fk_residual_with_order(cfg: &RunConfig, c: &ChainInputs, g: ArrayView2<f64>) -> Result<(f64, Option<f64>), Failure> {
    let fine = check_fk_generator(&c.model, &c.potential, g, c.grid)?.max_residual;
    let order = if c.grid.steps() % 2 == 0 && c.grid.steps() >= 4 {
        let coarse = cfg.chain_at(c.grid.steps() / 2)?;
        let sol = FKSolution::solve(&coarse.model, &coarse.potential, &coarse.f0, &coarse.gamma1, coarse.grid)?;
        let r = check_fk_generator(&coarse.model, &coarse.potential, sol.g.view(), coarse.grid)?.max_residual;
        (fine > ORDER_FLOOR && r > ORDER_FLOOR).then(|| (r / fine).log2())
    } else {
        None
    };
    Ok((fine, order))
}

fn duality_deviation(profile: &Array1<f64>) -> f64 {
    let d0 = profile[0];
    profile.iter().map(|d| (d - d0).abs() / d0.abs()).fold(0.0, f64::max)
}

pub fn fk(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let c = cfg.chain()?;
    let sol = FKSolution::solve(&c.model, &c.potential, &c.f0, &c.gamma1, c.grid)?;
    write_file(out, "fk.csv", |w| sol.write_csv(w, c.model.space()))?;
    let (residual, order) = fk_residual_with_order(cfg, &c, sol.g.view())?;
    let duality = duality_deviation(&sol.duality_profile(c.model.m().view()));
    let lines = vec![
        CheckLine::new("fk_residual", residual, cfg.checks.fk_residual_tol).with_order(order),
        CheckLine::new("duality", duality, cfg.checks.duality_tol),
    ];
    write_report(out, "fk_summary.txt", &[format!("grid_N={}", c.grid.steps())], &lines)?;
    Ok(lines)
}

pub fn transform(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let c = cfg.chain()?;
    let hp = build_hprocess(&c)?;
    write_file(out, "marginals.csv", |w| hp.write_marginals_csv(w))?;
    let mut kernel = Vec::new();
    hp.write_kernel_csv(&mut kernel)?;
    write_file(out, "kernel.csv", |w| w.write_all(&kernel))?;
    let entropy = hp.relative_entropy()?;
    write_file(out, "entropy.txt", |w| {
        writeln!(w, "# grid_N={}", c.grid.steps())?;
        writeln!(w, "relative_entropy = {entropy}")?;
        writeln!(w, "normalization = {}", hp.normalization())
    })?;
    let forward = hp.forward_marginal_evolve()?;
    let exact = hp.marginals();
    let gap = (&forward - &exact)
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(vec![CheckLine::new("master_equation", gap, MASTER_EQUATION_TOL)])
}

pub fn sample(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let (seed, s) = cfg.seed()?;
    let c = cfg.chain()?;
    let hp = build_hprocess(&c)?;
    let space = c.model.space();
    let mut summary = vec![
        format!("seed = {seed}"),
        format!("n_paths = {}", s.n_paths),
    ];
    let paths = match s.process {
        ProcessKind::P => {
            summary.push("process = P".into());
            hp.sample_paths(s.n_paths, seed)?
        }
        ProcessKind::R => {
            summary.push("process = R".into());
            let paths = c.model.sample_paths_from(c.model.m().view(), s.n_paths, seed)?;
            let terms = paths
                .iter()
                .map(|p| {
                    let rho = hp.path_density_ratio(p, 0.0, 1.0)?;
                    Ok(if rho > 0.0 { rho * rho.ln() } else { 0.0 })
                })
                .collect::<Result<Vec<f64>, htransform::Error>>()?;
            let n = terms.len() as f64;
            let mean = terms.iter().sum::<f64>() / n;
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let exact = hp.relative_entropy()?;
            summary.push(format!("entropy_importance_sampling = {mean}"));
            summary.push(format!("entropy_standard_error = {se}"));
            summary.push(format!("entropy_exact = {exact}"));
            paths
        }
    };
    let empirical = empirical_marginal(&paths, c.model.n(), s.t)?;
    let target = match s.process {
        ProcessKind::P => hp.marginal(s.t)?,
        ProcessKind::R => c.model.m().clone(),
    };
    let tv = 0.5 * (&empirical - &target).mapv(f64::abs).sum();
    summary.push(format!("marginal_time = {}", s.t));
    summary.push(format!("total_variation = {tv}"));
    write_file(out, "sample_marginal.csv", |w| {
        writeln!(w, "# t={} paths={}", s.t, s.n_paths)?;
        writeln!(w, "state,empirical,exact")?;
        for x in 0..c.model.n() {
            writeln!(w, "{},{},{}", space.label(x), empirical[x], target[x])?;
        }
        Ok(())
    })?;
    if s.write_paths {
        write_file(out, "paths.csv", |w| write_paths_csv(w, space, &paths))?;
    }
    write_file(out, "sample_summary.txt", |w| {
        for l in &summary {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    Ok(Vec::new())
}

pub fn check(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let c = cfg.chain()?;
    let ck = &cfg.checks;
    let hp = build_hprocess(&c)?;
    let g = &hp.fk().g;
    let grid = c.grid;
    let mut lines = Vec::new();

    let mid = grid.node(grid.steps() / 2);
    let semigroup = check_semigroup(hp.propagator(), 0.0, mid, 1.0)?;
    lines.push(CheckLine::new("semigroup", semigroup, ck.semigroup_tol));

    let (residual, order) = fk_residual_with_order(cfg, &c, g.view())?;
    lines.push(CheckLine::new("fk_residual", residual, ck.fk_residual_tol).with_order(order));

    let mut stochastic = 0.0f64;
    for &t in &ck.times {
        let r = check_fk_stochastic_derivative(&c.model, &c.potential, g.view(), grid, t)?;
        stochastic = stochastic.max(r.max_residual);
    }
    lines.push(CheckLine::new("fk_stochastic_derivative", stochastic, ck.stochastic_tol));

    let vectors = cfg.test_vectors(c.model.n())?;
    let mut main = 0.0f64;
    let mut worst_order = f64::INFINITY;
    for &t in &ck.times {
        for u in &vectors {
            let r = check_main_theorem_with_step(&hp, u.view(), t, ck.h)?;
            main = main.max(r.max_residual);
            if r.observed_order.is_finite() {
                worst_order = worst_order.min(r.observed_order);
            }
        }
    }
    lines.push(
        CheckLine::new("main_theorem", main, ck.main_theorem_tol)
            .with_order(worst_order.is_finite().then_some(worst_order)),
    );

    let mut gamma_gap = 0.0f64;
    let mut gamma_negative = 0.0f64;
    let mut functions: Vec<Array1<f64>> = vectors.clone();
    for &t in &ck.times {
        functions.push(g.row(grid.index_of(t)?).to_owned());
    }
    for a in &functions {
        for b in &functions {
            let jumps = carre_du_champ_jumps(c.model.rates(), a.view(), b.view())?;
            let product = carre_du_champ_product_rule(&c.model, a.view(), b.view())?;
            gamma_gap = gamma_gap.max((&jumps - &product).iter().map(|v| v.abs()).fold(0.0, f64::max));
        }
        let diag = carre_du_champ_jumps(c.model.rates(), a.view(), a.view())?;
        gamma_negative = gamma_negative.max(diag.iter().map(|v| 0.0 - v).fold(0.0, f64::max)) + 0.0;
    }
    lines.push(CheckLine::new("carre_du_champ_forms", gamma_gap, ck.carre_du_champ_tol));
    lines.push(CheckLine::new("carre_du_champ_nonnegative", gamma_negative, 0.0));

    let m = WeightedMeasure::normalized(c.model.m().clone())?;
    let mut holder_ratio = 0.0f64;
    for &t in &ck.times {
        let k = grid.index_of(t)?;
        let v_t = c.potential.values().row(k).to_owned();
        for v in vectors.iter().chain(std::iter::once(&v_t)) {
            let h = holder_check(g.row(k), v.view(), &m, ck.young)?;
            if h.lhs > 0.0 {
                holder_ratio = holder_ratio.max(h.lhs / h.rhs);
            }
        }
    }
    lines.push(CheckLine::new("holder", holder_ratio, 1.0));

    let report = hypothesis_report(
        hp.f0().values().view(),
        c.gamma1.values().view(),
        &c.potential,
        &m,
        ck.young,
        ck.entropy_p,
    )?;
    lines.push(CheckLine::new("hypotheses", if report.satisfied { 0.0 } else { 1.0 }, 0.0));

    let ratios = norm_ratio_profile(g.view(), &m, ck.young)?;
    write_file(out, "norm_ratios.csv", |w| {
        writeln!(w, "# grid_N={} young={:?}", grid.steps(), ck.young)?;
        writeln!(w, "t,ratio")?;
        for (k, r) in ratios.iter().enumerate() {
            writeln!(w, "{},{r}", grid.node(k))?;
        }
        Ok(())
    })?;

    let duality = duality_deviation(&hp.fk().duality_profile(c.model.m().view()));
    lines.push(CheckLine::new("duality", duality, ck.duality_tol));

    let mut header = vec![format!("grid_N={}", grid.steps())];
    header.extend(report.lines());
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    header.push(format!("max norm ratio |g_t|/|gamma1| = {max_ratio:e}"));
    write_report(out, "check_report.txt", &header, &lines)?;
    Ok(lines)
}

pub fn hjb(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let c = cfg.chain()?;
    let ck = &cfg.checks;
    let grid = c.grid;
    let sol = FKSolution::solve(&c.model, &c.potential, &c.f0, &c.gamma1, grid)?;
    let g = &sol.g;
    let psi = PsiField::from_g(g.view(), grid)?;
    let space = c.model.space();
    write_file(out, "psi.csv", |w| write_state_matrix(w, grid, space, "psi", psi.psi.view()))?;
    let consistent = discrete_hjb_residual(&psi, &c.model, &c.potential, TimeDifference::LogConsistent)?;
    let centered = discrete_hjb_residual(&psi, &c.model, &c.potential, TimeDifference::Centered)?;
    write_file(out, "hjb_residual.csv", |w| consistent.write_csv(w, space))?;

    let fk = fk_residual_signed(&c.model, &c.potential, g.view(), grid)?;
    let mut above = 0.0f64;
    let mut identity = 0.0f64;
    for ((k, x), r) in consistent.residual.indexed_iter() {
        if r.is_nan() {
            continue;
        }
        let gv = g[[k, x]];
        if gv > ck.hjb_g_threshold {
            above = above.max(r.abs());
        }
        identity = identity.max((r * gv - fk[[k, x]]).abs() / (gv / grid.dt()));
    }
    let lines = vec![
        CheckLine::new("hjb_residual", above, ck.hjb_tol),
        CheckLine::new("hjb_fk_identity", identity, HJB_IDENTITY_TOL),
    ];
    let header = vec![
        format!("grid_N={}", grid.steps()),
        format!("centered_max_residual = {:e}", centered.max_residual),
        format!("log_consistent_max_residual = {:e}", consistent.max_residual),
        format!("log_consistent_mean_residual = {:e}", consistent.mean_residual),
        format!("theta_identity_gap = {:e}", consistent.identity_gap),
        format!("masked_points = {}", consistent.flagged.len()),
    ];
    write_report(out, "hjb_summary.txt", &header, &lines)?;
    Ok(lines)
}

pub fn bridge(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let b = cfg
        .bridge
        .as_ref()
        .ok_or_else(|| Failure::validation("missing_section", "[bridge] section is required"))?;
    let model = cfg.reversible_model()?;
    let problem = BridgeProblem::new(&model, Array1::from_vec(b.mu0.clone()), Array1::from_vec(b.mu1.clone()))?;
    let result = ipf_solve(&problem, b.tol, b.max_iter);
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            let f: Failure = e.into();
            write_file(out, "bridge_summary.txt", |w| writeln!(w, "# {f}"))?;
            return Err(f);
        }
    };
    let space = model.space();
    write_file(out, "f0.csv", |w| write_vector_csv(w, labels(space), "f0", result.f0.view()))?;
    write_file(out, "gamma1.csv", |w| write_vector_csv(w, labels(space), "gamma1", result.gamma1.view()))?;
    write_file(out, "ipf_log.csv", |w| result.write_log(w))?;
    let rise = result
        .history
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(0.0, f64::max);
    let q = problem.joint(result.f0.view(), result.gamma1.view());
    let lines = vec![
        CheckLine::new("ipf_marginal_error", result.final_error, b.tol),
        CheckLine::new("ipf_monotone", rise, MONOTONE_SLACK),
    ];
    let header = vec![
        format!("iterations = {}", result.iterations),
        format!("restricted = {}", result.restricted),
        format!("static_entropy = {}", static_entropy(&q, problem.kernel())),
    ];
    write_report(out, "bridge_summary.txt", &header, &lines)?;
    Ok(lines)
}

pub fn diffusion(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let d = cfg.diffusion_inputs()?;
    let tr = DiffusionTransform::build(d.model, d.potential, d.f0.view(), d.gamma1.view(), d.grid)?;
    write_file(out, "g.csv", |w| tr.g.field.write_csv(w))?;
    write_file(out, "f.csv", |w| tr.f.field.write_csv(w))?;
    write_file(out, "psi.csv", |w| tr.psi.write_csv(w))?;
    write_file(out, "drift.csv", |w| tr.drift.write_csv(w))?;
    let space = tr.model.space();
    let (a, b) = middle_range(&space, 0.5);
    let hjb = diffusion_hjb_residual(&tr.psi, &tr.model, &tr.potential)?;
    let fk = fk_pde_residual(&tr.model, &tr.potential, &tr.g.field)?;
    let duality = duality_deviation(&duality_profile(&tr.model, &tr.f.field, &tr.g.field));
    let mut header = vec![
        format!("grid_N={} M={} x_min={} x_max={}", tr.grid().steps(), space.cells, space.x_min, space.x_max),
        format!("clipped_g = {}", tr.g.clipped),
        format!("clipped_f = {}", tr.f.clipped),
        format!("normalization = {}", tr.normalization),
        format!("hjb_residual_middle_half_t_le_0.9 = {:e}", hjb.max_abs_over(a, b, 0.9)),
        format!("fk_residual_middle_half_t_le_0.9 = {:e}", fk.max_abs_over(a, b, 0.9)),
    ];
    if let Some(s) = &cfg.sampling {
        let (seed, _) = cfg.seed()?;
        let p0 = tr.marginal_density(0);
        let paths = sample_em_paths(&tr.model, Drift::Grid(&tr.drift), p0.view(), s.n_paths, seed, s.steps, 1.0)?;
        let xs: Vec<f64> = paths.iter().map(|p| p.terminal()).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let tv = empirical_vs_fk_marginal(&tr, s.t, s.n_paths, seed, DEFAULT_BINS)?;
        header.push(format!("em_paths = {} seed = {seed} steps = {}", s.n_paths, s.steps));
        header.push(format!("terminal_mean = {mean}"));
        header.push(format!("terminal_std = {std}"));
        header.push(format!("total_variation_t{} = {tv}", s.t));
        if s.write_paths {
            write_file(out, "em_paths.csv", |w| write_em_paths_csv(w, &paths))?;
        }
    }
    let lines = vec![CheckLine::new("duality", duality, cfg.checks.duality_tol)];
    write_report(out, "diffusion_summary.txt", &header, &lines)?;
    Ok(lines)
}

/// Runs every applicable subcommand and aggregates the checks.
pub fn report(cfg: &RunConfig, out: &Path) -> Result<Vec<CheckLine>, Failure> {
    let mut all = Vec::new();
    let mut sections = String::new();
    let mut run = |name: &str, f: fn(&RunConfig, &Path) -> Result<Vec<CheckLine>, Failure>| -> Result<(), Failure> {
        let lines = f(cfg, out)?;
        let failed = lines.iter().filter(|l| !l.passed()).count();
        let _ = writeln!(sections, "{name}: {} checks, {failed} failed", lines.len());
        all.extend(lines.into_iter().map(|mut l| {
            l.name = format!("{name}.{}", l.name);
            l
        }));
        Ok(())
    };
    if cfg.model.is_some() {
        run("check", check)?;
        run("hjb", hjb)?;
        run("transform", transform)?;
    }
    if cfg.bridge.is_some() {
        run("bridge", bridge)?;
    }
    if cfg.diffusion.is_some() {
        run("diffusion", diffusion)?;
    }
    let header: Vec<String> = sections.lines().map(str::to_string).collect();
    write_report(out, "report.txt", &header, &all)?;
    Ok(all)
}
