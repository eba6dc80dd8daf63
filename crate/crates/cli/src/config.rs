//! Run configuration read from TOML.

use std::path::Path;

use htransform::diffusion::{gaussian_density, Diffusion1DModel, GridFunction, SpaceGrid};
use htransform::feynman_kac::{InitialWeight, PotentialField, TerminalWeight};
use htransform::grid::TimeGrid;
use htransform::markov::{ModelDocument, ReversibleModel};
use htransform::orlicz::YoungFunction;
use ndarray::{Array1, Array2};
use serde::Deserialize;

use crate::failure::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelDocument>,
    #[serde(default)]
    pub transform: TransformSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub checks: ChecksSection,
    pub sampling: Option<SamplingSection>,
    pub bridge: Option<BridgeSection>,
    pub diffusion: Option<DiffusionSection>,
}

/// A potential given as a constant, one value per state, or one row per
/// time node.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PotentialSpec {
    Constant(f64),
    Stationary(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformSection {
    pub f0: Option<Vec<f64>>,
    pub gamma1: Option<Vec<f64>>,
    #[serde(rename = "V")]
    pub potential: Option<PotentialSpec>,
    /// Declared lower bound `V ≥ -lo`.
    pub lo: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "N")]
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { steps: 1000 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksSection {
    pub semigroup_tol: f64,
    pub fk_residual_tol: f64,
    pub stochastic_tol: f64,
    pub main_theorem_tol: f64,
    pub carre_du_champ_tol: f64,
    pub hjb_tol: f64,
    /// HJB residuals are only compared where `g` exceeds this.
    pub hjb_g_threshold: f64,
    pub duality_tol: f64,
    pub times: Vec<f64>,
    /// Largest step of the stochastic-derivative sequence `h, h/2, h/4`.
    pub h: f64,
    /// Test functions for the generator checks; defaults to the state
    /// indicators.
    pub test_vectors: Option<Vec<Vec<f64>>>,
    pub young: YoungFunction,
    pub entropy_p: f64,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            semigroup_tol: 1e-8,
            fk_residual_tol: 1e-6,
            stochastic_tol: 1e-5,
            main_theorem_tol: 1e-5,
            carre_du_champ_tol: 1e-13,
            hjb_tol: 1e-6,
            hjb_g_threshold: 1e-6,
            duality_tol: 1e-10,
            times: vec![0.25, 0.5, 0.75],
            h: 1e-2,
            test_vectors: None,
            young: YoungFunction::ThetaExp,
            entropy_p: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ProcessKind {
    P,
    R,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub n_paths: usize,
    pub seed: Option<u64>,
    #[serde(default = "default_process")]
    pub process: ProcessKind,
    /// Time of the empirical marginal.
    #[serde(default = "default_half")]
    pub t: f64,
    /// Euler-Maruyama steps for diffusion paths.
    #[serde(default = "default_em_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub write_paths: bool,
}

fn default_process() -> ProcessKind {
    ProcessKind::P
}

fn default_half() -> f64 {
    0.5
}

fn default_em_steps() -> usize {
    512
}

fn default_true() -> bool {
    true
}

fn default_ipf_tol() -> f64 {
    htransform::bridge::DEFAULT_TOL
}

fn default_ipf_iter() -> usize {
    htransform::bridge::DEFAULT_MAX_ITER
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    #[serde(default = "default_ipf_tol")]
    pub tol: f64,
    #[serde(default = "default_ipf_iter")]
    pub max_iter: usize,
}

/// A function on the diffusion nodes.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Profile {
    Constant(f64),
    Values(Vec<f64>),
    Gaussian { mean: f64, std: f64 },
    /// `Σ c_k x^k`.
    Polynomial { coefficients: Vec<f64> },
}

impl Profile {
    pub fn on(&self, space: &SpaceGrid, what: &str) -> Result<Array1<f64>, Failure> {
        let nodes = space.nodes();
        match self {
            Self::Constant(c) => Ok(Array1::from_elem(nodes.len(), *c)),
            Self::Values(v) => {
                if v.len() != nodes.len() {
                    return Err(Failure::validation(
                        "dimension_mismatch",
                        format!("{what} has {} values for {} nodes", v.len(), nodes.len()),
                    ));
                }
                Ok(Array1::from_vec(v.clone()))
            }
            Self::Gaussian { mean, std } => {
                if !(*std > 0.0) {
                    return Err(Failure::validation("invalid_input", format!("{what}: std must be positive")));
                }
                Ok(nodes.mapv(|x| gaussian_density(x, *mean, std * std)))
            }
            Self::Polynomial { coefficients } => Ok(nodes.mapv(|x| {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
            })),
        }
    }
}

fn zero_profile() -> Profile {
    Profile::Constant(0.0)
}

fn one_profile() -> Profile {
    Profile::Constant(1.0)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    pub x_min: f64,
    pub x_max: f64,
    #[serde(rename = "M")]
    pub cells: usize,
    #[serde(rename = "U", default = "zero_profile")]
    pub potential: Profile,
    #[serde(default = "one_profile")]
    pub f0: Profile,
    pub gamma1: Profile,
    /// Time-independent `V`.
    #[serde(rename = "V", default = "zero_profile")]
    pub killing: Profile,
}

/// Inputs of the finite-state pipeline after validation.
pub struct ChainInputs {
    pub model: ReversibleModel,
    pub grid: TimeGrid,
    pub f0: InitialWeight,
    pub gamma1: TerminalWeight,
    pub potential: PotentialField,
}

/// Inputs of the diffusion pipeline after validation.
pub struct DiffusionInputs {
    pub model: Diffusion1DModel,
    pub grid: TimeGrid,
    pub f0: Array1<f64>,
    pub gamma1: Array1<f64>,
    pub potential: GridFunction,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::validation("config_unreadable", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::validation("config_parse", e.to_string()))?;
        if cfg.grid.steps < 2 {
            return Err(Failure::validation("invalid_input", "grid N must be at least 2"));
        }
        if let Some(s) = &cfg.sampling {
            if s.seed.is_none() {
                return Err(Failure::validation("missing_seed", "sampling requires a seed"));
            }
        }
        Ok(cfg)
    }

    pub fn time_grid(&self) -> Result<TimeGrid, Failure> {
        Ok(TimeGrid::new(self.grid.steps)?)
    }

    pub fn reversible_model(&self) -> Result<ReversibleModel, Failure> {
        let doc = self
            .model
            .as_ref()
            .ok_or_else(|| Failure::validation("missing_section", "[model] section is required"))?;
        Ok(doc.build()?)
    }

    pub fn chain(&self) -> Result<ChainInputs, Failure> {
        self.chain_at(self.grid.steps)
    }

    /// Inputs on a grid of `steps` cells; per-node `V` rows are subsampled,
    /// which needs `steps` to divide the configured `N`.
    pub fn chain_at(&self, steps: usize) -> Result<ChainInputs, Failure> {
        let model = self.reversible_model()?;
        let grid = TimeGrid::new(steps)?;
        let n = model.n();
        let t = &self.transform;
        let vector = |v: &Option<Vec<f64>>, what: &str| -> Result<Array1<f64>, Failure> {
            match v {
                None => Ok(Array1::ones(n)),
                Some(v) if v.len() == n => Ok(Array1::from_vec(v.clone())),
                Some(v) => Err(Failure::validation(
                    "dimension_mismatch",
                    format!("{what} has {} entries for {n} states", v.len()),
                )),
            }
        };
        let f0 = InitialWeight::new(vector(&t.f0, "f0")?)?;
        let gamma1 = TerminalWeight::new(vector(&t.gamma1, "gamma1")?)?;
        let values = match &t.potential {
            None => Array2::zeros((grid.len(), n)),
            Some(PotentialSpec::Constant(c)) => Array2::from_elem((grid.len(), n), *c),
            Some(PotentialSpec::Stationary(v)) => {
                if v.len() != n {
                    return Err(Failure::validation(
                        "dimension_mismatch",
                        format!("V has {} entries for {n} states", v.len()),
                    ));
                }
                Array2::from_shape_fn((grid.len(), n), |(_, x)| v[x])
            }
            Some(PotentialSpec::Rows(rows)) => {
                let configured = self.grid.steps;
                if rows.len() != configured + 1 || rows.iter().any(|r| r.len() != n) {
                    return Err(Failure::validation(
                        "dimension_mismatch",
                        format!("V rows must be {} x {n}", configured + 1),
                    ));
                }
                if configured % steps != 0 {
                    return Err(Failure::validation(
                        "invalid_input",
                        format!("cannot restrict V rows from N={configured} to N={steps}"),
                    ));
                }
                let stride = configured / steps;
                Array2::from_shape_fn((grid.len(), n), |(k, x)| rows[k * stride][x])
            }
        };
        let potential = match t.lo {
            Some(lo) => PotentialField::with_lower_bound(values, lo)?,
            None => PotentialField::new(values)?,
        };
        Ok(ChainInputs {
            model,
            grid,
            f0,
            gamma1,
            potential,
        })
    }

    pub fn diffusion_inputs(&self) -> Result<DiffusionInputs, Failure> {
        let d = self
            .diffusion
            .as_ref()
            .ok_or_else(|| Failure::validation("missing_section", "[diffusion] section is required"))?;
        let space = SpaceGrid::new(d.x_min, d.x_max, d.cells)?;
        let u = d.potential.on(&space, "U")?;
        let model = Diffusion1DModel::new(d.x_min, d.x_max, u)?;
        let grid = self.time_grid()?;
        let v = d.killing.on(&space, "V")?;
        let values = Array2::from_shape_fn((grid.len(), space.len()), |(_, i)| v[i]);
        let potential = GridFunction::new(grid, space, values)?;
        Ok(DiffusionInputs {
            f0: d.f0.on(&space, "f0")?,
            gamma1: d.gamma1.on(&space, "gamma1")?,
            model,
            grid,
            potential,
        })
    }

    /// Configured test vectors, or the state indicators.
    pub fn test_vectors(&self, n: usize) -> Result<Vec<Array1<f64>>, Failure> {
        match &self.checks.test_vectors {
            None => Ok((0..n)
                .map(|x| Array1::from_shape_fn(n, |y| if x == y { 1.0 } else { 0.0 }))
                .collect()),
            Some(vs) => vs
                .iter()
                .map(|v| {
                    if v.len() == n {
                        Ok(Array1::from_vec(v.clone()))
                    } else {
                        Err(Failure::validation(
                            "dimension_mismatch",
                            format!("test vector has {} entries for {n} states", v.len()),
                        ))
                    }
                })
                .collect(),
        }
    }

    pub fn seed(&self) -> Result<(u64, &SamplingSection), Failure> {
        let s = self
            .sampling
            .as_ref()
            .ok_or_else(|| Failure::validation("missing_section", "[sampling] section is required"))?;
        let seed = s
            .seed
            .ok_or_else(|| Failure::validation("missing_seed", "sampling requires a seed"))?;
        Ok((seed, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
states = ["a", "b"]
J0 = [[0.0, 1.0], [1.0, 0.0]]
m0 = [1.0, 1.0]
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.grid.steps, 1000);
        let inputs = cfg.chain().unwrap();
        assert_eq!(inputs.f0.values().len(), 2);
        assert_eq!(inputs.potential.values().dim(), (1001, 2));
    }

    #[test]
    fn potential_forms() {
        let with = |v: &str| RunConfig::parse(&format!("{MINIMAL}\n[transform]\nV = {v}\n[grid]\nN = 2\n"));
        assert!(with("0.5").unwrap().chain().is_ok());
        assert!(with("[0.5, 1.0]").unwrap().chain().is_ok());
        assert!(with("[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]").unwrap().chain().is_ok());
        let bad = with("[0.5]").unwrap().chain().err().unwrap();
        assert_eq!(bad.reason, "dimension_mismatch");
    }

    #[test]
    fn sampling_without_seed_is_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}\n[sampling]\nn_paths = 10\n")).unwrap_err();
        assert_eq!(err.reason, "missing_seed");
        assert_eq!(err.code, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse(&format!("{MINIMAL}\n[grid]\nsteps = 10\n")).unwrap_err();
        assert_eq!(err.reason, "config_parse");
    }

    #[test]
    fn profiles() {
        let space = SpaceGrid::new(-1.0, 1.0, 16).unwrap();
        let poly = Profile::Polynomial { coefficients: vec![1.0, 0.0, 2.0] };
        let v = poly.on(&space, "U").unwrap();
        assert!((v[0] - 3.0).abs() < 1e-15 && (v[8] - 1.0).abs() < 1e-15);
        assert!(Profile::Values(vec![0.0; 3]).on(&space, "U").is_err());
    }
}
