//! Experiment configuration: a TOML tree whose coefficient functions are named presets.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
    pub grid: GridConfig,
    pub martingale: MartingaleConfig,
    pub forward: ForwardConfig,
    pub driver: DriverConfig,
    pub terminal: TerminalConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub start: StartConfig,
    #[serde(default)]
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub study: StudyConfig,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    /// Explicit grid points (from 0 to the horizon); replaces the uniform grid.
    #[serde(default)]
    pub points: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MartingaleKindConfig {
    Brownian,
    Diffusion,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolPreset {
    /// `a(m) = value` on every component.
    Constant { value: f64 },
    /// `a(m) = √(1 + m²)` componentwise.
    SqrtOnePlusSquare,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MartingaleConfig {
    pub kind: MartingaleKindConfig,
    pub dim: usize,
    #[serde(default)]
    pub vol: Option<VolPreset>,
    #[serde(default)]
    pub orthogonal_vol: Option<f64>,
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub bracket_bound: Option<f64>,
    #[serde(default)]
    pub memory_budget_mb: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForwardConfig {
    /// `X = x + M`.
    Identity,
    /// Constant `σ` (`n × d` row-major) and drift (`n`).
    Constant {
        n: usize,
        sigma: Vec<f64>,
        drift: Vec<f64>,
    },
    /// `dX = sX dM + cX dC`, scalar.
    Linear { s: f64, c: f64 },
    /// `σ = (1 + x)·1{t ≥ T/2}`, the switching example with a closed form.
    Switching,
    /// `σ = s(1 + ½ sin x)`, scalar, smooth and nonlinear.
    SmoothNonlinear { s: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    Linear {
        r: f64,
        mu: Vec<f64>,
    },
    Entropic {
        gamma: f64,
    },
    /// Exponential-utility driver built from the `[market]` block.
    UtilityMarket,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant {
        value: f64,
    },
    /// `F = x₀`; unbounded.
    Identity,
    ClippedIdentity {
        lo: f64,
        hi: f64,
    },
    /// `F = L tanh(x₀ / L)`.
    SmoothClip {
        level: f64,
    },
    /// `F = log(1 + x₀)`; unbounded.
    Log1p,
    /// `F = min((x₀ − K)⁺, cap)`.
    CappedCall {
        strike: f64,
        cap: f64,
    },
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    #[default]
    Lipschitz,
    Quadratic,
    Orthogonal,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    #[default]
    Transform,
    Direct,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: MethodConfig,
    pub mode: ModeConfig,
    pub degree: usize,
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub k_level: Option<f64>,
    pub z_level: f64,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub transform_kappa: Option<f64>,
    /// Coefficient of `κ/2 ∫ d⟨L, L⟩` for the orthogonal method.
    pub orthogonal_kappa: f64,
    pub strict: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: MethodConfig::Lipschitz,
            mode: ModeConfig::Transform,
            degree: 3,
            ridge: 1e-8,
            tol: 1e-6,
            max_iter: 50,
            k_level: None,
            z_level: 100.0,
            c1: None,
            c2: None,
            transform_kappa: None,
            orthogonal_kappa: 0.0,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StartConfig {
    pub t: f64,
    pub x: Option<Vec<f64>>,
    pub m: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub k: usize,
    /// `k × d` row-major.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub kappa: f64,
    #[serde(default)]
    pub premium_bound: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub nodes: Vec<NodeConfig>,
    pub surface: Option<SurfaceStudy>,
    pub representation: Option<RepresentationStudy>,
    pub refinement: Option<RefinementStudy>,
    pub hedge: Option<HedgeStudy>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub t: f64,
    pub x: Vec<f64>,
    pub m: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SurfaceStudy {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub ms: Vec<f64>,
    /// Paths per surface time used as representation cells.
    #[serde(default = "default_cells")]
    pub cells_per_step: usize,
}

fn default_cells() -> usize {
    50
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RepresentationStudy {
    /// Grid indices of the cells.
    pub steps: Vec<usize>,
    pub per_step: usize,
    pub h: f64,
    /// Paths of the restarted bump solves; defaults to the main path count.
    #[serde(default)]
    pub paths: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RefinementStudy {
    /// Step counts of the uniform grids.
    pub ladder: Vec<usize>,
    #[serde(default)]
    pub paths: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HedgeStudy {
    pub h: f64,
    /// Price-grid times and risk levels for the backtest policy.
    #[serde(default)]
    pub times: Vec<f64>,
    #[serde(default)]
    pub rs: Vec<f64>,
    #[serde(default)]
    pub grid_paths: Option<usize>,
    #[serde(default)]
    pub backtest_paths: Option<usize>,
    #[serde(default)]
    pub initial_wealth: f64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const MINIMAL: &str = r#"
scenario = "minimal"
[grid]
horizon = 1.0
steps = 10
paths = 100
[martingale]
kind = "brownian"
dim = 1
[forward]
preset = "identity"
[driver]
preset = "zero"
[terminal]
preset = "constant"
value = 1.0
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.solver.degree, 3);
        assert_eq!(c.solver.method, MethodConfig::Lipschitz);
        assert_eq!(c.terminal, TerminalConfig::Constant { value: 1.0 });
        assert!(c.study.surface.is_none());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = MINIMAL.replace("steps = 10", "steps = 10\nstepz = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = MINIMAL.replace("\"zero\"", "\"mystery\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 5;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn driver_presets_use_kebab_case() {
        let c = MINIMAL.replace("preset = \"zero\"", "preset = \"utility-market\"");
        assert_eq!(
            ExperimentConfig::from_toml(&c).unwrap().driver,
            DriverConfig::UtilityMarket
        );
    }
}
