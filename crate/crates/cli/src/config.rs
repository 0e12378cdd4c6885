//! Run configuration: one JSON document, optionally patched with `--set`
//! overrides, validated and resolved before any computation starts.

use std::path::{Component, Path, PathBuf};

use kseed_core::model::TabulatedCoefficients;
use kseed_core::{DiffusionModel, DomainGrid, ProfileSpec, Scheme, SeedOptions, SolverConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainBlock,
    pub model: ModelBlock,
    pub time: TimeBlock,
    #[serde(default)]
    pub gamma: Option<ProfileSpec>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub mc: McBlock,
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainBlock {
    pub dim: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n_cells: Vec<usize>,
}

impl DomainBlock {
    pub fn grid(&self) -> Result<DomainGrid, CliError> {
        DomainGrid::new(self.dim, &self.lo, &self.hi, &self.n_cells)
            .map_err(|e| CliError::config(format!("domain: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelBlock {
    Constant {
        drift: Vec<f64>,
        beta: Vec<Vec<f64>>,
    },
    LinearDrift {
        rate: Vec<f64>,
        center: Vec<f64>,
        beta: Vec<Vec<f64>>,
    },
    /// Coefficients sampled on a grid: a CSV file, or a JSON manifest of
    /// time-stamped CSV files. The table grid defaults to the solver domain.
    Tabulated {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<DomainBlock>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_steps() -> usize {
    SolverConfig::default().n_steps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub resolvent_tol: f64,
    pub resolvent_max_iter: usize,
    pub residual_tol: f64,
    pub eps_neg: f64,
    pub allow_non_monotone: bool,
    pub linear_solver_tol: f64,
    pub linear_solver_max_iter: usize,
    pub spectral_tol: f64,
    pub spectral_max_iter: usize,
    pub assembly_cap: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let seed = SeedOptions::default();
        let solver = SolverConfig::default();
        Tolerances {
            resolvent_tol: seed.resolvent_tol,
            resolvent_max_iter: seed.resolvent_max_iter,
            residual_tol: seed.residual_tol,
            eps_neg: seed.eps_neg,
            allow_non_monotone: seed.allow_non_monotone,
            linear_solver_tol: solver.linear_solver_tol,
            linear_solver_max_iter: solver.linear_solver_max_iter,
            spectral_tol: 1e-8,
            spectral_max_iter: 1000,
            assembly_cap: kseed_core::fredholm::DEFAULT_ASSEMBLY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McBlock {
    pub n_particles: usize,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
    /// Histogram bins per axis; must divide the cell counts.
    pub bins: Option<Vec<usize>>,
    pub z_bound: f64,
}

impl Default for McBlock {
    fn default() -> Self {
        McBlock { n_particles: 100_000, dt: None, seed: None, bins: None, z_bound: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub dir: PathBuf,
}

/// Applies `key.path=value` overrides to a JSON tree. The value is parsed as
/// JSON when possible and taken as a string otherwise.
pub fn apply_overrides(tree: &mut Value, overrides: &[String]) -> Result<(), CliError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override `{item}` is not of the form key.path=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::config(format!("override key `{key}` has an empty segment")));
        }
        let mut node = &mut *tree;
        for part in &parts[..parts.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::config(format!("override `{key}`: `{part}` is inside a non-object")))?;
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
            if node.is_null() {
                *node = Value::Object(Default::default());
            }
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("override `{key}` targets a non-object parent")))?;
        obj.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

/// `base/p` (or `p` if absolute) with `.` and `..` removed lexically.
fn absolute(base: &Path, p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in base.join(p).components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

impl RunConfig {
    /// Reads, patches and parses a configuration file. Relative paths inside
    /// it are taken relative to the file's directory and made absolute.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        let mut tree: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut tree, overrides)?;
        let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::config(e.to_string()))?;
        let base = std::path::absolute(path)
            .map_err(|e| CliError::io(e.to_string()))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        cfg.output.dir = absolute(&base, &cfg.output.dir);
        if let ModelBlock::Tabulated { path, .. } = &mut cfg.model {
            *path = absolute(&base, path);
        }
        if let Some(ProfileSpec::Csv { path }) = &mut cfg.gamma {
            *path = absolute(&base, path);
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<DomainGrid, CliError> {
        self.domain.grid()
    }

    pub fn model(&self, grid: &DomainGrid) -> Result<DiffusionModel, CliError> {
        let dim = self.domain.dim;
        let m = match &self.model {
            ModelBlock::Constant { drift, beta } => DiffusionModel::constant(dim, drift, beta)?,
            ModelBlock::LinearDrift { rate, center, beta } => DiffusionModel::linear_drift(dim, rate, center, beta)?,
            ModelBlock::Tabulated { path, grid: table_grid } => {
                let tg = match table_grid {
                    Some(block) => block.grid()?,
                    None => *grid,
                };
                let table = if path.extension().is_some_and(|e| e == "json") {
                    TabulatedCoefficients::load_manifest(tg, path)?
                } else {
                    TabulatedCoefficients::load_csv(tg, path)?
                };
                DiffusionModel::tabulated(table)
            }
        };
        Ok(m)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            n_steps: self.time.n_steps,
            scheme: self.time.scheme,
            linear_solver_tol: self.tolerances.linear_solver_tol,
            linear_solver_max_iter: self.tolerances.linear_solver_max_iter,
        }
    }

    pub fn seed_options(&self) -> SeedOptions {
        let t = &self.tolerances;
        SeedOptions {
            resolvent_tol: t.resolvent_tol,
            resolvent_max_iter: t.resolvent_max_iter,
            residual_tol: t.residual_tol,
            eps_neg: t.eps_neg,
            allow_non_monotone: t.allow_non_monotone,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.time.horizon
    }

    /// Checks every scalar block; model and grid errors surface when built.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |what: &str| Err(CliError::config(what.to_string()));
        if !(self.time.horizon > 0.0) || !self.time.horizon.is_finite() {
            return bad("time.T must be positive and finite");
        }
        self.solver().validate().map_err(|e| CliError::config(format!("time/tolerances: {e}")))?;
        let t = &self.tolerances;
        if !(t.resolvent_tol > 0.0) || !(t.residual_tol > 0.0) || !(t.spectral_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(t.eps_neg >= 0.0) {
            return bad("tolerances.eps_neg must be nonnegative");
        }
        if t.resolvent_max_iter == 0 || t.spectral_max_iter == 0 {
            return bad("iteration limits must be positive");
        }
        if self.mc.n_particles == 0 {
            return bad("mc.n_particles must be positive");
        }
        if let Some(dt) = self.mc.dt {
            if !(dt > 0.0 && dt <= self.time.horizon) {
                return bad("mc.dt must satisfy 0 < dt ≤ T");
            }
        }
        if !(self.mc.z_bound > 0.0) {
            return bad("mc.z_bound must be positive");
        }
        if let Some(bins) = &self.mc.bins {
            if bins.len() != self.domain.dim {
                return bad("mc.bins needs one entry per axis");
            }
            for (b, n) in bins.iter().zip(&self.domain.n_cells) {
                if *b == 0 || n % b != 0 {
                    return bad("mc.bins must divide domain.n_cells");
                }
            }
        }
        Ok(())
    }

    /// Histogram bins per axis: as configured, or the largest divisor of each
    /// cell count not exceeding 32.
    pub fn mc_bins(&self) -> Vec<usize> {
        match &self.mc.bins {
            Some(b) => b.clone(),
            None => {
                self.domain.n_cells.iter().map(|n| (1..=(*n).min(32)).rev().find(|b| n % b == 0).unwrap_or(1)).collect()
            }
        }
    }
}
