//! End-to-end construction of an initial density `ρ` and a constant `α > 0`
//! with `p(·, 0) = p(·, T) + α γ` for a nonnegative, nonzero target `γ`.
//!
//! Steps: solve `(I − Q) ζ = γ`; take `u(·,0) = ζ`, which is nonnegative on
//! the monotone path (round-off below `ε_neg` is clamped, anything larger is
//! an error); normalise `ρ = ζ / ∫ζ`, `α = 1 / ∫ζ`; then evolve `ρ` afresh
//! and measure `sup |p(·,0) − p(·,T) − αγ| / sup γ`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fredholm::{apply_q, solve_resolvent, FredholmError, ResolventMethod, ResolventReport};
use crate::grid::{DensityField, DomainGrid, GridError};
use crate::kolmogorov::{evolve, evolve_final, mass_curve, write_mass_curve, KolmogorovError, Scheme, SolverConfig};
use crate::model::{check_ellipticity, DiffusionModel, ModelError};

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("γ is identically zero (the construction needs γ ≥ 0 with γ ≠ 0)")]
    GammaZero,
    #[error("γ is negative at node {index} (value {value:e}); the construction needs γ ≥ 0")]
    GammaNegative { index: usize, value: f64 },
    #[error("invalid target profile: {0}")]
    InvalidProfile(String),
    #[error("scheme {0:?} is not monotone; enable the non-monotone override to use it")]
    NonMonotoneScheme(Scheme),
    #[error(
        "u(·,0) reaches {min:e} at node {index}, below the tolerance −{threshold:e}; refine the grid or time step"
    )]
    NegativityViolation { min: f64, threshold: f64, index: usize },
    #[error("decrement residual {residual:e} exceeds tolerance {tol:e}")]
    ResidualTooLarge { residual: f64, tol: f64 },
    #[error(transparent)]
    Fredholm(#[from] FredholmError),
    #[error(transparent)]
    Kolmogorov(#[from] KolmogorovError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_one() -> f64 {
    1.0
}

/// How to build the target profile `γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProfileSpec {
    /// `amplitude · Π sin(π (x_d − lo_d) / L_d)`, the principal Dirichlet mode.
    Eigenmode {
        #[serde(default = "default_one")]
        amplitude: f64,
    },
    /// `value` on the sub-box `[lo, hi)`, zero elsewhere.
    Bump {
        lo: Vec<f64>,
        hi: Vec<f64>,
        #[serde(default = "default_one")]
        value: f64,
    },
    /// Piecewise constant on the tensor partition given by `breaks` (per axis,
    /// from the domain's lower to upper corner); `values` run first axis fastest.
    Tiles { breaks: Vec<Vec<f64>>, values: Vec<f64> },
    /// Values read from a density CSV on the solver grid.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetProfile {
    pub spec: ProfileSpec,
    pub field: DensityField,
}

impl TargetProfile {
    /// Validates an already sampled field as a target.
    pub fn from_field(spec: ProfileSpec, field: DensityField) -> Result<Self, SeedError> {
        check_target(&field)?;
        Ok(TargetProfile { spec, field })
    }
}

fn check_target(field: &DensityField) -> Result<(), SeedError> {
    for (index, &value) in field.values().iter().enumerate() {
        if value.is_nan() || value < 0.0 {
            return Err(SeedError::GammaNegative { index, value });
        }
        if !value.is_finite() {
            return Err(SeedError::InvalidProfile(format!("γ is not finite at node {index}")));
        }
    }
    if field.values().iter().all(|v| *v == 0.0) {
        return Err(SeedError::GammaZero);
    }
    Ok(())
}

fn within_domain(grid: &DomainGrid, p: &[f64], what: &str) -> Result<(), SeedError> {
    if p.len() != grid.dim() {
        return Err(SeedError::InvalidProfile(format!("{what} needs {} coordinates", grid.dim())));
    }
    for (axis, v) in p.iter().enumerate() {
        if !(*v >= grid.lo()[axis] && *v <= grid.hi()[axis]) {
            return Err(SeedError::InvalidProfile(format!("{what} coordinate {v} lies outside the domain")));
        }
    }
    Ok(())
}

/// Samples the profile at cell centres and checks `γ ≥ 0`, `γ ≠ 0`.
pub fn realize_gamma(spec: &ProfileSpec, grid: &DomainGrid) -> Result<TargetProfile, SeedError> {
    let dim = grid.dim();
    let field = match spec {
        ProfileSpec::Eigenmode { amplitude } => DensityField::from_fn(*grid, |x| {
            let mut v = *amplitude;
            for (axis, xa) in x.iter().enumerate().take(dim) {
                let len = grid.hi()[axis] - grid.lo()[axis];
                v *= (std::f64::consts::PI * (xa - grid.lo()[axis]) / len).sin();
            }
            v
        }),
        ProfileSpec::Bump { lo, hi, value } => {
            within_domain(grid, lo, "bump corner")?;
            within_domain(grid, hi, "bump corner")?;
            if lo.iter().zip(hi).any(|(l, h)| !(h > l)) {
                return Err(SeedError::InvalidProfile("bump needs lo < hi on every axis".into()));
            }
            DensityField::from_fn(*grid, |x| {
                let inside = (0..dim).all(|a| x[a] >= lo[a] && x[a] < hi[a]);
                if inside {
                    *value
                } else {
                    0.0
                }
            })
        }
        ProfileSpec::Tiles { breaks, values } => {
            if breaks.len() != dim {
                return Err(SeedError::InvalidProfile(format!("tiles need break lists for {dim} axes")));
            }
            let mut counts = [1usize; 2];
            for (axis, b) in breaks.iter().enumerate() {
                let (lo, hi) = (grid.lo()[axis], grid.hi()[axis]);
                let ends_ok = b.len() >= 2
                    && (b[0] - lo).abs() <= 1e-12 * (1.0 + lo.abs())
                    && (b[b.len() - 1] - hi).abs() <= 1e-12 * (1.0 + hi.abs());
                if !ends_ok || b.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(SeedError::InvalidProfile(format!(
                        "tile breaks on axis {axis} must increase strictly from {lo} to {hi}"
                    )));
                }
                counts[axis] = b.len() - 1;
            }
            if values.len() != counts[0] * counts[1] {
                return Err(SeedError::InvalidProfile(format!(
                    "tiles need {} values, got {}",
                    counts[0] * counts[1],
                    values.len()
                )));
            }
            DensityField::from_fn(*grid, |x| {
                let mut tile = [0usize; 2];
                for axis in 0..dim {
                    let b = &breaks[axis];
                    tile[axis] = (b.partition_point(|&v| v <= x[axis]) - 1).min(counts[axis] - 1);
                }
                values[tile[0] + counts[0] * tile[1]]
            })
        }
        ProfileSpec::Csv { path } => DensityField::load_csv(*grid, path)?,
    };
    TargetProfile::from_field(spec.clone(), field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedOptions {
    /// Relative L2 residual target of the resolvent solve.
    pub resolvent_tol: f64,
    pub resolvent_max_iter: usize,
    /// Bound on `sup |p(·,0) − p(·,T) − αγ| / sup γ`.
    pub residual_tol: f64,
    /// Negative values of `u(·,0)` down to `−eps_neg · sup u(·,0)` are clamped.
    pub eps_neg: f64,
    /// Permit Crank–Nicolson, which voids the positivity guarantee.
    pub allow_non_monotone: bool,
}

impl Default for SeedOptions {
    fn default() -> Self {
        SeedOptions {
            resolvent_tol: 1e-10,
            resolvent_max_iter: 500,
            residual_tol: 1e-6,
            eps_neg: 1e-10,
            allow_non_monotone: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedSolution {
    pub gamma: TargetProfile,
    pub horizon: f64,
    pub zeta: DensityField,
    /// `ζ` after clamping round-off negatives.
    pub u0: DensityField,
    /// `Q ζ`.
    pub u_t: DensityField,
    pub alpha: f64,
    pub rho: DensityField,
    pub residual: f64,
    /// Most negative value of `ζ` (0 if none).
    pub negativity: f64,
    pub report: ResolventReport,
    /// Mass of `p = L₀ρ` at every time step.
    pub mass_curve: Vec<(f64, f64)>,
    /// `p(·,0) − p(·,T)` from the re-evolved trajectory.
    pub decrement: DensityField,
}

#[derive(Serialize, Deserialize)]
pub struct SeedReportJson {
    pub alpha: f64,
    pub horizon: f64,
    pub residual: f64,
    pub negativity: f64,
    pub iterations: usize,
    pub method: ResolventMethod,
    pub resolvent_residual: f64,
    pub mass_curve: Vec<(f64, f64)>,
}

impl SeedSolution {
    /// Writes `rho.csv`, `u0.csv`, `uT.csv`, `decrement.csv` and `report.json`.
    pub fn export(&self, dir: &Path) -> Result<Vec<String>, SeedError> {
        std::fs::create_dir_all(dir)?;
        self.rho.save_csv(&dir.join("rho.csv"))?;
        self.u0.save_csv(&dir.join("u0.csv"))?;
        self.u_t.save_csv(&dir.join("uT.csv"))?;
        self.decrement.save_csv(&dir.join("decrement.csv"))?;
        let report = SeedReportJson {
            alpha: self.alpha,
            horizon: self.horizon,
            residual: self.residual,
            negativity: self.negativity,
            iterations: self.report.iterations,
            method: self.report.method,
            resolvent_residual: self.report.residual_norm,
            mass_curve: self.mass_curve.clone(),
        };
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(["rho.csv", "u0.csv", "uT.csv", "decrement.csv", "report.json"].map(String::from).to_vec())
    }
}

fn step_times(config: &SolverConfig, horizon: f64) -> Vec<f64> {
    (0..=config.n_steps).map(|k| horizon * k as f64 / config.n_steps as f64).collect()
}

/// `sup |ρ − p(·,T) − αγ| / sup γ`.
fn decrement_residual(rho: &DensityField, p_t: &DensityField, alpha: f64, gamma: &DensityField) -> f64 {
    let worst = rho
        .values()
        .iter()
        .zip(p_t.values())
        .zip(gamma.values())
        .map(|((r, p), g)| (r - p - alpha * g).abs())
        .fold(0.0, f64::max);
    worst / gamma.sup()
}

/// Builds `(ρ, α)` for the target `gamma`.
pub fn run_seed(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    horizon: f64,
    gamma: &TargetProfile,
    options: &SeedOptions,
) -> Result<SeedSolution, SeedError> {
    if config.scheme != Scheme::ImplicitEuler && !options.allow_non_monotone {
        return Err(SeedError::NonMonotoneScheme(config.scheme));
    }
    if gamma.field.grid() != grid {
        return Err(SeedError::InvalidProfile("γ lives on a different grid".into()));
    }
    check_target(&gamma.field)?;
    check_ellipticity(model, grid, &step_times(config, horizon))?;

    let report =
        solve_resolvent(model, grid, config, horizon, &gamma.field, options.resolvent_tol, options.resolvent_max_iter)?;
    let zeta = report.zeta.clone();
    let u_t = apply_q(model, grid, config, horizon, &zeta)?;

    let threshold = options.eps_neg * zeta.sup();
    let (min_index, min_value) =
        zeta.values()
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
    if min_value < -threshold {
        return Err(SeedError::NegativityViolation { min: min_value, threshold, index: min_index });
    }
    let mut u0 = zeta.clone();
    let clamped = u0.values_mut().iter_mut().filter(|v| **v < 0.0).map(|v| *v = 0.0).count();
    if clamped > 0 {
        log::warn!("clamped {clamped} round-off negatives of u(·,0) (most negative {min_value:e})");
    }
    let mass = u0.mass();
    if !(mass > 0.0) {
        return Err(SeedError::NegativityViolation { min: min_value, threshold, index: min_index });
    }
    let alpha = 1.0 / mass;
    let rho = u0.scaled(alpha);

    let traj = evolve(model, grid, config, &rho, 0.0, horizon)?;
    let p_t = traj.final_field();
    let residual = decrement_residual(&rho, p_t, alpha, &gamma.field);
    let decrement = rho.sub(p_t);
    let curve = mass_curve(&traj);
    if !(residual <= options.residual_tol) {
        return Err(SeedError::ResidualTooLarge { residual, tol: options.residual_tol });
    }
    Ok(SeedSolution {
        gamma: gamma.clone(),
        horizon,
        zeta,
        u0,
        u_t,
        alpha,
        rho,
        residual,
        negativity: min_value.min(0.0),
        report,
        mass_curve: curve,
        decrement,
    })
}

/// Re-evolution of a candidate `(ρ, α)` at half, native and double the step count.
#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub alpha: f64,
    pub n_steps: usize,
    /// Residual with `n_steps / 2` steps.
    pub residual_coarse: f64,
    /// Residual with `n_steps` steps (what the construction targeted).
    pub residual_native: f64,
    /// Residual with `2 · n_steps` steps.
    pub residual_refined: f64,
    /// Mass of the refined trajectory.
    pub mass_curve: Vec<(f64, f64)>,
    pub mass_strictly_decreasing: bool,
    /// `p(·,0) − p(·,T)` from the refined trajectory.
    pub decrement: DensityField,
}

#[derive(Serialize)]
struct VerificationJson<'a> {
    alpha: f64,
    n_steps: usize,
    residual_coarse: f64,
    residual_native: f64,
    residual_refined: f64,
    consistent_under_refinement: bool,
    mass_strictly_decreasing: bool,
    tolerance: f64,
    passed: bool,
    mass_curve: &'a [(f64, f64)],
}

impl VerificationReport {
    /// Refining the time step moves the residual towards the continuum value,
    /// so the doubled run must not be worse than the halved one.
    pub fn consistent_under_refinement(&self) -> bool {
        self.residual_refined <= self.residual_coarse
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.residual_native <= tol && self.mass_strictly_decreasing
    }

    /// Writes `verify.json`, `verify_decrement.csv` and `verify_mass_curve.csv`.
    pub fn export(&self, dir: &Path, tol: f64) -> Result<Vec<String>, SeedError> {
        std::fs::create_dir_all(dir)?;
        let json = VerificationJson {
            alpha: self.alpha,
            n_steps: self.n_steps,
            residual_coarse: self.residual_coarse,
            residual_native: self.residual_native,
            residual_refined: self.residual_refined,
            consistent_under_refinement: self.consistent_under_refinement(),
            mass_strictly_decreasing: self.mass_strictly_decreasing,
            tolerance: tol,
            passed: self.passed(tol),
            mass_curve: &self.mass_curve,
        };
        std::fs::write(dir.join("verify.json"), serde_json::to_string_pretty(&json)?)?;
        self.decrement.save_csv(&dir.join("verify_decrement.csv"))?;
        write_mass_curve(&self.mass_curve, &dir.join("verify_mass_curve.csv"))?;
        Ok(["verify.json", "verify_decrement.csv", "verify_mass_curve.csv"].map(String::from).to_vec())
    }
}

/// Re-checks `ρ − p(·,T) = αγ` for an arbitrary candidate, independently of
/// how it was produced.
pub fn verify_candidate(
    rho: &DensityField,
    alpha: f64,
    gamma: &DensityField,
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    horizon: f64,
) -> Result<VerificationReport, SeedError> {
    let n = config.n_steps;
    let coarse = evolve_final(model, grid, &config.with_steps(n / 2), rho, 0.0, horizon)?;
    let native = evolve_final(model, grid, config, rho, 0.0, horizon)?;
    let refined = evolve(model, grid, &config.with_steps(2 * n), rho, 0.0, horizon)?;
    let curve = mass_curve(&refined);
    let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
    Ok(VerificationReport {
        alpha,
        n_steps: n,
        residual_coarse: decrement_residual(rho, &coarse, alpha, gamma),
        residual_native: decrement_residual(rho, &native, alpha, gamma),
        residual_refined: decrement_residual(rho, refined.final_field(), alpha, gamma),
        mass_curve: curve,
        mass_strictly_decreasing: decreasing,
        decrement: rho.sub(refined.final_field()),
    })
}

pub fn verify_seed(
    solution: &SeedSolution,
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
) -> Result<VerificationReport, SeedError> {
    verify_candidate(&solution.rho, solution.alpha, &solution.gamma.field, model, grid, config, solution.horizon)
}
