//! Forward Kolmogorov (Fokker–Planck) operator on a box with absorbing walls,
//! and implicit time marching of `∂p/∂t = A p`.
//!
//! The discrete operator is
//!
//! ```text
//! (A p)_m = Σ_d δ²_d(a_dd p) / h_d²  +  2 δ_x δ_y(a_12 p) / (4 h_x h_y)  −  Σ_d (F_{m+½e_d} − F_{m−½e_d}) / h_d
//! ```
//!
//! with central second differences for the diffusion part and upwind face
//! fluxes `F = f⁺ p_left − f⁻ p_right` for the drift part (drift sampled at
//! face centres). The absorbing wall sits on the cell faces of ∂D: diffusion
//! stencils read an odd reflection across the wall, which makes `p` vanish
//! there, and drift fluxes never bring mass in from outside.
//!
//! Without mixed terms the matrix has nonnegative off-diagonals and
//! nonpositive column sums, so `I − Δt A` is an M-matrix and implicit Euler
//! maps nonnegative fields to nonnegative fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DensityField, DomainGrid, GridError};
use crate::linalg::{bicgstab, CsrMatrix, Tridiagonal};
use crate::model::{DiffusionModel, ModelError};

#[derive(Debug, Error)]
pub enum KolmogorovError {
    #[error("invalid solver input: {0}")]
    InvalidInput(String),
    #[error(
        "linear solve failed at step {step} (t = {time}): relative residual {residual:e} after {iterations} iterations"
    )]
    LinearSolveFailure { step: usize, time: f64, iterations: usize, residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Monotone; nonnegative data stay nonnegative.
    #[default]
    ImplicitEuler,
    /// Second order in time; not monotone for large steps.
    CrankNicolson,
}

impl Scheme {
    fn theta(self) -> f64 {
        match self {
            Scheme::ImplicitEuler => 1.0,
            Scheme::CrankNicolson => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_steps: usize,
    pub scheme: Scheme,
    /// Relative residual target for the iterative (2-D) step solves.
    pub linear_solver_tol: f64,
    pub linear_solver_max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_steps: 256,
            scheme: Scheme::ImplicitEuler,
            linear_solver_tol: 1e-12,
            linear_solver_max_iter: 2000,
        }
    }
}

impl SolverConfig {
    pub fn new(n_steps: usize, scheme: Scheme) -> Self {
        SolverConfig { n_steps, scheme, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), KolmogorovError> {
        if self.n_steps == 0 {
            return Err(KolmogorovError::InvalidInput("n_steps must be at least 1".into()));
        }
        if !(self.linear_solver_tol > 0.0) {
            return Err(KolmogorovError::InvalidInput("linear_solver_tol must be positive".into()));
        }
        if self.linear_solver_max_iter == 0 {
            return Err(KolmogorovError::InvalidInput("linear_solver_max_iter must be at least 1".into()));
        }
        Ok(())
    }

    /// Same config with `n_steps` multiplied by `factor` (at least one step).
    pub fn with_steps(&self, n_steps: usize) -> Self {
        SolverConfig { n_steps: n_steps.max(1), ..*self }
    }
}

/// Step count that keeps `Δt ≤ h²/(2·dim·max‖a‖)` on `[s, t_end]`, the
/// comfortable range for Crank–Nicolson.
pub fn suggested_steps(model: &DiffusionModel, grid: &DomainGrid, s: f64, t_end: f64) -> usize {
    let h = grid.h();
    let hmin = h[..grid.dim()].iter().copied().fold(f64::INFINITY, f64::min);
    let a = model.max_a_norm(grid, &[s, 0.5 * (s + t_end), t_end]).max(f64::MIN_POSITIVE);
    let dt = hmin * hmin / (2.0 * grid.dim() as f64 * a);
    ((t_end - s) / dt).ceil().max(1.0) as usize
}

/// Resolves a possibly out-of-range neighbour by odd reflection across the
/// wall: returns the mirrored node and the sign of the reflected value.
fn reflect(grid: &DomainGrid, m: [usize; 2], off: [isize; 2]) -> (usize, f64) {
    let mut q = [0usize; 2];
    let mut sign = 1.0;
    for axis in 0..2 {
        let n = if axis < grid.dim() { grid.n_cells()[axis] as isize } else { 1 };
        let k = m[axis] as isize + off[axis];
        q[axis] = if k < 0 {
            sign = -sign;
            0
        } else if k >= n {
            sign = -sign;
            (n - 1) as usize
        } else {
            k as usize
        };
    }
    (grid.flatten(q), sign)
}

fn inside(grid: &DomainGrid, m: [usize; 2], axis: usize, step: isize) -> Option<usize> {
    let k = m[axis] as isize + step;
    if k < 0 || k >= grid.n_cells()[axis] as isize {
        return None;
    }
    let mut q = m;
    q[axis] = k as usize;
    Some(grid.flatten(q))
}

/// Discrete generator at time `t`, plus whether any mixed coefficient was nonzero.
pub fn assemble_operator(model: &DiffusionModel, grid: &DomainGrid, t: f64) -> (CsrMatrix, bool) {
    let dim = grid.dim();
    let h = grid.h();
    let a_at: Vec<_> = grid.nodes().map(|x| model.eval_a(&x, t)).collect();
    let mut mixed = false;
    let rows = (0..grid.len())
        .map(|idx| {
            let m = grid.unflatten(idx);
            let x = grid.node(idx);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
            for d in 0..dim {
                let inv_h2 = 1.0 / (h[d] * h[d]);
                row.push((idx, -2.0 * a_at[idx][d][d] * inv_h2));
                for step in [-1isize, 1] {
                    let mut off = [0isize; 2];
                    off[d] = step;
                    let (q, sign) = reflect(grid, m, off);
                    row.push((q, sign * a_at[q][d][d] * inv_h2));
                }
                // Upwind drift fluxes through the two faces normal to axis d.
                let mut face = x;
                face[d] = x[d] + 0.5 * h[d];
                let fr = model.drift(&face, t)[d];
                face[d] = x[d] - 0.5 * h[d];
                let fl = model.drift(&face, t)[d];
                let inv_h = 1.0 / h[d];
                row.push((idx, -(fr.max(0.0) + (-fl).max(0.0)) * inv_h));
                if let Some(q) = inside(grid, m, d, 1) {
                    row.push((q, (-fr).max(0.0) * inv_h));
                }
                if let Some(q) = inside(grid, m, d, -1) {
                    row.push((q, fl.max(0.0) * inv_h));
                }
            }
            if dim == 2 {
                let scale = 1.0 / (2.0 * h[0] * h[1]);
                for sx in [-1isize, 1] {
                    for sy in [-1isize, 1] {
                        let (q, sign) = reflect(grid, m, [sx, sy]);
                        let a12 = a_at[q][0][1];
                        if a12 != 0.0 {
                            row.push((q, (sx * sy) as f64 * sign * a12 * scale));
                        }
                    }
                }
            }
            row
        })
        .collect();
    if dim == 2 {
        mixed = a_at.iter().any(|a| a[0][1] != 0.0);
    }
    (CsrMatrix::from_rows(rows), mixed)
}

/// `A(t)` applied to a field.
pub fn apply_a(model: &DiffusionModel, grid: &DomainGrid, field: &DensityField, t: f64) -> DensityField {
    let (op, _) = assemble_operator(model, grid, t);
    DensityField::new(*grid, op.matvec(field.values())).expect("operator preserves length")
}

/// Solution of the forward equation at a sequence of times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<DensityField>,
    /// False when the scheme or mixed coefficients void the monotonicity guarantee.
    pub positivity_certified: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryManifest {
    positivity_certified: bool,
    fields: Vec<ManifestEntry>,
    mass_curve: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    time: f64,
    file: String,
}

impl Trajectory {
    pub fn grid(&self) -> &DomainGrid {
        self.fields[0].grid()
    }

    pub fn initial(&self) -> &DensityField {
        &self.fields[0]
    }

    pub fn final_field(&self) -> &DensityField {
        self.fields.last().expect("trajectory is never empty")
    }

    /// Writes one CSV per stored time, `mass_curve.csv` and `trajectory.json`
    /// into `dir`. Returns the file names written.
    pub fn export(&self, dir: &Path) -> Result<Vec<String>, KolmogorovError> {
        std::fs::create_dir_all(dir)?;
        let width = self.fields.len().to_string().len().max(4);
        let mut entries = Vec::with_capacity(self.fields.len());
        let mut written = Vec::new();
        for (k, (t, f)) in self.times.iter().zip(&self.fields).enumerate() {
            let name = format!("field_{k:0width$}.csv");
            f.save_csv(&dir.join(&name))?;
            entries.push(ManifestEntry { time: *t, file: name.clone() });
            written.push(name);
        }
        write_mass_curve(&mass_curve(self), &dir.join("mass_curve.csv"))?;
        written.push("mass_curve.csv".into());
        let manifest = TrajectoryManifest {
            positivity_certified: self.positivity_certified,
            fields: entries,
            mass_curve: "mass_curve.csv".into(),
        };
        std::fs::write(dir.join("trajectory.json"), serde_json::to_string_pretty(&manifest)?)?;
        written.push("trajectory.json".into());
        Ok(written)
    }
}

/// `(time, mass)` at every stored time.
pub fn mass_curve(traj: &Trajectory) -> Vec<(f64, f64)> {
    traj.times.iter().zip(&traj.fields).map(|(t, f)| (*t, f.mass())).collect()
}

pub fn write_mass_curve(curve: &[(f64, f64)], path: &Path) -> Result<(), KolmogorovError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| KolmogorovError::Grid(e.into()))?;
    let mut write = || -> Result<(), csv::Error> {
        w.write_record(["time", "mass"])?;
        for (t, m) in curve {
            w.write_record([t.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| KolmogorovError::Grid(e.into()))
}

struct StepSystem {
    lhs: CsrMatrix,
    rhs: Option<CsrMatrix>,
    tri: Option<Tridiagonal>,
}

/// Marches `rho` from `s` to `t_end`, calling `visit(k, t_k, values)` after
/// every step (and once for the initial state with `k = 0`).
/// Returns whether positivity is certified for the run.
pub(crate) fn march(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    rho: &DensityField,
    s: f64,
    t_end: f64,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<bool, KolmogorovError> {
    config.validate()?;
    if !(s < t_end) || !s.is_finite() || !t_end.is_finite() {
        return Err(KolmogorovError::InvalidInput(format!("need s < T, got s = {s}, T = {t_end}")));
    }
    if model.dim() != grid.dim() {
        return Err(ModelError::DimensionMismatch { model: model.dim(), grid: grid.dim() }.into());
    }
    if rho.grid() != grid {
        return Err(KolmogorovError::InvalidInput("initial field lives on a different grid".into()));
    }
    if !rho.is_finite() {
        return Err(KolmogorovError::InvalidInput("initial field has non-finite values".into()));
    }

    let n = config.n_steps;
    let dt = (t_end - s) / n as f64;
    let theta = config.scheme.theta();
    let mut certified = config.scheme == Scheme::ImplicitEuler;
    let build = |t: f64| -> (StepSystem, bool) {
        let (op, mixed) = assemble_operator(model, grid, t);
        let lhs = op.identity_plus(-theta * dt);
        let rhs = (theta < 1.0).then(|| op.identity_plus((1.0 - theta) * dt));
        let tri = if grid.dim() == 1 { lhs.tridiagonal() } else { None };
        (StepSystem { lhs, rhs, tri }, mixed)
    };
    let autonomous = model.is_autonomous();
    let mut cached: Option<StepSystem> = None;

    let mut p = rho.values().to_vec();
    visit(0, s, &p);
    for k in 0..n {
        let t0 = s + k as f64 * dt;
        let t_eval = t0 + theta * dt;
        if cached.is_none() || !autonomous {
            let (sys, mixed) = build(t_eval);
            certified &= !mixed;
            cached = Some(sys);
        }
        let sys = cached.as_ref().unwrap();
        let b = match &sys.rhs {
            Some(r) => r.matvec(&p),
            None => p.clone(),
        };
        p = match &sys.tri {
            Some(tri) => tri.solve(&b),
            None => {
                let sol = bicgstab(&sys.lhs, &b, &p, config.linear_solver_tol, config.linear_solver_max_iter);
                if !sol.converged {
                    return Err(KolmogorovError::LinearSolveFailure {
                        step: k + 1,
                        time: t0 + dt,
                        iterations: sol.iterations,
                        residual: sol.relative_residual,
                    });
                }
                sol.x
            }
        };
        let t1 = if k + 1 == n { t_end } else { s + (k + 1) as f64 * dt };
        visit(k + 1, t1, &p);
    }
    Ok(certified)
}

/// Solves `∂p/∂t = A p` on `[s, T]` with `p(·, s) = rho`, storing every step.
pub fn evolve(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    rho: &DensityField,
    s: f64,
    t_end: f64,
) -> Result<Trajectory, KolmogorovError> {
    let mut times = Vec::with_capacity(config.n_steps + 1);
    let mut fields = Vec::with_capacity(config.n_steps + 1);
    let certified = march(model, grid, config, rho, s, t_end, |_, t, v| {
        times.push(t);
        fields.push(DensityField::new(*grid, v.to_vec()).expect("length preserved"));
    })?;
    if !certified {
        log::warn!("trajectory positivity is not certified (Crank–Nicolson or mixed diffusion terms)");
    }
    Ok(Trajectory { times, fields, positivity_certified: certified })
}

/// Like [`evolve`] but keeps only the field at `T`.
pub fn evolve_final(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    rho: &DensityField,
    s: f64,
    t_end: f64,
) -> Result<DensityField, KolmogorovError> {
    let mut last = Vec::new();
    march(model, grid, config, rho, s, t_end, |k, _, v| {
        if k == config.n_steps {
            last = v.to_vec();
        }
    })?;
    Ok(DensityField::new(*grid, last)?)
}
