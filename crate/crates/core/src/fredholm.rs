//! The time-`T` solution map `Q ξ = v(·, T)` of the absorbed forward
//! equation, and the second-kind equation `(I − Q) ζ = γ`.
//!
//! `Q` is applied matrix-free (one forward solve per application). For small
//! grids it can also be assembled densely, column by column, as the discrete
//! transition kernel `G(xᵢ, yⱼ)`: column `j` is the density at `T` of unit
//! mass started in cell `j`, and `Q ξ = Σⱼ G(·, yⱼ) ξⱼ |cell|`.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DensityField, DomainGrid, GridError};
use crate::kolmogorov::{evolve_final, KolmogorovError, Scheme, SolverConfig};
use crate::linalg::{gmres, norm2};
use crate::model::DiffusionModel;

/// Largest grid for which dense assembly is allowed by default.
pub const DEFAULT_ASSEMBLY_CAP: usize = 4096;

#[derive(Debug, Error)]
pub enum FredholmError {
    #[error(transparent)]
    Kolmogorov(#[from] KolmogorovError),
    #[error("dense assembly of {n} unknowns exceeds the cap of {cap}")]
    CapExceeded { n: usize, cap: usize },
    #[error("{what} did not converge after {iterations} iterations (last value {last:e})")]
    NoConvergence { what: &'static str, iterations: usize, last: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("dense system is singular")]
    Singular,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A linear map on grid values.
pub trait LinearOperator: Sync {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FredholmError>;
}

/// Matrix-free `Q` on `[0, T]`.
#[derive(Debug, Clone, Copy)]
pub struct TimeMap<'a> {
    pub model: &'a DiffusionModel,
    pub grid: &'a DomainGrid,
    pub config: &'a SolverConfig,
    pub horizon: f64,
}

impl<'a> TimeMap<'a> {
    pub fn new(model: &'a DiffusionModel, grid: &'a DomainGrid, config: &'a SolverConfig, horizon: f64) -> Self {
        TimeMap { model, grid, config, horizon }
    }

    pub fn apply_field(&self, xi: &DensityField) -> Result<DensityField, FredholmError> {
        if !xi.is_finite() {
            return Err(FredholmError::InvalidInput("input field has non-finite values".into()));
        }
        if xi.values().iter().all(|v| *v == 0.0) {
            return Ok(DensityField::zeros(*self.grid));
        }
        Ok(evolve_final(self.model, self.grid, self.config, xi, 0.0, self.horizon)?)
    }
}

impl LinearOperator for TimeMap<'_> {
    fn size(&self) -> usize {
        self.grid.len()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FredholmError> {
        let f = DensityField::new(*self.grid, x.to_vec())?;
        Ok(self.apply_field(&f)?.into_values())
    }
}

/// `Q ξ`: evolve over `[0, T]` and keep the final field.
pub fn apply_q(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    horizon: f64,
    xi: &DensityField,
) -> Result<DensityField, FredholmError> {
    TimeMap::new(model, grid, config, horizon).apply_field(xi)
}

/// Dense transition kernel on the grid, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorMatrix {
    grid: DomainGrid,
    scheme: Scheme,
    horizon: f64,
    kernel: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OperatorSidecar {
    n: usize,
    grid: DomainGrid,
    scheme: Scheme,
    horizon: f64,
    layout: String,
}

/// Assembles the kernel column by column (in parallel), one forward solve
/// per unit-mass cell density.
pub fn assemble_q(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    horizon: f64,
    cap: usize,
) -> Result<OperatorMatrix, FredholmError> {
    let n = grid.len();
    if n > cap {
        return Err(FredholmError::CapExceeded { n, cap });
    }
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let unit = DensityField::unit_cell(*grid, j);
            evolve_final(model, grid, config, &unit, 0.0, horizon).map(DensityField::into_values)
        })
        .collect::<Result<_, _>>()?;
    Ok(OperatorMatrix { grid: *grid, scheme: config.scheme, horizon, kernel: columns.concat() })
}

impl OperatorMatrix {
    pub fn n(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    /// Kernel entry `G(xᵢ, yⱼ)`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.kernel[i + j * self.n()]
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.kernel[j * n..(j + 1) * n]
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn min_entry(&self) -> f64 {
        self.kernel.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.kernel.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Surviving mass of unit mass started in each cell.
    pub fn column_masses(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        (0..self.n()).map(|j| self.column(j).iter().sum::<f64>() * vol).collect()
    }

    /// Largest `|G(xᵢ, yⱼ) − G(xⱼ, yᵢ)|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n();
        let mut m = 0.0f64;
        for j in 0..n {
            for i in 0..j {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    /// The operator `ξ ↦ Q ξ` as a dense matrix on grid values.
    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_column_slice(n, n, &self.kernel) * self.grid.cell_volume()
    }

    /// Singular values of the value-to-value operator, descending.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.to_dmatrix().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Dense LU solve of `(I − Q) ζ = γ`.
    pub fn dense_resolvent(&self, gamma: &DensityField) -> Result<DensityField, FredholmError> {
        let n = self.n();
        let m = DMatrix::<f64>::identity(n, n) - self.to_dmatrix();
        let rhs = nalgebra::DVector::from_column_slice(gamma.values());
        let z = m.lu().solve(&rhs).ok_or(FredholmError::Singular)?;
        Ok(DensityField::new(self.grid, z.iter().copied().collect())?)
    }

    /// Writes `stem.bin` (little-endian f64, column-major) and `stem.json`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<(String, String), FredholmError> {
        let bin = format!("{stem}.bin");
        let json = format!("{stem}.json");
        let mut bytes = Vec::with_capacity(self.kernel.len() * 8);
        for v in &self.kernel {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&bin), bytes)?;
        let sidecar = OperatorSidecar {
            n: self.n(),
            grid: self.grid,
            scheme: self.scheme,
            horizon: self.horizon,
            layout: "column-major f64 little-endian".into(),
        };
        std::fs::write(dir.join(&json), serde_json::to_string_pretty(&sidecar)?)?;
        Ok((bin, json))
    }

    pub fn import(dir: &Path, stem: &str) -> Result<Self, FredholmError> {
        let sidecar: OperatorSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
        if bytes.len() != sidecar.n * sidecar.n * 8 || sidecar.n != sidecar.grid.len() {
            return Err(FredholmError::InvalidInput("operator file size does not match its sidecar".into()));
        }
        let kernel = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(OperatorMatrix { grid: sidecar.grid, scheme: sidecar.scheme, horizon: sidecar.horizon, kernel })
    }
}

impl LinearOperator for OperatorMatrix {
    fn size(&self) -> usize {
        self.n()
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FredholmError> {
        let n = self.n();
        let vol = self.grid.cell_volume();
        let mut y = vec![0.0; n];
        for (j, xj) in x.iter().enumerate() {
            if *xj == 0.0 {
                continue;
            }
            let c = xj * vol;
            for (yi, g) in y.iter_mut().zip(self.column(j)) {
                *yi += c * g;
            }
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub iterations: usize,
}

/// Power-iteration estimate of the spectral radius.
///
/// The estimate at step `k` is the two-step norm ratio
/// `(‖Q^{k+1} x‖ / ‖Q^{k−1} x‖)^{1/2}`, the geometric mean of consecutive
/// growth factors. It is insensitive to the sign of a real dominant
/// eigenvalue and damps the oscillation of complex pairs that a one-step ratio
/// would show on nonsymmetric operators. Iteration stops once the estimate
/// changes by at most `tol` relatively.
pub fn spectral_radius(op: &impl LinearOperator, tol: f64, max_iter: usize) -> Result<SpectralEstimate, FredholmError> {
    if !(tol > 0.0) {
        return Err(FredholmError::InvalidInput("tolerance must be positive".into()));
    }
    let n = op.size();
    // Positive start vector: the dominant mode of a positivity-preserving
    // operator is positive, so this cannot be orthogonal to it.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.25 * ((i as f64) * 0.7).sin().abs()).collect();
    let xn = norm2(&x);
    x.iter_mut().for_each(|v| *v /= xn);
    let mut prev_ratio: Option<f64> = None;
    let mut prev_est: Option<f64> = None;
    let mut last = f64::NAN;
    for it in 1..=max_iter {
        let y = op.apply(&x)?;
        let ratio = norm2(&y);
        if ratio == 0.0 {
            return Ok(SpectralEstimate { radius: 0.0, iterations: it });
        }
        let est = match prev_ratio {
            Some(p) => (p * ratio).sqrt(),
            None => ratio,
        };
        last = est;
        if let Some(pe) = prev_est {
            if (est - pe).abs() <= tol * est {
                return Ok(SpectralEstimate { radius: est, iterations: it });
            }
        }
        prev_est = Some(est);
        prev_ratio = Some(ratio);
        x = y.into_iter().map(|v| v / ratio).collect();
    }
    Err(FredholmError::NoConvergence { what: "power iteration", iterations: max_iter, last })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolventMethod {
    Neumann,
    Krylov,
}

#[derive(Debug, Clone)]
pub struct ResolventReport {
    pub zeta: DensityField,
    /// Applications of `Q` spent.
    pub iterations: usize,
    /// `‖ζ − Qζ − γ‖₂ / ‖γ‖₂`.
    pub residual_norm: f64,
    pub method: ResolventMethod,
}

#[derive(Serialize)]
struct ResolventJson<'a> {
    iterations: usize,
    residual_norm: f64,
    method: ResolventMethod,
    zeta: &'a [f64],
}

impl ResolventReport {
    pub fn to_json(&self) -> Result<String, FredholmError> {
        Ok(serde_json::to_string_pretty(&ResolventJson {
            iterations: self.iterations,
            residual_norm: self.residual_norm,
            method: self.method,
            zeta: self.zeta.values(),
        })?)
    }
}

/// Consecutive Neumann steps with residual ratio ≥ [`STALL_RATIO`] before the
/// solver gives up on the series.
pub const STALL_WINDOW: usize = 5;
pub const STALL_RATIO: f64 = 0.999;
const GMRES_RESTART: usize = 40;

/// Solves `(I − Q) ζ = γ`.
///
/// Runs the Neumann iteration `ζ ← γ + Qζ` from `ζ₀ = γ` until the relative
/// residual is at most `tol`. If the residual stalls (ratio ≥ 0.999 for five
/// consecutive steps) or `max_iter` steps pass, it switches to restarted
/// GMRES on `I − Q`, warm-started from the current iterate, with the same
/// iteration budget.
pub fn solve_resolvent_with(
    op: &impl LinearOperator,
    grid: &DomainGrid,
    gamma: &DensityField,
    tol: f64,
    max_iter: usize,
) -> Result<ResolventReport, FredholmError> {
    if !(tol > 0.0) {
        return Err(FredholmError::InvalidInput("tolerance must be positive".into()));
    }
    if !gamma.is_finite() {
        return Err(FredholmError::InvalidInput("γ has non-finite values".into()));
    }
    if gamma.grid() != grid || op.size() != grid.len() {
        return Err(FredholmError::InvalidInput("γ and the operator live on different grids".into()));
    }
    let g = gamma.values();
    let gnorm = norm2(g);
    let rel = |r: f64| if gnorm > 0.0 { r / gnorm } else { r };

    let mut zeta = g.to_vec();
    let mut iterations = 0;
    let mut prev: Option<f64> = None;
    let mut stalled = 0;
    let mut last = f64::INFINITY;
    while iterations < max_iter {
        let qz = op.apply(&zeta)?;
        iterations += 1;
        let r: Vec<f64> = zeta.iter().zip(&qz).zip(g).map(|((z, q), g)| z - q - g).collect();
        last = rel(norm2(&r));
        if last <= tol {
            let zeta = DensityField::new(*grid, zeta)?;
            return Ok(ResolventReport { zeta, iterations, residual_norm: last, method: ResolventMethod::Neumann });
        }
        if let Some(p) = prev {
            stalled = if last >= STALL_RATIO * p { stalled + 1 } else { 0 };
        }
        prev = Some(last);
        zeta = g.iter().zip(&qz).map(|(g, q)| g + q).collect();
        if stalled >= STALL_WINDOW {
            break;
        }
    }
    log::info!("Neumann series stalled at relative residual {last:e}; switching to GMRES");

    let sol = gmres(
        |x| {
            let qx = op.apply(x)?;
            Ok::<_, FredholmError>(x.iter().zip(qx).map(|(x, q)| x - q).collect())
        },
        g,
        &zeta,
        GMRES_RESTART,
        tol,
        max_iter,
    )?;
    // One extra application per restart for the true residual, plus one per Krylov vector.
    iterations += sol.iterations;
    if !sol.converged {
        return Err(FredholmError::NoConvergence { what: "resolvent", iterations, last: sol.relative_residual });
    }
    let zeta = DensityField::new(*grid, sol.x)?;
    Ok(ResolventReport { zeta, iterations, residual_norm: sol.relative_residual, method: ResolventMethod::Krylov })
}

/// [`solve_resolvent_with`] on the matrix-free time map.
pub fn solve_resolvent(
    model: &DiffusionModel,
    grid: &DomainGrid,
    config: &SolverConfig,
    horizon: f64,
    gamma: &DensityField,
    tol: f64,
    max_iter: usize,
) -> Result<ResolventReport, FredholmError> {
    solve_resolvent_with(&TimeMap::new(model, grid, config, horizon), grid, gamma, tol, max_iter)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Diagonal operator with prescribed eigenvalues.
    struct Diag(Vec<f64>);

    impl LinearOperator for Diag {
        fn size(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FredholmError> {
            Ok(x.iter().zip(&self.0).map(|(a, b)| a * b).collect())
        }
    }

    /// 2×2 rotation scaled by `r`: eigenvalues `r·e^{±iθ}`.
    struct Rot(f64, f64);

    impl LinearOperator for Rot {
        fn size(&self) -> usize {
            2
        }
        fn apply(&self, x: &[f64]) -> Result<Vec<f64>, FredholmError> {
            let (c, s) = (self.1.cos(), self.1.sin());
            Ok(vec![self.0 * (c * x[0] - s * x[1]), self.0 * (s * x[0] + c * x[1])])
        }
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let est = spectral_radius(&Diag(vec![0.3, -0.8, 0.5, 0.1]), 1e-12, 10_000).unwrap();
        assert!((est.radius - 0.8).abs() < 1e-9);
        let zero = spectral_radius(&Diag(vec![0.0; 5]), 1e-10, 10).unwrap();
        assert_eq!(zero.radius, 0.0);
    }

    #[test]
    fn power_iteration_on_complex_pair() {
        let est = spectral_radius(&Rot(0.6, 1.1), 1e-12, 100).unwrap();
        assert!((est.radius - 0.6).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_reports_no_convergence() {
        let err = spectral_radius(&Diag(vec![1.0, 0.999999]), 1e-15, 3).unwrap_err();
        assert!(matches!(err, FredholmError::NoConvergence { iterations: 3, .. }));
    }

    #[test]
    fn neumann_on_contraction() {
        let grid = DomainGrid::unit_interval(4).unwrap();
        let op = Diag(vec![0.5, 0.25, 0.1, 0.0]);
        let gamma = DensityField::new(grid, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let rep = solve_resolvent_with(&op, &grid, &gamma, 1e-12, 200).unwrap();
        assert_eq!(rep.method, ResolventMethod::Neumann);
        let expect = [2.0, 2.0 / 0.75, 3.0 / 0.9, 4.0];
        for (z, e) in rep.zeta.values().iter().zip(expect) {
            assert!((z - e).abs() < 1e-10);
        }
    }

    #[test]
    fn stall_switches_to_krylov() {
        let grid = DomainGrid::unit_interval(4).unwrap();
        let op = Diag(vec![0.9999, 0.5, 0.99995, -0.3]);
        let gamma = DensityField::new(grid, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let rep = solve_resolvent_with(&op, &grid, &gamma, 1e-10, 100).unwrap();
        assert_eq!(rep.method, ResolventMethod::Krylov);
        assert!(rep.residual_norm <= 1e-10);
        assert!((rep.zeta.values()[0] - 1e4).abs() < 1e-4);
    }

    #[test]
    fn identity_operator_fails_both_phases() {
        let grid = DomainGrid::unit_interval(4).unwrap();
        let gamma = DensityField::new(grid, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = solve_resolvent_with(&Diag(vec![1.0; 4]), &grid, &gamma, 1e-10, 20).unwrap_err();
        assert!(matches!(err, FredholmError::NoConvergence { what: "resolvent", .. }));
    }

    #[test]
    fn zero_gamma_converges_immediately() {
        let grid = DomainGrid::unit_interval(8).unwrap();
        let model = DiffusionModel::brownian(1);
        let cfg = SolverConfig::default();
        let rep = solve_resolvent(&model, &grid, &cfg, 1.0, &DensityField::zeros(grid), 1e-10, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.zeta.values().iter().all(|v| *v == 0.0));
        let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
        assert_eq!(json["method"], "neumann");
    }

    #[test]
    fn cap_is_enforced() {
        let grid = DomainGrid::unit_interval(64).unwrap();
        let err = assemble_q(&DiffusionModel::brownian(1), &grid, &SolverConfig::default(), 1.0, 32).unwrap_err();
        assert!(matches!(err, FredholmError::CapExceeded { n: 64, cap: 32 }));
    }

    #[test]
    fn operator_export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = DomainGrid::unit_interval(8).unwrap();
        let q = assemble_q(&DiffusionModel::brownian(1), &grid, &SolverConfig::new(20, Scheme::ImplicitEuler), 0.1, 64)
            .unwrap();
        let (bin, _) = q.export(dir.path(), "q").unwrap();
        assert_eq!(std::fs::metadata(dir.path().join(bin)).unwrap().len(), 64 * 8);
        let back = OperatorMatrix::import(dir.path(), "q").unwrap();
        assert_eq!(back, q);
        // Column-major: second 8-byte word is G(x₁, y₀).
        let bytes = std::fs::read(dir.path().join("q.bin")).unwrap();
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), q.get(1, 0));
    }

    #[test]
    fn dense_and_matrix_free_application_agree() {
        let grid = DomainGrid::unit_interval(16).unwrap();
        let model = DiffusionModel::linear_drift(1, &[3.0], &[0.3], &[vec![0.8]]).unwrap();
        let cfg = SolverConfig::new(40, Scheme::ImplicitEuler);
        let q = assemble_q(&model, &grid, &cfg, 0.2, 64).unwrap();
        let xi = DensityField::from_fn(grid, |x| 1.0 + x[0] * x[0]);
        let dense = q.apply(xi.values()).unwrap();
        let free = apply_q(&model, &grid, &cfg, 0.2, &xi).unwrap();
        for (a, b) in dense.iter().zip(free.values()) {
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}
