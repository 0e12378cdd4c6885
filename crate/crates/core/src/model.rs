//! Drift and diffusion coefficients of the absorbed process
//! `dy = f(y,t) dt + β(y,t) dw`, together with the derived second-order
//! coefficient `a = ½ββᵀ`.
//!
//! Three families are supported: constant coefficients, a linear
//! (Ornstein–Uhlenbeck type) drift with constant `β`, and coefficients
//! tabulated on a cell-centred grid, optionally at several time samples.
//! Tabulated values are interpolated multilinearly between cell centres and
//! held constant beyond the outermost centres and time samples. The
//! smoothness the forward equation needs from `β` is the caller's
//! obligation; it is not checked.

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{read_columns, DomainGrid, GridError};

pub type Point = [f64; 2];
pub type Vec2 = [f64; 2];
/// Row-major 2×2 matrix; for one-dimensional models only `[0][0]` is used.
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("ellipticity violated at x = {x:?}, t = {t}: smallest eigenvalue of ββᵀ is {eigenvalue:e}")]
    EllipticityViolation { x: Vec<f64>, t: f64, eigenvalue: f64 },
    #[error("model is {model}-dimensional but the grid is {grid}-dimensional")]
    DimensionMismatch { model: usize, grid: usize },
    #[error("tabulated coefficients on {table:?} cells are coarser than the solver grid {solver:?}")]
    TabulationTooCoarse { table: Vec<usize>, solver: Vec<usize> },
    #[error("tabulated coefficients cover a different box than the solver grid")]
    TabulationBox,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Coefficient values at one node: `f₁, f₂, β₁₁, β₁₂, β₂₁, β₂₂`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct NodeCoefficients {
    drift: Vec2,
    beta: Mat2,
}

/// Coefficients sampled at the cell centres of a grid, at one or more times.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedCoefficients {
    grid: DomainGrid,
    times: Vec<f64>,
    samples: Vec<Vec<NodeCoefficients>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableManifest {
    samples: Vec<TableManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableManifestEntry {
    time: f64,
    file: PathBuf,
}

/// Coefficients `(f, β)` at a point.
pub type CoefficientFn = Box<dyn Fn(&Point) -> (Vec2, Mat2)>;

impl TabulatedCoefficients {
    /// Builds a time-independent table from a closure evaluated at cell centres.
    pub fn from_fn(grid: DomainGrid, f: impl Fn(&Point) -> (Vec2, Mat2)) -> Self {
        let nodes = grid
            .nodes()
            .map(|x| {
                let (drift, beta) = f(&x);
                NodeCoefficients { drift, beta }
            })
            .collect();
        TabulatedCoefficients { grid, times: vec![0.0], samples: vec![nodes] }
    }

    /// Builds a table from `(time, closure)` samples; times must increase.
    pub fn from_time_samples(grid: DomainGrid, samples: Vec<(f64, CoefficientFn)>) -> Result<Self, ModelError> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (t, f) in samples {
            times.push(t);
            values.push(Self::from_fn(grid, f).samples.remove(0));
        }
        Self::assemble(grid, times, values)
    }

    fn assemble(grid: DomainGrid, times: Vec<f64>, samples: Vec<Vec<NodeCoefficients>>) -> Result<Self, ModelError> {
        if times.is_empty() {
            return Err(ModelError::Invalid("tabulated model needs at least one time sample".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ModelError::Invalid("tabulated time samples must be strictly increasing".into()));
        }
        let finite =
            samples.iter().flatten().all(|c| c.drift.iter().chain(c.beta.iter().flatten()).all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Invalid("tabulated coefficients must be finite".into()));
        }
        Ok(TabulatedCoefficients { grid, times, samples })
    }

    /// Reads one time sample: coordinates, then `f₁..f_dim`, then `β` row-major.
    fn read_csv<R: Read>(grid: DomainGrid, reader: R) -> Result<Vec<NodeCoefficients>, ModelError> {
        let d = grid.dim();
        let rows = read_columns(grid, reader, d + d * d)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                let mut c = NodeCoefficients::default();
                c.drift[..d].copy_from_slice(&r[..d]);
                for i in 0..d {
                    for j in 0..d {
                        c.beta[i][j] = r[d + i * d + j];
                    }
                }
                c
            })
            .collect())
    }

    /// Time-independent table from a single CSV file.
    pub fn load_csv(grid: DomainGrid, path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        let rows = Self::read_csv(grid, std::io::BufReader::new(file))?;
        Self::assemble(grid, vec![0.0], vec![rows])
    }

    /// Time-dependent table from a JSON manifest `{"samples": [{"time", "file"}]}`;
    /// file paths are relative to the manifest's directory.
    pub fn load_manifest(grid: DomainGrid, manifest: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(manifest)?;
        let m: TableManifest = serde_json::from_str(&text)?;
        let base = manifest.parent().unwrap_or_else(|| Path::new("."));
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for entry in m.samples {
            let file = std::fs::File::open(base.join(&entry.file))?;
            let rows = Self::read_csv(grid, std::io::BufReader::new(file))?;
            times.push(entry.time);
            samples.push(rows);
        }
        Self::assemble(grid, times, samples)
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    fn eval(&self, x: &Point, t: f64) -> NodeCoefficients {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.eval_sample(0, x);
        }
        if k == self.times.len() {
            return self.eval_sample(k - 1, x);
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        let a = self.eval_sample(k - 1, x);
        let b = self.eval_sample(k, x);
        lerp_coeffs(&a, &b, w)
    }

    fn eval_sample(&self, s: usize, x: &Point) -> NodeCoefficients {
        let g = &self.grid;
        let h = g.h();
        let dim = g.dim();
        // Bracketing cell centres and weights per axis, clamped at the ends.
        let mut lo_idx = [0usize; 2];
        let mut w = [0.0; 2];
        for axis in 0..dim {
            let n = g.n_cells()[axis];
            let u = (x[axis] - g.lo()[axis]) / h[axis] - 0.5;
            if u <= 0.0 {
                lo_idx[axis] = 0;
                w[axis] = 0.0;
            } else if u >= (n - 1) as f64 {
                lo_idx[axis] = n - 2;
                w[axis] = 1.0;
            } else {
                let k = (u.floor() as usize).min(n - 2);
                lo_idx[axis] = k;
                w[axis] = u - k as f64;
            }
        }
        let table = &self.samples[s];
        if dim == 1 {
            let a = &table[lo_idx[0]];
            let b = &table[lo_idx[0] + 1];
            return lerp_coeffs(a, b, w[0]);
        }
        let at = |i: usize, j: usize| &table[g.flatten([lo_idx[0] + i, lo_idx[1] + j])];
        let bottom = lerp_coeffs(at(0, 0), at(1, 0), w[0]);
        let top = lerp_coeffs(at(0, 1), at(1, 1), w[0]);
        lerp_coeffs(&bottom, &top, w[1])
    }
}

fn lerp_coeffs(a: &NodeCoefficients, b: &NodeCoefficients, w: f64) -> NodeCoefficients {
    let mut c = NodeCoefficients::default();
    for i in 0..2 {
        c.drift[i] = a.drift[i] + w * (b.drift[i] - a.drift[i]);
        for j in 0..2 {
            c.beta[i][j] = a.beta[i][j] + w * (b.beta[i][j] - a.beta[i][j]);
        }
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Constant {
        drift: Vec2,
        beta: Mat2,
    },
    /// `f_i(x) = −rate_i · (x_i − center_i)`, constant `β`.
    LinearDrift {
        rate: Vec2,
        center: Vec2,
        beta: Mat2,
    },
    Tabulated(TabulatedCoefficients),
}

/// Coefficients of the diffusion on a box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    dim: usize,
    family: Family,
    delta: Option<f64>,
}

fn to_mat(dim: usize, beta: &[Vec<f64>]) -> Result<Mat2, ModelError> {
    if beta.len() != dim || beta.iter().any(|r| r.len() != dim) {
        return Err(ModelError::Invalid(format!("β must be a {dim}×{dim} matrix")));
    }
    let mut m = [[0.0; 2]; 2];
    for i in 0..dim {
        for j in 0..dim {
            m[i][j] = beta[i][j];
        }
    }
    Ok(m)
}

fn to_vec(dim: usize, v: &[f64], what: &str) -> Result<Vec2, ModelError> {
    if v.len() != dim {
        return Err(ModelError::Invalid(format!("{what} must have {dim} components")));
    }
    let mut out = [0.0; 2];
    out[..dim].copy_from_slice(v);
    Ok(out)
}

impl DiffusionModel {
    pub fn constant(dim: usize, drift: &[f64], beta: &[Vec<f64>]) -> Result<Self, ModelError> {
        check_dim(dim)?;
        let family = Family::Constant { drift: to_vec(dim, drift, "drift")?, beta: to_mat(dim, beta)? };
        Self::validated(dim, family)
    }

    /// Standard Brownian motion with zero drift: `β = I`, `a = ½I`.
    pub fn brownian(dim: usize) -> Self {
        let mut beta = [[0.0; 2]; 2];
        for (i, row) in beta.iter_mut().enumerate().take(dim) {
            row[i] = 1.0;
        }
        DiffusionModel { dim, family: Family::Constant { drift: [0.0; 2], beta }, delta: None }
    }

    pub fn linear_drift(dim: usize, rate: &[f64], center: &[f64], beta: &[Vec<f64>]) -> Result<Self, ModelError> {
        check_dim(dim)?;
        let family = Family::LinearDrift {
            rate: to_vec(dim, rate, "rate")?,
            center: to_vec(dim, center, "center")?,
            beta: to_mat(dim, beta)?,
        };
        Self::validated(dim, family)
    }

    pub fn tabulated(table: TabulatedCoefficients) -> Self {
        DiffusionModel { dim: table.grid.dim(), family: Family::Tabulated(table), delta: None }
    }

    fn validated(dim: usize, family: Family) -> Result<Self, ModelError> {
        let m = DiffusionModel { dim, family, delta: None };
        let c = m.coefficients(&[0.0; 2], 0.0);
        if !c.drift.iter().chain(c.beta.iter().flatten()).all(|v| v.is_finite()) {
            return Err(ModelError::Invalid("coefficients must be finite".into()));
        }
        if let Family::LinearDrift { rate, center, .. } = &m.family {
            if !rate.iter().chain(center).all(|v| v.is_finite()) {
                return Err(ModelError::Invalid("coefficients must be finite".into()));
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Ellipticity bound recorded by [`DiffusionModel::certify`], if any.
    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    /// True when no coefficient depends on time.
    pub fn is_autonomous(&self) -> bool {
        match &self.family {
            Family::Tabulated(t) => t.times.len() == 1,
            _ => true,
        }
    }

    fn coefficients(&self, x: &Point, t: f64) -> NodeCoefficients {
        match &self.family {
            Family::Constant { drift, beta } => NodeCoefficients { drift: *drift, beta: *beta },
            Family::LinearDrift { rate, center, beta } => {
                let mut drift = [0.0; 2];
                for i in 0..self.dim {
                    drift[i] = -rate[i] * (x[i] - center[i]);
                }
                NodeCoefficients { drift, beta: *beta }
            }
            Family::Tabulated(table) => table.eval(x, t),
        }
    }

    pub fn drift(&self, x: &Point, t: f64) -> Vec2 {
        self.coefficients(x, t).drift
    }

    pub fn beta(&self, x: &Point, t: f64) -> Mat2 {
        self.coefficients(x, t).beta
    }

    /// `a = ½ββᵀ`, exactly symmetric.
    pub fn eval_a(&self, x: &Point, t: f64) -> Mat2 {
        half_outer(&self.beta(x, t), self.dim)
    }

    /// Whether `a₁₂` can be nonzero anywhere (always false in one dimension).
    pub fn has_mixed_terms(&self, grid: &DomainGrid, times: &[f64]) -> bool {
        self.dim == 2 && times.iter().any(|&t| grid.nodes().any(|x| self.eval_a(&x, t)[0][1] != 0.0))
    }

    /// Largest spectral norm of `a` over the sampled nodes and times.
    pub fn max_a_norm(&self, grid: &DomainGrid, times: &[f64]) -> f64 {
        let mut m = 0.0f64;
        for &t in times {
            for x in grid.nodes() {
                let (_, hi) = sym_eigen(&self.eval_a(&x, t), self.dim);
                m = m.max(hi);
            }
        }
        m
    }

    /// Runs [`check_ellipticity`] and records the certified bound on the model.
    pub fn certify(mut self, grid: &DomainGrid, times: &[f64]) -> Result<Self, ModelError> {
        self.delta = Some(check_ellipticity(&self, grid, times)?);
        Ok(self)
    }
}

fn check_dim(dim: usize) -> Result<(), ModelError> {
    if dim == 1 || dim == 2 {
        Ok(())
    } else {
        Err(ModelError::Invalid(format!("dimension must be 1 or 2, got {dim}")))
    }
}

fn half_outer(b: &Mat2, dim: usize) -> Mat2 {
    let mut a = [[0.0; 2]; 2];
    if dim == 1 {
        a[0][0] = 0.5 * b[0][0] * b[0][0];
        return a;
    }
    a[0][0] = 0.5 * (b[0][0] * b[0][0] + b[0][1] * b[0][1]);
    a[1][1] = 0.5 * (b[1][0] * b[1][0] + b[1][1] * b[1][1]);
    a[0][1] = 0.5 * (b[0][0] * b[1][0] + b[0][1] * b[1][1]);
    a[1][0] = a[0][1];
    a
}

/// Eigenvalues `(min, max)` of a symmetric 2×2 (or 1×1) matrix.
fn sym_eigen(s: &Mat2, dim: usize) -> (f64, f64) {
    if dim == 1 {
        return (s[0][0], s[0][0]);
    }
    let half_tr = 0.5 * (s[0][0] + s[1][1]);
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    let hi = half_tr + disc;
    // det / λmax avoids cancellation in the small eigenvalue.
    let lo = if hi > 0.0 { det / hi } else { half_tr - disc };
    (lo, hi)
}

/// Smallest eigenvalue of `ββᵀ` over all nodes of `grid` and all `times`.
///
/// Fails on the first sample where it is not strictly positive. Tabulated
/// models must also be at least as fine as `grid` and cover the same box.
pub fn check_ellipticity(model: &DiffusionModel, grid: &DomainGrid, times: &[f64]) -> Result<f64, ModelError> {
    if model.dim != grid.dim() {
        return Err(ModelError::DimensionMismatch { model: model.dim, grid: grid.dim() });
    }
    if let Family::Tabulated(table) = &model.family {
        let tg = &table.grid;
        if tg.n_cells().iter().zip(grid.n_cells()).any(|(t, s)| t < s) {
            return Err(ModelError::TabulationTooCoarse {
                table: tg.n_cells().to_vec(),
                solver: grid.n_cells().to_vec(),
            });
        }
        let same_box = tg
            .lo()
            .iter()
            .zip(grid.lo())
            .chain(tg.hi().iter().zip(grid.hi()))
            .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        if !same_box {
            return Err(ModelError::TabulationBox);
        }
    }
    let times: &[f64] = if times.is_empty() { &[0.0] } else { times };
    let mut delta = f64::INFINITY;
    for &t in times {
        for x in grid.nodes() {
            let b = model.beta(&x, t);
            let bbt = half_outer(&b, model.dim).map(|r| r.map(|v| 2.0 * v));
            let (lo, _) = sym_eigen(&bbt, model.dim);
            if !(lo > 0.0) {
                return Err(ModelError::EllipticityViolation { x: x[..model.dim].to_vec(), t, eigenvalue: lo });
            }
            delta = delta.min(lo);
        }
    }
    Ok(delta)
}
