//! Uniform cell-centred grids on intervals and rectangles, and the density
//! fields that live on them.
//!
//! Unknowns sit at cell centres. Flat indices run with the first axis
//! fastest, so for a rectangle the node `(i, j)` has index `i + n0 * j`.
//! Every norm and integral is a midpoint-rule sum over cells.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest number of cells allowed along any axis.
pub const MIN_CELLS: usize = 4;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("dimension must be 1 or 2, got {0}")]
    InvalidDimension(usize),
    #[error("expected {expected} entries per corner/cell list, got {got}")]
    AxisCount { expected: usize, got: usize },
    #[error("degenerate box on axis {axis}: lo = {lo}, hi = {hi}")]
    DegenerateBox { axis: usize, lo: f64, hi: f64 },
    #[error("axis {axis} has {n} cells, at least {MIN_CELLS} required")]
    TooFewCells { axis: usize, n: usize },
    #[error("field has {got} values but the grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot coarsen {n} cells on axis {axis} by a factor {factor}")]
    BadCoarsening { axis: usize, n: usize, factor: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Uniform tensor grid on an interval or an axis-aligned rectangle.
///
/// Unused trailing axes (for `dim == 1`) carry one unit cell so that products
/// over axes need no special casing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainGrid {
    dim: usize,
    lo: [f64; 2],
    hi: [f64; 2],
    n_cells: [usize; 2],
}

impl DomainGrid {
    /// Builds a grid, validating the box and the cell counts.
    pub fn new(dim: usize, lo: &[f64], hi: &[f64], n_cells: &[usize]) -> Result<Self, GridError> {
        if dim != 1 && dim != 2 {
            return Err(GridError::InvalidDimension(dim));
        }
        for len in [lo.len(), hi.len(), n_cells.len()] {
            if len != dim {
                return Err(GridError::AxisCount { expected: dim, got: len });
            }
        }
        let mut g = DomainGrid { dim, lo: [0.0; 2], hi: [1.0; 2], n_cells: [1; 2] };
        for axis in 0..dim {
            if !(hi[axis] > lo[axis]) || !lo[axis].is_finite() || !hi[axis].is_finite() {
                return Err(GridError::DegenerateBox { axis, lo: lo[axis], hi: hi[axis] });
            }
            if n_cells[axis] < MIN_CELLS {
                return Err(GridError::TooFewCells { axis, n: n_cells[axis] });
            }
            g.lo[axis] = lo[axis];
            g.hi[axis] = hi[axis];
            g.n_cells[axis] = n_cells[axis];
        }
        Ok(g)
    }

    /// Unit interval with `n` cells.
    pub fn unit_interval(n: usize) -> Result<Self, GridError> {
        Self::new(1, &[0.0], &[1.0], &[n])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo[..self.dim]
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi[..self.dim]
    }

    pub fn n_cells(&self) -> &[usize] {
        &self.n_cells[..self.dim]
    }

    /// Cell widths per axis.
    pub fn h(&self) -> [f64; 2] {
        let mut h = [1.0; 2];
        for (axis, w) in h.iter_mut().enumerate().take(self.dim) {
            *w = (self.hi[axis] - self.lo[axis]) / self.n_cells[axis] as f64;
        }
        h
    }

    /// Number of interior unknowns.
    pub fn len(&self) -> usize {
        self.n_cells[0] * self.n_cells[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        let h = self.h();
        h[0] * h[1]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|a| self.hi[a] - self.lo[a]).product()
    }

    pub fn flatten(&self, m: [usize; 2]) -> usize {
        m[0] + self.n_cells[0] * m[1]
    }

    pub fn unflatten(&self, idx: usize) -> [usize; 2] {
        [idx % self.n_cells[0], idx / self.n_cells[0]]
    }

    /// Cell-centre coordinates of a node; the unused axis reads 0.
    pub fn node(&self, idx: usize) -> [f64; 2] {
        let m = self.unflatten(idx);
        let h = self.h();
        let mut x = [0.0; 2];
        for axis in 0..self.dim {
            x[axis] = self.lo[axis] + (m[axis] as f64 + 0.5) * h[axis];
        }
        x
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(move |i| self.node(i))
    }

    /// True when `x` lies in the open box.
    pub fn contains(&self, x: &[f64; 2]) -> bool {
        (0..self.dim).all(|a| x[a] > self.lo[a] && x[a] < self.hi[a])
    }

    /// Flat index of the cell containing `x`, or `None` outside the open box.
    pub fn locate(&self, x: &[f64; 2]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let h = self.h();
        let mut m = [0usize; 2];
        for axis in 0..self.dim {
            let k = ((x[axis] - self.lo[axis]) / h[axis]).floor() as usize;
            m[axis] = k.min(self.n_cells[axis] - 1);
        }
        Some(self.flatten(m))
    }

    /// Grid on the same box with `factor[axis]` fine cells merged per coarse cell.
    pub fn coarsened(&self, factor: &[usize]) -> Result<Self, GridError> {
        if factor.len() != self.dim {
            return Err(GridError::AxisCount { expected: self.dim, got: factor.len() });
        }
        let mut n = [0usize; 2];
        for axis in 0..self.dim {
            let f = factor[axis];
            if f == 0 || !self.n_cells[axis].is_multiple_of(f) {
                return Err(GridError::BadCoarsening { axis, n: self.n_cells[axis], factor: f });
            }
            n[axis] = self.n_cells[axis] / f;
        }
        Self::new(self.dim, self.lo(), self.hi(), &n[..self.dim])
    }

    fn same_shape(&self, other: &DomainGrid) -> bool {
        self.dim == other.dim && self.n_cells == other.n_cells && self.lo == other.lo && self.hi == other.hi
    }
}

/// Real values on the interior nodes of a grid at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    grid: DomainGrid,
    values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: DomainGrid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        Ok(DensityField { grid, values })
    }

    pub fn zeros(grid: DomainGrid) -> Self {
        DensityField { grid, values: vec![0.0; grid.len()] }
    }

    /// Samples `f` at every cell centre.
    pub fn from_fn(grid: DomainGrid, mut f: impl FnMut(&[f64; 2]) -> f64) -> Self {
        let values = grid.nodes().map(|x| f(&x)).collect();
        DensityField { grid, values }
    }

    /// Density `1 / cellVolume` in cell `idx`, zero elsewhere (unit mass).
    pub fn unit_cell(grid: DomainGrid, idx: usize) -> Self {
        let mut f = Self::zeros(grid);
        f.values[idx] = 1.0 / grid.cell_volume();
        f
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Midpoint-rule integral over the domain.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        DensityField { grid: self.grid, values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `self - other`, both on the same grid.
    pub fn sub(&self, other: &DensityField) -> Self {
        debug_assert!(self.grid.same_shape(&other.grid));
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        DensityField { grid: self.grid, values }
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &DensityField) -> Self {
        debug_assert!(self.grid.same_shape(&other.grid));
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        DensityField { grid: self.grid, values }
    }

    pub fn positive_part(&self) -> Self {
        DensityField { grid: self.grid, values: self.values.iter().map(|v| v.max(0.0)).collect() }
    }

    pub fn negative_part(&self) -> Self {
        DensityField { grid: self.grid, values: self.values.iter().map(|v| (-v).max(0.0)).collect() }
    }

    /// Mass-preserving block average onto a coarser grid.
    pub fn coarsen(&self, factor: &[usize]) -> Result<Self, GridError> {
        let coarse = self.grid.coarsened(factor)?;
        let f = [factor[0], if self.grid.dim == 2 { factor[1] } else { 1 }];
        let mut values = vec![0.0; coarse.len()];
        for (idx, v) in self.values.iter().enumerate() {
            let m = self.grid.unflatten(idx);
            values[coarse.flatten([m[0] / f[0], m[1] / f[1]])] += v;
        }
        let scale = 1.0 / (f[0] * f[1]) as f64;
        values.iter_mut().for_each(|v| *v *= scale);
        Ok(DensityField { grid: coarse, values })
    }

    /// CSV with a header, one row per node in flat-index order: `x[,y],value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), GridError> {
        let mut w = csv::Writer::from_writer(writer);
        if self.grid.dim == 1 {
            w.write_record(["x", "value"])?;
        } else {
            w.write_record(["x", "y", "value"])?;
        }
        for (idx, v) in self.values.iter().enumerate() {
            let x = self.grid.node(idx);
            let mut row = Vec::with_capacity(3);
            for c in &x[..self.grid.dim] {
                row.push(c.to_string());
            }
            row.push(v.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), GridError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Reads a field written by [`DensityField::write_csv`], checking row count
    /// and node coordinates against `grid`.
    pub fn read_csv<R: Read>(grid: DomainGrid, reader: R) -> Result<Self, GridError> {
        let rows = read_columns(grid, reader, 1)?;
        Ok(DensityField { grid, values: rows.into_iter().map(|r| r[0]).collect() })
    }

    pub fn load_csv(grid: DomainGrid, path: &Path) -> Result<Self, GridError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(grid, std::io::BufReader::new(file))
    }
}

/// Reads a node-ordered CSV with `dim` coordinate columns followed by
/// `n_values` data columns. Coordinates must match the grid's cell centres.
pub(crate) fn read_columns<R: Read>(grid: DomainGrid, reader: R, n_values: usize) -> Result<Vec<Vec<f64>>, GridError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let width = grid.dim + n_values;
    let header_len = r.headers()?.len();
    if header_len != width {
        return Err(GridError::ShapeMismatch(format!("expected {width} columns, header has {header_len}")));
    }
    let h = grid.h();
    let mut out = Vec::with_capacity(grid.len());
    for (idx, rec) in r.records().enumerate() {
        let rec = rec?;
        if idx >= grid.len() {
            return Err(GridError::ShapeMismatch(format!("more than {} data rows", grid.len())));
        }
        if rec.len() != width {
            return Err(GridError::ShapeMismatch(format!("row {idx} has {} columns, expected {width}", rec.len())));
        }
        let mut nums = Vec::with_capacity(width);
        for field in rec.iter() {
            let v: f64 =
                field.parse().map_err(|_| GridError::ShapeMismatch(format!("row {idx}: cannot parse {field:?}")))?;
            nums.push(v);
        }
        let x = grid.node(idx);
        for axis in 0..grid.dim {
            if (nums[axis] - x[axis]).abs() > 1e-6 * h[axis] {
                return Err(GridError::ShapeMismatch(format!(
                    "row {idx}: coordinate {} does not match node {} on axis {axis}",
                    nums[axis], x[axis]
                )));
            }
        }
        out.push(nums[grid.dim..].to_vec());
    }
    if out.len() != grid.len() {
        return Err(GridError::ShapeMismatch(format!("expected {} data rows, got {}", grid.len(), out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn unit_interval_with_four_cells() {
        let g = DomainGrid::new(1, &[0.0], &[1.0], &[4]).unwrap();
        assert_eq!(g.h()[0], 0.25);
        assert_eq!(g.len(), 4);
        let xs: Vec<f64> = g.nodes().map(|x| x[0]).collect();
        assert_eq!(xs, vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn rectangle_widths_and_count() {
        let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[4, 8]).unwrap();
        assert_eq!(&g.h(), &[0.25, 0.25]);
        assert_eq!(g.len(), 32);
        assert_eq!(g.cell_volume(), 0.0625);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(DomainGrid::new(1, &[0.0], &[1.0], &[2]), Err(GridError::TooFewCells { .. })));
        assert!(matches!(DomainGrid::new(3, &[0.0; 3], &[1.0; 3], &[4; 3]), Err(GridError::InvalidDimension(3))));
        assert!(matches!(DomainGrid::new(1, &[1.0], &[1.0], &[8]), Err(GridError::DegenerateBox { .. })));
        assert!(matches!(
            DomainGrid::new(2, &[0.0, 1.0], &[1.0, 0.5], &[8, 8]),
            Err(GridError::DegenerateBox { axis: 1, .. })
        ));
        assert!(matches!(DomainGrid::new(2, &[0.0], &[1.0], &[8]), Err(GridError::AxisCount { .. })));
    }

    #[test]
    fn mass_of_simple_fields() {
        let g = DomainGrid::unit_interval(37).unwrap();
        assert_eq!(DensityField::zeros(g).mass(), 0.0);
        let ones = DensityField::from_fn(g, |_| 1.0);
        assert!((ones.mass() - 1.0).abs() < 1e-14);

        let g = DomainGrid::unit_interval(256).unwrap();
        let s = DensityField::from_fn(g, |x| (PI * x[0]).sin());
        assert!((s.mass() - 2.0 / PI).abs() < 1e-4);
    }

    #[test]
    fn constant_mass_is_exact_on_rectangles() {
        let g = DomainGrid::new(2, &[-1.0, 0.5], &[1.0, 2.0], &[8, 6]).unwrap();
        let f = DensityField::from_fn(g, |_| 2.5);
        assert!((f.mass() - 2.5 * 3.0).abs() < 1e-13);
    }

    #[test]
    fn unit_cell_has_unit_mass() {
        let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[4, 8]).unwrap();
        let f = DensityField::unit_cell(g, 9);
        assert!((f.mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn locate_and_contains() {
        let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[4, 8]).unwrap();
        assert_eq!(g.locate(&[0.1, 0.1]), Some(0));
        assert_eq!(g.locate(&[0.9, 1.9]), Some(31));
        assert_eq!(g.locate(&[0.0, 1.0]), None);
        assert_eq!(g.locate(&[0.5, 2.5]), None);
        for idx in 0..g.len() {
            assert_eq!(g.locate(&g.node(idx)), Some(idx));
        }
    }

    #[test]
    fn coarsen_preserves_mass() {
        let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 1.0], &[16, 8]).unwrap();
        let f = DensityField::from_fn(g, |x| x[0] + 3.0 * x[1] * x[1]);
        let c = f.coarsen(&[4, 2]).unwrap();
        assert_eq!(c.grid().n_cells(), &[4, 4]);
        assert!((c.mass() - f.mass()).abs() < 1e-13);
        assert!(f.coarsen(&[3, 2]).is_err());
    }

    #[test]
    fn csv_roundtrip_and_shape_checks() {
        let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[4, 8]).unwrap();
        let f = DensityField::from_fn(g, |x| (x[0] * 7.3).sin() / 3.0 + x[1]);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,value\n"));
        let back = DensityField::read_csv(g, buf.as_slice()).unwrap();
        assert_eq!(back, f);

        let other = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[4, 4]).unwrap();
        assert!(matches!(DensityField::read_csv(other, buf.as_slice()), Err(GridError::ShapeMismatch(_))));
        let g1 = DomainGrid::unit_interval(4).unwrap();
        assert!(DensityField::read_csv(g1, "x,value\n0.125,1\n0.375,2\n".as_bytes()).is_err());
        assert!(DensityField::read_csv(g1, "x,value\n0.125,1\n0.375,2\n0.625,3\n0.875,4\n".as_bytes()).is_ok());
    }

    fn arb_grid() -> impl Strategy<Value = DomainGrid> {
        prop_oneof![
            (4usize..40).prop_map(|n| DomainGrid::new(1, &[-0.5], &[2.0], &[n]).unwrap()),
            (4usize..20, 4usize..20).prop_map(|(a, b)| DomainGrid::new(2, &[0.0, -1.0], &[3.0, 1.0], &[a, b]).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn flat_index_roundtrip(g in arb_grid()) {
            for idx in 0..g.len() {
                let m = g.unflatten(idx);
                prop_assert_eq!(g.flatten(m), idx);
                for (mi, n) in m.iter().zip(g.n_cells()) {
                    prop_assert!(mi < n);
                }
            }
        }

        #[test]
        fn l1_bounded_by_cauchy_schwarz(g in arb_grid(), seed in any::<u64>()) {
            let mut s = seed | 1;
            let f = DensityField::from_fn(g, |_| {
                s ^= s << 13; s ^= s >> 7; s ^= s << 17;
                (s % 2001) as f64 / 1000.0 - 1.0
            });
            prop_assert!(f.l1() <= g.volume().sqrt() * f.l2() * (1.0 + 1e-12));
        }
    }
}
