//! Euler–Maruyama simulation of the absorbed process and histogram density
//! estimates, as a solver-independent check of the forward equation.
//!
//! # Random streams
//!
//! Every particle owns a ChaCha8 stream. The 256-bit key is the master seed
//! (little-endian, bytes 0..8) followed by a purpose tag (bytes 8..16, one
//! tag for initial sampling and one for the increments) and zeros; the stream
//! id is the particle index. ChaCha is counter based, so particle `i` draws
//! the same numbers whatever thread runs it and in whatever order.
//!
//! Uniforms are `((u64 >> 11) + ½) · 2⁻⁵³`, strictly inside `(0, 1)`. Normal
//! increments use the Box–Muller transform on two uniforms per step:
//! `z₁ = √(−2 ln u₁) cos 2πu₂`, `z₂ = √(−2 ln u₁) sin 2πu₂` (`z₂` only in 2-D).
//! Step `k` of a particle always reads words `4k..4k+4` of its stream, so a
//! simulation may be split into several calls without changing the paths.

use std::f64::consts::PI;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{DensityField, DomainGrid, GridError};
use crate::model::{DiffusionModel, Point};

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("not a probability density: {0}")]
    NotADensity(String),
    #[error("invalid simulation input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

const PURPOSE_SAMPLE: u64 = 0x5341_4d50_4c45_0001;
const PURPOSE_STEP: u64 = 0x5354_4550_5f45_4d02;
/// 32-bit ChaCha words consumed per time step (two u64 draws).
const WORDS_PER_STEP: u128 = 4;

/// Counter-based stream for one particle and purpose.
pub fn particle_stream(seed: u64, purpose: u64, particle: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(particle);
    rng
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let u1 = uniform(rng);
    let u2 = uniform(rng);
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (2.0 * PI * u2).sin_cos();
    [r * c, r * s]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub seed: u64,
    pub positions: Vec<Point>,
    pub alive: Vec<bool>,
    /// Current simulation time.
    pub time: f64,
    /// Steps simulated so far (fixes each particle's stream position).
    pub steps_taken: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().filter(|a| **a).count()
    }
}

/// Draws `n` particles from `rho`: a cell with probability `ρᵢ |cell|`, then a
/// uniform point inside that cell.
pub fn sample_initial(rho: &DensityField, n: usize, seed: u64) -> Result<ParticleEnsemble, MonteCarloError> {
    if n == 0 {
        return Err(MonteCarloError::InvalidInput("need at least one particle".into()));
    }
    if let Some((i, v)) = rho.values().iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(MonteCarloError::NotADensity(format!("value {v} at node {i}")));
    }
    let mass = rho.mass();
    if (mass - 1.0).abs() > 1e-9 {
        return Err(MonteCarloError::NotADensity(format!("mass is {mass}, expected 1")));
    }
    let grid = *rho.grid();
    let h = grid.h();
    let mut cdf = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    for v in rho.values() {
        acc += v;
        cdf.push(acc);
    }
    let total = acc;
    let positions = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = particle_stream(seed, PURPOSE_SAMPLE, i as u64);
            let target = uniform(&mut rng) * total;
            let mut cell = cdf.partition_point(|c| *c <= target).min(grid.len() - 1);
            // Never land in an empty cell through round-off at the top of the cdf.
            while rho.values()[cell] == 0.0 && cell > 0 {
                cell -= 1;
            }
            let m = grid.unflatten(cell);
            let mut x = [0.0; 2];
            for axis in 0..grid.dim() {
                x[axis] = grid.lo()[axis] + (m[axis] as f64 + uniform(&mut rng)) * h[axis];
            }
            x
        })
        .collect();
    Ok(ParticleEnsemble { seed, positions, alive: vec![true; n], time: 0.0, steps_taken: 0 })
}

/// Advances the ensemble to time `t_end` with steps of `dt` (the last one
/// shortened to land on `t_end`). A particle outside the open box after a step
/// is absorbed there and never moves again.
pub fn simulate(
    model: &DiffusionModel,
    grid: &DomainGrid,
    mut ensemble: ParticleEnsemble,
    t_end: f64,
    dt: f64,
) -> Result<ParticleEnsemble, MonteCarloError> {
    let span = t_end - ensemble.time;
    if !(dt > 0.0) || !(span > 0.0) || dt > span * (1.0 + 1e-12) {
        return Err(MonteCarloError::InvalidInput(format!(
            "need 0 < dt ≤ T − t, got dt = {dt}, T = {t_end}, t = {}",
            ensemble.time
        )));
    }
    if model.dim() != grid.dim() {
        return Err(MonteCarloError::InvalidInput("model and grid dimensions differ".into()));
    }
    let n_steps = ((span / dt) - 1e-9).ceil().max(1.0) as u64;
    let t0 = ensemble.time;
    let first_step = ensemble.steps_taken;
    let dim = grid.dim();
    let seed = ensemble.seed;

    ensemble
        .positions
        .par_iter_mut()
        .zip(ensemble.alive.par_iter_mut())
        .enumerate()
        .filter(|(_, (_, alive))| **alive)
        .for_each(|(i, (x, alive))| {
            let mut rng = particle_stream(seed, PURPOSE_STEP, i as u64);
            rng.set_word_pos(first_step as u128 * WORDS_PER_STEP);
            for k in 0..n_steps {
                let t = t0 + k as f64 * dt;
                let h = if k + 1 == n_steps { t_end - t } else { dt };
                let z = box_muller(&mut rng);
                let f = model.drift(x, t);
                let b = model.beta(x, t);
                let sq = h.sqrt();
                let mut next = *x;
                for i in 0..dim {
                    let noise: f64 = (0..dim).map(|j| b[i][j] * z[j]).sum();
                    next[i] += f[i] * h + sq * noise;
                }
                *x = next;
                if !grid.contains(x) {
                    *alive = false;
                    break;
                }
            }
        });
    ensemble.time = t_end;
    ensemble.steps_taken = first_step + n_steps;
    Ok(ensemble)
}

/// Histogram of surviving particles, normalised by the initial count.
#[derive(Debug, Clone, PartialEq)]
pub struct MCEstimate {
    pub n_particles: usize,
    pub counts: Vec<u64>,
    /// `counts / (n · |cell|)`.
    pub histogram: DensityField,
    /// Binomial standard error of each histogram value.
    pub stderr: DensityField,
    pub survival: f64,
}

pub fn estimate_density(ensemble: &ParticleEnsemble, grid: &DomainGrid) -> MCEstimate {
    let mut counts = vec![0u64; grid.len()];
    for (x, alive) in ensemble.positions.iter().zip(&ensemble.alive) {
        if *alive {
            if let Some(idx) = grid.locate(x) {
                counts[idx] += 1;
            }
        }
    }
    let n = ensemble.len() as f64;
    let vol = grid.cell_volume();
    let histogram = counts.iter().map(|c| *c as f64 / (n * vol)).collect();
    let stderr = counts
        .iter()
        .map(|c| {
            let p = *c as f64 / n;
            (p * (1.0 - p) / n).sqrt() / vol
        })
        .collect();
    let alive = counts.iter().sum::<u64>();
    MCEstimate {
        n_particles: ensemble.len(),
        counts,
        histogram: DensityField::new(*grid, histogram).expect("one value per node"),
        stderr: DensityField::new(*grid, stderr).expect("one value per node"),
        survival: alive as f64 / n,
    }
}

/// Per-cell z-scores of a Monte Carlo histogram against a reference density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Consistency {
    pub z_scores: Vec<f64>,
    pub fraction_within: f64,
    pub bound: f64,
    pub reference_survival: f64,
    pub survival: f64,
}

/// Compares `estimate` with the reference density `reference` on the same grid.
/// The standard error of each cell is the binomial one under the reference
/// cell probability `qᵢ = referenceᵢ |cell|`, so empty cells are handled too.
pub fn compare_with(estimate: &MCEstimate, reference: &DensityField, bound: f64) -> Consistency {
    let grid = estimate.histogram.grid();
    let vol = grid.cell_volume();
    let n = estimate.n_particles as f64;
    let z_scores: Vec<f64> = estimate
        .histogram
        .values()
        .iter()
        .zip(reference.values())
        .map(|(mc, pde)| {
            let q = (pde * vol).clamp(0.0, 1.0);
            let sigma = (q * (1.0 - q) / n).sqrt() / vol;
            let diff = mc - pde;
            if sigma > 0.0 {
                diff / sigma
            } else if diff.abs() < 1e-300 {
                0.0
            } else {
                f64::INFINITY.copysign(diff)
            }
        })
        .collect();
    let within = z_scores.iter().filter(|z| z.abs() <= bound).count();
    Consistency {
        fraction_within: within as f64 / z_scores.len() as f64,
        z_scores,
        bound,
        reference_survival: reference.mass(),
        survival: estimate.survival,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MCSummary {
    pub n: usize,
    pub survival: f64,
    pub dt: f64,
    pub seed: u64,
    pub horizon: f64,
}

impl MCEstimate {
    /// Writes `stem.csv` (coordinates, density, stderr) and `stem.json`.
    pub fn export(
        &self,
        dir: &Path,
        stem: &str,
        dt: f64,
        seed: u64,
        horizon: f64,
    ) -> Result<Vec<String>, MonteCarloError> {
        let grid = self.histogram.grid();
        let csv_name = format!("{stem}.csv");
        let mut w = csv::Writer::from_path(dir.join(&csv_name)).map_err(GridError::from)?;
        let mut header: Vec<&str> = ["x", "y"][..grid.dim()].to_vec();
        header.extend(["density", "stderr"]);
        w.write_record(&header).map_err(GridError::from)?;
        for idx in 0..grid.len() {
            let x = grid.node(idx);
            let mut row: Vec<String> = x[..grid.dim()].iter().map(|c| c.to_string()).collect();
            row.push(self.histogram.values()[idx].to_string());
            row.push(self.stderr.values()[idx].to_string());
            w.write_record(&row).map_err(GridError::from)?;
        }
        w.flush()?;
        let json_name = format!("{stem}.json");
        let summary = MCSummary { n: self.n_particles, survival: self.survival, dt, seed, horizon };
        std::fs::write(dir.join(&json_name), serde_json::to_string_pretty(&summary)?)?;
        Ok(vec![csv_name, json_name])
    }
}

/// `min(1e−3 · T, h² / (4 · max‖a‖))`.
pub fn default_dt(model: &DiffusionModel, grid: &DomainGrid, horizon: f64) -> f64 {
    let h = grid.h();
    let hmin = h[..grid.dim()].iter().copied().fold(f64::INFINITY, f64::min);
    let a = model.max_a_norm(grid, &[0.0, 0.5 * horizon, horizon]).max(f64::MIN_POSITIVE);
    (1e-3 * horizon).min(hmin * hmin / (4.0 * a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_keyed_by_particle_and_purpose() {
        let a: Vec<u64> = (0..4).map(|_| particle_stream(7, PURPOSE_STEP, 3).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_ne!(particle_stream(7, PURPOSE_STEP, 3).next_u64(), particle_stream(7, PURPOSE_STEP, 4).next_u64());
        assert_ne!(particle_stream(7, PURPOSE_STEP, 3).next_u64(), particle_stream(7, PURPOSE_SAMPLE, 3).next_u64());
        assert_ne!(particle_stream(7, PURPOSE_STEP, 3).next_u64(), particle_stream(8, PURPOSE_STEP, 3).next_u64());
    }

    #[test]
    fn word_position_skips_whole_steps() {
        let mut a = particle_stream(1, PURPOSE_STEP, 0);
        for _ in 0..3 {
            box_muller(&mut a);
        }
        let mut b = particle_stream(1, PURPOSE_STEP, 0);
        b.set_word_pos(3 * WORDS_PER_STEP);
        assert_eq!(box_muller(&mut a), box_muller(&mut b));
    }

    #[test]
    fn uniforms_stay_inside_unit_interval() {
        let mut rng = particle_stream(0, 0, 0);
        for _ in 0..10_000 {
            let u = uniform(&mut rng);
            assert!(u > 0.0 && u < 1.0);
        }
    }

    #[test]
    fn single_cell_density_puts_everyone_there() {
        let g = DomainGrid::unit_interval(8).unwrap();
        let rho = DensityField::unit_cell(g, 5);
        let e = sample_initial(&rho, 1000, 11).unwrap();
        assert!(e.positions.iter().all(|x| g.locate(x) == Some(5)));
        assert_eq!(e.alive_count(), 1000);
    }

    #[test]
    fn rejects_non_densities() {
        let g = DomainGrid::unit_interval(8).unwrap();
        let half = DensityField::from_fn(g, |_| 0.5);
        assert!(matches!(sample_initial(&half, 10, 0), Err(MonteCarloError::NotADensity(_))));
        let mut neg = DensityField::from_fn(g, |_| 1.0);
        neg.values_mut()[0] = -0.1;
        neg.values_mut()[1] = 1.1;
        assert!(matches!(sample_initial(&neg, 10, 0), Err(MonteCarloError::NotADensity(_))));
    }

    #[test]
    fn estimate_of_extreme_ensembles() {
        let g = DomainGrid::unit_interval(4).unwrap();
        let mut e = sample_initial(&DensityField::unit_cell(g, 2), 50, 3).unwrap();
        let est = estimate_density(&e, &g);
        assert_eq!(est.survival, 1.0);
        assert!((est.histogram.values()[2] - 4.0).abs() < 1e-12);
        assert!((est.histogram.mass() - est.survival).abs() < 1e-15);

        e.alive.iter_mut().for_each(|a| *a = false);
        let est = estimate_density(&e, &g);
        assert_eq!(est.survival, 0.0);
        assert!(est.histogram.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_steps() {
        let g = DomainGrid::unit_interval(8).unwrap();
        let e = sample_initial(&DensityField::from_fn(g, |_| 1.0), 10, 0).unwrap();
        let m = DiffusionModel::brownian(1);
        assert!(simulate(&m, &g, e.clone(), 0.1, 0.0).is_err());
        assert!(simulate(&m, &g, e.clone(), 0.1, 0.2).is_err());
        assert!(simulate(&m, &g, e, 0.0, 0.01).is_err());
    }

    #[test]
    fn split_simulation_matches_single_run() {
        let g = DomainGrid::unit_interval(16).unwrap();
        let m = DiffusionModel::linear_drift(1, &[1.0], &[0.4], &[vec![0.7]]).unwrap();
        let e = sample_initial(&DensityField::from_fn(g, |_| 1.0), 500, 9).unwrap();
        let once = simulate(&m, &g, e.clone(), 0.2, 0.01).unwrap();
        let half = simulate(&m, &g, e, 0.1, 0.01).unwrap();
        let twice = simulate(&m, &g, half, 0.2, 0.01).unwrap();
        assert_eq!(once.alive, twice.alive);
        for (a, b) in once.positions.iter().zip(&twice.positions) {
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn export_writes_csv_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let g = DomainGrid::unit_interval(4).unwrap();
        let e = sample_initial(&DensityField::unit_cell(g, 1), 20, 3).unwrap();
        let est = estimate_density(&e, &g);
        let files = est.export(dir.path(), "mc", 0.01, 3, 0.0).unwrap();
        assert_eq!(files, vec!["mc.csv".to_string(), "mc.json".to_string()]);
        let text = std::fs::read_to_string(dir.path().join("mc.csv")).unwrap();
        assert!(text.starts_with("x,density,stderr\n"));
        let s: MCSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("mc.json")).unwrap()).unwrap();
        assert_eq!(s.n, 20);
        assert_eq!(s.survival, 1.0);
    }
}
