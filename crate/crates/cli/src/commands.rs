use std::path::{Path, PathBuf};

use kseed_core::fredholm::{assemble_q, spectral_radius, TimeMap};
use kseed_core::kolmogorov::evolve_final;
use kseed_core::montecarlo::{compare_with, default_dt, estimate_density, sample_initial, simulate};
use kseed_core::seedpipe::{verify_candidate, SeedReportJson, VerificationReport};
use kseed_core::{
    evolve, realize_gamma, run_seed, verify_seed, DensityField, DiffusionModel, DomainGrid, Scheme, SolverConfig,
    TargetProfile,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, ExitCode};

/// Files written by one command, all inside the output directory.
pub struct Output {
    pub dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn create(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        Ok(Output { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        std::fs::write(self.dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
        self.record([name.to_string()]);
        Ok(())
    }

    fn field(&mut self, name: &str, field: &DensityField) -> Result<(), CliError> {
        field.save_csv(&self.dir.join(name))?;
        self.record([name.to_string()]);
        Ok(())
    }

    fn record(&mut self, names: impl IntoIterator<Item = String>) {
        for n in names {
            if !self.files.contains(&n) {
                self.files.push(n);
            }
        }
    }

    /// Writes `manifest.json` listing every produced file with its SHA-256.
    fn finish(&mut self) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Entry {
            path: String,
            sha256: String,
        }
        let mut entries = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let bytes = std::fs::read(self.dir.join(f))?;
            let digest = Sha256::digest(&bytes);
            entries.push(Entry { path: f.clone(), sha256: digest.iter().map(|b| format!("{b:02x}")).collect() });
        }
        #[derive(Serialize)]
        struct Manifest {
            files: Vec<Entry>,
        }
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&Manifest { files: entries })? + "\n",
        )?;
        Ok(())
    }
}

/// Everything a command needs, validated before any computation.
pub struct Setup {
    pub config: RunConfig,
    pub grid: DomainGrid,
    pub model: DiffusionModel,
    pub solver: SolverConfig,
    pub out: Output,
}

impl Setup {
    /// Builds the grid and model, certifies ellipticity, resolves defaults
    /// (Monte Carlo seed and step) and echoes the effective configuration.
    pub fn new(mut config: RunConfig) -> Result<Self, CliError> {
        config.validate()?;
        let grid = config.grid()?;
        let model = config.model(&grid)?;
        let solver = config.solver();
        let n = solver.n_steps;
        let times: Vec<f64> = (0..=n).map(|k| config.horizon() * k as f64 / n as f64).collect();
        let model = model.certify(&grid, &times)?;
        if config.mc.seed.is_none() {
            config.mc.seed = Some(rand::random());
        }
        if config.mc.dt.is_none() {
            config.mc.dt = Some(default_dt(&model, &grid, config.horizon()));
        }
        let mut out = Output::create(&config.output.dir)?;
        out.json("config.json", &config)?;
        Ok(Setup { config, grid, model, solver, out })
    }

    fn horizon(&self) -> f64 {
        self.config.horizon()
    }

    fn gamma(&self) -> Result<TargetProfile, CliError> {
        let spec = self.config.gamma.as_ref().ok_or_else(|| CliError::config("this command needs a gamma block"))?;
        Ok(realize_gamma(spec, &self.grid)?)
    }
}

fn load_field(grid: &DomainGrid, path: &Path) -> Result<DensityField, CliError> {
    if !path.is_file() {
        return Err(CliError::io(format!("{}: no such file", path.display())));
    }
    Ok(DensityField::load_csv(*grid, path)?)
}

fn verification_outcome(out: &mut Output, report: &VerificationReport, tol: f64) -> Result<(), CliError> {
    out.record(report.export(&out.dir, tol)?);
    out.finish()?;
    if report.passed(tol) {
        Ok(())
    } else {
        Err(CliError::new(
            ExitCode::VerificationFailed,
            format!(
                "verification failed: residual {:e} (tolerance {tol:e}), mass strictly decreasing: {}",
                report.residual_native, report.mass_strictly_decreasing
            ),
        ))
    }
}

pub fn seed(mut s: Setup) -> Result<(), CliError> {
    let gamma = s.gamma()?;
    let options = s.config.seed_options();
    let solution = run_seed(&s.model, &s.grid, &s.solver, s.horizon(), &gamma, &options)?;
    s.out.record(solution.export(&s.out.dir)?);
    s.out.field("gamma.csv", &gamma.field)?;
    let report = verify_seed(&solution, &s.model, &s.grid, &s.solver)?;
    verification_outcome(&mut s.out, &report, options.residual_tol)
}

#[derive(Serialize)]
struct EvolveReport {
    horizon: f64,
    n_steps: usize,
    scheme: Scheme,
    initial_mass: f64,
    final_mass: f64,
    final_max: f64,
    final_min: f64,
    positivity_certified: bool,
}

pub fn evolve_cmd(mut s: Setup, rho: &Path) -> Result<(), CliError> {
    let rho = load_field(&s.grid, rho)?;
    let traj = evolve(&s.model, &s.grid, &s.solver, &rho, 0.0, s.horizon())?;
    s.out.record(traj.export(&s.out.dir)?);
    let last = traj.final_field();
    let report = EvolveReport {
        horizon: s.horizon(),
        n_steps: s.solver.n_steps,
        scheme: s.solver.scheme,
        initial_mass: rho.mass(),
        final_mass: last.mass(),
        final_max: last.max(),
        final_min: last.min(),
        positivity_certified: traj.positivity_certified,
    };
    s.out.json("report.json", &report)?;
    s.out.finish()
}

#[derive(Serialize)]
struct SpectrumReport {
    horizon: f64,
    radius: f64,
    iterations: usize,
    assembled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_entry: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_column_mass: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_column_mass: Option<f64>,
}

pub fn spectrum(mut s: Setup, assemble: bool) -> Result<(), CliError> {
    let tol = &s.config.tolerances;
    let report = if assemble {
        let q = assemble_q(&s.model, &s.grid, &s.solver, s.horizon(), tol.assembly_cap)?;
        let est = spectral_radius(&q, tol.spectral_tol, tol.spectral_max_iter)?;
        let (bin, json) = q.export(&s.out.dir, "Q")?;
        s.out.record([bin, json]);
        let sv = q.singular_values();
        let mut text = String::from("index,value\n");
        for (i, v) in sv.iter().enumerate() {
            text.push_str(&format!("{},{v}\n", i + 1));
        }
        std::fs::write(s.out.dir.join("singular_values.csv"), text)?;
        s.out.record(["singular_values.csv".to_string()]);
        let masses = q.column_masses();
        SpectrumReport {
            horizon: s.horizon(),
            radius: est.radius,
            iterations: est.iterations,
            assembled: true,
            min_entry: Some(q.min_entry()),
            max_column_mass: masses.iter().copied().reduce(f64::max),
            min_column_mass: masses.iter().copied().reduce(f64::min),
        }
    } else {
        let op = TimeMap::new(&s.model, &s.grid, &s.solver, s.horizon());
        let est = spectral_radius(&op, tol.spectral_tol, tol.spectral_max_iter)?;
        SpectrumReport {
            horizon: s.horizon(),
            radius: est.radius,
            iterations: est.iterations,
            assembled: false,
            min_entry: None,
            max_column_mass: None,
            min_column_mass: None,
        }
    };
    s.out.json("spectrum.json", &report)?;
    s.out.finish()
}

#[derive(Serialize)]
struct ConsistencyReport {
    n: usize,
    seed: u64,
    dt: f64,
    horizon: f64,
    bins: Vec<usize>,
    survival: f64,
    reference_survival: f64,
    z_bound: f64,
    fraction_within: f64,
    passed: bool,
    z_scores: Vec<f64>,
}

/// Fraction of histogram cells whose z-score must lie within the bound.
pub const MC_PASS_FRACTION: f64 = 0.95;

pub fn mc(mut s: Setup, rho: &Path) -> Result<(), CliError> {
    let rho = load_field(&s.grid, rho)?;
    let seed = s.config.mc.seed.expect("resolved in setup");
    let dt = s.config.mc.dt.expect("resolved in setup");
    let bins = s.config.mc_bins();
    let factor: Vec<usize> = s.grid.n_cells().iter().zip(&bins).map(|(n, b)| n / b).collect();
    let coarse = s.grid.coarsened(&factor)?;

    let ensemble = sample_initial(&rho, s.config.mc.n_particles, seed)?;
    let ensemble = simulate(&s.model, &s.grid, ensemble, s.horizon(), dt)?;
    let estimate = estimate_density(&ensemble, &coarse);
    s.out.record(estimate.export(&s.out.dir, "mc", dt, seed, s.horizon())?);

    let reference = evolve_final(&s.model, &s.grid, &s.solver, &rho, 0.0, s.horizon())?.coarsen(&factor)?;
    s.out.field("mc_reference.csv", &reference)?;
    let c = compare_with(&estimate, &reference, s.config.mc.z_bound);
    let report = ConsistencyReport {
        n: estimate.n_particles,
        seed,
        dt,
        horizon: s.horizon(),
        bins,
        survival: c.survival,
        reference_survival: c.reference_survival,
        z_bound: c.bound,
        fraction_within: c.fraction_within,
        passed: c.fraction_within >= MC_PASS_FRACTION,
        z_scores: c.z_scores,
    };
    s.out.json("consistency.json", &report)?;
    s.out.finish()
}

pub fn verify(mut s: Setup, solution: &Path) -> Result<(), CliError> {
    let gamma = s.gamma()?;
    let rho = load_field(&s.grid, &solution.join("rho.csv"))?;
    let report_path = solution.join("report.json");
    let text =
        std::fs::read_to_string(&report_path).map_err(|e| CliError::io(format!("{}: {e}", report_path.display())))?;
    let seed_report: SeedReportJson =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", report_path.display())))?;
    if !(seed_report.alpha > 0.0) || !seed_report.alpha.is_finite() {
        return Err(CliError::new(
            ExitCode::VerificationFailed,
            format!("alpha {} is not positive", seed_report.alpha),
        ));
    }
    let tol = s.config.tolerances.residual_tol;
    let report = verify_candidate(&rho, seed_report.alpha, &gamma.field, &s.model, &s.grid, &s.solver, s.horizon())?;
    verification_outcome(&mut s.out, &report, tol)
}
