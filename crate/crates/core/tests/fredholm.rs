use std::f64::consts::PI;

use kseed_core::{
    apply_q, assemble_q, solve_resolvent, spectral_radius, DensityField, DiffusionModel, DomainGrid, ResolventMethod,
    Scheme, SolverConfig, TimeMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAP: usize = 4096;

fn sine(g: DomainGrid) -> DensityField {
    DensityField::from_fn(g, |x| (PI * x[0]).sin())
}

fn bump(g: DomainGrid) -> DensityField {
    DensityField::from_fn(g, |x| if (0.4..0.6).contains(&x[0]) { 1.0 } else { 0.0 })
}

fn heat() -> DiffusionModel {
    DiffusionModel::brownian(1)
}

#[test]
fn eigenmode_through_time_map() {
    let g = DomainGrid::unit_interval(256).unwrap();
    let out = apply_q(&heat(), &g, &SolverConfig::new(512, Scheme::CrankNicolson), 1.0, &sine(g)).unwrap();
    let exact = sine(g).scaled(0.0071918);
    assert!(out.sub(&exact).l2() <= 1e-2 * exact.l2());
}

#[test]
fn long_horizon_absorbs_everything() {
    let g = DomainGrid::unit_interval(4).unwrap();
    let cfg = SolverConfig::new(256, Scheme::ImplicitEuler);
    let q = assemble_q(&heat(), &g, &cfg, 5.0, CAP).unwrap();
    assert!(q.max_entry() <= 1e-8, "max entry {}", q.max_entry());
    assert!(q.min_entry() >= 0.0);
    let rho = spectral_radius(&q, 1e-6, 200).unwrap();
    assert!(rho.radius <= 1e-8);
}

#[test]
fn pure_diffusion_kernel_is_symmetric() {
    let g = DomainGrid::unit_interval(16).unwrap();
    for scheme in [Scheme::ImplicitEuler, Scheme::CrankNicolson] {
        let q = assemble_q(&heat(), &g, &SolverConfig::new(64, scheme), 0.1, CAP).unwrap();
        assert!(q.asymmetry() * g.cell_volume() <= 1e-6);
    }
}

#[test]
fn monotone_assembly_is_substochastic() {
    let cases = [
        (
            DomainGrid::unit_interval(64).unwrap(),
            DiffusionModel::linear_drift(1, &[4.0], &[0.2], &[vec![0.6]]).unwrap(),
        ),
        (
            DomainGrid::new(2, &[0.0, 0.0], &[2.0, 1.0], &[16, 8]).unwrap(),
            DiffusionModel::constant(2, &[1.0, 0.5], &[vec![0.8, 0.0], vec![0.0, 0.5]]).unwrap(),
        ),
    ];
    for (g, m) in cases {
        let q = assemble_q(&m, &g, &SolverConfig::new(50, Scheme::ImplicitEuler), 0.5, CAP).unwrap();
        assert!(q.min_entry() >= 0.0);
        assert!(q.column_masses().iter().all(|m| *m > 0.0 && *m < 1.0));
    }
}

#[test]
fn spectral_radius_matches_principal_eigenvalue() {
    let g = DomainGrid::unit_interval(256).unwrap();
    let m = heat();
    for (t, expected) in [(1.0, (-PI * PI / 2.0).exp()), (0.1, (-PI * PI / 20.0).exp())] {
        let cfg = SolverConfig::new(512, Scheme::CrankNicolson);
        let est = spectral_radius(&TimeMap::new(&m, &g, &cfg, t), 1e-8, 500).unwrap();
        assert!((est.radius - expected).abs() <= 2e-2 * expected, "T = {t}: {}", est.radius);
    }
}

#[test]
fn spectral_radius_below_one_for_elliptic_models() {
    let g = DomainGrid::unit_interval(32).unwrap();
    let models = [
        heat(),
        DiffusionModel::constant(1, &[3.0], &[vec![0.3]]).unwrap(),
        DiffusionModel::linear_drift(1, &[-2.0], &[0.5], &[vec![0.2]]).unwrap(),
    ];
    for m in &models {
        for t in [0.05, 1.0] {
            let q = assemble_q(m, &g, &SolverConfig::new(40, Scheme::ImplicitEuler), t, CAP).unwrap();
            let est = spectral_radius(&q, 1e-9, 5000).unwrap();
            assert!(est.radius < 1.0, "T = {t}: {}", est.radius);
        }
    }
}

#[test]
fn eigenmode_resolvent_in_closed_form() {
    let g = DomainGrid::unit_interval(256).unwrap();
    let cfg = SolverConfig::new(512, Scheme::CrankNicolson);
    let report = solve_resolvent(&heat(), &g, &cfg, 1.0, &sine(g), 1e-10, 100).unwrap();
    assert_eq!(report.method, ResolventMethod::Neumann);
    assert!(report.iterations <= 5, "{} iterations", report.iterations);
    let exact = sine(g).scaled(1.0072437);
    assert!(report.zeta.sub(&exact).l2() <= 1e-2 * exact.l2());
}

#[test]
fn bump_resolvent_agrees_with_dense_solve() {
    let g = DomainGrid::unit_interval(128).unwrap();
    let cfg = SolverConfig::new(256, Scheme::ImplicitEuler);
    let gamma = bump(g);
    let tol = 1e-10;
    let report = solve_resolvent(&heat(), &g, &cfg, 0.5, &gamma, tol, 200).unwrap();
    assert!(report.residual_norm <= 1e-8);

    let q = assemble_q(&heat(), &g, &cfg, 0.5, CAP).unwrap();
    let qz = q.to_dmatrix() * nalgebra::DVector::from_column_slice(report.zeta.values());
    let r: f64 = report
        .zeta
        .values()
        .iter()
        .zip(qz.iter())
        .zip(gamma.values())
        .map(|((z, q), g)| (z - q - g).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(r <= tol * gamma.values().iter().map(|v| v * v).sum::<f64>().sqrt() * 10.0);

    let dense = q.dense_resolvent(&gamma).unwrap();
    let gap = report.zeta.sub(&dense).l2() / dense.l2();
    assert!(gap <= 10.0 * tol, "gap {gap}");
}

#[test]
fn singular_values_decay() {
    let g = DomainGrid::unit_interval(64).unwrap();
    let q = assemble_q(&heat(), &g, &SolverConfig::new(64, Scheme::ImplicitEuler), 0.1, CAP).unwrap();
    let s = q.singular_values();
    assert!(s[0] / s[g.len() / 4] >= 10.0, "σ₁ = {}, σ_N/4 = {}", s[0], s[g.len() / 4]);
}

#[test]
fn split_signs_lose_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = DomainGrid::unit_interval(64).unwrap();
    let m = DiffusionModel::linear_drift(1, &[1.0], &[0.5], &[vec![0.8]]).unwrap();
    let cfg = SolverConfig::new(32, Scheme::ImplicitEuler);
    for _ in 0..25 {
        let u0 = DensityField::from_fn(g, |_| rng.random::<f64>() - 0.3);
        let pos = apply_q(&m, &g, &cfg, 0.3, &u0.positive_part()).unwrap();
        let neg = apply_q(&m, &g, &cfg, 0.3, &u0.negative_part()).unwrap();
        assert!(pos.l1() + neg.l1() < u0.l1());
    }
}
