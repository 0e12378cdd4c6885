use std::f64::consts::PI;

use kseed_core::kolmogorov::evolve_final;
use kseed_core::{evolve, mass_curve, DensityField, DiffusionModel, DomainGrid, Scheme, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sine(g: DomainGrid) -> DensityField {
    DensityField::from_fn(g, |x| (PI * x[0]).sin())
}

fn rel_l2(a: &DensityField, b: &DensityField) -> f64 {
    a.sub(b).l2() / b.l2()
}

fn eigen_error(n_cells: usize, n_steps: usize, scheme: Scheme, t: f64) -> f64 {
    let g = DomainGrid::unit_interval(n_cells).unwrap();
    let m = DiffusionModel::brownian(1);
    let out = evolve_final(&m, &g, &SolverConfig::new(n_steps, scheme), &sine(g), 0.0, t).unwrap();
    rel_l2(&out, &sine(g).scaled((-PI * PI * t / 2.0).exp()))
}

fn random_nonnegative(g: DomainGrid, rng: &mut ChaCha8Rng) -> DensityField {
    let sparse = rng.random_bool(0.3);
    DensityField::from_fn(g, |_| if sparse && rng.random_bool(0.8) { 0.0 } else { rng.random::<f64>() })
}

#[test]
fn eigenmode_decays_at_analytic_rate() {
    let g = DomainGrid::unit_interval(256).unwrap();
    let m = DiffusionModel::brownian(1);
    let traj = evolve(&m, &g, &SolverConfig::new(512, Scheme::CrankNicolson), &sine(g), 0.0, 1.0).unwrap();
    let decay = (-PI * PI / 2.0).exp();
    let exact = sine(g).scaled(decay);
    assert!(rel_l2(traj.final_field(), &exact) <= 1e-2);
    let peak = traj.final_field().max();
    assert!((peak - 0.007192).abs() < 0.007192 * 1e-2, "peak {peak}");

    for (t, mass) in mass_curve(&traj) {
        let analytic = 2.0 / PI * (-PI * PI * t / 2.0).exp();
        assert!((mass - analytic).abs() <= 2e-2 * analytic, "t = {t}: {mass} vs {analytic}");
    }
}

/// Absorbed Brownian kernel on (0, 1) with variance `t`, by the image series.
fn images(x: f64, y: f64, t: f64, n_images: i32) -> f64 {
    let phi = |z: f64| (-z * z / (2.0 * t)).exp() / (2.0 * PI * t).sqrt();
    (-n_images..=n_images).map(|k| phi(x - y + 2.0 * k as f64) - phi(x + y + 2.0 * k as f64)).sum()
}

#[test]
fn point_mass_matches_image_series() {
    let g = DomainGrid::unit_interval(255).unwrap();
    let center = g.locate(&[0.5, 0.0]).unwrap();
    assert!((g.node(center)[0] - 0.5).abs() < 1e-12);
    let m = DiffusionModel::brownian(1);
    let t = 0.02;
    let out = evolve_final(
        &m,
        &g,
        &SolverConfig::new(2000, Scheme::ImplicitEuler),
        &DensityField::unit_cell(g, center),
        0.0,
        t,
    )
    .unwrap();
    let oracle = DensityField::from_fn(g, |x| images(x[0], 0.5, t, 8));
    let err = out.sub(&oracle).sup() / oracle.sup();
    assert!(err <= 0.03, "sup error {err}");
}

#[test]
fn evolution_is_linear() {
    let g = DomainGrid::unit_interval(64).unwrap();
    let m = DiffusionModel::linear_drift(1, &[2.0], &[0.3], &[vec![0.8]]).unwrap();
    let cfg = SolverConfig::new(40, Scheme::ImplicitEuler);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let r1 = DensityField::from_fn(g, |_| rng.random::<f64>() - 0.5);
        let r2 = DensityField::from_fn(g, |_| rng.random::<f64>() - 0.5);
        let a = rng.random_range(-3.0..3.0);
        let lhs = evolve_final(&m, &g, &cfg, &r2.add_scaled(a, &r1), 0.0, 0.3).unwrap();
        let rhs = evolve_final(&m, &g, &cfg, &r2, 0.0, 0.3)
            .unwrap()
            .add_scaled(a, &evolve_final(&m, &g, &cfg, &r1, 0.0, 0.3).unwrap());
        assert!(lhs.sub(&rhs).sup() <= 1e-9 * (1.0 + rhs.sup()));
    }
}

#[test]
fn semigroup_composition() {
    let g = DomainGrid::new(2, &[0.0, 0.0], &[1.0, 2.0], &[16, 24]).unwrap();
    let m = DiffusionModel::constant(2, &[0.5, -1.0], &[vec![1.0, 0.0], vec![0.0, 0.6]]).unwrap();
    let rho = DensityField::from_fn(g, |x| x[0] * (1.0 - x[0]) * x[1]);
    for scheme in [Scheme::ImplicitEuler, Scheme::CrankNicolson] {
        let whole = evolve_final(&m, &g, &SolverConfig::new(20, scheme), &rho, 0.0, 0.4).unwrap();
        let half = evolve_final(&m, &g, &SolverConfig::new(10, scheme), &rho, 0.0, 0.2).unwrap();
        let both = evolve_final(&m, &g, &SolverConfig::new(10, scheme), &half, 0.2, 0.4).unwrap();
        assert!(both.sub(&whole).sup() <= 1e-9 * whole.sup(), "{scheme:?}");
    }
}

#[test]
fn implicit_euler_preserves_positivity_and_loses_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g1 = DomainGrid::unit_interval(48).unwrap();
    let g2 = DomainGrid::new(2, &[-1.0, 0.0], &[1.0, 1.0], &[12, 8]).unwrap();
    let m1 = DiffusionModel::linear_drift(1, &[3.0], &[0.7], &[vec![0.5]]).unwrap();
    let m2 = DiffusionModel::constant(2, &[2.0, -0.5], &[vec![0.7, 0.0], vec![0.0, 1.2]]).unwrap();
    for (g, m) in [(g1, &m1), (g2, &m2)] {
        for _ in 0..20 {
            let rho = random_nonnegative(g, &mut rng);
            if rho.sup() == 0.0 {
                continue;
            }
            let traj = evolve(m, &g, &SolverConfig::new(25, Scheme::ImplicitEuler), &rho, 0.0, 0.5).unwrap();
            assert!(traj.positivity_certified);
            assert!(traj.fields.iter().all(|f| f.min() >= 0.0));
            let curve = mass_curve(&traj);
            assert!(curve.windows(2).all(|w| w[1].1 < w[0].1));
        }
    }
}

#[test]
fn crank_nicolson_is_second_order() {
    let coarse = eigen_error(16, 8, Scheme::CrankNicolson, 1.0);
    let fine = eigen_error(32, 16, Scheme::CrankNicolson, 1.0);
    let ratio = coarse / fine;
    assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn implicit_euler_is_first_order_in_time() {
    let coarse = eigen_error(256, 32, Scheme::ImplicitEuler, 0.2);
    let fine = eigen_error(256, 64, Scheme::ImplicitEuler, 0.2);
    let ratio = coarse / fine;
    assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
}

#[test]
fn time_dependent_coefficients_are_taken_at_step_times() {
    use kseed_core::model::{CoefficientFn as Coefficients, TabulatedCoefficients};
    let g = DomainGrid::unit_interval(32).unwrap();
    // Drift ramps linearly from 1 at t = 0 to −1 at t = 1.
    let table = TabulatedCoefficients::from_time_samples(
        g,
        vec![
            (0.0, Box::new(|_: &[f64; 2]| ([1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])) as Coefficients),
            (1.0, Box::new(|_: &[f64; 2]| ([-1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]]))),
        ],
    )
    .unwrap();
    let m = DiffusionModel::tabulated(table);
    assert!(!m.is_autonomous());
    let n = 10;
    for (scheme, offset) in [(Scheme::ImplicitEuler, 1.0), (Scheme::CrankNicolson, 0.5)] {
        let out = evolve_final(&m, &g, &SolverConfig::new(n, scheme), &sine(g), 0.0, 1.0).unwrap();
        let mut chained = sine(g);
        for k in 0..n {
            let t = (k as f64 + offset) / n as f64;
            let frozen = DiffusionModel::constant(1, &[1.0 - 2.0 * t], &[vec![1.0]]).unwrap();
            let (s, e) = (k as f64 / n as f64, (k + 1) as f64 / n as f64);
            chained = evolve_final(&frozen, &g, &SolverConfig::new(1, scheme), &chained, s, e).unwrap();
        }
        assert!(out.sub(&chained).sup() <= 1e-10 * chained.sup(), "{scheme:?}");
    }
}
