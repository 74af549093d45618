//! Property tests for the discrete operators and the time steppers.

mod common;

use pnpf::diagnostics::{discrete_entropy, discrete_entropy_direct, total_mass};
use pnpf::experiments::{cv_voltage, CvProtocol};
use pnpf::mesh::Mesh;
use pnpf::model::{Problem, StepConfig};
use pnpf::operators::{
    edge_inner_product, harmonic_average, harmonic_mean, inner_product, laplacian, tilde_gradient,
    weighted_laplacian, BoundaryData, GridFunction,
};
use pnpf::scheme2::{q_value, r_value};
use pnpf::stepper::{SchemeKind, Stepper};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mesh_for(kind: u8, nx: usize, ny: usize) -> Mesh {
    if kind == 0 {
        common::unit_square(nx, ny)
    } else {
        common::comb(16, 8)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summation_by_parts(kind in 0u8..2, nx in 2usize..12, ny in 2usize..12, seed: u64) {
        let mesh = mesh_for(kind, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = BoundaryData::zero_difference(&mesh);
        let f1 = common::random_grid(&mesh, &mut rng, -1.0, 1.0);
        let f2 = common::random_grid(&mesh, &mut rng, -1.0, 1.0);
        let w = harmonic_average(&mesh, &common::random_grid(&mesh, &mut rng, 0.1, 3.0)).unwrap();
        let lhs = inner_product(&mesh, &f1, &weighted_laplacian(&mesh, &w, &f2, &zero).unwrap()).unwrap();
        let rhs = -edge_inner_product(&mesh, &w, &f1, &f2).unwrap();
        let scale = (edge_inner_product(&mesh, &w, &f1, &f1).unwrap()
            * edge_inner_product(&mesh, &w, &f2, &f2).unwrap()).sqrt();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    #[test]
    fn laplacian_is_symmetric_and_conservative(kind in 0u8..2, nx in 2usize..12, ny in 2usize..12, seed: u64) {
        let mesh = mesh_for(kind, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero = BoundaryData::zero_difference(&mesh);
        let a = common::random_grid(&mesh, &mut rng, -1.0, 1.0);
        let b = common::random_grid(&mesh, &mut rng, -1.0, 1.0);
        let la = laplacian(&mesh, &a, &zero).unwrap();
        let lb = laplacian(&mesh, &b, &zero).unwrap();
        let ab = inner_product(&mesh, &la, &b).unwrap();
        let ba = inner_product(&mesh, &a, &lb).unwrap();
        let scale: f64 = la.iter().zip(mesh.volumes()).map(|(v, m)| (v * m).abs()).sum();
        prop_assert!((ab - ba).abs() <= 1e-12 * scale);
        let total = inner_product(&mesh, &la, &GridFunction::constant(&mesh, 1.0)).unwrap();
        prop_assert!(total.abs() <= 1e-12 * scale);
    }

    #[test]
    fn constants_have_no_gradient(kind in 0u8..2, nx in 2usize..12, ny in 2usize..12, v in -5.0f64..5.0) {
        let mesh = mesh_for(kind, nx, ny);
        let zero = BoundaryData::zero_difference(&mesh);
        let c = GridFunction::constant(&mesh, v);
        let g = tilde_gradient(&mesh, &c, &zero).unwrap();
        for gi in g.iter() {
            prop_assert!(gi.iter().all(|x| x.abs() <= 1e-11 * (1.0 + v.abs())));
        }
        let l = laplacian(&mesh, &c, &zero).unwrap();
        prop_assert!(l.iter().all(|x| x.abs() <= 1e-11 * (1.0 + v.abs())));
    }

    #[test]
    fn harmonic_mean_is_bounded_and_monotone(
        mi in 0.01f64..2.0, mj in 0.01f64..2.0, a in 0.01f64..10.0, b in 0.01f64..10.0, bump in 0.0f64..1.0,
    ) {
        let h: f64 = harmonic_mean(mi, mj, a, b);
        let tol = 1e-14 * a.max(b);
        prop_assert!(h >= a.min(b) - tol && h <= a.max(b) + tol);
        let up: f64 = harmonic_mean(mi, mj, a + bump, b);
        prop_assert!(up >= h - tol);
        let up: f64 = harmonic_mean(mi, mj, a, b + bump);
        prop_assert!(up >= h - tol);
    }

    // away from the diagonal, where plain f64 resolves both sides
    #[test]
    fn modified_midpoint_inequalities(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        prop_assume!((x - y).abs() > 1e-2);
        let q: f64 = q_value(y, x);
        prop_assert!((q + 1.0) * (y.exp() - x.exp()) >= y * y.exp() - x * x.exp());
        let r: f64 = r_value(y, x);
        prop_assert!(r > 0.0);
        prop_assert!(y - x >= r * (y.exp() - x.exp()));
    }

    #[test]
    fn r_is_positive_everywhere(x in -30.0f64..30.0, y in -30.0f64..30.0) {
        let r: f64 = r_value(y, x);
        prop_assert!(r > 0.0);
    }

    #[test]
    fn triangle_wave_stays_in_range(nu in 0.001f64..1.0, v_max in 0.1f64..4.0, t in 0.0f64..1e4) {
        let p = CvProtocol { scan_rate: nu, v_max, cycles: 1 };
        let v = cv_voltage(t, &p);
        prop_assert!(v >= -1e-9 * v_max && v <= v_max * (1.0 + 1e-9));
        let t0 = p.half_period();
        prop_assert!((cv_voltage(t + 2.0 * t0, &p) - v).abs() <= 1e-9 * v_max);
        prop_assert!((cv_voltage(2.0 * t0 - t.min(2.0 * t0), &p) - cv_voltage(t.min(2.0 * t0), &p)).abs() <= 1e-9 * v_max);
    }

    #[test]
    fn entropy_split_adds_up(kind in 0u8..2, nx in 2usize..10, ny in 2usize..10, seed: u64) {
        let mesh = mesh_for(kind, nx, ny);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = common::test_params(&mesh, &mut rng);
        let state = common::random_state(&mesh, 2, &mut rng, 0.0);
        let split = discrete_entropy(&mesh, &state, &params).unwrap();
        let direct = discrete_entropy_direct(&mesh, &state, &params).unwrap();
        prop_assert!((split.thermal + split.ionic - direct).abs() <= 1e-12 * direct.abs().max(1.0));
        prop_assert!((split.total - direct).abs() <= 1e-12 * direct.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn steps_conserve_mass_and_produce_entropy(scheme in 1u8..3, seed: u64, dt in 0.005f64..0.1) {
        let mesh = common::unit_square(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = common::test_params(&mesh, &mut rng);
        let boundary = common::sloped_boundary;
        let problem = Problem { mesh: &mesh, params: &params, boundary: &boundary, forcing: None };
        let state = common::random_state(&mesh, 2, &mut rng, 0.0);
        let kind = SchemeKind::from_number(scheme).unwrap();
        let mut stepper = Stepper::new(kind, &mesh, 2, StepConfig::default());
        let out = stepper.step(&problem, &state, dt).unwrap();
        let new = &out.state;
        for (a, b) in state.conc.iter().zip(&new.conc) {
            let (ma, mb) = (total_mass(&mesh, a), total_mass(&mesh, b));
            prop_assert!((ma - mb).abs() <= 1e-12 * ma);
        }
        prop_assert!(new.check_positive().is_ok());
        prop_assert!(out.production >= 0.0);
        let s0 = discrete_entropy(&mesh, &state, &params).unwrap().total;
        let s1 = discrete_entropy(&mesh, new, &params).unwrap().total;
        prop_assert!(s1 - s0 >= out.production - 1e-8 * s0.abs());
    }
}
