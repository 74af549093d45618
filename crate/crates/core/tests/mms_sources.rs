//! Manufactured sources against a finite-difference substitution oracle,
//! and consistency of both discrete residuals at the exact solution.

use pnpf::mms::{exact_fields, exact_state, mms_boundary, mms_mesh, mms_params, source_terms, MmsForcing, VALENCES};
use pnpf::model::{LogState, Problem};
use pnpf::scheme1::cpsi_residual;
use pnpf::scheme2::cn_residual;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;

/// Sixth-order central difference of `f` at `x`.
fn d1(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let w = [(-3.0, -1.0), (-2.0, 9.0), (-1.0, -45.0), (1.0, 45.0), (2.0, -9.0), (3.0, 1.0)];
    w.iter().map(|&(k, c)| c * f(x + k * H)).sum::<f64>() / (60.0 * H)
}

fn dx(f: impl Fn(f64, f64) -> f64, x: f64, y: f64) -> f64 {
    d1(|s| f(s, y), x)
}

fn dy(f: impl Fn(f64, f64) -> f64, x: f64, y: f64) -> f64 {
    d1(|s| f(x, s), y)
}

/// Sources obtained by substituting the exact fields into the PDE system
/// with every derivative taken numerically.
fn substituted(t: f64, x: f64, y: f64) -> ([f64; 2], f64, f64) {
    let c = |l: usize| move |x: f64, y: f64| exact_fields(t, x, y).c[l];
    let temp = |x: f64, y: f64| exact_fields(t, x, y).temperature;
    let psi = |x: f64, y: f64| exact_fields(t, x, y).potential;
    let flux = |l: usize, x: f64, y: f64| -> [f64; 2] {
        let z = VALENCES[l] as f64;
        let (cv, tv) = (c(l)(x, y), temp(x, y));
        let g = |f: &dyn Fn(f64, f64) -> f64| [dx(f, x, y), dy(f, x, y)];
        let (gc, gt, gp) = (g(&c(l)), g(&temp), g(&psi));
        [
            -(tv * gc[0] + cv * gt[0] + z * cv * gp[0]),
            -(tv * gc[1] + cv * gt[1] + z * cv * gp[1]),
        ]
    };
    let div = |f: &dyn Fn(f64, f64) -> [f64; 2]| dx(|a, b| f(a, b)[0], x, y) + dy(|a, b| f(a, b)[1], x, y);
    let lap = |f: &dyn Fn(f64, f64) -> f64| div(&|a, b| [dx(f, a, b), dy(f, a, b)]);
    let dt = |f: &dyn Fn(f64) -> f64| d1(f, t);

    let mut mass = [0.0; 2];
    let mut heat = dt(&|s| exact_fields(s, x, y).temperature) - lap(&temp);
    let mut net = 0.0;
    for l in 0..2 {
        let ct = dt(&|s| exact_fields(s, x, y).c[l]);
        mass[l] = ct + div(&|a, b| flux(l, a, b));
        let cv = c(l)(x, y);
        let j = flux(l, x, y);
        let transport = div(&|a, b| {
            let j = flux(l, a, b);
            let lc = c(l)(a, b).ln();
            [j[0] * lc, j[1] * lc]
        });
        heat -= temp(x, y) * (transport + (1.0 + cv.ln()) * ct) + (j[0] * j[0] + j[1] * j[1]) / cv;
        net += VALENCES[l] as f64 * cv;
    }
    let charge = -lap(&psi) - net;
    (mass, heat, charge)
}

#[test]
fn sources_match_substitution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let (t, x, y) = (rng.gen_range(0.0..0.1), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let s = source_terms(t, x, y);
        let (mass, heat, charge) = substituted(t, x, y);
        for l in 0..2 {
            assert!((s.mass[l] - mass[l]).abs() < 1e-8, "mass {l} at ({t}, {x}, {y}): {} vs {}", s.mass[l], mass[l]);
        }
        assert!((s.heat - heat).abs() < 1e-8, "heat at ({t}, {x}, {y}): {} vs {heat}", s.heat);
        assert!((s.charge - charge).abs() < 1e-8, "charge at ({t}, {x}, {y}): {} vs {charge}", s.charge);
    }
}

#[test]
fn sources_vanish_where_the_perturbation_does() {
    // phi = 0 along x = 1/2, where only transport of the gradient remains
    let s = source_terms(0.0, 0.5, 0.5);
    assert!(s.charge.abs() < 1e-15);
    let (mass, _, _) = substituted(0.0, 0.5, 0.5);
    for l in 0..2 {
        assert!((s.mass[l] - mass[l]).abs() < 1e-8);
    }
}

/// Max-norm of the residual rows of cells away from the boundary, per unit
/// volume, with the exact solution substituted at levels `0` and `dt`.
fn interior_residual(n: usize, dt: f64, second_order: bool) -> f64 {
    let mesh = mms_mesh(n);
    let params = mms_params(&mesh);
    let boundary = mms_boundary;
    let forcing = MmsForcing;
    let problem = Problem { mesh: &mesh, params: &params, boundary: &boundary, forcing: Some(&forcing) };
    let old = exact_state(&mesh, 0.0);
    let new = exact_state(&mesh, dt);
    let (res, block) = if second_order {
        let r = cn_residual(&problem, &LogState::from(&old), &LogState::from(&new), dt).unwrap();
        (r, 4)
    } else {
        (cpsi_residual(&problem, &old, dt, &new.conc, &new.potential).unwrap(), 3)
    };
    let boundary_cells = mesh.boundary_cells();
    (0..mesh.num_volumes())
        .filter(|i| !boundary_cells.contains(i))
        .flat_map(|i| {
            let m = mesh.volume(i);
            res[i * block..(i + 1) * block].iter().map(move |r| r.abs() / m)
        })
        .fold(0.0, f64::max)
}

#[test]
fn residuals_at_the_exact_solution_are_second_order() {
    for second_order in [false, true] {
        let dt = |n: usize| if second_order { 0.1 / n as f64 } else { 1.0 / (n * n) as f64 };
        let r: Vec<f64> = [16, 32, 64].iter().map(|&n| interior_residual(n, dt(n), second_order)).collect();
        let orders: Vec<f64> = r.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        assert!(
            orders.iter().all(|&o| o > 1.8),
            "second order {second_order}: residuals {r:?}, orders {orders:?}"
        );
    }
}
