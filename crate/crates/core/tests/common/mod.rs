//! Helpers shared by the integration tests.
#![allow(dead_code)]

use pnpf::linsys::SparseMatrix;
use pnpf::mesh::{build_mesh, GeometrySpec, Mesh, PotentialTag};
use pnpf::model::{LogState, ModelParams, Problem, State};
use pnpf::operators::{BoundaryData, BoundaryValue, GridFunction};
use pnpf::scheme1::{cpsi_jacobian, cpsi_residual};
use pnpf::scheme2::{cn_jacobian, cn_residual};
use rand::Rng;

pub fn unit_square(nx: usize, ny: usize) -> Mesh {
    build_mesh(&GeometrySpec::unit_square(nx, ny)).unwrap()
}

pub fn comb(nx: usize, ny: usize) -> Mesh {
    build_mesh(&GeometrySpec::comb(nx, ny, 2)).unwrap()
}

pub fn random_grid(mesh: &Mesh, rng: &mut impl Rng, lo: f64, hi: f64) -> GridFunction {
    GridFunction((0..mesh.num_volumes()).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Coefficients away from one so that every term of the residuals matters.
pub fn test_params(mesh: &Mesh, rng: &mut impl Rng) -> ModelParams {
    ModelParams {
        valences: vec![1, -2],
        viscosities: vec![0.7, 1.3],
        eps: 0.4,
        conductivity: 1.7,
        heat_capacity: 2.5,
        fixed_charge: random_grid(mesh, rng, -0.3, 0.3),
    }
}

/// Linear Dirichlet data on Dirichlet sides, constant flux on the others.
pub fn sloped_boundary(mesh: &Mesh, t: f64) -> BoundaryData {
    BoundaryData::from_fn(mesh, |_, e| match e.tag() {
        Some(PotentialTag::Dirichlet) => BoundaryValue::Dirichlet(0.5 * e.midpoint[1] + t),
        _ => BoundaryValue::Neumann(0.3),
    })
}

pub fn random_state(mesh: &Mesh, species: usize, rng: &mut impl Rng, t: f64) -> State {
    State {
        t,
        conc: (0..species).map(|_| random_grid(mesh, rng, 0.5, 1.5)).collect(),
        potential: random_grid(mesh, rng, -0.5, 0.5),
        temperature: random_grid(mesh, rng, 0.8, 1.4),
    }
}

/// Largest entry of `|J - J_fd|` relative to the largest entry of `J`, with
/// `J_fd` built column by column from central differences of `residual`.
pub fn fd_mismatch(jac: &SparseMatrix, x: &[f64], residual: impl Fn(&[f64]) -> Vec<f64>) -> f64 {
    let n = x.len();
    let mut fd = vec![vec![0.0; n]; n];
    let mut xp = x.to_vec();
    for k in 0..n {
        let h = 1e-6 * x[k].abs().max(1.0);
        xp[k] = x[k] + h;
        let rp = residual(&xp);
        xp[k] = x[k] - h;
        let rm = residual(&xp);
        xp[k] = x[k];
        for r in 0..n {
            fd[r][k] = (rp[r] - rm[r]) / (2.0 * h);
        }
    }
    let mut scale: f64 = 0.0;
    let mut err: f64 = 0.0;
    for (r, row) in fd.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let a = jac.get(r, c);
            scale = scale.max(a.abs());
            err = err.max((a - v).abs());
        }
    }
    err / scale
}

fn split_cpsi(x: &[f64], m: usize) -> (Vec<GridFunction>, GridFunction) {
    let b = m + 1;
    let n = x.len() / b;
    let conc = (0..m).map(|l| GridFunction((0..n).map(|i| x[i * b + l]).collect())).collect();
    (conc, GridFunction((0..n).map(|i| x[i * b + m]).collect()))
}

fn pack_log(s: &LogState) -> Vec<f64> {
    let m = s.eta.len();
    let n = s.psi.len();
    let mut x = Vec::with_capacity(n * (m + 2));
    for i in 0..n {
        x.extend(s.eta.iter().map(|e| e[i]));
        x.push(s.psi[i]);
        x.push(s.xi[i]);
    }
    x
}

fn unpack_log(x: &[f64], m: usize, t: f64) -> LogState {
    let b = m + 2;
    let n = x.len() / b;
    LogState {
        t,
        eta: (0..m).map(|l| GridFunction((0..n).map(|i| x[i * b + l]).collect())).collect(),
        psi: GridFunction((0..n).map(|i| x[i * b + m]).collect()),
        xi: GridFunction((0..n).map(|i| x[i * b + m + 1]).collect()),
    }
}

/// FD mismatch of the first-order (c, psi) Jacobian at a random point.
pub fn scheme1_jacobian_mismatch(mesh: &Mesh, rng: &mut impl Rng) -> f64 {
    let params = test_params(mesh, rng);
    let boundary = sloped_boundary;
    let problem = Problem { mesh, params: &params, boundary: &boundary, forcing: None };
    let old = random_state(mesh, 2, rng, 0.0);
    let new = random_state(mesh, 2, rng, 0.05);
    let dt = 0.05;
    let m = 2;
    let mut x = Vec::new();
    for i in 0..mesh.num_volumes() {
        x.extend(new.conc.iter().map(|c| c[i]));
        x.push(new.potential[i]);
    }
    let jac = cpsi_jacobian(&problem, &old, dt, &new.conc).unwrap();
    fd_mismatch(&jac, &x, |y| {
        let (c, p) = split_cpsi(y, m);
        cpsi_residual(&problem, &old, dt, &c, &p).unwrap()
    })
}

/// FD mismatch of the second-order Jacobian at a random point.
pub fn scheme2_jacobian_mismatch(mesh: &Mesh, rng: &mut impl Rng) -> f64 {
    let params = test_params(mesh, rng);
    let boundary = sloped_boundary;
    let problem = Problem { mesh, params: &params, boundary: &boundary, forcing: None };
    let dt = 0.05;
    let old = LogState::from(&random_state(mesh, 2, rng, 0.0));
    let new = LogState::from(&random_state(mesh, 2, rng, dt));
    let jac = cn_jacobian(&problem, &old, &new, dt).unwrap();
    fd_mismatch(&jac, &pack_log(&new), |y| cn_residual(&problem, &old, &unpack_log(y, 2, dt), dt).unwrap())
}
