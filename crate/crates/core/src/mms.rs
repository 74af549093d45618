//! Manufactured-solution accuracy study on the unit square.
//!
//! All coefficients are one and the valences are `+1, -1`. With
//! `phi = 0.1 exp(-t) cos(pi x) cos(pi y)` and `w = phi + 0.2` the exact
//! fields are `c1 = c2 = T = w`, `psi = phi`. The ionic flux of a species of
//! valence `z` is then `J = -(2 + z) w grad phi`, which gives the sources in
//! closed form below.

use std::f64::consts::PI;
use std::io::Write;

use serde::Serialize;

use crate::mesh::{build_uniform_grid, GeometrySpec, Mesh, PotentialTag};
use crate::model::{Forcing, ModelParams, Problem, SchemeError, Sources, State, StepConfig};
use crate::operators::{BoundaryData, BoundaryValue, GridFunction};
use crate::par;
use crate::stepper::{SchemeKind, Stepper};

pub const VALENCES: [i32; 2] = [1, -1];

/// Exact fields at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactFields {
    pub c: [f64; 2],
    pub temperature: f64,
    pub potential: f64,
}

/// Sources at one point: mass sources, heat source, fixed charge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceValues {
    pub mass: [f64; 2],
    pub heat: f64,
    pub charge: f64,
}

fn phi(t: f64, x: f64, y: f64) -> f64 {
    0.1 * (-t).exp() * (PI * x).cos() * (PI * y).cos()
}

fn grad_phi_sq(t: f64, x: f64, y: f64) -> f64 {
    let a = 0.1 * PI * (-t).exp();
    let (sx, cx) = (PI * x).sin_cos();
    let (sy, cy) = (PI * y).sin_cos();
    a * a * (sx * sx * cy * cy + cx * cx * sy * sy)
}

pub fn exact_fields(t: f64, x: f64, y: f64) -> ExactFields {
    let p = phi(t, x, y);
    ExactFields { c: [p + 0.2; 2], temperature: p + 0.2, potential: p }
}

pub fn source_terms(t: f64, x: f64, y: f64) -> SourceValues {
    let p = phi(t, x, y);
    let g2 = grad_phi_sq(t, x, y);
    let w = p + 0.2;
    let lw = w.ln();
    let mut mass = [0.0; 2];
    let mut heat = -p + 2.0 * PI * PI * p;
    for (l, &z) in VALENCES.iter().enumerate() {
        let a = 2.0 + z as f64;
        let div_j = -a * g2 + 2.0 * PI * PI * a * w * p;
        mass[l] = -p + div_j;
        // transport of log c plus (1 + log c) dc/dt
        let prod = lw * div_j - a * g2 - (1.0 + lw) * p;
        heat -= w * prod + a * a * w * g2;
    }
    SourceValues { mass, heat, charge: 2.0 * PI * PI * p }
}

pub struct MmsForcing;

impl Forcing for MmsForcing {
    fn sources(&self, mesh: &Mesh, t: f64) -> Sources {
        let n = mesh.num_volumes();
        let mut s = Sources::zeros(2, n);
        for (i, p) in mesh.centers().iter().enumerate() {
            let v = source_terms(t, p[0], p[1]);
            s.mass[0][i] = v.mass[0];
            s.mass[1][i] = v.mass[1];
            s.heat[i] = v.heat;
            s.charge[i] = v.charge;
        }
        s
    }
}

/// Exact potential on the Dirichlet sides, homogeneous Neumann elsewhere.
pub fn mms_boundary(mesh: &Mesh, t: f64) -> BoundaryData {
    BoundaryData::from_fn(mesh, |_, e| match e.tag() {
        Some(PotentialTag::Dirichlet) => BoundaryValue::Dirichlet(phi(t, e.midpoint[0], e.midpoint[1])),
        _ => BoundaryValue::Neumann(0.0),
    })
}

pub fn mms_params(mesh: &Mesh) -> ModelParams {
    ModelParams {
        valences: VALENCES.to_vec(),
        viscosities: vec![1.0; 2],
        eps: 1.0,
        conductivity: 1.0,
        heat_capacity: 1.0,
        fixed_charge: GridFunction::constant(mesh, 0.0),
    }
}

pub fn mms_mesh(n: usize) -> Mesh {
    build_uniform_grid(&GeometrySpec::unit_square(n, n)).expect("unit square grid")
}

pub fn exact_state(mesh: &Mesh, t: f64) -> State {
    let f = |k: usize| {
        GridFunction::from_fn(mesh, |p| {
            let e = exact_fields(t, p[0], p[1]);
            match k {
                0 | 1 => e.c[k],
                2 => e.potential,
                _ => e.temperature,
            }
        })
    };
    State { t, conc: vec![f(0), f(1)], potential: f(2), temperature: f(3) }
}

/// Time step rule used by the study for each scheme.
pub fn default_dt(scheme: SchemeKind, h: f64) -> f64 {
    match scheme {
        SchemeKind::I => h * h,
        SchemeKind::II => h / 10.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub dt: f64,
    /// Errors of c1, c2, psi, T.
    pub errors: [f64; 4],
    /// Observed orders against the previous row.
    pub orders: Option<[f64; 4]>,
}

/// Discrete l2 errors of c1, c2, psi, T against the exact fields.
pub fn errors(mesh: &Mesh, state: &State) -> [f64; 4] {
    let ex = exact_state(mesh, state.t);
    let fields = |s: &State| [s.conc[0].clone(), s.conc[1].clone(), s.potential.clone(), s.temperature.clone()];
    let (a, b) = (fields(state), fields(&ex));
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = a[k]
            .iter()
            .zip(b[k].iter())
            .zip(mesh.volumes())
            .map(|((u, v), m)| m * (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
    }
    out
}

/// Integrates the manufactured problem on an `n x n` grid up to `t_end`;
/// `dt` is rounded down so that it divides `t_end`.
pub fn run_level(
    scheme: SchemeKind,
    n: usize,
    dt: f64,
    t_end: f64,
    cfg: &StepConfig,
) -> Result<(f64, [f64; 4]), SchemeError> {
    let mesh = mms_mesh(n);
    let params = mms_params(&mesh);
    let boundary = mms_boundary;
    let forcing = MmsForcing;
    let problem = Problem { mesh: &mesh, params: &params, boundary: &boundary, forcing: Some(&forcing) };
    let steps = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let dt = t_end / steps as f64;
    let mut stepper = Stepper::new(scheme, &mesh, 2, *cfg);
    let mut state = exact_state(&mesh, 0.0);
    for k in 0..steps {
        state = stepper.step(&problem, &state, dt)?.state;
        state.t = (k + 1) as f64 * dt;
    }
    Ok((dt, errors(&mesh, &state)))
}

/// Runs the study on `n x n` grids for each entry of `sizes`; `dt` fixes
/// the step for every level, otherwise [`default_dt`] applies.
pub fn run_convergence_study(
    scheme: SchemeKind,
    sizes: &[usize],
    dt: Option<f64>,
    t_end: f64,
    cfg: &StepConfig,
) -> Result<Vec<ConvergenceRow>, SchemeError> {
    let results = par::map_slice(sizes, |&n| {
        let h = 1.0 / n as f64;
        run_level(scheme, n, dt.unwrap_or_else(|| default_dt(scheme, h)), t_end, cfg).map(|r| (h, r))
    });
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(sizes.len());
    for res in results {
        let (h, (dt, errors)) = res?;
        let orders = rows.last().map(|prev| {
            let mut o = [0.0; 4];
            for k in 0..4 {
                o[k] = (prev.errors[k] / errors[k]).ln() / (prev.h / h).ln();
            }
            o
        });
        rows.push(ConvergenceRow { h, dt, errors, orders });
    }
    Ok(rows)
}

/// Grid sizes 8, 16, 32, ... for `levels` levels.
pub fn level_sizes(levels: usize) -> Vec<usize> {
    (0..levels).map(|k| 8 << k).collect()
}

/// Solver settings used by the study.
pub fn study_config() -> StepConfig {
    StepConfig::default()
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["h", "dt", "err_c1", "err_c2", "err_psi", "err_T", "ord_c1", "ord_c2", "ord_psi", "ord_T"])?;
    for r in rows {
        let mut rec = vec![r.h.to_string(), r.dt.to_string()];
        rec.extend(r.errors.iter().map(|e| e.to_string()));
        match r.orders {
            Some(o) => rec.extend(o.iter().map(|v| v.to_string())),
            None => rec.extend(std::iter::repeat(String::new()).take(4)),
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
