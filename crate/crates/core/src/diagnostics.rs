//! Run-time measurements: discrete entropy and its split, entropy
//! production, total mass, extrema, mean temperature rise and the ionic
//! current through a vertical section.

use std::io::Write;

use thiserror::Error;

use crate::mesh::Mesh;
use crate::model::{ModelParams, State};
use crate::operators::{inner_product, EdgeFunction, GridFunction, OperatorError, VectorGridFunction};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("state is not positive (species {species:?}, volume {cell})")]
    NonpositiveState { species: Option<usize>, cell: usize },
    #[error("no interior edge lies on the section x = {0}")]
    SectionMissesMesh(f64),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("io failed: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropySplit {
    pub total: f64,
    /// `<C_T (log T + 1), 1>`.
    pub thermal: f64,
    /// `-sum_l <c, log c>`.
    pub ionic: f64,
}

fn check_state(state: &State) -> Result<(), DiagnosticsError> {
    for (l, c) in state.conc.iter().enumerate() {
        if let Some(cell) = c.iter().position(|&v| !(v > 0.0)) {
            return Err(DiagnosticsError::NonpositiveState { species: Some(l), cell });
        }
    }
    if let Some(cell) = state.temperature.iter().position(|&v| !(v > 0.0)) {
        return Err(DiagnosticsError::NonpositiveState { species: None, cell });
    }
    Ok(())
}

pub fn discrete_entropy(mesh: &Mesh, state: &State, params: &ModelParams) -> Result<EntropySplit, DiagnosticsError> {
    check_state(state)?;
    let ct = params.heat_capacity;
    let thermal: f64 = mesh
        .volumes()
        .iter()
        .zip(state.temperature.iter())
        .map(|(m, t)| m * ct * (t.ln() + 1.0))
        .sum();
    let mut ionic = 0.0;
    for c in &state.conc {
        ionic -= inner_product(mesh, c, &c.map(f64::ln))?;
    }
    Ok(EntropySplit { total: thermal + ionic, thermal, ionic })
}

/// The same functional summed cell by cell in one pass.
pub fn discrete_entropy_direct(mesh: &Mesh, state: &State, params: &ModelParams) -> Result<f64, DiagnosticsError> {
    check_state(state)?;
    Ok((0..mesh.num_volumes())
        .map(|i| {
            let s: f64 = state.conc.iter().map(|c| -c[i] * c[i].ln()).sum();
            mesh.volume(i) * (s + params.heat_capacity * (state.temperature[i].ln() + 1.0))
        })
        .sum())
}

/// Lower bound of the entropy growth rate for the first-order scheme.
pub fn entropy_production_scheme1(
    mesh: &Mesh,
    params: &ModelParams,
    conc_new: &[GridFunction],
    uhat: &[VectorGridFunction],
    t_new: &GridFunction,
) -> Result<f64, OperatorError> {
    let mut r = 0.0;
    for (l, (c, u)) in conc_new.iter().zip(uhat).enumerate() {
        let nu = params.viscosities[l];
        for i in 0..mesh.num_volumes() {
            let u2 = u[i][0] * u[i][0] + u[i][1] * u[i][1] + u[i][2] * u[i][2];
            r += params.eps * mesh.volume(i) * nu * c[i] * u2 / t_new[i];
        }
    }
    for (_, edge) in mesh.interior_edges() {
        let (ti, tj) = (t_new[edge.i], t_new[edge.j.unwrap_or(edge.i)]);
        r -= params.conductivity * edge.trans * (tj - ti) * (1.0 / tj - 1.0 / ti);
    }
    Ok(r)
}

/// Lower bound of the entropy growth rate for the second-order scheme.
pub fn entropy_production_scheme2(
    mesh: &Mesh,
    params: &ModelParams,
    half_conc: &[GridFunction],
    ucheck: &[VectorGridFunction],
    r: &GridFunction,
    half_temp: &GridFunction,
) -> f64 {
    let mut out = 0.0;
    for (l, (c, u)) in half_conc.iter().zip(ucheck).enumerate() {
        let nu = params.viscosities[l];
        for i in 0..mesh.num_volumes() {
            let u2 = u[i][0] * u[i][0] + u[i][1] * u[i][1] + u[i][2] * u[i][2];
            out += params.eps * mesh.volume(i) * nu * c[i] * u2 * r[i];
        }
    }
    for (_, edge) in mesh.interior_edges() {
        let (i, j) = (edge.i, edge.j.unwrap_or(edge.i));
        let (mi, mj) = (mesh.volume(i), mesh.volume(j));
        let w = (mi + mj) * half_temp[i] * half_temp[j] / (mi * half_temp[j] + mj * half_temp[i]);
        out += params.conductivity * edge.trans * w * (r[j].ln() - r[i].ln()) * (r[j] - r[i]);
    }
    out
}

pub fn total_mass(mesh: &Mesh, c: &GridFunction) -> f64 {
    mesh.volumes().iter().zip(c.iter()).map(|(m, v)| m * v).sum()
}

/// Net charge flux `sum_l z_l sum m(sigma) F_l sign(n_x)` through the
/// interior faces lying on the line `x = x0`, counted positive along +x.
pub fn section_current(
    mesh: &Mesh,
    fluxes: &[EdgeFunction],
    valences: &[i32],
    x0: f64,
) -> Result<f64, DiagnosticsError> {
    let scale = mesh.centers().iter().fold(1.0f64, |a, c| a.max(c[0].abs()));
    let tol = 1e-9 * scale;
    let mut hit = false;
    let mut current = 0.0;
    for (e, edge) in mesh.interior_edges() {
        if edge.normal[0].abs() < 0.5 || (edge.midpoint[0] - x0).abs() > tol {
            continue;
        }
        hit = true;
        let sign = edge.normal[0].signum();
        for (f, &z) in fluxes.iter().zip(valences) {
            current += z as f64 * edge.measure * f[e] * sign;
        }
    }
    if hit {
        Ok(current)
    } else {
        Err(DiagnosticsError::SectionMissesMesh(x0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub entropy: EntropySplit,
    pub mass: Vec<f64>,
    pub min_c: f64,
    pub min_t: f64,
    pub max_t: f64,
    /// Spatial mean of `T - 1`.
    pub mean_dt: f64,
    /// Entropy production rate of the step that produced this state.
    pub production: f64,
    pub current: f64,
}

impl DiagnosticsRecord {
    pub fn new(
        mesh: &Mesh,
        params: &ModelParams,
        state: &State,
        production: f64,
        current: f64,
    ) -> Result<Self, DiagnosticsError> {
        let entropy = discrete_entropy(mesh, state, params)?;
        let mean_t = total_mass(mesh, &state.temperature) / mesh.domain_measure();
        Ok(DiagnosticsRecord {
            t: state.t,
            entropy,
            mass: state.conc.iter().map(|c| total_mass(mesh, c)).collect(),
            min_c: state.min_concentration(),
            min_t: state.temperature.min(),
            max_t: state.temperature.max(),
            mean_dt: mean_t - 1.0,
            production,
            current,
        })
    }
}

/// Time-series CSV: `t,S,S1,S2,mass_1..mass_M,min_c,min_T,mean_dT,R,I`.
pub struct TimeSeriesWriter<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> TimeSeriesWriter<W> {
    pub fn new(w: W, species: usize) -> Result<Self, DiagnosticsError> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["t", "S", "S1", "S2"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=species).map(|l| format!("mass_{l}")));
        header.extend(["min_c", "min_T", "mean_dT", "R", "I"].iter().map(|s| s.to_string()));
        out.write_record(&header)?;
        Ok(TimeSeriesWriter { out })
    }

    pub fn write(&mut self, r: &DiagnosticsRecord) -> Result<(), DiagnosticsError> {
        let mut row = vec![r.t, r.entropy.total, r.entropy.thermal, r.entropy.ionic];
        row.extend(&r.mass);
        row.extend([r.min_c, r.min_t, r.mean_dt, r.production, r.current]);
        self.out.write_record(row.iter().map(|v| v.to_string()))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), DiagnosticsError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Field snapshot CSV: `index,x,y,c1..cM,psi,T`.
pub fn write_snapshot<W: Write>(mesh: &Mesh, state: &State, w: W) -> Result<(), DiagnosticsError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["index".into(), "x".into(), "y".into()];
    header.extend((1..=state.conc.len()).map(|l| format!("c{l}")));
    header.extend(["psi".to_string(), "T".to_string()]);
    out.write_record(&header)?;
    for i in 0..mesh.num_volumes() {
        let c = mesh.center(i);
        let mut row = vec![i.to_string(), c[0].to_string(), c[1].to_string()];
        row.extend(state.conc.iter().map(|f| f[i].to_string()));
        row.push(state.potential[i].to_string());
        row.push(state.temperature[i].to_string());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_grid, GeometrySpec};

    fn setup() -> (Mesh, ModelParams) {
        let mesh = build_uniform_grid(&GeometrySpec::unit_square(4, 4)).unwrap();
        let params = ModelParams {
            valences: vec![1, -1],
            viscosities: vec![1.0, 1.0],
            eps: 1.0,
            conductivity: 1.0,
            heat_capacity: 1.0,
            fixed_charge: GridFunction::constant(&mesh, 0.0),
        };
        (mesh, params)
    }

    fn uniform(mesh: &Mesh, c: f64, t: f64, species: usize) -> State {
        State {
            t: 0.0,
            conc: vec![GridFunction::constant(mesh, c); species],
            potential: GridFunction::constant(mesh, 0.0),
            temperature: GridFunction::constant(mesh, t),
        }
    }

    #[test]
    fn entropy_examples() {
        let (mesh, params) = setup();
        let s = discrete_entropy(&mesh, &uniform(&mesh, 1.0, 1.0, 2), &params).unwrap();
        assert_eq!((s.ionic, s.thermal, s.total), (0.0, 1.0, 1.0));
        let e = std::f64::consts::E;
        let s = discrete_entropy(&mesh, &uniform(&mesh, 1.0, e, 2), &params).unwrap();
        assert!((s.thermal - 2.0).abs() < 1e-14);
        let s = discrete_entropy(&mesh, &uniform(&mesh, e, 1.0, 1), &params).unwrap();
        assert!((s.ionic + e).abs() < 1e-14);
        let state = uniform(&mesh, 0.0, 1.0, 1);
        assert!(matches!(
            discrete_entropy(&mesh, &state, &params),
            Err(DiagnosticsError::NonpositiveState { .. })
        ));
    }

    #[test]
    fn production_examples() {
        let (mesh, params) = setup();
        let n = mesh.num_volumes();
        let c = vec![GridFunction::constant(&mesh, 0.5); 2];
        let zero = vec![VectorGridFunction(vec![[0.0; 3]; n]); 2];
        let t = GridFunction::constant(&mesh, 1.2);
        assert_eq!(entropy_production_scheme1(&mesh, &params, &c, &zero, &t).unwrap(), 0.0);
        let u = vec![VectorGridFunction(vec![[0.3, -0.1, 0.0]; n]); 2];
        let r = entropy_production_scheme1(&mesh, &params, &c, &u, &t).unwrap();
        let expect = 2.0 * 0.5 * 0.1 / 1.2;
        assert!((r - expect).abs() < 1e-14);
    }

    #[test]
    fn current_through_a_section() {
        let mut spec = GeometrySpec::unit_square(4, 3);
        spec.x_min = -1.0;
        spec.y_max = 1.5;
        let mesh = build_uniform_grid(&spec).unwrap();
        let phi = 0.7;
        let f = EdgeFunction(mesh.edges().iter().map(|e| if e.is_interior() { phi * e.normal[0] } else { 0.0 }).collect());
        let i = section_current(&mesh, &[f.clone()], &[1], 0.0).unwrap();
        assert!((i - phi * 1.5).abs() < 1e-14);
        assert!(matches!(section_current(&mesh, &[f], &[1], 0.25), Err(DiagnosticsError::SectionMissesMesh(_))));
        let zero = EdgeFunction::zeros(&mesh);
        assert_eq!(section_current(&mesh, &[zero.clone(), zero], &[1, -1], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn csv_layouts() {
        let (mesh, params) = setup();
        let state = uniform(&mesh, 0.5, 1.0, 2);
        let rec = DiagnosticsRecord::new(&mesh, &params, &state, 0.0, 0.0).unwrap();
        let mut buf = Vec::new();
        {
            let mut w = TimeSeriesWriter::new(&mut buf, 2).unwrap();
            w.write(&rec).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,S,S1,S2,mass_1,mass_2,min_c,min_T,mean_dT,R,I\n"));
        let mut snap = Vec::new();
        write_snapshot(&mesh, &state, &mut snap).unwrap();
        let text = String::from_utf8(snap).unwrap();
        assert!(text.starts_with("index,x,y,c1,c2,psi,T\n"));
        assert_eq!(text.lines().count(), 1 + mesh.num_volumes());
    }
}
