//! Discrete calculus on a [`Mesh`]: edge averages and differences,
//! divergence, weighted Laplacian, cell gradient reconstruction, inner
//! products and norms.
//!
//! Edge quantities are stored once per edge, oriented out of `edge.i`
//! (towards the higher index for interior edges).

use std::ops::{Deref, DerefMut};

use thiserror::Error;

use crate::dual::Real;
use crate::mesh::{Edge, Mesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("harmonic average undefined on edge {edge}")]
    DivisionDegenerate { edge: usize },
    #[error("no boundary data for exterior edge {edge}")]
    MissingBoundaryData { edge: usize },
    #[error("length mismatch: expected {expected}, found {found}")]
    MeshMismatch { expected: usize, found: usize },
}

/// One value per control volume.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridFunction(pub Vec<f64>);

/// One value per edge.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeFunction(pub Vec<f64>);

/// One 3-vector per control volume (third component zero in 2D).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VectorGridFunction(pub Vec<[f64; 3]>);

macro_rules! vec_newtype {
    ($t:ty, $e:ty) => {
        impl Deref for $t {
            type Target = Vec<$e>;
            fn deref(&self) -> &Vec<$e> {
                &self.0
            }
        }
        impl DerefMut for $t {
            fn deref_mut(&mut self) -> &mut Vec<$e> {
                &mut self.0
            }
        }
        impl From<Vec<$e>> for $t {
            fn from(v: Vec<$e>) -> Self {
                Self(v)
            }
        }
    };
}
vec_newtype!(GridFunction, f64);
vec_newtype!(EdgeFunction, f64);
vec_newtype!(VectorGridFunction, [f64; 3]);

impl GridFunction {
    pub fn constant(mesh: &Mesh, v: f64) -> Self {
        GridFunction(vec![v; mesh.num_volumes()])
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        GridFunction(mesh.centers().iter().map(|&c| f(c)).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        GridFunction(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_len(&self, mesh: &Mesh) -> Result<(), OperatorError> {
        check_len(mesh.num_volumes(), self.len())
    }
}

impl EdgeFunction {
    pub fn zeros(mesh: &Mesh) -> Self {
        EdgeFunction(vec![0.0; mesh.num_edges()])
    }

    /// Value seen from `cell`: flips sign when `cell` is the second endpoint.
    pub fn oriented(&self, mesh: &Mesh, cell: usize, edge: usize) -> f64 {
        mesh.edge(edge).sign(cell) * self.0[edge]
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), OperatorError> {
    if expected == found {
        Ok(())
    } else {
        Err(OperatorError::MeshMismatch { expected, found })
    }
}

/// Boundary treatment of one exterior edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryValue {
    Dirichlet(f64),
    /// Prescribed normal derivative; contributes `value * d_sigma` to `D u`.
    Neumann(f64),
    /// Zero-flux or insulated field: `D u = 0` on the edge.
    ZeroDifference,
}

/// Boundary values indexed by edge id; `None` on interior edges.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryData {
    values: Vec<Option<BoundaryValue>>,
}

impl BoundaryData {
    pub fn from_fn(mesh: &Mesh, f: impl Fn(usize, &Edge) -> BoundaryValue) -> Self {
        let values = mesh
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| (!edge.is_interior()).then(|| f(e, edge)))
            .collect();
        BoundaryData { values }
    }

    /// Insulated / zero-flux data on every exterior edge.
    pub fn zero_difference(mesh: &Mesh) -> Self {
        Self::from_fn(mesh, |_, _| BoundaryValue::ZeroDifference)
    }

    /// Data covering no edge at all; every lookup on an exterior edge fails.
    pub fn empty(mesh: &Mesh) -> Self {
        BoundaryData { values: vec![None; mesh.num_edges()] }
    }

    pub fn get(&self, edge: usize) -> Result<BoundaryValue, OperatorError> {
        self.values
            .get(edge)
            .copied()
            .flatten()
            .ok_or(OperatorError::MissingBoundaryData { edge })
    }

    pub fn set(&mut self, edge: usize, v: BoundaryValue) {
        self.values[edge] = Some(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value a field takes on exterior edge `e` given its value `ui` in the
    /// adjacent volume.
    pub fn face_value(&self, e: usize, edge: &Edge, ui: f64) -> Result<f64, OperatorError> {
        Ok(match self.get(e)? {
            BoundaryValue::Dirichlet(v) => v,
            BoundaryValue::Neumann(g) => ui + g * edge.dist,
            BoundaryValue::ZeroDifference => ui,
        })
    }
}

/// Volume-weighted harmonic mean of two cell values.
#[inline]
pub fn harmonic_mean<S: Real>(mi: f64, mj: f64, ui: S, uj: S) -> S {
    ui * uj * (mi + mj) / (uj * mi + ui * mj)
}

pub fn harmonic_average(mesh: &Mesh, u: &GridFunction) -> Result<EdgeFunction, OperatorError> {
    u.check_len(mesh)?;
    let mut out = Vec::with_capacity(mesh.num_edges());
    for (e, edge) in mesh.edges().iter().enumerate() {
        let ui = u[edge.i];
        let v = match edge.j {
            Some(j) => {
                let (mi, mj, uj) = (mesh.volume(edge.i), mesh.volume(j), u[j]);
                let den = mi * uj + mj * ui;
                if den == 0.0 {
                    return Err(OperatorError::DivisionDegenerate { edge: e });
                }
                (mi + mj) * ui * uj / den
            }
            None => ui,
        };
        out.push(v);
    }
    Ok(EdgeFunction(out))
}

/// Oriented edge differences `D u`, seen from `edge.i`.
pub fn edge_difference(
    mesh: &Mesh,
    u: &GridFunction,
    bc: &BoundaryData,
) -> Result<EdgeFunction, OperatorError> {
    u.check_len(mesh)?;
    let mut out = Vec::with_capacity(mesh.num_edges());
    for (e, edge) in mesh.edges().iter().enumerate() {
        let ui = u[edge.i];
        let d = match edge.j {
            Some(j) => u[j] - ui,
            None => match bc.get(e)? {
                BoundaryValue::Dirichlet(v) => v - ui,
                BoundaryValue::Neumann(g) => g * edge.dist,
                BoundaryValue::ZeroDifference => 0.0,
            },
        };
        out.push(d);
    }
    Ok(EdgeFunction(out))
}

/// `(1/m_i) sum_sigma tau_sigma f_sigma D g_{i,sigma}`.
pub fn weighted_laplacian(
    mesh: &Mesh,
    f: &EdgeFunction,
    g: &GridFunction,
    bc: &BoundaryData,
) -> Result<GridFunction, OperatorError> {
    check_len(mesh.num_edges(), f.len())?;
    let dg = edge_difference(mesh, g, bc)?;
    let mut out = vec![0.0; mesh.num_volumes()];
    for (e, edge) in mesh.edges().iter().enumerate() {
        let w = edge.trans * f[e] * dg[e];
        out[edge.i] += w;
        if let Some(j) = edge.j {
            out[j] -= w;
        }
    }
    for (o, m) in out.iter_mut().zip(mesh.volumes()) {
        *o /= m;
    }
    Ok(GridFunction(out))
}

pub fn laplacian(mesh: &Mesh, g: &GridFunction, bc: &BoundaryData) -> Result<GridFunction, OperatorError> {
    weighted_laplacian(mesh, &EdgeFunction(vec![1.0; mesh.num_edges()]), g, bc)
}

/// `(1/m_i) sum_sigma m(sigma) F_{i,sigma}` for fluxes stored per edge.
pub fn divergence(mesh: &Mesh, flux: &EdgeFunction) -> Result<GridFunction, OperatorError> {
    check_len(mesh.num_edges(), flux.len())?;
    let mut out = vec![0.0; mesh.num_volumes()];
    for (e, edge) in mesh.edges().iter().enumerate() {
        let w = edge.measure * flux[e];
        out[edge.i] += w;
        if let Some(j) = edge.j {
            out[j] -= w;
        }
    }
    for (o, m) in out.iter_mut().zip(mesh.volumes()) {
        *o /= m;
    }
    Ok(GridFunction(out))
}

fn gradient_from_faces(mesh: &Mesh, face: &[f64]) -> VectorGridFunction {
    let mut out = vec![[0.0; 3]; mesh.num_volumes()];
    for (e, edge) in mesh.edges().iter().enumerate() {
        let w = edge.measure * face[e];
        for k in 0..3 {
            out[edge.i][k] += w * edge.normal[k];
        }
        if let Some(j) = edge.j {
            for k in 0..3 {
                out[j][k] -= w * edge.normal[k];
            }
        }
    }
    for (o, m) in out.iter_mut().zip(mesh.volumes()) {
        for x in o.iter_mut() {
            *x /= m;
        }
    }
    VectorGridFunction(out)
}

/// Cell gradient `(1/m_i) sum_sigma m(sigma) u_sigma n_{i,sigma}` with the
/// arithmetic mean on interior faces and `bc` on exterior ones.
pub fn tilde_gradient(
    mesh: &Mesh,
    u: &GridFunction,
    bc: &BoundaryData,
) -> Result<VectorGridFunction, OperatorError> {
    u.check_len(mesh)?;
    let mut face = Vec::with_capacity(mesh.num_edges());
    for (e, edge) in mesh.edges().iter().enumerate() {
        face.push(match edge.j {
            Some(j) => 0.5 * (u[edge.i] + u[j]),
            None => bc.face_value(e, edge, u[edge.i])?,
        });
    }
    Ok(gradient_from_faces(mesh, &face))
}

/// Cell gradient with harmonic-average face values and the copy-adjacent
/// rule on exterior edges. Only defined for fields of one strict sign.
pub fn tilde_gradient_harmonic(mesh: &Mesh, u: &GridFunction) -> Result<VectorGridFunction, OperatorError> {
    let face = harmonic_average(mesh, u)?;
    Ok(gradient_from_faces(mesh, &face))
}

pub fn inner_product(mesh: &Mesh, f: &GridFunction, g: &GridFunction) -> Result<f64, OperatorError> {
    f.check_len(mesh)?;
    g.check_len(mesh)?;
    Ok(mesh.volumes().iter().zip(f.iter().zip(g.iter())).map(|(m, (a, b))| m * a * b).sum())
}

/// `sum over interior edges of tau w D a D b`.
pub fn edge_inner_product(
    mesh: &Mesh,
    w: &EdgeFunction,
    a: &GridFunction,
    b: &GridFunction,
) -> Result<f64, OperatorError> {
    check_len(mesh.num_edges(), w.len())?;
    a.check_len(mesh)?;
    b.check_len(mesh)?;
    Ok(mesh
        .interior_edges()
        .map(|(e, edge)| {
            let j = edge.j.unwrap_or(edge.i);
            edge.trans * w[e] * (a[j] - a[edge.i]) * (b[j] - b[edge.i])
        })
        .sum())
}

pub fn l2_norm(mesh: &Mesh, f: &GridFunction) -> Result<f64, OperatorError> {
    Ok(inner_product(mesh, f, f)?.sqrt())
}

pub fn max_norm(f: &GridFunction) -> f64 {
    f.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Discrete H1 seminorm over interior edges.
pub fn grad_l2_norm(mesh: &Mesh, f: &GridFunction) -> Result<f64, OperatorError> {
    Ok(edge_inner_product(mesh, &EdgeFunction(vec![1.0; mesh.num_edges()]), f, f)?.sqrt())
}
