//! Admissible orthogonal meshes: cell-centered rectangular grids and
//! rasterized interdigitated comb domains.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("grid resolution must be at least 2x2, got {nx}x{ny}")]
    ZeroResolution { nx: usize, ny: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("mesh is not admissible: {0}")]
    NotAdmissible(String),
    #[error("csv output failed: {0}")]
    Io(String),
}

/// Boundary condition type of the electric potential on an exterior edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialTag {
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Interior,
    Exterior(PotentialTag),
}

/// Physical piece of the boundary an exterior edge lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundaryPart {
    Left,
    Right,
    Bottom,
    Top,
    /// Electrode surface on the x > gap side (biased electrode).
    HighElectrode,
    /// Electrode surface on the x < -gap side (grounded electrode).
    LowElectrode,
    /// Walls of the bulk channel, |x| <= gap.
    Channel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub i: usize,
    /// Second volume for interior edges; always `j > i`.
    pub j: Option<usize>,
    pub measure: f64,
    pub dist: f64,
    pub trans: f64,
    /// Unit normal pointing out of volume `i`.
    pub normal: [f64; 3],
    pub midpoint: [f64; 2],
    pub part: Option<BoundaryPart>,
}

impl Edge {
    pub fn is_interior(&self) -> bool {
        self.kind == EdgeKind::Interior
    }

    /// +1 when the stored orientation points out of `cell`, -1 otherwise.
    pub fn sign(&self, cell: usize) -> f64 {
        if cell == self.i {
            1.0
        } else {
            -1.0
        }
    }

    pub fn other(&self, cell: usize) -> Option<usize> {
        match self.j {
            Some(j) if cell == self.i => Some(j),
            Some(_) => Some(self.i),
            None => None,
        }
    }

    pub fn tag(&self) -> Option<PotentialTag> {
        match self.kind {
            EdgeKind::Exterior(t) => Some(t),
            EdgeKind::Interior => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    UnitSquare,
    ElectrodeComb,
}

/// Potential tags of the four sides of a rectangular grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideTags {
    pub left: PotentialTag,
    pub right: PotentialTag,
    pub bottom: PotentialTag,
    pub top: PotentialTag,
}

impl Default for SideTags {
    fn default() -> Self {
        SideTags {
            left: PotentialTag::Dirichlet,
            right: PotentialTag::Dirichlet,
            bottom: PotentialTag::Neumann,
            top: PotentialTag::Neumann,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometrySpec {
    pub kind: GeometryKind,
    pub nx: usize,
    pub ny: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Teeth per electrode.
    pub teeth: usize,
    pub tooth_width: f64,
    pub tooth_depth: f64,
    /// Half-width of the central bulk channel.
    pub gap_half_width: f64,
    pub sides: SideTags,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec {
            kind: GeometryKind::UnitSquare,
            nx: 16,
            ny: 16,
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            teeth: 0,
            tooth_width: 0.0,
            tooth_depth: 0.0,
            gap_half_width: 0.2,
            sides: SideTags::default(),
        }
    }
}

impl GeometrySpec {
    pub fn unit_square(nx: usize, ny: usize) -> Self {
        GeometrySpec { nx, ny, ..Default::default() }
    }

    /// Comb over [-1,1]x[0,1]: the 20 nm x 10 nm box scaled by L = 10 nm.
    pub fn comb(nx: usize, ny: usize, teeth: usize) -> Self {
        GeometrySpec {
            kind: GeometryKind::ElectrodeComb,
            nx,
            ny,
            x_min: -1.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            teeth,
            tooth_width: 0.125,
            tooth_depth: 0.6,
            gap_half_width: 0.2,
            sides: SideTags::default(),
        }
    }

    fn check_box(&self) -> Result<(), MeshError> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_max <= self.x_min || self.y_max <= self.y_min {
            return Err(MeshError::InvalidGeometry(format!(
                "empty or non-finite box [{}, {}]x[{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.nx < 2 || self.ny < 2 {
            return Err(MeshError::ZeroResolution { nx: self.nx, ny: self.ny });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularityReport {
    pub c0: f64,
    pub worst_volume: usize,
    pub passed: bool,
}

/// Immutable finite-volume mesh.
#[derive(Debug, Clone)]
pub struct Mesh {
    centers: Vec<[f64; 2]>,
    volumes: Vec<f64>,
    diameters: Vec<f64>,
    edges: Vec<Edge>,
    cell_edges: Vec<Vec<usize>>,
    dirichlet_cells: Vec<usize>,
    neumann_cells: Vec<usize>,
    boundary_cells: Vec<usize>,
    domain_measure: f64,
    c0: f64,
}

impl Mesh {
    /// Builds a mesh from raw geometry and checks admissibility.
    pub fn from_parts(
        centers: Vec<[f64; 2]>,
        volumes: Vec<f64>,
        diameters: Vec<f64>,
        edges: Vec<Edge>,
    ) -> Result<Mesh, MeshError> {
        let n = centers.len();
        if n == 0 || volumes.len() != n || diameters.len() != n {
            return Err(MeshError::NotAdmissible("inconsistent volume arrays".into()));
        }
        if let Some(k) = volumes.iter().position(|&v| !(v > 0.0)) {
            return Err(MeshError::NotAdmissible(format!("volume {k} has nonpositive measure")));
        }
        let mut cell_edges = vec![Vec::new(); n];
        for (e, edge) in edges.iter().enumerate() {
            if edge.i >= n || edge.j.is_some_and(|j| j >= n) {
                return Err(MeshError::NotAdmissible(format!("edge {e} references a missing volume")));
            }
            if !(edge.trans > 0.0) || !(edge.measure > 0.0) || !(edge.dist > 0.0) {
                return Err(MeshError::NotAdmissible(format!("edge {e} has nonpositive geometry")));
            }
            let nn = edge.normal;
            if ((nn[0] * nn[0] + nn[1] * nn[1] + nn[2] * nn[2]).sqrt() - 1.0).abs() > 1e-12 {
                return Err(MeshError::NotAdmissible(format!("edge {e} normal is not unit")));
            }
            match (edge.kind, edge.j) {
                (EdgeKind::Interior, Some(j)) => {
                    if j <= edge.i {
                        return Err(MeshError::NotAdmissible(format!("edge {e} not oriented i<j")));
                    }
                    let (a, b) = (centers[edge.i], centers[j]);
                    let d = [b[0] - a[0], b[1] - a[1]];
                    let len = d[0].hypot(d[1]);
                    let cross = d[0] * nn[1] - d[1] * nn[0];
                    let dot = d[0] * nn[0] + d[1] * nn[1];
                    if cross.abs() > 1e-10 * len || dot <= 0.0 || (len - edge.dist).abs() > 1e-10 * len {
                        return Err(MeshError::NotAdmissible(format!(
                            "edge {e} is not orthogonal to its center segment"
                        )));
                    }
                    cell_edges[edge.i].push(e);
                    cell_edges[j].push(e);
                }
                (EdgeKind::Exterior(_), None) => cell_edges[edge.i].push(e),
                _ => {
                    return Err(MeshError::NotAdmissible(format!("edge {e} kind/endpoint mismatch")))
                }
            }
        }
        let mut dirichlet_cells = Vec::new();
        let mut neumann_cells = Vec::new();
        let mut boundary_cells = Vec::new();
        for (i, list) in cell_edges.iter().enumerate() {
            let tags: Vec<PotentialTag> = list.iter().filter_map(|&e| edges[e].tag()).collect();
            if !tags.is_empty() {
                boundary_cells.push(i);
            }
            if tags.contains(&PotentialTag::Dirichlet) {
                dirichlet_cells.push(i);
            }
            if tags.contains(&PotentialTag::Neumann) {
                neumann_cells.push(i);
            }
        }
        let domain_measure = volumes.iter().sum();
        let mut mesh = Mesh {
            centers,
            volumes,
            diameters,
            edges,
            cell_edges,
            dirichlet_cells,
            neumann_cells,
            boundary_cells,
            domain_measure,
            c0: 0.0,
        };
        let report = check_regularity(&mesh);
        if !report.passed {
            return Err(MeshError::NotAdmissible(format!(
                "regularity constant {} at volume {}",
                report.c0, report.worst_volume
            )));
        }
        mesh.c0 = report.c0;
        Ok(mesh)
    }

    /// Cell-centered grid over `[x0,x1]x[y0,y1]`, keeping the cells for which
    /// `keep(ix, iy)` holds. `classify` tags each exterior edge from its
    /// midpoint and outward normal. Accepts `ny == 1` for strip meshes.
    pub fn structured(
        nx: usize,
        ny: usize,
        bbox: [f64; 4],
        keep: impl Fn(usize, usize) -> bool,
        classify: impl Fn([f64; 2], [f64; 3]) -> (PotentialTag, BoundaryPart),
    ) -> Result<Mesh, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::ZeroResolution { nx, ny });
        }
        let [x0, x1, y0, y1] = bbox;
        let hx = (x1 - x0) / nx as f64;
        let hy = (y1 - y0) / ny as f64;
        let mut index = vec![usize::MAX; nx * ny];
        let mut centers = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                if keep(ix, iy) {
                    index[iy * nx + ix] = centers.len();
                    centers.push([x0 + (ix as f64 + 0.5) * hx, y0 + (iy as f64 + 0.5) * hy]);
                }
            }
        }
        if centers.is_empty() {
            return Err(MeshError::DegenerateGeometry("no fluid cells remain".into()));
        }
        let n = centers.len();
        let volumes = vec![hx * hy; n];
        let diameters = vec![hx.hypot(hy); n];
        let lookup = |ix: isize, iy: isize| -> Option<usize> {
            if ix < 0 || iy < 0 || ix >= nx as isize || iy >= ny as isize {
                return None;
            }
            let k = index[iy as usize * nx + ix as usize];
            (k != usize::MAX).then_some(k)
        };
        let mut edges = Vec::new();
        for iy in 0..ny as isize {
            for ix in 0..nx as isize {
                let Some(i) = lookup(ix, iy) else { continue };
                let c = centers[i];
                // left, right, bottom, top
                let faces: [(isize, isize, [f64; 3], f64, f64); 4] = [
                    (-1, 0, [-1.0, 0.0, 0.0], hy, hx),
                    (1, 0, [1.0, 0.0, 0.0], hy, hx),
                    (0, -1, [0.0, -1.0, 0.0], hx, hy),
                    (0, 1, [0.0, 1.0, 0.0], hx, hy),
                ];
                for (dx, dy, normal, measure, spacing) in faces {
                    let mid = [c[0] + normal[0] * 0.5 * hx, c[1] + normal[1] * 0.5 * hy];
                    match lookup(ix + dx, iy + dy) {
                        Some(j) if j > i => edges.push(Edge {
                            kind: EdgeKind::Interior,
                            i,
                            j: Some(j),
                            measure,
                            dist: spacing,
                            trans: measure / spacing,
                            normal,
                            midpoint: mid,
                            part: None,
                        }),
                        Some(_) => {}
                        None => {
                            let (tag, part) = classify(mid, normal);
                            let dist = 0.5 * spacing;
                            edges.push(Edge {
                                kind: EdgeKind::Exterior(tag),
                                i,
                                j: None,
                                measure,
                                dist,
                                trans: measure / dist,
                                normal,
                                midpoint: mid,
                                part: Some(part),
                            });
                        }
                    }
                }
            }
        }
        Mesh::from_parts(centers, volumes, diameters, edges)
    }

    pub fn num_volumes(&self) -> usize {
        self.centers.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    pub fn center(&self, i: usize) -> [f64; 2] {
        self.centers[i]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn volume(&self, i: usize) -> f64 {
        self.volumes[i]
    }

    pub fn diameter(&self, i: usize) -> f64 {
        self.diameters[i]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> &Edge {
        &self.edges[e]
    }

    /// Edge ids adjacent to volume `i`.
    pub fn cell_edges(&self, i: usize) -> &[usize] {
        &self.cell_edges[i]
    }

    pub fn interior_edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(|(_, e)| e.is_interior())
    }

    pub fn exterior_edges(&self) -> impl Iterator<Item = (usize, &Edge)> {
        self.edges.iter().enumerate().filter(|(_, e)| !e.is_interior())
    }

    /// Volumes touching a Dirichlet-potential edge.
    pub fn dirichlet_cells(&self) -> &[usize] {
        &self.dirichlet_cells
    }

    /// Volumes touching a Neumann-potential edge.
    pub fn neumann_cells(&self) -> &[usize] {
        &self.neumann_cells
    }

    /// Volumes with at least one exterior edge.
    pub fn boundary_cells(&self) -> &[usize] {
        &self.boundary_cells
    }

    pub fn domain_measure(&self) -> f64 {
        self.domain_measure
    }

    pub fn regularity(&self) -> f64 {
        self.c0
    }

    pub fn has_dirichlet(&self) -> bool {
        !self.dirichlet_cells.is_empty()
    }

    /// Distance from the center of volume `i` to the line carrying edge `e`.
    pub fn center_to_edge(&self, i: usize, e: usize) -> f64 {
        let edge = &self.edges[e];
        let c = self.centers[i];
        ((edge.midpoint[0] - c[0]) * edge.normal[0] + (edge.midpoint[1] - c[1]) * edge.normal[1]).abs()
    }

    /// Connected components of the volume adjacency graph.
    pub fn components(&self) -> usize {
        let n = self.num_volumes();
        let mut seen = vec![false; n];
        let mut count = 0;
        let mut queue = VecDeque::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for &e in &self.cell_edges[i] {
                    if let Some(j) = self.edges[e].other(i) {
                        if !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        count
    }

    pub fn write_volumes_csv<W: Write>(&self, w: W) -> Result<(), MeshError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| MeshError::Io(e.to_string());
        out.write_record(["index", "x", "y", "volume"]).map_err(io)?;
        for (i, c) in self.centers.iter().enumerate() {
            out.write_record([
                i.to_string(),
                format!("{:.17e}", c[0]),
                format!("{:.17e}", c[1]),
                format!("{:.17e}", self.volumes[i]),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| MeshError::Io(e.to_string()))
    }

    pub fn write_edges_csv<W: Write>(&self, w: W) -> Result<(), MeshError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| MeshError::Io(e.to_string());
        out.write_record(["kind", "i", "j", "measure", "dist", "trans", "tag"]).map_err(io)?;
        for e in &self.edges {
            let (kind, tag) = match e.kind {
                EdgeKind::Interior => ("interior", ""),
                EdgeKind::Exterior(PotentialTag::Dirichlet) => ("exterior", "dirichlet"),
                EdgeKind::Exterior(PotentialTag::Neumann) => ("exterior", "neumann"),
            };
            out.write_record([
                kind.to_string(),
                e.i.to_string(),
                e.j.map(|j| j.to_string()).unwrap_or_default(),
                format!("{:.17e}", e.measure),
                format!("{:.17e}", e.dist),
                format!("{:.17e}", e.trans),
                tag.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| MeshError::Io(e.to_string()))
    }
}

/// Smallest ratio d(x_i, sigma) / diam(V_i) over all volumes and their edges.
pub fn check_regularity(mesh: &Mesh) -> RegularityReport {
    let mut c0 = f64::INFINITY;
    let mut worst = 0;
    for i in 0..mesh.num_volumes() {
        for &e in mesh.cell_edges(i) {
            let r = mesh.center_to_edge(i, e) / mesh.diameter(i);
            if r < c0 {
                c0 = r;
                worst = i;
            }
        }
    }
    if !c0.is_finite() {
        c0 = 0.0;
    }
    RegularityReport { c0, worst_volume: worst, passed: c0 > 0.0 }
}

pub fn build_uniform_grid(spec: &GeometrySpec) -> Result<Mesh, MeshError> {
    if spec.kind != GeometryKind::UnitSquare {
        return Err(MeshError::InvalidGeometry("expected a unit-square geometry".into()));
    }
    spec.check_box()?;
    let sides = spec.sides;
    let (xa, xb, ya, yb) = (spec.x_min, spec.x_max, spec.y_min, spec.y_max);
    Mesh::structured(
        spec.nx,
        spec.ny,
        [xa, xb, ya, yb],
        |_, _| true,
        |_, n| {
            if n[0] < -0.5 {
                (sides.left, BoundaryPart::Left)
            } else if n[0] > 0.5 {
                (sides.right, BoundaryPart::Right)
            } else if n[1] < -0.5 {
                (sides.bottom, BoundaryPart::Bottom)
            } else {
                (sides.top, BoundaryPart::Top)
            }
        },
    )
}

/// Axis-aligned solid rectangle `[x0,x1]x[y0,y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tooth {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Tooth {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] > self.x0 && p[0] < self.x1 && p[1] > self.y0 && p[1] < self.y1
    }
}

/// Electrode teeth of a comb spec: `teeth` per side, evenly spaced between
/// the channel and the box side, alternately hanging from the bottom and top
/// walls. The left comb is the mirror image of the right one with the
/// attachment sides swapped so that the two combs interleave.
pub fn comb_teeth(spec: &GeometrySpec) -> Result<Vec<Tooth>, MeshError> {
    let height = spec.y_max - spec.y_min;
    let gap = spec.gap_half_width;
    if !(gap > 0.0) || gap >= spec.x_max || -gap <= spec.x_min {
        return Err(MeshError::InvalidGeometry(format!(
            "gap half-width {gap} must be positive and inside the box"
        )));
    }
    if spec.teeth == 0 {
        return Ok(Vec::new());
    }
    if !(spec.tooth_width > 0.0) || !(spec.tooth_depth > 0.0) {
        return Err(MeshError::InvalidGeometry("tooth width and depth must be positive".into()));
    }
    if spec.tooth_depth >= height {
        return Err(MeshError::DegenerateGeometry(format!(
            "tooth depth {} spans the full box height {height}",
            spec.tooth_depth
        )));
    }
    let mut out = Vec::with_capacity(2 * spec.teeth);
    for (side, x_edge) in [(1.0, spec.x_max), (-1.0, spec.x_min)] {
        let span = x_edge.abs() - gap;
        let pitch = span / spec.teeth as f64;
        if spec.tooth_width >= pitch {
            return Err(MeshError::DegenerateGeometry(format!(
                "tooth width {} does not fit the pitch {pitch}: teeth overlap each other or the channel",
                spec.tooth_width
            )));
        }
        for k in 0..spec.teeth {
            let xc = side * (gap + (k as f64 + 0.5) * pitch);
            let from_bottom = (k % 2 == 0) == (side > 0.0);
            let (y0, y1) = if from_bottom {
                (spec.y_min, spec.y_min + spec.tooth_depth)
            } else {
                (spec.y_max - spec.tooth_depth, spec.y_max)
            };
            out.push(Tooth { x0: xc - 0.5 * spec.tooth_width, x1: xc + 0.5 * spec.tooth_width, y0, y1 });
        }
    }
    Ok(out)
}

pub fn build_electrode_domain(spec: &GeometrySpec) -> Result<Mesh, MeshError> {
    if spec.kind != GeometryKind::ElectrodeComb {
        return Err(MeshError::InvalidGeometry("expected an electrode-comb geometry".into()));
    }
    spec.check_box()?;
    let teeth = comb_teeth(spec)?;
    let hx = (spec.x_max - spec.x_min) / spec.nx as f64;
    let hy = (spec.y_max - spec.y_min) / spec.ny as f64;
    let center = |ix: usize, iy: usize| {
        [spec.x_min + (ix as f64 + 0.5) * hx, spec.y_min + (iy as f64 + 0.5) * hy]
    };
    let gap = spec.gap_half_width;
    let mesh = Mesh::structured(
        spec.nx,
        spec.ny,
        [spec.x_min, spec.x_max, spec.y_min, spec.y_max],
        |ix, iy| !teeth.iter().any(|t| t.contains(center(ix, iy))),
        |mid, _| {
            if mid[0] > gap {
                (PotentialTag::Dirichlet, BoundaryPart::HighElectrode)
            } else if mid[0] < -gap {
                (PotentialTag::Dirichlet, BoundaryPart::LowElectrode)
            } else {
                (PotentialTag::Neumann, BoundaryPart::Channel)
            }
        },
    )?;
    if mesh.components() != 1 {
        return Err(MeshError::DegenerateGeometry(format!(
            "electrode teeth split the fluid into {} pieces",
            mesh.components()
        )));
    }
    Ok(mesh)
}

pub fn build_mesh(spec: &GeometrySpec) -> Result<Mesh, MeshError> {
    match spec.kind {
        GeometryKind::UnitSquare => build_uniform_grid(spec),
        GeometryKind::ElectrodeComb => build_electrode_domain(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn two_by_two_unit_square() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(2, 2)).unwrap();
        assert_eq!(m.num_volumes(), 4);
        assert!(m.volumes().iter().all(|&v| v == 0.25));
        let interior: Vec<_> = m.interior_edges().collect();
        assert_eq!(interior.len(), 4);
        assert!(interior.iter().all(|(_, e)| e.trans == 1.0));
        assert_eq!(m.exterior_edges().count(), 8);
    }

    #[test]
    fn four_by_two_partition() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(4, 2)).unwrap();
        assert_eq!(m.volumes().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn three_by_three_horizontal_edge() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(3, 3)).unwrap();
        let (_, e) = m.interior_edges().find(|(_, e)| e.normal[0] == 1.0).unwrap();
        assert!(close(e.measure, 1.0 / 3.0, 1e-15));
        assert!(close(e.dist, 1.0 / 3.0, 1e-15));
        assert!(close(e.trans, 1.0, 1e-14));
    }

    #[test]
    fn anisotropic_transmissibility() {
        let mut spec = GeometrySpec::unit_square(4, 2);
        spec.x_max = 2.0;
        spec.y_max = 3.0;
        let m = build_uniform_grid(&spec).unwrap();
        // dx = 0.5, dy = 1.5
        for (_, e) in m.interior_edges() {
            let expect = if e.normal[0] != 0.0 { 1.5 / 0.5 } else { 0.5 / 1.5 };
            assert!(close(e.trans, expect, 1e-14));
        }
    }

    #[test]
    fn zero_resolution() {
        let err = build_uniform_grid(&GeometrySpec::unit_square(1, 4)).unwrap_err();
        assert_eq!(err, MeshError::ZeroResolution { nx: 1, ny: 4 });
    }

    #[test]
    fn regularity_of_square_cells() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(5, 5)).unwrap();
        let r = check_regularity(&m);
        assert!(close(r.c0, 0.5 / 2f64.sqrt(), 1e-14));
        assert!(r.passed);
        let strip = Mesh::structured(2, 1, [0.0, 2.0, 0.0, 1.0], |_, _| true, |_, _| {
            (PotentialTag::Dirichlet, BoundaryPart::Left)
        })
        .unwrap();
        assert!(close(check_regularity(&strip).c0, 0.5 / 2f64.sqrt(), 1e-14));
    }

    #[test]
    fn default_sides_tag_dirichlet_on_x_faces() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(4, 4)).unwrap();
        for (_, e) in m.exterior_edges() {
            let expect = if e.normal[0] != 0.0 { PotentialTag::Dirichlet } else { PotentialTag::Neumann };
            assert_eq!(e.tag(), Some(expect));
        }
        assert_eq!(m.dirichlet_cells().len(), 8);
        assert_eq!(m.neumann_cells().len(), 8);
        assert_eq!(m.boundary_cells().len(), 12);
    }

    #[test]
    fn closed_cells_and_adjacency() {
        let m = build_electrode_domain(&GeometrySpec::comb(32, 16, 2)).unwrap();
        for i in 0..m.num_volumes() {
            let mut s = [0.0; 3];
            for &e in m.cell_edges(i) {
                let edge = m.edge(e);
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk += edge.sign(i) * edge.measure * edge.normal[k];
                }
            }
            assert!(s.iter().all(|v| v.abs() < 1e-14), "volume {i} not closed");
        }
        for (e, edge) in m.interior_edges() {
            let j = edge.j.unwrap();
            assert!(m.cell_edges(edge.i).contains(&e) && m.cell_edges(j).contains(&e));
        }
    }

    #[test]
    fn comb_without_teeth_is_a_rectangle() {
        let mut spec = GeometrySpec::comb(16, 8, 0);
        spec.tooth_depth = 0.0;
        let m = build_electrode_domain(&spec).unwrap();
        assert_eq!(m.num_volumes(), 128);
        for (_, e) in m.exterior_edges() {
            let x = e.midpoint[0];
            let want = if x.abs() > spec.gap_half_width { PotentialTag::Dirichlet } else { PotentialTag::Neumann };
            assert_eq!(e.tag(), Some(want));
        }
        let faces_x: Vec<_> = m.exterior_edges().filter(|(_, e)| e.normal[0] != 0.0).collect();
        assert!(faces_x.iter().all(|(_, e)| e.tag() == Some(PotentialTag::Dirichlet)));
    }

    #[test]
    fn overlapping_teeth_are_degenerate() {
        let mut spec = GeometrySpec::comb(32, 16, 4);
        spec.tooth_width = 0.3;
        assert!(matches!(build_electrode_domain(&spec), Err(MeshError::DegenerateGeometry(_))));
        let mut spec = GeometrySpec::comb(32, 16, 2);
        spec.tooth_depth = 1.0;
        assert!(matches!(build_electrode_domain(&spec), Err(MeshError::DegenerateGeometry(_))));
    }

    #[test]
    fn csv_dump_has_one_row_per_item() {
        let m = build_uniform_grid(&GeometrySpec::unit_square(3, 2)).unwrap();
        let mut v = Vec::new();
        m.write_volumes_csv(&mut v).unwrap();
        assert_eq!(String::from_utf8(v).unwrap().lines().count(), 1 + 6);
        let mut e = Vec::new();
        m.write_edges_csv(&mut e).unwrap();
        assert_eq!(String::from_utf8(e).unwrap().lines().count(), 1 + m.num_edges());
    }
}
