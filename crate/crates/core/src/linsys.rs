//! Sparse matrices, the discrete Poisson operator and linear solvers.

use std::sync::Arc;

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{EdgeKind, Mesh};
use crate::operators::{BoundaryData, BoundaryValue, OperatorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinSysError {
    #[error("iterative solver stopped after {iterations} iterations at relative residual {residual:e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("no Dirichlet edge: the Poisson matrix is singular")]
    AllNeumann,
    #[error("dimension mismatch: matrix {matrix}, vector {vector}")]
    DimensionMismatch { matrix: usize, vector: usize },
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Row-compressed nonzero pattern with a structural diagonal in every row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsityPattern {
    pub fn new(n: usize, entries: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (r, c) in entries {
            rows[r].push(c);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        SparsityPattern { n, row_ptr, col_idx }
    }

    /// Pattern of a system with `block` unknowns per volume, coupling every
    /// unknown of a volume with every unknown of its edge neighbours.
    pub fn block(mesh: &Mesh, block: usize) -> Self {
        let mut entries = Vec::new();
        for i in 0..mesh.num_volumes() {
            let mut cells = vec![i];
            for &e in mesh.cell_edges(i) {
                if let Some(j) = mesh.edge(e).other(i) {
                    cells.push(j);
                }
            }
            for a in 0..block {
                for &j in &cells {
                    for b in 0..block {
                        entries.push((i * block + a, j * block + b));
                    }
                }
            }
        }
        SparsityPattern::new(mesh.num_volumes() * block, entries)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    fn position(&self, r: usize, c: usize) -> Option<usize> {
        let start = self.row_ptr[r];
        self.row(r).binary_search(&c).ok().map(|k| start + k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseMatrix { pattern, values }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = SparseMatrix::zeros(Arc::new(SparsityPattern::new(n, [])));
        for i in 0..n {
            m.add(i, i, 1.0);
        }
        m
    }

    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let pattern = SparsityPattern::new(n, triplets.iter().map(|&(r, c, _)| (r, c)));
        let mut m = SparseMatrix::zeros(Arc::new(pattern));
        for &(r, c, v) in triplets {
            m.add(r, c, v);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Adds `v` at `(r, c)`; panics if the entry is outside the pattern.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let k = self
            .pattern
            .position(r, c)
            .unwrap_or_else(|| panic!("entry ({r}, {c}) outside the sparsity pattern"));
        self.values[k] += v;
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.position(r, c).map_or(0.0, |k| self.values[k])
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Iterates the stored entries of row `r` as `(column, value)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.pattern.row_ptr[r]..self.pattern.row_ptr[r + 1];
        self.pattern.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|r| self.get(r, r)).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        (0..self.dim()).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol * scale))
    }

    /// Nonpositive off-diagonals and weak row diagonal dominance with
    /// positive diagonal.
    pub fn is_m_matrix_candidate(&self) -> bool {
        (0..self.dim()).all(|r| {
            let mut diag = 0.0;
            let mut off = 0.0;
            for (c, v) in self.row(r) {
                if c == r {
                    diag = v;
                } else if v > 0.0 {
                    return false;
                } else {
                    off -= v;
                }
            }
            diag > 0.0 && diag >= off
        })
    }

    /// Column-compressed copy of the transpose (same arrays read as CSC).
    fn transpose_csc(&self) -> SparseColMat<usize, f64> {
        let p = &self.pattern;
        let symbolic = SymbolicSparseColMat::new_checked(p.n, p.n, p.row_ptr.clone(), None, p.col_idx.clone());
        SparseColMat::new(symbolic, self.values.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinMethod {
    Direct,
    ConjugateGradient,
    BiCgStab,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinSolveConfig {
    pub method: LinMethod,
    pub rel_tol: f64,
    /// Defaults to ten times the dimension.
    pub max_iter: Option<usize>,
}

impl Default for LinSolveConfig {
    fn default() -> Self {
        LinSolveConfig { method: LinMethod::Direct, rel_tol: 1e-12, max_iter: None }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(ax).map(|(bi, ai)| bi - ai).collect()
}

/// Linear solver that caches the symbolic LU analysis of the last pattern.
#[derive(Default)]
pub struct LinearSolver {
    cfg: LinSolveConfig,
    symbolic: Option<(Arc<SparsityPattern>, SymbolicLu<usize>)>,
}

impl LinearSolver {
    pub fn new(cfg: LinSolveConfig) -> Self {
        LinearSolver { cfg, symbolic: None }
    }

    pub fn config(&self) -> &LinSolveConfig {
        &self.cfg
    }

    pub fn solve(&mut self, a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinSysError> {
        if a.dim() != b.len() {
            return Err(LinSysError::DimensionMismatch { matrix: a.dim(), vector: b.len() });
        }
        if b.iter().all(|&v| v == 0.0) {
            return Ok(vec![0.0; b.len()]);
        }
        match self.cfg.method {
            LinMethod::Direct => self.direct(a, b),
            LinMethod::ConjugateGradient => conjugate_gradient(a, b, &self.cfg),
            LinMethod::BiCgStab => bicgstab(a, b, &self.cfg),
        }
    }

    fn direct(&mut self, a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>, LinSysError> {
        let at = a.transpose_csc();
        let reuse = matches!(&self.symbolic, Some((p, _)) if Arc::ptr_eq(p, &a.pattern) || **p == *a.pattern);
        if !reuse {
            let sym = SymbolicLu::try_new(at.symbolic()).map_err(|_| LinSysError::SingularMatrix)?;
            self.symbolic = Some((a.pattern.clone(), sym));
        }
        let sym = self.symbolic.as_ref().map(|(_, s)| s.clone()).ok_or(LinSysError::SingularMatrix)?;
        let lu = Lu::try_new_with_symbolic(sym, at.as_ref()).map_err(|_| LinSysError::SingularMatrix)?;
        let solve = |rhs: &[f64]| -> Vec<f64> {
            let mut m = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
            lu.solve_transpose_in_place(m.as_mut());
            (0..rhs.len()).map(|i| m[(i, 0)]).collect()
        };
        let mut x = solve(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinSysError::SingularMatrix);
        }
        let bn = norm(b);
        // iterative refinement against round-off in badly scaled systems
        for _ in 0..2 {
            let r = residual(a, &x, b);
            if norm(&r) <= self.cfg.rel_tol * bn {
                break;
            }
            let dx = solve(&r);
            x.iter_mut().zip(dx).for_each(|(xi, d)| *xi += d);
        }
        Ok(x)
    }
}

/// One-shot solve without caching.
pub fn solve(a: &SparseMatrix, b: &[f64], cfg: &LinSolveConfig) -> Result<Vec<f64>, LinSysError> {
    LinearSolver::new(*cfg).solve(a, b)
}

fn jacobi(a: &SparseMatrix) -> Result<Vec<f64>, LinSysError> {
    a.diagonal()
        .into_iter()
        .map(|d| if d != 0.0 && d.is_finite() { Ok(1.0 / d) } else { Err(LinSysError::SingularMatrix) })
        .collect()
}

fn conjugate_gradient(a: &SparseMatrix, b: &[f64], cfg: &LinSolveConfig) -> Result<Vec<f64>, LinSysError> {
    let n = b.len();
    let max_iter = cfg.max_iter.unwrap_or(10 * n);
    let dinv = jacobi(a)?;
    let bn = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let rn = norm(&r);
        if rn <= cfg.rel_tol * bn {
            return Ok(x);
        }
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LinSysError::NotConverged { iterations: it, residual: rn / bn });
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        z = r.iter().zip(&dinv).map(|(ri, di)| ri * di).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    let rn = norm(&residual(a, &x, b));
    if rn <= cfg.rel_tol * bn {
        Ok(x)
    } else {
        Err(LinSysError::NotConverged { iterations: max_iter, residual: rn / bn })
    }
}

fn bicgstab(a: &SparseMatrix, b: &[f64], cfg: &LinSolveConfig) -> Result<Vec<f64>, LinSysError> {
    let n = b.len();
    let max_iter = cfg.max_iter.unwrap_or(10 * n);
    let dinv = jacobi(a)?;
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&dinv).map(|(a, d)| a * d).collect() };
    let bn = norm(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 0..max_iter {
        let rn = norm(&r);
        if rn <= cfg.rel_tol * bn {
            return Ok(x);
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(LinSysError::NotConverged { iterations: it, residual: rn / bn });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for k in 0..n {
            p[k] = r[k] + beta * (p[k] - omega * v[k]);
        }
        let y = precond(&p);
        v = a.mul_vec(&y);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        if norm(&s) <= cfg.rel_tol * bn {
            for k in 0..n {
                x[k] += alpha * y[k];
            }
            return Ok(x);
        }
        let zs = precond(&s);
        let t = a.mul_vec(&zs);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for k in 0..n {
            x[k] += alpha * y[k] + omega * zs[k];
            r[k] = s[k] - omega * t[k];
        }
    }
    let rn = norm(&residual(a, &x, b));
    if rn <= cfg.rel_tol * bn {
        Ok(x)
    } else {
        Err(LinSysError::NotConverged { iterations: max_iter, residual: rn / bn })
    }
}

/// Discrete `-eps^2 Delta` with potential boundary data folded into the
/// right side. The caller adds `m_i * (charge)_i` to the returned vector.
pub fn assemble_poisson(
    mesh: &Mesh,
    eps: f64,
    bc: &BoundaryData,
) -> Result<(SparseMatrix, Vec<f64>), LinSysError> {
    if !mesh.has_dirichlet() {
        return Err(LinSysError::AllNeumann);
    }
    let pattern = Arc::new(SparsityPattern::block(mesh, 1));
    let mut a = SparseMatrix::zeros(pattern);
    let mut rhs = vec![0.0; mesh.num_volumes()];
    let e2 = eps * eps;
    for (e, edge) in mesh.edges().iter().enumerate() {
        let i = edge.i;
        let w = e2 * edge.trans;
        match (edge.kind, edge.j) {
            (EdgeKind::Interior, Some(j)) => {
                a.add(i, i, w);
                a.add(j, j, w);
                a.add(i, j, -w);
                a.add(j, i, -w);
            }
            _ => match bc.get(e)? {
                BoundaryValue::Dirichlet(v) => {
                    a.add(i, i, w);
                    rhs[i] += w * v;
                }
                BoundaryValue::Neumann(g) => rhs[i] += e2 * edge.measure * g,
                BoundaryValue::ZeroDifference => {}
            },
        }
    }
    Ok((a, rhs))
}
