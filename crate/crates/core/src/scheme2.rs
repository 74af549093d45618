//! Second-order modified Crank-Nicolson scheme in the log variables
//! `eta = log c`, `xi = log T`, solved as one coupled Newton system.
//!
//! The residual of each volume is written once, generically over
//! [`Real`], and differentiated with dual numbers to obtain the exact
//! Jacobian block by block.

use std::sync::Arc;

use log::warn;

use crate::diagnostics::entropy_production_scheme2;
use crate::dual::{Dual, Real};
use crate::linsys::{LinearSolver, SparseMatrix, SparsityPattern};
use crate::mesh::Mesh;
use crate::model::{LogState, ModelParams, Problem, SchemeError, StepConfig, StepOutcome, State};
use crate::operators::{
    harmonic_mean, tilde_gradient, BoundaryData, BoundaryValue, EdgeFunction, GridFunction,
    VectorGridFunction,
};
use crate::par;
use crate::scheme1::{step_scheme1, Scheme1Workspace};

/// Modified midpoint value of the entropy variable `log c`.
#[inline]
pub fn q_value<S: Real>(eta_new: S, eta_old: f64) -> S {
    let c = eta_new.exp();
    let d = c - eta_old.exp();
    eta_new - d / (c * 2.0) - d * d / (c * c * 6.0)
}

/// Modified midpoint value of `1/T`; positive for all inputs.
#[inline]
pub fn r_value<S: Real>(xi_new: S, xi_old: f64) -> S {
    let t = xi_new.exp();
    let d = t - xi_old.exp();
    let t2 = t * t;
    t.recip() + d / (t2 * 2.0) + d * d / (t2 * t * 3.0)
}

pub fn compute_q(eta_old: &GridFunction, eta_new: &GridFunction) -> GridFunction {
    GridFunction(eta_new.iter().zip(eta_old.iter()).map(|(&n, &o)| q_value(n, o)).collect())
}

pub fn compute_r(xi_old: &GridFunction, xi_new: &GridFunction) -> GridFunction {
    GridFunction(xi_new.iter().zip(xi_old.iter()).map(|(&n, &o)| r_value(n, o)).collect())
}

fn half_exp(old: &GridFunction, new: &GridFunction) -> GridFunction {
    GridFunction(old.iter().zip(new.iter()).map(|(a, b)| (0.5 * (a + b)).exp()).collect())
}

/// Flux of species `l` across edge `e`, oriented out of `edge.i`; zero on
/// exterior edges.
pub fn cn_mass_flux_edge(
    mesh: &Mesh,
    e: usize,
    l: usize,
    old: &LogState,
    new: &LogState,
    params: &ModelParams,
) -> f64 {
    let edge = mesh.edge(e);
    let Some(j) = edge.j else { return 0.0 };
    let i = edge.i;
    let (mi, mj) = (mesh.volume(i), mesh.volume(j));
    let half = |f: &GridFunction, g: &GridFunction, k: usize| (0.5 * (f[k] + g[k])).exp();
    let (ci, cj) = (half(&old.eta[l], &new.eta[l], i), half(&old.eta[l], &new.eta[l], j));
    let (ti, tj) = (half(&old.xi, &new.xi, i), half(&old.xi, &new.xi, j));
    let (qi, qj) = (q_value(new.eta[l][i], old.eta[l][i]), q_value(new.eta[l][j], old.eta[l][j]));
    let (pi, pj) = (0.5 * (old.psi[i] + new.psi[i]), 0.5 * (old.psi[j] + new.psi[j]));
    let z = params.valences[l] as f64;
    let w1 = harmonic_mean(mi, mj, ci * ti, cj * tj);
    let w2 = harmonic_mean(mi, mj, ci, cj);
    -(w1 * (qj - qi) + w2 * (z * (pj - pi) + (tj - ti))) / (params.viscosities[l] * edge.dist)
}

/// Auxiliary fields of a completed step.
#[derive(Debug, Clone)]
pub struct CnAuxiliaries {
    pub q: Vec<GridFunction>,
    pub r: GridFunction,
    pub p: GridFunction,
    pub half_conc: Vec<GridFunction>,
    pub half_temp: GridFunction,
    pub psi_half: GridFunction,
    pub ucheck: Vec<VectorGridFunction>,
    pub fluxes: Vec<EdgeFunction>,
}

/// Evaluates the auxiliaries field by field from the operator layer. Cell
/// gradients copy the adjacent value on exterior edges.
pub fn cn_auxiliaries(
    mesh: &Mesh,
    params: &ModelParams,
    old: &LogState,
    new: &LogState,
    dt: f64,
) -> Result<CnAuxiliaries, SchemeError> {
    let m = params.species();
    let insulated = BoundaryData::zero_difference(mesh);
    let q: Vec<GridFunction> = (0..m).map(|l| compute_q(&old.eta[l], &new.eta[l])).collect();
    let r = compute_r(&old.xi, &new.xi);
    let half_conc: Vec<GridFunction> = (0..m).map(|l| half_exp(&old.eta[l], &new.eta[l])).collect();
    let half_temp = half_exp(&old.xi, &new.xi);
    let psi_half = GridFunction(old.psi.iter().zip(new.psi.iter()).map(|(a, b)| 0.5 * (a + b)).collect());
    let fluxes: Vec<EdgeFunction> = (0..m)
        .map(|l| EdgeFunction((0..mesh.num_edges()).map(|e| cn_mass_flux_edge(mesh, e, l, old, new, params)).collect()))
        .collect();
    let mut p = vec![0.0; mesh.num_volumes()];
    for l in 0..m {
        for (e, edge) in mesh.interior_edges() {
            let j = edge.j.unwrap_or(edge.i);
            let w = params.eps * edge.measure * fluxes[l][e] * 0.5 * (q[l][edge.i] + q[l][j]);
            p[edge.i] += w;
            p[j] -= w;
        }
        for (i, pi) in p.iter_mut().enumerate() {
            let dc = new.eta[l][i].exp() - old.eta[l][i].exp();
            *pi += mesh.volume(i) * (1.0 + q[l][i]) * dc / dt;
        }
    }
    for (v, mi) in p.iter_mut().zip(mesh.volumes()) {
        *v /= mi;
    }
    let g_psi = tilde_gradient(mesh, &psi_half, &insulated)?;
    let g_t = tilde_gradient(mesh, &half_temp, &insulated)?;
    let mut ucheck = Vec::with_capacity(m);
    for l in 0..m {
        let g_q = tilde_gradient(mesh, &q[l], &insulated)?;
        let z = params.valences[l] as f64;
        let nu = params.viscosities[l];
        ucheck.push(VectorGridFunction(
            (0..mesh.num_volumes())
                .map(|i| {
                    let mut u = [0.0; 3];
                    for k in 0..3 {
                        u[k] = -(half_temp[i] * g_q[i][k] + z * g_psi[i][k] + g_t[i][k]) / nu;
                    }
                    u
                })
                .collect(),
        ));
    }
    Ok(CnAuxiliaries { q, r, p: GridFunction(p), half_conc, half_temp, psi_half, ucheck, fluxes })
}

/// Volume plus its edge neighbours; slot 0 is the volume itself.
#[derive(Debug, Clone)]
struct Stencil {
    cells: Vec<usize>,
    /// (edge, slot of the neighbour)
    inner: Vec<(usize, usize)>,
    outer: Vec<usize>,
}

fn stencils(mesh: &Mesh) -> Vec<Stencil> {
    (0..mesh.num_volumes())
        .map(|i| {
            let mut st = Stencil { cells: vec![i], inner: Vec::new(), outer: Vec::new() };
            for &e in mesh.cell_edges(i) {
                match mesh.edge(e).other(i) {
                    Some(j) => {
                        st.inner.push((e, st.cells.len()));
                        st.cells.push(j);
                    }
                    None => st.outer.push(e),
                }
            }
            st
        })
        .collect()
}

pub struct Scheme2Workspace {
    solver: LinearSolver,
    pattern: Arc<SparsityPattern>,
    stencils: Vec<Stencil>,
    fallback: Option<Scheme1Workspace>,
}

impl Scheme2Workspace {
    pub fn new(mesh: &Mesh, species: usize, cfg: &StepConfig) -> Self {
        Scheme2Workspace {
            solver: LinearSolver::new(cfg.linear),
            pattern: Arc::new(SparsityPattern::block(mesh, species + 2)),
            stencils: stencils(mesh),
            fallback: None,
        }
    }
}

struct CnSystem<'a> {
    mesh: &'a Mesh,
    params: &'a ModelParams,
    old: &'a LogState,
    bc_new: BoundaryData,
    mass_src: Vec<Vec<f64>>,
    heat_src: Vec<f64>,
    charge: Vec<f64>,
    dt: f64,
    stencils: &'a [Stencil],
}

impl<'a> CnSystem<'a> {
    fn new(problem: &Problem<'a>, old: &'a LogState, dt: f64, stencils: &'a [Stencil]) -> Self {
        let mesh = problem.mesh;
        let mid = problem.sources(old.t + 0.5 * dt);
        CnSystem {
            mesh,
            params: problem.params,
            old,
            bc_new: problem.boundary.data(mesh, old.t + dt),
            mass_src: mid.mass,
            heat_src: mid.heat,
            charge: problem.charge(old.t + dt),
            dt,
            stencils,
        }
    }

    fn block(&self) -> usize {
        self.params.species() + 2
    }

    /// Residual rows of volume `i`, multiplied by its measure, ordered as
    /// (mass balances, Poisson, temperature). `vars` holds the unknowns of
    /// the stencil slots, `block` per slot.
    fn cell_residual<S: Real>(&self, i: usize, vars: &[S], out: &mut [S]) -> Result<(), SchemeError> {
        let mesh = self.mesh;
        let p = self.params;
        let old = self.old;
        let st = &self.stencils[i];
        let m = p.species();
        let b = m + 2;
        let ns = st.cells.len();
        let eps = p.eps;
        let e2 = eps * eps;
        let mi = mesh.volume(i);
        let dt = self.dt;

        let mut q = Vec::with_capacity(ns * m);
        let mut half = Vec::with_capacity(ns * m);
        let mut psih = Vec::with_capacity(ns);
        let mut tm = Vec::with_capacity(ns);
        let mut logr = Vec::with_capacity(ns);
        for (s, &c) in st.cells.iter().enumerate() {
            for l in 0..m {
                let eta = vars[s * b + l];
                let eo = old.eta[l][c];
                q.push(q_value(eta, eo));
                half.push(((eta + eo) * 0.5).exp());
            }
            psih.push((vars[s * b + m] + old.psi[c]) * 0.5);
            let xi = vars[s * b + m + 1];
            let xo = old.xi[c];
            tm.push(((xi + xo) * 0.5).exp());
            logr.push(r_value(xi, xo).ln());
        }
        let c_new: Vec<S> = (0..m).map(|l| vars[l].exp()).collect();
        let c_old: Vec<f64> = (0..m).map(|l| old.eta[l][i].exp()).collect();
        let t_new = vars[m + 1].exp();
        let t_old = old.xi[i].exp();
        let r0 = r_value(vars[m + 1], old.xi[i]);

        // mass balances and the transport part of m_i P
        let mut mass: Vec<S> = (0..m)
            .map(|l| (c_new[l] - c_old[l]) * (mi / dt) - S::cst(mi * self.mass_src[l][i]))
            .collect();
        let mut mp = S::cst(0.0);
        let mut poisson = S::cst(0.0);
        let mut cond = S::cst(0.0);
        // face sums for the cell gradients: sum m(sigma) u_sigma n
        let mut gq = vec![[S::cst(0.0); 2]; m];
        let mut gpsi = [S::cst(0.0); 2];
        let mut gt = [S::cst(0.0); 2];
        for &(e, s) in &st.inner {
            let edge = mesh.edge(e);
            let j = st.cells[s];
            let mj = mesh.volume(j);
            let sign = edge.sign(i);
            let n = [sign * edge.normal[0], sign * edge.normal[1]];
            for l in 0..m {
                let z = p.valences[l] as f64;
                let nu = p.viscosities[l];
                let (a0, aj) = (half[l], half[s * m + l]);
                let w1 = harmonic_mean(mi, mj, a0 * tm[0], aj * tm[s]);
                let w2 = harmonic_mean(mi, mj, a0, aj);
                let drive = (psih[s] - psih[0]) * z + (tm[s] - tm[0]);
                let flux = -(w1 * (q[s * m + l] - q[l]) + w2 * drive) / (nu * edge.dist);
                let wf = flux * (eps * edge.measure);
                mass[l] += wf;
                mp += wf * ((q[l] + q[s * m + l]) * 0.5);
                let face = (q[l] + q[s * m + l]) * (0.5 * edge.measure);
                gq[l][0] += face * n[0];
                gq[l][1] += face * n[1];
            }
            poisson += (vars[m] - vars[s * b + m]) * (e2 * edge.trans);
            let wt = harmonic_mean(mi, mj, tm[0], tm[s]);
            cond += wt * (logr[s] - logr[0]) * (p.conductivity * edge.trans);
            let fp = (psih[0] + psih[s]) * (0.5 * edge.measure);
            let ft = (tm[0] + tm[s]) * (0.5 * edge.measure);
            for k in 0..2 {
                gpsi[k] += fp * n[k];
                gt[k] += ft * n[k];
            }
        }
        for &e in &st.outer {
            let edge = mesh.edge(e);
            let n = [edge.normal[0], edge.normal[1]];
            match self.bc_new.get(e)? {
                BoundaryValue::Dirichlet(v) => poisson += (vars[m] - v) * (e2 * edge.trans),
                BoundaryValue::Neumann(g) => poisson -= S::cst(e2 * edge.measure * g),
                BoundaryValue::ZeroDifference => {}
            }
            for l in 0..m {
                let face = q[l] * edge.measure;
                gq[l][0] += face * n[0];
                gq[l][1] += face * n[1];
            }
            for k in 0..2 {
                gpsi[k] += psih[0] * (edge.measure * n[k]);
                gt[k] += tm[0] * (edge.measure * n[k]);
            }
        }
        let mut free = S::cst(self.charge[i]);
        for l in 0..m {
            free += c_new[l] * p.valences[l] as f64;
        }
        poisson -= free * mi;

        let mut theta = S::cst(0.0);
        for l in 0..m {
            let z = p.valences[l] as f64;
            let nu = p.viscosities[l];
            mp += (q[l] + 1.0) * (c_new[l] - c_old[l]) * (mi / dt);
            let mut u2 = S::cst(0.0);
            for k in 0..2 {
                let u = (tm[0] * gq[l][k] + gpsi[k] * z + gt[k]) / (nu * mi);
                u2 += u * u;
            }
            theta += half[l] * u2 * (eps * nu);
        }
        let temp = (t_new - t_old) * (p.heat_capacity * mi / dt) + cond
            - mp / r0
            - theta * mi
            - S::cst(mi * self.heat_src[i]);

        out[..m].copy_from_slice(&mass);
        out[m] = poisson;
        out[m + 1] = temp;
        Ok(())
    }

    fn gather(&self, i: usize, x: &[f64]) -> Vec<f64> {
        let b = self.block();
        self.stencils[i].cells.iter().flat_map(|&c| x[c * b..(c + 1) * b].iter().copied()).collect()
    }

    fn residual(&self, x: &[f64]) -> Result<Vec<f64>, SchemeError> {
        let b = self.block();
        let rows = par::map_range(self.mesh.num_volumes(), |i| {
            let vars = self.gather(i, x);
            let mut out = vec![0.0; b];
            self.cell_residual(i, &vars, &mut out).map(|_| out)
        });
        let mut r = Vec::with_capacity(x.len());
        for row in rows {
            r.extend(row?);
        }
        Ok(r)
    }

    fn local_jacobian<const N: usize>(&self, i: usize, x: &[f64]) -> Result<Vec<f64>, SchemeError> {
        let b = self.block();
        let vars: Vec<Dual<N>> = self.gather(i, x).into_iter().enumerate().map(|(k, v)| Dual::var(v, k)).collect();
        let mut out = vec![Dual::<N>::constant(0.0); b];
        self.cell_residual(i, &vars, &mut out)?;
        let nv = vars.len();
        Ok(out.iter().flat_map(|d| d.d[..nv].iter().copied()).collect())
    }

    fn local_block(&self, i: usize, x: &[f64]) -> Result<Vec<f64>, SchemeError> {
        let nv = self.stencils[i].cells.len() * self.block();
        match nv {
            0..=20 => self.local_jacobian::<20>(i, x),
            21..=32 => self.local_jacobian::<32>(i, x),
            33..=64 => self.local_jacobian::<64>(i, x),
            _ => Err(SchemeError::StencilTooLarge(nv)),
        }
    }

    fn jacobian(&self, x: &[f64], pattern: &Arc<SparsityPattern>) -> Result<SparseMatrix, SchemeError> {
        let b = self.block();
        let blocks = par::map_range(self.mesh.num_volumes(), |i| self.local_block(i, x));
        let mut jac = SparseMatrix::zeros(pattern.clone());
        for (i, block) in blocks.into_iter().enumerate() {
            let block = block?;
            let cells = &self.stencils[i].cells;
            let nv = cells.len() * b;
            for k in 0..b {
                for (s, &c) in cells.iter().enumerate() {
                    for kk in 0..b {
                        let v = block[k * nv + s * b + kk];
                        if v != 0.0 {
                            jac.add(i * b + k, c * b + kk, v);
                        }
                    }
                }
            }
        }
        Ok(jac)
    }

    fn scaled_norm(&self, r: &[f64]) -> f64 {
        let b = self.block();
        r.iter().enumerate().fold(0.0, |acc, (k, v)| {
            let s = (v / self.mesh.volume(k / b)).abs();
            if s.is_nan() {
                f64::INFINITY
            } else {
                acc.max(s)
            }
        })
    }
}

fn pack(s: &LogState) -> Vec<f64> {
    let m = s.eta.len();
    let n = s.psi.len();
    let mut x = Vec::with_capacity(n * (m + 2));
    for i in 0..n {
        for l in 0..m {
            x.push(s.eta[l][i]);
        }
        x.push(s.psi[i]);
        x.push(s.xi[i]);
    }
    x
}

fn unpack(x: &[f64], m: usize, t: f64) -> LogState {
    let b = m + 2;
    let n = x.len() / b;
    LogState {
        t,
        eta: (0..m).map(|l| GridFunction((0..n).map(|i| x[i * b + l]).collect())).collect(),
        psi: GridFunction((0..n).map(|i| x[i * b + m]).collect()),
        xi: GridFunction((0..n).map(|i| x[i * b + m + 1]).collect()),
    }
}

/// Residual of the coupled system at `new`, rows multiplied by the cell
/// measures, unknowns interleaved per volume as `(eta^1..eta^M, psi, xi)`.
pub fn cn_residual(problem: &Problem, old: &LogState, new: &LogState, dt: f64) -> Result<Vec<f64>, SchemeError> {
    let st = stencils(problem.mesh);
    CnSystem::new(problem, old, dt, &st).residual(&pack(new))
}

/// Jacobian of [`cn_residual`].
pub fn cn_jacobian(problem: &Problem, old: &LogState, new: &LogState, dt: f64) -> Result<SparseMatrix, SchemeError> {
    let st = stencils(problem.mesh);
    let pattern = Arc::new(SparsityPattern::block(problem.mesh, problem.params.species() + 2));
    CnSystem::new(problem, old, dt, &st).jacobian(&pack(new), &pattern)
}

#[derive(Debug, Clone)]
pub struct CnSolution {
    pub state: LogState,
    pub iterations: usize,
    pub residual: f64,
}

/// Damped Newton iteration from `guess`; a step is accepted once it
/// decreases the scaled residual.
pub fn newton_solve_cn(
    problem: &Problem,
    old: &LogState,
    guess: &LogState,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme2Workspace,
) -> Result<CnSolution, SchemeError> {
    let sys = CnSystem::new(problem, old, dt, &ws.stencils);
    let m = problem.params.species();
    let t_new = old.t + dt;
    let mut x = pack(guess);
    let mut r = sys.residual(&x)?;
    let mut norm = sys.scaled_norm(&r);
    for it in 0..=cfg.newton.max_iter {
        if norm <= cfg.newton.tol {
            return Ok(CnSolution { state: unpack(&x, m, t_new), iterations: it, residual: norm });
        }
        if it == cfg.newton.max_iter {
            break;
        }
        let jac = sys.jacobian(&x, &ws.pattern)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = ws.solver.solve(&jac, &rhs)?;
        if cfg.newton.negligible_step(&delta, x.iter().copied()) {
            for (a, d) in x.iter_mut().zip(&delta) {
                *a += d;
            }
            let norm = sys.scaled_norm(&sys.residual(&x)?);
            return Ok(CnSolution { state: unpack(&x, m, t_new), iterations: it + 1, residual: norm });
        }
        let mut alpha = 1.0;
        let mut halvings = 0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + alpha * d).collect();
            let rt = sys.residual(&trial)?;
            let nt = sys.scaled_norm(&rt);
            if nt < (1.0 - 1e-4 * alpha) * norm {
                x = trial;
                r = rt;
                norm = nt;
                break;
            }
            halvings += 1;
            if halvings > cfg.newton.max_halvings {
                return Err(SchemeError::NewtonDiverged { iterations: it + 1, residual: norm });
            }
            alpha *= 0.5;
        }
    }
    Err(SchemeError::NewtonDiverged { iterations: cfg.newton.max_iter, residual: norm })
}

/// Advances `state` by `dt`. `guess` seeds Newton (the previous level is
/// used when absent). If Newton fails and fallback is enabled, two
/// first-order half steps are taken instead.
pub fn step_scheme2(
    problem: &Problem,
    state: &State,
    guess: Option<&LogState>,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme2Workspace,
) -> Result<StepOutcome, SchemeError> {
    state.check_positive()?;
    let old = LogState::from(state);
    let start = guess.cloned().unwrap_or_else(|| old.clone());
    let sol = match newton_solve_cn(problem, &old, &start, dt, cfg, ws) {
        Ok(sol) => sol,
        Err(err @ (SchemeError::NewtonDiverged { .. } | SchemeError::Linear(_))) if cfg.fallback => {
            warn!("t = {:.6e}: second-order step failed ({err}); taking two first-order half steps", state.t);
            let fb = ws
                .fallback
                .get_or_insert_with(|| Scheme1Workspace::new(problem.mesh, problem.params.species(), cfg));
            let first = step_scheme1(problem, state, 0.5 * dt, cfg, fb)?;
            let mid = first.state.clone();
            let second = step_scheme1(problem, &mid, 0.5 * dt, cfg, fb)?;
            let mut out = first.chain(second, 0.5, 0.5);
            out.fallback_used = true;
            return Ok(out);
        }
        Err(err) => return Err(err),
    };
    let mesh = problem.mesh;
    let aux = cn_auxiliaries(mesh, problem.params, &old, &sol.state, dt)?;
    let production =
        dt * entropy_production_scheme2(mesh, problem.params, &aux.half_conc, &aux.ucheck, &aux.r, &aux.half_temp);
    Ok(StepOutcome {
        state: State::from(&sol.state),
        fluxes: aux.fluxes,
        production,
        newton_iterations: sol.iterations,
        substeps: 1,
        fallback_used: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_uniform_grid, BoundaryPart, GeometrySpec, PotentialTag};

    #[test]
    fn q_examples() {
        assert_eq!(q_value(0.7, 0.7), 0.7);
        assert!((q_value(0.0, 2f64.ln()) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn r_examples() {
        assert!((r_value(0.3, 0.3) - (-0.3f64).exp()).abs() < 1e-15);
        assert!((r_value(0.0, 2f64.ln()) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn flux_examples() {
        let mesh = Mesh::structured(2, 1, [0.0, 1.0, 0.0, 0.5], |_, _| true, |_, _| {
            (PotentialTag::Dirichlet, BoundaryPart::Left)
        })
        .unwrap();
        let params = ModelParams {
            valences: vec![1],
            viscosities: vec![1.0],
            eps: 1.0,
            conductivity: 1.0,
            heat_capacity: 1.0,
            fixed_charge: GridFunction::constant(&mesh, 0.0),
        };
        let e = mesh.interior_edges().next().unwrap().0;
        let zero = GridFunction(vec![0.0, 0.0]);
        let delta = 0.3;
        let s = LogState { t: 0.0, eta: vec![zero.clone()], psi: GridFunction(vec![0.0, delta]), xi: zero.clone() };
        let f = cn_mass_flux_edge(&mesh, e, 0, &s, &s, &params);
        assert!((f + delta / mesh.edge(e).dist).abs() < 1e-15);
        let flat = LogState { psi: zero.clone(), ..s.clone() };
        assert_eq!(cn_mass_flux_edge(&mesh, e, 0, &flat, &flat, &params), 0.0);
        // swapping the two volumes flips the flux
        let swapped = LogState { psi: GridFunction(vec![delta, 0.0]), ..s.clone() };
        assert_eq!(cn_mass_flux_edge(&mesh, e, 0, &swapped, &swapped, &params), -f);
    }

    #[test]
    fn kernel_temperature_row_matches_field_auxiliaries() {
        let mesh = build_uniform_grid(&GeometrySpec::unit_square(4, 3)).unwrap();
        let params = ModelParams {
            valences: vec![1, -1],
            viscosities: vec![1.3, 0.7],
            eps: 0.4,
            conductivity: 0.9,
            heat_capacity: 2.0,
            fixed_charge: GridFunction::constant(&mesh, 0.1),
        };
        let bnd = |mesh: &Mesh, t: f64| {
            BoundaryData::from_fn(mesh, |_, e| match e.tag() {
                Some(PotentialTag::Dirichlet) => BoundaryValue::Dirichlet(e.midpoint[1] + t),
                _ => BoundaryValue::Neumann(0.2),
            })
        };
        let problem = Problem { mesh: &mesh, params: &params, boundary: &bnd, forcing: None };
        let f = |a: f64, b: f64| GridFunction::from_fn(&mesh, |p| a * (3.0 * p[0] + b).sin() + 0.2 * p[1]);
        let old = LogState { t: 0.0, eta: vec![f(0.3, 0.1), f(0.2, 1.0)], psi: f(0.5, 2.0), xi: f(0.1, 0.4) };
        let new = LogState { t: 0.1, eta: vec![f(0.25, 0.3), f(0.3, 0.7)], psi: f(0.4, 1.5), xi: f(0.15, 0.2) };
        let dt = 0.1;
        let r = cn_residual(&problem, &old, &new, dt).unwrap();
        let aux = cn_auxiliaries(&mesh, &params, &old, &new, dt).unwrap();
        let heat = crate::operators::EdgeFunction(
            mesh.edges()
                .iter()
                .map(|e| match e.j {
                    Some(j) => harmonic_mean(mesh.volume(e.i), mesh.volume(j), aux.half_temp[e.i], aux.half_temp[j]),
                    None => 0.0,
                })
                .collect(),
        );
        let logr = aux.r.map(f64::ln);
        let lap = crate::operators::weighted_laplacian(&mesh, &heat, &logr, &BoundaryData::zero_difference(&mesh)).unwrap();
        for i in 0..mesh.num_volumes() {
            let mi = mesh.volume(i);
            let theta: f64 = (0..2)
                .map(|l| {
                    let u = aux.ucheck[l][i];
                    params.eps * params.viscosities[l] * aux.half_conc[l][i] * (u[0] * u[0] + u[1] * u[1])
                })
                .sum();
            let dtemp = new.xi[i].exp() - old.xi[i].exp();
            let expect = params.heat_capacity * mi * dtemp / dt + params.conductivity * mi * lap[i]
                - mi * aux.p[i] / aux.r[i]
                - mi * theta;
            assert!((r[i * 4 + 3] - expect).abs() < 1e-12, "volume {i}: {} vs {expect}", r[i * 4 + 3]);
        }
    }
}
