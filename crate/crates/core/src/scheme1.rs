//! First-order semi-implicit scheme: a Newton solve of the coupled
//! concentration/potential block followed by a linear temperature update.

use std::sync::Arc;

use log::warn;

use crate::diagnostics::entropy_production_scheme1;
use crate::linsys::{LinearSolver, SparseMatrix, SparsityPattern};
use crate::mesh::Mesh;
use crate::model::{ModelParams, Problem, SchemeError, StepConfig, StepOutcome, State};
use crate::operators::{
    harmonic_average, tilde_gradient, BoundaryData, BoundaryValue, EdgeFunction, GridFunction,
    VectorGridFunction,
};

/// Linear solvers and sparsity patterns reused across the steps of one
/// trajectory.
pub struct Scheme1Workspace {
    newton: LinearSolver,
    thermal: LinearSolver,
    block: Arc<SparsityPattern>,
    scalar: Arc<SparsityPattern>,
}

impl Scheme1Workspace {
    pub fn new(mesh: &Mesh, species: usize, cfg: &StepConfig) -> Self {
        Scheme1Workspace {
            newton: LinearSolver::new(cfg.linear),
            thermal: LinearSolver::new(cfg.linear),
            block: Arc::new(SparsityPattern::block(mesh, species + 1)),
            scalar: Arc::new(SparsityPattern::block(mesh, 1)),
        }
    }
}

fn check_conc(c: &GridFunction, species: usize) -> Result<(), SchemeError> {
    match c.iter().position(|&v| !(v > 0.0)) {
        Some(cell) => Err(SchemeError::NonpositiveConcentration { species, cell }),
        None => Ok(()),
    }
}

/// Quantities of the flux law that are frozen at the old time level:
/// the harmonic mobility and the difference of `c (T - 1)` on every edge.
struct Frozen {
    mobility: Vec<EdgeFunction>,
    thermal: Vec<EdgeFunction>,
}

impl Frozen {
    fn new(mesh: &Mesh, c_old: &[GridFunction], t_old: &GridFunction) -> Result<Self, SchemeError> {
        let mut mobility = Vec::new();
        let mut thermal = Vec::new();
        for (l, c) in c_old.iter().enumerate() {
            check_conc(c, l)?;
            mobility.push(harmonic_average(mesh, c)?);
            let g: Vec<f64> = c.iter().zip(t_old.iter()).map(|(c, t)| c * (t - 1.0)).collect();
            thermal.push(EdgeFunction(
                mesh.edges().iter().map(|e| e.j.map_or(0.0, |j| g[j] - g[e.i])).collect(),
            ));
        }
        Ok(Frozen { mobility, thermal })
    }
}

/// Signed normal flux of species `l` across edge `e`, oriented out of
/// `edge.i`. Exterior edges carry no flux.
#[allow(clippy::too_many_arguments)]
pub fn mass_flux_edge(
    mesh: &Mesh,
    e: usize,
    l: usize,
    c_old: &GridFunction,
    c_new: &GridFunction,
    psi_new: &GridFunction,
    t_old: &GridFunction,
    params: &ModelParams,
) -> Result<f64, SchemeError> {
    let edge = mesh.edge(e);
    let Some(j) = edge.j else { return Ok(0.0) };
    let i = edge.i;
    for cell in [i, j] {
        if !(c_new[cell] > 0.0 && c_old[cell] > 0.0) {
            return Err(SchemeError::NonpositiveConcentration { species: l, cell });
        }
    }
    let (mi, mj) = (mesh.volume(i), mesh.volume(j));
    let a = (mi + mj) * c_old[i] * c_old[j] / (mi * c_old[j] + mj * c_old[i]);
    let z = params.valences[l] as f64;
    let drift = (c_new[j].ln() - c_new[i].ln()) + z * (psi_new[j] - psi_new[i]);
    let soret = c_old[j] * (t_old[j] - 1.0) - c_old[i] * (t_old[i] - 1.0);
    Ok(-(a * drift + soret) / (params.viscosities[l] * edge.dist))
}

fn fluxes(
    mesh: &Mesh,
    params: &ModelParams,
    frozen: &Frozen,
    conc: &[GridFunction],
    psi: &GridFunction,
) -> Vec<EdgeFunction> {
    (0..params.species())
        .map(|l| {
            let z = params.valences[l] as f64;
            let nu = params.viscosities[l];
            let c = &conc[l];
            EdgeFunction(
                mesh.edges()
                    .iter()
                    .enumerate()
                    .map(|(e, edge)| match edge.j {
                        Some(j) => {
                            let i = edge.i;
                            let drift = c[j].ln() - c[i].ln() + z * (psi[j] - psi[i]);
                            -(frozen.mobility[l][e] * drift + frozen.thermal[l][e]) / (nu * edge.dist)
                        }
                        None => 0.0,
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Data of one (c, psi) Newton solve.
struct CPsiSystem<'a> {
    mesh: &'a Mesh,
    params: &'a ModelParams,
    frozen: Frozen,
    c_old: &'a [GridFunction],
    bc: BoundaryData,
    mass_src: Vec<Vec<f64>>,
    charge: Vec<f64>,
    dt: f64,
}

impl CPsiSystem<'_> {
    fn block(&self) -> usize {
        self.params.species() + 1
    }

    /// Residual of the mass balances and the Poisson equation, each row
    /// multiplied by its cell volume.
    fn residual(&self, conc: &[GridFunction], psi: &GridFunction) -> Result<Vec<f64>, SchemeError> {
        let mesh = self.mesh;
        let p = self.params;
        let m = p.species();
        let b = self.block();
        let e2 = p.eps * p.eps;
        let mut r = vec![0.0; mesh.num_volumes() * b];
        for i in 0..mesh.num_volumes() {
            let mi = mesh.volume(i);
            let mut free = 0.0;
            for l in 0..m {
                r[i * b + l] = mi * (conc[l][i] - self.c_old[l][i]) / self.dt - mi * self.mass_src[l][i];
                free += p.valences[l] as f64 * conc[l][i];
            }
            r[i * b + m] = -mi * (free + self.charge[i]);
        }
        let flux = fluxes(mesh, p, &self.frozen, conc, psi);
        for (e, edge) in mesh.edges().iter().enumerate() {
            let i = edge.i;
            match edge.j {
                Some(j) => {
                    for (l, f) in flux.iter().enumerate() {
                        let w = p.eps * edge.measure * f[e];
                        r[i * b + l] += w;
                        r[j * b + l] -= w;
                    }
                    let w = e2 * edge.trans * (psi[i] - psi[j]);
                    r[i * b + m] += w;
                    r[j * b + m] -= w;
                }
                None => match self.bc.get(e)? {
                    BoundaryValue::Dirichlet(v) => r[i * b + m] += e2 * edge.trans * (psi[i] - v),
                    BoundaryValue::Neumann(g) => r[i * b + m] -= e2 * edge.measure * g,
                    BoundaryValue::ZeroDifference => {}
                },
            }
        }
        Ok(r)
    }

    fn jacobian(&self, conc: &[GridFunction], pattern: &Arc<SparsityPattern>) -> Result<SparseMatrix, SchemeError> {
        let mesh = self.mesh;
        let p = self.params;
        let m = p.species();
        let b = self.block();
        let e2 = p.eps * p.eps;
        let mut jac = SparseMatrix::zeros(pattern.clone());
        for i in 0..mesh.num_volumes() {
            let mi = mesh.volume(i);
            for l in 0..m {
                jac.add(i * b + l, i * b + l, mi / self.dt);
                jac.add(i * b + m, i * b + l, -mi * p.valences[l] as f64);
            }
        }
        for (e, edge) in mesh.edges().iter().enumerate() {
            let i = edge.i;
            let Some(j) = edge.j else {
                if let BoundaryValue::Dirichlet(_) = self.bc.get(e)? {
                    jac.add(i * b + m, i * b + m, e2 * edge.trans);
                }
                continue;
            };
            for l in 0..m {
                let z = p.valences[l] as f64;
                // eps m(sigma) F = -k (ln c_j - ln c_i + z (psi_j - psi_i)) - ...
                let k = p.eps * edge.trans * self.frozen.mobility[l][e] / p.viscosities[l];
                let (ri, rj) = (i * b + l, j * b + l);
                let (ci, cj) = (conc[l][i], conc[l][j]);
                jac.add(ri, j * b + l, -k / cj);
                jac.add(ri, i * b + l, k / ci);
                jac.add(ri, j * b + m, -k * z);
                jac.add(ri, i * b + m, k * z);
                jac.add(rj, j * b + l, k / cj);
                jac.add(rj, i * b + l, -k / ci);
                jac.add(rj, j * b + m, k * z);
                jac.add(rj, i * b + m, -k * z);
            }
            let w = e2 * edge.trans;
            jac.add(i * b + m, i * b + m, w);
            jac.add(i * b + m, j * b + m, -w);
            jac.add(j * b + m, j * b + m, w);
            jac.add(j * b + m, i * b + m, -w);
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

#[derive(Debug, Clone)]
pub struct CPsiSolution {
    pub conc: Vec<GridFunction>,
    pub potential: GridFunction,
    pub iterations: usize,
    pub residual: f64,
}

fn build_system<'a>(problem: &Problem<'a>, state: &'a State, dt: f64) -> Result<CPsiSystem<'a>, SchemeError> {
    let t_new = state.t + dt;
    let src = problem.sources(t_new);
    let charge = problem.params.fixed_charge.iter().zip(&src.charge).map(|(a, b)| a + b).collect();
    Ok(CPsiSystem {
        mesh: problem.mesh,
        params: problem.params,
        frozen: Frozen::new(problem.mesh, &state.conc, &state.temperature)?,
        c_old: &state.conc,
        bc: problem.boundary.data(problem.mesh, t_new),
        mass_src: src.mass,
        charge,
        dt,
    })
}

/// Residual of the (c, psi) block at a trial point, rows multiplied by the
/// cell volumes.
/// Exposed for truncation-error and Jacobian checks.
pub fn cpsi_residual(
    problem: &Problem,
    state: &State,
    dt: f64,
    conc: &[GridFunction],
    psi: &GridFunction,
) -> Result<Vec<f64>, SchemeError> {
    build_system(problem, state, dt)?.residual(conc, psi)
}

/// Analytic Jacobian of [`cpsi_residual`] with unknowns interleaved per
/// volume as `(c^1..c^M, psi)`.
pub fn cpsi_jacobian(
    problem: &Problem,
    state: &State,
    dt: f64,
    conc: &[GridFunction],
) -> Result<SparseMatrix, SchemeError> {
    let pattern = Arc::new(SparsityPattern::block(problem.mesh, problem.params.species() + 1));
    build_system(problem, state, dt)?.jacobian(conc, &pattern)
}

pub fn newton_solve_cpsi(
    problem: &Problem,
    state: &State,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme1Workspace,
) -> Result<CPsiSolution, SchemeError> {
    let sys = build_system(problem, state, dt)?;
    let m = problem.params.species();
    let b = m + 1;
    let n = problem.mesh.num_volumes();
    let mut conc = state.conc.clone();
    let mut psi = state.potential.clone();
    let mut r = sys.residual(&conc, &psi)?;
    let mut norm = sys.scaled_norm(&r);
    for it in 0..=cfg.newton.max_iter {
        if norm <= cfg.newton.tol {
            return Ok(CPsiSolution { conc, potential: psi, iterations: it, residual: norm });
        }
        if it == cfg.newton.max_iter {
            break;
        }
        let jac = sys.jacobian(&conc, &ws.block)?;
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = ws.newton.solve(&jac, &rhs)?;
        let mut alpha = 1.0;
        let mut halvings = 0;
        loop {
            let ok = (0..n).all(|i| (0..m).all(|l| conc[l][i] + alpha * delta[i * b + l] > 0.0));
            if ok {
                break;
            }
            halvings += 1;
            if halvings > cfg.newton.max_halvings {
                return Err(SchemeError::PositivityLineSearchFailed { halvings: cfg.newton.max_halvings });
            }
            alpha *= 0.5;
        }
        for i in 0..n {
            for l in 0..m {
                conc[l][i] += alpha * delta[i * b + l];
            }
            psi[i] += alpha * delta[i * b + m];
        }
        r = sys.residual(&conc, &psi)?;
        norm = sys.scaled_norm(&r);
        let values = conc.iter().flat_map(|c| c.iter().copied()).chain(psi.iter().copied());
        if alpha == 1.0 && cfg.newton.negligible_step(&delta, values) {
            return Ok(CPsiSolution { conc, potential: psi, iterations: it + 1, residual: norm });
        }
    }
    Err(SchemeError::NewtonDiverged { iterations: cfg.newton.max_iter, residual: norm })
}

/// Cell velocities `-(1/nu)[T^n grad(log c) + grad(z psi + T^n)]`. Every
/// field takes its adjacent cell value on exterior edges, so the velocity
/// vanishes in equilibrium next to electrodes too.
pub fn compute_uhat(
    mesh: &Mesh,
    params: &ModelParams,
    conc_new: &[GridFunction],
    psi_new: &GridFunction,
    t_old: &GridFunction,
) -> Result<Vec<VectorGridFunction>, SchemeError> {
    let insulated = BoundaryData::zero_difference(mesh);
    let g_psi = tilde_gradient(mesh, psi_new, &insulated)?;
    let g_t = tilde_gradient(mesh, t_old, &insulated)?;
    let mut out = Vec::with_capacity(params.species());
    for (l, c) in conc_new.iter().enumerate() {
        check_conc(c, l)?;
        let g_log = tilde_gradient(mesh, &c.map(f64::ln), &insulated)?;
        let z = params.valences[l] as f64;
        let nu = params.viscosities[l];
        out.push(VectorGridFunction(
            (0..mesh.num_volumes())
                .map(|i| {
                    let mut u = [0.0; 3];
                    for k in 0..3 {
                        u[k] = -(t_old[i] * g_log[i][k] + z * g_psi[i][k] + g_t[i][k]) / nu;
                    }
                    u
                })
                .collect(),
        ));
    }
    Ok(out)
}

/// Entropy-exchange coefficient of the temperature update.
pub fn compute_p(
    mesh: &Mesh,
    eps: f64,
    conc_old: &[GridFunction],
    conc_new: &[GridFunction],
    fluxes: &[EdgeFunction],
    dt: f64,
) -> Result<GridFunction, SchemeError> {
    let mut p = vec![0.0; mesh.num_volumes()];
    for (l, (c_new, c_old)) in conc_new.iter().zip(conc_old).enumerate() {
        check_conc(c_new, l)?;
        let avg = harmonic_average(mesh, c_new)?;
        for (e, edge) in mesh.edges().iter().enumerate() {
            let Some(j) = edge.j else { continue };
            let w = eps * edge.measure * fluxes[l][e] * avg[e].ln();
            p[edge.i] += w;
            p[j] -= w;
        }
        for i in 0..mesh.num_volumes() {
            p[i] += mesh.volume(i) * (1.0 + c_new[i].ln()) * (c_new[i] - c_old[i]) / dt;
        }
    }
    for (v, m) in p.iter_mut().zip(mesh.volumes()) {
        *v /= m;
    }
    Ok(GridFunction(p))
}

/// Viscous heating `eps sum_l nu c |u|^2`.
pub fn viscous_heating(params: &ModelParams, conc_new: &[GridFunction], uhat: &[VectorGridFunction]) -> GridFunction {
    let n = conc_new[0].len();
    GridFunction(
        (0..n)
            .map(|i| {
                params.eps
                    * (0..params.species())
                        .map(|l| {
                            let u = uhat[l][i];
                            params.viscosities[l] * conc_new[l][i] * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2])
                        })
                        .sum::<f64>()
            })
            .collect(),
    )
}

/// Matrix and right side of the linear temperature update, rows scaled by
/// the cell volumes.
pub fn temperature_system(
    mesh: &Mesh,
    params: &ModelParams,
    t_old: &GridFunction,
    p: &GridFunction,
    theta: &GridFunction,
    heat_src: &[f64],
    dt: f64,
    pattern: &Arc<SparsityPattern>,
) -> Result<(SparseMatrix, Vec<f64>), SchemeError> {
    let p_max = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ct = params.heat_capacity;
    if dt * p_max >= ct {
        return Err(SchemeError::TimestepTooLarge { dt, limit: ct / p_max });
    }
    let k = params.conductivity;
    let mut a = SparseMatrix::zeros(pattern.clone());
    let mut rhs = vec![0.0; mesh.num_volumes()];
    for i in 0..mesh.num_volumes() {
        let mi = mesh.volume(i);
        a.add(i, i, mi * (ct / dt - p[i]));
        rhs[i] = mi * (ct * t_old[i] / dt + theta[i] + heat_src[i]);
    }
    for (_, edge) in mesh.interior_edges() {
        let (i, j) = (edge.i, edge.j.unwrap_or(edge.i));
        let w = k * edge.trans;
        a.add(i, i, w);
        a.add(j, j, w);
        a.add(i, j, -w);
        a.add(j, i, -w);
    }
    Ok((a, rhs))
}

#[allow(clippy::too_many_arguments)]
pub fn solve_temperature(
    mesh: &Mesh,
    params: &ModelParams,
    t_old: &GridFunction,
    p: &GridFunction,
    theta: &GridFunction,
    heat_src: &[f64],
    dt: f64,
    solver: &mut LinearSolver,
) -> Result<GridFunction, SchemeError> {
    let pattern = Arc::new(SparsityPattern::block(mesh, 1));
    solve_temperature_with(mesh, params, t_old, p, theta, heat_src, dt, solver, &pattern)
}

#[allow(clippy::too_many_arguments)]
fn solve_temperature_with(
    mesh: &Mesh,
    params: &ModelParams,
    t_old: &GridFunction,
    p: &GridFunction,
    theta: &GridFunction,
    heat_src: &[f64],
    dt: f64,
    solver: &mut LinearSolver,
    pattern: &Arc<SparsityPattern>,
) -> Result<GridFunction, SchemeError> {
    let (a, rhs) = temperature_system(mesh, params, t_old, p, theta, heat_src, dt, pattern)?;
    let t = solver.solve(&a, &rhs)?;
    if let Some(cell) = t.iter().position(|&v| !(v > 0.0)) {
        return Err(SchemeError::PositivityLost { cell });
    }
    Ok(GridFunction(t))
}

/// One step without retries.
fn single_step(
    problem: &Problem,
    state: &State,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme1Workspace,
) -> Result<StepOutcome, SchemeError> {
    let mesh = problem.mesh;
    let params = problem.params;
    let t_new = state.t + dt;
    let sol = newton_solve_cpsi(problem, state, dt, cfg, ws)?;
    let frozen = Frozen::new(mesh, &state.conc, &state.temperature)?;
    let flux = fluxes(mesh, params, &frozen, &sol.conc, &sol.potential);
    let uhat = compute_uhat(mesh, params, &sol.conc, &sol.potential, &state.temperature)?;
    let p = compute_p(mesh, params.eps, &state.conc, &sol.conc, &flux, dt)?;
    let theta = viscous_heating(params, &sol.conc, &uhat);
    let heat = problem.sources(t_new).heat;
    let temperature = solve_temperature_with(
        mesh,
        params,
        &state.temperature,
        &p,
        &theta,
        &heat,
        dt,
        &mut ws.thermal,
        &ws.scalar,
    )?;
    let production = dt * entropy_production_scheme1(mesh, params, &sol.conc, &uhat, &temperature)?;
    Ok(StepOutcome {
        state: State { t: t_new, conc: sol.conc, potential: sol.potential, temperature },
        fluxes: flux,
        production,
        newton_iterations: sol.iterations,
        substeps: 1,
        fallback_used: false,
    })
}

fn step_recursive(
    problem: &Problem,
    state: &State,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme1Workspace,
    depth: usize,
) -> Result<StepOutcome, SchemeError> {
    match single_step(problem, state, dt, cfg, ws) {
        Err(SchemeError::TimestepTooLarge { dt: bad, limit }) if cfg.auto_halving && depth < cfg.max_dt_halvings => {
            warn!("t = {:.6e}: step {bad:.3e} above temperature limit {limit:.3e}, halving", state.t);
            let first = step_recursive(problem, state, 0.5 * dt, cfg, ws, depth + 1)?;
            let mid = first.state.clone();
            let second = step_recursive(problem, &mid, 0.5 * dt, cfg, ws, depth + 1)?;
            Ok(first.chain(second, 0.5, 0.5))
        }
        other => other,
    }
}

/// Advances `state` by `dt`, halving the step on temperature-guard
/// failures when enabled.
pub fn step_scheme1(
    problem: &Problem,
    state: &State,
    dt: f64,
    cfg: &StepConfig,
    ws: &mut Scheme1Workspace,
) -> Result<StepOutcome, SchemeError> {
    step_recursive(problem, state, dt, cfg, ws, 0)
}
