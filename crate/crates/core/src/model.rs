//! Model parameters, solver state and the problem description shared by
//! both time integrators.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linsys::{assemble_poisson, LinSolveConfig, LinSysError, LinearSolver};
use crate::mesh::Mesh;
use crate::operators::{BoundaryData, EdgeFunction, GridFunction, OperatorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("concentration of species {species} is not positive in volume {cell}")]
    NonpositiveConcentration { species: usize, cell: usize },
    #[error("temperature is not positive in volume {cell}")]
    NonpositiveTemperature { cell: usize },
    #[error("Newton stopped after {iterations} iterations with residual {residual:e}")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("positivity line search exhausted {halvings} halvings")]
    PositivityLineSearchFailed { halvings: usize },
    #[error("time step {dt:e} exceeds the temperature limit {limit:e}")]
    TimestepTooLarge { dt: f64, limit: f64 },
    #[error("temperature update lost positivity in volume {cell}")]
    PositivityLost { cell: usize },
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("local stencil with {0} unknowns exceeds the supported size")]
    StencilTooLarge(usize),
    #[error(transparent)]
    Linear(#[from] LinSysError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

/// Dimensionless coefficients of the PNPF system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub valences: Vec<i32>,
    pub viscosities: Vec<f64>,
    /// Ratio of the Debye length to the domain length.
    pub eps: f64,
    pub conductivity: f64,
    pub heat_capacity: f64,
    pub fixed_charge: GridFunction,
}

impl ModelParams {
    pub fn species(&self) -> usize {
        self.valences.len()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), SchemeError> {
        let bad = |m: String| Err(SchemeError::InvalidParams(m));
        if self.valences.is_empty() || self.valences.len() != self.viscosities.len() {
            return bad("valences and viscosities must be nonempty and of equal length".into());
        }
        if self.viscosities.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return bad("viscosities must be positive".into());
        }
        for (name, v) in [("eps", self.eps), ("conductivity", self.conductivity), ("heat_capacity", self.heat_capacity)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.fixed_charge.len() != mesh.num_volumes() {
            return bad(format!(
                "fixed charge has {} entries for {} volumes",
                self.fixed_charge.len(),
                mesh.num_volumes()
            ));
        }
        Ok(())
    }
}

/// Solution at one time level in primitive variables.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    pub conc: Vec<GridFunction>,
    pub potential: GridFunction,
    pub temperature: GridFunction,
}

impl State {
    pub fn check_positive(&self) -> Result<(), SchemeError> {
        for (species, c) in self.conc.iter().enumerate() {
            if let Some(cell) = c.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(SchemeError::NonpositiveConcentration { species, cell });
            }
        }
        if let Some(cell) = self.temperature.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(SchemeError::NonpositiveTemperature { cell });
        }
        Ok(())
    }

    pub fn min_concentration(&self) -> f64 {
        self.conc.iter().map(|c| c.min()).fold(f64::INFINITY, f64::min)
    }
}

/// Solution at one time level in log variables.
#[derive(Debug, Clone, PartialEq)]
pub struct LogState {
    pub t: f64,
    pub eta: Vec<GridFunction>,
    pub psi: GridFunction,
    pub xi: GridFunction,
}

impl From<&State> for LogState {
    fn from(s: &State) -> Self {
        LogState {
            t: s.t,
            eta: s.conc.iter().map(|c| c.map(f64::ln)).collect(),
            psi: s.potential.clone(),
            xi: s.temperature.map(f64::ln),
        }
    }
}

impl From<&LogState> for State {
    fn from(s: &LogState) -> Self {
        State {
            t: s.t,
            conc: s.eta.iter().map(|e| e.map(f64::exp)).collect(),
            potential: s.psi.clone(),
            temperature: s.xi.map(f64::exp),
        }
    }
}

/// Source terms evaluated at the cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sources {
    pub mass: Vec<Vec<f64>>,
    pub heat: Vec<f64>,
    pub charge: Vec<f64>,
}

impl Sources {
    pub fn zeros(species: usize, n: usize) -> Self {
        Sources { mass: vec![vec![0.0; n]; species], heat: vec![0.0; n], charge: vec![0.0; n] }
    }
}

/// Time-dependent source terms of the mass, heat and Poisson equations.
pub trait Forcing: Send + Sync {
    fn sources(&self, mesh: &Mesh, t: f64) -> Sources;
}

/// Time-dependent potential boundary data.
pub trait PotentialBoundary: Send + Sync {
    fn data(&self, mesh: &Mesh, t: f64) -> BoundaryData;
}

impl<F> PotentialBoundary for F
where
    F: Fn(&Mesh, f64) -> BoundaryData + Send + Sync,
{
    fn data(&self, mesh: &Mesh, t: f64) -> BoundaryData {
        self(mesh, t)
    }
}

#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub mesh: &'a Mesh,
    pub params: &'a ModelParams,
    pub boundary: &'a dyn PotentialBoundary,
    pub forcing: Option<&'a dyn Forcing>,
}

impl<'a> Problem<'a> {
    pub fn sources(&self, t: f64) -> Sources {
        match self.forcing {
            Some(f) => f.sources(self.mesh, t),
            None => Sources::zeros(self.params.species(), self.mesh.num_volumes()),
        }
    }

    /// Fixed charge plus the charge source at time `t`.
    pub fn charge(&self, t: f64) -> Vec<f64> {
        let extra = self.sources(t).charge;
        self.params.fixed_charge.iter().zip(extra).map(|(a, b)| a + b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    /// Bound on the max-norm of the residual divided by the cell volumes.
    pub tol: f64,
    /// Also converged once a full Newton update is below this size relative
    /// to the unknowns, which is where the residual reaches roundoff.
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl NewtonConfig {
    /// Whether a full update `delta` of `x` is at roundoff level.
    pub fn negligible_step(&self, delta: &[f64], x: impl Iterator<Item = f64>) -> bool {
        let scale = x.fold(1.0f64, |a, v| a.max(v.abs()));
        delta.iter().all(|d| d.abs() <= self.step_tol * scale)
    }
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-10, step_tol: 1e-13, max_iter: 50, max_halvings: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    pub newton: NewtonConfig,
    pub linear: LinSolveConfig,
    /// Retry with halved steps when the temperature guard fails.
    pub auto_halving: bool,
    pub max_dt_halvings: usize,
    /// Replace a failed second-order step by two first-order half steps.
    pub fallback: bool,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            newton: NewtonConfig::default(),
            linear: LinSolveConfig::default(),
            auto_halving: true,
            max_dt_halvings: 10,
            fallback: true,
        }
    }
}

/// Result of advancing one step of size `dt`, possibly in substeps.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: State,
    /// Per-species edge fluxes, time-averaged over the substeps.
    pub fluxes: Vec<EdgeFunction>,
    /// Sum over substeps of substep length times entropy production.
    pub production: f64,
    pub newton_iterations: usize,
    pub substeps: usize,
    pub fallback_used: bool,
}

impl StepOutcome {
    /// Appends `next`, which starts where `self` ends.
    pub fn chain(self, next: StepOutcome, w_self: f64, w_next: f64) -> StepOutcome {
        let fluxes = self
            .fluxes
            .iter()
            .zip(&next.fluxes)
            .map(|(a, b)| EdgeFunction(a.iter().zip(b.iter()).map(|(x, y)| w_self * x + w_next * y).collect()))
            .collect();
        StepOutcome {
            state: next.state,
            fluxes,
            production: self.production + next.production,
            newton_iterations: self.newton_iterations + next.newton_iterations,
            substeps: self.substeps + next.substeps,
            fallback_used: self.fallback_used || next.fallback_used,
        }
    }
}

/// Solves the Poisson equation for the given concentrations at time `t`.
pub fn solve_potential(
    problem: &Problem,
    conc: &[GridFunction],
    t: f64,
    linear: &LinSolveConfig,
) -> Result<GridFunction, SchemeError> {
    let mesh = problem.mesh;
    let bc = problem.boundary.data(mesh, t);
    let (a, mut rhs) = assemble_poisson(mesh, problem.params.eps, &bc)?;
    let charge = problem.charge(t);
    for i in 0..mesh.num_volumes() {
        let free: f64 = conc.iter().zip(&problem.params.valences).map(|(c, &z)| z as f64 * c[i]).sum();
        rhs[i] += mesh.volume(i) * (free + charge[i]);
    }
    Ok(GridFunction(LinearSolver::new(*linear).solve(&a, &rhs)?))
}

/// Initial state with the potential obtained from the Poisson equation.
pub fn initial_state(
    problem: &Problem,
    conc: Vec<GridFunction>,
    temperature: GridFunction,
    t: f64,
    linear: &LinSolveConfig,
) -> Result<State, SchemeError> {
    problem.params.validate(problem.mesh)?;
    let potential = solve_potential(problem, &conc, t, linear)?;
    let state = State { t, conc, potential, temperature };
    state.check_positive()?;
    Ok(state)
}
