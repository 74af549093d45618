//! Uniform driver over the two time integrators.

use serde::{Deserialize, Serialize};

use crate::mesh::Mesh;
use crate::model::{LogState, Problem, SchemeError, StepConfig, StepOutcome, State};
use crate::operators::GridFunction;
use crate::scheme1::{step_scheme1, Scheme1Workspace};
use crate::scheme2::{step_scheme2, Scheme2Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    I,
    II,
}

impl SchemeKind {
    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(SchemeKind::I),
            2 => Some(SchemeKind::II),
            _ => None,
        }
    }

    /// Formal order in time.
    pub fn time_order(self) -> u32 {
        match self {
            SchemeKind::I => 1,
            SchemeKind::II => 2,
        }
    }
}

enum Workspace {
    I(Scheme1Workspace),
    II(Box<Scheme2Workspace>),
}

/// Owns the solver workspaces of one trajectory. For the second-order
/// scheme it also keeps the previous level to extrapolate Newton guesses.
pub struct Stepper {
    kind: SchemeKind,
    cfg: StepConfig,
    ws: Workspace,
    prev: Option<LogState>,
}

fn extrapolate(prev: &LogState, cur: &LogState, t: f64) -> LogState {
    let w = (t - cur.t) / (cur.t - prev.t);
    let lin = |a: &GridFunction, b: &GridFunction| {
        GridFunction(a.iter().zip(b.iter()).map(|(p, c)| c + w * (c - p)).collect())
    };
    LogState {
        t,
        eta: prev.eta.iter().zip(&cur.eta).map(|(p, c)| lin(p, c)).collect(),
        psi: lin(&prev.psi, &cur.psi),
        xi: lin(&prev.xi, &cur.xi),
    }
}

impl Stepper {
    pub fn new(kind: SchemeKind, mesh: &Mesh, species: usize, cfg: StepConfig) -> Self {
        let ws = match kind {
            SchemeKind::I => Workspace::I(Scheme1Workspace::new(mesh, species, &cfg)),
            SchemeKind::II => Workspace::II(Box::new(Scheme2Workspace::new(mesh, species, &cfg))),
        };
        Stepper { kind, cfg, ws, prev: None }
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn config(&self) -> &StepConfig {
        &self.cfg
    }

    /// Forgets the history used for extrapolation.
    pub fn reset(&mut self) {
        self.prev = None;
    }

    pub fn step(&mut self, problem: &Problem, state: &State, dt: f64) -> Result<StepOutcome, SchemeError> {
        match &mut self.ws {
            Workspace::I(ws) => step_scheme1(problem, state, dt, &self.cfg, ws),
            Workspace::II(ws) => {
                let cur = LogState::from(state);
                let guess = match &self.prev {
                    Some(p) if p.t < cur.t => Some(extrapolate(p, &cur, cur.t + dt)),
                    _ => None,
                };
                let out = step_scheme2(problem, state, guess.as_ref(), dt, &self.cfg, ws)?;
                self.prev = Some(cur);
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extrapolation_is_linear() {
        let g = |v: f64| GridFunction(vec![v]);
        let a = LogState { t: 0.0, eta: vec![g(1.0)], psi: g(0.0), xi: g(2.0) };
        let b = LogState { t: 0.5, eta: vec![g(2.0)], psi: g(1.0), xi: g(2.0) };
        let c = extrapolate(&a, &b, 0.75);
        assert_eq!(c.eta[0][0], 2.5);
        assert_eq!(c.psi[0], 1.5);
        assert_eq!(c.xi[0], 2.0);
    }
}
