//! Markov-chain approximation of the controlled generator and the backward
//! dynamic-programming solvers on it.

mod induction;
mod io;
mod transition;

pub use induction::{
    backward_induction, check_dpp, continuation_value, relaxed_vertex_check, snell_envelope, StopRegion,
};
pub use io::{solve_summary, write_policy_csv, write_value_csv};
pub use transition::{
    build_transition, build_transition_with, consistency_report, ConsistencyReport, Scheme,
    TransitionLayer, TransitionModel,
};

use crate::model::{ModelError, Problem};

#[derive(Debug, thiserror::Error)]
pub enum DppError {
    #[error(
        "CFL condition violated at t={t}, x={x:?}, atom {atom}: total move probability {total}; \
         use n_steps >= {min_steps}"
    )]
    Cfl { t: f64, x: Vec<f64>, atom: usize, total: f64, min_steps: usize },
    #[error("diffusion not diagonally dominant at t={t}, x={x:?}, atom {atom}, axis {axis}")]
    NotDiagonallyDominant { t: f64, x: Vec<f64>, atom: usize, axis: usize },
    #[error("non-finite value at step {step}, node {node}")]
    NonFinite { step: usize, node: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Values `v[i][x]` on the time-state lattice, stored layer by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    n_steps: usize,
    n_nodes: usize,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(n_steps: usize, n_nodes: usize, values: Vec<f64>) -> Result<Self, DppError> {
        if values.len() != (n_steps + 1) * n_nodes {
            return Err(DppError::Shape(format!(
                "{} values for {} layers of {n_nodes} nodes",
                values.len(),
                n_steps + 1
            )));
        }
        Ok(Self { n_steps, n_nodes, values })
    }

    pub(crate) fn zeros(n_steps: usize, n_nodes: usize) -> Self {
        Self { n_steps, n_nodes, values: vec![0.0; (n_steps + 1) * n_nodes] }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn get(&self, i: usize, node: usize) -> f64 {
        self.values[i * self.n_nodes + node]
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    /// Value at `(t0, x0)`.
    pub fn initial(&self, problem: &Problem) -> f64 {
        self.get(0, problem.initial_node())
    }
}

/// Maximizing atom (and stop flag in stopping modes) per `(i, x)`, `i < n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyTable {
    n_steps: usize,
    n_nodes: usize,
    atoms: Vec<usize>,
    stop: Option<Vec<bool>>,
}

impl PolicyTable {
    pub fn new(n_steps: usize, n_nodes: usize, atoms: Vec<usize>, stop: Option<Vec<bool>>) -> Result<Self, DppError> {
        let len = n_steps * n_nodes;
        if atoms.len() != len || stop.as_ref().is_some_and(|s| s.len() != len) {
            return Err(DppError::Shape(format!("policy tables need {len} entries")));
        }
        Ok(Self { n_steps, n_nodes, atoms, stop })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn atom(&self, i: usize, node: usize) -> usize {
        self.atoms[i * self.n_nodes + node]
    }

    pub fn stops(&self, i: usize, node: usize) -> bool {
        self.stop.as_ref().is_some_and(|s| s[i * self.n_nodes + node])
    }

    pub fn has_stopping(&self) -> bool {
        self.stop.is_some()
    }

    /// Feedback map `(t, x) -> atom` reading the table at the time cell of
    /// `t` and the lattice node nearest to `x`.
    pub fn feedback(&self, problem: &Problem) -> crate::simulate::Policy {
        let table = self.clone();
        let grid = problem.grid;
        let lattice = problem.lattice.clone();
        crate::simulate::Policy::feedback(move |t, x| table.atom(grid.cell_of(t), lattice.nearest(x)))
    }

    /// Stop rule `(t, x) -> bool` for stopping modes; `None` otherwise.
    pub fn stop_rule(&self, problem: &Problem) -> Option<crate::simulate::StopRule> {
        self.stop.as_ref()?;
        let table = self.clone();
        let grid = problem.grid;
        let lattice = problem.lattice.clone();
        Some(std::sync::Arc::new(move |t, x| {
            let i = grid.nearest_index(t);
            i < table.n_steps && table.stops(i, lattice.nearest(x))
        }))
    }
}
