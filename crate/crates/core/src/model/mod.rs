//! Problem description: grids, control atoms, coefficients, rewards, test
//! functions and the controlled generator.

mod bounds;
mod coefficients;
mod controls;
mod generator;
mod grid;
mod lattice;
mod problem;
mod rewards;
mod testfn;

pub use bounds::{scan_bounds, BoundsReport};
pub use coefficients::{CoefficientValues, Coefficients, JumpAtom, MatrixFn, ScalarFn, VectorFn};
pub use controls::ControlSet;
pub use generator::{generator_apply, generator_with_values, GeneratorScratch};
pub use grid::TimeGrid;
pub use lattice::{Axis, StateLattice};
pub use problem::{Mode, Problem};
pub use rewards::{RewardSpec, StoppingFn, TerminalFn};
pub use testfn::{TestFunction, TestKind};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid state lattice: {0}")]
    InvalidLattice(String),
    #[error("invalid control set: {0}")]
    InvalidControls(String),
    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite {what} at t={t}, x={x:?}, u={u:?}")]
    Evaluation { t: f64, x: Vec<f64>, u: Vec<f64>, what: &'static str },
    #[error("problem has no stopping reward")]
    MissingStoppingReward,
}
