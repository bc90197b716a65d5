use serde::{Deserialize, Serialize};

use super::{
    CoefficientValues, Coefficients, ControlSet, ModelError, RewardSpec, StateLattice, TimeGrid,
};

/// Whether the controller chooses actions, a stopping time, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ControlOnly,
    ControlAndStop,
    /// Optimal stopping of the dynamics driven by the first control atom.
    StopOnly,
}

impl Mode {
    pub fn has_stopping(self) -> bool {
        !matches!(self, Mode::ControlOnly)
    }
}

/// Full description of one finite-horizon control/stopping problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: TimeGrid,
    pub lattice: StateLattice,
    pub controls: ControlSet,
    pub coeffs: Coefficients,
    pub rewards: RewardSpec,
    pub mode: Mode,
    /// Initial state `x0` at `t0`.
    pub initial: Vec<f64>,
}

impl Problem {
    pub fn new(
        grid: TimeGrid,
        lattice: StateLattice,
        controls: ControlSet,
        coeffs: Coefficients,
        rewards: RewardSpec,
        mode: Mode,
        initial: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let d = lattice.dim();
        if coeffs.dim() != d {
            return Err(ModelError::DimensionMismatch(format!(
                "coefficients have dimension {}, lattice has {d}",
                coeffs.dim()
            )));
        }
        if initial.len() != d {
            return Err(ModelError::DimensionMismatch(format!(
                "initial state has length {}, lattice has dimension {d}",
                initial.len()
            )));
        }
        if !lattice.contains(&initial) {
            return Err(ModelError::DimensionMismatch(format!(
                "initial state {initial:?} lies outside the lattice"
            )));
        }
        if mode.has_stopping() && !rewards.has_stopping() {
            return Err(ModelError::MissingStoppingReward);
        }
        Ok(Self { grid, lattice, controls, coeffs, rewards, mode, initial })
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }

    pub fn n_atoms(&self) -> usize {
        self.controls.len()
    }

    /// Atoms the controller may use; stop-only problems run on the first atom.
    pub fn active_atoms(&self) -> usize {
        match self.mode {
            Mode::StopOnly => 1,
            _ => self.controls.len(),
        }
    }

    pub fn initial_node(&self) -> usize {
        self.lattice.nearest(&self.initial)
    }

    /// Same problem on a grid with `n_steps` cells.
    pub fn with_steps(&self, n_steps: usize) -> Result<Self, ModelError> {
        let mut p = self.clone();
        p.grid = self.grid.with_steps(n_steps)?;
        Ok(p)
    }

    /// Coefficients at `(t, x, u_k)` with `x` clamped onto the lattice box.
    pub fn coefficients_at(
        &self,
        t: f64,
        x: &[f64],
        k: usize,
        clamped: &mut [f64],
        out: &mut CoefficientValues,
    ) -> Result<(), ModelError> {
        self.lattice.clamp_into(x, clamped);
        self.coeffs.eval_into(t, clamped, self.controls.atom(k), out)
    }

    /// Stopping reward, or an error when the problem defines none.
    pub fn stopping_reward(&self, t: f64, x: &[f64]) -> Result<f64, ModelError> {
        self.rewards.stopping(t, x).ok_or(ModelError::MissingStoppingReward)
    }
}
