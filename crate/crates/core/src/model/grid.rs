use serde::{Deserialize, Serialize};

use super::ModelError;

/// Uniform time grid `t0 < t1 < ... < T` with `n_steps` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t_end: f64, n_steps: usize) -> Result<Self, ModelError> {
        if !(t0.is_finite() && t_end.is_finite()) || t0 >= t_end {
            return Err(ModelError::InvalidGrid(format!(
                "time grid requires finite t0 < T, got t0={t0}, T={t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(ModelError::InvalidGrid("time grid requires n_steps >= 1".into()));
        }
        Ok(Self { t0, t_end, n_steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t0
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps as f64
    }

    /// Grid point `i`, `0 <= i <= n_steps`. The last point is exactly `T`.
    pub fn time(&self, i: usize) -> f64 {
        if i >= self.n_steps {
            self.t_end
        } else {
            self.t0 + i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.time(i)).collect()
    }

    /// Index of the cell `[t_i, t_{i+1})` containing `t`, clamped to `0..n_steps`.
    pub fn cell_of(&self, t: f64) -> usize {
        let raw = ((t - self.t0) / self.dt() + 1e-9).floor();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.n_steps - 1)
        }
    }

    /// Nearest grid index to `t`, clamped to `0..=n_steps`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let raw = ((t - self.t0) / self.dt()).round();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.n_steps)
        }
    }

    /// Same horizon, `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Result<Self, ModelError> {
        Self::new(self.t0, self.t_end, self.n_steps * factor)
    }

    pub fn with_steps(&self, n_steps: usize) -> Result<Self, ModelError> {
        Self::new(self.t0, self.t_end, n_steps)
    }

    /// `Some(factor)` when `fine` subdivides every cell of `self` into `factor` cells.
    pub fn refinement_factor(&self, fine: &TimeGrid) -> Option<usize> {
        let tol = 1e-12 * (1.0 + self.t0.abs().max(self.t_end.abs()));
        if (self.t0 - fine.t0).abs() > tol || (self.t_end - fine.t_end).abs() > tol {
            return None;
        }
        if !fine.n_steps.is_multiple_of(self.n_steps) {
            return None;
        }
        Some(fine.n_steps / self.n_steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(1.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 2).is_err());
    }

    #[test]
    fn points_strictly_increasing_and_end_exact() {
        let g = TimeGrid::new(0.1, 0.7, 7).unwrap();
        let ts = g.times();
        assert_eq!(ts.len(), 8);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(*ts.last().unwrap(), 0.7);
    }

    #[test]
    fn cell_lookup() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        assert_eq!(g.cell_of(0.0), 0);
        assert_eq!(g.cell_of(0.3), 3);
        assert_eq!(g.cell_of(1.0), 9);
        assert_eq!(g.nearest_index(0.5), 5);
    }

    #[test]
    fn refinement() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let f = g.refine(3).unwrap();
        assert_eq!(g.refinement_factor(&f), Some(3));
        let other = TimeGrid::new(0.0, 1.0, 6).unwrap();
        assert_eq!(g.refinement_factor(&other), None);
    }
}
