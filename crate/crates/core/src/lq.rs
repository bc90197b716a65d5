//! Discrete-time Riccati recursion for scalar linear-quadratic problems on the
//! Euler time grid.
//!
//! Dynamics `X' = X + (a X + b u) dt + noise` with zero-mean noise of variance
//! `noise_var * dt`, reward `-(q x^2 + r u^2) dt` per step and `-g x^2` at the
//! horizon. With unconstrained controls the value is `-(P_i x^2 + c_i)`.

use serde::Serialize;

use crate::model::TimeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarLq {
    pub a: f64,
    pub b: f64,
    pub noise_var: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiSolution {
    pub p: Vec<f64>,
    pub c: Vec<f64>,
    /// Feedback gain `k_i` with `u_i(x) = -k_i x`, for `i < n`.
    pub gain: Vec<f64>,
    dt: f64,
}

impl RiccatiSolution {
    pub fn value(&self, i: usize, x: f64) -> f64 {
        -(self.p[i] * x * x + self.c[i])
    }

    pub fn control(&self, i: usize, x: f64) -> f64 {
        -self.gain[i] * x
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

pub fn riccati(lq: &ScalarLq, grid: &TimeGrid) -> RiccatiSolution {
    let n = grid.n_steps();
    let dt = grid.dt();
    let m = 1.0 + lq.a * dt;
    let mut p = vec![0.0; n + 1];
    let mut c = vec![0.0; n + 1];
    let mut gain = vec![0.0; n];
    p[n] = lq.g;
    for i in (0..n).rev() {
        let pn = p[i + 1];
        let denom = lq.r + pn * lq.b * lq.b * dt;
        gain[i] = pn * lq.b * m / denom;
        p[i] = lq.q * dt + m * m * pn * lq.r / denom;
        c[i] = c[i + 1] + pn * lq.noise_var * dt;
    }
    RiccatiSolution { p, c, gain, dt }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq() -> ScalarLq {
        ScalarLq { a: 0.3, b: 1.2, noise_var: 0.25, q: 1.0, r: 0.5, g: 2.0 }
    }

    /// Brute one-step maximization over a fine control grid.
    #[test]
    fn one_step_matches_grid_search() {
        let grid = TimeGrid::new(0.0, 0.5, 5).unwrap();
        let l = lq();
        let sol = riccati(&l, &grid);
        let dt = grid.dt();
        let i = 2;
        let x = 0.8;
        let next = |y: f64| sol.value(i + 1, y);
        let best = (-40000..=40000)
            .map(|j| {
                let u = j as f64 * 1e-4;
                let mean = x + (l.a * x + l.b * u) * dt;
                // E[-(P y^2 + c)] with Var(y) = noise_var dt.
                -(l.q * x * x + l.r * u * u) * dt + next(mean) - sol.p[i + 1] * l.noise_var * dt
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((best - sol.value(i, x)).abs() < 1e-8, "{best} vs {}", sol.value(i, x));
    }

    #[test]
    fn continuous_limit_matches_scalar_riccati_ode() {
        // a = 0, b = 1: P' = P^2 / r - q backward from P(T) = g; with
        // q = r = g = 1 the solution is P == 1.
        let l = ScalarLq { a: 0.0, b: 1.0, noise_var: 0.09, q: 1.0, r: 1.0, g: 1.0 };
        let sol = riccati(&l, &TimeGrid::new(0.0, 1.0, 1000).unwrap());
        assert!((sol.p[0] - 1.0).abs() < 1e-3);
        assert!((sol.c[0] - 0.09).abs() < 1e-3);
    }
}
