use serde::Serialize;

use super::Problem;

/// Sup-norms of coefficients and rewards over lattice x grid x atoms.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BoundsReport {
    /// `max |b0|` (Euclidean).
    pub drift: f64,
    /// `max ||a0||` (Frobenius).
    pub diffusion: f64,
    /// `max sum_j lambda_j (|z_j|^2 min |z_j|)`.
    pub jump_activity: f64,
    /// `max sum_j lambda_j`.
    pub jump_rate: f64,
    pub running: f64,
    pub terminal: f64,
    pub stopping: Option<f64>,
    /// Descriptions of non-finite evaluations, empty when all are finite.
    pub non_finite: Vec<String>,
}

impl BoundsReport {
    pub fn all_finite(&self) -> bool {
        self.non_finite.is_empty()
    }
}

pub fn scan_bounds(problem: &Problem) -> BoundsReport {
    let mut rep = BoundsReport::default();
    let lattice = &problem.lattice;
    let mut vals = problem.coeffs.values();
    let mut x = vec![0.0; problem.dim()];
    let jump_weight: Vec<f64> = problem
        .coeffs
        .jumps()
        .iter()
        .map(|j| {
            let s = j.size();
            (s * s).min(s)
        })
        .collect();
    let n_times = if problem.coeffs.is_time_homogeneous() { 1 } else { problem.grid.n_steps() + 1 };
    let flag = |rep: &mut BoundsReport, msg: String| {
        if rep.non_finite.len() < 32 {
            rep.non_finite.push(msg);
        }
    };
    for node in 0..lattice.n_nodes() {
        lattice.point_into(node, &mut x);
        let term = problem.rewards.terminal(&x);
        if term.is_finite() {
            rep.terminal = rep.terminal.max(term.abs());
        } else {
            flag(&mut rep, format!("terminal reward at x={x:?}"));
        }
        for i in 0..=problem.grid.n_steps() {
            let t = problem.grid.time(i);
            if let Some(s) = problem.rewards.stopping(t, &x) {
                if s.is_finite() {
                    rep.stopping = Some(rep.stopping.unwrap_or(0.0).max(s.abs()));
                } else {
                    flag(&mut rep, format!("stopping reward at t={t}, x={x:?}"));
                }
            }
            for k in 0..problem.n_atoms() {
                let u = problem.controls.atom(k);
                let l = problem.rewards.running(t, &x, u);
                if l.is_finite() {
                    rep.running = rep.running.max(l.abs());
                } else {
                    flag(&mut rep, format!("running reward at t={t}, x={x:?}, u={u:?}"));
                }
                if i >= n_times {
                    continue;
                }
                match problem.coeffs.eval_into(t, &x, u, &mut vals) {
                    Ok(()) => {
                        let b = vals.drift.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let a = vals.diffusion.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let act: f64 = vals.rates.iter().zip(&jump_weight).map(|(r, w)| r * w).sum();
                        let rate: f64 = vals.rates.iter().sum();
                        rep.drift = rep.drift.max(b);
                        rep.diffusion = rep.diffusion.max(a);
                        rep.jump_activity = rep.jump_activity.max(act);
                        rep.jump_rate = rep.jump_rate.max(rate);
                    }
                    Err(e) => flag(&mut rep, e.to_string()),
                }
            }
        }
    }
    rep
}
