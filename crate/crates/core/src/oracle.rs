//! Exhaustive policy enumeration on small chains, used as an independent
//! reference for backward induction.
//!
//! Every deterministic Markov policy (atom or stop at each time-state node) is
//! evaluated by pushing the initial distribution forward through the chain.
//! Decisions at nodes the chain cannot reach do not change the value, so the
//! search branches only over nodes carrying mass.

use serde::Serialize;

use crate::dpp::TransitionModel;
use crate::model::Problem;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),
    #[error("transition model does not match the problem")]
    Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OracleLimits {
    pub max_steps: usize,
    pub max_nodes: usize,
    pub max_atoms: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        Self { max_steps: 4, max_nodes: 5, max_atoms: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleResult {
    pub start_node: usize,
    pub value: f64,
    /// Number of distinct reachable decision patterns evaluated.
    pub n_policies: u64,
}

struct Tables<'a> {
    tm: &'a TransitionModel,
    n_nodes: usize,
    /// Choices per node: atoms, then stop when allowed.
    n_choices: usize,
    n_atoms: usize,
    /// `L0 dt` per `(i, node, k)`.
    running: Vec<f64>,
    /// `Phi2` per `(i, node)`, or empty.
    stopping: Vec<f64>,
    terminal: Vec<f64>,
}

impl Tables<'_> {
    fn reward(&self, i: usize, node: usize, c: usize) -> f64 {
        if c == self.n_atoms {
            self.stopping[i * self.n_nodes + node]
        } else {
            self.running[(i * self.n_nodes + node) * self.n_atoms + c]
        }
    }
}

/// Best value from `start_node` at `t0` over all deterministic Markov
/// policies (and stop patterns in stopping modes).
pub fn brute_force_value(
    problem: &Problem,
    tm: &TransitionModel,
    start_node: usize,
    limits: OracleLimits,
) -> Result<OracleResult, OracleError> {
    let n = tm.n_steps();
    let n_nodes = tm.n_nodes();
    let n_atoms = tm.n_atoms();
    if n != problem.grid.n_steps() || n_nodes != problem.lattice.n_nodes() || n_atoms != problem.active_atoms() {
        return Err(OracleError::Shape);
    }
    if n > limits.max_steps || n_nodes > limits.max_nodes || n_atoms > limits.max_atoms {
        return Err(OracleError::TooLarge(format!(
            "{n} steps, {n_nodes} nodes, {n_atoms} atoms (limits {}, {}, {})",
            limits.max_steps, limits.max_nodes, limits.max_atoms
        )));
    }
    let dt = problem.dt();
    let stop = problem.mode.has_stopping();
    let mut running = Vec::with_capacity(n * n_nodes * n_atoms);
    let mut stopping = Vec::new();
    for i in 0..n {
        let t = problem.grid.time(i);
        for node in 0..n_nodes {
            let x = problem.lattice.point(node);
            for k in 0..n_atoms {
                running.push(problem.rewards.running(t, &x, problem.controls.atom(k)) * dt);
            }
            if stop {
                stopping.push(problem.rewards.stopping(t, &x).unwrap_or(f64::NEG_INFINITY));
            }
        }
    }
    let terminal = (0..n_nodes).map(|node| problem.rewards.terminal(&problem.lattice.point(node))).collect();
    let tables = Tables {
        tm,
        n_nodes,
        n_choices: n_atoms + usize::from(stop),
        n_atoms,
        running,
        stopping,
        terminal,
    };
    let mut dist = vec![0.0; n_nodes];
    dist[start_node] = 1.0;
    let mut count = 0u64;
    let value = search(&tables, 0, &dist, 0.0, &mut count);
    Ok(OracleResult { start_node, value, n_policies: count })
}

fn search(tab: &Tables<'_>, i: usize, dist: &[f64], acc: f64, count: &mut u64) -> f64 {
    let n_nodes = tab.n_nodes;
    if i == tab.tm.n_steps() {
        *count += 1;
        let mut total = acc;
        for (node, &m) in dist.iter().enumerate() {
            if m != 0.0 {
                total += m * tab.terminal[node];
            }
        }
        return total;
    }
    let support: Vec<usize> = (0..n_nodes).filter(|&x| dist[x] != 0.0).collect();
    let mut choice = vec![0usize; support.len()];
    let mut best = f64::NEG_INFINITY;
    let mut next = vec![0.0; n_nodes];
    loop {
        let mut gained = acc;
        next.iter_mut().for_each(|v| *v = 0.0);
        for (s, &node) in support.iter().enumerate() {
            let m = dist[node];
            let c = choice[s];
            gained += m * tab.reward(i, node, c);
            if c < tab.n_atoms {
                let (targets, probs) = tab.tm.row(i, node, c);
                for (&y, &p) in targets.iter().zip(probs) {
                    next[y] += m * p;
                }
            }
        }
        let v = search(tab, i + 1, &next, gained, count);
        if v > best {
            best = v;
        }
        // Odometer over the choices at the support nodes.
        let mut s = 0;
        loop {
            if s == support.len() {
                return best;
            }
            choice[s] += 1;
            if choice[s] < tab.n_choices {
                break;
            }
            choice[s] = 0;
            s += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpp::{backward_induction, build_transition};
    use crate::model::{Coefficients, ControlSet, Mode, RewardSpec, StateLattice, TimeGrid};

    #[test]
    fn single_path_counts_one_policy() {
        let p = Problem::new(
            TimeGrid::new(0.0, 1.0, 2).unwrap(),
            StateLattice::line(0.0, 1.0, 0.5).unwrap(),
            ControlSet::scalar(&[0.0]).unwrap(),
            Coefficients::zero(1),
            RewardSpec::new(|_, _, _| 1.0, |x| x[0]),
            Mode::ControlOnly,
            vec![0.5],
        )
        .unwrap();
        let tm = build_transition(&p).unwrap();
        let r = brute_force_value(&p, &tm, 1, OracleLimits::default()).unwrap();
        assert_eq!(r.value, 1.5);
        assert_eq!(r.n_policies, 1);
    }

    #[test]
    fn matches_backward_induction_with_stopping() {
        let p = Problem::new(
            TimeGrid::new(0.0, 0.75, 3).unwrap(),
            StateLattice::line(-0.5, 0.5, 0.5).unwrap(),
            ControlSet::scalar(&[-1.0, 1.0]).unwrap(),
            Coefficients::new(1, |_, _, u, b| b[0] = u[0], |_, _, _, a| a[0] = 0.25),
            RewardSpec::new(|t, x, u| x[0] * u[0] - t, |x| x[0] * x[0]).with_stopping(|t, x| 0.25 - x[0] * t),
            Mode::ControlAndStop,
            vec![0.0],
        )
        .unwrap();
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        for node in 0..3 {
            let r = brute_force_value(&p, &tm, node, OracleLimits::default()).unwrap();
            assert_eq!(r.value, v.get(0, node), "node {node}");
        }
    }

    #[test]
    fn rejects_large_instances() {
        let p = Problem::new(
            TimeGrid::new(0.0, 1.0, 5).unwrap(),
            StateLattice::line(-1.0, 1.0, 1.0).unwrap(),
            ControlSet::scalar(&[0.0]).unwrap(),
            Coefficients::zero(1),
            RewardSpec::zero(),
            Mode::ControlOnly,
            vec![0.0],
        )
        .unwrap();
        let tm = build_transition(&p).unwrap();
        assert!(matches!(brute_force_value(&p, &tm, 0, OracleLimits::default()), Err(OracleError::TooLarge(_))));
    }
}
