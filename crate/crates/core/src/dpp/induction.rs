use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use super::{DppError, PolicyTable, TransitionModel, ValueFunction};
use crate::model::{Mode, Problem};
use crate::rng::path_rng;

fn check_shapes(problem: &Problem, tm: &TransitionModel) -> Result<(), DppError> {
    if tm.n_steps() != problem.grid.n_steps()
        || tm.n_nodes() != problem.lattice.n_nodes()
        || tm.n_atoms() != problem.active_atoms()
    {
        return Err(DppError::Shape(format!(
            "transition model has {} steps, {} nodes, {} atoms; problem has {}, {}, {}",
            tm.n_steps(),
            tm.n_nodes(),
            tm.n_atoms(),
            problem.grid.n_steps(),
            problem.lattice.n_nodes(),
            problem.active_atoms()
        )));
    }
    Ok(())
}

/// `L0(t_i, x, u_k) dt + E_k[next]` from `node` at step `i`.
pub fn continuation_value(
    problem: &Problem,
    tm: &TransitionModel,
    i: usize,
    node: usize,
    k: usize,
    x: &[f64],
    next: &[f64],
) -> f64 {
    let t = problem.grid.time(i);
    problem.rewards.running(t, x, problem.controls.atom(k)) * problem.dt() + tm.expect(i, node, k, next)
}

#[derive(Debug, Clone, Copy)]
struct Choice {
    value: f64,
    atom: usize,
    stop: bool,
}

/// One Bellman step at `(i, node)`: best atom with ties to the lowest index,
/// then stop only when the stopping reward is strictly larger.
fn bellman(problem: &Problem, tm: &TransitionModel, i: usize, node: usize, x: &mut [f64], next: &[f64]) -> Choice {
    problem.lattice.point_into(node, x);
    let mut best = Choice { value: f64::NEG_INFINITY, atom: 0, stop: false };
    for k in 0..tm.n_atoms() {
        let q = continuation_value(problem, tm, i, node, k, x, next);
        if q > best.value || k == 0 {
            best = Choice { value: q, atom: k, stop: false };
        }
    }
    if problem.mode.has_stopping() {
        if let Some(s) = problem.rewards.stopping(problem.grid.time(i), x) {
            if s > best.value {
                best = Choice { value: s, atom: best.atom, stop: true };
            }
        }
    }
    best
}

fn terminal_layer(problem: &Problem, out: &mut [f64]) {
    let mut x = vec![0.0; problem.dim()];
    for (node, v) in out.iter_mut().enumerate() {
        problem.lattice.point_into(node, &mut x);
        *v = problem.rewards.terminal(&x);
    }
}

fn finite_layer(layer: &[f64], step: usize) -> Result<(), DppError> {
    match layer.iter().position(|v| !v.is_finite()) {
        Some(node) => Err(DppError::NonFinite { step, node }),
        None => Ok(()),
    }
}

/// Backward induction for the value and a maximizing Markov policy.
pub fn backward_induction(problem: &Problem, tm: &TransitionModel) -> Result<(ValueFunction, PolicyTable), DppError> {
    check_shapes(problem, tm)?;
    let n = tm.n_steps();
    let n_nodes = tm.n_nodes();
    let d = problem.dim();
    let mut v = ValueFunction::zeros(n, n_nodes);
    terminal_layer(problem, v.layer_mut(n));
    finite_layer(v.layer(n), n)?;
    let mut atoms = vec![0usize; n * n_nodes];
    let mut stops = vec![false; n * n_nodes];
    for i in (0..n).rev() {
        let next = v.layer(i + 1).to_vec();
        let choices: Vec<Choice> = (0..n_nodes)
            .into_par_iter()
            .map_init(|| vec![0.0; d], |x, node| bellman(problem, tm, i, node, x, &next))
            .collect();
        let layer = v.layer_mut(i);
        for (node, c) in choices.into_iter().enumerate() {
            layer[node] = c.value;
            atoms[i * n_nodes + node] = c.atom;
            stops[i * n_nodes + node] = c.stop;
        }
        finite_layer(v.layer(i), i)?;
    }
    let stop = problem.mode.has_stopping().then_some(stops);
    let policy = PolicyTable::new(n, n_nodes, atoms, stop)?;
    Ok((v, policy))
}

/// Splices `v` into a fresh backward pass at the space-time set
/// `{(j, x): j >= tau[x]}` and returns the largest discrepancy from `v`.
///
/// Starting from `(i, x)`, the recomputed value optimizes up to the first
/// layer `j >= i` at which the chain sits at a node with `j >= tau[X_j]`, then
/// collects `v` there. Before that layer the Bellman step (including the stop
/// option in stopping modes) is applied.
pub fn check_dpp(problem: &Problem, tm: &TransitionModel, v: &ValueFunction, tau: &[usize]) -> Result<f64, DppError> {
    check_shapes(problem, tm)?;
    let n = tm.n_steps();
    let n_nodes = tm.n_nodes();
    if v.n_steps() != n || v.n_nodes() != n_nodes {
        return Err(DppError::Shape("value function does not match the transition model".into()));
    }
    if tau.len() != n_nodes {
        return Err(DppError::Shape(format!("tau has {} entries for {n_nodes} nodes", tau.len())));
    }
    if let Some(bad) = tau.iter().find(|&&t| t > n) {
        return Err(DppError::Shape(format!("tau index {bad} exceeds n_steps {n}")));
    }
    let d = problem.dim();
    let mut residual = 0.0f64;
    let mut w = v.layer(n).to_vec();
    for i in (0..n).rev() {
        let next = w;
        w = (0..n_nodes)
            .into_par_iter()
            .map_init(
                || vec![0.0; d],
                |x, node| if i >= tau[node] { v.get(i, node) } else { bellman(problem, tm, i, node, x, &next).value },
            )
            .collect();
        for (node, wv) in w.iter().enumerate() {
            residual = residual.max((wv - v.get(i, node)).abs());
        }
    }
    Ok(residual)
}

/// Stop region of an optimal stopping problem over layers `0..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopRegion {
    n_steps: usize,
    n_nodes: usize,
    stop: Vec<bool>,
}

impl StopRegion {
    pub fn contains(&self, i: usize, node: usize) -> bool {
        self.stop[i * self.n_nodes + node]
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn layer(&self, i: usize) -> &[bool] {
        &self.stop[i * self.n_nodes..(i + 1) * self.n_nodes]
    }
}

/// Snell envelope of the stopping reward along the chain driven by the first
/// atom. The stop region is where the stopping reward attains the value,
/// ties included; at the horizon it is where `Phi2(T, x) >= Phi0(x)`.
pub fn snell_envelope(problem: &Problem, tm: &TransitionModel) -> Result<(ValueFunction, StopRegion), DppError> {
    if problem.mode != Mode::StopOnly {
        return Err(DppError::Config(format!("snell envelope needs mode stop-only, got {:?}", problem.mode)));
    }
    let (v, _) = backward_induction(problem, tm)?;
    let n = tm.n_steps();
    let n_nodes = tm.n_nodes();
    let mut x = vec![0.0; problem.dim()];
    let mut stop = vec![false; (n + 1) * n_nodes];
    for i in 0..=n {
        let t = problem.grid.time(i);
        for node in 0..n_nodes {
            problem.lattice.point_into(node, &mut x);
            let s = problem.stopping_reward(t, &x)?;
            stop[i * n_nodes + node] = s >= v.get(i, node);
        }
    }
    Ok((v, StopRegion { n_steps: n, n_nodes, stop }))
}

/// Largest amount by which a randomized action beats the best single atom in
/// the one-step continuation value, over `n_mixtures` random mixtures per
/// node plus the uniform mixture.
pub fn relaxed_vertex_check(
    problem: &Problem,
    tm: &TransitionModel,
    v: &ValueFunction,
    n_mixtures: usize,
    seed: u64,
) -> Result<f64, DppError> {
    check_shapes(problem, tm)?;
    let n = tm.n_steps();
    let n_nodes = tm.n_nodes();
    let k_atoms = tm.n_atoms();
    let d = problem.dim();
    let dt = problem.dt();
    let gaps: Vec<f64> = (0..n * n_nodes)
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], vec![0.0; n_nodes], Vec::<usize>::new()),
            |(x, mixed, touched), r| {
                let i = r / n_nodes;
                let node = r % n_nodes;
                let next = v.layer(i + 1);
                problem.lattice.point_into(node, x);
                let t = problem.grid.time(i);
                let running: Vec<f64> =
                    (0..k_atoms).map(|k| problem.rewards.running(t, x, problem.controls.atom(k))).collect();
                let best = (0..k_atoms)
                    .map(|k| mixture_value(tm, i, node, &unit(k, k_atoms), &running, dt, next, mixed, touched))
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut rng = path_rng(seed, r as u64);
                let mut gap = f64::NEG_INFINITY;
                let uniform = vec![1.0 / k_atoms as f64; k_atoms];
                gap = gap.max(mixture_value(tm, i, node, &uniform, &running, dt, next, mixed, touched) - best);
                for _ in 0..n_mixtures {
                    let w = dirichlet(&mut rng, k_atoms);
                    gap = gap.max(mixture_value(tm, i, node, &w, &running, dt, next, mixed, touched) - best);
                }
                gap
            },
        )
        .collect();
    Ok(gaps.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn unit(k: usize, len: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    w[k] = 1.0;
    w
}

fn dirichlet<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// One-step value of the relaxed action `w`: mixed running reward plus the
/// expectation under the mixed successor distribution.
#[allow(clippy::too_many_arguments)]
fn mixture_value(
    tm: &TransitionModel,
    i: usize,
    node: usize,
    w: &[f64],
    running: &[f64],
    dt: f64,
    next: &[f64],
    mixed: &mut [f64],
    touched: &mut Vec<usize>,
) -> f64 {
    touched.clear();
    let mut reward = 0.0;
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        reward += wk * running[k];
        let (targets, probs) = tm.row(i, node, k);
        for (&y, &p) in targets.iter().zip(probs) {
            if mixed[y] == 0.0 && !touched.contains(&y) {
                touched.push(y);
            }
            mixed[y] += wk * p;
        }
    }
    touched.sort_unstable();
    let mut acc = reward * dt;
    let mut e = 0.0;
    for &y in touched.iter() {
        e += mixed[y] * next[y];
        mixed[y] = 0.0;
    }
    acc += e;
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpp::build_transition;
    use crate::model::{Coefficients, ControlSet, RewardSpec, StateLattice, TimeGrid};

    fn walk(rewards: RewardSpec, mode: Mode, atoms: &[f64]) -> Problem {
        // h = 1/2, a = 1/2, dt = 1/4: p(+-h) = 1/4 plus the upwind drift part.
        Problem::new(
            TimeGrid::new(0.0, 1.0, 4).unwrap(),
            StateLattice::line(-1.0, 1.0, 0.5).unwrap(),
            ControlSet::scalar(atoms).unwrap(),
            Coefficients::new(1, |_, _, u, b| b[0] = u[0], |_, _, _, a| a[0] = 0.5),
            rewards,
            mode,
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn constant_terminal_reward_propagates() {
        let p = walk(RewardSpec::new(|_, _, _| 0.0, |_| 3.0), Mode::ControlOnly, &[0.0, 1.0]);
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        for i in 0..=4 {
            assert!(v.layer(i).iter().all(|&x| x == 3.0));
        }
    }

    #[test]
    fn unit_running_reward_over_unit_horizon() {
        let p = walk(RewardSpec::new(|_, _, _| 1.0, |_| 0.0), Mode::ControlOnly, &[0.0, 1.0]);
        let tm = build_transition(&p).unwrap();
        let (v, pol) = backward_induction(&p, &tm).unwrap();
        assert!(v.layer(0).iter().all(|&x| x == 1.0));
        // All atoms tie, so the lowest index is chosen.
        assert!((0..5).all(|n| pol.atom(0, n) == 0));
    }

    #[test]
    fn stop_ties_continue() {
        let p = walk(RewardSpec::new(|_, _, _| 0.0, |_| 1.0).with_stopping(|_, _| 1.0), Mode::ControlAndStop, &[0.0]);
        let tm = build_transition(&p).unwrap();
        let (_, pol) = backward_induction(&p, &tm).unwrap();
        assert!((0..4).all(|i| (0..5).all(|n| !pol.stops(i, n))));
    }

    #[test]
    fn stop_flag_forces_stopping_value() {
        let p = walk(
            RewardSpec::new(|_, _, _| 0.0, |x| x[0]).with_stopping(|_, x| x[0] * x[0]),
            Mode::ControlAndStop,
            &[-1.0, 0.0, 1.0],
        );
        let tm = build_transition(&p).unwrap();
        let (v, pol) = backward_induction(&p, &tm).unwrap();
        let mut any = false;
        for i in 0..4 {
            for n in 0..5 {
                if pol.stops(i, n) {
                    any = true;
                    let x = p.lattice.point(n)[0];
                    assert_eq!(v.get(i, n), x * x);
                }
            }
        }
        assert!(any);
    }

    #[test]
    fn check_dpp_identity_and_full_splice() {
        let p = walk(
            RewardSpec::new(|t, x, u| (x[0] - u[0]) * t, |x| -x[0].abs()).with_stopping(|t, x| x[0] - t),
            Mode::ControlAndStop,
            &[-1.0, 0.5],
        );
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        assert_eq!(check_dpp(&p, &tm, &v, &[0; 5]).unwrap(), 0.0);
        assert_eq!(check_dpp(&p, &tm, &v, &[4; 5]).unwrap(), 0.0);
        assert_eq!(check_dpp(&p, &tm, &v, &[1, 3, 2, 0, 4]).unwrap(), 0.0);
        assert!(check_dpp(&p, &tm, &v, &[5; 5]).is_err());
        assert!(check_dpp(&p, &tm, &v, &[1; 4]).is_err());
    }

    #[test]
    fn check_dpp_detects_a_wrong_value() {
        let p = walk(RewardSpec::new(|_, x, _| x[0], |x| x[0]), Mode::ControlOnly, &[-1.0, 1.0]);
        let tm = build_transition(&p).unwrap();
        let (mut v, _) = backward_induction(&p, &tm).unwrap();
        v.layer_mut(2)[2] += 0.5;
        assert!(check_dpp(&p, &tm, &v, &[4; 5]).unwrap() >= 0.5);
    }

    #[test]
    fn snell_with_constant_reward_stops_everywhere() {
        let p = walk(RewardSpec::new(|_, _, _| 0.0, |_| 2.0).with_stopping(|_, _| 2.0), Mode::StopOnly, &[0.0]);
        let tm = build_transition(&p).unwrap();
        let (v, region) = snell_envelope(&p, &tm).unwrap();
        for i in 0..=4 {
            assert!(v.layer(i).iter().all(|&x| x == 2.0));
            assert!(region.layer(i).iter().all(|&s| s));
        }
    }

    #[test]
    fn snell_waits_for_increasing_reward() {
        let p = Problem::new(
            TimeGrid::new(0.0, 1.0, 4).unwrap(),
            StateLattice::line(-1.0, 1.0, 0.5).unwrap(),
            ControlSet::scalar(&[0.0]).unwrap(),
            Coefficients::zero(1),
            RewardSpec::new(|_, _, _| 0.0, |_| 1.0).with_stopping(|t, _| t),
            Mode::StopOnly,
            vec![0.0],
        )
        .unwrap();
        let tm = build_transition(&p).unwrap();
        let (v, region) = snell_envelope(&p, &tm).unwrap();
        for i in 0..4 {
            assert!(region.layer(i).iter().all(|&s| !s), "layer {i}");
        }
        assert!(region.layer(4).iter().all(|&s| s));
        assert!(v.layer(0).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn snell_requires_stop_only() {
        let p = walk(RewardSpec::zero().with_stopping(|_, _| 0.0), Mode::ControlAndStop, &[0.0]);
        let tm = build_transition(&p).unwrap();
        assert!(snell_envelope(&p, &tm).is_err());
    }

    #[test]
    fn vertex_gap_is_nonpositive() {
        let p = walk(RewardSpec::new(|_, x, u| x[0] * u[0] - u[0] * u[0], |x| x[0].sin()), Mode::ControlOnly, &[-1.0, 0.0, 1.0]);
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        let gap = relaxed_vertex_check(&p, &tm, &v, 100, 7).unwrap();
        assert!(gap <= 1e-12, "{gap}");
    }

    #[test]
    fn vertex_gap_single_atom_and_equal_atoms() {
        let p = walk(RewardSpec::new(|_, x, _| x[0], |x| x[0]), Mode::ControlOnly, &[0.0]);
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        assert_eq!(relaxed_vertex_check(&p, &tm, &v, 10, 1).unwrap(), 0.0);

        let p = Problem::new(
            p.grid,
            p.lattice.clone(),
            ControlSet::scalar(&[0.0, 1.0]).unwrap(),
            Coefficients::constant(vec![0.0], vec![1.0]),
            RewardSpec::new(|_, x, _| x[0], |x| x[0] * x[0]),
            Mode::ControlOnly,
            vec![0.0],
        )
        .unwrap();
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        assert_eq!(relaxed_vertex_check(&p, &tm, &v, 0, 1).unwrap(), 0.0);
    }
}
