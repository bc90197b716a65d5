//! Selection of a single Markov rule among the optimal relaxed rules of a
//! small chain by successive maximization of functionals `E[phi(t_n, X_{t_n})]`.
//!
//! Actions at a node are indexed `0..K` for the atoms and `K` for stopping.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};

use crate::dpp::{continuation_value, DppError, PolicyTable, TransitionModel, ValueFunction};
use crate::fmt::{f17, json_num};
use crate::model::{Problem, TestFunction};

#[derive(Debug, thiserror::Error)]
pub enum SelectionError {
    #[error("instance too large: {0}")]
    TooLarge(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeLimits {
    pub max_steps: usize,
    pub max_nodes: usize,
    pub max_atoms: usize,
}

impl Default for SizeLimits {
    fn default() -> Self {
        Self { max_steps: 6, max_nodes: 9, max_atoms: 3 }
    }
}

/// Law of the controlled chain given by per-node relaxed kernels and stop
/// probabilities, started from `start_node` at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteRule {
    n_steps: usize,
    n_nodes: usize,
    n_atoms: usize,
    start_node: usize,
    kernels: Vec<f64>,
    stop: Vec<f64>,
}

impl DiscreteRule {
    pub fn new(
        n_steps: usize,
        n_nodes: usize,
        n_atoms: usize,
        start_node: usize,
        kernels: Vec<f64>,
        stop: Vec<f64>,
    ) -> Result<Self, SelectionError> {
        let cells = n_steps * n_nodes;
        if kernels.len() != cells * n_atoms || stop.len() != cells || start_node >= n_nodes {
            return Err(SelectionError::Argument("rule shape does not match the instance".into()));
        }
        for c in 0..cells {
            let row = &kernels[c * n_atoms..(c + 1) * n_atoms];
            if row.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(SelectionError::Argument(format!("kernel {c} is not a probability vector")));
            }
            if !(0.0..=1.0).contains(&stop[c]) {
                return Err(SelectionError::Argument(format!("stop probability {c} outside [0, 1]")));
            }
        }
        Ok(Self { n_steps, n_nodes, n_atoms, start_node, kernels, stop })
    }

    /// Deterministic rule read from a policy table.
    pub fn from_policy(policy: &PolicyTable, n_atoms: usize, start_node: usize) -> Self {
        let (n, nn) = (policy.n_steps(), policy.n_nodes());
        let mut kernels = vec![0.0; n * nn * n_atoms];
        let mut stop = vec![0.0; n * nn];
        for i in 0..n {
            for node in 0..nn {
                kernels[(i * nn + node) * n_atoms + policy.atom(i, node)] = 1.0;
                if policy.stops(i, node) {
                    stop[i * nn + node] = 1.0;
                }
            }
        }
        Self { n_steps: n, n_nodes: nn, n_atoms, start_node, kernels, stop }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn start_node(&self) -> usize {
        self.start_node
    }

    pub fn kernel(&self, i: usize, node: usize) -> &[f64] {
        let c = i * self.n_nodes + node;
        &self.kernels[c * self.n_atoms..(c + 1) * self.n_atoms]
    }

    pub fn stop_prob(&self, i: usize, node: usize) -> f64 {
        self.stop[i * self.n_nodes + node]
    }

    /// True when every kernel and stop probability is 0 or 1.
    pub fn is_dirac(&self) -> bool {
        self.kernels.iter().chain(&self.stop).all(|&w| w == 0.0 || w == 1.0)
    }
}

/// All rules whose kernels at every node are supported on the optimal
/// actions there. The set is the product over nodes of the per-node action
/// sets; `convex` records that per-node mixtures are members as well.
#[derive(Debug, Clone, PartialEq)]
pub struct RuleSet {
    n_steps: usize,
    n_nodes: usize,
    n_atoms: usize,
    start_node: usize,
    /// Per `(i, node)`: sorted optimal actions.
    actions: Vec<Vec<usize>>,
    pub convex: bool,
}

impl RuleSet {
    pub fn actions(&self, i: usize, node: usize) -> &[usize] {
        &self.actions[i * self.n_nodes + node]
    }

    /// Number of vertex (deterministic) rules, saturating.
    pub fn vertex_count(&self) -> u128 {
        self.actions.iter().fold(1u128, |acc, a| acc.saturating_mul(a.len() as u128))
    }

    /// Vertex rule number `index` in mixed radix over the nodes in `(i, node)`
    /// order; vertex 0 takes the first action everywhere.
    pub fn vertex(&self, mut index: u128) -> Result<DiscreteRule, SelectionError> {
        if index >= self.vertex_count() {
            return Err(SelectionError::Argument(format!("vertex {index} out of range")));
        }
        let mut choice = Vec::with_capacity(self.actions.len());
        for a in &self.actions {
            let len = a.len() as u128;
            choice.push(a[(index % len) as usize]);
            index /= len;
        }
        Ok(self.rule_from(|c| vec![(choice[c], 1.0)]))
    }

    /// Member mixing the optimal actions at every node uniformly.
    pub fn uniform_mixture(&self) -> DiscreteRule {
        self.rule_from(|c| {
            let a = &self.actions[c];
            a.iter().map(|&x| (x, 1.0 / a.len() as f64)).collect()
        })
    }

    fn rule_from(&self, weights: impl Fn(usize) -> Vec<(usize, f64)>) -> DiscreteRule {
        let k = self.n_atoms;
        let cells = self.n_steps * self.n_nodes;
        let mut kernels = vec![0.0; cells * k];
        let mut stop = vec![0.0; cells];
        for c in 0..cells {
            let w = weights(c);
            let go: f64 = w.iter().filter(|(a, _)| *a < k).map(|(_, p)| p).sum();
            for (a, p) in w {
                if a == k {
                    stop[c] += p;
                } else {
                    kernels[c * k + a] += p / go;
                }
            }
            if go == 0.0 {
                kernels[c * k] = 1.0;
            }
        }
        DiscreteRule {
            n_steps: self.n_steps,
            n_nodes: self.n_nodes,
            n_atoms: k,
            start_node: self.start_node,
            kernels,
            stop,
        }
    }

    /// True when every kernel (and positive stop probability) of `rule` is
    /// supported on the optimal actions.
    pub fn contains(&self, rule: &DiscreteRule) -> bool {
        (0..self.n_steps * self.n_nodes).all(|c| {
            let (i, node) = (c / self.n_nodes, c % self.n_nodes);
            let acts = &self.actions[c];
            let s = rule.stop_prob(i, node);
            (s == 0.0 || acts.contains(&self.n_atoms))
                && (s == 1.0 || rule.kernel(i, node).iter().enumerate().all(|(k, &w)| w == 0.0 || acts.contains(&k)))
        })
    }
}

fn check_size(problem: &Problem, tm: &TransitionModel, limits: SizeLimits) -> Result<(), SelectionError> {
    if tm.n_steps() > limits.max_steps || tm.n_nodes() > limits.max_nodes || tm.n_atoms() > limits.max_atoms {
        return Err(SelectionError::TooLarge(format!(
            "{} steps, {} nodes, {} atoms (limits {}, {}, {})",
            tm.n_steps(),
            tm.n_nodes(),
            tm.n_atoms(),
            limits.max_steps,
            limits.max_nodes,
            limits.max_atoms
        )));
    }
    if tm.n_steps() != problem.grid.n_steps() || tm.n_nodes() != problem.lattice.n_nodes() {
        return Err(SelectionError::Argument("transition model does not match the problem".into()));
    }
    Ok(())
}

/// Optimal actions at every node: atoms whose continuation value, and the stop
/// action when its reward, lies within `tol` of `v[i][x]`.
pub fn enumerate_optimal_rules(
    problem: &Problem,
    tm: &TransitionModel,
    v: &ValueFunction,
    tol: f64,
    limits: SizeLimits,
) -> Result<RuleSet, SelectionError> {
    check_size(problem, tm, limits)?;
    let (n, nn, k) = (tm.n_steps(), tm.n_nodes(), tm.n_atoms());
    let mut x = vec![0.0; problem.dim()];
    let mut actions = Vec::with_capacity(n * nn);
    for i in 0..n {
        let next = v.layer(i + 1);
        for node in 0..nn {
            problem.lattice.point_into(node, &mut x);
            let best = v.get(i, node);
            let mut acts: Vec<usize> = (0..k)
                .filter(|&a| (continuation_value(problem, tm, i, node, a, &x, next) - best).abs() <= tol)
                .collect();
            if problem.mode.has_stopping() {
                if let Some(s) = problem.rewards.stopping(problem.grid.time(i), &x) {
                    if (s - best).abs() <= tol {
                        acts.push(k);
                    }
                }
            }
            if acts.is_empty() {
                return Err(SelectionError::Argument(format!(
                    "no action attains v at step {i}, node {node}; was v computed on this model?"
                )));
            }
            actions.push(acts);
        }
    }
    Ok(RuleSet { n_steps: n, n_nodes: nn, n_atoms: k, start_node: problem.initial_node(), actions, convex: true })
}

/// Forward expectation of the total reward under `rule`.
pub fn forward_value(problem: &Problem, tm: &TransitionModel, rule: &DiscreteRule) -> f64 {
    let (n, nn) = (rule.n_steps, rule.n_nodes);
    let dt = problem.dt();
    let mut dist = vec![0.0; nn];
    dist[rule.start_node] = 1.0;
    let mut total = 0.0;
    let mut x = vec![0.0; problem.dim()];
    for i in 0..n {
        let t = problem.grid.time(i);
        let mut next = vec![0.0; nn];
        for node in 0..nn {
            let m = dist[node];
            if m == 0.0 {
                continue;
            }
            problem.lattice.point_into(node, &mut x);
            let s = rule.stop_prob(i, node);
            if s > 0.0 {
                total += m * s * problem.rewards.stopping(t, &x).unwrap_or(0.0);
            }
            let go = m * (1.0 - s);
            if go == 0.0 {
                continue;
            }
            for (k, &w) in rule.kernel(i, node).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                total += go * w * problem.rewards.running(t, &x, problem.controls.atom(k)) * dt;
                let (targets, probs) = tm.row(i, node, k);
                for (&y, &p) in targets.iter().zip(probs) {
                    next[y] += go * w * p;
                }
            }
        }
        dist = next;
    }
    for (node, &m) in dist.iter().enumerate() {
        if m != 0.0 {
            problem.lattice.point_into(node, &mut x);
            total += m * problem.rewards.terminal(&x);
        }
    }
    total
}

/// `E[f(X_{t_layer})]` under `rule`, with stopped mass frozen where it stopped.
pub fn forward_marginal(tm: &TransitionModel, rule: &DiscreteRule, layer: usize, f: &[f64]) -> f64 {
    let nn = rule.n_nodes;
    let mut dist = vec![0.0; nn];
    dist[rule.start_node] = 1.0;
    let mut frozen = 0.0;
    for i in 0..layer {
        let mut next = vec![0.0; nn];
        for node in 0..nn {
            let m = dist[node];
            if m == 0.0 {
                continue;
            }
            let s = rule.stop_prob(i, node);
            frozen += m * s * f[node];
            let go = m * (1.0 - s);
            for (k, &w) in rule.kernel(i, node).iter().enumerate() {
                if w == 0.0 || go == 0.0 {
                    continue;
                }
                let (targets, probs) = tm.row(i, node, k);
                for (&y, &p) in targets.iter().zip(probs) {
                    next[y] += go * w * p;
                }
            }
        }
        dist = next;
    }
    frozen + dist.iter().zip(f).map(|(m, v)| m * v).sum::<f64>()
}

/// Deterministic enumeration of `(layer, phi)` pairs: the Cantor diagonal over
/// (layer cycle position, test function index), with layers `1..=n_steps`
/// and `phi` from the test-function family on `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionOrder {
    n_steps: usize,
    dim: usize,
}

impl SelectionOrder {
    pub fn new(n_steps: usize, dim: usize) -> Self {
        Self { n_steps, dim }
    }

    /// Round `n` (0-based): layer index and test function on `R^{1+d}`.
    pub fn item(&self, n: usize) -> (usize, TestFunction) {
        // Invert the Cantor pairing n = w(w+1)/2 + b, a = w - b.
        let w = (((8 * n + 1) as f64).sqrt() as usize - 1) / 2;
        let w = if (w + 1) * (w + 2) / 2 <= n { w + 1 } else { w };
        let b = n - w * (w + 1) / 2;
        let a = w - b;
        (1 + a % self.n_steps, TestFunction::nth(b + 1, self.dim + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: usize,
    pub layer: usize,
    pub phi_index: usize,
    /// Vertex rules left after the round (saturating).
    pub surviving: u128,
    /// `max E[phi(t_layer, X_{t_layer})]` from the start node.
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub rule: DiscreteRule,
    /// Surviving set after the last round, before the tie-break.
    pub survivors: RuleSet,
    pub trace: Vec<TraceRow>,
}

impl Selection {
    pub fn trace_json(&self) -> Value {
        Value::Array(
            self.trace
                .iter()
                .map(|r| {
                    json!({
                        "round": r.round,
                        "layer": r.layer,
                        "phi_index": r.phi_index,
                        "surviving": r.surviving.to_string(),
                        "max": json_num(r.max),
                    })
                })
                .collect(),
        )
    }
}

/// Runs `n_rounds` of selection and breaks remaining ties by the lowest atom
/// (continue before stop).
///
/// Each round maximizes `E[phi_n(t_n, X_{t_n})]` from every node before
/// `t_n` at once by a backward pass restricted to the surviving actions, so
/// the surviving set stays a product over nodes.
pub fn krylov_select(
    problem: &Problem,
    tm: &TransitionModel,
    rules: &RuleSet,
    order: SelectionOrder,
    n_rounds: usize,
    tol: f64,
) -> Result<Selection, SelectionError> {
    if rules.actions.iter().any(Vec::is_empty) {
        return Err(SelectionError::Argument("empty rule set".into()));
    }
    let (nn, k) = (rules.n_nodes, rules.n_atoms);
    let mut set = rules.clone();
    let mut trace = Vec::with_capacity(n_rounds);
    let mut x = vec![0.0; problem.dim()];
    let mut tx = vec![0.0; problem.dim() + 1];
    for round in 0..n_rounds {
        let (layer, phi) = order.item(round);
        let t = problem.grid.time(layer);
        let mut w: Vec<f64> = (0..nn)
            .map(|node| {
                problem.lattice.point_into(node, &mut x);
                tx[0] = t;
                tx[1..].copy_from_slice(&x);
                phi.value(&tx)
            })
            .collect();
        let f = w.clone();
        for i in (0..layer).rev() {
            let mut cur = vec![0.0; nn];
            for (node, c) in cur.iter_mut().enumerate() {
                let acts = &set.actions[i * nn + node];
                let vals: Vec<f64> =
                    acts.iter().map(|&a| if a == k { f[node] } else { tm.expect(i, node, a, &w) }).collect();
                let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let keep: Vec<usize> =
                    acts.iter().zip(&vals).filter(|(_, &v)| v >= best - tol).map(|(&a, _)| a).collect();
                set.actions[i * nn + node] = keep;
                *c = best;
            }
            w = cur;
        }
        trace.push(TraceRow {
            round,
            layer,
            phi_index: phi.index(),
            surviving: set.vertex_count(),
            max: w[set.start_node],
        });
    }
    let rule = set.vertex(0)?;
    Ok(Selection { rule, survivors: set, trace })
}

/// Largest gap between the selected rule's marginals and the recorded round
/// maxima.
pub fn trace_deviation(problem: &Problem, tm: &TransitionModel, sel: &Selection, order: SelectionOrder) -> f64 {
    let mut x = vec![0.0; problem.dim()];
    let mut tx = vec![0.0; problem.dim() + 1];
    sel.trace
        .iter()
        .map(|row| {
            let (layer, phi) = order.item(row.round);
            let t = problem.grid.time(layer);
            let f: Vec<f64> = (0..tm.n_nodes())
                .map(|node| {
                    problem.lattice.point_into(node, &mut x);
                    tx[0] = t;
                    tx[1..].copy_from_slice(&x);
                    phi.value(&tx)
                })
                .collect();
            (forward_marginal(tm, &sel.rule, layer, &f) - row.max).abs()
        })
        .fold(0.0, f64::max)
}

/// A rule that may look at the whole path so far.
pub trait HistoryRule {
    /// Kernel over atoms and stop probability at step `i` after `history`
    /// (`history.len() == i + 1`, last entry the current node).
    fn action(&self, i: usize, history: &[usize]) -> (Vec<f64>, f64);
    fn start_node(&self) -> usize;
}

impl HistoryRule for DiscreteRule {
    fn action(&self, i: usize, history: &[usize]) -> (Vec<f64>, f64) {
        let node = *history.last().expect("non-empty history");
        (self.kernel(i, node).to_vec(), self.stop_prob(i, node))
    }

    fn start_node(&self) -> usize {
        self.start_node
    }
}

/// Negative control: `base`, except at `(step, node)` reached from `prev`,
/// where `kernel` is used instead.
#[derive(Debug, Clone)]
pub struct HistorySwitch {
    pub base: DiscreteRule,
    pub step: usize,
    pub node: usize,
    pub prev: usize,
    pub kernel: Vec<f64>,
}

impl HistoryRule for HistorySwitch {
    fn action(&self, i: usize, history: &[usize]) -> (Vec<f64>, f64) {
        let node = *history.last().expect("non-empty history");
        if i == self.step && node == self.node && i >= 1 && history[i - 1] == self.prev {
            return (self.kernel.clone(), self.base.stop_prob(i, node));
        }
        self.base.action(i, history)
    }

    fn start_node(&self) -> usize {
        self.base.start_node
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovReport {
    /// Largest total-variation distance between future laws given two
    /// histories ending at the same `(i, x)`.
    pub max_tv: f64,
    pub worst: Option<(usize, usize)>,
    pub n_histories: usize,
}

/// Distribution of the next node from `(i, node)` under `kernel`.
fn successors(tm: &TransitionModel, i: usize, node: usize, kernel: &[f64]) -> BTreeMap<usize, f64> {
    let mut next = BTreeMap::new();
    for (k, &w) in kernel.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let (targets, probs) = tm.row(i, node, k);
        for (&y, &p) in targets.iter().zip(probs) {
            if p > 0.0 {
                *next.entry(y).or_insert(0.0) += w * p;
            }
        }
    }
    next
}

/// Law of the remaining path `(X_{i+1}, ..., X_n)` given a history, stopped
/// paths marked by the absorbing symbol `n_nodes`.
struct FutureLaw<'a> {
    rule: &'a dyn HistoryRule,
    tm: &'a TransitionModel,
    /// Length of the conditioning history.
    base: usize,
    law: BTreeMap<Vec<usize>, f64>,
}

impl FutureLaw<'_> {
    fn of(rule: &dyn HistoryRule, tm: &TransitionModel, history: &mut Vec<usize>) -> BTreeMap<Vec<usize>, f64> {
        let mut walk = FutureLaw { rule, tm, base: history.len(), law: BTreeMap::new() };
        walk.extend(history, 1.0);
        walk.law
    }

    fn extend(&mut self, history: &mut Vec<usize>, mass: f64) {
        let n = self.tm.n_steps();
        let i = history.len() - 1;
        if i == n {
            *self.law.entry(history[self.base..].to_vec()).or_insert(0.0) += mass;
            return;
        }
        let (kernel, s) = self.rule.action(i, history);
        if s > 0.0 {
            let mut key = history[self.base..].to_vec();
            key.resize(n + 1 - self.base, self.tm.n_nodes());
            *self.law.entry(key).or_insert(0.0) += mass * s;
        }
        let go = mass * (1.0 - s);
        if go == 0.0 {
            return;
        }
        for (y, p) in successors(self.tm, i, history[i], &kernel) {
            history.push(y);
            self.extend(history, go * p);
            history.pop();
        }
    }
}

fn tv(a: &BTreeMap<Vec<usize>, f64>, b: &BTreeMap<Vec<usize>, f64>) -> f64 {
    let mut s = 0.0;
    for (k, p) in a {
        s += (p - b.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, q) in b {
        if !a.contains_key(k) {
            s += q.abs();
        }
    }
    0.5 * s
}

/// Enumerates every history with positive probability and compares the
/// conditional future laws of histories that end at the same `(i, x)`.
pub fn verify_markov(
    rule: &dyn HistoryRule,
    problem: &Problem,
    tm: &TransitionModel,
    limits: SizeLimits,
) -> Result<MarkovReport, SelectionError> {
    check_size(problem, tm, limits)?;
    let n = tm.n_steps();
    // First future law seen at each (i, x).
    let mut reference: BTreeMap<(usize, usize), BTreeMap<Vec<usize>, f64>> = BTreeMap::new();
    let mut report = MarkovReport { max_tv: 0.0, worst: None, n_histories: 0 };
    let mut stack: Vec<Vec<usize>> = vec![vec![rule.start_node()]];
    while let Some(mut h) = stack.pop() {
        let i = h.len() - 1;
        let node = h[i];
        report.n_histories += 1;
        let law = FutureLaw::of(rule, tm, &mut h);
        match reference.get(&(i, node)) {
            Some(r) => {
                let d = tv(r, &law);
                if d > report.max_tv {
                    report.max_tv = d;
                    report.worst = Some((i, node));
                }
            }
            None => {
                reference.insert((i, node), law);
            }
        }
        if i == n {
            continue;
        }
        let (kernel, s) = rule.action(i, &h);
        if s >= 1.0 {
            continue;
        }
        for &y in successors(tm, i, node, &kernel).keys().rev() {
            let mut next = h.clone();
            next.push(y);
            stack.push(next);
        }
    }
    Ok(report)
}

/// Optimal Markovian relaxed control read off a selected rule.
#[derive(Debug, Clone, PartialEq)]
pub struct MStar {
    pub rule: DiscreteRule,
    /// The ordinary Markov policy when every kernel is a Dirac mass.
    pub nu_star: Option<PolicyTable>,
}

pub fn extract_mstar(rule: &DiscreteRule) -> MStar {
    let nu_star = rule.is_dirac().then(|| {
        let (n, nn) = (rule.n_steps, rule.n_nodes);
        let mut atoms = Vec::with_capacity(n * nn);
        let mut stop = Vec::with_capacity(n * nn);
        for i in 0..n {
            for node in 0..nn {
                atoms.push(rule.kernel(i, node).iter().position(|&w| w == 1.0).unwrap_or(0));
                stop.push(rule.stop_prob(i, node) == 1.0);
            }
        }
        let stop = stop.iter().any(|&s| s).then_some(stop);
        PolicyTable::new(n, nn, atoms, stop).expect("shape checked by construction")
    });
    MStar { rule: rule.clone(), nu_star }
}

/// Kernel-mixed coefficients and running reward at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCharacteristics {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub jump_rates: Vec<f64>,
    pub running: f64,
}

pub fn node_characteristics(
    problem: &Problem,
    i: usize,
    node: usize,
    kernel: &[f64],
) -> Result<NodeCharacteristics, SelectionError> {
    let x = problem.lattice.point(node);
    let t = problem.grid.time(i);
    let d = problem.dim();
    let mut vals = problem.coeffs.values();
    let mut out = NodeCharacteristics {
        drift: vec![0.0; d],
        diffusion: vec![0.0; d * d],
        jump_rates: vec![0.0; problem.coeffs.jumps().len()],
        running: 0.0,
    };
    for (k, &w) in kernel.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let u = problem.controls.atom(k);
        problem.coeffs.eval_into(t, &x, u, &mut vals).map_err(DppError::from)?;
        out.drift.iter_mut().zip(&vals.drift).for_each(|(o, v)| *o += w * v);
        out.diffusion.iter_mut().zip(&vals.diffusion).for_each(|(o, v)| *o += w * v);
        out.jump_rates.iter_mut().zip(&vals.rates).for_each(|(o, v)| *o += w * v);
        out.running += w * problem.rewards.running(t, &x, u);
    }
    Ok(out)
}

/// Largest gap between `v[i][x]` and the one-step value of the m* kernel,
/// over nodes the rule visits with positive probability.
pub fn mstar_attainment(problem: &Problem, tm: &TransitionModel, v: &ValueFunction, m: &MStar) -> f64 {
    let rule = &m.rule;
    let nn = rule.n_nodes;
    let mut dist = vec![0.0; nn];
    dist[rule.start_node] = 1.0;
    let mut x = vec![0.0; problem.dim()];
    let mut gap = 0.0f64;
    for i in 0..rule.n_steps {
        let next_v = v.layer(i + 1);
        let mut next = vec![0.0; nn];
        for node in 0..nn {
            if dist[node] == 0.0 {
                continue;
            }
            problem.lattice.point_into(node, &mut x);
            let s = rule.stop_prob(i, node);
            let mut val = 0.0;
            if s > 0.0 {
                val += s * problem.rewards.stopping(problem.grid.time(i), &x).unwrap_or(f64::NEG_INFINITY);
            }
            for (k, &w) in rule.kernel(i, node).iter().enumerate() {
                if w == 0.0 || s == 1.0 {
                    continue;
                }
                val += (1.0 - s) * w * continuation_value(problem, tm, i, node, k, &x, next_v);
                let (targets, probs) = tm.row(i, node, k);
                for (&y, &p) in targets.iter().zip(probs) {
                    next[y] += dist[node] * (1.0 - s) * w * p;
                }
            }
            gap = gap.max((val - v.get(i, node)).abs());
        }
        dist = next;
    }
    gap
}

/// One row per `(i, x, atom)` with positive weight:
/// `i,t,x1..xd,atom,weight,stop_prob`.
pub fn write_mstar_csv<W: Write>(problem: &Problem, m: &MStar, out: W) -> Result<(), SelectionError> {
    let io = |e: csv::Error| SelectionError::Io(std::io::Error::other(e.to_string()));
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["i".to_string(), "t".to_string()];
    header.extend((1..=problem.dim()).map(|a| format!("x{a}")));
    header.extend(["atom".to_string(), "weight".to_string(), "stop_prob".to_string()]);
    w.write_record(&header).map_err(io)?;
    let rule = &m.rule;
    for i in 0..rule.n_steps {
        for node in 0..rule.n_nodes {
            for (k, &wt) in rule.kernel(i, node).iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let mut rec = vec![i.to_string(), f17(problem.grid.time(i))];
                rec.extend(problem.lattice.point(node).into_iter().map(f17));
                rec.extend([k.to_string(), f17(wt), f17(rule.stop_prob(i, node))]);
                w.write_record(&rec).map_err(io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins::Builtin;
    use crate::dpp::{backward_induction, build_transition};

    fn tie() -> (Problem, TransitionModel, ValueFunction, PolicyTable) {
        let p = Builtin::named("tie-walk").unwrap().problem().unwrap();
        let tm = build_transition(&p).unwrap();
        let (v, pol) = backward_induction(&p, &tm).unwrap();
        (p, tm, v, pol)
    }

    #[test]
    fn cantor_order_enumerates_pairs() {
        let o = SelectionOrder::new(4, 1);
        let items: Vec<(usize, usize)> = (0..6).map(|n| o.item(n)).map(|(l, f)| (l, f.index())).collect();
        assert_eq!(items, vec![(1, 1), (2, 1), (1, 2), (3, 1), (2, 2), (1, 3)]);
        // Every (layer, index) pair eventually appears.
        let seen: Vec<(usize, usize)> = (0..200).map(|n| o.item(n)).map(|(l, f)| (l, f.index())).collect();
        for l in 1..=4 {
            for j in 1..=5 {
                assert!(seen.contains(&(l, j)));
            }
        }
    }

    #[test]
    fn tie_instance_has_several_vertices_all_optimal() {
        let (p, tm, v, pol) = tie();
        let set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()).unwrap();
        assert!(set.vertex_count() >= 2);
        assert_eq!(set.vertex(0).unwrap(), DiscreteRule::from_policy(&pol, 2, p.initial_node()));
        let v0 = v.initial(&p);
        for idx in 0..set.vertex_count().min(64) {
            assert_eq!(forward_value(&p, &tm, &set.vertex(idx).unwrap()), v0);
        }
        let mix = set.uniform_mixture();
        assert!(set.contains(&mix));
        assert_eq!(forward_value(&p, &tm, &mix), v0);
    }

    #[test]
    fn zero_rewards_make_every_action_optimal() {
        let p = crate::builtins::Builtin::TieWalk(Default::default()).problem().unwrap();
        let p = Problem { rewards: crate::model::RewardSpec::zero(), ..p };
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        let set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()).unwrap();
        assert!((0..4).all(|i| (0..9).all(|n| set.actions(i, n) == [0, 1])));
    }

    #[test]
    fn selection_is_unique_and_keeps_value() {
        let (p, tm, v, _) = tie();
        let set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()).unwrap();
        let order = SelectionOrder::new(p.grid.n_steps(), 1);
        let sel = krylov_select(&p, &tm, &set, order, 64, 1e-10).unwrap();
        assert_eq!(forward_value(&p, &tm, &sel.rule), v.initial(&p));
        assert!(sel.trace.windows(2).all(|w| w[1].surviving <= w[0].surviving));
        assert_eq!(trace_deviation(&p, &tm, &sel, order), 0.0);
        let again = krylov_select(&p, &tm, &set, order, 64, 1e-10).unwrap();
        assert_eq!(sel, again);
    }

    #[test]
    fn singleton_is_returned_unchanged() {
        let (p, tm, v, pol) = tie();
        let mut set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()).unwrap();
        for (c, a) in set.actions.iter_mut().enumerate() {
            *a = vec![pol.atom(c / 9, c % 9)];
        }
        let sel = krylov_select(&p, &tm, &set, SelectionOrder::new(4, 1), 10, 1e-10).unwrap();
        assert_eq!(sel.rule, DiscreteRule::from_policy(&pol, 2, p.initial_node()));
    }

    #[test]
    fn markov_check_and_negative_control() {
        let (p, tm, _, pol) = tie();
        let rule = DiscreteRule::from_policy(&pol, 2, p.initial_node());
        let rep = verify_markov(&rule, &p, &tm, SizeLimits::default()).unwrap();
        assert_eq!(rep.max_tv, 0.0);
        assert!(rep.n_histories > 4);
        // x0 = 0 is node 4. Split at step 0, step back toward the origin at
        // step 1, then at step 2 act on where the chain came from.
        let bad = HistorySwitch { base: rule.clone(), step: 2, node: 4, prev: 3, kernel: vec![0.0, 1.0] };
        let mut base = rule;
        base.kernels[(2 * 9 + 4) * 2..(2 * 9 + 4) * 2 + 2].copy_from_slice(&[1.0, 0.0]);
        base.kernels[4 * 2..4 * 2 + 2].copy_from_slice(&[0.5, 0.5]);
        base.kernels[(9 + 3) * 2..(9 + 3) * 2 + 2].copy_from_slice(&[0.0, 1.0]);
        base.kernels[(9 + 5) * 2..(9 + 5) * 2 + 2].copy_from_slice(&[1.0, 0.0]);
        assert_eq!(verify_markov(&base, &p, &tm, SizeLimits::default()).unwrap().max_tv, 0.0);
        let bad = HistorySwitch { base, ..bad };
        let rep = verify_markov(&bad, &p, &tm, SizeLimits::default()).unwrap();
        assert!(rep.max_tv > 0.0);
        assert_eq!(rep.worst, Some((2, 4)));
    }

    #[test]
    fn mstar_reads_through_kernels() {
        let (p, tm, v, pol) = tie();
        let rule = DiscreteRule::from_policy(&pol, 2, p.initial_node());
        let m = extract_mstar(&rule);
        assert_eq!(m.nu_star.as_ref(), Some(&pol));
        assert_eq!(mstar_attainment(&p, &tm, &v, &m), 0.0);

        let set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()).unwrap();
        let mix = set.uniform_mixture();
        let m = extract_mstar(&mix);
        assert!(m.nu_star.is_none());
        assert_eq!(m.rule.kernel(0, 4), &[0.5, 0.5]);
        assert_eq!(mstar_attainment(&p, &tm, &v, &m), 0.0);
        let c = node_characteristics(&p, 0, 4, m.rule.kernel(0, 4)).unwrap();
        assert_eq!(c.drift, vec![0.0]);
    }

    #[test]
    fn rejects_large_instances() {
        let p = Builtin::named("drift-bang").unwrap().problem().unwrap();
        let tm = build_transition(&p).unwrap();
        let (v, _) = backward_induction(&p, &tm).unwrap();
        assert!(matches!(
            enumerate_optimal_rules(&p, &tm, &v, 1e-10, SizeLimits::default()),
            Err(SelectionError::TooLarge(_))
        ));
    }
}
