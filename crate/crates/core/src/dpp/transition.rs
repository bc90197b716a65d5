use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DppError;
use crate::model::{CoefficientValues, Problem};

/// Difference scheme for the drift part of the chain.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Kushner-Dupuis upwind differences everywhere.
    #[default]
    Upwind,
    /// Central differences on axes where the diffusion dominates the drift
    /// (`a_ii >= |b_i| h_i`), upwind elsewhere.
    Hybrid,
}

/// Successor distribution of every (node, atom) pair for one time step,
/// stored as compressed rows sorted by target node.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionLayer {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    probs: Vec<f64>,
}

impl TransitionLayer {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let total: usize = rows.iter().map(Vec::len).sum();
        let mut targets = Vec::with_capacity(total);
        let mut probs = Vec::with_capacity(total);
        offsets.push(0);
        for row in rows {
            for (t, p) in row {
                targets.push(t);
                probs.push(p);
            }
            offsets.push(targets.len());
        }
        Self { offsets, targets, probs }
    }
}

/// Controlled Markov chain on the state lattice.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    n_steps: usize,
    n_nodes: usize,
    n_atoms: usize,
    layers: Vec<Arc<TransitionLayer>>,
    scheme: Scheme,
    cfl_margin: f64,
    jump_rounding: f64,
}

impl TransitionModel {
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Number of atoms with transition rows (1 in stop-only mode).
    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// `1 - max` total off-diagonal probability; nonnegative by construction.
    pub fn cfl_margin(&self) -> f64 {
        self.cfl_margin
    }

    /// Largest per-axis distance between a jump displacement and its lattice
    /// rounding.
    pub fn jump_rounding(&self) -> f64 {
        self.jump_rounding
    }

    /// Successor nodes and probabilities from `node` at step `i` under atom `k`.
    pub fn row(&self, i: usize, node: usize, k: usize) -> (&[usize], &[f64]) {
        let layer = &self.layers[i];
        let r = node * self.n_atoms + k;
        let (a, b) = (layer.offsets[r], layer.offsets[r + 1]);
        (&layer.targets[a..b], &layer.probs[a..b])
    }

    /// `sum_y p(y) f(y)` over the row.
    pub fn expect(&self, i: usize, node: usize, k: usize, f: &[f64]) -> f64 {
        let (t, p) = self.row(i, node, k);
        t.iter().zip(p).map(|(&y, &q)| q * f[y]).sum()
    }
}

struct RowBuilder<'a> {
    problem: &'a Problem,
    scheme: Scheme,
    dt: f64,
    /// Per jump atom: rounded lattice offset.
    jump_offsets: Vec<Vec<i64>>,
}

impl RowBuilder<'_> {
    /// Returns the sorted row and its total off-diagonal probability.
    fn row(
        &self,
        t: f64,
        node: usize,
        k: usize,
        x: &[f64],
        vals: &mut CoefficientValues,
        drift: &mut [f64],
    ) -> Result<(Vec<(usize, f64)>, f64), DppError> {
        let p = self.problem;
        let lat = &p.lattice;
        let d = p.dim();
        let dt = self.dt;
        p.coeffs.eval_into(t, x, p.controls.atom(k), vals)?;
        vals.process_drift_into(p.coeffs.jumps(), drift);

        let mut moves: Vec<(Vec<i64>, f64)> = Vec::new();
        let unit = |a: usize, s: i64| {
            let mut o = vec![0i64; d];
            o[a] = s;
            o
        };
        for a in 0..d {
            let ha = lat.spacing(a);
            let mut diag = vals.diffusion[a * d + a];
            for b in 0..d {
                if b != a {
                    diag -= vals.diffusion[a * d + b].abs() * ha / lat.spacing(b);
                }
            }
            if diag < -1e-12 * (1.0 + vals.diffusion[a * d + a].abs()) {
                return Err(DppError::NotDiagonallyDominant { t, x: x.to_vec(), atom: k, axis: a });
            }
            let diag = diag.max(0.0);
            let base = dt * diag / (2.0 * ha * ha);
            let b = drift[a];
            let (up, down) = if self.scheme == Scheme::Hybrid && diag >= b.abs() * ha {
                let c = dt * b / (2.0 * ha);
                (base + c, base - c)
            } else {
                (base + dt * b.max(0.0) / ha, base + dt * (-b).max(0.0) / ha)
            };
            moves.push((unit(a, 1), up));
            moves.push((unit(a, -1), down));
            for b in a + 1..d {
                let ab = vals.diffusion[a * d + b];
                if ab == 0.0 {
                    continue;
                }
                let q = dt * ab.abs() / (2.0 * ha * lat.spacing(b));
                let s = if ab > 0.0 { 1 } else { -1 };
                let mut o = vec![0i64; d];
                o[a] = 1;
                o[b] = s;
                moves.push((o.clone(), q));
                moves.push((o.iter().map(|v| -v).collect(), q));
            }
        }
        for (rate, off) in vals.rates.iter().zip(&self.jump_offsets) {
            if *rate > 0.0 {
                moves.push((off.clone(), rate * dt));
            }
        }

        let mut out: Vec<(usize, f64)> = Vec::with_capacity(moves.len() + 1);
        let mut total = 0.0;
        for (off, q) in moves {
            if q == 0.0 || off.iter().all(|&o| o == 0) {
                continue;
            }
            total += q;
            out.push((lat.shifted(node, &off), q));
        }
        out.push((node, 0.0));
        out.sort_by_key(|e| e.0);
        out.dedup_by(|b, a| {
            if a.0 == b.0 {
                a.1 += b.1;
                true
            } else {
                false
            }
        });
        let stay = 1.0 - total;
        if let Some(e) = out.iter_mut().find(|e| e.0 == node) {
            e.1 += stay;
        }
        out.retain(|e| e.1 != 0.0);
        Ok((out, total))
    }
}

struct Worst {
    total: f64,
    i: usize,
    node: usize,
    k: usize,
}

/// Builds the locally consistent chain for `problem`.
///
/// A single layer is shared across time when the coefficients are time
/// homogeneous.
pub fn build_transition(problem: &Problem) -> Result<TransitionModel, DppError> {
    build_transition_with(problem, Scheme::Upwind)
}

pub fn build_transition_with(problem: &Problem, scheme: Scheme) -> Result<TransitionModel, DppError> {
    let lat = &problem.lattice;
    let d = problem.dim();
    let n_nodes = lat.n_nodes();
    let n_atoms = problem.active_atoms();
    let n_steps = problem.grid.n_steps();
    let mut jump_rounding = 0.0f64;
    let jump_offsets: Vec<Vec<i64>> = problem
        .coeffs
        .jumps()
        .iter()
        .map(|j| {
            (0..d)
                .map(|a| {
                    let h = lat.spacing(a);
                    let o = (j.displacement[a] / h).round();
                    jump_rounding = jump_rounding.max((j.displacement[a] - o * h).abs());
                    o as i64
                })
                .collect()
        })
        .collect();
    let builder = RowBuilder { problem, scheme, dt: problem.dt(), jump_offsets };

    let n_layers = if problem.coeffs.is_time_homogeneous() { 1 } else { n_steps };
    let built: Vec<(TransitionLayer, Worst)> = (0..n_layers)
        .into_par_iter()
        .map(|i| build_layer(&builder, i, n_nodes, n_atoms))
        .collect::<Result<_, _>>()?;

    let mut worst = Worst { total: 0.0, i: 0, node: 0, k: 0 };
    let mut layers = Vec::with_capacity(n_layers);
    for (layer, w) in built {
        if w.total > worst.total {
            worst = w;
        }
        layers.push(Arc::new(layer));
    }
    if worst.total > 1.0 + 1e-12 {
        let min_steps = (n_steps as f64 * worst.total).ceil() as usize;
        return Err(DppError::Cfl {
            t: problem.grid.time(worst.i),
            x: lat.point(worst.node),
            atom: worst.k,
            total: worst.total,
            min_steps,
        });
    }
    if n_layers == 1 {
        let shared = layers.pop().expect("one layer");
        layers = vec![shared; n_steps];
    }
    Ok(TransitionModel {
        n_steps,
        n_nodes,
        n_atoms,
        layers,
        scheme,
        cfl_margin: 1.0 - worst.total,
        jump_rounding,
    })
}

fn build_layer(
    builder: &RowBuilder<'_>,
    i: usize,
    n_nodes: usize,
    n_atoms: usize,
) -> Result<(TransitionLayer, Worst), DppError> {
    let p = builder.problem;
    let t = p.grid.time(i);
    let d = p.dim();
    let rows: Vec<(Vec<(usize, f64)>, f64)> = (0..n_nodes * n_atoms)
        .into_par_iter()
        .map_init(
            || (vec![0.0; d], p.coeffs.values(), vec![0.0; d]),
            |(x, vals, drift), r| {
                let node = r / n_atoms;
                let k = r % n_atoms;
                p.lattice.point_into(node, x);
                builder.row(t, node, k, x, vals, drift)
            },
        )
        .collect::<Result<_, _>>()?;
    let mut worst = Worst { total: 0.0, i, node: 0, k: 0 };
    for (r, (_, total)) in rows.iter().enumerate() {
        if *total > worst.total {
            worst = Worst { total: *total, i, node: r / n_atoms, k: r % n_atoms };
        }
    }
    Ok((TransitionLayer::from_rows(rows.into_iter().map(|r| r.0).collect()), worst))
}

/// Worst deviation of the chain's one-step moments from the generator's.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ConsistencyReport {
    /// `max |mean - m dt|` with `m = b0 - sum_{|z|<1} lambda z + sum lambda z`.
    pub mean_error: f64,
    /// `max |cov - (a0 + sum lambda z z^T) dt|`, entrywise.
    pub cov_error: f64,
    pub dt: f64,
    /// Rows checked (nodes whose every move stays inside the lattice).
    pub rows_checked: usize,
}

/// Compares one-step moments with the generator targets at interior nodes.
pub fn consistency_report(problem: &Problem, tm: &TransitionModel) -> Result<ConsistencyReport, DppError> {
    let lat = &problem.lattice;
    let d = problem.dim();
    let dt = problem.dt();
    let jumps = problem.coeffs.jumps();
    let mut rep = ConsistencyReport { dt, ..Default::default() };
    let mut vals = problem.coeffs.values();
    let mut drift = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    let max_reach: Vec<i64> = (0..d)
        .map(|a| {
            let h = lat.spacing(a);
            jumps.iter().map(|j| (j.displacement[a] / h).round().abs() as i64).max().unwrap_or(0).max(1)
        })
        .collect();
    let n_layers = if problem.coeffs.is_time_homogeneous() { 1 } else { tm.n_steps() };
    for i in 0..n_layers {
        let t = problem.grid.time(i);
        for node in 0..tm.n_nodes() {
            let idx = lat.multi_index(node);
            if (0..d).any(|a| (idx[a] as i64) < max_reach[a] || idx[a] as i64 + max_reach[a] >= lat.counts()[a] as i64) {
                continue;
            }
            lat.point_into(node, &mut x);
            for k in 0..tm.n_atoms() {
                problem.coeffs.eval_into(t, &x, problem.controls.atom(k), &mut vals)?;
                vals.process_drift_into(jumps, &mut drift);
                let mut target_cov = vals.diffusion.clone();
                for (rate, j) in vals.rates.iter().zip(jumps) {
                    for a in 0..d {
                        drift[a] += rate * j.displacement[a];
                        for b in 0..d {
                            target_cov[a * d + b] += rate * j.displacement[a] * j.displacement[b];
                        }
                    }
                }
                let (targets, probs) = tm.row(i, node, k);
                let mut mean = vec![0.0; d];
                let mut second = vec![0.0; d * d];
                for (&tg, &q) in targets.iter().zip(probs) {
                    lat.point_into(tg, &mut y);
                    for a in 0..d {
                        let da = y[a] - x[a];
                        mean[a] += q * da;
                        for b in 0..d {
                            second[a * d + b] += q * da * (y[b] - x[b]);
                        }
                    }
                }
                for a in 0..d {
                    rep.mean_error = rep.mean_error.max((mean[a] - drift[a] * dt).abs());
                    for b in 0..d {
                        let cov = second[a * d + b] - mean[a] * mean[b];
                        rep.cov_error = rep.cov_error.max((cov - target_cov[a * d + b] * dt).abs());
                    }
                }
                rep.rows_checked += 1;
            }
        }
    }
    Ok(rep)
}
