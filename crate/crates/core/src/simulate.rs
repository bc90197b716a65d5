//! Monte Carlo for the strong formulation: Euler steps for the diffusion part
//! and exact per-step Poisson counts for the atomic jump kernel.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{CoefficientValues, ModelError, Problem, TimeGrid};
use crate::relaxed::{PiecewiseControl, RelaxedError, YoungMeasure};
use crate::rng::{mean_stderr, path_rng};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("path {path}: {source}")]
    Path { path: usize, source: Box<SimError> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Relaxed(#[from] RelaxedError),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type FeedbackFn = dyn Fn(f64, &[f64]) -> usize + Send + Sync;
pub type KernelFn = dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync;
pub type StopRule = Arc<dyn Fn(f64, &[f64]) -> bool + Send + Sync>;

/// How the applied control atom is chosen at each step.
#[derive(Clone)]
pub enum Policy {
    /// Open-loop control; the simulation steps on the control's own grid.
    Piecewise(PiecewiseControl),
    /// Atom sampled from `m(t_i, .)` independently at each of `substeps`
    /// steps per cell of the problem grid.
    Relaxed { measure: YoungMeasure, substeps: usize },
    /// Markov feedback `(t, x) -> atom`.
    Feedback(Arc<FeedbackFn>),
    /// Markov relaxed feedback `(t, x) -> distribution over atoms`.
    Kernel(Arc<KernelFn>),
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Piecewise(p) => f.debug_tuple("Piecewise").field(&p.grid().n_steps()).finish(),
            Policy::Relaxed { substeps, .. } => f.debug_struct("Relaxed").field("substeps", substeps).finish(),
            Policy::Feedback(_) => f.write_str("Feedback"),
            Policy::Kernel(_) => f.write_str("Kernel"),
        }
    }
}

impl Policy {
    pub fn constant(atom: usize) -> Self {
        Policy::Feedback(Arc::new(move |_, _| atom))
    }

    pub fn feedback<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> usize + Send + Sync + 'static,
    {
        Policy::Feedback(Arc::new(f))
    }

    pub fn kernel<F>(f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        Policy::Kernel(Arc::new(f))
    }

    /// The same policy stepped `factor` times more finely.
    pub fn refined(&self, factor: usize, n_atoms: usize) -> Result<Self, SimError> {
        Ok(match self {
            Policy::Piecewise(nu) => {
                let grid = nu.grid().refine(factor)?;
                let atoms = nu.atoms().iter().flat_map(|&a| std::iter::repeat_n(a, factor)).collect();
                Policy::Piecewise(PiecewiseControl::new(grid, atoms, n_atoms)?)
            }
            Policy::Relaxed { measure, substeps } => {
                Policy::Relaxed { measure: measure.clone(), substeps: substeps * factor }
            }
            other => other.clone(),
        })
    }

    /// Grid on which paths are stepped under this policy.
    pub fn step_grid(&self, problem: &Problem) -> Result<TimeGrid, SimError> {
        let g = problem.grid;
        let same_horizon = |other: &TimeGrid| {
            let tol = 1e-12 * (1.0 + g.t_end().abs());
            (other.t0() - g.t0()).abs() <= tol && (other.t_end() - g.t_end()).abs() <= tol
        };
        match self {
            Policy::Piecewise(nu) => {
                if !same_horizon(nu.grid()) {
                    return Err(SimError::Policy("piecewise control horizon differs from problem".into()));
                }
                Ok(*nu.grid())
            }
            Policy::Relaxed { measure, substeps } => {
                if !same_horizon(measure.grid()) {
                    return Err(SimError::Policy("relaxed control horizon differs from problem".into()));
                }
                if measure.controls() != &problem.controls {
                    return Err(SimError::Policy("relaxed control uses another control set".into()));
                }
                if *substeps == 0 {
                    return Err(SimError::Policy("substeps must be >= 1".into()));
                }
                Ok(g.refine(*substeps)?)
            }
            Policy::Feedback(_) | Policy::Kernel(_) => Ok(g),
        }
    }
}

/// One simulated path on the step grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Atom applied on `[t_i, t_{i+1})`; shorter than `times` by one when the
    /// path runs to the horizon, truncated at the stop index otherwise.
    pub controls: Vec<usize>,
    pub stop_index: Option<usize>,
    pub terminal: bool,
}

impl PathSample {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Last index at which the path is alive (`stop_index` or the horizon).
    pub fn end_index(&self) -> usize {
        self.stop_index.unwrap_or(self.times.len() - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n_paths: usize, seed: u64) -> Result<Self, SimError> {
        if n_paths == 0 {
            return Err(SimError::Config("n_paths must be >= 1".into()));
        }
        Ok(Self { n_paths, seed })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl ValueEstimate {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "mean": crate::fmt::json_num(self.mean),
            "stderr": crate::fmt::json_num(self.stderr),
            "n_paths": self.n_paths,
            "seed": self.seed,
        })
    }
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(a: &[f64], d: usize, out: &mut [f64]) {
    if d == 1 {
        if a[0] < -1e-10 {
            log::warn!("diffusion {} clamped to 0", a[0]);
        }
        out[0] = a[0].max(0.0).sqrt();
        return;
    }
    let m = DMatrix::from_row_slice(d, d, a);
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        log::warn!("diffusion eigenvalue {min} clamped to 0");
    }
    let sq = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose();
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (root[(i, j)] + root[(j, i)]);
        }
    }
}

fn sample_index(weights: &[f64], pick: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = pick * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (k, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        last = k;
        acc += w;
        if target < acc {
            return k;
        }
    }
    last
}

/// Simulates one path from `(t0, x0)`.
///
/// Per step the stream is consumed in a fixed order: one uniform for kernel
/// sampling (drawn for every policy), `d` standard normals, then one Poisson
/// count per jump atom with positive rate.
pub fn simulate_path<R: Rng + ?Sized>(
    problem: &Problem,
    policy: &Policy,
    stop_rule: Option<&StopRule>,
    rng: &mut R,
) -> Result<PathSample, SimError> {
    let grid = policy.step_grid(problem)?;
    let n = grid.n_steps();
    let dt = grid.dt();
    let sqdt = dt.sqrt();
    let d = problem.dim();
    let k_atoms = problem.n_atoms();
    let jumps = problem.coeffs.jumps();

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut x = problem.initial.clone();
    let mut clamped = vec![0.0; d];
    let mut vals = CoefficientValues::new(d, jumps.len());
    let mut drift = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    let mut xi = vec![0.0; d];
    let mut stop_index = None;

    for i in 0..=n {
        let t = grid.time(i);
        times.push(t);
        states.push(x.clone());
        if i == n {
            break;
        }
        if let Some(rule) = stop_rule {
            if rule(t, &x) {
                stop_index = Some(i);
                break;
            }
        }
        let pick: f64 = rng.random();
        let atom = match policy {
            Policy::Piecewise(nu) => nu.atoms()[i],
            Policy::Relaxed { measure, .. } => sample_index(measure.row_at(t), pick),
            Policy::Feedback(f) => f(t, &x),
            Policy::Kernel(f) => {
                let w = f(t, &x);
                if w.len() != k_atoms {
                    return Err(SimError::Policy(format!("kernel has {} weights, {k_atoms} atoms", w.len())));
                }
                sample_index(&w, pick)
            }
        };
        if atom >= k_atoms {
            return Err(SimError::Policy(format!("atom {atom} out of range at step {i}")));
        }
        controls.push(atom);

        problem.coefficients_at(t, &x, atom, &mut clamped, &mut vals)?;
        vals.process_drift_into(jumps, &mut drift);
        psd_sqrt(&vals.diffusion, d, &mut sigma);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for a in 0..d {
            let mut noise = 0.0;
            for b in 0..d {
                noise += sigma[a * d + b] * xi[b];
            }
            x[a] += drift[a] * dt + sqdt * noise;
        }
        for (rate, j) in vals.rates.iter().zip(jumps) {
            let lam = rate * dt;
            if lam > 0.0 {
                let count: f64 = Poisson::new(lam)
                    .map_err(|e| SimError::Policy(format!("poisson rate {lam}: {e}")))?
                    .sample(rng);
                if count > 0.0 {
                    for (xa, z) in x.iter_mut().zip(&j.displacement) {
                        *xa += count * z;
                    }
                }
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step: i + 1 });
        }
    }
    Ok(PathSample { terminal: stop_index.is_none(), times, states, controls, stop_index })
}

/// Running reward up to the stop (or horizon) plus the stopping or terminal
/// reward. Rewards are evaluated at the unclamped state.
pub fn path_reward(problem: &Problem, path: &PathSample) -> Result<f64, SimError> {
    let end = path.end_index();
    let mut acc = 0.0;
    for i in 0..end {
        let dt = path.times[i + 1] - path.times[i];
        let u = problem.controls.atom(path.controls[i]);
        acc += problem.rewards.running(path.times[i], &path.states[i], u) * dt;
    }
    let last = &path.states[end];
    let fin = match path.stop_index {
        Some(s) => problem.stopping_reward(path.times[s], last)?,
        None => problem.rewards.terminal(last),
    };
    Ok(acc + fin)
}

/// Simulates `n_paths` paths; path `p` uses stream `p` of the seed.
pub fn simulate_batch(
    problem: &Problem,
    policy: &Policy,
    stop_rule: Option<&StopRule>,
    config: &SimConfig,
) -> Result<Vec<PathSample>, SimError> {
    (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(config.seed, p as u64);
            simulate_path(problem, policy, stop_rule, &mut rng)
                .map_err(|e| SimError::Path { path: p, source: Box::new(e) })
        })
        .collect()
}

/// Sample mean and standard error of the path reward.
pub fn estimate_value(
    problem: &Problem,
    policy: &Policy,
    stop_rule: Option<&StopRule>,
    config: &SimConfig,
) -> Result<ValueEstimate, SimError> {
    let rewards: Vec<f64> = (0..config.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(config.seed, p as u64);
            simulate_path(problem, policy, stop_rule, &mut rng)
                .and_then(|path| path_reward(problem, &path))
                .map_err(|e| SimError::Path { path: p, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    let (mean, stderr) = mean_stderr(&rewards);
    Ok(ValueEstimate { mean, stderr, n_paths: config.n_paths, seed: config.seed })
}

/// One row per (path, step): `path,step,t,x1..xd,atom,stopped`.
pub fn write_paths_csv<W: Write>(paths: &[PathSample], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    let d = paths.first().map_or(0, |p| p.states[0].len());
    let mut header = vec!["path".to_string(), "step".into(), "t".into()];
    header.extend((1..=d).map(|a| format!("x{a}")));
    header.extend(["atom".to_string(), "stopped".into()]);
    w.write_record(&header).map_err(csv_io)?;
    for (p, path) in paths.iter().enumerate() {
        for (i, (t, x)) in path.times.iter().zip(&path.states).enumerate() {
            let mut rec = vec![p.to_string(), i.to_string(), crate::fmt::f17(*t)];
            rec.extend(x.iter().map(|v| crate::fmt::f17(*v)));
            rec.push(path.controls.get(i).map_or(String::new(), |a| a.to_string()));
            rec.push(if path.stop_index == Some(i) { "1".into() } else { "0".into() });
            w.write_record(&rec).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e.to_string()))
}
