//! Monte Carlo test of the martingale property of
//! `C_t = phi(X_t) - int_0^t L phi(s, X_s, u_s) ds` along simulated paths.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fmt::{f17, json_num};
use crate::model::{generator_with_values, GeneratorScratch, ModelError, Problem, TestFunction};
use crate::rng::{mean_stderr, path_rng};
use crate::simulate::{simulate_path, PathSample, Policy, SimConfig, SimError, StopRule};

#[derive(Debug, thiserror::Error)]
pub enum MartError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// `C_i = phi(X_i) - scale * sum_{j < i} L phi(t_j, X_j, u_j) dt_j` along the
/// path, which ends at the stop index when the path was stopped.
///
/// Coefficients are evaluated at the state clamped onto the lattice box, the
/// test function at the state itself. `scale = 1` is the true compensator.
pub fn c_process(problem: &Problem, path: &PathSample, phi: &TestFunction, scale: f64) -> Result<Vec<f64>, MartError> {
    let d = problem.dim();
    let jumps = problem.coeffs.jumps();
    let mut vals = problem.coeffs.values();
    let mut clamped = vec![0.0; d];
    let mut scratch = GeneratorScratch::new(d);
    let end = path.end_index();
    let mut out = Vec::with_capacity(end + 1);
    let mut integral = 0.0;
    for i in 0..=end {
        let x = &path.states[i];
        out.push(phi.value(x) - scale * integral);
        if i < end {
            let t = path.times[i];
            problem.coefficients_at(t, x, path.controls[i], &mut clamped, &mut vals)?;
            let g = generator_with_values(&vals, jumps, phi, x, &mut scratch);
            if !g.is_finite() {
                return Err(MartError::Argument(format!("non-finite generator value at t={t}, x={x:?}")));
            }
            integral += g * (path.times[i + 1] - t);
        }
    }
    Ok(out)
}

/// Value of a stopped sequence at index `i` (frozen after its last entry).
fn frozen(c: &[f64], i: usize) -> f64 {
    c[i.min(c.len() - 1)]
}

/// Shape of a bounded functional of the state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiKind {
    Const,
    Tanh,
    /// Logistic `1 / (1 + exp(-(x_axis - level) / width))`.
    Threshold,
}

/// Bounded functional of the state read at time `at` (the pair's `r` when
/// absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Xi {
    pub kind: XiKind,
    #[serde(default)]
    pub axis: usize,
    #[serde(default)]
    pub level: f64,
    #[serde(default = "default_width")]
    pub width: f64,
    #[serde(default)]
    pub at: Option<f64>,
}

fn default_width() -> f64 {
    0.1
}

impl Xi {
    pub fn constant() -> Self {
        Self { kind: XiKind::Const, axis: 0, level: 0.0, width: default_width(), at: None }
    }

    pub fn tanh(axis: usize) -> Self {
        Self { kind: XiKind::Tanh, axis, ..Self::constant() }
    }

    pub fn threshold(axis: usize, level: f64, width: f64) -> Self {
        Self { kind: XiKind::Threshold, axis, level, width, at: None }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match self.kind {
            XiKind::Const => 1.0,
            XiKind::Tanh => x[self.axis].tanh(),
            XiKind::Threshold => 1.0 / (1.0 + (-(x[self.axis] - self.level) / self.width).exp()),
        }
    }
}

/// `{1, tanh(x_1), smoothed 1{x_1 > x0_1}}`.
pub fn default_xi_family(problem: &Problem) -> Vec<Xi> {
    vec![
        Xi::constant(),
        Xi::tanh(0),
        Xi::threshold(0, problem.initial[0], 0.1),
    ]
}

/// `(t0, T/2)`, `(T/2, T)`, `(t0, T)`.
pub fn default_pairs(problem: &Problem) -> Vec<(f64, f64)> {
    let g = problem.grid;
    let mid = g.time(g.n_steps() / 2);
    vec![(g.t0(), mid), (mid, g.t_end()), (g.t0(), g.t_end())]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    /// Test functions `1..=n_testfns` of the enumeration.
    pub n_testfns: usize,
    pub pairs: Vec<(f64, f64)>,
    pub xis: Vec<Xi>,
    pub z_max: f64,
    /// Combine runs at `dt` and `dt/2` as `2 e(dt/2) - e(dt)`.
    pub richardson: bool,
    /// Multiplier on the compensator; anything but 1 is a deliberate fault.
    pub compensator_scale: f64,
}

impl SuiteConfig {
    pub fn defaults(problem: &Problem) -> Self {
        Self {
            n_testfns: 8,
            pairs: default_pairs(problem),
            xis: default_xi_family(problem),
            z_max: 4.0,
            richardson: true,
            compensator_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartRow {
    pub phi_index: usize,
    pub r: f64,
    pub s: f64,
    pub xi_index: usize,
    pub estimate: f64,
    pub stderr: f64,
    pub z: f64,
    /// Plain estimate at the coarse step.
    pub raw: f64,
    /// Plain estimate at the half step, when Richardson is on.
    pub raw_half: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleReport {
    pub rows: Vec<MartRow>,
    pub pass: bool,
    pub z_max: f64,
    pub max_abs_z: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub richardson: bool,
    pub compensator_scale: f64,
}

impl MartingaleReport {
    pub fn to_json(&self) -> Value {
        json!({
            "pass": self.pass,
            "z_max": json_num(self.z_max),
            "max_abs_z": json_num(self.max_abs_z),
            "n_tests": self.rows.len(),
            "n_paths": self.n_paths,
            "seed": self.seed,
            "richardson": self.richardson,
            "compensator_scale": json_num(self.compensator_scale),
            "note": "each |z| is compared with z_max separately; no family-wise correction",
        })
    }

    /// `phi_index,r,s,xi_index,estimate,stderr,z,raw,raw_half`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MartError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| MartError::Io(std::io::Error::other(e.to_string()));
        w.write_record(["phi_index", "r", "s", "xi_index", "estimate", "stderr", "z", "raw", "raw_half"])
            .map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.phi_index.to_string(),
                f17(r.r),
                f17(r.s),
                r.xi_index.to_string(),
                f17(r.estimate),
                f17(r.stderr),
                f17(r.z),
                f17(r.raw),
                r.raw_half.map(f17).unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Step indices of `(r, s, xi read times)` on a grid.
struct Layout {
    pairs: Vec<(usize, usize)>,
    /// Per (pair, xi): read index.
    reads: Vec<usize>,
}

fn grid_index(grid: &crate::model::TimeGrid, t: f64, what: &str) -> Result<usize, MartError> {
    let i = grid.nearest_index(t);
    if (grid.time(i) - t).abs() > 1e-9 * (1.0 + t.abs()) {
        return Err(MartError::Argument(format!("{what} time {t} is not a grid point")));
    }
    Ok(i)
}

fn layout(grid: &crate::model::TimeGrid, suite: &SuiteConfig) -> Result<Layout, MartError> {
    let mut pairs = Vec::new();
    let mut reads = Vec::new();
    for &(r, s) in &suite.pairs {
        if !(r <= s) {
            return Err(MartError::Argument(format!("pair ({r}, {s}) needs r <= s")));
        }
        let ri = grid_index(grid, r, "r")?;
        let si = grid_index(grid, s, "s")?;
        pairs.push((ri, si));
        for xi in &suite.xis {
            let at = xi.at.unwrap_or(r);
            if at > r + 1e-12 * (1.0 + r.abs()) {
                return Err(MartError::Argument(format!("xi reads the state at {at}, after r = {r}")));
            }
            reads.push(grid_index(grid, at, "xi read")?);
        }
    }
    Ok(Layout { pairs, reads })
}

/// Per-path samples of `xi (C_s - C_r)`, one column per (phi, pair, xi).
fn sample_columns(
    problem: &Problem,
    policy: &Policy,
    stop_rule: Option<&StopRule>,
    n_paths: usize,
    seed: u64,
    stream_offset: u64,
    suite: &SuiteConfig,
) -> Result<Vec<Vec<f64>>, MartError> {
    let grid = policy.step_grid(problem)?;
    let lay = layout(&grid, suite)?;
    let d = problem.dim();
    for xi in &suite.xis {
        if xi.axis >= d {
            return Err(MartError::Argument(format!("xi axis {} out of range for dimension {d}", xi.axis)));
        }
        if xi.kind == XiKind::Threshold && !(xi.width > 0.0) {
            return Err(MartError::Argument(format!("threshold width must be positive, got {}", xi.width)));
        }
    }
    let phis = TestFunction::family(suite.n_testfns, d);
    let n_xi = suite.xis.len();
    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| -> Result<Vec<f64>, MartError> {
            let mut rng = path_rng(seed, stream_offset + p as u64);
            let path = simulate_path(problem, policy, stop_rule, &mut rng)
                .map_err(|e| SimError::Path { path: p, source: Box::new(e) })?;
            let end = path.end_index();
            let mut row = Vec::with_capacity(phis.len() * lay.pairs.len() * n_xi);
            for phi in &phis {
                let c = c_process(problem, &path, phi, suite.compensator_scale)?;
                for (pi, &(ri, si)) in lay.pairs.iter().enumerate() {
                    let inc = frozen(&c, si) - frozen(&c, ri);
                    for (xk, xi) in suite.xis.iter().enumerate() {
                        let read = lay.reads[pi * n_xi + xk].min(end);
                        row.push(xi.eval(&path.states[read]) * inc);
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<_, _>>()?;
    let n_cols = phis.len() * lay.pairs.len() * n_xi;
    Ok((0..n_cols).map(|c| per_path.iter().map(|r| r[c]).collect()).collect())
}

fn z_score(est: f64, se: f64) -> f64 {
    if se > 1e-13 {
        est / se
    } else if est.abs() <= 1e-10 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Estimates `E[xi (C_s - C_r)]` for every test function, pair and `xi`.
///
/// With Richardson on, a second independent batch (streams `n..2n`) runs at
/// half the step and the reported estimate is `2 e(dt/2) - e(dt)`, which
/// removes the first-order discretization bias of the Euler scheme.
pub fn martingale_suite(
    problem: &Problem,
    policy: &Policy,
    stop_rule: Option<&StopRule>,
    config: &SimConfig,
    suite: &SuiteConfig,
) -> Result<MartingaleReport, MartError> {
    if suite.n_testfns == 0 || suite.pairs.is_empty() || suite.xis.is_empty() {
        return Err(MartError::Argument("need at least one test function, pair and xi".into()));
    }
    let n = config.n_paths;
    let coarse = sample_columns(problem, policy, stop_rule, n, config.seed, 0, suite)?;
    let fine = if suite.richardson {
        let (p2, pol2) = match policy {
            Policy::Feedback(_) | Policy::Kernel(_) => (problem.with_steps(2 * problem.grid.n_steps())?, policy.clone()),
            _ => (problem.clone(), policy.refined(2, problem.n_atoms())?),
        };
        Some(sample_columns(&p2, &pol2, stop_rule, n, config.seed, n as u64, suite)?)
    } else {
        None
    };
    let n_xi = suite.xis.len();
    let n_pairs = suite.pairs.len();
    let mut rows = Vec::with_capacity(coarse.len());
    for (col, samples) in coarse.iter().enumerate() {
        let (m1, s1) = mean_stderr(samples);
        let (estimate, stderr, raw_half) = match &fine {
            Some(f) => {
                let (m2, s2) = mean_stderr(&f[col]);
                (2.0 * m2 - m1, (4.0 * s2 * s2 + s1 * s1).sqrt(), Some(m2))
            }
            None => (m1, s1, None),
        };
        let phi_index = col / (n_pairs * n_xi) + 1;
        let pair = (col / n_xi) % n_pairs;
        let (r, s) = suite.pairs[pair];
        rows.push(MartRow {
            phi_index,
            r,
            s,
            xi_index: col % n_xi,
            estimate,
            stderr,
            z: z_score(estimate, stderr),
            raw: m1,
            raw_half,
        });
    }
    let max_abs_z = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    Ok(MartingaleReport {
        pass: max_abs_z <= suite.z_max,
        max_abs_z,
        z_max: suite.z_max,
        rows,
        n_paths: n,
        seed: config.seed,
        richardson: suite.richardson,
        compensator_scale: suite.compensator_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coefficients, ControlSet, Mode, RewardSpec, StateLattice, TimeGrid};
    use std::sync::Arc;

    fn problem(coeffs: Coefficients, n: usize) -> Problem {
        Problem::new(
            TimeGrid::new(0.0, 1.0, n).unwrap(),
            StateLattice::line(-4.0, 4.0, 0.5).unwrap(),
            ControlSet::scalar(&[0.0]).unwrap(),
            coeffs,
            RewardSpec::zero().with_stopping(|_, _| 0.0),
            Mode::ControlOnly,
            vec![0.25],
        )
        .unwrap()
    }

    fn one_path(p: &Problem, stop: Option<&StopRule>) -> PathSample {
        simulate_path(p, &Policy::constant(0), stop, &mut path_rng(0, 0)).unwrap()
    }

    #[test]
    fn constant_phi_gives_constant_c() {
        let p = problem(Coefficients::constant(vec![0.4], vec![1.0]), 10);
        let c = c_process(&p, &one_path(&p, None), &TestFunction::nth(1, 1), 1.0).unwrap();
        assert!(c.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_drift_linear_phi_cancels() {
        let p = problem(Coefficients::constant(vec![1.0], vec![0.0]), 8);
        let c = c_process(&p, &one_path(&p, None), &TestFunction::nth(2, 1), 1.0).unwrap();
        for v in c {
            assert!((v - 0.25).abs() < 1e-14, "{v}");
        }
    }

    #[test]
    fn stopped_c_is_frozen() {
        let p = problem(Coefficients::constant(vec![1.0], vec![0.5]), 10);
        let rule: StopRule = Arc::new(|t, _| t >= 0.3);
        let path = one_path(&p, Some(&rule));
        let c = c_process(&p, &path, &TestFunction::nth(3, 1), 1.0).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(frozen(&c, 3), frozen(&c, 10));
    }

    #[test]
    fn zero_problem_estimates_are_exactly_zero() {
        let p = problem(Coefficients::zero(1), 10);
        let suite = SuiteConfig::defaults(&p);
        let rep =
            martingale_suite(&p, &Policy::constant(0), None, &SimConfig::new(50, 3).unwrap(), &suite).unwrap();
        assert!(rep.rows.iter().all(|r| r.estimate == 0.0 && r.z == 0.0));
        assert!(rep.pass);
        assert_eq!(rep.rows.len(), 8 * 3 * 3);
    }

    #[test]
    fn brownian_square_passes_and_corruption_fails() {
        let p = problem(Coefficients::constant(vec![0.0], vec![1.0]), 20);
        let mut suite = SuiteConfig::defaults(&p);
        suite.n_testfns = 3;
        let cfg = SimConfig::new(10_000, 5).unwrap();
        let rep = martingale_suite(&p, &Policy::constant(0), None, &cfg, &suite).unwrap();
        assert!(rep.pass, "max |z| = {}", rep.max_abs_z);
        suite.compensator_scale = 1.5;
        let bad = martingale_suite(&p, &Policy::constant(0), None, &cfg, &suite).unwrap();
        assert!(!bad.pass);
    }

    #[test]
    fn late_xi_is_rejected() {
        let p = problem(Coefficients::zero(1), 10);
        let mut suite = SuiteConfig::defaults(&p);
        suite.xis = vec![Xi { at: Some(0.9), ..Xi::constant() }];
        suite.pairs = vec![(0.5, 1.0)];
        let err = martingale_suite(&p, &Policy::constant(0), None, &SimConfig::new(4, 0).unwrap(), &suite);
        assert!(matches!(err, Err(MartError::Argument(_))));
    }

    #[test]
    fn xi_deserializes() {
        let xi: Xi = serde_json::from_str(r#"{"kind": "threshold", "axis": 0, "level": 0.5, "width": 0.2}"#).unwrap();
        assert_eq!(xi, Xi::threshold(0, 0.5, 0.2));
        assert!(serde_json::from_str::<Xi>(r#"{"kind": "tanh", "axes": 1}"#).is_err());
    }
}
