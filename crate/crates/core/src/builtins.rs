//! Named problem families with tunable parameters.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lq::ScalarLq;
use crate::model::{
    Axis, Coefficients, ControlSet, Mode, ModelError, Problem, RewardSpec, StateLattice, TimeGrid,
};
use crate::rng::path_rng;

/// Smallest spacing `h` with `dt (drift/h + diffusion/h^2 + rate) <= 1`.
pub fn cfl_spacing(dt: f64, drift: f64, diffusion: f64, jump_rate: f64) -> Result<f64, ModelError> {
    let s = 1.0 - jump_rate * dt;
    if s <= 0.0 {
        return Err(ModelError::InvalidLattice(format!("jump rate {jump_rate} too large for dt {dt}")));
    }
    let bd = dt * drift;
    Ok((bd + (bd * bd + 4.0 * s * dt * diffusion).sqrt()) / (2.0 * s))
}

/// Axis with spacing `h` covering `[min, max]` that has `anchor` as a node.
pub fn anchored_axis(anchor: f64, min: f64, max: f64, h: f64) -> Result<Axis, ModelError> {
    if !(h > 0.0 && max > min && (min..=max).contains(&anchor)) {
        return Err(ModelError::InvalidLattice(format!("cannot place spacing {h} on [{min}, {max}] through {anchor}")));
    }
    let below = ((anchor - min) / h - 1e-9).ceil().max(0.0);
    let above = ((max - anchor) / h - 1e-9).ceil().max(0.0);
    Ok(Axis::new(anchor - below * h, anchor + above * h, h))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqParams {
    pub sigma: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    /// State coefficient of the drift `a x + b u`.
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub u_min: f64,
    pub u_max: f64,
    pub n_atoms: usize,
    /// Lattice is `[-x_max, x_max]`.
    pub x_max: f64,
    /// Lattice spacing; fitted to the CFL bound when absent.
    pub h: Option<f64>,
    /// Jump size and rate; `jump-lq` defaults to `0.5` and `1`.
    pub jump_z: Option<f64>,
    pub jump_rate: Option<f64>,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            q: 1.0,
            r: 1.0,
            g: 1.0,
            a: 0.0,
            b: 1.0,
            x0: 1.0,
            t_end: 1.0,
            n_steps: 200,
            u_min: -2.0,
            u_max: 2.0,
            n_atoms: 41,
            x_max: 3.0,
            h: None,
            jump_z: None,
            jump_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftBangParams {
    pub sigma: f64,
    pub x0: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub x_max: f64,
    pub h: Option<f64>,
}

impl Default for DriftBangParams {
    fn default() -> Self {
        Self { sigma: 0.5, x0: 0.5, t_end: 1.0, n_steps: 100, x_max: 3.0, h: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PutStopParams {
    pub sigma: f64,
    pub strike: f64,
    pub x0: f64,
    pub holding_cost: f64,
    pub discount: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub h: f64,
}

impl Default for PutStopParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            strike: 0.5,
            x0: 0.0,
            holding_cost: 0.125,
            discount: 0.0,
            t_end: 1.0,
            n_steps: 4,
            x_min: -2.0,
            x_max: 2.0,
            h: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TieWalkParams {
    pub n_steps: usize,
    /// Lattice spacing, also the time step.
    pub h: f64,
    pub x_max: f64,
}

impl Default for TieWalkParams {
    fn default() -> Self {
        Self { n_steps: 4, h: 0.25, x_max: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomSmallParams {
    pub n_steps: usize,
    pub n_nodes: usize,
    pub n_atoms: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for RandomSmallParams {
    fn default() -> Self {
        Self { n_steps: 3, n_nodes: 3, n_atoms: 2, mode: Mode::ControlOnly, seed: 0 }
    }
}

/// A named problem family and its parameters, written as
/// `{"builtin": name, "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "builtin", content = "params", rename_all = "kebab-case")]
pub enum Builtin {
    /// `dX = (a X + b u) dt + sigma dW`, reward `-(q x^2 + r u^2)`, `-g x^2`.
    Lq(LqParams),
    /// `lq` plus one compensated jump atom.
    JumpLq(LqParams),
    /// `dX = u dt + sigma dW`, `u in {-1, 1}`, reward `-x^2` running and terminal.
    DriftBang(DriftBangParams),
    /// Optimal stopping of `sigma W` with payoff `e^{-rho t} (K - x)^+` and a
    /// holding cost.
    PutStop(PutStopParams),
    /// Deterministic `dX = u dt`, `u in {-1, 1}`, terminal reward `x^2`; many
    /// optimal actions tie.
    TieWalk(TieWalkParams),
    /// Dyadic random rewards on a small lattice.
    RandomSmall(RandomSmallParams),
}

impl Builtin {
    pub const NAMES: [&'static str; 6] = ["lq", "jump-lq", "drift-bang", "put-stop", "tie-walk", "random-small"];

    /// Builtin with default parameters.
    pub fn named(name: &str) -> Option<Self> {
        Some(match name {
            "lq" => Builtin::Lq(LqParams::default()),
            "jump-lq" => Builtin::JumpLq(LqParams::default()),
            "drift-bang" => Builtin::DriftBang(DriftBangParams::default()),
            "put-stop" => Builtin::PutStop(PutStopParams::default()),
            "tie-walk" => Builtin::TieWalk(TieWalkParams::default()),
            "random-small" => Builtin::RandomSmall(RandomSmallParams::default()),
            _ => return None,
        })
    }

    /// Builtin `name` with `params` overriding the defaults.
    pub fn from_parts(name: &str, params: serde_json::Value) -> Result<Self, serde_json::Error> {
        use serde::de::Error;
        let params = if params.is_null() { serde_json::Value::Object(Default::default()) } else { params };
        Ok(match name {
            "lq" => Builtin::Lq(serde_json::from_value(params)?),
            "jump-lq" => Builtin::JumpLq(serde_json::from_value(params)?),
            "drift-bang" => Builtin::DriftBang(serde_json::from_value(params)?),
            "put-stop" => Builtin::PutStop(serde_json::from_value(params)?),
            "tie-walk" => Builtin::TieWalk(serde_json::from_value(params)?),
            "random-small" => Builtin::RandomSmall(serde_json::from_value(params)?),
            _ => return Err(Error::unknown_variant(name, &Self::NAMES)),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Builtin::Lq(_) => "lq",
            Builtin::JumpLq(_) => "jump-lq",
            Builtin::DriftBang(_) => "drift-bang",
            Builtin::PutStop(_) => "put-stop",
            Builtin::TieWalk(_) => "tie-walk",
            Builtin::RandomSmall(_) => "random-small",
        }
    }

    pub fn problem(&self) -> Result<Problem, ModelError> {
        match self {
            Builtin::Lq(p) => lq_problem(p, None),
            Builtin::JumpLq(p) => lq_problem(p, Some((p.jump_z.unwrap_or(0.5), p.jump_rate.unwrap_or(1.0)))),
            Builtin::DriftBang(p) => drift_bang(p),
            Builtin::PutStop(p) => put_stop(p),
            Builtin::TieWalk(p) => tie_walk(p),
            Builtin::RandomSmall(p) => random_small(p),
        }
    }

    /// Riccati data for the linear-quadratic families.
    pub fn riccati(&self) -> Option<ScalarLq> {
        let (p, jump) = match self {
            Builtin::Lq(p) => (p, None),
            Builtin::JumpLq(p) => (p, Some((p.jump_z.unwrap_or(0.5), p.jump_rate.unwrap_or(1.0)))),
            _ => return None,
        };
        let jump_var = jump.map_or(0.0, |(z, rate)| rate * z * z);
        if jump.is_some_and(|(z, _)| z.abs() >= 1.0) {
            // Uncompensated jumps shift the mean; not covered by the recursion.
            return None;
        }
        Some(ScalarLq { a: p.a, b: p.b, noise_var: p.sigma * p.sigma + jump_var, q: p.q, r: p.r, g: p.g })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBuiltin {
    builtin: String,
    #[serde(default)]
    params: serde_json::Value,
}

impl<'de> Deserialize<'de> for Builtin {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = RawBuiltin::deserialize(de)?;
        Builtin::from_parts(&raw.builtin, raw.params).map_err(serde::de::Error::custom)
    }
}

fn check_positive(what: &str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidCoefficients(format!("{what} must be positive, got {v}")))
    }
}

fn lq_problem(p: &LqParams, jump: Option<(f64, f64)>) -> Result<Problem, ModelError> {
    check_positive("r", p.r)?;
    check_positive("x_max", p.x_max)?;
    if p.n_atoms < 1 {
        return Err(ModelError::InvalidControls("n_atoms must be >= 1".into()));
    }
    let grid = TimeGrid::new(0.0, p.t_end, p.n_steps)?;
    let controls = ControlSet::uniform(p.u_min, p.u_max, p.n_atoms)?;
    let umax = p.u_min.abs().max(p.u_max.abs());
    let (z, rate) = jump.unwrap_or((0.0, 0.0));
    let comp = if z.abs() < 1.0 { rate * z.abs() } else { 0.0 };
    let drift_bound = p.a.abs() * p.x_max + p.b.abs() * umax + comp;
    let h = match p.h {
        Some(h) => h,
        None => {
            let h_min = cfl_spacing(grid.dt(), drift_bound, p.sigma * p.sigma, rate)?;
            // Coarsen slightly so that the jump lands on a node.
            if jump.is_some() && z.abs() > h_min {
                z.abs() / (z.abs() / h_min).floor()
            } else {
                h_min
            }
        }
    };
    let lattice = StateLattice::new(vec![anchored_axis(p.x0, -p.x_max, p.x_max, h)?])?;
    let (a, b, s2) = (p.a, p.b, p.sigma * p.sigma);
    let mut coeffs = Coefficients::new(1, move |_, x, u, out| out[0] = a * x[0] + b * u[0], move |_, _, _, out| {
        out[0] = s2
    })
    .time_homogeneous(true);
    if let Some((z, rate)) = jump {
        coeffs = coeffs.with_constant_jump(vec![z], rate)?;
    }
    let (q, r, g) = (p.q, p.r, p.g);
    let rewards = RewardSpec::new(move |_, x, u| -(q * x[0] * x[0] + r * u[0] * u[0]), move |x| -g * x[0] * x[0]);
    Problem::new(grid, lattice, controls, coeffs, rewards, Mode::ControlOnly, vec![p.x0])
}

fn drift_bang(p: &DriftBangParams) -> Result<Problem, ModelError> {
    check_positive("x_max", p.x_max)?;
    let grid = TimeGrid::new(0.0, p.t_end, p.n_steps)?;
    let s2 = p.sigma * p.sigma;
    let h = match p.h {
        Some(h) => h,
        None => cfl_spacing(grid.dt(), 1.0, s2, 0.0)?,
    };
    let lattice = StateLattice::new(vec![anchored_axis(p.x0, -p.x_max, p.x_max, h)?])?;
    let coeffs =
        Coefficients::new(1, |_, _, u, out| out[0] = u[0], move |_, _, _, out| out[0] = s2).time_homogeneous(true);
    let rewards = RewardSpec::new(|_, x, _| -x[0] * x[0], |x| -x[0] * x[0]);
    Problem::new(grid, lattice, ControlSet::scalar(&[-1.0, 1.0])?, coeffs, rewards, Mode::ControlOnly, vec![p.x0])
}

fn put_stop(p: &PutStopParams) -> Result<Problem, ModelError> {
    let grid = TimeGrid::new(0.0, p.t_end, p.n_steps)?;
    let lattice = StateLattice::line(p.x_min, p.x_max, p.h)?;
    let s2 = p.sigma * p.sigma;
    let coeffs = Coefficients::new(1, |_, _, _, out| out[0] = 0.0, move |_, _, _, out| out[0] = s2).time_homogeneous(true);
    let (k, rho, c, t_end) = (p.strike, p.discount, p.holding_cost, p.t_end);
    let payoff = move |t: f64, x: &[f64]| {
        let intrinsic = (k - x[0]).max(0.0);
        if rho == 0.0 {
            intrinsic
        } else {
            (-rho * t).exp() * intrinsic
        }
    };
    let rewards = RewardSpec::new(move |_, _, _| -c, move |x| payoff(t_end, x)).with_stopping(payoff);
    Problem::new(grid, lattice, ControlSet::scalar(&[0.0])?, coeffs, rewards, Mode::StopOnly, vec![p.x0])
}

fn tie_walk(p: &TieWalkParams) -> Result<Problem, ModelError> {
    check_positive("h", p.h)?;
    let grid = TimeGrid::new(0.0, p.n_steps as f64 * p.h, p.n_steps)?;
    let lattice = StateLattice::line(-p.x_max, p.x_max, p.h)?;
    let coeffs = Coefficients::new(1, |_, _, u, out| out[0] = u[0], |_, _, _, out| out[0] = 0.0).time_homogeneous(true);
    let rewards = RewardSpec::new(|_, _, _| 0.0, |x| x[0] * x[0]);
    Problem::new(grid, lattice, ControlSet::scalar(&[-1.0, 1.0])?, coeffs, rewards, Mode::ControlOnly, vec![0.0])
}

/// Dyadic instance: `h = 1/2`, `dt = 1/4`, `a = 1/2`, drift `u` with atoms
/// evenly spaced in `[-1, 1]`, rewards drawn from `{k/16 : |k| <= 16}`.
fn random_small(p: &RandomSmallParams) -> Result<Problem, ModelError> {
    if p.n_nodes < 2 || p.n_atoms < 1 {
        return Err(ModelError::InvalidLattice("random-small needs >= 2 nodes and >= 1 atom".into()));
    }
    let grid = TimeGrid::new(0.0, p.n_steps as f64 * 0.25, p.n_steps)?;
    let half = (p.n_nodes - 1) as f64 * 0.25;
    let lattice = StateLattice::line(-half, half, 0.5)?;
    let controls = if p.n_atoms == 1 { ControlSet::scalar(&[0.0])? } else { ControlSet::uniform(-1.0, 1.0, p.n_atoms)? };
    let coeffs = Coefficients::new(1, |_, _, u, out| out[0] = u[0], |_, _, _, out| out[0] = 0.5).time_homogeneous(true);

    let mut rng = path_rng(p.seed, 0);
    let mut draw = || rng.random_range(-16i32..=16) as f64 / 16.0;
    let (n, nn, na) = (p.n_steps, p.n_nodes, p.n_atoms);
    let running: Arc<Vec<f64>> = Arc::new((0..n * nn * na).map(|_| draw()).collect());
    let terminal: Arc<Vec<f64>> = Arc::new((0..nn).map(|_| draw()).collect());
    let stopping: Arc<Vec<f64>> = Arc::new((0..(n + 1) * nn).map(|_| draw()).collect());

    let atoms: Vec<f64> = controls.atoms().iter().map(|u| u[0]).collect();
    let (lat_r, lat_t, lat_s) = (lattice.clone(), lattice.clone(), lattice.clone());
    let run = move |t: f64, x: &[f64], u: &[f64]| {
        let i = grid.nearest_index(t).min(n - 1);
        let k = atoms.iter().position(|a| *a == u[0]).unwrap_or(0);
        running[(i * nn + lat_r.nearest(x)) * na + k]
    };
    let term = move |x: &[f64]| terminal[lat_t.nearest(x)];
    let mut rewards = RewardSpec::new(run, term);
    if p.mode.has_stopping() {
        rewards = rewards.with_stopping(move |t, x| stopping[grid.nearest_index(t) * nn + lat_s.nearest(x)]);
    }
    let x0 = lattice.point(nn / 2);
    Problem::new(grid, lattice, controls, coeffs, rewards, p.mode, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpp::build_transition;

    #[test]
    fn defaults_build_and_satisfy_cfl() {
        for name in Builtin::NAMES {
            let b = Builtin::named(name).unwrap();
            let p = b.problem().unwrap();
            build_transition(&p).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn params_deserialize_with_defaults() {
        let b: Builtin = serde_json::from_str(r#"{"builtin": "lq", "params": {"sigma": 0.5}}"#).unwrap();
        match &b {
            Builtin::Lq(p) => {
                assert_eq!(p.sigma, 0.5);
                assert_eq!(p.n_steps, 200);
            }
            _ => panic!(),
        }
        let b: Builtin = serde_json::from_str(r#"{"builtin": "put-stop", "params": {}}"#).unwrap();
        assert_eq!(b, Builtin::named("put-stop").unwrap());
        assert!(serde_json::from_str::<Builtin>(r#"{"builtin": "lq", "params": {"sigmaa": 1}}"#).is_err());
        assert!(serde_json::from_str::<Builtin>(r#"{"builtin": "nope", "params": {}}"#).is_err());
        let b: Builtin = serde_json::from_str(r#"{"params": {"sigma": 0.25}, "builtin": "drift-bang"}"#).unwrap();
        assert!(matches!(b, Builtin::DriftBang(DriftBangParams { sigma: 0.25, .. })));
        let b: Builtin = serde_json::from_str(r#"{"builtin": "tie-walk"}"#).unwrap();
        assert_eq!(b, Builtin::named("tie-walk").unwrap());
        let round = serde_json::to_string(&Builtin::named("jump-lq").unwrap()).unwrap();
        assert_eq!(serde_json::from_str::<Builtin>(&round).unwrap(), Builtin::named("jump-lq").unwrap());
    }

    #[test]
    fn cfl_spacing_is_tight() {
        let (dt, b, a, l) = (0.005, 2.5, 0.09, 1.0);
        let h = cfl_spacing(dt, b, a, l).unwrap();
        let total = dt * (b / h + a / (h * h) + l);
        assert!((total - 1.0).abs() < 1e-12);
        let ax = anchored_axis(1.0, -3.0, 3.0, h).unwrap();
        assert!(ax.min <= -3.0 && ax.max >= 3.0);
        let lat = StateLattice::new(vec![ax]).unwrap();
        assert!(lat.node_of(&[1.0]).is_some());
    }

    #[test]
    fn random_small_is_reproducible() {
        let p = RandomSmallParams { seed: 4, mode: Mode::ControlAndStop, ..Default::default() };
        let a = Builtin::RandomSmall(p.clone()).problem().unwrap();
        let b = Builtin::RandomSmall(p).problem().unwrap();
        let x = [0.0];
        assert_eq!(a.rewards.running(0.25, &x, &[1.0]), b.rewards.running(0.25, &x, &[1.0]));
        assert_eq!(a.rewards.stopping(0.5, &x), b.rewards.stopping(0.5, &x));
        assert_eq!(a.lattice.n_nodes(), 3);
    }
}
