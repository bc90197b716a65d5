//! Experiment configuration: one JSON document, schema version 1.
//!
//! ```json
//! {
//!   "version": 1,
//!   "seed": 7,
//!   "problem": { "builtin": "lq", "params": { "n_steps": 200 } },
//!   "simulate": { "n_paths": 100000 }
//! }
//! ```
//!
//! Every command section is optional and falls back to its defaults.

use serde::Deserialize;
use serde_json::Value;

use relaxctl::builtins::Builtin;
use relaxctl::dpp::Scheme;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub problem: ProblemSection,
    #[serde(default)]
    pub solve: SolveSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub chatter: ChatterSection,
    #[serde(default)]
    pub martcheck: MartcheckSection,
    #[serde(default)]
    pub select: SelectSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub builtin: String,
    #[serde(default)]
    pub params: Value,
    /// Replace every reward by zero.
    #[serde(default)]
    pub zero_rewards: bool,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    /// Random splice layers for the DPP check.
    pub n_tau: usize,
    pub n_mixtures: usize,
    pub dpp_tol: f64,
    pub vertex_tol: f64,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self { n_tau: 20, n_mixtures: 100, dpp_tol: 1e-10, vertex_tol: 1e-12 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_paths: usize,
    /// `"solved"` (the backward-induction policy) or `"constant"`.
    pub policy: String,
    /// Atom for the constant policy.
    pub atom: usize,
    /// Number of leading paths written to `paths.csv`.
    pub write_paths: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { n_paths: 10_000, policy: "solved".into(), atom: 0, write_paths: 0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatterSection {
    /// Rows of the relaxed control, one per time cell; a single row is used
    /// for every cell. Defaults to a two-phase non-Dirac measure.
    pub weights: Option<Vec<Vec<f64>>>,
    pub n_sub: Vec<usize>,
    pub n_paths: usize,
    /// Sampling steps per cell for the reference run under `m`.
    pub reference_substeps: usize,
    pub n_testfns: usize,
    /// Width of the agreement band in standard errors.
    pub band: f64,
}

impl Default for ChatterSection {
    fn default() -> Self {
        Self {
            weights: None,
            n_sub: vec![2, 4, 8, 16, 32],
            n_paths: 20_000,
            reference_substeps: 32,
            n_testfns: 8,
            band: 3.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MartcheckSection {
    pub n_paths: usize,
    pub n_testfns: usize,
    pub z_max: f64,
    pub richardson: bool,
    pub compensator_scale: f64,
    /// Also run with the compensator scaled by 1.5, which must fail.
    pub negative_control: bool,
}

impl Default for MartcheckSection {
    fn default() -> Self {
        Self {
            n_paths: 10_000,
            n_testfns: 8,
            z_max: 4.0,
            richardson: true,
            compensator_scale: 1.0,
            negative_control: true,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    pub n_rounds: usize,
    pub tie_tol: f64,
}

impl Default for SelectSection {
    fn default() -> Self {
        Self { n_rounds: 64, tie_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub n_paths: usize,
    pub rel_tol: f64,
    pub n_se: f64,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { n_paths: 100_000, rel_tol: 0.02, n_se: 3.0 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub max_steps: usize,
    pub max_nodes: usize,
    pub max_atoms: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { max_steps: 4, max_nodes: 5, max_atoms: 3 }
    }
}

/// Value at a dotted path such as `chatter.n_sub[1]`.
fn lookup<'a>(root: &'a Value, path: &str) -> Option<&'a Value> {
    let mut v = root;
    for part in path.split('.').filter(|p| !p.is_empty()) {
        let (key, rest) = part.split_once('[').unwrap_or((part, ""));
        v = v.get(key)?;
        for idx in rest.split('[') {
            if let Ok(i) = idx.trim_end_matches(']').parse::<usize>() {
                v = v.get(i)?;
            }
        }
    }
    Some(v)
}

fn field(path: &str, msg: impl Into<String>) -> CliError {
    CliError::Config { path: path.into(), msg: msg.into() }
}

fn positive(path: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return Err(field(path, "must be at least 1"));
    }
    Ok(())
}

fn positive_f(path: &str, v: f64) -> Result<(), CliError> {
    if !(v.is_finite() && v > 0.0) {
        return Err(field(path, format!("must be a positive finite number, got {v}")));
    }
    Ok(())
}

fn nonnegative_f(path: &str, v: f64) -> Result<(), CliError> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(field(path, format!("must be a non-negative finite number, got {v}")));
    }
    Ok(())
}

impl Config {
    /// Parses and range-checks a configuration document.
    pub fn parse(text: &[u8]) -> Result<Self, CliError> {
        let raw: Value = serde_json::from_slice(text).map_err(|e| field("", format!("not valid JSON: {e}")))?;
        let config: Config = serde_path_to_error::deserialize(raw.clone()).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            let mut msg = e.into_inner().to_string();
            if let Some(v) = lookup(&raw, &path) {
                if !v.is_object() && !v.is_array() {
                    msg = format!("{msg} (got {v})");
                }
            }
            field(&path, msg)
        })?;
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(field("version", format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.version)));
        }
        if !self.problem.params.is_null() && !self.problem.params.is_object() {
            return Err(field("problem.params", "must be an object"));
        }
        positive("solve.n_tau", self.solve.n_tau)?;
        positive("solve.n_mixtures", self.solve.n_mixtures)?;
        nonnegative_f("solve.dpp_tol", self.solve.dpp_tol)?;
        nonnegative_f("solve.vertex_tol", self.solve.vertex_tol)?;

        positive("simulate.n_paths", self.simulate.n_paths)?;
        if !matches!(self.simulate.policy.as_str(), "solved" | "constant") {
            return Err(field("simulate.policy", format!("expected \"solved\" or \"constant\", got {:?}", self.simulate.policy)));
        }

        let c = &self.chatter;
        if c.n_sub.is_empty() {
            return Err(field("chatter.n_sub", "must list at least one refinement"));
        }
        for (i, &n) in c.n_sub.iter().enumerate() {
            positive(&format!("chatter.n_sub[{i}]"), n)?;
        }
        positive("chatter.n_paths", c.n_paths)?;
        positive("chatter.reference_substeps", c.reference_substeps)?;
        positive("chatter.n_testfns", c.n_testfns)?;
        positive_f("chatter.band", c.band)?;
        if let Some(w) = &c.weights {
            if w.is_empty() {
                return Err(field("chatter.weights", "must contain at least one row"));
            }
            for (i, row) in w.iter().enumerate() {
                for (k, &x) in row.iter().enumerate() {
                    nonnegative_f(&format!("chatter.weights[{i}][{k}]"), x)?;
                }
            }
        }

        let m = &self.martcheck;
        positive("martcheck.n_paths", m.n_paths)?;
        positive("martcheck.n_testfns", m.n_testfns)?;
        positive_f("martcheck.z_max", m.z_max)?;
        positive_f("martcheck.compensator_scale", m.compensator_scale)?;

        positive("select.n_rounds", self.select.n_rounds)?;
        nonnegative_f("select.tie_tol", self.select.tie_tol)?;

        positive("compare.n_paths", self.compare.n_paths)?;
        positive_f("compare.rel_tol", self.compare.rel_tol)?;
        positive_f("compare.n_se", self.compare.n_se)?;

        positive("oracle.max_steps", self.oracle.max_steps)?;
        positive("oracle.max_nodes", self.oracle.max_nodes)?;
        positive("oracle.max_atoms", self.oracle.max_atoms)?;
        Ok(())
    }

    pub fn builtin(&self) -> Result<Builtin, CliError> {
        let params = self.problem.params.clone();
        Builtin::from_parts(&self.problem.builtin, params).map_err(|e| {
            let path = if Builtin::NAMES.contains(&self.problem.builtin.as_str()) {
                "problem.params"
            } else {
                "problem.builtin"
            };
            field(path, e.to_string())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_path(text: &str) -> String {
        match Config::parse(text.as_bytes()) {
            Err(CliError::Config { path, .. }) => path,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = Config::parse(br#"{"version": 1, "problem": {"builtin": "lq"}}"#).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.solve.n_tau, 20);
        assert_eq!(c.chatter.n_sub, vec![2, 4, 8, 16, 32]);
        assert_eq!(c.problem.scheme, Scheme::Upwind);
        assert!(matches!(c.builtin().unwrap(), Builtin::Lq(_)));
    }

    #[test]
    fn errors_carry_field_paths() {
        assert_eq!(err_path(r#"{"version": 1, "problem": {"builtin": "lq"}, "simulate": {"n_paths": -5}}"#), "simulate.n_paths");
        assert_eq!(err_path(r#"{"version": 1, "problem": {"builtin": "lq"}, "simulate": {"n_paths": 0}}"#), "simulate.n_paths");
        assert_eq!(err_path(r#"{"version": 1, "problem": {"builtin": "lq"}, "solve": {"bogus": 1}}"#), "solve.bogus");
        assert_eq!(err_path(r#"{"version": 2, "problem": {"builtin": "lq"}}"#), "version");
        assert_eq!(err_path(r#"{"version": 1, "problem": {"builtin": "lq"}, "chatter": {"n_sub": [2, 0]}}"#), "chatter.n_sub[1]");
        assert_eq!(err_path(r#"{"version": 1, "problem": {"builtin": "lq", "scheme": "central"}}"#), "problem.scheme");
    }

    #[test]
    fn builtin_errors_point_at_the_problem() {
        let c = Config::parse(br#"{"version": 1, "problem": {"builtin": "nope"}}"#).unwrap();
        assert!(matches!(c.builtin(), Err(CliError::Config { path, .. }) if path == "problem.builtin"));
        let c = Config::parse(br#"{"version": 1, "problem": {"builtin": "lq", "params": {"sigmaa": 1}}}"#).unwrap();
        assert!(matches!(c.builtin(), Err(CliError::Config { path, .. }) if path == "problem.params"));
    }
}
