use std::path::Path;

use rand::Rng;
use serde_json::{json, Value};

use relaxctl::builtins::Builtin;
use relaxctl::dpp::{
    backward_induction, build_transition_with, check_dpp, relaxed_vertex_check, snell_envelope, solve_summary,
    write_policy_csv, write_value_csv, PolicyTable, TransitionModel, ValueFunction,
};
use relaxctl::fmt::{f17, json_num};
use relaxctl::lq::riccati;
use relaxctl::martcheck::{martingale_suite, SuiteConfig};
use relaxctl::model::{Mode, Problem, RewardSpec};
use relaxctl::oracle::{brute_force_value, OracleLimits};
use relaxctl::relaxed::{bl_distance, chattering_approx, default_family, embed_dirac, row_l1_distance, YoungMeasure};
use relaxctl::rng::path_rng;
use relaxctl::selection::{
    enumerate_optimal_rules, extract_mstar, forward_value, krylov_select, mstar_attainment, trace_deviation,
    verify_markov, write_mstar_csv, SelectionOrder, SizeLimits,
};
use relaxctl::simulate::{estimate_value, simulate_batch, write_paths_csv, Policy, SimConfig, StopRule};

use crate::{write_file, CliError, Command, Config, Contracts};

pub struct Context<'a> {
    pub config: &'a Config,
    pub builtin: Builtin,
    pub problem: Problem,
    pub seed: u64,
    pub out: &'a Path,
}

impl<'a> Context<'a> {
    pub fn new(config: &'a Config, seed: u64, out: &'a Path) -> Result<Self, CliError> {
        let builtin = config.builtin()?;
        let mut problem = builtin
            .problem()
            .map_err(|e| CliError::Config { path: "problem.params".into(), msg: e.to_string() })?;
        if config.problem.zero_rewards {
            let mut rewards = RewardSpec::zero();
            if problem.rewards.has_stopping() {
                rewards = rewards.with_stopping(|_, _| 0.0);
            }
            problem.rewards = rewards;
        }
        Ok(Self { config, builtin, problem, seed, out })
    }

    fn transition(&self) -> Result<TransitionModel, CliError> {
        Ok(build_transition_with(&self.problem, self.config.problem.scheme)?)
    }

    fn solve(&self) -> Result<(TransitionModel, ValueFunction, PolicyTable), CliError> {
        let tm = self.transition()?;
        let (v, policy) = backward_induction(&self.problem, &tm)?;
        Ok((tm, v, policy))
    }

    fn write_csv(
        &self,
        files: &mut Vec<String>,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        write_file(self.out, name, &buf)?;
        files.push(name.into());
        Ok(())
    }
}

type Results = (Value, Vec<String>);

pub fn dispatch(command: Command, ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    match command {
        Command::Solve => solve(ctx, c),
        Command::Simulate => simulate(ctx, c),
        Command::Chatter => chatter(ctx, c),
        Command::Martcheck => martcheck(ctx, c),
        Command::Select => select(ctx, c),
        Command::Compare => compare(ctx, c),
        Command::Oracle => oracle(ctx, c),
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io { path: "csv".into(), source: std::io::Error::other(e.to_string()) }
}

fn solve(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.solve;
    let p = &ctx.problem;
    let (tm, v, policy) = ctx.solve()?;
    let n = tm.n_steps();

    let mut dpp = 0.0f64;
    for j in 0..s.n_tau {
        let mut rng = path_rng(ctx.seed, j as u64);
        let tau: Vec<usize> = (0..tm.n_nodes()).map(|_| rng.random_range(0..=n)).collect();
        dpp = dpp.max(check_dpp(p, &tm, &v, &tau)?);
    }
    let gap = relaxed_vertex_check(p, &tm, &v, s.n_mixtures, ctx.seed)?;
    c.check("dpp_residual", dpp <= s.dpp_tol);
    c.check("vertex_gap", gap <= s.vertex_tol);

    let mut summary = solve_summary(p, &tm, &v, dpp, gap);
    if p.mode == Mode::StopOnly {
        let (snell, region) = snell_envelope(p, &tm)?;
        let mut diff = 0.0f64;
        let mut dominates = true;
        let mut x = vec![0.0; p.dim()];
        for i in 0..=n {
            for node in 0..tm.n_nodes() {
                diff = diff.max((snell.get(i, node) - v.get(i, node)).abs());
                p.lattice.point_into(node, &mut x);
                let payoff = p.rewards.stopping(p.grid.time(i), &x).unwrap_or(f64::NEG_INFINITY);
                dominates &= snell.get(i, node) >= payoff;
            }
        }
        let n_stop: usize = (0..=n).map(|i| region.layer(i).iter().filter(|&&b| b).count()).sum();
        c.check("snell_matches_induction", diff == 0.0);
        c.check("value_dominates_payoff", dominates);
        summary["snell_max_diff"] = json_num(diff);
        summary["stop_region_size"] = json!(n_stop);
    }
    let mut files = Vec::new();
    ctx.write_csv(&mut files, "value.csv", |b| Ok(write_value_csv(p, &v, b)?))?;
    ctx.write_csv(&mut files, "policy.csv", |b| Ok(write_policy_csv(p, &policy, b)?))?;
    summary["n_tau"] = json!(s.n_tau);
    summary["n_mixtures"] = json!(s.n_mixtures);
    Ok((summary, files))
}

fn solved_policy(ctx: &Context) -> Result<(ValueFunction, Policy, Option<StopRule>), CliError> {
    let (_, v, table) = ctx.solve()?;
    Ok((v, table.feedback(&ctx.problem), table.stop_rule(&ctx.problem)))
}

fn simulate(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.simulate;
    let p = &ctx.problem;
    let cfg = SimConfig::new(s.n_paths, ctx.seed)?;
    let (lattice_v0, policy, stop) = if s.policy == "solved" {
        let (v, policy, stop) = solved_policy(ctx)?;
        (Some(v.initial(p)), policy, stop)
    } else {
        if s.atom >= p.n_atoms() {
            return Err(CliError::Config {
                path: "simulate.atom".into(),
                msg: format!("atom {} out of range for {} atoms", s.atom, p.n_atoms()),
            });
        }
        (None, Policy::constant(s.atom), None)
    };
    let est = estimate_value(p, &policy, stop.as_ref(), &cfg)?;
    c.check("finite_estimate", est.mean.is_finite() && est.stderr.is_finite());
    let mut files = Vec::new();
    if s.write_paths > 0 {
        let paths = simulate_batch(p, &policy, stop.as_ref(), &SimConfig::new(s.write_paths.min(s.n_paths), ctx.seed)?)?;
        ctx.write_csv(&mut files, "paths.csv", |b| Ok(write_paths_csv(&paths, b)?))?;
    }
    let mut out = json!({ "policy": s.policy, "estimate": est.to_json() });
    if let Some(v0) = lattice_v0 {
        out["lattice_v0"] = json_num(v0);
    }
    Ok((out, files))
}

/// Two-phase measure: weights rising in the atom index on the first half of
/// the horizon, falling on the second.
fn default_young(p: &Problem) -> Vec<Vec<f64>> {
    let k = p.n_atoms();
    let n = p.grid.n_steps();
    let up: Vec<f64> = (0..k).map(|a| (a + 1) as f64).collect();
    let total: f64 = up.iter().sum();
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = up.iter().map(|w| w / total).collect();
            if i >= n / 2 {
                row.reverse();
            }
            row
        })
        .collect()
}

fn chatter(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.chatter;
    let p = &ctx.problem;
    let n = p.grid.n_steps();
    let weights = match &s.weights {
        None => default_young(p),
        Some(w) if w.len() == 1 => vec![w[0].clone(); n],
        Some(w) => w.clone(),
    };
    let m = YoungMeasure::new(p.grid, p.controls.clone(), weights)
        .map_err(|e| CliError::Config { path: "chatter.weights".into(), msg: e.to_string() })?;
    let k = p.n_atoms() as f64;
    let family = default_family(&p.grid, &p.controls, s.n_testfns);
    let cfg = SimConfig::new(s.n_paths, ctx.seed)?;
    let reference = estimate_value(p, &Policy::Relaxed { measure: m.clone(), substeps: s.reference_substeps }, None, &cfg)?;

    let mut rows = Vec::new();
    let mut csv_rows = csv::Writer::from_writer(Vec::new());
    csv_rows
        .write_record(["n_sub", "l1", "l1_bound", "bl", "mc_mean", "mc_stderr", "gap", "band"])
        .map_err(csv_err)?;
    let mut l1_ok = true;
    for &n_sub in &s.n_sub {
        let nu = chattering_approx(&m, n_sub)?;
        let emb = embed_dirac(&nu, m.grid(), m.controls())?;
        let l1 = row_l1_distance(&emb, &m)?;
        let bound = k / n_sub as f64;
        l1_ok &= l1 <= bound + 1e-12;
        let bl = bl_distance(&emb, &m, &family)?;
        let est = estimate_value(p, &Policy::Piecewise(nu), None, &cfg)?;
        let gap = (est.mean - reference.mean).abs();
        let band = s.band * (est.stderr.powi(2) + reference.stderr.powi(2)).sqrt();
        csv_rows
            .write_record([n_sub.to_string(), f17(l1), f17(bound), f17(bl), f17(est.mean), f17(est.stderr), f17(gap), f17(band)])
            .map_err(csv_err)?;
        rows.push((n_sub, l1, bl, est, gap, band));
    }
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    c.check("l1_within_k_over_n_sub", l1_ok);
    c.check("final_gap_within_band", last.4 <= last.5);
    c.check("gap_decreases", rows.len() < 2 || last.4 <= first.4);

    let mut files = Vec::new();
    let bytes = csv_rows.into_inner().map_err(|e| CliError::Io { path: "chatter.csv".into(), source: e.into_error() })?;
    write_file(ctx.out, "chatter.csv", &bytes)?;
    files.push("chatter.csv".into());
    ctx.write_csv(&mut files, "young.csv", |b| Ok(m.write_csv(b)?))?;
    let out = json!({
        "reference": reference.to_json(),
        "reference_substeps": s.reference_substeps,
        "rows": rows.iter().map(|(n_sub, l1, bl, est, gap, band)| json!({
            "n_sub": n_sub,
            "l1": json_num(*l1),
            "bl": json_num(*bl),
            "estimate": est.to_json(),
            "gap": json_num(*gap),
            "band": json_num(*band),
        })).collect::<Vec<_>>(),
    });
    Ok((out, files))
}

fn martcheck(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.martcheck;
    let p = &ctx.problem;
    let (_, policy, stop) = solved_policy(ctx)?;
    let cfg = SimConfig::new(s.n_paths, ctx.seed)?;
    let mut suite = SuiteConfig::defaults(p);
    suite.n_testfns = s.n_testfns;
    suite.z_max = s.z_max;
    suite.richardson = s.richardson;
    suite.compensator_scale = s.compensator_scale;
    let report = martingale_suite(p, &policy, stop.as_ref(), &cfg, &suite)?;
    c.check("suite_passes", report.pass);
    let mut files = Vec::new();
    ctx.write_csv(&mut files, "martcheck.csv", |b| Ok(report.write_csv(b)?))?;
    let mut out = json!({ "suite": report.to_json() });
    if s.negative_control {
        suite.compensator_scale = 1.5 * s.compensator_scale;
        let bad = martingale_suite(p, &policy, stop.as_ref(), &cfg, &suite)?;
        c.check("negative_control_fails", !bad.pass);
        out["negative_control"] = bad.to_json();
    }
    Ok((out, files))
}

fn select(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.select;
    let p = &ctx.problem;
    let (tm, v, _) = ctx.solve()?;
    let limits = SizeLimits::default();
    let set = enumerate_optimal_rules(p, &tm, &v, s.tie_tol, limits)?;
    let order = SelectionOrder::new(tm.n_steps(), p.dim());
    let sel = krylov_select(p, &tm, &set, order, s.n_rounds, s.tie_tol)?;
    let markov = verify_markov(&sel.rule, p, &tm, limits)?;
    let mstar = extract_mstar(&sel.rule);
    let v0 = v.initial(p);
    let forward = forward_value(p, &tm, &mstar.rule);
    let attainment = mstar_attainment(p, &tm, &v, &mstar);
    let deviation = trace_deviation(p, &tm, &sel, order);
    let tol = s.tie_tol * (1.0 + v0.abs());
    c.check("forward_value_matches_v0", (forward - v0).abs() <= tol);
    c.check("markov_discrepancy_zero", markov.max_tv == 0.0);
    c.check("mstar_attains_v", attainment <= tol);
    c.check("trace_reproduced", deviation <= tol);

    let mut files = Vec::new();
    ctx.write_csv(&mut files, "mstar.csv", |b| Ok(write_mstar_csv(p, &mstar, b)?))?;
    if let Some(nu) = &mstar.nu_star {
        ctx.write_csv(&mut files, "policy.csv", |b| Ok(write_policy_csv(p, nu, b)?))?;
    }
    let out = json!({
        "v0": json_num(v0),
        "forward_value": json_num(forward),
        "forward_exact": forward == v0,
        "n_vertices": set.vertex_count().to_string(),
        "n_survivors": sel.survivors.vertex_count().to_string(),
        "n_rounds": s.n_rounds,
        "markov": { "max_tv": json_num(markov.max_tv), "n_histories": markov.n_histories },
        "mstar_dirac": mstar.nu_star.is_some(),
        "attainment_gap": json_num(attainment),
        "trace_deviation": json_num(deviation),
        "trace": sel.trace_json(),
    });
    Ok((out, files))
}

fn compare(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.compare;
    let p = &ctx.problem;
    let lq = ctx.builtin.riccati().ok_or_else(|| CliError::Config {
        path: "problem.builtin".into(),
        msg: "compare needs a linear-quadratic builtin (lq, or jump-lq with |jump_z| < 1)".into(),
    })?;
    if ctx.config.problem.zero_rewards {
        return Err(CliError::Config { path: "problem.zero_rewards".into(), msg: "compare needs the LQ rewards".into() });
    }
    let (_, v, table) = ctx.solve()?;
    let x0 = p.initial[0];
    let vstar = riccati(&lq, &p.grid).value(0, x0);
    let lattice = v.initial(p);
    let rel = ((lattice - vstar) / vstar).abs();
    let est = estimate_value(p, &table.feedback(p), None, &SimConfig::new(s.n_paths, ctx.seed)?)?;
    let z = (est.mean - vstar) / est.stderr;
    c.check("lattice_within_rel_tol", rel <= s.rel_tol);
    c.check("monte_carlo_within_n_se", z.abs() <= s.n_se);
    let out = json!({
        "x0": json_num(x0),
        "riccati_v": json_num(vstar),
        "lattice_v": json_num(lattice),
        "rel_error": json_num(rel),
        "monte_carlo": est.to_json(),
        "z": json_num(z),
    });
    Ok((out, Vec::new()))
}

fn oracle(ctx: &Context, c: &mut Contracts) -> Result<Results, CliError> {
    let s = &ctx.config.oracle;
    let p = &ctx.problem;
    let (tm, v, _) = ctx.solve()?;
    let limits = OracleLimits { max_steps: s.max_steps, max_nodes: s.max_nodes, max_atoms: s.max_atoms };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string()];
    header.extend((1..=p.dim()).map(|a| format!("x{a}")));
    header.extend(["oracle".into(), "lattice".into(), "n_policies".into()]);
    w.write_record(&header).map_err(csv_err)?;
    let mut values = Vec::new();
    let mut equal = true;
    for node in 0..tm.n_nodes() {
        let r = brute_force_value(p, &tm, node, limits)?;
        equal &= r.value == v.get(0, node);
        let mut rec = vec![node.to_string()];
        rec.extend(p.lattice.point(node).into_iter().map(f17));
        rec.extend([f17(r.value), f17(v.get(0, node)), r.n_policies.to_string()]);
        w.write_record(&rec).map_err(csv_err)?;
        values.push(json_num(r.value));
    }
    c.check("oracle_equals_induction", equal);
    let bytes = w.into_inner().map_err(|e| CliError::Io { path: "oracle.csv".into(), source: e.into_error() })?;
    write_file(ctx.out, "oracle.csv", &bytes)?;
    let out = json!({ "v0_oracle": values, "limits": limits });
    Ok((out, vec!["oracle.csv".into()]))
}
