//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines are always printed; exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;

use relaxctl::builtins::{Builtin, RandomSmallParams};
use relaxctl::dpp::{
    backward_induction, build_transition, check_dpp, relaxed_vertex_check, snell_envelope, TransitionModel,
};
use relaxctl::lq::{riccati, ScalarLq};
use relaxctl::martcheck::{martingale_suite, SuiteConfig};
use relaxctl::model::{Mode, TimeGrid};
use relaxctl::oracle::{brute_force_value, OracleLimits};
use relaxctl::relaxed::{chattering_approx, embed_dirac, row_l1_distance, YoungMeasure};
use relaxctl::rng::path_rng;
use relaxctl::selection::{
    enumerate_optimal_rules, extract_mstar, forward_value, krylov_select, verify_markov, DiscreteRule, HistorySwitch,
    SelectionOrder, SizeLimits,
};
use relaxctl::simulate::{estimate_value, Policy, SimConfig};
use relaxctl_cli::{run, Command, RunOptions};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() <= limit_s as f64, format!("took {elapsed:.1?}, limit {limit_s} s"))
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

const BUILTINS: [&str; 6] = Builtin::NAMES;

fn dpp_exactness() -> Check {
    let mut worst = 0.0f64;
    for name in BUILTINS {
        let start = Instant::now();
        let p = Builtin::named(name).unwrap().problem().map_err(e)?;
        let tm = build_transition(&p).map_err(e)?;
        let (v, _) = backward_induction(&p, &tm).map_err(e)?;
        let n = tm.n_steps();
        for j in 0..20 {
            let mut rng = path_rng(1, j);
            let tau: Vec<usize> = (0..tm.n_nodes()).map(|_| rng.random_range(0..=n)).collect();
            let r = check_dpp(&p, &tm, &v, &tau).map_err(e)?;
            ensure(r <= 1e-10, format!("{name}: residual {r:e}"))?;
            worst = worst.max(r);
        }
        within(start.elapsed(), 10).map_err(|m| format!("{name}: {m}"))?;
    }
    Ok(format!("max residual {worst:e} over 20 splice sets on {} built-ins", BUILTINS.len()))
}

fn brute_force_oracle() -> Check {
    let start = Instant::now();
    let mut n_instances = 0;
    for (n_steps, n_nodes, n_atoms) in [(4, 5, 3), (4, 5, 2), (3, 5, 3), (4, 4, 3), (2, 3, 1)] {
        for seed in 0..8 {
            let b = Builtin::RandomSmall(RandomSmallParams { n_steps, n_nodes, n_atoms, mode: Mode::ControlAndStop, seed });
            let p = b.problem().map_err(e)?;
            let tm = build_transition(&p).map_err(e)?;
            let (v, _) = backward_induction(&p, &tm).map_err(e)?;
            for node in 0..n_nodes {
                let o = brute_force_value(&p, &tm, node, OracleLimits::default()).map_err(e)?;
                ensure(
                    o.value == v.get(0, node),
                    format!("{n_steps}x{n_nodes}x{n_atoms} seed {seed} node {node}: {} vs {}", o.value, v.get(0, node)),
                )?;
            }
            n_instances += 1;
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!("{n_instances} control-and-stop instances, every start node equal, {:.1?}", start.elapsed()))
}

fn relaxed_equals_ordinary() -> Check {
    let mut worst = 0.0f64;
    for name in BUILTINS {
        let p = Builtin::named(name).unwrap().problem().map_err(e)?;
        let tm = build_transition(&p).map_err(e)?;
        let (v, _) = backward_induction(&p, &tm).map_err(e)?;
        let gap = relaxed_vertex_check(&p, &tm, &v, 100, 3).map_err(e)?;
        ensure(gap <= 1e-12, format!("{name}: gap {gap:e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("max gap {worst:e} over 100 mixtures per node"))
}

/// Riccati recursion written in closed-loop form, `P_i = (q + r k^2) dt +
/// (1 + (a - b k) dt)^2 P_{i+1}` with the minimizing gain `k`.
fn riccati_closed_loop(lq: &ScalarLq, grid: &TimeGrid) -> (f64, f64) {
    let dt = grid.dt();
    let (mut p, mut c) = (lq.g, 0.0);
    for _ in 0..grid.n_steps() {
        let k = p * lq.b * (1.0 + lq.a * dt) / (lq.r + p * lq.b * lq.b * dt);
        let m = 1.0 + (lq.a - lq.b * k) * dt;
        c += p * lq.noise_var * dt;
        p = (lq.q + lq.r * k * k) * dt + m * m * p;
    }
    (p, c)
}

fn strong_consistency() -> Check {
    let start = Instant::now();
    let b = Builtin::named("lq").unwrap();
    let p = b.problem().map_err(e)?;
    let lq = b.riccati().unwrap();
    let (pp, cc) = riccati_closed_loop(&lq, &p.grid);
    let x0 = p.initial[0];
    let vstar = -(pp * x0 * x0 + cc);
    let lib = riccati(&lq, &p.grid).value(0, x0);
    ensure((lib - vstar).abs() <= 1e-12 * vstar.abs(), format!("Riccati forms disagree: {lib} vs {vstar}"))?;

    let tm = build_transition(&p).map_err(e)?;
    let (v, table) = backward_induction(&p, &tm).map_err(e)?;
    let lattice = v.initial(&p);
    let rel = ((lattice - vstar) / vstar).abs();
    ensure(rel <= 0.02, format!("lattice {lattice} vs v* {vstar}: {:.2}%", 100.0 * rel))?;
    let est = estimate_value(&p, &table.feedback(&p), None, &SimConfig::new(100_000, 5).map_err(e)?).map_err(e)?;
    let z = (est.mean - vstar) / est.stderr;
    ensure(z.abs() <= 3.0, format!("Monte Carlo {} +- {} vs v* {vstar}: z {z:.2}", est.mean, est.stderr))?;
    within(start.elapsed(), 120)?;
    Ok(format!(
        "v* {vstar:.6}, lattice {lattice:.6} ({:.2}%), MC {:.6} +- {:.6} (z {z:.2}), {:.1?}",
        100.0 * rel,
        est.mean,
        est.stderr,
        start.elapsed()
    ))
}

fn chattering_convergence() -> Check {
    let p = Builtin::named("drift-bang").unwrap().problem().map_err(e)?;
    let n = p.grid.n_steps();
    let w: Vec<Vec<f64>> =
        (0..n).map(|i| if i < n / 2 { vec![1.0 / 3.0, 2.0 / 3.0] } else { vec![0.75, 0.25] }).collect();
    let m = YoungMeasure::new(p.grid, p.controls.clone(), w).map_err(e)?;
    let cfg = SimConfig::new(20_000, 3).map_err(e)?;
    let reference = estimate_value(&p, &Policy::Relaxed { measure: m.clone(), substeps: 32 }, None, &cfg).map_err(e)?;
    let mut gaps = Vec::new();
    let mut last_band = 0.0;
    for n_sub in [2, 4, 8, 16, 32] {
        let nu = chattering_approx(&m, n_sub).map_err(e)?;
        let l1 = row_l1_distance(&embed_dirac(&nu, m.grid(), m.controls()).map_err(e)?, &m).map_err(e)?;
        ensure(l1 <= 2.0 / n_sub as f64, format!("n_sub {n_sub}: l1 {l1} > K/n_sub"))?;
        let est = estimate_value(&p, &Policy::Piecewise(nu), None, &cfg).map_err(e)?;
        gaps.push((est.mean - reference.mean).abs());
        last_band = 3.0 * (est.stderr.powi(2) + reference.stderr.powi(2)).sqrt();
    }
    ensure(gaps.windows(2).all(|w| w[1] < w[0]), format!("gaps not decreasing: {gaps:?}"))?;
    let last = gaps[gaps.len() - 1];
    ensure(last <= last_band, format!("gap {last} outside 3-stderr band {last_band} at n_sub 32"))?;
    Ok(format!(
        "gaps {} ; n_sub 32 gap {last:.4} <= band {last_band:.4}",
        gaps.iter().map(|g| format!("{g:.4}")).collect::<Vec<_>>().join(" > ")
    ))
}

fn martingale_verification() -> Check {
    let mut parts = Vec::new();
    for name in ["lq", "jump-lq"] {
        let p = Builtin::named(name).unwrap().problem().map_err(e)?;
        let tm = build_transition(&p).map_err(e)?;
        let (_, table) = backward_induction(&p, &tm).map_err(e)?;
        let policy = table.feedback(&p);
        let cfg = SimConfig::new(10_000, 7).map_err(e)?;
        let mut suite = SuiteConfig::defaults(&p);
        ensure(suite.n_testfns == 8 && suite.richardson && suite.z_max == 4.0, "unexpected suite defaults".into())?;
        let good = martingale_suite(&p, &policy, None, &cfg, &suite).map_err(e)?;
        ensure(good.pass, format!("{name}: suite fails with max |z| {}", good.max_abs_z))?;
        suite.compensator_scale = 1.5;
        let bad = martingale_suite(&p, &policy, None, &cfg, &suite).map_err(e)?;
        ensure(!bad.pass, format!("{name}: corrupted compensator passes (max |z| {})", bad.max_abs_z))?;
        parts.push(format!("{name} max|z| {:.2}, corrupted {:.1}", good.max_abs_z, bad.max_abs_z));
    }
    Ok(parts.join("; "))
}

fn markovian_selection() -> Check {
    let start = Instant::now();
    let p = Builtin::named("tie-walk").unwrap().problem().map_err(e)?;
    let tm: TransitionModel = build_transition(&p).map_err(e)?;
    let (v, _) = backward_induction(&p, &tm).map_err(e)?;
    let limits = SizeLimits::default();
    let set = enumerate_optimal_rules(&p, &tm, &v, 1e-10, limits).map_err(e)?;
    ensure(set.vertex_count() >= 2, format!("only {} vertex rule(s)", set.vertex_count()))?;
    let order = SelectionOrder::new(p.grid.n_steps(), p.dim());
    let sel = krylov_select(&p, &tm, &set, order, 64, 1e-10).map_err(e)?;
    let again = krylov_select(&p, &tm, &set, order, 64, 1e-10).map_err(e)?;
    ensure(sel.rule == again.rule && sel.rule.is_dirac(), "selection not unique".into())?;
    let rep = verify_markov(&sel.rule, &p, &tm, limits).map_err(e)?;
    ensure(rep.max_tv == 0.0, format!("selected rule discrepancy {}", rep.max_tv))?;

    // History-dependent control: split at the origin, step back toward it,
    // then move up or down at step 2 depending on the side it came from.
    let (nn, origin) = (p.lattice.n_nodes(), p.initial_node());
    let k = p.n_atoms();
    let mut kernels = vec![0.0; p.grid.n_steps() * nn * k];
    for c in 0..p.grid.n_steps() * nn {
        kernels[c * k] = 1.0;
    }
    let mut set_row = |i: usize, node: usize, row: [f64; 2]| kernels[(i * nn + node) * k..][..2].copy_from_slice(&row);
    set_row(0, origin, [0.5, 0.5]);
    set_row(1, origin - 1, [0.0, 1.0]);
    set_row(1, origin + 1, [1.0, 0.0]);
    let base = DiscreteRule::new(p.grid.n_steps(), nn, k, origin, kernels, vec![0.0; p.grid.n_steps() * nn]).map_err(e)?;
    let switch = HistorySwitch { base, step: 2, node: origin, prev: origin - 1, kernel: vec![0.0, 1.0] };
    let neg = verify_markov(&switch, &p, &tm, limits).map_err(e)?;
    ensure(neg.max_tv > 0.0, "history-dependent control not flagged".into())?;

    let mstar = extract_mstar(&sel.rule);
    let fwd = forward_value(&p, &tm, &mstar.rule);
    ensure(fwd == v.initial(&p), format!("m* forward value {fwd} vs v0 {}", v.initial(&p)))?;
    within(start.elapsed(), 30)?;
    Ok(format!(
        "{} vertex rules -> 1, discrepancy 0, negative control {:.3}, m* value {fwd} = v0",
        set.vertex_count(),
        neg.max_tv
    ))
}

fn optimal_stopping() -> Check {
    let p = Builtin::named("put-stop").unwrap().problem().map_err(e)?;
    let tm = build_transition(&p).map_err(e)?;
    let (v, _) = snell_envelope(&p, &tm).map_err(e)?;
    let limits = OracleLimits { max_steps: 4, max_nodes: 9, max_atoms: 1 };
    let nn = p.lattice.n_nodes();
    for node in 0..nn {
        let o = brute_force_value(&p, &tm, node, limits).map_err(e)?;
        ensure(o.value == v.get(0, node), format!("node {node}: Snell {} vs enumeration {}", v.get(0, node), o.value))?;
    }
    for i in 0..=p.grid.n_steps() {
        for node in 0..nn {
            let payoff = p.rewards.stopping(p.grid.time(i), &p.lattice.point(node)).unwrap();
            ensure(v.get(i, node) >= payoff, format!("v < payoff at ({i}, {node})"))?;
        }
    }
    Ok(format!("{} steps, {nn} nodes: Snell envelope equals enumeration at every node; v >= payoff", p.grid.n_steps()))
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|f| f.unwrap())
        .filter(|f| f.file_name() != "meta.json")
        .map(|f| (f.file_name().to_string_lossy().into_owned(), fs::read(f.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let runs = [
        (Command::Solve, r#"{"version":1,"seed":4,"problem":{"builtin":"put-stop"}}"#),
        (Command::Simulate, r#"{"version":1,"seed":4,"problem":{"builtin":"lq","params":{"n_steps":50}},"simulate":{"n_paths":2000,"write_paths":3}}"#),
        (Command::Chatter, r#"{"version":1,"seed":4,"problem":{"builtin":"drift-bang","params":{"n_steps":20}},"chatter":{"n_paths":1000,"n_sub":[2,4]}}"#),
        (Command::Martcheck, r#"{"version":1,"seed":4,"problem":{"builtin":"jump-lq","params":{"n_steps":40}},"martcheck":{"n_paths":500}}"#),
        (Command::Select, r#"{"version":1,"seed":4,"problem":{"builtin":"tie-walk"}}"#),
        (Command::Compare, r#"{"version":1,"seed":4,"problem":{"builtin":"lq","params":{"n_steps":50}},"compare":{"n_paths":2000}}"#),
        (Command::Oracle, r#"{"version":1,"seed":4,"problem":{"builtin":"random-small","params":{"mode":"control-and-stop"}}}"#),
    ];
    let mut n_files = 0;
    for (cmd, text) in runs {
        let cfg = tmp.path().join(format!("{}.json", cmd.name()));
        fs::write(&cfg, text).map_err(e)?;
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{}-{rep}", cmd.name()));
            run(cmd, &RunOptions { config: cfg.clone(), out: out.clone(), seed: None }).map_err(e)?;
            outputs.push(files_in(&out));
        }
        ensure(outputs[0] == outputs[1], format!("{}: outputs differ between runs", cmd.name()))?;
        n_files += outputs[0].len();
    }
    Ok(format!("7 commands x 2 runs, {n_files} data files byte-identical"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("discrete DPP exactness", dpp_exactness),
        ("brute-force optimality oracle", brute_force_oracle),
        ("relaxed = ordinary at the vertex", relaxed_equals_ordinary),
        ("strong-formulation consistency (lq)", strong_consistency),
        ("chattering convergence (drift-bang)", chattering_convergence),
        ("martingale-problem verification", martingale_verification),
        ("Markovian selection (tie-walk)", markovian_selection),
        ("optimal stopping (put-stop)", optimal_stopping),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let t = start.elapsed();
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} [{t:.1?}] {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} [{t:.1?}] {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
