use std::io::Write;

use serde_json::{json, Value};

use super::{DppError, PolicyTable, TransitionModel, ValueFunction};
use crate::fmt::{f17, json_num};
use crate::model::Problem;

fn csv_err(e: csv::Error) -> DppError {
    DppError::Io(std::io::Error::other(e.to_string()))
}

fn state_header(problem: &Problem) -> Vec<String> {
    let mut h = vec!["i".to_string(), "t".to_string()];
    h.extend((1..=problem.dim()).map(|a| format!("x{a}")));
    h
}

fn state_cells(problem: &Problem, i: usize, node: usize) -> Vec<String> {
    let mut rec = vec![i.to_string(), f17(problem.grid.time(i))];
    rec.extend(problem.lattice.point(node).into_iter().map(f17));
    rec
}

/// One row per `(i, x)`: `i,t,x1..xd,v`.
pub fn write_value_csv<W: Write>(problem: &Problem, v: &ValueFunction, out: W) -> Result<(), DppError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = state_header(problem);
    header.push("v".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..=v.n_steps() {
        for node in 0..v.n_nodes() {
            let mut rec = state_cells(problem, i, node);
            rec.push(f17(v.get(i, node)));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One row per `(i, x)` with `i < n`: `i,t,x1..xd,atom,u1..um,stop`.
pub fn write_policy_csv<W: Write>(problem: &Problem, policy: &PolicyTable, out: W) -> Result<(), DppError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = state_header(problem);
    header.push("atom".into());
    header.extend((1..=problem.controls.control_dim()).map(|a| format!("u{a}")));
    header.push("stop".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..policy.n_steps() {
        for node in 0..policy.n_nodes() {
            let k = policy.atom(i, node);
            let mut rec = state_cells(problem, i, node);
            rec.push(k.to_string());
            rec.extend(problem.controls.atom(k).iter().map(|u| f17(*u)));
            rec.push(if policy.stops(i, node) { "1" } else { "0" }.into());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// JSON summary of a solve: value at `(t0, x0)`, CFL margin and residuals.
pub fn solve_summary(
    problem: &Problem,
    tm: &TransitionModel,
    v: &ValueFunction,
    dpp_residual: f64,
    vertex_gap: f64,
) -> Value {
    json!({
        "v0": json_num(v.initial(problem)),
        "x0": problem.lattice.point(problem.initial_node()).into_iter().map(json_num).collect::<Vec<_>>(),
        "n_steps": tm.n_steps(),
        "n_nodes": tm.n_nodes(),
        "n_atoms": tm.n_atoms(),
        "scheme": tm.scheme(),
        "cfl_margin": json_num(tm.cfl_margin()),
        "jump_rounding": json_num(tm.jump_rounding()),
        "dpp_residual": json_num(dpp_residual),
        "vertex_gap": json_num(vertex_gap),
    })
}
