use relaxctl::builtins::Builtin;
use relaxctl::dpp::{backward_induction, build_transition};
use relaxctl::lq::riccati;
use relaxctl::simulate::{estimate_value, SimConfig};

#[test]
fn lq_lattice_and_monte_carlo_agree_with_riccati() {
    let b = Builtin::named("lq").unwrap();
    let p = b.problem().unwrap();
    let tm = build_transition(&p).unwrap();
    let (v, policy) = backward_induction(&p, &tm).unwrap();
    let vstar = riccati(&b.riccati().unwrap(), &p.grid).value(0, p.initial[0]);
    let lattice = v.initial(&p);
    assert!(((lattice - vstar) / vstar).abs() <= 0.02, "lattice {lattice} vs {vstar}");

    let est = estimate_value(&p, &policy.feedback(&p), None, &SimConfig::new(100_000, 11).unwrap()).unwrap();
    assert!((est.mean - vstar).abs() <= 3.0 * est.stderr, "{est:?} vs {vstar}");
}

#[test]
fn jump_lq_riccati_reference_is_close_to_lattice() {
    let b = Builtin::named("jump-lq").unwrap();
    let p = b.problem().unwrap();
    let tm = build_transition(&p).unwrap();
    let (v, _) = backward_induction(&p, &tm).unwrap();
    let vstar = riccati(&b.riccati().unwrap(), &p.grid).value(0, p.initial[0]);
    assert!(((v.initial(&p) - vstar) / vstar).abs() <= 0.05);
}
