use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, FRAC_PI_8};
use std::io::Write;
use std::sync::Arc;

use corrspace::analysis::{correlation_length, success_stats, wilson_interval, PhaseSample};
use corrspace::compiler::{compile_prep, compile_web_prep};
use corrspace::numerics::random::random_state;
use corrspace::numerics::{cr, fidelity, hadamard, identity, normalized, vector, StateVector, C64};
use corrspace::protocol::{
    build_filter, decode_output, failure_restart_check, localize_simple, localize_web, localize_with_trials,
    required_trials, wire_length,
};
use corrspace::resource::{
    default_right, make_cluster_wire, make_theta_wire, make_theta_wire_with, make_web, CanonicalWire, Coupling,
    WebResource,
};
use corrspace::simulator::{oracle, EnvCache, SimState};
use corrspace::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONFIDENCE: f64 = 0.99;

fn report(n: usize, ok: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {n}: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn shared(cw: &CanonicalWire) -> (Arc<WebResource>, Arc<EnvCache>) {
    let web = Arc::new(WebResource::single(cw.base.clone()));
    let env = Arc::new(EnvCache::new(&web));
    (web, env)
}

fn exhausted(e: &Error) -> bool {
    matches!(e, Error::WireExhausted(_) | Error::RusExhausted(_))
}

#[test]
fn criterion_01_filter_algebra() {
    let mut grid: Vec<f64> = (0..10).map(|k| k as f64 / 10.0).collect();
    grid.push(FRAC_PI_4.cos());
    let mut worst: f64 = 0.0;
    for &r1 in &grid {
        let f = build_filter(r1).unwrap();
        worst = worst.max(f.completeness_defect()).max(f.failure_rank_defect());
    }
    let ok = worst <= 1e-12;
    report(
        1,
        ok,
        &format!("max defect {worst:.3e} over {} values of r1", grid.len()),
    );
    assert!(ok);
}

#[test]
fn criterion_02_single_filter_success() {
    let cw = make_theta_wire(FRAC_PI_8, 200).unwrap();
    let op = build_filter(cw.r1()).unwrap().measurement(&cw.form.m_matrix()).unwrap();
    let (web, env) = shared(&cw);
    let shots = 10_000;
    let mut successes = 0;
    for i in 0..shots {
        let mut sim = SimState::with_env(web.clone(), env.clone(), 2, i as u64);
        let site = sim.retain_site(0).unwrap();
        if sim.apply_measurement(site, &op, None).unwrap() == 0 {
            successes += 1;
        }
    }
    let expected = 1.0 - FRAC_PI_4.cos();
    let (lo, hi) = wilson_interval(successes, shots, CONFIDENCE);
    let ok = lo <= expected && expected <= hi && (expected - 0.29289).abs() < 1e-5;
    report(
        2,
        ok,
        &format!(
            "p_hat {:.5}, 99% CI [{lo:.5}, {hi:.5}], expected {expected:.5}",
            successes as f64 / shots as f64
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_03_repeat_until_success() {
    let probe = make_theta_wire(FRAC_PI_8, 2).unwrap();
    let r1 = probe.r1();
    let l = 5;
    let psi = normalized(&vector(&[cr(0.6), C64::new(0.0, 0.8)])).unwrap();
    let prep = compile_prep(&probe, &psi, 1e-9).unwrap();
    let cw = probe.resized(wire_length(prep.declared_length, l, 1) + 128).unwrap();
    let (web, env) = shared(&cw);
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut skipped = 0;
    for i in 0..10_000u64 {
        let mut sim = SimState::with_env(web.clone(), env.clone(), 3, i);
        match localize_with_trials(&mut sim, 0, &cw, &prep, 1e-3, l) {
            Ok(r) => {
                let first_ok = r.trials[1] > 0;
                first.push(PhaseSample {
                    attempts: r.trials[0],
                    succeeded: first_ok,
                });
                if first_ok {
                    second.push(PhaseSample {
                        attempts: r.trials[1],
                        succeeded: r.succeeded,
                    });
                }
            }
            Err(Error::RusExhausted(_)) => skipped += 1,
            Err(e) => panic!("{e}"),
        }
    }
    let a = success_stats(&first, r1, l, CONFIDENCE).unwrap();
    let b = success_stats(&second, r1, l, CONFIDENCE).unwrap();
    let pa = a.chi_square.map_or(0.0, |c| c.p_value);
    let pb = b.chi_square.map_or(0.0, |c| c.p_value);
    let ok = a.expected_in_ci && b.expected_in_ci && pa > 0.01 && pb > 0.01 && (a.expected - 0.82322).abs() < 1e-5;
    report(
        3,
        ok,
        &format!(
            "phase (i) p_hat {:.5} CI [{:.5}, {:.5}] chi2 p {pa:.3}; phase (iii) p_hat {:.5} CI [{:.5}, {:.5}] chi2 p {pb:.3}; expected {:.5}; {skipped} prep exhaustions",
            a.p_hat, a.ci.0, a.ci.1, b.p_hat, b.ci.0, b.ci.1, a.expected
        ),
    );
    assert!(ok);
}

fn random_target_run(cw: &CanonicalWire, simple: bool, seed: u64) -> (usize, usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (web, env) = shared(cw);
    let mut successes = 0;
    let mut worst: f64 = 1.0;
    let mut runs = 0;
    for i in 0..50u64 {
        let psi = random_state(&mut rng, 2);
        let prep = compile_prep(cw, &psi, 1e-3).unwrap();
        let mut sim = SimState::with_env(web.clone(), env.clone(), seed, i);
        let res = if simple {
            localize_simple(&mut sim, 0, cw, &prep)
        } else {
            let trials = required_trials(1e-3, cw.r1()).unwrap().trials;
            localize_with_trials(&mut sim, 0, cw, &prep, 1e-3, trials)
        };
        runs += 1;
        match res {
            Ok(r) if r.succeeded => {
                successes += 1;
                let decoded = decode_output(&r, &sim).unwrap();
                worst = worst.min(r.fidelity.unwrap()).min(fidelity(&decoded, &psi));
            }
            Ok(_) => {}
            Err(e) if exhausted(&e) => {}
            Err(e) => panic!("{e}"),
        }
    }
    (runs, successes, worst)
}

#[test]
fn criterion_04_localization_correctness() {
    let cluster = make_cluster_wire(12).unwrap();
    let theta = make_theta_wire(FRAC_PI_8, 60).unwrap();
    let (na, sa, fa) = random_target_run(&cluster, true, 41);
    let (nb, sb, fb) = random_target_run(&theta, false, 43);
    let ok = sa > 0 && sb > 0 && fa >= 1.0 - 1e-9 && fb >= 1.0 - 1e-9;
    report(
        4,
        ok,
        &format!("cluster N=12: {sa}/{na} successes, min fidelity {fa:.12}; theta N=60: {sb}/{nb} successes, min fidelity {fb:.12}"),
    );
    assert!(ok);
}

#[test]
fn criterion_05_failed_branch_factorization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_weight: f64 = 1.0;
    let mut worst_tv: f64 = 0.0;
    for i in 0..20u64 {
        let psi = random_state(&mut rng, 2);
        let cw = make_theta_wire_with(FRAC_PI_8, 12, psi, default_right()).unwrap();
        let op = build_filter(cw.r1()).unwrap().measurement(&cw.form.m_matrix()).unwrap();
        let mut sim = SimState::new(Arc::new(WebResource::single(cw.base.clone())), 5, i);
        let site = sim.retain_site(0).unwrap();
        sim.apply_measurement(site, &op, Some(1)).unwrap();
        for (_, w) in oracle::consumed_factor_weights(&sim).unwrap() {
            worst_weight = worst_weight.min(w);
        }
        let check = failure_restart_check(&cw, 1e-3, 5, i).unwrap();
        worst_weight = worst_weight.min(check.factor_weight);
        worst_tv = worst_tv.max(check.restart_tv);
    }
    let ok = worst_weight >= 1.0 - 1e-10 && worst_tv <= 1e-9;
    report(
        5,
        ok,
        &format!("min Schmidt weight {worst_weight:.15}, max restart TV {worst_tv:.3e} over 20 inputs"),
    );
    assert!(ok);
}

fn theta_grid() -> Vec<f64> {
    (1..=20).map(|k| FRAC_PI_4 * (k as f64 / 20.0)).collect()
}

#[test]
fn criterion_06_correlation_length() {
    let mut worst: f64 = 0.0;
    let mut quarter_xi = f64::NAN;
    for theta in theta_grid() {
        let spec = correlation_length(&make_theta_wire(theta, 2).unwrap()).unwrap();
        let got = if spec.xi > 0.0 { (-1.0 / spec.xi).exp() } else { 0.0 };
        let c = (2.0 * theta).cos();
        let want = if c.abs() < 1e-12 { 0.0 } else { c.sqrt() };
        worst = worst.max((got - want).abs());
        if theta == FRAC_PI_4 {
            quarter_xi = spec.xi;
        }
    }
    let ok = worst <= 1e-9 && quarter_xi == 0.0;
    report(
        6,
        ok,
        &format!("max |exp(-1/xi) - sqrt(cos 2theta)| {worst:.3e}, xi(pi/4) = {quarter_xi}"),
    );
    assert!(ok);
}

#[test]
fn criterion_07_trials_bound() {
    let mut worst_margin = f64::INFINITY;
    for &eps in &[1e-1, 1e-2, 1e-3] {
        for theta in theta_grid() {
            let w = make_theta_wire(theta, 2).unwrap();
            let xi = correlation_length(&w).unwrap().xi;
            let l = required_trials(eps, w.r1()).unwrap().trials as f64;
            worst_margin = worst_margin.min(l - (0.5 * (1.0 / eps).ln() * xi - 1.0));
        }
    }
    let ok = worst_margin >= 0.0;
    report(
        7,
        ok,
        &format!("min of trials - (ln(1/eps) xi / 2 - 1) = {worst_margin:.4}"),
    );
    assert!(ok);
}

#[test]
fn criterion_08_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut worst_weight: f64 = 1.0;
    let mut max_qubits = 0;
    for i in 0..200u64 {
        let web = if i % 4 == 3 {
            let n = rng.gen_range(3..=7);
            let a = make_theta_wire(rng.gen_range(0.05..FRAC_PI_4), n).unwrap();
            let b = make_theta_wire(rng.gen_range(0.05..FRAC_PI_4), n).unwrap();
            let col = rng.gen_range(0..n - 1);
            make_web(&[a, b], vec![Coupling::cz(0, 1, col)]).unwrap()
        } else {
            let n = rng.gen_range(3..=14);
            WebResource::single(make_theta_wire(rng.gen_range(0.05..FRAC_PI_4), n).unwrap().base)
        };
        let qubits = web.qubit_count();
        max_qubits = max_qubits.max(qubits);
        let steps = rng.gen_range(1..qubits);
        let check = oracle::random_transcript(Arc::new(web), 8, i, steps).unwrap();
        worst = worst.max(check.max_tv);
        worst_weight = worst_weight.min(check.min_factor_weight);
    }
    let ok = worst <= 1e-9 && worst_weight >= 1.0 - 1e-10 && max_qubits <= 14;
    report(
        8,
        ok,
        &format!("max per-step TV {worst:.3e} over 200 transcripts, up to {max_qubits} qubits"),
    );
    assert!(ok);
}

fn web_bell(cw: CanonicalWire, shots: usize, eps: f64, seed: u64) -> (bool, String) {
    let wires = [cw.clone(), cw.clone()];
    let web = make_web(&wires, vec![Coupling::cz(0, 1, 0)]).unwrap();
    let prep = compile_web_prep(
        &wires,
        &web,
        &[vec![hadamard()], vec![hadamard()]],
        &[identity(2), hadamard()],
        eps,
    )
    .unwrap();
    let bell: StateVector = vector(&[cr(FRAC_1_SQRT_2), cr(0.0), cr(0.0), cr(FRAC_1_SQRT_2)]);
    let web = Arc::new(web);
    let env = Arc::new(EnvCache::new(&web));
    let l = required_trials(eps, cw.r1()).unwrap().trials;
    let mut successes = 0;
    let mut completed = 0;
    let mut worst: f64 = 1.0;
    for i in 0..shots as u64 {
        let mut sim = SimState::with_env(web.clone(), env.clone(), seed, i);
        match localize_web(&mut sim, &wires, &prep, &bell, eps) {
            Ok(out) => {
                completed += 1;
                if out.succeeded {
                    successes += 1;
                    worst = worst.min(out.joint_fidelity.unwrap());
                }
            }
            Err(e) if exhausted(&e) => {}
            Err(e) => panic!("{e}"),
        }
    }
    let expected = (1.0 - cw.r1().powi(l as i32)).powi(4);
    let (lo, hi) = wilson_interval(successes, completed, CONFIDENCE);
    let ok = successes > 0 && worst >= 1.0 - 1e-9 && lo <= expected && expected <= hi;
    let detail = format!(
        "{}: {successes}/{completed} successes, CI [{lo:.4}, {hi:.4}] vs (1-r1^{l})^4 = {expected:.4}, min fidelity {worst:.12}",
        cw.family.name()
    );
    (ok, detail)
}

#[test]
fn criterion_09_web_bell_state() {
    let (ok_c, dc) = web_bell(make_cluster_wire(40).unwrap(), 200, 1e-3, 9);
    let (ok_t, dt) = web_bell(make_theta_wire(FRAC_PI_8, 200).unwrap(), 1000, 1e-2, 10);
    let ok = ok_c && ok_t;
    report(9, ok, &format!("{dc}; {dt}"));
    assert!(ok);
}

#[test]
fn criterion_10_cluster_limit() {
    let cw = make_theta_wire(FRAC_PI_4, 40).unwrap();
    let (web, env) = shared(&cw);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut single = true;
    let mut filter_calls = 0;
    let mut worst: f64 = 1.0;
    for i in 0..200u64 {
        let psi = random_state(&mut rng, 2);
        let prep = compile_prep(&cw, &psi, 1e-3).unwrap();
        let mut sim = SimState::with_env(web.clone(), env.clone(), 10, i);
        let trials = required_trials(1e-3, cw.r1()).unwrap().trials;
        let r = localize_with_trials(&mut sim, 0, &cw, &prep, 1e-3, trials).unwrap();
        single &= r.trials == [1, 1] && r.succeeded;
        filter_calls += sim.transcript().iter().filter(|rec| rec.label == "filter").count();
        worst = worst.min(r.fidelity.unwrap());
    }
    let ok = single && filter_calls == 0 && worst >= 1.0 - 1e-9;
    report(
        10,
        ok,
        &format!(
            "all 200 runs one trial per phase: {single}; filter measurements: {filter_calls}; min fidelity {worst:.12}"
        ),
    );
    assert!(ok);
}
