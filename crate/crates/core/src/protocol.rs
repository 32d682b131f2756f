//! Localization of the correlation-space output onto a physical site.
//!
//! A wire prepared in `Σ λ_s |s⟩` (correlation space) is turned into
//! `λ₀|m₀⟩ + λ₁|m₁⟩` on one physical site. For `r₁ = 0` two steps suffice;
//! otherwise a filter `{F, F̄}` is repeated until success in each of the two
//! phases, with the basis change `V′` undoing a failed attempt.

use std::fmt::Write as _;

use crate::compiler::{compile_v, run_pattern, run_web_prep, BasisMap, MeasurementPattern, WebPrepPattern};
use crate::error::{Error, Result};
use crate::numerics::{
    cr, ket0, ket1, ket_minus, ket_plus, kron, normalized, outer, second_singular_value, ComplexMatrix, StateVector,
};
use crate::resource::{CanonicalWire, MAX_EXPAND_QUBITS};
use crate::simulator::{oracle, MeasurementOp, PauliFrame, SimState, Site};

/// Below this `r₁` the filter is the identity and the simple protocol applies.
const R1_ZERO: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct FilterPovm {
    pub r1: f64,
    pub r0: f64,
    /// Success element, in the `{|m₀⟩, |m₁⟩}` basis.
    pub f: ComplexMatrix,
    /// Failure element, in the `{|m₀⟩, |m₁⟩}` basis.
    pub fbar: ComplexMatrix,
    pub chi: StateVector,
}

pub fn build_filter(r1: f64) -> Result<FilterPovm> {
    if !(0.0..1.0).contains(&r1) {
        return Err(Error::OutOfRange(format!("filter needs 0 <= r1 < 1, got {r1}")));
    }
    let r0 = (1.0 - r1 * r1).sqrt();
    let norm = 1.0 / (1.0 + r1).sqrt();
    let f = ComplexMatrix::from_row_slice(2, 2, &[cr(norm), cr(0.0), cr(-r1 * norm), cr(r0 * norm)]);
    let chi = StateVector::from_vec(vec![cr(((1.0 - r1) / 2.0).sqrt()), cr(((1.0 + r1) / 2.0).sqrt())]);
    let fbar = outer(&chi, &chi) * cr((2.0 * r1 / (1.0 + r1)).sqrt());
    Ok(FilterPovm { r1, r0, f, fbar, chi })
}

impl FilterPovm {
    /// The filter as a measurement on a physical site whose `m`-basis is the columns of `m`.
    pub fn measurement(&self, m: &ComplexMatrix) -> Result<MeasurementOp> {
        let to_phys = |k: &ComplexMatrix| m * k * m.adjoint();
        MeasurementOp::new(
            "filter",
            vec![to_phys(&self.f), to_phys(&self.fbar)],
            vec!["success".into(), "failure".into()],
        )
    }

    pub fn completeness_defect(&self) -> f64 {
        let s = self.f.adjoint() * &self.f + self.fbar.adjoint() * &self.fbar;
        crate::numerics::max_abs(&(s - ComplexMatrix::identity(2, 2)))
    }

    pub fn failure_rank_defect(&self) -> f64 {
        second_singular_value(&self.fbar)
    }
}

/// Trial budget for one phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialBound {
    pub trials: usize,
    /// `½·ln(1/ε)·ξ` with `e^{−1/ξ} = √r₁`.
    pub xi_bound: f64,
}

pub fn required_trials(epsilon: f64, r1: f64) -> Result<TrialBound> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfRange(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(0.0..1.0).contains(&r1) {
        return Err(Error::OutOfRange(format!("r1 must lie in [0, 1), got {r1}")));
    }
    if r1 < R1_ZERO {
        return Ok(TrialBound {
            trials: 1,
            xi_bound: 0.0,
        });
    }
    let trials = ((epsilon.ln() / r1.ln()).ceil() as usize).max(1);
    let xi = -1.0 / r1.sqrt().ln();
    let xi_bound = 0.5 * (1.0 / epsilon).ln() * xi;
    assert!(
        trials as f64 >= xi_bound - 1.0,
        "trial count below the correlation-length bound"
    );
    Ok(TrialBound { trials, xi_bound })
}

/// Sites a wire needs for a prep of `prep_sites`, `trials` per phase and
/// basis-change segments of at most `segment_sites`.
pub fn wire_length(prep_sites: usize, trials: usize, segment_sites: usize) -> usize {
    prep_sites + 2 * (trials + 1) * (segment_sites + 1) + 4
}

#[derive(Clone, Debug)]
pub struct LocalizationResult {
    pub wire: usize,
    pub host: Site,
    /// Filter attempts in phase (i) and phase (iii).
    pub trials: [usize; 2],
    pub succeeded: bool,
    /// Logical frame of the host: host = `M·X^x Z^z·|ψ⟩`.
    pub frame: PauliFrame,
    pub m_basis: [StateVector; 2],
    /// Ideal logical state `|ψ⟩`.
    pub target: StateVector,
    pub fidelity: Option<f64>,
    pub uncorrected_fidelity: Option<f64>,
    pub sites_used: usize,
}

impl LocalizationResult {
    fn m_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_columns(&[self.m_basis[0].clone(), self.m_basis[1].clone()])
    }

    /// `|ψ_m⟩ = λ₀|m₀⟩ + λ₁|m₁⟩`.
    pub fn physical_target(&self) -> StateVector {
        self.m_matrix() * &self.target
    }
}

fn run_fresh(sim: &mut SimState, wire: usize, pattern: &MeasurementPattern) -> Result<(PauliFrame, usize)> {
    let saved = sim.frames[wire];
    sim.frames[wire] = PauliFrame::default();
    let stats = run_pattern(sim, wire, pattern);
    let q = sim.frames[wire];
    sim.frames[wire] = saved;
    Ok((q, stats?.sites_used))
}

/// Sign flip picked up by the host when the last site reads `t` after the
/// correlation qubit went through `V` followed by the Pauli `q`.
fn host_correction(q: PauliFrame, t: usize) -> bool {
    let qm = q.matrix();
    let bra = if t == 0 { ket0() } else { ket1() };
    let a = bra.dotc(&(&qm * ket_plus()));
    let b = bra.dotc(&(&qm * ket_minus()));
    (b / a).re < 0.0
}

struct WireRun {
    host: Option<Site>,
    trials: [usize; 2],
    frame: PauliFrame,
    sites: usize,
}

/// Phases (i)–(iii) on a wire whose correlation qubit already holds the
/// prepared state, with its logical frame in `sim.frames[wire]`.
fn localize_prepared(
    sim: &mut SimState,
    wire: usize,
    cw: &CanonicalWire,
    trials: usize,
    epsilon: f64,
) -> Result<WireRun> {
    let r1 = cw.r1();
    if r1 >= 1.0 {
        return Err(Error::OutOfRange("r1 = 1 wires cannot be filtered".into()));
    }
    let simple = r1 < R1_ZERO;
    let filter = build_filter(if simple { 0.0 } else { r1 })?.measurement(&cw.form.m_matrix())?;
    let m_op = MeasurementOp::projective("m", cw.m_basis())?;
    let v = compile_v(cw, BasisMap::V, epsilon)?;
    let vp = compile_v(cw, BasisMap::VPrime, epsilon)?;
    let start = sim.cursor(wire);
    let mut run = WireRun {
        host: None,
        trials: [0, 0],
        frame: sim.frames[wire],
        sites: 0,
    };

    let host = loop {
        if run.trials[0] == trials {
            run.sites = sim.cursor(wire) - start;
            return Ok(run);
        }
        run.trials[0] += 1;
        let site = sim.retain_site(wire)?;
        if simple || sim.apply_measurement(site, &filter, None)? == 0 {
            break site;
        }
        let (q, _) = run_fresh(sim, wire, &vp)?;
        sim.frames[wire] = sim.frames[wire].then(q);
    };
    let logical = sim.frames[wire];
    let (mut q, _) = run_fresh(sim, wire, &v)?;

    let outcome = loop {
        if run.trials[1] == trials {
            run.sites = sim.cursor(wire) - start;
            return Ok(run);
        }
        run.trials[1] += 1;
        if simple {
            let col = sim.cursor(wire);
            break sim.apply_measurement(Site::new(wire, col), &m_op, None)?;
        }
        let site = sim.retain_site(wire)?;
        if sim.apply_measurement(site, &filter, None)? == 0 {
            break sim.apply_measurement(site, &m_op, None)?;
        }
        let (qv, _) = run_fresh(sim, wire, &vp)?;
        q = q.then(qv);
    };
    let c = host_correction(q, outcome);
    run.host = Some(host);
    run.frame = PauliFrame::new(logical.x, logical.z ^ c);
    sim.frames[wire] = PauliFrame::default();
    run.sites = sim.cursor(wire) - start;
    Ok(run)
}

fn physical_correction(frame: PauliFrame, m: &ComplexMatrix) -> ComplexMatrix {
    let mut fix = ComplexMatrix::identity(2, 2);
    if frame.x {
        fix = crate::numerics::pauli_x() * fix;
    }
    if frame.z {
        fix = crate::numerics::pauli_z() * fix;
    }
    m * fix * m.adjoint()
}

/// Reduced state of the host sites: dense oracle when it fits, otherwise the
/// simulator's exact environment contraction.
fn host_density(sim: &SimState, hosts: &[Site]) -> Result<ComplexMatrix> {
    let web = sim.resource();
    if web.qubit_count() <= MAX_EXPAND_QUBITS {
        let full = oracle::conditioned_state(sim)?;
        let qs: Vec<usize> = hosts.iter().map(|h| web.qubit_index(h.wire, h.column)).collect();
        Ok(oracle::reduced_density(&full, web.qubit_count(), &qs))
    } else {
        sim.reduced_density(hosts)
    }
}

/// Fidelity of the hosts, after undoing `frames`, with `(⊗ M_w)·target`.
fn joint_fidelity(
    sim: &SimState,
    results: &[LocalizationResult],
    target: &StateVector,
    corrected: bool,
) -> Result<f64> {
    let hosts: Vec<Site> = results.iter().map(|r| r.host).collect();
    let rho = host_density(sim, &hosts)?;
    let mut fix = ComplexMatrix::identity(1, 1);
    let mut basis = ComplexMatrix::identity(1, 1);
    for r in results {
        let m = r.m_matrix();
        let f = if corrected { r.frame } else { PauliFrame::default() };
        fix = kron(&fix, &physical_correction(f, &m));
        basis = kron(&basis, &m);
    }
    let want = basis * target;
    let rho = &fix * rho * fix.adjoint();
    Ok(crate::numerics::state_fidelity_mixed(&rho, &want))
}

fn finish(
    sim: &SimState,
    wire: usize,
    cw: &CanonicalWire,
    run: WireRun,
    target: StateVector,
    prep_sites: usize,
) -> LocalizationResult {
    let host = run.host;
    LocalizationResult {
        wire,
        host: host.unwrap_or(Site::new(wire, sim.cursor(wire))),
        trials: run.trials,
        succeeded: host.is_some(),
        frame: run.frame,
        m_basis: cw.m_basis().clone(),
        target,
        fidelity: None,
        uncorrected_fidelity: None,
        sites_used: prep_sites + run.sites,
    }
}

fn attach_fidelity(sim: &SimState, result: &mut LocalizationResult) -> Result<()> {
    if result.succeeded {
        let one = std::slice::from_ref(result);
        let target = result.target.clone();
        let f = joint_fidelity(sim, one, &target, true)?;
        let u = joint_fidelity(sim, one, &target, false)?;
        result.fidelity = Some(f);
        result.uncorrected_fidelity = Some(u);
    }
    Ok(())
}

fn prepared_target(cw: &CanonicalWire, prep: &MeasurementPattern) -> Result<StateVector> {
    normalized(&(prep.ideal_operator() * cw.base.left()))
}

/// Two-step protocol for wires with `r₁ = 0`.
pub fn localize_simple(
    sim: &mut SimState,
    wire: usize,
    cw: &CanonicalWire,
    prep: &MeasurementPattern,
) -> Result<LocalizationResult> {
    if cw.r1() >= R1_ZERO {
        return Err(Error::WrongProtocol(format!(
            "simple localization needs r1 = 0, wire has r1 = {}",
            cw.r1()
        )));
    }
    let target = prepared_target(cw, prep)?;
    let prep_sites = run_pattern(sim, wire, prep)?.sites_used;
    let run = localize_prepared(sim, wire, cw, 1, prep.epsilon.clamp(1e-12, 0.5))?;
    let mut result = finish(sim, wire, cw, run, target, prep_sites);
    attach_fidelity(sim, &mut result)?;
    Ok(result)
}

/// Filter-based protocol with a per-phase budget derived from `epsilon`.
pub fn localize_general(
    sim: &mut SimState,
    wire: usize,
    cw: &CanonicalWire,
    prep: &MeasurementPattern,
    epsilon: f64,
) -> Result<LocalizationResult> {
    let trials = required_trials(epsilon, cw.r1())?.trials;
    localize_with_trials(sim, wire, cw, prep, epsilon, trials)
}

/// As `localize_general` with an explicit per-phase trial budget.
pub fn localize_with_trials(
    sim: &mut SimState,
    wire: usize,
    cw: &CanonicalWire,
    prep: &MeasurementPattern,
    epsilon: f64,
    trials: usize,
) -> Result<LocalizationResult> {
    if cw.r1() < R1_ZERO {
        return localize_simple(sim, wire, cw, prep);
    }
    let target = prepared_target(cw, prep)?;
    let prep_sites = run_pattern(sim, wire, prep)?.sites_used;
    let run = localize_prepared(sim, wire, cw, trials.max(1), epsilon)?;
    let mut result = finish(sim, wire, cw, run, target, prep_sites);
    attach_fidelity(sim, &mut result)?;
    Ok(result)
}

/// Logical output state read from the host: `Z^z X^x` applied to `⟨m_s|host⟩`.
pub fn decode_output(result: &LocalizationResult, sim: &SimState) -> Result<StateVector> {
    if !result.succeeded {
        return Err(Error::NotSucceeded);
    }
    let rho = host_density(sim, &[result.host])?;
    let col = if rho[(0, 0)].re >= rho[(1, 1)].re { 0 } else { 1 };
    let host = normalized(&rho.column(col).into_owned())?;
    let logical = result.m_matrix().adjoint() * host;
    normalized(&result.frame.correct(&logical))
}

#[derive(Clone, Debug)]
pub struct WebLocalization {
    pub results: Vec<LocalizationResult>,
    pub succeeded: bool,
    pub joint_fidelity: Option<f64>,
}

/// Prepare a web and localize every wire's logical qubit. `target` is the
/// ideal `M`-qubit state (wire 0 most significant).
pub fn localize_web(
    sim: &mut SimState,
    wires: &[CanonicalWire],
    prep: &WebPrepPattern,
    target: &StateVector,
    epsilon: f64,
) -> Result<WebLocalization> {
    let m = wires.len();
    if sim.resource().wire_count() != m || target.len() != 1 << m {
        return Err(Error::DimensionMismatch("web, wires and target disagree".into()));
    }
    if let Some(last) = sim.resource().last_coupling_column() {
        if last >= prep.columns() {
            return Err(Error::CouplingOrder(format!(
                "coupling at column {last} lies after the localization start column {}",
                prep.columns()
            )));
        }
    }
    let target = normalized(target)?;
    let prep_stats = run_web_prep(sim, prep)?;
    let mut results = Vec::with_capacity(m);
    for (w, cw) in wires.iter().enumerate() {
        let trials = required_trials(epsilon, cw.r1())?.trials;
        let run = localize_prepared(sim, w, cw, trials, epsilon)?;
        results.push(finish(sim, w, cw, run, StateVector::zeros(2), prep_stats[w].sites_used));
    }
    let succeeded = results.iter().all(|r| r.succeeded);
    let joint = if succeeded {
        Some(joint_fidelity(sim, &results, &target, true)?)
    } else {
        None
    };
    Ok(WebLocalization {
        results,
        succeeded,
        joint_fidelity: joint,
    })
}

/// One line per shot followed by its indented transcript.
pub fn report_shot(index: usize, sim: &SimState, results: &[LocalizationResult], fidelity: Option<f64>) -> String {
    let (seed, stream) = sim.seed();
    let mut out = String::new();
    let trials: Vec<String> = results
        .iter()
        .map(|r| format!("{}/{}", r.trials[0], r.trials[1]))
        .collect();
    let ok = results.iter().all(|r| r.succeeded);
    let fid = fidelity.map_or("na".to_string(), |f| format!("{f:.12}"));
    let _ = writeln!(
        out,
        "shot={index} seed={seed} stream={stream} trials={} success={ok} fidelity={fid}",
        trials.join(",")
    );
    for line in sim.transcript_text().lines() {
        let _ = writeln!(out, "  {line}");
    }
    out
}

/// Outcome of forcing one filter failure and running the `V′` recovery.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FailureCheck {
    pub failure_probability: f64,
    /// Largest Schmidt weight of the filtered site against the rest.
    pub factor_weight: f64,
    /// Fidelity of the recovered correlation state with the input.
    pub restart_fidelity: f64,
    /// Max TV over probes between the recovered wire and a fresh one.
    pub restart_tv: f64,
}

/// Force `F̄` on the first site of `cw` (whose left boundary holds the
/// logical input), apply `V′`, and compare with a fresh wire.
pub fn failure_restart_check(cw: &CanonicalWire, epsilon: f64, seed: u64, stream: u64) -> Result<FailureCheck> {
    if cw.r1() < R1_ZERO {
        return Err(Error::WrongProtocol("the filter never fails on r1 = 0 wires".into()));
    }
    let psi = normalized(cw.base.left())?;
    let filter = build_filter(cw.r1())?.measurement(&cw.form.m_matrix())?;
    let vp = compile_v(cw, BasisMap::VPrime, epsilon)?;
    let web = std::sync::Arc::new(crate::resource::WebResource::single(cw.base.clone()));
    let mut sim = SimState::new(web, seed, stream);
    let site = sim.retain_site(0)?;
    let failure_probability = sim.outcome_distribution(site, &filter)?[1];
    sim.apply_measurement(site, &filter, Some(1))?;
    let factor_weight = sim
        .transcript()
        .iter()
        .rev()
        .find_map(|r| r.factor_weight)
        .ok_or(Error::NotFactorized {
            wire: 0,
            column: site.column,
            weight: 0.0,
        })?;
    let (q, _) = run_fresh(&mut sim, 0, &vp)?;
    let restart_fidelity = crate::numerics::fidelity(&q.correct(&sim.correlation_state()?), &psi);
    let rest = sim.remaining(0);
    if rest == 0 {
        return Err(Error::WireExhausted(0));
    }
    let fresh_base = cw
        .base
        .resized(rest)?
        .with_boundaries(q.matrix() * &psi, cw.base.right().clone())?;
    let fresh = SimState::new(
        std::sync::Arc::new(crate::resource::WebResource::single(fresh_base)),
        seed,
        stream,
    );
    let col = sim.cursor(0);
    let mut restart_tv: f64 = 0.0;
    for probe in oracle::default_probes() {
        let a = sim.outcome_distribution(Site::new(0, col), &probe)?;
        let b = fresh.outcome_distribution(Site::new(0, 0), &probe)?;
        let tv = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
        restart_tv = restart_tv.max(tv);
    }
    Ok(FailureCheck {
        failure_probability,
        factor_weight,
        restart_fidelity,
        restart_tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile_prep, compile_web_prep};
    use crate::numerics::random::random_state;
    use crate::numerics::{c, fidelity, hadamard, max_abs, vector};
    use crate::resource::{make_cluster_wire, make_theta_wire, make_theta_wire_with, make_web, Coupling, WebResource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, FRAC_PI_8};
    use std::sync::Arc;

    fn sim_for(cw: &CanonicalWire, seed: u64, stream: u64) -> SimState {
        SimState::new(Arc::new(WebResource::single(cw.base.clone())), seed, stream)
    }

    #[test]
    fn filter_grid() {
        for i in 0..100 {
            let r1 = 0.99 * i as f64 / 99.0;
            let f = build_filter(r1).unwrap();
            assert!(f.completeness_defect() <= 1e-12, "r1 {r1}");
            assert!(f.failure_rank_defect() <= 1e-12);
        }
        let trivial = build_filter(0.0).unwrap();
        assert!(max_abs(&(trivial.f - ComplexMatrix::identity(2, 2))) < 1e-15);
        assert!(max_abs(&trivial.fbar) < 1e-15);
        assert!(build_filter(1.0).is_err());
    }

    #[test]
    fn filter_maps_m_prime() {
        let cw = make_theta_wire(FRAC_PI_8, 4).unwrap();
        let r1 = cw.r1();
        assert!((r1 - FRAC_PI_4.cos()).abs() < 1e-12);
        let f = build_filter(r1).unwrap();
        let m = cw.form.m_matrix();
        let fp = &m * &f.f * m.adjoint();
        let mp = cw.form.m_prime();
        for (s, v) in mp.iter().enumerate() {
            let got = &fp * v;
            let want = &cw.m_basis()[s] * cr((1.0 - r1).sqrt());
            assert!((got - want).norm() <= 1e-12);
        }
    }

    #[test]
    fn trial_counts() {
        assert_eq!(required_trials(0.5, 0.5).unwrap().trials, 1);
        assert_eq!(required_trials(1e-3, FRAC_PI_4.cos()).unwrap().trials, 20);
        assert_eq!(required_trials(1e-3, 0.0).unwrap().trials, 1);
        assert!(required_trials(1e-3, 1.0).is_err());
        for &eps in &[0.3, 1e-2, 1e-5] {
            for &r1 in &[0.1, 0.5, 0.9, 0.99] {
                let l = required_trials(eps, r1).unwrap().trials;
                assert!(1.0 - r1.powi(l as i32) >= 1.0 - eps - 1e-15);
            }
        }
    }

    #[test]
    fn filter_success_probability() {
        let cw = make_theta_wire(FRAC_PI_8, 200).unwrap();
        let mut sim = sim_for(&cw, 1, 0);
        let site = sim.retain_site(0).unwrap();
        let op = build_filter(cw.r1()).unwrap().measurement(&cw.form.m_matrix()).unwrap();
        let p = sim.outcome_distribution(site, &op).unwrap();
        assert!((p[0] - (1.0 - FRAC_PI_4.cos())).abs() < 1e-9, "{}", p[0]);
    }

    #[test]
    fn simple_zero_state_on_cluster() {
        let cw = make_cluster_wire(8).unwrap();
        let prep = compile_prep(&cw, &ket0(), 1e-9).unwrap();
        for seed in 0..8 {
            let mut sim = sim_for(&cw, seed, 0);
            let r = localize_simple(&mut sim, 0, &cw, &prep).unwrap();
            assert!(r.succeeded);
            assert_eq!(r.trials, [1, 1]);
            assert!(r.fidelity.unwrap() > 1.0 - 1e-9);
            assert!(r.uncorrected_fidelity.unwrap() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn simple_random_states_both_branches() {
        let cw = make_cluster_wire(12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [false, false];
        for seed in 0..40 {
            let psi = random_state(&mut rng, 2);
            let prep = compile_prep(&cw, &psi, 1e-9).unwrap();
            let mut sim = sim_for(&cw, seed, 0);
            let r = localize_simple(&mut sim, 0, &cw, &prep).unwrap();
            assert!(r.fidelity.unwrap() > 1.0 - 1e-9);
            let out = decode_output(&r, &sim).unwrap();
            assert!(fidelity(&out, &psi) > 1.0 - 1e-9);
            let last = sim.transcript().last().unwrap().outcome;
            seen[last] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn simple_z_correction_branch() {
        // With an empty prep the frame is trivial, so a Z flip can only come from the last outcome.
        let psi = normalized(&vector(&[c(0.8, 0.0), c(0.0, 0.6)])).unwrap();
        let cw = crate::resource::make_cluster_wire_with(8, psi.clone(), crate::resource::default_right()).unwrap();
        let prep = compile_prep(&cw, &psi, 1e-9).unwrap();
        assert!(prep.is_empty());
        let mut found = false;
        for seed in 0..40 {
            let mut sim = sim_for(&cw, seed, 0);
            let r = localize_simple(&mut sim, 0, &cw, &prep).unwrap();
            if sim.transcript().last().unwrap().outcome == 1 {
                assert!(r.frame.z && !r.frame.x);
                let zpsi = crate::numerics::pauli_z() * &psi;
                let expect = psi.dotc(&zpsi).norm_sqr();
                assert!((r.uncorrected_fidelity.unwrap() - expect).abs() < 1e-9);
                assert!(r.fidelity.unwrap() > 1.0 - 1e-9);
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn simple_rejects_theta() {
        let cw = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let prep = compile_prep(&cw, &ket0(), 1e-3).unwrap();
        let mut sim = sim_for(&cw, 0, 0);
        assert!(matches!(
            localize_simple(&mut sim, 0, &cw, &prep),
            Err(Error::WrongProtocol(_))
        ));
    }

    #[test]
    fn general_theta_success_is_exact() {
        let psi = normalized(&vector(&[cr(FRAC_1_SQRT_2), c(0.0, FRAC_1_SQRT_2)])).unwrap();
        let cw = make_theta_wire(FRAC_PI_8, 18).unwrap();
        let prep = compile_prep(&cw, &psi, 1e-2).unwrap();
        let mut ok = 0;
        for seed in 0..30 {
            let mut sim = sim_for(&cw, seed, 0);
            let r = match localize_with_trials(&mut sim, 0, &cw, &prep, 1e-2, 3) {
                Ok(r) => r,
                Err(Error::WireExhausted(_)) | Err(Error::RusExhausted(_)) => continue,
                Err(e) => panic!("{e}"),
            };
            if r.succeeded {
                ok += 1;
                assert!(r.fidelity.unwrap() > 1.0 - 1e-9, "{:?}", r.fidelity);
                assert!(fidelity(&decode_output(&r, &sim).unwrap(), &psi) > 1.0 - 1e-9);
                for (_, w) in oracle::consumed_factor_weights(&sim).unwrap() {
                    assert!(w > 1.0 - 1e-10);
                }
            } else {
                assert!(decode_output(&r, &sim).is_err());
            }
        }
        assert!(ok > 0);
    }

    #[test]
    fn theta_quarter_delegates() {
        let cw = make_theta_wire(FRAC_PI_4, 12).unwrap();
        assert!(cw.r1() < R1_ZERO);
        let prep = compile_prep(&cw, &ket_plus(), 1e-3).unwrap();
        let mut sim = sim_for(&cw, 4, 0);
        let r = localize_general(&mut sim, 0, &cw, &prep, 1e-3).unwrap();
        assert_eq!(r.trials, [1, 1]);
        assert!(r.fidelity.unwrap() > 1.0 - 1e-9);
    }

    #[test]
    fn failure_then_recovery_restores_phi() {
        let psi = normalized(&vector(&[c(0.6, 0.1), c(0.3, -0.7)])).unwrap();
        let n = 12;
        let cw = make_theta_wire_with(FRAC_PI_8, n, psi.clone(), crate::resource::default_right()).unwrap();
        let filter = build_filter(cw.r1()).unwrap().measurement(&cw.form.m_matrix()).unwrap();
        let vp = compile_v(&cw, BasisMap::VPrime, 1e-3).unwrap();
        let mut sim = sim_for(&cw, 0, 0);
        let site = sim.retain_site(0).unwrap();
        sim.apply_measurement(site, &filter, Some(1)).unwrap();
        assert!(oracle::oracle_check(&sim, &oracle::default_probes()).unwrap() < 1e-9);
        assert!(sim.transcript().last().unwrap().factor_weight.unwrap() > 1.0 - 1e-10);
        let (q, used) = run_fresh(&mut sim, 0, &vp).unwrap();
        let restored = q.correct(&sim.correlation_state().unwrap());
        assert!(fidelity(&restored, &psi) > 1.0 - 1e-12);
        // Distributions match a fresh wire started in the restored state.
        let rest = n - 1 - used;
        let fresh_wire =
            make_theta_wire_with(FRAC_PI_8, rest, q.matrix() * &psi, crate::resource::default_right()).unwrap();
        let fresh = sim_for(&fresh_wire, 0, 0);
        for probe in oracle::default_probes() {
            let a = sim.outcome_distribution(Site::new(0, n - rest), &probe).unwrap();
            let b = fresh.outcome_distribution(Site::new(0, 0), &probe).unwrap();
            let tv: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
            assert!(tv < 1e-9);
        }
    }

    #[test]
    fn failure_check_matches_fresh_wire() {
        let psi = normalized(&vector(&[c(0.2, 0.4), c(-0.5, 0.7)])).unwrap();
        let cw = make_theta_wire_with(FRAC_PI_8, 12, psi, crate::resource::default_right()).unwrap();
        let check = failure_restart_check(&cw, 1e-3, 1, 0).unwrap();
        assert!(check.failure_probability > 0.0);
        assert!(check.factor_weight > 1.0 - 1e-10);
        assert!(check.restart_fidelity > 1.0 - 1e-12);
        assert!(check.restart_tv < 1e-9);
        let quarter = make_theta_wire(FRAC_PI_4, 6).unwrap();
        assert!(failure_restart_check(&quarter, 1e-3, 1, 0).is_err());
    }

    #[test]
    fn decode_frame_flip() {
        let r = LocalizationResult {
            wire: 0,
            host: Site::new(0, 0),
            trials: [1, 1],
            succeeded: true,
            frame: PauliFrame::new(false, true),
            m_basis: [ket0(), ket1()],
            target: ket_plus(),
            fidelity: None,
            uncorrected_fidelity: None,
            sites_used: 0,
        };
        let actual = crate::numerics::pauli_z() * ket_plus();
        assert!(fidelity(&actual, &ket_plus()) < 1e-15);
        assert!(fidelity(&r.frame.correct(&actual), &ket_plus()) > 1.0 - 1e-15);
    }

    #[test]
    fn web_product_and_bell() {
        let a = make_cluster_wire(8).unwrap();
        // Uncoupled: H on each wire.
        let web = make_web(&[a.clone(), a.clone()], vec![]).unwrap();
        let prep = compile_web_prep(
            &[a.clone(), a.clone()],
            &web,
            &[vec![], vec![]],
            &[hadamard(), hadamard()],
            1e-6,
        )
        .unwrap();
        let plus2 = crate::numerics::kron_vec(&ket_plus(), &ket_plus());
        let mut sim = SimState::new(Arc::new(web), 3, 0);
        let out = localize_web(&mut sim, &[a.clone(), a.clone()], &prep, &plus2, 1e-3).unwrap();
        assert!(out.joint_fidelity.unwrap() > 1.0 - 1e-9);

        let web = make_web(&[a.clone(), a.clone()], vec![Coupling::cz(0, 1, 0)]).unwrap();
        let id = ComplexMatrix::identity(2, 2);
        let segs = vec![vec![hadamard()], vec![hadamard()]];
        let prep = compile_web_prep(&[a.clone(), a.clone()], &web, &segs, &[id, hadamard()], 1e-6).unwrap();
        let h = FRAC_1_SQRT_2;
        let bell = vector(&[cr(h), cr(0.0), cr(0.0), cr(h)]);
        for seed in 0..10 {
            let mut sim = SimState::new(Arc::new(web.clone()), seed, 0);
            let out = localize_web(&mut sim, &[a.clone(), a.clone()], &prep, &bell, 1e-3).unwrap();
            assert!(out.joint_fidelity.unwrap() > 1.0 - 1e-9, "{:?}", out.joint_fidelity);
        }
    }

    #[test]
    fn web_coupling_after_start_is_rejected() {
        let a = make_cluster_wire(8).unwrap();
        let web = make_web(&[a.clone(), a.clone()], vec![Coupling::cz(0, 1, 5)]).unwrap();
        let empty = WebPrepPattern {
            families: vec![a.family, a.family],
            angles: vec![vec![], vec![]],
            post: vec![],
        };
        let mut sim = SimState::new(Arc::new(web), 0, 0);
        let err = localize_web(
            &mut sim,
            &[a.clone(), a],
            &empty,
            &crate::numerics::kron_vec(&ket0(), &ket0()),
            1e-3,
        );
        assert!(matches!(err, Err(Error::CouplingOrder(_))));
    }
}
