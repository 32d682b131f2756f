//! Dense full-state reference used to cross-check the simulator.

use crate::error::{Error, Result};
use crate::numerics::random::random_unitary;
use crate::numerics::{cr, ket0, ket1, ket_minus, ket_plus, normalized, vector, ComplexMatrix, StateVector, C64};
use crate::resource::{expand_state, WebResource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use super::{MeasurementOp, RecordKind, SimState, Site};

/// Apply a single-qubit operator to qubit `q` (0 = most significant) of an `nq`-qubit vector.
pub fn apply_kraus(v: &StateVector, nq: usize, q: usize, k: &ComplexMatrix) -> StateVector {
    StateVector::from_vec(super::apply_1q(v.as_slice(), nq, q, k))
}

/// Born distribution of `op` on qubit `q` of a normalized dense state.
pub fn distribution(full: &StateVector, nq: usize, q: usize, op: &MeasurementOp) -> Vec<f64> {
    let total = full.norm_squared();
    op.kraus()
        .iter()
        .map(|k| apply_kraus(full, nq, q, k).norm_squared() / total)
        .collect()
}

/// Dense physical state of the resource conditioned on the simulator's transcript.
pub fn conditioned_state(sim: &SimState) -> Result<StateVector> {
    if sim.has_reference() {
        return Err(Error::InvalidPattern("reference slot has no dense counterpart".into()));
    }
    let web = sim.resource();
    let nq = web.qubit_count();
    let mut full = expand_state(web)?;
    for r in sim.transcript() {
        full = apply_kraus(&full, nq, web.qubit_index(r.site.wire, r.site.column), &r.kraus);
    }
    normalized(&full)
}

/// Reduced density matrix of the listed qubits, in the listed order.
pub fn reduced_density(full: &StateVector, nq: usize, qubits: &[usize]) -> ComplexMatrix {
    let m = super::split(full.as_slice(), nq, qubits);
    let rho = &m * m.adjoint();
    let tr = rho.trace();
    rho / tr
}

/// Probe measurements: Z, X, Y and a generic tilted basis.
pub fn default_probes() -> Vec<MeasurementOp> {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let y0 = vector(&[cr(h), C64::new(0.0, h)]);
    let y1 = vector(&[cr(h), C64::new(0.0, -h)]);
    let (a, b) = (0.37f64, 1.1f64);
    let t0 = vector(&[cr(a.cos()), C64::from_polar(a.sin(), b)]);
    let t1 = vector(&[cr(-a.sin()), C64::from_polar(a.cos(), b)]);
    vec![
        MeasurementOp::projective("Z", &[ket0(), ket1()]).expect("orthonormal"),
        MeasurementOp::projective("X", &[ket_plus(), ket_minus()]).expect("orthonormal"),
        MeasurementOp::projective("Y", &[y0, y1]).expect("orthonormal"),
        MeasurementOp::projective("T", &[t0, t1]).expect("orthonormal"),
    ]
}

/// Maximum total-variation distance between simulator and dense-oracle
/// distributions over every accessible site (cursor sites and retained
/// sites) and every probe.
pub fn oracle_check(sim: &SimState, probes: &[MeasurementOp]) -> Result<f64> {
    let full = conditioned_state(sim)?;
    let web = sim.resource();
    let nq = web.qubit_count();
    let mut sites: Vec<Site> = sim.retained();
    for w in 0..web.wire_count() {
        if sim.cursor(w) < web.wire(w).len() {
            sites.push(Site::new(w, sim.cursor(w)));
        }
    }
    let mut worst: f64 = 0.0;
    for site in sites {
        for op in probes {
            let p = match sim.outcome_distribution(site, op) {
                Ok(p) => p,
                Err(Error::CouplingOrder(_)) => continue,
                Err(e) => return Err(e),
            };
            let q = distribution(&full, nq, web.qubit_index(site.wire, site.column), op);
            let tv: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            worst = worst.max(tv);
        }
    }
    Ok(worst)
}

/// Schmidt weight of every consumed site against the rest of the conditioned dense state.
pub fn consumed_factor_weights(sim: &SimState) -> Result<Vec<(Site, f64)>> {
    let full = conditioned_state(sim)?;
    let web = sim.resource();
    Ok(consumed_sites(sim)
        .into_iter()
        .map(|site| {
            let q = web.qubit_index(site.wire, site.column);
            let m = super::split(full.as_slice(), web.qubit_count(), &[q]);
            let s = m.singular_values();
            let total: f64 = s.iter().map(|x| x * x).sum();
            (site, s.max() * s.max() / total)
        })
        .collect())
}

/// Consumed sites in the transcript (cursor measurements and released retained sites).
pub fn consumed_sites(sim: &SimState) -> Vec<Site> {
    sim.transcript()
        .iter()
        .filter(|r| r.kind == RecordKind::Cursor || r.factor_weight.is_some())
        .map(|r| r.site)
        .collect()
}

/// Summary of one randomized transcript checked against the dense reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TranscriptCheck {
    pub steps: usize,
    pub max_tv: f64,
    pub min_factor_weight: f64,
}

fn random_basis(rng: &mut ChaCha8Rng) -> MeasurementOp {
    let u = random_unitary(rng, 2);
    MeasurementOp::projective("R", &[u.column(0).into_owned(), u.column(1).into_owned()]).expect("unitary columns")
}

/// Drive a random sequence of retains and random-basis measurements over
/// `web`, comparing every accessible site after each step.
pub fn random_transcript(web: Arc<WebResource>, seed: u64, stream: u64, steps: usize) -> Result<TranscriptCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let wires = web.wire_count();
    let mut sim = SimState::new(web, seed, stream);
    let mut max_tv: f64 = 0.0;
    let mut done = 0;
    for _ in 0..steps {
        let action = rng.gen_range(0..4);
        let retained = sim.retained();
        let w = rng.gen_range(0..wires);
        let acted = if action == 0 && wires == 1 && retained.len() < 2 && sim.remaining(w) > 1 {
            sim.retain_site(w).map(|_| ())
        } else if action == 1 && !retained.is_empty() {
            let op = random_basis(&mut rng);
            sim.apply_measurement(retained[0], &op, None).map(|_| ())
        } else {
            let mut res = Err(Error::WireExhausted(w));
            for k in 0..wires {
                let v = (w + k) % wires;
                if sim.remaining(v) <= 1 {
                    continue;
                }
                let op = random_basis(&mut rng);
                match sim.apply_measurement(Site::new(v, sim.cursor(v)), &op, None) {
                    Err(Error::CouplingOrder(_)) => continue,
                    r => {
                        res = r.map(|_| ());
                        break;
                    }
                }
            }
            res
        };
        match acted {
            Ok(()) => done += 1,
            Err(Error::WireExhausted(_)) => break,
            Err(e) => return Err(e),
        }
        max_tv = max_tv.max(oracle_check(&sim, &default_probes())?);
    }
    let min_factor_weight = consumed_factor_weights(&sim)?
        .into_iter()
        .map(|(_, w)| w)
        .fold(1.0, f64::min);
    Ok(TranscriptCheck {
        steps: done,
        max_tv,
        min_factor_weight,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resource::{make_theta_wire, make_web, Coupling};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_transcript_on_theta(seed: u64, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.gen_range(0.05..std::f64::consts::FRAC_PI_4);
        let wire = make_theta_wire(theta, n).unwrap();
        let steps = rng.gen_range(1..n);
        let check = random_transcript(Arc::new(WebResource::single(wire.base.clone())), seed, 0, steps).unwrap();
        assert!(check.min_factor_weight > 1.0 - 1e-10);
        check.max_tv
    }

    #[test]
    fn coupled_web_transcripts_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = make_theta_wire(0.5, 5).unwrap();
        let b = make_theta_wire(0.3, 5).unwrap();
        let web = make_web(&[a, b], vec![Coupling::cz(0, 1, 2)]).unwrap();
        let mut sim = SimState::new(Arc::new(web), 5, 0);
        let order = [(1, 0), (0, 0), (0, 1), (1, 1), (1, 2), (0, 2), (0, 3), (1, 3)];
        for (w, col) in order {
            let op = random_basis(&mut rng);
            sim.apply_measurement(Site::new(w, col), &op, None).unwrap();
            assert!(oracle_check(&sim, &default_probes()).unwrap() < 1e-9);
        }
    }

    #[test]
    fn random_driver_on_web() {
        let a = make_theta_wire(0.4, 6).unwrap();
        let b = make_theta_wire(0.7, 6).unwrap();
        let web = Arc::new(make_web(&[a, b], vec![Coupling::cz(0, 1, 1), Coupling::cz(0, 1, 3)]).unwrap());
        for stream in 0..5 {
            let check = random_transcript(web.clone(), 3, stream, 9).unwrap();
            assert!(check.steps > 0);
            assert!(check.max_tv < 1e-9);
            assert!(check.min_factor_weight > 1.0 - 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn random_transcripts_match_dense(seed in any::<u64>(), n in 3usize..=14) {
            prop_assert!(random_transcript_on_theta(seed, n) < 1e-9);
        }
    }
}
