//! Exact measurement engine for wires and webs.
//!
//! The state of a partially measured resource is kept as a vector over the
//! correlation qubits of every wire (most significant) followed by the
//! retained physical sites, in retention order. The unmeasured remainder of
//! each wire is represented by its right environment
//! `E_c = Σ_s A_c[s]† E_{c+1} A_c[s]`, `E_N = |R⟩⟨R|`, so Born probabilities
//! are exact for any chain length.

pub mod oracle;

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{
    cr, identity, kron, max_abs, outer, pauli_x, pauli_z, second_singular_value, ComplexMatrix, StateVector, C64, TOL,
};
use crate::resource::{WebResource, WireResource};

/// Maximum number of retained physical sites per wire.
pub const RETAINED_CAPACITY: usize = 2;

/// A local measurement given by its Kraus operators.
#[derive(Clone, Debug)]
pub struct MeasurementOp {
    label: String,
    kraus: Vec<ComplexMatrix>,
    outcome_labels: Vec<String>,
}

impl MeasurementOp {
    pub fn new(label: impl Into<String>, kraus: Vec<ComplexMatrix>, outcome_labels: Vec<String>) -> Result<Self> {
        if kraus.is_empty() || kraus.len() != outcome_labels.len() {
            return Err(Error::InvalidPattern(
                "Kraus list and labels must be non-empty and aligned".into(),
            ));
        }
        if kraus.iter().any(|k| k.shape() != (2, 2)) {
            return Err(Error::DimensionMismatch("Kraus operators must be 2x2".into()));
        }
        let sum = kraus
            .iter()
            .fold(ComplexMatrix::zeros(2, 2), |acc, k| acc + k.adjoint() * k);
        let defect = max_abs(&(sum - identity(2)));
        if defect > TOL.atol {
            return Err(Error::Incomplete(defect));
        }
        Ok(Self {
            label: label.into(),
            kraus,
            outcome_labels,
        })
    }

    /// Projective measurement onto an orthonormal basis.
    pub fn projective(label: impl Into<String>, basis: &[StateVector]) -> Result<Self> {
        let kraus = basis.iter().map(|b| outer(b, b)).collect();
        let labels = (0..basis.len()).map(|k| k.to_string()).collect();
        Self::new(label, kraus, labels)
    }

    pub fn computational() -> Self {
        let e0 = crate::numerics::ket0();
        let e1 = crate::numerics::ket1();
        Self::projective("Z", &[e0, e1]).expect("computational basis is complete")
    }

    /// The single-outcome measurement `{I}`.
    pub fn trivial() -> Self {
        Self::new("I", vec![identity(2)], vec!["0".into()]).expect("identity is complete")
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kraus(&self) -> &[ComplexMatrix] {
        &self.kraus
    }

    pub fn outcomes(&self) -> usize {
        self.kraus.len()
    }

    pub fn outcome_label(&self, k: usize) -> &str {
        &self.outcome_labels[k]
    }

    pub fn is_rank_one(&self, k: usize) -> bool {
        second_singular_value(&self.kraus[k]) <= 1e-12
    }

    /// `K = |a⟩⟨b|` with `‖b‖ = 1`; returns `(a, b)`.
    fn rank_one_parts(&self, k: usize) -> Option<(StateVector, StateVector)> {
        if !self.is_rank_one(k) {
            return None;
        }
        let svd = self.kraus[k].clone().svd(true, true);
        let (i, s) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let a = u.column(i).into_owned() * cr(s);
        let b = vt.row(i).adjoint();
        Some((a, b))
    }
}

/// Pauli byproduct `X^x Z^z` (global phase dropped): the actual state equals
/// `X^x Z^z` applied to the ideal one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PauliFrame {
    pub x: bool,
    pub z: bool,
}

impl PauliFrame {
    pub fn new(x: bool, z: bool) -> Self {
        Self { x, z }
    }

    /// Frame after conjugation by a Hadamard: `H X^x Z^z H = X^z Z^x`.
    pub fn through_hadamard(self) -> Self {
        Self { x: self.z, z: self.x }
    }

    /// Frame of `Q · self` for another Pauli `Q` applied afterwards.
    pub fn then(self, other: PauliFrame) -> Self {
        Self {
            x: self.x ^ other.x,
            z: self.z ^ other.z,
        }
    }

    pub fn matrix(&self) -> ComplexMatrix {
        let mut m = identity(2);
        if self.z {
            m = pauli_z() * m;
        }
        if self.x {
            m = pauli_x() * m;
        }
        m
    }

    /// Undo the frame: ideal = `Z^z X^x` actual.
    pub fn correct(&self, v: &StateVector) -> StateVector {
        let mut out = v.clone();
        if self.x {
            out = pauli_x() * out;
        }
        if self.z {
            out = pauli_z() * out;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub wire: usize,
    pub column: usize,
}

impl Site {
    pub fn new(wire: usize, column: usize) -> Self {
        Self { wire, column }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Cursor,
    Retained,
}

/// One transcript entry.
#[derive(Clone, Debug)]
pub struct Record {
    pub site: Site,
    pub kind: RecordKind,
    pub label: String,
    pub outcome: usize,
    pub outcome_label: String,
    pub probability: f64,
    /// The Kraus operator that was applied to the physical site.
    pub kraus: ComplexMatrix,
    /// Largest squared Schmidt weight when the site was released.
    pub factor_weight: Option<f64>,
    /// Couplings that acted on the correlation space during this step.
    pub couplings: Vec<usize>,
}

impl Record {
    pub fn to_line(&self) -> String {
        format!(
            "site={}:{} kind={} op={} outcome={} prob={:.12}",
            self.site.wire,
            self.site.column,
            match self.kind {
                RecordKind::Cursor => "cursor",
                RecordKind::Retained => "retained",
            },
            self.label,
            self.outcome_label,
            self.probability
        )
    }
}

/// Right environments of every wire, pre-contracted once per resource.
#[derive(Debug)]
pub struct EnvCache {
    /// `envs[w][c]`: trace-normalized environment with sites `c..N` unmeasured.
    envs: Vec<Vec<ComplexMatrix>>,
    /// Log of the trace removed by normalization.
    log_scales: Vec<Vec<f64>>,
}

fn site_map(env: &ComplexMatrix, a: &[ComplexMatrix; 2]) -> ComplexMatrix {
    a[0].adjoint() * env * &a[0] + a[1].adjoint() * env * &a[1]
}

impl EnvCache {
    pub fn new(web: &WebResource) -> Self {
        let mut envs = Vec::new();
        let mut log_scales = Vec::new();
        for wire in web.wires() {
            let (e, l) = Self::wire_envs(wire);
            envs.push(e);
            log_scales.push(l);
        }
        Self { envs, log_scales }
    }

    fn wire_envs(wire: &WireResource) -> (Vec<ComplexMatrix>, Vec<f64>) {
        let n = wire.len();
        let mut envs = vec![ComplexMatrix::zeros(2, 2); n + 1];
        let mut logs = vec![0.0; n + 1];
        envs[n] = outer(wire.right(), wire.right());
        for col in (0..n).rev() {
            let e = site_map(&envs[col + 1], wire.tensor(col).matrices());
            let tr = e.trace().re;
            envs[col] = if tr > 0.0 { e / cr(tr) } else { e };
            logs[col] = logs[col + 1] + if tr > 0.0 { tr.ln() } else { 0.0 };
        }
        (envs, logs)
    }

    pub fn wire_env(&self, wire: usize, column: usize) -> &ComplexMatrix {
        &self.envs[wire][column]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Site(Site),
    Reference,
}

/// Partially measured resource.
#[derive(Clone, Debug)]
pub struct SimState {
    resource: Arc<WebResource>,
    env: Arc<EnvCache>,
    cursors: Vec<usize>,
    applied: Vec<bool>,
    slots: Vec<Slot>,
    /// Amplitudes over (correlation qubits, retained slots), weight 1 under the current environment.
    joint: Vec<C64>,
    log_prob: f64,
    /// Logical Pauli frame per wire.
    pub frames: Vec<PauliFrame>,
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
    transcript: Vec<Record>,
}

// Qubit-level helpers; qubit 0 is the most significant bit.

fn apply_1q(v: &[C64], nq: usize, q: usize, op: &ComplexMatrix) -> Vec<C64> {
    let stride = 1usize << (nq - 1 - q);
    let mut out = vec![cr(0.0); v.len()];
    for idx in 0..v.len() {
        if idx & stride != 0 {
            continue;
        }
        let (a, b) = (v[idx], v[idx | stride]);
        out[idx] = op[(0, 0)] * a + op[(0, 1)] * b;
        out[idx | stride] = op[(1, 0)] * a + op[(1, 1)] * b;
    }
    out
}

fn apply_2q(v: &[C64], nq: usize, qa: usize, qb: usize, op: &ComplexMatrix) -> Vec<C64> {
    let sa = 1usize << (nq - 1 - qa);
    let sb = 1usize << (nq - 1 - qb);
    let mut out = vec![cr(0.0); v.len()];
    for idx in 0..v.len() {
        if idx & sa != 0 || idx & sb != 0 {
            continue;
        }
        let ids = [idx, idx | sb, idx | sa, idx | sa | sb];
        for (r, &ir) in ids.iter().enumerate() {
            out[ir] = (0..4).map(|k| op[(r, k)] * v[ids[k]]).sum();
        }
    }
    out
}

/// Contract qubit `q` with `⟨bra|`, removing it.
fn project_out(v: &[C64], nq: usize, q: usize, bra: &StateVector) -> Vec<C64> {
    let low_bits = nq - 1 - q;
    let mut out = vec![cr(0.0); v.len() / 2];
    for (idx, amp) in v.iter().enumerate() {
        let s = (idx >> low_bits) & 1;
        let high = idx >> (low_bits + 1);
        let low = idx & ((1usize << low_bits) - 1);
        out[(high << low_bits) | low] += bra[s].conj() * amp;
    }
    out
}

/// Reshape into (chosen qubits) x (rest).
fn split(v: &[C64], nq: usize, chosen: &[usize]) -> ComplexMatrix {
    let rest: Vec<usize> = (0..nq).filter(|q| !chosen.contains(q)).collect();
    let mut m = ComplexMatrix::zeros(1 << chosen.len(), 1 << rest.len());
    for (idx, amp) in v.iter().enumerate() {
        let bit = |q: usize| (idx >> (nq - 1 - q)) & 1;
        let row = chosen.iter().fold(0, |acc, &q| (acc << 1) | bit(q));
        let col = rest.iter().fold(0, |acc, &q| (acc << 1) | bit(q));
        m[(row, col)] = *amp;
    }
    m
}

impl SimState {
    pub fn new(resource: Arc<WebResource>, seed: u64, stream: u64) -> Self {
        let env = Arc::new(EnvCache::new(&resource));
        Self::with_env(resource, env, seed, stream)
    }

    /// Shares a pre-built environment cache across shots.
    pub fn with_env(resource: Arc<WebResource>, env: Arc<EnvCache>, seed: u64, stream: u64) -> Self {
        let mut joint = vec![cr(1.0)];
        for wire in resource.wires() {
            let l = wire.left();
            joint = joint.iter().flat_map(|a| [a * l[0], a * l[1]]).collect();
        }
        let m = resource.wire_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut s = Self {
            cursors: vec![0; m],
            applied: vec![false; resource.couplings().len()],
            slots: Vec::new(),
            joint,
            log_prob: 0.0,
            frames: vec![PauliFrame::default(); m],
            rng,
            seed,
            stream,
            transcript: Vec::new(),
            resource,
            env,
        };
        s.renormalize();
        s
    }

    /// Single wire whose correlation qubit starts maximally entangled with a
    /// reference qubit that is never measured. The implemented correlation
    /// operator can then be read off the joint state.
    pub fn with_reference(wire: WireResource, seed: u64, stream: u64) -> Self {
        let mut s = Self::new(Arc::new(WebResource::single(wire)), seed, stream);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        s.joint = vec![cr(h), cr(0.0), cr(0.0), cr(h)];
        s.slots.push(Slot::Reference);
        s.renormalize();
        s
    }

    pub fn resource(&self) -> &Arc<WebResource> {
        &self.resource
    }

    pub fn env_cache(&self) -> &Arc<EnvCache> {
        &self.env
    }

    pub fn cursor(&self, wire: usize) -> usize {
        self.cursors[wire]
    }

    pub fn remaining(&self, wire: usize) -> usize {
        self.resource.wire(wire).len() - self.cursors[wire]
    }

    pub fn seed(&self) -> (u64, u64) {
        (self.seed, self.stream)
    }

    pub fn transcript(&self) -> &[Record] {
        &self.transcript
    }

    pub fn transcript_text(&self) -> String {
        let mut out = String::new();
        for r in &self.transcript {
            let _ = writeln!(out, "{}", r.to_line());
        }
        out
    }

    /// Sum of log probabilities of the recorded outcomes.
    pub fn log_probability(&self) -> f64 {
        self.log_prob
    }

    pub fn retained(&self) -> Vec<Site> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Site(site) => Some(*site),
                Slot::Reference => None,
            })
            .collect()
    }

    pub fn has_reference(&self) -> bool {
        self.slots.contains(&Slot::Reference)
    }

    fn wires(&self) -> usize {
        self.resource.wire_count()
    }

    fn nqubits(&self) -> usize {
        self.wires() + self.slots.len()
    }

    fn slot_qubit(&self, site: Site) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| *s == Slot::Site(site))
            .map(|k| self.wires() + k)
    }

    /// Joint environment on all correlation qubits for a cursor configuration.
    fn environment(&self, cursors: &[usize], applied: &[bool]) -> (ComplexMatrix, f64) {
        let web = &*self.resource;
        let m = self.wires();
        let pending: Vec<usize> = (0..applied.len()).filter(|&i| !applied[i]).collect();
        if pending.is_empty() {
            let mut e = ComplexMatrix::identity(1, 1);
            let mut ls = 0.0;
            for (w, &c) in cursors.iter().enumerate() {
                e = kron(&e, self.env.wire_env(w, c));
                ls += self.env.log_scales[w][c];
            }
            return (e, ls);
        }
        let n = web.columns();
        let mut e = ComplexMatrix::identity(1, 1);
        for wire in web.wires() {
            e = kron(&e, &outer(wire.right(), wire.right()));
        }
        let mut ls = 0.0;
        let start = *cursors.iter().min().expect("at least one wire");
        for col in (start..n).rev() {
            for &i in &pending {
                let cpl = &web.couplings()[i];
                if cpl.column == col {
                    let g = crate::resource::embed_two(&cpl.gate, cpl.upper, cpl.lower, m);
                    e = g.adjoint() * e * g;
                }
            }
            for (w, &cursor) in cursors.iter().enumerate() {
                if cursor <= col {
                    let a = web.wire(w).tensor(col).matrices();
                    let a0 = crate::resource::embed_one(&a[0], w, m);
                    let a1 = crate::resource::embed_one(&a[1], w, m);
                    e = a0.adjoint() * &e * &a0 + a1.adjoint() * &e * &a1;
                }
            }
            let tr = e.trace().re;
            if tr > 0.0 {
                e /= cr(tr);
                ls += tr.ln();
            }
        }
        (e, ls)
    }

    fn weight_with(&self, v: &[C64], env: &ComplexMatrix) -> f64 {
        let cdim = 1usize << self.wires();
        let rdim = v.len() / cdim;
        let mut w = 0.0;
        for r in 0..rdim {
            for c1 in 0..cdim {
                let a = v[c1 * rdim + r].conj();
                if a == cr(0.0) {
                    continue;
                }
                for c2 in 0..cdim {
                    w += (a * env[(c1, c2)] * v[c2 * rdim + r]).re;
                }
            }
        }
        w
    }

    fn current_environment(&self) -> (ComplexMatrix, f64) {
        self.environment(&self.cursors, &self.applied)
    }

    fn renormalize(&mut self) {
        let (e, _) = self.current_environment();
        let w = self.weight_with(&self.joint, &e);
        if w > 0.0 {
            let s = cr(1.0 / w.sqrt());
            self.joint.iter_mut().for_each(|a| *a *= s);
        }
    }

    /// Weight of the joint vector under the current environment (1 up to rounding).
    pub fn weight(&self) -> f64 {
        let (e, _) = self.current_environment();
        self.weight_with(&self.joint, &e)
    }

    fn check_advance(&self, wire: usize) -> Result<()> {
        if wire >= self.wires() {
            return Err(Error::OutOfRange(format!("wire {wire} does not exist")));
        }
        let c = self.cursors[wire];
        if c >= self.resource.wire(wire).len() {
            return Err(Error::WireExhausted(wire));
        }
        for (i, cpl) in self.resource.couplings().iter().enumerate() {
            if !self.applied[i] && cpl.column < c && (cpl.upper == wire || cpl.lower == wire) {
                return Err(Error::CouplingOrder(format!(
                    "wire {wire} cannot pass column {} before its coupling partner",
                    cpl.column
                )));
            }
        }
        Ok(())
    }

    /// Cursors and coupling flags after advancing `wire`, plus the couplings that fire.
    fn advanced(&self, wire: usize) -> (Vec<usize>, Vec<bool>, Vec<usize>) {
        let mut cursors = self.cursors.clone();
        let mut applied = self.applied.clone();
        let col = cursors[wire];
        cursors[wire] += 1;
        let mut fired = Vec::new();
        for (i, cpl) in self.resource.couplings().iter().enumerate() {
            if applied[i] || cpl.column != col || (cpl.upper != wire && cpl.lower != wire) {
                continue;
            }
            if cursors[cpl.upper] > col && cursors[cpl.lower] > col {
                applied[i] = true;
                fired.push(i);
            }
        }
        (cursors, applied, fired)
    }

    fn apply_couplings(&self, v: Vec<C64>, fired: &[usize]) -> Vec<C64> {
        let nq = self.nqubits();
        fired.iter().fold(v, |acc, &i| {
            let cpl = &self.resource.couplings()[i];
            apply_2q(&acc, nq, cpl.upper, cpl.lower, &cpl.gate)
        })
    }

    fn commit_advance(&mut self, cursors: Vec<usize>, applied: Vec<bool>) {
        self.cursors = cursors;
        self.applied = applied;
    }

    /// Push the logical frames through the given couplings (CZ only). The
    /// caller decides when, so that the frame of a wire already reflects the
    /// outcome of the measurement that triggered the coupling.
    pub fn propagate_couplings(&mut self, fired: &[usize]) {
        for &i in fired {
            let cpl = &self.resource.couplings()[i];
            if cpl.is_cz() {
                let (a, b) = (cpl.upper, cpl.lower);
                let (xa, xb) = (self.frames[a].x, self.frames[b].x);
                self.frames[a].z ^= xb;
                self.frames[b].z ^= xa;
            }
        }
    }

    /// Candidate post-measurement vectors, their relative weights, and the
    /// resulting cursor configuration.
    fn candidates(&self, site: Site, op: &MeasurementOp) -> Result<Branches> {
        if let Some(q) = self.slot_qubit(site) {
            let (e, _) = self.current_environment();
            let nq = self.nqubits();
            let vecs: Vec<Vec<C64>> = op.kraus().iter().map(|k| apply_1q(&self.joint, nq, q, k)).collect();
            let weights = vecs.iter().map(|v| self.weight_with(v, &e)).collect();
            return Ok(Branches {
                vecs,
                weights,
                scale_ratio: 1.0,
                advance: None,
                retained_qubit: Some(q),
            });
        }
        if site.wire >= self.wires() || self.cursors[site.wire] != site.column {
            return Err(Error::SiteUnavailable {
                wire: site.wire,
                column: site.column,
                reason: "neither the cursor site nor a retained site".into(),
            });
        }
        self.check_advance(site.wire)?;
        let tensor = self.resource.wire(site.wire).tensor(site.column);
        let (cursors, applied, fired) = self.advanced(site.wire);
        let (e_after, ls_after) = self.environment(&cursors, &applied);
        let (_, ls_now) = self.current_environment();
        let nq = self.nqubits();
        let mut vecs = Vec::with_capacity(op.outcomes());
        for k in 0..op.outcomes() {
            let (a, b) = op.rank_one_parts(k).ok_or_else(|| Error::SiteUnavailable {
                wire: site.wire,
                column: site.column,
                reason: "Kraus operators on the cursor site must be rank one; retain the site first".into(),
            })?;
            let bop = tensor.operator_for(&b) * cr(a.norm());
            let v = apply_1q(&self.joint, nq, site.wire, &bop);
            vecs.push(self.apply_couplings(v, &fired));
        }
        let weights = vecs.iter().map(|v| self.weight_with(v, &e_after)).collect();
        Ok(Branches {
            vecs,
            weights,
            scale_ratio: (ls_after - ls_now).exp(),
            advance: Some((cursors, applied, fired)),
            retained_qubit: None,
        })
    }

    /// A cursor site measured with a Kraus element of rank two stays in
    /// play, so it is retained first.
    fn needs_retain(&self, site: Site, op: &MeasurementOp) -> bool {
        self.slot_qubit(site).is_none()
            && site.wire < self.wires()
            && self.cursors[site.wire] == site.column
            && (0..op.outcomes()).any(|k| !op.is_rank_one(k))
    }

    /// Born probabilities of `op` on `site` (the cursor site of its wire or a retained site).
    pub fn outcome_distribution(&self, site: Site, op: &MeasurementOp) -> Result<Vec<f64>> {
        if self.needs_retain(site, op) {
            let mut held = self.clone();
            held.retain_site(site.wire)?;
            return held.outcome_distribution(site, op);
        }
        let br = self.candidates(site, op)?;
        let total: f64 = br.weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::OutOfRange("all outcomes have zero weight".into()));
        }
        Ok(br.weights.iter().map(|w| w / total).collect())
    }

    /// `Σ_k w_k / w` for the branches of `op`: 1 for any complete measurement.
    pub fn branch_weight_ratio(&self, site: Site, op: &MeasurementOp) -> Result<f64> {
        let br = self.candidates(site, op)?;
        let total: f64 = br.weights.iter().sum();
        Ok(total * br.scale_ratio / self.weight())
    }

    /// Measure `site` with `op`, sampling the outcome with the state's RNG
    /// unless `forced` is given. Rank-one outcomes on a retained site release it.
    pub fn apply_measurement(&mut self, site: Site, op: &MeasurementOp, forced: Option<usize>) -> Result<usize> {
        if self.needs_retain(site, op) {
            self.retain_site(site.wire)?;
        }
        let br = self.candidates(site, op)?;
        let total: f64 = br.weights.iter().sum();
        let conservation = total * br.scale_ratio / self.weight();
        if (conservation - 1.0).abs() > 1e-8 {
            return Err(Error::Incomplete((conservation - 1.0).abs()));
        }
        let probs: Vec<f64> = br.weights.iter().map(|w| w / total).collect();
        let outcome = match forced {
            Some(k) => {
                if k >= probs.len() || probs[k] < TOL.zero_probability {
                    return Err(Error::ZeroProbability {
                        outcome: k,
                        probability: probs.get(k).copied().unwrap_or(0.0),
                    });
                }
                k
            }
            None => {
                let u: f64 = self.rng.gen();
                let mut acc = 0.0;
                let mut pick = probs.len() - 1;
                for (k, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                while probs[pick] == 0.0 && pick > 0 {
                    pick -= 1;
                }
                pick
            }
        };
        let Branches {
            mut vecs,
            weights,
            advance,
            retained_qubit,
            ..
        } = br;
        let w = weights[outcome];
        let scale = cr(1.0 / w.sqrt());
        let mut v = std::mem::take(&mut vecs[outcome]);
        v.iter_mut().for_each(|a| *a *= scale);
        self.joint = v;
        self.log_prob += probs[outcome].ln();
        let (kind, fired) = if let Some((cursors, applied, fired)) = advance {
            self.commit_advance(cursors, applied);
            (RecordKind::Cursor, fired)
        } else {
            (RecordKind::Retained, Vec::new())
        };
        let mut record = Record {
            site,
            kind,
            label: op.label().to_string(),
            outcome,
            outcome_label: op.outcome_label(outcome).to_string(),
            probability: probs[outcome],
            kraus: op.kraus()[outcome].clone(),
            factor_weight: None,
            couplings: fired,
        };
        if retained_qubit.is_some() && op.is_rank_one(outcome) {
            record.factor_weight = Some(self.release_site(site)?);
        }
        self.transcript.push(record);
        Ok(outcome)
    }

    /// Advance the cursor of `wire` without measuring; the site joins the
    /// retained list and the joint state gains `Σ_s |s⟩ ⊗ A[s]`.
    pub fn retain_site(&mut self, wire: usize) -> Result<Site> {
        self.check_advance(wire)?;
        let held = self
            .slots
            .iter()
            .filter(|s| matches!(s, Slot::Site(x) if x.wire == wire))
            .count();
        if held >= RETAINED_CAPACITY {
            return Err(Error::RetainedCapacity(wire));
        }
        let col = self.cursors[wire];
        let tensor = self.resource.wire(wire).tensor(col).clone();
        let nq = self.nqubits();
        let parts: Vec<Vec<C64>> = (0..2)
            .map(|s| apply_1q(&self.joint, nq, wire, tensor.matrix(s)))
            .collect();
        let mut joint = vec![cr(0.0); self.joint.len() * 2];
        for idx in 0..self.joint.len() {
            joint[2 * idx] = parts[0][idx];
            joint[2 * idx + 1] = parts[1][idx];
        }
        let site = Site::new(wire, col);
        self.slots.push(Slot::Site(site));
        let (cursors, applied, fired) = self.advanced(wire);
        self.joint = self.apply_couplings(joint, &fired);
        self.commit_advance(cursors, applied);
        self.propagate_couplings(&fired);
        self.renormalize();
        Ok(site)
    }

    /// Remove a retained site that is in a product state with everything
    /// else. Returns the largest squared Schmidt weight across that cut.
    pub fn release_site(&mut self, site: Site) -> Result<f64> {
        let q = self.slot_qubit(site).ok_or_else(|| Error::SiteUnavailable {
            wire: site.wire,
            column: site.column,
            reason: "not a retained site".into(),
        })?;
        let (weight, state) = self.site_factor(q);
        if weight < 1.0 - TOL.atol {
            return Err(Error::NotFactorized {
                wire: site.wire,
                column: site.column,
                weight,
            });
        }
        self.joint = project_out(&self.joint, self.nqubits(), q, &state);
        self.slots.remove(q - self.wires());
        self.renormalize();
        Ok(weight)
    }

    fn site_factor(&self, q: usize) -> (f64, StateVector) {
        let m = split(&self.joint, self.nqubits(), &[q]);
        let svd = m.svd(true, false);
        let s = &svd.singular_values;
        let (i, _) = s
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        let total: f64 = s.iter().map(|x| x * x).sum();
        let weight = s[i] * s[i] / total;
        let u = svd.u.expect("u requested");
        (weight, u.column(i).into_owned())
    }

    /// Largest squared Schmidt weight of a retained site against the rest of the joint state.
    pub fn factor_weight(&self, site: Site) -> Result<f64> {
        let q = self.slot_qubit(site).ok_or_else(|| Error::SiteUnavailable {
            wire: site.wire,
            column: site.column,
            reason: "not a retained site".into(),
        })?;
        Ok(self.site_factor(q).0)
    }

    /// Exact reduced density matrix of retained sites, using the right
    /// environment as the Gram matrix of the unmeasured remainder.
    pub fn reduced_density(&self, sites: &[Site]) -> Result<ComplexMatrix> {
        let qs: Vec<usize> = sites
            .iter()
            .map(|&s| {
                self.slot_qubit(s).ok_or_else(|| Error::SiteUnavailable {
                    wire: s.wire,
                    column: s.column,
                    reason: "not a retained site".into(),
                })
            })
            .collect::<Result<_>>()?;
        let nq = self.nqubits();
        let m = self.wires();
        let rest: Vec<usize> = (0..nq).filter(|q| !qs.contains(q)).collect();
        // Correlation qubits are the leading entries of `rest`.
        let mat = split(&self.joint, nq, &qs);
        let cdim = 1usize << m;
        let odim = mat.ncols() / cdim;
        let (e, _) = self.current_environment();
        let k = mat.nrows();
        let mut rho = ComplexMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..k {
                let mut acc = cr(0.0);
                for o in 0..odim {
                    for c1 in 0..cdim {
                        for c2 in 0..cdim {
                            acc += mat[(a, c1 * odim + o)] * e[(c2, c1)] * mat[(b, c2 * odim + o)].conj();
                        }
                    }
                }
                rho[(a, b)] = acc;
            }
        }
        debug_assert_eq!(rest.len(), nq - qs.len());
        let tr = rho.trace();
        Ok(rho / tr)
    }

    /// Correlation qubit of wire 0 against the reference: the operator `O`
    /// with joint `∝ (O ⊗ I)|Φ⁺⟩`. Only for states built by `with_reference`.
    pub fn reference_operator(&self) -> Result<ComplexMatrix> {
        if !self.has_reference() || self.wires() != 1 || self.slots.len() != 1 {
            return Err(Error::InvalidPattern("state has no lone reference slot".into()));
        }
        let mut op = ComplexMatrix::zeros(2, 2);
        for cc in 0..2 {
            for r in 0..2 {
                op[(cc, r)] = self.joint[cc * 2 + r];
            }
        }
        let norm = (op.adjoint() * &op).trace().re / 2.0;
        Ok(op / cr(norm.sqrt()))
    }

    /// Correlation-space vector of a lone wire with no retained sites.
    pub fn correlation_state(&self) -> Result<StateVector> {
        if self.wires() != 1 || !self.slots.is_empty() {
            return Err(Error::InvalidPattern(
                "correlation state is entangled with retained sites".into(),
            ));
        }
        crate::numerics::normalized(&StateVector::from_column_slice(&self.joint))
    }

    /// Sample a fresh `u64` from the shot's stream.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.gen()
    }
}

struct Branches {
    vecs: Vec<Vec<C64>>,
    weights: Vec<f64>,
    scale_ratio: f64,
    advance: Option<(Vec<usize>, Vec<bool>, Vec<usize>)>,
    retained_qubit: Option<usize>,
}
