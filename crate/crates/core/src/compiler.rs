//! Compilation of single-qubit unitaries and web preparations into adaptive
//! measurement patterns.
//!
//! Every supported family implements the primitive `P(η) = H·diag(1, e^{iη})`
//! on the correlation qubit by measuring one site. For the cluster wire the
//! primitive is deterministic for all `η`; for the θ-family the basis
//! `(cos γ, i sin γ), (sin γ, −i cos γ)` yields `H·diag(1, e^{iζ})` for some
//! outcome-dependent `ζ`, and a mismatch is absorbed by a repeat-until-success
//! loop that keeps the error inside a diagonal residual.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{c, cr, fidelity, hadamard, is_unitary, matrix2, phase, ComplexMatrix, StateVector, C64};
use crate::resource::{CanonicalWire, Family, SiteTensor, WebResource};
use crate::simulator::{MeasurementOp, PauliFrame, SimState, Site};

/// Hard cap on the number of sites a pattern may declare.
pub const MAX_PATTERN_SITES: usize = 100_000;

const ANGLE_TOL: f64 = 1e-9;

/// `P(η) = H·diag(1, e^{iη})`.
pub fn primitive(eta: f64) -> ComplexMatrix {
    hadamard() * phase(eta)
}

fn wrap(angle: f64) -> f64 {
    let a = angle.rem_euclid(2.0 * PI);
    if a > PI {
        a - 2.0 * PI
    } else {
        a
    }
}

fn near(a: f64, b: f64) -> bool {
    wrap(a - b).abs() < ANGLE_TOL
}

fn global_phase_distance(u: &ComplexMatrix, v: &ComplexMatrix) -> f64 {
    let overlap = (u.adjoint() * v).trace().norm() / 2.0;
    (1.0 - overlap.min(1.0)).max(0.0)
}

/// Primitive angles in application order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternStep {
    pub phase: f64,
}

/// Which correlation-space basis change to compile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisMap {
    /// `V = |+⟩⟨φ₀| + |−⟩⟨φ₁|`.
    V,
    /// `V′ = |0⟩⟨φ₀| + |1⟩⟨φ₁|`.
    VPrime,
}

#[derive(Clone, Debug)]
pub struct MeasurementPattern {
    pub family: Family,
    pub target: ComplexMatrix,
    pub steps: Vec<PatternStep>,
    pub epsilon: f64,
    /// Trials allowed per primitive.
    pub trial_budget: usize,
    /// Worst-case number of sites consumed.
    pub declared_length: usize,
}

impl MeasurementPattern {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Product of the ideal primitives.
    pub fn ideal_operator(&self) -> ComplexMatrix {
        self.steps
            .iter()
            .fold(ComplexMatrix::identity(2, 2), |acc, s| primitive(s.phase) * acc)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let fam = match self.family {
            Family::Theta(t) => format!("theta {t:.17e}"),
            f => f.name().to_string(),
        };
        let _ = writeln!(out, "family {fam}");
        let entries: Vec<String> = (0..2)
            .flat_map(|r| (0..2).map(move |k| (r, k)))
            .map(|(r, k)| format!("{:.17e},{:.17e}", self.target[(r, k)].re, self.target[(r, k)].im))
            .collect();
        let _ = writeln!(out, "target {}", entries.join(" "));
        let _ = writeln!(out, "epsilon {:.17e}", self.epsilon);
        let _ = writeln!(out, "budget {}", self.trial_budget);
        let _ = writeln!(out, "length {}", self.declared_length);
        let _ = writeln!(out, "steps {}", self.steps.len());
        for (i, s) in self.steps.iter().enumerate() {
            let _ = writeln!(out, "step {i} P {:.17e}", s.phase);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::InvalidPattern(m.to_string());
        let mut family = None;
        let mut target = None;
        let mut epsilon = None;
        let mut budget = None;
        let mut length = None;
        let mut count = None;
        let mut steps = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("bad number '{s}'")));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad integer '{s}'")));
            match parts[0] {
                "family" => {
                    family = Some(match (parts.get(1).copied(), parts.get(2)) {
                        (Some("cluster"), _) => Family::Cluster,
                        (Some("theta"), Some(t)) => Family::Theta(num(t)?),
                        (Some("general"), _) => Family::General,
                        _ => return Err(bad("unknown family")),
                    })
                }
                "target" => {
                    if parts.len() != 5 {
                        return Err(bad("target needs four entries"));
                    }
                    let mut z = Vec::new();
                    for p in &parts[1..] {
                        let (re, im) = p.split_once(',').ok_or_else(|| bad("entry must be re,im"))?;
                        z.push(c(num(re)?, num(im)?));
                    }
                    target = Some(matrix2(z[0], z[1], z[2], z[3]));
                }
                "epsilon" => epsilon = Some(num(parts.get(1).ok_or_else(|| bad("missing epsilon"))?)?),
                "budget" => budget = Some(int(parts.get(1).ok_or_else(|| bad("missing budget"))?)?),
                "length" => length = Some(int(parts.get(1).ok_or_else(|| bad("missing length"))?)?),
                "steps" => count = Some(int(parts.get(1).ok_or_else(|| bad("missing steps"))?)?),
                "step" => {
                    if parts.len() != 4 || parts[2] != "P" {
                        return Err(bad("step lines are 'step <offset> P <phase>'"));
                    }
                    if int(parts[1])? != steps.len() {
                        return Err(bad("step offsets must be consecutive"));
                    }
                    steps.push(PatternStep { phase: num(parts[3])? });
                }
                other => return Err(bad(&format!("unknown record '{other}'"))),
            }
        }
        let pattern = Self {
            family: family.ok_or_else(|| bad("missing family"))?,
            target: target.ok_or_else(|| bad("missing target"))?,
            epsilon: epsilon.ok_or_else(|| bad("missing epsilon"))?,
            trial_budget: budget.ok_or_else(|| bad("missing budget"))?,
            declared_length: length.ok_or_else(|| bad("missing length"))?,
            steps,
        };
        if count != Some(pattern.steps.len()) {
            return Err(bad("step count does not match header"));
        }
        if global_phase_distance(&pattern.ideal_operator(), &pattern.target) > 1e-9 {
            return Err(bad("steps do not implement the target"));
        }
        Ok(pattern)
    }
}

/// Measurement basis realizing `P(η)` (or an RUS attempt at it) on `family`.
pub fn primitive_basis(family: Family, eta: f64) -> Result<[StateVector; 2]> {
    match family {
        Family::Cluster => {
            let h = std::f64::consts::FRAC_1_SQRT_2;
            let e = C64::from_polar(h, -eta);
            Ok([
                StateVector::from_vec(vec![cr(h), e]),
                StateVector::from_vec(vec![cr(h), -e]),
            ])
        }
        Family::Theta(theta) => {
            let gamma = ((eta / 2.0).sin() * theta.cos()).atan2((eta / 2.0).cos() * theta.sin());
            let (s, co) = gamma.sin_cos();
            Ok([
                StateVector::from_vec(vec![cr(co), c(0.0, s)]),
                StateVector::from_vec(vec![cr(s), c(0.0, -co)]),
            ])
        }
        Family::General => Err(Error::UnsupportedFamily(
            "general (W, α) wires have no compilation scheme".into(),
        )),
    }
}

/// Angle `ζ` of the outcome operator `B ∝ H·diag(1, e^{iζ})` for projecting `tensor` onto `b`.
pub fn outcome_angle(tensor: &SiteTensor, b: &StateVector) -> Result<f64> {
    let g = hadamard() * tensor.operator_for(b);
    let scale = g[(0, 0)].norm().max(g[(1, 1)].norm());
    if g[(0, 1)].norm() > 1e-9 * scale.max(1e-300) || g[(1, 0)].norm() > 1e-9 * scale.max(1e-300) {
        return Err(Error::UnsupportedFamily(
            "outcome operator is not of the form H·diag".into(),
        ));
    }
    if g[(0, 0)].norm() < 1e-12 || g[(1, 1)].norm() < 1e-12 {
        return Err(Error::UnsupportedFamily("outcome operator is singular".into()));
    }
    Ok(wrap((g[(1, 1)] / g[(0, 0)]).arg()))
}

fn is_deterministic(family: Family, eta: f64) -> bool {
    match family {
        Family::Cluster => true,
        Family::Theta(t) => (t - std::f64::consts::FRAC_PI_4).abs() < 1e-12 || near(eta, 0.0) || near(eta, PI),
        Family::General => false,
    }
}

/// Trials per primitive so that all `k` primitives succeed with probability `≥ 1 − ε`.
pub fn rus_budget(family: Family, epsilon: f64, k: usize) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::OutOfRange(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    match family {
        Family::Cluster => Ok(1),
        Family::Theta(t) => {
            let fail = t.cos().powi(2);
            let per = epsilon / k.max(1) as f64;
            Ok(((per.ln() / fail.ln()).ceil() as usize).max(1))
        }
        Family::General => Err(Error::UnsupportedFamily("general".into())),
    }
}

/// Angles `[c, b, a]` (application order) with `P(a)P(b)P(c) ∝ u`, shortened when possible.
pub fn euler_steps(u: &ComplexMatrix) -> Vec<f64> {
    if global_phase_distance(u, &ComplexMatrix::identity(2, 2)) < 1e-13 {
        return Vec::new();
    }
    let v = hadamard() * u;
    let (v00, v01, v10) = (v[(0, 0)], v[(0, 1)], v[(1, 0)]);
    let tiny = 1e-12;
    if v01.norm() < tiny && v10.norm() < tiny {
        return vec![wrap((v[(1, 1)] / v00).arg())];
    }
    if (v00.norm() - v01.norm()).abs() < tiny && v00.norm() > tiny {
        // V = Rz(a) H Rz(b) up to phase.
        let b = (v01 / v00).arg();
        let a = (v10 / v00).arg();
        let cand = vec![wrap(b), wrap(a)];
        if global_phase_distance(&ideal(&cand), u) < 1e-12 {
            return cand;
        }
    }
    let b = 2.0 * v01.norm().atan2(v00.norm());
    let (a, cc) = if v00.norm() < tiny {
        (wrap((v10 / v01).arg()), 0.0)
    } else {
        (wrap((v10 / v00).arg() + FRAC_PI_2), wrap((v01 / v00).arg() + FRAC_PI_2))
    };
    vec![cc, wrap(b), a]
}

fn ideal(steps: &[f64]) -> ComplexMatrix {
    steps
        .iter()
        .fold(ComplexMatrix::identity(2, 2), |acc, &e| primitive(e) * acc)
}

fn family_of(w: &CanonicalWire) -> Result<Family> {
    match w.family {
        Family::General => Err(Error::UnsupportedFamily(
            "only cluster and θ-family wires can be compiled".into(),
        )),
        f => Ok(f),
    }
}

fn build(family: Family, target: ComplexMatrix, angles: Vec<f64>, epsilon: f64) -> Result<MeasurementPattern> {
    let random = angles.iter().filter(|&&e| !is_deterministic(family, e)).count();
    let budget = if random == 0 {
        1
    } else {
        rus_budget(family, epsilon, random)?
    };
    let declared: usize = angles
        .iter()
        .map(|&e| if is_deterministic(family, e) { 1 } else { 2 * budget - 1 })
        .sum();
    if declared > MAX_PATTERN_SITES {
        return Err(Error::BudgetExceeded(format!(
            "{declared} sites exceed the cap of {MAX_PATTERN_SITES}"
        )));
    }
    Ok(MeasurementPattern {
        family,
        target,
        steps: angles.into_iter().map(|phase| PatternStep { phase }).collect(),
        epsilon,
        trial_budget: budget,
        declared_length: declared,
    })
}

/// Pattern implementing `target` on the correlation qubit, up to a Pauli
/// frame and global phase. Successful runs are exact; `epsilon` bounds the
/// probability that some primitive exhausts its trial budget.
pub fn compile_rotation(w: &CanonicalWire, target: &ComplexMatrix, epsilon: f64) -> Result<MeasurementPattern> {
    let family = family_of(w)?;
    if target.shape() != (2, 2) || !is_unitary(target, 1e-9) {
        return Err(Error::DimensionMismatch("target must be a 2x2 unitary".into()));
    }
    let angles = euler_steps(target);
    build(family, target.clone(), angles, epsilon)
}

/// Pattern taking the wire's initial correlation state `|L⟩` to `psi`.
pub fn compile_prep(w: &CanonicalWire, psi: &StateVector, epsilon: f64) -> Result<MeasurementPattern> {
    let family = family_of(w)?;
    let psi = crate::numerics::normalized(psi)?;
    let l = w.base.left().clone();
    let target = completion(&l, &psi);
    if fidelity(&l, &psi) > 1.0 - 1e-14 {
        return build(family, ComplexMatrix::identity(2, 2), Vec::new(), epsilon);
    }
    let computational = l[0].norm() < 1e-14 || l[1].norm() < 1e-14;
    if computational {
        // P(c)|L⟩ is |±⟩ for every c, so the first primitive is always P(0).
        let flip = if l[0].norm() < 1e-14 { PI } else { 0.0 };
        let chi = hadamard() * &psi;
        let mut candidates = vec![vec![0.0]];
        candidates.push(vec![0.0, wrap((chi[1] / chi[0]).arg() + flip)]);
        let b = 2.0 * chi[1].norm().atan2(chi[0].norm());
        let a = if chi[0].norm() < 1e-14 || chi[1].norm() < 1e-14 {
            0.0
        } else {
            (chi[1] / chi[0]).arg() + FRAC_PI_2
        };
        candidates.push(vec![0.0, wrap(b + flip), wrap(a)]);
        for cand in candidates {
            let out = ideal(&cand) * &l;
            if fidelity(&out, &psi) > 1.0 - 1e-12 {
                return build(family, target, cand, epsilon);
            }
        }
    }
    let angles = euler_steps(&target);
    build(family, target, angles, epsilon)
}

/// Unitary sending `from` to `to`.
fn completion(from: &StateVector, to: &StateVector) -> ComplexMatrix {
    let perp = |v: &StateVector| StateVector::from_vec(vec![-v[1].conj(), v[0].conj()]);
    crate::numerics::outer(to, from) + crate::numerics::outer(&perp(to), &perp(from))
}

/// `V` or `V′` for the wire's `{|φ_s⟩}`.
pub fn basis_map(w: &CanonicalWire, which: BasisMap) -> ComplexMatrix {
    let [p0, p1] = w.phi_basis();
    let (t0, t1) = match which {
        BasisMap::V => (crate::numerics::ket_plus(), crate::numerics::ket_minus()),
        BasisMap::VPrime => (crate::numerics::ket0(), crate::numerics::ket1()),
    };
    crate::numerics::outer(&t0, p0) + crate::numerics::outer(&t1, p1)
}

pub fn compile_v(w: &CanonicalWire, which: BasisMap, epsilon: f64) -> Result<MeasurementPattern> {
    compile_rotation(w, &basis_map(w, which), epsilon)
}

/// Exactly `n` deterministic primitives implementing `u`.
pub fn compile_exact(family: Family, u: &ComplexMatrix, n: usize) -> Result<Vec<f64>> {
    let unreachable = || Error::BudgetExceeded(format!("target not reachable with exactly {n} deterministic sites"));
    let ok = |angles: &[f64]| {
        angles.iter().all(|&e| is_deterministic(family, e)) && global_phase_distance(&ideal(angles), u) < 1e-12
    };
    if let Family::Theta(t) = family {
        if (t - std::f64::consts::FRAC_PI_4).abs() > 1e-12 {
            // Only H and HZ are available; the reachable group is tiny, so search it.
            let small = if n > 6 { 6 - n % 2 } else { n };
            for mask in 0..(1usize << small) {
                let mut angles: Vec<f64> = (0..small).map(|i| if mask >> i & 1 == 1 { PI } else { 0.0 }).collect();
                if ok(&angles) {
                    angles.extend(std::iter::repeat_n(0.0, n - small));
                    return Ok(angles);
                }
            }
            return Err(unreachable());
        }
    }
    let base = euler_steps(u);
    let padded = |mut v: Vec<f64>| -> Option<Vec<f64>> {
        if v.len() > n || (n - v.len()) % 2 == 1 {
            return None;
        }
        v.extend(std::iter::repeat_n(0.0, n - v.len()));
        Some(v)
    };
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if let Some(v) = padded(base.clone()) {
        candidates.push(v);
    }
    if n >= 3 {
        let e = euler_steps(&(u * hadamard()));
        let three: Vec<f64> = if e.len() == 3 { e } else { full_euler(&(u * hadamard())) };
        let mut four = vec![0.0];
        four.extend(three.iter().copied());
        if let Some(v) = padded(four) {
            candidates.push(v);
        }
        if let Some(v) = padded(full_euler(u)) {
            candidates.push(v);
        }
    }
    candidates.into_iter().find(|c| ok(c)).ok_or_else(unreachable)
}

/// Three-primitive form even when a shorter one exists.
fn full_euler(u: &ComplexMatrix) -> Vec<f64> {
    let v = hadamard() * u;
    let (v00, v01, v10) = (v[(0, 0)], v[(0, 1)], v[(1, 0)]);
    let b = 2.0 * v01.norm().atan2(v00.norm());
    if v00.norm() < 1e-12 {
        return vec![0.0, wrap(b), wrap((v10 / v01).arg())];
    }
    if v01.norm() < 1e-12 {
        return vec![0.0, 0.0, wrap((v[(1, 1)] / v00).arg())];
    }
    vec![
        wrap((v01 / v00).arg() + FRAC_PI_2),
        wrap(b),
        wrap((v10 / v00).arg() + FRAC_PI_2),
    ]
}

/// Outcome of running one primitive or pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub sites_used: usize,
    pub attempts: Vec<usize>,
}

fn measure_primitive(sim: &mut SimState, wire: usize, family: Family, eta: f64) -> Result<f64> {
    let basis = primitive_basis(family, eta)?;
    let op = MeasurementOp::projective(format!("P({eta:.6})"), &basis)?;
    if sim.remaining(wire) == 0 {
        return Err(Error::WireExhausted(wire));
    }
    let col = sim.cursor(wire);
    let tensor = sim.resource().wire(wire).tensor(col).clone();
    let k = sim.apply_measurement(Site::new(wire, col), &op, None)?;
    outcome_angle(&tensor, &basis[k])
}

/// Apply the ideal primitive `P(eta)` to wire `wire`, updating `sim.frames[wire]`.
/// Returns the number of attempts.
pub fn run_primitive(
    sim: &mut SimState,
    wire: usize,
    family: Family,
    eta: f64,
    budget: usize,
    sites: &mut usize,
) -> Result<usize> {
    let mut residual = 0.0;
    for attempt in 1..=budget {
        let frame = sim.frames[wire];
        let sign = if frame.x { -1.0 } else { 1.0 };
        let zeta = measure_primitive(sim, wire, family, sign * (eta - residual))?;
        *sites += 1;
        let fired = sim.transcript().last().map(|r| r.couplings.clone()).unwrap_or_default();
        let delta = sign * zeta + residual - eta;
        if near(delta, 0.0) || near(delta, PI) {
            let flip = near(delta, PI);
            sim.frames[wire] = PauliFrame::new(frame.z ^ flip, frame.x);
            sim.propagate_couplings(&fired);
            return Ok(attempt);
        }
        if !fired.is_empty() {
            return Err(Error::CouplingOrder(
                "a coupling fired during a non-deterministic primitive".into(),
            ));
        }
        residual = wrap(residual + sign * zeta);
        if attempt == budget {
            break;
        }
        let undo = measure_primitive(sim, wire, family, 0.0)?;
        *sites += 1;
        if near(undo, PI) {
            sim.frames[wire].x ^= true;
        }
    }
    Err(Error::RusExhausted(budget))
}

/// Run `pattern` on `wire`; the logical frame of that wire is tracked in `sim.frames`.
pub fn run_pattern(sim: &mut SimState, wire: usize, pattern: &MeasurementPattern) -> Result<RunStats> {
    if sim.remaining(wire) < pattern.declared_length.min(1) {
        return Err(Error::WireExhausted(wire));
    }
    let mut stats = RunStats::default();
    for step in &pattern.steps {
        let n = run_primitive(
            sim,
            wire,
            pattern.family,
            step.phase,
            pattern.trial_budget,
            &mut stats.sites_used,
        )?;
        stats.attempts.push(n);
    }
    Ok(stats)
}

/// Column-synchronous preparation of a web up to its last coupling column.
#[derive(Clone, Debug)]
pub struct WebPrepPattern {
    pub families: Vec<Family>,
    /// `angles[w][col]` for columns `0..=last coupling column`.
    pub angles: Vec<Vec<f64>>,
    /// Per-wire rotation applied after the coupled region.
    pub post: Vec<MeasurementPattern>,
}

impl WebPrepPattern {
    pub fn columns(&self) -> usize {
        self.angles.first().map_or(0, Vec::len)
    }
}

/// Compile a web preparation. `segments[w][j]` is the single-qubit unitary
/// wire `w` applies before the `j`-th distinct coupling column; `post[w]`
/// follows the last coupling.
pub fn compile_web_prep(
    wires: &[CanonicalWire],
    web: &WebResource,
    segments: &[Vec<ComplexMatrix>],
    post: &[ComplexMatrix],
    epsilon: f64,
) -> Result<WebPrepPattern> {
    let m = web.wire_count();
    if wires.len() != m || segments.len() != m || post.len() != m {
        return Err(Error::DimensionMismatch("one entry per wire is required".into()));
    }
    let mut cols: Vec<usize> = web.couplings().iter().map(|c| c.column).collect();
    cols.dedup();
    let mut angles = vec![Vec::new(); m];
    let mut families = Vec::new();
    for w in 0..m {
        let family = family_of(&wires[w])?;
        families.push(family);
        if segments[w].len() != cols.len() {
            return Err(Error::InvalidPattern(format!(
                "wire {w} needs {} segments, one per coupling column",
                cols.len()
            )));
        }
        let mut start = 0;
        for (j, &col) in cols.iter().enumerate() {
            let n = col + 1 - start;
            angles[w].extend(compile_exact(family, &segments[w][j], n)?);
            start = col + 1;
        }
    }
    let post = wires
        .iter()
        .zip(post)
        .map(|(w, u)| compile_rotation(w, u, epsilon))
        .collect::<Result<Vec<_>>>()?;
    Ok(WebPrepPattern { families, angles, post })
}

/// Execute a web preparation: lockstep deterministic columns, then per-wire post rotations.
pub fn run_web_prep(sim: &mut SimState, pattern: &WebPrepPattern) -> Result<Vec<RunStats>> {
    let m = pattern.angles.len();
    let mut stats = vec![RunStats::default(); m];
    for col in 0..pattern.columns() {
        for (w, st) in stats.iter_mut().enumerate() {
            if sim.cursor(w) != col {
                return Err(Error::CouplingOrder(format!("wire {w} is not at column {col}")));
            }
            let n = run_primitive(
                sim,
                w,
                pattern.families[w],
                pattern.angles[w][col],
                1,
                &mut st.sites_used,
            )?;
            st.attempts.push(n);
        }
    }
    for (w, st) in stats.iter_mut().enumerate() {
        let s = run_pattern(sim, w, &pattern.post[w])?;
        st.sites_used += s.sites_used;
        st.attempts.extend(s.attempts);
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::random::{random_state, random_unitary};
    use crate::numerics::{ket0, ket_plus, operator_distance, pauli_x, pauli_z};
    use crate::resource::{make_cluster_wire, make_theta_wire};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_8;

    /// Correlation operator implemented by `pattern`, with the frame undone.
    fn extracted(w: &CanonicalWire, pattern: &MeasurementPattern, seed: u64) -> ComplexMatrix {
        let base = w.base.resized(pattern.declared_length + 40).unwrap();
        let mut sim = SimState::with_reference(base, seed, 0);
        run_pattern(&mut sim, 0, pattern).unwrap();
        let op = sim.reference_operator().unwrap();
        let f = sim.frames[0];
        let mut fix = op;
        if f.x {
            fix = pauli_x() * fix;
        }
        if f.z {
            fix = pauli_z() * fix;
        }
        fix
    }

    #[test]
    fn cluster_phase_basis() {
        let w = make_cluster_wire(6).unwrap();
        let phi = 0.7;
        let basis = primitive_basis(Family::Cluster, phi).unwrap();
        let b = w.base.tensor(0).operator_for(&basis[0]);
        let want = primitive(phi);
        assert!(global_phase_distance(&(b * cr(2f64.sqrt())), &want) < 1e-12);
        // The "+" vector with e^{iφ} gives the conjugate angle.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let plus = StateVector::from_vec(vec![cr(h), C64::from_polar(h, phi)]);
        let b2 = w.base.tensor(0).operator_for(&plus) * cr(2f64.sqrt());
        assert!(global_phase_distance(&b2, &primitive(-phi)) < 1e-12);
    }

    #[test]
    fn identity_is_empty() {
        let w = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let p = compile_rotation(&w, &ComplexMatrix::identity(2, 2), 1e-3).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.declared_length, 0);
    }

    #[test]
    fn cluster_z_rotation_is_one_site() {
        let w = make_cluster_wire(6).unwrap();
        let u = primitive(0.9);
        let p = compile_rotation(&w, &u, 1e-6).unwrap();
        assert_eq!(p.steps.len(), 1);
        assert_eq!(p.declared_length, 1);
        assert!(operator_distance(&extracted(&w, &p, 1), &u) < 1e-10);
    }

    #[test]
    fn theta_pi_over_three() {
        let w = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let u = phase(PI / 3.0);
        let p = compile_rotation(&w, &u, 1e-3).unwrap();
        for seed in 0..20 {
            assert!(operator_distance(&extracted(&w, &p, seed), &u) <= 1e-3);
        }
    }

    #[test]
    fn budget_matches_bound() {
        let f = Family::Theta(FRAC_PI_8);
        let b = rus_budget(f, 1e-3, 1).unwrap();
        let fail = FRAC_PI_8.cos().powi(2);
        assert!(fail.powi(b as i32) <= 1e-3);
        assert!(fail.powi(b as i32 - 1) > 1e-3);
        let tiny = compile_rotation(&make_theta_wire(0.01, 4).unwrap(), &phase(1.0), 1e-300);
        assert!(matches!(tiny, Err(Error::BudgetExceeded(_))));
    }

    #[test]
    fn prep_plus_on_cluster() {
        let w = make_cluster_wire(8).unwrap();
        let p = compile_prep(&w, &ket_plus(), 1e-6).unwrap();
        assert!(p.steps.len() <= 2);
        assert!(fidelity(&(p.ideal_operator() * ket0()), &ket_plus()) > 1.0 - 1e-12);
        assert!(compile_prep(&w, &ket0(), 1e-6).unwrap().is_empty());
    }

    #[test]
    fn prep_random_theta_state() {
        let w = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let psi = random_state(&mut rng, 2);
            let p = compile_prep(&w, &psi, 1e-4).unwrap();
            let prepared = extracted(&w, &p, seed) * ket0();
            assert!(fidelity(&prepared, &psi) >= 1.0 - 1e-4);
        }
    }

    #[test]
    fn basis_maps() {
        for w in [make_cluster_wire(8).unwrap(), make_theta_wire(FRAC_PI_8, 8).unwrap()] {
            let v = compile_v(&w, BasisMap::V, 1e-4).unwrap();
            assert!(v.is_empty());
            let vp = compile_v(&w, BasisMap::VPrime, 1e-4).unwrap();
            assert_eq!(vp.steps.len(), 1);
            assert_eq!(vp.declared_length, 1);
            assert!(operator_distance(&extracted(&w, &vp, 0), &basis_map(&w, BasisMap::VPrime)) < 1e-10);
        }
    }

    #[test]
    fn exact_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let u = random_unitary(&mut rng, 2);
            for n in 3..8 {
                let a = compile_exact(Family::Cluster, &u, n).unwrap();
                assert_eq!(a.len(), n);
                assert!(global_phase_distance(&ideal(&a), &u) < 1e-12);
            }
        }
        let t = Family::Theta(FRAC_PI_8);
        assert_eq!(compile_exact(t, &hadamard(), 3).unwrap().len(), 3);
        assert!(compile_exact(t, &hadamard(), 2).is_err());
        assert!(compile_exact(t, &phase(0.3), 3).is_err());
    }

    #[test]
    fn pattern_text_round_trip() {
        let w = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let p = compile_rotation(&w, &phase(PI / 3.0), 1e-3).unwrap();
        let q = MeasurementPattern::from_text(&p.to_text()).unwrap();
        assert_eq!(q.steps, p.steps);
        assert_eq!(q.declared_length, p.declared_length);
        assert_eq!(q.to_text(), p.to_text());
        assert!(MeasurementPattern::from_text("family cluster\n").is_err());
    }

    #[test]
    fn compilation_is_deterministic() {
        let w = make_theta_wire(0.3, 10).unwrap();
        let u = random_unitary(&mut ChaCha8Rng::seed_from_u64(5), 2);
        assert_eq!(
            compile_rotation(&w, &u, 1e-4).unwrap().to_text(),
            compile_rotation(&w, &u, 1e-4).unwrap().to_text()
        );
    }

    #[test]
    fn general_family_is_unsupported() {
        let w = crate::resource::make_w_wire(&hadamard(), 0.3, 6);
        if let Ok(w) = w {
            assert!(matches!(
                compile_rotation(&w, &hadamard(), 1e-3),
                Err(Error::UnsupportedFamily(_))
            ));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn euler_reconstructs(seed in any::<u64>()) {
            let u = random_unitary(&mut ChaCha8Rng::seed_from_u64(seed), 2);
            prop_assert!(global_phase_distance(&ideal(&euler_steps(&u)), &u) < 1e-12);
        }

        #[test]
        fn cluster_soundness(seed in any::<u64>()) {
            let w = make_cluster_wire(8).unwrap();
            let u = random_unitary(&mut ChaCha8Rng::seed_from_u64(seed), 2);
            let p = compile_rotation(&w, &u, 1e-6).unwrap();
            prop_assert!(operator_distance(&extracted(&w, &p, seed), &u) < 1e-10);
        }

        #[test]
        fn theta_soundness(seed in any::<u64>()) {
            let w = make_theta_wire(FRAC_PI_8, 8).unwrap();
            let u = random_unitary(&mut ChaCha8Rng::seed_from_u64(seed), 2);
            let p = compile_rotation(&w, &u, 1e-4).unwrap();
            prop_assert!(operator_distance(&extracted(&w, &p, seed), &u) <= 1e-4);
        }
    }
}
