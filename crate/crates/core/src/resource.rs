//! Wire and web resource states.
//!
//! A wire of `N` sites is the matrix product state
//! `Σ ⟨R| A[s_N] ··· A[s_1] |L⟩ |s_1 … s_N⟩`; site 1 (index 0 here) acts
//! first on the left boundary. Webs couple several wires through gates
//! acting on neighbouring correlation spaces at chosen columns.

use std::f64::consts::FRAC_PI_4;

use crate::error::{Error, Result};
use crate::numerics::{
    controlled_z, cr, hadamard, is_finite, is_unitary, ket0, ket_minus, ket_plus, kron, matrix2, max_abs, normalized,
    outer, pauli_z, vector, ComplexMatrix, StateVector, C64, TOL,
};

/// Dense expansion is refused above this many physical qubits.
pub const MAX_EXPAND_QUBITS: usize = 20;

/// Site tensor with physical dimension 2 and bond dimension 2.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTensor {
    mats: [ComplexMatrix; 2],
}

impl SiteTensor {
    pub fn new(a0: ComplexMatrix, a1: ComplexMatrix) -> Result<Self> {
        for a in [&a0, &a1] {
            if a.shape() != (2, 2) {
                return Err(Error::DimensionMismatch(format!(
                    "site matrices must be 2x2, got {:?}",
                    a.shape()
                )));
            }
            if !is_finite(a) {
                return Err(Error::OutOfRange("site matrix has non-finite entries".into()));
            }
        }
        if a0.norm_squared() + a1.norm_squared() == 0.0 {
            return Err(Error::OutOfRange("site tensor is identically zero".into()));
        }
        Ok(Self { mats: [a0, a1] })
    }

    pub fn matrix(&self, s: usize) -> &ComplexMatrix {
        &self.mats[s]
    }

    pub fn matrices(&self) -> &[ComplexMatrix; 2] {
        &self.mats
    }

    /// Correlation-space operator induced by projecting the site onto `⟨b|`:
    /// `Σ_s ⟨b|s⟩ A[s]`.
    pub fn operator_for(&self, bra: &StateVector) -> ComplexMatrix {
        &self.mats[0] * bra[0].conj() + &self.mats[1] * bra[1].conj()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireResource {
    tensors: Vec<SiteTensor>,
    left: StateVector,
    right: StateVector,
}

pub fn default_left() -> StateVector {
    ket0()
}

pub fn default_right() -> StateVector {
    ket_plus()
}

impl WireResource {
    pub fn new(tensors: Vec<SiteTensor>, left: StateVector, right: StateVector) -> Result<Self> {
        if tensors.len() < 2 {
            return Err(Error::OutOfRange(format!(
                "a wire needs at least 2 sites, got {}",
                tensors.len()
            )));
        }
        if left.len() != 2 || right.len() != 2 {
            return Err(Error::DimensionMismatch(
                "boundary vectors must have dimension 2".into(),
            ));
        }
        let left = normalized(&left)?;
        let right = normalized(&right)?;
        Ok(Self { tensors, left, right })
    }

    pub fn uniform(tensor: SiteTensor, sites: usize, left: StateVector, right: StateVector) -> Result<Self> {
        Self::new(vec![tensor; sites], left, right)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, column: usize) -> &SiteTensor {
        &self.tensors[column]
    }

    pub fn tensors(&self) -> &[SiteTensor] {
        &self.tensors
    }

    pub fn left(&self) -> &StateVector {
        &self.left
    }

    pub fn right(&self) -> &StateVector {
        &self.right
    }

    pub fn is_uniform(&self) -> bool {
        self.tensors.windows(2).all(|w| w[0] == w[1])
    }

    /// Same wire with a different boundary.
    pub fn with_boundaries(&self, left: StateVector, right: StateVector) -> Result<Self> {
        Self::new(self.tensors.clone(), left, right)
    }

    /// Same tensors, truncated or extended (repeating the last tensor) to `sites`.
    pub fn resized(&self, sites: usize) -> Result<Self> {
        let mut tensors = self.tensors.clone();
        let last = tensors.last().cloned().expect("wire is non-empty");
        tensors.resize(sites, last);
        Self::new(tensors, self.left.clone(), self.right.clone())
    }
}

/// Which compilation strategy a wire supports.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// `A[0] = |+⟩⟨0|`, `A[1] = |−⟩⟨1|`.
    Cluster,
    /// `A[0] = cos θ H`, `A[1] = sin θ HZ`.
    Theta(f64),
    /// Any other pair admitting the rank-one form.
    General,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Cluster => "cluster",
            Family::Theta(_) => "theta",
            Family::General => "general",
        }
    }
}

/// Basis data of the rank-one form
/// `A[m₀] = r₀|φ₀⟩⟨0|`, `A[m₁] = r₁|φ₀⟩⟨0| + |φ₁⟩⟨1|` (after dividing the
/// tensors by `scale`).
#[derive(Clone, Debug)]
pub struct CanonicalForm {
    pub m_basis: [StateVector; 2],
    pub phi_basis: [StateVector; 2],
    pub r0: f64,
    pub r1: f64,
    pub scale: f64,
}

impl CanonicalForm {
    /// Residual of the rank-one form against the given tensor.
    pub fn residual(&self, tensor: &SiteTensor) -> f64 {
        let bra0 = vector(&[cr(1.0), cr(0.0)]);
        let bra1 = vector(&[cr(0.0), cr(1.0)]);
        let am0 = tensor.operator_for(&self.m_basis[0]) / cr(self.scale);
        let am1 = tensor.operator_for(&self.m_basis[1]) / cr(self.scale);
        let want0 = outer(&self.phi_basis[0], &bra0) * cr(self.r0);
        let want1 = outer(&self.phi_basis[0], &bra0) * cr(self.r1) + outer(&self.phi_basis[1], &bra1);
        max_abs(&(am0 - want0)).max(max_abs(&(am1 - want1)))
    }

    /// `|m′₀⟩ = r₀|m₀⟩ + r₁|m₁⟩`, `|m′₁⟩ = |m₁⟩`.
    pub fn m_prime(&self) -> [StateVector; 2] {
        [
            &self.m_basis[0] * cr(self.r0) + &self.m_basis[1] * cr(self.r1),
            self.m_basis[1].clone(),
        ]
    }

    /// Unitary whose columns are `|m₀⟩, |m₁⟩`.
    pub fn m_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_columns(&[self.m_basis[0].clone(), self.m_basis[1].clone()])
    }
}

#[derive(Clone, Debug)]
pub struct CanonicalWire {
    pub base: WireResource,
    pub family: Family,
    pub form: CanonicalForm,
    pub theta: Option<f64>,
    pub w: Option<ComplexMatrix>,
    pub alpha: Option<f64>,
}

impl CanonicalWire {
    pub fn r0(&self) -> f64 {
        self.form.r0
    }

    pub fn r1(&self) -> f64 {
        self.form.r1
    }

    pub fn m_basis(&self) -> &[StateVector; 2] {
        &self.form.m_basis
    }

    pub fn phi_basis(&self) -> &[StateVector; 2] {
        &self.form.phi_basis
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// Worst residual of the rank-one form over all sites.
    pub fn reconstruction_residual(&self) -> f64 {
        self.base
            .tensors()
            .iter()
            .map(|t| self.form.residual(t))
            .fold(0.0, f64::max)
    }

    pub fn with_base(&self, base: WireResource) -> Self {
        Self { base, ..self.clone() }
    }

    pub fn resized(&self, sites: usize) -> Result<Self> {
        Ok(self.with_base(self.base.resized(sites)?))
    }
}

/// Tensors `A[0] = cos θ H`, `A[1] = sin θ HZ`.
pub fn theta_tensor(theta: f64) -> SiteTensor {
    SiteTensor::new(hadamard() * cr(theta.cos()), hadamard() * pauli_z() * cr(theta.sin()))
        .expect("theta tensors are valid")
}

pub fn cluster_tensor() -> SiteTensor {
    let bra0 = vector(&[cr(1.0), cr(0.0)]);
    let bra1 = vector(&[cr(0.0), cr(1.0)]);
    SiteTensor::new(outer(&ket_plus(), &bra0), outer(&ket_minus(), &bra1)).expect("cluster tensors are valid")
}

fn snap_r1(r0: f64, r1: f64) -> (f64, f64) {
    if r1 < 1e-12 {
        (1.0, 0.0)
    } else {
        (r0, r1)
    }
}

pub fn make_theta_wire(theta: f64, sites: usize) -> Result<CanonicalWire> {
    make_theta_wire_with(theta, sites, default_left(), default_right())
}

pub fn make_theta_wire_with(theta: f64, sites: usize, left: StateVector, right: StateVector) -> Result<CanonicalWire> {
    if !(theta > 0.0 && theta <= FRAC_PI_4 + 1e-15) {
        return Err(Error::OutOfRange(format!("theta must lie in (0, pi/4], got {theta}")));
    }
    let base = WireResource::uniform(theta_tensor(theta), sites, left, right)?;
    let (s, co) = theta.sin_cos();
    // A[m₀] = sin 2θ |+⟩⟨0| for |m₀⟩ = (sin θ, cos θ); |m₁⟩ is its orthogonal partner.
    let m0 = vector(&[cr(s), cr(co)]);
    let m1 = vector(&[cr(co), cr(-s)]);
    let (r0, r1) = snap_r1((2.0 * theta).sin(), (2.0 * theta).cos());
    let form = CanonicalForm {
        m_basis: [m0, m1],
        phi_basis: [ket_plus(), ket_minus()],
        r0,
        r1,
        scale: 1.0,
    };
    Ok(CanonicalWire {
        base,
        family: Family::Theta(theta),
        form,
        theta: Some(theta),
        w: None,
        alpha: None,
    })
}

pub fn make_cluster_wire(sites: usize) -> Result<CanonicalWire> {
    make_cluster_wire_with(sites, default_left(), default_right())
}

pub fn make_cluster_wire_with(sites: usize, left: StateVector, right: StateVector) -> Result<CanonicalWire> {
    let base = WireResource::uniform(cluster_tensor(), sites, left, right)?;
    let form = CanonicalForm {
        m_basis: [ket0(), vector(&[cr(0.0), cr(1.0)])],
        phi_basis: [ket_plus(), ket_minus()],
        r0: 1.0,
        r1: 0.0,
        scale: 1.0,
    };
    Ok(CanonicalWire {
        base,
        family: Family::Cluster,
        form,
        theta: None,
        w: None,
        alpha: None,
    })
}

/// `A[0] = W/√2`, `A[1] = W diag(e^{−iα}, e^{iα})/√2`.
pub fn make_w_wire(w: &ComplexMatrix, alpha: f64, sites: usize) -> Result<CanonicalWire> {
    if w.shape() != (2, 2) || !is_unitary(w, 1e-10) {
        return Err(Error::OutOfRange("W must be a 2x2 unitary".into()));
    }
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let d = matrix2(
        C64::from_polar(1.0, -alpha),
        cr(0.0),
        cr(0.0),
        C64::from_polar(1.0, alpha),
    );
    let a0 = w * cr(h);
    let a1 = w * d * cr(h);
    let mut wire = from_tensors(a0, a1, sites, default_left(), default_right())?;
    wire.w = Some(w.clone());
    wire.alpha = Some(alpha);
    Ok(wire)
}

/// Uniform wire from an arbitrary tensor pair, classified by family.
pub fn from_tensors(
    a0: ComplexMatrix,
    a1: ComplexMatrix,
    sites: usize,
    left: StateVector,
    right: StateVector,
) -> Result<CanonicalWire> {
    let form = to_canonical(&a0, &a1)?;
    let tensor = SiteTensor::new(a0, a1)?;
    let family = if tensor == cluster_tensor() {
        Family::Cluster
    } else {
        Family::General
    };
    let base = WireResource::uniform(tensor, sites, left, right)?;
    Ok(CanonicalWire {
        base,
        family,
        form,
        theta: None,
        w: None,
        alpha: None,
    })
}

fn det2(m: &ComplexMatrix) -> C64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

/// Roots `(α, β)` of the binary quadratic `d0 α² + x αβ + d1 β²`.
fn projective_roots(d0: C64, x: C64, d1: C64) -> Vec<(C64, C64)> {
    let tiny = 1e-13 * (d0.norm() + x.norm() + d1.norm()).max(1e-300);
    let quad = |a: C64, b: C64, cc: C64| -> Vec<C64> {
        let disc = (b * b - a * cr(4.0) * cc).sqrt();
        vec![(-b + disc) / (a * cr(2.0)), (-b - disc) / (a * cr(2.0))]
    };
    if d0.norm() <= tiny && d1.norm() <= tiny {
        return vec![(cr(1.0), cr(0.0)), (cr(0.0), cr(1.0))];
    }
    if d0.norm() >= d1.norm() {
        // β = 1, solve for α.
        quad(d0, x, d1).into_iter().map(|a| (a, cr(1.0))).collect()
    } else {
        quad(d1, x, d0).into_iter().map(|b| (cr(1.0), b)).collect()
    }
}

/// Find a basis `{|m_s⟩}` bringing `(A0, A1)` to the rank-one form.
///
/// `det(α A0 + β A1)` is a binary quadratic; its roots give the two
/// rank-one combinations. The root whose kernel contains `|1⟩` becomes
/// `A[m₀]`, and the orthogonal basis vector must then complete the form.
pub fn to_canonical(a0: &ComplexMatrix, a1: &ComplexMatrix) -> Result<CanonicalForm> {
    if a0.shape() != (2, 2) || a1.shape() != (2, 2) {
        return Err(Error::DimensionMismatch("canonical form needs 2x2 matrices".into()));
    }
    let d0 = det2(a0);
    let d1 = det2(a1);
    let x = a0[(0, 0)] * a1[(1, 1)] + a0[(1, 1)] * a1[(0, 0)] - a0[(0, 1)] * a1[(1, 0)] - a0[(1, 0)] * a1[(0, 1)];
    let size = a0.norm() + a1.norm();
    if d0.norm() + x.norm() + d1.norm() <= 1e-14 * size * size {
        return Err(Error::NotCanonical(
            "every combination of the tensors is singular".into(),
        ));
    }
    let e0 = ket0();
    let e1 = vector(&[cr(0.0), cr(1.0)]);
    let mut chosen = None;
    for (alpha, beta) in projective_roots(d0, x, d1) {
        let n = (alpha.norm_sqr() + beta.norm_sqr()).sqrt();
        let m0 = vector(&[alpha.conj() / cr(n), beta.conj() / cr(n)]);
        let b = (a0 * m0[0].conj() + a1 * m0[1].conj()) / cr(1.0);
        let col1 = (&b * &e1).norm();
        let col0 = (&b * &e0).norm();
        if col1 <= 1e-9 * size && col0 > 1e-9 * size {
            chosen = Some((m0, b));
            break;
        }
    }
    let (m0, bm0) = chosen.ok_or_else(|| Error::NotCanonical("no rank-one combination annihilates |1>".into()))?;
    let mut m1 = vector(&[-m0[1].conj(), m0[0].conj()]);
    let mut bm1 = a0 * m1[0].conj() + a1 * m1[1].conj();
    let scale = (&bm1 * &e1).norm();
    if scale <= 1e-12 * size {
        return Err(Error::NotCanonical("second basis operator vanishes on |1>".into()));
    }
    let u0 = (&bm0 * &e0) / cr(scale);
    let r0 = u0.norm();
    let phi0 = &u0 / cr(r0);
    let v = (&bm1 * &e0) / cr(scale);
    let overlap = phi0.dotc(&v);
    if (&v - &phi0 * overlap).norm() > 1e-8 {
        return Err(Error::NotCanonical("A[m1]|0> is not parallel to |phi0>".into()));
    }
    if overlap.norm() > 1e-14 {
        let ph = overlap / cr(overlap.norm());
        m1 *= ph;
        bm1 = a0 * m1[0].conj() + a1 * m1[1].conj();
    }
    let phi1 = (&bm1 * &e1) / cr(scale);
    let r1 = overlap.norm();
    if phi0.dotc(&phi1).norm() > 1e-8 {
        return Err(Error::NotCanonical("phi basis is not orthogonal".into()));
    }
    if (r0 * r0 + r1 * r1 - 1.0).abs() > 1e-8 {
        return Err(Error::NotCanonical(format!("r0^2 + r1^2 = {}", r0 * r0 + r1 * r1)));
    }
    let (r0, r1) = snap_r1(r0, r1);
    Ok(CanonicalForm {
        m_basis: [m0, m1],
        phi_basis: [phi0, phi1],
        r0,
        r1,
        scale,
    })
}

/// Gate between the correlation spaces of two adjacent wires, applied after
/// both wires' tensors at `column`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub upper: usize,
    pub lower: usize,
    pub column: usize,
    pub gate: ComplexMatrix,
}

impl Coupling {
    pub fn cz(upper: usize, lower: usize, column: usize) -> Self {
        Self {
            upper,
            lower,
            column,
            gate: controlled_z(),
        }
    }

    pub fn is_cz(&self) -> bool {
        max_abs(&(&self.gate - controlled_z())) < 1e-12
    }
}

#[derive(Clone, Debug)]
pub struct WebResource {
    wires: Vec<WireResource>,
    couplings: Vec<Coupling>,
    /// Virtual subsystems associated with each physical site.
    pub virtual_per_site: usize,
}

impl WebResource {
    /// A lone wire viewed as a one-row web.
    pub fn single(wire: WireResource) -> Self {
        Self {
            wires: vec![wire],
            couplings: Vec::new(),
            virtual_per_site: 2,
        }
    }

    pub fn wires(&self) -> &[WireResource] {
        &self.wires
    }

    pub fn wire(&self, w: usize) -> &WireResource {
        &self.wires[w]
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn wire_count(&self) -> usize {
        self.wires.len()
    }

    pub fn columns(&self) -> usize {
        self.wires[0].len()
    }

    pub fn qubit_count(&self) -> usize {
        self.wires.iter().map(|w| w.len()).sum()
    }

    /// Index of a physical site in the expanded state (wire-major, site 0 most significant).
    pub fn qubit_index(&self, wire: usize, column: usize) -> usize {
        self.wires[..wire].iter().map(|w| w.len()).sum::<usize>() + column
    }

    pub fn last_coupling_column(&self) -> Option<usize> {
        self.couplings.iter().map(|c| c.column).max()
    }
}

impl From<WireResource> for WebResource {
    fn from(w: WireResource) -> Self {
        Self::single(w)
    }
}

pub fn make_web(wires: &[CanonicalWire], couplings: Vec<Coupling>) -> Result<WebResource> {
    if wires.len() < 2 {
        return Err(Error::InvalidWeb("a web needs at least two wires".into()));
    }
    let n = wires[0].len();
    if wires.iter().any(|w| w.len() != n) {
        return Err(Error::InvalidWeb("all wires must have the same length".into()));
    }
    for cpl in &couplings {
        if cpl.upper >= wires.len() || cpl.lower >= wires.len() || cpl.upper.abs_diff(cpl.lower) != 1 {
            return Err(Error::InvalidWeb(format!(
                "wires {} and {} are not adjacent",
                cpl.upper, cpl.lower
            )));
        }
        if cpl.column >= n {
            return Err(Error::InvalidWeb(format!(
                "coupling column {} outside 0..{}",
                cpl.column, n
            )));
        }
        if cpl.gate.shape() != (4, 4) || !is_unitary(&cpl.gate, TOL.unitary * 10.0) {
            return Err(Error::NonUnitaryCoupling);
        }
    }
    let mut couplings = couplings;
    couplings.sort_by_key(|c| c.column);
    Ok(WebResource {
        wires: wires.iter().map(|w| w.base.clone()).collect(),
        couplings,
        virtual_per_site: 4,
    })
}

/// Embed a single-wire operator on wire `w` of an `m`-wire correlation space.
pub(crate) fn embed_one(op: &ComplexMatrix, w: usize, m: usize) -> ComplexMatrix {
    let mut acc = ComplexMatrix::identity(1, 1);
    for k in 0..m {
        acc = if k == w {
            kron(&acc, op)
        } else {
            kron(&acc, &ComplexMatrix::identity(2, 2))
        };
    }
    acc
}

/// Embed a two-wire gate acting on `(a, b)` (with `a` the more significant
/// input of `gate`) into an `m`-wire correlation space.
pub(crate) fn embed_two(gate: &ComplexMatrix, a: usize, b: usize, m: usize) -> ComplexMatrix {
    let dim = 1usize << m;
    let bit = |idx: usize, w: usize| (idx >> (m - 1 - w)) & 1;
    ComplexMatrix::from_fn(dim, dim, |row, col| {
        for w in 0..m {
            if w != a && w != b && bit(row, w) != bit(col, w) {
                return cr(0.0);
            }
        }
        let r = bit(row, a) * 2 + bit(row, b);
        let cc = bit(col, a) * 2 + bit(col, b);
        gate[(r, cc)]
    })
}

/// Dense physical state of a web (or a wire via `WebResource::single`),
/// normalized. Qubit order is wire-major with site 0 most significant.
pub fn expand_state(web: &WebResource) -> Result<StateVector> {
    let m = web.wire_count();
    let n = web.columns();
    let total = web.qubit_count();
    if total > MAX_EXPAND_QUBITS {
        return Err(Error::SizeGuard {
            qubits: total,
            limit: MAX_EXPAND_QUBITS,
        });
    }
    let mut left = ComplexMatrix::identity(1, 1);
    let mut right = ComplexMatrix::identity(1, 1);
    for w in web.wires() {
        left = kron(&left, &ComplexMatrix::from_column_slice(2, 1, w.left().as_slice()));
        right = kron(&right, &ComplexMatrix::from_column_slice(2, 1, w.right().as_slice()));
    }
    let left: StateVector = left.column(0).into_owned();
    let right: StateVector = right.column(0).into_owned();
    // Branches indexed by physical bits in column-major order.
    let mut branches: Vec<StateVector> = vec![left];
    for col in 0..n {
        for w in 0..m {
            let ops: Vec<ComplexMatrix> = (0..2)
                .map(|s| embed_one(web.wire(w).tensor(col).matrix(s), w, m))
                .collect();
            branches = branches.iter().flat_map(|v| ops.iter().map(move |op| op * v)).collect();
        }
        for cpl in web.couplings().iter().filter(|c| c.column == col) {
            let g = embed_two(&cpl.gate, cpl.upper, cpl.lower, m);
            for v in branches.iter_mut() {
                *v = &g * &*v;
            }
        }
    }
    let mut out = StateVector::zeros(1 << total);
    for (idx, v) in branches.iter().enumerate() {
        // idx bits: column-major (col, wire); remap to wire-major.
        let mut target = 0usize;
        for col in 0..n {
            for w in 0..m {
                let pos_cm = col * m + w;
                let bitv = (idx >> (n * m - 1 - pos_cm)) & 1;
                let q = web.qubit_index(w, col);
                target |= bitv << (total - 1 - q);
            }
        }
        out[target] = right.dotc(v);
    }
    normalized(&out).map_err(|_| Error::OutOfRange("resource state has zero norm".into()))
}

pub fn expand_wire(wire: &WireResource) -> Result<StateVector> {
    expand_state(&WebResource::single(wire.clone()))
}

/// Amplitude-level check helper: `⟨R| A[s_N] ··· A[s_1] |L⟩` for one bitstring.
pub fn wire_amplitude(wire: &WireResource, bits: &[usize]) -> C64 {
    let mut v = wire.left().clone();
    for (col, &s) in bits.iter().enumerate() {
        v = wire.tensor(col).matrix(s) * v;
    }
    wire.right().dotc(&v)
}
