//! Dense complex linear algebra for the small matrices used throughout the
//! crate: bond dimension 2, a handful of retained sites, and transfer
//! matrices of size at most 64.

use std::cmp::Ordering;

use nalgebra::{linalg::Schur, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type StateVector = DVector<C64>;

/// Numerical tolerances shared by every module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerances {
    /// Absolute tolerance for reconstructions and probability sums.
    pub atol: f64,
    /// Tolerance for unitarity and normalization checks.
    pub unitary: f64,
    /// Probabilities below this are treated as impossible.
    pub zero_probability: f64,
}

pub const TOL: Tolerances = Tolerances {
    atol: 1e-10,
    unitary: 1e-12,
    zero_probability: 1e-14,
};

/// Largest dense eigenproblem accepted by [`eig_general`].
pub const MAX_EIG_DIM: usize = 64;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

#[inline]
pub fn cr(re: f64) -> C64 {
    C64::new(re, 0.0)
}

pub fn matrix2(a: C64, b: C64, c_: C64, d: C64) -> ComplexMatrix {
    ComplexMatrix::from_row_slice(2, 2, &[a, b, c_, d])
}

pub fn vector(entries: &[C64]) -> StateVector {
    StateVector::from_column_slice(entries)
}

pub fn identity(n: usize) -> ComplexMatrix {
    ComplexMatrix::identity(n, n)
}

pub fn hadamard() -> ComplexMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    matrix2(cr(h), cr(h), cr(h), cr(-h))
}

pub fn pauli_x() -> ComplexMatrix {
    matrix2(cr(0.0), cr(1.0), cr(1.0), cr(0.0))
}

pub fn pauli_y() -> ComplexMatrix {
    matrix2(cr(0.0), c(0.0, -1.0), c(0.0, 1.0), cr(0.0))
}

pub fn pauli_z() -> ComplexMatrix {
    matrix2(cr(1.0), cr(0.0), cr(0.0), cr(-1.0))
}

/// `diag(1, e^{i angle})`.
pub fn phase(angle: f64) -> ComplexMatrix {
    matrix2(cr(1.0), cr(0.0), cr(0.0), C64::from_polar(1.0, angle))
}

pub fn controlled_z() -> ComplexMatrix {
    let mut m = identity(4);
    m[(3, 3)] = cr(-1.0);
    m
}

pub fn ket0() -> StateVector {
    vector(&[cr(1.0), cr(0.0)])
}

pub fn ket1() -> StateVector {
    vector(&[cr(0.0), cr(1.0)])
}

pub fn ket_plus() -> StateVector {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vector(&[cr(h), cr(h)])
}

pub fn ket_minus() -> StateVector {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    vector(&[cr(h), cr(-h)])
}

pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

pub fn kron_vec(a: &StateVector, b: &StateVector) -> StateVector {
    a.kronecker(b)
}

/// `|a⟩⟨b|`.
pub fn outer(a: &StateVector, b: &StateVector) -> ComplexMatrix {
    a * b.adjoint()
}

pub fn max_abs(m: &ComplexMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_finite(m: &ComplexMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

pub fn unitarity_defect(m: &ComplexMatrix) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    max_abs(&(m.adjoint() * m - identity(m.nrows())))
}

pub fn is_unitary(m: &ComplexMatrix, tol: f64) -> bool {
    unitarity_defect(m) <= tol
}

pub fn normalized(v: &StateVector) -> Result<StateVector> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::OutOfRange("cannot normalize a zero vector".into()));
    }
    Ok(v / cr(n))
}

/// `|⟨a|b⟩|² / (‖a‖²‖b‖²)`; insensitive to global phase.
pub fn fidelity(a: &StateVector, b: &StateVector) -> f64 {
    let na = a.norm_squared();
    let nb = b.norm_squared();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dotc(b).norm_sqr() / (na * nb)
}

/// `⟨v|ρ|v⟩` for a normalized `v`.
pub fn state_fidelity_mixed(rho: &ComplexMatrix, v: &StateVector) -> f64 {
    let v = v / cr(v.norm());
    (v.adjoint() * rho * &v)[(0, 0)].re
}

/// Rank-one test via the second singular value.
pub fn second_singular_value(m: &ComplexMatrix) -> f64 {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    s.get(1).copied().unwrap_or(0.0)
}

/// Worst-case trace distance between `u|ψ⟩` and `v|ψ⟩` over pure inputs, for
/// 2×2 unitaries. Global phase is ignored.
pub fn operator_distance(u: &ComplexMatrix, v: &ComplexMatrix) -> f64 {
    assert_eq!(u.shape(), (2, 2), "operator_distance is defined for qubit operators");
    let w = u.adjoint() * v;
    let half = (w[(0, 0)] + w[(1, 1)]) / cr(2.0);
    let traceless = w - ComplexMatrix::identity(2, 2) * half;
    traceless.norm() / std::f64::consts::SQRT_2
}

/// Schmidt decomposition of a bipartite vector.
#[derive(Clone, Debug)]
pub struct Schmidt {
    /// Non-negative coefficients, sorted descending.
    pub coefficients: Vec<f64>,
    /// Left Schmidt vectors as columns (`d_a` rows).
    pub left: ComplexMatrix,
    /// Right Schmidt vectors as columns (`d_b` rows).
    pub right: ComplexMatrix,
}

impl Schmidt {
    pub fn rank(&self, tol: f64) -> usize {
        self.coefficients.iter().filter(|&&s| s > tol).count()
    }

    pub fn reconstruct(&self) -> StateVector {
        let da = self.left.nrows();
        let db = self.right.nrows();
        let mut v = StateVector::zeros(da * db);
        for (k, &s) in self.coefficients.iter().enumerate() {
            let term = kron_vec(&self.left.column(k).into_owned(), &self.right.column(k).into_owned());
            v += term * cr(s);
        }
        v
    }
}

/// Schmidt decomposition of `v` across the cut `d_a | d_b`, where the left
/// factor indexes the most significant part of `v`. The input is normalized
/// first.
pub fn schmidt_decompose(v: &StateVector, d_a: usize, d_b: usize) -> Result<Schmidt> {
    if d_a == 0 || d_b == 0 || d_a * d_b != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "vector of length {} does not factor as {} x {}",
            v.len(),
            d_a,
            d_b
        )));
    }
    let v = normalized(v)?;
    let m = ComplexMatrix::from_fn(d_a, d_b, |i, j| v[i * d_b + j]);
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(Ordering::Equal)
    });
    let k = order.len();
    let mut left = ComplexMatrix::zeros(d_a, k);
    let mut right = ComplexMatrix::zeros(d_b, k);
    let mut coefficients = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        coefficients.push(svd.singular_values[src]);
        left.set_column(dst, &u.column(src));
        right.set_column(dst, &vt.row(src).transpose());
    }
    Ok(Schmidt {
        coefficients,
        left,
        right,
    })
}

#[derive(Clone, Debug)]
pub struct Eigenpair {
    pub value: C64,
    pub vector: StateVector,
}

fn eig_order(a: &C64, b: &C64) -> Ordering {
    let key = |z: &C64| (z.norm(), z.re, z.im);
    let (ma, ra, ia) = key(a);
    let (mb, rb, ib) = key(b);
    // Moduli closer than 1e-12 are treated as tied so the real-part rule decides.
    if (ma - mb).abs() > 1e-12 {
        return mb.partial_cmp(&ma).unwrap_or(Ordering::Equal);
    }
    if (ra - rb).abs() > 1e-12 {
        return rb.partial_cmp(&ra).unwrap_or(Ordering::Equal);
    }
    ib.partial_cmp(&ia).unwrap_or(Ordering::Equal)
}

/// Eigenvalues of a general complex matrix, sorted by modulus (descending),
/// then real part, then imaginary part.
pub fn eigenvalues(m: &ComplexMatrix) -> Result<Vec<C64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.nrows() > MAX_EIG_DIM {
        return Err(Error::SizeGuard {
            qubits: m.nrows(),
            limit: MAX_EIG_DIM,
        });
    }
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000)
        .ok_or_else(|| Error::OutOfRange("Schur iteration did not converge".into()))?;
    let (_, t) = schur.unpack();
    let mut vals: Vec<C64> = (0..t.nrows()).map(|i| t[(i, i)]).collect();
    vals.sort_by(eig_order);
    Ok(vals)
}

/// Eigenpairs of a general complex matrix. Eigenvectors come from the null
/// direction of `M − λI` (smallest right singular vector).
pub fn eig_general(m: &ComplexMatrix) -> Result<Vec<Eigenpair>> {
    let vals = eigenvalues(m)?;
    let n = m.nrows();
    let pairs = vals
        .into_iter()
        .map(|value| {
            let shifted = m - identity(n) * value;
            let svd = shifted.svd(false, true);
            let vt = svd.v_t.expect("svd requested v_t");
            let (imin, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
            let vector = vt.row(imin).adjoint();
            Eigenpair { value, vector }
        })
        .collect();
    Ok(pairs)
}

/// Hermitian eigenvalues (ascending), used for entropies.
pub fn hermitian_eigenvalues(m: &ComplexMatrix) -> Vec<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    v
}

/// Von Neumann entropy in bits.
pub fn von_neumann_entropy_bits(rho: &ComplexMatrix) -> f64 {
    let tr = rho.trace().re;
    hermitian_eigenvalues(rho)
        .into_iter()
        .map(|p| p / tr)
        .filter(|&p| p > 1e-15)
        .map(|p| -p * p.log2())
        .sum()
}

/// Seeded random states and unitaries for sampling targets.
pub mod random {
    use super::*;
    use rand::distributions::Distribution;
    use rand::Rng;
    use statrs::distribution::Normal;

    fn gauss<R: Rng>(rng: &mut R) -> f64 {
        Normal::new(0.0, 1.0).expect("standard normal").sample(rng)
    }

    pub fn random_state<R: Rng>(rng: &mut R, dim: usize) -> StateVector {
        let v = StateVector::from_fn(dim, |_, _| c(gauss(rng), gauss(rng)));
        normalized(&v).expect("nonzero gaussian vector")
    }

    pub fn random_matrix<R: Rng>(rng: &mut R, n: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(n, n, |_, _| c(gauss(rng), gauss(rng)))
    }

    /// Random unitary from the QR factor of a Gaussian matrix.
    pub fn random_unitary<R: Rng>(rng: &mut R, n: usize) -> ComplexMatrix {
        random_matrix(rng, n).qr().q()
    }
}
