//! Transfer-matrix spectra, correlators, local entropy and success statistics.

use std::fmt::Write as _;

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::{cr, eigenvalues, kron, outer, von_neumann_entropy_bits, ComplexMatrix, C64};
use crate::resource::{CanonicalWire, SiteTensor, WireResource};

/// Relative moduli below this count as zero when forming the correlation
/// length; `√r₁` at float-noise `r₁` is about 1e-8.
const ZERO_EIGENVALUE: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct TransferSpectrum {
    pub matrix: ComplexMatrix,
    /// Sorted by modulus, largest first.
    pub eigenvalues: Vec<C64>,
    /// `|λ₂| / |λ₁|`.
    pub ratio: f64,
    /// Correlation length in sites; `+∞` when the two leading moduli coincide.
    pub xi: f64,
}

/// `E = Σ_s A[s] ⊗ conj(A[s])`.
pub fn transfer_matrix(t: &SiteTensor) -> ComplexMatrix {
    t.matrices()
        .iter()
        .fold(ComplexMatrix::zeros(4, 4), |acc, a| acc + kron(a, &a.map(|z| z.conj())))
}

pub fn transfer_spectrum(t: &SiteTensor) -> Result<TransferSpectrum> {
    let matrix = transfer_matrix(t);
    let eigenvalues = eigenvalues(&matrix)?;
    let l1 = eigenvalues[0].norm();
    let l2 = eigenvalues.get(1).map_or(0.0, |z| z.norm());
    if l1 == 0.0 {
        return Err(Error::OutOfRange("transfer matrix is nilpotent".into()));
    }
    let ratio = if l2 < ZERO_EIGENVALUE * l1 { 0.0 } else { l2 / l1 };
    let xi = if ratio == 0.0 {
        0.0
    } else if (1.0 - ratio).abs() < 1e-12 {
        f64::INFINITY
    } else {
        -1.0 / ratio.ln()
    };
    Ok(TransferSpectrum {
        matrix,
        eigenvalues,
        ratio,
        xi,
    })
}

pub fn correlation_length(w: &CanonicalWire) -> Result<TransferSpectrum> {
    if !w.base.is_uniform() {
        return Err(Error::InvalidPattern("correlation length needs a uniform wire".into()));
    }
    transfer_spectrum(w.base.tensor(0))
}

/// `ξ = −1/ln √r₁`, with `ξ = 0` at `r₁ = 0`.
pub fn closed_form_xi(r1: f64) -> f64 {
    if r1 <= 0.0 {
        0.0
    } else {
        -1.0 / r1.sqrt().ln()
    }
}

/// `⟨Π_k O_k⟩` for single-site observables at distinct sites, contracted exactly.
pub fn expectation(wire: &WireResource, ops: &[(usize, &ComplexMatrix)]) -> Result<C64> {
    for (k, o) in ops {
        if *k >= wire.len() {
            return Err(Error::OutOfRange(format!(
                "site {k} outside a wire of {} sites",
                wire.len()
            )));
        }
        if o.shape() != (2, 2) {
            return Err(Error::DimensionMismatch("observables must be 2x2".into()));
        }
    }
    let mut num = outer(wire.left(), wire.left());
    let mut den = num.clone();
    for k in 0..wire.len() {
        let a = wire.tensor(k).matrices();
        let plain = |rho: &ComplexMatrix| &a[0] * rho * a[0].adjoint() + &a[1] * rho * a[1].adjoint();
        num = match ops.iter().find(|(site, _)| *site == k) {
            Some((_, o)) => {
                let mut acc = ComplexMatrix::zeros(2, 2);
                for s in 0..2 {
                    for sp in 0..2 {
                        acc += &a[sp] * &num * a[s].adjoint() * o[(s, sp)];
                    }
                }
                acc
            }
            None => plain(&num),
        };
        den = plain(&den);
        let scale = den.trace().re;
        if scale <= 0.0 {
            return Err(Error::OutOfRange("wire state has zero norm".into()));
        }
        num /= cr(scale);
        den /= cr(scale);
    }
    let r = wire.right();
    let n = r.dotc(&(&num * r));
    let d = r.dotc(&(&den * r));
    Ok(n / d)
}

/// Connected correlator `⟨O_i O_j⟩ − ⟨O_i⟩⟨O_j⟩` (columns counted from 0).
pub fn two_point_correlator(wire: &WireResource, o: &ComplexMatrix, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::OutOfRange("correlator needs two distinct sites".into()));
    }
    let both = expectation(wire, &[(i, o), (j, o)])?;
    let oi = expectation(wire, &[(i, o)])?;
    let oj = expectation(wire, &[(j, o)])?;
    Ok((both - oi * oj).re)
}

#[derive(Clone, Debug)]
pub struct DecayFit {
    /// `(distance, connected correlator)` pairs.
    pub points: Vec<(usize, f64)>,
    /// Least-squares slope of `ln|C|` against distance.
    pub slope: f64,
    /// `−1/ξ` from the transfer spectrum.
    pub expected_slope: f64,
}

impl DecayFit {
    pub fn relative_error(&self) -> f64 {
        ((self.slope - self.expected_slope) / self.expected_slope).abs()
    }
}

/// Fit the bulk decay of `⟨O_i O_{i+d}⟩_c` for the given distances. The
/// first site sits `margin` columns from the left end and the wire extends
/// `margin` columns beyond the farthest partner.
pub fn fit_decay(w: &CanonicalWire, o: &ComplexMatrix, distances: &[usize], margin: usize) -> Result<DecayFit> {
    let dmax = *distances
        .iter()
        .max()
        .ok_or_else(|| Error::EmptyInput("no distances".into()))?;
    let wire = w.base.resized(2 * margin + dmax + 1)?;
    let spectrum = correlation_length(w)?;
    let mut points = Vec::new();
    for &d in distances {
        let c = two_point_correlator(&wire, o, margin, margin + d)?;
        points.push((d, c));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.abs().ln()).collect();
    if ys.iter().any(|y| !y.is_finite()) {
        return Err(Error::OutOfRange("correlator vanishes; no decay to fit".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let expected_slope = if spectrum.xi > 0.0 {
        -1.0 / spectrum.xi
    } else {
        f64::NEG_INFINITY
    };
    Ok(DecayFit {
        points,
        slope: sxy / sxx,
        expected_slope,
    })
}

/// Reduced density matrix of one site.
pub fn site_density(wire: &WireResource, site: usize) -> Result<ComplexMatrix> {
    if site >= wire.len() {
        return Err(Error::OutOfRange(format!(
            "site {site} outside a wire of {} sites",
            wire.len()
        )));
    }
    let mut left = outer(wire.left(), wire.left());
    for k in 0..site {
        let a = wire.tensor(k).matrices();
        left = &a[0] * &left * a[0].adjoint() + &a[1] * &left * a[1].adjoint();
        let tr = left.trace().re;
        left /= cr(tr);
    }
    let mut right = outer(wire.right(), wire.right());
    for k in (site + 1..wire.len()).rev() {
        let a = wire.tensor(k).matrices();
        right = a[0].adjoint() * &right * &a[0] + a[1].adjoint() * &right * &a[1];
        let tr = right.trace().re;
        right /= cr(tr);
    }
    let a = wire.tensor(site).matrices();
    let mut rho = ComplexMatrix::zeros(2, 2);
    for s in 0..2 {
        for sp in 0..2 {
            rho[(s, sp)] = (&right * &a[s] * &left * a[sp].adjoint()).trace();
        }
    }
    let tr = rho.trace();
    Ok(rho / tr)
}

/// Von Neumann entropy (bits) of one site.
pub fn local_entropy(wire: &WireResource, site: usize) -> Result<f64> {
    Ok(von_neumann_entropy_bits(&site_density(wire, site)?).clamp(0.0, 1.0))
}

/// One repeat-until-success phase of one shot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSample {
    pub attempts: usize,
    pub succeeded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuccessStats {
    pub shots: usize,
    pub successes: usize,
    pub p_hat: f64,
    /// Wilson interval at the configured confidence.
    pub ci: (f64, f64),
    pub expected: f64,
    pub expected_in_ci: bool,
    pub chi_square: Option<ChiSquare>,
}

/// Two-sided normal quantile for the given confidence (0.99 → 2.5758…).
pub fn normal_quantile(confidence: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + confidence / 2.0)
}

pub fn wilson_interval(successes: usize, n: usize, confidence: f64) -> (f64, f64) {
    let z = normal_quantile(confidence);
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

/// Chi-square test of counts against expected probabilities, pooling
/// neighbouring cells until each expects at least five events.
pub fn chi_square(counts: &[usize], probs: &[f64]) -> Option<ChiSquare> {
    let n: usize = counts.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (c, p) in counts.iter().zip(probs) {
        acc.0 += *c as f64;
        acc.1 += p * n as f64;
        if acc.1 >= 5.0 {
            cells.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.1 > 0.0 || acc.0 > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => cells.push(acc),
        }
    }
    if cells.len() < 2 {
        return None;
    }
    let statistic: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len() - 1;
    let dist = ChiSquared::new(dof as f64).ok()?;
    Some(ChiSquare {
        statistic,
        dof,
        p_value: 1.0 - dist.cdf(statistic),
    })
}

/// Success statistics for one phase with budget `trials` and failure probability `r1`.
pub fn success_stats(samples: &[PhaseSample], r1: f64, trials: usize, confidence: f64) -> Result<SuccessStats> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no shots".into()));
    }
    if samples.len() < 100 {
        return Err(Error::OutOfRange(format!(
            "need at least 100 shots, got {}",
            samples.len()
        )));
    }
    let shots = samples.len();
    let successes = samples.iter().filter(|s| s.succeeded).count();
    let p_hat = successes as f64 / shots as f64;
    let ci = wilson_interval(successes, shots, confidence);
    let expected = 1.0 - r1.powi(trials as i32);
    // Cells: success at attempt 1..=trials, then overall failure.
    let mut counts = vec![0usize; trials + 1];
    for s in samples {
        if s.succeeded && (1..=trials).contains(&s.attempts) {
            counts[s.attempts - 1] += 1;
        } else {
            counts[trials] += 1;
        }
    }
    let mut probs: Vec<f64> = (0..trials).map(|k| r1.powi(k as i32) * (1.0 - r1)).collect();
    probs.push(r1.powi(trials as i32));
    let chi = if r1 > 0.0 { chi_square(&counts, &probs) } else { None };
    Ok(SuccessStats {
        shots,
        successes,
        p_hat,
        ci,
        expected,
        expected_in_ci: ci.0 <= expected && expected <= ci.1,
        chi_square: chi,
    })
}

pub fn spectrum_csv(rows: &[(f64, f64, f64, f64)]) -> String {
    let mut out = String::from("theta,r1,xi_spectral,xi_closed_form\n");
    for (t, r1, xs, xc) in rows {
        let _ = writeln!(out, "{t:.12},{r1:.12},{xs:.12},{xc:.12}");
    }
    out
}

pub fn correlator_csv(points: &[(usize, f64)]) -> String {
    let mut out = String::from("distance,correlator\n");
    for (d, c) in points {
        let _ = writeln!(out, "{d},{c:.15e}");
    }
    out
}

pub fn entropy_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("theta,entropy_bits\n");
    for (t, s) in rows {
        let _ = writeln!(out, "{t:.12},{s:.12}");
    }
    out
}

/// One row per shot; `trials` holds `phase(i)/phase(iii)` attempts per wire, wires separated by `;`.
pub fn shots_csv(rows: &[(usize, Vec<[usize; 2]>, bool)]) -> String {
    let mut out = String::from("shot,trials,success\n");
    for (i, t, ok) in rows {
        let t: Vec<String> = t.iter().map(|p| format!("{}/{}", p[0], p[1])).collect();
        let _ = writeln!(out, "{i},{},{ok}", t.join(";"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ket0, pauli_x, pauli_z};
    use crate::resource::{expand_wire, make_cluster_wire, make_theta_wire};
    use crate::simulator::oracle;
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_6, FRAC_PI_8};

    fn grid() -> Vec<f64> {
        (1..=20).map(|k| FRAC_PI_4 * k as f64 / 20.0).collect()
    }

    #[test]
    fn spectrum_matches_closed_form() {
        for theta in grid() {
            let w = make_theta_wire(theta, 4).unwrap();
            let s = correlation_length(&w).unwrap();
            let lhs = if s.xi == 0.0 { 0.0 } else { (-1.0 / s.xi).exp() };
            assert!((lhs - w.r1().sqrt()).abs() <= 1e-9, "theta {theta}");
        }
        let cluster = correlation_length(&make_theta_wire(FRAC_PI_4, 4).unwrap()).unwrap();
        assert_eq!(cluster.xi, 0.0);
        let s = correlation_length(&make_theta_wire(FRAC_PI_8, 4).unwrap()).unwrap();
        assert!((s.xi - 5.77078).abs() < 1e-4);
        let s = correlation_length(&make_theta_wire(FRAC_PI_6, 4).unwrap()).unwrap();
        assert!(((-1.0 / s.xi).exp() - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn correlator_matches_dense() {
        let w = make_theta_wire(FRAC_PI_8, 10).unwrap();
        let full = expand_wire(&w.base).unwrap();
        let full = crate::numerics::normalized(&full).unwrap();
        let x = pauli_x();
        let ev = |qs: &[usize]| {
            let mut v = full.clone();
            for &q in qs {
                v = oracle::apply_kraus(&v, 10, q, &x);
            }
            full.dotc(&v).re
        };
        let want = ev(&[3, 7]) - ev(&[3]) * ev(&[7]);
        let got = two_point_correlator(&w.base, &x, 3, 7).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn cluster_correlators_vanish() {
        let w = make_cluster_wire(16).unwrap();
        for d in 2..8 {
            assert!(two_point_correlator(&w.base, &pauli_z(), 4, 4 + d).unwrap().abs() < 1e-10);
        }
        assert!(two_point_correlator(&w.base, &pauli_z(), 3, 3).is_err());
    }

    #[test]
    fn decay_slope_matches_xi() {
        let distances: Vec<usize> = (2..=12).step_by(2).collect();
        for theta in [FRAC_PI_8, FRAC_PI_6, std::f64::consts::PI / 5.0] {
            let w = make_theta_wire(theta, 4).unwrap();
            let fit = fit_decay(&w, &pauli_x(), &distances, 40).unwrap();
            assert!(
                fit.relative_error() < 0.05,
                "theta {theta}: {} vs {}",
                fit.slope,
                fit.expected_slope
            );
        }
    }

    #[test]
    fn entropies() {
        let w = make_cluster_wire(10).unwrap();
        let full = crate::numerics::normalized(&expand_wire(&w.base).unwrap()).unwrap();
        let rho = oracle::reduced_density(&full, 10, &[5]);
        assert!((von_neumann_entropy_bits(&rho) - 1.0).abs() < 1e-9);
        assert!((local_entropy(&w.base, 5).unwrap() - 1.0).abs() < 1e-9);

        let small = make_theta_wire(0.05, 60).unwrap();
        assert!(local_entropy(&small.base, 30).unwrap() < 0.1);

        let mut last = f64::INFINITY;
        for k in (1..=10).rev() {
            let theta = FRAC_PI_4 * k as f64 / 10.0;
            let s = local_entropy(&make_theta_wire(theta, 80).unwrap().base, 40).unwrap();
            assert!(s <= last + 1e-12, "theta {theta}");
            last = s;
        }

        let a0 = outer(&ket0(), &ket0());
        let t = SiteTensor::new(a0, ComplexMatrix::zeros(2, 2)).unwrap();
        let product = WireResource::uniform(t, 6, ket0(), ket0()).unwrap();
        assert!(local_entropy(&product, 3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn wilson_and_stats() {
        assert!((normal_quantile(0.99) - 2.5758293035489).abs() < 1e-9);
        let samples = vec![
            PhaseSample {
                attempts: 1,
                succeeded: true
            };
            200
        ];
        let s = success_stats(&samples, 0.0, 1, 0.99).unwrap();
        assert_eq!(s.p_hat, 1.0);
        assert!(s.expected_in_ci);
        assert!(success_stats(&[], 0.5, 3, 0.99).is_err());
        // Exact geometric counts pass the test.
        let r1: f64 = 0.5;
        let mut samples = Vec::new();
        for (k, n) in [(1, 500), (2, 250), (3, 125)] {
            samples.extend(std::iter::repeat_n(
                PhaseSample {
                    attempts: k,
                    succeeded: true,
                },
                n,
            ));
        }
        samples.extend(std::iter::repeat_n(
            PhaseSample {
                attempts: 3,
                succeeded: false,
            },
            125,
        ));
        let s = success_stats(&samples, r1, 3, 0.99).unwrap();
        assert!((s.p_hat - 0.875).abs() < 1e-12);
        assert!(s.chi_square.unwrap().p_value > 0.99);
    }
}
