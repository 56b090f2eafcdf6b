//! Truncated number-basis linear algebra: coherent states, overlaps, Weyl
//! (displacement) operators, phase rotations and density-matrix checks.
//!
//! Phase-space points `(q, p)` and complex amplitudes are identified through
//! `z = (q + i p) / sqrt(2)`. With that identification the Weyl operator
//! `W_qp = e^{iqp/2} e^{-iqP} e^{ipQ}` equals the displacement `D(z)` exactly,
//! so `<0|W_qp|0> = exp(-(q^2 + p^2) / 4)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::error::{Error, Result};
use crate::special::ln_factorial;

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Absolute eigenvalue floor below which a density is rejected.
pub const PSD_TOL: f64 = 1e-10;
pub const HERMITICITY_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncationBudget {
    cutoff: usize,
    tail_tol: f64,
}

impl TruncationBudget {
    pub fn new(cutoff: usize, tail_tol: f64) -> Result<Self> {
        if !(tail_tol > 0.0 && tail_tol < 1.0) {
            return Err(Error::InvalidBudget(format!(
                "tail_tol must lie in (0, 1), got {tail_tol}"
            )));
        }
        Ok(Self { cutoff, tail_tol })
    }

    /// Largest photon number kept.
    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    /// Dimension of the retained space, `cutoff + 1`.
    pub fn dim(&self) -> usize {
        self.cutoff + 1
    }
}

/// A point of the complex plane labelling a coherent state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexAmplitude {
    pub re: f64,
    pub im: f64,
}

impl ComplexAmplitude {
    pub const ZERO: Self = Self { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    /// Amplitude `(q + i p) / sqrt(2)` of the phase-space point `(q, p)`.
    pub fn from_quadratures(q: f64, p: f64) -> Self {
        Self::new(q * FRAC_1_SQRT_2, p * FRAC_1_SQRT_2)
    }

    pub fn from_polar(r: f64, theta: f64) -> Self {
        Self::from(C64::from_polar(r, theta))
    }

    pub fn value(self) -> C64 {
        C64::new(self.re, self.im)
    }

    /// Position-quadrature coordinate `sqrt(2) Re z`.
    pub fn q(self) -> f64 {
        SQRT_2 * self.re
    }

    /// Momentum-quadrature coordinate `sqrt(2) Im z`.
    pub fn p(self) -> f64 {
        SQRT_2 * self.im
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn conj(self) -> Self {
        Self::new(self.re, -self.im)
    }

    /// `e^{i theta} z`.
    pub fn rotated(self, theta: f64) -> Self {
        Self::from(self.value() * C64::from_polar(1.0, theta))
    }

    pub fn is_finite(self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

impl From<C64> for ComplexAmplitude {
    fn from(z: C64) -> Self {
        Self::new(z.re, z.im)
    }
}

impl From<ComplexAmplitude> for C64 {
    fn from(z: ComplexAmplitude) -> Self {
        z.value()
    }
}

/// A value together with the probability mass lost to truncation.
#[derive(Clone, Debug)]
pub struct Truncated<T> {
    pub value: T,
    pub leaked: f64,
}

impl<T> Truncated<T> {
    /// Accepts the value when the leak is within `tol`.
    pub fn within(self, tol: f64) -> Result<T> {
        if self.leaked > tol {
            Err(Error::TruncationInsufficient {
                leaked: self.leaked,
                tolerance: tol,
            })
        } else {
            Ok(self.value)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FockVector {
    coefficients: CVector,
}

impl FockVector {
    pub fn new(coefficients: CVector) -> Self {
        Self { coefficients }
    }

    pub fn basis(n: usize, dim: usize) -> Self {
        let mut c = CVector::zeros(dim);
        c[n] = C64::new(1.0, 0.0);
        Self::new(c)
    }

    pub fn coefficients(&self) -> &CVector {
        &self.coefficients
    }

    pub fn dim(&self) -> usize {
        self.coefficients.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.coefficients.norm_squared()
    }
}

/// Number-basis coefficients `e^{-|z|^2/2} z^n / sqrt(n!)` for `n <= cutoff`,
/// together with the Poisson tail mass beyond the cutoff.
pub fn coherent_vector(z: ComplexAmplitude, cutoff: usize) -> Truncated<FockVector> {
    let dim = cutoff + 1;
    let r2 = z.norm_sqr();
    let mut c = CVector::zeros(dim);
    if r2 == 0.0 {
        c[0] = C64::new(1.0, 0.0);
        return Truncated {
            value: FockVector::new(c),
            leaked: 0.0,
        };
    }
    let ln_r = 0.5 * r2.ln();
    let arg = z.im.atan2(z.re);
    for (n, cn) in c.iter_mut().enumerate() {
        let nf = n as f64;
        let mag = (nf * ln_r - 0.5 * r2 - 0.5 * ln_factorial(n as u64)).exp();
        *cn = C64::from_polar(mag, nf * arg);
    }
    let leaked = Poisson::new(r2).map(|d| d.sf(cutoff as u64)).unwrap_or(0.0);
    Truncated {
        value: FockVector::new(c),
        leaked,
    }
}

/// Coherent-state coefficients, failing when more than `tail_tol` of the
/// photon-number distribution lies beyond the cutoff.
pub fn coherent_fock_coefficients(
    z: ComplexAmplitude,
    budget: TruncationBudget,
) -> Result<FockVector> {
    coherent_vector(z, budget.cutoff()).within(budget.tail_tol())
}

/// `<a|b> = exp(-|a|^2/2 - |b|^2/2 + conj(a) b)`; exact, no truncation.
pub fn coherent_overlap(a: ComplexAmplitude, b: ComplexAmplitude) -> C64 {
    ln_coherent_overlap(a, b).exp()
}

pub(crate) fn ln_coherent_overlap(a: ComplexAmplitude, b: ComplexAmplitude) -> C64 {
    let (a, b) = (a.value(), b.value());
    -0.5 * (a.norm_sqr() + b.norm_sqr()) + a.conj() * b
}

/// Truncated matrix of the displacement `D(alpha)` on `dim` number states.
///
/// Entries come from the associated-Laguerre closed form
/// `<n+k|D|n> = alpha^k e^{-|alpha|^2/2} sqrt(n!/(n+k)!) L_n^{(k)}(|alpha|^2)`,
/// evaluated per diagonal through the normalized three-term recurrence.
/// Every retained entry is exact; only the rows beyond the cutoff are missing.
pub fn displacement_from_amplitude(alpha: C64, dim: usize) -> CMatrix {
    let mut d = CMatrix::zeros(dim, dim);
    let x = alpha.norm_sqr();
    if x == 0.0 {
        return CMatrix::identity(dim, dim);
    }
    let ln_abs = 0.5 * x.ln();
    let arg = alpha.im.atan2(alpha.re);
    for k in 0..dim {
        let kf = k as f64;
        let pref = C64::from_polar(
            (kf * ln_abs - 0.5 * x - 0.5 * ln_factorial(k as u64)).exp(),
            kf * arg,
        );
        let lower = pref;
        let upper = if k % 2 == 0 {
            pref.conj()
        } else {
            -pref.conj()
        };
        let mut g_prev = 0.0;
        let mut g = 1.0;
        for n in 0..dim - k {
            d[(n + k, n)] = lower * g;
            if k > 0 {
                d[(n, n + k)] = upper * g;
            }
            let nf = n as f64;
            let g_next = ((2.0 * nf + 1.0 + kf - x) * g - (nf * (nf + kf)).sqrt() * g_prev)
                / ((nf + 1.0) * (nf + kf + 1.0)).sqrt();
            g_prev = g;
            g = g_next;
        }
    }
    d
}

/// Truncated matrix of the Weyl operator `W_qp` in the number basis.
pub fn displacement_matrix(q: f64, p: f64, budget: TruncationBudget) -> CMatrix {
    displacement_from_amplitude(
        ComplexAmplitude::from_quadratures(q, p).value(),
        budget.dim(),
    )
}

/// Mass of `W rho W*` pushed beyond the cutoff: `tr(rho) - tr(W rho W*)`.
pub fn displacement_leakage(w: &CMatrix, rho: &CMatrix) -> f64 {
    let moved = w * rho * w.adjoint();
    (rho.trace().re - moved.trace().re).max(0.0)
}

/// Position wavefunction `psi_z(x) = pi^{-1/4} e^{-iqp/2} e^{ipx} e^{-(x-q)^2/2}`.
pub fn coherent_wavefunction(z: ComplexAmplitude, x: f64) -> C64 {
    let (q, p) = (z.q(), z.p());
    let mag = PI.powf(-0.25) * (-0.5 * (x - q) * (x - q)).exp();
    C64::from_polar(mag, p * x - 0.5 * q * p)
}

/// `|psi_z(x)|^2 = pi^{-1/2} e^{-(x - q)^2}`.
pub fn coherent_position_density(z: ComplexAmplitude, x: f64) -> f64 {
    let q = z.q();
    (-(x - q) * (x - q)).exp() / PI.sqrt()
}

/// Interference term `psi_z(x) conj(psi_w(x))`.
pub fn coherent_cross_density(z: ComplexAmplitude, w: ComplexAmplitude, x: f64) -> C64 {
    coherent_wavefunction(z, x) * coherent_wavefunction(w, x).conj()
}

/// Density operator on the truncated number basis.
#[derive(Clone, Debug, PartialEq)]
pub struct FockDensityMatrix {
    entries: CMatrix,
    budget: TruncationBudget,
}

impl FockDensityMatrix {
    pub fn new(entries: CMatrix, budget: TruncationBudget) -> Result<Self> {
        if entries.nrows() != budget.dim() || entries.ncols() != budget.dim() {
            return Err(Error::InvalidBudget(format!(
                "matrix is {}x{} but cutoff {} needs {}x{}",
                entries.nrows(),
                entries.ncols(),
                budget.cutoff(),
                budget.dim(),
                budget.dim()
            )));
        }
        if entries
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Domain(
                "density matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { entries, budget })
    }

    /// `|psi><psi|` for the given vector, sized to the budget.
    pub fn from_pure(psi: &FockVector, budget: TruncationBudget) -> Result<Self> {
        let c = psi.coefficients();
        let mut v = CVector::zeros(budget.dim());
        for (dst, src) in v.iter_mut().zip(c.iter()) {
            *dst = *src;
        }
        Self::new(&v * v.adjoint(), budget)
    }

    pub fn vacuum(budget: TruncationBudget) -> Self {
        Self::number_state(0, budget)
    }

    pub fn number_state(n: usize, budget: TruncationBudget) -> Self {
        assert!(n <= budget.cutoff(), "number state beyond cutoff");
        let mut m = CMatrix::zeros(budget.dim(), budget.dim());
        m[(n, n)] = C64::new(1.0, 0.0);
        Self { entries: m, budget }
    }

    /// Diagonal density with the given populations (missing levels are zero).
    pub fn diagonal(populations: &[f64], budget: TruncationBudget) -> Result<Self> {
        if populations.len() > budget.dim() {
            return Err(Error::InvalidBudget(
                "more populations than retained levels".into(),
            ));
        }
        let mut m = CMatrix::zeros(budget.dim(), budget.dim());
        for (n, &w) in populations.iter().enumerate() {
            m[(n, n)] = C64::new(w, 0.0);
        }
        Self::new(m, budget)
    }

    pub fn coherent(z: ComplexAmplitude, budget: TruncationBudget) -> Result<Self> {
        Self::from_pure(&coherent_fock_coefficients(z, budget)?, budget)
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn budget(&self) -> TruncationBudget {
        self.budget
    }

    pub fn dim(&self) -> usize {
        self.budget.dim()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.entries[(n, n)].re).collect()
    }

    pub fn mean_photon_number(&self) -> f64 {
        self.populations()
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Eigenvalues and eigenvectors of the Hermitian part, eigenvalues descending.
    pub fn eigen(&self) -> (Vec<f64>, Vec<CVector>) {
        hermitian_eigen(&self.entries)
    }

    /// Number-basis complex conjugate.
    pub fn conjugated(&self) -> Self {
        Self {
            entries: self.entries.map(|z| z.conj()),
            budget: self.budget,
        }
    }

    /// `sum_{m,n} rho_mn conj(sigma_mn)`; the Hilbert–Schmidt inner product `tr[sigma* rho]`.
    pub fn hs_inner(&self, other: &Self) -> C64 {
        self.entries
            .iter()
            .zip(other.entries.iter())
            .map(|(a, b)| a * b.conj())
            .sum()
    }
}

/// Eigen-decomposition of the Hermitian part of `m`, eigenvalues descending.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, Vec<CVector>) {
    let h = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    (values, vectors)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityJson {
    cutoff: usize,
    tail_tol: f64,
    /// Row-major `[re, im]` pairs.
    entries: Vec<[f64; 2]>,
}

impl Serialize for FockDensityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let dim = self.dim();
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                let z = self.entries[(i, j)];
                entries.push([z.re, z.im]);
            }
        }
        DensityJson {
            cutoff: self.budget.cutoff(),
            tail_tol: self.budget.tail_tol(),
            entries,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FockDensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = DensityJson::deserialize(d)?;
        let budget = TruncationBudget::new(raw.cutoff, raw.tail_tol).map_err(D::Error::custom)?;
        let dim = budget.dim();
        if raw.entries.len() != dim * dim {
            return Err(D::Error::custom(format!(
                "expected {} entries for cutoff {}, found {}",
                dim * dim,
                raw.cutoff,
                raw.entries.len()
            )));
        }
        let m = CMatrix::from_fn(dim, dim, |i, j| {
            let [re, im] = raw.entries[i * dim + j];
            C64::new(re, im)
        });
        FockDensityMatrix::new(m, budget).map_err(D::Error::custom)
    }
}

/// `e^{i theta N} rho e^{-i theta N}`: entries pick up `e^{i theta (m - n)}`.
pub fn rotate_state(rho: &FockDensityMatrix, theta: f64) -> FockDensityMatrix {
    let entries = CMatrix::from_fn(rho.dim(), rho.dim(), |m, n| {
        rho.entries[(m, n)] * C64::from_polar(1.0, theta * (m as f64 - n as f64))
    });
    FockDensityMatrix {
        entries,
        budget: rho.budget,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DensityReport {
    pub hermiticity_defect: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub trace: f64,
    pub trace_defect: f64,
    pub passed: bool,
}

/// Checks the density-matrix invariants. The trace may fall short of one by
/// at most the budget's tail tolerance (truncated states are sub-normalized).
pub fn validate_density(rho: &FockDensityMatrix) -> DensityReport {
    let m = rho.entries();
    let hermiticity_defect = (m - m.adjoint())
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    let (values, _) = rho.eigen();
    let min_eigenvalue = values.last().copied().unwrap_or(0.0);
    let max_eigenvalue = values.first().copied().unwrap_or(0.0);
    let trace = m.trace().re;
    let trace_defect = (trace - 1.0).abs();
    let trace_tol = TRACE_TOL.max(rho.budget().tail_tol());
    let passed = hermiticity_defect <= HERMITICITY_TOL
        && min_eigenvalue >= -PSD_TOL
        && trace_defect <= trace_tol;
    DensityReport {
        hermiticity_defect,
        min_eigenvalue,
        max_eigenvalue,
        trace,
        trace_defect,
        passed,
    }
}

/// Finite linear combination `sum_i c_i |alpha_i>` of coherent states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherentSuperposition {
    terms: Vec<(C64, ComplexAmplitude)>,
}

impl CoherentSuperposition {
    pub fn new(terms: Vec<(C64, ComplexAmplitude)>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Domain(
                "superposition needs at least one term".into(),
            ));
        }
        if terms
            .iter()
            .any(|(c, a)| !c.re.is_finite() || !c.im.is_finite() || !a.is_finite())
        {
            return Err(Error::Domain("superposition has non-finite terms".into()));
        }
        let s = Self { terms };
        if s.norm_sqr() <= 0.0 {
            return Err(Error::Domain("superposition has zero norm".into()));
        }
        Ok(s)
    }

    pub fn coherent(z: ComplexAmplitude) -> Self {
        Self {
            terms: vec![(C64::new(1.0, 0.0), z)],
        }
    }

    pub fn vacuum() -> Self {
        Self::coherent(ComplexAmplitude::ZERO)
    }

    /// Normalized cat state `N (|alpha> + sign |-alpha>)`.
    pub fn cat(alpha: ComplexAmplitude, sign: f64) -> Result<Self> {
        let minus = ComplexAmplitude::new(-alpha.re, -alpha.im);
        Ok(Self::new(vec![
            (C64::new(1.0, 0.0), alpha),
            (C64::new(sign, 0.0), minus),
        ])?
        .normalized())
    }

    pub fn terms(&self) -> &[(C64, ComplexAmplitude)] {
        &self.terms
    }

    /// `<psi|psi>` from pairwise coherent overlaps.
    pub fn norm_sqr(&self) -> f64 {
        let mut acc = C64::new(0.0, 0.0);
        for (ci, ai) in &self.terms {
            for (cj, aj) in &self.terms {
                acc += ci.conj() * cj * coherent_overlap(*ai, *aj);
            }
        }
        acc.re
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm_sqr().sqrt();
        Self {
            terms: self.terms.iter().map(|(c, a)| (c / n, *a)).collect(),
        }
    }

    /// Applies `e^{i theta N}` by rotating each amplitude.
    pub fn rotated(&self, theta: f64) -> Self {
        Self {
            terms: self
                .terms
                .iter()
                .map(|(c, a)| (*c, a.rotated(theta)))
                .collect(),
        }
    }

    /// Largest `|alpha_i|` among the terms.
    pub fn max_amplitude(&self) -> f64 {
        self.terms
            .iter()
            .map(|(_, a)| a.norm_sqr().sqrt())
            .fold(0.0, f64::max)
    }

    /// Truncated number-basis vector of the normalized state with its leaked mass.
    pub fn to_fock_vector(&self, cutoff: usize) -> Truncated<FockVector> {
        let s = self.normalized();
        let mut v = CVector::zeros(cutoff + 1);
        for (c, a) in &s.terms {
            v += coherent_vector(*a, cutoff).value.coefficients() * *c;
        }
        let leaked = (1.0 - v.norm_squared()).max(0.0);
        Truncated {
            value: FockVector::new(v),
            leaked,
        }
    }

    pub fn to_density(&self, budget: TruncationBudget) -> Result<FockDensityMatrix> {
        let psi = self
            .to_fock_vector(budget.cutoff())
            .within(budget.tail_tol())?;
        FockDensityMatrix::from_pure(&psi, budget)
    }
}
