//! Balanced homodyne detection with two inefficient counters: exact lattice
//! statistics at finite oscillator amplitude, characteristic functions, the
//! Gaussian smear kernel of the high-amplitude limit and convergence tables.

use std::f64::consts::{PI, SQRT_2, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{count_kernel_range, Efficiency};
use crate::error::{Error, Result};
use crate::fock::{ln_coherent_overlap, CoherentSuperposition, ComplexAmplitude, C64};
use crate::io::fmt_f64;
use crate::special::{integrate, one_minus_cos, poisson_support, sin_minus_id};

/// Outcomes closer than this are reported as one atom.
pub const MERGE_TOL: f64 = 1e-12;
/// Per-mode Poisson tail left out of lattice sums.
pub const LATTICE_TAIL: f64 = 1e-12;
/// Largest number of `(m, n)` lattice points evaluated in one distribution.
pub const MAX_LATTICE_POINTS: usize = 10_000_000;

/// Coherent local oscillator `|r e^{i theta}>`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalOscillator {
    r: f64,
    theta: f64,
}

impl LocalOscillator {
    pub fn new(r: f64, theta: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Domain(format!(
                "oscillator amplitude must be positive, got {r}"
            )));
        }
        if !theta.is_finite() {
            return Err(Error::Domain("oscillator phase must be finite".into()));
        }
        Ok(Self {
            r,
            theta: theta.rem_euclid(TAU),
        })
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn amplitude(&self) -> ComplexAmplitude {
        ComplexAmplitude::from_polar(self.r, self.theta)
    }

    /// Same amplitude, phase advanced by `phi`.
    pub fn shifted(&self, phi: f64) -> Self {
        Self {
            r: self.r,
            theta: (self.theta + phi).rem_euclid(TAU),
        }
    }
}

/// Outcome points `x(m, n) = (n/eps2 - m/eps1) / (sqrt(2) r)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutcomeLattice {
    pub r: f64,
    pub eps1: Efficiency,
    pub eps2: Efficiency,
}

impl OutcomeLattice {
    pub fn outcome(&self, m: u64, n: u64) -> f64 {
        (n as f64 / self.eps2.value() - m as f64 / self.eps1.value()) / (SQRT_2 * self.r)
    }
}

/// `U|a>|b> = |(a-b)/sqrt2>|(a+b)/sqrt2>`.
pub fn beam_splitter_map(
    a: ComplexAmplitude,
    b: ComplexAmplitude,
) -> (ComplexAmplitude, ComplexAmplitude) {
    let (a, b) = (a.value(), b.value());
    (((a - b) / SQRT_2).into(), ((a + b) / SQRT_2).into())
}

/// Discrete outcome distribution with sorted, merged atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledDifferenceDistribution {
    pub atoms: Vec<(f64, f64)>,
    pub tail_mass: f64,
}

impl ScaledDifferenceDistribution {
    /// Sorts by outcome and merges outcomes within [`MERGE_TOL`].
    pub fn from_unsorted(mut atoms: Vec<(f64, f64)>, tail_mass: f64) -> Self {
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        let mut anchor = f64::NEG_INFINITY;
        for (x, p) in atoms {
            match merged.last_mut() {
                Some(last) if x - anchor <= MERGE_TOL => last.1 += p,
                _ => {
                    anchor = x;
                    merged.push((x, p));
                }
            }
        }
        Self {
            atoms: merged,
            tail_mass,
        }
    }

    pub fn total(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * p).sum::<f64>() / self.total()
    }

    /// Probability of the half-open interval `(lo, hi]`.
    pub fn interval_prob(&self, lo: f64, hi: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|(x, _)| *x > lo && *x <= hi)
            .map(|a| a.1)
            .sum()
    }

    /// `sum_x p(x) e^{itx}`.
    pub fn char_fn(&self, t: f64) -> C64 {
        self.atoms
            .iter()
            .map(|(x, p)| C64::from_polar(*p, t * x))
            .sum()
    }

    /// CSV with header `outcome,probability`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["outcome", "probability"])?;
        for (x, p) in &self.atoms {
            out.write_record([fmt_f64(*x), fmt_f64(*p)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Row-major joint count probabilities `p(m, n)` on `[m_lo, m_hi] x [n_lo, n_hi]`.
#[derive(Clone, Debug)]
pub(crate) struct CountLattice {
    pub m_lo: u64,
    pub n_lo: u64,
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

/// Count range for a detector facing coherent amplitudes `amps` with efficiency `eps`.
pub(crate) fn count_range(
    amps: impl IntoIterator<Item = ComplexAmplitude>,
    eps: Efficiency,
) -> (u64, u64) {
    amps.into_iter()
        .map(|a| poisson_support(eps.value() * a.norm_sqr(), LATTICE_TAIL))
        .fold((u64::MAX, 0), |(lo, hi), (l, h)| (lo.min(l), hi.max(h)))
}

/// Kernel vectors of one homodyne arm for the bilinear term `<gamma| . |delta>`:
/// `A[m] = <(gamma-z)/sqrt2|E_m|(delta-z)/sqrt2>` and
/// `B[n] = <(gamma+z)/sqrt2|E_n|(delta+z)/sqrt2>`.
pub(crate) fn arm_kernels(
    gamma: ComplexAmplitude,
    delta: ComplexAmplitude,
    z: ComplexAmplitude,
    eps1: Efficiency,
    eps2: Efficiency,
    m_range: (u64, u64),
    n_range: (u64, u64),
) -> (Vec<C64>, Vec<C64>) {
    let (g1, g2) = beam_splitter_map(gamma, z);
    let (d1, d2) = beam_splitter_map(delta, z);
    (
        count_kernel_range(eps1, g1, d1, m_range.0, m_range.1),
        count_kernel_range(eps2, g2, d2, n_range.0, n_range.1),
    )
}

pub(crate) fn finite_z_lattice(
    signal: &CoherentSuperposition,
    lo: LocalOscillator,
    eps1: Efficiency,
    eps2: Efficiency,
) -> Result<CountLattice> {
    let psi = signal.normalized();
    let z = lo.amplitude();
    let m_range = count_range(
        psi.terms().iter().map(|t| beam_splitter_map(t.1, z).0),
        eps1,
    );
    let n_range = count_range(
        psi.terms().iter().map(|t| beam_splitter_map(t.1, z).1),
        eps2,
    );
    let rows = (m_range.1 - m_range.0 + 1) as usize;
    let cols = (n_range.1 - n_range.0 + 1) as usize;
    if rows.saturating_mul(cols) > MAX_LATTICE_POINTS {
        return Err(Error::InvalidBudget(format!(
            "{rows}x{cols} count lattice exceeds {MAX_LATTICE_POINTS} points"
        )));
    }
    let mut pairs = Vec::new();
    for (ci, ai) in psi.terms() {
        for (cj, aj) in psi.terms() {
            let (a, b) = arm_kernels(*ai, *aj, z, eps1, eps2, m_range, n_range);
            pairs.push((ci.conj() * cj, a, b));
        }
    }
    let mut probs = vec![0.0; rows * cols];
    probs.par_chunks_mut(cols).enumerate().for_each(|(m, row)| {
        for (w, a, b) in &pairs {
            let wa = w * a[m];
            for (p, bn) in row.iter_mut().zip(b) {
                *p += (wa * bn).re;
            }
        }
        row.iter_mut().for_each(|p| *p = p.max(0.0));
    });
    Ok(CountLattice {
        m_lo: m_range.0,
        n_lo: n_range.0,
        rows,
        cols,
        probs,
    })
}

/// Exact outcome statistics of the balanced detector for a coherent-superposition signal.
pub fn finite_z_distribution(
    signal: &CoherentSuperposition,
    lo: LocalOscillator,
    eps1: Efficiency,
    eps2: Efficiency,
    tail_tol: f64,
) -> Result<ScaledDifferenceDistribution> {
    let lat = finite_z_lattice(signal, lo, eps1, eps2)?;
    let grid = OutcomeLattice {
        r: lo.r(),
        eps1,
        eps2,
    };
    let mut atoms = Vec::with_capacity(lat.probs.len());
    for i in 0..lat.rows {
        for j in 0..lat.cols {
            let p = lat.probs[i * lat.cols + j];
            if p > 0.0 {
                atoms.push((grid.outcome(lat.m_lo + i as u64, lat.n_lo + j as u64), p));
            }
        }
    }
    let dist = ScaledDifferenceDistribution::from_unsorted(atoms, 0.0);
    let tail_mass = (1.0 - dist.total()).max(0.0);
    if tail_mass >= tail_tol {
        return Err(Error::TruncationInsufficient {
            leaked: tail_mass,
            tolerance: tail_tol,
        });
    }
    Ok(ScaledDifferenceDistribution { tail_mass, ..dist })
}

/// `sum_{m,n} e^{itx(m,n)} <alpha|E^z(m,n)|beta>` in closed form at finite amplitude.
pub fn finite_z_char_fn(
    alpha: ComplexAmplitude,
    beta: ComplexAmplitude,
    lo: LocalOscillator,
    eps1: Efficiency,
    eps2: Efficiency,
    t: f64,
) -> C64 {
    let (e1, e2) = (eps1.value(), eps2.value());
    let r = lo.r();
    let scale = t / (SQRT_2 * r);
    let (tau1, tau2) = (scale / e1, scale / e2);
    let c1 = C64::new(one_minus_cos(tau1), tau1.sin());
    let c2 = C64::new(one_minus_cos(tau2), -tau2.sin());
    let a = alpha.value();
    let b = beta.value();
    let overlap = a.conj() * b;
    let e_th = C64::from_polar(1.0, lo.theta());
    let cross = a.conj() * e_th + b * e_th.conj();
    // The r^2 terms: the linear parts of e1*sin(tau1) and e2*sin(tau2) cancel exactly.
    let s1 = (0.5 * tau1).sin();
    let s2 = (0.5 * tau2).sin();
    let big = C64::new(
        -r * r * (e1 * s1 * s1 + e2 * s2 * s2),
        -0.5 * r * r * (e1 * sin_minus_id(tau1) - e2 * sin_minus_id(tau2)),
    );
    let exponent = ln_coherent_overlap(alpha, beta)
        - c1 * (0.5 * e1) * (overlap - cross * r)
        - c2 * (0.5 * e2) * (overlap + cross * r)
        + big;
    exponent.exp()
}

/// High-amplitude limit `<alpha|beta> e^{itX/sqrt2} e^{-t^2 (1/eps1 + 1/eps2)/8}`
/// with `X = conj(alpha) e^{i theta} + beta e^{-i theta}`.
pub fn limit_char_fn(
    alpha: ComplexAmplitude,
    beta: ComplexAmplitude,
    theta: f64,
    eps1: Efficiency,
    eps2: Efficiency,
    t: f64,
) -> C64 {
    let e_th = C64::from_polar(1.0, theta);
    let cross = alpha.value().conj() * e_th + beta.value() * e_th.conj();
    let width = t * t * (1.0 / eps1.value() + 1.0 / eps2.value()) / 8.0;
    (ln_coherent_overlap(alpha, beta) + C64::i() * cross * (t / SQRT_2) - width).exp()
}

/// `a x^2 (1 - e^{-i/(ax)}) + b x^2 (1 - e^{i/(bx)})`.
pub fn lemma_limit_probe(a: f64, b: f64, x: f64) -> Result<C64> {
    check_nonzero(a, b)?;
    if !(x > 0.0) {
        return Err(Error::Domain(format!(
            "probe point must be positive, got {x}"
        )));
    }
    let (ua, ub) = (1.0 / (a * x), 1.0 / (b * x));
    let x2 = x * x;
    let re = x2 * (a * one_minus_cos(ua) + b * one_minus_cos(ub));
    let im = x2 * (a * sin_minus_id(ua) - b * sin_minus_id(ub));
    Ok(C64::new(re, im))
}

/// `(1/a + 1/b) / 2`.
pub fn limit_value(a: f64, b: f64) -> Result<f64> {
    check_nonzero(a, b)?;
    Ok(0.5 * (1.0 / a + 1.0 / b))
}

fn check_nonzero(a: f64, b: f64) -> Result<()> {
    if a == 0.0 || b == 0.0 || !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain(format!(
            "coefficients must be finite and nonzero, got ({a}, {b})"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Dirac,
    Gaussian,
}

/// Noise law `mu_{eps1,eps2}`: Dirac at the origin for two ideal detectors,
/// otherwise centred Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmearKernel1D {
    pub eps1: Efficiency,
    pub eps2: Efficiency,
}

impl SmearKernel1D {
    pub fn new(eps1: Efficiency, eps2: Efficiency) -> Self {
        Self { eps1, eps2 }
    }

    pub fn kind(&self) -> KernelKind {
        if self.eps1.is_ideal() && self.eps2.is_ideal() {
            KernelKind::Dirac
        } else {
            KernelKind::Gaussian
        }
    }

    /// `(e1 + e2 - 2 e1 e2) / (4 e1 e2)`; zero for the Dirac kernel.
    pub fn variance(&self) -> f64 {
        let (a, b) = (self.eps1.value(), self.eps2.value());
        match self.kind() {
            KernelKind::Dirac => 0.0,
            KernelKind::Gaussian => (a + b - 2.0 * a * b) / (4.0 * a * b),
        }
    }

    /// `sqrt(2 e1 e2 / (pi d)) exp(-2 e1 e2 x^2 / d)` with `d = e1 - 2 e1 e2 + e2`.
    pub fn density(&self, x: f64) -> Result<f64> {
        if self.kind() == KernelKind::Dirac {
            return Err(Error::Kind(
                "ideal detectors give a Dirac kernel with no density".into(),
            ));
        }
        let (a, b) = (self.eps1.value(), self.eps2.value());
        let d = a - 2.0 * a * b + b;
        let c = 2.0 * a * b / d;
        Ok((c / PI).sqrt() * (-c * x * x).exp())
    }

    /// Characteristic function `e^{-variance t^2 / 2}`.
    pub fn char_fn(&self, t: f64) -> f64 {
        (-0.5 * self.variance() * t * t).exp()
    }
}

/// Density of `(mu * Q_theta)` at `x` for a coherent superposition.
pub fn smeared_quadrature_density(
    signal: &CoherentSuperposition,
    theta: f64,
    kernel: &SmearKernel1D,
    x: f64,
) -> f64 {
    let psi = signal.normalized();
    let s2 = kernel.variance();
    let mut acc = C64::new(0.0, 0.0);
    for (ci, ai) in psi.terms() {
        for (cj, aj) in psi.terms() {
            let term = SmearedCross::new(ai.rotated(-theta), aj.rotated(-theta), s2);
            acc += ci * cj.conj() * term.density(x);
        }
    }
    acc.re
}

/// Probability of `(mu * Q_theta)` on `[lo, hi]`; infinite endpoints allowed.
pub fn smeared_quadrature_prob(
    signal: &CoherentSuperposition,
    theta: f64,
    kernel: &SmearKernel1D,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if !(lo < hi) {
        if lo == hi {
            return Ok(0.0);
        }
        return Err(Error::Domain(format!("interval [{lo}, {hi}] is reversed")));
    }
    let psi = signal.normalized();
    let s2 = kernel.variance();
    let mut acc = C64::new(0.0, 0.0);
    for (ci, ai) in psi.terms() {
        for (cj, aj) in psi.terms() {
            let term = SmearedCross::new(ai.rotated(-theta), aj.rotated(-theta), s2);
            acc += ci * cj.conj() * term.interval(lo, hi);
        }
    }
    Ok(acc.re.clamp(0.0, 1.0))
}

/// `int_lo^hi` of the smeared density of `<bra|(mu * Q_theta)(dx)|ket>`.
pub(crate) fn smeared_bilinear_interval(
    bra: ComplexAmplitude,
    ket: ComplexAmplitude,
    theta: f64,
    variance: f64,
    lo: f64,
    hi: f64,
) -> C64 {
    SmearedCross::new(ket.rotated(-theta), bra.rotated(-theta), variance).interval(lo, hi)
}

/// Density of `<bra|(mu * Q_theta)(dx)|ket>` at `x`.
pub(crate) fn smeared_bilinear_density(
    bra: ComplexAmplitude,
    ket: ComplexAmplitude,
    theta: f64,
    variance: f64,
    x: f64,
) -> C64 {
    SmearedCross::new(ket.rotated(-theta), bra.rotated(-theta), variance).density(x)
}

/// `psi_z(x) conj(psi_w(x))` convolved with `N(0, s2)`:
/// `pi^{-1/2} C e^{ikm - k^2/4} (1 + 2 s2)^{-1/2} exp(-(x - c)^2 / (1 + 2 s2))`
/// with `m = (q+u)/2`, `k = p - v`, `c = m + ik/2`.
struct SmearedCross {
    prefactor: C64,
    centre: C64,
    spread: f64,
    diagonal: bool,
}

impl SmearedCross {
    fn new(z: ComplexAmplitude, w: ComplexAmplitude, s2: f64) -> Self {
        let (q, p, u, v) = (z.q(), z.p(), w.q(), w.p());
        let m = 0.5 * (q + u);
        let k = p - v;
        let spread = 1.0 + 2.0 * s2;
        let ln_pref = C64::new(
            -0.25 * (q - u) * (q - u) - 0.25 * k * k,
            -0.5 * (q * p - u * v) + k * m,
        );
        Self {
            prefactor: ln_pref.exp() / (PI * spread).sqrt(),
            centre: C64::new(m, 0.5 * k),
            spread,
            diagonal: k == 0.0 && q == u,
        }
    }

    fn density(&self, x: f64) -> C64 {
        let d = C64::new(x, 0.0) - self.centre;
        self.prefactor * (-(d * d) / self.spread).exp()
    }

    fn interval(&self, lo: f64, hi: f64) -> C64 {
        let sd = (0.5 * self.spread).sqrt();
        let mid = self.centre.re;
        if self.diagonal {
            let s = self.spread.sqrt();
            let upper = |x: f64| 0.5 * libm::erfc((x - mid) / s);
            let p = if hi - mid < mid - lo {
                upper(lo) - upper(hi)
            } else {
                let lower = |x: f64| 0.5 * libm::erfc((mid - x) / s);
                lower(hi) - lower(lo)
            };
            return C64::new(p, 0.0);
        }
        // Oscillating complex Gaussian: quadrature over the effective support.
        let a = lo.max(mid - 40.0 * sd);
        let b = hi.min(mid + 40.0 * sd);
        if a >= b {
            return C64::new(0.0, 0.0);
        }
        let freq = self.centre.im.abs() / self.spread;
        let panels = (2.0 * (b - a) * (1.0 / sd + freq)).ceil() as usize + 8;
        integrate(|x| self.density(x), a, b, panels)
    }
}

/// Oscillator amplitudes and the `t` points at which characteristic functions are compared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSchedule {
    amplitudes: Vec<f64>,
    t_grid: Vec<f64>,
}

impl ConvergenceSchedule {
    pub fn new(amplitudes: Vec<f64>, t_grid: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty()
            || amplitudes[0] <= 0.0
            || amplitudes.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Domain(
                "amplitudes must be positive and strictly increasing".into(),
            ));
        }
        if t_grid.is_empty() || t_grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::Domain("t grid must be non-empty and finite".into()));
        }
        Ok(Self { amplitudes, t_grid })
    }

    /// `count` evenly spaced points on `[t_min, t_max]`.
    pub fn uniform_t(amplitudes: Vec<f64>, t_min: f64, t_max: f64, count: usize) -> Result<Self> {
        let count = count.max(2);
        let t = (0..count)
            .map(|i| t_min + (t_max - t_min) * i as f64 / (count - 1) as f64)
            .collect();
        Self::new(amplitudes, t)
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    pub fn t_grid(&self) -> &[f64] {
        &self.t_grid
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub r: f64,
    pub sup_error: f64,
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub t_grid: Vec<f64>,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    /// Amplitude-weighted errors `r_k err_k` may not grow by more than `slack`
    /// (relative) from one amplitude to the next. This holds for `O(1/r)` decay
    /// and anything faster.
    pub fn decay_gate(&self, slack: f64) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[1].r * w[1].sup_error <= (1.0 + slack) * w[0].r * w[0].sup_error + 1e-15)
    }

    /// CSV with header `r,sup_error`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r", "sup_error"])?;
        for row in &self.rows {
            out.write_record([fmt_f64(row.r), fmt_f64(row.sup_error)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `sum_ij conj(c_i) c_j phi(alpha_i, alpha_j)` over the signal's coherent terms.
pub fn superposition_char_fn<F>(signal: &CoherentSuperposition, f: F) -> C64
where
    F: Fn(ComplexAmplitude, ComplexAmplitude) -> C64,
{
    let psi = signal.normalized();
    let mut acc = C64::new(0.0, 0.0);
    for (ci, ai) in psi.terms() {
        for (cj, aj) in psi.terms() {
            acc += ci.conj() * cj * f(*ai, *aj);
        }
    }
    acc
}

/// Sup-norm distance between the finite-amplitude and limiting characteristic
/// functions over the schedule's `t` grid, for each amplitude.
pub fn convergence_report(
    signal: &CoherentSuperposition,
    theta: f64,
    eps1: Efficiency,
    eps2: Efficiency,
    schedule: &ConvergenceSchedule,
) -> Result<ConvergenceReport> {
    let los: Vec<LocalOscillator> = schedule
        .amplitudes
        .iter()
        .map(|&r| LocalOscillator::new(r, theta))
        .collect::<Result<_>>()?;
    let nt = schedule.t_grid.len();
    let cells: Vec<f64> = (0..los.len() * nt)
        .into_par_iter()
        .map(|idx| {
            let lo = los[idx / nt];
            let t = schedule.t_grid[idx % nt];
            let finite =
                superposition_char_fn(signal, |a, b| finite_z_char_fn(a, b, lo, eps1, eps2, t));
            let limit = superposition_char_fn(signal, |a, b| {
                limit_char_fn(a, b, lo.theta(), eps1, eps2, t)
            });
            (finite - limit).norm()
        })
        .collect();
    let rows = cells
        .chunks(nt)
        .zip(&schedule.amplitudes)
        .map(|(errors, &r)| ConvergenceRow {
            r,
            sup_error: errors.iter().copied().fold(0.0, f64::max),
            errors: errors.to_vec(),
        })
        .collect();
    Ok(ConvergenceReport {
        t_grid: schedule.t_grid.clone(),
        rows,
    })
}
