//! Forward smearing, Fourier deconvolution of smeared phase-space densities,
//! and linear reconstruction of the density matrix from a covariant density.
//!
//! Transforms use `F[g](k) = (1/2pi) int e^{-i(k_q q + k_p p)} g(q, p) dq dp`,
//! so `F[f * g] = 2pi F[f] F[g]` and a kernel transform is `1/2pi` at the origin.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detector::stream_rng;
use crate::eightport::SmearKernel2D;
use crate::error::{Error, Result};
use crate::fock::{
    displacement_from_amplitude, hermitian_eigen, CMatrix, FockDensityMatrix, TruncationBudget, C64,
};
use crate::grid::{fft2, fft_frequencies, gaussian_smooth, GridSpec, PhaseSpaceGrid};
use crate::homodyne::KernelKind;

/// Minimum grid samples per kernel standard deviation.
pub const SAMPLES_PER_SD: f64 = 6.0;
/// Transfer values below this fraction of the peak carry only rounding error.
pub const RESOLVED_FLOOR: f64 = 1e-10;
/// Relative threshold of the default thresholded policy.
pub const DEFAULT_RELATIVE_THRESHOLD: f64 = 1e-6;
/// Amplification above which a deconvolution carries a noise warning.
pub const AMPLIFICATION_WARNING: f64 = 1e6;
/// Frequencies with `|k|^2 <= 4 ln(1/SUPPORT_ENVELOPE)` enter the Weyl inversion.
pub const SUPPORT_ENVELOPE: f64 = 1e-8;
/// Smallest admissible `|tr[W* T]|` on the inversion support.
pub const DIVISOR_THRESHOLD: f64 = 1e-9;
/// Standard deviations of sampling noise below which thresholded division stops.
pub const NOISE_SIGMAS: f64 = 3.0;

/// Transform of a grid on the conjugate frequency lattice, in FFT order.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    pub kq: Vec<f64>,
    pub kp: Vec<f64>,
    pub values: Vec<C64>,
    source: GridSpec,
}

impl FrequencyGrid {
    pub fn transform(g: &PhaseSpaceGrid) -> Self {
        let spec = g.spec();
        let (nq, np) = (spec.nq, spec.np);
        let mut data: Vec<Complex64> = g.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2(&mut data, nq, np, false);
        let kq = fft_frequencies(nq, g.dq());
        let kp = fft_frequencies(np, g.dp());
        let scale = g.cell_area() / TAU;
        data.par_chunks_mut(np).enumerate().for_each(|(a, row)| {
            for (b, v) in row.iter_mut().enumerate() {
                *v *= C64::from_polar(scale, -(kq[a] * spec.q_min + kp[b] * spec.p_min));
            }
        });
        Self {
            kq,
            kp,
            values: data,
            source: spec,
        }
    }

    pub fn inverse(&self) -> PhaseSpaceGrid {
        let spec = self.source;
        let (nq, np) = (spec.nq, spec.np);
        let cell = (spec.q_max - spec.q_min) * (spec.p_max - spec.p_min) / (nq * np) as f64;
        let scale = TAU / cell;
        let mut data = self.values.clone();
        data.par_chunks_mut(np).enumerate().for_each(|(a, row)| {
            for (b, v) in row.iter_mut().enumerate() {
                *v *= C64::from_polar(scale, self.kq[a] * spec.q_min + self.kp[b] * spec.p_min);
            }
        });
        fft2(&mut data, nq, np, true);
        let mut g = PhaseSpaceGrid::zeros(spec).expect("source spec was valid");
        g.values = data.into_iter().map(|v| v.re).collect();
        g
    }

    pub fn source(&self) -> GridSpec {
        self.source
    }

    pub fn get(&self, a: usize, b: usize) -> C64 {
        self.values[a * self.kp.len() + b]
    }

    pub fn dkq(&self) -> f64 {
        TAU / (self.source.q_max - self.source.q_min)
    }

    pub fn dkp(&self) -> f64 {
        TAU / (self.source.p_max - self.source.p_min)
    }

    /// Largest `|value(k) - conj(value(-k))|`; zero for the transform of a real grid.
    pub fn hermitian_defect(&self) -> f64 {
        let (nq, np) = (self.kq.len(), self.kp.len());
        let mut worst = 0.0f64;
        for a in 0..nq {
            for b in 0..np {
                let (ma, mb) = ((nq - a) % nq, (np - b) % np);
                worst = worst.max((self.get(a, b) - self.get(ma, mb).conj()).norm());
            }
        }
        worst
    }
}

/// `F[f](k_q, k_p)`: `(1/2pi)` times the Gaussian characteristic function at `-k`,
/// floored at the smallest positive normal number.
pub fn kernel_fourier(k: &SmearKernel2D, kq: f64, kp: f64) -> C64 {
    C64::new((k.char_fn(kq, kp) / TAU).max(f64::MIN_POSITIVE), 0.0)
}

/// Fails when a Gaussian axis of the kernel spans fewer than
/// [`SAMPLES_PER_SD`] grid steps per standard deviation.
pub fn check_resolution(spec: GridSpec, k: &SmearKernel2D) -> Result<()> {
    let axes = [
        (
            "q",
            k.kx.kind(),
            k.variance_q(),
            (spec.q_max - spec.q_min) / spec.nq as f64,
        ),
        (
            "p",
            k.ky.kind(),
            k.variance_p(),
            (spec.p_max - spec.p_min) / spec.np as f64,
        ),
    ];
    for (name, kind, var, step) in axes {
        if kind == KernelKind::Gaussian && var.sqrt() < SAMPLES_PER_SD * step {
            return Err(Error::Resolution(format!(
                "kernel sd {:.4} along {name} is under {SAMPLES_PER_SD} steps of {step:.4}",
                var.sqrt()
            )));
        }
    }
    Ok(())
}

/// `h = f * g` by periodic FFT convolution with the analytic kernel transform.
pub fn forward_smear(g: &PhaseSpaceGrid, k: &SmearKernel2D) -> Result<PhaseSpaceGrid> {
    check_resolution(g.spec(), k)?;
    Ok(gaussian_smooth(g, k.variance_q(), k.variance_p()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum DeconvolutionPolicy {
    /// Plain division on every frequency the transfer resolves above rounding level.
    ExactDivision,
    /// Division where `F[f] >= threshold`; other frequencies are dropped.
    Thresholded { threshold: f64 },
    /// `H/(H^2 + lambda)`; without `lambda` it is chosen so the residual matches
    /// `noise_level`, the l2 norm of the expected noise over grid values.
    Tikhonov {
        #[serde(default)]
        lambda: Option<f64>,
        #[serde(default)]
        noise_level: Option<f64>,
    },
}

impl Default for DeconvolutionPolicy {
    fn default() -> Self {
        Self::Thresholded {
            threshold: DEFAULT_RELATIVE_THRESHOLD / TAU,
        }
    }
}

impl DeconvolutionPolicy {
    /// Thresholded division stopping where the kernel transform falls to
    /// [`NOISE_SIGMAS`] standard deviations of the transform of a histogram with `shots` samples.
    pub fn thresholded_for_samples(shots: u64) -> Self {
        Self::Thresholded {
            threshold: NOISE_SIGMAS / (TAU * (shots as f64).sqrt()),
        }
    }

    /// Tikhonov with the multinomial noise norm `1/(cell_area sqrt(shots))`.
    pub fn tikhonov_for_samples(shots: u64, spec: GridSpec) -> Self {
        let cell =
            (spec.q_max - spec.q_min) * (spec.p_max - spec.p_min) / (spec.nq * spec.np) as f64;
        Self::Tikhonov {
            lambda: None,
            noise_level: Some(1.0 / (cell * (shots as f64).sqrt())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::ExactDivision => Ok(()),
            Self::Thresholded { threshold } if threshold > 0.0 && threshold.is_finite() => Ok(()),
            Self::Thresholded { threshold } => Err(Error::Domain(format!(
                "threshold must be positive, got {threshold}"
            ))),
            Self::Tikhonov {
                lambda: Some(l), ..
            } if !(l >= 0.0 && l.is_finite()) => Err(Error::Domain(format!(
                "lambda must be non-negative, got {l}"
            ))),
            Self::Tikhonov {
                lambda: None,
                noise_level: None,
            } => Err(Error::Domain(
                "Tikhonov needs lambda or a noise level".into(),
            )),
            Self::Tikhonov {
                noise_level: Some(d),
                lambda: None,
            } if !(d > 0.0 && d.is_finite()) => Err(Error::Domain(format!(
                "noise level must be positive, got {d}"
            ))),
            Self::Tikhonov { .. } => Ok(()),
        }
    }
}

/// Diagnostics of a deconvolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub policy: DeconvolutionPolicy,
    /// Fraction of frequencies kept (by weight above one half for Tikhonov).
    pub retained_fraction: f64,
    /// Largest factor applied to any frequency.
    pub max_amplification: f64,
    pub lambda: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Deconvolution {
    pub grid: PhaseSpaceGrid,
    pub report: ConditionReport,
}

/// Recovers `g` from `h = f * g` by dividing transforms.
pub fn deconvolve(
    h: &PhaseSpaceGrid,
    k: &SmearKernel2D,
    policy: DeconvolutionPolicy,
) -> Result<Deconvolution> {
    policy.validate()?;
    if k.is_dirac() {
        let report = ConditionReport {
            policy,
            retained_fraction: 1.0,
            max_amplification: 1.0,
            lambda: None,
            warning: None,
        };
        return Ok(Deconvolution {
            grid: h.clone(),
            report,
        });
    }
    check_resolution(h.spec(), k)?;
    let mut freq = FrequencyGrid::transform(h);
    let np = freq.kp.len();
    let transfer: Vec<f64> = freq
        .kq
        .iter()
        .flat_map(|&a| freq.kp.iter().map(move |&b| (a, b)))
        .map(|(a, b)| k.char_fn(a, b))
        .collect();
    let lambda = match policy {
        DeconvolutionPolicy::Tikhonov {
            lambda: Some(l), ..
        } => Some(l),
        DeconvolutionPolicy::Tikhonov {
            lambda: None,
            noise_level: Some(delta),
            ..
        } => Some(discrepancy_lambda(
            &freq.values,
            &transfer,
            delta,
            h.cell_area(),
        )),
        _ => None,
    };
    let filter = |hv: f64| -> f64 {
        match policy {
            DeconvolutionPolicy::ExactDivision => {
                if hv >= RESOLVED_FLOOR {
                    1.0 / hv
                } else {
                    0.0
                }
            }
            DeconvolutionPolicy::Thresholded { threshold } => {
                if hv / TAU >= threshold {
                    1.0 / hv
                } else {
                    0.0
                }
            }
            DeconvolutionPolicy::Tikhonov { .. } => {
                let l = lambda.expect("set above");
                hv / (hv * hv + l)
            }
        }
    };
    let mut kept = 0usize;
    let mut max_amp = 0.0f64;
    for (v, &hv) in freq.values.iter_mut().zip(&transfer) {
        let m = filter(hv);
        let effective = m * hv;
        if effective > 0.5 {
            kept += 1;
        }
        max_amp = max_amp.max(m);
        *v *= m;
    }
    debug_assert_eq!(freq.values.len(), transfer.len());
    let _ = np;
    let warning = (max_amp > AMPLIFICATION_WARNING)
        .then(|| format!("noise amplification up to {max_amp:.3e}; the result is sensitive to noise in the input"));
    let report = ConditionReport {
        policy,
        retained_fraction: kept as f64 / transfer.len() as f64,
        max_amplification: max_amp,
        lambda,
        warning,
    };
    Ok(Deconvolution {
        grid: freq.inverse(),
        report,
    })
}

/// `lambda` with `||H g_lambda - h||_2 = delta` on grid values, by bisection in `ln lambda`.
fn discrepancy_lambda(hat: &[C64], transfer: &[f64], delta: f64, cell: f64) -> f64 {
    // grid l2 norm from transform values: sum |x|^2 = (2pi/cell)^2 / N * sum |X|^2
    let n = hat.len() as f64;
    let scale = (TAU / cell).powi(2) / n;
    let residual = |l: f64| -> f64 {
        let s: f64 = hat
            .iter()
            .zip(transfer)
            .map(|(v, &t)| v.norm_sqr() * (l / (t * t + l)).powi(2))
            .sum();
        (scale * s).sqrt()
    };
    let (mut lo, mut hi) = (-40.0f64, 10.0f64);
    if residual(hi.exp()) <= delta {
        return hi.exp();
    }
    if residual(lo.exp()) >= delta {
        return lo.exp();
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if residual(mid.exp()) > delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// `tr[rho W_{p,-q}]`. The truncated displacement has exact entries on the
/// retained block, so the value is exact for the given matrix.
pub fn weyl_transform_of_state(rho: &FockDensityMatrix, q: f64, p: f64) -> C64 {
    let alpha = C64::new(p, -q) * FRAC_1_SQRT_2;
    let w = displacement_from_amplitude(alpha, rho.dim());
    (rho.entries() * w).trace()
}

/// The analytic transform `F[g](k) = (1/2pi) tr[rho W_{kp,-kq}] tr[W_{kp,-kq}* T]`.
pub fn covariant_transform(
    rho: &FockDensityMatrix,
    t: &FockDensityMatrix,
    kq: f64,
    kp: f64,
) -> C64 {
    weyl_transform_of_state(rho, kq, kp) * weyl_transform_of_state(t, kq, kp).conj() / TAU
}

/// Diagnostics of a reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub support_points: usize,
    pub min_divisor: f64,
    pub raw_trace: f64,
    pub negative_mass: f64,
    pub projection_residual: f64,
    pub fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deconvolution: Option<ConditionReport>,
}

/// Frequencies enter the inversion where the vacuum envelope
/// `e^{-|k|^2/4}` is at least `support_envelope` and, when a signal floor is
/// set, where `H(k) |tr[W* T]|` reaches it (`H` the kernel characteristic function).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionOptions {
    pub support_envelope: f64,
    #[serde(default)]
    pub signal_floor: Option<SignalFloor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalFloor {
    pub kernel: SmearKernel2D,
    pub floor: f64,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self {
            support_envelope: SUPPORT_ENVELOPE,
            signal_floor: None,
        }
    }
}

impl ReconstructionOptions {
    /// For a histogram of `shots` samples smeared by `kernel`: a frequency is
    /// kept while the largest transform it can carry stays above
    /// [`NOISE_SIGMAS`] standard deviations of the sampling noise.
    pub fn for_samples(kernel: SmearKernel2D, shots: u64) -> Self {
        Self {
            support_envelope: SUPPORT_ENVELOPE,
            signal_floor: Some(SignalFloor {
                kernel,
                floor: NOISE_SIGMAS / (shots as f64).sqrt(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub state: FockDensityMatrix,
    pub raw: CMatrix,
    pub report: ReconstructionReport,
}

/// Linear inversion of a covariant density `g` for the generating operator
/// `T`: `tr[rho W] = 2pi F[g] / tr[W* T]` on the frequency lattice, then
/// `rho = (1/2pi) sum tr[rho W_xi] W_xi* dxi`, followed by eigenvalue clipping
/// and trace renormalization.
pub fn reconstruct_state(
    g: &PhaseSpaceGrid,
    t: &FockDensityMatrix,
    budget: TruncationBudget,
) -> Result<Reconstruction> {
    reconstruct_state_with(g, t, budget, ReconstructionOptions::default())
}

/// [`reconstruct_state`] with an explicit inversion support.
pub fn reconstruct_state_with(
    g: &PhaseSpaceGrid,
    t: &FockDensityMatrix,
    budget: TruncationBudget,
    options: ReconstructionOptions,
) -> Result<Reconstruction> {
    if !(options.support_envelope > 0.0 && options.support_envelope < 1.0) {
        return Err(Error::Domain(format!(
            "support envelope must lie in (0, 1), got {}",
            options.support_envelope
        )));
    }
    let dim = budget.dim();
    let freq = FrequencyGrid::transform(g);
    let k2_max = 4.0 * (1.0 / options.support_envelope).ln();
    let nyquist_q = freq.kq.iter().fold(0.0f64, |m, k| m.max(k.abs()));
    let nyquist_p = freq.kp.iter().fold(0.0f64, |m, k| m.max(k.abs()));
    if nyquist_q.min(nyquist_p) * nyquist_q.min(nyquist_p) < k2_max {
        return Err(Error::Resolution(format!(
            "frequency lattice reaches {:.3} but the inversion needs {:.3}",
            nyquist_q.min(nyquist_p),
            k2_max.sqrt()
        )));
    }
    let np = freq.kp.len();
    let support: Vec<(usize, usize)> = (0..freq.kq.len())
        .flat_map(|a| (0..np).map(move |b| (a, b)))
        .filter(|&(a, b)| freq.kq[a].powi(2) + freq.kp[b].powi(2) <= k2_max)
        .collect();
    let divisors: Vec<C64> = support
        .par_iter()
        .map(|&(a, b)| weyl_transform_of_state(t, freq.kq[a], freq.kp[b]).conj())
        .collect();
    let (support, divisors): (Vec<(usize, usize)>, Vec<C64>) = match options.signal_floor {
        None => (support, divisors),
        Some(sf) => support
            .into_iter()
            .zip(divisors)
            .filter(|&((a, b), d)| sf.kernel.char_fn(freq.kq[a], freq.kp[b]) * d.norm() >= sf.floor)
            .unzip(),
    };
    let min_divisor = divisors
        .iter()
        .map(|d| d.norm())
        .fold(f64::INFINITY, f64::min);
    if min_divisor < DIVISOR_THRESHOLD {
        return Err(Error::DivisorThreshold {
            min: min_divisor,
            threshold: DIVISOR_THRESHOLD,
        });
    }
    let weight = freq.dkq() * freq.dkp() / TAU;
    let chunks: Vec<CMatrix> = support
        .par_chunks(64)
        .zip(divisors.par_chunks(64))
        .map(|(pts, divs)| {
            let mut acc = CMatrix::zeros(dim, dim);
            for (&(a, b), d) in pts.iter().zip(divs) {
                let chi = freq.get(a, b) * TAU / d;
                // W_xi with xi = (kp, -kq); its adjoint is the displacement by -alpha
                let alpha = C64::new(freq.kp[b], -freq.kq[a]) * FRAC_1_SQRT_2;
                acc += displacement_from_amplitude(-alpha, dim) * (chi * weight);
            }
            acc
        })
        .collect();
    let mut raw = CMatrix::zeros(dim, dim);
    for c in &chunks {
        raw += c;
    }
    let raw = (&raw + raw.adjoint()) * C64::new(0.5, 0.0);
    let raw_trace = raw.trace().re;
    let (values, vectors) = hermitian_eigen(&raw);
    let negative_mass: f64 = values.iter().filter(|v| **v < 0.0).map(|v| -v).sum();
    let mut clipped = CMatrix::zeros(dim, dim);
    for (v, u) in values.iter().zip(&vectors) {
        if *v > 0.0 {
            clipped += u * u.adjoint() * C64::new(*v, 0.0);
        }
    }
    let projection_residual = (&clipped - &raw).norm();
    let trace = clipped.trace().re;
    if !(trace > 1e-12) {
        return Err(Error::ZeroTrace(trace));
    }
    let state = FockDensityMatrix::new(clipped / C64::new(trace, 0.0), budget)?;
    let report = ReconstructionReport {
        support_points: support.len(),
        min_divisor,
        raw_trace,
        negative_mass,
        projection_residual,
        fidelity: None,
        deconvolution: None,
    };
    Ok(Reconstruction { state, raw, report })
}

fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(m);
    let mut out = CMatrix::zeros(m.nrows(), m.ncols());
    for (v, u) in values.iter().zip(&vectors) {
        if *v > 0.0 {
            out += u * u.adjoint() * C64::new(v.sqrt(), 0.0);
        }
    }
    out
}

/// Uhlmann fidelity `(tr sqrt(sqrt(rho) sigma sqrt(rho)))^2`.
pub fn fidelity(rho: &FockDensityMatrix, sigma: &FockDensityMatrix) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(Error::InvalidBudget(format!(
            "dimensions {} and {} differ",
            rho.dim(),
            sigma.dim()
        )));
    }
    let s = psd_sqrt(rho.entries());
    let inner = &s * sigma.entries() * &s;
    let inner = (&inner + inner.adjoint()) * C64::new(0.5, 0.0);
    let (values, _) = hermitian_eigen(&inner);
    let root: f64 = values.iter().filter(|v| **v > 0.0).map(|v| v.sqrt()).sum();
    Ok((root * root).min(1.0))
}

/// Draws points from the density on the grid: a cell by its mass, then a
/// uniform position inside the cell centred on the node.
pub fn sample_phase_space(h: &PhaseSpaceGrid, shots: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let weights: Vec<f64> = h.values.iter().map(|v| v.max(0.0)).collect();
    let index =
        WeightedIndex::new(&weights).map_err(|e| Error::Domain(format!("cannot sample: {e}")))?;
    let (dq, dp, np) = (h.dq(), h.dp(), h.np);
    const CHUNK: usize = 4096;
    let chunks: Vec<Vec<(f64, f64)>> = (0..shots.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let n = CHUNK.min(shots - c * CHUNK);
            (0..n)
                .map(|_| {
                    let cell = index.sample(&mut rng);
                    let (i, j) = (cell / np, cell % np);
                    let u: f64 = rng.random::<f64>() - 0.5;
                    let v: f64 = rng.random::<f64>() - 0.5;
                    (h.q(i) + u * dq, h.p(j) + v * dp)
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// Histogram density with bins centred on the grid nodes, normalized by the
/// total number of points; points outside the grid are dropped.
pub fn histogram_density(points: &[(f64, f64)], spec: GridSpec) -> Result<PhaseSpaceGrid> {
    let mut g = PhaseSpaceGrid::zeros(spec)?;
    if points.is_empty() {
        return Ok(g);
    }
    let (dq, dp) = (g.dq(), g.dp());
    let unit = 1.0 / (points.len() as f64 * g.cell_area());
    for &(q, p) in points {
        let i = ((q - spec.q_min) / dq + 0.5).floor();
        let j = ((p - spec.p_min) / dp + 0.5).floor();
        if i >= 0.0 && j >= 0.0 && (i as usize) < spec.nq && (j as usize) < spec.np {
            g.values[i as usize * spec.np + j as usize] += unit;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Efficiency;
    use crate::eightport::CovariantEvaluator;
    use crate::fock::ComplexAmplitude;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn eff(v: f64) -> Efficiency {
        Efficiency::new(v).unwrap()
    }

    fn mixed_kernel() -> SmearKernel2D {
        SmearKernel2D::from_efficiencies([eff(0.6), eff(0.7), eff(0.8), eff(0.9)])
    }

    fn gaussian(spec: GridSpec, cq: f64, cp: f64, vq: f64, vp: f64) -> PhaseSpaceGrid {
        PhaseSpaceGrid::from_fn(spec, |q, p| {
            (-(q - cq).powi(2) / (2.0 * vq) - (p - cp).powi(2) / (2.0 * vp)).exp()
                / (TAU * (vq * vp).sqrt())
        })
        .unwrap()
    }

    #[test]
    fn transform_of_gaussian_is_analytic() {
        let spec = GridSpec::square(10.0, 128);
        let (cq, cp, vq, vp) = (0.4, -0.7, 1.3, 0.8);
        let f = FrequencyGrid::transform(&gaussian(spec, cq, cp, vq, vp));
        for (a, b) in [(0, 0), (3, 5), (120, 7), (64, 64)] {
            let (kq, kp) = (f.kq[a], f.kp[b]);
            let oracle = C64::from_polar(
                (-(vq * kq * kq + vp * kp * kp) / 2.0).exp() / TAU,
                -(kq * cq + kp * cp),
            );
            assert!((f.get(a, b) - oracle).norm() < 1e-12, "{a} {b}");
        }
        assert!(f.hermitian_defect() < 1e-14);
        let back = f.inverse();
        assert!(back.sup_distance(&gaussian(spec, cq, cp, vq, vp)).unwrap() < 1e-14);
    }

    #[test]
    fn kernel_fourier_cases() {
        let k = mixed_kernel();
        assert_abs_diff_eq!(kernel_fourier(&k, 0.0, 0.0).re, 1.0 / TAU, epsilon = 1e-16);
        let far = kernel_fourier(&k, 1e3, 1e3);
        assert!(far.re > 0.0);
        let (a, b) = (1.3, -0.4);
        let sep = kernel_fourier(&k, a, 0.0).re * kernel_fourier(&k, 0.0, b).re * TAU;
        assert!((kernel_fourier(&k, a, b).re - sep).abs() < 1e-16);
    }

    #[test]
    fn forward_smear_cases() {
        let spec = GridSpec::square(12.0, 320);
        let vac = gaussian(spec, 0.0, 0.0, 1.0, 1.0);
        let id = forward_smear(&vac, &SmearKernel2D::uniform(Efficiency::IDEAL)).unwrap();
        assert_eq!(id, vac);
        let h = forward_smear(&vac, &SmearKernel2D::uniform(eff(0.5))).unwrap();
        assert!(h.sup_distance(&gaussian(spec, 0.0, 0.0, 2.0, 2.0)).unwrap() < 1e-12);
        let k = mixed_kernel();
        let g = gaussian(spec, 0.5, 0.2, 1.1, 0.9);
        let h = forward_smear(&g, &k).unwrap();
        let oracle = gaussian(spec, 0.5, 0.2, 1.1 + k.variance_q(), 0.9 + k.variance_p());
        assert!(h.sup_distance(&oracle).unwrap() < 1e-12);
        assert!((h.mass() - g.mass()).abs() < 1e-8);
        let coarse = GridSpec::square(10.0, 32);
        assert!(matches!(
            forward_smear(&gaussian(coarse, 0.0, 0.0, 1.0, 1.0), &k),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn roundtrips_in_every_mode() {
        let spec = GridSpec::default();
        let k = mixed_kernel();
        let g = gaussian(spec, 0.0, 0.0, 1.0, 1.0);
        let h = forward_smear(&g, &k).unwrap();
        for policy in [
            DeconvolutionPolicy::ExactDivision,
            DeconvolutionPolicy::default(),
        ] {
            let back = deconvolve(&h, &k, policy).unwrap();
            assert!(back.grid.relative_l2(&g).unwrap() < 1e-6, "{policy:?}");
            let again = forward_smear(&back.grid, &k).unwrap();
            assert!(again.relative_l2(&h).unwrap() < 1e-6);
        }
        let tik = deconvolve(
            &h,
            &k,
            DeconvolutionPolicy::Tikhonov {
                lambda: Some(1e-14),
                noise_level: None,
            },
        )
        .unwrap();
        assert!(tik.grid.relative_l2(&g).unwrap() < 1e-5);
        let d = deconvolve(
            &g,
            &SmearKernel2D::uniform(Efficiency::IDEAL),
            DeconvolutionPolicy::ExactDivision,
        )
        .unwrap();
        assert_eq!(d.grid, g);
        assert!(DeconvolutionPolicy::Thresholded { threshold: 0.0 }
            .validate()
            .is_err());
        assert!(DeconvolutionPolicy::Tikhonov {
            lambda: Some(-1.0),
            noise_level: None
        }
        .validate()
        .is_err());
    }

    #[test]
    fn exact_division_on_high_frequencies_warns() {
        let spec = GridSpec::default();
        let k = mixed_kernel();
        let d = deconvolve(
            &gaussian(spec, 0.0, 0.0, 2.0, 2.0),
            &k,
            DeconvolutionPolicy::ExactDivision,
        )
        .unwrap();
        assert!(d.report.warning.is_some());
        assert!(d.report.max_amplification >= 1e9);
    }

    #[test]
    fn discrepancy_picks_larger_lambda_for_more_noise() {
        let spec = GridSpec::default();
        let k = mixed_kernel();
        let h = forward_smear(&gaussian(spec, 0.0, 0.0, 1.0, 1.0), &k).unwrap();
        let lam = |shots| {
            deconvolve(
                &h,
                &k,
                DeconvolutionPolicy::tikhonov_for_samples(shots, spec),
            )
            .unwrap()
            .report
            .lambda
            .unwrap()
        };
        assert!(lam(1_000) > lam(1_000_000));
    }

    #[test]
    fn weyl_transform_cases() {
        let b = TruncationBudget::new(40, 1e-10).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        assert_abs_diff_eq!(
            weyl_transform_of_state(&vac, 0.0, 0.0).re,
            1.0,
            epsilon = 1e-15
        );
        for (q, p) in [(0.5, 1.0), (-2.0, 0.3), (3.0, -3.0)] {
            let v = weyl_transform_of_state(&vac, q, p);
            assert!((v - C64::new((-(q * q + p * p) / 4.0).exp(), 0.0)).norm() < 1e-14);
        }
        let rho = FockDensityMatrix::coherent(ComplexAmplitude::new(0.6, -0.2), b).unwrap();
        assert!((weyl_transform_of_state(&rho, 0.0, 0.0).re - rho.trace()).abs() < 1e-15);
    }

    #[test]
    fn grid_transform_matches_product_formula() {
        let b = TruncationBudget::new(30, 1e-10).unwrap();
        let spec = GridSpec::square(10.0, 96);
        let rho = FockDensityMatrix::coherent(ComplexAmplitude::new(0.7, 0.4), b).unwrap();
        let t = FockDensityMatrix::number_state(1, b);
        let f = FrequencyGrid::transform(&CovariantEvaluator::new(&rho, &t).grid(spec).unwrap());
        for (a, bb) in [(0, 0), (2, 1), (5, 90), (90, 8)] {
            let oracle = covariant_transform(&rho, &t, f.kq[a], f.kp[bb]);
            assert!((f.get(a, bb) - oracle).norm() < 1e-5);
        }
    }

    #[test]
    fn reconstructs_number_state_from_q_function() {
        let b = TruncationBudget::new(30, 1e-10).unwrap();
        let one = FockDensityMatrix::number_state(1, b);
        let vac = FockDensityMatrix::vacuum(b);
        let g = CovariantEvaluator::new(&one, &vac)
            .grid(GridSpec::default())
            .unwrap();
        let r = reconstruct_state(&g, &vac, b).unwrap();
        let e = r.state.entries();
        assert!(e[(1, 1)].re > 0.99, "{}", e[(1, 1)].re);
        let off = (0..31)
            .flat_map(|m| (0..31).map(move |n| (m, n)))
            .filter(|&mn| mn != (1, 1))
            .map(|mn| e[mn].norm())
            .fold(0.0, f64::max);
        assert!(off < 1e-2, "{off}");
        assert!(fidelity(&r.state, &one).unwrap() > 0.999);
    }

    #[test]
    fn degenerate_inputs_fail_loudly() {
        let b = TruncationBudget::new(10, 1e-10).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        let zero = PhaseSpaceGrid::zeros(GridSpec::square(8.0, 64)).unwrap();
        assert!(matches!(
            reconstruct_state(&zero, &vac, b),
            Err(Error::ZeroTrace(_))
        ));
        // tr[W* |1><1|] vanishes on |k|^2 = 2; this lattice has a node at (sqrt2, 0)
        let half = 1.5 * TAU / std::f64::consts::SQRT_2;
        let g = CovariantEvaluator::new(&vac, &vac)
            .grid(GridSpec::square(half, 64))
            .unwrap();
        let one = FockDensityMatrix::number_state(1, b);
        assert!(matches!(
            reconstruct_state(&g, &one, b),
            Err(Error::DivisorThreshold { .. })
        ));
        let coarse = CovariantEvaluator::new(&vac, &vac)
            .grid(GridSpec::square(8.0, 32))
            .unwrap();
        assert!(matches!(
            reconstruct_state(&coarse, &vac, b),
            Err(Error::Resolution(_))
        ));
    }

    #[test]
    fn projection_residual_bounds_distance() {
        let b = TruncationBudget::new(20, 1e-10).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        let rho = FockDensityMatrix::coherent(ComplexAmplitude::new(0.5, 0.5), b).unwrap();
        let mut g = CovariantEvaluator::new(&rho, &vac)
            .grid(GridSpec::square(8.0, 64))
            .unwrap();
        for (n, v) in g.values.iter_mut().enumerate() {
            *v += 1e-3 * ((n * 7919 % 101) as f64 / 101.0 - 0.5);
        }
        let r = reconstruct_state(&g, &vac, b).unwrap();
        let unnormalized =
            r.state.entries() * C64::new(r.raw.trace().re + r.report.negative_mass, 0.0);
        assert!((unnormalized - &r.raw).norm() <= r.report.projection_residual + 1e-9);
    }

    #[test]
    fn fidelity_cases() {
        let b = TruncationBudget::new(20, 1e-10).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        let one = FockDensityMatrix::number_state(1, b);
        assert_abs_diff_eq!(fidelity(&vac, &vac).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fidelity(&vac, &one).unwrap(), 0.0, epsilon = 1e-12);
        let z = ComplexAmplitude::new(0.8, 0.0);
        let coh = FockDensityMatrix::coherent(z, b).unwrap();
        assert_abs_diff_eq!(
            fidelity(&vac, &coh).unwrap(),
            (-z.norm_sqr()).exp(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn sampled_histogram_approaches_density() {
        let spec = GridSpec::square(6.0, 48);
        let h = gaussian(spec, 0.3, 0.0, 1.0, 1.5);
        let pts = sample_phase_space(&h, 400_000, 5).unwrap();
        assert_eq!(pts, sample_phase_space(&h, 400_000, 5).unwrap());
        let est = histogram_density(&pts, spec).unwrap();
        assert!((est.mass() - 1.0).abs() < 1e-12);
        let peak = h.values.iter().cloned().fold(0.0, f64::max);
        assert!(est.sup_distance(&h).unwrap() < 0.05 * peak);
    }

    #[test]
    fn distinct_states_stay_distinguishable_after_smearing() {
        let b = TruncationBudget::new(30, 1e-10).unwrap();
        let spec = GridSpec::default();
        let vac = FockDensityMatrix::vacuum(b);
        let k = mixed_kernel();
        let g0 = CovariantEvaluator::new(&vac, &vac).grid(spec).unwrap();
        let g1 = CovariantEvaluator::new(&FockDensityMatrix::number_state(1, b), &vac)
            .grid(spec)
            .unwrap();
        let ideal = g0.l1_distance(&g1).unwrap();
        let smeared = forward_smear(&g0, &k)
            .unwrap()
            .l1_distance(&forward_smear(&g1, &k).unwrap())
            .unwrap();
        assert!(smeared > 0.0 && smeared <= ideal + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn thresholded_roundtrip_for_gaussians(cq in -1.0..1.0f64, cp in -1.0..1.0f64, vq in 0.8..2.0f64, vp in 0.8..2.0f64) {
            let spec = GridSpec::default();
            let k = mixed_kernel();
            let g = gaussian(spec, cq, cp, vq, vp);
            let back = deconvolve(&forward_smear(&g, &k).unwrap(), &k, DeconvolutionPolicy::default()).unwrap();
            prop_assert!(back.grid.relative_l2(&g).unwrap() < 1e-6);
        }
    }
}
