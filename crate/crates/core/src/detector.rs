//! Inefficient photon counting: the binomially smeared number observable,
//! its closed-form coherent-state kernels, and click samplers.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{
    ln_coherent_overlap, CoherentSuperposition, ComplexAmplitude, FockDensityMatrix,
    TruncationBudget, C64,
};
use crate::special::{ln_binomial, ln_poisson_pmf};

/// Hard ceiling on the photon counts a distribution may be extended to.
pub const MAX_COUNT_CAP: usize = 100_000;

/// Shots drawn from one random stream in the samplers.
const SHOTS_PER_STREAM: usize = 4096;

/// Quantum efficiency in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Efficiency(f64);

impl Efficiency {
    pub const IDEAL: Efficiency = Efficiency(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(Self(value))
        } else {
            Err(Error::InvalidEfficiency(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_ideal(self) -> bool {
        self.0 == 1.0
    }
}

impl TryFrom<f64> for Efficiency {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Efficiency> for f64 {
    fn from(e: Efficiency) -> f64 {
        e.0
    }
}

/// Photon-count probabilities `probs[n]` plus the mass beyond the last count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub probs: Vec<f64>,
    pub tail_mass: f64,
}

impl CountDistribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(n, p)| n as f64 * p)
            .sum()
    }

    /// Normalized histogram of count samples.
    pub fn empirical(samples: &[u64]) -> Self {
        let max = samples.iter().copied().max().unwrap_or(0) as usize;
        let mut probs = vec![0.0; max + 1];
        for &s in samples {
            probs[s as usize] += 1.0;
        }
        let n = samples.len().max(1) as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Self {
            probs,
            tail_mass: 0.0,
        }
    }

    /// Total-variation distance, counting the tail masses as unmatched.
    pub fn total_variation(&self, other: &Self) -> f64 {
        let len = self.probs.len().max(other.probs.len());
        let get = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        let body: f64 = (0..len)
            .map(|i| (get(&self.probs, i) - get(&other.probs, i)).abs())
            .sum();
        0.5 * (body + self.tail_mass + other.tail_mass)
    }

    /// CSV with header `n,probability`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["n", "probability"])?;
        for (n, p) in self.probs.iter().enumerate() {
            out.write_record([n.to_string(), crate::io::fmt_f64(*p)])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Diagonal of `E^eps_n = sum_{m>=n} C(m,n) eps^n (1-eps)^{m-n} |m><m|` on the
/// retained levels `m = 0..=cutoff`.
pub fn smeared_number_povm_element(
    eps: Efficiency,
    n: usize,
    budget: TruncationBudget,
) -> Vec<f64> {
    (0..budget.dim())
        .map(|m| binomial_thinning(eps, m as u64, n as u64))
        .collect()
}

/// `C(m,n) eps^n (1-eps)^{m-n}`, with the ideal detector as an exact Kronecker delta.
pub fn binomial_thinning(eps: Efficiency, m: u64, n: u64) -> f64 {
    if n > m {
        return 0.0;
    }
    if eps.is_ideal() {
        return if m == n { 1.0 } else { 0.0 };
    }
    let e = eps.value();
    (ln_binomial(m, n) + n as f64 * e.ln() + (m - n) as f64 * (-e).ln_1p()).exp()
}

/// `<gamma|E^eps_n|delta> = (eps conj(gamma) delta)^n / n! e^{-(|gamma|^2+|delta|^2)/2} e^{(1-eps) conj(gamma) delta}`.
pub fn coherent_count_kernel(
    eps: Efficiency,
    n: usize,
    gamma: ComplexAmplitude,
    delta: ComplexAmplitude,
) -> C64 {
    ln_coherent_count_kernel(eps, n as u64, gamma, delta).map_or(C64::new(0.0, 0.0), |l| l.exp())
}

/// Logarithm of [`coherent_count_kernel`]; `None` when the kernel vanishes.
pub(crate) fn ln_coherent_count_kernel(
    eps: Efficiency,
    n: u64,
    gamma: ComplexAmplitude,
    delta: ComplexAmplitude,
) -> Option<C64> {
    let e = eps.value();
    let w = gamma.value().conj() * delta.value();
    let base = ln_coherent_overlap(gamma, delta) - w * e;
    if n == 0 {
        return Some(base);
    }
    if w.norm_sqr() == 0.0 {
        return None;
    }
    let mean = e * w.norm();
    Some(base + C64::new(mean + ln_poisson_pmf(n, mean), n as f64 * w.im.atan2(w.re)))
}

/// Kernels `<gamma|E^eps_n|delta>` for `n = lo..=hi`, by a stable ratio recurrence.
pub(crate) fn count_kernel_range(
    eps: Efficiency,
    gamma: ComplexAmplitude,
    delta: ComplexAmplitude,
    lo: u64,
    hi: u64,
) -> Vec<C64> {
    let len = (hi - lo + 1) as usize;
    let mut out = Vec::with_capacity(len);
    let w = gamma.value().conj() * delta.value() * eps.value();
    if w.norm_sqr() == 0.0 {
        for n in lo..=hi {
            out.push(coherent_count_kernel(eps, n as usize, gamma, delta));
        }
        return out;
    }
    // Restart from the closed form periodically to bound drift.
    let mut current = C64::new(0.0, 0.0);
    for (i, n) in (lo..=hi).enumerate() {
        if i % 64 == 0 {
            current = coherent_count_kernel(eps, n as usize, gamma, delta);
        } else {
            current *= w / n as f64;
        }
        out.push(current);
    }
    out
}

/// A signal state in either representation.
#[derive(Clone, Copy, Debug)]
pub enum SignalState<'a> {
    Superposition(&'a CoherentSuperposition),
    Density(&'a FockDensityMatrix),
}

/// `tr[rho E^eps_n]` for `n = 0..=max_n`; fails when the unaccounted mass
/// reaches `tail_tol`.
pub fn count_distribution(
    state: SignalState<'_>,
    eps: Efficiency,
    max_n: usize,
    tail_tol: f64,
) -> Result<CountDistribution> {
    let probs: Vec<f64> = match state {
        SignalState::Superposition(psi) => {
            let psi = psi.normalized();
            (0..=max_n)
                .map(|n| {
                    let mut acc = C64::new(0.0, 0.0);
                    for (ci, ai) in psi.terms() {
                        for (cj, aj) in psi.terms() {
                            acc += ci.conj() * cj * coherent_count_kernel(eps, n, *ai, *aj);
                        }
                    }
                    acc.re.max(0.0)
                })
                .collect()
        }
        SignalState::Density(rho) => {
            let pops = rho.populations();
            (0..=max_n)
                .map(|n| {
                    pops.iter()
                        .enumerate()
                        .skip(n)
                        .map(|(m, p)| p * binomial_thinning(eps, m as u64, n as u64))
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect()
        }
    };
    let tail_mass = (1.0 - probs.iter().sum::<f64>()).max(0.0);
    if tail_mass >= tail_tol {
        return Err(Error::TruncationInsufficient {
            leaked: tail_mass,
            tolerance: tail_tol,
        });
    }
    Ok(CountDistribution { probs, tail_mass })
}

/// [`count_distribution`] with `max_n` doubled until the tail is below `tail_tol`.
pub fn count_distribution_auto(
    state: SignalState<'_>,
    eps: Efficiency,
    tail_tol: f64,
) -> Result<CountDistribution> {
    let mut max_n = 16usize;
    if let SignalState::Density(rho) = state {
        return count_distribution(state, eps, rho.budget().cutoff(), tail_tol);
    }
    loop {
        match count_distribution(state, eps, max_n, tail_tol) {
            Err(Error::TruncationInsufficient { leaked, .. }) => {
                if max_n >= MAX_COUNT_CAP {
                    return Err(Error::TruncationInsufficient {
                        leaked,
                        tolerance: tail_tol,
                    });
                }
                max_n = (max_n * 2).min(MAX_COUNT_CAP);
            }
            other => return other,
        }
    }
}

/// Count samples for independent coherent modes, one column per detector:
/// `Poisson(|alpha|^2)` photons thinned binomially with the efficiency.
///
/// Only valid for single coherent terms per mode; superpositions must be
/// sampled from their exact distribution with [`sample_from_distribution`].
pub fn sample_counts(
    modes: &[(ComplexAmplitude, Efficiency)],
    shots: usize,
    seed: u64,
) -> Vec<Vec<u64>> {
    let streams = shots.div_ceil(SHOTS_PER_STREAM);
    let chunks: Vec<Vec<Vec<u64>>> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let n = SHOTS_PER_STREAM.min(shots - s * SHOTS_PER_STREAM);
            let samplers: Vec<Option<Poisson<f64>>> = modes
                .iter()
                .map(|(a, _)| {
                    (a.norm_sqr() > 0.0).then(|| Poisson::new(a.norm_sqr()).expect("finite mean"))
                })
                .collect();
            (0..n)
                .map(|_| {
                    modes
                        .iter()
                        .zip(&samplers)
                        .map(|((_, eps), sampler)| {
                            let photons = sampler.as_ref().map_or(0, |p| p.sample(&mut rng) as u64);
                            thin(&mut rng, photons, *eps)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn thin(rng: &mut ChaCha8Rng, photons: u64, eps: Efficiency) -> u64 {
    if eps.is_ideal() || photons == 0 {
        photons
    } else {
        Binomial::new(photons, eps.value())
            .expect("valid binomial")
            .sample(rng)
    }
}

/// Independent stream `stream` derived from `seed`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Inverse-CDF samples from an explicit distribution; tail mass is ignored.
pub fn sample_from_distribution(
    dist: &CountDistribution,
    shots: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    let index = WeightedIndex::new(&dist.probs)
        .map_err(|e| Error::Domain(format!("cannot sample: {e}")))?;
    let streams = shots.div_ceil(SHOTS_PER_STREAM);
    let chunks: Vec<Vec<u64>> = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let n = SHOTS_PER_STREAM.min(shots - s * SHOTS_PER_STREAM);
            (0..n).map(|_| index.sample(&mut rng) as u64).collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

/// CSV event log with header `shot,detector,count`.
pub fn write_event_log<W: Write>(samples: &[Vec<u64>], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["shot", "detector", "count"])?;
    for (shot, row) in samples.iter().enumerate() {
        for (det, count) in row.iter().enumerate() {
            out.write_record([shot.to_string(), det.to_string(), count.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}
