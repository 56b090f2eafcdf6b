//! The eight-port network: two balanced homodyne arms fed by a 50:50 mix of
//! signal and parameter field, exact joint counts, the two-dimensional smear
//! kernel and the covariant phase space observable of the high-amplitude limit.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, SQRT_2, TAU};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{sample_counts, Efficiency};
use crate::error::{Error, Result};
use crate::fock::{
    displacement_from_amplitude, CMatrix, CVector, CoherentSuperposition, ComplexAmplitude,
    FockDensityMatrix, Truncated, TruncationBudget, C64,
};
use crate::grid::{gaussian_smooth, GridSpec, PhaseSpaceGrid};
use crate::homodyne::{
    arm_kernels, beam_splitter_map, count_range, smeared_bilinear_density,
    smeared_bilinear_interval, KernelKind, LocalOscillator, SmearKernel1D,
};
use crate::io::fmt_f64;
use crate::special::gauss_hermite_normal;

/// Largest eigenvalue a pure generating operator must reach.
pub const PURITY_TOL: f64 = 1e-9;
/// Default Gauss–Hermite nodes per smeared axis.
pub const DEFAULT_QUADRATURE_NODES: usize = 41;

/// Detector efficiencies `(eps1, eps2, eps3, eps4)`, phase shift and oscillator.
/// Counters 1 and 3 form the first arm, 2 and 4 the second.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EightPortConfig {
    pub efficiencies: [Efficiency; 4],
    pub phi: f64,
    pub lo: LocalOscillator,
}

impl EightPortConfig {
    /// `theta = 0`, `phi = pi/2`: the arms measure position and momentum.
    pub fn standard(efficiencies: [Efficiency; 4], r: f64) -> Result<Self> {
        Ok(Self {
            efficiencies,
            phi: FRAC_PI_2,
            lo: LocalOscillator::new(r, 0.0)?,
        })
    }

    pub fn kernel(&self) -> SmearKernel2D {
        SmearKernel2D::from_efficiencies(self.efficiencies)
    }

    fn arm_x(&self) -> ArmInstance {
        ArmInstance {
            lo: self.lo,
            eps_minus: self.efficiencies[0],
            eps_plus: self.efficiencies[2],
        }
    }

    fn arm_y(&self) -> ArmInstance {
        ArmInstance {
            lo: self.lo.shifted(self.phi),
            eps_minus: self.efficiencies[1],
            eps_plus: self.efficiencies[3],
        }
    }

    /// `(X, Y) = ((m/e3 - k/e1)/r, (n/e4 - l/e2)/r)` for counts `[k, l, m, n]`.
    pub fn outcome(&self, counts: [u64; 4]) -> (f64, f64) {
        let e = self.efficiencies.map(Efficiency::value);
        let r = self.lo.r();
        let [k, l, m, n] = counts.map(|c| c as f64);
        ((m / e[2] - k / e[0]) / r, (n / e[3] - l / e[1]) / r)
    }
}

/// Product law `mu(X x Y) = mu_{e1,e3}(X/sqrt2) mu_{e2,e4}(Y/sqrt2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmearKernel2D {
    pub kx: SmearKernel1D,
    pub ky: SmearKernel1D,
}

impl SmearKernel2D {
    pub fn from_efficiencies(e: [Efficiency; 4]) -> Self {
        Self {
            kx: SmearKernel1D::new(e[0], e[2]),
            ky: SmearKernel1D::new(e[1], e[3]),
        }
    }

    pub fn uniform(e: Efficiency) -> Self {
        Self::from_efficiencies([e; 4])
    }

    pub fn is_dirac(&self) -> bool {
        self.kx.kind() == KernelKind::Dirac && self.ky.kind() == KernelKind::Dirac
    }

    /// Variance along `q`: twice the one-dimensional variance.
    pub fn variance_q(&self) -> f64 {
        2.0 * self.kx.variance()
    }

    pub fn variance_p(&self) -> f64 {
        2.0 * self.ky.variance()
    }

    /// `f(x, y) = f_{e1,e3}(x/sqrt2) f_{e2,e4}(y/sqrt2) / 2`.
    pub fn density(&self, x: f64, y: f64) -> Result<f64> {
        Ok(0.5 * self.kx.density(x * FRAC_1_SQRT_2)? * self.ky.density(y * FRAC_1_SQRT_2)?)
    }

    /// `int e^{i(kq x + kp y)} dmu(x, y)`.
    pub fn char_fn(&self, kq: f64, kp: f64) -> f64 {
        (-0.5 * (self.variance_q() * kq * kq + self.variance_p() * kp * kp)).exp()
    }
}

/// Convex combination of coherent superpositions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherentMixture {
    components: Vec<(f64, CoherentSuperposition)>,
}

impl CoherentMixture {
    pub fn new(components: Vec<(f64, CoherentSuperposition)>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.0).sum();
        if components.is_empty() || components.iter().any(|c| !(c.0 >= 0.0)) || !(total > 0.0) {
            return Err(Error::Domain(
                "mixture weights must be non-negative with positive sum".into(),
            ));
        }
        Ok(Self {
            components: components
                .into_iter()
                .map(|(w, s)| (w / total, s.normalized()))
                .collect(),
        })
    }

    pub fn pure(state: CoherentSuperposition) -> Self {
        Self {
            components: vec![(1.0, state.normalized())],
        }
    }

    pub fn components(&self) -> &[(f64, CoherentSuperposition)] {
        &self.components
    }

    pub fn to_density(&self, budget: TruncationBudget) -> Result<FockDensityMatrix> {
        let mut m = CMatrix::zeros(budget.dim(), budget.dim());
        for (w, s) in &self.components {
            m += s.to_density(budget)?.into_entries() * C64::new(*w, 0.0);
        }
        FockDensityMatrix::new(m, budget)
    }
}

/// A state in whichever representation the caller has.
#[derive(Clone, Debug, PartialEq)]
pub enum StateSpec {
    Coherent(CoherentMixture),
    Fock(FockDensityMatrix),
}

impl StateSpec {
    pub fn to_density(&self, budget: TruncationBudget) -> Result<FockDensityMatrix> {
        match self {
            StateSpec::Coherent(m) => m.to_density(budget),
            StateSpec::Fock(rho) if rho.dim() == budget.dim() => Ok(rho.clone()),
            StateSpec::Fock(rho) => {
                if rho.dim() > budget.dim() {
                    return Err(Error::InvalidBudget(format!(
                        "state has {} levels, budget keeps {}",
                        rho.dim(),
                        budget.dim()
                    )));
                }
                let mut m = CMatrix::zeros(budget.dim(), budget.dim());
                m.view_mut((0, 0), (rho.dim(), rho.dim()))
                    .copy_from(rho.entries());
                FockDensityMatrix::new(m, budget)
            }
        }
    }

    fn coherent(&self) -> Result<&CoherentMixture> {
        match self {
            StateSpec::Coherent(m) => Ok(m),
            StateSpec::Fock(_) => Err(Error::UnsupportedState(
                "exact joint statistics need states given as finite mixtures of coherent superpositions".into(),
            )),
        }
    }
}

/// One balanced arm: oscillator and the efficiencies of its two counters,
/// `eps_minus` facing `(a - z)/sqrt2` and `eps_plus` facing `(a + z)/sqrt2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ArmInstance {
    pub lo: LocalOscillator,
    pub eps_minus: Efficiency,
    pub eps_plus: Efficiency,
}

/// `weight <bra| . |ket>` on the two modes leaving the first beam splitter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BilinearTerm {
    pub weight: C64,
    pub bra: (ComplexAmplitude, ComplexAmplitude),
    pub ket: (ComplexAmplitude, ComplexAmplitude),
}

/// Two homodyne problems whose bilinear combination gives the joint statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoubleHomodyne {
    pub arm_x: ArmInstance,
    pub arm_y: ArmInstance,
    pub terms: Vec<BilinearTerm>,
}

/// Expands `U12 (rho x S) U12*` on coherent pairs; each arm then sees one
/// output mode against its oscillator.
pub fn reduce_to_double_homodyne(
    rho: &StateSpec,
    s: &StateSpec,
    cfg: &EightPortConfig,
) -> Result<DoubleHomodyne> {
    let (rho, s) = (rho.coherent()?, s.coherent()?);
    let mut terms = Vec::new();
    for (wr, psi) in rho.components() {
        for (ws, chi) in s.components() {
            let mut pure = Vec::new();
            for (c, a) in psi.terms() {
                for (d, b) in chi.terms() {
                    pure.push((c * d, beam_splitter_map(*a, *b)));
                }
            }
            for (cb, bra) in &pure {
                for (ck, ket) in &pure {
                    terms.push(BilinearTerm {
                        weight: cb.conj() * ck * (wr * ws),
                        bra: *bra,
                        ket: *ket,
                    });
                }
            }
        }
    }
    Ok(DoubleHomodyne {
        arm_x: cfg.arm_x(),
        arm_y: cfg.arm_y(),
        terms,
    })
}

#[derive(Clone, Debug)]
struct JointTerm {
    weight: C64,
    factors: [Vec<C64>; 4],
}

/// Joint counts `p(k, l, m, n)` held in separable form: each bilinear term is
/// a product of four per-detector kernel vectors.
#[derive(Clone, Debug)]
pub struct JointCountDistribution {
    ranges: [(u64, u64); 4],
    terms: Vec<JointTerm>,
    efficiencies: [Efficiency; 4],
    r: f64,
    pub tail_mass: f64,
}

/// Exact joint count statistics of the four detectors.
pub fn joint_finite_distribution(
    red: &DoubleHomodyne,
    tail_tol: f64,
) -> Result<JointCountDistribution> {
    let zx = red.arm_x.lo.amplitude();
    let zy = red.arm_y.lo.amplitude();
    let kets: Vec<_> = red.terms.iter().map(|t| t.ket).collect();
    let ranges = [
        count_range(
            kets.iter().map(|k| beam_splitter_map(k.0, zx).0),
            red.arm_x.eps_minus,
        ),
        count_range(
            kets.iter().map(|k| beam_splitter_map(k.1, zy).0),
            red.arm_y.eps_minus,
        ),
        count_range(
            kets.iter().map(|k| beam_splitter_map(k.0, zx).1),
            red.arm_x.eps_plus,
        ),
        count_range(
            kets.iter().map(|k| beam_splitter_map(k.1, zy).1),
            red.arm_y.eps_plus,
        ),
    ];
    let terms: Vec<JointTerm> = red
        .terms
        .par_iter()
        .map(|t| {
            let (k, m) = arm_kernels(
                t.bra.0,
                t.ket.0,
                zx,
                red.arm_x.eps_minus,
                red.arm_x.eps_plus,
                ranges[0],
                ranges[2],
            );
            let (l, n) = arm_kernels(
                t.bra.1,
                t.ket.1,
                zy,
                red.arm_y.eps_minus,
                red.arm_y.eps_plus,
                ranges[1],
                ranges[3],
            );
            JointTerm {
                weight: t.weight,
                factors: [k, l, m, n],
            }
        })
        .collect();
    let efficiencies = [
        red.arm_x.eps_minus,
        red.arm_y.eps_minus,
        red.arm_x.eps_plus,
        red.arm_y.eps_plus,
    ];
    let mut dist = JointCountDistribution {
        ranges,
        terms,
        efficiencies,
        r: red.arm_x.lo.r(),
        tail_mass: 0.0,
    };
    let tail = (1.0 - dist.total()).max(0.0);
    if tail >= tail_tol {
        return Err(Error::TruncationInsufficient {
            leaked: tail,
            tolerance: tail_tol,
        });
    }
    dist.tail_mass = tail;
    Ok(dist)
}

impl JointCountDistribution {
    /// Inclusive count ranges for detectors 1 to 4.
    pub fn ranges(&self) -> [(u64, u64); 4] {
        self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges
            .iter()
            .map(|(lo, hi)| (hi - lo + 1) as usize)
            .product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn prob(&self, counts: [u64; 4]) -> f64 {
        let mut idx = [0usize; 4];
        for d in 0..4 {
            let (lo, hi) = self.ranges[d];
            if counts[d] < lo || counts[d] > hi {
                return 0.0;
            }
            idx[d] = (counts[d] - lo) as usize;
        }
        let v: C64 = self
            .terms
            .iter()
            .map(|t| {
                t.weight
                    * t.factors[0][idx[0]]
                    * t.factors[1][idx[1]]
                    * t.factors[2][idx[2]]
                    * t.factors[3][idx[3]]
            })
            .sum();
        v.re.max(0.0)
    }

    pub fn total(&self) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                t.weight
                    * t.factors
                        .iter()
                        .map(|f| f.iter().sum::<C64>())
                        .product::<C64>()
            })
            .sum::<C64>()
            .re
    }

    pub fn outcome(&self, counts: [u64; 4]) -> (f64, f64) {
        let e = self.efficiencies.map(Efficiency::value);
        let [k, l, m, n] = counts.map(|c| c as f64);
        (
            (m / e[2] - k / e[0]) / self.r,
            (n / e[3] - l / e[1]) / self.r,
        )
    }

    /// Distribution of `X` alone, as `(X, probability)` atoms.
    pub fn marginal_x(&self) -> crate::homodyne::ScaledDifferenceDistribution {
        self.marginal(0, 2, 1, 3)
    }

    pub fn marginal_y(&self) -> crate::homodyne::ScaledDifferenceDistribution {
        self.marginal(1, 3, 0, 2)
    }

    fn marginal(
        &self,
        minus: usize,
        plus: usize,
        o1: usize,
        o2: usize,
    ) -> crate::homodyne::ScaledDifferenceDistribution {
        let (e_m, e_p) = (
            self.efficiencies[minus].value(),
            self.efficiencies[plus].value(),
        );
        let (lo_m, lo_p) = (self.ranges[minus].0, self.ranges[plus].0);
        let mut atoms = Vec::new();
        let rows = self.terms[0].factors[minus].len();
        let cols = self.terms[0].factors[plus].len();
        let scaled: Vec<(C64, &[C64], &[C64])> = self
            .terms
            .iter()
            .map(|t| {
                let other: C64 =
                    t.factors[o1].iter().sum::<C64>() * t.factors[o2].iter().sum::<C64>();
                (
                    t.weight * other,
                    t.factors[minus].as_slice(),
                    t.factors[plus].as_slice(),
                )
            })
            .collect();
        for i in 0..rows {
            for j in 0..cols {
                let p: C64 = scaled.iter().map(|(w, a, b)| w * a[i] * b[j]).sum();
                let x = ((lo_p + j as u64) as f64 / e_p - (lo_m + i as u64) as f64 / e_m) / self.r;
                atoms.push((x, p.re.max(0.0)));
            }
        }
        crate::homodyne::ScaledDifferenceDistribution::from_unsorted(atoms, self.tail_mass)
    }

    /// `P(X <= x, Y <= y)` at every pair of the given points; row-major in `xs`.
    pub fn cdf_table(&self, xs: &[f64], ys: &[f64]) -> Vec<f64> {
        let per_term: Vec<(Vec<C64>, Vec<C64>)> = self
            .terms
            .par_iter()
            .map(|t| {
                let fx = arm_cdf(
                    &t.factors[0],
                    &t.factors[2],
                    self.ranges[0].0,
                    self.ranges[2].0,
                    self.efficiencies[0],
                    self.efficiencies[2],
                    self.r,
                    xs,
                );
                let fy = arm_cdf(
                    &t.factors[1],
                    &t.factors[3],
                    self.ranges[1].0,
                    self.ranges[3].0,
                    self.efficiencies[1],
                    self.efficiencies[3],
                    self.r,
                    ys,
                );
                (fx.into_iter().map(|v| v * t.weight).collect(), fy)
            })
            .collect();
        combine_separable(&per_term, xs.len(), ys.len())
    }

    /// CSV with header `k,l,m,n,probability`, every lattice point in lexicographic order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "l", "m", "n", "probability"])?;
        let [rk, rl, rm, rn] = self.ranges;
        for k in rk.0..=rk.1 {
            for l in rl.0..=rl.1 {
                for m in rm.0..=rm.1 {
                    for n in rn.0..=rn.1 {
                        let p = self.prob([k, l, m, n]);
                        out.write_record([
                            k.to_string(),
                            l.to_string(),
                            m.to_string(),
                            n.to_string(),
                            fmt_f64(p),
                        ])?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// `sum over (i, j) with (j/e_b - i/e_a)/r <= x of a[i] b[j]`, for each `x`.
#[allow(clippy::too_many_arguments)]
fn arm_cdf(
    a: &[C64],
    b: &[C64],
    a_lo: u64,
    b_lo: u64,
    e_a: Efficiency,
    e_b: Efficiency,
    r: f64,
    xs: &[f64],
) -> Vec<C64> {
    let mut cum = Vec::with_capacity(b.len() + 1);
    cum.push(C64::new(0.0, 0.0));
    for v in b {
        let last = *cum.last().expect("non-empty");
        cum.push(last + v);
    }
    xs.iter()
        .map(|&x| {
            let mut acc = C64::new(0.0, 0.0);
            for (i, ai) in a.iter().enumerate() {
                let count = (a_lo + i as u64) as f64;
                let bound = e_b.value() * (r * x + count / e_a.value());
                // number of j with b_lo + j <= bound
                let upto = (bound + 1e-9).floor() - b_lo as f64 + 1.0;
                let n = upto.clamp(0.0, b.len() as f64) as usize;
                acc += ai * cum[n];
            }
            acc
        })
        .collect()
}

fn combine_separable(per_term: &[(Vec<C64>, Vec<C64>)], nx: usize, ny: usize) -> Vec<f64> {
    let mut out = vec![0.0; nx * ny];
    out.par_chunks_mut(ny).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = per_term
                .iter()
                .map(|(fx, fy)| fx[i] * fy[j])
                .sum::<C64>()
                .re;
        }
    });
    out
}

/// `P(X <= x, Y <= y)` of the high-amplitude limit, from the arm reduction.
pub fn limit_cdf_table(
    red: &DoubleHomodyne,
    kernel: &SmearKernel2D,
    xs: &[f64],
    ys: &[f64],
) -> Vec<f64> {
    let (vx, vy) = (kernel.kx.variance(), kernel.ky.variance());
    let (tx, ty) = (red.arm_x.lo.theta(), red.arm_y.lo.theta());
    let per_term: Vec<(Vec<C64>, Vec<C64>)> = red
        .terms
        .par_iter()
        .map(|t| {
            let fx = xs
                .iter()
                .map(|&x| {
                    t.weight
                        * smeared_bilinear_interval(
                            t.bra.0,
                            t.ket.0,
                            tx,
                            vx,
                            f64::NEG_INFINITY,
                            x * FRAC_1_SQRT_2,
                        )
                })
                .collect();
            let fy = ys
                .iter()
                .map(|&y| {
                    smeared_bilinear_interval(
                        t.bra.1,
                        t.ket.1,
                        ty,
                        vy,
                        f64::NEG_INFINITY,
                        y * FRAC_1_SQRT_2,
                    )
                })
                .collect();
            (fx, fy)
        })
        .collect();
    combine_separable(&per_term, xs.len(), ys.len())
}

/// Limit density `h(X, Y)` assembled from the two smeared arms.
pub fn limit_density_from_arms(
    red: &DoubleHomodyne,
    kernel: &SmearKernel2D,
    spec: GridSpec,
) -> Result<PhaseSpaceGrid> {
    let (vx, vy) = (kernel.kx.variance(), kernel.ky.variance());
    let (tx, ty) = (red.arm_x.lo.theta(), red.arm_y.lo.theta());
    let g = PhaseSpaceGrid::zeros(spec)?;
    let xs: Vec<f64> = (0..spec.nq).map(|i| g.q(i)).collect();
    let ys: Vec<f64> = (0..spec.np).map(|j| g.p(j)).collect();
    let per_term: Vec<(Vec<C64>, Vec<C64>)> = red
        .terms
        .iter()
        .map(|t| {
            let fx = xs
                .iter()
                .map(|&x| {
                    t.weight
                        * smeared_bilinear_density(t.bra.0, t.ket.0, tx, vx, x * FRAC_1_SQRT_2)
                        * 0.5
                })
                .collect();
            let fy = ys
                .iter()
                .map(|&y| smeared_bilinear_density(t.bra.1, t.ket.1, ty, vy, y * FRAC_1_SQRT_2))
                .collect();
            (fx, fy)
        })
        .collect();
    Ok(PhaseSpaceGrid {
        values: combine_separable(&per_term, spec.nq, spec.np),
        ..g
    })
}

/// Kolmogorov–Smirnov distance between the finite joint law and its limit,
/// taken over all pairs of evaluation points.
pub fn ks_distance(
    joint: &JointCountDistribution,
    red: &DoubleHomodyne,
    kernel: &SmearKernel2D,
    xs: &[f64],
    ys: &[f64],
) -> f64 {
    let finite = joint.cdf_table(xs, ys);
    let limit = limit_cdf_table(red, kernel, xs, ys);
    finite
        .iter()
        .zip(&limit)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Counts `[k, l, m, n]` for a coherent signal `|alpha>` and coherent parameter
/// field `|beta>`: the four detectors see independent coherent states.
pub fn sample_joint_counts(
    alpha: ComplexAmplitude,
    beta: ComplexAmplitude,
    cfg: &EightPortConfig,
    shots: usize,
    seed: u64,
) -> Vec<[u64; 4]> {
    let (a, b) = beam_splitter_map(alpha, beta);
    let (d1, d3) = beam_splitter_map(a, cfg.lo.amplitude());
    let (d2, d4) = beam_splitter_map(b, cfg.lo.shifted(cfg.phi).amplitude());
    let e = cfg.efficiencies;
    sample_counts(
        &[(d1, e[0]), (d2, e[1]), (d3, e[2]), (d4, e[3])],
        shots,
        seed,
    )
    .into_iter()
    .map(|r| [r[0], r[1], r[2], r[3]])
    .collect()
}

/// `CSC^{-1}`: entrywise conjugation in the number basis.
pub fn conjugate_generating_operator(s: &FockDensityMatrix) -> FockDensityMatrix {
    s.conjugated()
}

fn padded(m: &CMatrix, dim: usize) -> CMatrix {
    let mut out = CMatrix::zeros(dim, dim);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

/// Evaluates `g(q, p) = tr[rho W_qp T W_qp*] / 2pi` through the spectral
/// decomposition of `T`. Values are exact for the given finite-rank operators:
/// the truncated displacement has exact entries on the retained block.
pub struct CovariantEvaluator {
    rho: CMatrix,
    modes: Vec<(f64, CVector)>,
    dim: usize,
}

impl CovariantEvaluator {
    pub fn new(rho: &FockDensityMatrix, t: &FockDensityMatrix) -> Self {
        let dim = rho.dim().max(t.dim());
        let (values, vectors) = crate::fock::hermitian_eigen(&padded(t.entries(), dim));
        let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let modes = values
            .into_iter()
            .zip(vectors)
            .filter(|(v, _)| v.abs() > 1e-16 * top)
            .collect();
        Self {
            rho: padded(rho.entries(), dim),
            modes,
            dim,
        }
    }

    pub fn value(&self, q: f64, p: f64) -> f64 {
        let w =
            displacement_from_amplitude(ComplexAmplitude::from_quadratures(q, p).value(), self.dim);
        let mut acc = 0.0;
        for (lambda, t) in &self.modes {
            let u = &w * t;
            acc += lambda * (u.adjoint() * &self.rho * &u)[(0, 0)].re;
        }
        acc / TAU
    }

    pub fn grid(&self, spec: GridSpec) -> Result<PhaseSpaceGrid> {
        PhaseSpaceGrid::from_fn(spec, |q, p| self.value(q, p))
    }
}

/// `(1/2pi) tr[rho W_qp T W_qp*]`.
pub fn covariant_density(rho: &FockDensityMatrix, t: &FockDensityMatrix, q: f64, p: f64) -> f64 {
    CovariantEvaluator::new(rho, t).value(q, p)
}

/// Limit density on a grid plus a coverage warning when the boundary carries mass.
#[derive(Clone, Debug)]
pub struct LimitDensity {
    pub grid: PhaseSpaceGrid,
    pub warning: Option<String>,
}

/// `h = f * g^{CSC^{-1}}_rho`: the covariant density for the conjugated
/// parameter field, smoothed by the kernel (periodic FFT convolution).
pub fn limit_density(
    rho: &FockDensityMatrix,
    s: &FockDensityMatrix,
    kernel: &SmearKernel2D,
    spec: GridSpec,
) -> Result<LimitDensity> {
    let g = CovariantEvaluator::new(rho, &conjugate_generating_operator(s)).grid(spec)?;
    let grid = gaussian_smooth(&g, kernel.variance_q(), kernel.variance_p());
    let warning = grid.coverage_warning(1e-8);
    Ok(LimitDensity { grid, warning })
}

/// Nodes and weights for `int N(0, var)(x) F(x) dx` when `F` carries a factor
/// `e^{-x^2/2}`: the rule is Gauss–Hermite for the combined Gaussian.
fn axis_rule(var: f64, mean: f64, nodes: usize) -> (Vec<f64>, Vec<f64>) {
    if var == 0.0 {
        return (vec![0.0], vec![1.0]);
    }
    let v = var / (1.0 + var);
    let mu = -mean * v;
    let (z, w) = gauss_hermite_normal(nodes, v);
    let c = (v / var).sqrt();
    z.iter()
        .zip(w)
        .map(|(zi, wi)| {
            let x = mu + zi;
            (
                x,
                wi * c * (zi * zi / (2.0 * v) - x * x / (2.0 * var)).exp(),
            )
        })
        .unzip()
}

fn quadrature_means(u: &CVector) -> (f64, f64) {
    let a: C64 = (1..u.len())
        .map(|n| u[n - 1].conj() * u[n] * (n as f64).sqrt())
        .sum();
    (SQRT_2 * a.re, SQRT_2 * a.im)
}

/// `mu * T = int W_xy T W_xy* dmu(x, y)` with the default node count.
pub fn generating_operator_convolution(
    t: &FockDensityMatrix,
    kernel: &SmearKernel2D,
    budget: TruncationBudget,
) -> Result<FockDensityMatrix> {
    generating_operator_convolution_with(t, kernel, budget, DEFAULT_QUADRATURE_NODES)
}

/// Tensor Gauss–Hermite evaluation of the displaced-copy integral, one rule
/// per eigenvector of `T` centred on its quadrature means; a Dirac axis
/// contributes the single node 0. Entries of `W u u* W*` are polynomials times
/// a Gaussian envelope, so the rule is exact for a centred Fock expansion up to
/// polynomial degree `2 nodes - 1`.
pub fn generating_operator_convolution_with(
    t: &FockDensityMatrix,
    kernel: &SmearKernel2D,
    budget: TruncationBudget,
    nodes: usize,
) -> Result<FockDensityMatrix> {
    let dim = budget.dim();
    if t.dim() > dim {
        return Err(Error::InvalidBudget(format!(
            "operator has {} levels, budget keeps {dim}",
            t.dim()
        )));
    }
    let entries = padded(t.entries(), dim);
    if kernel.is_dirac() {
        return FockDensityMatrix::new(entries, budget);
    }
    let (values, vectors) = crate::fock::hermitian_eigen(&entries);
    let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let partials: Vec<CMatrix> = values
        .into_iter()
        .zip(vectors)
        .filter(|(v, _)| v.abs() > 1e-16 * top)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(lambda, v)| {
            let (mq, mp) = quadrature_means(&v);
            let (xq, wq) = axis_rule(kernel.variance_q(), mq, nodes);
            let (xp, wp) = axis_rule(kernel.variance_p(), mp, nodes);
            let mut acc = CMatrix::zeros(dim, dim);
            for (x, wx) in xq.iter().zip(&wq) {
                for (y, wy) in xp.iter().zip(&wp) {
                    let w = displacement_from_amplitude(
                        ComplexAmplitude::from_quadratures(*x, *y).value(),
                        dim,
                    );
                    let u = &w * &v;
                    acc += &u * u.adjoint() * C64::new(lambda * wx * wy, 0.0);
                }
            }
            acc
        })
        .collect();
    let mut out = CMatrix::zeros(dim, dim);
    for p in &partials {
        out += p;
    }
    let out = (&out + out.adjoint()) * C64::new(0.5, 0.0);
    let leaked = (entries.trace().re - out.trace().re).max(0.0);
    if leaked >= budget.tail_tol() {
        return Err(Error::TruncationInsufficient {
            leaked,
            tolerance: budget.tail_tol(),
        });
    }
    FockDensityMatrix::new(out, budget)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PurityReport {
    pub is_pure: bool,
    pub largest_eigenvalue: f64,
}

/// Pure iff the largest eigenvalue reaches `1 - PURITY_TOL`. A numerical
/// criterion: operators within the tolerance of a projection count as pure.
pub fn purity_extremality_check(t: &FockDensityMatrix) -> PurityReport {
    let (values, _) = t.eigen();
    let largest_eigenvalue = values.first().copied().unwrap_or(0.0);
    PurityReport {
        is_pure: largest_eigenvalue >= 1.0 - PURITY_TOL,
        largest_eigenvalue,
    }
}

/// `mu * |0><0| = eps |0><0| + (1 - eps) S'` for a common efficiency.
#[derive(Clone, Debug)]
pub struct VacuumDecomposition {
    pub vacuum_weight: f64,
    pub residual: FockDensityMatrix,
}

impl VacuumDecomposition {
    /// `eps |0><0| + (1 - eps) S'`.
    pub fn recombined(&self) -> CMatrix {
        let mut m = self.residual.entries() * C64::new(1.0 - self.vacuum_weight, 0.0);
        m[(0, 0)] += C64::new(self.vacuum_weight, 0.0);
        m
    }
}

/// `S' = (eps/(1-eps)) sum_{n>=1} (1-eps)^n |n><n|`.
pub fn vacuum_component_decomposition(
    eps: Efficiency,
    budget: TruncationBudget,
) -> Result<VacuumDecomposition> {
    if eps.is_ideal() {
        return Err(Error::Domain(
            "ideal detectors leave no residual component".into(),
        ));
    }
    let e = eps.value();
    let pops: Vec<f64> = (0..budget.dim())
        .map(|n| {
            if n == 0 {
                0.0
            } else {
                e * (1.0 - e).powi(n as i32 - 1)
            }
        })
        .collect();
    Ok(VacuumDecomposition {
        vacuum_weight: e,
        residual: FockDensityMatrix::diagonal(&pops, budget)?,
    })
}

/// `W_qp rho W_qp*` on the same truncated space, with the mass pushed past the cutoff.
pub fn displaced_state(
    rho: &FockDensityMatrix,
    q: f64,
    p: f64,
) -> Result<Truncated<FockDensityMatrix>> {
    let w =
        displacement_from_amplitude(ComplexAmplitude::from_quadratures(q, p).value(), rho.dim());
    let m = &w * rho.entries() * w.adjoint();
    let m = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    let leaked = (rho.trace() - m.trace().re).max(0.0);
    let budget = TruncationBudget::new(
        rho.budget().cutoff(),
        rho.budget().tail_tol().max(leaked.min(0.5) + f64::EPSILON),
    )?;
    Ok(Truncated {
        value: FockDensityMatrix::new(m, budget)?,
        leaked,
    })
}

/// Sup-norm gap between `g` of the displaced state and the translated `g`,
/// over grid nodes whose translate also lies inside the grid.
pub fn covariance_check(
    rho: &FockDensityMatrix,
    t: &FockDensityMatrix,
    shift: (f64, f64),
    spec: GridSpec,
) -> Result<f64> {
    let moved = displaced_state(rho, shift.0, shift.1)?.value;
    let direct = CovariantEvaluator::new(&moved, t);
    let base = CovariantEvaluator::new(rho, t);
    let grid = PhaseSpaceGrid::zeros(spec)?;
    let nodes: Vec<(f64, f64)> = (0..spec.nq)
        .flat_map(|i| (0..spec.np).map(move |j| (i, j)))
        .map(|(i, j)| (grid.q(i), grid.p(j)))
        .filter(|(q, p)| {
            let (a, b) = (q - shift.0, p - shift.1);
            a >= spec.q_min && a < spec.q_max && b >= spec.p_min && b < spec.p_max
        })
        .collect();
    Ok(nodes
        .par_iter()
        .map(|&(q, p)| (direct.value(q, p) - base.value(q - shift.0, p - shift.1)).abs())
        .reduce(|| 0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::coherent_overlap;
    use crate::homodyne::finite_z_distribution;
    use crate::special::integrate;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn eff(v: f64) -> Efficiency {
        Efficiency::new(v).unwrap()
    }

    fn amp(re: f64, im: f64) -> ComplexAmplitude {
        ComplexAmplitude::new(re, im)
    }

    fn coherent(re: f64, im: f64) -> StateSpec {
        StateSpec::Coherent(CoherentMixture::pure(CoherentSuperposition::coherent(amp(
            re, im,
        ))))
    }

    fn budget(cutoff: usize) -> TruncationBudget {
        TruncationBudget::new(cutoff, 1e-10).unwrap()
    }

    #[test]
    fn reduction_of_coherent_signal_with_vacuum_field() {
        let cfg = EightPortConfig::standard([eff(0.9); 4], 5.0).unwrap();
        let red =
            reduce_to_double_homodyne(&coherent(1.0, 0.5), &coherent(0.0, 0.0), &cfg).unwrap();
        assert_eq!(red.terms.len(), 1);
        let t = red.terms[0];
        assert_abs_diff_eq!(t.ket.0.re, FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.ket.1.im, 0.5 * FRAC_1_SQRT_2, epsilon = 1e-15);
        assert_abs_diff_eq!(red.arm_y.lo.theta(), FRAC_PI_2);
        let flat = EightPortConfig { phi: 0.0, ..cfg };
        let red =
            reduce_to_double_homodyne(&coherent(1.0, 0.5), &coherent(0.0, 0.0), &flat).unwrap();
        assert_eq!(red.arm_x.lo, red.arm_y.lo);
        let fock = StateSpec::Fock(FockDensityMatrix::vacuum(budget(3)));
        assert!(matches!(
            reduce_to_double_homodyne(&fock, &coherent(0.0, 0.0), &cfg),
            Err(Error::UnsupportedState(_))
        ));
    }

    #[test]
    fn vacuum_inputs_give_independent_poisson_counts() {
        let r = 2.0;
        let cfg = EightPortConfig::standard([Efficiency::IDEAL; 4], r).unwrap();
        let red =
            reduce_to_double_homodyne(&coherent(0.0, 0.0), &coherent(0.0, 0.0), &cfg).unwrap();
        let j = joint_finite_distribution(&red, 1e-10).unwrap();
        assert!((j.total() + j.tail_mass - 1.0).abs() < 1e-12);
        let mean = r * r / 2.0;
        let pois = |n: u64| (-mean + n as f64 * mean.ln() - crate::special::ln_factorial(n)).exp();
        for c in [[0, 0, 0, 0], [1, 2, 3, 4], [2, 2, 2, 2], [5, 0, 1, 3]] {
            let oracle: f64 = c.iter().map(|&n| pois(n)).product();
            assert!((j.prob(c) - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_matches_single_homodyne() {
        let cfg = EightPortConfig::standard([eff(0.7), eff(0.8), eff(0.6), eff(0.9)], 3.0).unwrap();
        let alpha = amp(0.6, -0.4);
        let red =
            reduce_to_double_homodyne(&coherent(alpha.re, alpha.im), &coherent(0.0, 0.0), &cfg)
                .unwrap();
        let j = joint_finite_distribution(&red, 1e-10).unwrap();
        let mx = j.marginal_x();
        let single = finite_z_distribution(
            &CoherentSuperposition::coherent(amp(
                alpha.re * FRAC_1_SQRT_2,
                alpha.im * FRAC_1_SQRT_2,
            )),
            cfg.lo,
            eff(0.7),
            eff(0.6),
            1e-10,
        )
        .unwrap();
        for t in [-1.5, 0.4, 2.0] {
            // X = sqrt2 x, so the characteristic function of X at t is that of x at sqrt2 t
            assert!((mx.char_fn(t) - single.char_fn(SQRT_2 * t)).norm() < 1e-10);
        }
        assert!(j.total() > 1.0 - 1e-10);
    }

    #[test]
    fn joint_probabilities_nonnegative_for_cat_pair() {
        let cfg = EightPortConfig::standard([eff(0.5), eff(0.7), eff(0.6), eff(1.0)], 1.5).unwrap();
        let cat = StateSpec::Coherent(CoherentMixture::pure(
            CoherentSuperposition::cat(amp(0.8, 0.3), -1.0).unwrap(),
        ));
        let red = reduce_to_double_homodyne(&cat, &coherent(0.2, -0.1), &cfg).unwrap();
        assert_eq!(red.terms.len(), 4);
        let j = joint_finite_distribution(&red, 1e-10).unwrap();
        assert!((j.total() + j.tail_mass - 1.0).abs() < 1e-10);
        let [rk, rl, rm, rn] = j.ranges();
        let mut sum = 0.0;
        for k in rk.0..=rk.1 {
            for l in rl.0..=rl.1 {
                for m in rm.0..=rm.1 {
                    for n in rn.0..=rn.1 {
                        let p = j.prob([k, l, m, n]);
                        assert!(p >= 0.0);
                        sum += p;
                    }
                }
            }
        }
        assert!((sum - j.total()).abs() < 1e-10);
    }

    #[test]
    fn phase_and_arm_symmetries_for_real_states() {
        let e = [eff(0.6), eff(0.9), eff(0.75), eff(0.5)];
        let rho = coherent(0.7, 0.0);
        let s = coherent(-0.3, 0.0);
        let lo = LocalOscillator::new(1.2, 0.0).unwrap();
        let plus = joint_finite_distribution(
            &reduce_to_double_homodyne(
                &rho,
                &s,
                &EightPortConfig {
                    efficiencies: e,
                    phi: 0.9,
                    lo,
                },
            )
            .unwrap(),
            1e-10,
        )
        .unwrap();
        let minus = joint_finite_distribution(
            &reduce_to_double_homodyne(
                &rho,
                &s,
                &EightPortConfig {
                    efficiencies: e,
                    phi: -0.9,
                    lo,
                },
            )
            .unwrap(),
            1e-10,
        )
        .unwrap();
        let vac = coherent(0.0, 0.0);
        let swapped_e = [e[1], e[0], e[3], e[2]];
        let a = joint_finite_distribution(
            &reduce_to_double_homodyne(
                &rho,
                &vac,
                &EightPortConfig {
                    efficiencies: e,
                    phi: 0.0,
                    lo,
                },
            )
            .unwrap(),
            1e-10,
        )
        .unwrap();
        let b = joint_finite_distribution(
            &reduce_to_double_homodyne(
                &rho,
                &vac,
                &EightPortConfig {
                    efficiencies: swapped_e,
                    phi: 0.0,
                    lo,
                },
            )
            .unwrap(),
            1e-10,
        )
        .unwrap();
        for c in [[0u64, 0, 0, 0], [1, 0, 2, 3], [2, 1, 1, 0], [0, 3, 1, 2]] {
            assert!((plus.prob(c) - minus.prob(c)).abs() < 1e-14);
            assert!((a.prob(c) - b.prob([c[1], c[0], c[3], c[2]])).abs() < 1e-14);
        }
    }

    #[test]
    fn kernel2d_cases() {
        let k = SmearKernel2D::uniform(eff(0.5));
        for (x, y) in [(0.0, 0.0), (0.7, -1.2), (2.0, 1.0)] {
            assert_abs_diff_eq!(
                k.density(x, y).unwrap(),
                (-(x * x + y * y) / 2.0).exp() / TAU,
                epsilon = 1e-15
            );
        }
        let k = SmearKernel2D::from_efficiencies([eff(0.3), eff(0.6), eff(0.8), eff(0.45)]);
        assert_abs_diff_eq!(
            k.variance_q(),
            2.0 * (0.3 + 0.8 - 2.0 * 0.24) / (4.0 * 0.24),
            epsilon = 1e-15
        );
        let mass: f64 = integrate(
            |x| integrate(|y| k.density(x, y).unwrap(), -30.0, 30.0, 60),
            -30.0,
            30.0,
            60,
        );
        assert!((mass - 1.0).abs() < 1e-10);
        let partial = SmearKernel2D::from_efficiencies([
            Efficiency::IDEAL,
            eff(0.5),
            Efficiency::IDEAL,
            eff(0.5),
        ]);
        assert!(matches!(partial.density(0.0, 0.0), Err(Error::Kind(_))));
        assert!(!partial.is_dirac());
        assert_abs_diff_eq!(k.char_fn(0.0, 0.0), 1.0);
    }

    #[test]
    fn conjugation_maps_coherent_to_conjugate() {
        let b = budget(40);
        let z = amp(0.9, -0.6);
        let s = FockDensityMatrix::coherent(z, b).unwrap();
        let c = conjugate_generating_operator(&s);
        let target = FockDensityMatrix::coherent(z.conj(), b).unwrap();
        assert!((c.entries() - target.entries()).norm() < 1e-14);
        assert_eq!(conjugate_generating_operator(&c).entries(), s.entries());
        let d = FockDensityMatrix::diagonal(&[0.25, 0.75], b).unwrap();
        assert_eq!(conjugate_generating_operator(&d).entries(), d.entries());
    }

    #[test]
    fn covariant_density_is_q_function() {
        let b = budget(40);
        let vac = FockDensityMatrix::vacuum(b);
        assert_abs_diff_eq!(
            covariant_density(&vac, &vac, 0.0, 0.0),
            1.0 / TAU,
            epsilon = 1e-15
        );
        let a = amp(0.8, -0.5);
        let rho = FockDensityMatrix::coherent(a, b).unwrap();
        for (q, p) in [(0.0, 0.0), (1.1, -0.7), (-1.0, 2.0)] {
            let oracle = (-((q - a.q()).powi(2) + (p - a.p()).powi(2)) / 2.0).exp() / TAU;
            assert!((covariant_density(&rho, &vac, q, p) - oracle).abs() < 1e-12);
            // generic T: closed form |<beta|D(w)|alpha... >|^2 via coherent overlaps
            let t = FockDensityMatrix::coherent(amp(0.3, 0.2), b).unwrap();
            let w = ComplexAmplitude::from_quadratures(q, p);
            let shifted = amp(0.3 + w.re, 0.2 + w.im);
            let expected = coherent_overlap(a, shifted).norm_sqr() / TAU;
            assert!((covariant_density(&rho, &t, q, p) - expected).abs() < 1e-11);
        }
        let g = CovariantEvaluator::new(&rho, &FockDensityMatrix::number_state(1, b))
            .grid(GridSpec::square(8.0, 64))
            .unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn limit_density_cases() {
        let b = budget(40);
        let spec = GridSpec::square(10.0, 80);
        let a = amp(0.5, 0.3);
        let rho = FockDensityMatrix::coherent(a, b).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        let ideal =
            limit_density(&rho, &vac, &SmearKernel2D::uniform(Efficiency::IDEAL), spec).unwrap();
        let g = CovariantEvaluator::new(&rho, &vac).grid(spec).unwrap();
        assert_eq!(ideal.grid, g);
        let e = 0.6;
        let h = limit_density(&rho, &vac, &SmearKernel2D::uniform(eff(e)), spec).unwrap();
        assert!(h.warning.is_none(), "{:?}", h.warning);
        let var = 1.0 / e;
        let oracle = PhaseSpaceGrid::from_fn(spec, |q, p| {
            (-((q - a.q()).powi(2) + (p - a.p()).powi(2)) / (2.0 * var)).exp() / (TAU * var)
        })
        .unwrap();
        assert!(h.grid.sup_distance(&oracle).unwrap() < 1e-10);
        let wide = limit_density(&rho, &vac, &SmearKernel2D::uniform(eff(0.1)), spec).unwrap();
        assert!(wide.warning.is_some());
    }

    #[test]
    fn arm_limit_density_matches_fock_route() {
        let b = budget(40);
        let spec = GridSpec::square(10.0, 80);
        let e = [eff(0.6), eff(0.7), eff(0.8), eff(0.9)];
        let cfg = EightPortConfig::standard(e, 10.0).unwrap();
        let signal = CoherentSuperposition::cat(amp(0.9, 0.4), 1.0).unwrap();
        let field = amp(0.3, -0.6);
        let red = reduce_to_double_homodyne(
            &StateSpec::Coherent(CoherentMixture::pure(signal.clone())),
            &coherent(field.re, field.im),
            &cfg,
        )
        .unwrap();
        let arms = limit_density_from_arms(&red, &cfg.kernel(), spec).unwrap();
        let rho = signal.to_density(b).unwrap();
        let s = FockDensityMatrix::coherent(field, b).unwrap();
        let fock = limit_density(&rho, &s, &cfg.kernel(), spec).unwrap();
        let d = arms.sup_distance(&fock.grid).unwrap();
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn finite_statistics_approach_limit_in_ks() {
        let e = [eff(0.6), eff(0.7), eff(0.8), eff(0.9)];
        let xs: Vec<f64> = (0..81).map(|i| -5.0 + 0.125 * i as f64).collect();
        let mut last = f64::INFINITY;
        for r in [5.0, 10.0, 20.0] {
            let cfg = EightPortConfig::standard(e, r).unwrap();
            let red =
                reduce_to_double_homodyne(&coherent(0.7, 0.3), &coherent(0.0, 0.0), &cfg).unwrap();
            let j = joint_finite_distribution(&red, 1e-10).unwrap();
            let ks = ks_distance(&j, &red, &cfg.kernel(), &xs, &xs);
            assert!(ks < last, "r={r}: {ks} vs {last}");
            last = ks;
        }
        assert!(last < 0.1);
    }

    #[test]
    fn cdf_tables_agree_with_direct_sums() {
        let cfg = EightPortConfig::standard([eff(0.5), eff(0.8), eff(0.7), eff(0.6)], 1.0).unwrap();
        let red =
            reduce_to_double_homodyne(&coherent(0.3, 0.2), &coherent(0.1, 0.0), &cfg).unwrap();
        let j = joint_finite_distribution(&red, 1e-10).unwrap();
        let (x, y) = (0.4, -0.3);
        let [rk, rl, rm, rn] = j.ranges();
        let mut direct = 0.0;
        for k in rk.0..=rk.1 {
            for l in rl.0..=rl.1 {
                for m in rm.0..=rm.1 {
                    for n in rn.0..=rn.1 {
                        let (ox, oy) = j.outcome([k, l, m, n]);
                        if ox <= x && oy <= y {
                            direct += j.prob([k, l, m, n]);
                        }
                    }
                }
            }
        }
        assert!((j.cdf_table(&[x], &[y])[0] - direct).abs() < 1e-12);
        let lim = limit_cdf_table(&red, &cfg.kernel(), &[f64::INFINITY], &[f64::INFINITY]);
        assert!((lim[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_matches_joint_means() {
        let cfg = EightPortConfig::standard([eff(0.5), eff(0.6), eff(0.7), eff(0.8)], 2.0).unwrap();
        let s = sample_joint_counts(amp(0.5, 0.2), ComplexAmplitude::ZERO, &cfg, 200_000, 11);
        let mean_x: f64 = s.iter().map(|c| cfg.outcome(*c).0).sum::<f64>() / s.len() as f64;
        // mean of X is sqrt2 Re(alpha)
        assert!((mean_x - SQRT_2 * 0.5).abs() < 0.02, "{mean_x}");
    }

    #[test]
    fn vacuum_convolution_closed_form() {
        let e = 0.5;
        let b = budget(40);
        let t = generating_operator_convolution(
            &FockDensityMatrix::vacuum(b),
            &SmearKernel2D::uniform(eff(e)),
            b,
        )
        .unwrap();
        for n in 0..=40 {
            assert!((t.entries()[(n, n)].re - e * (1.0 - e).powi(n as i32)).abs() < 1e-12);
        }
        let off = (0..41)
            .flat_map(|m| (0..41).map(move |n| (m, n)))
            .filter(|(m, n)| m != n)
            .map(|(m, n)| t.entries()[(m, n)].norm())
            .fold(0.0, f64::max);
        assert!(off < 1e-12);
        assert!((t.mean_photon_number() - 1.0).abs() < 1e-9);
        let pure = purity_extremality_check(&t);
        assert!(!pure.is_pure);
        assert_abs_diff_eq!(pure.largest_eigenvalue, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn displaced_convolution_matches_displaced_thermal() {
        let b = budget(60);
        let k = SmearKernel2D::uniform(eff(0.5));
        let z = ComplexAmplitude::new(0.9, -0.7);
        let t = generating_operator_convolution(&FockDensityMatrix::coherent(z, b).unwrap(), &k, b)
            .unwrap();
        let thermal =
            generating_operator_convolution(&FockDensityMatrix::vacuum(b), &k, b).unwrap();
        let expected = displaced_state(&thermal, SQRT_2 * 0.9, SQRT_2 * -0.7)
            .unwrap()
            .value;
        let gap = (t.entries() - expected.entries())
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max);
        assert!(gap < 1e-10, "gap {gap:e}");
    }

    #[test]
    fn dirac_convolution_is_identity() {
        let b = budget(10);
        let t = FockDensityMatrix::number_state(2, b);
        let out =
            generating_operator_convolution(&t, &SmearKernel2D::uniform(Efficiency::IDEAL), b)
                .unwrap();
        assert_eq!(out.entries(), t.entries());
    }

    #[test]
    fn partial_smear_of_vacuum_is_squeezed_thermal_like() {
        // smearing along q only: the result has <x^2> increased by var_q and <p^2> unchanged
        let b = budget(50);
        let k = SmearKernel2D::from_efficiencies([
            eff(0.7),
            Efficiency::IDEAL,
            eff(0.8),
            Efficiency::IDEAL,
        ]);
        let t = generating_operator_convolution(&FockDensityMatrix::vacuum(b), &k, b).unwrap();
        assert!(crate::fock::validate_density(&t).passed);
        let a = CMatrix::from_fn(51, 51, |m, n| {
            if m + 1 == n {
                C64::new((n as f64).sqrt(), 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let qop = (&a + a.adjoint()) * C64::new(FRAC_1_SQRT_2, 0.0);
        let pop = (a.adjoint() - &a) * C64::new(0.0, FRAC_1_SQRT_2);
        let q2 = (t.entries() * &qop * &qop).trace().re;
        let p2 = (t.entries() * &pop * &pop).trace().re;
        assert!((q2 - (0.5 + k.variance_q())).abs() < 1e-8, "{q2}");
        assert!((p2 - 0.5).abs() < 1e-8, "{p2}");
        assert!(!purity_extremality_check(&t).is_pure);
    }

    #[test]
    fn convolution_output_symmetric_under_inversion() {
        // parity P = (-1)^N implements (x, y) -> (-x, -y); mu * (P T P) = P (mu * T) P
        let b = budget(30);
        let t = FockDensityMatrix::coherent(amp(0.4, 0.3), b).unwrap();
        let k = SmearKernel2D::from_efficiencies([eff(0.6), eff(0.7), eff(0.8), eff(0.9)]);
        let parity = |m: &CMatrix| {
            CMatrix::from_fn(31, 31, |i, j| {
                if (i + j) % 2 == 0 {
                    m[(i, j)]
                } else {
                    -m[(i, j)]
                }
            })
        };
        let pt = FockDensityMatrix::new(parity(t.entries()), b).unwrap();
        let lhs = generating_operator_convolution(&pt, &k, b).unwrap();
        let rhs = parity(
            generating_operator_convolution(&t, &k, b)
                .unwrap()
                .entries(),
        );
        assert!((lhs.entries() - rhs).norm() < 1e-12);
    }

    #[test]
    fn purity_matrix() {
        let b = budget(12);
        assert!(purity_extremality_check(&FockDensityMatrix::vacuum(b)).is_pure);
        let mixed = FockDensityMatrix::diagonal(&[0.5, 0.5], b).unwrap();
        assert!(!purity_extremality_check(&mixed).is_pure);
    }

    #[test]
    fn vacuum_decomposition() {
        let b = TruncationBudget::new(40, 1e-9).unwrap();
        let d = vacuum_component_decomposition(eff(0.5), b).unwrap();
        let pops = d.residual.populations();
        assert_eq!(pops[0], 0.0);
        assert_abs_diff_eq!(pops[1], 0.5);
        assert_abs_diff_eq!(pops[2], 0.25);
        assert_abs_diff_eq!(pops[3], 0.125);
        assert!((d.residual.trace() - 1.0).abs() < 1e-11);
        let conv = generating_operator_convolution(
            &FockDensityMatrix::vacuum(b),
            &SmearKernel2D::uniform(eff(0.5)),
            b,
        )
        .unwrap();
        assert!((d.recombined() - conv.entries()).norm() < 1e-8);
        assert!(vacuum_component_decomposition(Efficiency::IDEAL, b).is_err());
    }

    #[test]
    fn covariance_shift_moves_centre() {
        let b = budget(40);
        let rho = FockDensityMatrix::coherent(amp(0.3, 0.1), b).unwrap();
        let vac = FockDensityMatrix::vacuum(b);
        let spec = GridSpec::square(6.0, 24);
        assert_eq!(covariance_check(&rho, &vac, (0.0, 0.0), spec).unwrap(), 0.0);
        let dev = covariance_check(&rho, &vac, (1.0, 0.0), spec).unwrap();
        assert!(dev < 1e-10, "{dev}");
        let moved = displaced_state(&rho, 1.0, 0.0).unwrap().value;
        let a = amp(0.3, 0.1);
        let q = a.q() + 1.0;
        assert!((covariant_density(&moved, &vac, q, a.p()) - 1.0 / TAU).abs() < 1e-10);
    }

    #[test]
    fn covariance_error_shrinks_with_cutoff() {
        let spec = GridSpec::square(4.0, 8);
        let devs: Vec<f64> = [12, 24]
            .iter()
            .map(|&c| {
                let b = TruncationBudget::new(c, 1e-2).unwrap();
                let rho = FockDensityMatrix::coherent(amp(1.0, 0.5), b).unwrap();
                covariance_check(&rho, &FockDensityMatrix::vacuum(b), (2.0, 2.0), spec).unwrap()
            })
            .collect();
        assert!(devs[1] < devs[0], "{devs:?}");
    }

    proptest! {
        #[test]
        fn covariant_density_nonnegative(q in -5.0..5.0f64, p in -5.0..5.0f64, re in -1.5..1.5f64, im in -1.5..1.5f64) {
            let b = budget(30);
            let rho = FockDensityMatrix::coherent(amp(re, im), b).unwrap();
            let t = FockDensityMatrix::diagonal(&[0.2, 0.5, 0.3], b).unwrap();
            prop_assert!(covariant_density(&rho, &t, q, p) >= -1e-12);
            prop_assert!(covariant_density(&rho, &t, q, p) <= 1.0 / (2.0 * PI) + 1e-12);
        }
    }
}
