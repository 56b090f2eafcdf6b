//! Special functions and quadrature rules shared across the crate.

use std::f64::consts::TAU;
use std::sync::OnceLock;

use statrs::distribution::{DiscreteCDF, Poisson};
use statrs::function::gamma::ln_gamma;

const LN_FACTORIAL_TABLE: usize = 1 << 14;

fn ln_factorial_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = Vec::with_capacity(LN_FACTORIAL_TABLE);
        let mut acc = 0.0f64;
        table.push(0.0);
        for k in 1..LN_FACTORIAL_TABLE {
            acc += (k as f64).ln();
            table.push(acc);
        }
        table
    })
}

/// `ln(n!)` from a cumulative log table, falling back to log-Gamma for large `n`.
pub fn ln_factorial(n: u64) -> f64 {
    let table = ln_factorial_table();
    match table.get(n as usize) {
        Some(&v) => v,
        None => ln_gamma(n as f64 + 1.0),
    }
}

/// `ln(e^{-mean} mean^n / n!)` by the saddle-point split
/// `-stirlerr(n) - bd0(n, mean) - ln(2 pi n)/2`, accurate for large counts.
pub fn ln_poisson_pmf(n: u64, mean: f64) -> f64 {
    if n == 0 {
        return -mean;
    }
    if mean == 0.0 {
        return f64::NEG_INFINITY;
    }
    let x = n as f64;
    -stirling_error(n) - deviance_term(x, mean) - 0.5 * (TAU * x).ln()
}

fn stirling_error(n: u64) -> f64 {
    if n <= 15 {
        let x = n as f64;
        return ln_factorial(n) - (x + 0.5) * x.ln() + x - 0.5 * TAU.ln();
    }
    let x = n as f64;
    let x2 = x * x;
    (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * x2)) / x2) / x2) / x
}

/// `x ln(x / m) + m - x` without cancellation near `x = m`.
fn deviance_term(x: f64, m: f64) -> f64 {
    if (x - m).abs() >= 0.1 * (x + m) {
        return x * (x / m).ln() + m - x;
    }
    let v = (x - m) / (x + m);
    let v2 = v * v;
    let mut s = (x - m) * v;
    let mut ej = 2.0 * x * v;
    for j in 1..1000 {
        ej *= v2;
        let next = s + ej / (2 * j + 1) as f64;
        if next == s {
            break;
        }
        s = next;
    }
    s
}

/// `ln C(m, n)` for `n <= m`.
pub fn ln_binomial(m: u64, n: u64) -> f64 {
    debug_assert!(n <= m);
    ln_factorial(m) - ln_factorial(n) - ln_factorial(m - n)
}

/// `1 - cos(u)` without cancellation.
pub fn one_minus_cos(u: f64) -> f64 {
    let s = (0.5 * u).sin();
    2.0 * s * s
}

/// `sin(u) - u` without cancellation for small `u`.
pub fn sin_minus_id(u: f64) -> f64 {
    if u.abs() < 0.1 {
        // -u^3/3! + u^5/5! - ...
        let u2 = u * u;
        let mut term = -u * u2 / 6.0;
        let mut sum = term;
        let mut k = 3.0;
        while term.abs() > 1e-18 * sum.abs() {
            term *= -u2 / ((2.0 * k - 1.0) * (2.0 * k - 2.0));
            sum += term;
            k += 1.0;
        }
        sum
    } else {
        u.sin() - u
    }
}

/// Inclusive count range `[lo, hi]` outside of which a Poisson(`mean`) variable
/// carries less than `tail` probability on each side.
pub fn poisson_support(mean: f64, tail: f64) -> (u64, u64) {
    if mean <= 0.0 {
        return (0, 0);
    }
    let dist = Poisson::new(mean).expect("positive Poisson mean");
    let sd = mean.sqrt();
    // Upper end: smallest hi with P(N > hi) < tail.
    let mut lo_b = mean.floor() as u64;
    let mut hi_b = (mean + 10.0 * sd + 40.0).ceil() as u64;
    while dist.sf(hi_b) >= tail {
        hi_b *= 2;
    }
    while lo_b < hi_b {
        let mid = lo_b + (hi_b - lo_b) / 2;
        if dist.sf(mid) < tail {
            hi_b = mid;
        } else {
            lo_b = mid + 1;
        }
    }
    let hi = hi_b;
    // Lower end: largest lo with P(N < lo) < tail.
    let mut a = 0u64;
    let mut b = mean.floor() as u64;
    if b == 0 || dist.cdf(0) >= tail {
        return (0, hi);
    }
    // invariant: P(N < a) < tail, search for the largest such a in [0, b]
    while a < b {
        let mid = a + (b - a).div_ceil(2);
        if dist.cdf(mid - 1) < tail {
            a = mid;
        } else {
            b = mid - 1;
        }
    }
    (a, hi)
}

/// Gauss–Hermite rule for the weight `exp(-x^2)` with `n` nodes.
///
/// Newton iteration on the orthonormal Hermite recurrence with the usual
/// asymptotic starting guesses. Nodes are returned in decreasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Hermite rule needs at least one node");
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

/// Nodes and weights integrating against the normal law `N(0, variance)`.
/// Weights sum to one.
pub fn gauss_hermite_normal(n: usize, variance: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let scale = (2.0 * variance).sqrt();
    let norm = std::f64::consts::PI.sqrt();
    (
        x.into_iter().map(|xi| xi * scale).collect(),
        w.into_iter().map(|wi| wi / norm).collect(),
    )
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 1..=n {
                let jf = j as f64;
                let p3 = p2;
                p2 = p1;
                p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss–Legendre integral of a smooth function over `[a, b]`.
pub fn integrate<T, F>(f: F, a: f64, b: f64, panels: usize) -> T
where
    T: std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + Default,
    F: Fn(f64) -> T,
{
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    let (x, w) = RULE.get_or_init(|| gauss_legendre(20));
    let h = (b - a) / panels as f64;
    let mut total = T::default();
    for k in 0..panels {
        let mid = a + (k as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(w) {
            total = total + f(mid + 0.5 * h * xi) * (0.5 * h * wi);
        }
    }
    total
}
