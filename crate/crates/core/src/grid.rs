//! Uniform phase-space grids, their file formats, and periodic Gaussian
//! smoothing through the discrete Fourier transform.

use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_f64;

/// Normalization tolerance for densities sampled on a grid.
pub const GRID_TOL: f64 = 1e-4;

/// Samples on `q_i = q_min + i dq` (`i < nq`, `dq = (q_max - q_min)/nq`) and
/// likewise for `p`; the upper edge is excluded so the grid is periodic.
/// Values are row-major in `q`: `values[i * np + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpaceGrid {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nq: usize,
    pub np: usize,
    pub values: Vec<f64>,
}

/// Grid geometry without values; the JSON header of the binary format.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub nq: usize,
    pub np: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            q_min: -8.0,
            q_max: 8.0,
            p_min: -8.0,
            p_max: 8.0,
            nq: 256,
            np: 256,
        }
    }
}

impl GridSpec {
    pub fn square(half_width: f64, n: usize) -> Self {
        Self {
            q_min: -half_width,
            q_max: half_width,
            p_min: -half_width,
            p_max: half_width,
            nq: n,
            np: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.q_min, self.q_max, self.p_min, self.p_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.q_max <= self.q_min
            || self.p_max <= self.p_min
            || self.nq < 2
            || self.np < 2
        {
            return Err(Error::Format(format!("invalid grid geometry {self:?}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinaryHeader {
    format: String,
    q_min: f64,
    q_max: f64,
    p_min: f64,
    p_max: f64,
    nq: usize,
    np: usize,
}

const BINARY_TAG: &str = "eightport-grid-f64le";

impl PhaseSpaceGrid {
    pub fn zeros(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::with_values(spec, vec![0.0; spec.nq * spec.np]))
    }

    fn with_values(spec: GridSpec, values: Vec<f64>) -> Self {
        Self {
            q_min: spec.q_min,
            q_max: spec.q_max,
            p_min: spec.p_min,
            p_max: spec.p_max,
            nq: spec.nq,
            np: spec.np,
            values,
        }
    }

    /// Evaluates `f(q, p)` at every node, in parallel over rows.
    pub fn from_fn<F>(spec: GridSpec, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> f64 + Sync,
    {
        let mut g = Self::zeros(spec)?;
        let (dq, dp) = (g.dq(), g.dp());
        g.values
            .par_chunks_mut(spec.np)
            .enumerate()
            .for_each(|(i, row)| {
                let q = spec.q_min + i as f64 * dq;
                for (j, v) in row.iter_mut().enumerate() {
                    *v = f(q, spec.p_min + j as f64 * dp);
                }
            });
        Ok(g)
    }

    /// Fallible variant of [`from_fn`](Self::from_fn); the first error in row order wins.
    pub fn try_from_fn<F>(spec: GridSpec, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> Result<f64> + Sync,
    {
        let g = Self::zeros(spec)?;
        let (dq, dp) = (g.dq(), g.dp());
        let rows: Vec<Result<Vec<f64>>> = (0..spec.nq)
            .into_par_iter()
            .map(|i| {
                (0..spec.np)
                    .map(|j| f(spec.q_min + i as f64 * dq, spec.p_min + j as f64 * dp))
                    .collect()
            })
            .collect();
        let mut values = Vec::with_capacity(spec.nq * spec.np);
        for row in rows {
            values.extend(row?);
        }
        Ok(Self::with_values(spec, values))
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            q_min: self.q_min,
            q_max: self.q_max,
            p_min: self.p_min,
            p_max: self.p_max,
            nq: self.nq,
            np: self.np,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::with_values(self.spec(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn dq(&self) -> f64 {
        (self.q_max - self.q_min) / self.nq as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_max - self.p_min) / self.np as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dq() * self.dp()
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq()
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.np + j]
    }

    /// Riemann sum of the values.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_area()
    }

    /// Fails when the Riemann sum misses one by more than `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<f64> {
        let m = self.mass();
        if (m - 1.0).abs() > tol {
            return Err(Error::Format(format!(
                "grid mass {m} differs from 1 by more than {tol:e}"
            )));
        }
        Ok(m)
    }

    /// Largest absolute value on the outermost rows and columns.
    pub fn boundary_max(&self) -> f64 {
        let mut m = 0.0f64;
        for i in 0..self.nq {
            for j in 0..self.np {
                if i == 0 || j == 0 || i + 1 == self.nq || j + 1 == self.np {
                    m = m.max(self.get(i, j).abs());
                }
            }
        }
        m
    }

    /// Warning text when the density is still above `threshold` on the boundary.
    pub fn coverage_warning(&self, threshold: f64) -> Option<String> {
        let b = self.boundary_max();
        (b > threshold).then(|| {
            format!(
                "grid does not cover the density: boundary value {b:.3e} exceeds {threshold:.1e}"
            )
        })
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.spec() != other.spec() {
            return Err(Error::Format("grids have different geometry".into()));
        }
        Ok(())
    }

    pub fn sup_distance(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.cell_area())
    }

    /// `||self - other||_2 / ||other||_2`.
    pub fn relative_l2(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        let num: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = other.values.iter().map(|b| b * b).sum();
        Ok((num / den).sqrt())
    }

    /// CSV with header `q,p,value`, rows in storage order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["q", "p", "value"])?;
        for i in 0..self.nq {
            for j in 0..self.np {
                out.write_record([
                    fmt_f64(self.q(i)),
                    fmt_f64(self.p(j)),
                    fmt_f64(self.get(i, j)),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Blank-line separated blocks of `q p value`, one block per `q` row.
    pub fn write_plot_data<W: Write>(&self, mut w: W) -> Result<()> {
        for i in 0..self.nq {
            for j in 0..self.np {
                writeln!(
                    w,
                    "{} {} {}",
                    fmt_f64(self.q(i)),
                    fmt_f64(self.p(j)),
                    fmt_f64(self.get(i, j))
                )?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Reads a `q,p,value` CSV (lines starting with `#` are skipped). The
    /// nodes must form a complete uniform grid; any row order is accepted.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().map(str::trim).collect::<Vec<_>>() != ["q", "p", "value"] {
            return Err(Error::Format(format!(
                "expected header q,p,value, found {headers:?}"
            )));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| Error::Format("short CSV row".into()))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad number: {e}")))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        let qs = uniform_axis(rows.iter().map(|r| r.0))?;
        let ps = uniform_axis(rows.iter().map(|r| r.1))?;
        if rows.len() != qs.1 * ps.1 {
            return Err(Error::Format(format!(
                "{} rows cannot fill a {}x{} grid",
                rows.len(),
                qs.1,
                ps.1
            )));
        }
        let spec = GridSpec {
            q_min: qs.0,
            q_max: qs.0 + qs.2 * qs.1 as f64,
            p_min: ps.0,
            p_max: ps.0 + ps.2 * ps.1 as f64,
            nq: qs.1,
            np: ps.1,
        };
        spec.validate()?;
        let mut values = vec![f64::NAN; spec.nq * spec.np];
        for (q, p, v) in rows {
            let i = ((q - qs.0) / qs.2).round() as usize;
            let j = ((p - ps.0) / ps.2).round() as usize;
            values[i * spec.np + j] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("grid has duplicate or missing nodes".into()));
        }
        Ok(Self::with_values(spec, values))
    }

    /// One JSON header line, then `nq * np` little-endian `f64` values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = BinaryHeader {
            format: BINARY_TAG.into(),
            q_min: self.q_min,
            q_max: self.q_max,
            p_min: self.p_min,
            p_max: self.p_max,
            nq: self.nq,
            np: self.np,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: BinaryHeader = serde_json::from_str(line.trim_end())?;
        if header.format != BINARY_TAG {
            return Err(Error::Format(format!(
                "unknown grid format {:?}",
                header.format
            )));
        }
        let spec = GridSpec {
            q_min: header.q_min,
            q_max: header.q_max,
            p_min: header.p_min,
            p_max: header.p_max,
            nq: header.nq,
            np: header.np,
        };
        spec.validate()?;
        let n = spec.nq * spec.np;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after grid payload".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self::with_values(spec, values))
    }

    /// Reads either format, detected from the first byte (`{` means binary).
    pub fn read_any<R: BufRead>(mut r: R) -> Result<Self> {
        let first = r.fill_buf()?.first().copied();
        match first {
            Some(b'{') => Self::read_binary(r),
            _ => Self::read_csv(r),
        }
    }
}

/// `(min, count, step)` of a uniform axis given the coordinates of all nodes.
fn uniform_axis(coords: impl Iterator<Item = f64>) -> Result<(f64, usize, f64)> {
    let mut v: Vec<f64> = coords.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
    if v.len() < 2 {
        return Err(Error::Format("grid axis needs at least two nodes".into()));
    }
    let step = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
    for (k, x) in v.iter().enumerate() {
        if (x - (v[0] + k as f64 * step)).abs() > 1e-6 * step {
            return Err(Error::Format("grid axis is not uniform".into()));
        }
    }
    Ok((v[0], v.len(), step))
}

/// Signed angular frequencies `2 pi k / (n d)` in FFT order.
pub fn fft_frequencies(n: usize, d: f64) -> Vec<f64> {
    let scale = std::f64::consts::TAU / (n as f64 * d);
    (0..n).map(|k| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 } * scale).collect()
}

/// In-place 2-D transform of a row-major `nq x np` array.
pub fn fft2(data: &mut [Complex64], nq: usize, np: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(np), planner.plan_fft_inverse(nq))
    } else {
        (planner.plan_fft_forward(np), planner.plan_fft_forward(nq))
    };
    data.par_chunks_mut(np).for_each(|row| row_fft.process(row));
    let mut cols: Vec<Vec<Complex64>> = (0..np)
        .into_par_iter()
        .map(|j| (0..nq).map(|i| data[i * np + j]).collect())
        .collect();
    cols.par_iter_mut().for_each(|c| col_fft.process(c));
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            data[i * np + j] = *v;
        }
    }
    if inverse {
        let norm = 1.0 / (nq * np) as f64;
        data.iter_mut().for_each(|v| *v *= norm);
    }
}

/// Multiplies the grid's DFT by `transfer(k_q, k_p)` and transforms back.
/// The grid is treated as periodic.
pub fn apply_transfer<F>(g: &PhaseSpaceGrid, transfer: F) -> PhaseSpaceGrid
where
    F: Fn(f64, f64) -> Complex64 + Sync,
{
    let (nq, np) = (g.nq, g.np);
    let mut data: Vec<Complex64> = g.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut data, nq, np, false);
    let kq = fft_frequencies(nq, g.dq());
    let kp = fft_frequencies(np, g.dp());
    data.par_chunks_mut(np).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v *= transfer(kq[i], kp[j]);
        }
    });
    fft2(&mut data, nq, np, true);
    PhaseSpaceGrid::with_values(g.spec(), data.into_iter().map(|v| v.re).collect())
}

/// Periodic convolution with a centred Gaussian of per-axis variances
/// `(var_q, var_p)`; a zero variance leaves that axis untouched.
pub fn gaussian_smooth(g: &PhaseSpaceGrid, var_q: f64, var_p: f64) -> PhaseSpaceGrid {
    if var_q == 0.0 && var_p == 0.0 {
        return g.clone();
    }
    apply_transfer(g, |a, b| {
        Complex64::new((-0.5 * (var_q * a * a + var_p * b * b)).exp(), 0.0)
    })
}
