//! Shared numerical kernels: matrix exponential, dense solves, DFT,
//! cubic-spline resampling and seeded random number generation.
//!
//! Dense real/complex matrices are `nalgebra` dynamic matrices throughout the
//! crate; the linear-algebra entry points here add the tolerance and error
//! semantics the identification pipeline relies on. Transforms use `rustfft`
//! with the convention of an unnormalized forward transform and a `1/N`
//! inverse, so spectra match the textbook `X(k) = sum_n x(n) e^{-j2pi kn/N}`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use once_cell::sync::Lazy;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use sha2::{Digest, Sha256};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Dense real matrix.
pub type Mat = DMatrix<f64>;
/// Dense complex matrix.
pub type CMat = DMatrix<Complex64>;
/// Dense real vector.
pub type Vecf = DVector<f64>;
/// Dense complex vector.
pub type CVec = DVector<Complex64>;

/// Relative pivot threshold below which a system is treated as singular.
pub const RANK_TOL: f64 = 1e-12;

fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Matrix exponential via scaling-and-squaring with Padé approximants.
pub fn matexp(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matexp needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m) {
        return Err(Error::Dimension("matexp input has non-finite entries".into()));
    }
    Ok(m.exp())
}

/// Solves `A X = B` for square nonsingular `A` by LU with partial pivoting.
pub fn solve(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "solve: A is {}x{} but B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let max_pivot = (0..a.nrows()).map(|i| u[(i, i)].abs()).fold(0.0_f64, f64::max);
    let min_pivot = (0..a.nrows()).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if min_pivot <= RANK_TOL * max_pivot {
        return Err(Error::Singular { pivot: min_pivot });
    }
    lu.solve(b).ok_or(Error::Singular { pivot: min_pivot })
}

/// Complex variant of [`solve`], used for per-line frequency-domain systems.
pub fn solve_c(a: &CMat, b: &CMat) -> Result<CMat> {
    if !a.is_square() || a.nrows() != b.nrows() {
        return Err(Error::Dimension("solve_c: incompatible shapes".into()));
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let max_pivot = (0..a.nrows()).map(|i| u[(i, i)].norm()).fold(0.0_f64, f64::max);
    let min_pivot = (0..a.nrows())
        .map(|i| u[(i, i)].norm())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= RANK_TOL * max_pivot {
        return Err(Error::Singular { pivot: min_pivot });
    }
    lu.solve(b).ok_or(Error::Singular { pivot: min_pivot })
}

/// Least-squares minimizer of `||A x - b||^2` via Householder QR.
///
/// `A` must have at least as many rows as columns and full column rank to
/// the relative tolerance [`RANK_TOL`].
pub fn lstsq(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.nrows() < a.ncols() {
        return Err(Error::Dimension(format!(
            "lstsq needs rows >= cols, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "lstsq: A is {}x{} but b has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let qr = a.clone().qr();
    let r = qr.r();
    let max_diag = (0..a.ncols()).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    let min_diag = (0..a.ncols())
        .map(|i| r[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_diag <= RANK_TOL * max_diag {
        return Err(Error::RankDeficient { pivot: min_diag });
    }
    let qtb = qr.q().transpose() * b;
    r.solve_upper_triangular(&qtb)
        .ok_or(Error::RankDeficient { pivot: min_diag })
}

static FFT_PLANNER: Lazy<Mutex<FftPlanner<f64>>> = Lazy::new(|| Mutex::new(FftPlanner::new()));

fn plan(n: usize, inverse: bool) -> Arc<dyn rustfft::Fft<f64>> {
    let mut planner = FFT_PLANNER.lock().expect("fft planner poisoned");
    if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    }
}

/// Forward DFT of a complex sequence, `X(k) = sum_n x(n) e^{-j2pi kn/N}`.
pub fn dft(x: &[Complex64]) -> Vec<Complex64> {
    let mut buf = x.to_vec();
    if buf.len() > 1 {
        plan(buf.len(), false).process(&mut buf);
    }
    buf
}

/// Forward DFT of a real sequence.
pub fn dft_real(x: &[f64]) -> Vec<Complex64> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft(&buf)
}

/// Inverse DFT with `1/N` normalization, so `idft(dft(x)) == x`.
pub fn idft(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    let mut buf = x.to_vec();
    if n > 1 {
        plan(n, true).process(&mut buf);
    }
    let scale = 1.0 / n as f64;
    for v in &mut buf {
        *v *= scale;
    }
    buf
}

/// Natural cubic spline interpolation onto a `factor`-times-denser grid.
///
/// The spline passes through the `L` input samples at unit spacing and is
/// evaluated at `t = i / factor` for `i = 0 .. (L-1)*factor`, so the output
/// has `(L-1)*factor + 1` samples and reproduces the inputs exactly at the
/// integer grid points.
pub fn resample_spline(x: &[f64], factor: usize) -> Result<Vec<f64>> {
    if x.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "spline resampling needs at least 4 samples, got {}",
            x.len()
        )));
    }
    if factor == 0 {
        return Err(Error::Design("resampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.to_vec());
    }
    let m = spline_second_derivatives(x);
    let l = x.len();
    let n_out = (l - 1) * factor + 1;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let t = i as f64 / factor as f64;
        let seg = (t.floor() as usize).min(l - 2);
        let s = t - seg as f64;
        out.push(spline_eval(x, &m, seg, s));
    }
    Ok(out)
}

/// Second derivatives of the natural cubic spline through unit-spaced samples.
fn spline_second_derivatives(x: &[f64]) -> Vec<f64> {
    let l = x.len();
    let mut m = vec![0.0; l];
    if l < 3 {
        return m;
    }
    // Thomas algorithm on the interior tridiagonal system
    // m[i-1] + 4 m[i] + m[i+1] = 6 (x[i+1] - 2 x[i] + x[i-1]).
    let k = l - 2;
    let mut diag = vec![4.0; k];
    let mut rhs: Vec<f64> = (1..l - 1)
        .map(|i| 6.0 * (x[i + 1] - 2.0 * x[i] + x[i - 1]))
        .collect();
    for i in 1..k {
        let w = 1.0 / diag[i - 1];
        diag[i] -= w;
        rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for i in (0..k - 1).rev() {
        m[i + 1] = (rhs[i] - m[i + 2]) / diag[i];
    }
    m
}

fn spline_eval(x: &[f64], m: &[f64], seg: usize, s: f64) -> f64 {
    let b = (x[seg + 1] - x[seg]) - (2.0 * m[seg] + m[seg + 1]) / 6.0;
    x[seg] + b * s + 0.5 * m[seg] * s * s + (m[seg + 1] - m[seg]) / 6.0 * s * s * s
}

/// Reproducible random number generator (ChaCha8 keyed from a 64-bit seed).
///
/// Identical seeds produce identical streams across runs and platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator algorithm tag.
    pub fn algorithm(&self) -> &'static str {
        "chacha8"
    }

    /// Derives an independent child generator from this generator's seed and
    /// a label, independent of how much of the parent stream was consumed.
    pub fn derive(&self, label: &str) -> SeededRng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        SeededRng::new(u64::from_le_bytes(bytes))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.random_range(lo..hi)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }
}
