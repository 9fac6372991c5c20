//! Multisine excitation design, dataset containers, period averaging,
//! output-noise injection, sample noise covariances and error metrics.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numkit::{self, CMat, Mat, SeededRng};

/// Random-phase multisine design: `u(n) = (2/sqrt(N)) sum_k U_k cos(2pi k n / N + phi_k)`
/// over the excited lines `k`, with phases drawn uniformly from `[0, 2pi)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultisineDesign {
    /// Samples per period (even).
    pub n: usize,
    /// Sampling frequency in Hz.
    pub f_s: f64,
    /// Excited frequency lines, each in `1 ..= n/2 - 1` (no DC, so the
    /// signal is zero-mean by construction).
    pub excited_lines: Vec<usize>,
    /// Amplitude per excited line, same order as `excited_lines`.
    pub amplitudes: Vec<f64>,
    /// RMS value the generated signal is scaled to.
    pub target_rms: f64,
    /// Seed provenance for the phase draws (recorded, not consumed here;
    /// callers seed the generator they pass to [`generate_multisine`]).
    pub phase_seed: u64,
}

impl MultisineDesign {
    /// Flat amplitude spectrum over all lines up to `band_hz`.
    pub fn flat_band(n: usize, f_s: f64, band_hz: f64, target_rms: f64, phase_seed: u64) -> Result<Self> {
        let f0 = f_s / n as f64;
        let k_max = ((band_hz / f0).floor() as usize).min(n / 2 - 1);
        Self::flat_lines(n, f_s, (1..=k_max).collect(), target_rms, phase_seed)
    }

    /// Flat amplitude spectrum over an explicit line set.
    pub fn flat_lines(
        n: usize,
        f_s: f64,
        excited_lines: Vec<usize>,
        target_rms: f64,
        phase_seed: u64,
    ) -> Result<Self> {
        let design = Self {
            n,
            f_s,
            amplitudes: vec![1.0; excited_lines.len()],
            excited_lines,
            target_rms,
            phase_seed,
        };
        design.validate()?;
        Ok(design)
    }

    pub fn f0(&self) -> f64 {
        self.f_s / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.n % 2 != 0 {
            return Err(Error::Design(format!("N = {} must be even and >= 4", self.n)));
        }
        if self.excited_lines.is_empty() {
            return Err(Error::Design("excited line set is empty".into()));
        }
        if self.amplitudes.len() != self.excited_lines.len() {
            return Err(Error::Design(format!(
                "{} amplitudes for {} excited lines",
                self.amplitudes.len(),
                self.excited_lines.len()
            )));
        }
        if self.excited_lines.iter().any(|&k| k == 0 || k >= self.n / 2) {
            return Err(Error::Design("excited lines must lie in 1 ..= N/2 - 1".into()));
        }
        if self.amplitudes.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Design("amplitudes must be non-negative".into()));
        }
        if self.amplitudes.iter().all(|&a| a == 0.0) {
            return Err(Error::Design("all amplitudes are zero".into()));
        }
        if !(self.target_rms > 0.0) {
            return Err(Error::Design(format!("target RMS {} must be positive", self.target_rms)));
        }
        Ok(())
    }
}

/// Generates one period of a random-phase multisine.
///
/// Amplitudes are rescaled by a phase-independent factor so the realized RMS
/// equals the target exactly (line orthogonality over one full period makes
/// the RMS amplitude-determined).
pub fn generate_multisine(design: &MultisineDesign, rng: &mut SeededRng) -> Result<Vec<f64>> {
    design.validate()?;
    let n = design.n;
    let nf = n as f64;
    // analytic RMS of (2/sqrt(N)) sum U_k cos(.): sqrt((2/N) sum U_k^2)
    let sum_sq: f64 = design.amplitudes.iter().map(|a| a * a).sum();
    let scale = design.target_rms / (2.0 * sum_sq / nf).sqrt();
    let phases: Vec<f64> = design
        .excited_lines
        .iter()
        .map(|_| rng.uniform(0.0, 2.0 * std::f64::consts::PI))
        .collect();
    let mut u = vec![0.0; n];
    for ((&k, &amp), &phi) in design
        .excited_lines
        .iter()
        .zip(&design.amplitudes)
        .zip(&phases)
    {
        let a = 2.0 / nf.sqrt() * amp * scale;
        let step = 2.0 * std::f64::consts::PI * k as f64 / nf;
        for (i, v) in u.iter_mut().enumerate() {
            *v += a * (step * i as f64 + phi).cos();
        }
    }
    Ok(u)
}

/// Input-output records over `R` realizations, `P` periods, `N` samples and
/// one or more channels. Periods of synthetically generated inputs are
/// identical copies (the input is applied via zero-order hold).
#[derive(Debug, Clone)]
pub struct MultisineDataset {
    pub n: usize,
    pub r: usize,
    pub p: usize,
    pub f_s: f64,
    pub excited_lines: Vec<usize>,
    pub u_labels: Vec<String>,
    pub y_labels: Vec<String>,
    /// `u[r][p]` is an `N x n_u` matrix.
    u: Vec<Vec<Mat>>,
    /// `y[r][p]` is an `N x n_y` matrix.
    y: Vec<Vec<Mat>>,
}

impl MultisineDataset {
    pub fn new(
        f_s: f64,
        excited_lines: Vec<usize>,
        u: Vec<Vec<Mat>>,
        y: Vec<Vec<Mat>>,
        u_labels: Vec<String>,
        y_labels: Vec<String>,
    ) -> Result<Self> {
        if u.is_empty() || u[0].is_empty() {
            return Err(Error::Design("dataset needs at least one realization and period".into()));
        }
        let r = u.len();
        let p = u[0].len();
        let n = u[0][0].nrows();
        let n_u = u[0][0].ncols();
        let n_y = y
            .first()
            .and_then(|pp| pp.first())
            .map(|m| m.ncols())
            .unwrap_or(0);
        if y.len() != r || y.iter().any(|pp| pp.len() != p) {
            return Err(Error::Dimension("u and y must share the [r][p] layout".into()));
        }
        for rr in 0..r {
            for pp in 0..p {
                if u[rr][pp].shape() != (n, n_u) || y[rr][pp].shape() != (n, n_y) {
                    return Err(Error::Dimension(format!(
                        "record ({rr},{pp}) has inconsistent shape"
                    )));
                }
            }
        }
        if u_labels.len() != n_u || y_labels.len() != n_y {
            return Err(Error::Dimension("channel label count mismatch".into()));
        }
        Ok(Self {
            n,
            r,
            p,
            f_s,
            excited_lines,
            u_labels,
            y_labels,
            u,
            y,
        })
    }

    pub fn n_u(&self) -> usize {
        self.u[0][0].ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y[0][0].ncols()
    }

    /// Input record of realization `r`, period `p` (`N x n_u`).
    pub fn u_mat(&self, r: usize, p: usize) -> &Mat {
        &self.u[r][p]
    }

    /// Output record of realization `r`, period `p` (`N x n_y`).
    pub fn y_mat(&self, r: usize, p: usize) -> &Mat {
        &self.y[r][p]
    }

    pub fn u_series(&self, r: usize, p: usize, ch: usize) -> Vec<f64> {
        self.u[r][p].column(ch).iter().copied().collect()
    }

    pub fn y_series(&self, r: usize, p: usize, ch: usize) -> Vec<f64> {
        self.y[r][p].column(ch).iter().copied().collect()
    }

    /// Replaces the outputs, keeping everything else.
    pub fn with_outputs(&self, y: Vec<Vec<Mat>>) -> Result<Self> {
        Self::new(
            self.f_s,
            self.excited_lines.clone(),
            self.u.clone(),
            y,
            self.u_labels.clone(),
            self.y_labels.clone(),
        )
    }
}

/// Averages the periods of each realization (`P` collapses to 1). Inputs are
/// averaged the same way, which is a no-op for noise-free ZOH inputs.
pub fn period_average(ds: &MultisineDataset) -> MultisineDataset {
    if ds.p == 1 {
        return ds.clone();
    }
    let avg = |records: &Vec<Vec<Mat>>| -> Vec<Vec<Mat>> {
        records
            .iter()
            .map(|periods| {
                let mut acc = periods[0].clone();
                for m in &periods[1..] {
                    acc += m;
                }
                vec![acc / periods.len() as f64]
            })
            .collect()
    };
    MultisineDataset {
        n: ds.n,
        r: ds.r,
        p: 1,
        f_s: ds.f_s,
        excited_lines: ds.excited_lines.clone(),
        u_labels: ds.u_labels.clone(),
        y_labels: ds.y_labels.clone(),
        u: avg(&ds.u),
        y: avg(&ds.y),
    }
}

/// Adds white Gaussian output noise sized for the requested SNR in dB
/// (`f64::INFINITY` leaves the data untouched). The per-channel noise
/// variance is `P_s * 10^(-SNR/10)` with `P_s` the channel's mean power
/// over all realizations, periods and samples.
pub fn add_noise_snr(ds: &MultisineDataset, snr_db: f64, rng: &mut SeededRng) -> Result<MultisineDataset> {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return Ok(ds.clone());
    }
    let n_y = ds.n_y();
    let total = (ds.r * ds.p * ds.n) as f64;
    let mut sigma = vec![0.0; n_y];
    for ch in 0..n_y {
        let power: f64 = (0..ds.r)
            .map(|r| {
                (0..ds.p)
                    .map(|p| ds.y[r][p].column(ch).iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
            })
            .sum::<f64>()
            / total;
        if power <= 0.0 {
            return Err(Error::Degenerate(format!("output channel {ch} has zero power")));
        }
        sigma[ch] = power.sqrt() * 10f64.powf(-snr_db / 20.0);
    }
    let mut y = ds.y.clone();
    for periods in y.iter_mut() {
        for m in periods.iter_mut() {
            for ch in 0..n_y {
                for i in 0..m.nrows() {
                    m[(i, ch)] += sigma[ch] * rng.standard_normal();
                }
            }
        }
    }
    ds.with_outputs(y)
}

/// Time- and frequency-domain sample noise covariances estimated from the
/// inter-period scatter (requires `P > 1`).
#[derive(Debug, Clone)]
pub struct NoiseCovariances {
    pub available: bool,
    /// `n_y x n_y`, averaged over all samples, realizations and periods.
    pub time_cov: Mat,
    /// Per frequency line `k = 0 ..= N/2`, each `n_y x n_y` Hermitian.
    pub freq_cov: Vec<CMat>,
}

/// Estimates the sample noise covariances.
///
/// Time domain: `1/(N R (P-1)) sum_{n,r,p} dev dev^T` with
/// `dev = y[r,p](n) - mean_p y[r,p](n)`. Frequency domain, per line:
/// `1/(R (P-1)) sum_{r,p} Dev(k) Dev(k)^H` on the unnormalized DFTs.
pub fn sample_noise_cov(ds: &MultisineDataset) -> NoiseCovariances {
    let n_y = ds.n_y();
    let half = ds.n / 2;
    if ds.p < 2 {
        return NoiseCovariances {
            available: false,
            time_cov: Mat::zeros(n_y, n_y),
            freq_cov: vec![CMat::zeros(n_y, n_y); half + 1],
        };
    }
    let mut time_cov = Mat::zeros(n_y, n_y);
    let mut freq_cov = vec![CMat::zeros(n_y, n_y); half + 1];
    for r in 0..ds.r {
        // per-realization period mean
        let mut mean = ds.y[r][0].clone();
        for p in 1..ds.p {
            mean += &ds.y[r][p];
        }
        mean /= ds.p as f64;
        // spectra of the mean, per channel
        let mean_spec: Vec<Vec<Complex64>> = (0..n_y)
            .map(|ch| numkit::dft_real(mean.column(ch).as_slice()))
            .collect();
        for p in 0..ds.p {
            let dev = &ds.y[r][p] - &mean;
            for i in 0..ds.n {
                for a in 0..n_y {
                    for b in 0..n_y {
                        time_cov[(a, b)] += dev[(i, a)] * dev[(i, b)];
                    }
                }
            }
            let dev_spec: Vec<Vec<Complex64>> = (0..n_y)
                .map(|ch| {
                    let spec = numkit::dft_real(ds.y[r][p].column(ch).as_slice());
                    spec.iter().zip(&mean_spec[ch]).map(|(s, m)| s - m).collect()
                })
                .collect();
            for (k, cov_k) in freq_cov.iter_mut().enumerate() {
                for a in 0..n_y {
                    for b in 0..n_y {
                        cov_k[(a, b)] += dev_spec[a][k] * dev_spec[b][k].conj();
                    }
                }
            }
        }
    }
    time_cov /= (ds.n * ds.r * (ds.p - 1)) as f64;
    let scale = 1.0 / (ds.r * (ds.p - 1)) as f64;
    for cov_k in freq_cov.iter_mut() {
        *cov_k *= Complex64::new(scale, 0.0);
    }
    NoiseCovariances {
        available: true,
        time_cov,
        freq_cov,
    }
}

/// Normalized RMS error in percent: `100 * RMS(ref - est) / RMS(ref)`.
pub fn nrmse(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Dimension(format!(
            "nrmse: reference has {} samples, estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_pow: f64 = reference.iter().map(|v| v * v).sum();
    if ref_pow <= 0.0 {
        return Err(Error::Degenerate("nrmse reference has zero RMS".into()));
    }
    let err_pow: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(100.0 * (err_pow / ref_pow).sqrt())
}

/// NRMSE pooled over all entries of matching matrices.
pub fn nrmse_mat(reference: &Mat, estimate: &Mat) -> Result<f64> {
    if reference.shape() != estimate.shape() {
        return Err(Error::Dimension("nrmse_mat: shape mismatch".into()));
    }
    let ref_pow = reference.iter().map(|v| v * v).sum::<f64>();
    if ref_pow <= 0.0 {
        return Err(Error::Degenerate("nrmse reference has zero RMS".into()));
    }
    let err_pow = (reference - estimate).iter().map(|v| v * v).sum::<f64>();
    Ok(100.0 * (err_pow / ref_pow).sqrt())
}

fn fmt_val(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Serialize, Deserialize)]
struct Channels {
    inputs: Vec<String>,
    outputs: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    n: usize,
    r: usize,
    p: usize,
    f_s: f64,
    excited_lines: Vec<usize>,
    channels: Channels,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<Value>,
}

/// Writes `manifest.json` plus one `data_r<r>.csv` per realization with
/// columns `n, p, u_1.., y_1..`; values carry 17 significant decimal digits
/// so they parse back bit-exactly.
pub fn save_dataset(ds: &MultisineDataset, dir: &Path, meta: Option<Value>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        n: ds.n,
        r: ds.r,
        p: ds.p,
        f_s: ds.f_s,
        excited_lines: ds.excited_lines.clone(),
        channels: Channels {
            inputs: ds.u_labels.clone(),
            outputs: ds.y_labels.clone(),
        },
        meta,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let n_u = ds.n_u();
    let n_y = ds.n_y();
    for r in 0..ds.r {
        let mut out = String::new();
        out.push_str("n,p");
        for c in 0..n_u {
            out.push_str(&format!(",u_{}", c + 1));
        }
        for c in 0..n_y {
            out.push_str(&format!(",y_{}", c + 1));
        }
        out.push('\n');
        for p in 0..ds.p {
            for i in 0..ds.n {
                out.push_str(&format!("{i},{p}"));
                for c in 0..n_u {
                    out.push(',');
                    out.push_str(&fmt_val(ds.u[r][p][(i, c)]));
                }
                for c in 0..n_y {
                    out.push(',');
                    out.push_str(&fmt_val(ds.y[r][p][(i, c)]));
                }
                out.push('\n');
            }
        }
        std::fs::write(dir.join(format!("data_r{r}.csv")), out)?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
///
/// Per-channel sample means are subtracted on ingestion so that measured
/// records satisfy the zero-mean convention; synthetically generated data
/// are already zero-mean up to rounding.
pub fn load_dataset(dir: &Path) -> Result<(MultisineDataset, Option<Value>)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(
        |e| Error::FileFormat {
            path: manifest_path.display().to_string(),
            detail: e.to_string(),
        },
    )?)?;
    let n_u = manifest.channels.inputs.len();
    let n_y = manifest.channels.outputs.len();
    let mut u = Vec::with_capacity(manifest.r);
    let mut y = Vec::with_capacity(manifest.r);
    for r in 0..manifest.r {
        let path = dir.join(format!("data_r{r}.csv"));
        let text = std::fs::read_to_string(&path).map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut u_r = vec![Mat::zeros(manifest.n, n_u); manifest.p];
        let mut y_r = vec![Mat::zeros(manifest.n, n_y); manifest.p];
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + n_u + n_y {
                return Err(Error::FileFormat {
                    path: path.display().to_string(),
                    detail: format!("line {}: expected {} fields, got {}", lineno + 1, 2 + n_u + n_y, fields.len()),
                });
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim().parse().map_err(|_| Error::FileFormat {
                    path: path.display().to_string(),
                    detail: format!("line {}: bad number `{s}`", lineno + 1),
                })
            };
            let i = parse(fields[0])? as usize;
            let p = parse(fields[1])? as usize;
            if i >= manifest.n || p >= manifest.p {
                return Err(Error::FileFormat {
                    path: path.display().to_string(),
                    detail: format!("line {}: index out of range", lineno + 1),
                });
            }
            for c in 0..n_u {
                u_r[p][(i, c)] = parse(fields[2 + c])?;
            }
            for c in 0..n_y {
                y_r[p][(i, c)] = parse(fields[2 + n_u + c])?;
            }
        }
        u.push(u_r);
        y.push(y_r);
    }
    // zero-mean convention
    let total = (manifest.r * manifest.p * manifest.n) as f64;
    for (records, ch_count) in [(&mut u, n_u), (&mut y, n_y)] {
        for c in 0..ch_count {
            let mean: f64 = records
                .iter()
                .flat_map(|pp| pp.iter())
                .map(|m| m.column(c).sum())
                .sum::<f64>()
                / total;
            for pp in records.iter_mut() {
                for m in pp.iter_mut() {
                    for i in 0..m.nrows() {
                        m[(i, c)] -= mean;
                    }
                }
            }
        }
    }
    let ds = MultisineDataset::new(
        manifest.f_s,
        manifest.excited_lines,
        u,
        y,
        manifest.channels.inputs,
        manifest.channels.outputs,
    )?;
    Ok((ds, manifest.meta))
}
