//! Step III: joint frequency-domain optimization of all parameters
//! `theta = (theta_phys, beta)`.
//!
//! The cost is the weighted squared simulation error over frequency lines
//! `k = 0 .. N/2` plus a smoothed L1 penalty on the degree-one polynomial
//! coefficients. Each residual evaluation simulates the model through a
//! periodic warm-up of `N0` samples (initialized from the linear-model
//! state trajectory of the current iterate), discards the warm-up, and
//! compares output spectra.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::excite::{MultisineDataset, NoiseCovariances};
use crate::lmopt::{self, LmConfig, LmResult};
use crate::model::{NlLocation, NllfrModel, PolyNonlinearity, StructuredLtiSpec};
use crate::numkit::{self, CMat, CVec, Mat, Vecf};
use crate::slidewin::bla_state_trajectory;

/// Weighting mode for the per-line residuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Inverse sample noise covariance per line (needs `P > 1` estimates).
    NoiseCovariance,
    /// Diagonal inverse per-output spectral power per line; frequency-flat
    /// when a single record gives no scatter across realizations.
    OutputPower,
    /// Unit weighting.
    Unity,
}

/// Frozen data, weighting and penalty configuration for the final cost.
#[derive(Debug, Clone)]
pub struct FinalCostSpec {
    spec: StructuredLtiSpec,
    structure: Vec<(Vec<usize>, Vec<Vec<u32>>)>,
    t_s: f64,
    pub gamma: f64,
    pub n0: usize,
    n: usize,
    r: usize,
    n_y: usize,
    u: Vec<Mat>,
    /// Measured output spectra per realization and line `k = 0 ..= N/2`.
    y_spec: Vec<Vec<CVec>>,
    /// Square-root weight factor `L(k)` per line, `L^H L = W(k)`.
    pub l_factors: Vec<CMat>,
    /// Smoothing width of the L1 penalty.
    pub epsilon_l1: f64,
    n_params: usize,
}

fn hermitian_inv_sqrt(m: &CMat, floor: f64) -> Result<CMat> {
    let n = m.nrows();
    if n == 1 {
        let v = m[(0, 0)].re.max(floor);
        return Ok(CMat::from_element(1, 1, Complex64::new(1.0 / v.sqrt(), 0.0)));
    }
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = nalgebra::SymmetricEigen::new(herm);
    let mut scaled = eig.eigenvectors.clone();
    for (j, lam) in eig.eigenvalues.iter().enumerate() {
        let inv_sqrt = 1.0 / lam.max(floor).sqrt();
        scaled
            .column_mut(j)
            .scale_mut(inv_sqrt);
    }
    Ok(&scaled * eig.eigenvectors.adjoint())
}

impl FinalCostSpec {
    /// Builds the cost for an averaged dataset and an initial model.
    ///
    /// `weighting = NoiseCovariance` requires `noise_cov` with
    /// `available = true`; `OutputPower` derives diagonal weights from the
    /// measured spectra themselves.
    pub fn new(
        ds: &MultisineDataset,
        initial: &NllfrModel,
        noise_cov: Option<&NoiseCovariances>,
        weighting: Weighting,
        gamma: f64,
        n0: usize,
    ) -> Result<Self> {
        if ds.p != 1 {
            return Err(Error::Compatibility(
                "final optimization expects a period-averaged dataset (P = 1)".into(),
            ));
        }
        if gamma < 0.0 {
            return Err(Error::Config(format!("gamma = {gamma} must be >= 0")));
        }
        let n_y = ds.n_y();
        if n_y != initial.spec.n_y || ds.n_u() != initial.spec.n_u {
            return Err(Error::Compatibility(
                "dataset channels do not match the model".into(),
            ));
        }
        let n = ds.n;
        let half = n / 2;

        let mut u = Vec::with_capacity(ds.r);
        let mut y_spec = Vec::with_capacity(ds.r);
        for r in 0..ds.r {
            u.push(ds.u_mat(r, 0).clone());
            let per_ch: Vec<Vec<Complex64>> = (0..n_y)
                .map(|ch| numkit::dft_real(&ds.y_series(r, 0, ch)))
                .collect();
            let lines: Vec<CVec> = (0..=half)
                .map(|k| CVec::from_fn(n_y, |ch, _| per_ch[ch][k]))
                .collect();
            y_spec.push(lines);
        }

        let l_factors = match weighting {
            Weighting::Unity => vec![CMat::identity(n_y, n_y); half + 1],
            Weighting::NoiseCovariance => {
                let cov = noise_cov
                    .filter(|c| c.available)
                    .ok_or_else(|| Error::Compatibility(
                        "noise-covariance weighting requested but no estimate is available".into(),
                    ))?;
                if cov.freq_cov.len() != half + 1 {
                    return Err(Error::Dimension(
                        "frequency covariance line count does not match the dataset".into(),
                    ));
                }
                let max_diag = cov
                    .freq_cov
                    .iter()
                    .flat_map(|m| (0..n_y).map(move |i| m[(i, i)].re))
                    .fold(0.0_f64, f64::max);
                let floor = (1e-12 * max_diag).max(f64::MIN_POSITIVE);
                cov.freq_cov
                    .iter()
                    .map(|m| hermitian_inv_sqrt(m, floor))
                    .collect::<Result<Vec<_>>>()?
            }
            Weighting::OutputPower => {
                // per-output, per-line mean power across realizations
                let mut var = vec![vec![0.0; half + 1]; n_y];
                for lines in &y_spec {
                    for (k, y_k) in lines.iter().enumerate() {
                        for ch in 0..n_y {
                            var[ch][k] += y_k[ch].norm_sqr();
                        }
                    }
                }
                for ch_var in var.iter_mut() {
                    for v in ch_var.iter_mut() {
                        *v /= ds.r as f64;
                    }
                }
                if ds.r < 2 {
                    // no scatter: frequency-flat per-output mean power over
                    // the excited lines
                    for ch_var in var.iter_mut() {
                        let mut acc = 0.0;
                        for &k in &ds.excited_lines {
                            acc += ch_var[k.min(half)];
                        }
                        let flat = acc / ds.excited_lines.len() as f64;
                        for v in ch_var.iter_mut() {
                            *v = flat;
                        }
                    }
                }
                (0..=half)
                    .map(|k| {
                        CMat::from_fn(n_y, n_y, |i, j| {
                            if i == j {
                                let max_v = var[i].iter().copied().fold(0.0_f64, f64::max);
                                let floor = (1e-12 * max_v).max(f64::MIN_POSITIVE);
                                Complex64::new(1.0 / var[i][k].max(floor).sqrt(), 0.0)
                            } else {
                                Complex64::new(0.0, 0.0)
                            }
                        })
                    })
                    .collect()
            }
        };

        let structure: Vec<(Vec<usize>, Vec<Vec<u32>>)> = initial
            .nonlinearity
            .locations
            .iter()
            .map(|l| (l.z_indices.clone(), l.monomials.clone()))
            .collect();
        let n_params = initial.theta_phys.len()
            + structure.iter().map(|(_, m)| m.len()).sum::<usize>();

        let beta1 = extract_beta1(initial);
        let rms = if beta1.is_empty() {
            0.0
        } else {
            (beta1.norm_squared() / beta1.len() as f64).sqrt()
        };
        let epsilon_l1 = if rms > 0.0 { 1e-8 * rms } else { 1e-8 };

        Ok(Self {
            spec: initial.spec.clone(),
            structure,
            t_s: initial.t_s,
            gamma,
            n0,
            n,
            r: ds.r,
            n_y,
            u,
            y_spec,
            l_factors,
            epsilon_l1,
            n_params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.spec.param_names().to_vec();
        for (i, (_, monomials)) in self.structure.iter().enumerate() {
            for m in monomials {
                names.push(format!("beta{}_{}", i + 1, m.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("")));
            }
        }
        names
    }

    /// Flattens a model into the optimization vector
    /// `[theta_phys | beta_1 | beta_2 | ...]`.
    pub fn pack(&self, model: &NllfrModel) -> Vecf {
        let mut v: Vec<f64> = model.theta_phys.clone();
        for loc in &model.nonlinearity.locations {
            v.extend(loc.beta.iter());
        }
        Vecf::from_vec(v)
    }

    /// Rebuilds `(theta_phys, nonlinearity)` from an optimization vector.
    pub fn unpack(&self, theta: &Vecf) -> Result<(Vec<f64>, PolyNonlinearity)> {
        if theta.len() != self.n_params {
            return Err(Error::Dimension(format!(
                "parameter vector has {} entries, expected {}",
                theta.len(),
                self.n_params
            )));
        }
        let n_phys = self.spec.param_names().len();
        let theta_phys: Vec<f64> = theta.iter().take(n_phys).copied().collect();
        let mut offset = n_phys;
        let mut locations = Vec::with_capacity(self.structure.len());
        for (z_indices, monomials) in &self.structure {
            let n_phi = monomials.len();
            let beta = Vecf::from_fn(n_phi, |j, _| theta[offset + j]);
            offset += n_phi;
            locations.push(NlLocation {
                z_indices: z_indices.clone(),
                monomials: monomials.clone(),
                beta,
            });
        }
        Ok((theta_phys, PolyNonlinearity::new(locations)?))
    }

    /// Degree-one coefficient slice of an optimization vector.
    fn beta1_of(&self, theta: &Vecf) -> Vecf {
        let n_phys = self.spec.param_names().len();
        let mut vals = Vec::new();
        let mut offset = n_phys;
        for (_, monomials) in &self.structure {
            for (j, m) in monomials.iter().enumerate() {
                if m.iter().sum::<u32>() == 1 {
                    vals.push(theta[offset + j]);
                }
            }
            offset += monomials.len();
        }
        Vecf::from_vec(vals)
    }

    /// Weighted, scaled simulation residuals stacked over realizations and
    /// lines `k = 0 ..= N/2` (real and imaginary parts; the two real-valued
    /// edge lines contribute real parts only).
    pub fn simulation_residuals(&self, theta: &Vecf) -> Result<Vecf> {
        let (theta_phys, nl) = self.unpack(theta)?;
        let model = NllfrModel::new(self.spec.clone(), theta_phys, nl, self.t_s)?;
        let half = self.n / 2;
        let scale = 1.0 / ((self.r * self.n) as f64).sqrt();
        let mut res =
            Vec::with_capacity(self.r * (2 * (half + 1) * self.n_y));
        for r in 0..self.r {
            let u = &self.u[r];
            let x_bla = bla_state_trajectory(model.discrete(), u)?;
            let start = (self.n - self.n0 % self.n) % self.n;
            let x0 = Vecf::from_fn(model.discrete().n_x(), |i, _| x_bla[(start, i)]);
            let traj = model.steady_state_periodic(u, &x0, self.n0)?;
            let y_hat_spec: Vec<Vec<Complex64>> = (0..self.n_y)
                .map(|ch| numkit::dft_real(traj.y.column(ch).as_slice()))
                .collect();
            for k in 0..=half {
                let e = CVec::from_fn(self.n_y, |ch, _| {
                    self.y_spec[r][k][ch] - y_hat_spec[ch][k]
                });
                let s = &self.l_factors[k] * e * Complex64::new(scale, 0.0);
                for ch in 0..self.n_y {
                    res.push(s[ch].re);
                }
                if k != 0 && k != half {
                    for ch in 0..self.n_y {
                        res.push(s[ch].im);
                    }
                }
            }
        }
        Ok(Vecf::from_vec(res))
    }

    /// Full residual vector: simulation residuals plus the smoothed L1
    /// pseudo-residuals on the degree-one coefficients.
    pub fn residuals(&self, theta: &Vecf) -> Result<Vecf> {
        let sim = self.simulation_residuals(theta)?;
        let l1 = lmopt::smoothed_l1_residuals(&self.beta1_of(theta), self.gamma, self.epsilon_l1);
        if l1.is_empty() {
            return Ok(sim);
        }
        let mut v: Vec<f64> = sim.iter().copied().collect();
        v.extend(l1.iter());
        Ok(Vecf::from_vec(v))
    }

    /// Pooled training-output NRMSE of a model described by `theta`.
    pub fn output_nrmse(&self, theta: &Vecf) -> Result<f64> {
        let (theta_phys, nl) = self.unpack(theta)?;
        let model = NllfrModel::new(self.spec.clone(), theta_phys, nl, self.t_s)?;
        let half = self.n / 2;
        let mut err_pow = 0.0;
        let mut ref_pow = 0.0;
        for r in 0..self.r {
            let u = &self.u[r];
            let x_bla = bla_state_trajectory(model.discrete(), u)?;
            let start = (self.n - self.n0 % self.n) % self.n;
            let x0 = Vecf::from_fn(model.discrete().n_x(), |i, _| x_bla[(start, i)]);
            let traj = model.steady_state_periodic(u, &x0, self.n0)?;
            for ch in 0..self.n_y {
                let y_hat = numkit::dft_real(traj.y.column(ch).as_slice());
                // measured spectrum is stored one-sided; compare in time domain
                // via Parseval over the full line set
                let mut e_full = 0.0;
                let mut y_full = 0.0;
                for k in 0..self.n {
                    let k_fold = if k <= half { k } else { self.n - k };
                    let y_meas = if k <= half {
                        self.y_spec[r][k_fold][ch]
                    } else {
                        self.y_spec[r][k_fold][ch].conj()
                    };
                    e_full += (y_meas - y_hat[k]).norm_sqr();
                    y_full += y_meas.norm_sqr();
                }
                err_pow += e_full;
                ref_pow += y_full;
            }
        }
        if ref_pow <= 0.0 {
            return Err(Error::Degenerate("zero-power reference output".into()));
        }
        Ok(100.0 * (err_pow / ref_pow).sqrt())
    }
}

/// Degree-one coefficients of a model's polynomial nonlinearity, stacked
/// over locations.
pub fn extract_beta1(model: &NllfrModel) -> Vecf {
    let mut vals = Vec::new();
    for loc in &model.nonlinearity.locations {
        for (j, m) in loc.monomials.iter().enumerate() {
            if m.iter().sum::<u32>() == 1 {
                vals.push(loc.beta[j]);
            }
        }
    }
    Vecf::from_vec(vals)
}

/// Result of the final optimization.
#[derive(Debug, Clone)]
pub struct FinalOptResult {
    pub model: NllfrModel,
    pub lm: LmResult,
    /// Training-output NRMSE per trace entry (initial point first).
    pub nrmse_trace: Vec<f64>,
}

/// Runs the dual-objective optimization from an initial model.
pub fn final_optimize(
    cost: &FinalCostSpec,
    initial: &NllfrModel,
    config: &LmConfig,
) -> Result<FinalOptResult> {
    let theta0 = cost.pack(initial);
    let problem = |theta: &Vecf| cost.residuals(theta);
    let lm = lmopt::lm_minimize(&problem, &theta0, config)?;
    let (theta_phys, nl) = cost.unpack(&lm.theta)?;
    let model = NllfrModel::new(initial.spec.clone(), theta_phys, nl, initial.t_s)?;
    let mut nrmse_trace = Vec::with_capacity(lm.trace.len());
    for it in &lm.trace {
        let theta = Vecf::from_column_slice(&it.theta);
        nrmse_trace.push(cost.output_nrmse(&theta)?);
    }
    Ok(FinalOptResult {
        model,
        lm,
        nrmse_trace,
    })
}
