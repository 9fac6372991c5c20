//! Step II-b: parametric modeling of the restoring force. Builds monomial
//! regressors from the inferred `(w_*, z_*)` samples and solves one ordinary
//! least-squares problem per nonlinearity location.
//!
//! Regressor columns are scaled to unit RMS before the solve and the
//! coefficients unscaled afterwards; high-degree monomials on small `z`
//! ranges are otherwise numerically unusable.

use crate::error::{Error, Result};
use crate::model::{NlLocation, NllfrModel, PolyNonlinearity, StructuredLtiSpec};
use crate::numkit::{self, Mat, Vecf};
use crate::slidewin::WzDataset;

/// Monomial structure of one nonlinearity location.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyLocationSpec {
    /// Indices into `z` selected for this location.
    pub z_indices: Vec<usize>,
    /// Exponent tuples over the selected components.
    pub monomials: Vec<Vec<u32>>,
}

/// Polynomial structure for all locations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolySpec {
    pub locations: Vec<PolyLocationSpec>,
    /// Require degree-one monomials (they absorb the linear-model bias and
    /// are penalized back to zero in the final step).
    pub bias_compensation: bool,
}

impl PolySpec {
    /// `[z, z^3]` on the first `z` component.
    pub fn odd3() -> Self {
        Self {
            locations: vec![PolyLocationSpec {
                z_indices: vec![0],
                monomials: vec![vec![1], vec![3]],
            }],
            bias_compensation: true,
        }
    }

    /// Odd monomials of degree <= 7 in `(z1, z2)` without cross-terms.
    pub fn odd7_nocross() -> Self {
        let mut monomials = Vec::new();
        for d in [1u32, 3, 5, 7] {
            monomials.push(vec![d, 0]);
        }
        for d in [1u32, 3, 5, 7] {
            monomials.push(vec![0, d]);
        }
        Self {
            locations: vec![PolyLocationSpec {
                z_indices: vec![0, 1],
                monomials,
            }],
            bias_compensation: true,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "odd3" => Ok(Self::odd3()),
            "odd7_nocross" => Ok(Self::odd7_nocross()),
            other => Err(Error::UnknownName(other.into())),
        }
    }

    pub fn validate(&self, n_z: usize) -> Result<()> {
        if self.locations.is_empty() {
            return Err(Error::Design("polynomial spec has no locations".into()));
        }
        for (i, loc) in self.locations.iter().enumerate() {
            if loc.z_indices.iter().any(|&zi| zi >= n_z) {
                return Err(Error::Dimension(format!(
                    "location {i} selects z index outside 0..{n_z}"
                )));
            }
            if loc.monomials.is_empty() {
                return Err(Error::Design(format!("location {i} has no monomials")));
            }
            for m in &loc.monomials {
                if m.len() != loc.z_indices.len() {
                    return Err(Error::Dimension(format!(
                        "location {i}: exponent tuple {m:?} does not match {} selected components",
                        loc.z_indices.len()
                    )));
                }
            }
            let mut seen = loc.monomials.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != loc.monomials.len() {
                return Err(Error::Identifiability {
                    location: i,
                    monomial: "duplicate exponent tuple".into(),
                });
            }
            if self.bias_compensation
                && !loc.monomials.iter().any(|m| m.iter().sum::<u32>() == 1)
            {
                return Err(Error::Design(format!(
                    "location {i}: bias compensation requires a degree-one monomial"
                )));
            }
        }
        Ok(())
    }
}

/// Fitted nonlinearity plus per-location fit quality.
#[derive(Debug, Clone)]
pub struct BetaFit {
    pub nonlinearity: PolyNonlinearity,
    /// NRMSE of `beta^T phi(z_*)` against `w_*` per location, percent.
    pub fit_nrmse: Vec<f64>,
    /// Pooled over locations, percent.
    pub pooled_nrmse: f64,
}

fn monomial_label(z_indices: &[usize], exps: &[u32]) -> String {
    let mut label = String::new();
    for (&zi, &e) in z_indices.iter().zip(exps) {
        if e == 0 {
            continue;
        }
        if !label.is_empty() {
            label.push('*');
        }
        label.push_str(&format!("z{}^{}", zi + 1, e));
    }
    if label.is_empty() {
        label.push('1');
    }
    label
}

/// Ordinary least squares for the polynomial coefficients, one independent
/// problem per location, aggregated over all realizations and samples.
pub fn fit_beta(wz: &WzDataset, spec: &PolySpec) -> Result<BetaFit> {
    spec.validate(wz.n_z)?;
    if spec.locations.len() != wz.n_w {
        return Err(Error::Dimension(format!(
            "{} polynomial locations for {} feedback channels",
            spec.locations.len(),
            wz.n_w
        )));
    }
    let rows = wz.rows();
    let mut locations = Vec::with_capacity(spec.locations.len());
    let mut fit_nrmse = Vec::with_capacity(spec.locations.len());
    let mut err_pow_total = 0.0;
    let mut ref_pow_total = 0.0;

    for (i, loc) in spec.locations.iter().enumerate() {
        let n_phi = loc.monomials.len();
        if rows < n_phi {
            return Err(Error::InsufficientData(format!(
                "{rows} samples for {n_phi} monomials at location {i}"
            )));
        }
        let mut phi = Mat::zeros(rows, n_phi);
        for row in 0..rows {
            for (j, exps) in loc.monomials.iter().enumerate() {
                let mut p = 1.0;
                for (&zi, &e) in loc.z_indices.iter().zip(exps) {
                    p *= wz.z[(row, zi)].powi(e as i32);
                }
                phi[(row, j)] = p;
            }
        }
        // standardize columns to unit RMS
        let mut scales = Vec::with_capacity(n_phi);
        for j in 0..n_phi {
            let rms = (phi.column(j).norm_squared() / rows as f64).sqrt();
            if !(rms > 0.0) || !rms.is_finite() {
                return Err(Error::Identifiability {
                    location: i,
                    monomial: monomial_label(&loc.z_indices, &loc.monomials[j]),
                });
            }
            scales.push(rms);
            let mut col = phi.column_mut(j);
            col /= rms;
        }
        let target = Mat::from_fn(rows, 1, |row, _| wz.w[(row, i)]);
        let beta_scaled = numkit::lstsq(&phi, &target).map_err(|e| match e {
            Error::RankDeficient { .. } => Error::Identifiability {
                location: i,
                monomial: "collinear regressor set".into(),
            },
            other => other,
        })?;
        let predicted = &phi * &beta_scaled;
        let beta = Vecf::from_fn(n_phi, |j, _| beta_scaled[(j, 0)] / scales[j]);

        let err_pow = (&target - &predicted).norm_squared();
        let ref_pow = target.norm_squared();
        if ref_pow <= 0.0 {
            return Err(Error::Degenerate(format!(
                "inferred force at location {i} has zero RMS"
            )));
        }
        fit_nrmse.push(100.0 * (err_pow / ref_pow).sqrt());
        err_pow_total += err_pow;
        ref_pow_total += ref_pow;

        locations.push(NlLocation {
            z_indices: loc.z_indices.clone(),
            monomials: loc.monomials.clone(),
            beta,
        });
    }

    Ok(BetaFit {
        nonlinearity: PolyNonlinearity::new(locations)?,
        fit_nrmse,
        pooled_nrmse: 100.0 * (err_pow_total / ref_pow_total).sqrt(),
    })
}

/// Assembles the fully initialized NL-LFR model from the Step-I parameters
/// and the fitted nonlinearity.
pub fn assemble_initial_model(
    spec: &StructuredLtiSpec,
    theta_phys: &[f64],
    nonlinearity: PolyNonlinearity,
    t_s: f64,
) -> Result<NllfrModel> {
    NllfrModel::new(spec.clone(), theta_phys.to_vec(), nonlinearity, t_s)
}

/// Writes `(z, w)` samples with fitted values for surface plots:
/// columns `z_1.., w_1..` plus `w_fit_1..` when a fit is given.
pub fn write_scatter_csv(
    wz: &WzDataset,
    fit: Option<&PolyNonlinearity>,
    path: &std::path::Path,
) -> Result<()> {
    let mut out = String::new();
    for c in 0..wz.n_z {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&format!("z_{}", c + 1));
    }
    for c in 0..wz.n_w {
        out.push_str(&format!(",w_{}", c + 1));
    }
    if fit.is_some() {
        for c in 0..wz.n_w {
            out.push_str(&format!(",w_fit_{}", c + 1));
        }
    }
    out.push('\n');
    for row in 0..wz.rows() {
        for c in 0..wz.n_z {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.16e}", wz.z[(row, c)]));
        }
        for c in 0..wz.n_w {
            out.push_str(&format!(",{:.16e}", wz.w[(row, c)]));
        }
        if let Some(nl) = fit {
            let z = Vecf::from_fn(wz.n_z, |i, _| wz.z[(row, i)]);
            let w = nl.eval(&z);
            for c in 0..wz.n_w {
                out.push_str(&format!(",{:.16e}", w[c]));
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
