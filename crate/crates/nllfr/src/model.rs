//! NL-LFR model representation.
//!
//! A model is a structured LTI block in feedback with a static polynomial
//! nonlinearity `w = f(z)`. The LTI part is built from physical parameters
//! `theta_phys` by a spec-supplied structure callback, discretized with a
//! zero-order hold, and simulated in discrete time with periodic
//! steady-state initialization.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, CMat, Mat, Vecf};

/// Continuous-time NL-LFR matrices produced by a structure callback.
#[derive(Debug, Clone)]
pub struct ContinuousLinear {
    pub a: Mat,
    pub b_u: Mat,
    pub b_w: Mat,
    pub c_y: Mat,
    pub c_z: Mat,
    pub d_yu: Mat,
    pub d_yw: Mat,
}

type BuildFn = dyn Fn(&[f64]) -> Result<ContinuousLinear> + Send + Sync;

/// Known ODE structure: a deterministic mapping from physical parameters to
/// continuous-time NL-LFR matrices with fixed sparsity.
#[derive(Clone)]
pub struct StructuredLtiSpec {
    name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
    pub n_z: usize,
    param_names: Vec<String>,
    build: Arc<BuildFn>,
}

impl fmt::Debug for StructuredLtiSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StructuredLtiSpec")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("params", &self.param_names)
            .finish()
    }
}

impl StructuredLtiSpec {
    pub fn custom(
        name: impl Into<String>,
        dims: (usize, usize, usize, usize, usize),
        param_names: Vec<String>,
        build: impl Fn(&[f64]) -> Result<ContinuousLinear> + Send + Sync + 'static,
    ) -> Self {
        let (n_x, n_u, n_w, n_y, n_z) = dims;
        Self {
            name: name.into(),
            n_x,
            n_u,
            n_w,
            n_y,
            n_z,
            param_names,
            build: Arc::new(build),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    /// Builds the continuous-time matrices and checks their dimensions.
    pub fn build(&self, theta_phys: &[f64]) -> Result<ContinuousLinear> {
        if theta_phys.len() != self.param_names.len() {
            return Err(Error::ParameterDomain(format!(
                "spec `{}` expects {} parameters, got {}",
                self.name,
                self.param_names.len(),
                theta_phys.len()
            )));
        }
        let m = (self.build)(theta_phys)?;
        let ok = m.a.shape() == (self.n_x, self.n_x)
            && m.b_u.shape() == (self.n_x, self.n_u)
            && m.b_w.shape() == (self.n_x, self.n_w)
            && m.c_y.shape() == (self.n_y, self.n_x)
            && m.c_z.shape() == (self.n_z, self.n_x)
            && m.d_yu.shape() == (self.n_y, self.n_u)
            && m.d_yw.shape() == (self.n_y, self.n_w);
        if !ok {
            return Err(Error::Dimension(format!(
                "structure callback of `{}` returned inconsistent matrix shapes",
                self.name
            )));
        }
        Ok(m)
    }

    /// Single-mass oscillator with cubic spring feedback:
    /// `m y'' + c y' + k y + w = u`, `z = y`, output is the displacement.
    /// Parameters `(m, c, k)`.
    pub fn duffing() -> Self {
        Self::custom(
            "duffing",
            (2, 1, 1, 1, 1),
            vec!["m [kg]".into(), "c [N.s/m]".into(), "k [N/m]".into()],
            |theta| {
                let (m, c, k) = (theta[0], theta[1], theta[2]);
                if m <= 0.0 {
                    return Err(Error::ParameterDomain(format!("mass m = {m} must be positive")));
                }
                if k <= 0.0 {
                    return Err(Error::ParameterDomain(format!(
                        "stiffness k = {k} must be positive"
                    )));
                }
                Ok(ContinuousLinear {
                    a: Mat::from_row_slice(2, 2, &[0.0, 1.0, -k / m, -c / m]),
                    b_u: Mat::from_row_slice(2, 1, &[0.0, 1.0 / m]),
                    b_w: Mat::from_row_slice(2, 1, &[0.0, -1.0 / m]),
                    c_y: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
                    c_z: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
                    d_yu: Mat::zeros(1, 1),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        )
    }

    /// Two-mass chain: excitation and measurement at the second mass, an
    /// unknown restoring force between the first mass and the ground.
    /// States are `[x1, x2, v1, v2]`, `z = [x1, v1]`, output is `x2`.
    /// Parameters `(m1, m2, c1, c2, k1, k2)`.
    ///
    /// The feedback force enters the first mass equation as `-w/m1`
    /// (`B_w` is the negated force-insertion column, matching the sign
    /// convention of the single-mass structure).
    pub fn chain2dof() -> Self {
        Self::custom(
            "chain2dof",
            (4, 1, 1, 1, 2),
            vec![
                "m1 [kg]".into(),
                "m2 [kg]".into(),
                "c1 [N.s/m]".into(),
                "c2 [N.s/m]".into(),
                "k1 [N/m]".into(),
                "k2 [N/m]".into(),
            ],
            |theta| {
                let (m1, m2, c1, c2, k1, k2) =
                    (theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]);
                if m1 <= 0.0 || m2 <= 0.0 {
                    return Err(Error::ParameterDomain(format!(
                        "masses must be positive, got m1 = {m1}, m2 = {m2}"
                    )));
                }
                if k1 <= 0.0 || k2 <= 0.0 {
                    return Err(Error::ParameterDomain(format!(
                        "stiffnesses must be positive, got k1 = {k1}, k2 = {k2}"
                    )));
                }
                #[rustfmt::skip]
                let a = Mat::from_row_slice(4, 4, &[
                    0.0,            0.0,      1.0,             0.0,
                    0.0,            0.0,      0.0,             1.0,
                    -(k1 + k2) / m1, k2 / m1, -(c1 + c2) / m1, c2 / m1,
                    k2 / m2,        -k2 / m2, c2 / m2,         -c2 / m2,
                ]);
                Ok(ContinuousLinear {
                    a,
                    b_u: Mat::from_row_slice(4, 1, &[0.0, 0.0, 0.0, 1.0 / m2]),
                    b_w: Mat::from_row_slice(4, 1, &[0.0, 0.0, -1.0 / m1, 0.0]),
                    c_y: Mat::from_row_slice(1, 4, &[0.0, 1.0, 0.0, 0.0]),
                    c_z: Mat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
                    d_yu: Mat::zeros(1, 1),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        )
    }

    /// Looks up a built-in spec by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "duffing" => Ok(Self::duffing()),
            "chain2dof" => Ok(Self::chain2dof()),
            other => Err(Error::UnknownName(other.into())),
        }
    }
}

/// Discrete-time linear part after zero-order-hold discretization.
#[derive(Debug, Clone)]
pub struct DiscreteLinear {
    pub a: Mat,
    pub b_u: Mat,
    pub b_w: Mat,
    pub c_y: Mat,
    pub c_z: Mat,
    pub d_yu: Mat,
    pub d_yw: Mat,
    pub t_s: f64,
}

impl DiscreteLinear {
    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }
    pub fn n_u(&self) -> usize {
        self.b_u.ncols()
    }
    pub fn n_w(&self) -> usize {
        self.b_w.ncols()
    }
    pub fn n_y(&self) -> usize {
        self.c_y.nrows()
    }
    pub fn n_z(&self) -> usize {
        self.c_z.nrows()
    }
}

/// ZOH discretization through one augmented matrix exponential:
/// `[A B; 0 I] = exp([Ac Bc; 0 0] T_s)` with `Bc = [B_u B_w]`.
pub fn discretize(spec: &StructuredLtiSpec, theta_phys: &[f64], t_s: f64) -> Result<DiscreteLinear> {
    if t_s <= 0.0 {
        return Err(Error::ParameterDomain(format!("T_s = {t_s} must be positive")));
    }
    let c = spec.build(theta_phys)?;
    discretize_continuous(&c, t_s)
}

/// ZOH discretization of already-built continuous-time matrices.
pub fn discretize_continuous(c: &ContinuousLinear, t_s: f64) -> Result<DiscreteLinear> {
    let n_x = c.a.nrows();
    let n_in = c.b_u.ncols() + c.b_w.ncols();
    let mut aug = Mat::zeros(n_x + n_in, n_x + n_in);
    aug.view_mut((0, 0), (n_x, n_x)).copy_from(&c.a);
    aug.view_mut((0, n_x), (n_x, c.b_u.ncols())).copy_from(&c.b_u);
    aug.view_mut((0, n_x + c.b_u.ncols()), (n_x, c.b_w.ncols()))
        .copy_from(&c.b_w);
    let e = numkit::matexp(&(aug * t_s))?;
    Ok(DiscreteLinear {
        a: e.view((0, 0), (n_x, n_x)).into_owned(),
        b_u: e.view((0, n_x), (n_x, c.b_u.ncols())).into_owned(),
        b_w: e
            .view((0, n_x + c.b_u.ncols()), (n_x, c.b_w.ncols()))
            .into_owned(),
        c_y: c.c_y.clone(),
        c_z: c.c_z.clone(),
        d_yu: c.d_yu.clone(),
        d_yw: c.d_yw.clone(),
        t_s,
    })
}

/// The z-transform variable on the unit circle at frequency line `k`.
pub fn zeta(k: usize, n: usize) -> Complex64 {
    let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
    Complex64::new(th.cos(), th.sin())
}

/// Parametric frequency response matrix
/// `G(zeta_k) = C_y (zeta_k I - A)^{-1} B_u + D_yu` at the requested lines.
pub fn parametric_frm(discrete: &DiscreteLinear, lines: &[usize], n: usize) -> Result<Vec<CMat>> {
    let n_x = discrete.n_x();
    let a_c = discrete.a.map(|v| Complex64::new(v, 0.0));
    let b_c = discrete.b_u.map(|v| Complex64::new(v, 0.0));
    let c_c = discrete.c_y.map(|v| Complex64::new(v, 0.0));
    let d_c = discrete.d_yu.map(|v| Complex64::new(v, 0.0));
    let eye = CMat::identity(n_x, n_x);
    lines
        .iter()
        .map(|&k| {
            let m = &eye * zeta(k, n) - &a_c;
            let x = numkit::solve_c(&m, &b_c).map_err(|e| match e {
                Error::Singular { .. } => Error::Resonance { line: k },
                other => other,
            })?;
            Ok(&c_c * x + &d_c)
        })
        .collect()
}

/// One nonlinearity location: a selection of `z` components, a monomial
/// basis over the selected components, and the fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct NlLocation {
    /// Indices into `z` selected by this location (rows of the binary
    /// selection matrix).
    pub z_indices: Vec<usize>,
    /// Exponent tuples, one per monomial, each of length `z_indices.len()`.
    pub monomials: Vec<Vec<u32>>,
    /// Coefficients, one per monomial.
    pub beta: Vecf,
}

impl NlLocation {
    pub fn n_features(&self) -> usize {
        self.monomials.len()
    }

    /// Evaluates the monomial feature map at the selected subvector of `z`.
    pub fn features(&self, z: &Vecf) -> Vecf {
        let mut phi = Vecf::zeros(self.monomials.len());
        for (j, exps) in self.monomials.iter().enumerate() {
            let mut p = 1.0;
            for (&zi, &e) in self.z_indices.iter().zip(exps) {
                p *= z[zi].powi(e as i32);
            }
            phi[j] = p;
        }
        phi
    }

    fn eval(&self, z: &Vecf) -> f64 {
        let mut acc = 0.0;
        for (j, exps) in self.monomials.iter().enumerate() {
            let mut p = 1.0;
            for (&zi, &e) in self.z_indices.iter().zip(exps) {
                p *= z[zi].powi(e as i32);
            }
            acc += self.beta[j] * p;
        }
        acc
    }
}

/// Static polynomial nonlinearity `w_i = beta_i^T phi_i(P_{z,i} z)`,
/// decoupled per location.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyNonlinearity {
    pub locations: Vec<NlLocation>,
}

impl PolyNonlinearity {
    pub fn new(locations: Vec<NlLocation>) -> Result<Self> {
        for (i, loc) in locations.iter().enumerate() {
            if loc.beta.len() != loc.monomials.len() {
                return Err(Error::Dimension(format!(
                    "location {i}: {} coefficients for {} monomials",
                    loc.beta.len(),
                    loc.monomials.len()
                )));
            }
            for m in &loc.monomials {
                if m.len() != loc.z_indices.len() {
                    return Err(Error::Dimension(format!(
                        "location {i}: exponent tuple length {} does not match {} selected z components",
                        m.len(),
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
        }
        Ok(Self { locations })
    }

    /// All-zero nonlinearity with the given structure.
    pub fn zeroed(locations: Vec<(Vec<usize>, Vec<Vec<u32>>)>) -> Result<Self> {
        Self::new(
            locations
                .into_iter()
                .map(|(z_indices, monomials)| {
                    let n = monomials.len();
                    NlLocation {
                        z_indices,
                        monomials,
                        beta: Vecf::zeros(n),
                    }
                })
                .collect(),
        )
    }

    pub fn n_w(&self) -> usize {
        self.locations.len()
    }

    /// Total feature count over all locations.
    pub fn n_phi(&self) -> usize {
        self.locations.iter().map(|l| l.n_features()).sum()
    }

    /// Block-diagonal coefficient matrix of shape `n_phi x n_w`.
    pub fn beta_block(&self) -> Mat {
        let mut beta = Mat::zeros(self.n_phi(), self.n_w());
        let mut row = 0;
        for (i, loc) in self.locations.iter().enumerate() {
            for j in 0..loc.n_features() {
                beta[(row + j, i)] = loc.beta[j];
            }
            row += loc.n_features();
        }
        beta
    }

    /// Evaluates `w = f(z)`.
    pub fn eval(&self, z: &Vecf) -> Vecf {
        Vecf::from_iterator(self.locations.len(), self.locations.iter().map(|l| l.eval(z)))
    }

    fn eval_into(&self, z: &Vecf, w: &mut Vecf) {
        for (i, loc) in self.locations.iter().enumerate() {
            w[i] = loc.eval(z);
        }
    }
}

/// Fully parametrized discrete-time NL-LFR model.
#[derive(Debug, Clone)]
pub struct NllfrModel {
    pub spec: StructuredLtiSpec,
    pub theta_phys: Vec<f64>,
    pub nonlinearity: PolyNonlinearity,
    pub t_s: f64,
    discrete: DiscreteLinear,
}

/// Simulated trajectories, one row per sample.
#[derive(Debug, Clone)]
pub struct SimTrajectories {
    pub x: Mat,
    pub y: Mat,
    pub z: Mat,
    pub w: Mat,
}

impl NllfrModel {
    pub fn new(
        spec: StructuredLtiSpec,
        theta_phys: Vec<f64>,
        nonlinearity: PolyNonlinearity,
        t_s: f64,
    ) -> Result<Self> {
        if nonlinearity.n_w() != spec.n_w {
            return Err(Error::Dimension(format!(
                "nonlinearity has {} locations but spec `{}` declares n_w = {}",
                nonlinearity.n_w(),
                spec.name(),
                spec.n_w
            )));
        }
        for (i, loc) in nonlinearity.locations.iter().enumerate() {
            if loc.z_indices.iter().any(|&zi| zi >= spec.n_z) {
                return Err(Error::Dimension(format!(
                    "location {i} selects a z index outside 0..{}",
                    spec.n_z
                )));
            }
        }
        let discrete = discretize(&spec, &theta_phys, t_s)?;
        Ok(Self {
            spec,
            theta_phys,
            nonlinearity,
            t_s,
            discrete,
        })
    }

    pub fn discrete(&self) -> &DiscreteLinear {
        &self.discrete
    }

    /// Closed-loop simulation for `n_steps` samples starting from `x0`,
    /// with `u` one period that is extended periodically when
    /// `n_steps > u.nrows()`.
    pub fn simulate(&self, u: &Mat, x0: &Vecf, n_steps: usize) -> Result<SimTrajectories> {
        self.simulate_from_phase(u, x0, 0, n_steps)
    }

    /// Simulation starting from periodic phase `-n0`: runs `n0 + N` steps
    /// where `N = u.nrows()`, discards the first `n0`, and returns exactly
    /// `N` samples aligned with the input period.
    pub fn steady_state_periodic(&self, u: &Mat, x0_at_offset: &Vecf, n0: usize) -> Result<SimTrajectories> {
        let n = u.nrows();
        let mut traj = self.simulate_from_phase(u, x0_at_offset, -(n0 as isize), n + n0)?;
        if n0 > 0 {
            traj = SimTrajectories {
                x: traj.x.rows(n0, n).into_owned(),
                y: traj.y.rows(n0, n).into_owned(),
                z: traj.z.rows(n0, n).into_owned(),
                w: traj.w.rows(n0, n).into_owned(),
            };
        }
        Ok(traj)
    }

    fn simulate_from_phase(
        &self,
        u: &Mat,
        x0: &Vecf,
        phase: isize,
        n_steps: usize,
    ) -> Result<SimTrajectories> {
        let d = &self.discrete;
        let n_period = u.nrows();
        if u.ncols() != d.n_u() {
            return Err(Error::Dimension(format!(
                "input has {} channels, model expects {}",
                u.ncols(),
                d.n_u()
            )));
        }
        if x0.len() != d.n_x() {
            return Err(Error::Dimension(format!(
                "initial state has {} entries, model expects {}",
                x0.len(),
                d.n_x()
            )));
        }
        let mut xs = Mat::zeros(n_steps, d.n_x());
        let mut ys = Mat::zeros(n_steps, d.n_y());
        let mut zs = Mat::zeros(n_steps, d.n_z());
        let mut ws = Mat::zeros(n_steps, d.n_w());

        let mut x = x0.clone();
        let mut x_next = Vecf::zeros(d.n_x());
        let mut z = Vecf::zeros(d.n_z());
        let mut w = Vecf::zeros(d.n_w());
        let mut y = Vecf::zeros(d.n_y());
        let mut u_n = Vecf::zeros(d.n_u());

        for step in 0..n_steps {
            let m = phase + step as isize;
            let idx = m.rem_euclid(n_period as isize) as usize;
            for c in 0..d.n_u() {
                u_n[c] = u[(idx, c)];
            }
            z.gemv(1.0, &d.c_z, &x, 0.0);
            self.nonlinearity.eval_into(&z, &mut w);
            y.gemv(1.0, &d.c_y, &x, 0.0);
            y.gemv(1.0, &d.d_yu, &u_n, 1.0);
            y.gemv(1.0, &d.d_yw, &w, 1.0);

            if !x.iter().all(|v| v.is_finite()) || !w.iter().all(|v| v.is_finite()) {
                return Err(Error::Instability {
                    context: format!("sample {m} (step {step})"),
                });
            }

            xs.row_mut(step).tr_copy_from(&x);
            ys.row_mut(step).tr_copy_from(&y);
            zs.row_mut(step).tr_copy_from(&z);
            ws.row_mut(step).tr_copy_from(&w);

            x_next.gemv(1.0, &d.a, &x, 0.0);
            x_next.gemv(1.0, &d.b_u, &u_n, 1.0);
            x_next.gemv(1.0, &d.b_w, &w, 1.0);
            std::mem::swap(&mut x, &mut x_next);
        }
        Ok(SimTrajectories {
            x: xs,
            y: ys,
            z: zs,
            w: ws,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct LocationDocument {
    z_indices: Vec<usize>,
    monomials: Vec<Vec<u32>>,
    beta: Vec<f64>,
}

/// On-disk model document. Only specs registered under a name round-trip.
#[derive(Serialize, Deserialize)]
struct ModelDocument {
    spec: String,
    theta_phys: Vec<f64>,
    t_s: f64,
    nonlinearity: Vec<LocationDocument>,
}

/// Serializes a model to a JSON string. The decimal representation chosen by
/// the serializer round-trips `f64` values bit-exactly.
pub fn model_to_json(model: &NllfrModel) -> Result<String> {
    let doc = ModelDocument {
        spec: model.spec.name().to_string(),
        theta_phys: model.theta_phys.clone(),
        t_s: model.t_s,
        nonlinearity: model
            .nonlinearity
            .locations
            .iter()
            .map(|l| LocationDocument {
                z_indices: l.z_indices.clone(),
                monomials: l.monomials.clone(),
                beta: l.beta.iter().copied().collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn model_from_json(json: &str) -> Result<NllfrModel> {
    let doc: ModelDocument = serde_json::from_str(json)?;
    let spec = StructuredLtiSpec::by_name(&doc.spec)?;
    let nl = PolyNonlinearity::new(
        doc.nonlinearity
            .into_iter()
            .map(|l| NlLocation {
                z_indices: l.z_indices,
                monomials: l.monomials,
                beta: Vecf::from_vec(l.beta),
            })
            .collect(),
    )?;
    NllfrModel::new(spec, doc.theta_phys, nl, doc.t_s)
}

pub fn save_model(model: &NllfrModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NllfrModel> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    model_from_json(&json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::SeededRng;

    pub(crate) fn cubic_nl(beta1: f64, beta3: f64) -> PolyNonlinearity {
        PolyNonlinearity::new(vec![NlLocation {
            z_indices: vec![0],
            monomials: vec![vec![1], vec![3]],
            beta: Vecf::from_vec(vec![beta1, beta3]),
        }])
        .unwrap()
    }

    #[test]
    fn discretize_integrator_first_order_exact() {
        // Ac = 0 makes ZOH exact at first order: A = I, B_u = Bc * T_s.
        let spec = StructuredLtiSpec::custom(
            "integrator",
            (2, 1, 1, 1, 1),
            vec!["b".into()],
            |theta| {
                Ok(ContinuousLinear {
                    a: Mat::zeros(2, 2),
                    b_u: Mat::from_row_slice(2, 1, &[theta[0], 2.0 * theta[0]]),
                    b_w: Mat::zeros(2, 1),
                    c_y: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
                    c_z: Mat::from_row_slice(1, 2, &[1.0, 0.0]),
                    d_yu: Mat::zeros(1, 1),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        );
        let d = discretize(&spec, &[3.0], 0.25).unwrap();
        assert!((d.a.clone() - Mat::identity(2, 2)).norm() < 1e-14);
        assert!((d.b_u[(0, 0)] - 3.0 * 0.25).abs() < 1e-14);
        assert!((d.b_u[(1, 0)] - 6.0 * 0.25).abs() < 1e-14);
    }

    #[test]
    fn discretize_eigenvalue_mapping_oracle() {
        let spec = StructuredLtiSpec::duffing();
        let t_s = 1.0 / 128.0;
        let d = discretize(&spec, &[1.0, 2.0, 100.0], t_s).unwrap();
        // continuous eigenvalues of [[0,1],[-k/m,-c/m]]: roots of s^2 + 2 s + 100
        let disc = (2.0f64 / 2.0).powi(2) - 100.0;
        assert!(disc < 0.0);
        let re = -1.0;
        let im = (-disc).sqrt();
        let lam = Complex64::new(re, im);
        let expected = (lam * t_s).exp();
        let mut eigs = d.a.complex_eigenvalues().iter().copied().collect::<Vec<_>>();
        eigs.sort_by(|a, b| a.im.partial_cmp(&b.im).unwrap());
        let got = eigs[1]; // positive-imaginary eigenvalue
        assert!((got - expected).norm() < 1e-10, "{got} vs {expected}");
    }

    #[test]
    fn discretize_scalar_zoh_closed_form() {
        let a_c = -3.0;
        let b_c = 2.0;
        let spec = StructuredLtiSpec::custom(
            "scalar",
            (1, 1, 1, 1, 1),
            vec!["unused".into()],
            move |_| {
                Ok(ContinuousLinear {
                    a: Mat::from_row_slice(1, 1, &[a_c]),
                    b_u: Mat::from_row_slice(1, 1, &[b_c]),
                    b_w: Mat::zeros(1, 1),
                    c_y: Mat::identity(1, 1),
                    c_z: Mat::identity(1, 1),
                    d_yu: Mat::zeros(1, 1),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        );
        let t_s = 0.1;
        let d = discretize(&spec, &[0.0], t_s).unwrap();
        let a_exact = (a_c * t_s).exp();
        let b_exact = (1.0 - a_exact) / 3.0 * b_c;
        assert!((d.a[(0, 0)] - a_exact).abs() < 1e-13);
        assert!((d.b_u[(0, 0)] - b_exact).abs() < 1e-13);
    }

    #[test]
    fn discretize_rejects_bad_parameters() {
        let spec = StructuredLtiSpec::duffing();
        assert!(matches!(
            discretize(&spec, &[-1.0, 2.0, 100.0], 0.01),
            Err(Error::ParameterDomain(_))
        ));
    }

    #[test]
    fn frm_static_system_is_feedthrough() {
        let spec = StructuredLtiSpec::custom(
            "static",
            (1, 1, 1, 1, 1),
            vec!["d".into()],
            |theta| {
                Ok(ContinuousLinear {
                    a: Mat::from_row_slice(1, 1, &[-1.0]),
                    b_u: Mat::zeros(1, 1),
                    b_w: Mat::zeros(1, 1),
                    c_y: Mat::identity(1, 1),
                    c_z: Mat::identity(1, 1),
                    d_yu: Mat::from_row_slice(1, 1, &[theta[0]]),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        );
        let d = discretize(&spec, &[4.5], 0.01).unwrap();
        let g = parametric_frm(&d, &[1, 7, 31], 64).unwrap();
        for gk in g {
            assert!((gk[(0, 0)] - Complex64::new(4.5, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn frm_direct_complex_arithmetic_oracle() {
        // scalar discrete system, checked at k = N/4 where zeta = j
        let d = DiscreteLinear {
            a: Mat::from_row_slice(1, 1, &[0.5]),
            b_u: Mat::from_row_slice(1, 1, &[2.0]),
            b_w: Mat::zeros(1, 1),
            c_y: Mat::from_row_slice(1, 1, &[3.0]),
            c_z: Mat::identity(1, 1),
            d_yu: Mat::from_row_slice(1, 1, &[0.25]),
            d_yw: Mat::zeros(1, 1),
            t_s: 1.0,
        };
        let n = 16;
        let g = parametric_frm(&d, &[4], n).unwrap();
        let zeta = Complex64::new(0.0, 1.0);
        let oracle = Complex64::new(3.0, 0.0) * (zeta - 0.5).inv() * 2.0 + 0.25;
        assert!((g[0][(0, 0)] - oracle).norm() < 1e-14);
    }

    #[test]
    fn eval_nonlinearity_zero_beta_and_cubic() {
        let nl = cubic_nl(0.0, 0.0);
        assert_eq!(nl.eval(&Vecf::from_vec(vec![1.7]))[0], 0.0);

        let nl = cubic_nl(0.0, 500.0);
        let w = nl.eval(&Vecf::from_vec(vec![2.0]));
        assert_eq!(w[0], 4000.0);
    }

    #[test]
    fn eval_nonlinearity_matches_term_summation_oracle() {
        let mut rng = SeededRng::new(77);
        let monos: Vec<Vec<u32>> = vec![
            vec![1, 0],
            vec![3, 0],
            vec![5, 0],
            vec![7, 0],
            vec![0, 1],
            vec![0, 3],
            vec![0, 5],
            vec![0, 7],
        ];
        let beta: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let nl = PolyNonlinearity::new(vec![NlLocation {
            z_indices: vec![0, 1],
            monomials: monos.clone(),
            beta: Vecf::from_vec(beta.clone()),
        }])
        .unwrap();
        for _ in 0..10 {
            let z = Vecf::from_vec(vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
            let mut oracle = 0.0;
            for (b, m) in beta.iter().zip(&monos) {
                oracle += b * z[0].powi(m[0] as i32) * z[1].powi(m[1] as i32);
            }
            assert!((nl.eval(&z)[0] - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn eval_nonlinearity_odd_symmetry_exact() {
        let mut rng = SeededRng::new(78);
        let nl = PolyNonlinearity::new(vec![NlLocation {
            z_indices: vec![0, 1],
            monomials: vec![vec![1, 0], vec![3, 0], vec![0, 5], vec![1, 2]],
            beta: Vecf::from_vec((0..4).map(|_| rng.uniform(-3.0, 3.0)).collect()),
        }])
        .unwrap();
        for _ in 0..10 {
            let z = Vecf::from_vec(vec![rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)]);
            let neg = -z.clone();
            assert_eq!(nl.eval(&neg)[0], -nl.eval(&z)[0]);
        }
    }

    #[test]
    fn simulate_zero_everything() {
        let spec = StructuredLtiSpec::duffing();
        let model = NllfrModel::new(spec, vec![1.0, 2.0, 100.0], cubic_nl(0.0, 500.0), 1.0 / 128.0).unwrap();
        let u = Mat::zeros(64, 1);
        let traj = model.simulate(&u, &Vecf::zeros(2), 64).unwrap();
        assert_eq!(traj.y.nrows(), 64);
        assert!(traj.y.norm() == 0.0 && traj.x.norm() == 0.0 && traj.w.norm() == 0.0);
    }

    #[test]
    fn simulate_beta_zero_equals_linear() {
        let spec = StructuredLtiSpec::duffing();
        let t_s = 1.0 / 128.0;
        let nl_zero = cubic_nl(0.0, 0.0);
        let model = NllfrModel::new(spec.clone(), vec![1.0, 2.0, 100.0], nl_zero, t_s).unwrap();
        let d = model.discrete().clone();

        let mut rng = SeededRng::new(5);
        let u = Mat::from_fn(128, 1, |_, _| rng.uniform(-1.0, 1.0));
        let traj = model.simulate(&u, &Vecf::zeros(2), 128).unwrap();

        // plain linear recursion oracle
        let mut x = Vecf::zeros(2);
        for n in 0..128 {
            let y_lin = (&d.c_y * &x)[(0, 0)] + d.d_yu[(0, 0)] * u[(n, 0)];
            assert!((traj.y[(n, 0)] - y_lin).abs() < 1e-14);
            x = &d.a * &x + &d.b_u * Vecf::from_vec(vec![u[(n, 0)]]);
        }
    }

    #[test]
    fn simulate_reports_divergence_index() {
        // unstable scalar system: x(n+1) = 3 x(n), w = z^3 blows up fast
        let spec = StructuredLtiSpec::custom(
            "unstable",
            (1, 1, 1, 1, 1),
            vec!["unused".into()],
            |_| {
                Ok(ContinuousLinear {
                    a: Mat::from_row_slice(1, 1, &[20.0]),
                    b_u: Mat::from_row_slice(1, 1, &[1.0]),
                    b_w: Mat::from_row_slice(1, 1, &[1.0]),
                    c_y: Mat::identity(1, 1),
                    c_z: Mat::identity(1, 1),
                    d_yu: Mat::zeros(1, 1),
                    d_yw: Mat::zeros(1, 1),
                })
            },
        );
        let nl = PolyNonlinearity::new(vec![NlLocation {
            z_indices: vec![0],
            monomials: vec![vec![3]],
            beta: Vecf::from_vec(vec![10.0]),
        }])
        .unwrap();
        let model = NllfrModel::new(spec, vec![0.0], nl, 1.0).unwrap();
        let u = Mat::from_element(64, 1, 1.0);
        match model.simulate(&u, &Vecf::zeros(1), 64) {
            Err(Error::Instability { context }) => assert!(context.contains("sample")),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn steady_state_zero_offset_is_plain_simulation() {
        let spec = StructuredLtiSpec::duffing();
        let model = NllfrModel::new(spec, vec![1.0, 2.0, 100.0], cubic_nl(0.0, 500.0), 1.0 / 128.0).unwrap();
        let mut rng = SeededRng::new(9);
        let u = Mat::from_fn(64, 1, |_, _| rng.uniform(-1.0, 1.0));
        let x0 = Vecf::from_vec(vec![0.01, -0.02]);
        let a = model.simulate(&u, &x0, 64).unwrap();
        let b = model.steady_state_periodic(&u, &x0, 0).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x, b.x);
    }

    #[test]
    fn steady_state_output_independent_of_initial_state() {
        let spec = StructuredLtiSpec::duffing();
        // c = 8 gives a time constant ~0.25 s = 32 samples; N0 = 1500 > 10 tau
        let model = NllfrModel::new(spec, vec![1.0, 8.0, 100.0], cubic_nl(0.0, 100.0), 1.0 / 128.0).unwrap();
        let mut rng = SeededRng::new(10);
        let u = Mat::from_fn(256, 1, |_, _| rng.uniform(-4.0, 4.0));
        let a = model.steady_state_periodic(&u, &Vecf::zeros(2), 1500).unwrap();
        let b = model
            .steady_state_periodic(&u, &Vecf::from_vec(vec![0.05, 0.5]), 1500)
            .unwrap();
        assert!((a.y - b.y).norm() < 1e-8);
    }

    #[test]
    fn model_json_round_trip_is_bit_exact() {
        let spec = StructuredLtiSpec::duffing();
        let theta = vec![0.9876543210123456, 2.0987654321098765, 113.99999999999997];
        let model = NllfrModel::new(spec, theta.clone(), cubic_nl(1.0e-3, 485.1234567890123), 1.0 / 128.0).unwrap();
        let json = model_to_json(&model).unwrap();
        let back = model_from_json(&json).unwrap();
        for (a, b) in theta.iter().zip(&back.theta_phys) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(
            model.nonlinearity.locations[0].beta[1].to_bits(),
            back.nonlinearity.locations[0].beta[1].to_bits()
        );
        assert_eq!(model.t_s.to_bits(), back.t_s.to_bits());
    }

    #[test]
    fn poly_nonlinearity_rejects_duplicate_monomials() {
        let r = PolyNonlinearity::new(vec![NlLocation {
            z_indices: vec![0],
            monomials: vec![vec![1], vec![1]],
            beta: Vecf::from_vec(vec![1.0, 2.0]),
        }]);
        assert!(matches!(r, Err(Error::Identifiability { .. })));
    }
}
