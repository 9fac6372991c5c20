//! Levenberg-Marquardt nonlinear least squares with numerical Jacobians.
//!
//! The engine minimizes `||r(theta)||^2` for a user-supplied residual map.
//! Complex residuals are expected pre-split into real/imaginary pairs, and
//! any per-residual weights folded in by the caller. Damping follows the
//! classical scheme: solve `(J^T J + mu diag(J^T J)) delta = -J^T r`, grow
//! `mu` tenfold on a rejected trial, shrink it tenfold after acceptance.
//! A residual map may return an error to mark a parameter point infeasible
//! (for instance a nonpositive mass or a diverging simulation); such trials
//! are treated as infinite cost and rejected.

use crate::error::{Error, Result};
use crate::numkit::{Mat, Vecf};

/// A nonlinear least-squares problem given by its residual map.
pub trait LeastSquaresProblem {
    /// Residual vector at `theta`; `Err` marks the point infeasible.
    fn residuals(&self, theta: &Vecf) -> Result<Vecf>;
}

impl<F> LeastSquaresProblem for F
where
    F: Fn(&Vecf) -> Result<Vecf>,
{
    fn residuals(&self, theta: &Vecf) -> Result<Vecf> {
        self(theta)
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iters: usize,
    /// Initial damping.
    pub mu0: f64,
    /// Damping growth factor applied after a rejected trial (> 1).
    pub mu_increase: f64,
    /// Damping shrink factor applied after an accepted step (< 1).
    pub mu_decrease: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    /// Terminate when the gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Terminate when the accepted step norm drops below
    /// `step_tol * (||theta|| + step_tol)`.
    pub step_tol: f64,
    /// Relative finite-difference step for the Jacobian.
    pub fd_rel_step: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            mu0: 1e-3,
            mu_increase: 10.0,
            mu_decrease: 0.1,
            mu_min: 1e-14,
            mu_max: 1e14,
            grad_tol: 1e-10,
            step_tol: 1e-12,
            fd_rel_step: 1e-6,
        }
    }
}

impl LmConfig {
    fn validate(&self) -> Result<()> {
        let pos = self.mu0 > 0.0
            && self.mu_min > 0.0
            && self.mu_max > self.mu_min
            && self.grad_tol > 0.0
            && self.step_tol > 0.0
            && self.fd_rel_step > 0.0
            && self.max_iters > 0;
        if !pos || !(self.mu_increase > 1.0) || !(self.mu_decrease < 1.0) || !(self.mu_decrease > 0.0) {
            return Err(Error::Config(
                "LmConfig fields must be positive with mu_increase > 1 > mu_decrease".into(),
            ));
        }
        Ok(())
    }
}

/// One accepted iteration of the solver.
#[derive(Debug, Clone)]
pub struct LmIteration {
    pub iter: usize,
    pub cost: f64,
    /// Damping after this iteration's update.
    pub damping: f64,
    /// Gradient infinity norm at the start of the iteration.
    pub grad_norm: f64,
    /// Trials rejected before this step was accepted.
    pub rejections: usize,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmTermination {
    GradientTol,
    StepTol,
    MaxIters,
    /// No acceptable step was found before the damping hit `mu_max`.
    DampingExhausted,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub theta: Vecf,
    pub cost: f64,
    pub grad_norm: f64,
    pub accepted_steps: usize,
    pub termination: LmTermination,
    /// Initial point plus every accepted iteration, in order.
    pub trace: Vec<LmIteration>,
}

fn cost_of(r: &Vecf) -> f64 {
    r.norm_squared()
}

fn finite(r: &Vecf) -> bool {
    r.iter().all(|v| v.is_finite())
}

/// Central-difference Jacobian with per-parameter steps
/// `rel_step * max(|theta_i|, scale_i)`.
///
/// Non-finite perturbed residuals trigger step shrinking (factor 10, up to
/// four retries) before giving up.
pub fn fd_jacobian_scaled<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta: &Vecf,
    rel_step: f64,
    scales: &Vecf,
) -> Result<Mat> {
    let dim = theta.len();
    let mut jac: Option<Mat> = None;
    for i in 0..dim {
        let mut h = rel_step * theta[i].abs().max(scales[i]);
        if h == 0.0 {
            h = rel_step;
        }
        let mut col = None;
        let mut retries = 0;
        while retries <= 4 {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            match (problem.residuals(&plus), problem.residuals(&minus)) {
                (Ok(rp), Ok(rm)) if finite(&rp) && finite(&rm) => {
                    col = Some((rp - rm) / (2.0 * h));
                    break;
                }
                _ => {
                    h *= 0.1;
                    retries += 1;
                }
            }
        }
        let col = col.ok_or(Error::FdStep { retries })?;
        let j = jac.get_or_insert_with(|| Mat::zeros(col.len(), dim));
        if j.nrows() != col.len() {
            return Err(Error::Dimension(
                "residual length changed across FD evaluations".into(),
            ));
        }
        j.set_column(i, &col);
    }
    jac.ok_or_else(|| Error::Dimension("fd_jacobian of a zero-parameter problem".into()))
}

/// [`fd_jacobian_scaled`] with unit parameter scales.
pub fn fd_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta: &Vecf,
    rel_step: f64,
) -> Result<Mat> {
    fd_jacobian_scaled(problem, theta, rel_step, &Vecf::from_element(theta.len(), 1.0))
}

/// Minimizes the sum of squared residuals starting from `theta0`.
///
/// The cost trace over accepted steps is monotone non-increasing; rejected
/// trials never update `theta`.
pub fn lm_minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    theta0: &Vecf,
    config: &LmConfig,
) -> Result<LmResult> {
    config.validate()?;
    let mut theta = theta0.clone();
    let mut r = match problem.residuals(&theta) {
        Ok(r) if finite(&r) => r,
        _ => return Err(Error::Initialization),
    };
    if r.len() < theta.len() {
        return Err(Error::Dimension(format!(
            "{} residuals for {} parameters",
            r.len(),
            theta.len()
        )));
    }
    let mut cost = cost_of(&r);
    // FD steps follow per-parameter scales frozen at the starting point
    let scales = Vecf::from_iterator(
        theta.len(),
        theta.iter().map(|v| if v.abs() > 0.0 { v.abs() } else { 1.0 }),
    );

    let mut mu = config.mu0;
    let mut trace = vec![LmIteration {
        iter: 0,
        cost,
        damping: mu,
        grad_norm: f64::NAN,
        rejections: 0,
        theta: theta.iter().copied().collect(),
    }];
    let mut accepted = 0usize;
    let mut grad_norm = f64::NAN;
    let mut termination = LmTermination::MaxIters;

    'outer: for iter in 1..=config.max_iters {
        let jac = fd_jacobian_scaled(problem, &theta, config.fd_rel_step, &scales)?;
        let grad = jac.transpose() * &r;
        grad_norm = grad.amax();
        if grad_norm <= config.grad_tol {
            termination = LmTermination::GradientTol;
            break;
        }
        let jtj = jac.transpose() * &jac;
        let d_max = (0..jtj.nrows()).map(|i| jtj[(i, i)]).fold(0.0_f64, f64::max);
        let d_floor = (d_max * 1e-12).max(f64::MIN_POSITIVE);
        let damp_diag =
            Vecf::from_iterator(jtj.nrows(), (0..jtj.nrows()).map(|i| jtj[(i, i)].max(d_floor)));

        let mut rejections = 0usize;
        loop {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += mu * damp_diag[i];
            }
            let delta = lhs
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&(-&grad)))
                .or_else(|| lhs.lu().solve(&(-&grad)));
            let Some(delta) = delta else {
                mu *= config.mu_increase;
                rejections += 1;
                if mu > config.mu_max {
                    termination = LmTermination::DampingExhausted;
                    break 'outer;
                }
                continue;
            };
            let trial = &theta + &delta;
            let trial_r = problem.residuals(&trial);
            let accepted_trial = match &trial_r {
                Ok(rt) if finite(rt) => cost_of(rt) < cost,
                _ => false,
            };
            if accepted_trial {
                let rt = trial_r.unwrap();
                theta = trial;
                cost = cost_of(&rt);
                r = rt;
                mu = (mu * config.mu_decrease).max(config.mu_min);
                accepted += 1;
                trace.push(LmIteration {
                    iter,
                    cost,
                    damping: mu,
                    grad_norm,
                    rejections,
                    theta: theta.iter().copied().collect(),
                });
                if delta.norm() <= config.step_tol * (theta.norm() + config.step_tol) {
                    termination = LmTermination::StepTol;
                    break 'outer;
                }
                break;
            }
            mu *= config.mu_increase;
            rejections += 1;
            if mu > config.mu_max {
                termination = LmTermination::DampingExhausted;
                break 'outer;
            }
        }
    }

    Ok(LmResult {
        theta,
        cost,
        grad_norm,
        accepted_steps: accepted,
        termination,
        trace,
    })
}

/// Pseudo-residuals implementing a smoothed L1 penalty: entry `x` maps to
/// `sqrt(gamma * sqrt(x^2 + eps^2))`, so the summed squares approach
/// `gamma * ||x||_1` as `eps -> 0`. `gamma = 0` contributes nothing.
pub fn smoothed_l1_residuals(values: &Vecf, gamma: f64, epsilon: f64) -> Vecf {
    if gamma == 0.0 {
        return Vecf::zeros(0);
    }
    Vecf::from_iterator(
        values.len(),
        values
            .iter()
            .map(|x| (gamma * (x * x + epsilon * epsilon).sqrt()).sqrt()),
    )
}

/// Writes a trace CSV with one row per accepted iteration.
pub fn write_trace_csv(
    trace: &[LmIteration],
    param_names: &[String],
    path: &std::path::Path,
) -> Result<()> {
    let mut out = String::from("iter,cost,damping,grad_norm,rejections");
    for name in param_names {
        out.push(',');
        out.push_str(&name.replace(',', ";"));
    }
    out.push('\n');
    for it in trace {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{}",
            it.iter, it.cost, it.damping, it.grad_norm, it.rejections
        ));
        for v in &it.theta {
            out.push_str(&format!(",{v:.16e}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
