//! Continuous-time ground truth for synthetic benchmarks, integrated with
//! classical RK4 under zero-order-hold inputs.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::excite::{generate_multisine, nrmse_mat, MultisineDataset, MultisineDesign};
use crate::numkit::{Mat, SeededRng, Vecf};

type RhsFn = dyn Fn(&Vecf, &Vecf, &mut Vecf) + Send + Sync;
type OutFn = dyn Fn(&Vecf, &Vecf, &mut Vecf) + Send + Sync;

/// Continuous-time system `x' = g(x, u)`, `y0 = h(x, u)` with `u` held
/// constant over each sampling interval.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    pub n_state: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
    rhs: Arc<RhsFn>,
    output: Arc<OutFn>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("n_state", &self.n_state)
            .finish()
    }
}

impl OdeSystem {
    pub fn new(
        name: impl Into<String>,
        n_state: usize,
        n_in: usize,
        n_out: usize,
        input_labels: Vec<String>,
        output_labels: Vec<String>,
        rhs: impl Fn(&Vecf, &Vecf, &mut Vecf) + Send + Sync + 'static,
        output: impl Fn(&Vecf, &Vecf, &mut Vecf) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n_state,
            n_in,
            n_out,
            input_labels,
            output_labels,
            rhs: Arc::new(rhs),
            output: Arc::new(output),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Forced oscillator with cubic spring:
    /// `m y'' + c y' + k y + k3 y^3 = u`, output is the displacement.
    pub fn duffing(m: f64, c: f64, k: f64, k3: f64) -> Self {
        Self::new(
            "duffing",
            2,
            1,
            1,
            vec!["u [N]".into()],
            vec!["y [m]".into()],
            move |x, u, dx| {
                dx[0] = x[1];
                dx[1] = (u[0] - c * x[1] - k * x[0] - k3 * x[0] * x[0] * x[0]) / m;
            },
            |x, _, y| y[0] = x[0],
        )
    }

    /// Duffing oscillator with the benchmark parameter set
    /// `m = 1, c = 2, k = 100, k3 = 500`.
    pub fn duffing_benchmark() -> Self {
        Self::duffing(1.0, 2.0, 100.0, 500.0)
    }

    /// Two-mass chain, excited and measured at the second mass, with a
    /// nonlinear restoring force `a1 tanh(a2 v1) + a3 x1^3` between the
    /// first mass and the ground. States `[x1, x2, v1, v2]`, output `x2`.
    #[allow(clippy::too_many_arguments)]
    pub fn chain2dof(m1: f64, m2: f64, c1: f64, c2: f64, k1: f64, k2: f64, a1: f64, a2: f64, a3: f64) -> Self {
        Self::new(
            "chain2dof",
            4,
            1,
            1,
            vec!["u [N]".into()],
            vec!["y [m]".into()],
            move |x, u, dx| {
                let (x1, x2, v1, v2) = (x[0], x[1], x[2], x[3]);
                let f_nl = a1 * (a2 * v1).tanh() + a3 * x1 * x1 * x1;
                dx[0] = v1;
                dx[1] = v2;
                dx[2] = (-k1 * x1 - c1 * v1 - f_nl + k2 * (x2 - x1) + c2 * (v2 - v1)) / m1;
                dx[3] = (u[0] - k2 * (x2 - x1) - c2 * (v2 - v1)) / m2;
            },
            |x, _, y| y[0] = x[1],
        )
    }

    /// Two-mass chain with the benchmark parameter set
    /// `m1 = 2, m2 = 1, c1 = 5, c2 = 2, k1 = 800, k2 = 600` and
    /// `a1 = 7, a2 = 3, a3 = 5e4`.
    pub fn chain2dof_benchmark() -> Self {
        Self::chain2dof(2.0, 1.0, 5.0, 2.0, 800.0, 600.0, 7.0, 3.0, 5.0e4)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "duffing" => Ok(Self::duffing_benchmark()),
            "chain2dof" => Ok(Self::chain2dof_benchmark()),
            other => Err(Error::UnknownName(other.into())),
        }
    }
}

/// Result of an RK4 pass: sampled outputs plus the state after the last step.
#[derive(Debug, Clone)]
pub struct Rk4Output {
    pub y: Mat,
    pub x_final: Vecf,
}

/// Classical 4th-order Runge-Kutta with `substeps` stages per sampling
/// interval; the input is held constant within each interval.
pub fn rk4_simulate(sys: &OdeSystem, u: &Mat, x0: &Vecf, t_s: f64, substeps: usize) -> Result<Rk4Output> {
    if substeps == 0 {
        return Err(Error::Design("substeps must be >= 1".into()));
    }
    if u.ncols() != sys.n_in || x0.len() != sys.n_state {
        return Err(Error::Dimension(
            "rk4_simulate: input channels or state size do not match the system".into(),
        ));
    }
    let n_steps = u.nrows();
    let h = t_s / substeps as f64;
    let mut y = Mat::zeros(n_steps, sys.n_out);
    let mut x = x0.clone();
    let mut u_n = Vecf::zeros(sys.n_in);
    let mut y_n = Vecf::zeros(sys.n_out);
    let mut k1 = Vecf::zeros(sys.n_state);
    let mut k2 = Vecf::zeros(sys.n_state);
    let mut k3 = Vecf::zeros(sys.n_state);
    let mut k4 = Vecf::zeros(sys.n_state);
    let mut tmp = Vecf::zeros(sys.n_state);

    for n in 0..n_steps {
        for c in 0..sys.n_in {
            u_n[c] = u[(n, c)];
        }
        (sys.output)(&x, &u_n, &mut y_n);
        if !y_n.iter().all(|v| v.is_finite()) || !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Instability {
                context: format!("sample {n}"),
            });
        }
        y.row_mut(n).tr_copy_from(&y_n);

        for _ in 0..substeps {
            (sys.rhs)(&x, &u_n, &mut k1);
            tmp.copy_from(&x);
            tmp.axpy(0.5 * h, &k1, 1.0);
            (sys.rhs)(&tmp, &u_n, &mut k2);
            tmp.copy_from(&x);
            tmp.axpy(0.5 * h, &k2, 1.0);
            (sys.rhs)(&tmp, &u_n, &mut k3);
            tmp.copy_from(&x);
            tmp.axpy(h, &k3, 1.0);
            (sys.rhs)(&tmp, &u_n, &mut k4);
            x.axpy(h / 6.0, &k1, 1.0);
            x.axpy(h / 3.0, &k2, 1.0);
            x.axpy(h / 3.0, &k3, 1.0);
            x.axpy(h / 6.0, &k4, 1.0);
        }
    }
    Ok(Rk4Output { y, x_final: x })
}

/// Upper bound on settle periods tried by [`steady_state_data`].
pub const MAX_SETTLE_PERIODS: usize = 48;

/// Relative NRMSE threshold (in percent) for the steady-state periodicity
/// check between the last two simulated periods.
pub const PERIODICITY_TOL_PCT: f64 = 0.01;

/// Simulates `R` realizations of `P` noise-free steady-state periods.
///
/// Each realization settles for `settle_periods` periods (doubled, up to
/// [`MAX_SETTLE_PERIODS`], until the last two periods agree to
/// [`PERIODICITY_TOL_PCT`]) before `P` periods are retained.
pub fn steady_state_data(
    sys: &OdeSystem,
    design: &MultisineDesign,
    r_count: usize,
    p_count: usize,
    rng: &mut SeededRng,
    settle_periods: usize,
    substeps: usize,
) -> Result<MultisineDataset> {
    if settle_periods == 0 {
        return Err(Error::Design("settle_periods must be >= 1".into()));
    }
    design.validate()?;
    let t_s = 1.0 / design.f_s;
    let mut u_records = Vec::with_capacity(r_count);
    let mut y_records = Vec::with_capacity(r_count);
    for _ in 0..r_count {
        let u_period = generate_multisine(design, rng)?;
        let u_mat = Mat::from_fn(design.n, 1, |i, _| u_period[i]);

        let mut x = Vecf::zeros(sys.n_state);
        let mut settled = 0usize;
        let mut target = settle_periods;
        let mut prev_period: Option<Mat> = None;
        let mut last_period: Option<Mat> = None;
        loop {
            while settled < target {
                let out = rk4_simulate(sys, &u_mat, &x, t_s, substeps)?;
                x = out.x_final;
                prev_period = last_period.take();
                last_period = Some(out.y);
                settled += 1;
            }
            if let (Some(a), Some(b)) = (&prev_period, &last_period) {
                if nrmse_mat(b, a)? <= PERIODICITY_TOL_PCT {
                    break;
                }
            }
            if target >= MAX_SETTLE_PERIODS {
                let e = match (&prev_period, &last_period) {
                    (Some(a), Some(b)) => nrmse_mat(b, a)?,
                    _ => f64::NAN,
                };
                return Err(Error::Transient { nrmse: e });
            }
            target = (target * 2).min(MAX_SETTLE_PERIODS);
        }

        let mut periods_y = Vec::with_capacity(p_count);
        for _ in 0..p_count {
            let out = rk4_simulate(sys, &u_mat, &x, t_s, substeps)?;
            x = out.x_final;
            periods_y.push(out.y);
        }
        // retained data must still be periodic against the final settle period
        if let Some(last_settle) = &last_period {
            let e = nrmse_mat(&periods_y[0], last_settle)?;
            if e > PERIODICITY_TOL_PCT {
                return Err(Error::Transient { nrmse: e });
            }
        }
        u_records.push(vec![u_mat; p_count]);
        y_records.push(periods_y);
    }
    MultisineDataset::new(
        design.f_s,
        design.excited_lines.clone(),
        u_records,
        y_records,
        sys.input_labels.clone(),
        sys.output_labels.clone(),
    )
}
