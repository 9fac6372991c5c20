//! Identification of latent nonlinear restoring forces in NL-LFR
//! state-space models from periodic multisine data.
//!
//! The library implements a three-step procedure:
//!
//! 1. **Linear step** ([`bla`]): estimate the nonparametric best linear
//!    approximation per frequency line and fit the physical parameters of a
//!    structured state-space model to it.
//! 2. **Restoring-force step** ([`slidewin`], [`nlfit`]): reconstruct the
//!    latent feedback force and state trajectory with a sliding-window
//!    least-squares scheme, then fit a polynomial feedback law by ordinary
//!    least squares.
//! 3. **Final step** ([`finalopt`]): jointly refine all parameters against
//!    the measured output spectra, with an L1 penalty on degree-one
//!    polynomial coefficients that pushes linear content back into the
//!    physical parameters.
//!
//! Synthetic benchmarks ([`truth`]) cover a forced Duffing oscillator and a
//! two-mass chain with an unmeasured nonlinearity, matching the built-in
//! `duffing` and `chain2dof` model structures in [`model`].

pub mod bla;
pub mod cli;
pub mod error;
pub mod excite;
pub mod finalopt;
pub mod lmopt;
pub mod model;
pub mod nlfit;
pub mod numkit;
pub mod slidewin;
pub mod truth;

pub use error::{Error, Result};
