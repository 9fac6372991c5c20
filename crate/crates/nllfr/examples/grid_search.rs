//! Hyperparameter grid for the sliding window: horizon length H against
//! regularization strength lambda, at a high noise level.
//!
//! Weak regularization lets the window chase noise (good output match, no
//! usable force scatter); strong regularization with a longer window trades
//! a little output error for a force signal the polynomial can be fit to.
//!
//! Run with:
//!   cargo run --release --example grid_search

use nllfr::bla::{estimate_bla, fit_parametric_bla_weighted, BlaWeighting};
use nllfr::excite::{add_noise_snr, period_average, sample_noise_cov, MultisineDesign};
use nllfr::model::{discretize, StructuredLtiSpec};
use nllfr::nlfit::PolySpec;
use nllfr::numkit::SeededRng;
use nllfr::slidewin::{grid_search, QSource};
use nllfr::truth::{steady_state_data, OdeSystem};

fn main() -> nllfr::Result<()> {
    let n = 4096;
    let f_s = 128.0;
    let design = MultisineDesign::flat_band(n, f_s, 10.0, 10.0, 11)?;
    let sys = OdeSystem::duffing_benchmark();
    let clean = steady_state_data(&sys, &design, 3, 2, &mut SeededRng::new(11), 3, 16)?;
    let ds = add_noise_snr(&clean, 20.0, &mut SeededRng::new(12))?;
    let cov = sample_noise_cov(&ds);
    let avg = period_average(&ds);

    let spec = StructuredLtiSpec::duffing();
    let frm = estimate_bla(&ds)?;
    let fit = fit_parametric_bla_weighted(&frm, &spec, &[1.0, 2.0, 100.0], 1.0 / f_s, 100, BlaWeighting::Unity)?;
    let theta: Vec<f64> = fit.theta.iter().copied().collect();
    let discrete = discretize(&spec, &theta, 1.0 / f_s)?;

    let h_values = [1usize, 5, 15, 50];
    let lambda_values = [1e-7, 1e-4, 1e-2, 1e-1, 1e0];
    let q = QSource::from_estimates(&cov, &avg);
    let points = grid_search(
        &avg, &discrete, &theta, &h_values, &lambda_values, 320, &q,
        &PolySpec::odd3(),
        Some(10.0), // SNR 20 dB noise floor in percent
    )?;

    println!("output NRMSE % (top) and polynomial-fit NRMSE % (bottom) per (H, lambda):");
    print!("{:>6}", "H\\lam");
    for lam in lambda_values {
        print!("{lam:>9.0e}");
    }
    println!();
    for (i, h) in h_values.iter().enumerate() {
        print!("{h:>6}");
        for j in 0..lambda_values.len() {
            let p = &points[i * lambda_values.len() + j];
            print!("{:>9.2}", p.nonparam_nrmse);
        }
        println!();
        print!("{:>6}", "");
        for j in 0..lambda_values.len() {
            let p = &points[i * lambda_values.len() + j];
            print!("{:>9.1}", p.polyfit_nrmse);
        }
        println!();
    }
    let best = points
        .iter()
        .filter(|p| p.polyfit_nrmse.is_finite())
        .min_by(|a, b| a.polyfit_nrmse.partial_cmp(&b.polyfit_nrmse).unwrap())
        .unwrap();
    println!(
        "\nbest polynomial fit at H = {}, lambda = {:.0e} ({:.1}% fit NRMSE, {:.2}% output NRMSE)",
        best.h, best.lambda, best.polyfit_nrmse, best.nonparam_nrmse
    );
    Ok(())
}
