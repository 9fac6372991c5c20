//! Building, simulating and serializing an NL-LFR model directly.
//!
//! Run with:
//!   cargo run --release --example model_io

use nllfr::excite::{generate_multisine, MultisineDesign};
use nllfr::model::{model_from_json, model_to_json, NlLocation, NllfrModel, PolyNonlinearity, StructuredLtiSpec};
use nllfr::numkit::{Mat, SeededRng, Vecf};

fn main() -> nllfr::Result<()> {
    // oscillator structure with a cubic spring in feedback
    let spec = StructuredLtiSpec::duffing();
    let nl = PolyNonlinearity::new(vec![NlLocation {
        z_indices: vec![0],
        monomials: vec![vec![1], vec![3]],
        beta: Vecf::from_vec(vec![0.0, 500.0]),
    }])?;
    let model = NllfrModel::new(spec, vec![1.0, 2.0, 100.0], nl, 1.0 / 128.0)?;
    let d = model.discrete();
    println!(
        "discrete model: A is {}x{}, |eig| = {:?}",
        d.a.nrows(),
        d.a.ncols(),
        d.a.complex_eigenvalues().iter().map(|l| format!("{:.4}", l.norm())).collect::<Vec<_>>()
    );

    // closed-loop steady-state simulation under one multisine period
    let design = MultisineDesign::flat_band(1024, 128.0, 10.0, 10.0, 5)?;
    let u0 = generate_multisine(&design, &mut SeededRng::new(5))?;
    let u = Mat::from_fn(1024, 1, |i, _| u0[i]);
    let traj = model.steady_state_periodic(&u, &Vecf::zeros(2), 2048)?;
    println!(
        "steady state: |y| up to {:.3} m, |w| up to {:.1} N over one period",
        traj.y.amax(),
        traj.w.amax()
    );

    // JSON round trip is bit-exact
    let json = model_to_json(&model)?;
    let back = model_from_json(&json)?;
    assert_eq!(model.theta_phys, back.theta_phys);
    println!("\nserialized form:\n{json}");
    Ok(())
}
