use nllfr::excite::*;
use nllfr::finalopt::*;
use nllfr::lmopt::LmConfig;
use nllfr::model::load_model;

#[test]
fn gamma_long_walk() {
    for snr in [60u32, 20] {
        let initial = load_model(std::path::Path::new(&format!("/tmp/duf{snr}/model_initial.json"))).unwrap();
        let (ds, _) = load_dataset(std::path::Path::new(&format!("/tmp/duf{snr}/dataset"))).unwrap();
        let avg = period_average(&ds);
        for gamma in [5.5e-3, 6.5e-3] {
            let cost = FinalCostSpec::new(&avg, &initial, None, Weighting::Unity, gamma, 640).unwrap();
            let config = LmConfig { max_iters: 1200, ..LmConfig::default() };
            let res = final_optimize(&cost, &initial, &config).unwrap();
            let t = &res.model.theta_phys;
            let b = &res.model.nonlinearity.locations[0].beta;
            let nrmse = nllfr::cli::eval_nrmse(&res.model, &avg, 640).unwrap();
            // k over the walk
            let n_phys = 3;
            let ks: Vec<String> = [300usize, 600, 900, 1200]
                .iter()
                .filter_map(|&i| res.lm.trace.iter().find(|it| it.iter >= i).map(|it| format!("{:.2}", it.theta[2])))
                .collect();
            let _ = n_phys;
            println!(
                "SNR {snr} gamma {gamma:.0e}: m {:.4} c {:.4} k {:.4} b1 {:+.4} b3 {:.1} NRMSE {:.3}% iters {} (k walk: {})",
                t[0], t[1], t[2], b[0], b[1], nrmse, res.lm.accepted_steps, ks.join(" -> ")
            );
        }
    }
}
