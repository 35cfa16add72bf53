//! Deeper probe: where does the supervised fit stall?

use score_core::*;
use std::time::Instant;

#[test]
#[ignore]
fn probe_sup_pieces() {
    let cfg = SimConfig {
        labeled: 400,
        total: 400,
        codes: 100,
        latent: 10,
        misspec: Misspec::None,
        zero_inflation: 0.0,
        seed: 1,
    };
    let (data, truth) = gen_dataset(&cfg).unwrap();

    // Init quality.
    let init = init_supervised(&data, &truth.basis).unwrap();
    println!(
        "init: err_b {:.4} err_lambda {:.4} b {:?}",
        rel_fnorm(&init.theta.effects, &truth.theta0.effects).unwrap(),
        rel_fnorm(&init.theta.latent_cov, &truth.theta0.latent_cov).unwrap(),
        init.theta.logit_coef.as_slice()
    );
    println!("B0 col means: {:?}", (0..3).map(|c| truth.theta0.effects.column(c).mean()).collect::<Vec<_>>());
    println!("Binit col means: {:?}", (0..3).map(|c| init.theta.effects.column(c).mean()).collect::<Vec<_>>());

    // Default supervised fit.
    let t = Instant::now();
    let report = fit_supervised(&data, &truth.basis, &SupFitConfig::default()).unwrap();
    println!(
        "default fit: {:.1?} iters {} converged {} err_b {:.4} err_lambda {:.4}",
        t.elapsed(),
        report.iterations,
        report.converged,
        rel_fnorm(&report.theta.effects, &truth.theta0.effects).unwrap(),
        rel_fnorm(&report.theta.latent_cov, &truth.theta0.latent_cov).unwrap(),
    );
    println!("Bfit col means: {:?}", (0..3).map(|c| report.theta.effects.column(c).mean()).collect::<Vec<_>>());
    let tr = &report.objective_trace;
    println!(
        "first deltas {:?} last deltas {:?}",
        tr.windows(2).take(5).map(|w| w[1] - w[0]).collect::<Vec<_>>(),
        tr.windows(2).rev().take(5).map(|w| w[1] - w[0]).collect::<Vec<_>>()
    );

    // Long fit: does it keep improving with more iterations / tighter tol?
    let t = Instant::now();
    let cfg_long = SupFitConfig {
        outer_max_iters: 4000,
        outer_tol: 1e-9,
        ..Default::default()
    };
    let report_long = fit_supervised(&data, &truth.basis, &cfg_long).unwrap();
    println!(
        "long fit: {:.1?} iters {} err_b {:.4} err_lambda {:.4}",
        t.elapsed(),
        report_long.iterations,
        rel_fnorm(&report_long.theta.effects, &truth.theta0.effects).unwrap(),
        rel_fnorm(&report_long.theta.latent_cov, &truth.theta0.latent_cov).unwrap(),
    );
    println!("Blong col means: {:?}", (0..3).map(|c| report_long.theta.effects.column(c).mean()).collect::<Vec<_>>());
}
