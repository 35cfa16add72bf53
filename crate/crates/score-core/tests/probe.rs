//! Scratch probe for fit quality/timing at benchmark scale. Not part of the
//! regular suite; run with `cargo test --test probe -- --ignored --nocapture`.

use score_core::*;
use std::time::Instant;

fn run_cell(labeled: usize, total: usize, codes: usize, latent: usize, seed: u64) {
    let cfg = SimConfig {
        labeled,
        total,
        codes,
        latent,
        misspec: Misspec::None,
        zero_inflation: 0.0,
        seed,
    };
    let t0 = Instant::now();
    let (data, truth) = gen_dataset(&cfg).unwrap();
    let gen_t = t0.elapsed();

    let sup_cfg = SupFitConfig::default();
    let em = EmConfig::default();
    let t1 = Instant::now();
    let fit = fit_score(&data, &truth.basis, &sup_cfg, &em, Some(&truth.theta0)).unwrap();
    let fit_t = t1.elapsed();

    let sup = fit.supervised.as_ref().unwrap();
    let err_b_sup = rel_fnorm(&sup.theta.effects, &truth.theta0.effects).unwrap();
    let err_b_semi = rel_fnorm(&fit.report.theta.effects, &truth.theta0.effects).unwrap();
    let err_l_semi = rel_fnorm(&fit.report.theta.latent_cov, &truth.theta0.latent_cov).unwrap();
    println!(
        "cell n={labeled} N={total} p={codes} q={latent} seed={seed}: gen {:.1?}, fit {:.1?} \
         (sup iters {}, em T {}, plateau {:?})",
        gen_t, fit_t, sup.iterations, fit.report.iterations, fit.report.plateau_iter
    );
    println!(
        "  err_b sup {err_b_sup:.4}  err_b semisup {err_b_semi:.4}  err_lambda semisup {err_l_semi:.4}"
    );
    println!(
        "  err trace: {:?}",
        fit.report
            .err_trace
            .as_ref()
            .unwrap()
            .iter()
            .map(|v| (v * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!(
        "  of trace deltas: {:?}",
        fit.report
            .objective_trace
            .windows(2)
            .map(|w| ((w[1] - w[0]) * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    println!("  warnings: {:?}", fit.report.warnings);
}

#[test]
#[ignore]
fn probe_small() {
    run_cell(50, 1000, 100, 10, 1);
}

#[test]
#[ignore]
fn probe_base_cell() {
    run_cell(50, 5000, 400, 20, 1);
}
