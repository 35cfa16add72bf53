//! Replicated simulation sweeps: generate → fit → evaluate over a grid of
//! generator configurations and methods, with seeded, order-fixed
//! aggregation so results are byte-identical across runs and thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::EmbeddingBasis;
use crate::error::{Result, ScoreError};
use crate::metrics::{classification_metrics, cosine_embeddings, err_theta, rel_fnorm};
use crate::model::Dataset;
use crate::objective::snr;
use crate::predict::{predict_batch, EmbeddingEstimate};
use crate::semisup::{fit_score, fit_unsupervised, EmConfig};
use crate::simulate::{gen_basis, gen_dataset_with_basis, Misspec, SimConfig, SimTruth};
use crate::supervised::{fit_supervised, SupFitConfig};

/// Estimation methods under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sup,
    Unsup,
    Semisup,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Sup => write!(f, "sup"),
            Method::Unsup => write!(f, "unsup"),
            Method::Semisup => write!(f, "semisup"),
        }
    }
}

/// One generator configuration in a sweep (the seed is derived per
/// replication from the grid's base seed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub labeled: usize,
    pub total: usize,
    pub codes: usize,
    pub latent: usize,
    #[serde(default)]
    pub misspec: Misspec,
    #[serde(default)]
    pub zero_inflation: f64,
}

impl CellConfig {
    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig {
            labeled: self.labeled,
            total: self.total,
            codes: self.codes,
            latent: self.latent,
            misspec: self.misspec,
            zero_inflation: self.zero_inflation,
            seed,
        }
    }
}

/// A full sweep description, loadable from a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkGrid {
    pub replications: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub cells: Vec<CellConfig>,
    /// EM iteration override; None uses the sample-size schedule.
    #[serde(default)]
    pub em_iters: Option<usize>,
}

/// Mean and (sample) standard deviation of one metric across replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some(MeanSd { mean, sd, count: values.len() })
}

/// Per-replication evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub seed: u64,
    pub err_b: f64,
    pub err_lambda: f64,
    pub err_theta: f64,
    pub cosine: f64,
    pub auc: Option<f64>,
    pub prauc: Option<f64>,
    pub brier: Option<f64>,
    /// EM objective trace (absent for the supervised method).
    pub of_trace: Option<Vec<f64>>,
    /// Per-iteration estimation error trace (absent for supervised).
    pub err_trace: Option<Vec<f64>>,
    pub plateau_iter: Option<usize>,
}

/// Aggregated metrics for one (cell, method) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub cell: CellConfig,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    /// Signal-to-noise ratio of the generating parameters.
    pub snr_truth: f64,
    pub err_b: Option<MeanSd>,
    pub err_lambda: Option<MeanSd>,
    pub err_theta: Option<MeanSd>,
    pub cosine: Option<MeanSd>,
    pub auc: Option<MeanSd>,
    pub prauc: Option<MeanSd>,
    pub brier: Option<MeanSd>,
    /// Mean estimation-error trace across replications (traces padded with
    /// their final value to a common length before averaging).
    pub err_trace_mean: Option<Vec<f64>>,
    pub per_rep: Vec<RepRecord>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic per-(cell, replication) seed derivation.
pub fn derive_seed(base: u64, cell: usize, rep: usize) -> u64 {
    splitmix64(splitmix64(base ^ splitmix64(cell as u64 + 1)).wrapping_add(rep as u64 + 1))
}

fn eval_embeddings(embeddings: &[EmbeddingEstimate], truth: &SimTruth) -> Result<f64> {
    let q = truth.xi_bar.nrows();
    let e_hat = nalgebra::DMatrix::from_fn(q, embeddings.len(), |k, i| embeddings[i].e[k]);
    cosine_embeddings(&e_hat, &truth.xi_bar)
}

fn classification_record(
    scores: &[f64],
    data: &Dataset,
    truth: &SimTruth,
) -> (Option<f64>, Option<f64>, Option<f64>) {
    let unlabeled = data.unlabeled_indices();
    if unlabeled.is_empty() || scores.len() != unlabeled.len() {
        return (None, None, None);
    }
    let labels: Vec<u8> = unlabeled.iter().map(|&i| truth.labels_full[i]).collect();
    match classification_metrics(scores, &labels) {
        Ok(m) => (m.auc, m.prauc, Some(m.brier)),
        Err(_) => (None, None, None),
    }
}

fn rep_record_from_fit(
    seed: u64,
    theta: &crate::model::ModelParams,
    truth: &SimTruth,
    embeddings: &[EmbeddingEstimate],
    scores: Option<&[f64]>,
    data: &Dataset,
    of_trace: Option<Vec<f64>>,
    err_trace: Option<Vec<f64>>,
    plateau_iter: Option<usize>,
) -> Result<RepRecord> {
    let (auc, prauc, brier) = match scores {
        Some(s) => classification_record(s, data, truth),
        None => (None, None, None),
    };
    Ok(RepRecord {
        seed,
        err_b: rel_fnorm(&theta.effects, &truth.theta0.effects)?,
        err_lambda: rel_fnorm(&theta.latent_cov, &truth.theta0.latent_cov)?,
        err_theta: err_theta(theta, &truth.theta0)?,
        cosine: eval_embeddings(embeddings, truth)?,
        auc,
        prauc,
        brier,
        of_trace,
        err_trace,
        plateau_iter,
    })
}

struct RepOutcome {
    records: Vec<(Method, RepRecord)>,
}

fn run_one_rep(
    cell: &CellConfig,
    basis: &EmbeddingBasis,
    methods: &[Method],
    seed: u64,
    sup_cfg: &SupFitConfig,
    em_cfg: &EmConfig,
) -> Result<RepOutcome> {
    let cfg = cell.sim_config(seed);
    let (data, truth) = gen_dataset_with_basis(&cfg, basis)?;
    let mut records = Vec::new();

    let wants_sup = methods.contains(&Method::Sup);
    let wants_semisup = methods.contains(&Method::Semisup);

    let mut sup_report = None;
    let mut semisup_fit = None;
    if wants_semisup {
        let fit = fit_score(&data, basis, sup_cfg, em_cfg, Some(&truth.theta0))?;
        sup_report = fit.supervised.clone();
        semisup_fit = Some(fit);
    } else if wants_sup {
        let labeled = data.labeled_subset()?;
        sup_report = Some(fit_supervised(&labeled, basis, sup_cfg)?);
    }

    for method in methods {
        match method {
            Method::Sup => {
                let report = sup_report.as_ref().expect("supervised fit available");
                let preds =
                    predict_batch(&report.theta, &data, basis, &sup_cfg.constraints, &sup_cfg.gva)?;
                let embeddings: Vec<EmbeddingEstimate> =
                    preds.iter().map(|p| p.embedding.clone()).collect();
                let scores: Vec<f64> = data
                    .unlabeled_indices()
                    .iter()
                    .map(|&i| preds[i].gamma)
                    .collect();
                records.push((
                    Method::Sup,
                    rep_record_from_fit(
                        seed,
                        &report.theta,
                        &truth,
                        &embeddings,
                        Some(&scores),
                        &data,
                        None,
                        None,
                        None,
                    )?,
                ));
            }
            Method::Semisup => {
                let fit = semisup_fit.as_ref().expect("semisup fit available");
                records.push((
                    Method::Semisup,
                    rep_record_from_fit(
                        seed,
                        &fit.report.theta,
                        &truth,
                        &fit.embeddings,
                        Some(&fit.responsibilities.gamma),
                        &data,
                        Some(fit.report.objective_trace.clone()),
                        fit.report.err_trace.clone(),
                        fit.report.plateau_iter,
                    )?,
                ));
            }
            Method::Unsup => {
                let fit = fit_unsupervised(&data, basis, sup_cfg, em_cfg, Some(&truth.theta0))?;
                // Classification scores for the unlabeled subset only, so
                // the comparison matches the other methods.
                let unlabeled = data.unlabeled_indices();
                let scores: Vec<f64> =
                    unlabeled.iter().map(|&i| fit.responsibilities.gamma[i]).collect();
                records.push((
                    Method::Unsup,
                    rep_record_from_fit(
                        seed,
                        &fit.report.theta,
                        &truth,
                        &fit.embeddings,
                        Some(&scores),
                        &data,
                        Some(fit.report.objective_trace.clone()),
                        fit.report.err_trace.clone(),
                        fit.report.plateau_iter,
                    )?,
                ));
            }
        }
    }
    Ok(RepOutcome { records })
}

fn aggregate(
    cell: &CellConfig,
    method: Method,
    replications: usize,
    snr_truth: f64,
    reps: Vec<RepRecord>,
    failures: usize,
) -> BenchmarkResult {
    let collect = |f: &dyn Fn(&RepRecord) -> Option<f64>| -> Vec<f64> {
        reps.iter().filter_map(f).collect()
    };
    let err_trace_mean = {
        let traces: Vec<&Vec<f64>> = reps.iter().filter_map(|r| r.err_trace.as_ref()).collect();
        if traces.is_empty() {
            None
        } else {
            let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
            let mut mean = vec![0.0; len];
            for t in &traces {
                for (k, slot) in mean.iter_mut().enumerate() {
                    *slot += t.get(k).copied().or(t.last().copied()).unwrap_or(0.0);
                }
            }
            for slot in mean.iter_mut() {
                *slot /= traces.len() as f64;
            }
            Some(mean)
        }
    };
    BenchmarkResult {
        cell: *cell,
        method,
        replications,
        failures,
        snr_truth,
        err_b: mean_sd(&collect(&|r| Some(r.err_b))),
        err_lambda: mean_sd(&collect(&|r| Some(r.err_lambda))),
        err_theta: mean_sd(&collect(&|r| Some(r.err_theta))),
        cosine: mean_sd(&collect(&|r| Some(r.cosine))),
        auc: mean_sd(&collect(&|r| r.auc)),
        prauc: mean_sd(&collect(&|r| r.prauc)),
        brier: mean_sd(&collect(&|r| r.brier)),
        err_trace_mean,
        per_rep: reps,
    }
}

/// Runs the sweep. `threads` bounds the rayon pool used for the run; None
/// uses the ambient pool. Individual replication failures are recorded in
/// the result rather than aborting the sweep.
pub fn run_benchmark(
    grid: &BenchmarkGrid,
    sup_cfg: &SupFitConfig,
    threads: Option<usize>,
) -> Result<Vec<BenchmarkResult>> {
    if grid.replications < 1 {
        return Err(ScoreError::InvalidArgument("replications must be >= 1".into()));
    }
    if grid.methods.is_empty() || grid.cells.is_empty() {
        return Err(ScoreError::InvalidArgument(
            "benchmark grid needs at least one method and one cell".into(),
        ));
    }
    let em_cfg = EmConfig { iters: grid.em_iters, ..Default::default() };
    let run = || -> Result<Vec<BenchmarkResult>> {
        let mut results = Vec::new();
        for (cell_idx, cell) in grid.cells.iter().enumerate() {
            cell.sim_config(0).validate()?;
            let basis = gen_basis(cell.codes, cell.latent)?;
            let snr_truth = snr(&crate::simulate::benchmark_theta(cell.latent))?;
            let outcomes: Vec<Result<RepOutcome>> = (0..grid.replications)
                .into_par_iter()
                .map(|rep| {
                    let seed = derive_seed(grid.base_seed, cell_idx, rep);
                    run_one_rep(cell, &basis, &grid.methods, seed, sup_cfg, &em_cfg)
                })
                .collect();
            let mut per_method: Vec<(Method, Vec<RepRecord>)> =
                grid.methods.iter().map(|&m| (m, Vec::new())).collect();
            let mut failures = 0usize;
            for outcome in outcomes {
                match outcome {
                    Ok(out) => {
                        for (m, rec) in out.records {
                            if let Some(slot) =
                                per_method.iter_mut().find(|(mm, _)| *mm == m)
                            {
                                slot.1.push(rec);
                            }
                        }
                    }
                    Err(_) => failures += 1,
                }
            }
            for (m, reps) in per_method {
                results.push(aggregate(cell, m, grid.replications, snr_truth, reps, failures));
            }
        }
        Ok(results)
    };
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().map_err(|e| {
                ScoreError::InvalidArgument(format!("cannot build thread pool: {e}"))
            })?;
            pool.install(run)
        }
        None => run(),
    }
}

/// Flat tab-separated table of the aggregated results (one row per cell ×
/// method), ready for plotting.
pub fn results_tsv(results: &[BenchmarkResult]) -> String {
    let mut out = String::from(
        "labeled\ttotal\tcodes\tlatent\tmisspec\tzero_inflation\tmethod\treplications\tfailures\tsnr\t\
         err_b_mean\terr_b_sd\terr_lambda_mean\terr_lambda_sd\terr_theta_mean\terr_theta_sd\t\
         cosine_mean\tcosine_sd\tauc_mean\tauc_sd\tprauc_mean\tprauc_sd\tbrier_mean\tbrier_sd\n",
    );
    let fmt = |m: &Option<MeanSd>| -> (String, String) {
        match m {
            Some(ms) => (format!("{}", ms.mean), format!("{}", ms.sd)),
            None => ("NA".into(), "NA".into()),
        }
    };
    for r in results {
        let cols: Vec<(String, String)> = vec![
            fmt(&r.err_b),
            fmt(&r.err_lambda),
            fmt(&r.err_theta),
            fmt(&r.cosine),
            fmt(&r.auc),
            fmt(&r.prauc),
            fmt(&r.brier),
        ];
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:?}\t{}\t{}\t{}\t{}\t{}",
            r.cell.labeled,
            r.cell.total,
            r.cell.codes,
            r.cell.latent,
            r.cell.misspec,
            r.cell.zero_inflation,
            r.method,
            r.replications,
            r.failures,
            r.snr_truth,
        ));
        for (mean, sd) in cols {
            out.push('\t');
            out.push_str(&mean);
            out.push('\t');
            out.push_str(&sd);
        }
        out.push('\n');
    }
    out
}
