//! Hybrid EM estimator using labeled and unlabeled subjects.
//!
//! The algorithm starts from the supervised estimator fit on the labeled
//! subset, gives every unlabeled subject a variational state per label
//! hypothesis, and then alternates:
//!
//! - E-step: refit all states at the current θ and set each unlabeled
//!   subject's responsibility to `σ(Q(1) − Q(0))` (log-space softmax of the
//!   profiled objectives);
//! - M-step: maximize the responsibility-weighted ELBO sum over θ and all
//!   states by alternating blockwise θ updates with state refits until the
//!   pass objective plateaus.
//!
//! An unsupervised variant skips the supervised initializer, ignores label
//! values entirely and treats every subject as unlabeled; it exists for
//! ablation comparisons.

use std::time::Instant;

use rayon::prelude::*;

use crate::basis::EmbeddingBasis;
use crate::engine::{BranchMode, Engine};
use crate::error::{Result, ScoreError};
use crate::gva::{default_start, solve_branch, SolverWorkspace};
use crate::metrics::err_theta;
use crate::model::{ConstraintSpec, Dataset, ModelParams};
use crate::objective::{expit, ElboContext};
use crate::predict::EmbeddingEstimate;
use crate::supervised::{fit_supervised, weighted_ls_init, FitReport, SupFitConfig};

/// Relative objective change treated as an EM plateau (reported, and used
/// for nothing else).
const PLATEAU_TOL: f64 = 1e-7;

/// Controls for the EM loop.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EmConfig {
    /// Number of EM iterations; None resolves to
    /// `max(10, ceil(5 ln(N / n)))`.
    pub iters: Option<usize>,
    /// Responsibilities are clamped into `[floor, 1 − floor]`.
    pub gamma_floor: f64,
    /// Cap on M-step passes (one pass = θ update + full state refit).
    pub m_max_passes: usize,
    /// Relative objective-change tolerance ending an M-step early.
    pub m_tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { iters: None, gamma_floor: 1e-12, m_max_passes: 50, m_tol: 1e-6 }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.iters {
            if t < 1 {
                return Err(ScoreError::InvalidArgument("EM iterations must be >= 1".into()));
            }
        }
        if !(0.0..0.5).contains(&self.gamma_floor) {
            return Err(ScoreError::InvalidArgument(
                "gamma_floor must lie in [0, 0.5)".into(),
            ));
        }
        if self.m_max_passes < 1 {
            return Err(ScoreError::InvalidArgument("m_max_passes must be >= 1".into()));
        }
        Ok(())
    }

    /// The iteration count actually used, given sample sizes.
    pub fn resolved_iters(&self, n_total: usize, n_labeled: usize) -> usize {
        self.iters.unwrap_or_else(|| {
            let n = n_labeled.max(1) as f64;
            let t = (5.0 * (n_total as f64 / n).ln()).ceil() as usize;
            t.max(10)
        })
    }
}

/// Estimated class-membership probabilities for the unlabeled subjects, in
/// the order of [`Dataset::unlabeled_indices`].
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub gamma: Vec<f64>,
}

/// Result of a semi-supervised (or unsupervised) fit.
#[derive(Debug, Clone)]
pub struct ScoreFit {
    /// The EM fit itself; `theta` is the final estimator.
    pub report: FitReport,
    /// The supervised initializer's report (absent for the unsupervised
    /// variant).
    pub supervised: Option<FitReport>,
    /// Final-iteration responsibilities for the unlabeled subjects.
    pub responsibilities: Responsibilities,
    /// Per-subject embeddings at the final estimator, for all subjects.
    pub embeddings: Vec<EmbeddingEstimate>,
}

/// One E-step at the given parameters: fresh variational fits for both
/// label hypotheses of every unlabeled subject, then log-space softmax.
pub fn e_step(
    theta: &ModelParams,
    data: &Dataset,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
    gva_cfg: &crate::gva::GvaFitConfig,
    gamma_floor: f64,
) -> Result<Responsibilities> {
    if data.unlabeled_indices().is_empty() {
        return Err(ScoreError::InsufficientData("no unlabeled subjects".into()));
    }
    let mut engine = Engine::new(
        data,
        basis,
        theta.clone(),
        *constraints,
        *gva_cfg,
        BranchMode::SemiSupervised,
    )?;
    engine.refit()?;
    Ok(Responsibilities { gamma: engine.gammas(gamma_floor) })
}

/// One M-step from the given parameters and responsibilities: maximizes the
/// weighted ELBO sum over θ and all variational states.
pub fn m_step(
    theta_prev: &ModelParams,
    data: &Dataset,
    basis: &EmbeddingBasis,
    gamma: &Responsibilities,
    constraints: &ConstraintSpec,
    gva_cfg: &crate::gva::GvaFitConfig,
    em: &EmConfig,
) -> Result<ModelParams> {
    em.validate()?;
    let mut engine = Engine::new(
        data,
        basis,
        theta_prev.clone(),
        *constraints,
        *gva_cfg,
        BranchMode::SemiSupervised,
    )?;
    if gamma.gamma.len() != engine.two_branch.len() {
        return Err(ScoreError::DimensionMismatch(format!(
            "got {} responsibilities for {} unlabeled subjects",
            gamma.gamma.len(),
            engine.two_branch.len()
        )));
    }
    if gamma.gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(ScoreError::InvalidArgument(
            "responsibilities must lie in [0, 1]".into(),
        ));
    }
    engine.set_weights(&gamma.gamma);
    let mut prev = engine.refit()?;
    for _ in 0..em.m_max_passes {
        engine.update_theta()?;
        let obj = engine.refit()?;
        if (obj - prev).abs() <= em.m_tol * (1.0 + obj.abs()) {
            break;
        }
        prev = obj;
    }
    Ok(engine.theta.clone())
}

/// Embeddings for every subject at the engine's current θ and states.
/// Two-branch subjects use their fitted states directly; single-branch
/// (labeled) subjects get the missing label hypothesis fit on demand.
fn all_subject_embeddings(engine: &Engine<'_>, floor: f64) -> Result<Vec<EmbeddingEstimate>> {
    let p = engine.basis.p();
    let q = engine.basis.q();
    let cap = engine.constraints.mean_cap(p, q);
    let missing: Vec<Result<Option<(f64, nalgebra::DVector<f64>)>>> = engine
        .subjects
        .par_iter()
        .enumerate()
        .map_init(
            || SolverWorkspace::new(p, q),
            |ws, (i, slot)| {
                if slot.branches.len() == 2 {
                    return Ok(None);
                }
                let have = slot.branches[0].y;
                let miss = 1 - have;
                let sub = &engine.pre.subjects[i];
                let ctx = ElboContext::new(
                    engine.basis,
                    &engine.prep,
                    &engine.theta,
                    sub.vtx.clone(),
                    sub.log_fact,
                    &sub.ubar,
                    &sub.ubar_y[miss as usize],
                    miss,
                    engine.constraints.eta_clip,
                );
                let (mut mean, mut var) = default_start(&sub.proxy, &ctx.shift, q);
                let out = solve_branch(
                    &ctx,
                    &engine.gva_cfg,
                    cap,
                    &mut mean,
                    &mut var,
                    None,
                    ws,
                )
                .map_err(|e| ScoreError::SubjectFit { subject: i, msg: e.to_string() })?;
                Ok(Some((out.value, mean)))
            },
        )
        .collect();

    let mut out = Vec::with_capacity(engine.subjects.len());
    for (i, (slot, extra)) in engine.subjects.iter().zip(missing).enumerate() {
        let sub = &engine.pre.subjects[i];
        let base = |y: usize, mean: &nalgebra::DVector<f64>| {
            &engine.theta.effects * &sub.ubar_y[y] + mean
        };
        let emb = if slot.branches.len() == 2 {
            let b = &slot.branches;
            let gamma = expit(b[1].value - b[0].value).clamp(floor, 1.0 - floor);
            EmbeddingEstimate::combine(base(0, &b[0].state.mean), base(1, &b[1].state.mean), gamma)
        } else {
            let have = &slot.branches[0];
            let (miss_val, miss_mean) = extra?.expect("single-branch subject has a missing fit");
            let (v0, v1, m0, m1) = if have.y == 0 {
                (have.value, miss_val, &have.state.mean, &miss_mean)
            } else {
                (miss_val, have.value, &miss_mean, &have.state.mean)
            };
            let gamma = expit(v1 - v0).clamp(floor, 1.0 - floor);
            EmbeddingEstimate::combine(base(0, m0), base(1, m1), gamma)
        };
        out.push(emb);
    }
    Ok(out)
}

struct EmOutcome {
    report: FitReport,
    responsibilities: Responsibilities,
    embeddings: Vec<EmbeddingEstimate>,
}

fn run_em(
    mut engine: Engine<'_>,
    em: &EmConfig,
    n_labeled_for_schedule: usize,
    truth: Option<&ModelParams>,
    start: Instant,
    mut warnings: Vec<String>,
) -> Result<EmOutcome> {
    let n_total = engine.subjects.len();
    let t_iters = em.resolved_iters(n_total, n_labeled_for_schedule);
    let mut of_trace: Vec<f64> = Vec::with_capacity(t_iters);
    let mut err_trace = truth.map(|_| Vec::with_capacity(t_iters));
    let mut plateau_iter = None;

    for t in 1..=t_iters {
        // E-step: refit states at the current θ, then reweight.
        engine.refit()?;
        let gammas = engine.gammas(em.gamma_floor);
        engine.set_weights(&gammas);

        // M-step: alternate θ updates with full refits.
        let mut prev = engine.objective();
        let mut obj = prev;
        for _ in 0..em.m_max_passes {
            engine.update_theta()?;
            obj = engine.refit()?;
            if (obj - prev).abs() <= em.m_tol * (1.0 + obj.abs()) {
                break;
            }
            prev = obj;
        }

        if let Some(&last) = of_trace.last() {
            if obj < last - 1e-6 {
                warnings.push(format!(
                    "objective decreased at EM iteration {t}: {last} -> {obj}"
                ));
            }
            if plateau_iter.is_none() && (obj - last).abs() <= PLATEAU_TOL * (1.0 + obj.abs()) {
                plateau_iter = Some(t);
            }
        }
        of_trace.push(obj);
        if let (Some(trace), Some(theta0)) = (err_trace.as_mut(), truth) {
            trace.push(err_theta(&engine.theta, theta0)?);
        }
    }

    // Final E-step at the final estimator; this also leaves every state
    // refit at θ̂ for the embeddings below.
    engine.refit()?;
    let responsibilities = Responsibilities { gamma: engine.gammas(em.gamma_floor) };
    let embeddings = all_subject_embeddings(&engine, em.gamma_floor)?;

    let report = FitReport {
        theta: engine.theta.clone(),
        objective_trace: of_trace,
        converged: plateau_iter.is_some(),
        iterations: t_iters,
        clamp_count: engine.clamp_count,
        wall_time: start.elapsed(),
        err_trace,
        plateau_iter,
        warnings,
    };
    Ok(EmOutcome { report, responsibilities, embeddings })
}

/// The full semi-supervised estimator: supervised initialization on the
/// labeled subset, then EM over the whole sample. When `truth` is given
/// (simulation mode) the report carries a per-iteration estimation-error
/// trace.
pub fn fit_score(
    data: &Dataset,
    basis: &EmbeddingBasis,
    sup_cfg: &SupFitConfig,
    em: &EmConfig,
    truth: Option<&ModelParams>,
) -> Result<ScoreFit> {
    sup_cfg.validate()?;
    em.validate()?;
    let n_labeled = data.n_labeled();
    if n_labeled == data.n_subjects() {
        return Err(ScoreError::InsufficientData(
            "semi-supervised fit needs unlabeled subjects".into(),
        ));
    }
    let start = Instant::now();
    let labeled = data.labeled_subset()?;
    let sup_report = fit_supervised(&labeled, basis, sup_cfg)?;

    let engine = Engine::new(
        data,
        basis,
        sup_report.theta.clone(),
        sup_cfg.constraints,
        sup_cfg.gva,
        BranchMode::SemiSupervised,
    )?;
    let out = run_em(engine, em, n_labeled, truth, start, Vec::new())?;
    Ok(ScoreFit {
        report: out.report,
        supervised: Some(sup_report),
        responsibilities: out.responsibilities,
        embeddings: out.embeddings,
    })
}

/// Ablation variant: no supervised initialization and no label usage. All
/// subjects are treated as unlabeled (responsibilities start at 1/2) and
/// the starting point comes from the label-free least-squares rule.
pub fn fit_unsupervised(
    data: &Dataset,
    basis: &EmbeddingBasis,
    sup_cfg: &SupFitConfig,
    em: &EmConfig,
    truth: Option<&ModelParams>,
) -> Result<ScoreFit> {
    sup_cfg.validate()?;
    em.validate()?;
    let start = Instant::now();
    let half_weights: Vec<Vec<(u8, f64)>> =
        (0..data.n_subjects()).map(|_| vec![(0, 0.5), (1, 0.5)]).collect();
    let (theta0, ridged) = weighted_ls_init(data, basis, &half_weights)?;
    let mut warnings = Vec::new();
    if ridged {
        warnings.push("ridge fallback used during initialization".to_string());
    }
    let engine = Engine::new(
        data,
        basis,
        theta0,
        sup_cfg.constraints,
        sup_cfg.gva,
        BranchMode::AllUnlabeled,
    )?;
    let out = run_em(engine, em, data.n_labeled(), truth, start, warnings)?;
    Ok(ScoreFit {
        report: out.report,
        supervised: None,
        responsibilities: out.responsibilities,
        embeddings: out.embeddings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gva::GvaFitConfig;
    use crate::simulate::{gen_dataset, Misspec, SimConfig};
    use nalgebra::{dvector, DMatrix};

    fn sim(labeled: usize, total: usize, p: usize, q: usize, seed: u64) -> SimConfig {
        SimConfig {
            labeled,
            total,
            codes: p,
            latent: q,
            misspec: Misspec::None,
            zero_inflation: 0.0,
            seed,
        }
    }

    #[test]
    fn symmetric_model_gives_uniform_responsibilities() {
        let (data, truth) = gen_dataset(&sim(8, 40, 16, 2, 21)).unwrap();
        let mut theta = truth.theta0.clone();
        theta.effects.column_mut(2).fill(0.0);
        theta.logit_coef.fill(0.0);
        let resp = e_step(
            &theta,
            &data,
            &truth.basis,
            &ConstraintSpec::default(),
            &GvaFitConfig::default(),
            1e-12,
        )
        .unwrap();
        assert_eq!(resp.gamma.len(), 32);
        for g in resp.gamma {
            assert!((g - 0.5).abs() < 1e-6, "gamma {g} not 1/2");
        }
    }

    #[test]
    fn log_space_softmax_avoids_underflow() {
        let g = expit(-50.0f64);
        assert!(g > 0.0 && g < 1e-21);
        assert!((g - 1.93e-22).abs() < 0.1e-22);
    }

    #[test]
    fn indicator_weights_reproduce_supervised_pass() {
        // A fully observed dataset fit two ways: (a) labeled-only machinery;
        // (b) all subjects unlabeled with responsibilities equal to the true
        // labels. Both must take the same θ update given the same states.
        let (data, truth) = gen_dataset(&sim(24, 24, 14, 2, 33)).unwrap();
        let cons = ConstraintSpec::default();
        let gva = GvaFitConfig::default();
        let theta0 = crate::supervised::init_supervised(&data, &truth.basis).unwrap().theta;

        let mut labeled_engine = Engine::new(
            &data,
            &truth.basis,
            theta0.clone(),
            cons,
            gva,
            BranchMode::Labeled,
        )
        .unwrap();
        labeled_engine.refit().unwrap();
        labeled_engine.update_theta().unwrap();

        let unlabeled = Dataset::new(
            data.ids().to_vec(),
            data.counts().clone(),
            data.covariates().clone(),
            vec![None; data.n_subjects()],
        )
        .unwrap();
        let mut weighted_engine = Engine::new(
            &unlabeled,
            &truth.basis,
            theta0,
            cons,
            gva,
            BranchMode::SemiSupervised,
        )
        .unwrap();
        let gammas: Vec<f64> =
            (0..data.n_subjects()).map(|i| data.label(i).unwrap() as f64).collect();
        weighted_engine.set_weights(&gammas);
        weighted_engine.refit().unwrap();
        weighted_engine.update_theta().unwrap();

        assert_eq!(labeled_engine.theta.effects, weighted_engine.theta.effects);
        assert_eq!(labeled_engine.theta.latent_cov, weighted_engine.theta.latent_cov);
        assert_eq!(labeled_engine.theta.logit_coef, weighted_engine.theta.logit_coef);
    }

    #[test]
    fn lambda_update_direct_formula() {
        // One unlabeled subject with γ = 1: Λ = m m ᵀ + diag(s) from the
        // y = 1 branch alone.
        let (data, truth) = gen_dataset(&sim(0, 1, 10, 2, 5)).unwrap();
        let mut engine = Engine::new(
            &data,
            &truth.basis,
            ModelParams::zeros(2, 1),
            ConstraintSpec::default(),
            GvaFitConfig::default(),
            BranchMode::SemiSupervised,
        )
        .unwrap();
        engine.set_weights(&[1.0]);
        let v = dvector![0.4, -0.9];
        engine.subjects[0].branches[1].state.mean = v.clone();
        engine.subjects[0].branches[1].state.var = dvector![0.25, 0.25];
        engine.update_theta().unwrap();
        let expect = &v * v.transpose() + DMatrix::identity(2, 2) * 0.25;
        assert!((engine.theta.latent_cov.clone() - expect).amax() < 1e-14);
    }

    #[test]
    fn m_step_weighted_effects_gradient_matches_finite_differences() {
        // γ = 1/2 everywhere: the engine's aggregated effects gradient must
        // match central finite differences of the weighted objective.
        let (data, truth) = gen_dataset(&sim(4, 12, 10, 2, 55)).unwrap();
        let cons = ConstraintSpec::default();
        let gva = GvaFitConfig { tol: 1e-10, ..Default::default() };
        let theta = crate::simulate::benchmark_theta(2);
        let mut engine =
            Engine::new(&data, &truth.basis, theta, cons, gva, BranchMode::SemiSupervised)
                .unwrap();
        engine.refit().unwrap();

        // Aggregate the analytic gradient.
        let mut grad = DMatrix::zeros(2, 3);
        for (i, slot) in engine.subjects.iter().enumerate() {
            for b in &slot.branches {
                grad.ger(b.weight, &b.resid, &engine.pre.subjects[i].ubar_y[b.y as usize], 1.0);
            }
        }

        // Finite differences of the fixed-state weighted objective.
        let eval = |effects: &DMatrix<f64>| -> f64 {
            let mut theta = engine.theta.clone();
            theta.effects = effects.clone();
            let prep = crate::objective::PreparedTheta::new(&theta).unwrap();
            let mut ws = crate::objective::ElboWorkspace::new(10, 2);
            let mut total = 0.0;
            for (i, slot) in engine.subjects.iter().enumerate() {
                let sub = &engine.pre.subjects[i];
                for b in &slot.branches {
                    let ctx = ElboContext::new(
                        &truth.basis,
                        &prep,
                        &theta,
                        sub.vtx.clone(),
                        sub.log_fact,
                        &sub.ubar,
                        &sub.ubar_y[b.y as usize],
                        b.y,
                        cons.eta_clip,
                    );
                    let (v, _) = ctx.value(&b.state.mean, &b.state.var, &mut ws);
                    total += b.weight * v;
                }
            }
            total
        };
        let h = 1e-5;
        for r in 0..2 {
            for c in 0..3 {
                let mut ep = engine.theta.effects.clone();
                ep[(r, c)] += h;
                let mut em_ = engine.theta.effects.clone();
                em_[(r, c)] -= h;
                let fd = (eval(&ep) - eval(&em_)) / (2.0 * h);
                let rel = (grad[(r, c)] - fd).abs() / (1.0 + fd.abs());
                assert!(rel < 1e-5, "grad[{r},{c}] = {} vs fd {}", grad[(r, c)], fd);
            }
        }
    }

    #[test]
    fn unsupervised_ignores_label_values() {
        let (data, truth) = gen_dataset(&sim(10, 30, 12, 2, 66)).unwrap();
        // Permute (here: flip) the label values; the unsupervised fit must
        // not change at all.
        let flipped: Vec<Option<u8>> =
            data.labels().iter().map(|l| l.map(|y| 1 - y)).collect();
        let data_flipped = Dataset::new(
            data.ids().to_vec(),
            data.counts().clone(),
            data.covariates().clone(),
            flipped,
        )
        .unwrap();
        let sup_cfg = SupFitConfig::default();
        let em = EmConfig { iters: Some(3), ..Default::default() };
        let a = fit_unsupervised(&data, &truth.basis, &sup_cfg, &em, None).unwrap();
        let b = fit_unsupervised(&data_flipped, &truth.basis, &sup_cfg, &em, None).unwrap();
        assert_eq!(a.report.theta.effects, b.report.theta.effects);
        assert_eq!(a.report.objective_trace, b.report.objective_trace);
    }

    #[test]
    fn em_objective_trace_monotone_small_case() {
        let (data, truth) = gen_dataset(&sim(12, 60, 16, 2, 91)).unwrap();
        let sup_cfg = SupFitConfig::default();
        let em = EmConfig { iters: Some(6), ..Default::default() };
        let fit =
            fit_score(&data, &truth.basis, &sup_cfg, &em, Some(&truth.theta0)).unwrap();
        let trace = &fit.report.objective_trace;
        assert_eq!(trace.len(), 6);
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "EM objective decreased: {} -> {}", w[0], w[1]);
        }
        assert!(fit.report.warnings.is_empty(), "{:?}", fit.report.warnings);
        assert_eq!(fit.responsibilities.gamma.len(), 48);
        assert_eq!(fit.embeddings.len(), 60);
        let err = fit.report.err_trace.as_ref().unwrap();
        assert_eq!(err.len(), 6);
    }

    #[test]
    fn rejects_fully_labeled_input() {
        let (data, truth) = gen_dataset(&sim(20, 20, 12, 2, 13)).unwrap();
        assert!(matches!(
            fit_score(
                &data,
                &truth.basis,
                &SupFitConfig::default(),
                &EmConfig::default(),
                None
            ),
            Err(ScoreError::InsufficientData(_))
        ));
    }

    #[test]
    fn default_iteration_schedule() {
        let em = EmConfig::default();
        assert_eq!(em.resolved_iters(5000, 50), 24);
        assert_eq!(em.resolved_iters(1000, 50), 15);
        assert_eq!(em.resolved_iters(100, 50), 10);
        let fixed = EmConfig { iters: Some(7), ..Default::default() };
        assert_eq!(fixed.resolved_iters(5000, 50), 7);
    }

    #[test]
    fn missing_branch_embeddings_are_consistent() {
        // Labeled subjects' embeddings use a freshly fit opposite branch;
        // spot-check the convex-combination structure.
        let (data, truth) = gen_dataset(&sim(6, 18, 12, 2, 101)).unwrap();
        let sup_cfg = SupFitConfig::default();
        let em = EmConfig { iters: Some(2), ..Default::default() };
        let fit = fit_score(&data, &truth.basis, &sup_cfg, &em, None).unwrap();
        for emb in &fit.embeddings {
            let rebuilt = &emb.e0 * (1.0 - emb.gamma) + &emb.e1 * emb.gamma;
            assert_eq!(rebuilt, emb.e);
        }
    }
}
