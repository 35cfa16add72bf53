//! Phenotype probability and latent-embedding construction for subjects not
//! seen (or not labeled) during training.
//!
//! For a subject with counts `x` and covariates `u`, both label hypotheses
//! get a fresh variational fit under the fitted model; the phenotype
//! probability is the softmax of the two profiled objectives, evaluated in
//! log space as `σ(Q(1) − Q(0))`, and the embedding is the
//! responsibility-weighted combination of the per-label embeddings
//! `E(y) = B u_y + m(y)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::EmbeddingBasis;
use crate::engine::Precomputed;
use crate::error::{Result, ScoreError};
use crate::gva::{default_start, solve_branch, GvaFitConfig, SolverWorkspace};
use crate::model::{ConstraintSpec, Dataset, ModelParams};
use crate::objective::{expit, ElboContext, PreparedTheta};

/// Responsibilities are kept strictly inside (0, 1).
pub(crate) const GAMMA_FLOOR: f64 = 1e-12;

/// Estimated latent embedding of one subject.
#[derive(Debug, Clone)]
pub struct EmbeddingEstimate {
    /// `(1 − γ) e0 + γ e1`, exactly.
    pub e: DVector<f64>,
    pub e0: DVector<f64>,
    pub e1: DVector<f64>,
    pub gamma: f64,
}

impl EmbeddingEstimate {
    pub fn combine(e0: DVector<f64>, e1: DVector<f64>, gamma: f64) -> Self {
        let e = &e0 * (1.0 - gamma) + &e1 * gamma;
        Self { e, e0, e1, gamma }
    }
}

/// Full per-subject prediction: both profiled objectives, the phenotype
/// probability, and the embedding built from the same two fits.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub gamma: f64,
    pub q0: f64,
    pub q1: f64,
    pub embedding: EmbeddingEstimate,
}

pub(crate) struct BranchFit {
    pub mean: DVector<f64>,
    pub value: f64,
}

/// Fits both label hypotheses for one subject from the default start.
pub(crate) fn fit_both_labels(
    theta: &ModelParams,
    basis: &EmbeddingBasis,
    prep: &PreparedTheta,
    constraints: &ConstraintSpec,
    cfg: &GvaFitConfig,
    vtx: &DVector<f64>,
    proxy: &DVector<f64>,
    log_fact: f64,
    ubar: &DVector<f64>,
    ubar_y: &[DVector<f64>; 2],
    ws: &mut SolverWorkspace,
) -> Result<[BranchFit; 2]> {
    let cap = constraints.mean_cap(basis.p(), basis.q());
    let mut out = Vec::with_capacity(2);
    for y in 0..2u8 {
        let ctx = ElboContext::new(
            basis,
            prep,
            theta,
            vtx.clone(),
            log_fact,
            ubar,
            &ubar_y[y as usize],
            y,
            constraints.eta_clip,
        );
        let (mut mean, mut var) = default_start(proxy, &ctx.shift, basis.q());
        let sol = solve_branch(&ctx, cfg, cap, &mut mean, &mut var, None, ws)?;
        out.push(BranchFit { mean, value: sol.value });
    }
    let [b0, b1] = <[BranchFit; 2]>::try_from(out).map_err(|_| {
        ScoreError::Prediction { subject: "?".into(), msg: "internal branch error".into() }
    })?;
    Ok([b0, b1])
}

fn prediction_from_branches(
    theta: &ModelParams,
    ubar_y: &[DVector<f64>; 2],
    fits: [BranchFit; 2],
) -> Prediction {
    let gamma = expit(fits[1].value - fits[0].value).clamp(GAMMA_FLOOR, 1.0 - GAMMA_FLOOR);
    let e0 = &theta.effects * &ubar_y[0] + &fits[0].mean;
    let e1 = &theta.effects * &ubar_y[1] + &fits[1].mean;
    Prediction {
        gamma,
        q0: fits[0].value,
        q1: fits[1].value,
        embedding: EmbeddingEstimate::combine(e0, e1, gamma),
    }
}

/// Predicts one subject under a fitted model. The two label-hypothesis fits
/// are computed once and shared by the probability and the embedding.
pub fn predict_subject(
    theta: &ModelParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
    cfg: &GvaFitConfig,
) -> Result<Prediction> {
    theta.validate()?;
    constraints.validate()?;
    cfg.validate()?;
    if x.len() != basis.p() || u.len() != theta.r() {
        return Err(ScoreError::DimensionMismatch(
            "prediction input dimensions disagree".into(),
        ));
    }
    let prep = PreparedTheta::new(theta)?;
    let vtx = basis.matrix().tr_mul(x);
    let proxy = {
        let lx = x.map(|v| (1.0 + v).ln());
        basis.matrix().tr_mul(&lx) * (basis.q() as f64 / basis.p() as f64)
    };
    let log_fact = crate::objective::log_factorial_sum(x.as_view());
    let mut ubar = DVector::zeros(theta.r() + 1);
    ubar[0] = 1.0;
    let mut u0 = DVector::zeros(theta.r() + 2);
    u0[0] = 1.0;
    for k in 0..theta.r() {
        ubar[k + 1] = u[k];
        u0[k + 1] = u[k];
    }
    let mut u1 = u0.clone();
    u1[theta.r() + 1] = 1.0;
    let ubar_y = [u0, u1];
    let mut ws = SolverWorkspace::new(basis.p(), basis.q());
    let fits = fit_both_labels(
        theta, basis, &prep, constraints, cfg, &vtx, &proxy, log_fact, &ubar, &ubar_y, &mut ws,
    )?;
    Ok(prediction_from_branches(theta, &ubar_y, fits))
}

/// The phenotype probability `Pr(Y = 1 | x, u)` under the fitted model.
pub fn predict_proba(
    theta: &ModelParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
    cfg: &GvaFitConfig,
) -> Result<f64> {
    Ok(predict_subject(theta, x, u, basis, constraints, cfg)?.gamma)
}

/// The estimated latent embedding for one subject.
pub fn embed(
    theta: &ModelParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
    cfg: &GvaFitConfig,
) -> Result<EmbeddingEstimate> {
    Ok(predict_subject(theta, x, u, basis, constraints, cfg)?.embedding)
}

/// Batch prediction over a dataset (labels, if any, are ignored).
pub fn predict_batch(
    theta: &ModelParams,
    data: &Dataset,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
    cfg: &GvaFitConfig,
) -> Result<Vec<Prediction>> {
    theta.validate()?;
    constraints.validate()?;
    cfg.validate()?;
    if theta.r() != data.n_covariates() {
        return Err(ScoreError::DimensionMismatch(
            "theta covariate dimension disagrees with dataset".into(),
        ));
    }
    let prep = PreparedTheta::new(theta)?;
    let pre = Precomputed::new(data, basis)?;
    let p = basis.p();
    let q = basis.q();
    let results: Vec<Result<Prediction>> = (0..data.n_subjects())
        .into_par_iter()
        .map_init(
            || SolverWorkspace::new(p, q),
            |ws, i| {
                let sub = &pre.subjects[i];
                let fits = fit_both_labels(
                    theta,
                    basis,
                    &prep,
                    constraints,
                    cfg,
                    &sub.vtx,
                    &sub.proxy,
                    sub.log_fact,
                    &sub.ubar,
                    &sub.ubar_y,
                    ws,
                )
                .map_err(|e| ScoreError::Prediction {
                    subject: data.ids()[i].clone(),
                    msg: e.to_string(),
                })?;
                Ok(prediction_from_branches(theta, &sub.ubar_y, fits))
            },
        )
        .collect();
    results.into_iter().collect()
}

/// The oracle posterior `Pr(Y = 1 | ξ̄, U)` under known true parameters:
/// `σ(b₀ᵀū + B_{Y,0}ᵀ Λ₀⁻¹ (ξ̄ − B₀ ū_mid))` with `ū_mid = (1, u, ½)`.
/// Used to validate predictions against the simulator's ground truth.
pub fn posterior_given_embedding(
    theta0: &ModelParams,
    xi: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<f64> {
    let chol = theta0
        .latent_cov
        .clone()
        .cholesky()
        .ok_or_else(|| ScoreError::NotPositiveDefinite("latent_cov".into()))?;
    let by = theta0.label_effect();
    let r = theta0.r();
    let mut ubar = DVector::zeros(r + 1);
    ubar[0] = 1.0;
    let mut umid = DVector::zeros(r + 2);
    umid[0] = 1.0;
    for k in 0..r {
        ubar[k + 1] = u[k];
        umid[k + 1] = u[k];
    }
    umid[r + 1] = 0.5;
    let centered = xi - &theta0.effects * umid;
    let t = theta0.logit_coef.dot(&ubar) + by.dot(&chol.solve(&centered));
    Ok(expit(t))
}

/// Matrix of embeddings (subjects as columns) from a batch of predictions.
pub fn embeddings_matrix(preds: &[Prediction]) -> DMatrix<f64> {
    let q = preds.first().map(|p| p.embedding.e.len()).unwrap_or(0);
    DMatrix::from_fn(q, preds.len(), |k, i| preds[i].embedding.e[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{gen_dataset, Misspec, SimConfig};
    use nalgebra::dvector;

    #[test]
    fn symmetric_model_gives_half() {
        let q = 2;
        let basis = crate::simulate::gen_basis(8, q).unwrap();
        let mut theta = ModelParams::zeros(q, 1);
        theta.effects.column_mut(0).fill(0.1);
        let x = dvector![2.0, 0.0, 1.0, 0.0, 3.0, 0.0, 1.0, 1.0];
        let u = dvector![2.0];
        let gamma = predict_proba(
            &theta,
            &x,
            &u,
            &basis,
            &ConstraintSpec::default(),
            &GvaFitConfig::default(),
        )
        .unwrap();
        assert!((gamma - 0.5).abs() < 1e-12);
    }

    #[test]
    fn forced_negative_prior_pins_embedding_to_e0() {
        let q = 2;
        let basis = crate::simulate::gen_basis(8, q).unwrap();
        let mut theta = ModelParams::zeros(q, 1);
        // B_Y = 0 and a strongly negative prior intercept drive γ → 0.
        theta.logit_coef[0] = -40.0;
        let x = dvector![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 2.0];
        let u = dvector![1.0];
        let pred = predict_subject(
            &theta,
            &x,
            &u,
            &basis,
            &ConstraintSpec::default(),
            &GvaFitConfig::default(),
        )
        .unwrap();
        assert!(pred.gamma < 1e-10);
        assert!((&pred.embedding.e - &pred.embedding.e0).amax() < 1e-12);
    }

    #[test]
    fn convex_combination_exact() {
        let cfg = SimConfig {
            labeled: 10,
            total: 10,
            codes: 12,
            latent: 2,
            misspec: Misspec::None,
            zero_inflation: 0.0,
            seed: 77,
        };
        let (data, truth) = gen_dataset(&cfg).unwrap();
        let preds = predict_batch(
            &truth.theta0,
            &data,
            &truth.basis,
            &ConstraintSpec::default(),
            &GvaFitConfig::default(),
        )
        .unwrap();
        for p in &preds {
            let emb = &p.embedding;
            let rebuilt = &emb.e0 * (1.0 - emb.gamma) + &emb.e1 * emb.gamma;
            assert_eq!(rebuilt, emb.e);
            assert!(p.gamma > 0.0 && p.gamma < 1.0);
            // Componentwise, e lies on the segment [e0, e1].
            for k in 0..emb.e.len() {
                let lo = emb.e0[k].min(emb.e1[k]);
                let hi = emb.e0[k].max(emb.e1[k]);
                assert!(emb.e[k] >= lo - 1e-12 && emb.e[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn oracle_posterior_matches_direct_bayes() {
        // Independent check of the closed form against densities:
        // Pr(Y=1|ξ,U) = σ(bᵀū) N(ξ; B ū₁, Λ) / Σ_y weights.
        let q = 3;
        let mut theta = ModelParams::zeros(q, 1);
        theta.effects = DMatrix::from_fn(q, 3, |i, j| 0.2 * (i + 1) as f64 - 0.1 * j as f64);
        theta.latent_cov = DMatrix::from_fn(q, q, |i, j| {
            4.0 * 0.1f64.powi((i as i32 - j as i32).abs())
        });
        theta.logit_coef = dvector![-0.2, 0.5];
        let u = dvector![2.0];
        let xi = dvector![0.4, -0.6, 1.1];

        let log_gauss = |x: &DVector<f64>, mean: &DVector<f64>| {
            let chol = theta.latent_cov.clone().cholesky().unwrap();
            let d = x - mean;
            let s = chol.solve(&d);
            -0.5 * d.dot(&s)
        };
        let sigma = expit(theta.logit_coef.dot(&dvector![1.0, 2.0]));
        let m1 = &theta.effects * dvector![1.0, 2.0, 1.0];
        let m0 = &theta.effects * dvector![1.0, 2.0, 0.0];
        let w1 = sigma.ln() + log_gauss(&xi, &m1);
        let w0 = (1.0 - sigma).ln() + log_gauss(&xi, &m0);
        let direct = expit(w1 - w0);
        let formula = posterior_given_embedding(&theta, &xi, &u).unwrap();
        assert!((formula - direct).abs() < 1e-12);
    }
}
