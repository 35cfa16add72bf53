//! Seeded synthetic-data generator with ground truth.
//!
//! Generates datasets from the count factor model with the benchmark
//! constants: basis from the eigendecomposition of the AR(0.5) matrix,
//! `Λ₀ = 4·(0.1^|i−j|)`, effect columns `(0, 0.2, 0.8)·1_q`, covariate
//! `U ~ Poisson(2)` and label `Y ~ Bernoulli(expit(−0.2 + 0.5 U))`. Optional
//! robustness variants add a hidden binary factor (model misspecification)
//! or zero-inflate the counts before emission.
//!
//! Randomness: one ChaCha12 generator keyed from the config seed, with the
//! 64-bit stream counter used for splitting — stream 0 draws the labeled
//! mask, stream i+1 drives subject i. Subject generation is therefore
//! parallelizable with bitwise-identical output at any thread count.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::EmbeddingBasis;
use crate::error::{Result, ScoreError};
use crate::model::{Dataset, ModelParams};
use crate::objective::expit;

/// Kind of generative misspecification (a hidden binary factor in the
/// latent mean that the fitted model does not know about).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Misspec {
    #[default]
    None,
    Weak,
    Strong,
}

impl Misspec {
    fn hidden_effect(self) -> Option<f64> {
        match self {
            Misspec::None => None,
            Misspec::Weak => Some(0.2),
            Misspec::Strong => Some(0.6),
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of subjects with observed labels (n).
    pub labeled: usize,
    /// Total number of subjects (N).
    pub total: usize,
    /// Number of codes (p).
    pub codes: usize,
    /// Latent dimension (q).
    pub latent: usize,
    #[serde(default)]
    pub misspec: Misspec,
    #[serde(default)]
    pub zero_inflation: f64,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.labeled > self.total {
            return Err(ScoreError::InvalidArgument(format!(
                "labeled {} exceeds total {}",
                self.labeled, self.total
            )));
        }
        if self.latent == 0 || self.latent >= self.codes {
            return Err(ScoreError::DimensionMismatch(format!(
                "need 0 < latent < codes, got latent={}, codes={}",
                self.latent, self.codes
            )));
        }
        if !(0.0..1.0).contains(&self.zero_inflation) {
            return Err(ScoreError::InvalidArgument(format!(
                "zero_inflation must lie in [0, 1), got {}",
                self.zero_inflation
            )));
        }
        Ok(())
    }
}

/// Ground truth retained by the generator for evaluation.
#[derive(Debug, Clone)]
pub struct SimTruth {
    pub theta0: ModelParams,
    pub basis: EmbeddingBasis,
    /// True subject embeddings `ξ̄_i = B₀ u_{Y_i} + W_i`, q×N (subjects as
    /// columns). Under misspecification the hidden-factor shift is *not*
    /// included here; it is reconstructable from `hidden`.
    pub xi_bar: DMatrix<f64>,
    /// The random effects W, q×N.
    pub w: DMatrix<f64>,
    /// All labels, including those masked in the dataset.
    pub labels_full: Vec<u8>,
    /// Hidden misspecification factor per subject, when generated.
    pub hidden: Option<Vec<u8>>,
    pub config: SimConfig,
}

/// The benchmark's true parameters for a given latent dimension.
pub fn benchmark_theta(q: usize) -> ModelParams {
    let mut effects = DMatrix::zeros(q, 3);
    effects.column_mut(1).fill(0.2);
    effects.column_mut(2).fill(0.8);
    let latent_cov =
        DMatrix::from_fn(q, q, |i, j| 4.0 * 0.1f64.powi((i as i32 - j as i32).abs()));
    let logit_coef = DVector::from_column_slice(&[-0.2, 0.5]);
    ModelParams { effects, latent_cov, logit_coef }
}

/// Basis from the top-q eigenvectors of the AR(0.5) matrix, scaled so
/// `sqrt(q/p) V` is orthonormal. Eigenvector signs are fixed (first entry
/// above 1e-12 in absolute value made positive) so the output is unique.
pub fn gen_basis(p: usize, q: usize) -> Result<EmbeddingBasis> {
    if q == 0 || q >= p {
        return Err(ScoreError::DimensionMismatch(format!(
            "need 0 < q < p, got p={p}, q={q}"
        )));
    }
    let ar = DMatrix::from_fn(p, p, |i, j| 0.5f64.powi((i as i32 - j as i32).abs()));
    let eig = nalgebra::SymmetricEigen::new(ar);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let scale = (p as f64 / q as f64).sqrt();
    let cols: Vec<DVector<f64>> = order[..q]
        .iter()
        .map(|&k| {
            let mut col = eig.eigenvectors.column(k).into_owned();
            if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
                if *first < 0.0 {
                    col.neg_mut();
                }
            }
            col * scale
        })
        .collect();
    EmbeddingBasis::new(DMatrix::from_columns(&cols))
}

struct SubjectDraw {
    u: f64,
    y: u8,
    hidden: u8,
    w: DVector<f64>,
    counts: DVector<f64>,
}

fn rng_key(seed: u64) -> [u8; 32] {
    // SplitMix64 expansion of the 64-bit seed into a ChaCha key.
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_mut(8) {
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    key
}

fn draw_subject(
    key: &[u8; 32],
    subject: usize,
    basis: &EmbeddingBasis,
    chol_l: &DMatrix<f64>,
    theta0: &ModelParams,
    cfg: &SimConfig,
) -> Result<SubjectDraw> {
    let mut rng = ChaCha12Rng::from_seed(*key);
    rng.set_stream(subject as u64 + 1);
    let q = basis.q();
    let p = basis.p();

    let u: f64 = Poisson::new(2.0).unwrap().sample(&mut rng);
    let y = u8::from(rng.gen::<f64>() < expit(-0.2 + 0.5 * u));
    let hidden = match cfg.misspec.hidden_effect() {
        Some(_) => u8::from(rng.gen::<f64>() < 0.4),
        None => 0,
    };
    let z: DVector<f64> = DVector::from_fn(q, |_, _| rng.sample(StandardNormal));
    let w = chol_l * z;

    // Latent mean; the hidden factor shifts every latent coordinate.
    let ubar_y = DVector::from_column_slice(&[1.0, u, y as f64]);
    let mut latent = &theta0.effects * &ubar_y + &w;
    if let Some(c_eff) = cfg.misspec.hidden_effect() {
        if hidden == 1 {
            latent.add_scalar_mut(c_eff);
        }
    }
    let log_rate = basis.matrix() * latent;

    let mut counts = DVector::zeros(p);
    for j in 0..p {
        let rate = log_rate[j].exp();
        if !(rate <= 1e12) {
            return Err(ScoreError::RateOverflow { subject, code: j, rate });
        }
        // Zero-inflation indicator drawn unconditionally so runs that differ
        // only in the inflation probability share their Poisson draws.
        let inflate = rng.gen::<f64>() < cfg.zero_inflation;
        let draw: f64 = Poisson::new(rate.max(1e-300)).unwrap().sample(&mut rng);
        counts[j] = if inflate { 0.0 } else { draw };
    }
    Ok(SubjectDraw { u, y, hidden, w, counts })
}

/// Generates a dataset plus ground truth, computing the basis internally.
pub fn gen_dataset(cfg: &SimConfig) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let basis = gen_basis(cfg.codes, cfg.latent)?;
    gen_dataset_with_basis(cfg, &basis)
}

/// Generates a dataset reusing an existing basis (which must match the
/// configured dimensions); useful when sweeping replications.
pub fn gen_dataset_with_basis(
    cfg: &SimConfig,
    basis: &EmbeddingBasis,
) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    if basis.p() != cfg.codes || basis.q() != cfg.latent {
        return Err(ScoreError::DimensionMismatch(
            "basis dimensions do not match the generator config".into(),
        ));
    }
    let q = cfg.latent;
    let n_total = cfg.total;
    let theta0 = benchmark_theta(q);
    let chol_l = theta0
        .latent_cov
        .clone()
        .cholesky()
        .expect("benchmark latent covariance is SPD")
        .l();
    let key = rng_key(cfg.seed);

    let draws: Vec<Result<SubjectDraw>> = (0..n_total)
        .into_par_iter()
        .map(|i| draw_subject(&key, i, basis, &chol_l, &theta0, cfg))
        .collect();
    let mut subjects = Vec::with_capacity(n_total);
    for d in draws {
        subjects.push(d?);
    }

    // Labeled mask from the reserved stream, independent of the subjects.
    let mut mask_rng = ChaCha12Rng::from_seed(key);
    mask_rng.set_stream(0);
    let mut chosen = index_sample(&mut mask_rng, n_total, cfg.labeled).into_vec();
    chosen.sort_unstable();
    let mut labeled = vec![false; n_total];
    for i in chosen {
        labeled[i] = true;
    }

    let ids: Vec<String> = (0..n_total).map(|i| format!("s{i:06}")).collect();
    let counts = DMatrix::from_columns(
        &subjects.iter().map(|s| s.counts.clone()).collect::<Vec<_>>(),
    );
    let covariates = DMatrix::from_fn(1, n_total, |_, i| subjects[i].u);
    let labels: Vec<Option<u8>> = (0..n_total)
        .map(|i| if labeled[i] { Some(subjects[i].y) } else { None })
        .collect();
    let data = Dataset::new(ids, counts, covariates, labels)?;

    let w = DMatrix::from_columns(&subjects.iter().map(|s| s.w.clone()).collect::<Vec<_>>());
    let mut xi_bar = DMatrix::zeros(q, n_total);
    for i in 0..n_total {
        let ubar_y = DVector::from_column_slice(&[1.0, subjects[i].u, subjects[i].y as f64]);
        xi_bar.set_column(i, &(&theta0.effects * ubar_y + subjects[i].w.clone()));
    }
    let labels_full: Vec<u8> = subjects.iter().map(|s| s.y).collect();
    let hidden = match cfg.misspec {
        Misspec::None => None,
        _ => Some(subjects.iter().map(|s| s.hidden).collect()),
    };
    let truth = SimTruth {
        theta0,
        basis: basis.clone(),
        xi_bar,
        w,
        labels_full,
        hidden,
        config: *cfg,
    };
    Ok((data, truth))
}
