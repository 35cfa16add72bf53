//! SCORE: semi-supervised clustering and patient-embedding estimation for
//! high-dimensional count data.
//!
//! The model is a Poisson latent factor mixture: counts `X | Z ~ Poisson(e^Z)`
//! with `Z = V (B u_y + W)`, where `V` is a fixed p×q embedding basis,
//! `u_y = (1, U, Y)` stacks an intercept, baseline covariates and a binary
//! label, `W ~ N(0, Λ)` is a subject-level random effect, and
//! `Y | U ~ Bernoulli(expit(bᵀ(1, U)))`. Labels are observed for a small
//! subset of subjects only.
//!
//! Estimation maximizes a per-subject evidence lower bound (ELBO) over a
//! diagonal Gaussian variational family. The crate provides:
//!
//! - [`objective`]: the closed-form ELBO, its blockwise gradients, and the
//!   model signal-to-noise ratio;
//! - [`quadrature`]: a tensorized Gauss–Hermite oracle for the exact marginal
//!   log-likelihood at small latent dimension (test/validation use);
//! - [`gva`]: the per-subject constrained variational solver;
//! - [`supervised`]: the labeled-only restricted maximum-ELBO estimator;
//! - [`semisup`]: the hybrid EM-GVA estimator using labeled + unlabeled data;
//! - [`predict`]: phenotype probabilities and latent embeddings for new
//!   subjects;
//! - [`simulate`]: the seeded synthetic-data generator with ground truth;
//! - [`metrics`] and [`benchmark`]: evaluation quantities and the replicated
//!   simulation sweep runner;
//! - [`io`]: the on-disk dataset / basis / model / metrics formats.

pub mod basis;
pub mod benchmark;
mod engine;
pub mod error;
pub mod gva;
pub mod io;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod predict;
pub mod quadrature;
pub mod semisup;
pub mod simulate;
pub mod supervised;

pub use basis::{orthonormalize_basis, EmbeddingBasis};
pub use error::ScoreError;
pub use gva::{fit_gva_subject, profile_q, GvaFit, GvaFitConfig};
pub use metrics::{
    classification_metrics, cosine_embeddings, err_theta, rel_fnorm, ClassificationMetrics,
};
pub use model::{ConstraintSpec, Dataset, ModelParams, VariationalState};
pub use objective::{elbo, elbo_gradients, snr, ElboGradients, ElboValue};
pub use predict::{embed, predict_proba, predict_subject, EmbeddingEstimate, Prediction};
pub use semisup::{e_step, fit_score, fit_unsupervised, m_step, EmConfig, Responsibilities};
pub use simulate::{gen_basis, gen_dataset, Misspec, SimConfig, SimTruth};
pub use supervised::{fit_supervised, init_supervised, FitReport, SupFitConfig};
