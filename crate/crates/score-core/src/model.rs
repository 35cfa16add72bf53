//! Core domain types: model parameters, constraints, datasets and
//! per-subject variational states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoreError};

/// Parameters of the Poisson latent factor mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Latent-mean regression coefficients, q×(r+2).
    /// Columns: `[intercept | covariate effects (r) | label effect]`.
    pub effects: DMatrix<f64>,
    /// Random-effect covariance Λ, q×q symmetric positive definite.
    pub latent_cov: DMatrix<f64>,
    /// Logistic coefficients for `Pr(Y = 1 | U)`, length r+1:
    /// `[intercept | covariate coefficients]`.
    pub logit_coef: DVector<f64>,
}

impl ModelParams {
    pub fn new(
        effects: DMatrix<f64>,
        latent_cov: DMatrix<f64>,
        logit_coef: DVector<f64>,
    ) -> Result<Self> {
        let params = Self { effects, latent_cov, logit_coef };
        params.validate()?;
        Ok(params)
    }

    /// Zero-initialized parameters for given dimensions.
    pub fn zeros(q: usize, r: usize) -> Self {
        Self {
            effects: DMatrix::zeros(q, r + 2),
            latent_cov: DMatrix::identity(q, q),
            logit_coef: DVector::zeros(r + 1),
        }
    }

    pub fn q(&self) -> usize {
        self.effects.nrows()
    }

    /// Number of baseline covariates.
    pub fn r(&self) -> usize {
        self.effects.ncols() - 2
    }

    /// The label-effect column of `effects`.
    pub fn label_effect(&self) -> DVector<f64> {
        self.effects.column(self.effects.ncols() - 1).into_owned()
    }

    /// Checks shapes, finiteness, symmetry of Λ to 1e-12 and positive
    /// definiteness (via Cholesky).
    pub fn validate(&self) -> Result<()> {
        let q = self.q();
        if self.effects.ncols() < 2 {
            return Err(ScoreError::DimensionMismatch(
                "effects must have at least intercept and label columns".into(),
            ));
        }
        if self.latent_cov.shape() != (q, q) {
            return Err(ScoreError::DimensionMismatch(format!(
                "latent_cov is {:?}, expected ({q}, {q})",
                self.latent_cov.shape()
            )));
        }
        if self.logit_coef.len() != self.r() + 1 {
            return Err(ScoreError::DimensionMismatch(format!(
                "logit_coef has length {}, expected r+1 = {}",
                self.logit_coef.len(),
                self.r() + 1
            )));
        }
        if self.effects.iter().any(|x| !x.is_finite())
            || self.latent_cov.iter().any(|x| !x.is_finite())
            || self.logit_coef.iter().any(|x| !x.is_finite())
        {
            return Err(ScoreError::NonFinite("model parameters".into()));
        }
        for i in 0..q {
            for j in (i + 1)..q {
                if (self.latent_cov[(i, j)] - self.latent_cov[(j, i)]).abs() > 1e-12 {
                    return Err(ScoreError::NotPositiveDefinite(format!(
                        "latent_cov asymmetric at ({i}, {j})"
                    )));
                }
            }
        }
        if self.latent_cov.clone().cholesky().is_none() {
            return Err(ScoreError::NotPositiveDefinite("latent_cov".into()));
        }
        Ok(())
    }
}

/// Constraint constants for the restricted estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    /// `K_B`: bounds `‖B‖₂ ≤ K_B √q` and `|V_jᵀ B u_y| ≤ K_B √(log(p/q))`.
    pub effects_bound: f64,
    /// `K_M`: bounds the variational means, `|V_jᵀ m| ≤ K_M √(log(p/q))`.
    pub mean_bound: f64,
    /// Clamp applied to linear predictors before exponentiation.
    pub eta_clip: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self { effects_bound: 10.0, mean_bound: 10.0, eta_clip: 30.0 }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("effects_bound", self.effects_bound),
            ("mean_bound", self.mean_bound),
            ("eta_clip", self.eta_clip),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(ScoreError::InvalidArgument(format!(
                    "{name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Cap on `max_j |V_jᵀ m|` for variational means. The `√log(p/q)`
    /// factor is meaningful only for q < p; degenerate ratios disable the
    /// bound.
    pub fn mean_cap(&self, p: usize, q: usize) -> f64 {
        if p <= q {
            return f64::INFINITY;
        }
        self.mean_bound * ((p as f64 / q as f64).ln()).sqrt()
    }

    /// Cap on the spectral norm of the effects matrix.
    pub fn spectral_cap(&self, q: usize) -> f64 {
        self.effects_bound * (q as f64).sqrt()
    }

    /// Cap on `max_{i,j} |V_jᵀ B u_y|`; disabled for degenerate p ≤ q.
    pub fn linear_cap(&self, p: usize, q: usize) -> f64 {
        if p <= q {
            return f64::INFINITY;
        }
        self.effects_bound * ((p as f64 / q as f64).ln()).sqrt()
    }
}

/// Variational state of one subject under one hypothesized label:
/// a diagonal Gaussian `N(mean, diag(var))` over the latent effect `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub mean: DVector<f64>,
    /// Diagonal of the variational covariance; all entries > 0.
    pub var: DVector<f64>,
    /// The label hypothesis (0 or 1) this state belongs to.
    pub label: u8,
}

impl VariationalState {
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.var.len() {
            return Err(ScoreError::DimensionMismatch(
                "variational mean/var length mismatch".into(),
            ));
        }
        if self.label > 1 {
            return Err(ScoreError::InvalidArgument("label must be 0 or 1".into()));
        }
        if self.mean.iter().any(|x| !x.is_finite()) || self.var.iter().any(|x| !x.is_finite()) {
            return Err(ScoreError::NonFinite("variational state".into()));
        }
        if self.var.iter().any(|&s| s <= 0.0) {
            return Err(ScoreError::InvalidArgument(
                "variational variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Observed data: count vectors, baseline covariates and partially observed
/// binary labels.
///
/// Subjects are stored column-wise (`counts` is p×N and `covariates` is r×N)
/// so each subject's data is contiguous in the fitting hot paths.
#[derive(Debug, Clone)]
pub struct Dataset {
    ids: Vec<String>,
    counts: DMatrix<f64>,
    covariates: DMatrix<f64>,
    labels: Vec<Option<u8>>,
    /// Per-subject `Σ_j log(x_j!)`, precomputed once.
    log_fact: Vec<f64>,
}

impl Dataset {
    pub fn new(
        ids: Vec<String>,
        counts: DMatrix<f64>,
        covariates: DMatrix<f64>,
        labels: Vec<Option<u8>>,
    ) -> Result<Self> {
        let n = ids.len();
        if counts.ncols() != n || covariates.ncols() != n || labels.len() != n {
            return Err(ScoreError::DimensionMismatch(format!(
                "subject count disagrees: ids={n}, counts={}, covariates={}, labels={}",
                counts.ncols(),
                covariates.ncols(),
                labels.len()
            )));
        }
        if n == 0 {
            return Err(ScoreError::InsufficientData("empty dataset".into()));
        }
        for (idx, x) in counts.iter().enumerate() {
            if !x.is_finite() || *x < 0.0 || x.fract() != 0.0 {
                let col = idx / counts.nrows();
                let row = idx % counts.nrows();
                return Err(ScoreError::Schema {
                    row: col,
                    col: row,
                    msg: format!("count must be a nonnegative integer, got {x}"),
                });
            }
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(ScoreError::NonFinite("covariates".into()));
        }
        if labels.iter().flatten().any(|&y| y > 1) {
            return Err(ScoreError::InvalidArgument("labels must be 0 or 1".into()));
        }
        let log_fact = log_factorial_sums(&counts);
        Ok(Self { ids, counts, covariates, labels, log_fact })
    }

    pub fn n_subjects(&self) -> usize {
        self.ids.len()
    }

    pub fn n_codes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_labeled(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn counts(&self) -> &DMatrix<f64> {
        &self.counts
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn labels(&self) -> &[Option<u8>] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels[i]
    }

    pub fn count_col(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.counts.column(i)
    }

    pub fn covariate_col(&self, i: usize) -> nalgebra::DVectorView<'_, f64> {
        self.covariates.column(i)
    }

    pub fn log_fact(&self, i: usize) -> f64 {
        self.log_fact[i]
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&i| self.labels[i].is_some()).collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.n_subjects()).filter(|&i| self.labels[i].is_none()).collect()
    }

    /// Extracts the labeled subjects as a standalone dataset.
    pub fn labeled_subset(&self) -> Result<Dataset> {
        let idx = self.labeled_indices();
        if idx.is_empty() {
            return Err(ScoreError::InsufficientData("no labeled subjects".into()));
        }
        self.subset(&idx)
    }

    /// Extracts the given subjects (by index) as a standalone dataset.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let ids = idx.iter().map(|&i| self.ids[i].clone()).collect();
        let counts = DMatrix::from_columns(
            &idx.iter().map(|&i| self.counts.column(i).into_owned()).collect::<Vec<_>>(),
        );
        let covariates = if self.covariates.nrows() == 0 {
            DMatrix::zeros(0, idx.len())
        } else {
            DMatrix::from_columns(
                &idx.iter().map(|&i| self.covariates.column(i).into_owned()).collect::<Vec<_>>(),
            )
        };
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(ids, counts, covariates, labels)
    }

    /// The augmented covariate vector `(1, Uᵀ)ᵀ` for subject `i`.
    pub fn ubar(&self, i: usize) -> DVector<f64> {
        let r = self.n_covariates();
        let mut out = DVector::zeros(r + 1);
        out[0] = 1.0;
        for k in 0..r {
            out[k + 1] = self.covariates[(k, i)];
        }
        out
    }

    /// The augmented design vector `(1, Uᵀ, y)ᵀ` for subject `i` under label `y`.
    pub fn ubar_y(&self, i: usize, y: u8) -> DVector<f64> {
        let r = self.n_covariates();
        let mut out = DVector::zeros(r + 2);
        out[0] = 1.0;
        for k in 0..r {
            out[k + 1] = self.covariates[(k, i)];
        }
        out[r + 1] = y as f64;
        out
    }
}

/// Per-subject `Σ_j log(x_j!)` via a cumulative log table up to the maximum
/// observed count.
fn log_factorial_sums(counts: &DMatrix<f64>) -> Vec<f64> {
    let max_count = counts.iter().fold(0.0f64, |a, &b| a.max(b)) as usize;
    let mut table = vec![0.0f64; max_count + 1];
    for k in 1..=max_count {
        table[k] = table[k - 1] + (k as f64).ln();
    }
    (0..counts.ncols())
        .map(|i| counts.column(i).iter().map(|&x| table[x as usize]).sum())
        .collect()
}
