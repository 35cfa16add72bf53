//! Fixed code-embedding basis and its normalization.

use nalgebra::DMatrix;

use crate::error::{Result, ScoreError};

/// Tolerance for the orthonormality invariant `(q/p) VᵀV = I`.
pub const ORTHO_TOL: f64 = 1e-10;

/// A fixed p×q embedding basis with `sqrt(q/p) V` orthonormal.
///
/// Rows `V_j` hold the loading vector of code `j` on the q latent factors.
/// The scaling convention makes `(q/p) Vᵀ` a left inverse of `V`, so
/// `(q/p) Vᵀ x` projects a count-space vector into the latent space.
#[derive(Debug, Clone)]
pub struct EmbeddingBasis {
    v: DMatrix<f64>,
    /// Elementwise square of `v`; used for the diagonal quadratic forms
    /// `V_jᵀ S V_j = Σ_k V_jk² s_k` in the ELBO hot path.
    vsq: DMatrix<f64>,
    /// Incoherence bound `max_j ‖V_j‖₂`.
    max_row_norm: f64,
}

impl EmbeddingBasis {
    /// Wraps a matrix that already satisfies the orthonormality invariant.
    pub fn new(v: DMatrix<f64>) -> Result<Self> {
        let (p, q) = v.shape();
        if q == 0 || p == 0 || q >= p {
            return Err(ScoreError::DimensionMismatch(format!(
                "basis must have q < p, got p={p}, q={q}"
            )));
        }
        Self::build(v)
    }

    /// Like [`EmbeddingBasis::new`] but permits q = p; used internally for
    /// small hand-checked instances where the basis is square.
    #[cfg_attr(not(test), allow(dead_code))]
    pub(crate) fn new_allow_square(v: DMatrix<f64>) -> Result<Self> {
        let (p, q) = v.shape();
        if q == 0 || p == 0 || q > p {
            return Err(ScoreError::DimensionMismatch(format!(
                "basis must have q <= p, got p={p}, q={q}"
            )));
        }
        Self::build(v)
    }

    fn build(v: DMatrix<f64>) -> Result<Self> {
        let (p, q) = v.shape();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ScoreError::NonFinite("embedding basis entries".into()));
        }
        let scale = q as f64 / p as f64;
        let gram = v.tr_mul(&v) * scale;
        for i in 0..q {
            for j in 0..q {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > ORTHO_TOL {
                    return Err(ScoreError::InvalidArgument(format!(
                        "basis violates (q/p) VᵀV = I at ({i}, {j}): {:.3e}",
                        gram[(i, j)] - target
                    )));
                }
            }
        }
        let vsq = v.map(|x| x * x);
        let max_row_norm = (0..p)
            .map(|j| v.row(j).norm())
            .fold(0.0f64, f64::max);
        Ok(Self { v, vsq, max_row_norm })
    }

    pub fn p(&self) -> usize {
        self.v.nrows()
    }

    pub fn q(&self) -> usize {
        self.v.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn matrix_sq(&self) -> &DMatrix<f64> {
        &self.vsq
    }

    /// Incoherence constant `C_V = max_j ‖V_j‖₂`.
    pub fn max_row_norm(&self) -> f64 {
        self.max_row_norm
    }

    /// The `sqrt(log(p/q))` factor appearing in the constraint sets.
    pub fn log_ratio_sqrt(&self) -> f64 {
        ((self.p() as f64 / self.q() as f64).ln()).sqrt()
    }
}

/// Normalizes an arbitrary full-column-rank p×q matrix onto the basis
/// convention `(q/p) VᵀV = I` while preserving its column span.
///
/// Uses the orthogonal polar factor from a thin SVD (`U Wᵀ` for
/// `raw = U Σ Wᵀ`), scaled by `sqrt(p/q)`. The polar factor leaves inputs
/// that already satisfy the invariant unchanged, which also makes the
/// operation idempotent.
pub fn orthonormalize_basis(raw: &DMatrix<f64>) -> Result<EmbeddingBasis> {
    let (p, q) = raw.shape();
    if q == 0 || q >= p {
        return Err(ScoreError::DimensionMismatch(format!(
            "basis must have 0 < q < p, got p={p}, q={q}"
        )));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(ScoreError::NonFinite("raw basis entries".into()));
    }
    let svd = raw.clone().svd(true, true);
    let sigma = &svd.singular_values;
    let smax = sigma.max();
    let smin = sigma.min();
    if smax <= 0.0 || smin <= smax * 1e-12 {
        return Err(ScoreError::RankDeficient(format!(
            "raw basis has numerical column rank < q={q} (singular values span {smin:.3e}..{smax:.3e})"
        )));
    }
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let polar = u * v_t;
    let v = polar * (p as f64 / q as f64).sqrt();
    EmbeddingBasis::new(v)
}
