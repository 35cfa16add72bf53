//! Closed-form evidence lower bound for one subject, its blockwise
//! gradients, and the model signal-to-noise ratio.
//!
//! For a subject with counts `x`, covariates `u` and hypothesized label `y`,
//! the variational family is `N(m, diag(s))` over the latent effect `W` and
//! the bound is
//!
//! ```text
//! J = Σ_j x_j V_jᵀ(B u_y + m) − Σ_j A_j − Σ_j log(x_j!)
//!     − ½ log det Λ − ½ mᵀΛ⁻¹m − ½ tr(Λ⁻¹ diag(s)) + ½ Σ_k log s_k + q/2
//!     + y log σ(bᵀū) + (1−y) log(1−σ(bᵀū))
//! ```
//!
//! with `A_j = exp{V_jᵀ(B u_y + m) + ½ Σ_k V_jk² s_k}`. Linear predictors are
//! clamped at `eta_clip` before exponentiation and clamp events are counted.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::basis::EmbeddingBasis;
use crate::error::{Result, ScoreError};
use crate::model::{ConstraintSpec, ModelParams, VariationalState};

/// Numerically stable logistic function.
#[inline]
pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log σ(x)`.
#[inline]
pub(crate) fn log_expit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `Σ_j log(x_j!)` for a raw count vector.
pub(crate) fn log_factorial_sum(x: DVectorView<'_, f64>) -> f64 {
    let mut total = 0.0;
    for &xi in x.iter() {
        let n = xi as usize;
        for k in 2..=n {
            total += (k as f64).ln();
        }
    }
    total
}

/// Cached factorizations of Λ for repeated ELBO evaluations under one θ.
#[derive(Debug, Clone)]
pub(crate) struct PreparedTheta {
    pub lambda_inv: DMatrix<f64>,
    pub lambda_inv_diag: DVector<f64>,
    pub lambda_logdet: f64,
}

impl PreparedTheta {
    pub fn new(theta: &ModelParams) -> Result<Self> {
        let chol = theta
            .latent_cov
            .clone()
            .cholesky()
            .ok_or_else(|| ScoreError::NotPositiveDefinite("latent_cov".into()))?;
        let lambda_logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let lambda_inv = chol.inverse();
        let lambda_inv_diag = lambda_inv.diagonal();
        Ok(Self { lambda_inv, lambda_inv_diag, lambda_logdet })
    }
}

/// Scratch buffers for repeated evaluations; one per worker thread.
#[derive(Debug, Clone)]
pub(crate) struct ElboWorkspace {
    pub a: DVector<f64>,
    pub quad: DVector<f64>,
    pub vm: DVector<f64>,
    pub lam_m: DVector<f64>,
    pub vta: DVector<f64>,
    pub v2a: DVector<f64>,
}

impl ElboWorkspace {
    pub fn new(p: usize, q: usize) -> Self {
        Self {
            a: DVector::zeros(p),
            quad: DVector::zeros(p),
            vm: DVector::zeros(p),
            lam_m: DVector::zeros(q),
            vta: DVector::zeros(q),
            v2a: DVector::zeros(q),
        }
    }
}

/// Everything fixed while optimizing one subject's variational state under
/// one label hypothesis and one θ.
#[derive(Debug, Clone)]
pub(crate) struct ElboContext<'a> {
    pub basis: &'a EmbeddingBasis,
    pub prep: &'a PreparedTheta,
    /// `B u_y`.
    pub shift: DVector<f64>,
    /// `V B u_y`.
    pub vshift: DVector<f64>,
    /// `Vᵀ x`.
    pub vtx: DVector<f64>,
    /// `(Vᵀx)ᵀ (B u_y)`, the m-independent part of the linear term.
    pub lin0: f64,
    pub log_fact: f64,
    /// Label log-likelihood `y log σ(bᵀū) + (1−y) log(1−σ(bᵀū))`.
    pub bern: f64,
    pub eta_clip: f64,
}

impl<'a> ElboContext<'a> {
    pub fn new(
        basis: &'a EmbeddingBasis,
        prep: &'a PreparedTheta,
        theta: &ModelParams,
        vtx: DVector<f64>,
        log_fact: f64,
        ubar: &DVector<f64>,
        ubar_y: &DVector<f64>,
        y: u8,
        eta_clip: f64,
    ) -> Self {
        let shift = &theta.effects * ubar_y;
        let vshift = basis.matrix() * &shift;
        let lin0 = vtx.dot(&shift);
        let t = theta.logit_coef.dot(ubar);
        let bern = if y == 1 { log_expit(t) } else { log_expit(-t) };
        Self { basis, prep, shift, vshift, vtx, lin0, log_fact, bern, eta_clip }
    }

    /// ELBO value given `m`, `vm = V m` and `s`. Fills `ws.a` and `ws.quad`
    /// with the Poisson bound terms as a side effect and returns the number
    /// of clamped predictors.
    pub fn value_with_vm(
        &self,
        m: &DVector<f64>,
        vm: &DVector<f64>,
        s: &DVector<f64>,
        ws: &mut ElboWorkspace,
    ) -> (f64, u64) {
        let q = self.basis.q();
        ws.quad.gemv(1.0, self.basis.matrix_sq(), s, 0.0);
        let mut sum_a = 0.0;
        let mut clamps = 0u64;
        for j in 0..self.basis.p() {
            let mut t = self.vshift[j] + vm[j] + 0.5 * ws.quad[j];
            if t > self.eta_clip {
                t = self.eta_clip;
                clamps += 1;
            }
            let a = t.exp();
            ws.a[j] = a;
            sum_a += a;
        }
        ws.lam_m.gemv(1.0, &self.prep.lambda_inv, m, 0.0);
        let quad_m = m.dot(&ws.lam_m);
        let mut tr_term = 0.0;
        let mut entropy = 0.0;
        for k in 0..q {
            tr_term += self.prep.lambda_inv_diag[k] * s[k];
            entropy += s[k].ln();
        }
        let value = self.lin0 + self.vtx.dot(m) - sum_a - self.log_fact
            - 0.5 * self.prep.lambda_logdet
            - 0.5 * quad_m
            - 0.5 * tr_term
            + 0.5 * entropy
            + 0.5 * q as f64
            + self.bern;
        (value, clamps)
    }

    /// ELBO value computing `V m` internally.
    pub fn value(&self, m: &DVector<f64>, s: &DVector<f64>, ws: &mut ElboWorkspace) -> (f64, u64) {
        let mut vm = std::mem::replace(&mut ws.vm, DVector::zeros(0));
        vm = resize_to(vm, self.basis.p());
        vm.gemv(1.0, self.basis.matrix(), m, 0.0);
        let out = self.value_with_vm(m, &vm, s, ws);
        ws.vm = vm;
        out
    }

    /// Gradient w.r.t. `m` and `ρ = log s`, assuming `ws.a` holds the Poisson
    /// bound terms from a preceding `value*` call at the same point.
    ///
    /// `grad_m = Vᵀ(x − A) − Λ⁻¹m`;
    /// `grad_ρ_k = s_k (−½ Σ_j A_j V_jk² − ½ (Λ⁻¹)_kk) + ½`.
    pub fn grad_after_value(
        &self,
        s: &DVector<f64>,
        ws: &mut ElboWorkspace,
        grad_m: &mut DVector<f64>,
        grad_rho: &mut DVector<f64>,
    ) {
        ws.vta.gemv_tr(1.0, self.basis.matrix(), &ws.a, 0.0);
        ws.v2a.gemv_tr(1.0, self.basis.matrix_sq(), &ws.a, 0.0);
        for k in 0..self.basis.q() {
            grad_m[k] = self.vtx[k] - ws.vta[k] - ws.lam_m[k];
            grad_rho[k] = s[k] * (-0.5 * ws.v2a[k] - 0.5 * self.prep.lambda_inv_diag[k]) + 0.5;
        }
    }
}

fn resize_to(v: DVector<f64>, len: usize) -> DVector<f64> {
    if v.len() == len {
        v
    } else {
        DVector::zeros(len)
    }
}

/// ELBO value plus clamp diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub value: f64,
    pub clamp_events: u64,
}

/// Blockwise gradients of the ELBO.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradients {
    /// Gradient w.r.t. the variational mean `m`.
    pub mean: DVector<f64>,
    /// Gradient w.r.t. `ρ = log s`.
    pub log_var: DVector<f64>,
    /// Gradient w.r.t. the effects matrix `B`, shape q×(r+2).
    pub effects: DMatrix<f64>,
    /// Gradient w.r.t. the logistic coefficients `b`, length r+1.
    pub logit_coef: DVector<f64>,
}

fn check_inputs(
    theta: &ModelParams,
    state: &VariationalState,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: u8,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
) -> Result<()> {
    theta.validate()?;
    state.validate()?;
    constraints.validate()?;
    if y > 1 {
        return Err(ScoreError::InvalidArgument("label must be 0 or 1".into()));
    }
    if x.len() != basis.p() {
        return Err(ScoreError::DimensionMismatch(format!(
            "count vector length {} != p = {}",
            x.len(),
            basis.p()
        )));
    }
    if u.len() != theta.r() {
        return Err(ScoreError::DimensionMismatch(format!(
            "covariate length {} != r = {}",
            u.len(),
            theta.r()
        )));
    }
    if theta.q() != basis.q() || state.mean.len() != basis.q() {
        return Err(ScoreError::DimensionMismatch(
            "latent dimension disagrees between theta, state and basis".into(),
        ));
    }
    if x.iter().any(|v| !v.is_finite() || *v < 0.0 || v.fract() != 0.0) {
        return Err(ScoreError::InvalidArgument(
            "counts must be finite nonnegative integers".into(),
        ));
    }
    Ok(())
}

fn augment(u: &DVector<f64>, y: Option<u8>) -> DVector<f64> {
    let extra = if y.is_some() { 2 } else { 1 };
    let mut out = DVector::zeros(u.len() + extra);
    out[0] = 1.0;
    for k in 0..u.len() {
        out[k + 1] = u[k];
    }
    if let Some(y) = y {
        out[u.len() + 1] = y as f64;
    }
    out
}

fn build_context<'a>(
    theta: &ModelParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: u8,
    basis: &'a EmbeddingBasis,
    prep: &'a PreparedTheta,
    constraints: &ConstraintSpec,
) -> ElboContext<'a> {
    let vtx = basis.matrix().tr_mul(x);
    let log_fact = log_factorial_sum(x.as_view());
    let ubar = augment(u, None);
    let ubar_y = augment(u, Some(y));
    ElboContext::new(basis, prep, theta, vtx, log_fact, &ubar, &ubar_y, y, constraints.eta_clip)
}

/// Evaluates the ELBO for one subject.
pub fn elbo(
    theta: &ModelParams,
    state: &VariationalState,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: u8,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
) -> Result<ElboValue> {
    check_inputs(theta, state, x, u, y, basis, constraints)?;
    let prep = PreparedTheta::new(theta)?;
    let ctx = build_context(theta, x, u, y, basis, &prep, constraints);
    let mut ws = ElboWorkspace::new(basis.p(), basis.q());
    let (value, clamp_events) = ctx.value(&state.mean, &state.var, &mut ws);
    if !value.is_finite() {
        let sum_a: f64 = ws.a.iter().sum();
        let term = if !sum_a.is_finite() {
            "Poisson bound term Σ_j A_j"
        } else if !state.mean.dot(&ws.lam_m).is_finite() {
            "quadratic form mᵀΛ⁻¹m"
        } else {
            "ELBO"
        };
        return Err(ScoreError::NonFinite(term.into()));
    }
    Ok(ElboValue { value, clamp_events })
}

/// Blockwise gradients of the ELBO at the given point.
pub fn elbo_gradients(
    theta: &ModelParams,
    state: &VariationalState,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: u8,
    basis: &EmbeddingBasis,
    constraints: &ConstraintSpec,
) -> Result<ElboGradients> {
    check_inputs(theta, state, x, u, y, basis, constraints)?;
    let prep = PreparedTheta::new(theta)?;
    let ctx = build_context(theta, x, u, y, basis, &prep, constraints);
    let mut ws = ElboWorkspace::new(basis.p(), basis.q());
    let (value, _) = ctx.value(&state.mean, &state.var, &mut ws);
    if !value.is_finite() {
        return Err(ScoreError::NonFinite("ELBO".into()));
    }
    let q = basis.q();
    let mut grad_m = DVector::zeros(q);
    let mut grad_rho = DVector::zeros(q);
    ctx.grad_after_value(&state.var, &mut ws, &mut grad_m, &mut grad_rho);

    // grad_B = Vᵀ(x − A) · u_yᵀ; the latent residual Vᵀ(x − A) is vtx − vta.
    let resid = &ctx.vtx - &ws.vta;
    let ubar_y = augment(u, Some(y));
    let grad_effects = &resid * ubar_y.transpose();

    // grad_b = (y − σ(bᵀū)) ū.
    let ubar = augment(u, None);
    let sigma = expit(theta.logit_coef.dot(&ubar));
    let grad_logit = &ubar * (y as f64 - sigma);

    Ok(ElboGradients {
        mean: grad_m,
        log_var: grad_rho,
        effects: grad_effects,
        logit_coef: grad_logit,
    })
}

/// Signal-to-noise ratio `ψ² = B_Yᵀ Λ⁻¹ B_Y`.
pub fn snr(theta: &ModelParams) -> Result<f64> {
    theta.validate()?;
    let chol = theta
        .latent_cov
        .clone()
        .cholesky()
        .ok_or_else(|| ScoreError::NotPositiveDefinite("latent_cov".into()))?;
    let by = theta.label_effect();
    let solved = chol.solve(&by);
    Ok(by.dot(&solved))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn scalar_setup() -> (ModelParams, VariationalState, DVector<f64>, DVector<f64>, EmbeddingBasis)
    {
        // p = q = 1 is outside the q < p convention used elsewhere, so the
        // square-tolerant constructor is used for this hand-checked case.
        let basis = EmbeddingBasis::new_allow_square(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let theta = ModelParams {
            effects: DMatrix::zeros(1, 2),
            latent_cov: DMatrix::identity(1, 1),
            logit_coef: dvector![0.0],
        };
        let state = VariationalState { mean: dvector![0.0], var: dvector![1.0], label: 0 };
        (theta, state, dvector![0.0], DVector::zeros(0), basis)
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        let (theta, state, x, u, basis) = scalar_setup();
        let out = elbo(&theta, &state, &x, &u, 0, &basis, &ConstraintSpec::default()).unwrap();
        let expected = -(0.5f64.exp()) - 2.0f64.ln();
        assert!((out.value - expected).abs() < 1e-12, "got {}", out.value);
        assert!((out.value - (-2.341_868_451_260_073_5)).abs() < 1e-12);
        assert_eq!(out.clamp_events, 0);
    }

    #[test]
    fn scalar_gradient_hand_value() {
        let (theta, state, x, u, basis) = scalar_setup();
        let g = elbo_gradients(&theta, &state, &x, &u, 0, &basis, &ConstraintSpec::default())
            .unwrap();
        assert!((g.mean[0] - (-(0.5f64.exp()))).abs() < 1e-12);
    }

    #[test]
    fn grad_logit_at_zero_is_half_ubar() {
        let (mut theta, state, x, _, basis) = scalar_setup();
        theta.effects = DMatrix::zeros(1, 3);
        theta.logit_coef = dvector![0.0, 0.0];
        let u = dvector![2.0];
        let g = elbo_gradients(&theta, &state, &x, &u, 1, &basis, &ConstraintSpec::default())
            .unwrap();
        assert!((g.logit_coef[0] - 0.5).abs() < 1e-14);
        assert!((g.logit_coef[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn label_term_is_only_y_dependence_when_label_effect_zero() {
        // With B_Y = 0, elbo(y=0) − elbo(y=1) = log{(1−σ)/σ} at shared (m, s).
        let q = 2;
        let p = 6;
        let v = crate::simulate::gen_basis(p, q).unwrap();
        let mut effects = DMatrix::from_fn(q, 3, |_, c| if c == 0 { 0.3 } else { 0.1 });
        effects.column_mut(2).fill(0.0);
        let theta = ModelParams {
            effects,
            latent_cov: DMatrix::identity(q, q) * 0.8,
            logit_coef: dvector![0.4, -0.7],
        };
        let state = VariationalState {
            mean: dvector![0.2, -0.1],
            var: dvector![0.5, 0.3],
            label: 0,
        };
        let x = dvector![1.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        let u = dvector![1.5];
        let cons = ConstraintSpec::default();
        let j0 = elbo(&theta, &state, &x, &u, 0, &v, &cons).unwrap().value;
        let mut state1 = state.clone();
        state1.label = 1;
        let j1 = elbo(&theta, &state1, &x, &u, 1, &v, &cons).unwrap().value;
        let sigma = expit(theta.logit_coef.dot(&dvector![1.0, 1.5]));
        assert!(((j0 - j1) - ((1.0 - sigma) / sigma).ln()).abs() < 1e-12);
    }

    #[test]
    fn snr_trivial_values() {
        let q = 3;
        let mut theta = ModelParams::zeros(q, 1);
        assert_eq!(snr(&theta).unwrap(), 0.0);
        theta.effects.column_mut(2).fill(0.8);
        let val = snr(&theta).unwrap();
        assert!((val - 0.64 * q as f64).abs() < 1e-12);
    }

    #[test]
    fn clamp_counted() {
        let (mut theta, state, x, u, basis) = scalar_setup();
        theta.effects[(0, 0)] = 100.0;
        let out = elbo(&theta, &state, &x, &u, 0, &basis, &ConstraintSpec::default()).unwrap();
        assert_eq!(out.clamp_events, 1);
        assert!(out.value.is_finite());
    }
}
