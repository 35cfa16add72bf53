//! Shared fitting machinery: alternates parallel per-subject variational
//! refits with blockwise θ updates of a branch-weighted ELBO sum.
//!
//! A "branch" is one (subject, hypothesized label) pair. Labeled subjects
//! carry a single branch at the observed label with weight 1; unlabeled
//! subjects carry both labels with weights `(1−γ, γ)`. The supervised
//! estimator and the EM M-step are the same machinery with different
//! weights.
//!
//! Determinism: subject-level work runs under rayon but every reduction
//! (objective sums, gradients, sufficient statistics) is a sequential fold
//! in subject order, so results are bitwise identical at any thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::EmbeddingBasis;
use crate::error::{Result, ScoreError};
use crate::gva::{default_start, solve_branch, GvaFitConfig, SolverWorkspace};
use crate::model::{ConstraintSpec, Dataset, ModelParams, VariationalState};
use crate::objective::{expit, ElboContext, ElboWorkspace, PreparedTheta};

/// Per-subject quantities that do not depend on θ or the variational state.
pub(crate) struct SubjectPre {
    /// `Vᵀ x`.
    pub vtx: DVector<f64>,
    /// `(q/p) Vᵀ log(1 + x)`: latent-space proxy used for initialization.
    pub proxy: DVector<f64>,
    pub log_fact: f64,
    /// `(1, Uᵀ)`.
    pub ubar: DVector<f64>,
    /// `(1, Uᵀ, y)` for y = 0, 1.
    pub ubar_y: [DVector<f64>; 2],
}

pub(crate) struct Precomputed {
    pub subjects: Vec<SubjectPre>,
    /// `max_i ‖(1, U_i, 1)‖₂`, for the cheap feasibility bound on B.
    pub max_ubar_norm: f64,
}

impl Precomputed {
    pub fn new(data: &Dataset, basis: &EmbeddingBasis) -> Result<Self> {
        if data.n_codes() != basis.p() {
            return Err(ScoreError::DimensionMismatch(format!(
                "dataset has p={} codes but basis has p={}",
                data.n_codes(),
                basis.p()
            )));
        }
        let scale = basis.q() as f64 / basis.p() as f64;
        let vtx_all = basis.matrix().tr_mul(data.counts());
        let log1p = data.counts().map(|x| (1.0 + x).ln());
        let proxy_all = basis.matrix().tr_mul(&log1p) * scale;
        let mut subjects = Vec::with_capacity(data.n_subjects());
        let mut max_ubar_norm = 0.0f64;
        for i in 0..data.n_subjects() {
            let ubar = data.ubar(i);
            let ubar_y = [data.ubar_y(i, 0), data.ubar_y(i, 1)];
            max_ubar_norm = max_ubar_norm.max(ubar_y[1].norm());
            subjects.push(SubjectPre {
                vtx: vtx_all.column(i).into_owned(),
                proxy: proxy_all.column(i).into_owned(),
                log_fact: data.log_fact(i),
                ubar,
                ubar_y,
            });
        }
        Ok(Self { subjects, max_ubar_norm })
    }
}

pub(crate) struct Branch {
    pub y: u8,
    pub weight: f64,
    pub state: VariationalState,
    /// `Vᵀ(x − A)` at the last refit.
    pub resid: DVector<f64>,
    /// ELBO at the last refit.
    pub value: f64,
}

pub(crate) struct SubjectSlot {
    pub branches: Vec<Branch>,
}

/// How subjects map to branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BranchMode {
    /// Every subject must be labeled; one branch each.
    Labeled,
    /// Labeled subjects one branch, unlabeled subjects two.
    SemiSupervised,
    /// All subjects treated as unlabeled (labels ignored); two branches each.
    AllUnlabeled,
}

pub(crate) struct Engine<'a> {
    pub basis: &'a EmbeddingBasis,
    pub pre: Precomputed,
    pub theta: ModelParams,
    pub prep: PreparedTheta,
    pub subjects: Vec<SubjectSlot>,
    /// Indices of subjects carrying two branches, in subject order.
    pub two_branch: Vec<usize>,
    pub constraints: ConstraintSpec,
    pub gva_cfg: GvaFitConfig,
    b_step: f64,
    pub clamp_count: u64,
    pub projection_events: u64,
    pub ridge_events: u64,
}

impl<'a> Engine<'a> {
    pub fn new(
        data: &Dataset,
        basis: &'a EmbeddingBasis,
        theta: ModelParams,
        constraints: ConstraintSpec,
        gva_cfg: GvaFitConfig,
        mode: BranchMode,
    ) -> Result<Self> {
        theta.validate()?;
        constraints.validate()?;
        gva_cfg.validate()?;
        if theta.q() != basis.q() {
            return Err(ScoreError::DimensionMismatch(
                "theta latent dimension disagrees with basis".into(),
            ));
        }
        if theta.r() != data.n_covariates() {
            return Err(ScoreError::DimensionMismatch(
                "theta covariate dimension disagrees with dataset".into(),
            ));
        }
        let pre = Precomputed::new(data, basis)?;
        let prep = PreparedTheta::new(&theta)?;
        let q = basis.q();
        let mut subjects = Vec::with_capacity(data.n_subjects());
        let mut two_branch = Vec::new();
        for i in 0..data.n_subjects() {
            let ys: Vec<(u8, f64)> = match mode {
                BranchMode::Labeled => {
                    let y = data.label(i).ok_or_else(|| {
                        ScoreError::DegenerateLabels(format!(
                            "subject {i} is unlabeled in a labeled-only fit"
                        ))
                    })?;
                    vec![(y, 1.0)]
                }
                BranchMode::SemiSupervised => match data.label(i) {
                    Some(y) => vec![(y, 1.0)],
                    None => vec![(0, 0.5), (1, 0.5)],
                },
                BranchMode::AllUnlabeled => vec![(0, 0.5), (1, 0.5)],
            };
            if ys.len() == 2 {
                two_branch.push(i);
            }
            let branches = ys
                .into_iter()
                .map(|(y, weight)| {
                    let shift = &theta.effects * &pre.subjects[i].ubar_y[y as usize];
                    let (mean, var) = default_start(&pre.subjects[i].proxy, &shift, q);
                    Branch {
                        y,
                        weight,
                        state: VariationalState { mean, var, label: y },
                        resid: DVector::zeros(q),
                        value: f64::NEG_INFINITY,
                    }
                })
                .collect();
            subjects.push(SubjectSlot { branches });
        }
        Ok(Self {
            basis,
            pre,
            theta,
            prep,
            subjects,
            two_branch,
            constraints,
            gva_cfg,
            b_step: 1.0,
            clamp_count: 0,
            projection_events: 0,
            ridge_events: 0,
        })
    }

    /// Installs externally computed starting states for labeled-only fits.
    pub fn set_states(&mut self, states: &[VariationalState]) -> Result<()> {
        if states.len() != self.subjects.len() {
            return Err(ScoreError::DimensionMismatch(
                "state count disagrees with subject count".into(),
            ));
        }
        for (slot, st) in self.subjects.iter_mut().zip(states) {
            if slot.branches.len() != 1 {
                return Err(ScoreError::InvalidArgument(
                    "set_states applies to single-branch subjects".into(),
                ));
            }
            let branch = &mut slot.branches[0];
            let mut st = st.clone();
            st.label = branch.y;
            branch.state = st;
        }
        Ok(())
    }

    /// Re-optimizes every branch's variational state at the current θ and
    /// returns the weighted objective `Σ_i Σ_b w_ib J_ib`.
    pub fn refit(&mut self) -> Result<f64> {
        let p = self.basis.p();
        let q = self.basis.q();
        let cap = self.constraints.mean_cap(p, q);
        let basis = self.basis;
        let prep = &self.prep;
        let theta = &self.theta;
        let pre = &self.pre.subjects;
        let gva_cfg = &self.gva_cfg;
        let eta_clip = self.constraints.eta_clip;
        let stats: Vec<Result<u64>> = self
            .subjects
            .par_iter_mut()
            .enumerate()
            .map_init(
                || SolverWorkspace::new(p, q),
                |ws, (i, slot)| {
                    let sub = &pre[i];
                    let mut clamps = 0u64;
                    for branch in slot.branches.iter_mut() {
                        let ctx = ElboContext::new(
                            basis,
                            prep,
                            theta,
                            sub.vtx.clone(),
                            sub.log_fact,
                            &sub.ubar,
                            &sub.ubar_y[branch.y as usize],
                            branch.y,
                            eta_clip,
                        );
                        let out = solve_branch(
                            &ctx,
                            gva_cfg,
                            cap,
                            &mut branch.state.mean,
                            &mut branch.state.var,
                            Some(&mut branch.resid),
                            ws,
                        )
                        .map_err(|e| ScoreError::SubjectFit {
                            subject: i,
                            msg: e.to_string(),
                        })?;
                        branch.value = out.value;
                        clamps += out.clamp_events;
                    }
                    Ok(clamps)
                },
            )
            .collect();
        for s in stats {
            self.clamp_count += s?;
        }
        Ok(self.objective())
    }

    /// The weighted objective at the last refit.
    pub fn objective(&self) -> f64 {
        self.subjects
            .iter()
            .map(|slot| slot.branches.iter().map(|b| b.weight * b.value).sum::<f64>())
            .sum()
    }

    /// Responsibilities `γ_i = σ(J_i(1) − J_i(0))` for two-branch subjects,
    /// clamped into `[floor, 1 − floor]`. Computed in log space so large
    /// objective gaps never underflow to exactly 0 or 1 before clamping.
    pub fn gammas(&self, floor: f64) -> Vec<f64> {
        self.two_branch
            .iter()
            .map(|&i| {
                let b = &self.subjects[i].branches;
                debug_assert_eq!((b[0].y, b[1].y), (0, 1));
                let gamma = expit(b[1].value - b[0].value);
                gamma.clamp(floor, 1.0 - floor)
            })
            .collect()
    }

    /// Installs responsibilities as branch weights on two-branch subjects.
    pub fn set_weights(&mut self, gammas: &[f64]) {
        debug_assert_eq!(gammas.len(), self.two_branch.len());
        for (&i, &g) in self.two_branch.iter().zip(gammas) {
            let b = &mut self.subjects[i].branches;
            b[0].weight = 1.0 - g;
            b[1].weight = g;
        }
    }

    /// Blockwise θ update at fixed variational states: the exact
    /// recentering transfer, one backtracked, preconditioned, projected
    /// gradient step on B, the closed-form Λ update, and a Newton solve for
    /// the logistic coefficients.
    pub fn update_theta(&mut self) -> Result<()> {
        self.recenter()?;
        self.update_effects()?;
        self.update_latent_cov()?;
        self.update_logit()?;
        self.prep = PreparedTheta::new(&self.theta)?;
        #[cfg(debug_assertions)]
        self.assert_effects_feasible();
        Ok(())
    }

    /// Exact transfer along the reparameterization manifold
    /// `(B, m_i) → (B + Δ, m_i − Δ u_iy)`: the Poisson terms are invariant,
    /// so the weighted regression of the variational means on the design
    /// maximizes the remaining Gaussian prior terms in closed form. Without
    /// this move, block ascent crawls along the B-versus-mean ridge.
    fn recenter(&mut self) -> Result<()> {
        let q = self.basis.q();
        let cols = self.theta.effects.ncols();
        let mut gram = DMatrix::zeros(cols, cols);
        let mut cross = DMatrix::zeros(q, cols);
        for (i, slot) in self.subjects.iter().enumerate() {
            for b in &slot.branches {
                if b.weight == 0.0 {
                    continue;
                }
                let u = &self.pre.subjects[i].ubar_y[b.y as usize];
                gram.ger(b.weight, u, u, 1.0);
                cross.ger(b.weight, &b.state.mean, u, 1.0);
            }
        }
        for k in 0..cols {
            gram[(k, k)] += 1e-9;
        }
        let transfer = match gram.cholesky() {
            Some(ch) => ch.solve(&cross.transpose()).transpose(),
            None => return Ok(()),
        };
        if transfer.amax() < 1e-13 {
            return Ok(());
        }
        let mut b_new = &self.theta.effects + &transfer;
        self.project_effects(&mut b_new);
        let delta = &b_new - &self.theta.effects;
        if delta.amax() == 0.0 {
            return Ok(());
        }

        // Verify the prior-term gain of the (possibly projection-truncated)
        // transfer before applying it; bail out if it would not ascend.
        let mut gain = 0.0;
        for (i, slot) in self.subjects.iter().enumerate() {
            for b in &slot.branches {
                if b.weight == 0.0 {
                    continue;
                }
                let du = &delta * &self.pre.subjects[i].ubar_y[b.y as usize];
                let shifted = &b.state.mean - &du;
                let old_q = b.state.mean.dot(&(&self.prep.lambda_inv * &b.state.mean));
                let new_q = shifted.dot(&(&self.prep.lambda_inv * &shifted));
                gain += 0.5 * b.weight * (old_q - new_q);
            }
        }
        if !(gain >= -1e-10) {
            return Ok(());
        }
        self.theta.effects = b_new;

        // Apply the shift to every branch (including weight-0 ones, to keep
        // warm starts aligned). A-terms are invariant, so values adjust by
        // the prior difference and residuals stay exact, except for the
        // rare branch whose shifted mean must be projected back onto the
        // constraint set: those get a full re-evaluation.
        let p = self.basis.p();
        let cap = self.constraints.mean_cap(p, q);
        let basis = self.basis;
        let prep = &self.prep;
        let theta = &self.theta;
        let pre = &self.pre.subjects;
        let eta_clip = self.constraints.eta_clip;
        let delta_ref = &delta;
        self.subjects.par_iter_mut().enumerate().for_each_init(
            || (ElboWorkspace::new(p, q), DVector::zeros(p)),
            |(ws, vm), (i, slot)| {
                let sub = &pre[i];
                for b in slot.branches.iter_mut() {
                    let du = delta_ref * &sub.ubar_y[b.y as usize];
                    let old_q = b.state.mean.dot(&(&prep.lambda_inv * &b.state.mean));
                    b.state.mean -= &du;
                    vm.gemv(1.0, basis.matrix(), &b.state.mean, 0.0);
                    if vm.amax() > cap {
                        // Projection breaks the invariance; recompute.
                        crate::gva::project_mean(&mut b.state.mean, vm, cap);
                        let ctx = ElboContext::new(
                            basis,
                            prep,
                            theta,
                            sub.vtx.clone(),
                            sub.log_fact,
                            &sub.ubar,
                            &sub.ubar_y[b.y as usize],
                            b.y,
                            eta_clip,
                        );
                        let (value, _) = ctx.value_with_vm(&b.state.mean, vm, &b.state.var, ws);
                        ws.vta.gemv_tr(1.0, basis.matrix(), &ws.a, 0.0);
                        for k in 0..q {
                            b.resid[k] = ctx.vtx[k] - ws.vta[k];
                        }
                        b.value = value;
                    } else {
                        let new_q = b.state.mean.dot(&(&prep.lambda_inv * &b.state.mean));
                        b.value += 0.5 * (old_q - new_q);
                    }
                }
            },
        );
        Ok(())
    }

    fn update_effects(&mut self) -> Result<()> {
        let q = self.basis.q();
        let cols = self.theta.effects.ncols();
        let mut grad = DMatrix::zeros(q, cols);
        let mut design = DMatrix::zeros(cols, cols);
        for (i, slot) in self.subjects.iter().enumerate() {
            for b in &slot.branches {
                if b.weight == 0.0 {
                    continue;
                }
                let u = &self.pre.subjects[i].ubar_y[b.y as usize];
                grad.ger(b.weight, &b.resid, u, 1.0);
                design.ger(b.weight, u, u, 1.0);
            }
        }
        // Right-precondition by the inverse weighted design Gram matrix;
        // this removes the covariate-scale anisotropy across columns.
        for k in 0..cols {
            design[(k, k)] += 1e-9;
        }
        let dir = match design.clone().cholesky() {
            Some(ch) => {
                let mut d = grad.clone();
                // Solve design · Xᵀ = gradᵀ, i.e. d = grad · design⁻¹.
                let solved = ch.solve(&grad.transpose());
                d.copy_from(&solved.transpose());
                d
            }
            None => grad.clone(),
        };
        let ascent: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
        if !ascent.is_finite() || ascent <= 0.0 {
            return Ok(());
        }
        let obj0 = self.eval_effects_objective(&self.theta.effects)?;
        self.b_step = (self.b_step * 2.0).min(8.0);
        let mut step = self.b_step;
        while step >= 1e-16 {
            let mut cand = &self.theta.effects + &dir * step;
            let projected = self.project_effects(&mut cand);
            let val = self.eval_effects_objective(&cand)?;
            let sufficient = val >= obj0 + 1e-4 * step * ascent;
            if sufficient || (projected && val > obj0) {
                self.theta.effects = cand;
                self.b_step = step;
                if projected {
                    self.projection_events += 1;
                }
                return Ok(());
            }
            step *= 0.5;
        }
        // No improving step; keep the current effects matrix.
        self.b_step = 1.0;
        Ok(())
    }

    /// Weighted ELBO sum as a function of the effects matrix, with all
    /// variational states held fixed.
    fn eval_effects_objective(&self, effects: &DMatrix<f64>) -> Result<f64> {
        let p = self.basis.p();
        let q = self.basis.q();
        let basis = self.basis;
        let prep = &self.prep;
        let pre = &self.pre.subjects;
        let eta_clip = self.constraints.eta_clip;
        let theta_stub = ModelParams {
            effects: effects.clone(),
            latent_cov: self.theta.latent_cov.clone(),
            logit_coef: self.theta.logit_coef.clone(),
        };
        let vals: Vec<f64> = self
            .subjects
            .par_iter()
            .enumerate()
            .map_init(
                || crate::objective::ElboWorkspace::new(p, q),
                |ws, (i, slot)| {
                    let sub = &pre[i];
                    let mut total = 0.0;
                    for b in &slot.branches {
                        if b.weight == 0.0 {
                            continue;
                        }
                        let ctx = ElboContext::new(
                            basis,
                            prep,
                            &theta_stub,
                            sub.vtx.clone(),
                            sub.log_fact,
                            &sub.ubar,
                            &sub.ubar_y[b.y as usize],
                            b.y,
                            eta_clip,
                        );
                        let (v, _) = ctx.value(&b.state.mean, &b.state.var, ws);
                        total += b.weight * v;
                    }
                    total
                },
            )
            .collect();
        Ok(vals.iter().sum())
    }

    /// Projects B onto the constraint set: a spectral rescale when
    /// `‖B‖₂ > K_B √q`, then a rescale of the worst linear predictor bound
    /// `max_{i,y,j} |V_jᵀ B u_y|` when it exceeds `K_B √(log(p/q))`.
    fn project_effects(&self, effects: &mut DMatrix<f64>) -> bool {
        let q = self.basis.q();
        let mut touched = false;
        let spec_cap = self.constraints.spectral_cap(q);
        let sigma = effects.clone().svd(false, false).singular_values.max();
        if sigma > spec_cap {
            *effects *= (spec_cap / sigma) * (1.0 - 1e-15);
            touched = true;
        }
        let lin_cap = self.constraints.linear_cap(self.basis.p(), q);
        let w = self.basis.matrix() * &*effects;
        let max_row = (0..w.nrows()).map(|j| w.row(j).norm()).fold(0.0f64, f64::max);
        if max_row * self.pre.max_ubar_norm > lin_cap {
            // Cheap bound violated; measure the exact maximum.
            let mut exact = 0.0f64;
            for (i, slot) in self.subjects.iter().enumerate() {
                for b in &slot.branches {
                    let wu = &w * &self.pre.subjects[i].ubar_y[b.y as usize];
                    exact = exact.max(wu.amax());
                }
            }
            if exact > lin_cap {
                *effects *= (lin_cap / exact) * (1.0 - 1e-15);
                touched = true;
            }
        }
        touched
    }

    #[cfg(debug_assertions)]
    fn assert_effects_feasible(&self) {
        let q = self.basis.q();
        let sigma = self.theta.effects.clone().svd(false, false).singular_values.max();
        debug_assert!(
            sigma <= self.constraints.spectral_cap(q) * (1.0 + 1e-12),
            "spectral bound violated: {sigma}"
        );
        let lin_cap = self.constraints.linear_cap(self.basis.p(), q);
        let w = self.basis.matrix() * &self.theta.effects;
        for (i, slot) in self.subjects.iter().enumerate() {
            for b in &slot.branches {
                let wu = &w * &self.pre.subjects[i].ubar_y[b.y as usize];
                debug_assert!(
                    wu.amax() <= lin_cap * (1.0 + 1e-12),
                    "linear bound violated at subject {i}"
                );
            }
        }
    }

    /// Closed-form Λ update: the weighted second moment of the variational
    /// states, `Λ = (Σ w)⁻¹ Σ_i Σ_b w_ib (m mᵀ + diag(s))`.
    fn update_latent_cov(&mut self) -> Result<()> {
        let q = self.basis.q();
        let mut acc = DMatrix::zeros(q, q);
        let mut total_w = 0.0;
        for slot in &self.subjects {
            for b in &slot.branches {
                if b.weight == 0.0 {
                    continue;
                }
                acc.ger(b.weight, &b.state.mean, &b.state.mean, 1.0);
                for k in 0..q {
                    acc[(k, k)] += b.weight * b.state.var[k];
                }
                total_w += b.weight;
            }
        }
        if total_w <= 0.0 {
            return Err(ScoreError::InsufficientData("no weighted branches".into()));
        }
        acc /= total_w;
        // Symmetrize exactly; ger keeps it symmetric up to rounding.
        let sym = (&acc + acc.transpose()) * 0.5;
        self.theta.latent_cov = sym;
        Ok(())
    }

    /// Logistic-coefficient update: Newton on the weighted Bernoulli
    /// log-likelihood with fractional targets (observed labels for labeled
    /// subjects, responsibilities for unlabeled ones).
    fn update_logit(&mut self) -> Result<()> {
        let targets: Vec<f64> = self
            .subjects
            .iter()
            .map(|slot| slot.branches.iter().map(|b| b.weight * b.y as f64).sum())
            .collect();
        let ubars: Vec<&DVector<f64>> = self.pre.subjects.iter().map(|s| &s.ubar).collect();
        let (coef, ridged) =
            logistic_newton(&ubars, &targets, &self.theta.logit_coef)?;
        if ridged {
            self.ridge_events += 1;
        }
        self.theta.logit_coef = coef;
        Ok(())
    }
}

/// Weighted logistic regression by damped Newton with fractional targets in
/// `[0, 1]`. Falls back to a ridge of 1e-4 when the Hessian is singular;
/// the flag reports whether the fallback fired.
pub(crate) fn logistic_newton(
    ubars: &[&DVector<f64>],
    targets: &[f64],
    init: &DVector<f64>,
) -> Result<(DVector<f64>, bool)> {
    let dim = init.len();
    let loglik = |b: &DVector<f64>| -> f64 {
        ubars
            .iter()
            .zip(targets)
            .map(|(u, &t)| {
                let eta = b.dot(u);
                t * crate::objective::log_expit(eta) + (1.0 - t) * crate::objective::log_expit(-eta)
            })
            .sum()
    };
    let mut b = init.clone();
    let mut ridge_used = false;
    let mut current = loglik(&b);
    for _ in 0..50 {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for (u, &t) in ubars.iter().zip(targets) {
            let sigma = expit(b.dot(u));
            grad.axpy(t - sigma, u, 1.0);
            hess.ger(sigma * (1.0 - sigma), u, u, 1.0);
        }
        if grad.amax() < 1e-10 {
            break;
        }
        for k in 0..dim {
            hess[(k, k)] += 1e-12;
        }
        let dir = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                ridge_used = true;
                for k in 0..dim {
                    hess[(k, k)] += 1e-4;
                }
                hess.clone()
                    .cholesky()
                    .ok_or_else(|| {
                        ScoreError::NotPositiveDefinite("logistic Hessian".into())
                    })?
                    .solve(&grad)
            }
        };
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-12 {
            let cand = &b + &dir * step;
            let val = loglik(&cand);
            if val >= current {
                b = cand;
                current = val;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(ScoreError::NonFinite("logistic coefficients".into()));
    }
    Ok((b, ridge_used))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    #[test]
    fn logistic_newton_recovers_balanced_intercept() {
        let u0 = dvector![1.0];
        let ubars: Vec<&DVector<f64>> = (0..4).map(|_| &u0).collect();
        let targets = [1.0, 0.0, 1.0, 0.0];
        let (b, ridged) = logistic_newton(&ubars, &targets, &dvector![0.3]).unwrap();
        assert!(b[0].abs() < 1e-8);
        assert!(!ridged);
    }

    #[test]
    fn logistic_newton_matches_known_slope() {
        // Two covariate levels with different prevalences pin intercept and
        // slope through the usual log-odds identities.
        let lo = dvector![1.0, 0.0];
        let hi = dvector![1.0, 1.0];
        let mut ubars = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..40 {
            ubars.push(&lo);
            targets.push(0.25);
            ubars.push(&hi);
            targets.push(0.75);
        }
        let (b, _) = logistic_newton(&ubars, &targets, &DVector::zeros(2)).unwrap();
        let lo_odds = (0.25f64 / 0.75).ln();
        let hi_odds = (0.75f64 / 0.25).ln();
        assert!((b[0] - lo_odds).abs() < 1e-6);
        assert!((b[1] - (hi_odds - lo_odds)).abs() < 1e-6);
    }

    #[test]
    fn lambda_update_single_subject_formula() {
        // One branch with weight 1, mean v and variance σ²: Λ = vvᵀ + σ²I.
        let cfg = crate::simulate::SimConfig {
            labeled: 1,
            total: 1,
            codes: 6,
            latent: 2,
            misspec: crate::simulate::Misspec::None,
            zero_inflation: 0.0,
            seed: 3,
        };
        let (data, truth) = crate::simulate::gen_dataset(&cfg).unwrap();
        let mut engine = Engine::new(
            &data,
            &truth.basis,
            ModelParams::zeros(2, 1),
            ConstraintSpec::default(),
            GvaFitConfig::default(),
            BranchMode::Labeled,
        )
        .unwrap();
        let v = dvector![0.7, -0.3];
        engine.subjects[0].branches[0].state.mean = v.clone();
        engine.subjects[0].branches[0].state.var = dvector![0.09, 0.09];
        engine.update_latent_cov().unwrap();
        let expect = &v * v.transpose() + DMatrix::identity(2, 2) * 0.09;
        assert!((engine.theta.latent_cov.clone() - expect).amax() < 1e-14);
    }
}
