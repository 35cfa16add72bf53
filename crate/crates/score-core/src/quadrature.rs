//! Exact marginal log-likelihood by tensorized Gauss–Hermite quadrature.
//!
//! Integrates the latent effect out of `log P(X = x, Y = y | U = u; θ)`
//! exactly (up to quadrature error) for small latent dimension. This is the
//! independent oracle the ELBO is validated against; it is not used by any
//! fitting path.

use nalgebra::{DMatrix, DVector};

use crate::basis::EmbeddingBasis;
use crate::error::{Result, ScoreError};
use crate::model::ModelParams;
use crate::objective::{log_expit, log_factorial_sum};

/// Nodes and weights for `∫ e^{-t²} f(t) dt ≈ Σ w_k f(t_k)`, via the
/// Golub–Welsch eigendecomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i - 1, i)] = b;
        jac[(i, i - 1)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(jac);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let nodes: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let weights: Vec<f64> = order
        .iter()
        .map(|&k| {
            let q0 = eig.eigenvectors[(0, k)];
            sqrt_pi * q0 * q0
        })
        .collect();
    (nodes, weights)
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `log P(X = x, Y = y | U = u; θ)` by tensor-product Gauss–Hermite
/// quadrature over the latent effect. Supports `q ≤ 3` and `nodes ≥ 20`.
pub fn loglik_quadrature(
    theta: &ModelParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: u8,
    basis: &EmbeddingBasis,
    nodes: usize,
) -> Result<f64> {
    theta.validate()?;
    let q = basis.q();
    if q > 3 {
        return Err(ScoreError::UnsupportedDim { q });
    }
    if nodes < 20 {
        return Err(ScoreError::InvalidArgument(format!(
            "quadrature needs at least 20 nodes, got {nodes}"
        )));
    }
    if x.len() != basis.p() || u.len() != theta.r() || theta.q() != q {
        return Err(ScoreError::DimensionMismatch(
            "quadrature input dimensions disagree".into(),
        ));
    }
    let p = basis.p();
    let chol = theta
        .latent_cov
        .clone()
        .cholesky()
        .ok_or_else(|| ScoreError::NotPositiveDefinite("latent_cov".into()))?;

    // η(t) = V B u_y + sqrt(2) V L t for standard GH abscissas t.
    let mut ubar_y = DVector::zeros(theta.r() + 2);
    ubar_y[0] = 1.0;
    for k in 0..theta.r() {
        ubar_y[k + 1] = u[k];
    }
    ubar_y[theta.r() + 1] = y as f64;
    let vshift = basis.matrix() * (&theta.effects * &ubar_y);
    let vl = basis.matrix() * chol.l() * std::f64::consts::SQRT_2;

    let (t_nodes, t_weights) = gauss_hermite(nodes);
    let log_w: Vec<f64> = t_weights
        .iter()
        .map(|w| w.ln() - 0.5 * std::f64::consts::PI.ln())
        .collect();
    let log_fact = log_factorial_sum(x.as_view());

    let mut terms = Vec::with_capacity(nodes.pow(q as u32));
    let mut idx = vec![0usize; q];
    let mut t_vec = DVector::zeros(q);
    let mut eta = DVector::zeros(p);
    loop {
        let mut log_weight = 0.0;
        for d in 0..q {
            t_vec[d] = t_nodes[idx[d]];
            log_weight += log_w[idx[d]];
        }
        eta.gemv(1.0, &vl, &t_vec, 0.0);
        eta += &vshift;
        let mut log_f = -log_fact;
        for j in 0..p {
            log_f += x[j] * eta[j] - eta[j].exp();
        }
        terms.push(log_weight + log_f);

        // Odometer over the q quadrature indices.
        let mut d = 0;
        loop {
            if d == q {
                break;
            }
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == q {
            break;
        }
    }

    let mut ubar = DVector::zeros(theta.r() + 1);
    ubar[0] = 1.0;
    for k in 0..theta.r() {
        ubar[k + 1] = u[k];
    }
    let t = theta.logit_coef.dot(&ubar);
    let bern = if y == 1 { log_expit(t) } else { log_expit(-t) };
    Ok(logsumexp(&terms) + bern)
}
