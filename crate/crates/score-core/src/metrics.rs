//! Evaluation quantities: the composite parameter-error functional,
//! relative Frobenius errors, embedding cosine similarity, and binary
//! classification metrics.

use nalgebra::DMatrix;

use crate::error::{Result, ScoreError};
use crate::model::ModelParams;

/// Composite estimation error
/// `max{ ‖(B − B₀)ᵀ‖₂,∞ , ‖B_{Y,0}ᵀ Λ₀⁻¹ (Λ − Λ₀)‖₂ , ‖b − b₀‖₂ }`,
/// where the first term is the largest column-wise ℓ₂ norm of `B − B₀`.
pub fn err_theta(theta: &ModelParams, theta0: &ModelParams) -> Result<f64> {
    if theta.effects.shape() != theta0.effects.shape()
        || theta.latent_cov.shape() != theta0.latent_cov.shape()
        || theta.logit_coef.len() != theta0.logit_coef.len()
    {
        return Err(ScoreError::DimensionMismatch(
            "parameter shapes disagree in err_theta".into(),
        ));
    }
    let db = &theta.effects - &theta0.effects;
    let b_err = (0..db.ncols()).map(|c| db.column(c).norm()).fold(0.0f64, f64::max);

    let chol = theta0
        .latent_cov
        .clone()
        .cholesky()
        .ok_or_else(|| ScoreError::NotPositiveDefinite("reference latent_cov".into()))?;
    let proj = chol.solve(&theta0.label_effect());
    let dl = &theta.latent_cov - &theta0.latent_cov;
    let lam_err = (dl.transpose() * proj).norm();

    let b_coef_err = (&theta.logit_coef - &theta0.logit_coef).norm();
    Ok(b_err.max(lam_err).max(b_coef_err))
}

/// Relative Frobenius error `‖A − A₀‖_F / ‖A₀‖_F`.
pub fn rel_fnorm(a: &DMatrix<f64>, a0: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != a0.shape() {
        return Err(ScoreError::DimensionMismatch("rel_fnorm shapes disagree".into()));
    }
    let denom = a0.norm();
    if denom == 0.0 {
        return Err(ScoreError::InvalidArgument(
            "rel_fnorm reference has zero norm".into(),
        ));
    }
    Ok((a - a0).norm() / denom)
}

/// Mean cosine similarity between estimated and true embeddings (subjects
/// as columns).
pub fn cosine_embeddings(e_hat: &DMatrix<f64>, xi: &DMatrix<f64>) -> Result<f64> {
    if e_hat.shape() != xi.shape() {
        return Err(ScoreError::DimensionMismatch(
            "embedding matrices have different shapes".into(),
        ));
    }
    let n = xi.ncols();
    if n == 0 {
        return Err(ScoreError::InsufficientData("no subjects".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let t = xi.column(i).norm();
        if t == 0.0 {
            return Err(ScoreError::InvalidArgument(format!(
                "true embedding of subject {i} has zero norm"
            )));
        }
        let h = e_hat.column(i).norm();
        if h == 0.0 || !h.is_finite() {
            return Err(ScoreError::NonFinite(format!(
                "estimated embedding of subject {i}"
            )));
        }
        total += e_hat.column(i).dot(&xi.column(i)) / (h * t);
    }
    Ok(total / n as f64)
}

/// AUC, PRAUC and Brier score for one set of scores against binary labels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassificationMetrics {
    /// Undefined (None) when only one class is present.
    pub auc: Option<f64>,
    /// Undefined (None) when only one class is present.
    pub prauc: Option<f64>,
    pub brier: f64,
}

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(ScoreError::DimensionMismatch(
            "scores and labels must be equal-length and nonempty".into(),
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScoreError::NonFinite("scores".into()));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(ScoreError::InvalidArgument("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// AUC by the Mann–Whitney rank statistic with half credit for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(ScoreError::DegenerateLabels(
            "AUC undefined with a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Average ranks across tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg as f64))
}

/// Area under the precision–recall curve with step-wise interpolation at
/// each distinct threshold.
pub fn prauc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(ScoreError::DegenerateLabels(
            "PRAUC undefined with a single class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut area = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &k in &order[i..=j] {
            seen += 1;
            tp += labels[k] as usize;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(area)
}

/// Mean squared difference between scores and labels.
pub fn brier(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_scores_labels(scores, labels)?;
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| (s - y as f64) * (s - y as f64))
        .sum::<f64>()
        / n)
}

/// All three classification metrics; AUC/PRAUC are None when only one class
/// is present (the Brier score is still returned).
pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    check_scores_labels(scores, labels)?;
    let brier = brier(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Ok(ClassificationMetrics { auc: None, prauc: None, brier });
    }
    Ok(ClassificationMetrics {
        auc: Some(auc(scores, labels)?),
        prauc: Some(prauc(scores, labels)?),
        brier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dvector, DVector};
    use rand::{Rng, SeedableRng};

    /// O(n²) pair-counting AUC oracle.
    fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yj != 0 {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    /// Recomputes PRAUC from scratch at every distinct threshold.
    fn prauc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (&s, &y) in scores.iter().zip(labels) {
                if s >= t {
                    if y == 1 {
                        tp += 1.0;
                    } else {
                        fp += 1.0;
                    }
                }
            }
            let recall = tp / n_pos;
            let precision = tp / (tp + fp);
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    #[test]
    fn err_theta_zero_at_truth() {
        let theta = crate::simulate::benchmark_theta(4);
        assert_eq!(err_theta(&theta, &theta).unwrap(), 0.0);
    }

    #[test]
    fn err_theta_label_column_perturbation() {
        let q = 5;
        let theta0 = crate::simulate::benchmark_theta(q);
        let mut theta = theta0.clone();
        let delta = 0.3;
        for k in 0..q {
            theta.effects[(k, 2)] += delta;
        }
        let expect = delta * (q as f64).sqrt();
        assert!((err_theta(&theta, &theta0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn err_theta_matches_bruteforce_norms() {
        let q = 4;
        let theta0 = crate::simulate::benchmark_theta(q);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        let mut theta = theta0.clone();
        for v in theta.effects.iter_mut() {
            *v += 0.1 * rng.gen::<f64>();
        }
        let mut sym = theta.latent_cov.clone();
        for i in 0..q {
            for j in 0..=i {
                let bump = 0.05 * rng.gen::<f64>();
                sym[(i, j)] += bump;
                if i != j {
                    sym[(j, i)] += bump;
                }
            }
        }
        theta.latent_cov = sym;
        theta.logit_coef[0] += 0.2;

        // Independent evaluation of the three norms.
        let db = &theta.effects - &theta0.effects;
        let mut col_max = 0.0f64;
        for c in 0..db.ncols() {
            let mut ss = 0.0;
            for r in 0..db.nrows() {
                ss += db[(r, c)] * db[(r, c)];
            }
            col_max = col_max.max(ss.sqrt());
        }
        let lam_inv = theta0.latent_cov.clone().try_inverse().unwrap();
        let proj = (theta0.label_effect().transpose() * lam_inv).transpose();
        let dl = &theta.latent_cov - &theta0.latent_cov;
        let mut lam_ss = 0.0;
        for c in 0..q {
            let mut acc = 0.0;
            for r in 0..q {
                acc += proj[r] * dl[(r, c)];
            }
            lam_ss += acc * acc;
        }
        let b_err = (&theta.logit_coef - &theta0.logit_coef).norm();
        let expect = col_max.max(lam_ss.sqrt()).max(b_err);
        assert!((err_theta(&theta, &theta0).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn rel_fnorm_basics() {
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rel_fnorm(&a0, &a0).unwrap(), 0.0);
        assert!((rel_fnorm(&(&a0 * 2.0), &a0).unwrap() - 1.0).abs() < 1e-15);
        let e = &a0 * 0.3;
        assert!((rel_fnorm(&(&a0 + &e), &a0).unwrap() - 0.3).abs() < 1e-12);
        assert!(rel_fnorm(&a0, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn cosine_construction_cases() {
        let xi = DMatrix::from_columns(&[dvector![1.0, 0.0], dvector![0.0, 2.0]]);
        assert!((cosine_embeddings(&xi, &xi).unwrap() - 1.0).abs() < 1e-15);
        let neg = -xi.clone();
        assert!((cosine_embeddings(&neg, &xi).unwrap() + 1.0).abs() < 1e-15);
        // Rotate each column by 60 degrees in the plane.
        let c = 0.5f64;
        let s = (3.0f64).sqrt() / 2.0;
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let rotated = &rot * &xi;
        assert!((cosine_embeddings(&rotated, &xi).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn classification_known_values() {
        let scores = [0.9, 0.8, 0.7, 0.3];
        let labels = [1u8, 0, 1, 0];
        assert!((auc(&scores, &labels).unwrap() - 0.75).abs() < 1e-15);
        let pr = prauc(&scores, &labels).unwrap();
        assert!((pr - prauc_bruteforce(&scores, &labels)).abs() < 1e-15);
        assert!((pr - (0.5 + 0.5 * (2.0 / 3.0))).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1u8, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(prauc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn constant_scores_balanced() {
        let scores = [0.5; 6];
        let labels = [1u8, 0, 1, 0, 1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
        assert!((brier(&scores, &labels).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn single_class_partial_metrics() {
        let scores = [0.2, 0.4];
        let labels = [0u8, 0];
        assert!(matches!(auc(&scores, &labels), Err(ScoreError::DegenerateLabels(_))));
        let m = classification_metrics(&scores, &labels).unwrap();
        assert!(m.auc.is_none() && m.prauc.is_none());
        assert!((m.brier - (0.04 + 0.16) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn auc_equals_pair_counting_on_random_instances() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
        for _ in 0..300 {
            let n = rng.gen_range(2..=200);
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                // Coarse grid of score values to exercise ties.
                scores.push((rng.gen_range(0..=20) as f64) / 20.0);
                labels.push(rng.gen_range(0..=1) as u8);
            }
            let n_pos: usize = labels.iter().map(|&y| y as usize).sum();
            if n_pos == 0 || n_pos == n {
                continue;
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_bruteforce(&scores, &labels);
            assert_eq!(fast, slow, "AUC mismatch on n={n}");
            let pr_fast = prauc(&scores, &labels).unwrap();
            let pr_slow = prauc_bruteforce(&scores, &labels);
            assert!((pr_fast - pr_slow).abs() < 1e-12);
        }
    }

    #[test]
    fn brier_of_prevalence_predictor() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(3..=150);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1) as u8).collect();
            let prevalence = labels.iter().map(|&y| y as f64).sum::<f64>() / n as f64;
            let scores = vec![prevalence; n];
            let b = brier(&scores, &labels).unwrap();
            assert!(
                (b - prevalence * (1.0 - prevalence)).abs() < 1e-12,
                "brier {b} vs p(1-p) {}",
                prevalence * (1.0 - prevalence)
            );
        }
    }

    #[test]
    fn cosine_rejects_zero_truth_row() {
        let xi = DMatrix::from_columns(&[DVector::zeros(2)]);
        let e = DMatrix::from_columns(&[dvector![1.0, 0.0]]);
        assert!(cosine_embeddings(&e, &xi).is_err());
    }
}
