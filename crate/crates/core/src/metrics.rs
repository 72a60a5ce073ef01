//! Classification metrics and reference logistic trainers: rank-based AUC,
//! Newton-Raphson logistic regression (used for the ground-truth reference
//! model), and proximal-gradient L1-penalized logistic regression (used as
//! the sequential NMF supervision stage).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Area under the ROC curve by the Mann–Whitney U statistic. Tied scores
/// contribute ½ through midranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeError(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidData("non-finite score in auc".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(
            "AUC needs both classes present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Midranks: tied runs share the average of their 1-based rank range.
    let mut rank = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            rank[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + eˣ).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus on (0, ∞), clamped away from the pole at 0.
pub(crate) fn softplus_inverse(y: f64) -> f64 {
    y.max(1e-3).exp_m1().ln()
}

pub(crate) fn logit(rate: f64) -> f64 {
    (rate / (1.0 - rate)).ln()
}

/// Summed cross-entropy of a linear score z against binary labels:
/// Σ softplus(zᵢ) − yᵢ zᵢ.
fn ce_loss(z: &DVector<f64>, labels: &[bool]) -> f64 {
    z.iter()
        .zip(labels)
        .map(|(&z, &y)| softplus(z) - if y { z } else { 0.0 })
        .sum()
}

/// Fitted logistic head: coefficients over feature rows plus intercept.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    pub beta: DVector<f64>,
    pub intercept: f64,
}

impl LogisticModel {
    /// P(y=1 | x) for each observation column of `features`.
    pub fn predict_proba(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.nrows() != self.beta.len() {
            return Err(Error::ShapeError(format!(
                "{} feature rows but {} coefficients",
                features.nrows(),
                self.beta.len()
            )));
        }
        Ok(features
            .column_iter()
            .map(|c| sigmoid(self.beta.dot(&c.into_owned()) + self.intercept))
            .collect())
    }
}

/// Plain (ridge-stabilized) logistic regression via damped Newton-Raphson.
/// Features are columns; `l2` is a small ridge on the coefficients only,
/// keeping separable problems bounded. Deterministic.
pub fn logistic_fit(features: &DMatrix<f64>, labels: &[bool], l2: f64) -> Result<LogisticModel> {
    let (k, n) = (features.nrows(), features.ncols());
    if labels.len() != n {
        return Err(Error::ShapeError(format!("{n} observations vs {} labels", labels.len())));
    }
    check_two_classes(labels)?;
    // Augmented parameter vector [β; intercept].
    let mut theta = DVector::zeros(k + 1);
    let mut aug = DMatrix::zeros(k + 1, n);
    aug.rows_mut(0, k).copy_from(features);
    aug.row_mut(k).fill(1.0);
    let loss_at = |theta: &DVector<f64>| -> f64 {
        let z = aug.transpose() * theta;
        ce_loss(&z, labels) + 0.5 * l2 * theta.rows(0, k).norm_squared()
    };
    let mut loss = loss_at(&theta);
    for _ in 0..100 {
        let z = aug.transpose() * &theta;
        let p: DVector<f64> = z.map(sigmoid);
        let resid = DVector::from_iterator(
            n,
            p.iter().zip(labels).map(|(&pi, &y)| pi - if y { 1.0 } else { 0.0 }),
        );
        let mut grad = &aug * resid;
        for i in 0..k {
            grad[i] += l2 * theta[i];
        }
        // H = A diag(p(1−p)) Aᵀ + l2·I (intercept unpenalized but jittered
        // identically for factorization stability).
        let weights: Vec<f64> = p.iter().map(|&pi| (pi * (1.0 - pi)).max(1e-12)).collect();
        let mut weighted = aug.clone();
        for (j, mut col) in weighted.column_iter_mut().enumerate() {
            col *= weights[j];
        }
        let mut hess = weighted * aug.transpose();
        for i in 0..k + 1 {
            hess[(i, i)] += l2.max(1e-12);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::SingularSystem("logistic Hessian not SPD".into()))?
            .solve(&grad);
        // Backtracking keeps Newton monotone on flat or separable data.
        let mut scale = 1.0;
        let mut next = &theta - scale * &step;
        let mut next_loss = loss_at(&next);
        let mut tries = 0;
        while next_loss > loss && tries < 40 {
            scale *= 0.5;
            next = &theta - scale * &step;
            next_loss = loss_at(&next);
            tries += 1;
        }
        let moved = (&next - &theta).norm();
        theta = next;
        loss = next_loss;
        if moved < 1e-10 {
            break;
        }
    }
    Ok(LogisticModel {
        beta: theta.rows(0, k).into_owned(),
        intercept: theta[k],
    })
}

/// L1-penalized logistic regression by proximal gradient (FISTA) on the
/// summed cross-entropy; the intercept is unpenalized. Deterministic.
pub fn logistic_fit_l1(
    features: &DMatrix<f64>,
    labels: &[bool],
    l1_weight: f64,
    iterations: usize,
) -> Result<LogisticModel> {
    let (k, n) = (features.nrows(), features.ncols());
    if labels.len() != n {
        return Err(Error::ShapeError(format!("{n} observations vs {} labels", labels.len())));
    }
    check_two_classes(labels)?;
    if l1_weight < 0.0 || !l1_weight.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "l1 weight must be non-negative, got {l1_weight}"
        )));
    }
    let mut aug = DMatrix::zeros(k + 1, n);
    aug.rows_mut(0, k).copy_from(features);
    aug.row_mut(k).fill(1.0);
    // Lipschitz constant of the summed-CE gradient: σ_max(A)²/4.
    let smax = aug.clone().svd(false, false).singular_values.max();
    let step = 4.0 / (smax * smax).max(1e-12);

    let mut theta = DVector::<f64>::zeros(k + 1);
    let mut momentum = theta.clone();
    let mut t_prev = 1.0f64;
    for _ in 0..iterations {
        let z = aug.transpose() * &momentum;
        let resid = DVector::from_iterator(
            n,
            z.iter()
                .zip(labels)
                .map(|(&zi, &y)| sigmoid(zi) - if y { 1.0 } else { 0.0 }),
        );
        let grad = &aug * resid;
        let mut next = &momentum - step * grad;
        for i in 0..k {
            let thresh = step * l1_weight;
            next[i] = next[i].signum() * (next[i].abs() - thresh).max(0.0);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_prev * t_prev).sqrt());
        momentum = &next + ((t_prev - 1.0) / t_next) * (&next - &theta);
        theta = next;
        t_prev = t_next;
    }
    Ok(LogisticModel {
        beta: theta.rows(0, k).into_owned(),
        intercept: theta[k],
    })
}

fn check_two_classes(labels: &[bool]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::InvalidData(
            "training labels contain a single class".into(),
        ));
    }
    Ok(())
}
