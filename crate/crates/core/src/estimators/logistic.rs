//! Logistic regression via iteratively reweighted least squares.
//!
//! The fit maximizes the Bernoulli log-likelihood minus a small ridge penalty
//! on the weights (the intercept is unpenalized). The penalty is scaled by
//! the number of rows, so duplicating every training row reproduces the same
//! coefficients; its job is purely to keep separated data finite, not to
//! regularize in any meaningful amount.
//!
//! Degenerate inputs are handled explicitly rather than left to diverge:
//!
//! * single-class labels return a constant predictor at the clamped
//!   empirical rate, flagged [`FitFlag::AllOneClass`];
//! * complete or quasi-complete separation trips the iteration cap or the
//!   coefficient-norm guard and returns the ridge-stabilized fit, flagged
//!   [`FitFlag::SeparationSuspected`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qtransform::{logistic, QTransform};

use super::{clamp_rate, FitFlag, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticFitParams {
    /// Per-row ridge penalty on the weights.
    pub ridge: f64,
    /// Stop when no coefficient moves more than this between iterations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogisticFitParams {
    fn default() -> Self {
        LogisticFitParams {
            ridge: 1e-6,
            tol: 1e-10,
            max_iter: 60,
        }
    }
}

/// Coefficient norm beyond which the data are treated as separated. On the
/// logit scale 30 is far past any probability distinguishable from 0 or 1.
const SEPARATION_NORM: f64 = 30.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub epoch_of_fit: u64,
    pub flags: Vec<FitFlag>,
}

impl LogisticModel {
    pub fn predict_values(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        let lin = self.intercept + crate::covariates::dot(x, &self.weights);
        Ok(logistic(lin).clamp(0.0, 1.0))
    }
}

/// Fit by IRLS. Deterministic: no randomness enters the optimizer.
pub fn fit_logistic(train: &TrainingSet, params: &LogisticFitParams) -> Result<LogisticModel> {
    let n = train.n_rows();
    let p = train.dim();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }

    let positives = train.labels().iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        let rate = clamp_rate(positives as f64 / n as f64);
        return Ok(LogisticModel {
            weights: vec![0.0; p],
            intercept: QTransform::Logit.eval(rate).expect("rate is finite"),
            epoch_of_fit: train.epoch(),
            flags: vec![FitFlag::AllOneClass],
        });
    }

    // beta[0] is the intercept, beta[1..] the weights.
    let d = p + 1;
    let mut beta = vec![0.0; d];
    let ridge_total = params.ridge * n as f64;
    let mut converged = false;

    for _ in 0..params.max_iter {
        // Normal equations for the weighted least-squares step:
        //   (X'WX + R) delta = X'(y - mu),   beta <- beta + delta
        // with W = diag(mu (1 - mu)) and R the (intercept-free) ridge.
        let mut xtwx = vec![0.0; d * d];
        let mut grad = vec![0.0; d];
        for i in 0..n {
            let row = train.row(i);
            let lin = beta[0] + row.iter().zip(&beta[1..]).map(|(x, b)| x * b).sum::<f64>();
            let mu = logistic(lin);
            let w = (mu * (1.0 - mu)).max(1e-10);
            let resid = train.label(i) - mu;
            grad[0] += resid;
            xtwx[0] += w;
            for a in 0..p {
                grad[a + 1] += row[a] * resid;
                xtwx[a + 1] += w * row[a];
                xtwx[(a + 1) * d] += w * row[a];
                for b in a..p {
                    xtwx[(a + 1) * d + (b + 1)] += w * row[a] * row[b];
                    if b > a {
                        xtwx[(b + 1) * d + (a + 1)] += w * row[a] * row[b];
                    }
                }
            }
        }
        for a in 1..d {
            xtwx[a * d + a] += ridge_total;
            grad[a] -= ridge_total * beta[a];
        }

        let delta = solve_spd(&mut xtwx, &grad, d)?;
        let step: f64 = delta.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for a in 0..d {
            beta[a] += delta[a];
        }
        if step < params.tol {
            converged = true;
            break;
        }
    }

    let norm = beta.iter().map(|b| b.abs()).fold(0.0, f64::max);
    let mut flags = Vec::new();
    if !converged || norm > SEPARATION_NORM {
        flags.push(FitFlag::SeparationSuspected);
    }

    Ok(LogisticModel {
        weights: beta[1..].to_vec(),
        intercept: beta[0],
        epoch_of_fit: train.epoch(),
        flags,
    })
}

/// Solve `A x = b` for symmetric positive definite `A` (row-major, order
/// `d`) by Cholesky decomposition, adding diagonal jitter on failure.
/// Destroys `a`.
fn solve_spd(a: &mut [f64], b: &[f64], d: usize) -> Result<Vec<f64>> {
    for attempt in 0..4 {
        if attempt > 0 {
            let jitter = 1e-8 * 10f64.powi(attempt);
            for i in 0..d {
                a[i * d + i] += jitter;
            }
        }
        if let Some(x) = try_cholesky_solve(a, b, d) {
            return Ok(x);
        }
    }
    Err(Error::config(
        "logistic.solve",
        "normal equations not positive definite after jitter",
    ))
}

fn try_cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    // a = L L'; l stored lower-triangular row-major.
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // Forward then back substitution.
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in (i + 1)..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::Schema;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;

    fn simulate(n: usize, beta: &[f64], intercept: f64, seed: u64) -> TrainingSet {
        let p = beta.len();
        let stream = RngStream::from_seed(seed);
        let xs = stream.derive("x", 0).normal_vec(n * p, 0.0, 1.0);
        let us = stream.derive("u", 0).uniform_vec(n, 0.0, 1.0);
        let mut t = TrainingSet::new(Schema::unbounded_real(p), 0);
        for i in 0..n {
            let row = &xs[i * p..(i + 1) * p];
            let risk = logistic(intercept + crate::covariates::dot(row, beta));
            t.push(row, us[i] < risk).unwrap();
        }
        t
    }

    #[test]
    fn recovers_generating_coefficients() {
        let train = simulate(40_000, &[0.8, -0.5, 0.3], -0.7, 17);
        let m = fit_logistic(&train, &LogisticFitParams::default()).unwrap();
        assert!(m.flags.is_empty());
        assert_relative_eq!(m.intercept, -0.7, epsilon = 0.06);
        for (w, b) in m.weights.iter().zip(&[0.8, -0.5, 0.3]) {
            assert_relative_eq!(w, b, epsilon = 0.06);
        }
    }

    #[test]
    fn score_equations_hold_at_solution() {
        // At the optimum, X'(y - mu) equals the ridge gradient exactly.
        let train = simulate(500, &[0.6, 0.2], 0.1, 5);
        let params = LogisticFitParams::default();
        let m = fit_logistic(&train, &params).unwrap();
        let n = train.n_rows();
        let mut resid_sum = 0.0;
        let mut score = vec![0.0; 2];
        for i in 0..n {
            let row = train.row(i);
            let mu = m.predict_values(row).unwrap();
            let r = train.label(i) - mu;
            resid_sum += r;
            for a in 0..2 {
                score[a] += row[a] * r;
            }
        }
        assert_relative_eq!(resid_sum, 0.0, epsilon = 1e-6);
        for a in 0..2 {
            assert_relative_eq!(score[a], params.ridge * n as f64 * m.weights[a], epsilon = 1e-6);
        }
    }

    #[test]
    fn duplicating_rows_leaves_fit_unchanged() {
        let train = simulate(300, &[0.5, -0.4], 0.2, 9);
        let mut doubled = TrainingSet::new(train.schema().clone(), train.epoch());
        for pass in 0..2 {
            let _ = pass;
            for i in 0..train.n_rows() {
                doubled.push(train.row(i), train.label(i) == 1.0).unwrap();
            }
        }
        let a = fit_logistic(&train, &LogisticFitParams::default()).unwrap();
        let b = fit_logistic(&doubled, &LogisticFitParams::default()).unwrap();
        assert_relative_eq!(a.intercept, b.intercept, epsilon = 1e-8);
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_relative_eq!(wa, wb, epsilon = 1e-8);
        }
    }

    #[test]
    fn refitting_same_data_is_bit_identical() {
        let train = simulate(500, &[0.6, 0.2], 0.1, 5);
        let a = fit_logistic(&train, &LogisticFitParams::default()).unwrap();
        let b = fit_logistic(&train, &LogisticFitParams::default()).unwrap();
        assert_eq!(a.intercept.to_bits(), b.intercept.to_bits());
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_eq!(wa.to_bits(), wb.to_bits());
        }
    }

    #[test]
    fn all_one_class_returns_clamped_constant() {
        let mut t = TrainingSet::new(Schema::unbounded_real(2), 7);
        for i in 0..20 {
            t.push(&[i as f64, -i as f64], false).unwrap();
        }
        let m = fit_logistic(&t, &LogisticFitParams::default()).unwrap();
        assert_eq!(m.flags, vec![FitFlag::AllOneClass]);
        assert_eq!(m.weights, vec![0.0, 0.0]);
        assert_eq!(m.epoch_of_fit, 7);
        let pred = m.predict_values(&[100.0, 3.0]).unwrap();
        assert_relative_eq!(pred, crate::qtransform::PROB_CLAMP, max_relative = 1e-6);

        let mut t1 = TrainingSet::new(Schema::unbounded_real(1), 0);
        for i in 0..20 {
            t1.push(&[i as f64], true).unwrap();
        }
        let m1 = fit_logistic(&t1, &LogisticFitParams::default()).unwrap();
        assert!(m1.predict_values(&[0.0]).unwrap() > 1.0 - 1e-6);
    }

    #[test]
    fn complete_separation_is_flagged_and_finite() {
        let mut t = TrainingSet::new(Schema::unbounded_real(1), 0);
        for i in 1..=25 {
            t.push(&[i as f64], true).unwrap();
            t.push(&[-(i as f64)], false).unwrap();
        }
        let m = fit_logistic(&t, &LogisticFitParams::default()).unwrap();
        assert!(m.flags.contains(&FitFlag::SeparationSuspected));
        assert!(m.weights[0].is_finite() && m.intercept.is_finite());
        assert!(m.weights[0] > 0.0);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let t = TrainingSet::new(Schema::unbounded_real(1), 0);
        assert!(matches!(
            fit_logistic(&t, &LogisticFitParams::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }
}
