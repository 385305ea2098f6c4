//! Monotone probability transforms.
//!
//! The convergence theory measures movement of risk on a transformed scale:
//! a strictly increasing map `q : (0,1) -> R`. Interventions are
//! "well-intentioned" when they move the q-transformed mean risk toward an
//! equilibrium at a linear rate, and the attraction/drift intervals are all
//! stated in q-space. The logit transform is the workhorse because a logistic
//! ground truth makes q(risk) linear in the covariates.
//!
//! Inputs are clamped away from {0, 1} by [`PROB_CLAMP`] before transforming
//! so that boundary probabilities produced by Monte Carlo averaging stay
//! finite. NaN is rejected rather than clamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any
/// q-transform is applied.
pub const PROB_CLAMP: f64 = 1e-9;

/// Strictly increasing map from probabilities to the real line.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QTransform {
    /// `q(p) = ln(p / (1 - p))`.
    Logit,
    /// `q(p) = p`; useful when bounds should read in probability units.
    Identity,
    /// Piecewise-linear interpolation through strictly increasing knots.
    /// Extrapolates linearly from the outermost segments.
    Monotone { knots: Vec<(f64, f64)> },
}

impl QTransform {
    /// Validate invariants that serde cannot express (knot monotonicity).
    pub fn validate(&self) -> Result<()> {
        if let QTransform::Monotone { knots } = self {
            if knots.len() < 2 {
                return Err(Error::NonMonotoneKnots("need at least 2 knots".into()));
            }
            for w in knots.windows(2) {
                if !(w[1].0 > w[0].0 && w[1].1 > w[0].1) {
                    return Err(Error::NonMonotoneKnots(format!(
                        "knot {:?} does not increase past {:?}",
                        w[1], w[0]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Apply the transform. Clamps `p` into `[PROB_CLAMP, 1 - PROB_CLAMP]`;
    /// rejects non-finite input.
    pub fn eval(&self, p: f64) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::NonFiniteProbability(p));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(match self {
            QTransform::Logit => (p / (1.0 - p)).ln(),
            QTransform::Identity => p,
            QTransform::Monotone { knots } => interp(knots, p),
        })
    }

    /// Derivative of the transform at `p`, used to propagate Monte Carlo
    /// standard errors from probability space onto the q scale.
    pub fn slope_at(&self, p: f64) -> f64 {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        match self {
            QTransform::Logit => 1.0 / (p * (1.0 - p)),
            QTransform::Identity => 1.0,
            QTransform::Monotone { knots } => {
                let n = knots.len();
                let i = match knots.iter().position(|&(k, _)| p < k) {
                    Some(0) => 1,
                    Some(i) => i,
                    None => n - 1,
                };
                (knots[i].1 - knots[i - 1].1) / (knots[i].0 - knots[i - 1].0)
            }
        }
    }

    /// Inverse map back to probability space, clamped into the open interval.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::NonFiniteProbability(y));
        }
        let p = match self {
            QTransform::Logit => 1.0 / (1.0 + (-y).exp()),
            QTransform::Identity => y,
            QTransform::Monotone { knots } => {
                let flipped: Vec<(f64, f64)> =
                    knots.iter().map(|&(x, fx)| (fx, x)).collect();
                interp(&flipped, y)
            }
        };
        Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    }
}

/// Piecewise-linear interpolation through increasing knots, extrapolating
/// with the end segments.
fn interp(knots: &[(f64, f64)], x: f64) -> f64 {
    let n = knots.len();
    let seg = match knots.iter().position(|&(k, _)| x < k) {
        Some(0) => (knots[0], knots[1]),
        Some(i) => (knots[i - 1], knots[i]),
        None => (knots[n - 2], knots[n - 1]),
    };
    let ((x0, y0), (x1, y1)) = seg;
    y0 + (x - x0) * (y1 - y0) / (x1 - x0)
}

/// Standard logistic function, the inverse of the logit transform.
pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Real cube root that preserves sign for negative arguments.
pub fn signed_cbrt(t: f64) -> f64 {
    t.cbrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logit_reference_values() {
        let q = QTransform::Logit;
        assert_relative_eq!(q.eval(0.5).unwrap(), 0.0, epsilon = 1e-12);
        // ln(0.2 / 0.8) = -ln 4
        assert_relative_eq!(q.eval(0.2).unwrap(), -1.3862943611198906, epsilon = 1e-12);
        assert_relative_eq!(q.eval(0.8).unwrap(), 1.3862943611198906, epsilon = 1e-12);
    }

    #[test]
    fn logit_endpoints_clamp_finite() {
        let q = QTransform::Logit;
        let at_zero = q.eval(0.0).unwrap();
        let at_one = q.eval(1.0).unwrap();
        assert!(at_zero.is_finite() && at_one.is_finite());
        assert_relative_eq!(at_zero, (PROB_CLAMP / (1.0 - PROB_CLAMP)).ln(), epsilon = 1e-12);
        // Near p = 1 the complement 1 - p loses ~7 digits to cancellation;
        // the q value is still finite and symmetric to ~3e-8, which is all
        // the clamp promises.
        assert_relative_eq!(at_one, -at_zero, epsilon = 1e-6);
    }

    #[test]
    fn nan_rejected() {
        assert!(QTransform::Logit.eval(f64::NAN).is_err());
        assert!(QTransform::Identity.eval(f64::NAN).is_err());
        assert!(QTransform::Logit.inverse(f64::NAN).is_err());
    }

    #[test]
    fn logit_roundtrip() {
        let q = QTransform::Logit;
        for &p in &[0.01, 0.2, 0.5, 0.77, 0.999] {
            assert_relative_eq!(q.inverse(q.eval(p).unwrap()).unwrap(), p, epsilon = 1e-12);
        }
        assert_relative_eq!(logistic(-1.3862943611198906), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn monotone_knots_validated() {
        let bad = QTransform::Monotone {
            knots: vec![(0.1, 0.0), (0.5, -1.0)],
        };
        assert!(bad.validate().is_err());
        let good = QTransform::Monotone {
            knots: vec![(0.1, -2.0), (0.5, 0.0), (0.9, 2.0)],
        };
        good.validate().unwrap();
        assert_relative_eq!(good.eval(0.3).unwrap(), -1.0);
        assert_relative_eq!(good.inverse(1.0).unwrap(), 0.7);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let maps = [
            QTransform::Logit,
            QTransform::Identity,
            QTransform::Monotone {
                knots: vec![(0.1, -2.0), (0.5, 0.0), (0.9, 2.0)],
            },
        ];
        let h = 1e-7;
        for q in &maps {
            for &p in &[0.15, 0.3, 0.6, 0.85] {
                let fd = (q.eval(p + h).unwrap() - q.eval(p - h).unwrap()) / (2.0 * h);
                assert_relative_eq!(q.slope_at(p), fd, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn signed_cbrt_handles_negatives() {
        assert_relative_eq!(signed_cbrt(0.125), 0.5, epsilon = 1e-12);
        assert_relative_eq!(signed_cbrt(-0.125), -0.5, epsilon = 1e-12);
        assert_relative_eq!(signed_cbrt(-8.0), -2.0, epsilon = 1e-12);
    }
}
