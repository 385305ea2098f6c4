//! The outcome-generating process.
//!
//! Risk is logistic in the covariates: `f_e(x) = logistic(b + x'beta + d_e)`.
//! The model owns one or more coefficient segments; a change-point list maps
//! each epoch to its active segment, which is how regime shocks are expressed.
//! On top of the active segment, an optional bounded drift adds a per-epoch
//! offset `d_e` drawn uniformly from `[-alpha, alpha]`. Because the truth is
//! logistic, `d_e` is exactly the epoch's displacement on the logit scale, so
//! `|logit f_e(x) - logit f(x)| <= alpha` pointwise.
//!
//! Consumers that evaluate the truth many times within one epoch should call
//! [`GroundTruthModel::frozen`] once and reuse the result; a frozen view is a
//! plain `(beta, offset)` pair with a branch-free `eval`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::covariates::{dot, CovariateVector, Schema};
use crate::error::{Error, Result};
use crate::qtransform::logistic;
use crate::rng::RngStream;

/// Coefficients for one regime.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentCoeffs {
    pub beta: Vec<f64>,
    pub intercept: f64,
}

/// Epoch-to-epoch perturbation of the truth.
#[derive(Clone, Debug)]
pub enum DriftSpec {
    /// The truth is constant within each segment.
    None,
    /// Each epoch shifts the logit of every risk by a single global offset
    /// drawn uniformly from `[-alpha, alpha]`.
    Bounded { alpha: f64, stream: RngStream },
}

#[derive(Clone, Debug)]
pub struct GroundTruthModel {
    schema: Schema,
    segments: Vec<Arc<SegmentCoeffs>>,
    /// Epoch at which segment `i + 1` takes over from segment `i`.
    change_epochs: Vec<u64>,
    drift: DriftSpec,
}

/// Truth pinned to a single epoch: `eval(x) = logistic(offset + x'beta)`.
#[derive(Clone, Debug)]
pub struct FrozenTruth {
    beta: Arc<SegmentCoeffs>,
    qshift: f64,
}

impl FrozenTruth {
    pub fn eval(&self, x: &CovariateVector) -> f64 {
        self.eval_values(x.values())
    }

    pub fn eval_values(&self, values: &[f64]) -> f64 {
        logistic(self.beta.intercept + self.qshift + dot(values, &self.beta.beta))
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta.beta
    }

    pub fn intercept(&self) -> f64 {
        self.beta.intercept
    }

    /// This epoch's drift offset on the logit scale.
    pub fn qshift(&self) -> f64 {
        self.qshift
    }
}

impl GroundTruthModel {
    /// Static truth with a single coefficient segment.
    pub fn single(schema: Schema, beta: Vec<f64>, intercept: f64) -> Result<Self> {
        GroundTruthModel::with_segments(
            schema,
            vec![SegmentCoeffs { beta, intercept }],
            vec![],
        )
    }

    /// Piecewise truth. `change_epochs` must be strictly increasing with one
    /// entry per segment boundary; an empty list means a single regime.
    pub fn with_segments(
        schema: Schema,
        segments: Vec<SegmentCoeffs>,
        change_epochs: Vec<u64>,
    ) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::config("truth.segments", "need at least one segment"));
        }
        if change_epochs.len() != segments.len() - 1 {
            return Err(Error::config(
                "truth.change_epochs",
                format!(
                    "{} change epochs cannot separate {} segments",
                    change_epochs.len(),
                    segments.len()
                ),
            ));
        }
        if change_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(
                "truth.change_epochs",
                "must be strictly increasing",
            ));
        }
        for (i, seg) in segments.iter().enumerate() {
            if seg.beta.len() != schema.len() {
                return Err(Error::DimensionMismatch {
                    expected: schema.len(),
                    got: seg.beta.len(),
                });
            }
            if seg.beta.iter().any(|b| !b.is_finite()) || !seg.intercept.is_finite() {
                return Err(Error::config(
                    format!("truth.segments[{i}]"),
                    "coefficients must be finite",
                ));
            }
        }
        Ok(GroundTruthModel {
            schema,
            segments: segments.into_iter().map(Arc::new).collect(),
            change_epochs,
            drift: DriftSpec::None,
        })
    }

    pub fn with_drift(mut self, drift: DriftSpec) -> Result<Self> {
        if let DriftSpec::Bounded { alpha, .. } = &drift {
            if !(alpha.is_finite() && *alpha >= 0.0) {
                return Err(Error::config("truth.drift.alpha", "must be >= 0"));
            }
        }
        self.drift = drift;
        Ok(self)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn segments(&self) -> impl Iterator<Item = &SegmentCoeffs> {
        self.segments.iter().map(|s| s.as_ref())
    }

    pub fn change_epochs(&self) -> &[u64] {
        &self.change_epochs
    }

    pub fn segment_index(&self, epoch: u64) -> usize {
        self.change_epochs.partition_point(|&c| c <= epoch)
    }

    /// Pin the truth to `epoch`, resolving both the active segment and the
    /// epoch's drift offset.
    pub fn frozen(&self, epoch: u64) -> FrozenTruth {
        let qshift = match &self.drift {
            DriftSpec::None => 0.0,
            DriftSpec::Bounded { alpha, stream } if *alpha > 0.0 => {
                stream.derive("epoch-shift", epoch).uniform(-alpha, *alpha)
            }
            DriftSpec::Bounded { .. } => 0.0,
        };
        FrozenTruth {
            beta: Arc::clone(&self.segments[self.segment_index(epoch)]),
            qshift,
        }
    }

    /// `P(Y = 1 | X = x)` at `epoch`. Convenience wrapper for one-off
    /// evaluations; hot loops should freeze once per epoch.
    pub fn eval(&self, epoch: u64, x: &CovariateVector) -> f64 {
        self.frozen(epoch).eval(x)
    }

    /// Draw the binary outcome for one individual.
    pub fn draw_outcome(&self, epoch: u64, x: &CovariateVector, rng: &mut impl Rng) -> bool {
        rng.gen_bool(self.eval(epoch, x).clamp(0.0, 1.0))
    }
}

/// Coefficient law for shock regimes: each coefficient i.i.d. uniform.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ShockLaw {
    pub lo: f64,
    pub hi: f64,
}

/// Draw one coefficient segment per regime. Segment `i` derives from stream
/// child `("segment", i)`, so extending the horizon leaves earlier regimes
/// unchanged.
pub fn sample_shock_segments(
    p: usize,
    n_segments: usize,
    law: ShockLaw,
    intercept: f64,
    stream: &RngStream,
) -> Result<Vec<SegmentCoeffs>> {
    if n_segments == 0 {
        return Err(Error::config("shocks.segments", "need at least one segment"));
    }
    if !(law.lo < law.hi) {
        return Err(Error::config("shocks.law", "lo must be < hi"));
    }
    Ok((0..n_segments)
        .map(|i| SegmentCoeffs {
            beta: stream
                .derive("segment", i as u64)
                .uniform_vec(p, law.lo, law.hi),
            intercept,
        })
        .collect())
}
