//! Risk score estimators.
//!
//! A [`RiskScore`] is anything that maps covariates to an estimated
//! probability. Four kinds cover the study designs here:
//!
//! * [`LogisticModel`]: parametric fit via iteratively reweighted least
//!   squares (see [`logistic`]).
//! * [`ForestModel`]: bagged CART regression trees (see [`forest`]).
//! * [`McTable`]: an empirical probe table, used when a score is defined by
//!   Monte Carlo averaging over simulated chains rather than by fitting.
//! * [`OracleScore`]: the exact conditional outcome probability
//!   `P(Y_e = 1 | X_e(0) = x)`, computed by pushing `x` through the epoch's
//!   intervention chain and averaging the truth at the endpoint.
//!
//! Predictions always land in `[0, 1]` and reject dimension mismatches.

pub mod forest;
pub mod logistic;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateVector, Schema};
use crate::engine::InterventionMap;
use crate::error::{Error, Result};
use crate::ground_truth::FrozenTruth;
use crate::qtransform::PROB_CLAMP;
use crate::rng::RngStream;

pub use forest::{fit_forest, ForestFitParams, ForestModel};
pub use logistic::{fit_logistic, LogisticFitParams, LogisticModel};

/// Conditions encountered during fitting that callers may want to surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFlag {
    /// Every training label was the same class; the fit degenerates to a
    /// constant predictor at the clamped empirical rate.
    AllOneClass,
    /// The optimizer hit its iteration cap or the coefficients grew past the
    /// separation threshold; the ridge penalty keeps the fit finite.
    SeparationSuspected,
}

/// Training data for one refit: pre-intervention covariates paired with
/// observed outcomes, tagged with the epoch that produced them.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    schema: Schema,
    features: Vec<f64>,
    labels: Vec<f64>,
    epoch: u64,
}

impl TrainingSet {
    pub fn new(schema: Schema, epoch: u64) -> Self {
        TrainingSet {
            schema,
            features: Vec::new(),
            labels: Vec::new(),
            epoch,
        }
    }

    pub fn push(&mut self, values: &[f64], y: bool) -> Result<()> {
        if values.len() != self.schema.len() {
            return Err(Error::DimensionMismatch {
                expected: self.schema.len(),
                got: values.len(),
            });
        }
        self.features.extend_from_slice(values);
        self.labels.push(if y { 1.0 } else { 0.0 });
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let p = self.dim();
        &self.features[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Replace the label column, keeping features. The clinical study refits
    /// on the same individuals every epoch; only outcomes change.
    pub fn set_labels(&mut self, labels: Vec<f64>, epoch: u64) -> Result<()> {
        if labels.len() != self.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows(),
                got: labels.len(),
            });
        }
        self.labels = labels;
        self.epoch = epoch;
        Ok(())
    }
}

/// Monte Carlo probe table: estimated score values at a fixed set of points.
/// Prediction is nearest-point lookup (exact hits in the common case where
/// queries come from the same tracked set the table was built on).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McTable {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub epoch_of_fit: u64,
    pub replicates: usize,
}

impl McTable {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>, epoch_of_fit: u64, replicates: usize) -> Result<Self> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::config(
                "mc_table",
                "points and values must be non-empty and equal length",
            ));
        }
        Ok(McTable { points, values, epoch_of_fit, replicates })
    }

    pub fn predict_values(&self, x: &[f64]) -> Result<f64> {
        let p = self.points[0].len();
        if x.len() != p {
            return Err(Error::DimensionMismatch { expected: p, got: x.len() });
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, point) in self.points.iter().enumerate() {
            let d: f64 = point.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(self.values[best].clamp(0.0, 1.0))
    }
}

/// Exact score under the simulation's own assumptions: push `x` through the
/// epoch's intervention chain and average the frozen truth at the endpoint.
/// Deterministic chains take a single pass; stochastic chains average
/// `replicates` Monte Carlo draws seeded by the bit pattern of `x`, so the
/// prediction is a pure function of `x`.
#[derive(Clone, Debug)]
pub struct OracleScore {
    pub truth: FrozenTruth,
    pub map: InterventionMap,
    pub schema: Schema,
    pub replicates: usize,
    pub stream: RngStream,
    pub epoch_of_fit: u64,
}

impl OracleScore {
    pub fn predict(&self, x: &CovariateVector) -> Result<f64> {
        oracle_predict(
            &self.truth,
            &self.map,
            x,
            self.replicates,
            &self.stream,
        )
    }
}

/// `P(Y = 1 | X(0) = x)` under frozen truth and a given intervention map.
/// One exact pass when the map is deterministic, otherwise the mean over
/// `replicates` chain draws. The draw stream is derived from the bit pattern
/// of `x`, making repeated calls identical.
pub fn oracle_predict(
    truth: &FrozenTruth,
    map: &InterventionMap,
    x: &CovariateVector,
    replicates: usize,
    stream: &RngStream,
) -> Result<f64> {
    if map.is_deterministic() {
        let end = map.apply_chain(x, &mut seed_for_point(stream, x.values(), 0))?;
        return Ok(truth.eval(&end).clamp(0.0, 1.0));
    }
    if replicates == 0 {
        return Err(Error::config("oracle.replicates", "must be >= 1"));
    }
    let mut sum = 0.0;
    let mut rng = seed_for_point(stream, x.values(), 0);
    for _ in 0..replicates {
        let end = map.apply_chain(x, &mut rng)?;
        sum += truth.eval(&end);
    }
    Ok((sum / replicates as f64).clamp(0.0, 1.0))
}

fn seed_for_point(stream: &RngStream, values: &[f64], salt: u64) -> ChaCha12Rng {
    let mut bytes = Vec::with_capacity(values.len() * 8 + 8);
    for v in values {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    bytes.extend_from_slice(&salt.to_le_bytes());
    ChaCha12Rng::from_seed(
        stream
            .derive_bytes("oracle-point", &bytes)
            .rng()
            .get_seed(),
    )
}

/// A fitted (or defined) risk score of any supported kind.
#[derive(Clone, Debug)]
pub enum RiskScore {
    Logistic(LogisticModel),
    Forest(std::sync::Arc<ForestModel>),
    McEmpirical(std::sync::Arc<McTable>),
    Oracle(std::sync::Arc<OracleScore>),
}

impl RiskScore {
    pub fn kind_name(&self) -> &'static str {
        match self {
            RiskScore::Logistic(_) => "logistic",
            RiskScore::Forest(_) => "forest",
            RiskScore::McEmpirical(_) => "mc-empirical",
            RiskScore::Oracle(_) => "oracle",
        }
    }

    pub fn epoch_of_fit(&self) -> u64 {
        match self {
            RiskScore::Logistic(m) => m.epoch_of_fit,
            RiskScore::Forest(m) => m.epoch_of_fit,
            RiskScore::McEmpirical(m) => m.epoch_of_fit,
            RiskScore::Oracle(m) => m.epoch_of_fit,
        }
    }

    pub fn flags(&self) -> &[FitFlag] {
        match self {
            RiskScore::Logistic(m) => &m.flags,
            RiskScore::Forest(m) => &m.flags,
            _ => &[],
        }
    }

    /// Estimated risk at `x`, guaranteed inside `[0, 1]`.
    pub fn predict(&self, x: &CovariateVector) -> Result<f64> {
        match self {
            RiskScore::Oracle(m) => m.predict(x),
            _ => self.predict_values(x.values()),
        }
    }

    /// Value-slice prediction for hot loops. Oracle scores need the schema
    /// carried by [`RiskScore::predict`]; they rebuild the vector here.
    pub fn predict_values(&self, values: &[f64]) -> Result<f64> {
        match self {
            RiskScore::Logistic(m) => m.predict_values(values),
            RiskScore::Forest(m) => m.predict_values(values),
            RiskScore::McEmpirical(m) => m.predict_values(values),
            RiskScore::Oracle(m) => {
                let x = CovariateVector::new(m.schema.clone(), values.to_vec())?;
                m.predict(&x)
            }
        }
    }
}

/// Clamp an empirical success rate into the open unit interval.
pub fn clamp_rate(rate: f64) -> f64 {
    rate.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_set_rows_roundtrip() {
        let mut t = TrainingSet::new(Schema::unbounded_real(2), 3);
        t.push(&[1.0, 2.0], true).unwrap();
        t.push(&[3.0, 4.0], false).unwrap();
        assert_eq!(t.n_rows(), 2);
        assert_eq!(t.row(0), &[1.0, 2.0]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
        assert_eq!(t.label(0), 1.0);
        assert_eq!(t.label(1), 0.0);
        assert_eq!(t.epoch(), 3);
        assert!(t.push(&[1.0], true).is_err());
        t.set_labels(vec![0.0, 1.0], 4).unwrap();
        assert_eq!(t.label(0), 0.0);
        assert_eq!(t.epoch(), 4);
        assert!(t.set_labels(vec![0.0], 5).is_err());
    }

    #[test]
    fn mc_table_lookup_prefers_nearest_point() {
        let table = McTable::new(
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0]],
            vec![0.1, 0.5, 0.9],
            0,
            100,
        )
        .unwrap();
        assert_eq!(table.predict_values(&[0.0, 0.0]).unwrap(), 0.1);
        assert_eq!(table.predict_values(&[1.01, 0.99]).unwrap(), 0.5);
        assert_eq!(table.predict_values(&[5.0, 0.0]).unwrap(), 0.9);
        assert!(table.predict_values(&[0.0]).is_err());
    }
}
