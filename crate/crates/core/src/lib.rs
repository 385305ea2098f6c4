//! Simulation laboratory for risk scores that act on the population they
//! score.
//!
//! The object of study is a feedback loop. Each epoch a risk score is
//! published; an intervention nudges every individual's covariates according
//! to their score; outcomes are drawn from the (possibly drifting) ground
//! truth at the post-intervention covariates; a new score is fitted to
//! pre-intervention covariates and observed outcomes and pushed onto the
//! stack. Because each new score is estimated on data already shaped by its
//! predecessors, naive retraining chases its own tail; stacking the whole
//! score history into the intervention map instead drives scores toward a
//! well-defined equilibrium band. This crate simulates the loop, fits scores,
//! and measures the theoretical bounds the dynamics should respect.
//!
//! Module map:
//!
//! * [`rng`]: splittable deterministic random streams.
//! * [`qtransform`]: monotone probability transforms (movement is measured in
//!   q-space).
//! * [`covariates`]: schemas and covariate vectors.
//! * [`ground_truth`]: logistic outcome model with drift and regime shocks.
//! * [`interventions`]: score-driven covariate maps and the well-intentioned
//!   movement check.
//! * [`estimators`]: risk score representations and fitting (logistic, random
//!   forest, Monte Carlo, oracle).
//! * [`engine`]: the epoch loop, score stacks, and update policies.
//! * [`diagnostics`]: limit bounds, containment, distributional convergence,
//!   attraction and drift intervals, shock recovery.
//! * [`population`]: the clinical cohort study (sampler, cohorts, forest
//!   refits, fairness report).
//! * [`config`]: serde-backed experiment configuration with fail-closed
//!   validation.

pub mod clock;
pub mod covariates;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod ground_truth;
pub mod interventions;
pub mod qtransform;
pub mod rng;

pub use clock::EpochClock;
pub use covariates::{CovariateVector, DimKind, DimSpec, Schema};
pub use engine::{
    run_experiment, EngineConfig, EngineState, EstimatorSpec, ExperimentResult, InterventionMap,
    MapMode, PointSampler, PopulationSpec, ScoreStack, TrackedSpec, TrajectoryRow, UpdatePolicy,
};
pub use error::{Error, Result};
pub use estimators::{
    fit_forest, fit_logistic, oracle_predict, FitFlag, ForestFitParams, ForestModel,
    LogisticFitParams, LogisticModel, McTable, OracleScore, RiskScore, TrainingSet,
};
pub use ground_truth::{DriftSpec, FrozenTruth, GroundTruthModel, SegmentCoeffs, ShockLaw};
pub use interventions::{
    healthcare_intervene, verify_well_intentioned, HealthcareRules, InterventionKind,
    InterventionModel, ProbeGrid, WellIntentionedReport,
};
pub use qtransform::{logistic, signed_cbrt, QTransform, PROB_CLAMP};
pub use rng::RngStream;
