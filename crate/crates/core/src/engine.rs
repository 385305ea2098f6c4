//! The epoch loop.
//!
//! Each epoch `e` the engine:
//!
//! 1. freezes the truth `f_e` and the intervention `g_e` (the intervention's
//!    sign vector can track the truth's active segment);
//! 2. advances every tracked sample's chain ensemble by one intervention
//!    step using the score fitted last epoch, producing realizations of the
//!    post-intervention state `X_e(1)`;
//! 3. draws a fresh training population (if the estimator needs one), maps
//!    it through the policy's intervention map, draws outcomes at the mapped
//!    covariates, and fits the next score on *pre*-intervention covariates;
//! 4. logs, per tracked sample, the true conditional risk
//!    `P(Y_e = 1 | X_e(0) = x)` (ensemble average of `f_e` over the chains),
//!    the freshly fitted score's estimate at `x`, a drawn outcome, and the
//!    realized post-intervention covariates.
//!
//! The defining subtlety of the stacked design lives in step 3: every score
//! in the stack is always evaluated at the *original* covariates `x`, not at
//! the partially intervened state, and the chain applies those historical
//! decisions in fit order. Naive retraining instead applies only the latest
//! score; the holdout policy leaves a fraction of training rows untouched
//! and fits on them alone.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::EpochClock;
use crate::covariates::CovariateVector;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_forest, fit_logistic, oracle_predict, ForestFitParams, LogisticFitParams, McTable,
    OracleScore, RiskScore, TrainingSet,
};
use crate::ground_truth::{FrozenTruth, GroundTruthModel};
use crate::interventions::{InterventionKind, InterventionModel};
use crate::rng::RngStream;

// ── Intervention maps ──

/// How scores feed the intervention when a population row is mapped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    /// Apply every score in fit order, each evaluated at the original `x`.
    Stacked,
    /// Apply only the most recently fitted score.
    NaiveLatest,
    /// No intervention.
    Identity,
}

/// A score history bound to an intervention, ready to map covariates.
#[derive(Clone, Debug)]
pub struct InterventionMap {
    pub g: InterventionModel,
    pub scores: Arc<Vec<RiskScore>>,
    pub mode: MapMode,
    pub post_clamp: Option<(f64, f64)>,
}

impl InterventionMap {
    /// Deterministic iff the intervention is; scores are pure functions.
    pub fn is_deterministic(&self) -> bool {
        self.mode == MapMode::Identity || self.g.is_deterministic()
    }

    fn clamp_state(&self, x: &mut CovariateVector) {
        if let Some((lo, hi)) = self.post_clamp {
            for v in x.values_mut() {
                *v = v.clamp(lo, hi);
            }
        }
    }

    /// One realization of the post-intervention state for original
    /// covariates `x`.
    pub fn apply_chain(&self, x: &CovariateVector, rng: &mut ChaCha12Rng) -> Result<CovariateVector> {
        let mut state = x.clone();
        self.clamp_state(&mut state);
        match self.mode {
            MapMode::Identity => {}
            MapMode::NaiveLatest => {
                if let Some(last) = self.scores.last() {
                    let rho = last.predict(x)?;
                    self.g.apply_in_place(rho, &mut state, rng);
                    self.clamp_state(&mut state);
                }
            }
            MapMode::Stacked => {
                for score in self.scores.iter() {
                    let rho = score.predict(x)?;
                    self.g.apply_in_place(rho, &mut state, rng);
                    self.clamp_state(&mut state);
                }
            }
        }
        Ok(state)
    }
}

// ── Score stacks and persistence ──

pub const STACK_SCHEMA_VERSION: &str = "stacklab.score-stack.v1";

/// Append-only history of fitted scores.
#[derive(Clone, Debug, Default)]
pub struct ScoreStack {
    scores: Vec<RiskScore>,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    schema_version: String,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
enum PersistedScore {
    Logistic(crate::estimators::LogisticModel),
    Forest(crate::estimators::ForestModel),
    McEmpirical(McTable),
    /// Oracle scores are defined by recomputation, not parameters; they
    /// persist as their values at the experiment's tracked points and reload
    /// as lookup tables.
    OracleAtTrackedPoints(McTable),
}

impl ScoreStack {
    pub fn new() -> Self {
        ScoreStack::default()
    }

    pub fn push(&mut self, score: RiskScore) {
        self.scores.push(score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[RiskScore] {
        &self.scores
    }

    pub fn latest(&self) -> Option<&RiskScore> {
        self.scores.last()
    }

    pub fn shared(&self) -> Arc<Vec<RiskScore>> {
        Arc::new(self.scores.clone())
    }

    /// Write the stack as JSON Lines: a header line, then one score per
    /// line in fit order. The format is append-only: saving after more
    /// epochs extends the same file prefix. Oracle entries need the tracked
    /// points and per-epoch values they were observed at.
    pub fn save_jsonl(
        &self,
        path: &Path,
        tracked_points: &[Vec<f64>],
        score_values: &[Vec<f64>],
    ) -> Result<()> {
        let dim = tracked_points.first().map_or(0, |p| p.len());
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &StackHeader { schema_version: STACK_SCHEMA_VERSION.into(), dim },
        )?;
        out.write_all(b"\n")?;
        for (e, score) in self.scores.iter().enumerate() {
            let persisted = match score {
                RiskScore::Logistic(m) => PersistedScore::Logistic(m.clone()),
                RiskScore::Forest(m) => PersistedScore::Forest((**m).clone()),
                RiskScore::McEmpirical(m) => PersistedScore::McEmpirical((**m).clone()),
                RiskScore::Oracle(m) => {
                    let values = score_values.get(e).ok_or_else(|| {
                        Error::StackFormat(format!("no recorded values for oracle score {e}"))
                    })?;
                    PersistedScore::OracleAtTrackedPoints(McTable::new(
                        tracked_points.to_vec(),
                        values.clone(),
                        m.epoch_of_fit,
                        m.replicates,
                    )?)
                }
            };
            serde_json::to_writer(&mut out, &persisted)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<(usize, ScoreStack)> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::StackFormat("empty stack file".into()))??;
        let header: StackHeader = serde_json::from_str(&header_line)?;
        if header.schema_version != STACK_SCHEMA_VERSION {
            return Err(Error::StackFormat(format!(
                "unsupported schema version {}",
                header.schema_version
            )));
        }
        let mut stack = ScoreStack::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let persisted: PersistedScore = serde_json::from_str(&line)?;
            stack.push(match persisted {
                PersistedScore::Logistic(m) => RiskScore::Logistic(m),
                PersistedScore::Forest(m) => RiskScore::Forest(Arc::new(m)),
                PersistedScore::McEmpirical(m) | PersistedScore::OracleAtTrackedPoints(m) => {
                    RiskScore::McEmpirical(Arc::new(m))
                }
            });
        }
        Ok((header.dim, stack))
    }
}

// ── Configuration ──

/// How covariate points are drawn (tracked samples and training rows).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PointSampler {
    Normal { sd: f64 },
    Uniform { lo: f64, hi: f64 },
    Explicit { points: Vec<Vec<f64>> },
}

impl PointSampler {
    /// Draw `count` points of dimension `p`. Point `i` uses stream child
    /// `("point", i)`, so enlarging the set keeps earlier points.
    pub fn draw(&self, count: usize, p: usize, stream: &RngStream) -> Result<Vec<Vec<f64>>> {
        match self {
            PointSampler::Normal { sd } => {
                if !(sd.is_finite() && *sd > 0.0) {
                    return Err(Error::config("sampler.sd", "must be positive"));
                }
                Ok((0..count)
                    .map(|i| stream.derive("point", i as u64).normal_vec(p, 0.0, *sd))
                    .collect())
            }
            PointSampler::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::config("sampler", "lo must be < hi"));
                }
                Ok((0..count)
                    .map(|i| stream.derive("point", i as u64).uniform_vec(p, *lo, *hi))
                    .collect())
            }
            PointSampler::Explicit { points } => {
                if points.len() < count {
                    return Err(Error::config(
                        "sampler.points",
                        format!("need {count} points, got {}", points.len()),
                    ));
                }
                if points.iter().any(|pt| pt.len() != p) {
                    return Err(Error::config("sampler.points", "wrong dimension"));
                }
                Ok(points[..count].to_vec())
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EstimatorSpec {
    /// Exact conditional risk by chain composition. Requires a
    /// deterministic intervention; `replicates` only matters for arbitrary-x
    /// prediction under stochastic maps, which this restriction rules out.
    Oracle,
    /// Monte Carlo score table over the tracked points: the mean of `f_e`
    /// over each sample's first `replicates` chains.
    McEmpirical { replicates: usize },
    Logistic {
        #[serde(default)]
        params: LogisticFitParams,
    },
    Forest {
        #[serde(default)]
        params: ForestFitParams,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum UpdatePolicy {
    /// Refit every epoch; deploy the whole stack.
    Stacked,
    /// Refit every epoch; deploy only the latest score.
    Naive,
    /// Leave `fraction` of training rows unintervened and fit on them alone;
    /// deploy the stack to everyone else.
    Holdout { fraction: f64 },
    /// Never intervene, never refit. Control arm.
    None,
}

#[derive(Clone, Debug)]
pub struct TrackedSpec {
    pub count: usize,
    pub sampler: PointSampler,
}

#[derive(Clone, Debug)]
pub struct PopulationSpec {
    pub n: usize,
    pub sampler: PointSampler,
}

/// Fully assembled experiment. Built either directly (tests, demos) or from
/// a JSON config (see [`crate::config`]).
#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub seed: u64,
    pub epochs: u64,
    pub truth: GroundTruthModel,
    pub g: InterventionModel,
    pub estimator: EstimatorSpec,
    pub policy: UpdatePolicy,
    pub tracked: TrackedSpec,
    pub population: Option<PopulationSpec>,
    /// Ensemble size used to estimate the logged true risk under a
    /// stochastic intervention; deterministic interventions use one chain.
    pub rho_true_replicates: usize,
    pub post_clamp: Option<(f64, f64)>,
    /// Rebuild the intervention's sign vector from the truth's active
    /// segment each epoch (clamped-signed-cbrt only).
    pub signs_track_truth: bool,
    /// Record full chain states at these epochs.
    pub snapshot_epochs: Vec<u64>,
}

impl EngineConfig {
    fn validate(&self) -> Result<()> {
        if self.tracked.count == 0 {
            return Err(Error::config("tracked.count", "must be >= 1"));
        }
        if self.rho_true_replicates == 0 {
            return Err(Error::config("rho_true_replicates", "must be >= 1"));
        }
        if let Some((lo, hi)) = self.post_clamp {
            if !(lo < hi) {
                return Err(Error::config("post_clamp", "lo must be < hi"));
            }
        }
        if self.signs_track_truth
            && !matches!(self.g.kind, InterventionKind::ClampedSignedCbrt { .. })
        {
            return Err(Error::config(
                "signs_track_truth",
                "only applies to the clamped-signed-cbrt intervention",
            ));
        }
        match &self.estimator {
            EstimatorSpec::Oracle => {
                if !self.g.is_deterministic() {
                    return Err(Error::config(
                        "estimator",
                        "oracle scoring requires a deterministic intervention; use mc-empirical",
                    ));
                }
            }
            EstimatorSpec::McEmpirical { replicates } => {
                if *replicates == 0 {
                    return Err(Error::config("estimator.replicates", "must be >= 1"));
                }
            }
            EstimatorSpec::Logistic { .. } | EstimatorSpec::Forest { .. } => {
                if self.policy != UpdatePolicy::None
                    && self.population.as_ref().map_or(true, |p| p.n == 0)
                {
                    return Err(Error::config(
                        "population",
                        "trained estimators need a training population",
                    ));
                }
            }
        }
        match self.policy {
            UpdatePolicy::Holdout { fraction } => {
                if !(fraction > 0.0 && fraction < 1.0) {
                    return Err(Error::config("policy.fraction", "must lie in (0, 1)"));
                }
                if matches!(
                    self.estimator,
                    EstimatorSpec::Oracle | EstimatorSpec::McEmpirical { .. }
                ) {
                    return Err(Error::config(
                        "policy",
                        "holdout fitting requires a trained estimator",
                    ));
                }
            }
            UpdatePolicy::Stacked | UpdatePolicy::Naive | UpdatePolicy::None => {}
        }
        Ok(())
    }
}

// ── State and the epoch loop ──

struct Chain {
    values: Vec<f64>,
    rng: ChaCha12Rng,
}

struct TrackedSample {
    x0: CovariateVector,
    chains: Vec<Chain>,
    outcome_rng: ChaCha12Rng,
}

/// One logged observation: tracked sample `sample_id` at `epoch`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: u64,
    pub sample_id: usize,
    /// `P(Y_e = 1 | X_e(0) = x)`: ensemble mean of `f_e` over the chains.
    pub rho_true: f64,
    /// The epoch-`e` score's estimate at the original covariates.
    pub rho_est: f64,
    pub y: u8,
    /// Realized post-intervention covariates of the first chain.
    pub x_post: Vec<f64>,
}

pub struct ExperimentResult {
    pub rows: Vec<TrajectoryRow>,
    pub stack: ScoreStack,
    pub tracked_points: Vec<Vec<f64>>,
    /// `score_values[e][i]`: the epoch-`e` score at tracked point `i`.
    pub score_values: Vec<Vec<f64>>,
    /// Chain states at requested epochs: `snapshots[&e][sample][chain]`.
    pub snapshots: BTreeMap<u64, Vec<Vec<Vec<f64>>>>,
    /// Count of fit flags raised across all refits, by flag name.
    pub fit_flags: BTreeMap<String, usize>,
}

pub struct EngineState {
    config: EngineConfig,
    stream: RngStream,
    clock: EpochClock,
    stack: ScoreStack,
    tracked: Vec<TrackedSample>,
    score_values: Vec<Vec<f64>>,
    snapshots: BTreeMap<u64, Vec<Vec<Vec<f64>>>>,
    fit_flags: BTreeMap<String, usize>,
}

impl EngineState {
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let stream = RngStream::from_seed(config.seed);
        let schema = config.truth.schema().clone();
        let points = config.tracked.sampler.draw(
            config.tracked.count,
            schema.len(),
            &stream.derive("tracked", 0),
        )?;

        let n_chains = if config.g.is_deterministic() {
            1
        } else {
            let score_reps = match &config.estimator {
                EstimatorSpec::McEmpirical { replicates } => *replicates,
                _ => 0,
            };
            config.rho_true_replicates.max(score_reps)
        };

        let clamp = |mut v: Vec<f64>| {
            if let Some((lo, hi)) = config.post_clamp {
                for x in &mut v {
                    *x = x.clamp(lo, hi);
                }
            }
            v
        };

        let tracked = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let sample_stream = stream.derive("sample", i as u64);
                let chains = (0..n_chains)
                    .map(|k| Chain {
                        values: clamp(p.clone()),
                        rng: sample_stream.derive("chain", k as u64).rng(),
                    })
                    .collect();
                Ok(TrackedSample {
                    x0: CovariateVector::new(schema.clone(), p.clone())?,
                    chains,
                    outcome_rng: sample_stream.derive("outcome", 0).rng(),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(EngineState {
            config,
            stream,
            clock: EpochClock::new(tracked.len()),
            stack: ScoreStack::new(),
            tracked,
            score_values: Vec::new(),
            snapshots: BTreeMap::new(),
            fit_flags: BTreeMap::new(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.clock.epoch()
    }

    pub fn stack(&self) -> &ScoreStack {
        &self.stack
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn tracked_points(&self) -> Vec<Vec<f64>> {
        self.tracked.iter().map(|t| t.x0.values().to_vec()).collect()
    }

    pub fn score_values(&self) -> &[Vec<f64>] {
        &self.score_values
    }

    /// The intervention as deployed at `epoch`: sign vectors may track the
    /// truth's active segment.
    pub fn g_at(&self, epoch: u64) -> Result<InterventionModel> {
        if self.config.signs_track_truth {
            let signs = self
                .config
                .truth
                .frozen(epoch)
                .beta()
                .iter()
                .map(|b| {
                    if *b > 0.0 {
                        1.0
                    } else if *b < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            self.config.g.with_signs(signs)
        } else {
            Ok(self.config.g.clone())
        }
    }

    fn map_mode(&self) -> MapMode {
        match self.config.policy {
            UpdatePolicy::Stacked | UpdatePolicy::Holdout { .. } => MapMode::Stacked,
            UpdatePolicy::Naive => MapMode::NaiveLatest,
            UpdatePolicy::None => MapMode::Identity,
        }
    }

    /// The map a fresh individual would pass through at the current epoch,
    /// built from the scores fitted so far.
    pub fn current_map(&self, epoch: u64) -> Result<InterventionMap> {
        Ok(InterventionMap {
            g: self.g_at(epoch)?,
            scores: self.stack.shared(),
            mode: self.map_mode(),
            post_clamp: self.config.post_clamp,
        })
    }

    /// Run one epoch; returns the tracked-sample log rows for this epoch.
    pub fn run_epoch(&mut self) -> Result<Vec<TrajectoryRow>> {
        let e = self.clock.epoch();
        let truth_e = self.config.truth.frozen(e);
        let g_e = self.g_at(e)?;
        let post_clamp = self.config.post_clamp;
        let policy = self.config.policy.clone();

        // Step 1: advance chains with last epoch's score values.
        if e > 0 && !matches!(policy, UpdatePolicy::None) {
            let last_values = &self.score_values[(e - 1) as usize];
            let naive = matches!(policy, UpdatePolicy::Naive);
            self.tracked
                .par_iter_mut()
                .zip(last_values.par_iter())
                .for_each(|(sample, &rho)| {
                    for chain in &mut sample.chains {
                        if naive {
                            chain.values.copy_from_slice(sample.x0.values());
                            if let Some((lo, hi)) = post_clamp {
                                for v in &mut chain.values {
                                    *v = v.clamp(lo, hi);
                                }
                            }
                        }
                        // Borrow the values as a schema-checked vector only in
                        // debug; hot path works on raw slices via a temporary.
                        let mut state =
                            CovariateVector::new_unchecked(sample.x0.schema().clone(), std::mem::take(&mut chain.values));
                        g_e.apply_in_place(rho, &mut state, &mut chain.rng);
                        chain.values = state.into_values();
                        if let Some((lo, hi)) = post_clamp {
                            for v in &mut chain.values {
                                *v = v.clamp(lo, hi);
                            }
                        }
                    }
                });
        }

        // Step 2: true conditional risk per tracked sample.
        let rho_true: Vec<f64> = self
            .tracked
            .par_iter()
            .map(|sample| {
                let sum: f64 = sample
                    .chains
                    .iter()
                    .map(|c| truth_e.eval_values(&c.values))
                    .sum();
                sum / sample.chains.len() as f64
            })
            .collect();

        if self.config.snapshot_epochs.contains(&e) {
            let snap = self
                .tracked
                .iter()
                .map(|s| s.chains.iter().map(|c| c.values.clone()).collect())
                .collect();
            self.snapshots.insert(e, snap);
        }

        // Step 3: fit this epoch's score.
        let fitted = match policy {
            UpdatePolicy::None => None,
            _ => Some(self.fit_score(e, &truth_e, &g_e)?),
        };

        // Step 4: the new score's estimate at each tracked point.
        let rho_est: Vec<f64> = match &fitted {
            None => vec![f64::NAN; self.tracked.len()],
            Some(score) => match score {
                // An oracle score at a tracked point is exactly the ensemble
                // value already computed (single deterministic chain).
                RiskScore::Oracle(_) => rho_true.clone(),
                _ => self
                    .tracked
                    .iter()
                    .map(|s| score.predict(&s.x0))
                    .collect::<Result<Vec<_>>>()?,
            },
        };

        if let Some(score) = fitted {
            for flag in score.flags() {
                *self
                    .fit_flags
                    .entry(format!("{flag:?}"))
                    .or_insert(0) += 1;
            }
            self.stack.push(score);
            self.score_values.push(rho_est.clone());
        } else {
            self.score_values.push(rho_est.clone());
        }

        // Step 5: log rows.
        let rows = self
            .tracked
            .iter_mut()
            .enumerate()
            .map(|(i, sample)| {
                let p_here = truth_e.eval_values(&sample.chains[0].values).clamp(0.0, 1.0);
                TrajectoryRow {
                    epoch: e,
                    sample_id: i,
                    rho_true: rho_true[i],
                    rho_est: rho_est[i],
                    y: sample.outcome_rng.gen_bool(p_here) as u8,
                    x_post: sample.chains[0].values.clone(),
                }
            })
            .collect();

        self.clock.advance();
        Ok(rows)
    }

    fn fit_score(&self, e: u64, truth_e: &FrozenTruth, g_e: &InterventionModel) -> Result<RiskScore> {
        let schema = self.config.truth.schema().clone();
        match &self.config.estimator {
            EstimatorSpec::Oracle => Ok(RiskScore::Oracle(Arc::new(OracleScore {
                truth: truth_e.clone(),
                map: InterventionMap {
                    g: g_e.clone(),
                    scores: self.stack.shared(),
                    mode: self.map_mode(),
                    post_clamp: self.config.post_clamp,
                },
                schema,
                replicates: 1,
                stream: self.stream.derive("oracle", e),
                epoch_of_fit: e,
            }))),
            EstimatorSpec::McEmpirical { replicates } => {
                let points = self.tracked_points();
                let values: Vec<f64> = self
                    .tracked
                    .par_iter()
                    .map(|sample| {
                        let k = (*replicates).min(sample.chains.len());
                        let sum: f64 = sample.chains[..k]
                            .iter()
                            .map(|c| truth_e.eval_values(&c.values))
                            .sum();
                        sum / k as f64
                    })
                    .collect();
                Ok(RiskScore::McEmpirical(Arc::new(McTable::new(
                    points,
                    values,
                    e,
                    *replicates,
                )?)))
            }
            EstimatorSpec::Logistic { .. } | EstimatorSpec::Forest { .. } => {
                let pop = self.config.population.as_ref().expect("validated");
                let pop_stream = self.stream.derive("population", e);
                let points = pop.sampler.draw(pop.n, schema.len(), &pop_stream)?;

                let holdout_cut = match self.config.policy {
                    UpdatePolicy::Holdout { fraction } => {
                        (fraction * pop.n as f64).ceil() as usize
                    }
                    _ => 0,
                };
                let map = InterventionMap {
                    g: g_e.clone(),
                    scores: self.stack.shared(),
                    mode: self.map_mode(),
                    post_clamp: self.config.post_clamp,
                };

                // Map rows, draw outcomes. Row i is held out iff i < cut
                // (rows are i.i.d., so the prefix is an unbiased subsample).
                let outcomes: Vec<(bool, bool)> = points
                    .par_iter()
                    .enumerate()
                    .map(|(i, values)| -> Result<(bool, bool)> {
                        let mut rng = pop_stream.derive("row", i as u64).rng();
                        let x = CovariateVector::new_unchecked(schema.clone(), values.clone());
                        let held_out = i < holdout_cut;
                        let post = if held_out {
                            x.clone()
                        } else {
                            map.apply_chain(&x, &mut rng)?
                        };
                        let p = truth_e.eval(&post).clamp(0.0, 1.0);
                        Ok((held_out, rng.gen_bool(p)))
                    })
                    .collect::<Result<Vec<_>>>()?;

                let mut train = TrainingSet::new(schema, e);
                for (i, values) in points.iter().enumerate() {
                    let (held_out, y) = outcomes[i];
                    let use_row = if holdout_cut > 0 { held_out } else { true };
                    if use_row {
                        train.push(values, y)?;
                    }
                }

                match &self.config.estimator {
                    EstimatorSpec::Logistic { params } => {
                        Ok(RiskScore::Logistic(fit_logistic(&train, params)?))
                    }
                    EstimatorSpec::Forest { params } => Ok(RiskScore::Forest(Arc::new(
                        fit_forest(&train, params, &self.stream.derive("forest", e))?,
                    ))),
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Exact conditional risk at an arbitrary point under the current map,
    /// averaging `replicates` chains for stochastic interventions.
    pub fn oracle_risk_at(&self, epoch: u64, x: &CovariateVector, replicates: usize) -> Result<f64> {
        let truth_e = self.config.truth.frozen(epoch);
        let map = self.current_map(epoch)?;
        oracle_predict(&truth_e, &map, x, replicates, &self.stream.derive("oracle-probe", epoch))
    }

    pub fn into_result(self, rows: Vec<TrajectoryRow>) -> ExperimentResult {
        ExperimentResult {
            rows,
            stack: self.stack,
            tracked_points: self
                .tracked
                .iter()
                .map(|t| t.x0.values().to_vec())
                .collect(),
            score_values: self.score_values,
            snapshots: self.snapshots,
            fit_flags: self.fit_flags,
        }
    }
}

/// Run `config.epochs` epochs (at least one) and collect everything.
pub fn run_experiment(config: EngineConfig) -> Result<ExperimentResult> {
    let epochs = config.epochs.max(1);
    let mut state = EngineState::new(config)?;
    let mut rows = Vec::with_capacity((epochs as usize) * state.tracked.len());
    for _ in 0..epochs {
        let epoch_rows = state.run_epoch()?;
        if let Some(first) = epoch_rows.first() {
            log::debug!(
                "epoch {}: rho_true[0] = {:.4}, rho_est[0] = {:.4}, stack depth {}",
                first.epoch,
                first.rho_true,
                first.rho_est,
                state.stack.len()
            );
        }
        rows.extend(epoch_rows);
    }
    Ok(state.into_result(rows))
}

// ── Trajectory CSV ──

/// Write rows as CSV with schema
/// `epoch, sample_id, rho_true, rho_est, y, x_post_1..p`.
pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let p = rows.first().map_or(0, |r| r.x_post.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "epoch".to_string(),
        "sample_id".to_string(),
        "rho_true".to_string(),
        "rho_est".to_string(),
        "y".to_string(),
    ];
    header.extend((1..=p).map(|i| format!("x_post_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            r.sample_id.to_string(),
            format_float(r.rho_true),
            format_float(r.rho_est),
            r.y.to_string(),
        ];
        rec.extend(r.x_post.iter().map(|v| format_float(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let p = headers.len().saturating_sub(5);
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let parse = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::StackFormat(format!("bad float in csv: {e}")))
        };
        rows.push(TrajectoryRow {
            epoch: record[0]
                .parse()
                .map_err(|e| Error::StackFormat(format!("bad epoch: {e}")))?,
            sample_id: record[1]
                .parse()
                .map_err(|e| Error::StackFormat(format!("bad sample id: {e}")))?,
            rho_true: parse(2)?,
            rho_est: parse(3)?,
            y: record[4]
                .parse()
                .map_err(|e| Error::StackFormat(format!("bad outcome: {e}")))?,
            x_post: (0..p).map(|i| parse(5 + i)).collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(rows)
}

/// Shortest round-trip float formatting; "NaN" for missing estimates.
fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}
