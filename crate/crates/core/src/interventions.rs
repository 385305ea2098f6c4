//! Risk-reducing interventions and the well-intentioned check.
//!
//! An intervention `g(rho, x)` maps a risk score and a covariate vector to a
//! post-intervention covariate vector. All kinds here share one structure:
//! they push covariates so that true risk moves toward an equilibrium score
//! `rho_eq`, overshooting or undershooting depending on the functional form.
//!
//! Synthetic kinds (`dev = rho - rho_eq`, cube roots keep sign):
//!
//! * `deterministic-cbrt`: every dimension shifts by `-cbrt(dev)`.
//! * `uniform-noise-cbrt`: every dimension shifts by `-scale * cbrt(dev) * U`
//!   with a single shared `U ~ Uniform(-1/2, 1)` per application. `E[U] = 1/4`
//!   and `P(U < 0) = 1/3`, so the move helps on average but backfires a third
//!   of the time.
//! * `uniform-noise-linear`: same noise, shift `-scale * dev * U`; the step
//!   vanishes linearly as `rho` approaches `rho_eq`.
//! * `clamped-signed-cbrt`: dimension `j` shifts by `-sign_j * cbrt(dev)` and
//!   is clamped to a fixed range, aligning each move with the sign of that
//!   dimension's ground-truth coefficient.
//! * `healthcare`: per-dimension rules over a clinical schema (see
//!   [`healthcare_intervene`]).
//! * `identity`: no action; useful as a control and as a holdout arm.
//!
//! [`verify_well_intentioned`] probes a `(rho, x)` grid and checks the working
//! assumption behind convergence: whenever `rho` sits above (below) `rho_eq`,
//! the intervention strictly lowers (raises) the q-transformed expected risk,
//! at a rate at least linear in `|dev|`. The report carries the empirical rate
//! `gamma_hat`, the worst probe, and any violations.

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::Uniform;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{CovariateVector, Schema};
use crate::error::{Error, Result};
use crate::ground_truth::FrozenTruth;
use crate::qtransform::{signed_cbrt, QTransform};
use crate::rng::RngStream;

/// Probes with `|rho - rho_eq|` below this are treated as fixed-point checks
/// rather than movement checks; movement ratios are not computed for them.
pub const FIXED_POINT_TOL: f64 = 1e-6;

/// Dimension roles for the clinical intervention rules.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HealthcareRules {
    /// Continuous habit scores redrawn uniformly around a shifted center.
    pub lifestyle_dims: Vec<usize>,
    /// Binary flags (smoking, drug prescriptions) resampled by the
    /// stay/switch rule.
    pub cessation_dims: Vec<usize>,
    /// Bounds for lifestyle dimensions after intervention.
    pub lifestyle_lo: f64,
    pub lifestyle_hi: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InterventionKind {
    Identity,
    DeterministicCbrt,
    UniformNoiseCbrt { scale: f64 },
    UniformNoiseLinear { scale: f64 },
    ClampedSignedCbrt { signs: Vec<f64>, lo: f64, hi: f64 },
    Healthcare { rules: HealthcareRules },
}

/// An intervention kind bound to its equilibrium score.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct InterventionModel {
    pub kind: InterventionKind,
    pub rho_eq: f64,
}

impl InterventionModel {
    pub fn new(kind: InterventionKind, rho_eq: f64) -> Result<Self> {
        if !(rho_eq > 0.0 && rho_eq < 1.0) {
            return Err(Error::config(
                "intervention.rho_eq",
                format!("must lie strictly inside (0, 1), got {rho_eq}"),
            ));
        }
        match &kind {
            InterventionKind::UniformNoiseCbrt { scale }
            | InterventionKind::UniformNoiseLinear { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::config(
                        "intervention.scale",
                        format!("must be a positive real, got {scale}"),
                    ));
                }
            }
            InterventionKind::ClampedSignedCbrt { signs, lo, hi } => {
                if signs.iter().any(|s| *s != 1.0 && *s != -1.0 && *s != 0.0) {
                    return Err(Error::config(
                        "intervention.signs",
                        "entries must be -1, 0, or 1",
                    ));
                }
                if !(lo < hi) {
                    return Err(Error::config("intervention.clamp", "lo must be < hi"));
                }
            }
            InterventionKind::Healthcare { rules } => {
                if !(rules.lifestyle_lo < rules.lifestyle_hi) {
                    return Err(Error::config(
                        "intervention.rules",
                        "lifestyle bounds must satisfy lo < hi",
                    ));
                }
            }
            InterventionKind::Identity | InterventionKind::DeterministicCbrt => {}
        }
        Ok(InterventionModel { kind, rho_eq })
    }

    /// Same kind, different equilibrium. Used for per-cohort equilibria.
    pub fn with_rho_eq(&self, rho_eq: f64) -> Result<Self> {
        InterventionModel::new(self.kind.clone(), rho_eq)
    }

    /// Same clamp range, new sign vector. Used when the truth changes regime
    /// and the aligned intervention must follow.
    pub fn with_signs(&self, signs: Vec<f64>) -> Result<Self> {
        match &self.kind {
            InterventionKind::ClampedSignedCbrt { lo, hi, .. } => InterventionModel::new(
                InterventionKind::ClampedSignedCbrt { signs, lo: *lo, hi: *hi },
                self.rho_eq,
            ),
            _ => Err(Error::config(
                "intervention.kind",
                "sign replacement only applies to clamped-signed-cbrt",
            )),
        }
    }

    /// True when the same `(rho, x)` always produces the same output; such
    /// kinds consume no randomness.
    pub fn is_deterministic(&self) -> bool {
        matches!(
            self.kind,
            InterventionKind::Identity
                | InterventionKind::DeterministicCbrt
                | InterventionKind::ClampedSignedCbrt { .. }
        )
    }

    pub fn apply_in_place(&self, rho: f64, x: &mut CovariateVector, rng: &mut impl Rng) {
        let dev = rho - self.rho_eq;
        match &self.kind {
            InterventionKind::Identity => {}
            InterventionKind::DeterministicCbrt => {
                let shift = signed_cbrt(dev);
                for v in x.values_mut() {
                    *v -= shift;
                }
            }
            InterventionKind::UniformNoiseCbrt { scale } => {
                let u = Uniform::new(-0.5, 1.0).sample(rng);
                let shift = scale * signed_cbrt(dev) * u;
                for v in x.values_mut() {
                    *v -= shift;
                }
            }
            InterventionKind::UniformNoiseLinear { scale } => {
                let u = Uniform::new(-0.5, 1.0).sample(rng);
                let shift = scale * dev * u;
                for v in x.values_mut() {
                    *v -= shift;
                }
            }
            InterventionKind::ClampedSignedCbrt { signs, lo, hi } => {
                let step = signed_cbrt(dev);
                debug_assert_eq!(signs.len(), x.values().len());
                for (v, s) in x.values_mut().iter_mut().zip(signs) {
                    *v = (*v - s * step).clamp(*lo, *hi);
                }
            }
            InterventionKind::Healthcare { rules } => {
                healthcare_intervene_in_place(rules, rho, self.rho_eq, x, rng);
            }
        }
        x.debug_check();
    }

    pub fn apply(&self, rho: f64, x: &CovariateVector, rng: &mut impl Rng) -> CovariateVector {
        let mut out = x.clone();
        self.apply_in_place(rho, &mut out, rng);
        out
    }
}

/// Probability that a cessation flag currently at 1 stays 1 when the score
/// sits `dev` above the equilibrium. At `dev = 0` this is exactly 1.
pub fn cessation_keep_one_prob(dev: f64) -> f64 {
    (2.0 * (1.0 - crate::qtransform::logistic(dev / 2.0))).clamp(0.0, 1.0)
}

/// Probability that a cessation flag currently at 0 switches to 1 when the
/// score sits `-dev` below the equilibrium (`dev <= 0`). At `dev = 0`: 0.
pub fn cessation_adopt_prob(dev: f64) -> f64 {
    (2.0 * crate::qtransform::logistic(-dev / 2.0) - 1.0).clamp(0.0, 1.0)
}

/// Endpoints of the lifestyle redraw interval before clamping: the new value
/// is uniform between `x - (7/2) dev` and `x + (1/2) dev`, so its mean sits
/// `1.5 dev` below the current value.
pub fn lifestyle_redraw_interval(x: f64, dev: f64) -> (f64, f64) {
    let a = x - 3.5 * dev;
    let b = x + 0.5 * dev;
    (a.min(b), a.max(b))
}

/// Clinical intervention rules, applied per dimension:
///
/// * lifestyle dims: redraw uniformly on [`lifestyle_redraw_interval`],
///   clamped to the declared bounds;
/// * cessation dims at 1 with `rho > rho_eq`: stay 1 with probability
///   `2 (1 - logistic(dev / 2))`, i.e. quit with the complementary chance;
/// * cessation dims at 0 with `rho > rho_eq`: stay 0;
/// * cessation dims at 0 with `rho <= rho_eq`: adopt with probability
///   `2 logistic(-dev / 2) - 1`;
/// * cessation dims at 1 with `rho <= rho_eq`: stay 1;
/// * all other dims: unchanged.
pub fn healthcare_intervene(
    rules: &HealthcareRules,
    rho: f64,
    rho_eq: f64,
    x: &CovariateVector,
    rng: &mut impl Rng,
) -> CovariateVector {
    let mut out = x.clone();
    healthcare_intervene_in_place(rules, rho, rho_eq, &mut out, rng);
    out
}

fn healthcare_intervene_in_place(
    rules: &HealthcareRules,
    rho: f64,
    rho_eq: f64,
    x: &mut CovariateVector,
    rng: &mut impl Rng,
) {
    let dev = rho - rho_eq;
    let (lo, hi) = (rules.lifestyle_lo, rules.lifestyle_hi);
    let values = x.values_mut();
    for &d in &rules.lifestyle_dims {
        let (a, b) = lifestyle_redraw_interval(values[d], dev);
        let drawn = if b > a { Uniform::new(a, b).sample(rng) } else { a };
        values[d] = drawn.clamp(lo, hi);
    }
    for &d in &rules.cessation_dims {
        debug_assert!(values[d] == 0.0 || values[d] == 1.0);
        let p_one = if dev > 0.0 {
            if values[d] == 1.0 { cessation_keep_one_prob(dev) } else { 0.0 }
        } else if values[d] == 0.0 {
            cessation_adopt_prob(dev)
        } else {
            1.0
        };
        values[d] = if rng.gen_bool(p_one) { 1.0 } else { 0.0 };
    }
    x.debug_check();
}

// ── Probe grids ──

/// A set of `(rho, x)` probes for assumption checks and limit bounds.
#[derive(Clone, Debug)]
pub struct ProbeGrid {
    pub rho_values: Vec<f64>,
    pub xs: Vec<CovariateVector>,
    /// Monte Carlo replicates per probe for stochastic interventions;
    /// deterministic kinds always use one.
    pub mc_replicates: usize,
}

impl ProbeGrid {
    pub fn new(rho_values: Vec<f64>, xs: Vec<CovariateVector>, mc_replicates: usize) -> Result<Self> {
        if rho_values.is_empty() || xs.is_empty() {
            return Err(Error::config("probe_grid", "need at least one rho and one x"));
        }
        if mc_replicates == 0 {
            return Err(Error::config("probe_grid.mc_replicates", "must be >= 1"));
        }
        if rho_values.iter().any(|r| !(*r >= 0.0 && *r <= 1.0)) {
            return Err(Error::config("probe_grid.rho_values", "must lie in [0, 1]"));
        }
        Ok(ProbeGrid { rho_values, xs, mc_replicates })
    }

    /// Evenly spaced scores on `[lo, hi]` crossed with a Latin hypercube
    /// sample of covariate points in the box `[box_lo, box_hi]^p`.
    pub fn latin(
        schema: &Schema,
        box_lo: f64,
        box_hi: f64,
        n_x: usize,
        rho_lo: f64,
        rho_hi: f64,
        n_rho: usize,
        mc_replicates: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        if !(box_lo < box_hi) || !(rho_lo < rho_hi) || n_x == 0 || n_rho < 2 {
            return Err(Error::config("probe_grid", "empty box or score range"));
        }
        let points = latin_hypercube(n_x, schema.len(), box_lo, box_hi, stream);
        let xs = points
            .into_iter()
            .map(|vals| CovariateVector::new(schema.clone(), vals))
            .collect::<Result<Vec<_>>>()?;
        let rho_values = linspace(rho_lo, rho_hi, n_rho);
        ProbeGrid::new(rho_values, xs, mc_replicates)
    }
}

/// `n` evenly spaced values including both endpoints.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Latin hypercube sample: each dimension is stratified into `n` equal bins
/// and independently permuted, so every one-dimensional margin is evenly
/// covered. Dimension `d` draws from stream child `("lhs-dim", d)`.
pub fn latin_hypercube(
    n: usize,
    p: usize,
    lo: f64,
    hi: f64,
    stream: &RngStream,
) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; p]; n];
    for d in 0..p {
        let mut rng = stream.derive("lhs-dim", d as u64).rng();
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates with draws from this dimension's stream.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            strata.swap(i, j);
        }
        for (i, point) in points.iter_mut().enumerate() {
            let u: f64 = rng.gen_range(0.0..1.0);
            point[d] = lo + (hi - lo) * (strata[i] as f64 + u) / n as f64;
        }
    }
    points
}

// ── Well-intentioned verification ──

/// One probe that failed (or could not confirm) the movement requirement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub rho: f64,
    pub x: Vec<f64>,
    pub base_risk: f64,
    pub moved_risk: f64,
    /// `sign(rho - rho_eq) * (q(base) - q(moved))`; positive means the
    /// intervention moved risk the right way.
    pub movement_q: f64,
    pub se_q: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WellIntentionedReport {
    pub schema_version: String,
    pub rho_eq: f64,
    pub n_probes: usize,
    pub mc_replicates: usize,
    /// Empirical movement rate: the smallest `movement_q / |rho - rho_eq|`
    /// over all movement probes, floored at zero.
    pub gamma_hat: f64,
    /// Same minimum before flooring; negative values witness violations.
    pub worst_ratio: f64,
    pub n_violations: usize,
    pub n_low_confidence: usize,
    /// Largest `|E g-moved risk - base risk|` over probes at `rho = rho_eq`,
    /// if the grid contains any; the equilibrium must be a fixed point.
    pub fixed_point_gap: Option<f64>,
    /// Violating probes, capped at 100 entries.
    pub violations: Vec<ProbeRecord>,
}

pub const WELL_INTENTIONED_SCHEMA_VERSION: &str = "stacklab.well-intentioned.v1";

struct ProbeOutcome {
    record: ProbeRecord,
    is_fixed_point: bool,
    violation: bool,
    low_confidence: bool,
    ratio: Option<f64>,
}

/// Check the movement requirement for `g` against a frozen truth `f` over a
/// probe grid. For each probe, the post-intervention expected risk
/// `E f(g(rho, x))` is estimated with `grid.mc_replicates` Monte Carlo draws
/// (one exact evaluation for deterministic kinds); movement is measured on
/// the `q` scale. Stochastic probes whose movement is within three standard
/// errors of zero count as low-confidence rather than violations.
pub fn verify_well_intentioned(
    g: &InterventionModel,
    truth: &FrozenTruth,
    q: &QTransform,
    grid: &ProbeGrid,
    stream: &RngStream,
) -> Result<WellIntentionedReport> {
    q.validate()?;
    let deterministic = g.is_deterministic();
    let replicates = if deterministic { 1 } else { grid.mc_replicates };

    let probes: Vec<(usize, usize)> = (0..grid.xs.len())
        .flat_map(|i| (0..grid.rho_values.len()).map(move |j| (i, j)))
        .collect();

    let outcomes: Vec<ProbeOutcome> = probes
        .par_iter()
        .map(|&(i, j)| {
            let x = &grid.xs[i];
            let rho = grid.rho_values[j];
            let flat = (i * grid.rho_values.len() + j) as u64;
            let mut rng = stream.derive("probe", flat).rng();

            let base_risk = truth.eval(x);
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..replicates {
                let moved = g.apply(rho, x, &mut rng);
                let r = truth.eval(&moved);
                sum += r;
                sumsq += r * r;
            }
            let moved_risk = sum / replicates as f64;
            let var = (sumsq / replicates as f64 - moved_risk * moved_risk).max(0.0);
            let se_p = if replicates > 1 { (var / replicates as f64).sqrt() } else { 0.0 };
            let se_q = q.slope_at(moved_risk) * se_p;

            let dev = rho - g.rho_eq;
            let is_fixed_point = dev.abs() < FIXED_POINT_TOL;
            // q.eval only fails on NaN, which finite risks cannot produce.
            let q_base = q.eval(base_risk).expect("finite risk");
            let q_moved = q.eval(moved_risk).expect("finite risk");
            let movement_q = dev.signum() * (q_base - q_moved);

            let (violation, low_confidence, ratio) = if is_fixed_point {
                (false, false, None)
            } else if deterministic {
                (movement_q <= 0.0, false, Some(movement_q / dev.abs()))
            } else if movement_q < -3.0 * se_q {
                (true, false, Some(movement_q / dev.abs()))
            } else {
                (false, movement_q <= 0.0, Some(movement_q / dev.abs()))
            };

            ProbeOutcome {
                record: ProbeRecord {
                    rho,
                    x: x.values().to_vec(),
                    base_risk,
                    moved_risk,
                    movement_q,
                    se_q,
                },
                is_fixed_point,
                violation,
                low_confidence,
                ratio,
            }
        })
        .collect();

    let mut worst_ratio = f64::INFINITY;
    let mut fixed_point_gap: Option<f64> = None;
    let mut violations = Vec::new();
    let mut n_violations = 0;
    let mut n_low_confidence = 0;
    for o in &outcomes {
        if o.is_fixed_point {
            let gap = (o.record.moved_risk - o.record.base_risk).abs();
            fixed_point_gap = Some(fixed_point_gap.map_or(gap, |g0: f64| g0.max(gap)));
        }
        if let Some(r) = o.ratio {
            worst_ratio = worst_ratio.min(r);
        }
        if o.violation {
            n_violations += 1;
            if violations.len() < 100 {
                violations.push(o.record.clone());
            }
        }
        if o.low_confidence {
            n_low_confidence += 1;
        }
    }
    if !worst_ratio.is_finite() {
        worst_ratio = 0.0;
    }

    Ok(WellIntentionedReport {
        schema_version: WELL_INTENTIONED_SCHEMA_VERSION.into(),
        rho_eq: g.rho_eq,
        n_probes: outcomes.len(),
        mc_replicates: replicates,
        gamma_hat: worst_ratio.max(0.0),
        worst_ratio,
        n_violations,
        n_low_confidence,
        fixed_point_gap,
        violations,
    })
}
