//! Divergence criteria.
//!
//! Four criteria, any of which creates grounds for appeal:
//! outcome crossing, percentile shift, threshold-proximate shift, and
//! pattern-consistent effects across several perturbations.

use std::collections::BTreeMap;

use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::canonical::round_to;
use crate::host::{Label, ModelVersion, ScoreOutcome, VersionId};
use crate::perturbation::{FeatureKind, InstanceStatus, PerturbationInstance, PerturbationRegistry};
use crate::record::Domain;

/// Decimal places kept in reported magnitudes.
pub const MAGNITUDE_DECIMALS: i32 = 6;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("outcomes come from different model versions: {0} vs {1}")]
    VersionMismatch(VersionId, VersionId),
    #[error("perturbation class `{0}` is not in the registry")]
    UnresolvableClass(String),
    #[error("noise floor estimation needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("invalid divergence config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub percentile_shift_threshold: f64,
    pub proximate_window: f64,
    pub proximate_shift_threshold: f64,
    pub pattern_min_count: usize,
    pub noise_floor_percentile: f64,
    /// Decision threshold of the evaluating version.
    pub decision_threshold: Option<f64>,
    /// Percentile of the decision threshold within the version's population.
    pub threshold_percentile: Option<f64>,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            percentile_shift_threshold: 15.0,
            proximate_window: 10.0,
            proximate_shift_threshold: 5.0,
            pattern_min_count: 3,
            noise_floor_percentile: 5.0,
            decision_threshold: None,
            threshold_percentile: None,
        }
    }
}

impl DivergenceConfig {
    /// Domain presets. Employment uses the tight end of a 10-12 point band and
    /// content moderation the loose end of 18-20; every other domain keeps the
    /// 15-point default.
    pub fn preset(domain: Domain) -> Self {
        let percentile_shift_threshold = match domain {
            Domain::Employment => 10.0,
            Domain::ContentModeration => 18.0,
            _ => 15.0,
        };
        Self {
            percentile_shift_threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DivergenceError> {
        if !(self.proximate_window >= 0.0 && self.proximate_shift_threshold >= 0.0) {
            return Err(DivergenceError::InvalidConfig(
                "proximate_window and proximate_shift_threshold must be non-negative".into(),
            ));
        }
        if !(self.proximate_shift_threshold < self.percentile_shift_threshold) {
            return Err(DivergenceError::InvalidConfig(
                "proximate_shift_threshold must be below percentile_shift_threshold".into(),
            ));
        }
        if self.pattern_min_count < 2 {
            return Err(DivergenceError::InvalidConfig("pattern_min_count must be at least 2".into()));
        }
        if !(self.noise_floor_percentile >= 0.0) {
            return Err(DivergenceError::InvalidConfig("noise_floor_percentile must be non-negative".into()));
        }
        Ok(())
    }

    /// Copy with the threshold fields of `version` filled in.
    pub fn for_version(&self, version: &ModelVersion) -> Self {
        Self {
            decision_threshold: Some(version.threshold_policy.decision_threshold),
            threshold_percentile: Some(version.threshold_percentile),
            ..self.clone()
        }
    }

    /// A measured noise floor can lower the configured one, never raise it.
    pub fn effective_noise_floor(&self, estimate: Option<f64>) -> f64 {
        match estimate {
            Some(e) => e.min(self.noise_floor_percentile),
            None => self.noise_floor_percentile,
        }
    }
}

/// A perturbation together with the baseline and perturbed outcomes.
/// Deltas are always recomputed from the embedded outcomes.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub instance: PerturbationInstance,
    pub baseline: ScoreOutcome,
    pub perturbed: ScoreOutcome,
}

impl QueryResult {
    pub fn score_delta(&self) -> f64 {
        self.perturbed.score - self.baseline.score
    }

    pub fn percentile_delta(&self) -> f64 {
        self.perturbed.percentile - self.baseline.percentile
    }

    pub fn pending_adjudication(&self) -> bool {
        self.instance.status == InstanceStatus::CustomPending
    }
}

impl Serialize for QueryResult {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("QueryResult", 6)?;
        s.serialize_field("query_id", &self.query_id)?;
        s.serialize_field("instance", &self.instance)?;
        s.serialize_field("baseline", &self.baseline)?;
        s.serialize_field("perturbed", &self.perturbed)?;
        s.serialize_field("score_delta", &round_to(self.score_delta(), MAGNITUDE_DECIMALS))?;
        s.serialize_field("percentile_delta", &round_to(self.percentile_delta(), MAGNITUDE_DECIMALS))?;
        s.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    OutcomeCrossing,
    PercentileShift,
    ThresholdProximate,
    PatternConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TowardAccept,
    TowardReject,
}

impl Direction {
    fn of(delta: f64) -> Self {
        if delta > 0.0 {
            Direction::TowardAccept
        } else {
            Direction::TowardReject
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub criterion: Criterion,
    pub magnitude: f64,
    pub supporting_results: Vec<String>,
    pub direction: Direction,
    pub pending_adjudication: bool,
    /// Feature kind the pattern groups over; set for pattern findings only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<FeatureKind>,
}

impl Finding {
    fn single(criterion: Criterion, magnitude: f64, direction: Direction) -> Self {
        Self {
            criterion,
            magnitude: round_to(magnitude, MAGNITUDE_DECIMALS),
            supporting_results: Vec::new(),
            direction,
            pending_adjudication: false,
            kind: None,
        }
    }
}

/// Criteria 1-3 for one baseline/perturbed pair.
///
/// Outcome crossing reads labels and scores only. The threshold-proximate
/// criterion is suppressed when the percentile-shift criterion already fired
/// for the pair, and needs `cfg.threshold_percentile`.
pub fn assess_single(
    baseline: &ScoreOutcome,
    perturbed: &ScoreOutcome,
    cfg: &DivergenceConfig,
) -> Result<Vec<Finding>, DivergenceError> {
    if baseline.model_version != perturbed.model_version {
        return Err(DivergenceError::VersionMismatch(
            baseline.model_version.clone(),
            perturbed.model_version.clone(),
        ));
    }
    let mut findings = Vec::new();

    if baseline.label != perturbed.label {
        let direction = match perturbed.label {
            Label::Accept => Direction::TowardAccept,
            Label::Reject => Direction::TowardReject,
        };
        let delta = perturbed.score - baseline.score;
        findings.push(Finding::single(Criterion::OutcomeCrossing, delta.abs(), direction));
    }

    let delta = perturbed.percentile - baseline.percentile;
    let shift = delta.abs();
    let shifted = shift > cfg.percentile_shift_threshold;
    if shifted {
        findings.push(Finding::single(Criterion::PercentileShift, shift, Direction::of(delta)));
    }

    if !shifted {
        if let Some(threshold_pct) = cfg.threshold_percentile {
            let near = (baseline.percentile - threshold_pct).abs() <= cfg.proximate_window;
            if near && shift > cfg.proximate_shift_threshold {
                findings.push(Finding::single(
                    Criterion::ThresholdProximate,
                    shift,
                    Direction::of(delta),
                ));
            }
        }
    }
    Ok(findings)
}

/// Criteria 1-3 for a query result, tagged with its id and adjudication status.
pub fn assess_result(result: &QueryResult, cfg: &DivergenceConfig) -> Result<Vec<Finding>, DivergenceError> {
    let mut findings = assess_single(&result.baseline, &result.perturbed, cfg)?;
    for f in &mut findings {
        f.supporting_results = vec![result.query_id.clone()];
        f.pending_adjudication = result.pending_adjudication();
    }
    Ok(findings)
}

/// Criterion 4: for each (feature kind, delta sign) group, fire when at least
/// `pattern_min_count` results move the same way by more than `noise_floor`
/// percentile points. Magnitude is the mean absolute shift of the supporters.
/// The output does not depend on the order of `results`.
pub fn assess_pattern(
    results: &[QueryResult],
    registry: &PerturbationRegistry,
    cfg: &DivergenceConfig,
    noise_floor: f64,
) -> Result<Vec<Finding>, DivergenceError> {
    let mut groups: BTreeMap<(FeatureKind, Direction), Vec<&QueryResult>> = BTreeMap::new();
    for r in results {
        let class = registry
            .class(&r.instance.class_id)
            .ok_or_else(|| DivergenceError::UnresolvableClass(r.instance.class_id.clone()))?;
        let delta = r.percentile_delta();
        if delta == 0.0 || delta.abs() <= noise_floor {
            continue;
        }
        groups
            .entry((class.target_feature_kind, Direction::of(delta)))
            .or_default()
            .push(r);
    }

    let mut findings = Vec::new();
    for ((kind, direction), mut supporters) in groups {
        if supporters.len() < cfg.pattern_min_count {
            continue;
        }
        supporters.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        // Sum in sorted order so the mean is bit-identical under permutation.
        let total: f64 = supporters.iter().map(|r| r.percentile_delta().abs()).sum();
        findings.push(Finding {
            criterion: Criterion::PatternConsistent,
            magnitude: round_to(total / supporters.len() as f64, MAGNITUDE_DECIMALS),
            supporting_results: supporters.iter().map(|r| r.query_id.clone()).collect(),
            direction,
            pending_adjudication: supporters.iter().any(|r| r.pending_adjudication()),
            kind: Some(kind),
        });
    }
    Ok(findings)
}

/// Largest pairwise percentile difference across replicate evaluations of
/// one input.
pub fn estimate_noise_floor(replicates: &[ScoreOutcome]) -> Result<f64, DivergenceError> {
    if replicates.len() < 2 {
        return Err(DivergenceError::TooFewReplicates(replicates.len()));
    }
    let version = &replicates[0].model_version;
    if let Some(other) = replicates.iter().find(|r| &r.model_version != version) {
        return Err(DivergenceError::VersionMismatch(version.clone(), other.model_version.clone()));
    }
    let lo = replicates.iter().map(|r| r.percentile).fold(f64::INFINITY, f64::min);
    let hi = replicates.iter().map(|r| r.percentile).fold(f64::NEG_INFINITY, f64::max);
    Ok(hi - lo)
}
