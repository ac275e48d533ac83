//! Decision-model host.
//!
//! Hosts pluggable scoring models behind a uniform `evaluate` call, keeps the
//! registry of model versions with their retention status, and ranks scores
//! against the reference population captured when a version is registered.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{round_to, Digest};
use crate::record::{FeatureRecord, FeatureValue};

/// Replicate count for models that declare stochastic scoring.
pub const STOCHASTIC_REPLICATES: u32 = 5;

/// Scores are reported at nine decimals so that linear sums such as
/// `0.3 + 0.3` land on the same value a reader would compute by hand.
const SCORE_DECIMALS: i32 = 9;

#[derive(Debug, Error)]
pub enum HostError {
    #[error("unknown model version `{0}`")]
    UnknownVersion(VersionId),
    #[error("model version `{0}` was not retained; evaluation refused (spoliation)")]
    Spoliation(VersionId),
    #[error("model version `{0}` is already registered")]
    DuplicateVersion(VersionId),
    #[error("reference population is empty")]
    EmptyPopulation,
    #[error("invalid population score {0}: scores must lie in [0, 1]")]
    InvalidPopulationScore(f64),
    #[error("decision threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("record {0} is not in the fixture table and the fixture has no fallback")]
    NotInFixture(Digest),
    #[error("model produced a non-finite score")]
    NonFiniteScore,
    #[error("model descriptor: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Opaque model version identifier, `name@n`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionId(pub String);

impl VersionId {
    pub fn new(name: &str, number: u32) -> Self {
        VersionId(format!("{name}@{number}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn split(&self) -> (&str, Option<u32>) {
        match self.0.rsplit_once('@') {
            Some((name, n)) => (name, n.parse().ok()),
            None => (&self.0, None),
        }
    }
}

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for VersionId {
    fn from(s: &str) -> Self {
        VersionId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub decision_threshold: f64,
}

impl ThresholdPolicy {
    pub fn new(decision_threshold: f64) -> Result<Self, HostError> {
        if decision_threshold > 0.0 && decision_threshold < 1.0 {
            Ok(Self { decision_threshold })
        } else {
            Err(HostError::InvalidThreshold(decision_threshold))
        }
    }

    pub fn label(&self, score: f64) -> Label {
        if score >= self.decision_threshold {
            Label::Accept
        } else {
            Label::Reject
        }
    }
}

/// Immutable score snapshot used for percentile ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePopulation {
    pub population_id: String,
    scores: Vec<f64>,
    pub snapshot_at: DateTime<Utc>,
}

impl ReferencePopulation {
    pub fn new(
        population_id: impl Into<String>,
        mut scores: Vec<f64>,
        snapshot_at: DateTime<Utc>,
    ) -> Result<Self, HostError> {
        if scores.is_empty() {
            return Err(HostError::EmptyPopulation);
        }
        if let Some(bad) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(HostError::InvalidPopulationScore(*bad));
        }
        scores.sort_by(f64::total_cmp);
        Ok(Self {
            population_id: population_id.into(),
            scores,
            snapshot_at,
        })
    }

    /// Parse a population file: one decimal score per line; blank lines and
    /// `#` comments are skipped.
    pub fn parse(
        population_id: impl Into<String>,
        text: &str,
        snapshot_at: DateTime<Utc>,
    ) -> Result<Self, HostError> {
        let mut scores = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let score = line.parse::<f64>().map_err(|e| {
                HostError::Descriptor(format!("population line {}: {e}", n + 1))
            })?;
            scores.push(score);
        }
        Self::new(population_id, scores, snapshot_at)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Percentile rank of `score`: the share of population scores strictly below
/// it, times 100. Ties rank below.
pub fn percentile_of(score: f64, population: &ReferencePopulation) -> f64 {
    let below = population.scores.partition_point(|s| *s < score);
    100.0 * below as f64 / population.scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Accept,
    Reject,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Accept => "accept",
            Label::Reject => "reject",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Everything the sandbox ever discloses about one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOutcome {
    pub score: f64,
    pub confidence: Interval,
    pub percentile: f64,
    pub label: Label,
    pub model_version: VersionId,
    pub evaluated_at: DateTime<Utc>,
}

impl ScoreOutcome {
    /// Equality on every field except `evaluated_at`.
    pub fn same_result(&self, other: &ScoreOutcome) -> bool {
        self.score == other.score
            && self.confidence == other.confidence
            && self.percentile == other.percentile
            && self.label == other.label
            && self.model_version == other.model_version
    }
}

/// A scoring model behind the host's evaluate interface.
pub trait DecisionModel: Send + Sync + fmt::Debug {
    /// Raw score for one replicate. Deterministic models ignore `replicate`.
    fn score(&self, record: &FeatureRecord, replicate: u32) -> Result<f64, HostError>;

    /// Whether repeated evaluation of one record can differ.
    fn is_stochastic(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    #[default]
    Logistic,
    /// Linear score clamped to [0, 1].
    Identity,
}

/// Weighted linear scorer. Numeric and date features are weighted by name;
/// text and categorical features are one-hot, weighted by `name=value`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearModel {
    #[serde(default)]
    pub bias: f64,
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub link: Link,
    /// Half-width of the pseudo-random replicate perturbation. Zero means the
    /// model is deterministic.
    #[serde(default)]
    pub replicate_noise: f64,
}

impl LinearModel {
    fn linear_term(&self, record: &FeatureRecord) -> f64 {
        let mut z = self.bias;
        for (name, value) in &record.features {
            match value {
                FeatureValue::Number(_) | FeatureValue::Date(_) => {
                    if let (Some(w), Some(x)) = (self.weights.get(name), value.as_number()) {
                        z += w * x;
                    }
                }
                FeatureValue::Text(s) | FeatureValue::Category(s) => {
                    if let Some(w) = self.weights.get(&format!("{name}={s}")) {
                        z += w;
                    }
                }
            }
        }
        z
    }

    fn squash(&self, z: f64) -> f64 {
        match self.link {
            Link::Logistic => 1.0 / (1.0 + (-z).exp()),
            Link::Identity => z.clamp(0.0, 1.0),
        }
    }
}

/// Deterministic value in [-1, 1] derived from the record digest and replicate index.
fn replicate_jitter(record: &FeatureRecord, replicate: u32) -> f64 {
    let mut bytes = record.digest().0.to_vec();
    bytes.extend_from_slice(&replicate.to_be_bytes());
    let d = Digest::of(&bytes);
    let n = u64::from_be_bytes(d.0[..8].try_into().expect("eight bytes"));
    (n as f64 / u64::MAX as f64) * 2.0 - 1.0
}

impl DecisionModel for LinearModel {
    fn score(&self, record: &FeatureRecord, replicate: u32) -> Result<f64, HostError> {
        let base = self.squash(self.linear_term(record));
        let s = if self.replicate_noise > 0.0 {
            (base + self.replicate_noise * replicate_jitter(record, replicate)).clamp(0.0, 1.0)
        } else {
            base
        };
        if s.is_finite() {
            Ok(s)
        } else {
            Err(HostError::NonFiniteScore)
        }
    }

    fn is_stochastic(&self) -> bool {
        self.replicate_noise > 0.0
    }
}

/// What a scripted fixture does with records missing from its table.
#[derive(Debug, Clone, PartialEq)]
pub enum Fallback {
    Refuse,
    Constant(f64),
    Linear(LinearModel),
}

/// Scripted fixture mapping canonical record digests to scores.
#[derive(Debug, Clone)]
pub struct FixtureModel {
    table: HashMap<Digest, f64>,
    fallback: Fallback,
}

#[derive(Debug, Deserialize)]
struct FixtureRow {
    features: BTreeMap<String, FeatureValue>,
    score: f64,
}

impl FixtureModel {
    pub fn new(fallback: Fallback) -> Self {
        Self {
            table: HashMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, record: &FeatureRecord, score: f64) {
        self.table.insert(record.digest(), score);
    }

    /// Parse a fixture table: JSON lines of `{"features": {...}, "score": s}`.
    pub fn parse_table(&mut self, text: &str) -> Result<(), HostError> {
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: FixtureRow = serde_json::from_str(line)
                .map_err(|e| HostError::Descriptor(format!("fixture line {}: {e}", n + 1)))?;
            let record = FeatureRecord {
                record_id: String::new(),
                domain: crate::record::Domain::Employment,
                features: row.features,
            };
            self.insert(&record, row.score);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl DecisionModel for FixtureModel {
    fn score(&self, record: &FeatureRecord, replicate: u32) -> Result<f64, HostError> {
        let digest = record.digest();
        if let Some(score) = self.table.get(&digest) {
            return Ok(*score);
        }
        match &self.fallback {
            Fallback::Refuse => Err(HostError::NotInFixture(digest)),
            Fallback::Constant(s) => Ok(*s),
            Fallback::Linear(model) => model.score(record, replicate),
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(&self.fallback, Fallback::Linear(m) if m.is_stochastic())
    }
}

/// Everything needed to register a version.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub version: Option<u32>,
    pub model: Arc<dyn DecisionModel>,
    pub policy: ThresholdPolicy,
    pub population: ReferencePopulation,
    pub created_at: Option<DateTime<Utc>>,
    /// Baseline record for regulator probes.
    pub probe_record: Option<FeatureRecord>,
    /// Records used for aggregate disclosure.
    pub disclosure_records: Vec<FeatureRecord>,
}

#[derive(Debug, Clone)]
pub struct ModelVersion {
    pub version_id: VersionId,
    pub name: String,
    pub created_at: DateTime<Utc>,
    pub retained: bool,
    pub threshold_policy: ThresholdPolicy,
    pub population: Arc<ReferencePopulation>,
    pub threshold_percentile: f64,
    pub probe_record: Option<FeatureRecord>,
    pub disclosure_records: Arc<Vec<FeatureRecord>>,
    model: Option<Arc<dyn DecisionModel>>,
}

impl ModelVersion {
    pub fn is_stochastic(&self) -> bool {
        self.model.as_ref().is_some_and(|m| m.is_stochastic())
    }

    pub fn population_ref(&self) -> &str {
        &self.population.population_id
    }

    fn model(&self) -> Result<&Arc<dyn DecisionModel>, HostError> {
        self.model
            .as_ref()
            .ok_or_else(|| HostError::Spoliation(self.version_id.clone()))
    }

    fn replicate_scores(&self, record: &FeatureRecord) -> Result<Vec<f64>, HostError> {
        let model = self.model()?;
        let n = if model.is_stochastic() {
            STOCHASTIC_REPLICATES
        } else {
            1
        };
        (0..n)
            .map(|r| model.score(record, r).map(|s| round_to(s, SCORE_DECIMALS)))
            .collect()
    }

    fn outcome(&self, score: f64, confidence: Interval, at: DateTime<Utc>) -> ScoreOutcome {
        ScoreOutcome {
            score,
            confidence,
            percentile: percentile_of(score, &self.population),
            label: self.threshold_policy.label(score),
            model_version: self.version_id.clone(),
            evaluated_at: at,
        }
    }

    pub fn evaluate(&self, record: &FeatureRecord, at: DateTime<Utc>) -> Result<ScoreOutcome, HostError> {
        let scores = self.replicate_scores(record)?;
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let score = round_to(mean, SCORE_DECIMALS).clamp(lo, hi);
        Ok(self.outcome(score, Interval { lo, hi }, at))
    }

    /// One outcome per replicate, each with a degenerate interval.
    pub fn evaluate_replicates(
        &self,
        record: &FeatureRecord,
        at: DateTime<Utc>,
    ) -> Result<Vec<ScoreOutcome>, HostError> {
        let model = self.model()?;
        (0..STOCHASTIC_REPLICATES)
            .map(|r| {
                let s = round_to(model.score(record, r)?, SCORE_DECIMALS);
                Ok(self.outcome(s, Interval { lo: s, hi: s }, at))
            })
            .collect()
    }
}

/// Which version a contested decision can be tested against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "snake_case")]
pub enum VersionResolution {
    SameVersion { version: VersionId },
    /// The decision-time version is retained and testing runs on it; `current`
    /// names the newer version for defect comparisons.
    UpdatedOriginalRetained { version: VersionId, current: VersionId },
    /// Spoliation presumption: the decision-time version is gone.
    OriginalNotRetained { version: VersionId },
}

impl VersionResolution {
    pub fn spoliation(&self) -> bool {
        matches!(self, VersionResolution::OriginalNotRetained { .. })
    }

    pub fn pinned(&self) -> &VersionId {
        match self {
            VersionResolution::SameVersion { version }
            | VersionResolution::UpdatedOriginalRetained { version, .. }
            | VersionResolution::OriginalNotRetained { version } => version,
        }
    }
}

/// Registry of model versions. One writer, many readers.
#[derive(Debug, Default)]
pub struct ModelHost {
    versions: RwLock<BTreeMap<VersionId, Arc<ModelVersion>>>,
}

impl ModelHost {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_version(&self, spec: ModelSpec, now: DateTime<Utc>) -> Result<VersionId, HostError> {
        let mut versions = self.versions.write();
        let number = match spec.version {
            Some(n) => n,
            None => {
                versions
                    .keys()
                    .filter_map(|id| match id.split() {
                        (name, Some(n)) if name == spec.name => Some(n),
                        _ => None,
                    })
                    .max()
                    .unwrap_or(0)
                    + 1
            }
        };
        let version_id = VersionId::new(&spec.name, number);
        if versions.contains_key(&version_id) {
            return Err(HostError::DuplicateVersion(version_id));
        }
        let population = Arc::new(spec.population);
        let threshold_percentile = percentile_of(spec.policy.decision_threshold, &population);
        let version = ModelVersion {
            version_id: version_id.clone(),
            name: spec.name,
            created_at: spec.created_at.unwrap_or(now),
            retained: true,
            threshold_policy: spec.policy,
            population,
            threshold_percentile,
            probe_record: spec.probe_record,
            disclosure_records: Arc::new(spec.disclosure_records),
            model: Some(spec.model),
        };
        versions.insert(version_id.clone(), Arc::new(version));
        Ok(version_id)
    }

    pub fn get(&self, id: &VersionId) -> Result<Arc<ModelVersion>, HostError> {
        self.versions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| HostError::UnknownVersion(id.clone()))
    }

    pub fn version_ids(&self) -> Vec<VersionId> {
        self.versions.read().keys().cloned().collect()
    }

    /// Drop the model behind a version while keeping its registry entry.
    pub fn purge(&self, id: &VersionId) -> Result<(), HostError> {
        let mut versions = self.versions.write();
        let current = versions
            .get(id)
            .ok_or_else(|| HostError::UnknownVersion(id.clone()))?;
        let mut purged = (**current).clone();
        purged.retained = false;
        purged.model = None;
        versions.insert(id.clone(), Arc::new(purged));
        Ok(())
    }

    pub fn evaluate(
        &self,
        id: &VersionId,
        record: &FeatureRecord,
        at: DateTime<Utc>,
    ) -> Result<ScoreOutcome, HostError> {
        self.get(id)?.evaluate(record, at)
    }

    /// Missing and unretained versions both resolve to `OriginalNotRetained`.
    pub fn resolve_decision_version(&self, id: &VersionId) -> VersionResolution {
        let versions = self.versions.read();
        match versions.get(id) {
            Some(v) if v.retained => {
                let (name, number) = id.split();
                let newer = versions
                    .keys()
                    .filter(|other| {
                        let (n, k) = other.split();
                        n == name && k > number
                    })
                    .max_by_key(|other| other.split().1);
                match newer {
                    Some(current) => VersionResolution::UpdatedOriginalRetained {
                        version: id.clone(),
                        current: current.clone(),
                    },
                    None => VersionResolution::SameVersion { version: id.clone() },
                }
            }
            _ => VersionResolution::OriginalNotRetained { version: id.clone() },
        }
    }
}

// ---------------------------------------------------------------------------
// Descriptor files
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Linear,
    Fixture,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FallbackSpec {
    Constant(f64),
    Named(String),
    Linear(LinearModel),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureSection {
    table: String,
    #[serde(default)]
    fallback: Option<FallbackSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    name: String,
    #[serde(default)]
    version: Option<u32>,
    kind: ModelKind,
    threshold: f64,
    population: String,
    #[serde(default)]
    created_at: Option<DateTime<Utc>>,
    #[serde(default)]
    probe_record: Option<String>,
    #[serde(default)]
    records: Option<String>,
    #[serde(default)]
    linear: Option<LinearModel>,
    #[serde(default)]
    fixture: Option<FixtureSection>,
}

/// Parse a model descriptor. Paths inside it are handed to `resolve`, which
/// returns the referenced file's contents.
pub fn parse_descriptor(
    text: &str,
    resolve: &dyn Fn(&str) -> std::io::Result<String>,
) -> Result<ModelSpec, HostError> {
    let d: Descriptor = toml::from_str(text).map_err(|e| HostError::Descriptor(e.to_string()))?;
    let policy = ThresholdPolicy::new(d.threshold)?;
    let snapshot_at = d.created_at.unwrap_or(DateTime::<Utc>::UNIX_EPOCH);
    let population = ReferencePopulation::parse(
        format!("{}-population", d.name),
        &resolve(&d.population)?,
        snapshot_at,
    )?;
    let model: Arc<dyn DecisionModel> = match d.kind {
        ModelKind::Linear => Arc::new(
            d.linear
                .ok_or_else(|| HostError::Descriptor("kind = \"linear\" needs a [linear] table".into()))?,
        ),
        ModelKind::Fixture => {
            let section = d
                .fixture
                .ok_or_else(|| HostError::Descriptor("kind = \"fixture\" needs a [fixture] table".into()))?;
            let fallback = match section.fallback {
                None => Fallback::Refuse,
                Some(FallbackSpec::Constant(s)) => Fallback::Constant(s),
                Some(FallbackSpec::Named(s)) if s == "refuse" => Fallback::Refuse,
                Some(FallbackSpec::Named(s)) => {
                    return Err(HostError::Descriptor(format!("unknown fixture fallback `{s}`")))
                }
                Some(FallbackSpec::Linear(m)) => Fallback::Linear(m),
            };
            let mut fixture = FixtureModel::new(fallback);
            fixture.parse_table(&resolve(&section.table)?)?;
            Arc::new(fixture)
        }
    };
    let probe_record = match &d.probe_record {
        Some(path) => Some(
            serde_json::from_str(&resolve(path)?)
                .map_err(|e| HostError::Descriptor(format!("probe record: {e}")))?,
        ),
        None => None,
    };
    let mut disclosure_records = Vec::new();
    if let Some(path) = &d.records {
        for (n, line) in resolve(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            disclosure_records.push(
                serde_json::from_str(line)
                    .map_err(|e| HostError::Descriptor(format!("records line {}: {e}", n + 1)))?,
            );
        }
    }
    Ok(ModelSpec {
        name: d.name,
        version: d.version,
        model,
        policy,
        population,
        created_at: d.created_at,
        probe_record,
        disclosure_records,
    })
}

/// Load a descriptor from disk, resolving relative paths against its directory.
pub fn load_descriptor(path: &Path) -> Result<ModelSpec, HostError> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_descriptor(&text, &|rel| std::fs::read_to_string(base.join(rel)))
}
