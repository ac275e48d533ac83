//! Regulator audits: seeded non-standard probes run outside any session
//! budget, and a two-arm comparison that detects models tuned to the default
//! suite.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::audit::{AuditError, AuditLedger, EntryKind};
use crate::canonical::{round_to, to_canonical_json, Digest};
use crate::divergence::{estimate_noise_floor, DivergenceConfig, DivergenceError, QueryResult, MAGNITUDE_DECIMALS};
use crate::host::{HostError, ModelHost, ModelVersion, ScoreOutcome, VersionId};
use crate::perturbation::{apply, load_registry, PerturbationError, PerturbationInstance, PerturbationRegistry};
use crate::record::{Domain, FeatureRecord};
use crate::report::{compile_report, DivergenceReport, ReportContext, Templates};

#[derive(Debug, Error)]
pub enum RegulatorError {
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("model version `{0}` has no probe record")]
    NoProbeRecord(VersionId),
    #[error("probe record is a {record} record, audit domain is {audit}")]
    DomainMismatch { record: Domain, audit: Domain },
    #[error("insufficient probes: default arm {default}, non-standard arm {non_standard}, need {needed} each")]
    InsufficientProbes {
        default: usize,
        non_standard: usize,
        needed: usize,
    },
    #[error("non-standard probe {0} collides with a default-suite instance")]
    SuiteOverlap(Digest),
}

/// Provenance attached to every regulator report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEnvelope {
    pub mode: String,
    pub version: VersionId,
    pub domain: Domain,
    pub seed: u64,
    pub registry_digest: Digest,
    pub probe_record_digest: Digest,
    pub probes_requested: usize,
    pub probes_run: usize,
    pub probes_available: usize,
    pub as_of: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub audit: AuditEnvelope,
    #[serde(flatten)]
    pub report: DivergenceReport,
}

impl AuditReport {
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("report serializes")
    }
}

struct Target<'a> {
    version: std::sync::Arc<ModelVersion>,
    probe: FeatureRecord,
    registry: &'a PerturbationRegistry,
}

fn target(host: &ModelHost, version_id: &VersionId, domain: Domain) -> Result<Target<'static>, RegulatorError> {
    let version = host.get(version_id)?;
    if !version.retained {
        return Err(HostError::Spoliation(version_id.clone()).into());
    }
    let probe = version
        .probe_record
        .clone()
        .ok_or_else(|| RegulatorError::NoProbeRecord(version_id.clone()))?;
    if probe.domain != domain {
        return Err(RegulatorError::DomainMismatch {
            record: probe.domain,
            audit: domain,
        });
    }
    Ok(Target {
        version,
        probe,
        registry: load_registry(domain),
    })
}

/// Non-standard forms with every default-suite digest checked out.
fn non_standard_pool(t: &Target) -> Result<Vec<PerturbationInstance>, RegulatorError> {
    let suite: BTreeSet<Digest> = t
        .registry
        .default_suite(&t.probe)?
        .instances
        .iter()
        .map(PerturbationInstance::digest)
        .collect();
    let pool = t.registry.non_standard(&t.probe)?;
    if let Some(p) = pool.iter().find(|p| suite.contains(&p.digest())) {
        return Err(RegulatorError::SuiteOverlap(p.digest()));
    }
    Ok(pool)
}

fn sample<T: Clone>(rng: &mut ChaCha8Rng, items: &[T], n: usize) -> Vec<T> {
    let n = n.min(items.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, items.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i].clone()).collect()
}

fn run_probe(
    t: &Target,
    baseline: &ScoreOutcome,
    instance: PerturbationInstance,
    as_of: DateTime<Utc>,
) -> Result<QueryResult, RegulatorError> {
    let perturbed = t.version.evaluate(&apply(&t.probe, &instance)?, as_of)?;
    Ok(QueryResult {
        query_id: instance.instance_id.clone(),
        instance,
        baseline: baseline.clone(),
        perturbed,
    })
}

fn noise_estimate(t: &Target, as_of: DateTime<Utc>) -> Result<Option<f64>, RegulatorError> {
    if !t.version.is_stochastic() {
        return Ok(None);
    }
    Ok(Some(estimate_noise_floor(&t.version.evaluate_replicates(&t.probe, as_of)?)?))
}

/// Parameters shared by both regulator operations.
#[derive(Debug, Clone)]
pub struct AuditParams {
    pub version: VersionId,
    pub domain: Domain,
    pub seed: u64,
    /// Evaluation timestamp stamped into outcomes and the report; fixing it
    /// makes runs byte-reproducible.
    pub as_of: DateTime<Utc>,
    pub divergence: DivergenceConfig,
}

/// Run `n_probes` seeded non-standard probes against the version's probe
/// record. Each probe is logged as a regulator-marked query when a ledger is
/// given. Results are ordered by probe id.
pub fn audit_run(
    host: &ModelHost,
    params: &AuditParams,
    n_probes: usize,
    ledger: Option<(&AuditLedger, DateTime<Utc>)>,
) -> Result<AuditReport, RegulatorError> {
    let t = target(host, &params.version, params.domain)?;
    let pool = non_standard_pool(&t)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut probes = sample(&mut rng, &pool, n_probes);
    probes.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let baseline = t.version.evaluate(&t.probe, params.as_of)?;
    let mut results = Vec::with_capacity(probes.len());
    for p in probes {
        let r = run_probe(&t, &baseline, p, params.as_of)?;
        if let Some((ledger, now)) = ledger {
            ledger.append(
                EntryKind::Query,
                json!({
                    "regulator": true,
                    "version": params.version,
                    "seed": params.seed,
                    "query_id": r.query_id,
                    "instance_digest": r.instance.digest(),
                    "cached": false,
                    "result": r,
                }),
                now,
            )?;
        }
        results.push(r);
    }

    let cfg = params.divergence.for_version(&t.version);
    let ctx = ReportContext {
        session_id: format!("audit-{}-{}", params.version, params.seed),
        model_version: params.version.clone(),
        spoliation_flag: false,
        budget_used: 0,
        generated_at: params.as_of,
        noise_floor_estimate: noise_estimate(&t, params.as_of)?,
    };
    let report = compile_report(&ctx, &results, t.registry, &cfg, &Templates::english())?;
    Ok(AuditReport {
        audit: AuditEnvelope {
            mode: "audit_run".into(),
            version: params.version.clone(),
            domain: params.domain,
            seed: params.seed,
            registry_digest: t.registry.digest(),
            probe_record_digest: t.probe.digest(),
            probes_requested: n_probes,
            probes_run: results.len(),
            probes_available: pool.len(),
            as_of: params.as_of,
        },
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningVerdict {
    Consistent,
    SuiteTuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmProbe {
    pub probe_id: String,
    pub class_id: String,
    pub percentile_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningReport {
    pub audit: AuditEnvelope,
    pub verdict: TuningVerdict,
    pub default_mean_abs_delta: f64,
    pub non_standard_mean_abs_delta: f64,
    pub noise_floor: f64,
    /// Twice the noise floor; the default arm must fall short of the
    /// non-standard arm by more than this to be called tuned.
    pub margin: f64,
    pub default_arm: Vec<ArmProbe>,
    pub non_standard_arm: Vec<ArmProbe>,
}

impl TuningReport {
    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("report serializes")
    }
}

fn arm(results: &[QueryResult]) -> (Vec<ArmProbe>, f64) {
    let probes: Vec<ArmProbe> = results
        .iter()
        .map(|r| ArmProbe {
            probe_id: r.query_id.clone(),
            class_id: r.instance.class_id.clone(),
            percentile_delta: round_to(r.percentile_delta(), MAGNITUDE_DECIMALS),
        })
        .collect();
    let mean = if results.is_empty() {
        0.0
    } else {
        results.iter().map(|r| r.percentile_delta().abs()).sum::<f64>() / results.len() as f64
    };
    (probes, round_to(mean, MAGNITUDE_DECIMALS))
}

/// Compare the default suite against non-standard probes drawn from the same
/// classes in the same per-class numbers.
pub fn suite_tuning_probe(host: &ModelHost, params: &AuditParams) -> Result<TuningReport, RegulatorError> {
    let t = target(host, &params.version, params.domain)?;
    let suite = t.registry.default_suite(&t.probe)?.instances;
    let pool = non_standard_pool(&t)?;

    let mut wanted: BTreeMap<&str, usize> = BTreeMap::new();
    for p in &suite {
        *wanted.entry(p.class_id.as_str()).or_default() += 1;
    }
    let mut by_class: BTreeMap<&str, Vec<PerturbationInstance>> = BTreeMap::new();
    for p in &pool {
        by_class.entry(p.class_id.as_str()).or_default().push(p.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut drawn = Vec::new();
    for (class, n) in &wanted {
        if let Some(candidates) = by_class.get(class) {
            drawn.extend(sample(&mut rng, candidates, *n));
        }
    }
    drawn.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));

    let needed = params.divergence.pattern_min_count;
    if suite.len() < needed || drawn.len() < needed {
        return Err(RegulatorError::InsufficientProbes {
            default: suite.len(),
            non_standard: drawn.len(),
            needed,
        });
    }

    let baseline = t.version.evaluate(&t.probe, params.as_of)?;
    let default_results = suite
        .into_iter()
        .map(|p| run_probe(&t, &baseline, p, params.as_of))
        .collect::<Result<Vec<_>, _>>()?;
    let drawn_count = drawn.len();
    let ns_results = drawn
        .into_iter()
        .map(|p| run_probe(&t, &baseline, p, params.as_of))
        .collect::<Result<Vec<_>, _>>()?;

    let noise_floor = params
        .divergence
        .effective_noise_floor(noise_estimate(&t, params.as_of)?);
    let margin = 2.0 * noise_floor;
    let (default_arm, default_mean) = arm(&default_results);
    let (non_standard_arm, ns_mean) = arm(&ns_results);
    let verdict = if default_mean < ns_mean - margin {
        TuningVerdict::SuiteTuned
    } else {
        TuningVerdict::Consistent
    };
    Ok(TuningReport {
        audit: AuditEnvelope {
            mode: "suite_tuning".into(),
            version: params.version.clone(),
            domain: params.domain,
            seed: params.seed,
            registry_digest: t.registry.digest(),
            probe_record_digest: t.probe.digest(),
            probes_requested: default_arm.len(),
            probes_run: default_arm.len() + drawn_count,
            probes_available: pool.len(),
            as_of: params.as_of,
        },
        verdict,
        default_mean_abs_delta: default_mean,
        non_standard_mean_abs_delta: ns_mean,
        noise_floor,
        margin,
        default_arm,
        non_standard_arm,
    })
}
