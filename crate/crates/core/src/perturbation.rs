//! Perturbation registry.
//!
//! Regulator-defined perturbation classes per domain, the default suite drawn
//! from them, and the single-feature substitutions they produce.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use chrono::Months;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, Digest};
use crate::record::{Domain, FeatureRecord, FeatureValue, UnknownDomain};

/// Default-suite size bounds for records with enough matchable features.
pub const SUITE_MIN: usize = 10;
pub const SUITE_MAX: usize = 15;
/// Per-class cap applied when matches exceed `SUITE_MAX`.
pub const SUITE_PER_CLASS_CAP: usize = 2;

#[derive(Debug, Error)]
pub enum PerturbationError {
    #[error(transparent)]
    UnknownDomain(#[from] UnknownDomain),
    #[error("registry file: {0}")]
    Registry(String),
    #[error("record domain {record} does not match registry domain {registry}")]
    DomainMismatch { record: Domain, registry: Domain },
    #[error("feature `{0}` is not present in the record")]
    FieldMissing(String),
    #[error("stale instance: `{field}` is `{actual}`, instance expects `{expected}`")]
    StaleInstance {
        field: String,
        expected: String,
        actual: String,
    },
    #[error("malformed instance: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Name,
    Date,
    Terminology,
    Framing,
    Address,
    IncomePresentation,
    SymptomSynonym,
    Register,
    RecordPresence,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("enum serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HypothesisDirection {
    SuspectedNegative,
    SuspectedPositive,
    Undirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    RegulatorMinimum,
    ProposedCustom,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

/// Substitution generator attached to a class.
///
/// Literal, replace, and remove generators are part of the default suite
/// unless `suite = false`. Pool and shift generators contribute their first
/// `suite_take` applicable forms to the default suite; the rest are the
/// non-standard forms regulator audits draw from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    Literal {
        from: String,
        to: String,
        #[serde(default = "yes")]
        suite: bool,
    },
    Replace {
        pattern: String,
        with: String,
        #[serde(default = "yes")]
        suite: bool,
    },
    Pool {
        values: Vec<String>,
        #[serde(default = "one")]
        suite_take: usize,
    },
    /// Adds each offset to numbers; moves dates by whole years.
    Shift {
        offsets: Vec<i32>,
        #[serde(default = "one")]
        suite_take: usize,
    },
    Remove {
        #[serde(default = "yes")]
        suite: bool,
    },
}

/// Replace an existing value keeping its variant.
fn same_variant(original: &FeatureValue, text: &str) -> Option<FeatureValue> {
    match original {
        FeatureValue::Text(_) => Some(FeatureValue::Text(text.to_string())),
        FeatureValue::Category(_) => Some(FeatureValue::Category(text.to_string())),
        FeatureValue::Number(_) => text.parse().ok().map(FeatureValue::Number),
        FeatureValue::Date(_) => text.parse().ok().map(FeatureValue::Date),
    }
}

fn shift(original: &FeatureValue, offset: i32) -> Option<FeatureValue> {
    match original {
        FeatureValue::Number(n) => Some(FeatureValue::Number(n + f64::from(offset))),
        FeatureValue::Date(d) => {
            let months = Months::new(offset.unsigned_abs() * 12);
            let moved = if offset >= 0 {
                d.checked_add_months(months)
            } else {
                d.checked_sub_months(months)
            };
            moved.map(FeatureValue::Date)
        }
        _ => None,
    }
}

/// A candidate substitution: `None` removes the feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub substituted: Option<FeatureValue>,
    pub suite: bool,
}

impl Generator {
    pub fn candidates(&self, original: &FeatureValue) -> Result<Vec<Candidate>, PerturbationError> {
        let differs = |v: &FeatureValue| !v.same_as(original);
        let out = match self {
            Generator::Literal { from, to, suite } => {
                if original.normalized() == *from {
                    same_variant(original, to)
                        .filter(differs)
                        .map(|v| Candidate {
                            substituted: Some(v),
                            suite: *suite,
                        })
                        .into_iter()
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Generator::Replace {
                pattern,
                with,
                suite,
            } => {
                let re = compiled(pattern)?;
                match original.as_str() {
                    Some(text) if re.is_match(text) => {
                        let replaced = re.replace_all(text, with.as_str());
                        same_variant(original, &replaced)
                            .filter(differs)
                            .map(|v| Candidate {
                                substituted: Some(v),
                                suite: *suite,
                            })
                            .into_iter()
                            .collect()
                    }
                    _ => Vec::new(),
                }
            }
            Generator::Pool { values, suite_take } => values
                .iter()
                .filter_map(|v| same_variant(original, v))
                .filter(differs)
                .enumerate()
                .map(|(i, v)| Candidate {
                    substituted: Some(v),
                    suite: i < *suite_take,
                })
                .collect(),
            Generator::Shift {
                offsets,
                suite_take,
            } => offsets
                .iter()
                .filter_map(|o| shift(original, *o))
                .filter(differs)
                .enumerate()
                .map(|(i, v)| Candidate {
                    substituted: Some(v),
                    suite: i < *suite_take,
                })
                .collect(),
            Generator::Remove { suite } => vec![Candidate {
                substituted: None,
                suite: *suite,
            }],
        };
        Ok(out)
    }
}

fn compiled(pattern: &str) -> Result<Regex, PerturbationError> {
    Regex::new(pattern).map_err(|e| PerturbationError::Registry(format!("pattern `{pattern}`: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationClass {
    pub class_id: String,
    pub description: String,
    /// Short phrase used in plain-language reports.
    pub label: String,
    #[serde(default)]
    pub field_labels: BTreeMap<String, String>,
    #[serde(rename = "kind")]
    pub target_feature_kind: FeatureKind,
    #[serde(rename = "direction")]
    pub hypothesis_direction: HypothesisDirection,
    pub origin: Origin,
    /// Why the variation should be outcome-irrelevant. Surfaced in reports;
    /// never checked algorithmically.
    pub rationale: String,
    /// Feature names the class applies to.
    pub fields: Vec<String>,
    #[serde(rename = "generator", default)]
    pub generators: Vec<Generator>,
}

impl PerturbationClass {
    pub fn label_for(&self, field: &str) -> &str {
        self.field_labels.get(field).map(String::as_str).unwrap_or(&self.label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Accepted,
    CustomPending,
}

/// One tested variation of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationInstance {
    pub instance_id: String,
    pub class_id: String,
    pub field: String,
    pub original_value: FeatureValue,
    /// `None` removes the feature (record-presence classes).
    pub substituted_value: Option<FeatureValue>,
    pub status: InstanceStatus,
}

impl PerturbationInstance {
    /// Content digest: field and values only, so replays of the same
    /// substitution collide regardless of ids or class tags.
    pub fn digest(&self) -> Digest {
        let sub = match &self.substituted_value {
            Some(v) => serde_json::json!({ v.kind(): v.normalized() }),
            None => serde_json::Value::Null,
        };
        canonical::digest_value(&serde_json::json!({
            "field": self.field,
            "original": { self.original_value.kind(): self.original_value.normalized() },
            "substituted": sub,
        }))
    }

    pub fn is_removal(&self) -> bool {
        self.substituted_value.is_none()
    }

    /// The reverse substitution. Removals have no inverse.
    pub fn inverse(&self) -> Option<PerturbationInstance> {
        let substituted = self.substituted_value.clone()?;
        Some(PerturbationInstance {
            instance_id: format!("{}~inverse", self.instance_id),
            class_id: self.class_id.clone(),
            field: self.field.clone(),
            original_value: substituted,
            substituted_value: Some(self.original_value.clone()),
            status: self.status,
        })
    }
}

/// Regulator class list for one domain, in priority order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationRegistry {
    pub domain: Domain,
    #[serde(rename = "class")]
    pub classes: Vec<PerturbationClass>,
}

/// Default suite plus any warnings raised while building it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suite {
    pub instances: Vec<PerturbationInstance>,
    pub warnings: Vec<String>,
}

impl PerturbationRegistry {
    /// Parse and validate a registry file.
    pub fn parse(text: &str) -> Result<Self, PerturbationError> {
        let mut registry: PerturbationRegistry =
            toml::from_str(text).map_err(|e| PerturbationError::Registry(e.to_string()))?;
        let mut seen = HashSet::new();
        for class in &registry.classes {
            if !seen.insert(class.class_id.clone()) {
                return Err(PerturbationError::Registry(format!(
                    "duplicate class_id `{}`",
                    class.class_id
                )));
            }
            for g in &class.generators {
                if let Generator::Replace { pattern, .. } = g {
                    compiled(pattern)?;
                }
            }
        }
        registry.classes.shrink_to_fit();
        Ok(registry)
    }

    pub fn class(&self, class_id: &str) -> Option<&PerturbationClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    /// Classes sorted by `class_id`.
    pub fn sorted_classes(&self) -> Vec<&PerturbationClass> {
        let mut classes: Vec<_> = self.classes.iter().collect();
        classes.sort_by(|a, b| a.class_id.cmp(&b.class_id));
        classes
    }

    /// Canonical digest of the registry contents.
    pub fn digest(&self) -> Digest {
        canonical::digest_of(self).expect("registry serializes")
    }

    fn check_domain(&self, record: &FeatureRecord) -> Result<(), PerturbationError> {
        if record.domain == self.domain {
            Ok(())
        } else {
            Err(PerturbationError::DomainMismatch {
                record: record.domain,
                registry: self.domain,
            })
        }
    }

    /// Every candidate each class generates against `record`, in class
    /// priority order, then field order within the class, then generator order.
    pub fn enumerate(
        &self,
        record: &FeatureRecord,
    ) -> Result<Vec<(usize, PerturbationInstance, bool)>, PerturbationError> {
        self.check_domain(record)?;
        let mut out = Vec::new();
        for (priority, class) in self.classes.iter().enumerate() {
            let mut seen = HashSet::new();
            let mut k = 0usize;
            for field in &class.fields {
                let Some(original) = record.get(field) else {
                    continue;
                };
                for generator in &class.generators {
                    for cand in generator.candidates(original)? {
                        let instance = PerturbationInstance {
                            instance_id: format!("{}/{}/{}", class.class_id, field, k),
                            class_id: class.class_id.clone(),
                            field: field.clone(),
                            original_value: original.clone(),
                            substituted_value: cand.substituted,
                            status: match class.origin {
                                Origin::RegulatorMinimum => InstanceStatus::Accepted,
                                Origin::ProposedCustom => InstanceStatus::CustomPending,
                            },
                        };
                        if seen.insert(instance.digest()) {
                            k += 1;
                            out.push((priority, instance, cand.suite));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// The regulator-minimum default suite for `record`.
    ///
    /// All suite-flagged candidates of regulator-minimum classes are taken.
    /// Above `SUITE_MAX`, each class keeps at most `SUITE_PER_CLASS_CAP` in
    /// priority order; if that cap leaves fewer than `SUITE_MIN`, capped-out
    /// candidates are restored in priority order up to `SUITE_MIN`.
    pub fn default_suite(&self, record: &FeatureRecord) -> Result<Suite, PerturbationError> {
        let matches: Vec<(usize, PerturbationInstance)> = self
            .enumerate(record)?
            .into_iter()
            .filter(|(p, _, suite)| *suite && self.classes[*p].origin == Origin::RegulatorMinimum)
            .map(|(p, i, _)| (p, i))
            .collect();

        let instances: Vec<PerturbationInstance> = if matches.len() > SUITE_MAX {
            let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
            let mut kept = Vec::new();
            let mut spill = Vec::new();
            for (p, inst) in matches {
                let n = per_class.entry(p).or_default();
                if *n < SUITE_PER_CLASS_CAP {
                    *n += 1;
                    kept.push((p, inst));
                } else {
                    spill.push((p, inst));
                }
            }
            let refill = SUITE_MIN.saturating_sub(kept.len());
            kept.extend(spill.into_iter().take(refill));
            kept.sort_by_key(|(p, _)| *p);
            kept.truncate(SUITE_MAX);
            kept.into_iter().map(|(_, i)| i).collect()
        } else {
            matches.into_iter().map(|(_, i)| i).collect()
        };

        let mut warnings = Vec::new();
        if instances.is_empty() {
            warnings.push(format!(
                "no feature of record `{}` matches a regulator-minimum {} class; the default suite is empty",
                record.record_id, self.domain
            ));
        } else if instances.len() < SUITE_MIN {
            warnings.push(format!(
                "record `{}` has too few matchable features: default suite has {} instances (expected {}-{})",
                record.record_id,
                instances.len(),
                SUITE_MIN,
                SUITE_MAX
            ));
        }
        Ok(Suite { instances, warnings })
    }

    /// Non-standard forms: every candidate (any class, suite-flagged or not)
    /// whose digest is not in the default suite.
    pub fn non_standard(&self, record: &FeatureRecord) -> Result<Vec<PerturbationInstance>, PerturbationError> {
        let suite: HashSet<Digest> = self
            .default_suite(record)?
            .instances
            .iter()
            .map(PerturbationInstance::digest)
            .collect();
        Ok(self
            .enumerate(record)?
            .into_iter()
            .map(|(_, i, _)| i)
            .filter(|i| !suite.contains(&i.digest()))
            .collect())
    }

    /// Accepted iff the instance belongs to a regulator-minimum class that
    /// targets its field; anything else is testable but pending adjudication.
    pub fn validate_instance(&self, p: &PerturbationInstance) -> Result<InstanceStatus, PerturbationError> {
        if p.field.trim().is_empty() {
            return Err(PerturbationError::Malformed("empty field name".into()));
        }
        if let Some(sub) = &p.substituted_value {
            if sub.same_as(&p.original_value) {
                return Err(PerturbationError::Malformed(format!(
                    "substituted value equals original value `{}`",
                    p.original_value
                )));
            }
        }
        let accepted = self.class(&p.class_id).is_some_and(|c| {
            c.origin == Origin::RegulatorMinimum
                && c.fields.iter().any(|f| *f == p.field)
                && (p.substituted_value.is_some() || c.target_feature_kind == FeatureKind::RecordPresence)
        });
        Ok(if accepted {
            InstanceStatus::Accepted
        } else {
            InstanceStatus::CustomPending
        })
    }
}

/// Apply one perturbation. The result differs from `record` at `p.field` only.
pub fn apply(record: &FeatureRecord, p: &PerturbationInstance) -> Result<FeatureRecord, PerturbationError> {
    let current = record
        .get(&p.field)
        .ok_or_else(|| PerturbationError::FieldMissing(p.field.clone()))?;
    if !current.same_as(&p.original_value) {
        return Err(PerturbationError::StaleInstance {
            field: p.field.clone(),
            expected: p.original_value.normalized(),
            actual: current.normalized(),
        });
    }
    let mut out = record.clone();
    match &p.substituted_value {
        Some(v) => {
            out.features.insert(p.field.clone(), v.clone());
        }
        None => {
            out.features.remove(&p.field);
        }
    }
    Ok(out)
}

const BUILTIN: [(Domain, &str); 11] = [
    (Domain::Employment, include_str!("../registries/employment.toml")),
    (Domain::Credit, include_str!("../registries/credit.toml")),
    (Domain::Housing, include_str!("../registries/housing.toml")),
    (Domain::Healthcare, include_str!("../registries/healthcare.toml")),
    (Domain::CriminalJustice, include_str!("../registries/criminal_justice.toml")),
    (Domain::ContentModeration, include_str!("../registries/content_moderation.toml")),
    (Domain::Insurance, include_str!("../registries/insurance.toml")),
    (Domain::Education, include_str!("../registries/education.toml")),
    (Domain::Recommendation, include_str!("../registries/recommendation.toml")),
    (Domain::Advertising, include_str!("../registries/advertising.toml")),
    (Domain::FraudDetection, include_str!("../registries/fraud_detection.toml")),
];

/// The shipped registry for `domain`.
pub fn load_registry(domain: Domain) -> &'static PerturbationRegistry {
    static CACHE: OnceLock<BTreeMap<Domain, PerturbationRegistry>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| {
        BUILTIN
            .iter()
            .map(|(d, text)| {
                let reg = PerturbationRegistry::parse(text)
                    .unwrap_or_else(|e| panic!("shipped {d} registry is invalid: {e}"));
                assert_eq!(reg.domain, *d, "registry file domain mismatch");
                (*d, reg)
            })
            .collect()
    });
    &cache[&domain]
}

/// Look up a shipped registry by domain name.
pub fn load_registry_named(domain: &str) -> Result<&'static PerturbationRegistry, PerturbationError> {
    Ok(load_registry(domain.parse()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maria() -> FeatureRecord {
        FeatureRecord::new("maria", Domain::Employment)
            .with("name", FeatureValue::Text("Maria Gonzalez".into()))
            .with("grad_year", FeatureValue::Number(1991.0))
            .with("experience", FeatureValue::Text("25 years enterprise".into()))
            .with("skills", FeatureValue::Text("J2EE, SOAP".into()))
    }

    fn instance(field: &str, from: FeatureValue, to: Option<FeatureValue>) -> PerturbationInstance {
        PerturbationInstance {
            instance_id: "t".into(),
            class_id: "custom".into(),
            field: field.into(),
            original_value: from,
            substituted_value: to,
            status: InstanceStatus::CustomPending,
        }
    }

    #[test]
    fn every_shipped_registry_parses() {
        for d in Domain::ALL {
            let reg = load_registry(d);
            assert!(!reg.classes.is_empty(), "{d}");
            assert!(reg.classes.iter().any(|c| c.origin == Origin::RegulatorMinimum));
        }
    }

    #[test]
    fn unknown_domain_is_an_error() {
        assert!(matches!(
            load_registry_named("astrology"),
            Err(PerturbationError::UnknownDomain(_))
        ));
    }

    #[test]
    fn apply_changes_exactly_one_feature() {
        let r = maria();
        let p = instance(
            "grad_year",
            FeatureValue::Number(1991.0),
            Some(FeatureValue::Number(2011.0)),
        );
        let out = apply(&r, &p).unwrap();
        assert_eq!(out.get("grad_year"), Some(&FeatureValue::Number(2011.0)));
        let mut back = out.clone();
        back.features.insert("grad_year".into(), FeatureValue::Number(1991.0));
        assert_eq!(back, r);
    }

    #[test]
    fn apply_rejects_stale_and_missing() {
        let r = maria();
        let stale = instance(
            "grad_year",
            FeatureValue::Number(1990.0),
            Some(FeatureValue::Number(2011.0)),
        );
        assert!(matches!(apply(&r, &stale), Err(PerturbationError::StaleInstance { .. })));
        let missing = instance("zip", FeatureValue::Text("1".into()), Some(FeatureValue::Text("2".into())));
        assert!(matches!(apply(&r, &missing), Err(PerturbationError::FieldMissing(_))));
    }

    #[test]
    fn validate_examples() {
        let reg = load_registry(Domain::Employment);
        let mut name_swap = instance(
            "name",
            FeatureValue::Text("Maria Gonzalez".into()),
            Some(FeatureValue::Text("Michael Gordon".into())),
        );
        name_swap.class_id = "employment.name_variation".into();
        assert_eq!(reg.validate_instance(&name_swap).unwrap(), InstanceStatus::Accepted);

        let zip = instance(
            "zip_code",
            FeatureValue::Text("02139".into()),
            Some(FeatureValue::Text("90210".into())),
        );
        assert_eq!(reg.validate_instance(&zip).unwrap(), InstanceStatus::CustomPending);

        let same = instance(
            "name",
            FeatureValue::Text("Maria Gonzalez".into()),
            Some(FeatureValue::Text("Maria Gonzalez".into())),
        );
        assert!(matches!(reg.validate_instance(&same), Err(PerturbationError::Malformed(_))));
    }

    #[test]
    fn single_feature_record_gets_short_suite_with_warning() {
        let reg = load_registry(Domain::Employment);
        let r = FeatureRecord::new("solo", Domain::Employment)
            .with("name", FeatureValue::Text("Maria Gonzalez".into()));
        let suite = reg.default_suite(&r).unwrap();
        assert!(!suite.instances.is_empty() && suite.instances.len() < SUITE_MIN);
        assert!(suite.instances.iter().all(|i| i.class_id == "employment.name_variation"));
        assert_eq!(suite.warnings.len(), 1);
    }

    #[test]
    fn unmatched_record_gets_empty_suite() {
        let reg = load_registry(Domain::Employment);
        let r = FeatureRecord::new("x", Domain::Employment).with("zip", FeatureValue::Text("1".into()));
        let suite = reg.default_suite(&r).unwrap();
        assert!(suite.instances.is_empty());
        assert_eq!(suite.warnings.len(), 1);
    }

    #[test]
    fn suite_caps_classes_when_over_max() {
        let text = r#"
domain = "credit"
[[class]]
class_id = "a"
description = "a"
label = "a"
kind = "name"
direction = "undirected"
origin = "regulator_minimum"
rationale = "r"
fields = ["f"]
[[class.generator]]
type = "pool"
values = ["1","2","3","4","5","6","7","8","9","10","11","12"]
suite_take = 12
[[class]]
class_id = "b"
description = "b"
label = "b"
kind = "address"
direction = "undirected"
origin = "regulator_minimum"
rationale = "r"
fields = ["g"]
[[class.generator]]
type = "pool"
values = ["1","2","3","4","5","6","7","8"]
suite_take = 8
"#;
        let reg = PerturbationRegistry::parse(text).unwrap();
        let r = FeatureRecord::new("x", Domain::Credit)
            .with("f", FeatureValue::Text("0".into()))
            .with("g", FeatureValue::Text("0".into()));
        // 20 matches > 15: cap to 2 + 2, then refill class `a` up to 10.
        let suite = reg.default_suite(&r).unwrap();
        assert_eq!(suite.instances.len(), SUITE_MIN);
        let a = suite.instances.iter().filter(|i| i.class_id == "a").count();
        assert_eq!(a, 8);
        assert!(suite.warnings.is_empty());
    }

    #[test]
    fn date_shift_moves_whole_years() {
        let d = FeatureValue::Date("1991-06-01".parse().unwrap());
        let g = Generator::Shift {
            offsets: vec![20, -5],
            suite_take: 1,
        };
        let c = g.candidates(&d).unwrap();
        assert_eq!(c[0].substituted, Some(FeatureValue::Date("2011-06-01".parse().unwrap())));
        assert_eq!(c[1].substituted, Some(FeatureValue::Date("1986-06-01".parse().unwrap())));
        assert!(c[0].suite && !c[1].suite);
    }
}
