//! Bundled model fixtures.
//!
//! `maria-screen` is a scripted hiring screen, `hiring-linear` a linear screen
//! with an age proxy, `hiring-gamed` the same screen patched to hold the
//! default suite flat, and `tenant-screen` a housing screen that penalizes any
//! eviction entry.

use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::host::{parse_descriptor, Fallback, FixtureModel, HostError, LinearModel, ModelHost, ModelSpec};
use crate::perturbation::{apply, load_registry};
use crate::record::{Domain, FeatureRecord};

const FILES: &[(&str, &str)] = &[
    ("population-uniform100.txt", include_str!("../fixtures/population-uniform100.txt")),
    ("maria-record.json", include_str!("../fixtures/maria-record.json")),
    ("maria-fixture.jsonl", include_str!("../fixtures/maria-fixture.jsonl")),
    ("tenant-record.json", include_str!("../fixtures/tenant-record.json")),
    ("tenant-records.jsonl", include_str!("../fixtures/tenant-records.jsonl")),
];

const DESCRIPTORS: &[(&str, &str)] = &[
    ("maria-screen", include_str!("../fixtures/maria-screen.toml")),
    ("hiring-linear", include_str!("../fixtures/hiring-linear.toml")),
    ("tenant-screen", include_str!("../fixtures/tenant-screen.toml")),
];

fn resolve(name: &str) -> std::io::Result<String> {
    FILES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| text.to_string())
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, name.to_string()))
}

fn descriptor(name: &str) -> ModelSpec {
    let (_, text) = DESCRIPTORS
        .iter()
        .find(|(n, _)| *n == name)
        .expect("bundled descriptor");
    parse_descriptor(text, &resolve).expect("bundled descriptor parses")
}

pub fn maria_record() -> FeatureRecord {
    serde_json::from_str(FILES[1].1).expect("bundled record parses")
}

pub fn tenant_record() -> FeatureRecord {
    serde_json::from_str(FILES[3].1).expect("bundled record parses")
}

pub fn maria_screen() -> ModelSpec {
    descriptor("maria-screen")
}

pub fn hiring_linear() -> ModelSpec {
    descriptor("hiring-linear")
}

pub fn tenant_screen() -> ModelSpec {
    descriptor("tenant-screen")
}

/// `hiring-linear` patched so that every default-suite perturbation of the
/// probe record scores exactly like the probe record itself. Everything else
/// falls through to the linear model.
pub fn hiring_gamed() -> ModelSpec {
    let mut spec = hiring_linear();
    let linear: LinearModel = toml::from_str::<toml::Table>(DESCRIPTORS[1].1)
        .ok()
        .and_then(|t| t.get("linear").cloned())
        .and_then(|v| v.try_into().ok())
        .expect("bundled linear section");
    let probe = spec.probe_record.clone().expect("hiring-linear has a probe record");
    let baseline = crate::host::DecisionModel::score(&linear, &probe, 0).expect("probe scores");
    let mut fixture = FixtureModel::new(Fallback::Linear(linear));
    let suite = load_registry(Domain::Employment)
        .default_suite(&probe)
        .expect("default suite");
    for p in &suite.instances {
        let perturbed = apply(&probe, p).expect("suite instance applies");
        fixture.insert(&perturbed, baseline);
    }
    spec.name = "hiring-gamed".into();
    spec.model = Arc::new(fixture);
    spec
}

pub fn builtin_specs() -> Vec<ModelSpec> {
    vec![maria_screen(), hiring_linear(), hiring_gamed(), tenant_screen()]
}

/// Host with every bundled fixture registered as version 1.
pub fn builtin_host(now: DateTime<Utc>) -> Result<ModelHost, HostError> {
    let host = ModelHost::new();
    for spec in builtin_specs() {
        host.register_version(spec, now)?;
    }
    Ok(host)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::{Label, VersionId};
    use crate::perturbation::PerturbationInstance;
    use crate::perturbation::InstanceStatus;
    use crate::record::FeatureValue;

    fn now() -> DateTime<Utc> {
        "2024-03-01T00:00:00Z".parse().unwrap()
    }

    fn substitute(field: &str, value: FeatureValue) -> PerturbationInstance {
        PerturbationInstance {
            instance_id: "x".into(),
            class_id: "x".into(),
            field: field.into(),
            original_value: maria_record().get(field).unwrap().clone(),
            substituted_value: Some(value),
            status: InstanceStatus::Accepted,
        }
    }

    #[test]
    fn builtin_versions_register() {
        let host = builtin_host(now()).unwrap();
        let ids: Vec<String> = host.version_ids().into_iter().map(|v| v.0).collect();
        assert_eq!(ids, vec!["hiring-gamed@1", "hiring-linear@1", "maria-screen@1", "tenant-screen@1"]);
    }

    #[test]
    fn maria_script_scores() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&VersionId::from("maria-screen@1")).unwrap();
        let base = v.evaluate(&maria_record(), now()).unwrap();
        assert_eq!((base.score, base.percentile, base.label), (0.42, 42.0, Label::Reject));
        let cases = [
            ("grad_year", FeatureValue::Number(2011.0), 0.71),
            ("name", FeatureValue::Text("Michael Gordon".into()), 0.58),
            ("experience", FeatureValue::Text("extensive full-stack".into()), 0.64),
            ("skills", FeatureValue::Text("Spring Boot, REST".into()), 0.69),
        ];
        for (field, value, expected) in cases {
            let r = apply(&maria_record(), &substitute(field, value)).unwrap();
            assert_eq!(v.evaluate(&r, now()).unwrap().score, expected, "{field}");
        }
    }

    #[test]
    fn maria_default_suite_has_twelve_instances() {
        let suite = load_registry(Domain::Employment).default_suite(&maria_record()).unwrap();
        assert_eq!(suite.instances.len(), 12);
        assert!(suite.warnings.is_empty());
    }

    #[test]
    fn hiring_linear_baseline() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&VersionId::from("hiring-linear@1")).unwrap();
        let base = v.evaluate(&maria_record(), now()).unwrap();
        assert_eq!((base.score, base.percentile), (0.3, 30.0));
        let older = apply(&maria_record(), &substitute("grad_year", FeatureValue::Number(1982.0))).unwrap();
        assert_eq!(v.evaluate(&older, now()).unwrap().percentile, 21.0);
    }

    #[test]
    fn gamed_screen_holds_suite_flat() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&VersionId::from("hiring-gamed@1")).unwrap();
        let probe = maria_record();
        let suite = load_registry(Domain::Employment).default_suite(&probe).unwrap();
        for p in &suite.instances {
            assert_eq!(v.evaluate(&apply(&probe, p).unwrap(), now()).unwrap().score, 0.3);
        }
    }

    #[test]
    fn tenant_eviction_removal_shifts_ranking() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&VersionId::from("tenant-screen@1")).unwrap();
        let rec = tenant_record();
        let base = v.evaluate(&rec, now()).unwrap();
        assert_eq!((base.score, base.percentile, base.label), (0.2, 20.0, Label::Reject));
        let mut removed = rec.clone();
        removed.features.remove("eviction_record");
        let after = v.evaluate(&removed, now()).unwrap();
        assert_eq!((after.score, after.percentile, after.label), (0.55, 55.0, Label::Accept));
        assert_eq!(v.disclosure_records.len(), 100);
    }
}
