use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use interrogate_core::access::{AccessMode, Role, TierPolicy};
use interrogate_core::audit::{retention_expired, verify_chain, AuditLedger, EntryKind, Holds};
use interrogate_core::divergence::{assess_pattern, assess_single, Criterion, DivergenceConfig, QueryResult};
use interrogate_core::fixtures::{builtin_host, maria_record, tenant_record};
use interrogate_core::host::{percentile_of, Interval, Label, ReferencePopulation, ScoreOutcome, VersionId};
use interrogate_core::perturbation::{apply, load_registry, InstanceStatus, PerturbationInstance};
use interrogate_core::record::{Domain, FeatureRecord, FeatureValue};
use interrogate_core::session::{AdverseDecision, MonthBucket, SessionConfig, SessionError, SessionManager};
use proptest::prelude::*;
use serde_json::json;

fn t0() -> DateTime<Utc> {
    "2024-03-20T12:00:00Z".parse().unwrap()
}

fn instances_for(record: &FeatureRecord) -> Vec<PerturbationInstance> {
    let registry = load_registry(record.domain);
    let mut all = registry.default_suite(record).unwrap().instances;
    all.extend(registry.non_standard(record).unwrap());
    all
}

/// Every suite and non-standard probe of Maria's record, scored on the linear
/// hiring model.
fn linear_results() -> Vec<QueryResult> {
    let host = builtin_host(t0()).unwrap();
    let version = host.get(&VersionId::from("hiring-linear@1")).unwrap();
    let record = maria_record();
    let baseline = version.evaluate(&record, t0()).unwrap();
    instances_for(&record)
        .into_iter()
        .map(|p| QueryResult {
            query_id: p.instance_id.clone(),
            perturbed: version.evaluate(&apply(&record, &p).unwrap(), t0()).unwrap(),
            baseline: baseline.clone(),
            instance: p,
        })
        .collect()
}

fn outcome(percentile: f64, label: Label) -> ScoreOutcome {
    ScoreOutcome {
        score: percentile / 100.0,
        confidence: Interval {
            lo: percentile / 100.0,
            hi: percentile / 100.0,
        },
        percentile,
        label,
        model_version: VersionId::from("m@1"),
        evaluated_at: t0(),
    }
}

fn fires(findings: &[interrogate_core::divergence::Finding], c: Criterion) -> bool {
    findings.iter().any(|f| f.criterion == c)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percentile_matches_counting_oracle(
        scores in prop::collection::vec(0u32..=1000, 1..200),
        probe in 0u32..=1000,
    ) {
        let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1000.0).collect();
        let probe = probe as f64 / 1000.0;
        let population = ReferencePopulation::new("p", scores.clone(), t0()).unwrap();
        let below = scores.iter().filter(|s| **s < probe).count();
        let expected = 100.0 * below as f64 / scores.len() as f64;
        prop_assert!((percentile_of(probe, &population) - expected).abs() < 1e-9);
    }

    #[test]
    fn perturbations_touch_only_their_field_and_invert(
        which in 0usize..1000,
        tenant in any::<bool>(),
    ) {
        let record = if tenant { tenant_record() } else { maria_record() };
        let all = instances_for(&record);
        let p = &all[which % all.len()];
        let out = apply(&record, p).unwrap();
        for (name, value) in &record.features {
            if name != &p.field {
                prop_assert_eq!(out.features.get(name), Some(value));
            }
        }
        match p.inverse() {
            Some(inv) => prop_assert_eq!(apply(&out, &inv).unwrap(), record.clone()),
            None => prop_assert!(!out.features.contains_key(&p.field)),
        }
    }

    #[test]
    fn percentile_shift_is_monotone_in_the_delta(
        baseline in 0.0f64..100.0,
        d1 in 0.0f64..100.0,
        extra in 0.0f64..50.0,
        up in any::<bool>(),
    ) {
        let cfg = DivergenceConfig::default();
        let sign = if up { 1.0 } else { -1.0 };
        let small = outcome(baseline + sign * d1, Label::Reject);
        let large = outcome(baseline + sign * (d1 + extra), Label::Reject);
        let base = outcome(baseline, Label::Reject);
        let f_small = assess_single(&base, &small, &cfg).unwrap();
        let f_large = assess_single(&base, &large, &cfg).unwrap();
        if fires(&f_small, Criterion::PercentileShift) {
            prop_assert!(fires(&f_large, Criterion::PercentileShift));
        }
        prop_assert!(!fires(&f_small, Criterion::OutcomeCrossing));
    }

    #[test]
    fn tier_decisions_are_pure(
        domain in prop::sample::select(Domain::ALL.to_vec()),
        role in prop::sample::select(Role::ALL.to_vec()),
        offset_hours in -100i64..200,
    ) {
        let policy = TierPolicy::default();
        let decided = t0();
        let now = decided + Duration::hours(offset_hours.max(0));
        let a = policy.enforce_tier(role, domain, decided, now);
        prop_assert_eq!(a, policy.enforce_tier(role, domain, decided, now));
        if role == Role::Regulator {
            prop_assert_eq!(a, AccessMode::Direct);
        }
        if let AccessMode::Delayed { until } = a {
            prop_assert!(now < until);
            prop_assert_eq!(until, decided + Duration::hours(48));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pattern_findings_ignore_result_order(
        picks in prop::collection::vec(any::<bool>(), 64),
        shuffled in Just((0..64usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let all = linear_results();
        let chosen: Vec<QueryResult> = all.iter().enumerate()
            .filter(|(i, _)| picks[i % picks.len()])
            .map(|(_, r)| r.clone())
            .collect();
        let order: Vec<usize> = shuffled.into_iter().filter(|i| *i < chosen.len()).collect();
        let permuted: Vec<QueryResult> = order.iter().map(|i| chosen[*i].clone()).collect();
        let registry = load_registry(Domain::Employment);
        let cfg = DivergenceConfig::default();
        let a = assess_pattern(&chosen, registry, &cfg, 5.0).unwrap();
        let b = assess_pattern(&permuted, registry, &cfg, 5.0).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn any_bit_flip_is_detected_at_its_entry(
        n in 1usize..40,
        byte in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let ledger = AuditLedger::in_memory(t0());
        for i in 0..n {
            ledger.append(EntryKind::Query, json!({ "session_id": "S-1", "i": i }), t0() + Duration::seconds(i as i64)).unwrap();
        }
        let mut bytes = ledger.to_bytes();
        let at = byte.index(bytes.len());
        bytes[at] ^= 1 << bit;
        let line = bytes[..at].iter().filter(|b| **b == b'\n').count() as u64;
        let report = verify_chain(&bytes, Some(&ledger.head()));
        prop_assert!(!report.ok());
        prop_assert_eq!(report.first().unwrap().seq, line.min(n as u64));
    }

    #[test]
    fn retention_purges_exactly_expired_unheld_entries(
        ages in prop::collection::vec((0i64..80, any::<bool>()), 1..30),
    ) {
        let now = t0();
        let ledger = AuditLedger::in_memory(now - Duration::days(80 * 31));
        let mut entries: Vec<(DateTime<Utc>, String, bool)> = ages
            .iter()
            .enumerate()
            .map(|(i, (months, held))| (now - Duration::days(months * 31), format!("S-{i}"), *held))
            .collect();
        entries.sort_by_key(|e| e.0);
        let mut holds = Holds::default();
        for (ts, sid, held) in &entries {
            ledger.append(EntryKind::Query, json!({ "session_id": sid }), *ts).unwrap();
            if *held {
                holds.0.insert(sid.clone());
            }
        }
        let before = ledger.entries();
        let outcome = ledger.retention_sweep(now, &holds).unwrap();
        let after = ledger.entries();
        for (i, (ts, _, held)) in entries.iter().enumerate() {
            let should = retention_expired(*ts, now) && !held;
            prop_assert_eq!(after[i].is_purged(), should);
            prop_assert_eq!(outcome.purged.contains(&after[i].seq), should);
            prop_assert_eq!(&after[i].entry_digest, &before[i].entry_digest);
        }
        prop_assert!(ledger.verify().unwrap().ok());
        prop_assert_eq!(outcome.checkpoint.is_some(), !outcome.purged.is_empty());
    }
}

fn manager(config: SessionConfig) -> (SessionManager, Arc<AuditLedger>) {
    let host = Arc::new(builtin_host(t0()).unwrap());
    let audit = Arc::new(AuditLedger::in_memory(t0()));
    (SessionManager::new(host, audit.clone(), config), audit)
}

fn grad_year(year: i64) -> PerturbationInstance {
    PerturbationInstance {
        instance_id: format!("gy-{year}"),
        class_id: "employment.date_reformatting".into(),
        field: "grad_year".into(),
        original_value: FeatureValue::Number(1991.0),
        substituted_value: Some(FeatureValue::Number(year as f64)),
        status: InstanceStatus::Accepted,
    }
}

fn register(m: &SessionManager, id: &str, decided: DateTime<Utc>) {
    let d = AdverseDecision::evaluate(m.host(), id, maria_record(), &VersionId::from("hiring-linear@1"), decided).unwrap();
    m.register_decision(d, decided).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn concurrent_submissions_never_overspend(limit in 1u32..20, attempts in 1usize..40) {
        let (m, _) = manager(SessionConfig { budget_limit: limit, ..SessionConfig::default() });
        register(&m, "D-1", t0());
        let sid = m.open_session("D-1", "maria", t0()).unwrap().session_id;
        let admitted = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..attempts)
                .map(|i| {
                    let (m, sid) = (&m, &sid);
                    scope.spawn(move || m.submit_query(sid, grad_year(1900 + i as i64), t0()))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap())
                .filter(|r| match r {
                    Ok(_) => true,
                    Err(SessionError::BudgetExhausted { .. }) => false,
                    Err(e) => panic!("unexpected error {e}"),
                })
                .count()
        });
        prop_assert_eq!(admitted, attempts.min(limit as usize));
        let s = m.session(&sid, t0()).unwrap();
        prop_assert_eq!(s.queries_used as usize, admitted);
        prop_assert_eq!(s.results.len(), admitted);
    }

    #[test]
    fn cross_app_debits_are_conserved(
        ops in prop::collection::vec((0usize..3, 1900i64..1915, 0i64..20), 1..60),
    ) {
        let (m, audit) = manager(SessionConfig::default());
        let mut sessions = Vec::new();
        for i in 0..3 {
            let id = format!("D-{i}");
            register(&m, &id, t0() - Duration::days(1));
            sessions.push(m.open_session(&id, "maria", t0()).unwrap().session_id);
        }
        let mut admitted = BTreeMap::<String, u32>::new();
        for (which, year, day) in ops {
            let now = t0() + Duration::days(day);
            match m.submit_query(&sessions[which], grad_year(year), now) {
                Ok(out) if !out.cached => {
                    *admitted.entry(MonthBucket::of(now).to_string()).or_default() +=
                        u32::from(m.session(&sessions[which], now).unwrap().cross_app);
                }
                Ok(_) | Err(SessionError::CrossAppLimitExceeded { .. }) | Err(SessionError::BudgetExhausted { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        let ledger = m.requester_ledger("maria");
        let mut audited = BTreeMap::<String, u32>::new();
        for e in audit.entries() {
            if let Some(debit) = e.payload.as_ref().and_then(|p| p.get("debit")).filter(|d| !d.is_null()) {
                let month: MonthBucket = serde_json::from_value(debit.clone()).unwrap();
                *audited.entry(month.to_string()).or_default() += 1;
            }
        }
        for (month, used) in &ledger.buckets {
            prop_assert!(*used <= m.config().cross_app_limit);
            prop_assert_eq!(Some(used), audited.get(month));
            prop_assert_eq!(Some(used), admitted.get(month).filter(|n| **n > 0));
        }
        prop_assert_eq!(
            audited.values().sum::<u32>(),
            ledger.buckets.values().sum::<u32>()
        );
    }
}
