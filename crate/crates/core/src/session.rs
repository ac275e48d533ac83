//! Interrogation sessions: the response window, the per-decision query budget,
//! duplicate-query dedup, and the monthly cross-application requester ledger.
//!
//! Every state change is written to the audit ledger first, then to the
//! JSON-lines journals, then applied in memory. Recovery replays the journals
//! and back-fills anything the audit ledger holds that a journal missed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Datelike, Duration, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{AuditError, AuditLedger, EntryKind, Holds};
use crate::canonical::{to_canonical_json, Digest};
use crate::divergence::{estimate_noise_floor, DivergenceConfig, DivergenceError, QueryResult};
use crate::host::{HostError, Label, ModelHost, ScoreOutcome, VersionId, VersionResolution};
use crate::perturbation::{apply, load_registry, PerturbationError, PerturbationInstance};
use crate::record::{Domain, FeatureRecord};
use crate::report::{compile_report, DivergenceReport, ReportContext, Templates};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("decision `{0}` is not adverse; interrogation rights do not apply")]
    NotAdverse(String),
    #[error("the response window closed at {deadline}")]
    WindowExpired { deadline: DateTime<Utc> },
    #[error("requester already has open session `{0}` for this decision")]
    DuplicateSession(String),
    #[error("unknown decision `{0}`")]
    UnknownDecision(String),
    #[error("decision `{0}` is already registered")]
    DuplicateDecision(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("query budget of {limit} is exhausted")]
    BudgetExhausted { limit: u32 },
    #[error("cross-application limit of {limit} queries for {month} is exhausted")]
    CrossAppLimitExceeded { limit: u32, month: MonthBucket },
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("invalid identifier `{0}`: use 1-128 characters from [A-Za-z0-9._-]")]
    InvalidId(String),
    #[error("record domain {record} does not match decision domain {decision}")]
    DomainMismatch { record: Domain, decision: Domain },
    #[error(transparent)]
    Perturbation(#[from] PerturbationError),
    #[error(transparent)]
    Host(#[from] HostError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("journal: {0}")]
    Journal(String),
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        SessionError::Journal(e.to_string())
    }
}

/// Identifiers double as file names, so they are kept to a safe alphabet.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

fn check_id(id: &str) -> Result<(), SessionError> {
    if valid_id(id) {
        Ok(())
    } else {
        Err(SessionError::InvalidId(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub budget_limit: u32,
    pub window_days: i64,
    pub cross_app_limit: u32,
    pub divergence: DivergenceConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            budget_limit: 50,
            window_days: 30,
            cross_app_limit: 10,
            divergence: DivergenceConfig::default(),
        }
    }
}

/// A decision open to interrogation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdverseDecision {
    pub decision_id: String,
    pub record: FeatureRecord,
    pub outcome: ScoreOutcome,
    pub model_version: VersionId,
    pub decided_at: DateTime<Utc>,
    pub domain: Domain,
}

impl AdverseDecision {
    /// Score `record` on `version` and wrap the result as a decision.
    pub fn evaluate(
        host: &ModelHost,
        decision_id: &str,
        record: FeatureRecord,
        version: &VersionId,
        decided_at: DateTime<Utc>,
    ) -> Result<Self, SessionError> {
        let outcome = host.evaluate(version, &record, decided_at)?;
        Ok(Self {
            decision_id: decision_id.to_string(),
            domain: record.domain,
            record,
            outcome,
            model_version: version.clone(),
            decided_at,
        })
    }

    pub fn is_adverse(&self) -> bool {
        self.outcome.label == Label::Reject
    }
}

/// A UTC calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MonthBucket {
    pub year: i32,
    pub month: u32,
}

impl MonthBucket {
    pub fn of(ts: DateTime<Utc>) -> Self {
        Self {
            year: ts.year(),
            month: ts.month(),
        }
    }
}

impl std::fmt::Display for MonthBucket {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Cross-application queries per requester per UTC month.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequesterLedger {
    pub requester_id: String,
    pub limit: u32,
    pub buckets: BTreeMap<String, u32>,
}

impl RequesterLedger {
    pub fn new(requester_id: &str, limit: u32) -> Self {
        Self {
            requester_id: requester_id.to_string(),
            limit,
            buckets: BTreeMap::new(),
        }
    }

    pub fn used(&self, month: MonthBucket) -> u32 {
        self.buckets.get(&month.to_string()).copied().unwrap_or(0)
    }

    pub fn remaining(&self, month: MonthBucket) -> u32 {
        self.limit.saturating_sub(self.used(month))
    }

    fn debit(&mut self, month: MonthBucket) {
        *self.buckets.entry(month.to_string()).or_default() += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Closed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterrogationSession {
    pub session_id: String,
    pub decision_id: String,
    pub requester_id: String,
    pub domain: Domain,
    pub resolution: VersionResolution,
    pub opened_at: DateTime<Utc>,
    pub window_deadline: DateTime<Utc>,
    pub budget_limit: u32,
    pub queries_used: u32,
    pub replays: u32,
    pub state: SessionState,
    /// Opened while the requester had another open session; its queries
    /// count against the monthly cross-application ledger.
    pub cross_app: bool,
    pub spoliation_flag: bool,
    pub record: FeatureRecord,
    pub baseline: ScoreOutcome,
    pub noise_floor_estimate: Option<f64>,
    pub results: Vec<QueryResult>,
    pub closed_at: Option<DateTime<Utc>>,
    #[serde(skip)]
    dedup_index: BTreeMap<Digest, usize>,
}

impl InterrogationSession {
    pub fn model_version(&self) -> &VersionId {
        self.resolution.pinned()
    }

    pub fn budget_remaining(&self) -> u32 {
        self.budget_limit - self.queries_used
    }

    /// State as observed at `now`; an open session past its deadline reads as
    /// expired.
    pub fn state_at(&self, now: DateTime<Utc>) -> SessionState {
        match self.state {
            SessionState::Open if now > self.window_deadline => SessionState::Expired,
            s => s,
        }
    }

    pub fn view(&self, now: DateTime<Utc>) -> InterrogationSession {
        let mut v = self.clone();
        v.state = self.state_at(now);
        v
    }

    fn rebuild_index(&mut self) {
        self.dedup_index = self
            .results
            .iter()
            .enumerate()
            .map(|(i, r)| (r.instance.digest(), i))
            .collect();
    }

    fn push_result(&mut self, result: QueryResult) {
        self.dedup_index.insert(result.instance.digest(), self.results.len());
        self.results.push(result);
        self.queries_used += 1;
    }
}

/// What a submission returned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub result: QueryResult,
    pub cached: bool,
    pub queries_used: u32,
    pub budget_remaining: u32,
    /// Remaining cross-application queries this month, for cross-app sessions.
    pub cross_app_remaining: Option<u32>,
}

/// The exported bundle an affected party files with an appeal.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidencePackage {
    pub report: DivergenceReport,
    pub report_json: String,
    pub report_text: String,
    pub audit_extract: Vec<String>,
}

impl EvidencePackage {
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), &self.report_json)?;
        std::fs::write(dir.join("report.txt"), &self.report_text)?;
        let mut extract = String::new();
        for line in &self.audit_extract {
            extract.push_str(line);
            extract.push('\n');
        }
        std::fs::write(dir.join("audit_extract.jsonl"), extract)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum SessionEvent {
    Opened {
        session: InterrogationSession,
    },
    Query {
        result: QueryResult,
        debit: Option<MonthBucket>,
    },
    Replay {
        query_id: String,
        at: DateTime<Utc>,
    },
    Closed {
        at: DateTime<Utc>,
        report: DivergenceReport,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DebitLine {
    session_id: String,
    query_id: String,
    month: MonthBucket,
}

/// Append-only JSON-lines files under one data directory.
#[derive(Debug, Clone)]
struct Store {
    dir: PathBuf,
}

impl Store {
    fn append<T: Serialize>(&self, rel: &str, value: &T) -> std::io::Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut line = to_canonical_json(value).map_err(std::io::Error::other)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, SessionError> {
        let f = File::open(path)?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line) {
                Ok(v) => out.push(v),
                // A torn final line was never acknowledged; the audit ledger
                // back-fills whatever it held.
                Err(e) => {
                    return Err(SessionError::Journal(format!("{}:{}: {e}", path.display(), n + 1)));
                }
            }
        }
        Ok(out)
    }

    fn session_path(id: &str) -> String {
        format!("sessions/{id}.jsonl")
    }

    fn ledger_path(requester: &str) -> String {
        format!("ledgers/{requester}.jsonl")
    }
}

fn drop_torn_tail(path: &Path) -> std::io::Result<()> {
    let bytes = std::fs::read(path)?;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(keep as u64)?;
        f.sync_all()?;
    }
    Ok(())
}

/// Owns decisions, sessions and requester ledgers.
pub struct SessionManager {
    host: Arc<ModelHost>,
    audit: Arc<AuditLedger>,
    config: SessionConfig,
    templates: Templates,
    decisions: RwLock<BTreeMap<String, Arc<AdverseDecision>>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<InterrogationSession>>>>,
    ledgers: Mutex<BTreeMap<String, RequesterLedger>>,
    open_lock: Mutex<()>,
    next_session: AtomicU64,
    store: Option<Store>,
}

impl std::fmt::Debug for SessionManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionManager")
            .field("sessions", &self.sessions.read().len())
            .field("store", &self.store)
            .finish()
    }
}

impl SessionManager {
    /// In-memory manager.
    pub fn new(host: Arc<ModelHost>, audit: Arc<AuditLedger>, config: SessionConfig) -> Self {
        Self {
            host,
            audit,
            config,
            templates: Templates::english(),
            decisions: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(BTreeMap::new()),
            ledgers: Mutex::new(BTreeMap::new()),
            open_lock: Mutex::new(()),
            next_session: AtomicU64::new(1),
            store: None,
        }
    }

    /// Manager persisting to `dir`, recovering whatever is already there.
    pub fn recover(
        dir: &Path,
        host: Arc<ModelHost>,
        audit: Arc<AuditLedger>,
        config: SessionConfig,
    ) -> Result<Self, SessionError> {
        std::fs::create_dir_all(dir.join("sessions"))?;
        std::fs::create_dir_all(dir.join("ledgers"))?;
        let mut m = Self::new(host, audit, config);
        m.store = Some(Store { dir: dir.to_path_buf() });
        m.replay_journals(dir)?;
        m.backfill_from_audit()?;
        Ok(m)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn host(&self) -> &Arc<ModelHost> {
        &self.host
    }

    pub fn audit(&self) -> &Arc<AuditLedger> {
        &self.audit
    }

    fn replay_journals(&mut self, dir: &Path) -> Result<(), SessionError> {
        let decisions = dir.join("decisions.jsonl");
        if decisions.exists() {
            drop_torn_tail(&decisions)?;
            for d in Store::read_lines::<AdverseDecision>(&decisions)? {
                self.decisions.get_mut().insert(d.decision_id.clone(), Arc::new(d));
            }
        }
        let mut max_id = 0;
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir.join("sessions"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            drop_torn_tail(&path)?;
            let mut session: Option<InterrogationSession> = None;
            for event in Store::read_lines::<SessionEvent>(&path)? {
                apply_event(&mut session, event);
            }
            if let Some(s) = session {
                max_id = max_id.max(session_number(&s.session_id));
                self.sessions
                    .get_mut()
                    .insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        self.next_session = AtomicU64::new(max_id + 1);
        let mut ledgers = BTreeMap::new();
        for entry in std::fs::read_dir(dir.join("ledgers"))? {
            let path = entry?.path();
            if path.extension().is_none_or(|x| x != "jsonl") {
                continue;
            }
            drop_torn_tail(&path)?;
            let requester = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mut l = RequesterLedger::new(&requester, self.config.cross_app_limit);
            for d in Store::read_lines::<DebitLine>(&path)? {
                l.debit(d.month);
            }
            ledgers.insert(requester, l);
        }
        *self.ledgers.get_mut() = ledgers;
        Ok(())
    }

    /// Re-apply audit entries whose journal writes did not complete.
    fn backfill_from_audit(&mut self) -> Result<(), SessionError> {
        let store = self.store.clone().expect("backfill runs with a store");
        let mut journaled_debits: BTreeSet<(String, String)> = BTreeSet::new();
        for path in std::fs::read_dir(store.dir.join("ledgers"))? {
            let path = path?.path();
            for d in Store::read_lines::<DebitLine>(&path)? {
                journaled_debits.insert((d.session_id, d.query_id));
            }
        }
        for entry in self.audit.entries() {
            let Some(payload) = &entry.payload else { continue };
            match (entry.kind, entry.action()) {
                (EntryKind::Admin, Some("decision_registered")) => {
                    let d: AdverseDecision = from_payload(payload, "decision")?;
                    if !self.decisions.get_mut().contains_key(&d.decision_id) {
                        store.append("decisions.jsonl", &d)?;
                        self.decisions.get_mut().insert(d.decision_id.clone(), Arc::new(d));
                    }
                }
                (EntryKind::SessionOpen, _) => {
                    let s: InterrogationSession = from_payload(payload, "session")?;
                    if !self.sessions.get_mut().contains_key(&s.session_id) {
                        store.append(&Store::session_path(&s.session_id), &SessionEvent::Opened { session: s.clone() })?;
                        let n = session_number(&s.session_id);
                        if n >= self.next_session.load(Ordering::SeqCst) {
                            self.next_session.store(n + 1, Ordering::SeqCst);
                        }
                        self.sessions
                            .get_mut()
                            .insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
                    }
                }
                (EntryKind::Query, _) if payload.get("cached") == Some(&Value::Bool(false)) => {
                    let result: QueryResult = from_payload(payload, "result")?;
                    let debit: Option<MonthBucket> = from_payload(payload, "debit")?;
                    let session_id: String = from_payload(payload, "session_id")?;
                    let requester: String = from_payload(payload, "requester_id")?;
                    let Some(session) = self.sessions.get_mut().get(&session_id).cloned() else {
                        continue;
                    };
                    let mut s = session.lock();
                    if !s.results.iter().any(|r| r.query_id == result.query_id) {
                        store.append(
                            &Store::session_path(&session_id),
                            &SessionEvent::Query {
                                result: result.clone(),
                                debit,
                            },
                        )?;
                        s.push_result(result.clone());
                    }
                    if let Some(month) = debit {
                        let key = (session_id.clone(), result.query_id.clone());
                        if !journaled_debits.contains(&key) {
                            store.append(
                                &Store::ledger_path(&requester),
                                &DebitLine {
                                    session_id: session_id.clone(),
                                    query_id: result.query_id.clone(),
                                    month,
                                },
                            )?;
                            self.ledgers
                                .get_mut()
                                .entry(requester.clone())
                                .or_insert_with(|| RequesterLedger::new(&requester, self.config.cross_app_limit))
                                .debit(month);
                            journaled_debits.insert(key);
                        }
                    }
                }
                (EntryKind::Report, _) => {
                    let report: DivergenceReport = from_payload(payload, "report")?;
                    let Some(session) = self.sessions.get_mut().get(&report.session_id).cloned() else {
                        continue;
                    };
                    let mut s = session.lock();
                    if s.state != SessionState::Closed {
                        store.append(
                            &Store::session_path(&report.session_id),
                            &SessionEvent::Closed {
                                at: report.generated_at,
                                report: report.clone(),
                            },
                        )?;
                        s.state = SessionState::Closed;
                        s.closed_at = Some(report.generated_at);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Register a decision and log it.
    pub fn register_decision(&self, decision: AdverseDecision, now: DateTime<Utc>) -> Result<Arc<AdverseDecision>, SessionError> {
        check_id(&decision.decision_id)?;
        if decision.record.domain != decision.domain {
            return Err(SessionError::DomainMismatch {
                record: decision.record.domain,
                decision: decision.domain,
            });
        }
        let mut decisions = self.decisions.write();
        if decisions.contains_key(&decision.decision_id) {
            return Err(SessionError::DuplicateDecision(decision.decision_id));
        }
        self.audit.append(
            EntryKind::Admin,
            json!({
                "action": "decision_registered",
                "decision_id": decision.decision_id,
                "decision": decision,
            }),
            now,
        )?;
        if let Some(store) = &self.store {
            store.append("decisions.jsonl", &decision)?;
        }
        let d = Arc::new(decision);
        decisions.insert(d.decision_id.clone(), d.clone());
        Ok(d)
    }

    pub fn decision(&self, decision_id: &str) -> Result<Arc<AdverseDecision>, SessionError> {
        self.decisions
            .read()
            .get(decision_id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownDecision(decision_id.to_string()))
    }

    pub fn decision_ids(&self) -> Vec<String> {
        self.decisions.read().keys().cloned().collect()
    }

    fn session_handle(&self, session_id: &str) -> Result<Arc<Mutex<InterrogationSession>>, SessionError> {
        self.sessions
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }

    pub fn session(&self, session_id: &str, now: DateTime<Utc>) -> Result<InterrogationSession, SessionError> {
        Ok(self.session_handle(session_id)?.lock().view(now))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().keys().cloned().collect()
    }

    pub fn requester_ledger(&self, requester_id: &str) -> RequesterLedger {
        self.ledgers
            .lock()
            .get(requester_id)
            .cloned()
            .unwrap_or_else(|| RequesterLedger::new(requester_id, self.config.cross_app_limit))
    }

    /// Sessions and decisions that must survive retention sweeps: every session
    /// not yet closed and the decisions behind them.
    pub fn open_matters(&self, now: DateTime<Utc>) -> Holds {
        let mut held = BTreeSet::new();
        for s in self.sessions.read().values() {
            let s = s.lock();
            if s.state_at(now) != SessionState::Closed {
                held.insert(s.session_id.clone());
                held.insert(s.decision_id.clone());
            }
        }
        Holds(held)
    }

    pub fn open_session(
        &self,
        decision_id: &str,
        requester_id: &str,
        now: DateTime<Utc>,
    ) -> Result<InterrogationSession, SessionError> {
        check_id(requester_id)?;
        let decision = self.decision(decision_id)?;
        if !decision.is_adverse() {
            return Err(SessionError::NotAdverse(decision_id.to_string()));
        }
        let deadline = decision.decided_at + Duration::days(self.config.window_days);
        if now > deadline {
            return Err(SessionError::WindowExpired { deadline });
        }

        let _guard = self.open_lock.lock();
        let mut other_open = false;
        for handle in self.sessions.read().values() {
            let s = handle.lock();
            if s.requester_id != requester_id || s.state_at(now) == SessionState::Closed {
                continue;
            }
            if s.decision_id == decision_id {
                if s.state_at(now) == SessionState::Open {
                    return Err(SessionError::DuplicateSession(s.session_id.clone()));
                }
            } else if s.state_at(now) == SessionState::Open {
                other_open = true;
            }
        }

        let resolution = self.host.resolve_decision_version(&decision.model_version);
        let spoliation_flag = resolution.spoliation();
        let (baseline, noise_floor_estimate) = if spoliation_flag {
            (decision.outcome.clone(), None)
        } else {
            let version = self.host.get(resolution.pinned())?;
            let baseline = version.evaluate(&decision.record, now)?;
            let noise = if version.is_stochastic() {
                Some(estimate_noise_floor(&version.evaluate_replicates(&decision.record, now)?)?)
            } else {
                None
            };
            (baseline, noise)
        };
        let n = self.next_session.fetch_add(1, Ordering::SeqCst);
        let session = InterrogationSession {
            session_id: format!("S-{n:06}"),
            decision_id: decision_id.to_string(),
            requester_id: requester_id.to_string(),
            domain: decision.domain,
            resolution,
            opened_at: now,
            window_deadline: deadline,
            budget_limit: self.config.budget_limit,
            queries_used: 0,
            replays: 0,
            state: SessionState::Open,
            cross_app: other_open,
            spoliation_flag,
            record: decision.record.clone(),
            baseline,
            noise_floor_estimate,
            results: Vec::new(),
            closed_at: None,
            dedup_index: BTreeMap::new(),
        };
        self.audit.append(
            EntryKind::SessionOpen,
            json!({
                "session_id": session.session_id,
                "decision_id": decision_id,
                "requester_id": requester_id,
                "session": session,
            }),
            now,
        )?;
        if let Some(store) = &self.store {
            store.append(
                &Store::session_path(&session.session_id),
                &SessionEvent::Opened {
                    session: session.clone(),
                },
            )?;
        }
        self.sessions
            .write()
            .insert(session.session_id.clone(), Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub fn submit_query(
        &self,
        session_id: &str,
        mut instance: PerturbationInstance,
        now: DateTime<Utc>,
    ) -> Result<SubmitOutcome, SessionError> {
        let handle = self.session_handle(session_id)?;
        let mut s = handle.lock();
        match s.state_at(now) {
            SessionState::Closed => return Err(SessionError::SessionClosed(session_id.to_string())),
            SessionState::Expired => {
                s.state = SessionState::Expired;
                return Err(SessionError::WindowExpired {
                    deadline: s.window_deadline,
                });
            }
            SessionState::Open => {}
        }
        if s.spoliation_flag {
            return Err(HostError::Spoliation(s.model_version().clone()).into());
        }
        let registry = load_registry(s.domain);
        instance.status = registry.validate_instance(&instance)?;
        let perturbed_record = apply(&s.record, &instance)?;
        let digest = instance.digest();
        let month = MonthBucket::of(now);

        if let Some(&i) = s.dedup_index.get(&digest) {
            let result = s.results[i].clone();
            self.audit.append(
                EntryKind::Query,
                json!({
                    "session_id": s.session_id,
                    "decision_id": s.decision_id,
                    "requester_id": s.requester_id,
                    "query_id": result.query_id,
                    "instance_digest": digest,
                    "cached": true,
                }),
                now,
            )?;
            if let Some(store) = &self.store {
                store.append(
                    &Store::session_path(session_id),
                    &SessionEvent::Replay {
                        query_id: result.query_id.clone(),
                        at: now,
                    },
                )?;
            }
            s.replays += 1;
            let cross_app_remaining = s.cross_app.then(|| self.requester_ledger(&s.requester_id).remaining(month));
            return Ok(SubmitOutcome {
                result,
                cached: true,
                queries_used: s.queries_used,
                budget_remaining: s.budget_remaining(),
                cross_app_remaining,
            });
        }

        if s.queries_used >= s.budget_limit {
            return Err(SessionError::BudgetExhausted { limit: s.budget_limit });
        }
        // Lock order: session, then requester ledgers.
        let mut ledgers = s.cross_app.then(|| self.ledgers.lock());
        if let Some(ledgers) = &ledgers {
            let used = ledgers.get(&s.requester_id).map_or(0, |l| l.used(month));
            if used >= self.config.cross_app_limit {
                return Err(SessionError::CrossAppLimitExceeded {
                    limit: self.config.cross_app_limit,
                    month,
                });
            }
        }

        let perturbed = self.host.evaluate(s.model_version(), &perturbed_record, now)?;
        let result = QueryResult {
            query_id: format!("{}-Q{:03}", s.session_id, s.results.len() + 1),
            instance,
            baseline: s.baseline.clone(),
            perturbed,
        };
        let debit = s.cross_app.then_some(month);
        self.audit.append(
            EntryKind::Query,
            json!({
                "session_id": s.session_id,
                "decision_id": s.decision_id,
                "requester_id": s.requester_id,
                "query_id": result.query_id,
                "instance_digest": digest,
                "cached": false,
                "debit": debit,
                "result": result,
            }),
            now,
        )?;
        if let Some(store) = &self.store {
            store.append(
                &Store::session_path(session_id),
                &SessionEvent::Query {
                    result: result.clone(),
                    debit,
                },
            )?;
            if let Some(month) = debit {
                store.append(
                    &Store::ledger_path(&s.requester_id),
                    &DebitLine {
                        session_id: session_id.to_string(),
                        query_id: result.query_id.clone(),
                        month,
                    },
                )?;
            }
        }
        let requester = s.requester_id.clone();
        s.push_result(result.clone());
        let cross_app_remaining = ledgers.as_mut().map(|ledgers| {
            let l = ledgers
                .entry(requester.clone())
                .or_insert_with(|| RequesterLedger::new(&requester, self.config.cross_app_limit));
            l.debit(month);
            l.remaining(month)
        });
        Ok(SubmitOutcome {
            result,
            cached: false,
            queries_used: s.queries_used,
            budget_remaining: s.budget_remaining(),
            cross_app_remaining,
        })
    }

    fn compile(&self, s: &InterrogationSession, generated_at: DateTime<Utc>) -> Result<DivergenceReport, SessionError> {
        let cfg = match self.host.get(s.model_version()) {
            Ok(v) => self.config.divergence.for_version(&v),
            Err(_) => self.config.divergence.clone(),
        };
        let ctx = ReportContext {
            session_id: s.session_id.clone(),
            model_version: s.model_version().clone(),
            spoliation_flag: s.spoliation_flag,
            budget_used: s.queries_used,
            generated_at,
            noise_floor_estimate: s.noise_floor_estimate,
        };
        Ok(compile_report(&ctx, &s.results, load_registry(s.domain), &cfg, &self.templates)?)
    }

    /// The session's report: the closing report once closed, otherwise a
    /// preview generated at `now`.
    pub fn report(&self, session_id: &str, now: DateTime<Utc>) -> Result<DivergenceReport, SessionError> {
        let handle = self.session_handle(session_id)?;
        let s = handle.lock();
        let at = s.closed_at.unwrap_or(now);
        self.compile(&s, at)
    }

    pub fn close_session(&self, session_id: &str, now: DateTime<Utc>) -> Result<EvidencePackage, SessionError> {
        let handle = self.session_handle(session_id)?;
        let mut s = handle.lock();
        if s.state == SessionState::Closed {
            return Err(SessionError::SessionClosed(session_id.to_string()));
        }
        let report = self.compile(&s, now)?;
        let report_json = report.to_canonical_json();
        self.audit.append(
            EntryKind::Report,
            json!({
                "session_id": s.session_id,
                "decision_id": s.decision_id,
                "requester_id": s.requester_id,
                "report_digest": Digest::of(report_json.as_bytes()),
                "report": report,
            }),
            now,
        )?;
        if let Some(store) = &self.store {
            store.append(
                &Store::session_path(session_id),
                &SessionEvent::Closed {
                    at: now,
                    report: report.clone(),
                },
            )?;
        }
        s.state = SessionState::Closed;
        s.closed_at = Some(now);
        let package = EvidencePackage {
            report_text: report.render_text(),
            report_json,
            report,
            audit_extract: self.audit.extract(session_id),
        };
        if let Some(store) = &self.store {
            package.write_to(&store.dir.join("packages").join(session_id))?;
        }
        Ok(package)
    }

    /// Evidence package of a closed session, rebuilt from its stored state.
    pub fn package(&self, session_id: &str) -> Result<EvidencePackage, SessionError> {
        let handle = self.session_handle(session_id)?;
        let s = handle.lock();
        let Some(at) = s.closed_at else {
            return Err(SessionError::Journal(format!("session `{session_id}` is not closed")));
        };
        let report = self.compile(&s, at)?;
        Ok(EvidencePackage {
            report_text: report.render_text(),
            report_json: report.to_canonical_json(),
            report,
            audit_extract: self.audit.extract(session_id),
        })
    }
}

fn from_payload<T: for<'de> Deserialize<'de>>(payload: &Value, key: &str) -> Result<T, SessionError> {
    serde_json::from_value(payload.get(key).cloned().unwrap_or(Value::Null))
        .map_err(|e| SessionError::Journal(format!("audit payload `{key}`: {e}")))
}

fn session_number(id: &str) -> u64 {
    id.strip_prefix("S-").and_then(|n| n.parse().ok()).unwrap_or(0)
}

fn apply_event(session: &mut Option<InterrogationSession>, event: SessionEvent) {
    match event {
        SessionEvent::Opened { session: mut s } => {
            s.rebuild_index();
            *session = Some(s);
        }
        SessionEvent::Query { result, .. } => {
            if let Some(s) = session {
                if !s.results.iter().any(|r| r.query_id == result.query_id) {
                    s.push_result(result);
                }
            }
        }
        SessionEvent::Replay { .. } => {
            if let Some(s) = session {
                s.replays += 1;
            }
        }
        SessionEvent::Closed { at, .. } => {
            if let Some(s) = session {
                s.state = SessionState::Closed;
                s.closed_at = Some(at);
            }
        }
    }
}
