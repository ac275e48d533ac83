//! Service state and the synchronous logic behind every route.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::http::{HeaderMap, StatusCode};
use chrono::{DateTime, Utc};
use interrogate_core::access::{AccessMode, Role};
use interrogate_core::aggregate::{aggregate_disclosure, AggregateReport};
use interrogate_core::audit::{detect_anomaly, AnomalyFlag, AuditLedger, EntryKind, SweepOutcome, VerifyReport};
use interrogate_core::canonical::Digest;
use interrogate_core::clock::{Clock, ManualClock, SystemClock};
use interrogate_core::fixtures::builtin_specs;
use interrogate_core::host::{load_descriptor, parse_descriptor, HostError, ModelHost, ModelSpec, VersionId};
use interrogate_core::perturbation::{
    load_registry, load_registry_named, InstanceStatus, PerturbationInstance, PerturbationRegistry, Suite,
};
use interrogate_core::record::{FeatureRecord, FeatureValue};
use interrogate_core::report::DivergenceReport;
use interrogate_core::session::{
    valid_id, AdverseDecision, EvidencePackage, InterrogationSession, SessionError, SessionManager, SubmitOutcome,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::auth::{Caller, Credentials, Route};
use crate::config::{ClockMode, ServiceConfig};
use crate::error::ApiError;

const ACTION_MODEL_REGISTERED: &str = "model_registered";
const ACTION_MODEL_PURGED: &str = "model_purged";
const ACTION_ACCESS_QUEUED: &str = "access_queued";
const ACTION_ACCESS_RESOLVED: &str = "access_resolved";
const ACTION_DEADLINE_BREACH: &str = "response_deadline_breach";

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("data directory {path}: {source}")]
    DataDir {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Audit(#[from] interrogate_core::audit::AuditError),
    #[error("model {path}: {source}")]
    Model { path: PathBuf, source: HostError },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("audit payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    Pending,
    Granted,
    Declined,
}

/// An individual access request that could not be served directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessRequest {
    pub request_id: String,
    pub decision_id: String,
    pub requester_id: String,
    pub role: Role,
    pub access: AccessMode,
    pub received_at: DateTime<Utc>,
    /// Earliest time a representative may act on the request.
    pub available_at: DateTime<Utc>,
    pub respond_by: DateTime<Utc>,
    pub status: RequestStatus,
    pub representative: Option<String>,
    pub session_id: Option<String>,
    pub resolved_at: Option<DateTime<Utc>>,
    pub breach_logged: bool,
}

/// Outcome of `POST /sessions`.
#[derive(Debug, Clone, PartialEq)]
pub enum OpenOutcome {
    Opened(Box<InterrogationSession>),
    Queued(Box<AccessRequest>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenRequest {
    pub decision_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub instance_id: Option<String>,
    pub class_id: String,
    pub field: String,
    pub original_value: FeatureValue,
    #[serde(default)]
    pub substituted_value: Option<FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelUpload {
    pub descriptor: String,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionUpload {
    pub decision_id: String,
    pub record: FeatureRecord,
    pub model_version: VersionId,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolveBody {
    pub grant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageBody {
    pub report: DivergenceReport,
    pub report_text: String,
    pub audit_extract: Vec<String>,
}

impl From<EvidencePackage> for PackageBody {
    fn from(p: EvidencePackage) -> Self {
        Self {
            report: p.report,
            report_text: p.report_text,
            audit_extract: p.audit_extract,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    version: u32,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Default)]
struct Queue {
    requests: BTreeMap<String, AccessRequest>,
    next: u64,
}

pub struct AppState {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    credentials: Credentials,
    host: Arc<ModelHost>,
    audit: Arc<AuditLedger>,
    sessions: SessionManager,
    queue: Mutex<Queue>,
    model_lock: Mutex<()>,
}

impl std::fmt::Debug for AppState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppState")
            .field("data_dir", &self.config.data_dir)
            .field("sessions", &self.sessions)
            .finish()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StartupError + '_ {
    move |source| StartupError::DataDir {
        path: path.to_path_buf(),
        source,
    }
}

impl AppState {
    /// Clock implied by the configured mode.
    pub fn clock_for(mode: ClockMode) -> Arc<dyn Clock> {
        match mode {
            ClockMode::System => Arc::new(SystemClock),
            ClockMode::Fixed { at } => Arc::new(ManualClock::new(at)),
        }
    }

    /// Open the data directory, reload models, and recover sessions, the
    /// request queue and purges.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Self, StartupError> {
        let now = clock.now();
        let dir = config.data_dir.clone();
        std::fs::create_dir_all(dir.join("models")).map_err(io_err(&dir))?;
        let audit = Arc::new(AuditLedger::open_or_create(&dir.join("audit.jsonl"), now)?);

        let host = ModelHost::new();
        if config.builtin_models {
            for spec in builtin_specs() {
                host.register_version(spec, now)
                    .map_err(|source| StartupError::Model {
                        path: PathBuf::from("<builtin>"),
                        source,
                    })?;
            }
        }
        if let Some(models_dir) = &config.models_dir {
            for path in sorted_entries(models_dir, |p| p.extension().is_some_and(|e| e == "toml"))? {
                let spec = load_descriptor(&path).map_err(|source| StartupError::Model {
                    path: path.clone(),
                    source,
                })?;
                host.register_version(spec, now)
                    .map_err(|source| StartupError::Model { path, source })?;
            }
        }
        let uploaded = |p: &Path| p.is_dir() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.'));
        for path in sorted_entries(&dir.join("models"), uploaded)? {
            let spec = load_uploaded(&path).map_err(|source| StartupError::Model {
                path: path.clone(),
                source,
            })?;
            host.register_version(spec, now)
                .map_err(|source| StartupError::Model { path, source })?;
        }
        let purged = dir.join("models").join("purged.txt");
        if purged.exists() {
            for line in std::fs::read_to_string(&purged).map_err(io_err(&purged))?.lines() {
                if !line.trim().is_empty() {
                    let _ = host.purge(&VersionId(line.trim().to_string()));
                }
            }
        }
        let host = Arc::new(host);

        let sessions = SessionManager::recover(&dir, host.clone(), audit.clone(), config.session.clone())?;
        let state = Self {
            credentials: Credentials::new(&config.credentials),
            config,
            clock,
            host,
            audit,
            sessions,
            queue: Mutex::new(Queue::default()),
            model_lock: Mutex::new(()),
        };
        state.replay_admin_entries()?;
        Ok(state)
    }

    /// Rebuild the request queue and apply purges recorded only in the ledger.
    fn replay_admin_entries(&self) -> Result<(), StartupError> {
        let mut queue = self.queue.lock();
        for entry in self.audit.entries() {
            if entry.kind != EntryKind::Admin {
                continue;
            }
            let Some(payload) = &entry.payload else { continue };
            match entry.action() {
                Some(ACTION_ACCESS_QUEUED) => {
                    let request: AccessRequest = serde_json::from_value(payload["request"].clone())
                        .map_err(|e| StartupError::Payload(e.to_string()))?;
                    let n = request_number(&request.request_id);
                    queue.next = queue.next.max(n);
                    queue.requests.insert(request.request_id.clone(), request);
                }
                Some(ACTION_ACCESS_RESOLVED) => {
                    let request: AccessRequest = serde_json::from_value(payload["request"].clone())
                        .map_err(|e| StartupError::Payload(e.to_string()))?;
                    queue.requests.insert(request.request_id.clone(), request);
                }
                Some(ACTION_DEADLINE_BREACH) => {
                    if let Some(r) = payload["request_id"]
                        .as_str()
                        .and_then(|id| queue.requests.get_mut(id))
                    {
                        r.breach_logged = true;
                    }
                }
                Some(ACTION_MODEL_PURGED) => {
                    if let Some(v) = payload["version_id"].as_str() {
                        let _ = self.host.purge(&VersionId(v.to_string()));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn host(&self) -> &Arc<ModelHost> {
        &self.host
    }

    pub fn audit(&self) -> &Arc<AuditLedger> {
        &self.audit
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.sessions
    }

    /// Authenticate and authorize a request for `route`.
    pub fn caller(&self, headers: &HeaderMap, route: Route) -> Result<Caller, ApiError> {
        let caller = self.credentials.authenticate(headers)?;
        caller.require(route)?;
        Ok(caller)
    }

    /// The affected party a representative-held session was granted for.
    fn beneficiary(&self, session_id: &str) -> Option<String> {
        self.queue
            .lock()
            .requests
            .values()
            .find(|r| r.session_id.as_deref() == Some(session_id))
            .map(|r| r.requester_id.clone())
    }

    fn session_for_read(&self, caller: &Caller, session_id: &str) -> Result<InterrogationSession, ApiError> {
        let s = self.sessions.session(session_id, self.now())?;
        if caller.role == Role::Regulator
            || s.requester_id == caller.principal
            || self.beneficiary(session_id).as_deref() == Some(caller.principal.as_str())
        {
            Ok(s)
        } else {
            Err(not_party())
        }
    }

    fn session_for_write(&self, caller: &Caller, session_id: &str) -> Result<InterrogationSession, ApiError> {
        let s = self.sessions.session(session_id, self.now())?;
        if s.requester_id == caller.principal {
            Ok(s)
        } else {
            Err(not_party())
        }
    }

    /// Log a breach for every pending request past its respond-by time.
    pub fn sweep_deadlines(&self) -> Result<usize, ApiError> {
        let now = self.now();
        let mut queue = self.queue.lock();
        let mut breaches = 0;
        for r in queue.requests.values_mut() {
            if r.status == RequestStatus::Pending && !r.breach_logged && now > r.respond_by {
                self.audit.append(
                    EntryKind::Admin,
                    json!({
                        "action": ACTION_DEADLINE_BREACH,
                        "request_id": r.request_id,
                        "decision_id": r.decision_id,
                        "respond_by": r.respond_by,
                    }),
                    now,
                )?;
                r.breach_logged = true;
                breaches += 1;
            }
        }
        Ok(breaches)
    }

    pub fn open_session(&self, caller: &Caller, body: OpenRequest) -> Result<OpenOutcome, ApiError> {
        let now = self.now();
        let decision = self.sessions.decision(&body.decision_id)?;
        let access = self
            .config
            .tiers
            .enforce_tier(caller.role, decision.domain, decision.decided_at, now);
        let available_at = match access {
            AccessMode::Direct => {
                let session = self.sessions.open_session(&body.decision_id, &caller.principal, now)?;
                return Ok(OpenOutcome::Opened(Box::new(session)));
            }
            AccessMode::AggregateOnly => {
                return Err(ApiError::new(
                    StatusCode::FORBIDDEN,
                    "AggregateOnly",
                    format!("{} decisions are open to aggregate disclosure only", decision.domain),
                ))
            }
            AccessMode::Mediated => now,
            AccessMode::Delayed { until } => until,
        };
        if !decision.is_adverse() {
            return Err(SessionError::NotAdverse(decision.decision_id.clone()).into());
        }
        let deadline = decision.decided_at + chrono::Duration::days(self.sessions.config().window_days);
        if now > deadline {
            return Err(SessionError::WindowExpired { deadline }.into());
        }
        let mut queue = self.queue.lock();
        if let Some(existing) = queue.requests.values().find(|r| {
            r.status == RequestStatus::Pending
                && r.decision_id == body.decision_id
                && r.requester_id == caller.principal
        }) {
            return Ok(OpenOutcome::Queued(Box::new(existing.clone())));
        }
        let request = AccessRequest {
            request_id: format!("R-{:06}", queue.next + 1),
            decision_id: body.decision_id.clone(),
            requester_id: caller.principal.clone(),
            role: caller.role,
            access,
            received_at: now,
            available_at,
            respond_by: available_at + self.config.tiers.response_deadline(),
            status: RequestStatus::Pending,
            representative: None,
            session_id: None,
            resolved_at: None,
            breach_logged: false,
        };
        self.audit.append(
            EntryKind::Admin,
            json!({
                "action": ACTION_ACCESS_QUEUED,
                "decision_id": request.decision_id,
                "request": request,
            }),
            now,
        )?;
        queue.next += 1;
        queue.requests.insert(request.request_id.clone(), request.clone());
        Ok(OpenOutcome::Queued(Box::new(request)))
    }

    pub fn list_requests(&self, caller: &Caller) -> Result<Vec<AccessRequest>, ApiError> {
        self.sweep_deadlines()?;
        let queue = self.queue.lock();
        Ok(queue
            .requests
            .values()
            .filter(|r| caller.role != Role::AuthorizedRepresentative || r.status == RequestStatus::Pending
                || r.representative.as_deref() == Some(caller.principal.as_str()))
            .cloned()
            .collect())
    }

    pub fn resolve_request(&self, caller: &Caller, request_id: &str, body: ResolveBody) -> Result<AccessRequest, ApiError> {
        self.sweep_deadlines()?;
        let now = self.now();
        let mut queue = self.queue.lock();
        let request = queue
            .requests
            .get(request_id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownRequest", format!("unknown request `{request_id}`")))?;
        if request.status != RequestStatus::Pending {
            return Err(ApiError::new(StatusCode::CONFLICT, "RequestResolved", "request is already resolved"));
        }
        let mut resolved = request.clone();
        if body.grant {
            if now < request.available_at {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "NotYetAvailable",
                    format!("request opens to representatives at {}", request.available_at),
                )
                .retriable());
            }
            let session = self.sessions.open_session(&request.decision_id, &caller.principal, now)?;
            resolved.status = RequestStatus::Granted;
            resolved.session_id = Some(session.session_id);
        } else {
            resolved.status = RequestStatus::Declined;
        }
        resolved.representative = Some(caller.principal.clone());
        resolved.resolved_at = Some(now);
        self.audit.append(
            EntryKind::Admin,
            json!({
                "action": ACTION_ACCESS_RESOLVED,
                "decision_id": resolved.decision_id,
                "session_id": resolved.session_id,
                "request": resolved,
            }),
            now,
        )?;
        queue.requests.insert(resolved.request_id.clone(), resolved.clone());
        Ok(resolved)
    }

    pub fn get_session(&self, caller: &Caller, session_id: &str) -> Result<InterrogationSession, ApiError> {
        self.session_for_read(caller, session_id)
    }

    pub fn submit_query(&self, caller: &Caller, session_id: &str, body: QueryRequest) -> Result<SubmitOutcome, ApiError> {
        let s = self.session_for_write(caller, session_id)?;
        let instance_id = match body.instance_id {
            Some(id) if valid_id(&id) => id,
            Some(id) => return Err(SessionError::InvalidId(id).into()),
            None => format!("{}-I{:03}", s.session_id, s.results.len() + s.replays as usize + 1),
        };
        let instance = PerturbationInstance {
            instance_id,
            class_id: body.class_id,
            field: body.field,
            original_value: body.original_value,
            substituted_value: body.substituted_value,
            status: InstanceStatus::Accepted,
        };
        Ok(self.sessions.submit_query(session_id, instance, self.now())?)
    }

    pub fn close_session(&self, caller: &Caller, session_id: &str) -> Result<PackageBody, ApiError> {
        self.session_for_write(caller, session_id)?;
        Ok(self.sessions.close_session(session_id, self.now())?.into())
    }

    /// Canonical report JSON, exactly as the report compiler emits it.
    pub fn report_json(&self, caller: &Caller, session_id: &str) -> Result<String, ApiError> {
        self.session_for_read(caller, session_id)?;
        Ok(self.sessions.report(session_id, self.now())?.to_canonical_json())
    }

    pub fn suite(&self, caller: &Caller, session_id: &str) -> Result<Suite, ApiError> {
        let s = self.session_for_read(caller, session_id)?;
        Ok(load_registry(s.domain).default_suite(&s.record)?)
    }

    pub fn registry(&self, domain: &str) -> Result<(Digest, &'static PerturbationRegistry), ApiError> {
        let registry = load_registry_named(domain)
            .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, "UnknownDomain", e.to_string()))?;
        Ok((registry.digest(), registry))
    }

    pub fn aggregate(&self, version: &str, group_by: Option<&str>) -> Result<AggregateReport, ApiError> {
        let group_by = group_by.ok_or_else(|| ApiError::bad_request("query parameter `group_by` is required"))?;
        let version = self.host.get(&VersionId(version.to_string()))?;
        Ok(aggregate_disclosure(&version, group_by, self.now())?)
    }

    pub fn register_model(&self, upload: ModelUpload) -> Result<VersionId, ApiError> {
        for name in upload.files.keys() {
            if !valid_id(name) || name == "descriptor.toml" || name == "meta.json" {
                return Err(ApiError::bad_request(format!("invalid file name `{name}`")));
            }
        }
        let resolve = |rel: &str| {
            upload
                .files
                .get(rel)
                .cloned()
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("file `{rel}` not uploaded")))
        };
        let mut spec = parse_descriptor(&upload.descriptor, &resolve).map_err(|e| match e {
            HostError::Io(io) => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidModel", io.to_string()),
            other => other.into(),
        })?;
        if !valid_id(&spec.name) || spec.name.contains('@') {
            return Err(ApiError::bad_request(format!("invalid model name `{}`", spec.name)));
        }
        let now = self.now();
        let _guard = self.model_lock.lock();
        let number = match spec.version {
            Some(n) => n,
            None => next_version(&self.host, &spec.name),
        };
        let version_id = VersionId::new(&spec.name, number);
        if self.host.get(&version_id).is_ok() {
            return Err(HostError::DuplicateVersion(version_id).into());
        }
        spec.version = Some(number);
        let created_at = spec.created_at.unwrap_or(now);
        spec.created_at = Some(created_at);

        let mut files: Vec<(&str, &str)> = vec![("descriptor.toml", upload.descriptor.as_str())];
        files.extend(upload.files.iter().map(|(k, v)| (k.as_str(), v.as_str())));
        let digests: BTreeMap<&str, Digest> = files.iter().map(|(k, v)| (*k, Digest::of(v.as_bytes()))).collect();
        self.audit.append(
            EntryKind::Admin,
            json!({
                "action": ACTION_MODEL_REGISTERED,
                "version_id": version_id,
                "created_at": created_at,
                "files": digests,
            }),
            now,
        )?;
        let dir = self.config.data_dir.join("models").join(version_id.as_str());
        write_model_dir(&dir, &files, &ModelMeta { version: number, created_at })
            .map_err(|e| ApiError::internal(format!("persisting model: {e}")))?;
        Ok(self.host.register_version(spec, now)?)
    }

    pub fn purge_model(&self, version: &str) -> Result<Value, ApiError> {
        let id = VersionId(version.to_string());
        let now = self.now();
        let _guard = self.model_lock.lock();
        let current = self.host.get(&id)?;
        if !current.retained {
            return Err(ApiError::new(StatusCode::CONFLICT, "AlreadyPurged", format!("`{id}` is already purged")));
        }
        self.audit.append(
            EntryKind::Admin,
            json!({ "action": ACTION_MODEL_PURGED, "version_id": id }),
            now,
        )?;
        let path = self.config.data_dir.join("models").join("purged.txt");
        append_line(&path, id.as_str()).map_err(|e| ApiError::internal(format!("persisting purge: {e}")))?;
        self.host.purge(&id)?;
        Ok(json!({ "version_id": id, "retained": false }))
    }

    pub fn register_decision(&self, upload: DecisionUpload) -> Result<Arc<AdverseDecision>, ApiError> {
        let now = self.now();
        let decided_at = upload.decided_at.unwrap_or(now);
        if decided_at > now {
            return Err(ApiError::bad_request("decided_at lies in the future"));
        }
        let decision = AdverseDecision::evaluate(
            &self.host,
            &upload.decision_id,
            upload.record,
            &upload.model_version,
            decided_at,
        )?;
        Ok(self.sessions.register_decision(decision, now)?)
    }

    pub fn retention_sweep(&self) -> Result<SweepOutcome, ApiError> {
        let now = self.now();
        let holds = self.sessions.open_matters(now);
        Ok(self.audit.retention_sweep(now, &holds)?)
    }

    pub fn verify_audit(&self) -> Result<VerifyReport, ApiError> {
        Ok(self.audit.verify()?)
    }

    pub fn anomalies(&self, k: Option<usize>) -> Result<Vec<AnomalyFlag>, ApiError> {
        let k = k.unwrap_or(self.config.anomaly_k);
        if k < 2 {
            return Err(ApiError::bad_request("k must be at least 2"));
        }
        Ok(detect_anomaly(&self.audit.entries(), k))
    }
}

fn not_party() -> ApiError {
    ApiError::new(StatusCode::FORBIDDEN, "NotSessionParty", "caller is not a party to this session")
}

fn request_number(id: &str) -> u64 {
    id.strip_prefix("R-").and_then(|n| n.parse().ok()).unwrap_or(0)
}

fn next_version(host: &ModelHost, name: &str) -> u32 {
    host.version_ids()
        .iter()
        .filter_map(|id| {
            let (n, k) = id.as_str().rsplit_once('@')?;
            (n == name).then(|| k.parse::<u32>().ok()).flatten()
        })
        .max()
        .unwrap_or(0)
        + 1
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>, StartupError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if keep(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn write_model_dir(dir: &Path, files: &[(&str, &str)], meta: &ModelMeta) -> std::io::Result<()> {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    let staging = dir.with_file_name(format!(".{name}.partial"));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir_all(&staging)?;
    for (name, content) in files {
        std::fs::write(staging.join(name), content)?;
    }
    std::fs::write(staging.join("meta.json"), serde_json::to_string(meta)?)?;
    std::fs::rename(&staging, dir)
}

fn load_uploaded(dir: &Path) -> Result<ModelSpec, HostError> {
    let mut spec = load_descriptor(&dir.join("descriptor.toml"))?;
    let meta: ModelMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| HostError::Descriptor(format!("meta.json: {e}")))?;
    spec.version = Some(meta.version);
    spec.created_at = Some(meta.created_at);
    Ok(spec)
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    f.sync_data()
}
