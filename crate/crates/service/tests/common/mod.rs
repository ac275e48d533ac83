#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use chrono::{DateTime, Utc};
use http_body_util::BodyExt;
use interrogate_core::access::Role;
use interrogate_core::clock::ManualClock;
use interrogate_core::fixtures::maria_record;
use interrogate_core::record::{Domain, FeatureRecord};
use interrogate_service::config::Credential;
use interrogate_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const MARIA: &str = "tok-maria";
pub const OTHER: &str = "tok-other";
pub const REP: &str = "tok-rep";
pub const REG: &str = "tok-reg";
pub const ORG: &str = "tok-org";

pub fn t(s: &str) -> DateTime<Utc> {
    s.parse().unwrap()
}

pub fn t0() -> DateTime<Utc> {
    t("2024-03-20T12:00:00Z")
}

pub fn token_for(role: Role) -> &'static str {
    match role {
        Role::AffectedParty => MARIA,
        Role::AuthorizedRepresentative => REP,
        Role::Regulator => REG,
        Role::OrganizationAdmin => ORG,
    }
}

pub fn config(dir: &std::path::Path) -> ServiceConfig {
    let cred = |token: &str, role, principal: &str| Credential {
        token: token.into(),
        role,
        principal: principal.into(),
    };
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        credentials: vec![
            cred(MARIA, Role::AffectedParty, "maria"),
            cred(OTHER, Role::AffectedParty, "other"),
            cred(REP, Role::AuthorizedRepresentative, "counsel"),
            cred(REG, Role::Regulator, "agency"),
            cred(ORG, Role::OrganizationAdmin, "acme-hr"),
        ],
        ..ServiceConfig::default()
    }
}

pub struct Harness {
    pub dir: TempDir,
    pub clock: Arc<ManualClock>,
    pub state: Arc<AppState>,
}

pub struct RawReply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl RawReply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or(Value::Null)
    }
}

impl Harness {
    pub fn new() -> Self {
        Self::with_config(|_| {})
    }

    pub fn with_config(edit: impl FnOnce(&mut ServiceConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = config(dir.path());
        edit(&mut cfg);
        let clock = Arc::new(ManualClock::new(t0()));
        let state = Arc::new(AppState::open(cfg, clock.clone()).unwrap());
        Self { dir, clock, state }
    }

    /// Drop the running state and start again from the data directory.
    pub fn restart(self) -> Self {
        let Harness { dir, clock, state } = self;
        let cfg = state.config().clone();
        drop(state);
        let state = Arc::new(AppState::open(cfg, clock.clone()).unwrap());
        Self { dir, clock, state }
    }

    pub async fn raw(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> RawReply {
        let mut req = Request::builder().method(method).uri(uri);
        if let Some(token) = token {
            req = req.header("authorization", format!("Bearer {token}"));
        }
        let body = match body {
            Some(v) => {
                req = req.header("content-type", "application/json");
                Body::from(serde_json::to_vec(&v).unwrap())
            }
            None => Body::empty(),
        };
        let res = router(self.state.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let body = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        RawReply { status, headers, body }
    }

    pub async fn call(&self, method: Method, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let r = self.raw(method, uri, token, body).await;
        (r.status, r.json())
    }

    pub async fn get(&self, uri: &str, token: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, Some(token), None).await
    }

    pub async fn post(&self, uri: &str, token: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(token), Some(body)).await
    }

    pub async fn register_decision(&self, id: &str, record: &FeatureRecord, version: &str, decided_at: &str) {
        let (status, body) = self
            .post(
                "/admin/decisions",
                ORG,
                json!({
                    "decision_id": id,
                    "record": record,
                    "model_version": version,
                    "decided_at": decided_at,
                }),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
    }

    /// Maria's rejected application, decided five days before `t0`.
    pub async fn maria_decision(&self) {
        self.register_decision("D-maria", &maria_record(), "maria-screen@1", "2024-03-15T09:00:00Z")
            .await;
    }

    pub async fn open(&self, token: &str, decision: &str) -> String {
        let (status, body) = self.post("/sessions", token, json!({ "decision_id": decision })).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }
}

/// Maria's record re-labelled into another domain.
pub fn maria_in(domain: Domain) -> FeatureRecord {
    let mut r = maria_record();
    r.domain = domain;
    r
}

pub fn text_query(class_id: &str, field: &str, original: &str, substituted: &str) -> Value {
    json!({
        "class_id": class_id,
        "field": field,
        "original_value": { "text": original },
        "substituted_value": { "text": substituted },
    })
}

pub fn grad_year_query(year: i64) -> Value {
    json!({
        "class_id": "employment.date_reformatting",
        "field": "grad_year",
        "original_value": { "number": 1991 },
        "substituted_value": { "number": year },
    })
}

/// The four counterfactuals from the worked hiring example.
pub fn maria_queries() -> Vec<Value> {
    vec![
        grad_year_query(2011),
        text_query("employment.name_variation", "name", "Maria Gonzalez", "Michael Gordon"),
        text_query(
            "employment.experience_framing",
            "experience",
            "25 years enterprise",
            "extensive full-stack",
        ),
        text_query("employment.terminology_update", "skills", "J2EE, SOAP", "Spring Boot, REST"),
    ]
}
