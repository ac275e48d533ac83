//! Axum bindings. Handlers authenticate, parse, and hand off to `AppState`
//! on the blocking pool.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{middleware, Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::auth::Route;
use crate::error::ApiError;
use crate::state::{AppState, OpenOutcome};

/// Version of the JSON schemas served, sent in every response.
pub const API_VERSION: &str = "1";

type Shared = Arc<AppState>;
type Reply = Result<Response, ApiError>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/queries", post(submit_query))
        .route("/sessions/{id}/close", post(close_session))
        .route("/sessions/{id}/report", get(get_report))
        .route("/sessions/{id}/suite", get(get_suite))
        .route("/registry/{domain}", get(get_registry))
        .route("/aggregate/{version}", get(get_aggregate))
        .route("/admin/models", post(register_model))
        .route("/admin/models/{version}/purge", post(purge_model))
        .route("/admin/decisions", post(register_decision))
        .route("/admin/retention", post(retention_sweep))
        .route("/requests", get(list_requests))
        .route("/requests/{id}/resolve", post(resolve_request))
        .route("/audit/verify", get(verify_audit))
        .route("/audit/anomalies", get(anomalies))
        .layer(middleware::map_response(version_header))
        .with_state(state)
}

async fn version_header(mut res: Response) -> Response {
    res.headers_mut()
        .insert("x-api-version", HeaderValue::from_static(API_VERSION));
    res
}

async fn blocking<T, F>(state: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

fn reply<T: Serialize>(status: StatusCode, value: &T) -> Reply {
    Ok((status, Json(value)).into_response())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "api_version": API_VERSION }))
}

async fn open_session(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::OpenSession)?;
        s.sweep_deadlines()?;
        match s.open_session(&caller, parse(&body)?)? {
            OpenOutcome::Opened(session) => reply(StatusCode::CREATED, &session),
            OpenOutcome::Queued(request) => reply(StatusCode::ACCEPTED, &request),
        }
    })
    .await
}

async fn get_session(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::GetSession)?;
        reply(StatusCode::OK, &s.get_session(&caller, &id)?)
    })
    .await
}

async fn submit_query(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::SubmitQuery)?;
        let outcome = s.submit_query(&caller, &id, parse(&body)?)?;
        let status = if outcome.cached { StatusCode::OK } else { StatusCode::CREATED };
        reply(status, &outcome)
    })
    .await
}

async fn close_session(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::CloseSession)?;
        reply(StatusCode::OK, &s.close_session(&caller, &id)?)
    })
    .await
}

async fn get_report(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::GetReport)?;
        let body = s.report_json(&caller, &id)?;
        Ok(([(CONTENT_TYPE, "application/json")], body).into_response())
    })
    .await
}

async fn get_suite(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::GetSuite)?;
        reply(StatusCode::OK, &s.suite(&caller, &id)?)
    })
    .await
}

async fn get_registry(State(s): State<Shared>, headers: HeaderMap, Path(domain): Path<String>) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::GetRegistry)?;
        let (digest, registry) = s.registry(&domain)?;
        reply(StatusCode::OK, &json!({ "digest": digest, "registry": registry }))
    })
    .await
}

async fn get_aggregate(
    State(s): State<Shared>,
    headers: HeaderMap,
    Path(version): Path<String>,
    Query(params): Query<BTreeMap<String, String>>,
) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::GetAggregate)?;
        reply(StatusCode::OK, &s.aggregate(&version, params.get("group_by").map(String::as_str))?)
    })
    .await
}

async fn register_model(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::RegisterModel)?;
        let version_id = s.register_model(parse(&body)?)?;
        reply(StatusCode::CREATED, &json!({ "version_id": version_id }))
    })
    .await
}

async fn purge_model(State(s): State<Shared>, headers: HeaderMap, Path(version): Path<String>) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::PurgeModel)?;
        reply(StatusCode::OK, &s.purge_model(&version)?)
    })
    .await
}

async fn register_decision(State(s): State<Shared>, headers: HeaderMap, body: Bytes) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::RegisterDecision)?;
        let decision = s.register_decision(parse(&body)?)?;
        reply(StatusCode::CREATED, decision.as_ref())
    })
    .await
}

async fn retention_sweep(State(s): State<Shared>, headers: HeaderMap) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::RetentionSweep)?;
        reply(StatusCode::OK, &s.retention_sweep()?)
    })
    .await
}

async fn list_requests(State(s): State<Shared>, headers: HeaderMap) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::ListRequests)?;
        reply(StatusCode::OK, &s.list_requests(&caller)?)
    })
    .await
}

async fn resolve_request(State(s): State<Shared>, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Reply {
    blocking(s, move |s| {
        let caller = s.caller(&headers, Route::ResolveRequest)?;
        reply(StatusCode::OK, &s.resolve_request(&caller, &id, parse(&body)?)?)
    })
    .await
}

async fn verify_audit(State(s): State<Shared>, headers: HeaderMap) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::VerifyAudit)?;
        let report = s.verify_audit()?;
        reply(StatusCode::OK, &json!({ "ok": report.ok(), "report": report }))
    })
    .await
}

async fn anomalies(
    State(s): State<Shared>,
    headers: HeaderMap,
    Query(params): Query<BTreeMap<String, String>>,
) -> Reply {
    blocking(s, move |s| {
        s.caller(&headers, Route::Anomalies)?;
        let k = match params.get("k") {
            Some(k) => Some(k.parse().map_err(|_| ApiError::bad_request("k must be an integer"))?),
            None => None,
        };
        reply(StatusCode::OK, &json!({ "flags": s.anomalies(k)? }))
    })
    .await
}
