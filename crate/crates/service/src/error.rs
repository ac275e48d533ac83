//! The error envelope every route returns on failure.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use interrogate_core::aggregate::AggregateError;
use interrogate_core::audit::AuditError;
use interrogate_core::host::HostError;
use interrogate_core::perturbation::PerturbationError;
use interrogate_core::session::SessionError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
                retriable: false,
            },
        }
    }

    pub fn retriable(mut self) -> Self {
        self.body.retriable = true;
        self
    }

    pub fn unauthenticated() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "Unauthenticated", "missing or unknown bearer token")
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        Self::new(StatusCode::FORBIDDEN, "Forbidden", message)
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "BadRequest", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message).retriable()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<HostError> for ApiError {
    fn from(e: HostError) -> Self {
        let msg = e.to_string();
        match e {
            HostError::UnknownVersion(_) => Self::new(StatusCode::NOT_FOUND, "UnknownVersion", msg),
            HostError::Spoliation(_) => Self::new(StatusCode::CONFLICT, "Spoliation", msg),
            HostError::DuplicateVersion(_) => Self::new(StatusCode::CONFLICT, "DuplicateVersion", msg),
            HostError::NotInFixture(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "NotScorable", msg),
            HostError::Io(_) => Self::internal(msg),
            HostError::EmptyPopulation
            | HostError::InvalidPopulationScore(_)
            | HostError::InvalidThreshold(_)
            | HostError::NonFiniteScore
            | HostError::Descriptor(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidModel", msg),
        }
    }
}

impl From<PerturbationError> for ApiError {
    fn from(e: PerturbationError) -> Self {
        let code = match e {
            PerturbationError::StaleInstance { .. } => "StaleInstance",
            _ => "InvalidPerturbation",
        };
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "AuditUnavailable", e.to_string()).retriable()
    }
}

impl From<AggregateError> for ApiError {
    fn from(e: AggregateError) -> Self {
        let msg = e.to_string();
        match e {
            AggregateError::Host(h) => h.into(),
            AggregateError::UnknownFeature(_) | AggregateError::NotCategorical(_) => {
                Self::new(StatusCode::BAD_REQUEST, "InvalidGroupBy", msg)
            }
            AggregateError::NoRecords => Self::new(StatusCode::NOT_FOUND, "NoDisclosureRecords", msg),
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let msg = e.to_string();
        match e {
            SessionError::NotAdverse(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "NotAdverse", msg),
            SessionError::WindowExpired { .. } => Self::new(StatusCode::GONE, "WindowExpired", msg),
            SessionError::DuplicateSession(_) => Self::new(StatusCode::CONFLICT, "DuplicateSession", msg),
            SessionError::UnknownDecision(_) => Self::new(StatusCode::NOT_FOUND, "UnknownDecision", msg),
            SessionError::DuplicateDecision(_) => Self::new(StatusCode::CONFLICT, "DuplicateDecision", msg),
            SessionError::UnknownSession(_) => Self::new(StatusCode::NOT_FOUND, "UnknownSession", msg),
            SessionError::BudgetExhausted { .. } => Self::new(StatusCode::CONFLICT, "BudgetExhausted", msg),
            SessionError::CrossAppLimitExceeded { .. } => {
                Self::new(StatusCode::TOO_MANY_REQUESTS, "CrossAppLimitExceeded", msg).retriable()
            }
            SessionError::SessionClosed(_) => Self::new(StatusCode::CONFLICT, "SessionClosed", msg),
            SessionError::InvalidId(_) => Self::new(StatusCode::BAD_REQUEST, "InvalidId", msg),
            SessionError::DomainMismatch { .. } => Self::new(StatusCode::BAD_REQUEST, "DomainMismatch", msg),
            SessionError::Perturbation(p) => p.into(),
            SessionError::Host(h) => h.into(),
            SessionError::Divergence(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidDivergenceInput", msg),
            SessionError::Audit(a) => a.into(),
            SessionError::Journal(_) => Self::internal(msg),
        }
    }
}
