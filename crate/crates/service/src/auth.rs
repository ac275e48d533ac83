//! Bearer-token authentication and the route authorization table.

use std::collections::HashMap;

use axum::http::header::AUTHORIZATION;
use axum::http::HeaderMap;
use interrogate_core::access::Role;

use crate::config::Credential;
use crate::error::ApiError;

/// Every route the service exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Route {
    OpenSession,
    GetSession,
    SubmitQuery,
    CloseSession,
    GetReport,
    GetSuite,
    GetRegistry,
    GetAggregate,
    RegisterModel,
    PurgeModel,
    RegisterDecision,
    RetentionSweep,
    ListRequests,
    ResolveRequest,
    VerifyAudit,
    Anomalies,
}

impl Route {
    pub const ALL: [Route; 16] = [
        Route::OpenSession,
        Route::GetSession,
        Route::SubmitQuery,
        Route::CloseSession,
        Route::GetReport,
        Route::GetSuite,
        Route::GetRegistry,
        Route::GetAggregate,
        Route::RegisterModel,
        Route::PurgeModel,
        Route::RegisterDecision,
        Route::RetentionSweep,
        Route::ListRequests,
        Route::ResolveRequest,
        Route::VerifyAudit,
        Route::Anomalies,
    ];
}

/// The allow/deny table. Session routes additionally require the caller to
/// be a party to the session; that check happens in the handler.
pub fn permits(route: Route, role: Role) -> bool {
    use Role::*;
    use Route::*;
    match route {
        OpenSession | GetSession | SubmitQuery | CloseSession | GetReport | GetSuite => {
            matches!(role, AffectedParty | AuthorizedRepresentative | Regulator)
        }
        GetRegistry | GetAggregate => true,
        RegisterModel | PurgeModel | RegisterDecision | RetentionSweep => role == OrganizationAdmin,
        ListRequests => matches!(role, AuthorizedRepresentative | Regulator | OrganizationAdmin),
        ResolveRequest => role == AuthorizedRepresentative,
        VerifyAudit | Anomalies => role == Regulator,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Caller {
    pub role: Role,
    pub principal: String,
}

impl Caller {
    pub fn require(&self, route: Route) -> Result<(), ApiError> {
        if permits(route, self.role) {
            Ok(())
        } else {
            Err(ApiError::forbidden(format!("role {} may not use this route", self.role)))
        }
    }
}

#[derive(Debug, Default)]
pub struct Credentials(HashMap<String, Caller>);

impl Credentials {
    pub fn new(list: &[Credential]) -> Self {
        Self(
            list.iter()
                .map(|c| {
                    (
                        c.token.clone(),
                        Caller {
                            role: c.role,
                            principal: c.principal.clone(),
                        },
                    )
                })
                .collect(),
        )
    }

    pub fn authenticate(&self, headers: &HeaderMap) -> Result<Caller, ApiError> {
        let token = headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or_else(ApiError::unauthenticated)?;
        self.0.get(token.trim()).cloned().ok_or_else(ApiError::unauthenticated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::http::HeaderValue;

    #[test]
    fn admin_routes_are_admin_only() {
        for role in Role::ALL {
            assert_eq!(permits(Route::RegisterModel, role), role == Role::OrganizationAdmin);
            assert_eq!(permits(Route::VerifyAudit, role), role == Role::Regulator);
            assert!(permits(Route::GetAggregate, role));
        }
        assert!(!permits(Route::OpenSession, Role::OrganizationAdmin));
    }

    #[test]
    fn bearer_tokens_resolve_to_callers() {
        let creds = Credentials::new(&[Credential {
            token: "abc".into(),
            role: Role::Regulator,
            principal: "agency".into(),
        }]);
        let mut h = HeaderMap::new();
        assert!(creds.authenticate(&h).is_err());
        h.insert(AUTHORIZATION, HeaderValue::from_static("Bearer nope"));
        assert!(creds.authenticate(&h).is_err());
        h.insert(AUTHORIZATION, HeaderValue::from_static("Bearer abc"));
        assert_eq!(creds.authenticate(&h).unwrap().principal, "agency");
    }
}
