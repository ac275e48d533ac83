//! Access tiers: who may interrogate which domain, and how.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::Domain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AffectedParty,
    AuthorizedRepresentative,
    Regulator,
    OrganizationAdmin,
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::AffectedParty,
        Role::AuthorizedRepresentative,
        Role::Regulator,
        Role::OrganizationAdmin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::AffectedParty => "affected_party",
            Role::AuthorizedRepresentative => "authorized_representative",
            Role::Regulator => "regulator",
            Role::OrganizationAdmin => "organization_admin",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown role `{0}`")]
pub struct UnknownRole(pub String);

impl FromStr for Role {
    type Err = UnknownRole;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Individual interrogation rights.
    Direct,
    /// Mediated or representative access.
    Mediated,
    /// Aggregate disclosure only.
    Aggregate,
    /// Access after a delay that protects the system's purpose.
    TimeDelayed,
}

impl Tier {
    pub fn of(domain: Domain) -> Tier {
        match domain {
            Domain::CriminalJustice | Domain::Healthcare | Domain::Employment | Domain::Housing | Domain::Credit => {
                Tier::Direct
            }
            Domain::ContentModeration | Domain::Insurance | Domain::Education => Tier::Mediated,
            Domain::Recommendation | Domain::Advertising => Tier::Aggregate,
            Domain::FraudDetection => Tier::TimeDelayed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AccessMode {
    Direct,
    /// Requests are queued for an organization intermediary.
    Mediated,
    AggregateOnly,
    /// No individual access before `until`.
    Delayed { until: DateTime<Utc> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TierPolicy {
    /// Delay before time-delayed domains open to individual requests.
    pub delay_hours: i64,
    /// Deadline for answering a queued (mediated or delayed) request.
    pub response_deadline_hours: i64,
    /// Per-domain replacements for the built-in tier table.
    pub overrides: BTreeMap<Domain, Tier>,
}

impl Default for TierPolicy {
    fn default() -> Self {
        Self {
            delay_hours: 48,
            response_deadline_hours: 48,
            overrides: BTreeMap::new(),
        }
    }
}

impl TierPolicy {
    pub fn tier_of(&self, domain: Domain) -> Tier {
        self.overrides.get(&domain).copied().unwrap_or_else(|| Tier::of(domain))
    }

    pub fn delay(&self) -> Duration {
        Duration::hours(self.delay_hours)
    }

    pub fn response_deadline(&self) -> Duration {
        Duration::hours(self.response_deadline_hours)
    }

    /// Access mode for `role` on a decision in `domain` made at `decided_at`.
    /// Regulators always get direct access; organization admins only see
    /// aggregates.
    pub fn enforce_tier(&self, role: Role, domain: Domain, decided_at: DateTime<Utc>, now: DateTime<Utc>) -> AccessMode {
        match role {
            Role::Regulator => return AccessMode::Direct,
            Role::OrganizationAdmin => return AccessMode::AggregateOnly,
            Role::AffectedParty | Role::AuthorizedRepresentative => {}
        }
        let representative = role == Role::AuthorizedRepresentative;
        match self.tier_of(domain) {
            Tier::Direct => AccessMode::Direct,
            Tier::Mediated if representative => AccessMode::Direct,
            Tier::Mediated => AccessMode::Mediated,
            Tier::Aggregate => AccessMode::AggregateOnly,
            Tier::TimeDelayed => {
                let until = decided_at + self.delay();
                if now < until {
                    AccessMode::Delayed { until }
                } else if representative {
                    AccessMode::Direct
                } else {
                    AccessMode::Mediated
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> DateTime<Utc> {
        s.parse().unwrap()
    }

    #[test]
    fn tier_examples() {
        let p = TierPolicy::default();
        let d = t("2024-01-01T00:00:00Z");
        assert_eq!(p.enforce_tier(Role::AffectedParty, Domain::Credit, d, d), AccessMode::Direct);
        assert_eq!(
            p.enforce_tier(Role::AffectedParty, Domain::Recommendation, d, d),
            AccessMode::AggregateOnly
        );
        assert_eq!(p.enforce_tier(Role::Regulator, Domain::Recommendation, d, d), AccessMode::Direct);
        assert_eq!(p.enforce_tier(Role::AffectedParty, Domain::Insurance, d, d), AccessMode::Mediated);
        assert_eq!(
            p.enforce_tier(Role::AuthorizedRepresentative, Domain::Insurance, d, d),
            AccessMode::Direct
        );
        assert_eq!(
            p.enforce_tier(Role::OrganizationAdmin, Domain::Employment, d, d),
            AccessMode::AggregateOnly
        );
    }

    #[test]
    fn fraud_detection_opens_after_delay() {
        let p = TierPolicy::default();
        let d = t("2024-01-01T00:00:00Z");
        let until = t("2024-01-03T00:00:00Z");
        assert_eq!(
            p.enforce_tier(Role::AffectedParty, Domain::FraudDetection, d, t("2024-01-02T23:59:59Z")),
            AccessMode::Delayed { until }
        );
        assert_eq!(
            p.enforce_tier(Role::AffectedParty, Domain::FraudDetection, d, until),
            AccessMode::Mediated
        );
        assert_eq!(
            p.enforce_tier(Role::AuthorizedRepresentative, Domain::FraudDetection, d, until),
            AccessMode::Direct
        );
    }

    #[test]
    fn overrides_replace_the_table() {
        let mut p = TierPolicy::default();
        p.overrides.insert(Domain::Insurance, Tier::Direct);
        let d = t("2024-01-01T00:00:00Z");
        assert_eq!(p.enforce_tier(Role::AffectedParty, Domain::Insurance, d, d), AccessMode::Direct);
    }

    #[test]
    fn every_domain_has_a_tier() {
        let p = TierPolicy::default();
        let d = t("2024-01-01T00:00:00Z");
        for domain in Domain::ALL {
            for role in Role::ALL {
                let _ = p.enforce_tier(role, domain, d, d);
            }
            assert_eq!(p.enforce_tier(Role::Regulator, domain, d, d), AccessMode::Direct);
        }
        for r in Role::ALL {
            assert_eq!(r.as_str().parse::<Role>().unwrap(), r);
        }
    }
}
