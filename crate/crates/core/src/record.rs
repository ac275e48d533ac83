//! Applicant feature records and decision domains.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{self, Digest};

/// Decision domains a model can be deployed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Employment,
    Credit,
    Housing,
    Healthcare,
    CriminalJustice,
    ContentModeration,
    Insurance,
    Education,
    Recommendation,
    Advertising,
    FraudDetection,
}

impl Domain {
    pub const ALL: [Domain; 11] = [
        Domain::Employment,
        Domain::Credit,
        Domain::Housing,
        Domain::Healthcare,
        Domain::CriminalJustice,
        Domain::ContentModeration,
        Domain::Insurance,
        Domain::Education,
        Domain::Recommendation,
        Domain::Advertising,
        Domain::FraudDetection,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Employment => "employment",
            Domain::Credit => "credit",
            Domain::Housing => "housing",
            Domain::Healthcare => "healthcare",
            Domain::CriminalJustice => "criminal_justice",
            Domain::ContentModeration => "content_moderation",
            Domain::Insurance => "insurance",
            Domain::Education => "education",
            Domain::Recommendation => "recommendation",
            Domain::Advertising => "advertising",
            Domain::FraudDetection => "fraud_detection",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown domain `{0}`")]
pub struct UnknownDomain(pub String);

impl FromStr for Domain {
    type Err = UnknownDomain;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| UnknownDomain(s.to_string()))
    }
}

/// A single feature value.
///
/// Serialized externally tagged so that free text and categorical tokens stay
/// distinguishable on the wire: `{"text": "..."}`, `{"number": 1991}`,
/// `{"date": "1991-06-01"}`, `{"category": "F"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureValue {
    Text(String),
    Number(f64),
    Date(NaiveDate),
    Category(String),
}

impl FeatureValue {
    pub fn kind(&self) -> &'static str {
        match self {
            FeatureValue::Text(_) => "text",
            FeatureValue::Number(_) => "number",
            FeatureValue::Date(_) => "date",
            FeatureValue::Category(_) => "category",
        }
    }

    /// Normalized textual form used for digests and display.
    ///
    /// Numbers use the shortest round-trip decimal, dates ISO-8601.
    pub fn normalized(&self) -> String {
        match self {
            FeatureValue::Text(s) | FeatureValue::Category(s) => s.clone(),
            FeatureValue::Number(n) => canonical::format_number(*n),
            FeatureValue::Date(d) => d.format("%Y-%m-%d").to_string(),
        }
    }

    /// Numeric view used by linear scorers. Dates map to days since 1970-01-01.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(n) => Some(*n),
            FeatureValue::Date(d) => {
                let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
                Some((*d - epoch).num_days() as f64)
            }
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            FeatureValue::Text(s) | FeatureValue::Category(s) => Some(s),
            _ => None,
        }
    }

    pub fn year(&self) -> Option<i32> {
        match self {
            FeatureValue::Date(d) => Some(d.year()),
            _ => None,
        }
    }

    /// Equality on normalized form, so `Number(1991.0)` and a re-parsed copy agree.
    pub fn same_as(&self, other: &FeatureValue) -> bool {
        self.kind() == other.kind() && self.normalized() == other.normalized()
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.normalized())
    }
}

/// The applicant's input to the decision model.
///
/// Feature names are unique by construction (ordered map keyed by name).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub record_id: String,
    pub domain: Domain,
    pub features: BTreeMap<String, FeatureValue>,
}

impl FeatureRecord {
    pub fn new(record_id: impl Into<String>, domain: Domain) -> Self {
        Self {
            record_id: record_id.into(),
            domain,
            features: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: impl Into<String>, value: FeatureValue) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.features.get(name)
    }

    /// Canonical form of the feature set: names sorted, values normalized.
    /// `record_id` and `domain` are excluded so lookups depend only on content.
    pub fn canonical_features(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .features
            .iter()
            .map(|(name, value)| {
                let mut tagged = serde_json::Map::new();
                tagged.insert(
                    value.kind().to_string(),
                    serde_json::Value::String(value.normalized()),
                );
                (name.clone(), serde_json::Value::Object(tagged))
            })
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn digest(&self) -> Digest {
        canonical::digest_value(&self.canonical_features())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_round_trips_through_str() {
        for d in Domain::ALL {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
        }
        assert!("astrology".parse::<Domain>().is_err());
    }

    #[test]
    fn digest_ignores_record_id_and_number_spelling() {
        let a = FeatureRecord::new("a", Domain::Employment)
            .with("grad_year", FeatureValue::Number(1991.0))
            .with("name", FeatureValue::Text("Maria Gonzalez".into()));
        let b = FeatureRecord::new("b", Domain::Employment)
            .with("name", FeatureValue::Text("Maria Gonzalez".into()))
            .with("grad_year", FeatureValue::Number(1991.000));
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn text_and_category_digest_differently() {
        let a = FeatureRecord::new("a", Domain::Housing).with("x", FeatureValue::Text("F".into()));
        let b = FeatureRecord::new("a", Domain::Housing).with("x", FeatureValue::Category("F".into()));
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn dates_normalize_to_iso() {
        let v = FeatureValue::Date(NaiveDate::from_ymd_opt(1991, 6, 1).unwrap());
        assert_eq!(v.normalized(), "1991-06-01");
        assert_eq!(v.as_number(), Some(7821.0));
    }
}
