//! Aggregate disclosure with small-cell suppression.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::round_to;
use crate::host::{HostError, Label, ModelVersion, VersionId};
use crate::record::FeatureValue;

/// Cells with fewer members than this are suppressed.
pub const MIN_CELL_SIZE: usize = 10;

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("feature `{0}` is not present in the disclosure records")]
    UnknownFeature(String),
    #[error("feature `{0}` is not categorical")]
    NotCategorical(String),
    #[error("version has no disclosure records")]
    NoRecords,
    #[error(transparent)]
    Host(#[from] HostError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub group: String,
    pub suppressed: bool,
    /// Member count; withheld for suppressed cells.
    pub count: Option<usize>,
    pub accept_rate: Option<f64>,
    pub mean_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub version: VersionId,
    pub group_by: String,
    pub min_cell_size: usize,
    pub total: usize,
    pub cells: Vec<Cell>,
}

/// Outcome rates per value of a categorical feature over the version's
/// disclosure records. Records missing the feature fall in the `(missing)` cell.
pub fn aggregate_disclosure(
    version: &ModelVersion,
    group_by: &str,
    now: DateTime<Utc>,
) -> Result<AggregateReport, AggregateError> {
    let records = version.disclosure_records.as_slice();
    if records.is_empty() {
        return Err(AggregateError::NoRecords);
    }
    if !records.iter().any(|r| r.get(group_by).is_some()) {
        return Err(AggregateError::UnknownFeature(group_by.to_string()));
    }
    let mut groups: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    for r in records {
        let key = match r.get(group_by) {
            Some(FeatureValue::Category(c)) => c.clone(),
            Some(_) => return Err(AggregateError::NotCategorical(group_by.to_string())),
            None => "(missing)".to_string(),
        };
        let outcome = version.evaluate(r, now)?;
        let g = groups.entry(key).or_default();
        g.0 += 1;
        if outcome.label == Label::Accept {
            g.1 += 1;
        }
        g.2 += outcome.score;
    }
    let cells = groups
        .into_iter()
        .map(|(group, (count, accepted, total))| {
            if count < MIN_CELL_SIZE {
                Cell {
                    group,
                    suppressed: true,
                    count: None,
                    accept_rate: None,
                    mean_score: None,
                }
            } else {
                Cell {
                    group,
                    suppressed: false,
                    count: Some(count),
                    accept_rate: Some(round_to(accepted as f64 / count as f64, 6)),
                    mean_score: Some(round_to(total / count as f64, 6)),
                }
            }
        })
        .collect();
    Ok(AggregateReport {
        version: version.version_id.clone(),
        group_by: group_by.to_string(),
        min_cell_size: MIN_CELL_SIZE,
        total: records.len(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{builtin_host, tenant_screen};
    use crate::host::ModelHost;

    fn now() -> DateTime<Utc> {
        "2024-03-01T00:00:00Z".parse().unwrap()
    }

    #[test]
    fn tenant_groups_are_disclosed() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&"tenant-screen@1".into()).unwrap();
        let r = aggregate_disclosure(&v, "group", now()).unwrap();
        assert_eq!(r.total, 100);
        assert_eq!(r.cells.len(), 2);
        assert!(r.cells.iter().all(|c| !c.suppressed && c.count == Some(50)));
    }

    #[test]
    fn small_cells_are_suppressed() {
        let mut spec = tenant_screen();
        spec.disclosure_records.truncate(59);
        let host = ModelHost::new();
        let id = host.register_version(spec, now()).unwrap();
        let v = host.get(&id).unwrap();
        let r = aggregate_disclosure(&v, "group", now()).unwrap();
        let b = r.cells.iter().find(|c| c.group == "B").unwrap();
        assert!(b.suppressed);
        assert_eq!((b.count, b.accept_rate), (None, None));
    }

    #[test]
    fn non_categorical_and_unknown_features_error() {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&"tenant-screen@1".into()).unwrap();
        assert!(matches!(
            aggregate_disclosure(&v, "monthly_income", now()),
            Err(AggregateError::NotCategorical(_))
        ));
        assert!(matches!(
            aggregate_disclosure(&v, "zodiac", now()),
            Err(AggregateError::UnknownFeature(_))
        ));
    }
}
