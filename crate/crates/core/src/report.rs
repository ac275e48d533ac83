//! Divergence reports: findings, per-query magnitudes, and plain-language
//! explanations rendered from locale templates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{format_number, round_to, to_canonical_json};
use crate::divergence::{
    assess_pattern, assess_result, Criterion, Direction, DivergenceConfig, DivergenceError, Finding,
    QueryResult, MAGNITUDE_DECIMALS,
};
use crate::host::{Label, VersionId};
use crate::perturbation::{FeatureKind, PerturbationRegistry};

const EN: &str = include_str!("../templates/en.toml");

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template file: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Plain-language templates for one locale. Placeholders are `{name}`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub summary: String,
    pub summary_item: String,
    pub outcome_crossing: String,
    pub percentile_shift: String,
    pub threshold_proximate: String,
    pub pattern_consistent: String,
    pub pending: String,
    pub change_substitution: String,
    pub change_removal: String,
    pub accept: String,
    pub reject: String,
    pub toward_accept: String,
    pub toward_reject: String,
    pub no_grounds: String,
    pub retry: String,
    pub spoliation: String,
    pub next_steps: String,
    pub kinds: BTreeMap<FeatureKind, String>,
}

impl Templates {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        Ok(toml::from_str(text)?)
    }

    pub fn english() -> Self {
        Self::parse(EN).expect("bundled English templates parse")
    }

    fn label(&self, label: Label) -> &str {
        match label {
            Label::Accept => &self.accept,
            Label::Reject => &self.reject,
        }
    }

    fn direction(&self, d: Direction) -> &str {
        match d {
            Direction::TowardAccept => &self.toward_accept,
            Direction::TowardReject => &self.toward_reject,
        }
    }

    fn kind(&self, k: FeatureKind) -> String {
        self.kinds.get(&k).cloned().unwrap_or_else(|| k.to_string())
    }
}

fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// `23` -> `23rd`; fractional percentiles keep two decimals.
pub fn ordinal(p: f64) -> String {
    let r = round_to(p, 2);
    if r.fract() != 0.0 {
        return format!("{}th", format_number(r));
    }
    let n = r.abs() as u64;
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{}{suffix}", format_number(r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    GroundsFound,
    NoGroundsFound,
}

/// Per-query divergence magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMagnitude {
    pub query_id: String,
    pub class_id: String,
    pub field: String,
    pub factor: String,
    /// Absolute score change.
    pub magnitude: f64,
    pub score_delta: f64,
    pub percentile_delta: f64,
    pub pending_adjudication: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub session_id: String,
    pub model_version: VersionId,
    pub status: ReportStatus,
    pub findings: Vec<Finding>,
    pub queries: Vec<QueryMagnitude>,
    pub plain_language: Vec<String>,
    pub spoliation_flag: bool,
    pub budget_used: u32,
    pub noise_floor: f64,
    pub generated_at: DateTime<Utc>,
}

impl DivergenceReport {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.queries.iter().map(|q| q.magnitude).collect()
    }

    pub fn to_canonical_json(&self) -> String {
        to_canonical_json(self).expect("report serializes")
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let status = match self.status {
            ReportStatus::GroundsFound => "grounds found",
            ReportStatus::NoGroundsFound => "no grounds found",
        };
        let _ = writeln!(out, "Divergence report for session {}", self.session_id);
        let _ = writeln!(out, "Model version: {}", self.model_version);
        let _ = writeln!(out, "Generated: {}", self.generated_at.to_rfc3339());
        let _ = writeln!(out, "Status: {status}");
        let _ = writeln!(out, "Queries used: {}", self.budget_used);
        if self.spoliation_flag {
            let _ = writeln!(out, "Spoliation: decision-time model version not retained");
        }
        out.push('\n');
        for line in &self.plain_language {
            let _ = writeln!(out, "{line}");
        }
        if !self.queries.is_empty() {
            let _ = writeln!(out, "\nQueries:");
            for q in &self.queries {
                let _ = writeln!(
                    out,
                    "  {}  {}  score {}  percentile {}{}",
                    q.query_id,
                    q.factor,
                    format_number(q.score_delta),
                    format_number(q.percentile_delta),
                    if q.pending_adjudication { "  (pending adjudication)" } else { "" },
                );
            }
        }
        if !self.findings.is_empty() {
            let _ = writeln!(out, "\nFindings:");
            for f in &self.findings {
                let criterion = serde_json::to_value(f.criterion).expect("enum serializes");
                let _ = writeln!(
                    out,
                    "  {}  magnitude {}  [{}]",
                    criterion.as_str().unwrap_or_default(),
                    format_number(f.magnitude),
                    f.supporting_results.join(", "),
                );
            }
        }
        out
    }
}

/// Session facts the report states but does not compute.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub session_id: String,
    pub model_version: VersionId,
    pub spoliation_flag: bool,
    pub budget_used: u32,
    pub generated_at: DateTime<Utc>,
    /// Measured noise floor for stochastic models.
    pub noise_floor_estimate: Option<f64>,
}

fn factor_for(result: &QueryResult, registry: &PerturbationRegistry) -> String {
    match registry.class(&result.instance.class_id) {
        Some(c) => c.label_for(&result.instance.field).to_string(),
        None => result.instance.field.replace('_', " "),
    }
}

fn change_text(result: &QueryResult, factor: &str, t: &Templates) -> String {
    match &result.instance.substituted_value {
        Some(to) => fill(
            &t.change_substitution,
            &[
                ("factor", factor),
                ("from", &result.instance.original_value.normalized()),
                ("to", &to.normalized()),
            ],
        ),
        None => fill(&t.change_removal, &[("factor", factor)]),
    }
}

/// Assemble the report for a set of query results. `cfg` should carry the
/// evaluating version's threshold (see [`DivergenceConfig::for_version`]).
pub fn compile_report(
    ctx: &ReportContext,
    results: &[QueryResult],
    registry: &PerturbationRegistry,
    cfg: &DivergenceConfig,
    templates: &Templates,
) -> Result<DivergenceReport, DivergenceError> {
    cfg.validate()?;
    let noise_floor = cfg.effective_noise_floor(ctx.noise_floor_estimate);
    let mut findings = Vec::new();
    let mut lines = Vec::new();

    for r in results {
        let factor = factor_for(r, registry);
        for f in assess_result(r, cfg)? {
            let change = change_text(r, &factor, templates);
            let mut line = match f.criterion {
                Criterion::OutcomeCrossing => fill(
                    &templates.outcome_crossing,
                    &[
                        ("change", &change),
                        ("from", templates.label(r.baseline.label)),
                        ("to", templates.label(r.perturbed.label)),
                        ("factor", &factor),
                    ],
                ),
                Criterion::PercentileShift | Criterion::ThresholdProximate => {
                    let template = if f.criterion == Criterion::PercentileShift {
                        &templates.percentile_shift
                    } else {
                        &templates.threshold_proximate
                    };
                    fill(
                        template,
                        &[
                            ("change", &change),
                            ("from", &ordinal(r.baseline.percentile)),
                            ("to", &ordinal(r.perturbed.percentile)),
                            ("points", &format_number(round_to(f.magnitude, 2))),
                            ("factor", &factor),
                        ],
                    )
                }
                Criterion::PatternConsistent => unreachable!("single-pair assessment"),
            };
            if f.pending_adjudication {
                line.push(' ');
                line.push_str(&templates.pending);
            }
            lines.push(line);
            findings.push(f);
        }
    }

    let registered: Vec<QueryResult> = results
        .iter()
        .filter(|r| registry.class(&r.instance.class_id).is_some())
        .cloned()
        .collect();
    for f in assess_pattern(&registered, registry, cfg, noise_floor)? {
        let kind = templates.kind(f.kind.expect("pattern findings carry a kind"));
        let mut line = fill(
            &templates.pattern_consistent,
            &[
                ("count", &f.supporting_results.len().to_string()),
                ("kind", &kind),
                ("direction", templates.direction(f.direction)),
                ("points", &format_number(round_to(f.magnitude, 2))),
            ],
        );
        if f.pending_adjudication {
            line.push(' ');
            line.push_str(&templates.pending);
        }
        lines.push(line);
        findings.push(f);
    }

    let supporting: BTreeSet<&str> = findings
        .iter()
        .flat_map(|f| f.supporting_results.iter().map(String::as_str))
        .collect();
    let queries: Vec<QueryMagnitude> = results
        .iter()
        .map(|r| QueryMagnitude {
            query_id: r.query_id.clone(),
            class_id: r.instance.class_id.clone(),
            field: r.instance.field.clone(),
            factor: factor_for(r, registry),
            magnitude: round_to(r.score_delta().abs(), MAGNITUDE_DECIMALS),
            score_delta: round_to(r.score_delta(), MAGNITUDE_DECIMALS),
            percentile_delta: round_to(r.percentile_delta(), MAGNITUDE_DECIMALS),
            pending_adjudication: r.pending_adjudication(),
        })
        .collect();

    let mut plain_language = Vec::new();
    let status = if findings.is_empty() {
        plain_language.push(templates.no_grounds.clone());
        plain_language.push(templates.retry.clone());
        ReportStatus::NoGroundsFound
    } else {
        let items: Vec<String> = queries
            .iter()
            .filter(|q| supporting.contains(q.query_id.as_str()))
            .map(|q| {
                fill(
                    &templates.summary_item,
                    &[("factor", &q.factor), ("magnitude", &format!("{:.2}", q.magnitude))],
                )
            })
            .collect();
        plain_language.push(fill(&templates.summary, &[("items", &capitalize(&items.join(", ")))]));
        plain_language.extend(lines);
        ReportStatus::GroundsFound
    };
    if ctx.spoliation_flag {
        plain_language.push(templates.spoliation.clone());
    }
    plain_language.push(templates.next_steps.clone());

    Ok(DivergenceReport {
        session_id: ctx.session_id.clone(),
        model_version: ctx.model_version.clone(),
        status,
        findings,
        queries,
        plain_language,
        spoliation_flag: ctx.spoliation_flag,
        budget_used: ctx.budget_used,
        noise_floor,
        generated_at: ctx.generated_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{builtin_host, maria_record};
    use crate::perturbation::{apply, load_registry, InstanceStatus, PerturbationInstance};
    use crate::record::{Domain, FeatureValue};

    fn now() -> DateTime<Utc> {
        "2024-03-01T00:00:00Z".parse().unwrap()
    }

    fn maria_results() -> (Vec<QueryResult>, DivergenceConfig) {
        let host = builtin_host(now()).unwrap();
        let v = host.get(&"maria-screen@1".into()).unwrap();
        let rec = maria_record();
        let base = v.evaluate(&rec, now()).unwrap();
        let cases = [
            ("employment.date_reformatting", "grad_year", FeatureValue::Number(2011.0)),
            ("employment.name_variation", "name", FeatureValue::Text("Michael Gordon".into())),
            ("employment.experience_framing", "experience", FeatureValue::Text("extensive full-stack".into())),
            ("employment.terminology_update", "skills", FeatureValue::Text("Spring Boot, REST".into())),
        ];
        let results = cases
            .into_iter()
            .enumerate()
            .map(|(i, (class, field, value))| {
                let instance = PerturbationInstance {
                    instance_id: format!("p{i}"),
                    class_id: class.into(),
                    field: field.into(),
                    original_value: rec.get(field).unwrap().clone(),
                    substituted_value: Some(value),
                    status: InstanceStatus::Accepted,
                };
                let perturbed = v.evaluate(&apply(&rec, &instance).unwrap(), now()).unwrap();
                QueryResult {
                    query_id: format!("q{}", i + 1),
                    instance,
                    baseline: base.clone(),
                    perturbed,
                }
            })
            .collect();
        (results, DivergenceConfig::default().for_version(&v))
    }

    fn ctx() -> ReportContext {
        ReportContext {
            session_id: "s1".into(),
            model_version: "maria-screen@1".into(),
            spoliation_flag: false,
            budget_used: 4,
            generated_at: now(),
            noise_floor_estimate: None,
        }
    }

    #[test]
    fn maria_summary_line() {
        let (results, cfg) = maria_results();
        let reg = load_registry(Domain::Employment);
        let report = compile_report(&ctx(), &results, reg, &cfg, &Templates::english()).unwrap();
        assert_eq!(report.magnitudes(), vec![0.29, 0.16, 0.22, 0.27]);
        assert_eq!(
            report.plain_language[0],
            "Significant divergence detected. Graduation year [0.29], name [0.16], framing [0.22], \
             terminology [0.27]. Assessment may be sensitive to factors unrelated to qualifications."
        );
        assert_eq!(report.status, ReportStatus::GroundsFound);
        assert!(report.plain_language.last().unwrap().starts_with("Next steps"));
    }

    #[test]
    fn crossing_line_names_change_and_outcomes() {
        let (results, cfg) = maria_results();
        let reg = load_registry(Domain::Employment);
        let report = compile_report(&ctx(), &results, reg, &cfg, &Templates::english()).unwrap();
        assert_eq!(
            report.plain_language[1],
            "When we tested your application with graduation year \"2011\" instead of \"1991\", the \
             outcome changed from denied to approved. This suggests that graduation year may have \
             affected your decision."
        );
    }

    #[test]
    fn empty_session_reports_no_grounds() {
        let reg = load_registry(Domain::Employment);
        let mut c = ctx();
        c.budget_used = 0;
        c.spoliation_flag = true;
        let report = compile_report(&c, &[], reg, &DivergenceConfig::default(), &Templates::english()).unwrap();
        assert_eq!(report.status, ReportStatus::NoGroundsFound);
        assert!(report.findings.is_empty());
        assert!(report.plain_language[0].starts_with("No grounds found"));
        assert!(report.plain_language.iter().any(|l| l.contains("not retained")));
        assert!(report.plain_language.last().unwrap().starts_with("Next steps"));
    }

    #[test]
    fn canonical_json_round_trips() {
        let (results, cfg) = maria_results();
        let reg = load_registry(Domain::Employment);
        let report = compile_report(&ctx(), &results, reg, &cfg, &Templates::english()).unwrap();
        let json = report.to_canonical_json();
        let back: DivergenceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.to_canonical_json(), json);
        assert!(report.render_text().contains("Graduation year [0.29]"));
    }

    #[test]
    fn unregistered_custom_class_skips_pattern_but_reports() {
        let (mut results, cfg) = maria_results();
        results[1].instance.class_id = "custom.name_swap".into();
        results[1].instance.status = InstanceStatus::CustomPending;
        let reg = load_registry(Domain::Employment);
        let report = compile_report(&ctx(), &results, reg, &cfg, &Templates::english()).unwrap();
        assert!(report.queries[1].pending_adjudication);
        assert!(report.findings.iter().any(|f| f.pending_adjudication));
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinal(1.0), "1st");
        assert_eq!(ordinal(22.0), "22nd");
        assert_eq!(ordinal(23.0), "23rd");
        assert_eq!(ordinal(11.0), "11th");
        assert_eq!(ordinal(41.0), "41st");
        assert_eq!(ordinal(200.0 / 3.0), "66.67th");
    }

    #[test]
    fn every_kind_has_an_english_label() {
        let t = Templates::english();
        for k in [
            FeatureKind::Name,
            FeatureKind::Date,
            FeatureKind::Terminology,
            FeatureKind::Framing,
            FeatureKind::Address,
            FeatureKind::IncomePresentation,
            FeatureKind::SymptomSynonym,
            FeatureKind::Register,
            FeatureKind::RecordPresence,
        ] {
            assert!(t.kinds.contains_key(&k), "{k}");
        }
    }
}
