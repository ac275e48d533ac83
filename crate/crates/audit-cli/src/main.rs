//! Regulator audit tool: unannounced non-standard probes and suite-tuning
//! detection, run outside any session budget.

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use interrogate_core::access::Role;
use interrogate_core::audit::AuditLedger;
use interrogate_core::divergence::DivergenceConfig;
use interrogate_core::fixtures::builtin_specs;
use interrogate_core::host::{load_descriptor, ModelHost, VersionId};
use interrogate_core::record::Domain;
use interrogate_core::regulator::{audit_run, suite_tuning_probe, AuditParams, TuningVerdict};

const EXIT_ERROR: u8 = 1;
const EXIT_SUITE_TUNED: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "audit", about = "Regulator audits of hosted decision models")]
struct Cli {
    /// Caller role; only `regulator` may run audits.
    #[arg(long, env = "AUDIT_ROLE")]
    role: Role,
    /// Directory of model descriptors (`*.toml`) to load.
    #[arg(long)]
    models: Option<PathBuf>,
    /// Skip the bundled fixture models.
    #[arg(long)]
    no_builtin: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run seeded non-standard probes and report divergence findings.
    Run {
        #[command(flatten)]
        target: Target,
        /// Number of probes to draw.
        #[arg(long)]
        probes: usize,
        /// Append every probe to this audit ledger.
        #[arg(long)]
        ledger: Option<PathBuf>,
    },
    /// Compare default-suite and non-standard probes for signs of suite tuning.
    Tuning {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long)]
    version: String,
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    seed: u64,
    /// Evaluation timestamp; defaults to the version's creation time.
    #[arg(long)]
    as_of: Option<DateTime<Utc>>,
    /// Use the domain's percentile-shift preset instead of the default.
    #[arg(long)]
    domain_preset: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}

fn load_host(cli: &Cli, now: DateTime<Utc>) -> Result<ModelHost, Box<dyn std::error::Error>> {
    let host = ModelHost::new();
    if !cli.no_builtin {
        for spec in builtin_specs() {
            host.register_version(spec, now)?;
        }
    }
    if let Some(dir) = &cli.models {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e == "toml"));
        paths.sort();
        for path in paths {
            let spec = load_descriptor(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            host.register_version(spec, now)?;
        }
    }
    Ok(host)
}

fn params(host: &ModelHost, t: &Target) -> Result<AuditParams, Box<dyn std::error::Error>> {
    let version = VersionId(t.version.clone());
    let as_of = match t.as_of {
        Some(at) => at,
        None => host.get(&version)?.created_at,
    };
    let divergence = if t.domain_preset {
        DivergenceConfig::preset(t.domain)
    } else {
        DivergenceConfig::default()
    };
    Ok(AuditParams {
        version,
        domain: t.domain,
        seed: t.seed,
        as_of,
        divergence,
    })
}

fn emit(out: &Option<PathBuf>, json: &str) -> std::io::Result<()> {
    match out {
        Some(path) => std::fs::write(path, format!("{json}\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<u8, Box<dyn std::error::Error>> {
    if cli.role != Role::Regulator {
        return Err(format!("role {} may not run audits; regulator credentials are required", cli.role).into());
    }
    // Model clocks only matter for descriptors without a creation time.
    let now = Utc::now();
    let host = load_host(&cli, now)?;
    match &cli.command {
        Command::Run { target, probes, ledger } => {
            let params = params(&host, target)?;
            let ledger = match ledger {
                Some(path) => Some(AuditLedger::open_or_create(path, now)?),
                None => None,
            };
            let report = audit_run(&host, &params, *probes, ledger.as_ref().map(|l| (l, now)))?;
            emit(&target.out, &report.to_canonical_json())?;
            eprintln!(
                "{} probes run, {} findings",
                report.audit.probes_run,
                report.report.findings.len()
            );
            Ok(0)
        }
        Command::Tuning { target } => {
            let params = params(&host, target)?;
            let report = suite_tuning_probe(&host, &params)?;
            emit(&target.out, &report.to_canonical_json())?;
            eprintln!(
                "verdict {:?}: default mean |delta| {}, non-standard mean |delta| {}, margin {}",
                report.verdict, report.default_mean_abs_delta, report.non_standard_mean_abs_delta, report.margin
            );
            Ok(match report.verdict {
                TuningVerdict::Consistent => 0,
                TuningVerdict::SuiteTuned => EXIT_SUITE_TUNED,
            })
        }
    }
}
