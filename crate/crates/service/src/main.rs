use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use interrogate_service::config::DATA_DIR_ENV;
use interrogate_service::{router, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "interrogate-service", about = "Counterfactual interrogation service")]
struct Args {
    /// Service config file (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() {
    if let Err(e) = run(Args::parse()).await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

async fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let config = match &args.config {
        Some(path) => ServiceConfig::load(path)?,
        None => ServiceConfig::default(),
    }
    .with_data_dir_override(std::env::var(DATA_DIR_ENV).ok());
    if config.credentials.is_empty() {
        eprintln!("warning: no credentials configured; every route except /health will refuse requests");
    }
    let listen = config.listen;
    let clock = AppState::clock_for(config.clock);
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::open(config, clock)).await??);

    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let s = sweeper.clone();
            if let Ok(Err(e)) = tokio::task::spawn_blocking(move || s.sweep_deadlines()).await {
                eprintln!("deadline sweep failed: {}", e.body.message);
            }
        }
    });

    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on {listen}");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
