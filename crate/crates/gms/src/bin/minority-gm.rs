//! The three-player Minority Game manager.

use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use xtribe_gms::minority::{MinorityGm, ValueGenerator};
use xtribe_gms::server;

#[derive(Parser)]
#[command(version, about = "Minority Game manager")]
struct Args {
    #[arg(long, default_value_t = 9002)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Comma-separated amounts v1 is drawn from.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,50,100")]
    values_set: Vec<f64>,
    /// v2 = ratio * v1.
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    /// Seconds after which an untouched instance state is discarded.
    #[arg(long, default_value_t = 3600)]
    ttl: u64,
    /// Directory for instance state and the choice log; in-memory if absent.
    #[arg(long)]
    state_dir: Option<PathBuf>,
    /// Currency sign shown with the amounts.
    #[arg(long)]
    currency: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let generator = ValueGenerator::new(args.values_set, args.ratio, args.currency)?;
    let ttl = Duration::from_secs(args.ttl);
    let gm = Arc::new(match &args.state_dir {
        Some(dir) => MinorityGm::open(generator, ttl, dir).with_context(|| format!("opening {}", dir.display()))?,
        None => MinorityGm::new(generator, ttl),
    });

    let sweeper = gm.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.sweep();
        }
    });

    let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.host, args.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "minority GM listening");
    server::serve(listener, gm, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
