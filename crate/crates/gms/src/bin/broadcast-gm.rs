//! The default GM: relays every client message to all players of its instance.

use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;

use clap::Parser;
use xtribe_gms::{server, BroadcastGm};

#[derive(Parser)]
#[command(version, about = "Default broadcast Game Manager")]
struct Args {
    #[arg(long, default_value_t = 9001)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .init();
    let args = Args::parse();
    let listener = tokio::net::TcpListener::bind(SocketAddr::new(args.host, args.port)).await?;
    tracing::info!(addr = %listener.local_addr()?, "broadcast GM listening");
    server::serve(listener, Arc::new(BroadcastGm), async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
