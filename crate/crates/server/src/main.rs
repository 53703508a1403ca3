use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;
use fieldforge_server::{serve, Registry, ServerConfig};
use tracing_subscriber::EnvFilter;

/// FieldForge primary server.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    /// Root directory for project data.
    #[arg(long, env = "FIELDFORGE_DATA_DIR", default_value = "fieldforge-data")]
    data_dir: PathBuf,
    #[arg(long, env = "FIELDFORGE_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Per-project media quota in bytes.
    #[arg(long)]
    quota_bytes: Option<u64>,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let config = ServerConfig {
        quota_bytes: args.quota_bytes,
    };
    let dir = args.data_dir.clone();
    let registry = tokio::task::spawn_blocking(move || Registry::open(dir, config))
        .await
        .map_err(std::io::Error::other)??;
    let listener = tokio::net::TcpListener::bind(args.listen).await?;
    tracing::info!(
        addr = %listener.local_addr()?,
        data_dir = %args.data_dir.display(),
        projects = registry.project_ids().len(),
        "serving"
    );
    serve(listener, Arc::new(registry), async {
        let _ = tokio::signal::ctrl_c().await;
        tracing::info!("shutting down");
    })
    .await
}
