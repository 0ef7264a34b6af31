use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use aibomgen_core::attestation::KeyPair;
use aibomgen_gateway::{openapi, GatewayConfig, Platform, TokenTable};
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aibomgen-gateway", version, about = "Attested training platform server")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway, workers and scan scheduler (default).
    Serve(ServeArgs),
    /// Write a new Ed25519 platform key pair.
    Keygen {
        /// Private key path; the public key goes next to it as `<stem>.pub.pem`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the OpenAPI description of the implemented routes.
    Openapi {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, env = "AIBOMGEN_LISTEN_ADDR", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, env = "AIBOMGEN_DATA_DIR", default_value = "./aibomgen-data")]
    data_dir: PathBuf,
    #[arg(long, env = "AIBOMGEN_TOKENS_FILE")]
    tokens_file: PathBuf,
    #[arg(long, env = "AIBOMGEN_SIGNING_KEY")]
    signing_key: Option<PathBuf>,
    #[arg(long, env = "AIBOMGEN_ADVISORY_DB")]
    advisory_db: Option<PathBuf>,
    #[arg(long, env = "AIBOMGEN_WORKERS", default_value_t = 2)]
    workers: usize,
    #[arg(long, env = "AIBOMGEN_SCAN_INTERVAL_SECONDS", default_value_t = 3600)]
    scan_interval_seconds: u64,
    #[arg(long, env = "AIBOMGEN_GRANT_TTL_SECONDS", default_value_t = 900)]
    grant_ttl_seconds: u64,
    #[arg(long, env = "AIBOMGEN_CAPTURE_TRAINING_LOG", default_value_t = false)]
    capture_training_log: bool,
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    match cli.command {
        Some(Command::Keygen { out }) => {
            let key = KeyPair::generate(&mut rand::rngs::OsRng);
            key.save(&out, &out.with_extension("pub.pem"))
                .with_context(|| format!("writing {}", out.display()))?;
            println!("{}", key.key_id());
            Ok(())
        }
        Some(Command::Openapi { out }) => {
            let text = openapi::render();
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Some(Command::Serve(args)) => serve(args),
        None => serve(ServeArgs::parse_from_env()),
    }
}

impl ServeArgs {
    fn parse_from_env() -> Self {
        #[derive(Parser)]
        struct Only {
            #[command(flatten)]
            args: ServeArgs,
        }
        Only::parse_from(["aibomgen-gateway"]).args
    }
}

fn serve(args: ServeArgs) -> anyhow::Result<()> {
    let mut config = GatewayConfig::new(&args.data_dir, TokenTable::load(&args.tokens_file)?);
    config.listen_addr = args.listen;
    config.signing_key = args.signing_key;
    config.advisory_db = args.advisory_db;
    config.workers = args.workers.max(1);
    config.scan_interval = Duration::from_secs(args.scan_interval_seconds.max(1));
    config.grant_ttl_seconds = args.grant_ttl_seconds;
    config.capture_training_log = args.capture_training_log;

    let platform = Platform::start(&config)?;
    tracing::info!(key_id = platform.public_key().key_id(), addr = %config.listen_addr, "gateway starting");
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.listen_addr)
            .await
            .with_context(|| format!("binding {}", config.listen_addr))?;
        platform
            .serve(listener, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })?;
    platform.stop();
    Ok(())
}
