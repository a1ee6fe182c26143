use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xtribe_core::platform::{open_stores, publish_game};
use xtribe_core::users::ProfileInput;
use xtribe_core::{GameId, GmClient, Platform, PlatformConfig};

#[derive(Parser)]
#[command(name = "xtribe", version, about = "Web-experiment game platform")]
struct Cli {
    /// Platform config file (TOML). All keys are optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `data_dir` from the config.
    #[arg(long, global = true, env = "XTRIBE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the platform server.
    Serve {
        /// Overrides `listen` from the config.
        #[arg(long, env = "XTRIBE_LISTEN")]
        listen: Option<SocketAddr>,
    },
    /// Manage deployed games.
    #[command(subcommand)]
    Game(GameCommand),
    /// Manage user accounts.
    #[command(subcommand)]
    User(UserCommand),
    /// Print a game's leaderboard.
    Leaderboard {
        game_id: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Export per-game statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
}

#[derive(Subcommand)]
enum GameCommand {
    /// Upload a game from its manifest as a draft (or update a draft).
    Register {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Health-check the GM and make the game playable.
    Publish { game_id: String },
    /// Hide a game from the catalog and refuse new sessions.
    Suspend { game_id: String },
    /// Return a suspended game to draft.
    Unsuspend { game_id: String },
    List,
    /// Print the token a game's GM uses for pushes.
    Token { game_id: String },
}

#[derive(Subcommand)]
enum UserCommand {
    List,
    Add(AddUser),
}

#[derive(Args)]
struct AddUser {
    #[arg(long)]
    username: String,
    #[arg(long, env = "XTRIBE_USER_PASSWORD")]
    password: String,
    #[arg(long)]
    age: Option<u32>,
    #[arg(long)]
    gender: Option<String>,
    #[arg(long)]
    language: Option<String>,
    #[arg(long)]
    location: Option<String>,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Write one JSON line per credited player per match.
    Export {
        game_id: String,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    seq: u64,
    game_id: &'a GameId,
    instance_id: &'a str,
    username: String,
    score: f64,
}

fn load_config(cli: &Cli) -> anyhow::Result<PlatformConfig> {
    let mut config = match &cli.config {
        Some(path) => PlatformConfig::load(path)?,
        None => PlatformConfig::default(),
    };
    if let Some(dir) = &cli.data_dir {
        config.data_dir = Some(dir.clone());
    }
    Ok(config)
}

fn data_dir(config: &PlatformConfig) -> anyhow::Result<&Path> {
    match &config.data_dir {
        Some(d) => Ok(d),
        None => bail!("no data directory configured; set `data_dir`, --data-dir or XTRIBE_DATA_DIR"),
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Serve { listen } => {
            if let Some(addr) = listen {
                config.listen = addr;
            }
            data_dir(&config)?;
            let platform = Platform::open(config.clone()).context("refusing to start")?;
            let listener = tokio::net::TcpListener::bind(config.listen)
                .await
                .with_context(|| format!("cannot listen on {}", config.listen))?;
            tracing::info!(addr = %listener.local_addr()?, "platform listening");
            xtribe_core::server::serve_on(listener, platform, async {
                let _ = tokio::signal::ctrl_c().await;
                tracing::info!("shutting down");
            })
            .await?;
        }
        Command::Game(cmd) => {
            let (_, games) = open_stores(data_dir(&config)?)?;
            match cmd {
                GameCommand::Register { manifest } => {
                    let game = games.register_manifest(&manifest)?;
                    println!("registered draft `{}` ({} files)", game.id, game.ui_bundle.files.len());
                    println!("gm token: {}", game.gm_auth_token());
                }
                GameCommand::Publish { game_id } => {
                    let game = publish_game(&games, &GmClient::new(), &GameId::new(game_id), config.gm_request_timeout).await?;
                    println!("published `{}`", game.id);
                }
                GameCommand::Suspend { game_id } => {
                    games.suspend(&GameId::new(game_id.clone()))?;
                    println!("suspended `{game_id}`");
                }
                GameCommand::Unsuspend { game_id } => {
                    games.unsuspend(&GameId::new(game_id.clone()))?;
                    println!("`{game_id}` is a draft again");
                }
                GameCommand::List => {
                    for g in games.list() {
                        println!("{}\t{:?}\t{} players\t{}", g.id, g.status, g.required_players, g.name);
                    }
                }
                GameCommand::Token { game_id } => {
                    let id = GameId::new(game_id);
                    let game = games.get(&id).with_context(|| format!("unknown game `{id}`"))?;
                    println!("{}", game.gm_auth_token());
                }
            }
        }
        Command::User(cmd) => {
            let (users, _) = open_stores(data_dir(&config)?)?;
            match cmd {
                UserCommand::List => print_json(&users.list_users())?,
                UserCommand::Add(u) => {
                    let profile = ProfileInput {
                        age: u.age,
                        age_band: None,
                        gender: u.gender,
                        language: u.language,
                        location: u.location,
                    };
                    users.register_user(&u.username, &u.password, &profile)?;
                    println!("added `{}`", u.username);
                }
            }
        }
        Command::Leaderboard { game_id, top } => {
            let (users, _) = open_stores(data_dir(&config)?)?;
            print_json(&users.leaderboard(&GameId::new(game_id), top))?;
        }
        Command::Stats(StatsCommand::Export { game_id, out }) => {
            let (users, _) = open_stores(data_dir(&config)?)?;
            let game_id = GameId::new(game_id);
            let mut sink: Box<dyn Write> = match &out {
                Some(path) => Box::new(std::fs::File::create(path).with_context(|| path.display().to_string())?),
                None => Box::new(std::io::stdout().lock()),
            };
            for batch in users.ledger(&game_id) {
                for entry in &batch.entries {
                    let record = ExportRecord {
                        seq: batch.seq,
                        game_id: &batch.game_id,
                        instance_id: batch.instance_id.as_str(),
                        username: users.username(&entry.account_id).unwrap_or_default(),
                        score: entry.score,
                    };
                    serde_json::to_writer(&mut sink, &record)?;
                    sink.write_all(b"\n")?;
                }
            }
            sink.flush()?;
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
