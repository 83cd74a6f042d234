use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use govkit::datadir::{CommunitySpec, DataDir, MemberEntry};
use govkit::lint::{is_clean, lint_source};
use govkit::scenario::{self, RunOptions};
use govkit::webhook::WebhookConfig;
use govkit_core::engine::Command;
use govkit_core::time::{Span, Timestamp};

#[derive(Parser)]
#[command(name = "govkit", version, about = "Community governance engine")]
struct Cli {
    /// Data directory holding communities and tokens.
    #[arg(long, env = "GOVKIT_DATA", default_value = "govkit-data", global = true)]
    data: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create the data directory with its first community.
    Init {
        #[arg(long)]
        name: String,
        /// YAML or JSON list of members: id, display_name, handle, attributes.
        #[arg(long)]
        members: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Webhook adapter settings (YAML or JSON); sandbox platform otherwise.
        #[arg(long)]
        adapter_config: Option<PathBuf>,
        /// Timestamp of the genesis record. Fixed by default so that equal
        /// inputs give equal logs.
        #[arg(long, default_value = "1970-01-01T00:00:00Z")]
        genesis_at: String,
    },
    /// Run the HTTP API and the periodic tick.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, default_value = "60s")]
        tick_period: String,
    },
    /// Apply one tick to every community (or one) and exit.
    Tick {
        #[arg(long)]
        community: Option<String>,
        /// Instant to tick at; now by default.
        #[arg(long)]
        at: Option<String>,
    },
    /// Policy tooling.
    Policy {
        #[command(subcommand)]
        cmd: PolicyCmd,
    },
    /// Scenario tooling.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Run the bundled toxicity scorer on its own.
    MockScorer {
        #[arg(long, default_value = "127.0.0.1:8090")]
        listen: String,
    },
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Report syntax, identifier and capability problems.
    Lint {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario under the simulated clock.
    Run {
        file: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        report: Format,
        /// Keep the community log here instead of a scratch directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let mut o = std::io::stdout().lock();
        if writeln!(o, $($t)*).is_err() {
            std::process::exit(0);
        }
    }};
}

fn now() -> Timestamp {
    let ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0);
    Timestamp::from_millis(ms)
}

fn read_structured<T: serde::de::DeserializeOwned>(path: &PathBuf) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_yaml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let data = DataDir::new(&cli.data);
    match cli.cmd {
        Cmd::Init { name, members, seed, adapter_config, genesis_at } => {
            let members: Vec<MemberEntry> = read_structured(&members)?;
            let adapter: Option<WebhookConfig> = adapter_config.as_ref().map(read_structured).transpose()?;
            let at = Timestamp::parse(&genesis_at).map_err(anyhow::Error::msg)?;
            let spec = CommunitySpec { name, members, seed, adapter, channels: Vec::new() };
            let (node, issued) = data.init(&spec, at)?;
            out!("initialized {} with community `{}`", cli.data.display(), issued.community);
            out!("log: {}", node.dir().join(govkit::store::LOG_FILE).display());
            out!("Tokens are shown once; store them now.");
            if let Some(a) = &issued.admin {
                out!("admin token: {a}");
            }
            if let Some(a) = &issued.adapter {
                out!("adapter token: {a}");
            }
            for (user, t) in &issued.members {
                out!("member token {user}: {t}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Serve { listen, tick_period } => {
            let period = Span::parse(&tick_period).map_err(anyhow::Error::msg)?;
            if period.as_millis() <= 0 {
                bail!("tick period must be positive");
            }
            if !data.is_initialized() {
                bail!("{} is not an initialized data directory (run `govkit init`)", cli.data.display());
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(govkit::api::serve(data, &listen, std::time::Duration::from_millis(period.as_millis() as u64)))?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Tick { community, at } => {
            let at = match at {
                Some(s) => Timestamp::parse(&s).map_err(anyhow::Error::msg)?,
                None => now(),
            };
            let slugs = match community {
                Some(c) => vec![c],
                None => data.communities()?,
            };
            if slugs.is_empty() {
                bail!("no communities in {}", cli.data.display());
            }
            for slug in slugs {
                let mut node = data.open_community(&slug)?;
                let reply = node.apply_now(at, Command::Tick)?;
                node.flush()?;
                out!("{slug}: {} decision(s)", reply.decisions().len());
                for d in reply.decisions() {
                    out!("  {} {}", d.action, d.status.as_str());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Policy { cmd: PolicyCmd::Lint { files, format } } => {
            let mut clean = true;
            let mut all = serde_json::Map::new();
            for f in &files {
                let src = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                let diags = lint_source(&src);
                clean &= is_clean(&diags);
                match format {
                    Format::Text => {
                        for d in &diags {
                            out!("{}", d.render(&f.display().to_string()));
                        }
                        if is_clean(&diags) {
                            out!("{}: clean", f.display());
                        }
                    }
                    Format::Json => {
                        all.insert(f.display().to_string(), serde_json::to_value(&diags)?);
                    }
                }
            }
            if format == Format::Json {
                out!("{}", serde_json::to_string_pretty(&all)?);
            }
            Ok(if clean { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::Scenario { cmd: ScenarioCmd::Run { file, report, out } } => {
            let loaded = scenario::load(&file)?;
            let rep = scenario::run(&loaded, &RunOptions { out_dir: out })?;
            match report {
                Format::Text => out!("{}", rep.to_text().trim_end()),
                Format::Json => out!("{}", rep.to_json()),
            }
            Ok(if rep.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Cmd::MockScorer { listen } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&listen).await?;
                out!("mock scorer on http://{}/score", listener.local_addr()?);
                axum::serve(listener, govkit::scorer::router()).await
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
