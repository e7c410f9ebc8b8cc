//! `tiger-triage`: ingest, train, eval, explain, report and serve.

mod commands;
mod config;
mod error;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tiger_triage::model::{BackboneFamily, ClassSelector, GradientTarget};
use tiger_triage::train::Protocol;

use config::{Overrides, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "tiger-triage", version, about = "Tiger mosquito image triage with Grad-CAM explanations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, global = true, value_parser = parse_family)]
    backbone: Option<BackboneFamily>,
    /// Defaults to 42
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output root (train) or directory (explain, report)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProtocolArg {
    Cv5,
    #[value(name = "confirmed_vs_unconfirmed", alias = "confirmed-vs-unconfirmed")]
    ConfirmedVsUnconfirmed,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Cv5 => Protocol::Cv5,
            ProtocolArg::ConfirmedVsUnconfirmed => Protocol::ConfirmedVsUnconfirmed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TargetArg {
    Score,
    Probability,
}

fn parse_family(s: &str) -> Result<BackboneFamily, String> {
    s.parse().map_err(|e: tiger_triage::model::ModelError| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a manifest and print label counts
    Ingest {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train under the configured protocol into a new run directory
    Train,
    /// Re-evaluate a run's checkpoints on their held-out images
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Write Grad-CAM overlays for images
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        image: Vec<PathBuf>,
        /// Tags (shallow, middle, deep) or layer names
        #[arg(long, value_delimiter = ',', default_value = "shallow,middle,deep")]
        layers: Vec<String>,
        /// predicted, tiger, non_tiger or a class index
        #[arg(long, default_value = "predicted", value_parser = commands::parse_class)]
        class: ClassSelector,
        #[arg(long, value_enum, default_value = "score")]
        target: TargetArg,
    },
    /// Curves, error gallery and summary for a finished run
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Images in the error-analysis sample
        #[arg(long)]
        sample: Option<usize>,
    },
    /// HTTP inference endpoint
    Serve {
        #[arg(long, env = "TIGER_TRIAGE_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "TIGER_TRIAGE_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, default_value_t = 2)]
        gradcam_slots: usize,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
}

fn print<T: Serialize>(value: &T) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let overrides = Overrides {
        protocol: g.protocol.map(Into::into),
        backbone: g.backbone,
        seed: g.seed,
        out: g.out.clone(),
        ..Overrides::default()
    };
    let load = |extra: Overrides| -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(g.config.as_deref())?;
        cfg.apply(&overrides);
        cfg.apply(&extra);
        Ok(cfg)
    };
    match cli.command {
        Command::Ingest { manifest, images } => {
            let cfg = load(Overrides {
                manifest,
                images,
                ..Overrides::default()
            })?;
            print(&commands::cmd_ingest(&cfg)?)
        }
        Command::Train => {
            let cfg = load(Overrides::default())?;
            print(&commands::cmd_train(&cfg, g.jobs)?)
        }
        Command::Eval { run } => {
            let out = commands::cmd_eval(&run)?;
            if let Some(path) = &g.out {
                std::fs::write(path, serde_json::to_vec_pretty(&out)?)?;
            }
            print(&out)
        }
        Command::Explain {
            checkpoint,
            image,
            layers,
            class,
            target,
        } => {
            let target = match target {
                TargetArg::Score => GradientTarget::Score,
                TargetArg::Probability => GradientTarget::Probability,
            };
            let out = g.out.clone().unwrap_or_else(|| PathBuf::from("explain"));
            print(&commands::cmd_explain(&checkpoint, &image, &layers, class, target, &out)?)
        }
        Command::Report { run, sample } => print(&commands::cmd_report(&run, sample, g.out.as_deref())?),
        Command::Serve {
            checkpoint,
            addr,
            gradcam_slots,
            timeout_secs,
        } => {
            if !checkpoint.exists() {
                return Err(CliError::PathMissing(checkpoint));
            }
            let config = tiger_triage_serve::ServeConfig {
                gradcam_slots,
                timeout: Duration::from_secs(timeout_secs),
                ..Default::default()
            };
            tokio::runtime::Runtime::new()?.block_on(tiger_triage_serve::serve(addr, checkpoint, config))?;
            Ok(())
        }
    }
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,tiger_triage_serve=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
