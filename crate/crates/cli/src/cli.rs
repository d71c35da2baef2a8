//! Argument parsing and subcommand dispatch.

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;

use bricks_service::{BackendKind, Server, ServiceConfig};
use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;
use crate::scenario::{run_scenario, ScenarioName};
use crate::tabular;
use crate::train::{render, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "bricks",
    version,
    about = "Classroom machine-learning experiments with toy robots"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backend {
    Sim,
    External,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Sim => BackendKind::Sim,
            Backend::External => BackendKind::External,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run the HTTP and WebSocket service.
    Serve {
        #[arg(long, env = "BRICKS_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Directory holding session files.
        #[arg(long = "data", env = "BRICKS_DATA", default_value = "data")]
        data_dir: PathBuf,
        /// Backend for sessions that do not choose one.
        #[arg(long, env = "BRICKS_BACKEND", value_enum, default_value = "sim")]
        backend: Backend,
        /// Robot bridge address (host:port) for external sessions.
        #[arg(long, env = "BRICKS_ENDPOINT")]
        endpoint: Option<String>,
        #[arg(long, env = "BRICKS_SEED", default_value_t = 0)]
        seed: u64,
        /// Allowed browser origin; any origin when omitted.
        #[arg(long, env = "BRICKS_CORS_ORIGIN")]
        cors_origin: Option<String>,
        /// Crawler steps per second while running (0 disables).
        #[arg(long, env = "BRICKS_TICK_HZ", default_value_t = 2.0)]
        tick_hz: f64,
    },
    /// Train the crawler offline against the simulator.
    CrawlerTrain {
        #[arg(long, default_value_t = 4000)]
        steps: u64,
        /// Exploration rate at the first step.
        #[arg(long, default_value_t = 0.8)]
        epsilon: f64,
        /// Exploration rate at the last step; defaults to --epsilon.
        #[arg(long)]
        epsilon_end: Option<f64>,
        /// 0 for myopic updates, 1 to credit future reward.
        #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..=1))]
        gamma: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Replay a scripted classroom flow with simulated robots.
    Scenario {
        #[arg(value_enum)]
        name: ScenarioName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the JSON-lines transcript here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Least-squares fit of a CSV with columns speed,distance.
    Fit { csv: PathBuf },
    /// KNN classification against a CSV with columns color,length,label.
    Classify {
        csv: PathBuf,
        #[arg(long)]
        color: f64,
        #[arg(long)]
        length: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn tokio_runtime() -> Result<tokio::runtime::Runtime, CliError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(runtime)
}

fn print_json(value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    println!("{text}");
    Ok(())
}

fn write_file(path: &PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Serve {
            listen,
            data_dir,
            backend,
            endpoint,
            seed,
            cors_origin,
            tick_hz,
        } => {
            if !(tick_hz.is_finite() && tick_hz >= 0.0) {
                return Err(CliError::Usage(format!(
                    "--tick-hz must be >= 0, got {tick_hz}"
                )));
            }
            let config = ServiceConfig {
                listen,
                data_dir,
                default_backend: backend.into(),
                default_endpoint: endpoint,
                seed,
                cors_origin,
                tick_hz,
            };
            tokio_runtime()?.block_on(async move {
                let server = Server::bind(config).await.map_err(runtime)?;
                println!("listening on http://{}", server.local_addr());
                let _ = std::io::stdout().flush();
                server.run(shutdown_signal()).await.map_err(runtime)
            })
        }
        Cmd::CrawlerTrain {
            steps,
            epsilon,
            epsilon_end,
            gamma,
            seed,
            output,
            json,
        } => {
            let config = TrainConfig {
                steps,
                epsilon_start: epsilon,
                epsilon_end: epsilon_end.unwrap_or(epsilon),
                discount: gamma == 1,
                seed,
            };
            let report = train(&config)?;
            if let Some(path) = output {
                let text = serde_json::to_string_pretty(&report).map_err(runtime)?;
                write_file(&path, &text)?;
            }
            if json {
                print_json(&report)
            } else {
                print!("{}", render(&report));
                Ok(())
            }
        }
        Cmd::Scenario {
            name,
            seed,
            transcript,
        } => {
            let report = tokio_runtime()?.block_on(run_scenario(name, seed))?;
            if let Some(path) = transcript {
                write_file(&path, &report.transcript_text())?;
            }
            println!("scenario {} (seed {})", report.name, report.seed);
            for c in &report.checks {
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("  {verdict} {}: {}", c.name, c.detail);
            }
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime(format!("scenario {name} failed")))
            }
        }
        Cmd::Fit { csv } => print_json(&tabular::fit(&csv)?),
        Cmd::Classify {
            csv,
            color,
            length,
            k,
        } => print_json(&tabular::classify(&csv, color, length, k)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("bricks").chain(args.iter().copied()))
    }

    #[test]
    fn serve_defaults() {
        let Cmd::Serve {
            listen,
            tick_hz,
            backend,
            ..
        } = parse(&["serve"]).unwrap().command
        else {
            panic!()
        };
        assert_eq!(listen.to_string(), "127.0.0.1:8080");
        assert_eq!(tick_hz, 2.0);
        assert_eq!(backend, Backend::Sim);
    }

    #[test]
    fn gamma_is_zero_or_one() {
        assert!(parse(&["crawler-train", "--gamma", "1"]).is_ok());
        assert!(parse(&["crawler-train", "--gamma", "2"]).is_err());
    }

    #[test]
    fn scenario_names_parse() {
        for name in ScenarioName::ALL {
            let cli = parse(&["scenario", name.as_str()]).unwrap();
            assert!(matches!(cli.command, Cmd::Scenario { name: n, .. } if n == name));
        }
    }
}
