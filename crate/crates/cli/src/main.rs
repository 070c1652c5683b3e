use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vizarel::demo::{self, DemoConfig};
use vizarel::export::{self, ExportPlan};
use vizarel::serve::{self, ServeOptions};

#[derive(Parser)]
#[command(name = "vizarel", version, about = "Inspect recorded RL rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded pendulum rollout log (and PNG renders).
    DemoGen {
        /// Output directory; the log is written as demo.jsonl.
        #[arg(long, short, default_value = "demo")]
        out: PathBuf,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
        episodes: u32,
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
        steps: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Skip PNG renders.
        #[arg(long)]
        no_render: bool,
    },
    /// Load and validate a log, printing the ingest report.
    Ingest { path: PathBuf },
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "VIZAREL_HOST", default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long, env = "VIZAREL_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "VIZAREL_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Static UI bundle to serve at `/`.
        #[arg(long, env = "VIZAREL_UI_DIR")]
        ui_dir: Option<PathBuf>,
        /// Log to ingest before accepting requests; may be repeated.
        #[arg(long)]
        load: Vec<PathBuf>,
        /// Print the UI URL once listening.
        #[arg(long)]
        open: bool,
    },
    /// Write viewport payloads for a log without running the service.
    Export {
        log: PathBuf,
        /// JSON file with a descriptor, a list of descriptors, or a plan
        /// `{embedding, selections, viewports}`.
        descriptors: PathBuf,
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::DemoGen { out, episodes, steps, seed, no_render } => {
            let config = DemoConfig {
                episodes: episodes as usize,
                steps: steps as usize,
                seed,
                render: !no_render,
            };
            match demo::generate(&config, &out) {
                Ok(o) => {
                    println!("wrote {} ({} steps, {} renders)", o.log.display(), o.steps, o.renders);
                    0
                }
                Err(e) => {
                    eprintln!("error: IO_ERROR: {e}");
                    1
                }
            }
        }
        Command::Ingest { path } => match vizarel_core::load_session(&path) {
            Ok((_, report)) => {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                0
            }
            Err(e) => {
                eprintln!("error: {}: {e}", e.code());
                e.exit_code()
            }
        },
        Command::Serve { host, port, data_dir, ui_dir, load, open } => {
            tracing_subscriber::fmt().with_writer(std::io::stderr).init();
            let runtime = tokio::runtime::Runtime::new().expect("tokio runtime");
            let options = ServeOptions { host, port, data_dir, ui_dir, load, open };
            match runtime.block_on(serve::run(options)) {
                Ok(()) => 0,
                Err(e) => {
                    eprintln!("error: {}", e.message);
                    e.exit_code
                }
            }
        }
        Command::Export { log, descriptors, out_dir } => {
            let result = std::fs::read_to_string(&descriptors)
                .map_err(|e| export::ExportError::Descriptor(format!("{}: {e}", descriptors.display())))
                .and_then(|text| ExportPlan::parse(&text))
                .and_then(|plan| export::export(&log, &plan, &out_dir));
            match result {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    0
                }
                Err(e) => {
                    eprintln!("error: {}: {e}", e.code());
                    e.exit_code()
                }
            }
        }
    };
    ExitCode::from(code as u8)
}
