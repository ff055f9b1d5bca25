mod commands;
mod inspect;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "syncrec", version, about = "Synchronized multi-stream acquisition for human-robot collaboration studies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the hub
    #[command(subcommand)]
    Hub(HubCommand),
    /// Stream a simulated device into a running hub
    Sim(SimArgs),
    /// Run a scripted experiment
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Cut epochs around markers and export them as JSONL
    Epoch(EpochArgs),
    /// Print streams, counts and the marker timeline of a recording
    Inspect(InspectArgs),
    /// Send markers to a running hub
    #[command(subcommand)]
    Marker(MarkerCommand),
}

#[derive(Debug, Subcommand)]
pub enum HubCommand {
    /// Accept producers and subscribers; record everything until interrupted
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Wire protocol port
    #[arg(long, default_value_t = syncrec_core::wire::DEFAULT_HUB_PORT)]
    pub port: u16,
    /// Address to bind
    #[arg(long, default_value = "0.0.0.0")]
    pub bind: String,
    /// Output .srec file
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// WebSocket port for the live monitor
    #[arg(long, default_value_t = syncrec_net::DEFAULT_BRIDGE_PORT)]
    pub bridge_port: u16,
    /// Do not start the WebSocket bridge
    #[arg(long)]
    pub no_bridge: bool,
    /// Seconds between clock probes
    #[arg(long, default_value_t = syncrec_core::clock::PING_INTERVAL_S)]
    pub ping_interval: f64,
    /// Stop after this many seconds instead of waiting for Ctrl-C
    #[arg(long)]
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimKind {
    Gsr,
    Ppg,
    Ecg,
    Mocap,
    Robot,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Device to simulate
    pub kind: SimKind,
    /// Hub address
    #[arg(long, env = "SYNCREC_HUB", default_value = "127.0.0.1:16571")]
    pub hub: String,
    /// Seed for noise and random plans
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample rate in Hz; the device default when omitted
    #[arg(long)]
    pub rate: Option<f64>,
    /// Source id announced to the hub
    #[arg(long)]
    pub source: Option<String>,
    /// Device configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stop after this many seconds instead of waiting for Ctrl-C
    #[arg(long)]
    pub duration: Option<f64>,
    /// Device clock offset from the host clock, seconds
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub clock_offset: f64,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCommand {
    /// Assembly task with robot speed and trajectory conditions
    Case1(Case1Args),
    /// Collaborative transfer with speed and separation monitoring
    Case2(Case2Args),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Subject identifier stored with the run
    #[arg(long)]
    pub subject: String,
    /// Scenario configuration (JSON)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run against a hub in real time instead of simulating locally
    #[arg(long)]
    pub hub: Option<String>,
    /// Output file; .srec locally, metadata JSON with --hub
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Clock offsets per source for the local run (JSON object)
    #[arg(long)]
    pub offsets: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Case1Args {
    /// 1 normal/fixed, 2 high/fixed, 3 normal/random, 4 high/random
    #[arg(long, value_parser = parse_task)]
    pub task: syncrec_core::experiment::Task,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct Case2Args {
    #[command(flatten)]
    pub run: RunArgs,
}

fn parse_task(s: &str) -> Result<syncrec_core::experiment::Task, String> {
    let n: u8 = s.parse().map_err(|_| format!("task must be 1..4, got {s}"))?;
    syncrec_core::experiment::Task::try_from(n).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct EpochArgs {
    /// Recording to read
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Marker label; glob patterns such as "Task * start" are accepted
    #[arg(long)]
    pub marker: String,
    /// Seconds before the marker
    #[arg(long)]
    pub pre: f64,
    /// Seconds after the marker
    #[arg(long)]
    pub post: f64,
    /// Output JSONL file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Recording to read
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum MarkerCommand {
    /// Inject an investigator marker
    Inject(InjectArgs),
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Hub address
    #[arg(long, env = "SYNCREC_HUB", default_value = "127.0.0.1:16571")]
    pub hub: String,
    /// Marker text
    #[arg(long)]
    pub label: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // sources often repeat their cause in their own message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.ends_with(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
