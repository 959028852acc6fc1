use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fragsim::cli::{execute, parse_bytes, Command, Overrides};

/// Caching-allocator fragmentation simulator for phased RLHF workloads.
#[derive(Parser)]
#[command(name = "fragsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one workload under one cache policy.
    Run(Common),
    /// Simulate every cache policy, optionally over a knob grid.
    Compare(Common),
    /// Write the generated workload as a trace file.
    GenTrace(Common),
    /// Simulate a trace file.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Trace to replay; defaults to workload.trace from the config.
        trace: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides workload.seed (generated workloads only).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// never, after_all_phases, after_inference, after_training or sweep.
    #[arg(long)]
    policy: Option<String>,
    /// Device capacity, e.g. 25769803776 or 24GiB.
    #[arg(long, value_parser = parse_bytes)]
    capacity: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common, trace) = match cli.command {
        Cmd::Run(c) => (Command::Run, c, None),
        Cmd::Compare(c) => (Command::Compare, c, None),
        Cmd::GenTrace(c) => (Command::GenTrace, c, None),
        Cmd::Replay { common, trace } => (Command::Replay, common, trace),
    };
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
        policy: common.policy,
        capacity: common.capacity,
    };
    let code = execute(
        command,
        common.config.as_deref(),
        &overrides,
        trace.as_deref(),
        &mut std::io::stdout().lock(),
        &mut std::io::stderr().lock(),
    );
    ExitCode::from(code as u8)
}
