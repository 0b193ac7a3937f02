use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flexlora::cli::{cmd_run, cmd_sweep, cmd_verify, Faults};

#[derive(Parser)]
#[command(name = "flexlora", version, about = "Federated heterogeneous-rank LoRA simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration file over its seeds.
    Run {
        config: PathBuf,
        /// `key=value` override, repeatable (e.g. fed.max_rounds=20).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every invariant suite.
    Verify {
        /// Negate B when building adapters from SVD factors.
        #[arg(long, hide = true)]
        inject_sign_fault: bool,
    },
    /// Run a named experiment grid: fig5a, table2, fig4b, table4, fig6.
    Sweep {
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn main() -> ExitCode {
    let code = match Args::parse().command {
        Command::Run { config, set, out } => cmd_run(&config, &set, out.as_deref()),
        Command::Verify { inject_sign_fault } => cmd_verify(Faults {
            flip_decompose_sign: inject_sign_fault,
        }),
        Command::Sweep { preset, out, set } => cmd_sweep(&preset, &set, out.as_deref()),
    };
    ExitCode::from(code as u8)
}
