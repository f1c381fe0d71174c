use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ghpid_cli::{load_scenario, output_dir, run, Command, Overrides};

#[derive(Parser)]
#[command(name = "ghpid", version, about = "Guided harmonic path-integral diffusion sampler")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a template protocol, optionally swept over geometry, stiffness or warp cutoff.
    CaseA(RunArgs),
    /// Learn guide centers against an expert protocol.
    CaseB(RunArgs),
    /// Learn consensus guides for each trust setting of two experts.
    CaseC(RunArgs),
    /// Simulate a single protocol.
    Sample(RunArgs),
    /// Write product-of-experts mixtures for each trust setting.
    Fuse(RunArgs),
    /// Tabulate the Green-function coefficients of each protocol.
    TraceCoefficients(RunArgs),
    /// Parse and check a scenario or manifest without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (default: runs/<scenario name>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "GHPID_THREADS")]
    threads: Option<usize>,
    /// Number of uniformly spaced snapshot times.
    #[arg(long)]
    snapshots: Option<usize>,
    /// Also fail on statistical verdicts (fidelity, learning targets).
    #[arg(long)]
    strict: bool,
}

fn execute(command: Command, args: RunArgs) -> Result<bool> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let mut scenario = load_scenario(&args.config)?;
    scenario.apply(Overrides { seed: args.seed, snapshots: args.snapshots });
    ghpid_cli::validate(&scenario)?;
    let out = output_dir(args.out, &scenario);
    let manifest = run(command, &scenario, &out)?;
    for c in &manifest.checks {
        let tag = if c.passed { "PASS" } else if c.hard { "FAIL" } else { "WARN" };
        if c.detail.is_empty() {
            println!("{tag} {}", c.name);
        } else {
            println!("{tag} {} ({})", c.name, c.detail);
        }
    }
    println!("wrote {} files and {}", manifest.files.len(), out.join(ghpid_cli::MANIFEST_FILE).display());
    Ok(if args.strict { manifest.all_checks_pass() } else { manifest.hard_checks_pass() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::CaseA(a) => execute(Command::CaseA, a),
        Cmd::CaseB(a) => execute(Command::CaseB, a),
        Cmd::CaseC(a) => execute(Command::CaseC, a),
        Cmd::Sample(a) => execute(Command::Sample, a),
        Cmd::Fuse(a) => execute(Command::Fuse, a),
        Cmd::TraceCoefficients(a) => execute(Command::TraceCoefficients, a),
        Cmd::ValidateConfig { config } => load_scenario(&config).map(|s| {
            println!("ok: {} ({})", s.name, config.display());
            true
        }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
