use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homog_core::harness::{parse_counts, parse_decimals, run, Command, ExperimentConfig};
use homog_core::Result;

#[derive(Parser)]
#[command(name = "homog", version, about = "Iterated sums, martingale decompositions and homogenization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Dump one orbit with its observable values and iterated sums
    Orbit(Flags),
    /// Ulam invariant density
    Density(Flags),
    /// Induced scheme and tower discretization
    Tower(Flags),
    /// Martingale-coboundary decomposition and diagnostics
    Decompose(Flags),
    /// Σ and E by the direct, Green–Kubo and tower estimators
    Coeffs(Flags),
    /// Moment tables and scaling exponents
    Moments(Flags),
    /// Path ensembles and iterated WIP checks
    Wip(Flags),
    /// Fast-slow system against Euler–Maruyama
    Fastslow(Flags),
    /// Suspension semiflow checks
    Semiflow(Flags),
}

#[derive(Args, Default)]
struct Flags {
    /// JSON config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Observable preset
    #[arg(long)]
    obs: Option<String>,
    /// Comma-separated counts, e.g. 1e3,1e4
    #[arg(long)]
    n: Option<String>,
    /// Comma-separated moment exponents
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// mu or lebesgue
    #[arg(long)]
    initial: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    allow_high_q: bool,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    tau_cap: Option<u32>,
    #[arg(long)]
    orbit_len: Option<usize>,
    #[arg(long)]
    max_lag: Option<usize>,
    /// Number of grid intervals on [0, 1]
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    x0: Option<f64>,
    #[arg(long)]
    drift: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    /// Comma-separated initial slow state
    #[arg(long)]
    xi: Option<String>,
    #[arg(long)]
    sde_sigma: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    roof: Option<String>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    t1: Option<f64>,
    /// Comma-separated flow horizons
    #[arg(long)]
    t: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
}

impl Flags {
    fn into_config(self, command: Command) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        let top = ExperimentConfig {
            subcommand: Some(command),
            map: self.map,
            gamma: self.gamma,
            p: self.p,
            eta: self.eta,
            obs: self.obs,
            n: self.n.as_deref().map(parse_counts).transpose()?,
            q: self.q.as_deref().map(|s| parse_decimals("q", s)).transpose()?,
            samples: self.samples,
            seed: self.seed,
            initial: self.initial,
            out: self.out,
            workers: self.workers,
            allow_high_q: self.allow_high_q.then_some(true),
            bins: self.bins,
            tau_cap: self.tau_cap,
            orbit_len: self.orbit_len,
            max_lag: self.max_lag,
            grid: self.grid,
            x0: self.x0,
            drift: self.drift,
            noise: self.noise,
            xi: self.xi.as_deref().map(|s| parse_decimals("xi", s)).transpose()?,
            sde_sigma: self.sde_sigma,
            h: self.h,
            roof: self.roof,
            c0: self.c0,
            t1: self.t1,
            t: self.t.as_deref().map(|s| parse_decimals("t", s)).transpose()?,
            dt: self.dt,
        };
        Ok(base.overlay(&top))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match cli.command {
        Cmd::Orbit(f) => (Command::Orbit, f),
        Cmd::Density(f) => (Command::Density, f),
        Cmd::Tower(f) => (Command::Tower, f),
        Cmd::Decompose(f) => (Command::Decompose, f),
        Cmd::Coeffs(f) => (Command::Coeffs, f),
        Cmd::Moments(f) => (Command::Moments, f),
        Cmd::Wip(f) => (Command::Wip, f),
        Cmd::Fastslow(f) => (Command::Fastslow, f),
        Cmd::Semiflow(f) => (Command::Semiflow, f),
    };
    let result = flags.into_config(command).and_then(|cfg| run(&cfg));
    match result {
        Ok(manifest) => {
            for f in &manifest.files {
                println!("{}  {}", f.sha256, f.name);
            }
            if !manifest.gate_passed {
                eprintln!("homog: statistical gate failed; see report.json");
            }
            ExitCode::from(manifest.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("homog: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
