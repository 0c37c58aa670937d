use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use rsd_core::report::{cmd_audit, cmd_heldout_bench, cmd_synth_check, Command, RunConfig};
use rsd_core::RsdError;

#[derive(Parser)]
#[command(name = "rsd", version, about = "Coordinate and relation audit for small blocks of learned vectors")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Synthetic cross-view, residual-injection and pullback checks.
    SynthCheck(Flags),
    /// Held-out proxy benchmark over generators and decoder settings.
    HeldoutBench(Flags),
    /// Fit and audit one block of statements.
    Audit(Flags),
}

#[derive(Args)]
struct Flags {
    /// Flat `key = value` file applied before the other flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Whitespace-separated embedding table (token followed by floats).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Block fixture: one statement per line, optional tab-separated topic.
    #[arg(long)]
    block: Option<PathBuf>,
    /// cosine | topic | file
    #[arg(long)]
    proxy: Option<String>,
    /// N×N CSV used with `--proxy file`.
    #[arg(long)]
    proxy_path: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// One seed or a comma-separated list.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    budget_x: Option<f64>,
    #[arg(long)]
    budget_a: Option<f64>,
    /// dual | dot | poincare
    #[arg(long)]
    decoder: Option<String>,
    /// Fraction of off-diagonal pairs hidden from the relation loss.
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-item plot rows and readout word lists.
    #[arg(long)]
    plot_data: bool,
    /// Also fit the soft k-means baseline.
    #[arg(long)]
    baseline: bool,
}

impl Flags {
    fn into_config(self, command: Command) -> Result<RunConfig, RsdError> {
        let mut c = RunConfig::new(command);
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let pairs: [(&str, Option<String>); 13] = [
            ("embeddings", self.embeddings.map(|p| p.display().to_string())),
            ("block", self.block.map(|p| p.display().to_string())),
            ("proxy", self.proxy),
            ("proxy_path", self.proxy_path.map(|p| p.display().to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("learning_rate", self.lr.map(|v| v.to_string())),
            ("seed", self.seed),
            ("budget_x", self.budget_x.map(|v| v.to_string())),
            ("budget_a", self.budget_a.map(|v| v.to_string())),
            ("decoder", self.decoder),
            ("holdout", self.holdout.map(|v| v.to_string())),
        ];
        for (key, value) in pairs {
            if let Some(v) = value {
                c.set(key, &v)?;
            }
        }
        if let Some(out) = self.out {
            c.out = Some(out);
        }
        c.plot_data |= self.plot_data;
        c.baseline |= self.baseline;
        c.resolve()
    }
}

fn exit_code(e: &RsdError) -> u8 {
    match e {
        RsdError::Config(_) => 2,
        RsdError::Parse { .. } | RsdError::Ingestion(_) => 3,
        RsdError::FitDivergence { .. } | RsdError::NonFiniteEncoder { .. } | RsdError::Numerical(_) => 4,
        RsdError::Assertion(_) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), RsdError> {
    let (command, flags) = match cli.command {
        Sub::SynthCheck(f) => (Command::SynthCheck, f),
        Sub::HeldoutBench(f) => (Command::HeldoutBench, f),
        Sub::Audit(f) => (Command::Audit, f),
    };
    let config = flags.into_config(command)?;
    info!("running {command} with seeds {:?}", config.seeds);
    let out = config.out_path();
    match command {
        Command::SynthCheck => {
            let summary = cmd_synth_check(&config)?;
            for row in &summary.rows {
                println!("{:<26} {:<34} {:>12.6e}", row.check, row.quantity, row.value);
            }
        }
        Command::HeldoutBench => {
            let summary = cmd_heldout_bench(&config)?;
            for g in &summary.generators {
                for (d, mae, wins) in &g.settings {
                    println!("{:<12} {:<14} mae {:.6} wins {}", g.generator.to_string(), d.to_string(), mae, wins);
                }
            }
        }
        Command::Audit => {
            let outcome = cmd_audit(&config)?;
            let r = &outcome.report;
            println!("block {} (N={}, K={}, D={})", r.block_name, r.n, r.k, r.d);
            println!("rho_x {:.6}  proxy_mae {:.6}  mix_weight {:.6}", r.rho_x, r.proxy_mae, r.mix_weight);
            println!("component masses {:?}", r.component_masses);
            println!("witness {}", r.witness.witness);
            for w in &r.warnings {
                println!("warning: {w}");
            }
            for p in outcome.written.iter().skip(1) {
                println!("wrote {}", p.display());
            }
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
