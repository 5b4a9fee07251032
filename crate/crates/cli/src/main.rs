use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ocl_reid::error::ErrorCategory;
use ocl_reid::runner::{compare, run, write_comparison, RunConfig, RunMode, ScenarioSpec, Strategy};
use ocl_reid::Error;

#[derive(Parser)]
#[command(name = "ocl-reid", version, about = "Online continual person re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run(RunArgs),
    /// Run several strategies and seeds on one scenario and tabulate them.
    Compare(CompareArgs),
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario preset, overriding the config's scenario.
    #[arg(long)]
    preset: Option<String>,
    /// deterministic or concurrent.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write both memory buffers.
    #[arg(long)]
    dump_memory: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// fixed, naive, reservoir or mir.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated strategies.
    #[arg(long, default_value = "fixed,naive,reservoir")]
    strategy: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0,1,2")]
    seed: String,
}

fn base_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset("corridor", Strategy::Reservoir, 0),
    };
    if let Some(p) = &c.preset {
        cfg.scenario = ScenarioSpec::Preset(p.clone());
        cfg.scenario.resolve()?;
    }
    if let Some(m) = &c.mode {
        cfg.mode = m.parse::<RunMode>()?;
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    cfg.dump_memory |= c.dump_memory;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, Error> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} {s:?}")))
        })
        .collect()
}

fn run_cmd(args: RunArgs) -> Result<(), Error> {
    let mut cfg = base_config(&args.common)?;
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let art = run(&cfg)?;
    print!("{}", ocl_reid::evalkit::summary_table(&art.metrics));
    println!("\naccuracy matrix (row i: after segment i)\n{}", art.acc);
    if cfg.mode == RunMode::Concurrent {
        println!(
            "queue drops: {}, torn snapshot reads: {}",
            art.concurrency.queue_drops, art.concurrency.torn_reads
        );
    }
    if let Some(out) = &cfg.out {
        println!("artifacts written to {}", out.display());
    }
    Ok(())
}

fn compare_cmd(args: CompareArgs) -> Result<(), Error> {
    let base = base_config(&args.common)?;
    let strategies: Vec<Strategy> = args
        .strategy
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = parse_list(&args.seed, "seed")?;
    let mut configs = Vec::new();
    for &strategy in &strategies {
        for &seed in &seeds {
            let mut c = base.clone();
            c.strategy = strategy;
            c.seed = seed;
            c.out = base
                .out
                .as_ref()
                .map(|o| o.join(format!("{}-seed{seed}", strategy.name())));
            configs.push(c);
        }
    }
    let (table, _) = compare(&configs)?;
    print!("{table}");
    if let Some(out) = &base.out {
        write_comparison(&table, out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, label) = match e.category() {
                ErrorCategory::Config => (2, "config"),
                ErrorCategory::Io => (3, "io"),
                ErrorCategory::Runtime => (4, "runtime"),
            };
            eprintln!("error [{label}]: {e}");
            ExitCode::from(code)
        }
    }
}
