use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nagg::checks::{self, CheckResult, GradConfig, PropConfig};
use nagg::config::RunConfig;
use nagg::runner;
use nagg::Error;

#[derive(Parser)]
#[command(name = "nagg", version, about = "GNNs with nonlinear neighborhood aggregators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seeds 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over several seeds.
    Train(RunArgs),
    /// Run the aggregator property suite.
    Propcheck {
        /// Replace every tolerance with this value.
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = nagg::diff::DEFAULT_STEP)]
        step: f64,
        /// Scale the backward pass of the named tape op by 1.1.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a block-model dataset to disk.
    Synth(RunArgs),
    /// Train a fixed-parameter run per grid value.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Effective p / alpha / gamma values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

/// Exit status for a failure. Config errors are 2, divergence 3, file
/// problems 4.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) | Error::Split(_) | Error::Json(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Io { .. } | Error::Parse { .. } | Error::EdgeOutOfRange { .. } => 4,
        _ => 1,
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::read(p).map_err(|e| match e {
            Error::Parse { path, line, msg } => Error::Config(format!("{}:{line}: {msg}", path.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for kv in &args.set {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = &args.out {
        cfg.set("out_dir", &out.to_string_lossy())?;
    }
    if let Some(n) = args.seeds {
        cfg.set("seeds", &format!("0..{n}"))?;
    }
    if let Some(list) = &args.seed_list {
        let s: Vec<String> = list.iter().map(u64::to_string).collect();
        cfg.set("seeds", &s.join(","))?;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn threads() -> Result<Option<usize>, Error> {
    match std::env::var("NAGG_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| Error::Config(format!("NAGG_THREADS = {v:?}: expected a positive integer"))),
        Err(_) => Ok(None),
    }
}

fn report(results: &[CheckResult]) -> u8 {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in results {
        println!(
            "{} {:width$}  worst {:.3e}  tolerance {:.1e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.tolerance
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        0
    } else {
        println!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", "));
        1
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let threads = threads()?;
    if let Some(n) = threads {
        // Fails only if a global pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let s = runner::run_config(&cfg, threads)?;
            for r in &s.runs {
                println!(
                    "seed {:>4}  test_acc {:.4}  best_epoch {:>4}  final_train_loss {:.5}",
                    r.metrics.seed, r.metrics.test_acc, r.metrics.best_epoch, r.metrics.final_train_loss
                );
            }
            println!("{}", s.line());
            Ok(0)
        }
        Command::Propcheck { tolerance, trials, seed } => {
            let mut cfg = PropConfig {
                trials,
                tolerance,
                ..PropConfig::default()
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(report(&checks::run_propcheck(&cfg)?))
        }
        Command::Gradcheck { step, inject_fault, seed } => {
            let mut cfg = GradConfig {
                step,
                fault: inject_fault,
                ..GradConfig::default()
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Ok(report(&checks::run_gradcheck(&cfg)?))
        }
        Command::Synth(args) => {
            let cfg = load_config(&args)?;
            let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(cfg.get("out_dir")));
            let b = runner::synth(&cfg, &dir)?;
            println!(
                "wrote {} nodes, {} edges, {} classes to {}",
                b.num_nodes(),
                b.undirected_edges,
                b.num_classes,
                dir.display()
            );
            Ok(0)
        }
        Command::Sweep { run, values } => {
            let cfg = load_config(&run)?;
            let (rows, path) = runner::sweep(&cfg, &values, threads)?;
            for r in &rows {
                println!(
                    "param {:>8}  {:.2} ± {:.2}",
                    r.param_value,
                    100.0 * r.mean_acc,
                    100.0 * r.std_acc
                );
            }
            println!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
