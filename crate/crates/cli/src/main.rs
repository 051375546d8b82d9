use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scalify_core::harness::{self, preset, randgraph, ExperimentConfig, PRESET_COUNT};
use scalify_core::{DType, Error};

/// Scale propagation experiments on emulated low-precision formats.
#[derive(Parser, Debug)]
#[command(name = "scalify", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the small transformer under a precision recipe.
    Run(RunArgs),
    /// Check that scale propagation preserves semantics on random graphs.
    Check {
        /// Number of random graphs.
        #[arg(long, default_value_t = 1000)]
        graphs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare scaled and direct quantization SNR of Gaussian tensors.
    Snr {
        #[arg(long, default_value = "e4m3")]
        fmt: DType,
        /// Standard deviation exponent; sweeps -14..=14 when omitted.
        #[arg(long, allow_hyphen_values = true)]
        sigma_exp: Option<i32>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["preset", "config"])))]
struct RunArgs {
    /// One of the built-in recipes, 0 to 4.
    #[arg(long)]
    preset: Option<usize>,
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for metrics.jsonl, summary.json, scales.csv and the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
}

enum Failure {
    Abort,
    Config(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json { .. } => Failure::Config(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(k), _) => {
            if *k >= PRESET_COUNT {
                return Err(Failure::Config(format!("preset must be 0..={}", PRESET_COUNT - 1)));
            }
            preset(*k)?
        }
        (_, Some(path)) => ExperimentConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        _ => unreachable!("clap requires a source"),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    let res = harness::run_experiment(&cfg, args.out.as_deref())?;
    let s = &res.summary;
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.5}"));
    println!(
        "{}: {} steps, loss {} -> {} (tail {}), {} rescale sites, {} fallbacks",
        s.name,
        s.steps_completed,
        fmt(s.initial_loss),
        fmt(s.final_loss),
        fmt(s.tail_loss),
        s.rescale_sites.values().sum::<usize>(),
        s.fallback_count
    );
    if let Some(dir) = &args.out {
        println!("wrote {}", dir.display());
    }
    match (&s.aborted, &res.diagnostics) {
        (Some(a), diag) => {
            eprintln!("aborted at step {}: {} ({})", a.step, a.reason, a.tensor);
            if let (None, Some(d)) = (&args.out, diag) {
                eprint!("{d}");
            }
            Err(Failure::Abort)
        }
        (None, _) => Ok(()),
    }
}

fn check(graphs: usize, seed: u64) -> Result<(), Failure> {
    let r = randgraph::check_random_graphs(graphs, seed);
    println!(
        "{} graphs ({} differentiated), {} primitive kinds, {} scale rules",
        r.cases,
        r.backward_cases,
        r.primitives.len(),
        r.rules.len()
    );
    if r.passed() {
        println!("all outputs bit-identical");
        return Ok(());
    }
    for f in r.failures.iter().take(3) {
        eprintln!("{f}");
    }
    Err(Failure::Other(format!("{} of {} graphs differ", r.failures.len(), r.cases)))
}

fn snr(fmt: DType, sigma_exp: Option<i32>, samples: usize, seed: u64) -> Result<(), Failure> {
    let exps: Vec<i32> = match sigma_exp {
        Some(k) => vec![k],
        None => (-14..=14).collect(),
    };
    println!("{:>5} {:>10} {:>10} {:>10}", "k", "scaled_db", "direct_db", "gap_db");
    for p in harness::snr_sweep(fmt, exps, samples, seed)? {
        println!("{:>5} {:>10.2} {:>10.2} {:>10.2}", p.sigma_exp, p.scaled_db, p.direct_db, p.gap_db());
    }
    Ok(())
}

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("SCALIFY_LOG_LEVEL", "info");
    env_logger::Builder::from_env(env).format_timestamp(None).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Run(a) => run(a),
        Command::Check { graphs, seed } => check(graphs, seed),
        Command::Snr {
            fmt,
            sigma_exp,
            samples,
            seed,
        } => snr(fmt, sigma_exp, samples, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Abort) => ExitCode::from(1),
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
