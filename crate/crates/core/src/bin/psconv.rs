use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use psconv::analysis::{allocation_report, default_lattice_specs};
use psconv::bench::{run_bench, BenchConfig, BenchStrategy};
use psconv::check::{run_check, CheckConfig, Fault};
use psconv::io::TensorArchive;
use psconv::lattice::DilationPattern;
use psconv::train::{train, TrainConfig};
use psconv::zoo::{count, ArchSpec, Variant};
use psconv::Error;

/// Poly-scale convolution kernels: verification, benchmarks, counting and analysis.
#[derive(Parser)]
#[command(name = "psconv", version)]
struct Cli {
    /// Worker threads for the convolution kernels.
    #[arg(long, global = true, env = "PSCONV_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized equivalence, adjoint and finite-difference checks.
    Check(CheckArgs),
    /// Time the forward strategies on one layer shape.
    Bench(BenchArgs),
    /// Parameter and MAC counts for a backbone.
    Count(CountArgs),
    /// Per-layer scale allocation of a weight archive.
    Analyze(AnalyzeArgs),
    /// Train the toy two-layer network on synthetic blobs.
    TrainDemo(TrainArgs),
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    cases: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Tolerance for forward strategy agreement.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON config file; flags given alongside override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input shape N,C,H,W.
    #[arg(long, value_delimiter = ',')]
    input: Option<Vec<usize>>,
    #[arg(long)]
    cout: Option<usize>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    /// Dilation pattern, e.g. 1,2,1,4.
    #[arg(long)]
    pattern: Option<DilationPattern>,
    /// Rate of the plain dilated baseline.
    #[arg(long)]
    dilation: Option<u32>,
    /// Comma-separated subset of reference,masked,rearranged,dilated,standard.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<BenchStrategy>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    arch: String,
    #[arg(long, default_value = "standard")]
    variant: Variant,
    /// Square input resolution.
    #[arg(long, default_value_t = 224)]
    input: usize,
    #[arg(long)]
    layers_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "1,2,1,4")]
    pattern: DilationPattern,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Final weights archive.
    #[arg(long, default_value = "weights.psta")]
    out: PathBuf,
    /// Per-step loss CSV; stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
}

enum Failure {
    Verification(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn emit(text: &str, path: Option<&Path>) -> Result<(), Failure> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), Failure> {
    let mut config = CheckConfig::new(args.cases as usize, args.seed, args.tol);
    config.fault = args.inject_fault;
    let report = run_check(&config)?;
    emit(&report.to_json()?, args.out.as_deref())?;
    if report.passed {
        return Ok(());
    }
    let mut lines = Vec::new();
    for s in report.suites.iter().filter(|s| !s.passed) {
        let mut line = format!("suite {}: max error {:e} > tol {:e}", s.name, s.max_error, s.tol);
        if let Some(c) = &s.failing_case {
            line += &format!("; worst case #{} seed {} ({})", c.index, c.seed, c.description);
        }
        lines.push(line);
    }
    Err(Failure::Verification(lines.join("\n")))
}

fn cmd_bench(args: BenchArgs, threads: Option<usize>) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).map_err(Error::from)?,
        None => BenchConfig::default(),
    };
    if let Some(v) = args.input {
        config.input = v.try_into().map_err(|v: Vec<usize>| {
            Error::InvalidArgument(format!("--input needs N,C,H,W, got {} values", v.len()))
        })?;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field { config.$field = v; })* };
    }
    set!(cout, kernel, stride, groups, dilation, strategies, repeats, warmup, seed);
    if let Some(p) = args.pattern {
        config.pattern = p.rates().to_vec();
    }
    if config.threads.is_none() {
        config.threads = threads;
    }
    let report = run_bench(&config)?;
    emit(&report.to_json()?, args.out.as_deref())?;
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv())?;
    }
    for r in &report.results {
        match (&r.error, r.median_ms) {
            (Some(e), _) => eprintln!("{:>10}  error: {e}", r.strategy.name()),
            (None, Some(m)) => eprintln!(
                "{:>10}  median {:>10.2} ms  x{:.2}",
                r.strategy.name(),
                m,
                r.ratio_vs_standard.unwrap_or(f64::NAN)
            ),
            _ => {}
        }
    }
    Ok(())
}

fn cmd_count(args: CountArgs) -> Result<(), Failure> {
    let arch = ArchSpec::by_name(&args.arch, args.variant)?;
    let report = count(&arch, (args.input, args.input))?;
    emit(&serde_json::to_string_pretty(&report).map_err(Error::from)?, args.out.as_deref())?;
    if let Some(path) = &args.layers_csv {
        fs::write(path, report.layers_csv())?;
    }
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let archive = TensorArchive::load(&args.weights).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", args.weights.display()),
        )),
        other => other,
    })?;
    let specs = default_lattice_specs(&archive, &args.pattern, args.groups);
    let report = allocation_report(&archive, &specs)?;
    emit(&report.to_json()?, args.out.as_deref())?;
    if let Some(path) = &args.csv {
        fs::write(path, report.to_csv())?;
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let config = TrainConfig::new(args.steps as usize, args.lr, args.seed);
    let outcome = train(&config)?;
    outcome.model.to_archive()?.save(&args.out)?;
    match &args.log {
        Some(path) => fs::write(path, outcome.log_csv())?,
        None => emit(outcome.log_csv().trim_end(), None)?,
    }
    let means = outcome.epoch_means();
    eprintln!(
        "first epoch mean loss {:.4}, last {:.4}; weights written to {}",
        means[0],
        means[means.len() - 1],
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Check(a) => cmd_check(a),
        Command::Bench(a) => cmd_bench(a, cli.threads),
        Command::Count(a) => cmd_count(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::TrainDemo(a) => cmd_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed\n{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
