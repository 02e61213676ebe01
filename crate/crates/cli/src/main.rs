use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nsls_core::cli_bench::{execute, Command, Format, InputSource, RunConfig, SolverOptions, EXIT_CONFIG, EXIT_INPUT};
use nsls_core::generator::GenSpec;

/// Least squares and top eigenvectors on numerically sparse matrices.
#[derive(Parser, Debug)]
#[command(name = "nsls", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve min ½‖Ax − b‖².
    SolveRegression(RunArgs),
    /// Top eigenvector of AᵀA.
    TopEigenvector(RunArgs),
    /// Generate a matrix family and write it as Matrix Market.
    Gen(RunArgs),
    /// Size, sparsity and spectral statistics.
    Stats(RunArgs),
    /// Check estimator moments and the tail bound on a matrix.
    Verify(RunArgs),
    /// Replay a saved run configuration (JSON).
    Run {
        config: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Matrix Market input.
    #[arg(long, conflicts_with = "gen_n")]
    input: Option<PathBuf>,
    /// Generated rows.
    #[arg(long, requires_all = ["gen_d", "gen_s"])]
    gen_n: Option<usize>,
    /// Generated columns.
    #[arg(long)]
    gen_d: Option<usize>,
    /// Target mean numerical sparsity.
    #[arg(long)]
    gen_s: Option<f64>,
    /// Power-law decay exponent; solved from --gen-s when absent.
    #[arg(long)]
    gen_decay: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    gen_row_norm: f64,
    /// Comma-separated singular values, one per column.
    #[arg(long, value_delimiter = ',')]
    gen_spectrum: Option<Vec<f64>>,
    /// Generator seed; defaults to --seed.
    #[arg(long)]
    gen_seed: Option<u64>,

    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, env = "NSLS_SEED", default_value_t = 0)]
    seed: u64,
    /// Use the accelerated solver.
    #[arg(long)]
    accel: bool,
    /// Sampling parameter k (regression).
    #[arg(long)]
    k: Option<f64>,
    /// Smallest eigenvalue of AᵀA (regression).
    #[arg(long)]
    mu: Option<f64>,
    /// Largest eigenvalue of AᵀA, if known.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Lower bound on the relative eigengap.
    #[arg(long)]
    gap: Option<f64>,
    /// Epoch cap per linear solve.
    #[arg(long)]
    max_epochs: Option<u64>,
    /// Right-hand side as an n×1 Matrix Market file.
    #[arg(long)]
    rhs: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_bias: Option<f64>,

    /// Report destination (for gen: the matrix file).
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Print the resolved run configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl RunArgs {
    fn into_config(self, command: Command) -> Result<(RunConfig, bool), String> {
        let input = match (self.input, self.gen_n) {
            (Some(p), _) => InputSource::Path(p),
            (None, Some(n)) => InputSource::Generated(GenSpec {
                n,
                d: self.gen_d.unwrap_or(0),
                target_s: self.gen_s.unwrap_or(1.0),
                decay: self.gen_decay,
                spectrum: self.gen_spectrum,
                row_norm: self.gen_row_norm,
                seed: self.gen_seed.unwrap_or(self.seed),
            }),
            (None, None) => return Err("either --input or --gen-n/--gen-d/--gen-s is required".into()),
        };
        let options = SolverOptions {
            epsilon: self.epsilon,
            seed: self.seed,
            accel: self.accel,
            k: self.k,
            mu: self.mu,
            lambda1: self.lambda1,
            gap: self.gap,
            max_epochs: self.max_epochs,
            rhs: self.rhs,
            inject_bias: self.inject_bias,
        };
        let format = match self.format {
            FormatArg::Json => Format::Json,
            FormatArg::Csv => Format::Csv,
        };
        Ok((RunConfig { command, input, options, output: self.output, format }, self.print_config))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("error")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    let resolved = match cli.command {
        Cmd::SolveRegression(a) => a.into_config(Command::SolveRegression),
        Cmd::TopEigenvector(a) => a.into_config(Command::TopEigenvector),
        Cmd::Gen(a) => a.into_config(Command::Gen),
        Cmd::Stats(a) => a.into_config(Command::Stats),
        Cmd::Verify(a) => a.into_config(Command::Verify),
        Cmd::Run { config } => match std::fs::read_to_string(&config) {
            Ok(text) => match serde_json::from_str::<RunConfig>(&text) {
                Ok(c) => Ok((c, false)),
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(EXIT_CONFIG as u8);
                }
            },
            Err(e) => {
                eprintln!("error: {}: {e}", config.display());
                return ExitCode::from(EXIT_INPUT as u8);
            }
        },
    };
    let (cfg, print_only) = match resolved {
        Ok(r) => r,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if print_only {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    let code = execute(&cfg, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    ExitCode::from(code as u8)
}
