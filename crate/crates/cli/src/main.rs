use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cnnjit::{ActivationMode, SoftmaxExp};
use cnnjit_cli::*;

#[derive(Parser)]
#[command(
    name = "cnnjit",
    version,
    about = "Compile, check and time small CNNs as SSE machine code"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the unit schedule, buffer plan and instruction listing.
    Inspect(Common),
    /// Compare compiled outputs with the reference interpreter.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = DEFAULT_TOL_ABS)]
        tol_abs: f32,
    },
    /// Time compilation and inference.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_RUNS)]
        runs: usize,
        #[arg(long, default_value_t = DEFAULT_WARMUP)]
        warmup: usize,
    },
    /// Apply the network to raw little-endian f32 input.
    Run {
        #[command(flatten)]
        common: Common,
        /// Input values; `-` reads stdin.
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rational,
    Fast,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExpKind {
    Fast,
    Precise,
}

#[derive(Args)]
struct Common {
    manifest: PathBuf,
    /// Weight blob; defaults to the manifest path with a .bin extension.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Rational)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = ExpKind::Fast)]
    softmax_exp: ExpKind,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn load(&self) -> Result<Loaded, CliError> {
        load(&self.manifest, self.weights.as_deref())
    }

    fn options(&self) -> cnnjit::CodegenOptions {
        let mode = match self.mode {
            Mode::Rational => ActivationMode::Rational,
            Mode::Fast => ActivationMode::FastExp,
        };
        let exp = match self.softmax_exp {
            ExpKind::Fast => SoftmaxExp::Fast,
            ExpKind::Precise => SoftmaxExp::Precise,
        };
        codegen_options(mode, exp)
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    let io = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path == Path::new("-") {
        let mut buf = Vec::new();
        std::io::Read::read_to_end(&mut std::io::stdin(), &mut buf).map_err(io)?;
        Ok(buf)
    } else {
        std::fs::read(path).map_err(io)
    }
}

/// Text to print and whether the command succeeded.
fn execute(command: Command) -> Result<(String, bool), CliError> {
    match command {
        Command::Inspect(c) => Ok((cmd_inspect(&c.load()?, &c.options())?, true)),
        Command::Verify {
            common: c,
            trials,
            tol_abs,
        } => {
            let report = cmd_verify(&c.load()?, trials, c.seed, tol_abs, &c.options())?;
            let text = if c.json {
                json(&report)
            } else {
                report.table()
            };
            Ok((text, report.passed))
        }
        Command::Bench {
            common: c,
            runs,
            warmup,
        } => {
            let report = cmd_bench(&c.load()?, runs, warmup, c.seed, &c.options())?;
            let text = if c.json {
                json(&report)
            } else {
                report.table()
            };
            Ok((text, true))
        }
        Command::Run { common: c, input } => {
            let outputs = cmd_run(&c.load()?, &read_input(&input)?, &c.options())?;
            let text = if c.json {
                json(&outputs)
            } else {
                format_outputs(&outputs)
            };
            Ok((text, true))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok((text, ok)) => {
            // a closed pipe on stdout is not an error of the command
            let _ = std::io::Write::write_all(&mut std::io::stdout().lock(), text.as_bytes());
            ExitCode::from(if ok { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
