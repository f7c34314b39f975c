//! Command-line front end.
//!
//! Exit codes: 0 success, 1 solver failure, 2 usage error, 3 unreadable or
//! malformed file, 4 validation failure, 5 accuracy budget exceeded.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::coreset::{Method, SolverOptions};
use crate::error::{Error, Result};
use crate::inference::accuracy;
use crate::io;
use crate::model::LayerParams;
use crate::pipeline::{compress, PipelineConfig, DEFAULT_BUDGET, DEFAULT_QUANTIZE_SLACK};
use crate::report::CompressionReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SOLVER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_BUDGET: i32 = 5;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CORESET_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "coreset",
    version,
    about = "Retraining-free CNN compression with coresets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    K,
    S,
    A,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::K => Method::K,
            MethodArg::S => Method::S,
            MethodArg::A => Method::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Kv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune and factor a network, writing a container and its report.
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Container manifest to write; the blob and reports go next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "s")]
        method: MethodArg,
        /// Run activation-based filter pruning first.
        #[arg(long)]
        prune: bool,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        prune_budget: f64,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        coreset_budget: f64,
        /// Comma-separated sparsity weights tried per layer by method s.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.25, 1.5])]
        lambda_grid: Vec<f64>,
        /// Use this single sparsity weight for all layers.
        #[arg(long)]
        global_lambda: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
        /// Quantize weights to this many bits (1-8, or 32 to skip).
        #[arg(long)]
        quantize_bits: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_QUANTIZE_SLACK)]
        quantize_slack: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Print top-1 accuracy of a network or container.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        subset_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Multiply a container out into a plain dense network.
    Densify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the report stored in a container.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
    /// Print per-layer shapes and parameter counts.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_)
        | Error::Json(_)
        | Error::Format(_)
        | Error::SizeMismatch { .. }
        | Error::NonFinite(_) => EXIT_IO,
        Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::Empty(_)
        | Error::EmptyEvalSet
        | Error::Validation(_) => EXIT_VALIDATION,
        Error::Budget(_) => EXIT_BUDGET,
        Error::Solver(_) => EXIT_SOLVER,
    }
}

/// Parses `args`, runs the command, prints to stdout and returns the exit
/// code. Errors go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match execute(cli.command) {
        Ok(out) => {
            print!("{out}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
    // A global pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Compress {
            model,
            data,
            out,
            method,
            prune,
            prune_budget,
            coreset_budget,
            lambda_grid,
            global_lambda,
            subset_fraction,
            quantize_bits,
            quantize_slack,
            seed,
            tol,
            max_iters,
        } => {
            let defaults = SolverOptions::default();
            let cfg = PipelineConfig {
                method: method.into(),
                prune,
                prune_budget,
                coreset_budget,
                lambda_grid,
                global_lambda,
                subset_fraction,
                seed,
                solver: SolverOptions {
                    tol: tol.unwrap_or(defaults.tol),
                    max_iters: max_iters.unwrap_or(defaults.max_iters),
                },
                quantize_bits,
                quantize_slack,
            };
            cfg.validate()?;
            let net = io::load_network(&model)?;
            let eval = io::load_evalset(&data)?;
            let container = compress(&net, &cfg, &eval)?;
            io::save_container(&container, &out)?;
            io::save_report(&container.report, &out)?;
            Ok(container.report.to_text())
        }
        Command::Evaluate {
            model,
            data,
            subset_fraction,
            seed,
        } => {
            if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "subset fraction must lie in (0, 1], got {subset_fraction}"
                )));
            }
            let net = io::load_any_network(&model)?;
            let eval = io::load_evalset(&data)?;
            let acc = accuracy(&net, &eval, subset_fraction, seed)?;
            Ok(format!("accuracy={acc}\n"))
        }
        Command::Densify { input, out } => {
            same_file_guard(&input, &out)?;
            let c = io::load_container(&input)?;
            io::save_network(&c.densify(), &out)?;
            Ok(format!("wrote {}\n", out.display()))
        }
        Command::Report { input, format } => {
            let report = load_report(&input)?;
            Ok(match format {
                ReportFormat::Text => report.to_text(),
                ReportFormat::Kv => report.to_key_values(),
                ReportFormat::Json => report.to_json()?,
            })
        }
        Command::Inspect { model } => inspect(&model),
    }
}

fn same_file_guard(input: &Path, out: &Path) -> Result<()> {
    if input == out || io::blob_path(input) == io::blob_path(out) {
        return Err(Error::InvalidArgument(
            "output would overwrite the input".into(),
        ));
    }
    Ok(())
}

fn load_report(path: &Path) -> Result<CompressionReport> {
    Ok(io::load_container(path)?.report)
}

fn inspect(path: &Path) -> Result<String> {
    use std::fmt::Write as _;
    let net = io::load_any_network(path)?;
    let mut out = String::new();
    let _ = writeln!(out, "input {:?}", net.input_shape);
    let shapes = net.output_shapes()?;
    let mut total = 0;
    for (i, layer) in net.layers.iter().enumerate() {
        let _ = write!(
            out,
            "{:<10} {:<13} out {:?}",
            layer.id,
            layer.kind.name(),
            shapes[i]
        );
        if let Some(p) = net.params.get(&layer.id) {
            let (r, c) = p.shape();
            let count = p.param_count();
            total += count;
            let form = match p {
                LayerParams::Dense(_) => "dense".to_string(),
                LayerParams::Factored(f) => format!("coreset rank {}", f.rank()),
            };
            let _ = write!(out, " weights {r}x{c} {form} params {count}");
        }
        let _ = writeln!(out);
    }
    let _ = writeln!(out, "total_params={total}");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::DEFAULT_LAMBDA_GRID;

    fn parse(args: &[&str]) -> Command {
        Cli::try_parse_from(std::iter::once("coreset").chain(args.iter().copied()))
            .unwrap()
            .command
    }

    #[test]
    fn compress_defaults() {
        let Command::Compress {
            method,
            prune,
            prune_budget,
            coreset_budget,
            lambda_grid,
            global_lambda,
            subset_fraction,
            quantize_bits,
            ..
        } = parse(&[
            "compress", "--model", "m.json", "--data", "d.json", "--out", "o.json",
        ])
        else {
            panic!("wrong subcommand")
        };
        assert_eq!(method, MethodArg::S);
        assert!(!prune);
        assert_eq!(
            (prune_budget, coreset_budget),
            (DEFAULT_BUDGET, DEFAULT_BUDGET)
        );
        assert_eq!(lambda_grid, DEFAULT_LAMBDA_GRID.to_vec());
        assert_eq!(global_lambda, None);
        assert_eq!(subset_fraction, 1.0);
        assert_eq!(quantize_bits, None);
    }

    #[test]
    fn lambda_grid_is_comma_separated() {
        let Command::Compress { lambda_grid, .. } = parse(&[
            "compress",
            "--model",
            "m",
            "--data",
            "d",
            "--out",
            "o",
            "--lambda-grid",
            "0.5,2",
        ]) else {
            panic!("wrong subcommand")
        };
        assert_eq!(lambda_grid, vec![0.5, 2.0]);
    }

    #[test]
    fn usage_errors_map_to_exit_two() {
        assert_eq!(
            run(["coreset", "compress", "--data", "d", "--out", "o"]),
            EXIT_USAGE
        );
        assert_eq!(run(["coreset", "frobnicate"]), EXIT_USAGE);
        assert_eq!(
            run(["coreset", "report", "--in", "x", "--format", "yaml"]),
            EXIT_USAGE
        );
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Budget("x".into())), EXIT_BUDGET);
        assert_eq!(exit_code(&Error::Solver("x".into())), EXIT_SOLVER);
        assert_eq!(exit_code(&Error::Format("x".into())), EXIT_IO);
        assert_eq!(exit_code(&Error::EmptyEvalSet), EXIT_VALIDATION);
    }
}
