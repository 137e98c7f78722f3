//! The `svs` command line: `inspect`, `refine`, `diff` and `bench`.
//!
//! Exit codes: 0 on success, 2 when `diff` finds a shape mismatch, 64 for
//! usage errors, 70 for numerical failures and 74 for I/O or unreadable
//! checkpoints. Every failure prints one diagnostic line naming the file or
//! layer involved.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{run_benchmark, write_outputs, BenchConfig, BenchError};
use crate::filter::NameFilter;
use crate::refine::{format_for_path, refine_file, RefineConfig, RefineError};
use crate::scaling::ScalerKind;
use crate::spectrum::{
    compare_checkpoints, export_report, inspect_checkpoint, pool_reports, HistogramSpec, LayerReport, ReportError,
    ReportFormat,
};
use crate::tensor_store::{Checkpoint, CheckpointError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SHAPE_MISMATCH: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_SOFTWARE: i32 = 70;
pub const EXIT_IO: i32 = 74;

/// Environment variable bounding the worker thread count.
pub const THREADS_ENV: &str = "SVS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "svs", version, about = "Singular value scaling for pruned checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report the singular value spectrum of every matrix-like tensor.
    Inspect {
        checkpoint: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
        /// Append one histogram pooled over all selected layers.
        #[arg(long)]
        pooled: bool,
    },
    /// Rescale singular values and paired biases, writing a new checkpoint.
    Refine {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "sqrt")]
        scaler: ScalerKind,
        /// Leave biases untouched.
        #[arg(long)]
        no_bias: bool,
        /// Glob over tensor names to refine (repeatable; default all).
        #[arg(long)]
        include: Vec<String>,
        /// Glob over tensor names to leave untouched (repeatable).
        #[arg(long)]
        exclude: Vec<String>,
        /// Write before/after spectra here (`.csv` for CSV, else JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare spectra of layers present in two checkpoints.
    Diff {
        before: PathBuf,
        after: PathBuf,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Run the toy convergence benchmark.
    Bench {
        /// Flat `key = value` config file; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `curves.csv` and `summary.json`.
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Glob over layer names.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long, conflicts_with = "csv")]
    json: bool,
    #[arg(long)]
    csv: bool,
    /// Histogram bin count.
    #[arg(long, default_value_t = HistogramSpec::default().bins)]
    bins: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ReportArgs {
    fn format(&self) -> ReportFormat {
        if self.csv {
            ReportFormat::Csv
        } else {
            ReportFormat::Json
        }
    }

    fn spec(&self) -> Result<HistogramSpec, Failure> {
        if self.bins == 0 {
            return Err(Failure::usage("--bins must be positive"));
        }
        Ok(HistogramSpec { bins: self.bins, ..HistogramSpec::default() })
    }

    fn filter(&self) -> Result<NameFilter, Failure> {
        let include: Vec<String> = self.filter.iter().cloned().collect();
        NameFilter::new(&include, &[]).map_err(|e| Failure::usage(format!("--filter: {e}")))
    }
}

/// A diagnostic and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn checkpoint(path: &Path, e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::NotMatrix { .. } => EXIT_SOFTWARE,
            _ => EXIT_IO,
        };
        Self::new(code, format!("{}: {e}", path.display()))
    }

    fn report(path: &Path, e: ReportError) -> Self {
        let code = match &e {
            ReportError::ShapeMismatch { .. } => EXIT_SHAPE_MISMATCH,
            ReportError::Pattern(_) | ReportError::Histogram(_) => EXIT_USAGE,
            ReportError::Checkpoint(_) => EXIT_IO,
            _ => EXIT_SOFTWARE,
        };
        Self::new(code, format!("{}: {e}", path.display()))
    }

    fn refine(input: &Path, e: RefineError) -> Self {
        let code = match &e {
            RefineError::Config(_) | RefineError::Pattern(_) | RefineError::NothingToRefine => EXIT_USAGE,
            RefineError::Checkpoint(CheckpointError::NotMatrix { .. }) => EXIT_SOFTWARE,
            RefineError::Checkpoint(_) | RefineError::Io { .. } => EXIT_IO,
            RefineError::Layer { .. } | RefineError::Report(_) => EXIT_SOFTWARE,
        };
        match e {
            RefineError::Io { .. } => Self::new(code, e.to_string()),
            _ => Self::new(code, format!("{}: {e}", input.display())),
        }
    }

    fn bench(e: BenchError) -> Self {
        let code = match &e {
            BenchError::Config(_) => EXIT_USAGE,
            BenchError::Io { .. } => EXIT_IO,
            _ => EXIT_SOFTWARE,
        };
        Self::new(code, e.to_string())
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let mut buf = Vec::new();
    let result = thread_pool().and_then(|pool| pool.install(|| dispatch(cli.command, &mut buf)));
    if let Err(e) = out.write_all(&buf) {
        let _ = writeln!(err, "svs: stdout: {e}");
        return EXIT_IO;
    }
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "svs: {}", f.message);
            f.code
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::new(EXIT_SOFTWARE, format!("thread pool: {e}")))
}

fn dispatch(command: Command, out: &mut Vec<u8>) -> Result<i32, Failure> {
    match command {
        Command::Inspect { checkpoint, report, pooled } => {
            let ckpt = load(&checkpoint)?;
            let mut reports = inspect_checkpoint(&ckpt, &report.filter()?, report.spec()?)
                .map_err(|e| Failure::report(&checkpoint, e))?;
            if pooled {
                reports.extend(pool_reports(&reports));
            }
            emit(&reports, &report, out)
        }
        Command::Refine { input, output, scaler, no_bias, include, exclude, report } => {
            let cfg = RefineConfig {
                scaler,
                include_bias: !no_bias,
                include,
                exclude,
                report_path: report,
                ..Default::default()
            };
            let reports = refine_file(&input, &output, &cfg).map_err(|e| Failure::refine(&input, e))?;
            let warnings: usize = reports.iter().map(|r| r.warnings.len()).sum();
            let _ = writeln!(
                out,
                "refined {} layers with {scaler} -> {} ({warnings} warnings)",
                reports.len(),
                output.display()
            );
            Ok(EXIT_OK)
        }
        Command::Diff { before, after, report } => {
            let (b, a) = (load(&before)?, load(&after)?);
            let reports = compare_checkpoints(&b, &a, &report.filter()?, report.spec()?).map_err(|e| {
                let path = if matches!(e, ReportError::ShapeMismatch { .. }) { &after } else { &before };
                Failure::report(path, e)
            })?;
            emit(&reports, &report, out)
        }
        Command::Bench { config, out: dir } => {
            let cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?;
                    BenchConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
                }
                None => BenchConfig::default(),
            };
            let summary = run_benchmark(&cfg).map_err(Failure::bench)?;
            write_outputs(&summary, &dir).map_err(Failure::bench)?;
            let mut text = String::new();
            for (init, s) in &summary.per_init {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6e}"));
                text.push_str(&format!(
                    "{init:<10} median final loss {}  median steps to threshold {}  diverged {}\n",
                    fmt(s.median_final_loss),
                    fmt(s.median_steps_to_threshold),
                    s.diverged_runs
                ));
            }
            text.push_str(&format!("wrote {}\n", dir.display()));
            out.extend_from_slice(text.as_bytes());
            Ok(EXIT_OK)
        }
    }
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::checkpoint(path, e))
}

fn emit(reports: &[LayerReport], args: &ReportArgs, out: &mut Vec<u8>) -> Result<i32, Failure> {
    let format = match &args.output {
        Some(path) if !args.json && !args.csv => format_for_path(path),
        _ => args.format(),
    };
    let bytes = export_report(reports, format);
    match &args.output {
        Some(path) => {
            std::fs::write(path, bytes).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))?
        }
        None => out.extend_from_slice(&bytes),
    }
    Ok(EXIT_OK)
}
