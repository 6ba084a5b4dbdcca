use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cloq_cli::config::RunConfig;
use cloq_cli::error::{CliError, CliResult, EXIT_CONFIG};
use cloq_cli::gram::precompute_grams;
use cloq_cli::run::{run, stored_report, Mode};
use cloq_cli::synth::{synth_bundle, SynthSpec};
use cloq_cli::validate::validate;
use cloq_core::diagnostics::{emit_report, ReportFormat, RunReport};
use cloq_core::lowrank_init::Variant;
use cloq_core::ptq_solver::{MagrConfig, PtqMethod};
use cloq_core::quant_grid::Granularity;
use cloq_core::tensor_store::{read_bundle_file, write_bundle_file};

#[derive(Parser)]
#[command(name = "cloq", version, about = "Calibrated quantization and low-rank adapter initialization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize every selected layer.
    Quantize(PipelineArgs),
    /// Quantize, then initialize low-rank adapters against the residual.
    Init(PipelineArgs),
    /// Print the report stored in an output bundle.
    Report {
        bundle: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write to this file instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate { config: PathBuf },
    /// Replace activation entries by their Gram matrices.
    Gram {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write a seeded synthetic input bundle.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        rows: usize,
        #[arg(long, default_value_t = 100.0)]
        cond: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Store Gram matrices instead of raw activations.
        #[arg(long)]
        store_gram: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Table,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Csv => ReportFormat::Csv,
            Format::Table => ReportFormat::Table,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Rtn,
    Optq,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerTensor,
    PerChannel,
    PerGroup,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    ASigma,
    BSigma,
    SplitSqrt,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(short, long)]
    input: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// JSON run config; flags override its values.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Layer id glob; repeatable.
    #[arg(long = "layers")]
    layers: Vec<String>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<GranularityArg>,
    /// Magnitude-reduction penalty; 0 disables the preprocessing.
    #[arg(long)]
    magr_alpha: Option<f64>,
    #[arg(long)]
    magr_iters: Option<usize>,
    #[arg(long)]
    damp_ratio: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    altmin_iters: Option<usize>,
    #[arg(long)]
    eig_floor: Option<f64>,
    #[arg(long, env = "CLOQ_WORKERS")]
    workers: Option<usize>,
    /// Skip failing layers instead of aborting.
    #[arg(long)]
    keep_going: bool,
    /// Also export integer codes as `L/codes`.
    #[arg(long)]
    emit_codes: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Print the merged config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl PipelineArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.input.is_some() {
            cfg.input = self.input.clone();
        }
        if self.output.is_some() {
            cfg.output = self.output.clone();
        }
        if !self.layers.is_empty() {
            cfg.layers = self.layers.clone();
        }
        if let Some(m) = self.method {
            cfg.ptq.method = match m {
                MethodArg::Rtn => PtqMethod::Rtn,
                MethodArg::Optq => PtqMethod::Optq,
            };
        }
        let q = &mut cfg.ptq.quant;
        if let Some(b) = self.bits {
            q.bits = b;
        }
        if let Some(g) = self.group_size {
            q.granularity = Granularity::PerGroup(g);
        }
        if let Some(g) = self.granularity {
            let size = match q.granularity {
                Granularity::PerGroup(s) => s,
                _ => 64,
            };
            q.granularity = match g {
                GranularityArg::PerTensor => Granularity::PerTensor,
                GranularityArg::PerChannel => Granularity::PerChannel,
                GranularityArg::PerGroup => Granularity::PerGroup(self.group_size.unwrap_or(size)),
            };
        }
        match self.magr_alpha {
            Some(a) if a == 0.0 => cfg.ptq.magr = None,
            Some(a) => cfg.ptq.magr.get_or_insert_with(MagrConfig::default).alpha = Some(a),
            None => {}
        }
        if let Some(it) = self.magr_iters {
            cfg.ptq.magr.get_or_insert_with(MagrConfig::default).iters = it;
        }
        if let Some(d) = self.damp_ratio {
            cfg.ptq.damp_ratio = d;
        }
        if let Some(r) = self.rank {
            cfg.init.rank = r;
        }
        if let Some(v) = self.variant {
            cfg.init.variant = match v {
                VariantArg::ASigma => Variant::ASigma,
                VariantArg::BSigma => Variant::BSigma,
                VariantArg::SplitSqrt => Variant::SplitSqrt,
            };
        }
        if let Some(a) = self.altmin_iters {
            cfg.init.altmin_iters = a;
        }
        if let Some(e) = self.eig_floor {
            cfg.init.eig_floor_ratio = e;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.keep_going |= self.keep_going;
        cfg.emit_codes |= self.emit_codes;
        Ok(cfg)
    }
}

fn write_report(report: &RunReport, format: Format, dest: Option<&Path>) -> CliResult<()> {
    match dest {
        Some(p) => {
            let f = File::create(p).map_err(cloq_core::Error::from)?;
            let mut w = BufWriter::new(f);
            emit_report(report, format.into(), &mut w)?;
            w.flush().map_err(cloq_core::Error::from)?;
        }
        None => emit_report(report, format.into(), io::stdout().lock())?,
    }
    Ok(())
}

fn print_line(text: &str) -> CliResult<()> {
    writeln!(io::stdout().lock(), "{text}").map_err(cloq_core::Error::from)?;
    Ok(())
}

fn is_broken_pipe(e: &CliError) -> bool {
    let core = match e {
        CliError::Core(c) | CliError::Layer { source: c, .. } => c,
        _ => return false,
    };
    matches!(core, cloq_core::Error::Io(io) if io.kind() == io::ErrorKind::BrokenPipe)
}

fn pipeline(args: &PipelineArgs, mode: Mode) -> CliResult<i32> {
    let cfg = args.resolve()?;
    if args.print_config {
        print_line(&cfg.to_json())?;
        return Ok(0);
    }
    let outcome = run(&cfg, mode)?;
    write_report(&outcome.report, args.format, args.report.as_deref())?;
    match outcome.failures.first() {
        Some(_) => {
            for (layer, e) in &outcome.failures {
                eprintln!("skipped layer {layer}: {e}");
            }
            let (layer, source) = outcome.failures.into_iter().next().expect("nonempty");
            Ok(CliError::Layer { layer, source }.exit_code())
        }
        None => Ok(0),
    }
}

fn dispatch(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Quantize(a) => pipeline(&a, Mode::Quantize),
        Command::Init(a) => pipeline(&a, Mode::Init),
        Command::Report { bundle, format, output } => {
            let report = stored_report(&read_bundle_file(&bundle)?)?;
            write_report(&report, format, output.as_deref())?;
            Ok(0)
        }
        Command::Validate { config } => {
            let diags = validate(&config)?;
            for d in &diags {
                print_line(&d.to_string())?;
            }
            Ok(if diags.is_empty() { 0 } else { EXIT_CONFIG })
        }
        Command::Gram { input, output } => {
            let out = precompute_grams(&read_bundle_file(&input)?)?;
            write_bundle_file(&out, &output)?;
            Ok(0)
        }
        Command::Synth {
            output,
            layers,
            m,
            n,
            rows,
            cond,
            seed,
            store_gram,
        } => {
            let spec = SynthSpec {
                layers,
                m,
                n,
                rows,
                cond,
                seed,
                store_gram,
            };
            write_bundle_file(&synth_bundle(&spec)?, &output)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
