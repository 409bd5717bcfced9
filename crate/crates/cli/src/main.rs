//! `cva`: synthesis, two-stage pretraining, probing, gradient checks and
//! rank aggregation.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
//! 3 I/O or file-format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cva_core::rank::Scheme;
use cva_core::train::Stage;
use cva_core::Error;

use commands::PretrainArgs;
use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Core(e) => match e {
                Error::NonFinite(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                _ => 1,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cva",
    version,
    about = "Overlap-aware view alignment for self-supervised 3D pretraining"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic blob volumes, their label maps and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Volume extent as d,h,w.
        #[arg(long, value_parser = parse_dims, default_value = "48,48,48")]
        dims: [usize; 3],
        /// Blobs per volume.
        #[arg(long, default_value_t = 6)]
        blobs: usize,
    },
    /// Run one pretraining stage; writes `stage_<name>.csv` and a checkpoint.
    Pretrain {
        /// Run configuration JSON; unknown keys are rejected. Defaults: `cva config --defaults`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Checkpoint stem to initialise student and teacher from.
        #[arg(long, conflicts_with = "from_scratch")]
        warm_start: Option<PathBuf>,
        /// Allow stage two from random initialisation.
        #[arg(long)]
        from_scratch: bool,
        /// Overrides `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides `paths.out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a linear segmentation probe on frozen features and report per-class DSC.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "probe.csv")]
        out: PathBuf,
    },
    /// Aggregate a model by metric table into seg, cls and overall ranks.
    Rank {
        #[arg(long, value_enum, default_value_t = SchemeArg::Raw)]
        scheme: SchemeArg,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of losses and network ops.
    Gradcheck {
        /// `all` or one target name.
        #[arg(long, default_value = "all")]
        target: String,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the configuration schema or the default configuration.
    Config {
        #[arg(long, conflicts_with = "defaults")]
        schema: bool,
        #[arg(long)]
        defaults: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    One,
    Two,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SchemeArg {
    Raw,
    Range,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected d,h,w, got {} values", v.len()))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default().resolved()?,
    })
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Synth {
            out,
            count,
            seed,
            dims,
            blobs,
        } => {
            let manifest = commands::synth(&out, count, seed, dims, blobs)?;
            println!("wrote {count} volumes, manifest {}", manifest.display());
        }
        Cmd::Pretrain {
            config,
            stage,
            warm_start,
            from_scratch,
            data,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
            };
            let args = PretrainArgs {
                stage,
                warm_start: warm_start.as_deref(),
                from_scratch,
                data: data.as_deref(),
                out: out.as_deref(),
            };
            let o = commands::pretrain(&cfg, &args)?;
            println!("trace {}", o.trace.display());
            println!("checkpoint {}", o.checkpoint.display());
        }
        Cmd::Probe {
            ckpt,
            data,
            config,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let r = commands::probe(&cfg, &ckpt, &data, &out)?;
            println!("mean DSC {:.4}, report {}", r.mean, out.display());
        }
        Cmd::Rank { scheme, input, out } => {
            let scheme = match scheme {
                SchemeArg::Raw => Scheme::Raw,
                SchemeArg::Range => Scheme::RangeWeighted,
            };
            let r = commands::rank_cmd(scheme, &input, &out)?;
            for m in &r.flat_metrics {
                eprintln!("warning: metric {m} has zero range; scored 2 for every model");
            }
            println!("best {} ({scheme}), report {}", r.best(), out.display());
        }
        Cmd::Gradcheck {
            target,
            instances,
            seed,
        } => {
            let reports = commands::gradcheck(&target, instances, seed)?;
            println!("target,instances,passed,max_rel_err,status");
            for r in &reports {
                let status = if r.ok() { "pass" } else { "FAIL" };
                println!(
                    "{},{},{},{:.3e},{status}",
                    r.target, r.instances, r.passed, r.max_rel_err
                );
            }
            if let Some(bad) = reports.iter().find(|r| !r.ok()) {
                let why = bad.failure.clone().unwrap_or_default();
                return Err(CliError::Numerical(format!("gradcheck {} failed: {why}", bad.target)));
            }
        }
        Cmd::Config { schema, defaults } => {
            let doc = if schema {
                config::schema()
            } else if defaults {
                serde_json::to_value(RunConfig::default()).expect("config serializes")
            } else {
                return Err(CliError::Usage("config needs --schema or --defaults".into()));
            };
            println!("{}", serde_json::to_string_pretty(&doc).expect("json serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
