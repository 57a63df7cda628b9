//! `dbenet`: synthetic data generation, teacher pretraining, weight transfer,
//! fine-tuning, registration, evaluation and verification.
//!
//! [`run`] executes one command line in-process, writing what the binary
//! would print to stdout into the supplied writer.

pub mod commands;
pub mod config;
pub mod exit;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
pub use crate::exit::Failure;

#[derive(Parser, Debug)]
#[command(name = "dbenet", version, about = "Dual-branch point cloud descriptors and registration")]
pub struct Cli {
    /// JSON config file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic fragment pairs with a manifest.
    GenSynth {
        /// match (overlap 0.4 to 0.8) or lomatch (0.1 to 0.3).
        #[arg(long, default_value = "match")]
        preset: String,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the auxiliary-modality teacher and write its checkpoint.
    PretrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a student initialized from teacher weights.
    Transfer {
        #[arg(long)]
        teacher: PathBuf,
        /// Parameter groups to copy: enc, dec, att joined by `+`. `auto`
        /// copies enc+dec, plus att when the teacher's attention shapes match.
        #[arg(long, default_value = "auto")]
        scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a student with part of its parameters frozen.
    Finetune(FinetuneArgs),
    /// Register two clouds and print the estimated transform.
    Register {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Register every manifest pair and write the benchmark report.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// `all` or a single op or network name.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Gradient checks plus oracle and format checks.
    Selftest,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    init: PathBuf,
    /// enc, enc+att, enc+att+dec, enc+dec or none.
    #[arg(long, default_value = "enc+dec")]
    freeze: String,
    /// Distillation against `--teacher`: kl, l1 or off.
    #[arg(long, default_value = "off")]
    kd: String,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs a parsed command line.
pub fn execute(cli: Cli, w: &mut dyn Write) -> Result<(), Failure> {
    let base = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynth { preset, pairs, out } => commands::gen_synth(w, base.finish(cli.seed)?, &preset, pairs, out),
        Command::PretrainTeacher { data, epochs, out } => {
            let mut cfg = base;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::pretrain_teacher(w, cfg.finish(cli.seed)?, &data, out)
        }
        Command::Transfer { teacher, scope, out } => commands::transfer(w, base.finish(cli.seed)?, &teacher, &scope, out),
        Command::Finetune(a) => {
            let mut cfg = base;
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.train.adam.lr = lr;
            }
            commands::set_kd(&mut cfg, &a.kd)?;
            let cfg = cfg.finish(cli.seed)?;
            commands::finetune(w, cfg, &a.data, &a.init, &a.freeze, a.teacher.as_deref(), a.out)
        }
        Command::Register { src, dst, ckpt } => commands::register(w, base.finish(cli.seed)?, &src, &dst, &ckpt),
        Command::Evaluate { manifest, ckpt, out } => commands::evaluate(w, base.finish(cli.seed)?, &manifest, &ckpt, out),
        Command::Gradcheck { scope } => commands::gradcheck(w, &scope),
        Command::Selftest => commands::selftest(w),
    }
}

/// Parses `args` (program name first) and runs the command. Usage errors
/// map to the configuration exit code.
pub fn run<I, T>(args: I, w: &mut dyn Write) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Failure::new(exit::CONFIG, e.to_string()))?;
    execute(cli, w)
}
