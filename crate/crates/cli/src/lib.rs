//! Command-line front end for the temporal segmentation pipeline.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tempseg", version, about = "Temporal attention-in-attention segmentation of ultrasound sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset to --out.
    Generate,
    /// Train a single-target model on `dataset`; resume with --checkpoint.
    Train,
    /// Predict every sequence of `dataset` with --checkpoint.
    Infer,
    /// Score `predictions` against `dataset`.
    Eval,
    /// Run the clustering catheter baseline on `dataset`.
    Baseline,
}

#[derive(Debug, Default, Args)]
pub struct Opts {
    /// key=value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output root; every file a command writes lands under it.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// aorta | catheter
    #[arg(long, global = true)]
    pub target: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub predictions: Option<PathBuf>,
    /// Override any config key, e.g. `--set max_steps=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Opts {
    /// Config file (or defaults), then `--set` overrides, then the dedicated
    /// flags.
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(t) = &self.target {
            cfg.set("target", t)?;
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(p) = &self.predictions {
            cfg.predictions = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.opts.resolve()?;
    match cli.command {
        Command::Generate => commands::generate(&cfg).map(drop),
        Command::Train => commands::train(&cfg).map(drop),
        Command::Infer => commands::infer(&cfg).map(drop),
        Command::Eval => commands::eval(&cfg).map(drop),
        Command::Baseline => commands::baseline(&cfg).map(drop),
    }
}

/// Maps a failure to the process exit code: 2 for configuration problems,
/// 4 for non-finite numbers, 3 for anything wrong with the data on disk.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<tempseg_core::Error>() {
            return match e {
                tempseg_core::Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
