//! Command-line harness: configuration, checkpoints, experiment protocols.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod protocol;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use deiqt::{Error, Precision, Result};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use protocol::Mode;

#[derive(Debug, Parser)]
#[command(name = "deiqt", version, about = "Blind image quality assessment with a transformer encoder-decoder")]
pub struct Cli {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = ["32", "64"])]
    pub precision: Option<String>,
    /// Extra config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus as PPM files plus `manifest.csv`.
    GenData,
    /// Train, checkpoint and report train/test correlations.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        decay_every: Option<usize>,
        /// Continue from a checkpoint's parameters, moments and step.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on any manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Repeated-split experiments.
    Protocol {
        /// repeats, data-efficiency, depth-ablation or component-ablation
        mode: String,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Finite-difference gradient check of the configured model (64-bit).
    Gradcheck,
    /// Cosine similarity between panel quality embeddings.
    PanelSim {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Cross-attention map of the CLS-driven queries over one image.
    AttnMap {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// PPM or PGM file; defaults to the first manifest image.
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn effective_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.set("precision", p)?;
        }
        match &self.command {
            Command::Train {
                epochs, decay_every, ..
            } => {
                if let Some(e) = epochs {
                    cfg.train.epochs = *e;
                }
                if let Some(d) = decay_every {
                    cfg.train.decay_every_epochs = *d;
                }
            }
            Command::Protocol { repeats: Some(r), .. } => cfg.repeats = *r,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

macro_rules! dispatch {
    ($prec:expr, $f:ident ( $($arg:expr),* )) => {
        match $prec {
            Precision::F32 => commands::$f::<f32>($($arg),*),
            Precision::F64 => commands::$f::<f64>($($arg),*),
        }
    };
}

/// Runs one parsed invocation and returns its stdout text.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = cli.effective_config()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let out = out.as_path();
    let prec = cfg.train.precision;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, out),
        Command::Train { manifest, resume, .. } => {
            let args = commands::TrainArgs {
                manifest: manifest.clone(),
                resume: resume.clone(),
            };
            dispatch!(prec, train(&cfg, out, &args))
        }
        Command::Eval { checkpoint, manifest } => {
            dispatch!(prec, eval(&cfg, out, checkpoint, manifest.as_deref()))
        }
        Command::Protocol { mode, manifest, .. } => {
            let mode: Mode = mode.parse()?;
            dispatch!(prec, protocol(&cfg, out, mode, manifest.as_deref()))
        }
        Command::Gradcheck => commands::gradcheck(&cfg, out),
        Command::PanelSim { checkpoint, manifest } => {
            dispatch!(prec, panel_sim(&cfg, out, checkpoint.as_deref(), manifest.as_deref()))
        }
        Command::AttnMap { checkpoint, image } => {
            dispatch!(prec, attn_map(&cfg, out, checkpoint.as_deref(), image.as_deref()))
        }
    }
}

/// `error kind=<kind> message="<text>"` on one line.
pub fn error_line(kind: &str, message: &str) -> String {
    let flat: String = message
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .replace('\\', "\\\\")
        .replace('"', "\\\"");
    format!("error kind={kind} message=\"{flat}\"")
}

pub fn describe(e: &Error) -> String {
    error_line(e.kind(), &e.to_string())
}
