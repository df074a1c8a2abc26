//! Command-line front end. `run` parses arguments, dispatches and maps
//! errors to exit codes: 0 success, 1 usage or invalid argument, 2 bad or
//! missing data, 3 numerical failure.

pub mod commands;
pub mod config;
pub mod overlay;
pub mod synth;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use sonokey::eval::TsneConfig;
use sonokey::training::TrainConfig;
use sonokey::{Error, Result};

use commands::{ClassifyConfig, EvalConfig, InferConfig};

#[derive(Debug, Parser)]
#[command(name = "sonokey", version, about = "Unsupervised keypoints for ultrasound-like video")]
pub struct Cli {
    /// JSON config for the chosen command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Run directory; defaults to `out/<command>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// `key.path=value`, value parsed as JSON when possible. Repeatable.
    #[arg(long = "override", global = true)]
    pub overrides: Vec<String>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic videos described by --config.
    Synth,
    /// Compute and cache input maps for every frame.
    Preprocess { data: PathBuf },
    Train {
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect keypoints in every frame.
    Infer {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score keypoints against masks and tracks.
    Eval {
        data: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
    },
    /// Pooled feature vectors per frame.
    Embed {
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// 2-D map of an `embed` run directory.
    Tsne { embeddings: PathBuf },
    /// kNN co-classification of a labelled point CSV.
    Classify { points: PathBuf },
    /// Finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval { .. } => "eval",
            Command::Embed { .. } => "embed",
            Command::Tsne { .. } => "tsne",
            Command::Classify { .. } => "classify",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else if e.is_data_error() {
        2
    } else {
        1
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| Path::new("out").join(cli.command.name()));
    let cfg_path = cli.config.as_deref();
    let ov = &cli.overrides;
    if cli.workers == 0 {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Synth => {
            let path = cfg_path.ok_or_else(|| Error::InvalidArgument("synth needs --config".into()))?;
            let text = fs::read_to_string(path).map_err(commands::io_err(path))?;
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
                kind: "config",
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
            for o in ov {
                let (k, v) = config::parse_override(o)?;
                config::apply_override(&mut value, &k, v)?;
            }
            let cfg = synth::parse(value)?;
            let offset = cli.seed.unwrap_or(0);
            let videos = synth::write_dataset(&cfg, offset, &out)?;
            commands::write_run_record(&out, "synth", &cfg, json!({"seed_offset": offset}), &["labels.json"])?;
            log::info!("wrote {} videos to {}", videos.len(), out.display());
            Ok(())
        }
        Command::Preprocess { data } => {
            let cfg: TrainConfig = config::load(cfg_path, ov)?;
            commands::preprocess(data, &cfg, cli.workers, &out).map(|_| ())
        }
        Command::Train { data, epochs, resume } => {
            let mut cfg: TrainConfig = config::load(cfg_path, ov)?;
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            commands::train_cmd(data, &cfg, cli.workers, &out, resume.as_deref())
        }
        Command::Infer { data, checkpoint } => {
            let cfg: InferConfig = config::load(cfg_path, ov)?;
            commands::infer(data, checkpoint, &cfg, &out)
        }
        Command::Eval { data, keypoints } => {
            let cfg: EvalConfig = config::load(cfg_path, ov)?;
            let report = commands::eval_cmd(data, keypoints, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Embed { data, checkpoint } => {
            let cfg: InferConfig = config::load(cfg_path, ov)?;
            commands::embed(data, checkpoint, &cfg, &out).map(|_| ())
        }
        Command::Tsne { embeddings } => {
            let mut cfg: TsneConfig = config::load(cfg_path, ov)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            commands::tsne_cmd(embeddings, &cfg, &out)
        }
        Command::Classify { points } => {
            let mut cfg: ClassifyConfig = config::load(cfg_path, ov)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let rep = commands::classify_cmd(points, &cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(())
        }
        Command::Gradcheck { instances } => {
            let seed = cli.seed.unwrap_or(0);
            let rep = sonokey::gradsuite::run(seed, *instances)?;
            commands::write_run_record(
                &out,
                "gradcheck",
                &json!({"seed": seed, "instances": instances}),
                json!({}),
                &["gradcheck.json"],
            )?;
            let mut stable = serde_json::to_value(&rep)?;
            // Wall time would make the file differ between identical runs.
            if let Some(o) = stable.as_object_mut() {
                o.remove("elapsed_ms");
            }
            commands::write(&out.join("gradcheck.json"), &serde_json::to_vec_pretty(&stable)?)?;
            println!("gradcheck: {} ({} cases, {} ms)", if rep.passed { "pass" } else { "FAIL" }, rep.cases.len(), rep.elapsed_ms);
            if rep.passed {
                Ok(())
            } else {
                Err(Error::InvalidArgument("gradient check failed".into()))
            }
        }
    }
}
