//! `stvg`: train, evaluate and run the grounding model from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use stvg_core::config::{DatasetConfig, DatasetKind, RunConfig};
use stvg_core::data::frames::load_clip;
use stvg_core::data::synthetic::{generate_synthetic, SyntheticSpec, FRAME_RATE};
use stvg_core::data::{load_dataset, TubeJson};
use stvg_core::harness::{
    ablation_matrix, evaluate_manifest, infer, train, visualize, Checkpoint, EvalSettings,
    InferOptions,
};
use stvg_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "stvg", version, about = "Spatio-temporal video grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (directory or file, depending on the command).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the dataset root.
    #[arg(long, env = "STVG_DATA_ROOT")]
    data_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Vidstg,
    Hcstvg,
    Youcook,
    Synthetic,
}

impl From<Kind> for DatasetKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Vidstg => DatasetKind::Vidstg,
            Kind::Hcstvg => DatasetKind::Hcstvg,
            Kind::Youcook => DatasetKind::Youcook,
            Kind::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and `loss.jsonl` under the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset and print the metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset kind; defaults to the one the checkpoint was trained on.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        #[arg(long)]
        split: Option<String>,
        /// HC-STVG version (1 or 2).
        #[arg(long)]
        version: Option<u8>,
    },
    /// Ground a caption in a directory of frames and print the tube JSON.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of PNG frames.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        video_id: Option<String>,
        /// Include the start/end distributions in the output.
        #[arg(long)]
        distributions: bool,
    },
    /// Draw a tube's boxes onto its frames.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Tube JSON as written by `infer`.
        #[arg(long)]
        tube: PathBuf,
        #[arg(long)]
        video: PathBuf,
    },
    /// Generate a synthetic moving-shapes dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator settings (JSON); defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Write the ablation ladder as runnable configs.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also train every row.
        #[arg(long)]
        run: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NumericalAbort { .. }) => EXIT_NUMERICAL,
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(_) => EXIT_DATA,
        None if e.downcast_ref::<std::io::Error>().is_some() => EXIT_DATA,
        None => EXIT_USAGE,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let (Some(root), Some(ds)) = (&common.data_root, cfg.dataset.as_mut()) {
        ds.root = root.clone();
    }
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            log::info!("wrote {}", p.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, epochs } => {
            let mut cfg = load_config(&common)?;
            if epochs.is_some() {
                cfg.epochs = epochs;
            }
            if cfg.dataset.is_none() {
                bail!(Error::Config(
                    "the run config needs a [dataset] section".into()
                ));
            }
            let outcome = train(&cfg, None)?;
            let last = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
            log::info!(
                "finished {} steps, final loss {last:.5}; checkpoint at {}",
                outcome.history.len(),
                outcome.final_checkpoint.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            kind,
            split,
            version,
        } => {
            let ckpt = Checkpoint::open(&checkpoint)?;
            let trained_on = ckpt.meta.config.dataset.clone();
            let ds = DatasetConfig {
                kind: kind
                    .map(DatasetKind::from)
                    .or(trained_on.as_ref().map(|d| d.kind))
                    .unwrap_or(DatasetKind::Synthetic),
                root: common
                    .data_root
                    .clone()
                    .or(trained_on.as_ref().map(|d| d.root.clone()))
                    .context("no data root: pass --data-root or set STVG_DATA_ROOT")?,
                split: split.unwrap_or_else(|| "test".into()),
                version: version.or(trained_on.and_then(|d| d.version)),
            };
            let model = ckpt.load_model()?;
            let tokenizer = ckpt.tokenizer()?;
            let strict = model.config().strict_interval;
            let manifest = load_dataset(ds.kind, &ds.root, &ds.split, ds.version, strict)?;
            let report = evaluate_manifest(
                &model,
                &tokenizer,
                &manifest,
                &ds.root,
                &EvalSettings::for_dataset(ds.kind),
            )?;
            write_output(
                common.out.as_deref(),
                &serde_json::to_string_pretty(&report)?,
            )?;
        }
        Command::Infer {
            common,
            checkpoint,
            video,
            caption,
            video_id,
            distributions,
        } => {
            let ckpt = Checkpoint::open(&checkpoint)?;
            let model = ckpt.load_model()?;
            let tokenizer = ckpt.tokenizer()?;
            let clip = load_clip(&video, FRAME_RATE)?;
            let id = video_id.unwrap_or_else(|| {
                video
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default()
            });
            let opts = InferOptions {
                dump_distributions: distributions,
            };
            let tube = infer(&model, &tokenizer, &clip, &id, &caption, &opts)?;
            write_output(common.out.as_deref(), &serde_json::to_string_pretty(&tube)?)?;
        }
        Command::Visualize {
            common,
            tube,
            video,
        } => {
            let out = common
                .out
                .ok_or_else(|| Error::Config("visualize needs --out".into()))?;
            let text = std::fs::read_to_string(&tube).map_err(|e| Error::Io {
                path: tube.clone(),
                source: e,
            })?;
            let tube: TubeJson = serde_json::from_str(&text).map_err(Error::from)?;
            let clip = load_clip(&video, FRAME_RATE)?;
            if (clip.width(), clip.height()) != (tube.width, tube.height) {
                return Err(Error::Data(format!(
                    "tube is for {}x{} frames, video is {}x{}",
                    tube.width,
                    tube.height,
                    clip.width(),
                    clip.height()
                ))
                .into());
            }
            let files = visualize(&tube.to_tube()?, &clip, &out)?;
            log::info!("wrote {} overlays to {}", files.len(), out.display());
        }
        Command::Synth {
            common,
            spec,
            videos,
            frames,
        } => {
            let out = common
                .out
                .ok_or_else(|| Error::Config("synth needs --out".into()))?;
            let mut s = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Error::Io { path: p, source: e })?;
                    serde_json::from_str(&text).map_err(Error::from)?
                }
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = common.seed {
                s.seed = seed;
            }
            if let Some(n) = videos {
                s.n_videos = n;
            }
            if let Some(t) = frames {
                s.num_frames = t;
            }
            let ds = generate_synthetic(&s)?;
            ds.write(&out)?;
            log::info!("wrote {} videos to {}", ds.videos.len(), out.display());
        }
        Command::Ablate { common, run } => {
            let base = load_config(&common)?;
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| base.output_dir.join("ablation"));
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for (i, row) in ablation_matrix(&base).into_iter().enumerate() {
                let mut cfg = row.config;
                cfg.output_dir = out.join(format!("row_{}", i + 1));
                let path = out.join(format!("row_{}.toml", i + 1));
                let text = format!("# {}\n{}", row.name, cfg.to_toml_string()?);
                std::fs::write(&path, text).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                println!("{}\t{}", path.display(), row.name);
                if run {
                    let outcome = train(&cfg, None)?;
                    log::info!(
                        "{}: checkpoint at {}",
                        row.name,
                        outcome.final_checkpoint.display()
                    );
                }
            }
        }
    }
    Ok(())
}
