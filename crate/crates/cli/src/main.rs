use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use volcon::eval::render_table;
use volcon::pipeline::{self, RunConfig};
use volcon::train::PairStrategy;
use volcon::volume::{assign_volume_labels, generate_synthetic_volume, load_amplitude, save_amplitude, save_labels, SyntheticConfig};
use volcon::{Error, Result};

mod plot;

#[derive(Debug, Parser)]
#[command(name = "volcon", version, about = "Volume-label contrastive pretraining for seismic facies segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write straight into --out instead of a fresh run-<timestamp> directory.
    #[arg(long)]
    overwrite: bool,
    /// Seed for both stages.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    VolumeLabels,
    Simclr,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Plot,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the partition label of every cross-line as JSON.
    MakeLabels {
        #[arg(long)]
        train_volume: PathBuf,
        #[arg(long)]
        num_partitions: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Stage 1: contrastive pretraining of encoder + projection head.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        pair_strategy: Option<Strategy>,
        #[arg(long)]
        num_partitions: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip training and store the randomly initialised encoder.
        #[arg(long)]
        random_init: bool,
    },
    /// Stage 2: train a segmentation head on the frozen pretrained encoder.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretrain checkpoint; defaults to the newest one under the output root.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a fine-tuned checkpoint on the test splits.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Fine-tune checkpoint; defaults to the newest one under the output root.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate a layered synthetic amplitude/label volume pair.
    Synth {
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// inline,crossline,depth
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 64])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        dip: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Summarise evaluated runs as a method / N / MIOU table.
    Report {
        /// Run directory or a parent of run directories; repeatable.
        #[arg(long = "run-dir", required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Where plot images go; defaults to the first run dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn fresh_dir(root: &Path, overwrite: bool) -> Result<PathBuf> {
    let dir = if overwrite {
        root.to_path_buf()
    } else {
        let stamp = chrono::Local::now().format("run-%Y%m%d-%H%M%S-%3f").to_string();
        let mut dir = root.join(&stamp);
        let mut k = 1;
        while dir.exists() {
            dir = root.join(format!("{stamp}-{k}"));
            k += 1;
        }
        dir
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Newest `run-*` directory under `root` (or `root` itself) holding `file`.
fn latest_artifact(root: &Path, file: &str) -> Result<PathBuf> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("run-")))
        .collect();
    dirs.sort();
    dirs.insert(0, root.to_path_buf());
    dirs.into_iter()
        .rev()
        .map(|d| d.join(file))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingArtifact(root.join(file)))
}

fn load_config(run: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.pretrain.seed = seed;
        cfg.finetune.seed = seed;
    }
    let root = run.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = root.clone();
    Ok((cfg, root))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeLabels {
            train_volume,
            num_partitions,
            out,
            overwrite,
        } => {
            if out.exists() && !overwrite {
                return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", out.display())));
            }
            if !train_volume.exists() {
                return Err(Error::MissingArtifact(train_volume));
            }
            let vol = load_amplitude::<f32>(&train_volume)?;
            let labels = assign_volume_labels(vol.num_crosslines(), num_partitions)?;
            let json = serde_json::to_string_pretty(&labels).expect("labels serialize");
            fs::write(&out, json).map_err(|e| Error::io(&out, e))?;
            println!("{}", out.display());
        }
        Command::Pretrain {
            run,
            pair_strategy,
            num_partitions,
            epochs,
            random_init,
        } => {
            let (mut cfg, root) = load_config(&run)?;
            if let Some(s) = pair_strategy {
                cfg.pretrain.pair_strategy = match s {
                    Strategy::VolumeLabels => PairStrategy::VolumeLabels,
                    Strategy::Simclr => PairStrategy::Simclr,
                };
            }
            if num_partitions.is_some() {
                cfg.pretrain.num_partitions = num_partitions;
            }
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            cfg.validate()?;
            let dir = fresh_dir(&root, run.overwrite)?;
            pipeline::run_pretrain::<f32>(&cfg, &dir, random_init)?;
            println!("{}", dir.display());
        }
        Command::Finetune { run, checkpoint, epochs } => {
            let (mut cfg, root) = load_config(&run)?;
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            cfg.validate()?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => latest_artifact(&root, pipeline::PRETRAIN_CKPT)?,
            };
            let dir = fresh_dir(&root, run.overwrite)?;
            pipeline::run_finetune::<f32>(&cfg, &dir, &ckpt)?;
            println!("{}", dir.display());
        }
        Command::Evaluate { run, checkpoint } => {
            let (cfg, root) = load_config(&run)?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => latest_artifact(&root, pipeline::FINETUNE_CKPT)?,
            };
            let dir = fresh_dir(&root, run.overwrite)?;
            let summary = pipeline::run_evaluate::<f32>(&cfg, &dir, &ckpt)?;
            eprint!("{}", render_table(std::slice::from_ref(&summary)));
            println!("{}", dir.display());
        }
        Command::Synth {
            layers,
            dims,
            dip,
            noise,
            seed,
            out,
            overwrite,
        } => {
            if dims.len() != 3 {
                return Err(Error::Config(format!("--dims needs inline,crossline,depth; got {dims:?}")));
            }
            let cfg = SyntheticConfig {
                layers,
                dims: (dims[0], dims[1], dims[2]),
                dip,
                noise,
                seed,
            };
            let (amp, labels) = generate_synthetic_volume::<f32>(&cfg)?;
            let dir = fresh_dir(&out, overwrite)?;
            save_amplitude(dir.join("amplitude.npy"), &amp)?;
            save_labels(dir.join("labels.npy"), &labels)?;
            println!("{}", dir.display());
        }
        Command::Report { run_dirs, format, out } => {
            let mut rows = Vec::new();
            for d in &run_dirs {
                rows.extend(pipeline::collect_summaries(d)?);
            }
            match format {
                Format::Text => {
                    let summaries: Vec<_> = rows.into_iter().map(|(_, s)| s).collect();
                    print!("{}", render_table(&summaries));
                }
                Format::Json => {
                    let summaries: Vec<_> = rows.into_iter().map(|(_, s)| s).collect();
                    println!("{}", serde_json::to_string_pretty(&summaries).expect("summaries serialize"));
                }
                Format::Plot => {
                    let out = out.unwrap_or_else(|| run_dirs[0].clone());
                    for p in plot::write_plots(&run_dirs, &rows, &out)? {
                        println!("{}", p.display());
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
