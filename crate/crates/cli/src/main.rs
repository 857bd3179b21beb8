//! `vqtok`: command line front end of the tokenizer pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 contract
//! violation (missing or mismatched artifacts), 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vqtok::data::{toy_dataset, write_image_folder};
use vqtok::pipeline::{self, Grid, Layout, PipelineConfig, Preset, StageRun};
use vqtok::transformers::ModelKind;
use vqtok::{Error, ErrorKind};

const DATA_ROOT_ENV: &str = "VQTOK_DATA_ROOT";

#[derive(Debug, Parser)]
#[command(name = "vqtok", version, about = "Vector-quantized image tokenizer pipeline")]
struct Cli {
    /// TOML configuration; keys it omits keep the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given (desk, quick).
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for every artifact.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `dotted.key=value`, applied in order after the configuration file.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Base directory for relative image folders and label manifests.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the procedural toy set as a PNG folder with labels.csv.
    MakeToy {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 4000)]
        images: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Resizes, normalises and splits an image folder into the data store.
    Ingest {
        #[arg(long)]
        folder: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        val_fraction: Option<f64>,
    },
    /// Trains the proxy feature classifier.
    TrainProxy {
        /// Freeze the proxy even if it misses the accuracy floor.
        #[arg(long)]
        force: bool,
    },
    /// Phase-1 tokenizer training.
    TrainTokenizer,
    /// Phase-2 finetuning of the attention-enhanced decoder.
    FinetuneDecoder,
    TrainTransformer {
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
    },
    Sample {
        #[arg(long, value_parser = parse_kind)]
        kind: ModelKind,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Renders input, reconstruction and teacher-forced prediction.
    Visualize,
    /// rFID, usage, generation FID and IS into the results ledger.
    Evaluate,
    /// Runs an ablation grid: usage, semloss or alpha.
    Ablate {
        #[arg(value_parser = parse_grid)]
        grid: Grid,
    },
    /// Every stage from ingestion to evaluation.
    Pipeline,
    /// Prints the resolved configuration.
    ShowConfig,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Contract => 2,
        ErrorKind::Numeric => 3,
    }
}

fn under_root(root: Option<&Path>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_toml(&text)?
        }
        None => PipelineConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    for o in &cli.overrides {
        cfg = cfg.apply_override(o)?;
    }
    let root = cli.data_root.as_deref();
    cfg.data.folder = cfg.data.folder.map(|f| under_root(root, &f));
    cfg.data.labels = cfg.data.labels.map(|f| under_root(root, &f));
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn finish(layout: &Layout, cfg: &PipelineConfig, run: &StageRun) -> Result<(), Error> {
    let path = pipeline::write_run_manifest(layout, cfg, run)?;
    for (k, v) in &run.summary {
        println!("{k}: {v}");
    }
    println!("manifest: {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Command::MakeToy { dir, images, size } = &cli.command {
        let seed = cli.seed.unwrap_or(0);
        let ds = toy_dataset(*images, *size, vqtok::rng::derive_seed(seed, "toy"))?;
        write_image_folder(&ds, dir)?;
        println!("wrote {images} images to {}", dir.display());
        return Ok(());
    }
    let mut cfg = load_config(&cli)?;
    let layout = Layout::new(&cli.out);
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::MakeToy { .. } => unreachable!(),
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::Ingest {
            folder,
            labels,
            val_fraction,
        } => {
            if let Some(f) = folder {
                cfg.data.folder = Some(under_root(root, &f));
            }
            if let Some(l) = labels {
                cfg.data.labels = Some(under_root(root, &l));
            }
            if let Some(v) = val_fraction {
                cfg.data.val_fraction = v;
            }
            let r = pipeline::stage_ingest(&cfg, &layout)?;
            finish(&layout, &cfg, &r)?;
        }
        Command::TrainProxy { force } => {
            cfg.proxy.force |= force;
            let r = pipeline::stage_proxy(&cfg, &layout)?;
            finish(&layout, &cfg, &r)?;
        }
        Command::TrainTokenizer => finish(&layout, &cfg, &pipeline::stage_phase1(&cfg, &layout)?)?,
        Command::FinetuneDecoder => finish(&layout, &cfg, &pipeline::stage_phase2(&cfg, &layout)?)?,
        Command::TrainTransformer { kind } => {
            finish(&layout, &cfg, &pipeline::stage_transformer(&cfg, &layout, kind)?)?
        }
        Command::Sample { kind, count } => {
            if let Some(c) = count {
                cfg.sample.count = c;
            }
            finish(&layout, &cfg, &pipeline::stage_sample(&cfg, &layout, kind)?)?
        }
        Command::Visualize => finish(&layout, &cfg, &pipeline::stage_visualize(&cfg, &layout)?)?,
        Command::Evaluate => {
            let (r, _) = pipeline::stage_evaluate(&cfg, &layout)?;
            finish(&layout, &cfg, &r)?;
        }
        Command::Ablate { grid } => {
            let (r, rows) = pipeline::stage_ablate(&cfg, &layout, grid)?;
            print!("{}", pipeline::ablation_table(&rows));
            finish(&layout, &cfg, &r)?;
        }
        Command::Pipeline => {
            for r in pipeline::run_all(&cfg, &layout)? {
                println!("[{}]", r.name);
                for (k, v) in &r.summary {
                    println!("  {k}: {v}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
