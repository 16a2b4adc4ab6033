//! `fetnet` command-line entry point.
//!
//! Every command writes into a fresh `<root>/<command>-<timestamp>` directory,
//! where `<root>` comes from `--output-root` or `FETNET_OUTPUT_ROOT`, and
//! stores the resolved configuration there as `config.toml`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fetnet::datagen::{generate_triplet, write_dataset, Manifest, ManifestEntry, SceneSpec};
use fetnet::harness::{
    ablate, create_run_dir, evaluate, infer_image, load_checkpoint, load_training_data, train, write_ablation_csv,
    write_eval_csv, write_inference, write_resolved_config, DataConfig, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV,
};
use fetnet::{AblationVariant, DType, Device, Image, Preset, TrainConfig};

#[derive(Parser, Debug)]
#[command(
    name = "fetnet",
    version,
    about = "Scene text removal with feature erasing and transferring"
)]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of (input, ground truth, mask) triplets.
    GenData(GenDataArgs),
    /// Train a generator and discriminator.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Remove text from one image.
    Infer(InferArgs),
    /// Train and score several generator variants under identical settings.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    n_texts: usize,
    #[arg(long, default_value_t = 1000)]
    seed: u64,
}

/// Training settings shared by `train` and `ablate`: a TOML file plus
/// per-field overrides.
#[derive(Args, Debug)]
struct TrainOverrides {
    /// TOML training configuration; preset defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `toy` or `full`; selects defaults when no config file is given.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    g_lr: Option<f64>,
    #[arg(long)]
    d_lr: Option<f64>,
    /// Dataset directory; synthetic data is generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of synthetic triplets.
    #[arg(long)]
    data_count: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    nondeterministic: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Ablation variant id.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; synthetic data is generated when absent.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2000)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Also write input/output channel grids of every FET layer.
    #[arg(long)]
    dump_features: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Comma-separated variant ids.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "full,no_fem,no_ftm,no_similarity,output_mask"
    )]
    variants: Vec<String>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct AblateRecord<'a> {
    variants: Vec<&'a str>,
    seeds: &'a [u64],
    train: &'a TrainConfig,
}

fn parse_preset(s: &str) -> Result<Preset> {
    match s {
        "toy" => Ok(Preset::Toy),
        "full" => Ok(Preset::Full),
        _ => bail!("unknown preset {s:?}; expected toy or full"),
    }
}

fn resolve_train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let mut c = match (&o.config, &o.preset) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(p)) => TrainConfig::for_preset(parse_preset(p)?),
        (None, None) => TrainConfig::toy(),
    };
    if let (Some(_), Some(p)) = (&o.config, &o.preset) {
        c.preset = parse_preset(p)?;
    }
    if let Some(v) = o.steps {
        c.steps = v;
    }
    if let Some(v) = o.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = o.image_size {
        c.image_size = v;
    }
    if let Some(v) = o.seed {
        c.seed = v;
    }
    if let Some(v) = o.g_lr {
        c.optimizer.g_lr = v;
    }
    if let Some(v) = o.d_lr {
        c.optimizer.d_lr = v;
    }
    if let Some(v) = &o.data_dir {
        c.data.dir = Some(v.clone());
    }
    if let Some(v) = o.data_count {
        c.data.count = v;
    }
    if let Some(v) = o.checkpoint_every {
        c.checkpoint_every = v;
    }
    if o.nondeterministic {
        c.deterministic = false;
    }
    Ok(c)
}

fn gen_data(args: &GenDataArgs, dir: &Path) -> Result<()> {
    write_resolved_config(dir, args)?;
    let mut triplets = Vec::with_capacity(args.count);
    let mut entries = Vec::with_capacity(args.count);
    for i in 0..args.count as u64 {
        let spec = SceneSpec::seeded(args.seed + i, (args.size, args.size), args.n_texts);
        let t = generate_triplet(&spec)?;
        entries.push(ManifestEntry {
            file: format!("{}.png", t.id),
            spec,
        });
        triplets.push(t);
    }
    let manifest = Manifest {
        generator: format!("fetnet {}", env!("CARGO_PKG_VERSION")),
        entries,
    };
    let data_dir = dir.join("data");
    write_dataset(&data_dir, &triplets, Some(&manifest))?;
    println!("{}", data_dir.display());
    Ok(())
}

fn run_train(args: &TrainArgs, dir: &Path) -> Result<()> {
    let mut config = resolve_train_config(&args.overrides)?;
    if let Some(v) = &args.variant {
        config.variant = AblationVariant::parse(v)?;
    }
    config.validate()?;
    write_resolved_config(dir, &config)?;
    let data = load_training_data(&config.data, config.image_size)?;
    let outcome = train(&config, data, dir)?;
    if let Some(last) = outcome.records.last() {
        log::info!("final step {} total loss {:.6}", last.step, last.total);
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn run_eval(args: &EvalArgs, dir: &Path) -> Result<()> {
    write_resolved_config(dir, args)?;
    let loaded = load_checkpoint(&args.checkpoint, DType::F32, &Device::Cpu)?;
    let data = load_training_data(
        &DataConfig {
            dir: args.data_dir.clone(),
            count: args.count,
            seed: args.seed,
            ..DataConfig::default()
        },
        args.size,
    )?;
    let outcome = evaluate(&loaded.generator, &data)?;
    let path = dir.join("eval.csv");
    write_eval_csv(&path, &outcome)?;
    println!("{}", path.display());
    Ok(())
}

fn run_infer(args: &InferArgs, dir: &Path) -> Result<()> {
    write_resolved_config(dir, args)?;
    let loaded = load_checkpoint(&args.checkpoint, DType::F32, &Device::Cpu)?;
    let image = Image::load_png(&args.image)?;
    if image.channels() != 3 {
        bail!(
            "{} has {} channels; expected RGB",
            args.image.display(),
            image.channels()
        );
    }
    let inference = infer_image(&loaded.generator, &image, args.dump_features)?;
    let stem = args.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    for path in write_inference(dir, stem, &inference)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn run_ablate(args: &AblateArgs, dir: &Path) -> Result<()> {
    let config = resolve_train_config(&args.overrides)?;
    config.validate()?;
    let variants = args
        .variants
        .iter()
        .map(|v| AblationVariant::parse(v))
        .collect::<fetnet::Result<Vec<_>>>()?;
    let record = AblateRecord {
        variants: variants.iter().map(|v| v.id()).collect(),
        seeds: &args.seeds,
        train: &config,
    };
    write_resolved_config(dir, &record)?;
    let data = load_training_data(&config.data, config.image_size)?;
    let rows = ablate(&config, &variants, &args.seeds, &data, dir)?;
    let path = dir.join("ablation.csv");
    write_ablation_csv(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let root = cli
        .output_root
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    let name = match &cli.command {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Infer(_) => "infer",
        Command::Ablate(_) => "ablate",
    };
    let dir =
        create_run_dir(&root, name).with_context(|| format!("creating run directory under {}", root.display()))?;
    log::info!("writing to {}", dir.display());
    match &cli.command {
        Command::GenData(a) => gen_data(a, &dir),
        Command::Train(a) => run_train(a, &dir),
        Command::Eval(a) => run_eval(a, &dir),
        Command::Infer(a) => run_infer(a, &dir),
        Command::Ablate(a) => run_ablate(a, &dir),
    }
}
