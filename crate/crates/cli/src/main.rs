use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use querymamba::dataio::{generate_dataset, generate_world_with, Dataset, SyntheticWorldSpec, WORLD_FILE};
use querymamba::interaction::{build_cooccurrence, build_taxonomy, ActionTaxonomy, CooccurrenceMatrix, DecodeMode};
use querymamba::metrics::{evaluate_dataset, read_predictions, write_predictions};
use querymamba::pipeline::{
    build_examples, checkpoint_scalar, infer, run_action_loss_ablation, train, truths, write_loss_curve, Checkpoint,
    InferOptions, Precision, QueryMamba, TrainConfig,
};
use querymamba::{Error, Result, Scalar};

const COOC_FILE: &str = "cooc.csv";
const TAXONOMY_FILE: &str = "taxonomy.csv";
const CHECKPOINT_FILE: &str = "checkpoint.json";
const LOSS_FILE: &str = "loss_curve.csv";
const PREDICTIONS_FILE: &str = "predictions.jsonl";
const REPORT_FILE: &str = "report.json";

/// Long-term action anticipation with a Mamba encoder and query decoder.
#[derive(Parser)]
#[command(name = "querymamba", version)]
struct Cli {
    /// Key-value configuration file (`key = value` per line).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for outputs and default inputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic world into world.json.
    GenWorld,
    /// Generate train and val clips from a world.
    GenData {
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Count verb-noun pairs of a split into cooc.csv.
    BuildCooc {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Derive taxonomy.csv from a co-occurrence file.
    BuildTaxonomy {
        #[arg(long)]
        cooc: Option<PathBuf>,
    },
    /// Train a model; writes checkpoint.json and loss_curve.csv.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Predict future actions; writes predictions.jsonl.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        cooc: Option<PathBuf>,
        #[arg(long, value_parser = ["argmax", "sample"])]
        decode_mode: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        interaction: Option<bool>,
    },
    /// Score predictions; writes report.json.
    Eval {
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train with and without the action loss and compare.
    AblateActionLoss {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
}

impl Cli {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.join(default))
    }

    fn data_dir(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out_dir.clone())
    }
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_cooc(path: &Path) -> Result<CooccurrenceMatrix> {
    CooccurrenceMatrix::read_csv(fs::File::open(path)?)
}

fn read_taxonomy(path: &Path) -> Result<ActionTaxonomy> {
    ActionTaxonomy::read_csv(fs::File::open(path)?)
}

fn run_train<T: Scalar>(cli: &Cli, cfg: TrainConfig, data: &Path, taxonomy: Option<&PathBuf>) -> Result<()> {
    let taxonomy = match taxonomy {
        Some(p) => Some(read_taxonomy(p)?),
        None if cfg.loss_action => {
            let p = cli.out_dir.join(TAXONOMY_FILE);
            Some(read_taxonomy(&p)?)
        }
        None => None,
    };
    let ds = Dataset::load(data)?.split("train");
    let (examples, skipped) = build_examples::<T>(&ds, &cfg, cfg.cuts_per_clip)?;
    log::info!("{} training examples, {} skipped", examples.len(), skipped.len());
    let mut model = QueryMamba::<T>::new(cfg, taxonomy)?;
    let state = train(&mut model, &examples)?;
    write_loss_curve(fs::File::create(cli.out_dir.join(LOSS_FILE))?, &state.curve)?;
    if let Some(last) = state.curve.last() {
        println!("trained {} steps, final loss {:.5}", last.step + 1, last.loss);
    }
    Checkpoint::new(&model, state).save(&cli.out_dir.join(CHECKPOINT_FILE))
}

struct InferArgs<'a> {
    checkpoint: PathBuf,
    data: PathBuf,
    split: &'a str,
    cooc: Option<PathBuf>,
    decode_mode: Option<DecodeMode>,
    k: Option<usize>,
    interaction: Option<bool>,
}

fn run_infer<T: Scalar>(cli: &Cli, args: InferArgs<'_>) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&args.checkpoint)?;
    let model = ckpt.model()?;
    let mut options = InferOptions::from_config(&model);
    if let Some(seed) = cli.seed {
        options.seed = seed;
    }
    options.decode_mode = args.decode_mode.unwrap_or(options.decode_mode);
    options.k = args.k.unwrap_or(options.k);
    options.use_interaction = args.interaction.unwrap_or(options.use_interaction);
    let cooc = if options.use_interaction {
        Some(read_cooc(&args.cooc.unwrap_or_else(|| cli.out_dir.join(COOC_FILE)))?)
    } else {
        None
    };
    let ds = Dataset::load(&args.data)?.split(args.split);
    let (examples, skipped) = build_examples::<T>(&ds, &model.config, 1)?;
    if !skipped.is_empty() {
        log::warn!("{} clips yield no example", skipped.len());
    }
    let records = infer(&model, &examples, cooc.as_ref(), &options)?;
    write_predictions(fs::File::create(cli.out_dir.join(PREDICTIONS_FILE))?, &records)?;
    println!("wrote {} predictions", records.len());
    Ok(())
}

fn run_ablation<T: Scalar>(cli: &Cli, cfg: TrainConfig, data: &Path, taxonomy: &Path) -> Result<()> {
    let taxonomy = read_taxonomy(taxonomy)?;
    let ds = Dataset::load(data)?;
    let (tr, _) = build_examples::<T>(&ds.split("train"), &cfg, cfg.cuts_per_clip)?;
    let (va, _) = build_examples::<T>(&ds.split("val"), &cfg, 1)?;
    let report = run_action_loss_ablation(&cfg, &tr, &va, &taxonomy)?;
    write_json(&cli.out_dir.join("ablation.json"), &report)?;
    fs::write(cli.out_dir.join("ablation.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir)?;
    match &cli.command {
        Command::GenWorld => {
            let cfg = cli.config()?;
            let world = generate_world_with(cfg.seed, cfg.num_verbs, cfg.num_nouns, cfg.sparsity, cfg.world_options())?;
            write_json(&cli.out_dir.join(WORLD_FILE), &world)?;
            println!("world with {} permitted actions", world.num_actions());
        }
        Command::GenData { world } => {
            let cfg = cli.config()?;
            let path = cli.path(world, WORLD_FILE);
            let world: SyntheticWorldSpec = serde_json::from_slice(&fs::read(&path)?)?;
            world.validate()?;
            let ds = generate_dataset(&world, cfg.seed, &cfg.dataset_shape())?;
            ds.save(&cli.out_dir)?;
            println!("wrote {} clips", ds.len());
        }
        Command::BuildCooc { data, split } => {
            let cfg = cli.config()?;
            let clips = querymamba::dataio::read_annotations(BufReader::new(fs::File::open(
                cli.data_dir(data).join(querymamba::dataio::ANNOTATIONS_FILE),
            )?))?;
            let pairs = clips.iter().filter(|c| &c.split == split).flat_map(|c| c.actions().0);
            let cooc = build_cooccurrence(pairs, cfg.num_verbs, cfg.num_nouns, split)?.with_smoothing(cfg.cooc_smoothing)?;
            cooc.write_csv(fs::File::create(cli.out_dir.join(COOC_FILE))?)?;
            println!("counted {} pairs", cooc.total());
        }
        Command::BuildTaxonomy { cooc } => {
            let cooc = read_cooc(&cli.path(cooc, COOC_FILE))?;
            let tax = build_taxonomy(&cooc);
            tax.write_csv(fs::File::create(cli.out_dir.join(TAXONOMY_FILE))?)?;
            println!("{} actions", tax.len());
        }
        Command::Train { data, taxonomy } => {
            let cfg = cli.config()?;
            let data = cli.data_dir(data);
            match cfg.precision {
                Precision::F32 => run_train::<f32>(cli, cfg, &data, taxonomy.as_ref())?,
                Precision::F64 => run_train::<f64>(cli, cfg, &data, taxonomy.as_ref())?,
            }
        }
        Command::Infer {
            checkpoint,
            data,
            split,
            cooc,
            decode_mode,
            k,
            interaction,
        } => {
            let checkpoint = cli.path(checkpoint, CHECKPOINT_FILE);
            let args = InferArgs {
                data: cli.data_dir(data),
                split,
                cooc: cooc.clone(),
                decode_mode: decode_mode.as_deref().map(|m| match m {
                    "argmax" => DecodeMode::Argmax,
                    _ => DecodeMode::Sample,
                }),
                k: *k,
                interaction: *interaction,
                checkpoint: checkpoint.clone(),
            };
            match checkpoint_scalar(&checkpoint)?.as_str() {
                "f32" => run_infer::<f32>(cli, args)?,
                _ => run_infer::<f64>(cli, args)?,
            }
        }
        Command::Eval { predictions, data, split } => {
            let cfg = cli.config()?;
            let preds = read_predictions(BufReader::new(fs::File::open(cli.path(predictions, PREDICTIONS_FILE))?))?;
            let ds = Dataset::load(&cli.data_dir(data))?.split(split);
            let (examples, _) = build_examples::<f32>(&ds, &cfg, 1)?;
            let report = evaluate_dataset(&preds, &truths(&examples))?;
            let summary = report.summary_json();
            write_json(&cli.out_dir.join(REPORT_FILE), &summary)?;
            println!("{summary}");
        }
        Command::AblateActionLoss { data, taxonomy } => {
            let cfg = cli.config()?;
            let data = cli.data_dir(data);
            let tax = cli.path(taxonomy, TAXONOMY_FILE);
            match cfg.precision {
                Precision::F32 => run_ablation::<f32>(cli, cfg, &data, &tax)?,
                Precision::F64 => run_ablation::<f64>(cli, cfg, &data, &tax)?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingClips(_) = e {
                return ExitCode::from(3);
            }
            ExitCode::FAILURE
        }
    }
}
