//! `jewelcap` command line: corpus generation, training, grid search,
//! evaluation, single-image captioning and the HTTP caption service.

pub mod server;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use jewelcap::augment::Image;
use jewelcap::captioner::{CaptionerModel, EncoderKind, ModelConfig, Task, DEFAULT_EMBED_DIM};
use jewelcap::grid::{grid_search, GridPoint};
use jewelcap::layers::CellKind;
use jewelcap::optim::OptimizerKind;
use jewelcap::synth::{generate_corpus, CaptionLevel, Corpus, CorpusConfig, Split, DEFAULT_IMAGE_SIZE};
use jewelcap::train::{evaluate_samples, train_with, HyperConfig, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE};
use serde_json::Value;

#[derive(Debug, Parser)]
#[command(name = "jewelcap", version, about = "Jewelry image captioning: data, training, evaluation and serving")]
pub struct Cli {
    /// JSON file of flag values (keys are long flag names); flags given on
    /// the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus (images, captions, manifest).
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and report.
    Train(TrainArgs),
    /// Train a grid of configurations and write the ranked table.
    Grid(GridArgs),
    /// Evaluate a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Caption one image file.
    Caption(CaptionArgs),
    /// Run the HTTP caption service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of base (unaugmented) images.
    #[arg(long = "n", default_value_t = 100)]
    pub n_base: usize,
    #[arg(long, default_value_t = 4)]
    pub multiplier: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "image-size", default_value_t = DEFAULT_IMAGE_SIZE)]
    pub image_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long, default_value = "captioning")]
    pub task: Task,
    #[arg(long, default_value = "complete")]
    pub level: CaptionLevel,
    #[arg(long = "embed-dim", default_value_t = DEFAULT_EMBED_DIM)]
    pub embed_dim: usize,
    /// Feature file for the external-encoder path (replaces the CNN).
    #[arg(long, requires = "feature_dim")]
    pub features: Option<PathBuf>,
    #[arg(long = "feature-dim")]
    pub feature_dim: Option<usize>,
    #[arg(long = "model-seed", default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct HyperArgs {
    #[arg(long = "batch-size", default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value = "adam")]
    pub optimizer: OptimizerKind,
    #[arg(long = "lr", default_value_t = 0.001)]
    pub learning_rate: f64,
    #[arg(long = "max-epochs", default_value_t = DEFAULT_MAX_EPOCHS)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = DEFAULT_PATIENCE)]
    pub patience: usize,
    /// Run all `max-epochs` epochs; the best epoch is still restored.
    #[arg(long = "no-early-stop")]
    pub no_early_stop: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "gru")]
    pub decoder: CellKind,
    #[arg(long, default_value_t = 256)]
    pub neurons: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for `model.ckpt` and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "gru,lstm")]
    pub decoders: Vec<CellKind>,
    #[arg(long, value_delimiter = ',', default_value = "64,256")]
    pub neurons: Vec<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Output directory for `grid.json`, `grid.txt` and `best.ckpt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Print the report as JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Must match the level the model was trained for.
    #[arg(long)]
    pub level: Option<CaptionLevel>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long)]
    pub basic: Option<PathBuf>,
    #[arg(long)]
    pub normal: Option<PathBuf>,
    #[arg(long)]
    pub complete: Option<PathBuf>,
    /// Allowed browser origin for the web interface.
    #[arg(long = "cors-origin")]
    pub cors_origin: Option<String>,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train, val, test)")),
    }
}

/// Appends `--key value` pairs from the `--config` JSON object for every
/// key not already given on the command line.
pub fn merge_config_args(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let pos = argv.iter().position(|a| a == "--config");
    let path = match pos {
        Some(i) => argv
            .get(i + 1)
            .map(PathBuf::from)
            .context("--config needs a file argument")?,
        None => match argv.iter().find_map(|a| a.to_str().and_then(|s| s.strip_prefix("--config="))) {
            Some(p) => PathBuf::from(p),
            None => return Ok(argv),
        },
    };
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let Value::Object(map) = serde_json::from_str::<Value>(&text)? else {
        bail!("config file must hold a JSON object");
    };
    let mut out = argv.clone();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let given = argv.iter().any(|a| {
            a.to_str()
                .is_some_and(|s| s == flag || s.starts_with(&format!("{flag}=")))
        });
        if given {
            continue;
        }
        match value {
            Value::Bool(true) => out.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let joined: Vec<String> = items.iter().map(scalar_text).collect();
                out.push(flag.into());
                out.push(joined.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar_text(&other).into());
            }
        }
    }
    Ok(out)
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match merge_config_args(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Grid(a) => grid_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Caption(a) => caption_cmd(a),
        Command::Serve(a) => server::serve_blocking(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let corpus = generate_corpus(CorpusConfig {
        n_base: a.n_base,
        seed: a.seed,
        multiplier: a.multiplier,
        image_size: a.image_size,
    })?;
    corpus.write(&a.out)?;
    let c = corpus.manifest.counts;
    println!(
        "wrote {} samples to {} (train {}, val {}, test {})",
        corpus.manifest.total,
        a.out.display(),
        c.train,
        c.val,
        c.test
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn model_config(corpus: &Corpus, m: &ModelArgs, decoder: CellKind, neurons: usize) -> anyhow::Result<ModelConfig> {
    let encoder = match (&m.features, m.feature_dim) {
        (Some(path), Some(dim)) => EncoderKind::FeatureFile { path: path.clone(), dim },
        _ => EncoderKind::MiniCnn,
    };
    Ok(ModelConfig {
        encoder,
        decoder,
        neurons,
        embed_dim: m.embed_dim,
        task: m.task,
        level: m.level,
        image_size: corpus.manifest.config.image_size,
        seed: m.model_seed,
        vocab: corpus.vocab()?,
    })
}

/// `grid` restricts values to the enumerated search space; `train` accepts
/// any positive setting.
fn hyper_config(h: &HyperArgs, neurons: usize, grid: bool) -> anyhow::Result<HyperConfig> {
    let hyper = HyperConfig {
        neurons,
        batch_size: h.batch_size,
        optimizer: h.optimizer,
        learning_rate: h.learning_rate,
        max_epochs: h.max_epochs,
        patience: h.patience,
        early_stopping: !h.no_early_stop,
        seed: h.seed,
    };
    if grid {
        hyper.validate_grid()?;
    } else {
        hyper.validate()?;
    }
    Ok(hyper)
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let hyper = hyper_config(&a.hyper, a.neurons, false)?;
    let mut model = CaptionerModel::build(model_config(&corpus, &a.model, a.decoder, a.neurons)?)?;
    let report = train_with(&mut model, &corpus.samples, &hyper, |e| {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_ccr {:.4}",
            e.epoch, e.train_loss, e.val_loss, e.val_ccr
        );
    })?;
    fs::create_dir_all(&a.out)?;
    model.save(&a.out.join("model.ckpt"))?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "best epoch {} (stopped early: {}), val_loss {:.4}, val_ccr {:.4}",
        report.best_epoch, report.stopped_early, report.val_loss, report.val_ccr
    );
    print!("{}", report.test.to_text());
    println!("checkpoint {} ({})", a.out.join("model.ckpt").display(), report.checksum);
    Ok(())
}

fn grid_cmd(a: GridArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let mut space = Vec::new();
    for &decoder in &a.decoders {
        for &neurons in &a.neurons {
            let hyper = hyper_config(&a.hyper, neurons, true)?;
            space.push(GridPoint::new(model_config(&corpus, &a.model, decoder, neurons)?, hyper));
        }
    }
    let result = grid_search(&space, &corpus.samples)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("grid.json"), result.to_json())?;
    let table = result.to_table();
    fs::write(a.out.join("grid.txt"), &table)?;
    print!("{table}");
    if let Some(best) = result.best() {
        // Retrain the winner to materialize its checkpoint; runs are deterministic.
        let point = &space[best.index];
        let mut model = CaptionerModel::build(point.model.clone())?;
        jewelcap::train::train(&mut model, &corpus.samples, &point.hyper)?;
        model.save(&a.out.join("best.ckpt"))?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    let model = CaptionerModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let corpus = load_corpus(&a.corpus)?;
    let report = evaluate_samples(&model, &corpus.split(a.split))?;
    for w in report.warnings() {
        eprintln!("warning: {w}");
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(())
}

fn caption_cmd(a: CaptionArgs) -> anyhow::Result<()> {
    let model = CaptionerModel::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    if let Some(level) = a.level {
        if level != model.answers_level() {
            bail!("model was trained for level {}, not {level}", model.answers_level());
        }
    }
    let image = Image::load_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    println!("{}", model.describe(&image)?);
    Ok(())
}
