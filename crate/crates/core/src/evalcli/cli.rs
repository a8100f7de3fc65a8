use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::dataset::{
    build_dataset, generate_synthetic, load_dataset, records_in, save_dataset, DatasetConfig,
    Provenance, Split, SyntheticConfig, DEFAULT_DTW_PERCENTILE, TARGETS_PER_CLASS,
};
use crate::detector::{train, write_log_csv, Detector, DetectorArchitecture, Example, TrainConfig};
use crate::error::{Error, Result};
use crate::gaf::{encode_window, FeatureSet};
use crate::infer::{decode, detect_stream, write_detections, DEFAULT_THRESHOLD};
use crate::ingest::{read_csv, write_csv};
use crate::nn::{Adadelta, Checkpoint, Tensor4};
use crate::ohlc::{OhlcSeries, WINDOW_LEN};

use super::metrics::evaluate;
use super::render::{render_chart, RenderSpec};

pub const SEED_ENV: &str = "GAFDETECT_SEED";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Parser)]
#[command(name = "gafdetect", version, about = "Candlestick pattern detection on GAF encodings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic one-minute price series as CSV.
    Gendata(GendataArgs),
    /// Label windows and write a dataset directory.
    BuildDataset(BuildArgs),
    /// Train a detector on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Replay a CSV stream bar by bar and print detections.
    Detect(DetectArgs),
    /// Draw a 16-bar window with its detection box as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct GendataArgs {
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 200_000)]
    bars: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    drift: f64,
    #[arg(long, default_value_t = 0.001)]
    volatility: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long, default_value = "culr")]
    feature_set: FeatureSet,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, default_value_t = 200_000)]
    bars: usize,
    /// Use a recorded price series instead of synthetic data.
    #[arg(long)]
    input_csv: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DTW_PERCENTILE)]
    dtw_percentile: f64,
    #[arg(long)]
    max_per_class: Option<usize>,
    #[arg(long, default_value_t = TARGETS_PER_CLASS)]
    targets_per_class: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 4000)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[command(flatten)]
    seed: SeedArg,
    /// Six comma-separated conv widths.
    #[arg(long)]
    widths: Option<DetectorArchitecture>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Also write the JSON report to this file.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    confusion_csv: Option<PathBuf>,
    /// Print the human-readable table instead of JSON.
    #[arg(long)]
    table: bool,
    /// Print nothing; only write the requested files.
    #[arg(long, conflicts_with = "table")]
    quiet: bool,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Detections CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    /// Timestamp of the window's last bar; the final bar by default.
    #[arg(long, allow_negative_numbers = true)]
    end_timestamp: Option<i64>,
    /// Label the window with this model's prediction.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    window_size: Option<usize>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 640)]
    width: u32,
    #[arg(long, default_value_t = 360)]
    height: u32,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train, val or test")),
    }
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

fn require(path: &Path) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("input not found: {}", path.display())))
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors and missing inputs, 1 when a pipeline fails.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Gendata(a) => gendata(a),
        Command::BuildDataset(a) => build(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Detect(a) => detect(a),
        Command::Render(a) => render(a),
    }
}

fn synthetic_config(seed: &SeedArg, bars: usize) -> SyntheticConfig {
    let base = SyntheticConfig::default();
    SyntheticConfig {
        seed: seed.seed.unwrap_or(base.seed),
        n_bars: bars,
        ..base
    }
}

fn create_parent(path: &Path) -> io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn gendata(a: GendataArgs) -> std::result::Result<(), Failure> {
    let cfg = SyntheticConfig {
        drift: a.drift,
        volatility: a.volatility,
        ..synthetic_config(&a.seed, a.bars)
    };
    let series = generate_synthetic(&cfg)?;
    create_parent(&a.out)?;
    write_csv(&series, &a.out)?;
    eprintln!("wrote {} bars to {}", series.len(), a.out.display());
    Ok(())
}

fn build(a: BuildArgs) -> std::result::Result<(), Failure> {
    let (series, provenance) = match &a.input_csv {
        Some(path) => {
            require(path)?;
            (read_csv(path)?, Provenance::csv_file(path)?)
        }
        None => {
            let cfg = synthetic_config(&a.seed, a.bars);
            (generate_synthetic(&cfg)?, Provenance::Synthetic(cfg))
        }
    };
    let cfg = DatasetConfig {
        feature_set: a.feature_set,
        dtw_percentile: a.dtw_percentile,
        max_per_class: a.max_per_class,
        targets_per_class: a.targets_per_class,
    };
    let dataset = build_dataset(&series, &cfg, provenance)?;
    save_dataset(&a.out_dir, &dataset)?;
    let c = dataset.manifest.split_counts;
    eprintln!(
        "wrote {} records ({} train, {} val, {} test) to {}",
        dataset.records.len(),
        c[0],
        c[1],
        c[2],
        a.out_dir.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> std::result::Result<Detector, Failure> {
    require(path)?;
    Ok(Detector::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn run_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    require(&a.dataset)?;
    let dataset = load_dataset(&a.dataset)?;
    let examples = |s: Split| -> Vec<Example> {
        records_in(&dataset.records, s).iter().map(|r| r.to_example()).collect()
    };
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        optimizer: Adadelta {
            lr: a.lr,
            ..base.optimizer
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed.seed.unwrap_or(base.seed),
        ..base
    };
    let arch = a.widths.unwrap_or_default();
    let fs = dataset.manifest.feature_set;
    let outcome = train(arch, fs, &examples(Split::Train), &examples(Split::Val), &cfg, |s| {
        eprintln!(
            "epoch {:>5} train {:.5} val {:.5} cls {:.3} win {:.3}",
            s.epoch, s.train_loss, s.val_loss, s.val_cls_acc, s.val_win_acc
        );
    })?;
    fs::create_dir_all(&a.out_dir)?;
    outcome.best.to_checkpoint().save(&a.out_dir.join(CHECKPOINT_FILE))?;
    write_log_csv(&a.out_dir.join(TRAIN_LOG_FILE), &outcome.log)?;
    eprintln!("kept epoch {} in {}", outcome.best_epoch, a.out_dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    require(&a.dataset)?;
    let model = load_model(&a.checkpoint)?;
    let dataset = load_dataset(&a.dataset)?;
    if dataset.manifest.feature_set != model.feature_set() {
        return Err(Error::invalid(format!(
            "dataset holds {} features, model expects {}",
            dataset.manifest.feature_set,
            model.feature_set()
        ))
        .into());
    }
    let report = evaluate(&model, &records_in(&dataset.records, a.split))?;
    let json = report.to_json()?;
    if let Some(path) = &a.json {
        create_parent(path)?;
        fs::write(path, &json)?;
    }
    if let Some(path) = &a.confusion_csv {
        create_parent(path)?;
        report.write_confusion_csv(fs::File::create(path)?)?;
    }
    if !a.quiet {
        let text = if a.table { report.to_table() } else { json };
        io::stdout().write_all(text.as_bytes())?;
    }
    Ok(())
}

fn detect(a: DetectArgs) -> std::result::Result<(), Failure> {
    require(&a.input)?;
    let model = load_model(&a.checkpoint)?;
    let detections = detect_stream(fs::File::open(&a.input)?, &model, a.threshold)?;
    match &a.out {
        Some(path) => {
            create_parent(path)?;
            write_detections(&detections, fs::File::create(path)?)?;
            eprintln!("{} detections written to {}", detections.len(), path.display());
        }
        None => write_detections(&detections, io::stdout().lock())?,
    }
    Ok(())
}

fn render(a: RenderArgs) -> std::result::Result<(), Failure> {
    require(&a.input)?;
    let series = read_csv(&a.input)?;
    let end = match a.end_timestamp {
        Some(ts) => series
            .candles()
            .iter()
            .position(|c| c.timestamp == ts)
            .ok_or_else(|| Error::invalid(format!("no bar at timestamp {ts}")))?,
        None => series.len().saturating_sub(1),
    };
    if end + 1 < WINDOW_LEN {
        return Err(Error::InsufficientData(format!("need {WINDOW_LEN} bars up to the chosen end")).into());
    }
    let window = series.candles()[end + 1 - WINDOW_LEN..=end].to_vec();
    let (mut label, mut window_size, mut score) = (a.label, a.window_size, None);
    if let Some(path) = &a.checkpoint {
        let model = load_model(path)?;
        let output = predict_window(&model, &window)?;
        let d = decode(&output, 0.0, window[WINDOW_LEN - 1].timestamp)
            .expect("a zero threshold always yields a detection");
        label.get_or_insert_with(|| d.class.name().to_string());
        window_size.get_or_insert(d.window_size);
        score = Some(d.score);
    }
    let (Some(label), Some(window_size)) = (label, window_size) else {
        return Err(Failure::Usage("render needs --checkpoint or both --label and --window-size".into()));
    };
    let spec = RenderSpec {
        width: a.width,
        height: a.height,
        ..RenderSpec::new(window, window_size, label, score)
    };
    let svg = render_chart(&spec)?;
    create_parent(&a.out)?;
    fs::write(&a.out, svg)?;
    Ok(())
}

fn predict_window(model: &Detector, window: &[crate::ohlc::Candle]) -> Result<crate::detector::DetectorOutput> {
    let series = OhlcSeries::new(window.to_vec())?;
    let t = encode_window(series.candles(), model.feature_set())?;
    let x = Tensor4::new([1, 4, WINDOW_LEN, WINDOW_LEN], t.to_flat())?;
    model
        .predict(&x)?
        .pop()
        .ok_or_else(|| Error::State("model returned no output".into()))
}
