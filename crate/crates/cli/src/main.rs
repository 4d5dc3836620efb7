//! `latentcast` command-line interface.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latentcast::autoencoder::{Autoencoder, AutoencoderConfig};
use latentcast::dataio::{
    load_frame_directory, parse_array_file, split_sequences, Dataset, DatasetSplit,
};
use latentcast::experiment::{
    self, benchmark_inference, dataset_to_maps, emit_report, extract_latents, predictor_mse,
    reconstruction_mse, run_baseline, run_pipeline, search_autoencoders, search_predictors,
    select_best, AutoencoderGrid, BenchReport, FinalLosses, KlPopulation, PipelineConfig, Seeds,
    SeqGrid, TrainRun,
};
use latentcast::metrics::{
    bucketize_intervals, evaluate_frames, kl_gauss, LatentStats, SsimParams,
};
use latentcast::nn::{LossKind, OptimizerKind, SampleSource, Schedule};
use latentcast::preprocess::{
    preprocess_dataset, stratified_subset, verify_continuity, PreprocessSpec,
    DEFAULT_BORDER_THRESHOLD,
};
use latentcast::seqmodels::{
    stack_windows, OutputHead, SeqModel, SeqModelConfig, SeqModelKind, WindowSet,
};
use latentcast::{synth, Error};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "latentcast",
    version,
    about = "Latent-space video frame prediction"
)]
struct Cli {
    /// Log more (repeatable); RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read an array file or a directory of frame directories into a dataset.
    Ingest(IngestArgs),
    /// Partition sequence ids into train/validation/test.
    Split(SplitArgs),
    /// Truncate, crop, resize and optionally binarize a dataset.
    Preprocess(PreprocessArgs),
    /// Train an autoencoder.
    TrainAe(TrainAeArgs),
    /// Encode every frame of a dataset with a trained autoencoder.
    Extract(ExtractArgs),
    /// Train a next-map predictor on latents (or frames with --pixel).
    TrainSeq(TrainSeqArgs),
    /// Score predicted frames against ground truth.
    Evaluate(EvaluateArgs),
    /// Grid search over autoencoder or predictor hyperparameters.
    Gridsearch(GridArgs),
    /// Time single-window inference of a trained predictor.
    Bench(BenchArgs),
    /// Collect run records into a JSON report and comparison table.
    Report(ReportArgs),
    /// Run autoencoder, predictor and decoder end to end.
    Pipeline(PipelineArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Npy,
    PnmDir,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "npy")]
    format: InputFormat,
    #[arg(long, default_value_t = 1, value_parser = parse_channels)]
    channels: usize,
    /// Axis (0 or 1) holding time in a rank-4/5 array; detected when omitted.
    #[arg(long)]
    time_axis: Option<usize>,
    /// Truncate every sequence to this many frames; needed when lengths differ.
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 20)]
    len: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, overrides_with = "no_binarize")]
    binarize: bool,
    #[arg(long)]
    no_binarize: bool,
    #[arg(long)]
    crop_borders: bool,
    #[arg(long, default_value_t = DEFAULT_BORDER_THRESHOLD)]
    border_threshold: f32,
    /// Keep a label-stratified subset of this many sequences.
    #[arg(long)]
    stratify: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    continuity_report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Early-stopping patience in epochs; 0 disables it.
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long)]
    max_steps: Option<u64>,
}

impl ScheduleArgs {
    fn schedule(&self, seed: u64) -> Schedule {
        Schedule {
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: (self.patience > 0).then_some(self.patience),
            max_steps: self.max_steps,
            seed,
        }
    }
}

#[derive(Args, Clone)]
struct SplitSource {
    /// Split file from `latentcast split`; made from --test/--val/--seed when omitted.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
}

#[derive(Args)]
struct TrainAeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "64,128,256", value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long, default_value = "l1", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value = "adam", value_parser = parse_opt)]
    opt: OptimizerKind,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    standardize_latents: bool,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct SeqArgs {
    #[arg(long, value_parser = parse_kind)]
    kind: SeqModelKind,
    /// Stacked recurrent layers (ignored for cnn3d and crnn).
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value = "mse", value_parser = parse_loss)]
    loss: LossKind,
    #[arg(long, default_value = "adam", value_parser = parse_opt)]
    opt: OptimizerKind,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

impl SeqArgs {
    fn config(&self) -> SeqModelConfig {
        SeqModelConfig {
            hidden_layers: self.kind.uses_hidden_layers().then_some(self.layers),
            loss: self.loss,
            optimizer: self.opt,
            learning_rate: self.lr,
            ..SeqModelConfig::new(self.kind, self.hidden, self.window)
        }
    }
}

#[derive(Args)]
struct TrainSeqArgs {
    #[arg(long)]
    latents: PathBuf,
    #[command(flatten)]
    model: SeqArgs,
    /// Treat the input as frames: sigmoid output head, pixel-space run.
    #[arg(long)]
    pixel: bool,
    /// Report mean ± std validation MSE over this many folds of the training portion.
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value = "mae,mse,ssim", value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long)]
    intervals: bool,
    /// Latent array whose per-unit statistics feed the divergence.
    #[arg(long)]
    latents: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridStage {
    Ae,
    Seq,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_enum)]
    stage: GridStage,
    /// JSON object of axis name to value list; the default grid when omitted.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_kind)]
    kind: Option<SeqModelKind>,
    #[arg(long, default_value_t = 5)]
    kfold: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitSource,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    latents: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "64,128,256", value_delimiter = ',')]
    dims: Vec<usize>,
    #[arg(long, default_value = "l1", value_parser = parse_loss)]
    ae_loss: LossKind,
    #[arg(long, default_value = "adam", value_parser = parse_opt)]
    ae_opt: OptimizerKind,
    #[arg(long, default_value_t = 1e-3)]
    ae_lr: f64,
    #[command(flatten)]
    model: SeqArgs,
    #[arg(long)]
    ae_epochs: Option<usize>,
    #[arg(long)]
    kfold: Option<usize>,
    /// Also run the pixel-space baseline with the same predictor.
    #[arg(long)]
    baseline: bool,
    /// Take divergence statistics from training encodings instead of test ones.
    #[arg(long)]
    kl_train: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.2)]
    test: f64,
    #[arg(long, default_value_t = 0.2)]
    val: f64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Digits,
    Surveillance,
    Color,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, default_value_t = 64)]
    sequences: usize,
    #[arg(long, default_value_t = 20)]
    length: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Action categories for the color generator.
    #[arg(long, default_value_t = 10)]
    labels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_channels(s: &str) -> std::result::Result<usize, String> {
    match s {
        "1" => Ok(1),
        "3" => Ok(3),
        _ => Err("channels must be 1 or 3".into()),
    }
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_opt(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<SeqModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_training_abort() => 3,
        Error::Config(_) | Error::Grid(_) => 1,
        Error::Stage { source, .. } => exit_code(source),
        _ => 2,
    }
}

type Result<T> = latentcast::Result<T>;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoPath {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::IoPath {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_split(src: &SplitSource, ds: &Dataset, seed: u64) -> Result<DatasetSplit> {
    match &src.split {
        Some(p) => read_json(p),
        None => split_sequences(&ds.ids(), src.test, src.val, seed),
    }
}

fn frames(ds: &Dataset) -> Vec<latentcast::dataio::Frame> {
    ds.sequences
        .iter()
        .flat_map(|s| s.frames.iter().cloned())
        .collect()
}

fn ingest(a: IngestArgs) -> Result<()> {
    let ds = match a.format {
        InputFormat::Npy => {
            let bytes = std::fs::read(&a.input).map_err(|e| Error::IoPath {
                path: a.input.clone(),
                source: e,
            })?;
            let parsed = parse_array_file(&bytes)?;
            let ds = Dataset::from_array(&parsed, a.time_axis)?;
            let (_, _, _, c) = ds.shape()?;
            if c != a.channels {
                return Err(Error::Channel(format!(
                    "array has {c} channel(s), expected {}",
                    a.channels
                )));
            }
            ds
        }
        InputFormat::PnmDir => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&a.input)
                .map_err(|e| Error::IoPath {
                    path: a.input.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                dirs.push(a.input.clone());
            }
            let seqs = dirs
                .iter()
                .map(|d| load_frame_directory(d, a.channels))
                .collect::<Result<Vec<_>>>()?;
            Dataset::new(seqs)
        }
    };
    let ds = match a.len {
        Some(len) => truncate(ds, len)?,
        None => ds,
    };
    save_dataset(&ds, &a.out)?;
    log::info!("ingested {} sequences into {}", ds.len(), a.out.display());
    Ok(())
}

fn save_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::IoPath {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    ds.save(out)
}

fn truncate(mut ds: Dataset, len: usize) -> Result<Dataset> {
    for s in &mut ds.sequences {
        if s.frames.len() < len {
            return Err(Error::TooShort {
                len: s.frames.len(),
                target: len,
            });
        }
        s.frames.truncate(len);
    }
    Ok(ds)
}

fn split(a: SplitArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let s = split_sequences(&ds.ids(), a.test, a.val, a.seed)?;
    write_json(&a.out, &s)?;
    println!(
        "train {} / val {} / test {}",
        s.train_ids.len(),
        s.val_ids.len(),
        s.test_ids.len()
    );
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let mut ds = Dataset::load(&a.input)?;
    if let Some(m) = a.stratify {
        let items: Vec<(String, String)> = ds
            .sequences
            .iter()
            .map(|s| (s.id.clone(), s.label.clone().unwrap_or_default()))
            .collect();
        let keep = stratified_subset(&items, m, a.seed)?;
        ds = ds.subset(&keep)?;
    }
    let spec = PreprocessSpec {
        target_length: a.len,
        target_size: (a.size, a.size),
        binarize: a.binarize && !a.no_binarize,
        crop_borders: a.crop_borders,
        border_threshold: a.border_threshold,
    };
    spec.validate()?;
    let (out, summary) = preprocess_dataset(&ds, &spec)?;
    if let Some(path) = &a.continuity_report {
        let reports = out
            .sequences
            .iter()
            .map(verify_continuity)
            .collect::<Result<Vec<_>>>()?;
        write_json(path, &reports)?;
    }
    save_dataset(&out, &a.out)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn train_ae(a: TrainAeArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let (_, h, w, c) = ds.shape()?;
    if h != w {
        return Err(Error::Size(format!("frames must be square, got {h}x{w}")));
    }
    let split = load_split(&a.split, &ds, a.seed)?;
    let config = AutoencoderConfig {
        dims: a.dims.clone(),
        loss: a.loss,
        optimizer: a.opt,
        learning_rate: a.lr,
        input_size: h,
        standardize_latents: a.standardize_latents,
        ..AutoencoderConfig::new(a.dims.clone(), c)
    };
    let mut ae = Autoencoder::build(config.clone(), a.seed)?;
    let train = frames(&ds.subset(&split.train_ids)?);
    let val = frames(&ds.subset(&split.val_ids)?);
    let test = frames(&ds.subset(&split.test_ids)?);
    let history = ae.train(&train, &val, &a.schedule.schedule(a.seed))?;
    ae.save(&a.out)?;
    let metrics = if test.is_empty() {
        None
    } else {
        let rec = ae.reconstruct(&test)?;
        Some(evaluate_frames(&rec, &test, &SsimParams::default())?)
    };
    let run = TrainRun {
        name: "autoencoder".into(),
        config: serde_json::to_value(&config)?,
        seed: a.seed,
        history,
        losses: FinalLosses {
            train: reconstruction_mse(&ae, &train)?,
            val: (!val.is_empty())
                .then(|| reconstruction_mse(&ae, &val))
                .transpose()?,
            test: metrics.as_ref().map(|m| m.mse),
        },
        folds: None,
        metrics,
        checkpoint: Some(a.out.clone()),
    };
    run.save(&a.out.join("run.json"))?;
    println!("{}", serde_json::to_string(&run.losses)?);
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let ae = Autoencoder::load(&a.ckpt)?;
    let ds = Dataset::load(&a.dataset)?;
    let lat = extract_latents(&ae, &ds)?;
    save_dataset(&lat, &a.out)?;
    let (n, t, h, w, c) = lat
        .to_array()
        .map(|(s, _)| (s[0], s[1], s[2], s[3], s[4]))?;
    println!("latents ({n}, {t}, {h}, {w}, {c})");
    Ok(())
}

fn train_seq(a: TrainSeqArgs) -> Result<()> {
    let ds = Dataset::load(&a.latents)?;
    let split = load_split(&a.split, &ds, a.seed)?;
    let mut config = a.model.config();
    if a.pixel {
        config.head = OutputHead::Sigmoid;
    }
    let part = |ids: &[String]| -> Result<Vec<(String, Vec<latentcast::autoencoder::FeatureMap>)>> {
        Ok(dataset_to_maps(&ds.subset(ids)?))
    };
    let (train, val, test) = (
        part(&split.train_ids)?,
        part(&split.val_ids)?,
        part(&split.test_ids)?,
    );
    let shape = train
        .first()
        .and_then(|(_, m)| m.first())
        .map(|m| m.shape())
        .ok_or_else(|| Error::InsufficientData("no training sequences".into()))?;
    let schedule = a.schedule.schedule(a.seed);
    let folds = match a.kfold {
        Some(k) => {
            let pool: Vec<_> = train.iter().chain(&val).cloned().collect();
            Some(experiment::kfold_validate(&config, &pool, k, &schedule, a.seed)?.stats)
        }
        None => None,
    };
    let k = config.window;
    let train_set = WindowSet::from_sequences(&train, k)?;
    let val_set = (!val.is_empty())
        .then(|| WindowSet::from_sequences(&val, k))
        .transpose()?;
    let test_set = (!test.is_empty())
        .then(|| WindowSet::from_sequences(&test, k))
        .transpose()?;
    let mut model = SeqModel::build(config.clone(), shape, a.seed)?;
    let history = model.train(&train_set, val_set.as_ref(), &schedule)?;
    model.save(&a.out)?;
    let metrics = match (&test_set, a.pixel) {
        (Some(t), true) => {
            let pred: Vec<_> = model.predict_set(t)?.iter().map(|m| m.to_frame()).collect();
            let truth: Vec<_> = (0..t.len()).map(|i| t.target(i).to_frame()).collect();
            Some(evaluate_frames(&pred, &truth, &SsimParams::default())?)
        }
        _ => None,
    };
    let run = TrainRun {
        name: format!(
            "{}/{}",
            if a.pixel { "pixel" } else { "latent" },
            config.kind
        ),
        config: serde_json::to_value(&config)?,
        seed: a.seed,
        history,
        losses: FinalLosses {
            train: predictor_mse(&model, &train_set)?,
            val: val_set
                .as_ref()
                .map(|v| predictor_mse(&model, v))
                .transpose()?,
            test: test_set
                .as_ref()
                .map(|t| predictor_mse(&model, t))
                .transpose()?,
        },
        folds,
        metrics,
        checkpoint: Some(a.out.clone()),
    };
    run.save(&a.out.join("run.json"))?;
    println!("{}", serde_json::to_string(&run.losses)?);
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = frames(&Dataset::load(&a.pred)?);
    let truth = frames(&Dataset::load(&a.truth)?);
    let want = |m: &str| a.metrics.iter().any(|x| x.eq_ignore_ascii_case(m));
    for m in &a.metrics {
        if !["mae", "mse", "ssim", "kl"].contains(&m.to_ascii_lowercase().as_str()) {
            return Err(Error::Config(format!("unknown metric '{m}'")));
        }
    }
    let report = evaluate_frames(&pred, &truth, &SsimParams::default())?;
    let mut out = json!({ "count": report.count });
    if want("mae") {
        out["mae"] = json!(report.mae);
    }
    if want("mse") {
        out["mse"] = json!(report.mse);
    }
    if want("ssim") {
        out["ssim"] = json!(report.ssim);
        out["per_frame_ssim"] = json!(report.per_frame_ssim);
    }
    if want("kl") {
        let path = a
            .latents
            .as_ref()
            .ok_or_else(|| Error::Config("the kl metric needs --latents".into()))?;
        let lat = frames(&Dataset::load(path)?);
        let stats = LatentStats::from_rows(lat.iter().map(|f| f.data.as_slice()))?;
        out["kl"] = json!(kl_gauss(&stats)?);
    }
    if a.intervals {
        out["intervals"] = serde_json::to_value(bucketize_intervals(&report.per_frame_ssim)?)?;
    }
    write_json(&a.out, &out)?;
    Ok(())
}

/// A malformed grid file is a configuration error, not a data error.
fn read_grid<G: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<G> {
    match path {
        Some(p) => read_json(p).map_err(|e| match e {
            Error::Json(e) => Error::Grid(format!("{}: {e}", p.display())),
            other => other,
        }),
        None => Ok(G::default()),
    }
}

fn gridsearch(a: GridArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let split = load_split(&a.split, &ds, a.seed)?;
    let schedule = a.schedule.schedule(a.seed);
    let results = match a.stage {
        GridStage::Ae => {
            let grid: AutoencoderGrid = read_grid(a.grid.as_deref())?;
            let (_, h, _, c) = ds.shape()?;
            let base = AutoencoderConfig {
                input_size: h,
                ..AutoencoderConfig::new(vec![1], c)
            };
            let configs = grid.enumerate(&base)?;
            let train = frames(&ds.subset(&split.train_ids)?);
            let val = frames(&ds.subset(&split.val_ids)?);
            search_autoencoders(&configs, &train, &val, &schedule, a.seed, a.jobs)?
        }
        GridStage::Seq => {
            let kind = a
                .kind
                .ok_or_else(|| Error::Config("--kind is required for --stage seq".into()))?;
            let grid: SeqGrid = read_grid(a.grid.as_deref())?;
            let configs = grid.enumerate(kind)?;
            let ids: Vec<String> = split
                .train_ids
                .iter()
                .chain(&split.val_ids)
                .cloned()
                .collect();
            let pool = dataset_to_maps(&ds.subset(&ids)?);
            search_predictors(&configs, &pool, a.kfold, &schedule, a.seed, a.jobs)?
        }
    };
    write_json(&a.out.join("results.json"), &results)?;
    if let Some(best) = select_best(&results) {
        write_json(&a.out.join("best.json"), best)?;
        println!("best #{}: validation MSE {:.6}", best.index, best.val_mse);
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = SeqModel::load(&a.ckpt)?;
    let path = a
        .latents
        .as_ref()
        .or(a.frames.as_ref())
        .expect("clap enforces one input");
    let ds = Dataset::load(path)?;
    let maps = dataset_to_maps(&ds);
    let first = maps
        .first()
        .ok_or_else(|| Error::InsufficientData("input holds no sequences".into()))?;
    let k = model.config.window;
    if first.1.len() < k {
        return Err(Error::Window {
            len: first.1.len(),
            window: k,
        });
    }
    let x = stack_windows(&[&first.1[..k]])?;
    let mut report = benchmark_inference(&model, &x, a.warmup, a.iters)?;
    if let Ok(run) = TrainRun::load(&a.ckpt.join("run.json")) {
        report.label = run.name;
    }
    println!(
        "{}: median {:.6} s, mean {:.6} s over {} iterations",
        report.label, report.median_secs, report.mean_secs, report.iterations
    );
    let out = a.out.unwrap_or_else(|| a.ckpt.join("bench.json"));
    write_json(&out, &report)
}

fn collect_files(dir: &Path, name: &str, depth: usize, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::IoPath {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() && depth > 0 {
            collect_files(&p, name, depth - 1, out)?;
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut run_files = Vec::new();
    collect_files(&a.runs, "run.json", 3, &mut run_files)?;
    let runs = run_files
        .iter()
        .map(|p| TrainRun::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut bench_files = Vec::new();
    collect_files(&a.runs, "bench.json", 3, &mut bench_files)?;
    let benches = bench_files
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<Vec<BenchReport>>>()?;
    let best = runs
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .max_by(|x, y| x.ssim.total_cmp(&y.ssim));
    let intervals = best.and_then(|m| bucketize_intervals(&m.per_frame_ssim).ok());
    let rep = emit_report(&runs, &benches, intervals, &a.out, a.svg.as_deref())?;
    print!("{}", rep.table);
    Ok(())
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let ds = Dataset::load(&a.dataset)?;
    let (_, h, _, c) = ds.shape()?;
    let ae = AutoencoderConfig {
        loss: a.ae_loss,
        optimizer: a.ae_opt,
        learning_rate: a.ae_lr,
        input_size: h,
        ..AutoencoderConfig::new(a.dims.clone(), c)
    };
    let mut cfg = PipelineConfig::new(ae, a.model.config());
    cfg.seq_schedule = a.schedule.schedule(a.seed);
    cfg.ae_schedule = Schedule {
        max_epochs: a.ae_epochs.unwrap_or(a.schedule.epochs),
        ..cfg.seq_schedule.clone()
    };
    cfg.test_fraction = a.test;
    cfg.val_fraction = a.val;
    cfg.kfold = a.kfold;
    if a.kl_train {
        cfg.kl_population = KlPopulation::Train;
    }
    let seeds = Seeds::all(a.seed);
    let rep = run_pipeline(&ds, &cfg, seeds)?;
    let kind = cfg.predictor.kind;
    if let Some(ae_run) = &rep.autoencoder {
        ae_run.save(&a.out.join("autoencoder").join("run.json"))?;
    }
    rep.predictor
        .save(&a.out.join(format!("latent_{kind}")).join("run.json"))?;
    write_json(&a.out.join("pipeline.json"), &rep)?;
    println!(
        "latent {kind}: {} predictions, SSIM {:.4}, stage 2 {:.1} s + stages 1/3 {:.1} s",
        rep.predictions,
        rep.predictor.test_ssim().unwrap_or(f64::NAN),
        rep.timing.stage2(),
        rep.timing.stage13()
    );
    if a.baseline {
        let base = run_baseline(&ds, &cfg, seeds)?;
        base.predictor
            .save(&a.out.join(format!("pixel_{kind}")).join("run.json"))?;
        write_json(&a.out.join("baseline.json"), &base)?;
        println!(
            "pixel {kind}: SSIM {:.4}, {:.1} s",
            base.predictor.test_ssim().unwrap_or(f64::NAN),
            base.timing.total()
        );
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    if a.sequences == 0 || a.length == 0 || a.size == 0 {
        return Err(Error::Config(
            "sequences, length and size must be positive".into(),
        ));
    }
    if matches!(a.kind, SynthKind::Digits) && a.size < synth::DIGIT_SIDE {
        return Err(Error::Config(format!(
            "digit canvases need --size >= {}",
            synth::DIGIT_SIDE
        )));
    }
    let ds = match a.kind {
        SynthKind::Digits => synth::moving_digits(a.sequences, a.length, a.size, a.seed),
        SynthKind::Surveillance => synth::surveillance(a.sequences, a.length, a.size, a.seed),
        SynthKind::Color => synth::color_actions(a.sequences, a.length, a.size, a.labels, a.seed),
    };
    save_dataset(&ds, &a.out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Preprocess(a) => preprocess(a),
        Command::TrainAe(a) => train_ae(a),
        Command::Extract(a) => extract(a),
        Command::TrainSeq(a) => train_seq(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Gridsearch(a) => gridsearch(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_errors_map_through_to_their_cause() {
        let e = Error::Config("x".into()).in_stage("predictor");
        assert_eq!(exit_code(&e), 1);
        assert_eq!(exit_code(&Error::InsufficientData("x".into())), 2);
    }
}
