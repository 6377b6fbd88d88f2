use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use mvnn::data::{self, Manifest, Split, SplitSpec, SynthConfig, SynthKnobs};
use mvnn::freqnet::{self, Sampling};
use mvnn::train::{self, Checkpoint, Needs, PreparedSet, TrainConfig};
use mvnn::{Ablation, Error, ErrorKind, ModelConfig};

#[derive(Parser)]
#[command(name = "mvnn", version, about = "Multi-domain fake-news image detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired real/fake corpus and its manifest.
    Synth(SynthArgs),
    /// Assign event-disjoint train/val/test splits.
    Split(SplitArgs),
    /// Compute the 64 x 250 frequency features of images.
    ExtractFreq(ExtractArgs),
    /// Pretrain and jointly train one model variant.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and test every ablation variant on the same data.
    Ablate(AblateArgs),
    /// Classify individual images.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Images per class.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fake images are JPEG-compressed twice.
    #[arg(long)]
    knob_recompress: bool,
    /// Fake images get strongly boosted color saturation.
    #[arg(long)]
    knob_striking: bool,
    /// Side of the square images.
    #[arg(long, default_value_t = 224)]
    size: u32,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// k-means clusters for records without an event id.
    #[arg(long, default_value_t = 200)]
    clusters: usize,
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace existing event ids with k-means clusters.
    #[arg(long)]
    recluster: bool,
    /// Write here instead of updating the manifest in place.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureFormat {
    Binary,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplingArg {
    Stride,
    Interpolate,
}

impl From<SamplingArg> for Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Stride => Sampling::Stride,
            SamplingArg::Interpolate => Sampling::Interpolate,
        }
    }
}

#[derive(Args)]
struct ExtractArgs {
    /// Every record of this manifest, in order.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
    /// Individual image files.
    images: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    format: FeatureFormat,
    #[arg(long, value_enum, default_value = "stride")]
    sampling: SamplingArg,
    /// Output file; JSON may go to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Desk,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Default => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

#[derive(Args)]
struct TrainingFlags {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    #[arg(long, value_enum)]
    sampling: Option<SamplingArg>,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 20)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Skip flip/crop augmentation during pixel pretraining.
    #[arg(long)]
    no_augment: bool,
}

impl TrainingFlags {
    fn model_config(&self) -> ModelConfig {
        let mut cfg = self.preset.config();
        if let Some(s) = self.sampling {
            cfg.sampling = s.into();
        }
        cfg
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            pretrain_epochs: self.pretrain_epochs,
            augment: !self.no_augment,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    ablation: Ablation,
    /// Epoch log destination (JSON lines); stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainingFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Json,
    Text,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated variants; all six by default.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Ablation>>,
    #[arg(long, value_enum, default_value = "json")]
    format: TableFormat,
    #[command(flatten)]
    flags: TrainingFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // A closed downstream pipe (`| head`) is not a failure.
        Err(Error::Io { source, .. }) if source.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Training => 3,
            })
        }
    }
}

fn configure_threads() -> mvnn::Result<()> {
    let Ok(value) = std::env::var("MVNN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("MVNN_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(e.to_string()))
}

fn run(cmd: Command) -> mvnn::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::ExtractFreq(a) => extract_freq(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Predict(a) => predict(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> mvnn::Result<()> {
    let line = serde_json::to_string(value).expect("values serialize");
    writeln!(io::stdout().lock(), "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn create(path: &Path) -> mvnn::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn synth(a: SynthArgs) -> mvnn::Result<()> {
    let cfg = SynthConfig {
        size: a.size,
        ..SynthConfig::new(
            a.n,
            a.seed,
            SynthKnobs {
                recompress: a.knob_recompress,
                striking: a.knob_striking,
            },
        )
    };
    let manifest = data::synth_corpus(&a.out, &cfg)?;
    log::info!("wrote {} images under {}", manifest.records.len(), a.out.display());
    print_json(&json!({
        "manifest": a.out.join("manifest.jsonl"),
        "records": manifest.records.len(),
    }))
}

fn parse_ratios(text: &str) -> mvnn::Result<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::Usage(format!("bad ratio list `{text}`: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::Usage(format!("expected three ratios, got `{text}`")))
}

fn split(a: SplitArgs) -> mvnn::Result<()> {
    let spec = SplitSpec {
        ratios: parse_ratios(&a.ratios)?,
        n_clusters: a.clusters,
        seed: a.seed,
    };
    spec.validate()?;
    let mut manifest = Manifest::load(&a.manifest)?;
    if a.recluster || manifest.records.iter().any(|r| r.event_id.is_none()) {
        let features: Vec<Vec<f64>> = manifest
            .samples()
            .par_iter()
            .map(|s| {
                let (img, luma) = s.load_with_luma()?;
                let freq = freqnet::extract_plane(&luma, Sampling::Stride)?;
                Ok(data::event_features(&img, &freq))
            })
            .collect::<mvnn::Result<_>>()?;
        let n = data::assign_events(&mut manifest, &features, &spec, a.recluster)?;
        log::info!("clustered {n} records into events");
    }
    let (out, report) = data::event_split(&manifest, &spec)?;
    let dest = a.out.unwrap_or(a.manifest);
    let mut saved = out;
    saved.base_dir = dest.parent().map(Path::to_path_buf).unwrap_or_default();
    if saved.base_dir != manifest.base_dir {
        for r in &mut saved.records {
            if r.path.is_relative() {
                r.path = manifest.base_dir.join(&r.path);
            }
        }
    }
    saved.save(&dest)?;
    print_json(&report)
}

fn extract_freq(a: ExtractArgs) -> mvnn::Result<()> {
    let paths: Vec<PathBuf> = match &a.manifest {
        Some(m) => Manifest::load(m)?.samples().into_iter().map(|s| s.path).collect(),
        None => a.images.clone(),
    };
    if paths.is_empty() {
        return Err(Error::Usage("no images given (pass paths or --manifest)".into()));
    }
    let mode = Sampling::from(a.sampling);
    let features: Vec<freqnet::FreqFeatures> = paths
        .par_iter()
        .map(|p| freqnet::extract_plane(&data::load_with_luma(p)?.1, mode))
        .collect::<mvnn::Result<_>>()?;
    match (a.format, &a.out) {
        (FeatureFormat::Binary, None) => Err(Error::Usage("binary output needs --out".into())),
        (FeatureFormat::Binary, Some(out)) => {
            let mut w = create(out)?;
            freqnet::write_features(&mut w, &features)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(out, e))
        }
        (FeatureFormat::Json, dest) => {
            let mut w: Box<dyn Write> = match dest {
                Some(p) => Box::new(create(p)?),
                None => Box::new(io::stdout().lock()),
            };
            let name = dest.clone().unwrap_or_else(|| "<stdout>".into());
            for (p, f) in paths.iter().zip(&features) {
                let rows: Vec<&[f64]> = (0..freqnet::FREQUENCIES).map(|r| f.row(r)).collect();
                let line = serde_json::to_string(&json!({ "path": p, "features": rows })).expect("serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(&name, e))?;
            }
            w.flush().map_err(|e| Error::io(&name, e))
        }
    }
}

struct Splits {
    train: PreparedSet,
    val: PreparedSet,
    test: Option<PreparedSet>,
}

fn prepare_splits(manifest: &Manifest, cfg: &ModelConfig, needs: Needs, with_test: bool) -> mvnn::Result<Splits> {
    let build = |split: Split| -> mvnn::Result<PreparedSet> {
        let samples = manifest.split_samples(split);
        if samples.is_empty() {
            return Err(Error::Usage(format!(
                "split `{split}` is empty; run `mvnn split` on the manifest first"
            )));
        }
        log::info!("preparing {} {split} images", samples.len());
        PreparedSet::build(&samples, cfg, needs)
    };
    Ok(Splits {
        train: build(Split::Train)?,
        val: build(Split::Val)?,
        test: if with_test { Some(build(Split::Test)?) } else { None },
    })
}

fn train_cmd(a: TrainArgs) -> mvnn::Result<()> {
    let cfg = a.flags.model_config();
    cfg.validate()?;
    let tc = a.flags.train_config();
    tc.validate()?;
    let manifest = Manifest::load(&a.manifest)?;
    let splits = prepare_splits(&manifest, &cfg, Needs::of(&a.ablation.layout()), false)?;
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut write_err = None;
    let (ckpt, report) = train::train_model(&cfg, a.ablation, &splits.train, &splits.val, &tc, &mut |e| {
        let line = serde_json::to_string(e).expect("serializes");
        if let Err(err) = writeln!(sink, "{line}") {
            write_err.get_or_insert(err);
        }
    })?;
    let log_name = a.log.clone().unwrap_or_else(|| "<stdout>".into());
    if let Some(err) = write_err {
        return Err(Error::io(log_name, err));
    }
    sink.flush().map_err(|e| Error::io(&log_name, e))?;
    ckpt.save(&a.out)?;
    log::info!(
        "saved {} after {} joint epochs (best validation loss {:?})",
        a.out.display(),
        report.epochs_run,
        report.best_val_loss
    );
    Ok(())
}

fn eval(a: EvalArgs) -> mvnn::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let samples = manifest.split_samples(a.split);
    if samples.is_empty() {
        return Err(Error::Usage(format!("split `{}` is empty", a.split)));
    }
    let model = &ckpt.model;
    let data = PreparedSet::build(&samples, &model.config, Needs::of(&model.layout()))?;
    print_json(&train::evaluate(model, &data)?)
}

fn ablate(a: AblateArgs) -> mvnn::Result<()> {
    let cfg = a.flags.model_config();
    cfg.validate()?;
    let tc = a.flags.train_config();
    tc.validate()?;
    let variants = a.variants.clone().unwrap_or_else(|| Ablation::ALL.to_vec());
    let manifest = Manifest::load(&a.manifest)?;
    let splits = prepare_splits(&manifest, &cfg, Needs::ALL, true)?;
    let rows = train::run_ablations(
        &variants,
        &cfg,
        &tc,
        &splits.train,
        &splits.val,
        splits.test.as_ref().expect("prepared"),
        &mut |v, e| log::debug!("{v}: {}", serde_json::to_string(e).expect("serializes")),
    )?;
    match a.format {
        TableFormat::Json => {
            for r in &rows {
                print_json(r)?;
            }
            Ok(())
        }
        TableFormat::Text => {
            print!("{}", train::render_table(&rows));
            Ok(())
        }
    }
}

fn predict(a: PredictArgs) -> mvnn::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = &ckpt.model;
    let samples: Vec<data::ImageSample> = a
        .images
        .iter()
        .map(|p| data::ImageSample {
            path: p.clone(),
            label: 0,
            event_id: None,
        })
        .collect();
    let prepared = PreparedSet::build(&samples, &model.config, Needs::of(&model.layout()))?;
    for (path, out) in a.images.iter().zip(train::predict(model, &prepared)?) {
        print_json(&json!({
            "path": path,
            "p_fake": out.p[1],
            "label": out.predicted_label,
            "alphas": out.alphas,
        }))?;
    }
    Ok(())
}
