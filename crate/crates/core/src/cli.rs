//! Command-line entry point. Exit status 0 on success, 1 on usage errors,
//! 2 on data errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{self, CvReport, Direction, ForestParams, LearnerSpec, Pipeline};
use crate::error::{Error, Result};
use crate::features::{self, impute_median, read_features_csv, write_features_csv, N_FEATURES};
use crate::metrics::{write_metrics_json, write_roc_csv};
use crate::neuralnet::{Checkpoint, Layer, SegmentVector, Tensor, TrainParams, SEGMENT_LEN};
use crate::pipeline::{self, load_directory, preprocess_all_with, BaselineModel, PreprocessOptions, Processed};
use crate::segmental::{
    self, make_segment_dataset, read_predictions_csv, write_predictions_csv, Prediction,
    SegmentedRecording, Split,
};
use crate::segmenter::{write_cycles_csv, Segmenter};
use crate::signal_io::{load_for_processing, normalize_samples, read_amplitude_csv, read_labels, write_amplitude_csv};
use crate::synthgen::{generate_dataset, write_dataset, DatasetRanges};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "heartnet", version, about = "Heart sound classification experiments")]
pub struct Cli {
    /// Seed for every random choice; required by `synth`, `train-baseline`
    /// and `train-cnn`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Segment and extract features from the normalized signal without
    /// wavelet denoising.
    #[arg(long, global = true)]
    pub no_denoise: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled synthetic data set with ground-truth cycles.
    Synth(SynthArgs),
    /// Denoise one recording into an amplitude CSV.
    Denoise(DenoiseArgs),
    /// Segment every recording of a directory into cardiac cycles.
    Segment(DataArgs),
    /// Extract the 116 cycle statistics of every recording.
    Features(DataArgs),
    /// Cross-validate and fit a classical classifier on a feature table.
    TrainBaseline(BaselineArgs),
    /// Train a segmental CNN with best-validation checkpointing.
    TrainCnn(CnnArgs),
    /// Score predictions or a trained model.
    Evaluate(EvaluateArgs),
    /// Write learned filters and per-layer activations as CSV.
    ExportViz(VizArgs),
}

impl Command {
    fn needs_seed(&self) -> bool {
        matches!(self, Command::Synth(_) | Command::TrainBaseline(_) | Command::TrainCnn(_))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Fraction of abnormal recordings.
    #[arg(long, default_value_t = 0.17)]
    pub abnormal: f64,
    /// Noise SD for every recording; drawn from the default range if unset.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory of WAV recordings.
    #[arg(long)]
    pub data: PathBuf,
    /// Label CSV; defaults to REFERENCE.csv in the data directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Learner {
    Logistic,
    Svm,
    Nb,
    Knn,
    Tree,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Selection {
    None,
    Forward,
    Backward,
    Lasso,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Feature CSV written by `features`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum)]
    pub learner: Learner,
    #[arg(long, value_enum, default_value_t = Selection::None)]
    pub select: Selection,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CnnArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Preset name or architecture text.
    #[arg(long, default_value = "FCNN-Small")]
    pub preset: String,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV `id,score,label,truth`.
    #[arg(long, conflicts_with_all = ["cnn", "baseline"])]
    pub predictions: Option<PathBuf>,
    /// Output directory of `train-cnn`.
    #[arg(long, requires = "data", conflicts_with = "baseline")]
    pub cnn: Option<PathBuf>,
    /// Model file written by `train-baseline`.
    #[arg(long, requires = "data")]
    pub baseline: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A WAV recording (its first usable cycle) or an amplitude CSV segment.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { EXIT_USAGE } else { 0 };
        }
    };
    if cli.seed.is_none() && cli.command.needs_seed() {
        let _ = Cli::command()
            .error(ErrorKind::MissingRequiredArgument, "this subcommand requires --seed")
            .print();
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn processed_dir(data: &Path, labels: Option<&Path>, options: PreprocessOptions) -> Result<Vec<Processed>> {
    let recordings = load_directory(data, labels)?;
    preprocess_all_with(&recordings, &Segmenter::pretrained()?, options)
}

fn execute(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or_default();
    let options = PreprocessOptions {
        denoise: !cli.no_denoise,
    };
    match &cli.command {
        Command::Synth(a) => {
            let ranges = match a.noise {
                Some(sd) => DatasetRanges::default().with_noise(sd),
                None => DatasetRanges::default(),
            };
            write_dataset(&a.out, &generate_dataset(a.n, a.abnormal, &ranges, seed)?)
        }
        Command::Denoise(a) => {
            let rec = load_for_processing(&a.input)?;
            let d = crate::denoise::denoise(&rec.samples)?;
            write_amplitude_csv(&a.out, &d.signal)?;
            println!("snr_db={:.3}", d.snr_db);
            Ok(())
        }
        Command::Segment(a) => {
            let processed = processed_dir(&a.data, a.labels.as_deref(), options)?;
            let cycles: Vec<_> = processed
                .iter()
                .flat_map(|p| p.cycles.iter().map(move |c| (p.id.clone(), *c)))
                .collect();
            write_cycles_csv(&a.out, &cycles)
        }
        Command::Features(a) => {
            let processed = processed_dir(&a.data, a.labels.as_deref(), options)?;
            let rows = processed.iter().map(Processed::features).collect::<Result<Vec<_>>>()?;
            write_features_csv(&a.out, &rows)
        }
        Command::TrainBaseline(a) => train_baseline(a, seed),
        Command::TrainCnn(a) => train_cnn(a, options, seed),
        Command::Evaluate(a) => evaluate(a, options),
        Command::ExportViz(a) => export_viz(a, options),
    }
}

/// Hyperparameter grid searched by cross-validation for each learner.
pub fn default_grid(learner: Learner, n_features: usize) -> Vec<LearnerSpec> {
    match learner {
        Learner::Logistic => [1e-3, 1e-2, 1e-1]
            .into_iter()
            .map(|l2| LearnerSpec::Logistic { l1: 0.0, l2 })
            .collect(),
        Learner::Svm => [0.1, 1.0, 10.0].into_iter().map(|cost| LearnerSpec::LinearSvm { cost }).collect(),
        Learner::Nb => vec![LearnerSpec::GaussianNb],
        Learner::Knn => [1, 3, 5, 7, 9].into_iter().map(|k| LearnerSpec::Knn { k }).collect(),
        Learner::Tree => [2, 4, 6, 8].into_iter().map(|max_depth| LearnerSpec::Tree { max_depth }).collect(),
        Learner::Forest => {
            let sqrt = ((n_features as f64).sqrt().round() as usize).max(1);
            [sqrt, (2 * sqrt).min(n_features.max(1))]
                .into_iter()
                .flat_map(|max_features| {
                    [4, 8].into_iter().map(move |max_depth| {
                        LearnerSpec::Forest(ForestParams {
                            n_estimators: 100,
                            max_features,
                            max_depth,
                            bootstrap: true,
                        })
                    })
                })
                .collect()
        }
    }
}

fn train_baseline(a: &BaselineArgs, seed: u64) -> Result<()> {
    let rows = read_features_csv(&a.features)?;
    let table = read_labels(&a.labels)?;
    let y = rows
        .iter()
        .map(|r| table.get(&r.id).ok_or_else(|| Error::Parse(format!("no label for recording `{}`", r.id))))
        .collect::<Result<Vec<_>>>()?;
    let (x, medians) = impute_median(&rows)?;
    let subset: Vec<usize> = match a.select {
        Selection::None => (0..N_FEATURES).collect(),
        Selection::Lasso => baselines::lasso_select(&x, &y, &pipeline::default_lambda_grid(), seed)?.subset,
        Selection::Forward | Selection::Backward => {
            let direction = if a.select == Selection::Forward { Direction::Forward } else { Direction::Backward };
            let learner = LearnerSpec::Logistic { l1: 0.0, l2: 1e-2 };
            baselines::stepwise_select(direction, &learner, &x, &y, seed)?
        }
    };
    if subset.is_empty() {
        return Err(Error::InvalidArgument("feature selection kept no features".into()));
    }
    let report: CvReport = baselines::cross_validate(&default_grid(a.learner, subset.len()), &x, &y, Some(&subset), seed)?;
    let model = BaselineModel {
        pipeline: Pipeline::fit(&report.chosen, &x, &y, Some(&subset), None, seed)?,
        medians,
    };
    create_dir(&a.out)?;
    report.save(a.out.join("cv_report.json"))?;
    model.save(a.out.join("model.json"))?;
    let names = features::feature_names();
    let selected: Vec<&str> = subset.iter().map(|&j| names[j].as_str()).collect();
    write_json(&a.out.join("selected_features.json"), &selected)?;
    println!("cv accuracy {:.4} with {:?}", report.mean.accuracy, report.chosen);
    Ok(())
}

fn train_cnn(a: &CnnArgs, options: PreprocessOptions, seed: u64) -> Result<()> {
    let processed = processed_dir(&a.data, a.labels.as_deref(), options)?;
    let params = TrainParams {
        lr: a.lr,
        l2: a.l2,
        dropout: a.dropout,
        batch_size: a.batch_size,
        epochs: a.epochs,
    };
    let model = pipeline::fit_cnn(&processed, &a.preset, &params, seed)?;
    model.save(&a.out)?;
    println!(
        "best epoch {} val accuracy {:.4}, vote threshold {:.2}, segment retention {:.3}",
        model.checkpoint.epoch,
        model.checkpoint.val_accuracy,
        model.rule.threshold(),
        model.retention
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs, options: PreprocessOptions) -> Result<()> {
    let predictions: Vec<Prediction> = if let Some(p) = &a.predictions {
        read_predictions_csv(p)?
    } else {
        let data = a
            .data
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--data is required with a model".into()))?;
        let processed = processed_dir(data, a.labels.as_deref(), options)?;
        if let Some(dir) = &a.cnn {
            let (ckpt, rule) = pipeline::load_cnn(dir)?;
            let evaluation = pipeline::evaluate_cnn(&ckpt, rule, &processed)?;
            if evaluation.unsegmentable > 0 {
                eprintln!("{} unsegmentable recording(s) excluded", evaluation.unsegmentable);
            }
            evaluation.predictions
        } else if let Some(path) = &a.baseline {
            let model = BaselineModel::load(path)?;
            processed
                .iter()
                .map(|p| {
                    let (score, label) = model.predict(&p.features()?);
                    Ok(Prediction {
                        id: p.id.clone(),
                        score,
                        label,
                        truth: p.require_label()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            return Err(Error::InvalidArgument(
                "give --predictions, or --cnn/--baseline with --data".into(),
            ));
        }
    };
    let metrics = segmental::evaluate_predictions(&predictions)?;
    create_dir(&a.out)?;
    write_metrics_json(a.out.join("metrics.json"), &metrics)?;
    write_roc_csv(a.out.join("roc.csv"), &metrics.roc)?;
    if a.predictions.is_none() {
        write_predictions_csv(a.out.join("predictions.csv"), &predictions)?;
    }
    println!("accuracy {:.4}", metrics.accuracy);
    Ok(())
}

/// Normalized, padded input segment for visualization.
fn viz_segment(path: &Path, options: PreprocessOptions) -> Result<SegmentVector> {
    let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    if !is_wav {
        return SegmentVector::from_samples(&normalize_samples(&read_amplitude_csv(path)?));
    }
    let rec = load_for_processing(path)?;
    let p = pipeline::preprocess_with(&rec, &Segmenter::pretrained()?, options)?;
    let segmented = SegmentedRecording {
        id: p.id,
        label: crate::signal_io::Label::Normal,
        samples: p.denoised,
        cycles: p.cycles,
    };
    make_segment_dataset(&[segmented], Split::Test)
        .segments
        .into_iter()
        .next()
        .map(|s| s.vector)
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no usable cycle", path.display())))
}

fn write_rows(path: &Path, rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    for row in rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One filter CSV per convolution (a row per filter) and one activation
/// CSV per layer (a row per channel), activations clamped to [0, 1].
fn export_viz(a: &VizArgs, options: PreprocessOptions) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.network.input_len != SEGMENT_LEN {
        return Err(Error::Checkpoint(format!(
            "network expects {} samples, segments have {SEGMENT_LEN}",
            ckpt.network.input_len
        )));
    }
    let segment = viz_segment(&a.input, options)?;
    create_dir(&a.out)?;
    for (i, conv) in ckpt.network.conv_layers().enumerate() {
        write_rows(
            &a.out.join(format!("filters_conv{}.csv", i + 1)),
            (0..conv.n_filters()).map(|k| conv.filter(k).to_vec()),
        )?;
    }
    let clamp = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x.clamp(0.0, 1.0)).collect() };
    let activations = ckpt.network.activations(segment.values())?;
    let shown = activations.into_iter().filter(|(name, _)| *name != "dropout");
    for (k, (name, t)) in shown.enumerate() {
        let rows: Vec<Vec<f64>> = match &t {
            Tensor::Seq(channels) => channels.iter().map(|c| clamp(c)).collect(),
            Tensor::Flat(v) => vec![clamp(v)],
        };
        write_rows(&a.out.join(format!("activations_{:02}_{name}.csv", k + 1)), rows.into_iter())?;
    }
    let layers: Vec<&str> = ckpt
        .network
        .layers
        .iter()
        .filter(|l| !matches!(l, Layer::Dropout { .. }))
        .map(Layer::name)
        .collect();
    println!("exported {} layers of `{}`", layers.len(), ckpt.network.config);
    Ok(())
}
