//! End-to-end glue: preprocessing, the feature and CNN tracks, and the
//! synthetic train/test experiments built on them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, LassoSelection, LearnerSpec, Pipeline};
use crate::denoise::{denoise, SNR_SENTINEL_DB};
use crate::error::{Error, Result};
use crate::features::{self, apply_medians, extract_features, impute_median, FeatureVector};
use crate::metrics::Metrics;
use crate::neuralnet::{Checkpoint, TrainParams};
use crate::segmental::{
    self, assign_validation_split, make_segment_dataset, recording_votes, train_segmental_cnn, tune_threshold,
    Evaluation, LogRow, Prediction, SegmentedRecording, Split, VoteRule,
};
use crate::segmenter::{CardiacCycle, Segmenter};
use crate::signal_io::{load_for_processing, normalize, read_labels, resample, Label, Recording, PROCESSING_RATE};
use crate::synthgen::{generate_dataset, DatasetRanges, SynthRecording};

/// A recording after resampling, normalization, denoising and
/// segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub id: String,
    pub label: Option<Label>,
    pub denoised: Vec<f64>,
    pub snr_db: f64,
    /// Empty when the recording is too short to segment.
    pub cycles: Vec<CardiacCycle>,
}

/// Preprocessing switches; denoising is on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub denoise: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { denoise: true }
    }
}

pub fn preprocess(recording: &Recording, segmenter: &Segmenter) -> Result<Processed> {
    preprocess_with(recording, segmenter, PreprocessOptions::default())
}

/// Resamples, normalizes, optionally denoises and segments. Without
/// denoising the SNR is reported as [`SNR_SENTINEL_DB`].
pub fn preprocess_with(recording: &Recording, segmenter: &Segmenter, options: PreprocessOptions) -> Result<Processed> {
    let at_rate = if recording.sample_rate == PROCESSING_RATE {
        recording.clone()
    } else {
        resample(recording, PROCESSING_RATE)?
    };
    let normalized = normalize(&at_rate);
    let (denoised, snr_db) = if options.denoise {
        let d = denoise(&normalized.samples)?;
        (d.signal, d.snr_db)
    } else {
        (normalized.samples, SNR_SENTINEL_DB)
    };
    let cycles = match segmenter.segment(&denoised) {
        Ok(s) => s.cycles,
        Err(Error::TooShort { .. }) => Vec::new(),
        Err(e) => return Err(e),
    };
    Ok(Processed {
        id: recording.id.clone(),
        label: recording.label,
        denoised,
        snr_db,
        cycles,
    })
}

pub fn preprocess_all(recordings: &[Recording], segmenter: &Segmenter) -> Result<Vec<Processed>> {
    preprocess_all_with(recordings, segmenter, PreprocessOptions::default())
}

pub fn preprocess_all_with(
    recordings: &[Recording],
    segmenter: &Segmenter,
    options: PreprocessOptions,
) -> Result<Vec<Processed>> {
    recordings.par_iter().map(|r| preprocess_with(r, segmenter, options)).collect()
}

impl Processed {
    pub fn features(&self) -> Result<FeatureVector> {
        extract_features(&self.id, &self.denoised, &self.cycles, f64::from(PROCESSING_RATE), self.snr_db)
    }

    pub fn require_label(&self) -> Result<Label> {
        self.label
            .ok_or_else(|| Error::InvalidArgument(format!("recording `{}` has no label", self.id)))
    }

    pub fn segmented(&self) -> Result<SegmentedRecording> {
        Ok(SegmentedRecording {
            id: self.id.clone(),
            label: self.require_label()?,
            samples: self.denoised.clone(),
            cycles: self.cycles.clone(),
        })
    }
}

fn labels_of(data: &[Processed]) -> Result<Vec<Label>> {
    data.iter().map(Processed::require_label).collect()
}

/// Geometric lasso grid from 0.1 down to 0.001.
pub fn default_lambda_grid() -> Vec<f64> {
    vec![0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub selection: LassoSelection,
    pub selected_names: Vec<String>,
    pub model: Pipeline,
    pub medians: Vec<f64>,
    pub test: Metrics,
    pub predictions: Vec<Prediction>,
}

/// Lasso selection on the training features, then class-weighted
/// logistic regression on the selected columns, scored on `test`.
pub fn run_feature_track(train: &[Processed], test: &[Processed], lambda_grid: &[f64], seed: u64) -> Result<FeatureReport> {
    let train_features = train.par_iter().map(Processed::features).collect::<Result<Vec<_>>>()?;
    let (x, medians) = impute_median(&train_features)?;
    let y = labels_of(train)?;
    let selection = baselines::lasso_select(&x, &y, lambda_grid, seed)?;
    let spec = LearnerSpec::Logistic { l1: 0.0, l2: 1e-3 };
    let model = Pipeline::fit(&spec, &x, &y, Some(&selection.subset), None, seed)?;
    let names = features::feature_names();
    let selected_names = selection.subset.iter().map(|&j| names[j].clone()).collect();
    let predictions = test
        .par_iter()
        .map(|p| {
            let row = apply_medians(&p.features()?, &medians);
            Ok(Prediction {
                id: p.id.clone(),
                score: model.score(&row),
                label: model.predict(&row),
                truth: p.require_label()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let test = segmental::evaluate_predictions(&predictions)?;
    Ok(FeatureReport {
        selection,
        selected_names,
        model,
        medians,
        test,
        predictions,
    })
}

/// A trained segmental CNN with its tuned vote threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub rule: VoteRule,
    /// Fraction of training cycles kept as segments.
    pub retention: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnReport {
    pub model: CnnModel,
    pub test: Evaluation,
}

/// Segments the training recordings, holds out 10% of them for
/// checkpoint selection and threshold tuning, and trains.
pub fn fit_cnn(train: &[Processed], config: &str, params: &TrainParams, seed: u64) -> Result<CnnModel> {
    let segmented = train.iter().map(Processed::segmented).collect::<Result<Vec<_>>>()?;
    let mut data = make_segment_dataset(&segmented, Split::Train);
    assign_validation_split(&mut data, seed)?;
    let (checkpoint, log) = train_segmental_cnn(&data, config, params, seed)?;

    let val_recordings: Vec<(String, Label)> = data
        .recordings()
        .into_iter()
        .filter(|(id, _)| data.segments.iter().any(|s| &s.parent == id && s.split == Split::Val))
        .collect();
    let rule = tune_threshold(&vote_on(&checkpoint, &data, &val_recordings, Split::Val)?)?;
    Ok(CnnModel {
        checkpoint,
        log,
        rule,
        retention: data.retention(),
    })
}

/// Votes the checkpoint's segment decisions into recording labels.
pub fn evaluate_cnn(checkpoint: &Checkpoint, rule: VoteRule, test: &[Processed]) -> Result<Evaluation> {
    let test_segmented = test.iter().map(Processed::segmented).collect::<Result<Vec<_>>>()?;
    let test_data = make_segment_dataset(&test_segmented, Split::Test);
    let test_recordings: Vec<(String, Label)> = test_segmented.iter().map(|r| (r.id.clone(), r.label)).collect();
    let votes = vote_on(checkpoint, &test_data, &test_recordings, Split::Test)?;
    segmental::evaluate_votes(&votes, rule)
}

impl CnnModel {
    /// Writes `checkpoint.json`, `training_log.csv` and `vote_rule.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(dir.join("checkpoint.json"))?;
        segmental::write_training_log(dir.join("training_log.csv"), &self.log)?;
        let rule_path = dir.join("vote_rule.json");
        std::fs::write(&rule_path, serde_json::to_string_pretty(&self.rule)? + "\n").map_err(|e| Error::io(&rule_path, e))
    }
}

/// Checkpoint and vote rule from a directory written by [`CnnModel::save`].
pub fn load_cnn(dir: impl AsRef<Path>) -> Result<(Checkpoint, VoteRule)> {
    let dir = dir.as_ref();
    let checkpoint = Checkpoint::load(dir.join("checkpoint.json"))?;
    let rule_path = dir.join("vote_rule.json");
    let text = std::fs::read_to_string(&rule_path).map_err(|e| Error::io(&rule_path, e))?;
    let rule: VoteRule =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", rule_path.display())))?;
    Ok((checkpoint, VoteRule::new(rule.threshold())?))
}

/// Abnormal segment fraction and voted label of one recording, or `None`
/// when none of its cycles yields a segment.
pub fn cnn_predict(checkpoint: &Checkpoint, rule: VoteRule, processed: &Processed) -> Result<Option<(f64, Label)>> {
    let rec = SegmentedRecording {
        id: processed.id.clone(),
        label: processed.label.unwrap_or(Label::Normal),
        samples: processed.denoised.clone(),
        cycles: processed.cycles.clone(),
    };
    let vectors: Vec<_> = make_segment_dataset(&[rec], Split::Test)
        .segments
        .into_iter()
        .map(|s| s.vector)
        .collect();
    let predicted: Vec<Label> = segmental::classify_segments(checkpoint, &vectors)?.iter().map(|p| p.label()).collect();
    Ok(segmental::abnormal_fraction(&predicted).map(|f| (f, rule.apply(f))))
}

pub fn run_cnn_track(
    train: &[Processed],
    test: &[Processed],
    config: &str,
    params: &TrainParams,
    seed: u64,
) -> Result<CnnReport> {
    let model = fit_cnn(train, config, params, seed)?;
    let test = evaluate_cnn(&model.checkpoint, model.rule, test)?;
    Ok(CnnReport { model, test })
}

fn vote_on(
    ckpt: &Checkpoint,
    data: &segmental::SegmentDataset,
    recordings: &[(String, Label)],
    split: Split,
) -> Result<Vec<segmental::RecordingVote>> {
    let segments: Vec<segmental::Segment> = data.of_split(split).cloned().collect();
    let vectors: Vec<_> = segments.iter().map(|s| s.vector.clone()).collect();
    let predicted: Vec<Label> = segmental::classify_segments(ckpt, &vectors)?.iter().map(|p| p.label()).collect();
    Ok(recording_votes(recordings, &segments, &predicted))
}

/// Synthetic training set plus a balanced held-out test set drawn with a
/// different seed; test ids are prefixed `test`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub n_train: usize,
    pub abnormal_fraction: f64,
    pub n_test: usize,
    pub noise_sd: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        SyntheticSetup {
            n_train: 200,
            abnormal_fraction: 0.17,
            n_test: 40,
            noise_sd: DatasetRanges::default().noise_sd,
            seed: 2016,
        }
    }
}

impl SyntheticSetup {
    pub fn generate(&self) -> Result<(Vec<SynthRecording>, Vec<SynthRecording>)> {
        let ranges = DatasetRanges {
            noise_sd: self.noise_sd,
            ..DatasetRanges::default()
        };
        let train = generate_dataset(self.n_train, self.abnormal_fraction, &ranges, self.seed)?;
        let mut test = generate_dataset(self.n_test, 0.5, &ranges, self.seed.wrapping_add(1))?;
        for t in &mut test {
            t.recording.id = t.recording.id.replacen("synth", "test", 1);
        }
        Ok((train, test))
    }

    /// Generated recordings, preprocessed with `segmenter`.
    pub fn prepare(&self, segmenter: &Segmenter) -> Result<(Vec<Processed>, Vec<Processed>)> {
        let (train, test) = self.generate()?;
        let recordings = |d: &[SynthRecording]| -> Vec<Recording> { d.iter().map(|r| r.recording.clone()).collect() };
        Ok((
            preprocess_all(&recordings(&train), segmenter)?,
            preprocess_all(&recordings(&test), segmenter)?,
        ))
    }
}

/// Loads every `*.wav` in `dir` (sorted by name) for processing and
/// attaches labels from `labels`, or from `dir/REFERENCE.csv` when present.
pub fn load_directory(dir: impl AsRef<Path>, labels: Option<&Path>) -> Result<Vec<Recording>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!("no .wav files in {}", dir.display())));
    }
    let default_labels = dir.join("REFERENCE.csv");
    let table = match labels {
        Some(p) => Some(read_labels(p)?),
        None if default_labels.exists() => Some(read_labels(&default_labels)?),
        None => None,
    };
    paths
        .par_iter()
        .map(|p| {
            let mut rec = load_for_processing(p)?;
            rec.id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(t) = &table {
                let label = t
                    .get(&rec.id)
                    .ok_or_else(|| Error::Parse(format!("no label for recording `{}`", rec.id)))?;
                rec = rec.with_label(label);
            }
            Ok(rec)
        })
        .collect()
}

/// A fitted baseline together with the training medians used to impute
/// missing features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub pipeline: Pipeline,
    pub medians: Vec<f64>,
}

impl BaselineModel {
    pub fn predict(&self, features: &FeatureVector) -> (f64, Label) {
        let row = apply_medians(features, &self.medians);
        (self.pipeline.score(&row), self.pipeline.predict(&row))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: BaselineModel = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.medians.len() != features::N_FEATURES {
            return Err(Error::Checkpoint(format!(
                "expected {} medians, found {}",
                features::N_FEATURES,
                model.medians.len()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_recordings_are_unsegmentable() {
        let seg = Segmenter::pretrained().unwrap();
        let rec = Recording::new("short", (0..300).map(|i| (i as f64 * 0.3).sin()).collect(), 1000)
            .unwrap()
            .with_label(Label::Normal);
        let p = preprocess(&rec, &seg).unwrap();
        assert!(p.cycles.is_empty());
        assert_eq!(p.features().unwrap().missing.iter().filter(|m| !**m).count(), 2);
    }

    #[test]
    fn denoising_can_be_switched_off() {
        let seg = Segmenter::pretrained().unwrap();
        let rec = Recording::new("sine", (0..2000).map(|i| (i as f64 * 0.3).sin()).collect(), 1000).unwrap();
        let p = preprocess_with(&rec, &seg, PreprocessOptions { denoise: false }).unwrap();
        assert_eq!(p.denoised, normalize(&rec).samples);
        assert_eq!(p.snr_db, SNR_SENTINEL_DB);
        assert_ne!(preprocess(&rec, &seg).unwrap().denoised, p.denoised);
    }

    #[test]
    fn synthetic_split_ids_are_disjoint() {
        let setup = SyntheticSetup {
            n_train: 6,
            n_test: 4,
            ..SyntheticSetup::default()
        };
        let (train, test) = setup.generate().unwrap();
        assert!(test.iter().all(|t| t.recording.id.starts_with("test")));
        assert!(train.iter().all(|t| !test.iter().any(|s| s.recording.id == t.recording.id)));
        assert_eq!(test.iter().filter(|t| t.label.is_abnormal()).count(), 2);
    }
}
