//! Cycle segments as CNN inputs, training with best-validation
//! checkpointing, and the recording-level vote.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Metrics};
use crate::neuralnet::{
    self, build_network, AdaGrad, Checkpoint, ClassProbabilities, Example, SegmentVector, TrainParams,
    MIN_SEGMENT_LEN, SEGMENT_LEN,
};
use crate::segmenter::CardiacCycle;
use crate::signal_io::{normalize_samples, Label};

pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub parent: String,
    pub label: Label,
    pub split: Split,
    pub vector: SegmentVector,
}

/// A recording's (denoised) samples with its decoded cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedRecording {
    pub id: String,
    pub label: Label,
    pub samples: Vec<f64>,
    pub cycles: Vec<CardiacCycle>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentDataset {
    pub segments: Vec<Segment>,
    pub total_cycles: usize,
}

impl SegmentDataset {
    pub fn retention(&self) -> f64 {
        if self.total_cycles == 0 {
            0.0
        } else {
            self.segments.len() as f64 / self.total_cycles as f64
        }
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(move |s| s.split == split)
    }

    /// Recording ids in first-appearance order with their labels.
    pub fn recordings(&self) -> Vec<(String, Label)> {
        let mut seen = BTreeMap::new();
        let mut out = Vec::new();
        for s in &self.segments {
            if seen.insert(s.parent.clone(), ()).is_none() {
                out.push((s.parent.clone(), s.label));
            }
        }
        out
    }

    /// Every recording's segments share one split.
    pub fn check_split_hygiene(&self) -> Result<()> {
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.segments {
            if let Some(prev) = split_of.insert(&s.parent, s.split) {
                if prev != s.split {
                    return Err(Error::InvalidArgument(format!(
                        "recording `{}` appears in more than one split",
                        s.parent
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One segment per cycle whose length is within `[400, 1200]` samples,
/// normalized and zero-padded; all segments take `split`.
pub fn make_segment_dataset(recordings: &[SegmentedRecording], split: Split) -> SegmentDataset {
    let mut data = SegmentDataset::default();
    for rec in recordings {
        for c in &rec.cycles {
            data.total_cycles += 1;
            let len = c.len();
            if !(MIN_SEGMENT_LEN..=SEGMENT_LEN).contains(&len) || c.cycle_end > rec.samples.len() {
                continue;
            }
            let normalized = normalize_samples(&rec.samples[c.s1_start..c.cycle_end]);
            let vector = SegmentVector::from_samples(&normalized).expect("length checked");
            data.segments.push(Segment {
                parent: rec.id.clone(),
                label: rec.label,
                split,
                vector,
            });
        }
    }
    data
}

/// Marks about 10% of the recordings of each class (at least one overall)
/// as validation, chosen by a seeded shuffle.
pub fn assign_validation_split(data: &mut SegmentDataset, seed: u64) -> Result<()> {
    let recordings = data.recordings();
    if recordings.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{} recording(s) with segments cannot be split 90/10",
            recordings.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    let mut largest: Vec<String> = Vec::new();
    for class in [Label::Normal, Label::Abnormal] {
        let mut ids: Vec<String> = recordings.iter().filter(|(_, l)| *l == class).map(|(id, _)| id.clone()).collect();
        ids.shuffle(&mut rng);
        let take = (ids.len() as f64 * VALIDATION_FRACTION).round() as usize;
        val.extend(ids[..take].iter().cloned());
        if ids.len() > largest.len() {
            largest = ids;
        }
    }
    if val.is_empty() {
        val.push(largest[0].clone());
    }
    for s in &mut data.segments {
        s.split = if val.contains(&s.parent) { Split::Val } else { Split::Train };
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub fn write_training_log(path: impl AsRef<Path>, log: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn segment_accuracy(net: &neuralnet::Network, segments: &[&Segment]) -> Result<f64> {
    let inputs: Vec<&[f64]> = segments.iter().map(|s| s.vector.values()).collect();
    let probs = net.probabilities_batch(&inputs)?;
    let correct = probs.iter().zip(segments).filter(|(p, s)| p.label() == s.label).count();
    Ok(correct as f64 / segments.len() as f64)
}

/// Trains on the `Train` segments for `params.epochs` epochs and keeps the
/// network with the best segment accuracy on the `Val` segments (earliest
/// epoch on ties). Epochs are numbered from 1.
pub fn train_segmental_cnn(
    data: &SegmentDataset,
    config: &str,
    params: &TrainParams,
    seed: u64,
) -> Result<(Checkpoint, Vec<LogRow>)> {
    data.check_split_hygiene()?;
    let train: Vec<&Segment> = data.of_split(Split::Train).collect();
    let val: Vec<&Segment> = data.of_split(Split::Val).collect();
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "need training and validation segments, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let mut net = build_network(config, SEGMENT_LEN, params.dropout, seed)?;
    let mut opt = AdaGrad::new(&net, params.lr, params.l2);
    let examples: Vec<Example> = train
        .iter()
        .map(|s| Example {
            input: s.vector.values(),
            label: s.label,
            weight: 1.0,
        })
        .collect();
    let mut log = Vec::with_capacity(params.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=params.epochs {
        let train_loss = neuralnet::train_epoch(&mut net, &mut opt, &examples, params.batch_size, seed, epoch)?;
        let val_accuracy = segment_accuracy(&net, &val)?;
        log.push(LogRow {
            epoch,
            train_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            best = Some(Checkpoint {
                network: net.clone(),
                optimizer: opt.clone(),
                params: *params,
                seed,
                epoch,
                val_accuracy,
            });
        }
    }
    let best = best.ok_or_else(|| Error::InvalidArgument("zero training epochs".into()))?;
    Ok((best, log))
}

/// Eval-mode class probabilities of each segment.
pub fn classify_segments(ckpt: &Checkpoint, segments: &[SegmentVector]) -> Result<Vec<ClassProbabilities>> {
    let inputs: Vec<&[f64]> = segments.iter().map(SegmentVector::values).collect();
    ckpt.network.probabilities_batch(&inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteRule {
    threshold: f64,
}

impl VoteRule {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!("vote threshold {threshold} outside [0, 1]")));
        }
        Ok(VoteRule { threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn apply(&self, abnormal_fraction: f64) -> Label {
        if abnormal_fraction > self.threshold {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

pub fn abnormal_fraction(labels: &[Label]) -> Option<f64> {
    (!labels.is_empty()).then(|| labels.iter().filter(|l| l.is_abnormal()).count() as f64 / labels.len() as f64)
}

/// Abnormal iff the fraction of abnormal segments exceeds the threshold.
pub fn vote(labels: &[Label], rule: VoteRule) -> Result<Label> {
    abnormal_fraction(labels)
        .map(|f| rule.apply(f))
        .ok_or_else(|| Error::InvalidArgument("cannot vote over zero segments".into()))
}

/// Vote input for one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingVote {
    pub id: String,
    pub truth: Label,
    /// Abnormal-segment fraction; `None` when no segment survived.
    pub fraction: Option<f64>,
}

/// Groups per-segment labels by parent; recordings listed in `recordings`
/// without segments get no fraction.
pub fn recording_votes(recordings: &[(String, Label)], segments: &[Segment], predicted: &[Label]) -> Vec<RecordingVote> {
    let mut by_parent: BTreeMap<&str, Vec<Label>> = BTreeMap::new();
    for (s, &p) in segments.iter().zip(predicted) {
        by_parent.entry(&s.parent).or_default().push(p);
    }
    recordings
        .iter()
        .map(|(id, truth)| RecordingVote {
            id: id.clone(),
            truth: *truth,
            fraction: by_parent.get(id.as_str()).and_then(|l| abnormal_fraction(l)),
        })
        .collect()
}

/// Thresholds 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

/// Grid threshold with the best recording accuracy; ties keep the lower
/// threshold. Unsegmentable recordings are ignored.
pub fn tune_threshold(votes: &[RecordingVote]) -> Result<VoteRule> {
    let scored: Vec<(f64, Label)> = votes.iter().filter_map(|v| v.fraction.map(|f| (f, v.truth))).collect();
    if scored.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for t in threshold_grid() {
        let rule = VoteRule::new(t)?;
        let correct = scored.iter().filter(|(f, truth)| rule.apply(*f) == *truth).count();
        if best.is_none_or(|(c, _)| correct > c) {
            best = Some((correct, t));
        }
    }
    VoteRule::new(best.expect("non-empty grid").1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub score: f64,
    pub label: Label,
    pub truth: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub threshold: f64,
    pub metrics: Metrics,
    pub predictions: Vec<Prediction>,
    /// Recordings without any segment, left out of the metrics.
    pub unsegmentable: usize,
}

/// Applies `rule` to every segmented recording and scores the result, using
/// the abnormal-segment fraction as the ROC score.
pub fn evaluate_votes(votes: &[RecordingVote], rule: VoteRule) -> Result<Evaluation> {
    let predictions: Vec<Prediction> = votes
        .iter()
        .filter_map(|v| {
            v.fraction.map(|f| Prediction {
                id: v.id.clone(),
                score: f,
                label: rule.apply(f),
                truth: v.truth,
            })
        })
        .collect();
    let unsegmentable = votes.len() - predictions.len();
    let metrics = evaluate_predictions(&predictions)?;
    Ok(Evaluation {
        threshold: rule.threshold(),
        metrics,
        predictions,
        unsegmentable,
    })
}

pub fn evaluate_predictions(predictions: &[Prediction]) -> Result<Metrics> {
    let labels: Vec<Label> = predictions.iter().map(|p| p.label).collect();
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let truth: Vec<Label> = predictions.iter().map(|p| p.truth).collect();
    metrics::evaluate(&labels, &scores, &truth)
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    score: f64,
    label: i32,
    truth: i32,
}

/// `id,score,label,truth` with labels as 1 (abnormal) / -1 (normal).
pub fn write_predictions_csv(path: impl AsRef<Path>, predictions: &[Prediction]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in predictions {
        w.serialize(PredictionRow {
            id: p.id.clone(),
            score: p.score,
            label: p.label.code(),
            truth: p.truth.code(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize::<PredictionRow>()
        .map(|row| {
            let row = row?;
            if !row.score.is_finite() {
                return Err(Error::NonFinite(format!("score of `{}`", row.id)));
            }
            Ok(Prediction {
                label: Label::from_code(row.label)?,
                truth: Label::from_code(row.truth)?,
                id: row.id,
                score: row.score,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use Label::{Abnormal as A, Normal as N};

    fn cycle(start: usize, len: usize) -> CardiacCycle {
        CardiacCycle {
            s1_start: start,
            sys_start: start + len / 8,
            s2_start: start + len / 3,
            dia_start: start + len / 2,
            cycle_end: start + len,
        }
    }

    fn recording(id: &str, label: Label, lens: &[usize]) -> SegmentedRecording {
        let total: usize = lens.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(id.len() as u64);
        let mut cycles = Vec::new();
        let mut at = 0;
        for &l in lens {
            cycles.push(cycle(at, l));
            at += l;
        }
        SegmentedRecording {
            id: id.into(),
            label,
            samples: (0..total).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            cycles,
        }
    }

    #[test]
    fn segment_length_bounds() {
        let data = make_segment_dataset(&[recording("a", N, &[399, 400, 1200, 1201])], Split::Train);
        assert_eq!(data.total_cycles, 4);
        let lens: Vec<usize> = data.segments.iter().map(|s| s.vector.true_length()).collect();
        assert_eq!(lens, vec![400, 1200]);
        assert!(data.segments[0].vector.values()[400..].iter().all(|&v| v == 0.0));
        assert!(data.segments.iter().all(|s| s.vector.values().len() == SEGMENT_LEN));
        assert_eq!(data.retention(), 0.5);
    }

    #[test]
    fn labels_are_inherited() {
        let data = make_segment_dataset(&[recording("ab", A, &[800; 7])], Split::Test);
        assert_eq!(data.segments.len(), 7);
        assert!(data.segments.iter().all(|s| s.label == A && s.parent == "ab"));
    }

    #[test]
    fn validation_split_is_by_recording() {
        let recs: Vec<SegmentedRecording> = (0..30)
            .map(|i| recording(&format!("r{i:02}"), if i % 5 == 0 { A } else { N }, &[500, 600, 700]))
            .collect();
        let mut data = make_segment_dataset(&recs, Split::Train);
        assign_validation_split(&mut data, 3).unwrap();
        data.check_split_hygiene().unwrap();
        let val: Vec<(String, Label)> = {
            let mut v = SegmentDataset {
                segments: data.of_split(Split::Val).cloned().collect(),
                total_cycles: 0,
            }
            .recordings();
            v.sort();
            v
        };
        assert_eq!(val.iter().filter(|(_, l)| *l == A).count(), 1);
        assert_eq!(val.iter().filter(|(_, l)| *l == N).count(), 2);
        let mut again = make_segment_dataset(&recs, Split::Train);
        assign_validation_split(&mut again, 3).unwrap();
        assert_eq!(data, again);

        let mut single = make_segment_dataset(&[recording("x", N, &[500])], Split::Train);
        assert!(assign_validation_split(&mut single, 0).is_err());
        let mut mixed = data.clone();
        mixed.segments[1].split = if mixed.segments[0].split == Split::Val { Split::Train } else { Split::Val };
        assert!(mixed.check_split_hygiene().is_err());
    }

    #[test]
    fn vote_examples() {
        let labels = |k: usize| -> Vec<Label> { (0..10).map(|i| if i < k { A } else { N }).collect() };
        assert_eq!(vote(&labels(3), VoteRule::new(0.25).unwrap()).unwrap(), A);
        assert_eq!(vote(&labels(3), VoteRule::new(0.30).unwrap()).unwrap(), N);
        assert_eq!(vote(&labels(10), VoteRule::new(1.0).unwrap()).unwrap(), N);
        assert!(vote(&[], VoteRule::new(0.5).unwrap()).is_err());
        assert!(VoteRule::new(1.5).is_err());
    }

    fn votes(rows: &[(f64, Label)]) -> Vec<RecordingVote> {
        rows.iter()
            .enumerate()
            .map(|(i, &(f, truth))| RecordingVote {
                id: format!("v{i}"),
                truth,
                fraction: Some(f),
            })
            .collect()
    }

    #[test]
    fn tuned_thresholds() {
        // Normal recordings at most 0.18, abnormal at least 0.6: every grid
        // point from 0.20 to 0.55 is perfect and the lowest wins.
        let table = votes(&[(0.0, N), (0.1, N), (0.18, N), (0.6, A), (0.8, A)]);
        assert_eq!(tune_threshold(&table).unwrap().threshold(), 0.2);
        // With a normal recording exactly at 0.20 the strict vote still
        // calls it Normal at threshold 0.20.
        let boundary = votes(&[(0.2, N), (0.6, A)]);
        assert_eq!(tune_threshold(&boundary).unwrap().threshold(), 0.2);
        let above = votes(&[(0.22, N), (0.1, N), (0.6, A), (0.9, A)]);
        assert_eq!(tune_threshold(&above).unwrap().threshold(), 0.25);
        let single = votes(&[(0.5, A)]);
        assert_eq!(tune_threshold(&single).unwrap().threshold(), 0.05);
        let all_normal = votes(&[(0.1, N), (0.92, N), (0.4, N)]);
        assert_eq!(tune_threshold(&all_normal).unwrap().threshold(), 0.95);
        assert!(tune_threshold(&[]).is_err());
    }

    #[test]
    fn vote_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let f: f64 = rng.gen_range(0.0..=1.0);
            let mut previous = A;
            for t in threshold_grid() {
                let now = VoteRule::new(t).unwrap().apply(f);
                assert!(!(previous == N && now == A));
                previous = now;
            }
        }
    }

    #[test]
    fn unsegmentable_recordings_are_excluded() {
        let mut v = votes(&[(0.9, A), (0.1, N)]);
        v.push(RecordingVote {
            id: "empty".into(),
            truth: A,
            fraction: None,
        });
        let e = evaluate_votes(&v, VoteRule::new(0.5).unwrap()).unwrap();
        assert_eq!(e.unsegmentable, 1);
        assert_eq!(e.metrics.confusion.total(), 2);
        assert_eq!(e.metrics.accuracy, 1.0);
        assert_eq!(e.metrics.auc, Some(1.0));
    }

    #[test]
    fn prediction_csv_round_trip() {
        let preds = vec![
            Prediction {
                id: "a".into(),
                score: 0.75,
                label: A,
                truth: N,
            },
            Prediction {
                id: "b".into(),
                score: 0.0,
                label: N,
                truth: N,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pred.csv");
        write_predictions_csv(&p, &preds).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,score,label,truth\na,0.75,1,-1\n"));
        assert_eq!(read_predictions_csv(&p).unwrap(), preds);
    }

    fn toy_dataset(n_recordings: usize, seed: u64) -> SegmentDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs: Vec<SegmentedRecording> = (0..n_recordings)
            .map(|i| {
                let label = if i % 2 == 0 { N } else { A };
                let len = 400;
                let samples: Vec<f64> = (0..2 * len)
                    .map(|t| {
                        let noise = rng.gen_range(-0.2..0.2);
                        let tone = if label.is_abnormal() { (t as f64 * 0.9).sin() } else { 0.0 };
                        noise + tone
                    })
                    .collect();
                SegmentedRecording {
                    id: format!("t{i}"),
                    label,
                    samples,
                    cycles: vec![cycle(0, len), cycle(len, len)],
                }
            })
            .collect();
        make_segment_dataset(&recs, Split::Train)
    }

    #[test]
    fn training_keeps_best_epoch_and_is_deterministic() {
        let mut data = toy_dataset(20, 1);
        assign_validation_split(&mut data, 1).unwrap();
        let params = TrainParams {
            epochs: 4,
            batch_size: 8,
            lr: 0.05,
            ..TrainParams::default()
        };
        let config = "Conv([8-16,8]*2), MP, FC";
        let (ckpt, log) = train_segmental_cnn(&data, config, &params, 5).unwrap();
        assert_eq!(log.len(), 4);
        let best = log.iter().map(|r| r.val_accuracy).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(ckpt.val_accuracy, best);
        assert_eq!(log.iter().position(|r| r.val_accuracy == best).unwrap() + 1, ckpt.epoch);
        assert!(ckpt.val_accuracy >= 0.9, "{log:?}");
        let (again, log2) = train_segmental_cnn(&data, config, &params, 5).unwrap();
        assert_eq!(ckpt, again);
        assert_eq!(log, log2);

        let segs: Vec<SegmentVector> = data.segments.iter().map(|s| s.vector.clone()).collect();
        let batch = classify_segments(&ckpt, &segs).unwrap();
        for (s, p) in segs.iter().zip(&batch) {
            assert_eq!(classify_segments(&ckpt, std::slice::from_ref(s)).unwrap()[0], *p);
        }
        let zero = SegmentVector::from_samples(&[0.0; 400]).unwrap();
        let p = classify_segments(&ckpt, &[zero]).unwrap()[0];
        assert!((p.normal + p.abnormal - 1.0).abs() < 1e-9);
    }

    #[test]
    fn training_needs_both_splits() {
        let data = toy_dataset(4, 2);
        assert!(train_segmental_cnn(&data, "FCNN-Reduced", &TrainParams::default(), 0).is_err());
    }
}
