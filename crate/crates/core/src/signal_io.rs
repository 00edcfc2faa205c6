//! Loading, resampling and normalization of heart sound recordings.
//!
//! Every downstream stage assumes [`PROCESSING_RATE`]: recordings are
//! resampled right after loading so that one physiological cardiac cycle of
//! 0.4–1.2 s spans 400–1200 samples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate (Hz) used by the whole pipeline.
pub const PROCESSING_RATE: u32 = 1000;

/// Full-scale divisor for 16-bit PCM.
const PCM16_SCALE: f64 = 32768.0;

/// Mean tolerance under which a unit-peak signal counts as already normalized.
const NORMALIZED_MEAN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    /// Class index used by the classifiers: Normal = 0, Abnormal = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Normal
        } else {
            Label::Abnormal
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    /// Challenge label code: 1 = abnormal, -1 = normal.
    pub fn code(self) -> i32 {
        match self {
            Label::Normal => -1,
            Label::Abnormal => 1,
        }
    }

    pub fn from_code(code: i32) -> Result<Label> {
        match code {
            1 => Ok(Label::Abnormal),
            -1 => Ok(Label::Normal),
            other => Err(Error::Parse(format!(
                "label code must be 1 (abnormal) or -1 (normal), got {other}"
            ))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Normal => f.write_str("normal"),
            Label::Abnormal => f.write_str("abnormal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub label: Option<Label>,
}

impl Recording {
    pub fn new(id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyRecording);
        }
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Recording {
            id: id.into(),
            samples,
            sample_rate,
            label: None,
        })
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Reads a 16-bit PCM mono WAV file. Samples are scaled by 1/32768.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Recording> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit integer PCM, found {} bits ({:?})",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / PCM16_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Recording::new(id, samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Values are clipped to the representable range.
pub fn write_wav(path: impl AsRef<Path>, recording: &Recording) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: recording.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &s in &recording.samples {
        let v = (s * PCM16_SCALE).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)
}

/// Linear-interpolation resampling. Output length is
/// `round(len * target_rate / sample_rate)`.
pub fn resample(recording: &Recording, target_rate: u32) -> Result<Recording> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target rate must be positive".into()));
    }
    if target_rate == recording.sample_rate {
        return Ok(recording.clone());
    }
    let src = &recording.samples;
    let ratio = f64::from(recording.sample_rate) / f64::from(target_rate);
    let out_len = (src.len() as f64 * f64::from(target_rate) / f64::from(recording.sample_rate))
        .round()
        .max(1.0) as usize;
    let last = src.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            if hi == lo {
                src[lo]
            } else {
                src[lo] + (src[hi] - src[lo]) * frac
            }
        })
        .collect();
    Ok(Recording {
        id: recording.id.clone(),
        samples,
        sample_rate: target_rate,
        label: recording.label,
    })
}

/// Removes the mean and scales to unit peak magnitude.
pub fn normalize(recording: &Recording) -> Recording {
    Recording {
        samples: normalize_samples(&recording.samples),
        ..recording.clone()
    }
}

/// Slice form of [`normalize`]. All-zero input is returned unchanged, and an
/// already-normalized input is returned bit for bit.
pub fn normalize_samples(samples: &[f64]) -> Vec<f64> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let peak = samples.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 || (peak == 1.0 && mean.abs() <= NORMALIZED_MEAN_TOL) {
        return samples.to_vec();
    }
    let centered: Vec<f64> = samples.iter().map(|&v| v - mean).collect();
    let peak = centered.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        return centered;
    }
    centered.iter().map(|&v| v / peak).collect()
}

/// Map from recording id to label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelTable {
    pub entries: BTreeMap<String, Label>,
}

impl LabelTable {
    pub fn get(&self, id: &str) -> Option<Label> {
        self.entries.get(id).copied()
    }

    pub fn insert(&mut self, id: impl Into<String>, label: Label) -> Result<()> {
        let id = id.into();
        if self.entries.contains_key(&id) {
            return Err(Error::Parse(format!("duplicate recording id `{id}`")));
        }
        self.entries.insert(id, label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a headerless `name,label` CSV (1 = abnormal, -1 = normal).
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<LabelTable> {
    let mut table = LabelTable::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(id), Some(code), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse(format!("label line {}: expected `name,label`", lineno + 1)));
        };
        let code: i32 = code
            .parse()
            .map_err(|_| Error::Parse(format!("label line {}: bad label `{code}`", lineno + 1)))?;
        table.insert(id, Label::from_code(code)?)?;
    }
    Ok(table)
}

pub fn write_labels(path: impl AsRef<Path>, table: &LabelTable) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, label) in &table.entries {
        out.push_str(&format!("{id},{}\n", label.code()));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One amplitude per line, no header.
pub fn write_amplitude_csv(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(samples.len() * 20);
    for s in samples {
        out.push_str(&format!("{s}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_amplitude_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad amplitude `{l}`")))
        })
        .collect()
}

/// Loads, resamples to [`PROCESSING_RATE`] and normalizes.
pub fn load_for_processing(path: impl AsRef<Path>) -> Result<Recording> {
    let raw = load_wav(path)?;
    Ok(normalize(&resample(&raw, PROCESSING_RATE)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(samples: Vec<f64>, rate: u32) -> Recording {
        Recording::new("t", samples, rate).unwrap()
    }

    #[test]
    fn wav_scaling_and_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 2000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(16384i16).unwrap();
        w.write_sample(-16384i16).unwrap();
        w.finalize().unwrap();
        let r = load_wav(&path).unwrap();
        assert_eq!(r.samples, vec![0.5, -0.5]);
        assert_eq!(r.sample_rate, 2000);
        assert_eq!(r.id, "a");
        assert!(r.label.is_none());
    }

    #[test]
    fn wav_empty_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 1000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        hound::WavWriter::create(&path, spec).unwrap().finalize().unwrap();
        let err = load_wav(&path).unwrap_err();
        assert_eq!(err.to_string(), "empty recording");
    }

    #[test]
    fn wav_stereo_and_depth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 1000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(1i16).unwrap();
        w.write_sample(1i16).unwrap();
        w.finalize().unwrap();
        let msg = load_wav(&stereo).unwrap_err().to_string();
        assert!(msg.contains("mono"), "{msg}");

        let deep = dir.path().join("d.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 1000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&deep, spec).unwrap();
        w.write_sample(1i32).unwrap();
        w.finalize().unwrap();
        let msg = load_wav(&deep).unwrap_err().to_string();
        assert!(msg.contains("16-bit"), "{msg}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_wav("/nonexistent/x.wav"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn resample_examples() {
        let r = rec((0..4000).map(|i| (i as f64 * 0.01).sin()).collect(), 2000);
        let out = resample(&r, 1000).unwrap();
        assert_eq!(out.len(), 2000);
        assert_eq!(out.sample_rate, 1000);

        let same = resample(&r, 2000).unwrap();
        assert_eq!(same.samples, r.samples);

        let c = rec(vec![0.3; 777], 4000);
        for target in [1000, 3000, 9000] {
            let out = resample(&c, target).unwrap();
            assert!(out.samples.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
        assert!(resample(&c, 0).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_samples(&[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(normalize_samples(&[0.0, 0.0, 0.0]), vec![0.0, 0.0, 0.0]);
        assert_eq!(normalize_samples(&[2.0, 4.0, 6.0]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn labels_parse_and_roundtrip() {
        let t = parse_labels("a0001,1\na0002,-1\n").unwrap();
        assert_eq!(t.get("a0001"), Some(Label::Abnormal));
        assert_eq!(t.get("a0002"), Some(Label::Normal));
        assert!(parse_labels("a,1\na,-1\n").is_err());
        assert!(parse_labels("a,0\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("REFERENCE.csv");
        write_labels(&p, &t).unwrap();
        assert_eq!(read_labels(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn resample_round_trip_length(len in 1usize..3000, rate in 100u32..5000) {
            let r = rec(vec![0.1; len], rate);
            let up = resample(&r, rate * 2).unwrap();
            let back = resample(&up, rate).unwrap();
            prop_assert_eq!(back.len(), len);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-100.0f64..100.0, 1..300)) {
            let once = normalize_samples(&v);
            let twice = normalize_samples(&once);
            prop_assert_eq!(&once, &twice);
            let peak = once.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(peak == 0.0 || peak == 1.0);
            let mean = once.iter().sum::<f64>() / once.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }

        #[test]
        fn wav_round_trip(v in prop::collection::vec(any::<i16>(), 1..200)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.wav");
            let samples: Vec<f64> = v.iter().map(|&s| f64::from(s) / PCM16_SCALE).collect();
            let r = rec(samples.clone(), 1000);
            write_wav(&p, &r).unwrap();
            let back = load_wav(&p).unwrap();
            prop_assert_eq!(&back.samples, &samples);
            write_wav(&p, &back).unwrap();
            prop_assert_eq!(load_wav(&p).unwrap().samples, samples);
        }
    }
}
