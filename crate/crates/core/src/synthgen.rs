//! Deterministic synthetic phonocardiograms with exact ground truth.
//!
//! Each cycle carries Gaussian-enveloped tone bursts for S1 and S2. An
//! abnormal recording adds a band-limited noise murmur confined to systole.
//! White noise is drawn from its own random stream, so the murmur never
//! perturbs the noise realization of an otherwise identical spec.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::segmenter::{write_cycles_csv, CardiacCycle, HeartState};
use crate::signal_io::{self, Label, LabelTable, Recording, PROCESSING_RATE};

/// Burst envelope SD as a fraction of the burst duration.
const BURST_SIGMA_FRACTION: f64 = 0.25;
/// Peak level written to 16-bit WAV files.
const WAV_PEAK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Murmur {
    pub low_hz: f64,
    pub high_hz: f64,
    /// RMS of the murmur relative to the S1 amplitude.
    pub amplitude: f64,
}

impl Default for Murmur {
    fn default() -> Self {
        Murmur {
            low_hz: 150.0,
            high_hz: 400.0,
            amplitude: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub heart_rate_bpm: f64,
    pub s1_freq_hz: f64,
    pub s2_freq_hz: f64,
    pub s1_duration_ms: f64,
    pub s2_duration_ms: f64,
    pub s1_amplitude: f64,
    pub s2_amplitude: f64,
    /// S1 onset to S2 onset, as a fraction of the cycle.
    pub systole_fraction: f64,
    pub murmur: Option<Murmur>,
    pub noise_sd: f64,
    pub duration_s: f64,
    /// Time of the first S1 onset.
    pub start_offset_ms: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            heart_rate_bpm: 75.0,
            s1_freq_hz: 50.0,
            s2_freq_hz: 70.0,
            s1_duration_ms: 120.0,
            s2_duration_ms: 100.0,
            s1_amplitude: 1.0,
            s2_amplitude: 0.8,
            systole_fraction: 0.35,
            murmur: None,
            noise_sd: 0.0,
            duration_s: 8.0,
            start_offset_ms: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn cycle_ms(&self) -> f64 {
        60_000.0 / self.heart_rate_bpm
    }

    pub fn label(&self) -> Label {
        match self.murmur {
            Some(m) if m.amplitude > 0.0 => Label::Abnormal,
            _ => Label::Normal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let nyquist = f64::from(PROCESSING_RATE) / 2.0;
        if !(50.0..=150.0).contains(&self.heart_rate_bpm) {
            return bad(format!("heart rate {} outside [50, 150] bpm", self.heart_rate_bpm));
        }
        for f in [self.s1_freq_hz, self.s2_freq_hz] {
            if !(f > 0.0 && f < nyquist) {
                return bad(format!("frequency {f} Hz outside (0, {nyquist})"));
            }
        }
        if let Some(m) = self.murmur {
            if !(m.low_hz > 0.0 && m.low_hz < m.high_hz && m.high_hz < nyquist) {
                return bad(format!("murmur band {}–{} Hz invalid", m.low_hz, m.high_hz));
            }
            if !(m.amplitude >= 0.0) {
                return bad("murmur amplitude must be non-negative".into());
            }
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise SD must be non-negative".into());
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive".into());
        }
        if !(self.s1_duration_ms > 0.0 && self.s2_duration_ms > 0.0) {
            return bad("burst durations must be positive".into());
        }
        let cycle = self.cycle_ms();
        let s2_onset = self.systole_fraction * cycle;
        if s2_onset <= self.s1_duration_ms || s2_onset + self.s2_duration_ms >= cycle {
            return bad(format!(
                "S1 {} ms / S2 {} ms do not fit a {cycle:.1} ms cycle with systole fraction {}",
                self.s1_duration_ms, self.s2_duration_ms, self.systole_fraction
            ));
        }
        if !(self.start_offset_ms >= 0.0) {
            return bad("start offset must be non-negative".into());
        }
        Ok(())
    }
}

/// Ground-truth state change: `state` begins at sample `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateOnset {
    pub start: usize,
    pub state: HeartState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecording {
    pub recording: Recording,
    /// Cycles lying completely inside the recording.
    pub cycles: Vec<CardiacCycle>,
    /// Every state onset, including those of partial cycles; the first entry
    /// covers sample 0.
    pub timeline: Vec<StateOnset>,
    pub label: Label,
    pub spec: SynthSpec,
}

impl SynthRecording {
    /// State of each observation frame, taken at the frame center.
    pub fn frame_states(&self, frames: usize, decimation: usize) -> Vec<usize> {
        (0..frames)
            .map(|f| {
                let center = f * decimation + decimation / 2;
                let idx = self.timeline.partition_point(|o| o.start <= center);
                self.timeline[idx.saturating_sub(1)].state.index()
            })
            .collect()
    }

    pub fn onsets(&self, state: HeartState) -> Vec<usize> {
        self.timeline
            .iter()
            .filter(|o| o.state == state && o.start > 0)
            .map(|o| o.start)
            .collect()
    }
}

fn ms_to_sample(ms: f64) -> i64 {
    (ms * f64::from(PROCESSING_RATE) / 1000.0).round() as i64
}

fn add_burst(signal: &mut [f64], onset: i64, len: i64, freq: f64, amplitude: f64) {
    let sigma = BURST_SIGMA_FRACTION * len as f64;
    let center = onset as f64 + 0.5 * len as f64;
    let rate = f64::from(PROCESSING_RATE);
    for i in onset.max(0)..(onset + len).min(signal.len() as i64) {
        let t = i as f64;
        let env = (-0.5 * ((t - center) / sigma).powi(2)).exp();
        let phase = 2.0 * std::f64::consts::PI * freq * (t - onset as f64) / rate;
        signal[i as usize] += amplitude * env * phase.sin();
    }
}

/// White noise band-limited by zeroing DFT bins outside the band, scaled to
/// unit RMS.
fn band_noise(n: usize, low_hz: f64, high_hz: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    let mut spec = dsp::fft(&white);
    let rate = f64::from(PROCESSING_RATE);
    for (k, c) in spec.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * rate / n as f64;
        if f < low_hz || f > high_hz {
            *c = rustfft::num_complex::Complex::new(0.0, 0.0);
        }
    }
    let band: Vec<f64> = dsp::ifft(&spec).iter().map(|c| c.re).collect();
    let rms = (band.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms == 0.0 {
        band
    } else {
        band.iter().map(|v| v / rms).collect()
    }
}

pub fn generate_recording(spec: &SynthSpec) -> Result<SynthRecording> {
    generate_recording_with_id(spec, "synth")
}

pub fn generate_recording_with_id(spec: &SynthSpec, id: &str) -> Result<SynthRecording> {
    spec.validate()?;
    let n = (spec.duration_s * f64::from(PROCESSING_RATE)).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument("recording would be empty".into()));
    }
    let cycle_ms = spec.cycle_ms();
    let mut signal = vec![0.0; n];
    let mut timeline = Vec::new();
    let mut cycles = Vec::new();
    let mut murmur_mask = vec![0.0; n];

    // Start one cycle early so the recording opens mid-cycle when offset.
    let first_k = if spec.start_offset_ms > 0.0 {
        -((spec.start_offset_ms / cycle_ms).ceil() as i64)
    } else {
        0
    };
    let mut k = first_k;
    loop {
        let onset_ms = spec.start_offset_ms + k as f64 * cycle_ms;
        let s1 = ms_to_sample(onset_ms);
        if s1 >= n as i64 {
            break;
        }
        let sys = ms_to_sample(onset_ms + spec.s1_duration_ms);
        let s2 = ms_to_sample(onset_ms + spec.systole_fraction * cycle_ms);
        let dia = ms_to_sample(onset_ms + spec.systole_fraction * cycle_ms + spec.s2_duration_ms);
        let end = ms_to_sample(onset_ms + cycle_ms);

        add_burst(&mut signal, s1, sys - s1, spec.s1_freq_hz, spec.s1_amplitude);
        add_burst(&mut signal, s2, dia - s2, spec.s2_freq_hz, spec.s2_amplitude);
        // Hann taper across systole.
        let width = (s2 - sys) as f64;
        for i in sys.max(0)..s2.min(n as i64) {
            let u = (i - sys) as f64 / width;
            murmur_mask[i as usize] = (std::f64::consts::PI * u).sin().powi(2);
        }

        for (start, state) in [
            (s1, HeartState::S1),
            (sys, HeartState::Systole),
            (s2, HeartState::S2),
            (dia, HeartState::Diastole),
        ] {
            if start < n as i64 {
                let start = start.max(0) as usize;
                if let Some(last) = timeline.last_mut() {
                    let last: &mut StateOnset = last;
                    if last.start == start {
                        *last = StateOnset { start, state };
                        continue;
                    }
                }
                timeline.push(StateOnset { start, state });
            }
        }
        if s1 >= 0 && end <= n as i64 {
            cycles.push(CardiacCycle {
                s1_start: s1 as usize,
                sys_start: sys as usize,
                s2_start: s2 as usize,
                dia_start: dia as usize,
                cycle_end: end as usize,
            });
        }
        k += 1;
    }
    // Nothing but the preceding diastole before the first event.
    if timeline.first().is_none_or(|o| o.start > 0) {
        timeline.insert(
            0,
            StateOnset {
                start: 0,
                state: HeartState::Diastole,
            },
        );
    }

    let label = spec.label();
    if let Some(m) = spec.murmur.filter(|m| m.amplitude > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let band = band_noise(n, m.low_hz, m.high_hz, &mut rng);
        let scale = m.amplitude * spec.s1_amplitude;
        for ((s, b), w) in signal.iter_mut().zip(&band).zip(&murmur_mask) {
            *s += scale * b * w;
        }
    }
    if spec.noise_sd > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(0);
        let normal = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        signal.iter_mut().for_each(|s| *s += normal.sample(&mut rng));
    }

    let recording = Recording::new(id, signal, PROCESSING_RATE)?.with_label(label);
    Ok(SynthRecording {
        recording,
        cycles,
        timeline,
        label,
        spec: spec.clone(),
    })
}

/// Sampling ranges for [`generate_dataset`]; each pair is `(low, high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRanges {
    pub heart_rate_bpm: (f64, f64),
    pub duration_s: (f64, f64),
    pub noise_sd: (f64, f64),
    pub murmur_amplitude: (f64, f64),
    pub s1_amplitude: (f64, f64),
    pub s2_amplitude: (f64, f64),
    pub systole_fraction: (f64, f64),
}

impl Default for DatasetRanges {
    fn default() -> Self {
        DatasetRanges {
            heart_rate_bpm: (60.0, 100.0),
            duration_s: (6.0, 10.0),
            noise_sd: (0.02, 0.08),
            murmur_amplitude: (0.25, 0.5),
            s1_amplitude: (0.8, 1.2),
            s2_amplitude: (0.5, 0.9),
            systole_fraction: (0.32, 0.4),
        }
    }
}

impl DatasetRanges {
    pub fn with_noise(mut self, noise_sd: f64) -> Self {
        self.noise_sd = (noise_sd, noise_sd);
        self
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// `n` recordings with exactly `round(n * abnormal_fraction)` abnormal ones.
pub fn generate_dataset(
    n: usize,
    abnormal_fraction: f64,
    ranges: &DatasetRanges,
    seed: u64,
) -> Result<Vec<SynthRecording>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&abnormal_fraction) {
        return Err(Error::InvalidArgument(format!(
            "abnormal fraction {abnormal_fraction} outside [0, 1]"
        )));
    }
    let n_abnormal = (n as f64 * abnormal_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut abnormal = vec![false; n];
    for &i in &order[..n_abnormal] {
        abnormal[i] = true;
    }
    let width = n.to_string().len().max(4);
    abnormal
        .iter()
        .enumerate()
        .map(|(i, &is_abnormal)| {
            let heart_rate_bpm = draw(&mut rng, ranges.heart_rate_bpm);
            let cycle_ms = 60_000.0 / heart_rate_bpm;
            let spec = SynthSpec {
                heart_rate_bpm,
                s1_amplitude: draw(&mut rng, ranges.s1_amplitude),
                s2_amplitude: draw(&mut rng, ranges.s2_amplitude),
                systole_fraction: draw(&mut rng, ranges.systole_fraction),
                noise_sd: draw(&mut rng, ranges.noise_sd),
                duration_s: draw(&mut rng, ranges.duration_s),
                start_offset_ms: draw(&mut rng, (0.0, cycle_ms)),
                murmur: {
                    let amplitude = draw(&mut rng, ranges.murmur_amplitude);
                    is_abnormal.then_some(Murmur {
                        amplitude,
                        ..Murmur::default()
                    })
                },
                seed: rng.gen(),
                ..SynthSpec::default()
            };
            generate_recording_with_id(&spec, &format!("synth{:0width$}", i + 1))
        })
        .collect()
}

/// Writes `<id>.wav` per recording, `REFERENCE.csv` labels and `cycles.csv`
/// ground truth into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &[SynthRecording]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut labels = LabelTable::default();
    let mut cycles = Vec::new();
    for item in data {
        let rec = &item.recording;
        let peak = rec.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scaled = if peak > WAV_PEAK {
            Recording {
                samples: rec.samples.iter().map(|v| v * WAV_PEAK / peak).collect(),
                ..rec.clone()
            }
        } else {
            rec.clone()
        };
        signal_io::write_wav(dir.join(format!("{}.wav", rec.id)), &scaled)?;
        labels.insert(rec.id.clone(), item.label)?;
        cycles.extend(item.cycles.iter().map(|c| (rec.id.clone(), *c)));
    }
    signal_io::write_labels(dir.join("REFERENCE.csv"), &labels)?;
    write_cycles_csv(dir.join("cycles.csv"), &cycles)
}
