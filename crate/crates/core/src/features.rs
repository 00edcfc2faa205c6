//! Per-cycle descriptors and their per-recording mean / SD aggregates.
//!
//! The 58 descriptors fall into eleven families: interval lengths (16),
//! absolute amplitude (5), total power (5), zero-crossing rate (1),
//! amplitude at peak frequency (5), peak frequency (5), bandwidth (9),
//! Q-factor (9), total harmonic distortion (1), cepstrum peak (1) and the
//! recording-level wavelet SNR (1). Families with five entries cover the
//! windows S1, systole, S2, diastole and the whole cycle, in that order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoise::median;
use crate::dsp;
use crate::error::{Error, Result};
use crate::segmenter::CardiacCycle;

pub const N_DESCRIPTORS: usize = 58;
pub const N_FEATURES: usize = 2 * N_DESCRIPTORS;
pub const MIN_WINDOW: usize = 8;

const WINDOWS: [&str; 5] = ["s1", "sys", "s2", "dia", "cycle"];
const MIN_QUEFRENCY_S: f64 = 0.002;
const HARMONICS: std::ops::RangeInclusive<usize> = 2..=5;
/// Spectrum floor relative to the largest magnitude before taking logs.
const CEPSTRUM_FLOOR: f64 = 1e-10;

pub mod idx {
    pub const DURATION: usize = 0;
    pub const STATE_RATIO: usize = 5;
    pub const SYS_DIA_RATIO: usize = 9;
    pub const S1_S2_RATIO: usize = 10;
    pub const SOUNDS_RATIO: usize = 11;
    pub const HEART_RATE: usize = 12;
    pub const S1_TO_S2: usize = 13;
    pub const S2_TO_END: usize = 14;
    pub const S1_TO_S2_RATIO: usize = 15;
    pub const ABS_AMPLITUDE: usize = 16;
    pub const TOTAL_POWER: usize = 21;
    pub const ZCR: usize = 26;
    pub const PEAK_AMPLITUDE: usize = 27;
    pub const PEAK_FREQUENCY: usize = 32;
    pub const BANDWIDTH_3DB: usize = 37;
    pub const BANDWIDTH_6DB: usize = 42;
    pub const Q_3DB: usize = 46;
    pub const Q_6DB: usize = 51;
    pub const THD: usize = 55;
    pub const CEPSTRUM_PEAK: usize = 56;
    pub const SNR: usize = 57;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Time,
    Frequency,
    Transform,
}

/// Overall domain of a descriptor (time: intervals, amplitude, power, ZCR,
/// amplitude at peak frequency).
pub fn descriptor_domain(i: usize) -> Domain {
    match i {
        0..=31 => Domain::Time,
        32..=55 => Domain::Frequency,
        _ => Domain::Transform,
    }
}

pub fn descriptor_names() -> Vec<String> {
    let mut names: Vec<String> = WINDOWS.iter().map(|w| format!("dur_{w}")).collect();
    names.extend(["s1", "sys", "s2", "dia"].iter().map(|w| format!("ratio_{w}_cycle")));
    names.extend(
        [
            "ratio_sys_dia",
            "ratio_s1_s2",
            "ratio_sounds_cycle",
            "heart_rate_bpm",
            "interval_s1_s2",
            "interval_s2_end",
            "ratio_s1s2_cycle",
        ]
        .map(String::from),
    );
    for family in ["abs_amp", "power"] {
        names.extend(WINDOWS.iter().map(|w| format!("{family}_{w}")));
    }
    names.push("zcr_cycle".into());
    for family in ["peak_amp", "peak_freq", "bw3_"] {
        names.extend(WINDOWS.iter().map(|w| format!("{family}{}{w}", if family.ends_with('_') { "" } else { "_" })));
    }
    names.extend(WINDOWS[..4].iter().map(|w| format!("bw6_{w}")));
    names.extend(WINDOWS.iter().map(|w| format!("q3_{w}")));
    names.extend(WINDOWS[..4].iter().map(|w| format!("q6_{w}")));
    names.extend(["thd_cycle", "cepstrum_peak", "snr_dwt"].map(String::from));
    debug_assert_eq!(names.len(), N_DESCRIPTORS);
    names
}

pub fn feature_names() -> Vec<String> {
    descriptor_names()
        .into_iter()
        .flat_map(|n| [format!("{n}_mean"), format!("{n}_sd")])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub resolution: f64,
}

impl PowerSpectrum {
    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn peak_bin(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.power.iter().enumerate() {
            if p > self.power[best] {
                best = k;
            }
        }
        best
    }

    fn bin_of(&self, f: f64) -> Option<usize> {
        let k = (f / self.resolution).round() as usize;
        (k < self.power.len()).then_some(k)
    }

    /// Width (Hz) of the region around the peak staying within `drop_db`
    /// of the peak, with linear interpolation at the crossings.
    pub fn bandwidth(&self, peak: usize, drop_db: f64) -> f64 {
        let p = &self.power;
        let thr = p[peak] * 10f64.powf(-drop_db / 10.0);
        let mut lo = peak;
        while lo > 0 && p[lo - 1] >= thr {
            lo -= 1;
        }
        let left = if lo == 0 {
            self.frequencies[0]
        } else {
            let (a, b) = (p[lo - 1], p[lo]);
            self.frequencies[lo - 1] + (thr - a) / (b - a) * self.resolution
        };
        let mut hi = peak;
        while hi + 1 < p.len() && p[hi + 1] >= thr {
            hi += 1;
        }
        let right = if hi + 1 == p.len() {
            self.frequencies[hi]
        } else {
            let (a, b) = (p[hi], p[hi + 1]);
            self.frequencies[hi] + (a - thr) / (a - b) * self.resolution
        };
        right - left
    }
}

/// One-sided periodogram of the mean-removed, Hann-windowed signal; the mean
/// itself is reported as the power of bin 0. A unit-amplitude sine centered
/// on a bin has peak power 1/2 at any length.
pub fn spectrum(signal: &[f64], rate: f64) -> Result<PowerSpectrum> {
    let n = signal.len();
    if n < MIN_WINDOW {
        return Err(Error::TooShort {
            needed: MIN_WINDOW,
            got: n,
        });
    }
    let mean = dsp::mean(signal);
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect();
    let gain: f64 = window.iter().sum();
    let windowed: Vec<f64> = signal.iter().zip(&window).map(|(x, w)| (x - mean) * w).collect();
    let spec = dsp::fft(&windowed);
    let bins = n / 2 + 1;
    let resolution = rate / n as f64;
    let mut power: Vec<f64> = (0..bins)
        .map(|k| {
            let scale = if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 };
            scale * spec[k].norm_sqr() / (gain * gain)
        })
        .collect();
    power[0] = mean * mean;
    Ok(PowerSpectrum {
        frequencies: (0..bins).map(|k| k as f64 * resolution).collect(),
        power,
        resolution,
    })
}

fn real_cepstrum_peak(x: &[f64], rate: f64) -> Option<f64> {
    let spec = dsp::fft(x);
    let max_mag = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if max_mag == 0.0 {
        return None;
    }
    let floor = CEPSTRUM_FLOOR * max_mag;
    let log_mag: Vec<_> = spec
        .iter()
        .map(|c| rustfft::num_complex::Complex::new(c.norm().max(floor).ln(), 0.0))
        .collect();
    let ceps = dsp::ifft(&log_mag);
    let start = (MIN_QUEFRENCY_S * rate).ceil() as usize;
    let end = x.len() / 2;
    (start <= end).then(|| ceps[start..=end].iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max))
}

fn zero_crossing_rate(x: &[f64]) -> f64 {
    let changes = x.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    changes as f64 / (x.len() - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleDescriptor {
    pub values: [f64; N_DESCRIPTORS],
    /// `true` marks a missing descriptor.
    pub missing: [bool; N_DESCRIPTORS],
}

impl CycleDescriptor {
    fn new() -> Self {
        CycleDescriptor {
            values: [0.0; N_DESCRIPTORS],
            missing: [false; N_DESCRIPTORS],
        }
    }

    fn set(&mut self, i: usize, v: Option<f64>) {
        match v {
            Some(v) if v.is_finite() => {
                self.values[i] = v;
                self.missing[i] = false;
            }
            _ => {
                self.values[i] = 0.0;
                self.missing[i] = true;
            }
        }
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        (!self.missing[i]).then_some(self.values[i])
    }
}

/// The 58 descriptors of one cycle of a denoised recording.
pub fn compute_cycle_descriptors(
    signal: &[f64],
    cycle: &CardiacCycle,
    rate: f64,
    snr_db: f64,
) -> Result<CycleDescriptor> {
    if !cycle.is_valid(signal.len()) {
        return Err(Error::InvalidArgument(format!(
            "cycle {cycle:?} is not valid for a signal of {} samples",
            signal.len()
        )));
    }
    let bounds = [
        (cycle.s1_start, cycle.sys_start),
        (cycle.sys_start, cycle.s2_start),
        (cycle.s2_start, cycle.dia_start),
        (cycle.dia_start, cycle.cycle_end),
        (cycle.s1_start, cycle.cycle_end),
    ];
    let mut d = CycleDescriptor::new();

    let secs: Vec<f64> = bounds.iter().map(|&(a, b)| (b - a) as f64 / rate).collect();
    let (s1, sys, s2, dia, total) = (secs[0], secs[1], secs[2], secs[3], secs[4]);
    for (w, &s) in secs.iter().enumerate() {
        d.set(idx::DURATION + w, Some(s));
    }
    for w in 0..4 {
        d.set(idx::STATE_RATIO + w, Some(secs[w] / total));
    }
    let s1_to_s2 = (cycle.s2_start - cycle.s1_start) as f64 / rate;
    d.set(idx::SYS_DIA_RATIO, Some(sys / dia));
    d.set(idx::S1_S2_RATIO, Some(s1 / s2));
    d.set(idx::SOUNDS_RATIO, Some((s1 + s2) / total));
    d.set(idx::HEART_RATE, Some(60.0 / total));
    d.set(idx::S1_TO_S2, Some(s1_to_s2));
    d.set(idx::S2_TO_END, Some((cycle.cycle_end - cycle.s2_start) as f64 / rate));
    d.set(idx::S1_TO_S2_RATIO, Some(s1_to_s2 / total));

    let mut cycle_peak: Option<(f64, PowerSpectrum, usize)> = None;
    for (w, &(a, b)) in bounds.iter().enumerate() {
        let x = &signal[a..b];
        if x.len() < MIN_WINDOW {
            for base in [
                idx::ABS_AMPLITUDE,
                idx::TOTAL_POWER,
                idx::PEAK_AMPLITUDE,
                idx::PEAK_FREQUENCY,
                idx::BANDWIDTH_3DB,
                idx::Q_3DB,
            ] {
                d.set(base + w, None);
            }
            if w < 4 {
                d.set(idx::BANDWIDTH_6DB + w, None);
                d.set(idx::Q_6DB + w, None);
            }
            continue;
        }
        let n = x.len() as f64;
        d.set(idx::ABS_AMPLITUDE + w, Some(x.iter().map(|v| v.abs()).sum::<f64>() / n));
        d.set(idx::TOTAL_POWER + w, Some(x.iter().map(|v| v * v).sum::<f64>() / n));
        let spec = spectrum(x, rate)?;
        let peak = spec.peak_bin();
        let peak_power = spec.power[peak];
        d.set(idx::PEAK_AMPLITUDE + w, Some(peak_power));
        if peak_power > 0.0 {
            let f0 = spec.frequencies[peak];
            let bw3 = spec.bandwidth(peak, 3.0);
            d.set(idx::PEAK_FREQUENCY + w, Some(f0));
            d.set(idx::BANDWIDTH_3DB + w, Some(bw3));
            d.set(idx::Q_3DB + w, (bw3 > 0.0).then(|| f0 / bw3));
            if w < 4 {
                let bw6 = spec.bandwidth(peak, 6.0);
                d.set(idx::BANDWIDTH_6DB + w, Some(bw6));
                d.set(idx::Q_6DB + w, (bw6 > 0.0).then(|| f0 / bw6));
            }
            if w == 4 {
                cycle_peak = Some((f0, spec, peak));
            }
        } else {
            d.set(idx::PEAK_FREQUENCY + w, None);
            d.set(idx::BANDWIDTH_3DB + w, None);
            d.set(idx::Q_3DB + w, None);
            if w < 4 {
                d.set(idx::BANDWIDTH_6DB + w, None);
                d.set(idx::Q_6DB + w, None);
            }
        }
    }

    let full = &signal[cycle.s1_start..cycle.cycle_end];
    d.set(idx::ZCR, (full.len() >= MIN_WINDOW).then(|| zero_crossing_rate(full)));

    let thd = cycle_peak.and_then(|(f0, spec, peak)| {
        if peak == 0 {
            return None;
        }
        let harmonic_power: f64 = HARMONICS
            .filter_map(|h| spec.bin_of(h as f64 * f0))
            .map(|k| spec.power[k])
            .sum();
        Some(harmonic_power.sqrt() / spec.power[peak].sqrt())
    });
    d.set(idx::THD, thd);
    d.set(idx::CEPSTRUM_PEAK, real_cepstrum_peak(full, rate));
    d.set(idx::SNR, Some(snr_db));
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: String,
    /// Mean then SD of each descriptor, descriptor-major.
    pub values: Vec<f64>,
    /// `true` marks a missing feature.
    pub missing: Vec<bool>,
}

impl FeatureVector {
    pub fn get(&self, i: usize) -> Option<f64> {
        (!self.missing[i]).then_some(self.values[i])
    }

    /// Vector for a recording with no usable cycles: only the SNR is known.
    pub fn without_cycles(id: impl Into<String>, snr_db: f64) -> Self {
        let mut values = vec![0.0; N_FEATURES];
        let mut missing = vec![true; N_FEATURES];
        values[2 * idx::SNR] = snr_db;
        missing[2 * idx::SNR] = false;
        missing[2 * idx::SNR + 1] = false;
        FeatureVector {
            id: id.into(),
            values,
            missing,
        }
    }
}

/// Mean and sample SD of every descriptor over the cycles where it is
/// present; a descriptor present in a single cycle gets SD 0.
pub fn aggregate_features(descriptors: &[CycleDescriptor], id: &str) -> Result<FeatureVector> {
    if descriptors.is_empty() {
        return Err(Error::InvalidArgument("no cycle descriptors to aggregate".into()));
    }
    let mut values = Vec::with_capacity(N_FEATURES);
    let mut missing = Vec::with_capacity(N_FEATURES);
    for i in 0..N_DESCRIPTORS {
        let present: Vec<f64> = descriptors.iter().filter_map(|d| d.get(i)).collect();
        if present.is_empty() {
            values.extend([0.0, 0.0]);
            missing.extend([true, true]);
        } else {
            values.extend([dsp::mean(&present), dsp::sample_sd(&present)]);
            missing.extend([false, false]);
        }
    }
    Ok(FeatureVector {
        id: id.to_string(),
        values,
        missing,
    })
}

/// Full per-recording extraction over the given cycles.
pub fn extract_features(
    id: &str,
    denoised: &[f64],
    cycles: &[CardiacCycle],
    rate: f64,
    snr_db: f64,
) -> Result<FeatureVector> {
    if cycles.is_empty() {
        return Ok(FeatureVector::without_cycles(id, snr_db));
    }
    let descriptors = cycles
        .iter()
        .map(|c| compute_cycle_descriptors(denoised, c, rate, snr_db))
        .collect::<Result<Vec<_>>>()?;
    aggregate_features(&descriptors, id)
}

/// Replaces missing entries with training-set column medians. Returns the
/// completed matrix and the medians for imputing later vectors.
pub fn impute_median(rows: &[FeatureVector]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let width = rows.first().map_or(N_FEATURES, |r| r.values.len());
    let names = feature_names();
    let medians = (0..width)
        .map(|j| {
            let mut present: Vec<f64> = rows.iter().filter_map(|r| r.get(j)).collect();
            if present.is_empty() {
                let name = names.get(j).cloned().unwrap_or_else(|| format!("feature {j}"));
                return Err(Error::FullyMaskedFeature(name));
            }
            Ok(median(&mut present))
        })
        .collect::<Result<Vec<_>>>()?;
    let completed = rows.iter().map(|r| apply_medians(r, &medians)).collect();
    Ok((completed, medians))
}

pub fn apply_medians(row: &FeatureVector, medians: &[f64]) -> Vec<f64> {
    row.values
        .iter()
        .zip(&row.missing)
        .zip(medians)
        .map(|((&v, &m), &med)| if m { med } else { v })
        .collect()
}

/// Header `id,<116 names>`; an empty cell is a missing value.
pub fn write_features_csv(path: impl AsRef<Path>, rows: &[FeatureVector]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(feature_names());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.id.clone()];
        rec.extend(
            r.values
                .iter()
                .zip(&r.missing)
                .map(|(v, &m)| if m { String::new() } else { v.to_string() }),
        );
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features_csv(path: impl AsRef<Path>) -> Result<Vec<FeatureVector>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let expected = N_FEATURES + 1;
    if r.headers()?.len() != expected {
        return Err(Error::Parse(format!(
            "feature CSV has {} columns, expected {expected}",
            r.headers()?.len()
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut values = Vec::with_capacity(N_FEATURES);
        let mut missing = Vec::with_capacity(N_FEATURES);
        for cell in rec.iter().skip(1) {
            if cell.trim().is_empty() {
                values.push(0.0);
                missing.push(true);
            } else {
                values.push(
                    cell.trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("bad feature value `{cell}`")))?,
                );
                missing.push(false);
            }
        }
        rows.push(FeatureVector {
            id: rec[0].to_string(),
            values,
            missing,
        });
    }
    Ok(rows)
}

pub fn write_medians_csv(path: impl AsRef<Path>, medians: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "median"])?;
    for (name, m) in feature_names().iter().zip(medians) {
        w.write_record([name.clone(), m.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_medians_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1)
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse("bad median row".into()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(n: usize, freq: f64, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / 1000.0).sin()).collect()
    }

    fn cycle(s1: usize, sys: usize, s2: usize, dia: usize) -> CardiacCycle {
        CardiacCycle {
            s1_start: 0,
            sys_start: s1,
            s2_start: s1 + sys,
            dia_start: s1 + sys + s2,
            cycle_end: s1 + sys + s2 + dia,
        }
    }

    /// Direct one-sided DFT power without a window.
    fn dft_power(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let a = -2.0 * PI * k as f64 * i as f64 / n;
            re += v * a.cos();
            im += v * a.sin();
        }
        (re * re + im * im) / (n * n)
    }

    #[test]
    fn names_are_complete_and_unique() {
        let names = feature_names();
        assert_eq!(names.len(), 116);
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), 116);
        assert_eq!(descriptor_names()[idx::PEAK_FREQUENCY + 1], "peak_freq_sys");
        assert_eq!(descriptor_names()[idx::BANDWIDTH_6DB], "bw6_s1");
        assert_eq!(descriptor_names()[idx::SNR], "snr_dwt");
    }

    #[test]
    fn spectrum_examples() {
        let s = spectrum(&tone(1000, 100.0, 1.0), 1000.0).unwrap();
        assert_eq!(s.frequencies[s.peak_bin()], 100.0);
        assert!((s.power[s.peak_bin()] - 0.5).abs() < 1e-9);
        assert_eq!(s.resolution, 1.0);

        let dc = spectrum(&[1.0; 64], 1000.0).unwrap();
        assert_eq!(dc.power[0], 1.0);
        assert!(dc.power[1..].iter().all(|&p| p < 1e-20));

        let x: Vec<f64> = tone(1000, 50.0, 1.0)
            .iter()
            .zip(tone(1000, 200.0, 0.5))
            .map(|(a, b)| a + b)
            .collect();
        let s = spectrum(&x, 1000.0).unwrap();
        assert_eq!(s.frequencies[s.peak_bin()], 50.0);
        let oracle = dft_power(&x, 50) / dft_power(&x, 200);
        assert!((oracle - 4.0).abs() < 1e-9);
        let ratio = s.power[50] / s.power[200];
        assert!((ratio / oracle - 1.0).abs() < 0.05, "ratio {ratio}");

        assert!(spectrum(&[0.0; 7], 1000.0).is_err());
    }

    #[test]
    fn sine_peak_power_is_length_independent() {
        for n in [200, 500, 1000, 4000] {
            let s = spectrum(&tone(n, 100.0, 1.0), 1000.0).unwrap();
            assert!((s.power[s.peak_bin()] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn interval_descriptors() {
        let sig = tone(800, 60.0, 1.0);
        let d = compute_cycle_descriptors(&sig, &cycle(100, 300, 80, 320), 1000.0, 12.0).unwrap();
        let v = &d.values;
        for (i, e) in [0.1, 0.3, 0.08, 0.32, 0.8].iter().enumerate() {
            assert!((v[idx::DURATION + i] - e).abs() < 1e-12);
        }
        assert!((v[idx::SYS_DIA_RATIO] - 0.9375).abs() < 1e-12);
        assert!((v[idx::HEART_RATE] - 75.0).abs() < 1e-9);
        assert!((v[idx::S1_S2_RATIO] - 1.25).abs() < 1e-12);
        assert!((v[idx::S1_TO_S2] - 0.4).abs() < 1e-12);
        assert!((v[idx::S2_TO_END] - 0.4).abs() < 1e-12);
        assert_eq!(v[idx::SNR], 12.0);
        assert!(d.missing.iter().all(|m| !m));
    }

    #[test]
    fn silent_cycle() {
        let sig = vec![0.0; 800];
        let d = compute_cycle_descriptors(&sig, &cycle(100, 300, 80, 320), 1000.0, 300.0).unwrap();
        for w in 0..5 {
            assert_eq!(d.get(idx::ABS_AMPLITUDE + w), Some(0.0));
            assert_eq!(d.get(idx::TOTAL_POWER + w), Some(0.0));
            assert_eq!(d.get(idx::PEAK_FREQUENCY + w), None);
            assert_eq!(d.get(idx::BANDWIDTH_3DB + w), None);
            assert_eq!(d.get(idx::Q_3DB + w), None);
        }
        assert_eq!(d.get(idx::THD), None);
        assert_eq!(d.get(idx::CEPSTRUM_PEAK), None);
        assert_eq!(d.get(idx::ZCR), Some(0.0));
    }

    #[test]
    fn systolic_tone_peak_and_q() {
        let c = cycle(100, 300, 80, 320);
        let mut sig = vec![0.0; 800];
        let t = tone(300, 150.0, 1.0);
        sig[100..400].copy_from_slice(&t);
        let d = compute_cycle_descriptors(&sig, &c, 1000.0, 0.0).unwrap();
        let oracle = spectrum(&sig[100..400], 1000.0).unwrap();
        let f = d.values[idx::PEAK_FREQUENCY + 1];
        assert!((f - 150.0).abs() <= oracle.resolution);
        let bw = oracle.bandwidth(oracle.peak_bin(), 3.0);
        assert!((d.values[idx::Q_3DB + 1] - f / bw).abs() < 1e-12);
        assert!((d.values[idx::BANDWIDTH_3DB + 1] - bw).abs() < 1e-12);
    }

    #[test]
    fn short_window_is_masked() {
        let sig = tone(800, 60.0, 1.0);
        let c = CardiacCycle {
            s1_start: 0,
            sys_start: 5,
            s2_start: 400,
            dia_start: 480,
            cycle_end: 800,
        };
        let d = compute_cycle_descriptors(&sig, &c, 1000.0, 0.0).unwrap();
        assert!(d.missing[idx::ABS_AMPLITUDE]);
        assert!(d.missing[idx::PEAK_FREQUENCY]);
        assert!(d.missing[idx::Q_6DB]);
        assert!(!d.missing[idx::PEAK_FREQUENCY + 1]);
    }

    fn textured(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64 / 1000.0;
                (2.0 * PI * 55.0 * t).sin() * (-((t - 0.05) * 30.0).powi(2)).exp()
                    + 0.3 * (2.0 * PI * 210.0 * t).sin()
                    + 0.1 * ((i * 7919) % 13) as f64 / 13.0
            })
            .collect()
    }

    #[test]
    fn amplitude_scaling() {
        let sig = textured(900);
        let c = cycle(110, 290, 90, 360);
        let base = compute_cycle_descriptors(&sig, &c, 1000.0, 5.0).unwrap();
        for k in [0.2, 7.0] {
            let scaled: Vec<f64> = sig.iter().map(|v| k * v).collect();
            let d = compute_cycle_descriptors(&scaled, &c, 1000.0, 5.0).unwrap();
            for w in 0..5 {
                let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs().max(1e-12);
                assert!(rel(d.values[idx::ABS_AMPLITUDE + w], k * base.values[idx::ABS_AMPLITUDE + w]));
                assert!(rel(d.values[idx::TOTAL_POWER + w], k * k * base.values[idx::TOTAL_POWER + w]));
                for i in [idx::PEAK_FREQUENCY + w, idx::BANDWIDTH_3DB + w, idx::Q_3DB + w] {
                    assert!((d.values[i] - base.values[i]).abs() < 1e-9, "descriptor {i}");
                }
            }
            for w in 0..4 {
                for i in [idx::BANDWIDTH_6DB + w, idx::Q_6DB + w] {
                    assert!((d.values[i] - base.values[i]).abs() < 1e-9);
                }
            }
            assert_eq!(d.values[idx::ZCR], base.values[idx::ZCR]);
        }
    }

    #[test]
    fn time_scaling_of_intervals() {
        let sig = textured(2000);
        let c = cycle(110, 290, 90, 360);
        let doubled = CardiacCycle {
            s1_start: 0,
            sys_start: 220,
            s2_start: 800,
            dia_start: 980,
            cycle_end: 1700,
        };
        let a = compute_cycle_descriptors(&sig, &c, 1000.0, 0.0).unwrap();
        let b = compute_cycle_descriptors(&sig, &doubled, 1000.0, 0.0).unwrap();
        for i in 0..5 {
            assert!((b.values[i] - 2.0 * a.values[i]).abs() < 1e-9);
        }
        for i in [5, 6, 7, 8, 9, 10, 11, 15] {
            assert!((b.values[i] - a.values[i]).abs() < 1e-9, "ratio {i}");
        }
    }

    fn desc_with(k: usize, vals: &[Option<f64>]) -> Vec<CycleDescriptor> {
        vals.iter()
            .map(|v| {
                let mut d = CycleDescriptor::new();
                d.set(k, *v);
                d
            })
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let fv = aggregate_features(&desc_with(3, &[Some(1.0), Some(3.0)]), "r").unwrap();
        assert_eq!(fv.values.len(), 116);
        assert_eq!(fv.get(6), Some(2.0));
        assert!((fv.get(7).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-15);

        let fv = aggregate_features(&desc_with(3, &[Some(5.0)]), "r").unwrap();
        assert!((0..N_DESCRIPTORS).all(|i| fv.get(2 * i + 1) == Some(0.0)));

        let fv = aggregate_features(&desc_with(3, &[None, None]), "r").unwrap();
        assert!(fv.missing[6] && fv.missing[7]);

        let fv = aggregate_features(&desc_with(3, &[None, Some(4.0)]), "r").unwrap();
        assert_eq!((fv.get(6), fv.get(7)), (Some(4.0), Some(0.0)));

        assert!(aggregate_features(&[], "r").is_err());
    }

    fn fv(values: Vec<f64>, missing: Vec<bool>) -> FeatureVector {
        FeatureVector {
            id: "x".into(),
            values,
            missing,
        }
    }

    #[test]
    fn median_imputation() {
        let rows = vec![
            fv(vec![1.0], vec![false]),
            fv(vec![2.0], vec![false]),
            fv(vec![0.0], vec![true]),
            fv(vec![4.0], vec![false]),
        ];
        let (m, med) = impute_median(&rows).unwrap();
        assert_eq!(med, vec![2.0]);
        assert_eq!(m.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![1.0, 2.0, 2.0, 4.0]);

        let full = vec![fv(vec![1.0, 5.0], vec![false; 2]), fv(vec![3.0, 6.0], vec![false; 2])];
        let (m, _) = impute_median(&full).unwrap();
        assert_eq!(m, vec![vec![1.0, 5.0], vec![3.0, 6.0]]);

        // Test rows use the training medians, never their own.
        let test = fv(vec![100.0, 0.0], vec![false, true]);
        assert_eq!(apply_medians(&test, &[2.0, 5.5]), vec![100.0, 5.5]);

        let bad = vec![fv(vec![0.0], vec![true])];
        assert!(matches!(impute_median(&bad), Err(Error::FullyMaskedFeature(_))));
    }

    #[test]
    fn feature_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        let mut a = FeatureVector::without_cycles("rec1", 7.5);
        a.values[0] = 0.25;
        a.missing[0] = false;
        write_features_csv(&p, &[a.clone()]).unwrap();
        assert_eq!(read_features_csv(&p).unwrap(), vec![a]);
        let mp = dir.path().join("m.csv");
        let med: Vec<f64> = (0..116).map(|i| i as f64 * 0.5).collect();
        write_medians_csv(&mp, &med).unwrap();
        assert_eq!(read_medians_csv(&mp).unwrap(), med);
    }
}
