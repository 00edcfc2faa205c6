//! Heartbeat segmentation into S1 / systole / S2 / diastole.

mod envelope;
mod hsmm;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use envelope::{
    extract_envelopes, raw_envelopes, standardize, EnvelopeFeatures, BAND_POWER, DECIMATION,
    DWT_DETAIL, FEATURE_RATE, HILBERT, HOMOMORPHIC, N_ENVELOPES,
};
pub use hsmm::{
    estimate_heart_rate, fit_emissions, fit_gaussian, hsmm_decode, hsmm_decode_scored, respects_cyclic_order,
    DurationModel, Emission, HeartRate, HeartState, HsmmParams, EMISSION_SD_FLOOR,
};

use crate::denoise::denoise;
use crate::error::{Error, Result};
use crate::synthgen::{self, DatasetRanges};

/// Sample-index boundaries of one complete heart cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CardiacCycle {
    pub s1_start: usize,
    pub sys_start: usize,
    pub s2_start: usize,
    pub dia_start: usize,
    pub cycle_end: usize,
}

impl CardiacCycle {
    pub fn len(&self) -> usize {
        self.cycle_end - self.s1_start
    }

    pub fn is_empty(&self) -> bool {
        self.cycle_end == self.s1_start
    }

    pub fn is_valid(&self, recording_len: usize) -> bool {
        self.s1_start < self.sys_start
            && self.sys_start < self.s2_start
            && self.s2_start < self.dia_start
            && self.dia_start < self.cycle_end
            && self.cycle_end <= recording_len
    }
}

/// One cycle per complete S1, systole, S2, diastole run of frames. Frame
/// indices are scaled to samples at the processing rate.
pub fn cycles_from_states(states: &[usize], feature_rate: u32) -> Vec<CardiacCycle> {
    let scale = (crate::signal_io::PROCESSING_RATE / feature_rate) as usize;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for (t, &s) in states.iter().enumerate() {
        if runs.last().is_none_or(|&(st, _)| st != s) {
            runs.push((s, t));
        }
    }
    let end_of = |i: usize| runs.get(i + 1).map_or(states.len(), |r| r.1);
    let mut cycles = Vec::new();
    let mut i = 0;
    while i + 3 < runs.len() {
        let pattern = [runs[i].0, runs[i + 1].0, runs[i + 2].0, runs[i + 3].0];
        if pattern == [0, 1, 2, 3] {
            cycles.push(CardiacCycle {
                s1_start: runs[i].1 * scale,
                sys_start: runs[i + 1].1 * scale,
                s2_start: runs[i + 2].1 * scale,
                dia_start: runs[i + 3].1 * scale,
                cycle_end: end_of(i + 3) * scale,
            });
            i += 4;
        } else {
            i += 1;
        }
    }
    cycles
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub states: Vec<usize>,
    pub cycles: Vec<CardiacCycle>,
    pub heart_rate: HeartRate,
}

/// HSMM segmenter with fixed emissions; durations are re-derived from each
/// recording's heart rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmenter {
    pub emissions: Vec<Emission>,
}

/// Seed and size of the synthetic set the default emissions are fit on.
const DEFAULT_TRAINING_SEED: u64 = 0x5e9_2016;
const DEFAULT_TRAINING_SIZE: usize = 16;

impl Segmenter {
    pub fn new(emissions: Vec<Emission>) -> Result<Self> {
        if emissions.len() != 4 {
            return Err(Error::InvalidArgument(
                "heart-cycle segmenter needs four emission models".into(),
            ));
        }
        Ok(Segmenter { emissions })
    }

    /// Emissions fit to denoised synthetic recordings with known state
    /// boundaries, matching the input [`Segmenter::segment`] expects.
    pub fn train_on_synthetic(recordings: &[synthgen::SynthRecording]) -> Result<Self> {
        let labeled = recordings
            .iter()
            .map(|r| {
                let env = extract_envelopes(&denoise(&r.recording.samples)?.signal)?;
                let states = r.frame_states(env.frames(), DECIMATION);
                Ok((env, states))
            })
            .collect::<Result<Vec<_>>>()?;
        Segmenter::new(fit_emissions(&labeled, 4)?)
    }

    /// Emissions from a fixed, seeded synthetic training set.
    pub fn pretrained() -> Result<Self> {
        let data = synthgen::generate_dataset(
            DEFAULT_TRAINING_SIZE,
            0.25,
            &DatasetRanges::default(),
            DEFAULT_TRAINING_SEED,
        )?;
        Self::train_on_synthetic(&data)
    }

    pub fn segment(&self, signal: &[f64]) -> Result<Segmentation> {
        let env = extract_envelopes(signal)?;
        self.segment_envelopes(&env)
    }

    pub fn segment_envelopes(&self, env: &EnvelopeFeatures) -> Result<Segmentation> {
        let heart_rate = if env.frames() >= hsmm::MIN_HR_FRAMES {
            estimate_heart_rate(env)?
        } else {
            HeartRate::FALLBACK
        };
        let (heart_rate, states) = self.decode_best_systole(env, heart_rate)?;
        let cycles = cycles_from_states(&states, env.feature_rate);
        Ok(Segmentation {
            states,
            cycles,
            heart_rate,
        })
    }
}

/// Systole fractions tried when refining the autocorrelation estimate.
const SYSTOLE_GRID: (f64, f64, usize) = (0.25, 0.45, 21);

impl Segmenter {
    /// Decodes with the estimated systole fraction and with every fraction on
    /// a fixed grid, keeping the highest-scoring segmentation. The envelope
    /// autocorrelation often misses the S1-S2 lag when S2 is faint.
    fn decode_best_systole(
        &self,
        env: &EnvelopeFeatures,
        estimate: HeartRate,
    ) -> Result<(HeartRate, Vec<usize>)> {
        let (lo, hi, n) = SYSTOLE_GRID;
        let candidates = std::iter::once(estimate.systole_fraction)
            .chain((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64));
        let mut best: Option<(f64, HeartRate, Vec<usize>)> = None;
        for fraction in candidates {
            let hr = HeartRate {
                systole_fraction: fraction,
                ..estimate
            };
            let params = HsmmParams::for_heart_rate(&hr, self.emissions.clone());
            let (states, score) = hsmm_decode_scored(env, &params)?;
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, hr, states));
            }
        }
        let (_, hr, states) = best.expect("at least one candidate");
        Ok((hr, states))
    }
}

const CYCLE_HEADER: [&str; 6] = ["record_id", "s1_start", "sys_start", "s2_start", "dia_start", "cycle_end"];

pub fn write_cycles_csv(path: impl AsRef<Path>, cycles: &[(String, CardiacCycle)]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CYCLE_HEADER)?;
    for (id, c) in cycles {
        w.write_record([
            id.clone(),
            c.s1_start.to_string(),
            c.sys_start.to_string(),
            c.s2_start.to_string(),
            c.dia_start.to_string(),
            c.cycle_end.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_cycles_csv(path: impl AsRef<Path>) -> Result<Vec<(String, CardiacCycle)>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        if row.len() != 6 {
            return Err(Error::Parse(format!("cycle row has {} fields, expected 6", row.len())));
        }
        let idx = |i: usize| -> Result<usize> {
            row[i]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad sample index `{}`", &row[i])))
        };
        out.push((
            row[0].to_string(),
            CardiacCycle {
                s1_start: idx(1)?,
                sys_start: idx(2)?,
                s2_start: idx(3)?,
                dia_start: idx(4)?,
                cycle_end: idx(5)?,
            },
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(runs: &[(usize, usize)]) -> Vec<usize> {
        runs.iter().flat_map(|&(s, n)| std::iter::repeat_n(s, n)).collect()
    }

    #[test]
    fn one_complete_cycle() {
        let states = seq(&[(0, 5), (1, 15), (2, 5), (3, 25)]);
        let cycles = cycles_from_states(&states, 50);
        assert_eq!(
            cycles,
            vec![CardiacCycle {
                s1_start: 0,
                sys_start: 100,
                s2_start: 400,
                dia_start: 500,
                cycle_end: 1000
            }]
        );
        assert_eq!(cycles[0].len(), 1000);
    }

    #[test]
    fn leading_partial_dropped() {
        let states = seq(&[(3, 7), (0, 5), (1, 15), (2, 5), (3, 25), (0, 3)]);
        let cycles = cycles_from_states(&states, 50);
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].s1_start, 140);
        assert_eq!(cycles[0].cycle_end, 140 + 1000);

        let trailing = seq(&[(0, 5), (1, 15), (2, 5), (3, 25), (0, 5), (1, 10)]);
        assert_eq!(cycles_from_states(&trailing, 50).len(), 1);
    }

    #[test]
    fn all_s1_gives_nothing() {
        assert!(cycles_from_states(&[0; 100], 50).is_empty());
        assert!(cycles_from_states(&[], 50).is_empty());
    }

    #[test]
    fn cycles_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = CardiacCycle {
            s1_start: 3,
            sys_start: 120,
            s2_start: 400,
            dia_start: 500,
            cycle_end: 900,
        };
        write_cycles_csv(&p, &[("a".into(), c)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("record_id,s1_start,sys_start,s2_start,dia_start,cycle_end\n"));
        assert_eq!(read_cycles_csv(&p).unwrap(), vec![("a".to_string(), c)]);
    }

    #[test]
    fn pretrained_segmenter_finds_cycles() {
        let seg = Segmenter::pretrained().unwrap();
        let spec = synthgen::SynthSpec {
            noise_sd: 0.03,
            seed: 3,
            ..Default::default()
        };
        let r = synthgen::generate_recording(&spec).unwrap();
        let out = seg.segment(&r.recording.samples).unwrap();
        assert!(respects_cyclic_order(&out.states, 4));
        assert!(!out.heart_rate.fallback);
        assert!((out.heart_rate.bpm() - 75.0).abs() < 3.0, "{:?}", out.heart_rate);
        assert!(out.cycles.len() >= 8, "{:?}", out.cycles);
    }
}
