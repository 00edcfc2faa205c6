use crate::denoise::{detail_band, Wavelet};
use crate::dsp::{self, Biquad};
use crate::error::{Error, Result};
use crate::signal_io::PROCESSING_RATE;

/// Observation frame rate of the segmenter (Hz).
pub const FEATURE_RATE: u32 = 50;
/// Samples per observation frame at the processing rate.
pub const DECIMATION: usize = (PROCESSING_RATE / FEATURE_RATE) as usize;
pub const N_ENVELOPES: usize = 4;
pub const MIN_SIGNAL_LEN: usize = PROCESSING_RATE as usize;

const HOMOMORPHIC_CUTOFF_HZ: f64 = 8.0;
const LOG_FLOOR: f64 = 1e-8;
const BAND_LOW_HZ: f64 = 40.0;
const BAND_HIGH_HZ: f64 = 60.0;
const DWT_ENVELOPE_LEVEL: usize = 3;
const SD_GUARD: f64 = 1e-12;

pub const HOMOMORPHIC: usize = 0;
pub const HILBERT: usize = 1;
pub const BAND_POWER: usize = 2;
pub const DWT_DETAIL: usize = 3;

/// Per-frame observation features, one column per envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeFeatures {
    pub feature_rate: u32,
    pub columns: Vec<Vec<f64>>,
}

impl EnvelopeFeatures {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let len = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("envelope columns differ in length".into()));
        }
        Ok(EnvelopeFeatures {
            feature_rate: FEATURE_RATE,
            columns,
        })
    }

    pub fn frames(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn dims(&self) -> usize {
        self.columns.len()
    }
}

/// The four envelopes at [`FEATURE_RATE`], before standardization.
pub fn raw_envelopes(signal: &[f64]) -> Result<Vec<Vec<f64>>> {
    if signal.len() < MIN_SIGNAL_LEN {
        return Err(Error::TooShort {
            needed: MIN_SIGNAL_LEN,
            got: signal.len(),
        });
    }
    let rate = f64::from(PROCESSING_RATE);

    let log_mag: Vec<f64> = signal.iter().map(|v| (v.abs() + LOG_FLOOR).ln()).collect();
    let homomorphic: Vec<f64> = dsp::filtfilt(&[Biquad::lowpass(HOMOMORPHIC_CUTOFF_HZ, rate)], &log_mag)
        .into_iter()
        .map(f64::exp)
        .collect();

    let hilbert = dsp::hilbert_envelope(signal);

    let band: Vec<f64> = dsp::filtfilt(
        &[Biquad::highpass(BAND_LOW_HZ, rate), Biquad::lowpass(BAND_HIGH_HZ, rate)],
        signal,
    )
    .into_iter()
    .map(|v| v * v)
    .collect();

    let detail: Vec<f64> = detail_band(signal, Wavelet::Daubechies4, DWT_ENVELOPE_LEVEL)?
        .into_iter()
        .map(f64::abs)
        .collect();

    Ok([homomorphic, hilbert, band, detail]
        .iter()
        .map(|c| dsp::mean_decimate(c, DECIMATION))
        .collect())
}

/// Zero mean, unit SD; a column with no spread becomes all zeros.
pub fn standardize(column: &[f64]) -> Vec<f64> {
    let m = dsp::mean(column);
    let n = column.len().max(1) as f64;
    let sd = (column.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
    if !sd.is_finite() || sd < SD_GUARD {
        return vec![0.0; column.len()];
    }
    column
        .iter()
        .map(|v| {
            let z = (v - m) / sd;
            if z.is_finite() {
                z
            } else {
                0.0
            }
        })
        .collect()
}

pub fn extract_envelopes(signal: &[f64]) -> Result<EnvelopeFeatures> {
    let columns = raw_envelopes(signal)?.iter().map(|c| standardize(c)).collect();
    EnvelopeFeatures::from_columns(columns)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_gives_zero_columns() {
        let env = extract_envelopes(&vec![0.0; 3000]).unwrap();
        assert_eq!(env.dims(), 4);
        for c in &env.columns {
            assert!(c.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frame_count() {
        let x: Vec<f64> = (0..5000).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(extract_envelopes(&x).unwrap().frames(), 250);
        let x: Vec<f64> = (0..5019).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(extract_envelopes(&x).unwrap().frames(), 250);
        assert!(extract_envelopes(&[0.0; 999]).is_err());
    }

    #[test]
    fn hilbert_envelope_tracks_burst() {
        // 50 Hz unit sine between 1.0 s and 2.0 s of a 3 s record.
        let x: Vec<f64> = (0..3000)
            .map(|i| {
                if (1000..2000).contains(&i) {
                    (2.0 * std::f64::consts::PI * 50.0 * i as f64 / 1000.0).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let raw = raw_envelopes(&x).unwrap();
        let hil = &raw[HILBERT];
        // Frames fully inside/outside the burst, away from the edges.
        for f in 55..95 {
            assert!((hil[f] - 1.0).abs() < 0.05, "frame {f}: {}", hil[f]);
        }
        for f in (0..45).chain(105..150) {
            assert!(hil[f] < 0.05, "frame {f}: {}", hil[f]);
        }
    }

    #[test]
    fn standardized_columns_are_finite() {
        let x: Vec<f64> = (0..2000).map(|i| if i % 97 == 0 { 1.0 } else { 0.0 }).collect();
        let env = extract_envelopes(&x).unwrap();
        for c in &env.columns {
            assert!(c.iter().all(|v| v.is_finite()));
            assert!(dsp::mean(c).abs() < 1e-9);
        }
    }
}
