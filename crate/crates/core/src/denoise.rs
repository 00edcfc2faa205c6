//! Multi-level discrete wavelet transform, soft-threshold denoising and the
//! per-recording SNR feature.
//!
//! The transform uses periodic convolution on even-length inputs; an
//! odd-length level is first extended by mirroring its last sample, so every
//! level halves the coefficient count (rounding up) and the inverse is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reported when the residual power vanishes.
pub const SNR_SENTINEL_DB: f64 = 300.0;
const RESIDUAL_FLOOR: f64 = 1e-20;
/// MAD to standard deviation for Gaussian noise.
const MAD_SCALE: f64 = 0.6745;

pub const DENOISE_LEVELS: usize = 5;
pub const DENOISE_MIN_LEN: usize = 32;

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

// Daubechies, 4 vanishing moments (8 taps).
const DB4: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wavelet {
    Haar,
    Daubechies4,
}

impl Wavelet {
    pub fn lowpass(self) -> &'static [f64] {
        match self {
            Wavelet::Haar => &HAAR,
            Wavelet::Daubechies4 => &DB4,
        }
    }

    /// Quadrature mirror of the low-pass filter.
    pub fn highpass(self) -> Vec<f64> {
        let h = self.lowpass();
        let l = h.len();
        (0..l)
            .map(|j| if j % 2 == 0 { h[l - 1 - j] } else { -h[l - 1 - j] })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletCoefficients {
    pub wavelet: Wavelet,
    /// Detail coefficients, finest level first.
    pub details: Vec<Vec<f64>>,
    pub approximation: Vec<f64>,
    pub original_length: usize,
}

impl WaveletCoefficients {
    pub fn levels(&self) -> usize {
        self.details.len()
    }

    /// Input lengths of each level, starting with the original signal.
    fn level_lengths(&self) -> Vec<usize> {
        level_lengths(self.original_length, self.levels())
    }
}

fn level_lengths(original: usize, levels: usize) -> Vec<usize> {
    let mut lens = Vec::with_capacity(levels + 1);
    let mut n = original;
    lens.push(n);
    for _ in 0..levels {
        n = n.div_ceil(2);
        lens.push(n);
    }
    lens
}

fn analyze(x: &[f64], lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut ext = x.to_vec();
    if ext.len() % 2 == 1 {
        ext.push(*x.last().expect("non-empty level"));
    }
    let n = ext.len();
    let half = n / 2;
    let mut approx = vec![0.0; half];
    let mut detail = vec![0.0; half];
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            let v = ext[(2 * k + j) % n];
            a += l * v;
            d += h * v;
        }
        approx[k] = a;
        detail[k] = d;
    }
    (approx, detail)
}

fn synthesize(approx: &[f64], detail: &[f64], lo: &[f64], hi: &[f64], out_len: usize) -> Vec<f64> {
    let n = approx.len() * 2;
    let mut out = vec![0.0; n];
    for k in 0..approx.len() {
        for (j, (&l, &h)) in lo.iter().zip(hi).enumerate() {
            out[(2 * k + j) % n] += l * approx[k] + h * detail[k];
        }
    }
    out.truncate(out_len);
    out
}

pub fn max_levels(len: usize) -> usize {
    if len < 2 {
        0
    } else {
        len.ilog2() as usize
    }
}

pub fn dwt_forward(signal: &[f64], wavelet: Wavelet, levels: usize) -> Result<WaveletCoefficients> {
    if signal.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: signal.len(),
        });
    }
    if levels == 0 || levels > max_levels(signal.len()) {
        return Err(Error::TooManyLevels {
            levels,
            len: signal.len(),
        });
    }
    let lo = wavelet.lowpass();
    let hi = wavelet.highpass();
    let mut details = Vec::with_capacity(levels);
    let mut current = signal.to_vec();
    for _ in 0..levels {
        let (a, d) = analyze(&current, lo, &hi);
        details.push(d);
        current = a;
    }
    Ok(WaveletCoefficients {
        wavelet,
        details,
        approximation: current,
        original_length: signal.len(),
    })
}

pub fn dwt_inverse(coeffs: &WaveletCoefficients) -> Result<Vec<f64>> {
    if coeffs.levels() == 0 {
        return Err(Error::InconsistentCoefficients("no decomposition levels".into()));
    }
    let lens = coeffs.level_lengths();
    for (level, d) in coeffs.details.iter().enumerate() {
        if d.len() != lens[level + 1] {
            return Err(Error::InconsistentCoefficients(format!(
                "level {} has {} detail coefficients, expected {}",
                level + 1,
                d.len(),
                lens[level + 1]
            )));
        }
    }
    if coeffs.approximation.len() != lens[coeffs.levels()] {
        return Err(Error::InconsistentCoefficients(format!(
            "approximation has {} coefficients, expected {}",
            coeffs.approximation.len(),
            lens[coeffs.levels()]
        )));
    }
    let lo = coeffs.wavelet.lowpass();
    let hi = coeffs.wavelet.highpass();
    let mut current = coeffs.approximation.clone();
    for level in (0..coeffs.levels()).rev() {
        current = synthesize(&current, &coeffs.details[level], lo, &hi, lens[level]);
    }
    Ok(current)
}

pub fn soft_threshold(v: f64, threshold: f64) -> f64 {
    let mag = v.abs() - threshold;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

pub(crate) fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Universal threshold `sigma * sqrt(2 ln n)` with sigma from the median
/// absolute finest-level detail.
pub fn universal_threshold(coeffs: &WaveletCoefficients) -> f64 {
    let mut finest: Vec<f64> = coeffs.details[0].iter().map(|v| v.abs()).collect();
    let sigma = median(&mut finest) / MAD_SCALE;
    sigma * (2.0 * (coeffs.original_length as f64).ln()).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub signal: Vec<f64>,
    pub snr_db: f64,
}

/// Daubechies-4, five levels, soft universal threshold on every detail
/// level, averaged over all circular shifts of the input (cycle spinning).
/// The threshold comes from the unshifted transform.
pub fn denoise(signal: &[f64]) -> Result<Denoised> {
    check_denoise_len(signal)?;
    let coeffs = dwt_forward(signal, Wavelet::Daubechies4, DENOISE_LEVELS)?;
    denoise_with_threshold(signal, universal_threshold(&coeffs))
}

/// Same pipeline as [`denoise`] with an explicit threshold.
pub fn denoise_with_threshold(signal: &[f64], threshold: f64) -> Result<Denoised> {
    check_denoise_len(signal)?;
    let n = signal.len();
    let shifts = (1usize << DENOISE_LEVELS).min(n);
    let mut acc = vec![0.0; n];
    let mut rolled = vec![0.0; n];
    for shift in 0..shifts {
        for (i, v) in rolled.iter_mut().enumerate() {
            *v = signal[(i + shift) % n];
        }
        let mut coeffs = dwt_forward(&rolled, Wavelet::Daubechies4, DENOISE_LEVELS)?;
        for level in &mut coeffs.details {
            for c in level.iter_mut() {
                *c = soft_threshold(*c, threshold);
            }
        }
        let clean = dwt_inverse(&coeffs)?;
        for (i, v) in clean.iter().enumerate() {
            acc[(i + shift) % n] += v;
        }
    }
    let clean: Vec<f64> = acc.iter().map(|v| v / shifts as f64).collect();
    let snr_db = snr_db(signal, &clean);
    Ok(Denoised {
        signal: clean,
        snr_db,
    })
}

fn check_denoise_len(signal: &[f64]) -> Result<()> {
    if signal.len() < DENOISE_MIN_LEN {
        return Err(Error::TooShort {
            needed: DENOISE_MIN_LEN,
            got: signal.len(),
        });
    }
    Ok(())
}

/// `10 log10(P(clean) / P(signal - clean))`, with [`SNR_SENTINEL_DB`] when
/// the residual power is negligible.
pub fn snr_db(signal: &[f64], clean: &[f64]) -> f64 {
    let n = signal.len().max(1) as f64;
    let p_clean = clean.iter().map(|v| v * v).sum::<f64>() / n;
    let p_res = signal
        .iter()
        .zip(clean)
        .map(|(s, c)| (s - c) * (s - c))
        .sum::<f64>()
        / n;
    if p_res < RESIDUAL_FLOOR {
        return SNR_SENTINEL_DB;
    }
    if p_clean == 0.0 {
        return -SNR_SENTINEL_DB;
    }
    (10.0 * (p_clean / p_res).log10()).clamp(-SNR_SENTINEL_DB, SNR_SENTINEL_DB)
}

/// Reconstruction from a single detail level (all other coefficients zeroed).
pub fn detail_band(signal: &[f64], wavelet: Wavelet, level: usize) -> Result<Vec<f64>> {
    let mut coeffs = dwt_forward(signal, wavelet, level)?;
    coeffs.approximation.iter_mut().for_each(|c| *c = 0.0);
    for d in coeffs.details.iter_mut().take(level - 1) {
        d.iter_mut().for_each(|c| *c = 0.0);
    }
    dwt_inverse(&coeffs)
}
