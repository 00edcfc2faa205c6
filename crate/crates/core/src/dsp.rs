//! Small signal-processing kernels shared by the segmenter, feature extractor
//! and synthetic generator.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub fn fft(input: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = input.iter().map(|&v| Complex::new(v, 0.0)).collect();
    if buf.is_empty() {
        return buf;
    }
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Unnormalized inverse transform divided by the length.
pub fn ifft(spectrum: &[Complex<f64>]) -> Vec<Complex<f64>> {
    let mut buf = spectrum.to_vec();
    if buf.is_empty() {
        return buf;
    }
    let n = buf.len() as f64;
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    buf.iter_mut().for_each(|c| *c /= n);
    buf
}

/// Magnitude of the analytic signal.
pub fn hilbert_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut spec = fft(x);
    for (k, c) in spec.iter_mut().enumerate() {
        let gain = if k == 0 || (n.is_multiple_of(2) && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *c *= gain;
    }
    ifft(&spec).iter().map(|c| c.norm()).collect()
}

/// Second-order IIR section in direct form I.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Biquad {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    /// Butterworth low-pass (Q = 1/sqrt 2).
    pub fn lowpass(cutoff: f64, rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin * std::f64::consts::FRAC_1_SQRT_2;
        let b0 = (1.0 - cos) / 2.0;
        Self::from_raw([b0, 1.0 - cos, b0], 1.0 + alpha, -2.0 * cos, 1.0 - alpha)
    }

    /// Butterworth high-pass (Q = 1/sqrt 2).
    pub fn highpass(cutoff: f64, rate: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin * std::f64::consts::FRAC_1_SQRT_2;
        let b0 = (1.0 + cos) / 2.0;
        Self::from_raw([b0, -(1.0 + cos), b0], 1.0 + alpha, -2.0 * cos, 1.0 - alpha)
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Filters from rest.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, 0.0)
    }

    /// Filters with the state a constant input of `x[0]` would have reached.
    pub fn apply_steady(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, x.first().copied().unwrap_or(0.0))
    }

    fn run(&self, x: &[f64], initial: f64) -> Vec<f64> {
        let (mut x1, mut x2) = (initial, initial);
        let (mut y1, mut y2) = (initial * self.dc_gain(), initial * self.dc_gain());
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// Zero-phase forward-backward filtering through a cascade of sections,
/// with odd reflection at both ends and steady-state initial conditions to
/// suppress start-up transients.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (n - 1).min(150);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let mut y = ext;
    for s in sections {
        y = s.apply_steady(&y);
    }
    y.reverse();
    for s in sections {
        y = s.apply_steady(&y);
    }
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Block means over consecutive windows of `factor` samples; a trailing
/// partial block is dropped.
pub fn mean_decimate(x: &[f64], factor: usize) -> Vec<f64> {
    x.chunks_exact(factor)
        .map(|c| c.iter().sum::<f64>() / factor as f64)
        .collect()
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

/// Sample standard deviation (n - 1); zero for fewer than two values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_round_trip() {
        let x: Vec<f64> = (0..37).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let back: Vec<f64> = ifft(&fft(&x)).iter().map(|c| c.re).collect();
        for (a, b) in x.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hilbert_of_cosine_is_flat() {
        let x: Vec<f64> = (0..1000)
            .map(|i| (2.0 * std::f64::consts::PI * 50.0 * i as f64 / 1000.0).cos())
            .collect();
        for v in hilbert_envelope(&x) {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lowpass_passes_dc_and_kills_high_tone() {
        let dc = vec![2.0; 400];
        for v in filtfilt(&[Biquad::lowpass(8.0, 1000.0)], &dc) {
            assert!((v - 2.0).abs() < 1e-9);
        }
        let tone: Vec<f64> = (0..4000)
            .map(|i| (2.0 * std::f64::consts::PI * 200.0 * i as f64 / 1000.0).sin())
            .collect();
        let y = filtfilt(&[Biquad::lowpass(8.0, 1000.0)], &tone);
        let peak = y[500..3500].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-2);
        let z = filtfilt(&[Biquad::highpass(40.0, 1000.0)], &dc);
        assert!(z.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn decimation_and_stats() {
        assert_eq!(mean_decimate(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
        assert_eq!(sample_sd(&[1.0, 3.0]), std::f64::consts::SQRT_2);
        assert_eq!(sample_sd(&[4.0]), 0.0);
    }
}
