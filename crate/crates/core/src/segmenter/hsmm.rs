//! Duration-explicit hidden semi-Markov model with a fixed cyclic state order.
//!
//! Scoring: the sum over segments of a Gaussian log duration density plus
//! diagonal-Gaussian log emissions. Interior segments must fall inside the
//! truncated support `[mean - 3 sd, mean + 3 sd]`. The first and last
//! segments are censored by the recording edges, so they may be shorter than
//! the support minimum and carry no duration term.

use serde::{Deserialize, Serialize};

use super::envelope::{EnvelopeFeatures, FEATURE_RATE, HOMOMORPHIC};
use crate::error::{Error, Result};

pub const EMISSION_SD_FLOOR: f64 = 0.05;
/// Nominal S1 (120 ms) and S2 (100 ms) durations in frames.
const S1_FRAMES: f64 = 120.0 * FEATURE_RATE as f64 / 1000.0;
const S2_FRAMES: f64 = 100.0 * FEATURE_RATE as f64 / 1000.0;
pub const MIN_STATE_FRAMES: usize = 10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Canonical heart-cycle states in cyclic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeartState {
    S1 = 0,
    Systole = 1,
    S2 = 2,
    Diastole = 3,
}

impl HeartState {
    pub const ALL: [HeartState; 4] = [
        HeartState::S1,
        HeartState::Systole,
        HeartState::S2,
        HeartState::Diastole,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationModel {
    pub mean: f64,
    pub sd: f64,
}

impl DurationModel {
    /// Truncated support in frames, at least one frame wide.
    pub fn support(&self) -> (usize, usize) {
        let lo = (self.mean - 3.0 * self.sd).ceil().max(1.0) as usize;
        let hi = ((self.mean + 3.0 * self.sd).floor() as usize).max(lo);
        (lo, hi)
    }

    pub fn log_density(&self, d: usize) -> f64 {
        let z = (d as f64 - self.mean) / self.sd;
        -0.5 * (LN_2PI + z * z) - self.sd.ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Emission {
    pub fn log_density(&self, frame: impl Iterator<Item = f64>) -> f64 {
        self.mean
            .iter()
            .zip(&self.sd)
            .zip(frame)
            .map(|((m, s), x)| {
                let z = (x - m) / s;
                -0.5 * (LN_2PI + z * z) - s.ln()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsmmParams {
    pub durations: Vec<DurationModel>,
    pub emissions: Vec<Emission>,
}

impl HsmmParams {
    pub fn n_states(&self) -> usize {
        self.durations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.durations.is_empty() || self.durations.len() != self.emissions.len() {
            return Err(Error::InvalidArgument(
                "need one duration model and one emission per state".into(),
            ));
        }
        if self.durations.iter().any(|d| !(d.sd > 0.0) || !d.mean.is_finite()) {
            return Err(Error::InvalidArgument("duration sd must be positive".into()));
        }
        let dims = self.emissions[0].mean.len();
        for e in &self.emissions {
            if e.mean.len() != dims || e.sd.len() != dims {
                return Err(Error::Shape("emission dimensions disagree".into()));
            }
            if e.sd.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::InvalidArgument("emission sd must be positive".into()));
            }
        }
        Ok(())
    }

    /// Heart-cycle durations seeded from a heart-rate estimate: S1 120 ms,
    /// S2 100 ms, systole and diastole filling the rest, SD 25% of each mean.
    pub fn for_heart_rate(hr: &HeartRate, emissions: Vec<Emission>) -> Self {
        let (s1, s2) = (S1_FRAMES, S2_FRAMES);
        let s1_to_s2 = hr.systole_fraction * hr.cycle_frames;
        let systole = (s1_to_s2 - s1).max(1.0);
        let diastole = (hr.cycle_frames - s1_to_s2 - s2).max(1.0);
        let durations = [s1, systole, s2, diastole]
            .into_iter()
            .map(|mean| DurationModel {
                mean,
                sd: 0.25 * mean,
            })
            .collect();
        HsmmParams {
            durations,
            emissions,
        }
    }
}

/// Sample mean and SD (n - 1) with the SD floored.
pub fn fit_gaussian(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, sd.max(EMISSION_SD_FLOOR))
}

/// Per-state, per-feature Gaussian emissions from frames with known states.
pub fn fit_emissions(
    labeled: &[(EnvelopeFeatures, Vec<usize>)],
    n_states: usize,
) -> Result<Vec<Emission>> {
    let dims = labeled.first().map_or(0, |(e, _)| e.dims());
    let mut per_state: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); dims]; n_states];
    for (env, states) in labeled {
        if env.frames() != states.len() || env.dims() != dims {
            return Err(Error::Shape("labels do not match feature frames".into()));
        }
        for (t, &s) in states.iter().enumerate() {
            if s >= n_states {
                return Err(Error::InvalidArgument(format!("state {s} out of range")));
            }
            for (d, col) in env.columns.iter().enumerate() {
                per_state[s][d].push(col[t]);
            }
        }
    }
    per_state
        .iter()
        .enumerate()
        .map(|(s, cols)| {
            if cols.first().map_or(0, Vec::len) < MIN_STATE_FRAMES {
                return Err(Error::MissingStateCoverage(s));
            }
            let (mean, sd) = cols.iter().map(|c| fit_gaussian(c)).unzip();
            Ok(Emission { mean, sd })
        })
        .collect()
}

/// Extended Viterbi over segmentations respecting the cyclic order.
/// Ties prefer the shorter duration, then the lower final state index.
pub fn hsmm_decode(observations: &EnvelopeFeatures, params: &HsmmParams) -> Result<Vec<usize>> {
    hsmm_decode_scored(observations, params).map(|(states, _)| states)
}

/// [`hsmm_decode`] together with the log score of the decoded sequence.
pub fn hsmm_decode_scored(
    observations: &EnvelopeFeatures,
    params: &HsmmParams,
) -> Result<(Vec<usize>, f64)> {
    params.validate()?;
    let t_len = observations.frames();
    let k = params.n_states();
    if t_len == 0 {
        return Err(Error::InvalidArgument("no frames to decode".into()));
    }
    if observations.dims() != params.emissions[0].mean.len() {
        return Err(Error::Shape(format!(
            "observations have {} features, emissions expect {}",
            observations.dims(),
            params.emissions[0].mean.len()
        )));
    }

    // cum[j][t] = sum of log emissions of state j over frames 0..t.
    let cum: Vec<Vec<f64>> = params
        .emissions
        .iter()
        .map(|e| {
            let mut acc = Vec::with_capacity(t_len + 1);
            acc.push(0.0);
            let mut total = 0.0;
            for t in 0..t_len {
                total += e.log_density(observations.columns.iter().map(|c| c[t]));
                acc.push(total);
            }
            acc
        })
        .collect();
    let emit = |j: usize, start: usize, end: usize| cum[j][end] - cum[j][start];

    let supports: Vec<(usize, usize)> = params.durations.iter().map(DurationModel::support).collect();
    let log_dur: Vec<Vec<f64>> = params
        .durations
        .iter()
        .zip(&supports)
        .map(|(d, &(_, hi))| (0..=hi).map(|n| d.log_density(n)).collect())
        .collect();
    let prev = |j: usize| (j + k - 1) % k;

    // best[t][j]: best score with an interior (or first) segment of state j
    // ending at frame t; dur[t][j] its duration.
    let mut best = vec![vec![f64::NEG_INFINITY; k]; t_len];
    let mut dur = vec![vec![0usize; k]; t_len];
    for t in 0..t_len.saturating_sub(1) {
        for j in 0..k {
            let (lo, hi) = supports[j];
            for d in 1..=hi.min(t + 1) {
                let start = t + 1 - d;
                let score = if start == 0 {
                    emit(j, 0, t + 1)
                } else {
                    if d < lo {
                        continue;
                    }
                    best[start - 1][prev(j)] + log_dur[j][d] + emit(j, start, t + 1)
                };
                if score > best[t][j] {
                    best[t][j] = score;
                    dur[t][j] = d;
                }
            }
        }
    }

    // Final (right-censored) segment.
    let mut final_score = f64::NEG_INFINITY;
    let mut final_state = 0;
    let mut final_dur = 0;
    for j in 0..k {
        let (_, hi) = supports[j];
        for d in 1..=hi.min(t_len) {
            let start = t_len - d;
            let score = if start == 0 {
                emit(j, 0, t_len)
            } else {
                best[start - 1][prev(j)] + emit(j, start, t_len)
            };
            if score > final_score {
                final_score = score;
                final_state = j;
                final_dur = d;
            }
        }
    }
    if final_dur == 0 {
        return Err(Error::InvalidArgument(
            "no segmentation satisfies the duration supports".into(),
        ));
    }

    let mut states = vec![0usize; t_len];
    let mut end = t_len;
    let mut j = final_state;
    let mut d = final_dur;
    loop {
        let start = end - d;
        states[start..end].iter_mut().for_each(|s| *s = j);
        if start == 0 {
            break;
        }
        end = start;
        j = prev(j);
        d = dur[end - 1][j];
        debug_assert!(d > 0, "broken back-pointer");
    }
    debug_assert!(respects_cyclic_order(&states, k));
    Ok((states, final_score))
}

/// True when every state change advances by exactly one step in the cycle.
pub fn respects_cyclic_order(states: &[usize], n_states: usize) -> bool {
    states
        .windows(2)
        .all(|w| w[0] == w[1] || w[1] == (w[0] + 1) % n_states)
}

/// Heart-rate estimate in observation frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartRate {
    pub cycle_frames: f64,
    /// S1 onset to S2 onset as a fraction of the cycle.
    pub systole_fraction: f64,
    /// Set when no autocorrelation peak was found and defaults were used.
    pub fallback: bool,
}

impl HeartRate {
    pub const FALLBACK: HeartRate = HeartRate {
        cycle_frames: 0.8 * FEATURE_RATE as f64,
        systole_fraction: 0.3,
        fallback: true,
    };

    pub fn bpm(&self) -> f64 {
        60.0 * f64::from(FEATURE_RATE) / self.cycle_frames
    }
}

pub const MIN_HR_FRAMES: usize = 100;
const MIN_CYCLE_S: f64 = 0.33;
const MAX_CYCLE_S: f64 = 2.0;
/// Normalized autocorrelation a cycle peak must exceed.
const MIN_PEAK_CORRELATION: f64 = 0.25;

fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let energy: f64 = c.iter().map(|v| v * v).sum();
    (0..=max_lag)
        .map(|lag| {
            if energy == 0.0 || lag >= c.len() {
                return 0.0;
            }
            c.iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / energy
        })
        .collect()
}

fn argmax_in(r: &[f64], lo: usize, hi: usize) -> usize {
    let mut best = lo;
    for i in lo..=hi {
        if r[i] > r[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest strict local maximum strictly inside `lo..=hi`.
fn highest_local_max(r: &[f64], lo: usize, hi: usize) -> Option<usize> {
    let hi = hi.min(r.len().saturating_sub(2));
    (lo.max(1)..=hi)
        .filter(|&i| r[i] > r[i - 1] && r[i] >= r[i + 1])
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if r[b] >= r[i] => Some(b),
            _ => Some(i),
        })
}

/// Parabolic refinement of a discrete peak.
fn refine_peak(r: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= r.len() {
        return i as f64;
    }
    let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
    let denom = a - 2.0 * b + c;
    if denom.abs() < 1e-15 {
        return i as f64;
    }
    i as f64 + (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
}

/// Cycle length from the homomorphic-envelope autocorrelation peak within
/// 0.33–2 s; systole from the peak within 0.2–0.5 of the cycle.
pub fn estimate_heart_rate(env: &EnvelopeFeatures) -> Result<HeartRate> {
    let frames = env.frames();
    if frames < MIN_HR_FRAMES {
        return Err(Error::TooShort {
            needed: MIN_HR_FRAMES,
            got: frames,
        });
    }
    let rate = f64::from(env.feature_rate);
    let lo = (MIN_CYCLE_S * rate).round() as usize;
    let hi = ((MAX_CYCLE_S * rate).round() as usize).min(frames - 2);
    let r = autocorrelation(&env.columns[HOMOMORPHIC], hi + 1);
    let peak = argmax_in(&r, lo, hi);
    let is_local_max = peak > lo && r[peak - 1] < r[peak] && r[peak] >= r[peak + 1];
    if !is_local_max || r[peak] < MIN_PEAK_CORRELATION {
        return Ok(HeartRate::FALLBACK);
    }
    let cycle = refine_peak(&r, peak);
    let sys_lo = ((0.2 * cycle).round() as usize).max(1);
    let sys_hi = ((0.5 * cycle).round() as usize).max(sys_lo + 1);
    let fraction = match highest_local_max(&r, sys_lo, sys_hi) {
        // The peak lag joins the S1 and S2 centers; shift it to onsets.
        Some(p) => ((refine_peak(&r, p) + 0.5 * (S1_FRAMES - S2_FRAMES)) / cycle).clamp(0.25, 0.45),
        None => HeartRate::FALLBACK.systole_fraction,
    };
    Ok(HeartRate {
        cycle_frames: cycle,
        systole_fraction: fraction,
        fallback: false,
    })
}
