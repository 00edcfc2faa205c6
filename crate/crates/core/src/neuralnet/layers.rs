//! Forward and backward kernels for the individual layer types.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::Label;

pub const ADAGRAD_EPS: f64 = 1e-8;

/// A bank of 1-D filters over a multi-channel input. Filter `k` spans all
/// input channels with window `windows[k]`; its weights are stored
/// channel-major at `weights[offsets[k]..]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub in_channels: usize,
    pub windows: Vec<usize>,
    pub offsets: Vec<usize>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Conv {
    pub fn zeros(in_channels: usize, windows: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(windows.len());
        let mut total = 0;
        for &w in &windows {
            offsets.push(total);
            total += in_channels * w;
        }
        Conv {
            in_channels,
            biases: vec![0.0; windows.len()],
            weights: vec![0.0; total],
            offsets,
            windows,
        }
    }

    pub fn n_filters(&self) -> usize {
        self.windows.len()
    }

    pub fn filter(&self, k: usize) -> &[f64] {
        &self.weights[self.offsets[k]..self.offsets[k] + self.in_channels * self.windows[k]]
    }

    /// Valid convolution without nonlinearity; one output channel per
    /// filter of length `n - w + 1`.
    pub fn forward(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let n = x[0].len();
        Ok((0..self.n_filters())
            .map(|k| {
                let w = self.windows[k];
                let len = n - w + 1;
                let f = self.filter(k);
                let mut out = vec![self.biases[k]; len];
                for (c, xc) in x.iter().enumerate() {
                    for (j, &fj) in f[c * w..(c + 1) * w].iter().enumerate() {
                        for (o, &v) in out.iter_mut().zip(&xc[j..j + len]) {
                            *o += fj * v;
                        }
                    }
                }
                out
            })
            .collect())
    }

    fn check_input(&self, x: &[Vec<f64>]) -> Result<()> {
        if x.len() != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} channels, got {}",
                self.in_channels,
                x.len()
            )));
        }
        let n = x[0].len();
        if x.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("ragged convolution input".into()));
        }
        let longest = self.windows.iter().copied().max().unwrap_or(0);
        if longest > n {
            return Err(Error::Shape(format!(
                "filter window {longest} exceeds input length {n}"
            )));
        }
        Ok(())
    }

    /// Accumulates parameter gradients into `(dw, db)` and returns the
    /// input gradient when `need_input` is set. Zero output gradients are
    /// skipped, which makes max-over-time backward cheap.
    pub fn backward(
        &self,
        x: &[Vec<f64>],
        dout: &[Vec<f64>],
        dw: &mut [f64],
        db: &mut [f64],
        need_input: bool,
    ) -> Option<Vec<Vec<f64>>> {
        let n = x[0].len();
        let mut dx = need_input.then(|| vec![vec![0.0; n]; self.in_channels]);
        for (k, dk) in dout.iter().enumerate() {
            let w = self.windows[k];
            let f = self.filter(k);
            let off = self.offsets[k];
            for (i, &d) in dk.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                db[k] += d;
                for (c, xc) in x.iter().enumerate() {
                    let span = c * w..(c + 1) * w;
                    for (g, &v) in dw[off + span.start..off + span.end].iter_mut().zip(&xc[i..i + w]) {
                        *g += d * v;
                    }
                    if let Some(dx) = dx.as_mut() {
                        for (g, &fj) in dx[c][i..i + w].iter_mut().zip(&f[span]) {
                            *g += d * fj;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer, `out = W x + b` with `W` row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            )));
        }
        Ok(self
            .weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    pub fn backward(&self, x: &[f64], dout: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dout.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            db[o] += d;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for ((g, gx), (&w, &v)) in dw[o * self.inputs..(o + 1) * self.inputs]
                .iter_mut()
                .zip(dx.iter_mut())
                .zip(row.iter().zip(x))
            {
                *g += d * v;
                *gx += d * w;
            }
        }
        dx
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Index of the maximum, earliest on ties.
pub fn argmax(m: &[f64]) -> Result<usize> {
    if m.is_empty() {
        return Err(Error::Shape("max-over-time of an empty feature map".into()));
    }
    let mut best = 0;
    for (i, &v) in m.iter().enumerate().skip(1) {
        if v > m[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn max_over_time(m: &[f64]) -> Result<f64> {
    argmax(m).map(|i| m[i])
}

/// Window-2 max pooling of one channel; an odd trailing element is dropped.
/// Returns pooled values and the source index of each.
pub fn local_max_pool(m: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if m.len() < 2 {
        return Err(Error::Shape(format!("cannot pool a length-{} channel", m.len())));
    }
    Ok(m.chunks_exact(2)
        .enumerate()
        .map(|(i, p)| if p[1] > p[0] { (p[1], 2 * i + 1) } else { (p[0], 2 * i) })
        .unzip())
}

/// Cross-entropy of softmax(logits) against `label`, scaled by `weight`.
/// Returns the loss and its gradient on the logits.
pub fn softmax_xent(logits: [f64; 2], label: Label, weight: f64) -> (f64, [f64; 2]) {
    let p = softmax(logits);
    let k = label.index();
    let m = logits[0].max(logits[1]);
    let log_sum = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let loss = weight * (log_sum - logits[k]);
    let mut grad = [weight * p[0], weight * p[1]];
    grad[k] -= weight;
    (loss, grad)
}

pub fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-unit scale applied
/// (0 for dropped units), which is also the backward multiplier.
pub fn dropout(h: &[f64], rate: f64, mode: Mode, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((h.to_vec(), vec![1.0; h.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = h.iter().map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    Ok((h.iter().zip(&mask).map(|(v, m)| v * m).collect(), mask))
}

/// One AdaGrad update. `l2` is added to the gradient unless `is_bias`.
pub fn adagrad_step(
    params: &mut [f64],
    grads: &[f64],
    accumulators: &mut [f64],
    lr: f64,
    l2: f64,
    is_bias: bool,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != accumulators.len() {
        return Err(Error::Shape("parameter, gradient and accumulator lengths differ".into()));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    let decay = if is_bias { 0.0 } else { l2 };
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(accumulators.iter_mut()) {
        let g = g + decay * *p;
        *a += g * g;
        *p -= lr * g / (a.sqrt() + ADAGRAD_EPS);
    }
    Ok(())
}
