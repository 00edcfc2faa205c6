//! A small 1-D CNN engine: layers with hand-written backward passes,
//! softmax cross-entropy, inverted dropout, AdaGrad, a configuration grammar
//! and finite-difference gradient checking.

pub mod config;
pub mod layers;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::Label;
pub use config::{resolve, LayerSpec, Pool, PRESETS};
pub use layers::{
    adagrad_step, argmax, dropout, local_max_pool, max_over_time, relu, softmax, softmax_xent, Conv, Dense, Mode,
};

pub const SEGMENT_LEN: usize = 1200;
pub const MIN_SEGMENT_LEN: usize = 400;
/// Examples per sequentially reduced gradient chunk; fixed so results do
/// not depend on the thread count.
const GRADIENT_CHUNK: usize = 4;

/// A cardiac-cycle segment zero-padded at the end to `SEGMENT_LEN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentVector {
    values: Vec<f64>,
    true_length: usize,
}

impl SegmentVector {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if !(MIN_SEGMENT_LEN..=SEGMENT_LEN).contains(&samples.len()) {
            return Err(Error::InvalidArgument(format!(
                "segment of {} samples outside [{MIN_SEGMENT_LEN}, {SEGMENT_LEN}]",
                samples.len()
            )));
        }
        let mut values = samples.to_vec();
        values.resize(SEGMENT_LEN, 0.0);
        Ok(SegmentVector {
            values,
            true_length: samples.len(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    pub normal: f64,
    pub abnormal: f64,
}

impl ClassProbabilities {
    pub fn label(&self) -> Label {
        if self.abnormal > self.normal {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    /// Channels of samples; channel lengths may differ after a multi-window
    /// convolution bank.
    Seq(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl Tensor {
    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Tensor::Seq(c) => c.concat(),
            Tensor::Flat(v) => v.clone(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        match self {
            Tensor::Seq(c) => Tensor::Seq(c.iter().map(|ch| ch.iter().map(|&v| f(v)).collect()).collect()),
            Tensor::Flat(v) => Tensor::Flat(v.iter().map(|&x| f(x)).collect()),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let zip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
        match (self, other) {
            (Tensor::Seq(a), Tensor::Seq(b)) => Tensor::Seq(a.iter().zip(b).map(|(x, y)| zip(x, y)).collect()),
            _ => Tensor::Flat(zip(&self.flatten(), &other.flatten())),
        }
    }

    /// Gives `flat` the layout of `like`.
    fn reshape_like(flat: Vec<f64>, like: &Tensor) -> Tensor {
        match like {
            Tensor::Flat(_) => Tensor::Flat(flat),
            Tensor::Seq(c) => {
                let mut rest = flat.as_slice();
                Tensor::Seq(
                    c.iter()
                        .map(|ch| {
                            let (head, tail) = rest.split_at(ch.len());
                            rest = tail;
                            head.to_vec()
                        })
                        .collect(),
                )
            }
        }
    }

    fn seq(&self) -> Result<&[Vec<f64>]> {
        match self {
            Tensor::Seq(c) => Ok(c),
            Tensor::Flat(_) => Err(Error::Shape("layer needs a channel sequence, got a flat vector".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv(Conv),
    Relu,
    LocalMaxPool,
    MaxOverTime,
    Dense(Dense),
    Dropout { rate: f64 },
}

impl Layer {
    /// Weights and biases of a parameterized layer.
    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Conv(c) => Some((&c.weights, &c.biases)),
            Layer::Dense(d) => Some((&d.weights, &d.biases)),
            _ => None,
        }
    }

    fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Conv(c) => Some((&mut c.weights, &mut c.biases)),
            Layer::Dense(d) => Some((&mut d.weights, &mut d.biases)),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::LocalMaxPool => "local_max_pool",
            Layer::MaxOverTime => "max_over_time",
            Layer::Dense(_) => "dense",
            Layer::Dropout { .. } => "dropout",
        }
    }
}

/// Per-layer parameter gradients (empty for parameter-free layers); also
/// the shape of the AdaGrad accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients(pub Vec<ParamGrad>);

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients(
            net.layers
                .iter()
                .map(|l| {
                    let (w, b) = l.params().map_or((0, 0), |(w, b)| (w.len(), b.len()));
                    ParamGrad {
                        weights: vec![0.0; w],
                        biases: vec![0.0; b],
                    }
                })
                .collect(),
        )
    }

    fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for g in &mut self.0 {
            g.weights.iter_mut().chain(g.biases.iter_mut()).for_each(|x| *x *= s);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Pooled(Vec<Vec<usize>>),
    Mask(Vec<f64>),
}

/// Everything the backward pass needs: each layer's input and routing.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    aux: Vec<Aux>,
    pub logits: [f64; 2],
}

impl Trace {
    /// Rectifier signs and pooling choices; finite differences are only
    /// meaningful while this stays fixed.
    fn pattern(&self, net: &Network) -> (Vec<bool>, Vec<usize>) {
        let mut signs = Vec::new();
        let mut routes = Vec::new();
        for ((layer, input), aux) in net.layers.iter().zip(&self.inputs).zip(&self.aux) {
            if matches!(layer, Layer::Relu) {
                signs.extend(input.flatten().iter().map(|&v| v > 0.0));
            }
            match aux {
                Aux::Argmax(i) => routes.extend(i),
                Aux::Pooled(i) => routes.extend(i.iter().flatten()),
                _ => {}
            }
        }
        (signs, routes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    /// Architecture text as given (preset name or grammar).
    pub config: String,
    pub input_len: usize,
    pub layers: Vec<Layer>,
}

/// Builds a network for `input_len`-sample inputs with fan-balanced
/// uniform initialization and zero biases.
pub fn build_network(config: &str, input_len: usize, dropout_rate: f64, seed: u64) -> Result<Network> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::Config(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    let specs = config::parse(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lens = vec![input_len];
    let mut flat: Option<usize> = None;
    let mut layers = Vec::new();
    for spec in &specs {
        match spec {
            LayerSpec::Conv(windows) => {
                if flat.is_some() {
                    return Err(Error::Config("convolution after a flat layer".into()));
                }
                if lens.iter().any(|&l| l != lens[0]) {
                    return Err(Error::Config("convolution over channels of unequal length".into()));
                }
                let n = lens[0];
                if let Some(&w) = windows.iter().find(|&&w| w > n) {
                    return Err(Error::Config(format!("window {w} exceeds input length {n}")));
                }
                let mut conv = Conv::zeros(lens.len(), windows.clone());
                for k in 0..windows.len() {
                    let w = windows[k];
                    let group = windows.iter().filter(|&&v| v == w).count();
                    let r = (6.0 / ((lens.len() * w + group * w) as f64)).sqrt();
                    let range = conv.offsets[k]..conv.offsets[k] + lens.len() * w;
                    conv.weights[range].iter_mut().for_each(|v| *v = rng.gen_range(-r..=r));
                }
                lens = windows.iter().map(|w| n - w + 1).collect();
                layers.push(Layer::Conv(conv));
                layers.push(Layer::Relu);
            }
            LayerSpec::Pool(Pool::Local) => {
                if flat.is_some() || lens.iter().any(|&l| l < 2) {
                    return Err(Error::Config("local pooling needs channels of length >= 2".into()));
                }
                lens.iter_mut().for_each(|l| *l /= 2);
                layers.push(Layer::LocalMaxPool);
            }
            LayerSpec::Pool(Pool::OverTime) => {
                if flat.is_some() {
                    return Err(Error::Config("max-over-time after a flat layer".into()));
                }
                flat = Some(lens.len());
                layers.push(Layer::MaxOverTime);
            }
            LayerSpec::Hidden(_) | LayerSpec::Output => {
                let inputs = flat.unwrap_or_else(|| lens.iter().sum());
                let outputs = match spec {
                    LayerSpec::Hidden(n) => *n,
                    _ => 2,
                };
                if matches!(spec, LayerSpec::Output) {
                    layers.push(Layer::Dropout { rate: dropout_rate });
                }
                let mut dense = Dense::zeros(inputs, outputs);
                let r = (6.0 / (inputs + outputs) as f64).sqrt();
                dense.weights.iter_mut().for_each(|v| *v = rng.gen_range(-r..=r));
                layers.push(Layer::Dense(dense));
                if matches!(spec, LayerSpec::Hidden(_)) {
                    layers.push(Layer::Relu);
                }
                flat = Some(outputs);
            }
        }
    }
    Ok(Network {
        config: config.trim().to_string(),
        input_len,
        layers,
    })
}

impl Network {
    pub fn filter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| if let Layer::Conv(c) = l { c.n_filters() } else { 0 })
            .sum()
    }

    /// Size of the representation fed to the output layer.
    pub fn hidden_size(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.inputs,
            _ => 0,
        }
    }

    /// Convolution, pooling and dense layers; rectifiers and dropout are not
    /// counted.
    pub fn display_layer_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !matches!(l, Layer::Relu | Layer::Dropout { .. }))
            .count()
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &Conv> {
        self.layers.iter().filter_map(|l| if let Layer::Conv(c) = l { Some(c) } else { None })
    }

    /// Forward pass keeping what backward needs. Dropout masks are drawn
    /// from `dropout_seed` in training mode.
    pub fn forward_trace(&self, input: &[f64], mode: Mode, dropout_seed: u64) -> Result<Trace> {
        if input.len() != self.input_len {
            return Err(Error::Shape(format!(
                "network expects {} samples, got {}",
                self.input_len,
                input.len()
            )));
        }
        let mut current = Tensor::Seq(vec![input.to_vec()]);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut aux = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let (out, a) = match layer {
                Layer::Conv(conv) => (Tensor::Seq(conv.forward(current.seq()?)?), Aux::None),
                Layer::Relu => (current.map(relu), Aux::None),
                Layer::LocalMaxPool => {
                    let (vals, idx): (Vec<_>, Vec<_>) = current
                        .seq()?
                        .iter()
                        .map(|c| local_max_pool(c))
                        .collect::<Result<Vec<_>>>()?
                        .into_iter()
                        .unzip();
                    (Tensor::Seq(vals), Aux::Pooled(idx))
                }
                Layer::MaxOverTime => {
                    let channels = current.seq()?;
                    let idx = channels.iter().map(|c| argmax(c)).collect::<Result<Vec<_>>>()?;
                    let vals = channels.iter().zip(&idx).map(|(c, &i)| c[i]).collect();
                    (Tensor::Flat(vals), Aux::Argmax(idx))
                }
                Layer::Dense(d) => (Tensor::Flat(d.forward(&current.flatten())?), Aux::None),
                Layer::Dropout { rate } => {
                    let flat = current.flatten();
                    let (out, mask) = dropout(&flat, *rate, mode, dropout_seed.wrapping_add(k as u64))?;
                    (Tensor::reshape_like(out, &current), Aux::Mask(mask))
                }
            };
            inputs.push(current);
            aux.push(a);
            current = out;
        }
        let logits = match current {
            Tensor::Flat(v) if v.len() == 2 => [v[0], v[1]],
            _ => return Err(Error::Shape("network does not end in two logits".into())),
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Trace { inputs, aux, logits })
    }

    /// Accumulates parameter gradients of a loss whose logit gradient is
    /// `dlogits` into `grads`.
    pub fn backward(&self, trace: &Trace, dlogits: [f64; 2], grads: &mut Gradients) {
        let mut g = Tensor::Flat(dlogits.to_vec());
        for k in (0..self.layers.len()).rev() {
            let input = &trace.inputs[k];
            g = match (&self.layers[k], &trace.aux[k]) {
                (Layer::Conv(conv), _) => {
                    let pg = &mut grads.0[k];
                    let dout = match g {
                        Tensor::Seq(c) => c,
                        Tensor::Flat(_) => unreachable!("convolution output is a sequence"),
                    };
                    match conv.backward(input.seq().expect("traced"), &dout, &mut pg.weights, &mut pg.biases, k > 0) {
                        Some(dx) => Tensor::Seq(dx),
                        None => return,
                    }
                }
                (Layer::Relu, _) => g.zip_map(input, |d, x| if x > 0.0 { d } else { 0.0 }),
                (Layer::Dense(d), _) => {
                    let pg = &mut grads.0[k];
                    let dx = d.backward(&input.flatten(), &g.flatten(), &mut pg.weights, &mut pg.biases);
                    Tensor::reshape_like(dx, input)
                }
                (Layer::Dropout { .. }, Aux::Mask(mask)) => {
                    let flat: Vec<f64> = g.flatten().iter().zip(mask).map(|(d, m)| d * m).collect();
                    Tensor::reshape_like(flat, input)
                }
                (Layer::MaxOverTime, Aux::Argmax(idx)) => {
                    let d = g.flatten();
                    let channels = input.seq().expect("traced");
                    Tensor::Seq(
                        channels
                            .iter()
                            .zip(idx.iter().zip(&d))
                            .map(|(c, (&i, &di))| {
                                let mut v = vec![0.0; c.len()];
                                v[i] = di;
                                v
                            })
                            .collect(),
                    )
                }
                (Layer::LocalMaxPool, Aux::Pooled(idx)) => {
                    let Tensor::Seq(dout) = g else { unreachable!("pooled output is a sequence") };
                    let channels = input.seq().expect("traced");
                    Tensor::Seq(
                        channels
                            .iter()
                            .zip(idx.iter().zip(&dout))
                            .map(|(c, (ci, di))| {
                                let mut v = vec![0.0; c.len()];
                                for (&i, &d) in ci.iter().zip(di) {
                                    v[i] += d;
                                }
                                v
                            })
                            .collect(),
                    )
                }
                _ => unreachable!("trace routing matches its layer"),
            };
        }
    }

    /// Weighted cross-entropy of one example; gradients accumulate into
    /// `grads`. Training mode when `dropout_seed` is given.
    pub fn loss_and_grad(
        &self,
        input: &[f64],
        label: Label,
        weight: f64,
        dropout_seed: Option<u64>,
        grads: &mut Gradients,
    ) -> Result<f64> {
        let mode = if dropout_seed.is_some() { Mode::Train } else { Mode::Eval };
        let trace = self.forward_trace(input, mode, dropout_seed.unwrap_or(0))?;
        let (loss, dlogits) = softmax_xent(trace.logits, label, weight);
        self.backward(&trace, dlogits, grads);
        Ok(loss)
    }

    pub fn logits(&self, input: &[f64]) -> Result<[f64; 2]> {
        Ok(self.forward_trace(input, Mode::Eval, 0)?.logits)
    }

    pub fn probabilities(&self, input: &[f64]) -> Result<ClassProbabilities> {
        let p = softmax(self.logits(input)?);
        Ok(ClassProbabilities {
            normal: p[0],
            abnormal: p[1],
        })
    }

    pub fn probabilities_batch(&self, inputs: &[&[f64]]) -> Result<Vec<ClassProbabilities>> {
        inputs.par_iter().map(|x| self.probabilities(x)).collect()
    }

    /// Eval-mode output of every layer, paired with the layer name.
    pub fn activations(&self, input: &[f64]) -> Result<Vec<(&'static str, Tensor)>> {
        let trace = self.forward_trace(input, Mode::Eval, 0)?;
        let mut outs: Vec<Tensor> = trace.inputs.into_iter().skip(1).collect();
        outs.push(Tensor::Flat(trace.logits.to_vec()));
        Ok(self.layers.iter().map(Layer::name).zip(outs).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 0.01,
            l2: 1e-4,
            dropout: 0.5,
            batch_size: 32,
            epochs: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaGrad {
    pub lr: f64,
    pub l2: f64,
    pub accumulators: Gradients,
}

impl AdaGrad {
    pub fn new(net: &Network, lr: f64, l2: f64) -> Self {
        AdaGrad {
            lr,
            l2,
            accumulators: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        for ((layer, g), acc) in net.layers.iter_mut().zip(&grads.0).zip(&mut self.accumulators.0) {
            if let Some((w, b)) = layer.params_mut() {
                adagrad_step(w, &g.weights, &mut acc.weights, self.lr, self.l2, false)?;
                adagrad_step(b, &g.biases, &mut acc.biases, self.lr, self.l2, true)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub input: &'a [f64],
    pub label: Label,
    pub weight: f64,
}

fn example_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | position as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mean weighted loss and gradient over a batch. Chunks of examples are
/// processed in parallel and summed in order.
fn batch_gradient(net: &Network, batch: &[(usize, Example)], seed: u64, epoch: usize) -> Result<(f64, Gradients)> {
    let parts: Vec<(f64, Gradients)> = batch
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut grads = Gradients::zeros_like(net);
            let mut loss = 0.0;
            for (pos, ex) in chunk {
                loss += net.loss_and_grad(ex.input, ex.label, ex.weight, Some(example_seed(seed, epoch, *pos)), &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

/// One pass over `examples` in a seeded shuffled order; returns the mean
/// training loss. Non-finite values abort with the epoch number.
pub fn train_epoch(
    net: &mut Network,
    opt: &mut AdaGrad,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no training examples".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let diverged = |detail: String| Error::Diverged { epoch, detail };
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let batch: Vec<(usize, Example)> = batch.iter().map(|&i| (i, examples[i])).collect();
        let (loss, grads) = batch_gradient(net, &batch, seed, epoch).map_err(|e| diverged(e.to_string()))?;
        if !loss.is_finite() {
            return Err(diverged("non-finite loss".into()));
        }
        total += loss;
        opt.step(net, &grads).map_err(|e| diverged(e.to_string()))?;
    }
    Ok(total / examples.len() as f64)
}

/// Trained network plus optimizer state and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: AdaGrad,
    pub params: TrainParams,
    pub seed: u64,
    pub epoch: usize,
    pub val_accuracy: f64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// The stored layers must be the ones their config text builds.
    pub fn validate(&self) -> Result<()> {
        let fresh = build_network(&self.network.config, self.network.input_len, 0.0, 0)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shape = |n: &Network| -> Vec<(&'static str, usize, usize)> {
            n.layers
                .iter()
                .filter(|l| !matches!(l, Layer::Dropout { .. }))
                .map(|l| {
                    let (w, b) = l.params().map_or((0, 0), |(w, b)| (w.len(), b.len()));
                    (l.name(), w, b)
                })
                .collect()
        };
        if shape(&fresh) != shape(&self.network) {
            return Err(Error::Checkpoint(format!(
                "layers do not match config `{}`",
                self.network.config
            )));
        }
        if Gradients::zeros_like(&self.network).0.iter().map(|g| (g.weights.len(), g.biases.len())).ne(self
            .optimizer
            .accumulators
            .0
            .iter()
            .map(|g| (g.weights.len(), g.biases.len())))
        {
            return Err(Error::Checkpoint("accumulator shapes do not match the network".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation changed a rectifier sign or pooling
    /// choice.
    pub skipped: usize,
}

/// Floor on the relative-error denominator, below which gradients are
/// compared absolutely.
const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Central finite differences on up to `per_layer` random coordinates of
/// every parameterized layer, in eval mode with unit example weight.
pub fn grad_check(
    net: &Network,
    input: &[f64],
    label: Label,
    epsilon: f64,
    per_layer: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let base = net.forward_trace(input, Mode::Eval, 0)?;
    let pattern = base.pattern(net);
    let mut analytic = Gradients::zeros_like(net);
    net.backward(&base, softmax_xent(base.logits, label, 1.0).1, &mut analytic);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = net.clone();
    for k in 0..net.layers.len() {
        let Some((w, b)) = net.layers[k].params() else { continue };
        let total = w.len() + b.len();
        let picks = rand::seq::index::sample(&mut rng, total, per_layer.min(total)).into_vec();
        for idx in picks {
            let original = if idx < w.len() { w[idx] } else { b[idx - w.len()] };
            let set = |probe: &mut Network, v: f64| {
                let (pw, pb) = probe.layers[k].params_mut().expect("parameterized");
                if idx < pw.len() {
                    pw[idx] = v;
                } else {
                    pb[idx - pw.len()] = v;
                }
            };
            set(&mut probe, original + epsilon);
            let plus = probe.forward_trace(input, Mode::Eval, 0)?;
            set(&mut probe, original - epsilon);
            let minus = probe.forward_trace(input, Mode::Eval, 0)?;
            set(&mut probe, original);
            if plus.pattern(net) != pattern || minus.pattern(net) != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric =
                (softmax_xent(plus.logits, label, 1.0).0 - softmax_xent(minus.logits, label, 1.0).0) / (2.0 * epsilon);
            let g = &analytic.0[k];
            let a = if idx < g.weights.len() { g.weights[idx] } else { g.biases[idx - g.weights.len()] };
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    const TINY_FCNN: &str = "Conv([3-5,2]*2), MP, FC";
    const TINY_DCNN: &str = "Conv([3]*3), MP, Conv([3]*4), MP, FC(6), FC";

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn preset_architectures() {
        let small = build_network("FCNN-Small", SEGMENT_LEN, 0.5, 1).unwrap();
        assert_eq!((small.filter_count(), small.hidden_size(), small.display_layer_count()), (200, 200, 3));
        let medium = build_network("FCNN-Medium", SEGMENT_LEN, 0.5, 1).unwrap();
        assert_eq!(medium.filter_count(), 600);
        let large = build_network("FCNN-Large", SEGMENT_LEN, 0.5, 1).unwrap();
        assert_eq!(large.filter_count(), 1500);
        let shallow = build_network("DCNN-Shallow", SEGMENT_LEN, 0.5, 1).unwrap();
        assert_eq!((shallow.filter_count(), shallow.display_layer_count()), (75, 6));
        let deep = build_network("DCNN-Deep", SEGMENT_LEN, 0.5, 1).unwrap();
        assert_eq!((deep.filter_count(), deep.display_layer_count(), deep.hidden_size()), (125, 8, 256));
        // 1200 -> 1191 -> 595 -> 586 -> 293 -> 284 -> 142 samples, 50 channels.
        let first_dense = deep.layers.iter().find_map(|l| if let Layer::Dense(d) = l { Some(d) } else { None }).unwrap();
        assert_eq!(first_dense.inputs, 50 * 142);
    }

    #[test]
    fn shape_chain_runs_on_padded_segments() {
        let net = build_network("FCNN-Reduced", SEGMENT_LEN, 0.5, 2).unwrap();
        let p = net.probabilities(&random_input(SEGMENT_LEN, 1)).unwrap();
        assert!((p.normal + p.abnormal - 1.0).abs() < 1e-9);
        assert!(net.probabilities(&[0.0; 10]).is_err());
        assert!(build_network("Conv([20]*2), MP, FC", 10, 0.5, 0).is_err());
        assert!(build_network("FCNN-Small", SEGMENT_LEN, 1.0, 0).is_err());
    }

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let a = build_network(TINY_DCNN, 32, 0.5, 7).unwrap();
        assert_eq!(a, build_network(TINY_DCNN, 32, 0.5, 7).unwrap());
        assert_ne!(a, build_network(TINY_DCNN, 32, 0.5, 8).unwrap());
        if let Layer::Dense(d) = &a.layers[a.layers.len() - 1] {
            let r = (6.0 / (d.inputs + d.outputs) as f64).sqrt();
            assert!(d.weights.iter().all(|w| w.abs() <= r));
            assert!(d.biases.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn tiny_networks_pass_gradient_check() {
        for (config, seed) in [(TINY_FCNN, 1), (TINY_DCNN, 2)] {
            let net = build_network(config, 32, 0.5, seed).unwrap();
            for label in [Label::Normal, Label::Abnormal] {
                let r = grad_check(&net, &random_input(32, seed + 10), label, 1e-6, 200, 3).unwrap();
                assert!(r.max_relative_error < 1e-5, "{config}: {r:?}");
                assert!(r.checked > 0);
            }
        }
        let net = build_network(TINY_FCNN, 32, 0.5, 1).unwrap();
        assert!(grad_check(&net, &random_input(32, 1), Label::Normal, 0.0, 10, 0).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let net = build_network(TINY_DCNN, 32, 0.5, 4).unwrap();
        let x = random_input(32, 5);
        let a = net.forward_trace(&x, Mode::Train, 9).unwrap().logits;
        let b = net.forward_trace(&x, Mode::Train, 9).unwrap().logits;
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let inputs = [x.as_slice(), &random_input(32, 6)];
        let batch = net.probabilities_batch(&inputs).unwrap();
        for (x, p) in inputs.iter().zip(&batch) {
            assert_eq!(net.probabilities(x).unwrap(), *p);
        }
    }

    #[test]
    fn training_fits_a_toy_problem_and_is_reproducible() {
        // Abnormal inputs carry a bump the filters can detect.
        let data: Vec<(Vec<f64>, Label)> = (0..24)
            .map(|i| {
                let mut x = random_input(32, 100 + i) .iter().map(|v| 0.1 * v).collect::<Vec<_>>();
                let label = if i % 2 == 0 { Label::Normal } else { Label::Abnormal };
                if label.is_abnormal() {
                    x[10..15].iter_mut().for_each(|v| *v += 1.0);
                }
                (x, label)
            })
            .collect();
        let examples: Vec<Example> = data
            .iter()
            .map(|(x, l)| Example {
                input: x,
                label: *l,
                weight: 1.0,
            })
            .collect();
        let run = || {
            let mut net = build_network(TINY_FCNN, 32, 0.2, 3).unwrap();
            let mut opt = AdaGrad::new(&net, 0.05, 1e-4);
            let losses: Vec<f64> = (0..40).map(|e| train_epoch(&mut net, &mut opt, &examples, 8, 5, e).unwrap()).collect();
            (net, losses)
        };
        let (net, losses) = run();
        assert!(losses.last().unwrap() < &losses[0]);
        let correct = data.iter().filter(|(x, l)| net.probabilities(x).unwrap().label() == *l).count();
        assert_eq!(correct, data.len());
        let (net2, losses2) = run();
        assert_eq!(net, net2);
        assert_eq!(losses, losses2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = build_network(TINY_DCNN, 32, 0.5, 4).unwrap();
        let ckpt = Checkpoint {
            optimizer: AdaGrad::new(&net, 0.01, 1e-4),
            network: net,
            params: TrainParams::default(),
            seed: 4,
            epoch: 3,
            val_accuracy: 0.75,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cnn.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        let mut broken = ckpt.clone();
        broken.network.layers.pop();
        broken.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        std::fs::write(&path, "{").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn segment_vector_padding() {
        let s = SegmentVector::from_samples(&[0.5; 400]).unwrap();
        assert_eq!(s.values().len(), SEGMENT_LEN);
        assert!(s.values()[400..].iter().all(|&v| v == 0.0));
        assert!(SegmentVector::from_samples(&[0.5; 399]).is_err());
        assert!(SegmentVector::from_samples(&[0.5; 1201]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_sums_to_one(a in -700.0f64..700.0, b in -700.0f64..700.0) {
            let p = softmax([a, b]);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        }

        /// Bias-free positive filters over a prefix that ends in negative
        /// samples: every window touching the zero tail has a non-positive
        /// pre-activation, so extending the tail leaves the pooled values
        /// unchanged.
        #[test]
        fn zero_tail_extension_keeps_pooled_activations(seed in 0u64..1000, extra in 1usize..40) {
            let mut net = build_network("Conv([4-8,4]*2), MP, FC", 60, 0.0, seed).unwrap();
            if let Layer::Conv(c) = &mut net.layers[0] {
                c.weights.iter_mut().for_each(|w| *w = w.abs());
            }
            let mut x = random_input(40, seed);
            x[32..].iter_mut().for_each(|v| *v = -v.abs() - 0.01);
            let mut short = x.clone();
            short.resize(60, 0.0);
            let mut long = x;
            long.resize(60 + extra, 0.0);
            let mut wide = net.clone();
            wide.input_len = 60 + extra;
            let pooled = |n: &Network, v: &[f64]| n.activations(v).unwrap()[2].1.flatten();
            prop_assert_eq!(pooled(&net, &short), pooled(&wide, &long));
        }
    }
}
