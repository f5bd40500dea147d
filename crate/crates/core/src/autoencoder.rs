//! One-hot trace encoding, the denoising autoencoder, pretraining, and
//! reconstruction error.
//!
//! A trace becomes a `max_len x (|activities| + |resources|)` matrix: per
//! position one activity one-hot followed by one resource one-hot, with
//! `PAD` one-hots past the trace's real length. The model is a plain MLP
//! (ReLU hidden layers) whose output is normalized per block by softmax,
//! so reconstruction yields a probability distribution over activities and
//! resources at every position.

use crate::eventlog::{EventLog, Trace, Vocabulary};
use crate::rng::{self, Stream};
use crate::tensorgrad::{Graph, NodeId, Tensor};
use crate::{exec, Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One-hot encoded trace matrix, row-major, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTrace {
    pub max_len: usize,
    pub n_activities: usize,
    pub n_resources: usize,
    /// Real (unpadded) trace length.
    pub n: usize,
    /// `max_len * (n_activities + n_resources)` values in {0, 1}.
    pub data: Vec<f64>,
}

impl EncodedTrace {
    /// Columns per position: activity block then resource block.
    pub fn width(&self) -> usize {
        self.n_activities + self.n_resources
    }

    /// Total flattened input dimension.
    pub fn input_dim(&self) -> usize {
        self.max_len * self.width()
    }

    /// Activity block of one position.
    pub fn activity_block(&self, pos: usize) -> &[f64] {
        let w = self.width();
        &self.data[pos * w..pos * w + self.n_activities]
    }

    /// Resource block of one position.
    pub fn resource_block(&self, pos: usize) -> &[f64] {
        let w = self.width();
        &self.data[pos * w + self.n_activities..(pos + 1) * w]
    }
}

/// Per-position probability distributions over activities and resources,
/// same layout as [`EncodedTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbTrace {
    pub max_len: usize,
    pub n_activities: usize,
    pub n_resources: usize,
    pub data: Vec<f64>,
}

impl ProbTrace {
    pub fn width(&self) -> usize {
        self.n_activities + self.n_resources
    }

    pub fn activity_dist(&self, pos: usize) -> &[f64] {
        let w = self.width();
        &self.data[pos * w..pos * w + self.n_activities]
    }

    pub fn resource_dist(&self, pos: usize) -> &[f64] {
        let w = self.width();
        &self.data[pos * w + self.n_activities..(pos + 1) * w]
    }

    /// Argmax activity index per position (0 = PAD).
    pub fn decode_activities(&self) -> Vec<usize> {
        (0..self.max_len)
            .map(|p| {
                let dist = self.activity_dist(p);
                dist.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }
}

/// Layer widths and encoding dimensions; the MLP runs
/// `input -> hidden[0] -> ... -> hidden.last() -> input`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub max_len: usize,
    pub n_activities: usize,
    pub n_resources: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.max_len * (self.n_activities + self.n_resources)
    }

    /// Full chain of layer dimensions, input to output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim());
        dims.extend_from_slice(&self.hidden);
        dims.push(self.input_dim());
        dims
    }

    fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.n_activities < 2 {
            return Err(Error::Argument(
                "architecture needs max_len >= 1 and at least one non-PAD activity".into(),
            ));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::Argument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Bookkeeping carried with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs_trained: usize,
    pub seed: u64,
    /// Mean reconstruction loss per epoch.
    pub loss_history: Vec<f64>,
}

/// The denoising autoencoder: architecture, vocabulary, parameters, and
/// training metadata.
///
/// The vocabulary travels with the model so a saved model can encode raw
/// traces by itself — including activities it never saw during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    pub vocab: Vocabulary,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub meta: TrainingMeta,
}

/// Pretraining hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub max_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            noise_rate: 0.1,
            seed: 17,
            hidden: vec![64, 32, 64],
            max_len: 16,
        }
    }
}

/// One-hot encodes a trace, padding to `max_len` with `PAD` one-hots.
pub fn encode_trace(trace: &Trace, vocab: &Vocabulary, max_len: usize) -> Result<EncodedTrace> {
    if trace.len() > max_len {
        return Err(Error::TraceTooLong {
            case_id: trace.case_id.clone(),
            len: trace.len(),
            max_len,
        });
    }
    let n_act = vocab.n_activities();
    let n_res = vocab.n_resources();
    let width = n_act + n_res;
    let mut data = vec![0.0; max_len * width];
    for p in 0..max_len {
        data[p * width] = 1.0; // PAD activity
        data[p * width + n_act] = 1.0; // PAD resource
    }
    for (p, event) in trace.events.iter().enumerate() {
        let ai = vocab.activity_index(&event.activity).ok_or_else(|| {
            Error::Vocabulary(format!("unknown activity '{}'", event.activity))
        })?;
        let ri = match &event.resource {
            Some(r) => vocab
                .resource_index(r)
                .ok_or_else(|| Error::Vocabulary(format!("unknown resource '{r}'")))?,
            None => 0,
        };
        data[p * width] = 0.0;
        data[p * width + ai] = 1.0;
        data[p * width + n_act] = 0.0;
        data[p * width + n_act + ri] = 1.0;
    }
    Ok(EncodedTrace {
        max_len,
        n_activities: n_act,
        n_resources: n_res,
        n: trace.len(),
        data,
    })
}

/// Denoising corruption: each real (non-PAD) position independently has
/// its activity one-hot replaced, with probability `noise_rate`, by a
/// uniformly random non-PAD activity one-hot (possibly the original).
/// Resource blocks are untouched.
pub fn corrupt(enc: &EncodedTrace, noise_rate: f64, rng: &mut Stream) -> EncodedTrace {
    let mut out = enc.clone();
    let width = enc.width();
    for p in 0..enc.n {
        if rng.gen::<f64>() < noise_rate {
            let replacement = rng.gen_range(1..enc.n_activities);
            let block = &mut out.data[p * width..p * width + enc.n_activities];
            block.fill(0.0);
            block[replacement] = 1.0;
        }
    }
    out
}

/// Mean squared difference over all matrix entries, PAD positions included.
pub fn reconstruction_error(enc: &EncodedTrace, out: &ProbTrace) -> f64 {
    debug_assert_eq!(enc.data.len(), out.data.len());
    let n = enc.data.len() as f64;
    enc.data
        .iter()
        .zip(&out.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

impl Model {
    /// Fresh model with seeded uniform initialization in `[-s, s]`,
    /// `s = sqrt(6 / (fan_in + fan_out))`; biases start at zero.
    pub fn init(arch: Architecture, vocab: Vocabulary, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::substream(seed, "init");
        let dims = arch.layer_dims();
        let mut weights = Vec::with_capacity(dims.len() - 1);
        let mut biases = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-s..s))
                .collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::from_vec(vec![0.0; fan_out]));
        }
        Ok(Model {
            arch,
            vocab,
            weights,
            biases,
            meta: TrainingMeta {
                epochs_trained: 0,
                seed,
                loss_history: Vec::new(),
            },
        })
    }

    /// Parameters interleaved as `[W0, b0, W1, b1, ...]` — the order used
    /// on training graphs and in the serialized binary block.
    pub fn params_flat(&self) -> Vec<Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.clone(), b.clone()])
            .collect()
    }

    pub(crate) fn set_params_flat(&mut self, params: Vec<Tensor>) {
        debug_assert_eq!(params.len(), self.weights.len() * 2);
        for (i, t) in params.into_iter().enumerate() {
            if i % 2 == 0 {
                self.weights[i / 2] = t;
            } else {
                self.biases[i / 2] = t;
            }
        }
    }

    /// Pure inference pass; see [`forward_graph`] for the differentiable
    /// version used in training (kept equivalent by tests).
    pub fn forward(&self, enc: &EncodedTrace) -> Result<ProbTrace> {
        if enc.input_dim() != self.arch.input_dim()
            || enc.n_activities != self.arch.n_activities
            || enc.n_resources != self.arch.n_resources
        {
            return Err(Error::Shape {
                expected: format!("input dim {}", self.arch.input_dim()),
                got: format!("input dim {}", enc.input_dim()),
            });
        }
        let mut x = enc.data.clone();
        let n_layers = self.weights.len();
        for (li, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
            let mut y = b.data().to_vec();
            for (i, xi) in x.iter().enumerate().take(in_dim) {
                if *xi == 0.0 {
                    continue;
                }
                let row = &w.data()[i * out_dim..(i + 1) * out_dim];
                for (yj, wj) in y.iter_mut().zip(row) {
                    *yj += xi * wj;
                }
            }
            if li + 1 < n_layers {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            x = y;
        }
        // per-block softmax
        let width = enc.width();
        for p in 0..enc.max_len {
            softmax_in_place(&mut x[p * width..p * width + enc.n_activities]);
            softmax_in_place(&mut x[p * width + enc.n_activities..(p + 1) * width]);
        }
        Ok(ProbTrace {
            max_len: enc.max_len,
            n_activities: enc.n_activities,
            n_resources: enc.n_resources,
            data: x,
        })
    }

    /// Reconstruction error of a single trace (forward + MSE).
    pub fn score(&self, enc: &EncodedTrace) -> Result<f64> {
        Ok(reconstruction_error(enc, &self.forward(enc)?))
    }
}

fn softmax_in_place(block: &mut [f64]) {
    let max = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in block.iter_mut() {
        *v = (*v - max).exp();
        denom += *v;
    }
    for v in block.iter_mut() {
        *v /= denom;
    }
}

/// Differentiable forward pass over a batch matrix of shape
/// `(batch, input_dim)`. `params` must be interleaved `[W0, b0, ...]` as
/// produced by [`Model::params_flat`]. Returns the per-block
/// softmax-normalized output of the same shape.
pub fn forward_graph(
    g: &mut Graph,
    arch: &Architecture,
    params: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let n_layers = params.len() / 2;
    let mut x = input;
    for li in 0..n_layers {
        let affine = g.matmul(x, params[2 * li])?;
        x = g.add(affine, params[2 * li + 1])?;
        if li + 1 < n_layers {
            x = g.relu(x)?;
        }
    }
    let width = arch.n_activities + arch.n_resources;
    let mut blocks = Vec::with_capacity(arch.max_len * 2);
    for p in 0..arch.max_len {
        let a0 = p * width;
        let act = g.slice(x, 1, a0, a0 + arch.n_activities)?;
        blocks.push(g.softmax(act, 1)?);
        let res = g.slice(x, 1, a0 + arch.n_activities, a0 + width)?;
        blocks.push(g.softmax(res, 1)?);
    }
    g.concat(&blocks, 1)
}

/// Mean squared error between two equal-shape nodes, as a scalar node.
pub fn mse_graph(g: &mut Graph, out: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = g.sub(out, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq, None)
}

/// Stacks encoded traces into a `(batch, input_dim)` tensor.
pub fn stack_batch(encs: &[&EncodedTrace]) -> Result<Tensor> {
    let dim = encs[0].input_dim();
    let mut data = Vec::with_capacity(encs.len() * dim);
    for e in encs {
        data.extend_from_slice(&e.data);
    }
    Tensor::matrix(encs.len(), dim, data)
}

/// Adam optimizer state over a flat parameter list.
pub(crate) struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(params: &[Tensor]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub(crate) fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (pi, param) in params.iter_mut().enumerate() {
            let g = grads[pi].data();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for (j, theta) in param.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Trains a fresh model to reconstruct clean encodings from corrupted
/// ones. Deterministic given the config seed; epoch mean losses land in
/// `meta.loss_history`.
pub fn pretrain(log: &EventLog, vocab: &Vocabulary, config: &TrainConfig) -> Result<Model> {
    if log.is_empty() {
        return Err(Error::Argument("pretrain requires a non-empty log".into()));
    }
    if config.batch == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_rate) {
        return Err(Error::Argument(format!(
            "noise_rate must be in [0,1], got {}",
            config.noise_rate
        )));
    }
    let arch = Architecture {
        max_len: config.max_len,
        n_activities: vocab.n_activities(),
        n_resources: vocab.n_resources(),
        hidden: config.hidden.clone(),
    };
    let mut model = Model::init(arch, vocab.clone(), config.seed)?;

    let encoded: Vec<EncodedTrace> = log
        .traces
        .iter()
        .map(|t| encode_trace(t, vocab, config.max_len))
        .collect::<Result<_>>()?;

    let mut params = model.params_flat();
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = rng::substream(config.seed, "pretrain.shuffle");
    let mut noise_rng = rng::substream(config.seed, "pretrain.noise");
    let mut indices: Vec<usize> = (0..encoded.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in indices.chunks(config.batch) {
            let clean: Vec<&EncodedTrace> = chunk.iter().map(|&i| &encoded[i]).collect();
            let corrupted: Vec<EncodedTrace> = clean
                .iter()
                .map(|e| corrupt(e, config.noise_rate, &mut noise_rng))
                .collect();
            let corrupted_refs: Vec<&EncodedTrace> = corrupted.iter().collect();

            let mut g = Graph::new();
            let param_ids: Vec<NodeId> =
                params.iter().map(|t| g.parameter(t.clone())).collect();
            let input = g.constant(stack_batch(&corrupted_refs)?);
            let target = g.constant(stack_batch(&clean)?);
            let out = forward_graph(&mut g, &model.arch, &param_ids, input)?;
            let loss = mse_graph(&mut g, out, target)?;
            let loss_value = g.value(loss).item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: loss_value,
                });
            }
            let grads = g.backward(loss)?;
            let grad_refs: Vec<&Tensor> = param_ids
                .iter()
                .map(|id| grads.get(*id).expect("registered parameter"))
                .collect();
            adam.step(&mut params, &grad_refs, config.lr);

            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(loss_sum / seen as f64);
    }

    model.set_params_flat(params);
    model.meta = TrainingMeta {
        epochs_trained: config.epochs,
        seed: config.seed,
        loss_history: history,
    };
    Ok(model)
}

/// Scores every trace of a log against the model, in input order.
pub fn score_log(model: &Model, log: &EventLog) -> Result<Vec<f64>> {
    let encoded: Vec<EncodedTrace> = log
        .traces
        .iter()
        .map(|t| encode_trace(t, &model.vocab, model.arch.max_len))
        .collect::<Result<_>>()?;
    exec::map_ordered(&encoded, |enc| model.score(enc))
        .into_iter()
        .collect()
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    arch: Architecture,
    vocab: Vocabulary,
    meta: TrainingMeta,
    param_count: usize,
}

const MODEL_FORMAT: &str = "ltnae-v1";

impl Model {
    /// Writes the model: a length-prefixed JSON header followed by all
    /// parameters as little-endian `f64` in `[W0, b0, W1, b1, ...]` order.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            arch: self.arch.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
            param_count: self.params_flat().iter().map(Tensor::len).sum(),
        };
        let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Parse {
            line: None,
            msg: e.to_string(),
        })?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for t in self.params_flat() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(file))
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let header_len = u64::from_le_bytes(len_buf) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: ModelHeader =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
                line: None,
                msg: format!("bad model header: {e}"),
            })?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Unsupported(format!(
                "unsupported model format '{}'",
                header.format
            )));
        }
        header.arch.validate()?;

        let dims = header.arch.layer_dims();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut total = 0usize;
        let mut read_tensor = |shape: Vec<usize>| -> Result<Tensor> {
            let len: usize = shape.iter().product();
            let mut data = vec![0.0f64; len];
            let mut buf = [0u8; 8];
            for v in &mut data {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            total += len;
            Tensor::new(shape, data)
        };
        for pair in dims.windows(2) {
            weights.push(read_tensor(vec![pair[0], pair[1]])?);
            biases.push(read_tensor(vec![pair[1]])?);
        }
        if total != header.param_count {
            return Err(Error::Parse {
                line: None,
                msg: format!(
                    "parameter count mismatch: header says {}, layout needs {total}",
                    header.param_count
                ),
            });
        }
        Ok(Model {
            arch: header.arch,
            vocab: header.vocab,
            weights,
            biases,
            meta: header.meta,
        })
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }
}

/// Writes per-epoch loss history as `epoch,mean_loss` CSV.
pub fn write_loss_history<W: Write>(history: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "epoch,mean_loss")?;
    for (i, loss) in history.iter().enumerate() {
        writeln!(w, "{i},{loss}")?;
    }
    Ok(())
}
