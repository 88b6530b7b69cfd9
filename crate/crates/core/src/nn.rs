//! Small fully connected classifiers with batch normalization.
//!
//! Each hidden block is `linear -> [batchnorm] -> relu`; the head is a plain
//! linear layer producing logits. Weights are stored `fan_in x fan_out`, so a
//! layer computes `x * W + b`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ArchitectureSpec {
    pub fn new(name: impl Into<String>, input_dim: usize, hidden: &[(usize, bool)], num_classes: usize) -> Self {
        ArchitectureSpec {
            name: name.into(),
            input_dim,
            hidden: hidden
                .iter()
                .map(|&(width, batchnorm)| HiddenLayer { width, batchnorm })
                .collect(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    /// Parses a compact hidden-layer list such as `"32bn,16bn,16"`.
    pub fn parse(name: &str, input_dim: usize, hidden: &str, num_classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for tok in hidden.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (digits, bn) = match tok.strip_suffix("bn") {
                Some(d) => (d, true),
                None => (tok, false),
            };
            let width = digits
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad hidden layer token `{tok}`")))?;
            layers.push((width, bn));
        }
        let spec = ArchitectureSpec::new(name, input_dim, &layers, num_classes);
        spec.validate()?;
        Ok(spec)
    }

    /// Inverse of [`ArchitectureSpec::parse`] for the hidden list.
    pub fn hidden_string(&self) -> String {
        self.hidden
            .iter()
            .map(|h| format!("{}{}", h.width, if h.batchnorm { "bn" } else { "" }))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(Error::invalid(format!("architecture `{}` has no hidden layer", self.name)));
        }
        if self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        Ok(())
    }

    pub fn batchnorm_layers(&self) -> usize {
        self.hidden.iter().filter(|h| h.batchnorm).count()
    }

    /// Number of trainable scalars: weights, biases, and batchnorm scale/shift.
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for h in &self.hidden {
            total += fan_in * h.width + h.width;
            if h.batchnorm {
                total += 2 * h.width;
            }
            fan_in = h.width;
        }
        total + fan_in * self.num_classes + self.num_classes
    }

    /// Stable 64-bit digest of the architecture, used in checkpoint headers.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let hash = Sha256::digest(&json);
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            gamma: Tensor::ones(&[1, width]),
            beta: Tensor::zeros(&[1, width]),
        }
    }

    pub fn width(&self) -> usize {
        self.running_mean.len()
    }

    /// `sqrt(running_var + eps)`, the reference standard deviation.
    pub fn running_std(&self) -> Vec<f64> {
        self.running_var.iter().map(|v| (v + self.epsilon).sqrt()).collect()
    }

    /// Convex update `running <- (1 - m) running + m batch`.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

/// Per-feature batch mean and (biased) variance at one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// How a graph forward pass treats the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Parameters are differentiable leaves.
    Trainable,
    /// Parameters are constants (frozen teacher).
    Frozen,
}

/// Handles produced by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct GraphForward {
    pub logits: Var,
    /// `(mean, var)` nodes of shape `1 x width`, one pair per batchnorm layer.
    pub batch_stats: Vec<(Var, Var)>,
    /// Parameter nodes in flattening order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ArchitectureSpec,
    layers: Vec<Dense>,
    bn: Vec<BatchNormState>,
    /// For each hidden layer, its index into `bn`.
    bn_index: Vec<Option<usize>>,
}

impl Model {
    /// Scaled-normal (`std = sqrt(2 / fan_in)`) weights, zero biases, identity
    /// batchnorm. Deterministic in `(spec, seed)`.
    pub fn new(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut bn = Vec::new();
        let mut bn_index = Vec::new();
        let mut fan_in = spec.input_dim;
        let dense = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| Dense {
            weight: Tensor::randn(&[fan_in, fan_out], rng).scale((2.0 / fan_in as f64).sqrt()),
            bias: Tensor::zeros(&[1, fan_out]),
        };
        for h in &spec.hidden {
            layers.push(dense(fan_in, h.width, &mut rng));
            if h.batchnorm {
                bn_index.push(Some(bn.len()));
                bn.push(BatchNormState::new(h.width));
            } else {
                bn_index.push(None);
            }
            fan_in = h.width;
        }
        layers.push(dense(fan_in, spec.num_classes, &mut rng));
        Ok(Model {
            spec: spec.clone(),
            layers,
            bn,
            bn_index,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Records the forward pass of `x` into `g`.
    ///
    /// With `Mode::Train` batchnorm layers normalize by the batch statistics;
    /// with `Mode::Eval` they normalize by the running statistics. Batch
    /// statistics are computed as graph nodes in both modes. Running stats
    /// are never touched here.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, mode: Mode, role: ParamRole) -> Result<GraphForward> {
        let xs = g.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.spec.input_dim {
            return Err(Error::Shape {
                op: "forward",
                left: xs,
                right: vec![0, self.spec.input_dim],
            });
        }
        let n = xs[0];
        if mode == Mode::Train && n < 2 && !self.bn.is_empty() {
            return Err(Error::invalid("train-mode batchnorm needs at least 2 samples"));
        }
        let mut params = Vec::new();
        let mut register = |g: &mut Graph, t: &Tensor| {
            let v = g.leaf(t.clone());
            if role == ParamRole::Trainable {
                params.push(v);
            }
            v
        };

        let mut batch_stats = Vec::new();
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let w = register(g, &layer.weight);
            let b = register(g, &layer.bias);
            let hw = g.matmul(h, w)?;
            let bb = g.broadcast_rows(b, n)?;
            h = g.add(hw, bb)?;
            if li == self.layers.len() - 1 {
                break;
            }
            if let Some(bi) = self.bn_index[li] {
                let state = &self.bn[bi];
                let gamma = register(g, &state.gamma);
                let beta = register(g, &state.beta);
                let mu = g.mean_axis(h, 0)?;
                let mu_b = g.broadcast_rows(mu, n)?;
                let centered = g.sub(h, mu_b)?;
                let sq = g.square(centered)?;
                let var = g.mean_axis(sq, 0)?;
                batch_stats.push((mu, var));
                let normalized = match mode {
                    Mode::Train => {
                        let ve = g.add_scalar(var, state.epsilon)?;
                        let sd = g.sqrt(ve)?;
                        let sd_b = g.broadcast_rows(sd, n)?;
                        g.div(centered, sd_b)?
                    }
                    Mode::Eval => {
                        let w = state.width();
                        let rm = g.constant(Tensor::from_parts(vec![1, w], state.running_mean.clone()));
                        let rs = g.constant(Tensor::from_parts(vec![1, w], state.running_std()));
                        let rm_b = g.broadcast_rows(rm, n)?;
                        let rs_b = g.broadcast_rows(rs, n)?;
                        let c = g.sub(h, rm_b)?;
                        g.div(c, rs_b)?
                    }
                };
                let gamma_b = g.broadcast_rows(gamma, n)?;
                let beta_b = g.broadcast_rows(beta, n)?;
                let scaled = g.mul(normalized, gamma_b)?;
                h = g.add(scaled, beta_b)?;
            }
            h = g.relu(h)?;
        }
        Ok(GraphForward {
            logits: h,
            batch_stats,
            params,
        })
    }

    /// Forward pass returning logits and per-batchnorm-layer batch statistics.
    /// Train mode also folds the batch statistics into the running stats.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BatchStats>)> {
        let (logits, stats) = self.forward_pure(x, mode)?;
        if mode == Mode::Train {
            self.absorb_stats(&stats);
        }
        Ok((logits, stats))
    }

    /// Forward pass that never mutates the model.
    pub fn forward_pure(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<BatchStats>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, mode, ParamRole::Frozen)?;
        let stats = collect_stats(&g, &out);
        Ok((g.value(out.logits).clone(), stats))
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_pure(x, Mode::Eval)?.0)
    }

    /// Eval-mode class probabilities.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, Mode::Eval, ParamRole::Frozen)?;
        let p = g.softmax(out.logits)?;
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    pub fn absorb_stats(&mut self, stats: &[BatchStats]) {
        for (state, s) in self.bn.iter_mut().zip(stats) {
            state.absorb(s);
        }
    }

    /// Gradient of `loss` with respect to the input, parameters frozen and
    /// batchnorm normalizing by running statistics. The loss closure sees the
    /// batch statistics of `x` for batchnorm regularization.
    pub fn input_gradient<F>(&self, x: &Tensor, loss: F) -> Result<(f64, Tensor)>
    where
        F: FnOnce(&mut Graph, &GraphForward) -> Result<Var>,
    {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = self.forward_graph(&mut g, xv, Mode::Eval, ParamRole::Frozen)?;
        let l = loss(&mut g, &out)?;
        let mut grads = g.backward(l, &[xv])?;
        Ok((g.scalar(l), grads.take(xv).expect("input gradient")))
    }

    /// Train-mode loss value, flat parameter gradient and batch statistics.
    pub fn parameter_gradient<F>(&self, x: &Tensor, loss: F) -> Result<(f64, Vec<f64>, Vec<BatchStats>)>
    where
        F: FnOnce(&mut Graph, &GraphForward) -> Result<Var>,
    {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&mut g, xv, Mode::Train, ParamRole::Trainable)?;
        let l = loss(&mut g, &out)?;
        let mut grads = g.backward(l, &out.params)?;
        let mut flat = Vec::with_capacity(self.param_count());
        for p in &out.params {
            flat.extend(grads.take(*p).expect("param gradient").into_data());
        }
        Ok((g.scalar(l), flat, collect_stats(&g, &out)))
    }

    /// Parameters flattened by layer index, weights then bias, then the
    /// layer's batchnorm scale then shift.
    pub fn parameter_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for (li, layer) in self.layers.iter().enumerate() {
            v.extend_from_slice(layer.weight.data());
            v.extend_from_slice(layer.bias.data());
            if let Some(Some(bi)) = self.bn_index.get(li) {
                v.extend_from_slice(self.bn[*bi].gamma.data());
                v.extend_from_slice(self.bn[*bi].beta.data());
            }
        }
        v
    }

    pub fn load_parameter_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(Error::Shape {
                op: "load_parameter_vector",
                left: vec![self.param_count()],
                right: vec![v.len()],
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "load_parameter_vector" });
        }
        let mut off = 0;
        let mut take = |dst: &mut Tensor| {
            let n = dst.len();
            dst.data_mut().copy_from_slice(&v[off..off + n]);
            off += n;
        };
        for li in 0..self.layers.len() {
            take(&mut self.layers[li].weight);
            take(&mut self.layers[li].bias);
            if let Some(Some(bi)) = self.bn_index.get(li) {
                take(&mut self.bn[*bi].gamma);
                take(&mut self.bn[*bi].beta);
            }
        }
        Ok(())
    }

    pub fn with_parameter_vector(&self, v: &[f64]) -> Result<Model> {
        let mut m = self.clone();
        m.load_parameter_vector(v)?;
        Ok(m)
    }

    /// Running means then running variances, layer by layer.
    pub fn running_stats_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for s in &self.bn {
            v.extend_from_slice(&s.running_mean);
            v.extend_from_slice(&s.running_var);
        }
        v
    }

    pub fn load_running_stats_vector(&mut self, v: &[f64]) -> Result<()> {
        let expected: usize = self.bn.iter().map(|s| 2 * s.width()).sum();
        if v.len() != expected {
            return Err(Error::Shape {
                op: "load_running_stats_vector",
                left: vec![expected],
                right: vec![v.len()],
            });
        }
        let mut off = 0;
        for s in &mut self.bn {
            let w = s.width();
            s.running_mean.copy_from_slice(&v[off..off + w]);
            s.running_var.copy_from_slice(&v[off + w..off + 2 * w]);
            off += 2 * w;
        }
        Ok(())
    }

    /// Writes the parameter vector as `CDRM` magic, spec digest (u64),
    /// count (u64), then little-endian `f64` values.
    pub fn save_parameters(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let v = self.parameter_vector();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&self.spec.digest().to_le_bytes())?;
        w.write_all(&(v.len() as u64).to_le_bytes())?;
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_parameters(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::invalid("not a parameter checkpoint"));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        if u64::from_le_bytes(word) != self.spec.digest() {
            return Err(Error::invalid(format!(
                "checkpoint was written for a different architecture than `{}`",
                self.spec.name
            )));
        }
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        if count != self.param_count() {
            return Err(Error::Shape {
                op: "load_parameters",
                left: vec![self.param_count()],
                right: vec![count],
            });
        }
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut word)?;
            v.push(f64::from_le_bytes(word));
        }
        self.load_parameter_vector(&v)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CDRM";

fn collect_stats(g: &Graph, out: &GraphForward) -> Vec<BatchStats> {
    out.batch_stats
        .iter()
        .map(|&(m, v)| BatchStats {
            mean: g.value(m).data().to_vec(),
            var: g.value(v).data().to_vec(),
        })
        .collect()
}
