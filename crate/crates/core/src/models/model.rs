use crate::error::{Error, Result};
use crate::quant::QuantLayer;
use crate::tensor::Matrix;
use crate::zo::{Constraint, Parameters};

use super::data::{Batch, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = libm::tanh(*x)),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Mean over the batch of `logsumexp(o) − o_y`.
    SoftmaxCrossEntropy,
    /// Mean over the batch of `½‖o − y‖²`.
    MeanSquaredError,
    /// Mean over the batch of `Σ_r o_r`; linear in the scales of a single layer.
    OutputSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Feedforward,
    /// The input is `seq_len` equal chunks; layer 0 runs on each chunk, the
    /// activated outputs are mean-pooled, and the rest of the stack runs once.
    PooledSequence { seq_len: usize },
}

/// A stack of quantized linear layers evaluated forward-only.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    layers: Vec<QuantLayer>,
    activation: Activation,
    head: Head,
    arch: Architecture,
    train_bias: bool,
}

impl QuantizedModel {
    pub fn new(layers: Vec<QuantLayer>, activation: Activation, head: Head, arch: Architecture) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "QuantizedModel layer chain",
                    format!("layer {} in_dim {}", i + 1, pair[0].out_dim()),
                    pair[1].in_dim(),
                ));
            }
        }
        if let Architecture::PooledSequence { seq_len } = arch {
            if seq_len == 0 {
                return Err(Error::InvalidArgument("sequence length must be positive".into()));
            }
        }
        Ok(Self {
            layers,
            activation,
            head,
            arch,
            train_bias: true,
        })
    }

    /// Whether biases join the scales in the perturbed parameter vector.
    pub fn with_bias_training(mut self, on: bool) -> Self {
        self.train_bias = on;
        self
    }

    pub fn layers(&self) -> &[QuantLayer] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<QuantLayer> {
        self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn trains_bias(&self) -> bool {
        self.train_bias
    }

    pub fn input_dim(&self) -> usize {
        match self.arch {
            Architecture::Feedforward => self.layers[0].in_dim(),
            Architecture::PooledSequence { seq_len } => self.layers[0].in_dim() * seq_len,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// All scales, concatenated in layer order.
    pub fn scales(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.scales().iter().copied()).collect()
    }

    fn layer_forward(&self, i: usize, offsets: Option<&[Vec<f64>]>, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let off = offsets.map(|o| o[i].as_slice());
        self.layers[i].forward_into(off, x, out)?;
        if i + 1 < self.layers.len() {
            self.activation.apply(out);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: i });
        }
        Ok(())
    }

    /// Output for a single example, optionally with per-layer scale offsets.
    pub fn forward(&self, x: &[f64], offsets: Option<&[Vec<f64>]>) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), x.len()));
        }
        if let Some(o) = offsets {
            if o.len() != self.layers.len() {
                return Err(Error::shape("model scale offsets", self.layers.len(), o.len()));
            }
        }
        let mut h = Vec::new();
        let mut next = Vec::new();
        let first_rest = match self.arch {
            Architecture::Feedforward => {
                self.layer_forward(0, offsets, x, &mut h)?;
                1
            }
            Architecture::PooledSequence { seq_len } => {
                let chunk = self.layers[0].in_dim();
                let mut pooled = vec![0.0; self.layers[0].out_dim()];
                for token in x.chunks(chunk) {
                    self.layer_forward(0, offsets, token, &mut next)?;
                    for (p, v) in pooled.iter_mut().zip(&next) {
                        *p += v;
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= seq_len as f64);
                h = pooled;
                1
            }
        };
        for i in first_rest..self.layers.len() {
            self.layer_forward(i, offsets, &h, &mut next)?;
            std::mem::swap(&mut h, &mut next);
        }
        Ok(h)
    }

    /// Per-example loss from the model output.
    fn example_loss(&self, out: &[f64], target: TargetRef<'_>) -> Result<f64> {
        match (self.head, target) {
            (Head::SoftmaxCrossEntropy, TargetRef::Class(y)) => {
                if y >= out.len() {
                    return Err(Error::InvalidArgument(format!("label {y} outside {} classes", out.len())));
                }
                let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for &o in out {
                    s += libm::exp(o - m);
                }
                Ok(m + libm::log(s) - out[y])
            }
            (Head::MeanSquaredError, TargetRef::Values(y)) => {
                if y.len() != out.len() {
                    return Err(Error::shape("regression target", out.len(), y.len()));
                }
                let mut s = 0.0;
                for (o, t) in out.iter().zip(y) {
                    s += (o - t) * (o - t);
                }
                Ok(0.5 * s)
            }
            (Head::OutputSum, _) => Ok(out.iter().sum()),
            (head, _) => Err(Error::InvalidArgument(format!(
                "{head:?} head does not accept these targets"
            ))),
        }
    }

    /// Mean batch loss with no scale offsets.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.loss_with_offsets(None, batch)
    }

    /// Mean batch loss at `scales + offsets`, without copying any layer.
    pub fn loss_with_offsets(&self, offsets: Option<&[Vec<f64>]>, batch: &Batch) -> Result<f64> {
        if batch.len() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut total = 0.0;
        for i in 0..batch.len() {
            let out = self.forward(batch.features.row(i), offsets)?;
            total += self.example_loss(&out, batch.target(i))?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss with non-finite outcomes mapped to NaN, as the estimator expects.
    pub fn probe_loss(&self, batch: &Batch) -> f64 {
        self.loss(batch).unwrap_or(f64::NAN)
    }

    /// Fraction of examples whose argmax output (lowest index on ties) matches the label.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let Targets::Classes { ids, .. } = &batch.targets else {
            return Err(Error::InvalidArgument("accuracy needs class labels".into()));
        };
        if ids.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut correct = 0usize;
        for (i, &y) in ids.iter().enumerate() {
            let out = self.forward(batch.features.row(i), None)?;
            let mut best = 0;
            for (k, &v) in out.iter().enumerate() {
                if v > out[best] {
                    best = k;
                }
            }
            correct += usize::from(best == y);
        }
        Ok(correct as f64 / ids.len() as f64)
    }

    /// Exact gradient of the batch loss with respect to every registered
    /// parameter (scales, then biases when trained), by the chain rule through
    /// `w = scale · reconstruction`.
    ///
    /// Only single-layer feed-forward models have this oracle.
    pub fn analytic_gradient(&self, batch: &Batch) -> Result<Vec<f64>> {
        if self.layers.len() != 1 || self.arch != Architecture::Feedforward {
            return Err(Error::OracleUnavailable(
                "analytic gradient requires a single feed-forward layer".into(),
            ));
        }
        let layer = &self.layers[0];
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let n_scales = layer.scales().len();
        let has_bias = self.train_bias && layer.bias().is_some();
        let mut grad = vec![0.0; n_scales + if has_bias { out_dim } else { 0 }];
        let recon = unit_reconstruction(layer);
        for i in 0..batch.len() {
            let x = batch.features.row(i);
            let out = self.forward(x, None)?;
            let delta = self.output_delta(&out, batch.target(i))?;
            for r in 0..out_dim {
                for c in 0..in_dim {
                    grad[recon.scale_index(r, c)] += delta[r] * recon.get(r, c) * x[c];
                }
                if has_bias {
                    grad[n_scales + r] += delta[r];
                }
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(grad)
    }

    fn output_delta(&self, out: &[f64], target: TargetRef<'_>) -> Result<Vec<f64>> {
        Ok(match (self.head, target) {
            (Head::SoftmaxCrossEntropy, TargetRef::Class(y)) => {
                let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = out.iter().map(|o| libm::exp(o - m)).collect();
                let s: f64 = e.iter().sum();
                e.iter()
                    .enumerate()
                    .map(|(k, v)| v / s - if k == y { 1.0 } else { 0.0 })
                    .collect()
            }
            (Head::MeanSquaredError, TargetRef::Values(y)) => out.iter().zip(y).map(|(o, t)| o - t).collect(),
            (Head::OutputSum, _) => vec![1.0; out.len()],
            (head, _) => {
                return Err(Error::InvalidArgument(format!(
                    "{head:?} head does not accept these targets"
                )))
            }
        })
    }
}

#[derive(Clone, Copy)]
pub(crate) enum TargetRef<'a> {
    Class(usize),
    Values(&'a [f64]),
}

/// Per-weight reconstruction with unit scales, plus the weight → scale map.
struct UnitRecon {
    values: Matrix,
    group: usize,
    per_row: bool,
    groups_per_row: usize,
}

impl UnitRecon {
    fn get(&self, r: usize, c: usize) -> f64 {
        self.values.get(r, c)
    }

    fn scale_index(&self, r: usize, c: usize) -> usize {
        if self.per_row {
            r
        } else {
            r * self.groups_per_row + c / self.group
        }
    }
}

fn unit_reconstruction(layer: &QuantLayer) -> UnitRecon {
    match layer {
        QuantLayer::Scalar(l) => UnitRecon {
            values: Matrix::new(
                l.out_dim(),
                l.in_dim(),
                l.qweights().iter().map(|&q| q as f64).collect(),
            )
            .expect("integers are finite"),
            group: l.group_size(),
            per_row: false,
            groups_per_row: l.groups_per_row(),
        },
        QuantLayer::Codebook(l) => UnitRecon {
            values: Matrix::new(
                l.out_dim(),
                l.in_dim(),
                (0..l.out_dim()).flat_map(|r| l.code_row(r)).collect(),
            )
            .expect("finite codebook"),
            group: l.group_len(),
            per_row: true,
            groups_per_row: 1,
        },
    }
}

impl Parameters for QuantizedModel {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64])) {
        for layer in &mut self.layers {
            f(Constraint::NonNegative, layer.scales_mut());
        }
        if self.train_bias {
            for layer in &mut self.layers {
                if let Some(b) = layer.bias_mut() {
                    f(Constraint::Free, b);
                }
            }
        }
    }
}
