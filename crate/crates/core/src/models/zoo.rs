//! Desk-scale model constructors. Each builds full-precision weights, then
//! quantizes every layer; the result is the quantized zero-shot model.

use crate::error::{Error, Result};
use crate::quant::{quantize_codebook, quantize_scalar, QuantLayer};
use crate::rng::{derive_seed, SeededNormalStream};
use crate::tensor::Matrix;

use super::data::{Dataset, Split, Targets};
use super::model::{Activation, Architecture, Head, QuantizedModel};

/// Lloyd iterations used when a model is codebook-quantized.
pub const CODEBOOK_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSpec {
    /// Softmax regression initialized as the nearest-centroid classifier.
    Logistic,
    /// Affine MSE model initialized by ridge least squares.
    Linear,
    /// Two layers with ReLU, random init.
    Mlp { hidden: usize },
    /// Attention-free sequence block: shared token layer, mean pool, readout.
    Sequence { seq_len: usize, hidden: usize },
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    /// `logistic`, `linear`, `mlp:<hidden>`, `seq:<len>:<hidden>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::config(format!("bad number {p:?} in model spec {s:?}")))
        };
        match parts.as_slice() {
            ["logistic"] => Ok(ModelSpec::Logistic),
            ["linear"] => Ok(ModelSpec::Linear),
            ["mlp"] => Ok(ModelSpec::Mlp { hidden: 64 }),
            ["mlp", h] => Ok(ModelSpec::Mlp { hidden: num(h)? }),
            ["seq", l, h] => Ok(ModelSpec::Sequence {
                seq_len: num(l)?,
                hidden: num(h)?,
            }),
            _ => Err(Error::config(format!("unknown model spec {s:?}"))),
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSpec::Logistic => f.write_str("logistic"),
            ModelSpec::Linear => f.write_str("linear"),
            ModelSpec::Mlp { hidden } => write!(f, "mlp:{hidden}"),
            ModelSpec::Sequence { seq_len, hidden } => write!(f, "seq:{seq_len}:{hidden}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantizerKind {
    #[default]
    Scalar,
    Codebook,
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(QuantizerKind::Scalar),
            "codebook" => Ok(QuantizerKind::Codebook),
            other => Err(Error::config(format!("unknown quantizer {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QuantizerKind::Scalar => "scalar",
            QuantizerKind::Codebook => "codebook",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantSettings {
    pub kind: QuantizerKind,
    /// Weight bits (scalar) or code bits (codebook).
    pub bits: u8,
    /// Group size (scalar) or code length (codebook).
    pub group_size: usize,
}

pub fn quantize_layer(weights: &Matrix, bias: Vec<f64>, q: QuantSettings) -> Result<QuantLayer> {
    let layer: QuantLayer = match q.kind {
        QuantizerKind::Scalar => quantize_scalar(weights, q.bits, q.group_size)?.into(),
        QuantizerKind::Codebook => quantize_codebook(weights, q.bits, q.group_size, CODEBOOK_ITERS)?.into(),
    };
    layer.with_bias(bias)
}

fn random_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    let data = SeededNormalStream::new(seed)
        .normals(rows * cols)
        .into_iter()
        .map(|z| std * z)
        .collect();
    Matrix::new(rows, cols, data).expect("finite normals")
}

/// Nearest-centroid classifier as a linear layer: row `k` is the centroid
/// `μ_k`, bias `−½‖μ_k‖²`.
pub fn centroid_classifier(dataset: &Dataset) -> Result<(Matrix, Vec<f64>)> {
    let Targets::Classes { ids, num_classes } = dataset.targets() else {
        return Err(Error::InvalidArgument("centroid init needs class labels".into()));
    };
    let d = dataset.dim();
    let mut sums = vec![vec![0.0; d]; *num_classes];
    let mut counts = vec![0usize; *num_classes];
    for &i in dataset.indices(Split::Train) {
        let y = ids[i];
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(dataset.features().row(i)) {
            *s += v;
        }
    }
    let mut rows = Vec::with_capacity(*num_classes);
    let mut bias = Vec::with_capacity(*num_classes);
    for (s, &c) in sums.iter().zip(&counts) {
        let mu: Vec<f64> = s.iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect();
        bias.push(-0.5 * crate::tensor::dot(&mu, &mu));
        rows.push(mu);
    }
    Ok((Matrix::from_rows(&rows)?, bias))
}

/// Solve the symmetric positive-definite system `a x = b` by Cholesky.
pub(crate) fn solve_spd(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InvalidArgument("system is not positive definite".into()));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Ok(x)
}

/// Ridge least squares with an intercept on the train split, one row per target.
pub fn ridge_regression(dataset: &Dataset, lambda: f64) -> Result<(Matrix, Vec<f64>)> {
    let Targets::Values(y) = dataset.targets() else {
        return Err(Error::InvalidArgument("least squares needs real targets".into()));
    };
    let d = dataset.dim();
    let n = d + 1;
    let mut gram = vec![0.0; n * n];
    let mut rhs = vec![vec![0.0; n]; y.cols()];
    for &i in dataset.indices(Split::Train) {
        let mut x = dataset.features().row(i).to_vec();
        x.push(1.0);
        for a in 0..n {
            for b in 0..n {
                gram[a * n + b] += x[a] * x[b];
            }
            for (t, r) in rhs.iter_mut().enumerate() {
                r[a] += x[a] * y.get(i, t);
            }
        }
    }
    for a in 0..d {
        gram[a * n + a] += lambda;
    }
    let mut rows = Vec::with_capacity(y.cols());
    let mut bias = Vec::with_capacity(y.cols());
    for r in &rhs {
        let mut sol = solve_spd(&gram, r, n)?;
        bias.push(sol.pop().expect("intercept"));
        rows.push(sol);
    }
    Ok((Matrix::from_rows(&rows)?, bias))
}

/// Build the quantized zero-shot model for `spec` on `dataset`.
pub fn build_model(spec: ModelSpec, dataset: &Dataset, q: QuantSettings, seed: u64) -> Result<QuantizedModel> {
    let d = dataset.dim();
    let out = dataset.output_dim();
    let head = if dataset.targets().is_classification() {
        Head::SoftmaxCrossEntropy
    } else {
        Head::MeanSquaredError
    };
    match spec {
        ModelSpec::Logistic => {
            let (w, b) = centroid_classifier(dataset)?;
            QuantizedModel::new(
                vec![quantize_layer(&w, b, q)?],
                Activation::Identity,
                Head::SoftmaxCrossEntropy,
                Architecture::Feedforward,
            )
        }
        ModelSpec::Linear => {
            let (w, b) = ridge_regression(dataset, 1e-6)?;
            QuantizedModel::new(
                vec![quantize_layer(&w, b, q)?],
                Activation::Identity,
                Head::MeanSquaredError,
                Architecture::Feedforward,
            )
        }
        ModelSpec::Mlp { hidden } => {
            let w1 = random_matrix(hidden, d, (2.0 / d as f64).sqrt(), derive_seed(seed, 11));
            let w2 = random_matrix(out, hidden, (1.0 / hidden as f64).sqrt(), derive_seed(seed, 12));
            QuantizedModel::new(
                vec![
                    quantize_layer(&w1, vec![0.0; hidden], q)?,
                    quantize_layer(&w2, vec![0.0; out], q)?,
                ],
                Activation::Relu,
                head,
                Architecture::Feedforward,
            )
        }
        ModelSpec::Sequence { seq_len, hidden } => {
            if d % seq_len != 0 {
                return Err(Error::InvalidArgument(format!(
                    "input dimension {d} is not divisible by sequence length {seq_len}"
                )));
            }
            let chunk = d / seq_len;
            let w1 = random_matrix(hidden, chunk, (2.0 / chunk as f64).sqrt(), derive_seed(seed, 21));
            let w2 = random_matrix(out, hidden, (1.0 / hidden as f64).sqrt(), derive_seed(seed, 22));
            QuantizedModel::new(
                vec![
                    quantize_layer(&w1, vec![0.0; hidden], q)?,
                    quantize_layer(&w2, vec![0.0; out], q)?,
                ],
                Activation::Relu,
                head,
                Architecture::PooledSequence { seq_len },
            )
        }
    }
}
