//! Post-training quantization of linear layers.
//!
//! Two layer kinds share one interface: group-wise scalar quantization
//! ([`QuantizedLinear`]) and codebook quantization ([`CodebookLinear`]). In both,
//! the integer part is frozen and a vector of non-negative scales is the only
//! continuous quantity a zeroth-order optimizer touches.

mod codebook;
pub mod format;
mod scalar;

pub use codebook::{quantize_codebook, quantize_codebook_with_history, CodebookFit, CodebookLinear, CODEBOOK_SEED};
pub use scalar::{quantize_scalar, QuantizedLinear, SUPPORTED_BITS};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Default number of weights sharing one scale.
pub const DEFAULT_GROUP_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub enum QuantLayer {
    Scalar(QuantizedLinear),
    Codebook(CodebookLinear),
}

impl From<QuantizedLinear> for QuantLayer {
    fn from(l: QuantizedLinear) -> Self {
        QuantLayer::Scalar(l)
    }
}

impl From<CodebookLinear> for QuantLayer {
    fn from(l: CodebookLinear) -> Self {
        QuantLayer::Codebook(l)
    }
}

impl QuantLayer {
    pub fn in_dim(&self) -> usize {
        match self {
            QuantLayer::Scalar(l) => l.in_dim(),
            QuantLayer::Codebook(l) => l.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            QuantLayer::Scalar(l) => l.out_dim(),
            QuantLayer::Codebook(l) => l.out_dim(),
        }
    }

    /// The continuous scales: per-group for scalar layers, per-channel for codebook layers.
    pub fn scales(&self) -> &[f64] {
        match self {
            QuantLayer::Scalar(l) => l.scales(),
            QuantLayer::Codebook(l) => l.channel_scales(),
        }
    }

    /// Mutable scales. Callers are responsible for keeping them non-negative
    /// outside of a probe; the optimizer projects after every step.
    pub fn scales_mut(&mut self) -> &mut [f64] {
        match self {
            QuantLayer::Scalar(l) => l.scales_mut(),
            QuantLayer::Codebook(l) => l.scales_mut(),
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            QuantLayer::Scalar(l) => l.bias(),
            QuantLayer::Codebook(l) => l.bias(),
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        match self {
            QuantLayer::Scalar(l) => l.bias_mut(),
            QuantLayer::Codebook(l) => l.bias_mut(),
        }
    }

    pub fn with_bias(self, bias: Vec<f64>) -> Result<Self> {
        Ok(match self {
            QuantLayer::Scalar(l) => QuantLayer::Scalar(l.with_bias(bias)?),
            QuantLayer::Codebook(l) => QuantLayer::Codebook(l.with_bias(bias)?),
        })
    }

    pub fn dequantize(&self) -> Matrix {
        match self {
            QuantLayer::Scalar(l) => l.dequantize(),
            QuantLayer::Codebook(l) => l.dequantize(),
        }
    }

    /// Forward pass with weights `(scales + offset) ⊙ reconstruction`, plus bias.
    ///
    /// Nothing is materialized: with no offset the result equals
    /// `dequantize().matvec(x)` plus bias to the last bit.
    pub fn forward(&self, scale_offset: Option<&[f64]>, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.out_dim());
        self.forward_into(scale_offset, x, &mut out)?;
        Ok(out)
    }

    pub fn forward_into(&self, scale_offset: Option<&[f64]>, x: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("forward_quantized input", self.in_dim(), x.len()));
        }
        if let Some(o) = scale_offset {
            if o.len() != self.scales().len() {
                return Err(Error::shape("forward_quantized scale offset", self.scales().len(), o.len()));
            }
        }
        match self {
            QuantLayer::Scalar(l) => l.forward_into(scale_offset, x, out),
            QuantLayer::Codebook(l) => l.forward_into(scale_offset, x, out),
        }
        if let Some(b) = self.bias() {
            for (y, b) in out.iter_mut().zip(b) {
                *y += b;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`QuantLayer::forward`].
pub fn forward_quantized(layer: &QuantLayer, scale_offset: Option<&[f64]>, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(scale_offset, x)
}

/// Read a headerless numeric CSV as a weight matrix, one output row per line.
pub fn read_weights_csv(path: impl AsRef<std::path::Path>) -> Result<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Csv {
                    row: i + 1,
                    column: format!("{}", c + 1),
                    message: format!("non-numeric weight {cell:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        std::fs::write(&p, "1.0, -2\n0.5,3e-1\n").unwrap();
        let m = read_weights_csv(&p).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.data(), &[1.0, -2.0, 0.5, 0.3]);
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        assert!(matches!(read_weights_csv(&p), Err(Error::Csv { row: 2, .. })));
    }

    fn tiny() -> QuantLayer {
        QuantizedLinear::from_parts(1, 2, 4, 2, vec![1, 2], vec![0.5], None)
            .unwrap()
            .into()
    }

    #[test]
    fn offset_example() {
        let y = tiny().forward(Some(&[0.1]), &[1.0, 1.0]).unwrap();
        assert!((y[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_offset_matches_dequantized_matvec() {
        let w = Matrix::new(3, 4, vec![0.3, -0.2, 0.9, 1.1, -0.5, 0.05, 0.7, -0.33, 0.0, 0.0, 0.2, 0.4]).unwrap();
        let layer: QuantLayer = quantize_scalar(&w, 4, 2).unwrap().into();
        let layer = layer.with_bias(vec![0.1, -0.2, 0.3]).unwrap();
        let x = [0.7, -1.3, 2.2, 0.01];
        let mut reference = layer.dequantize().matvec(&x).unwrap();
        for (y, b) in reference.iter_mut().zip(layer.bias().unwrap()) {
            *y += b;
        }
        assert_eq!(layer.forward(None, &x).unwrap(), reference);
        let zeros = vec![0.0; layer.scales().len()];
        assert_eq!(layer.forward(Some(&zeros), &x).unwrap(), reference);
    }

    #[test]
    fn negated_offset_leaves_only_bias() {
        let w = Matrix::new(2, 4, vec![0.3, -0.2, 0.9, 1.1, -0.5, 0.05, 0.7, -0.33]).unwrap();
        let layer: QuantLayer = quantize_scalar(&w, 8, 4).unwrap().into();
        let layer = layer.with_bias(vec![0.25, -1.0]).unwrap();
        let neg: Vec<f64> = layer.scales().iter().map(|s| -s).collect();
        assert_eq!(layer.forward(Some(&neg), &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![0.25, -1.0]);
    }

    #[test]
    fn codebook_zero_offset_matches_dequantized_matvec() {
        let w = Matrix::new(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let layer: QuantLayer = quantize_codebook(&w, 2, 2, 10).unwrap().into();
        let x = [0.5, -0.25, 1.5, 2.0];
        assert_eq!(layer.forward(None, &x).unwrap(), layer.dequantize().matvec(&x).unwrap());
    }

    #[test]
    fn forward_shape_errors() {
        let layer = tiny();
        assert!(layer.forward(None, &[1.0]).is_err());
        assert!(layer.forward(Some(&[0.0, 0.0]), &[1.0, 1.0]).is_err());
    }
}
