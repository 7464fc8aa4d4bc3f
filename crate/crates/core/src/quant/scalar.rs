use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Bit-widths accepted by the scalar quantizer.
pub const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Group-wise symmetric quantized linear layer.
///
/// Weight `(r, c)` is reconstructed as `scales[r * groups_per_row + c / group_size] * qweights[r * in + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLinear {
    out_dim: usize,
    in_dim: usize,
    bits: u8,
    group_size: usize,
    qweights: Vec<i8>,
    scales: Vec<f64>,
    bias: Option<Vec<f64>>,
}

pub(crate) fn int_range(bits: u8) -> (i32, i32) {
    let half = 1i32 << (bits - 1);
    (-half, half - 1)
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported bit-width {bits}; expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

fn check_group(in_dim: usize, group_size: usize) -> Result<()> {
    if group_size == 0 || in_dim % group_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} does not divide input dimension {in_dim}"
        )));
    }
    Ok(())
}

impl QuantizedLinear {
    /// Assemble a layer from raw parts, checking every invariant.
    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        bits: u8,
        group_size: usize,
        qweights: Vec<i8>,
        scales: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_bits(bits)?;
        check_group(in_dim, group_size)?;
        if qweights.len() != out_dim * in_dim {
            return Err(Error::shape("QuantizedLinear qweights", out_dim * in_dim, qweights.len()));
        }
        let n_scales = out_dim * (in_dim / group_size);
        if scales.len() != n_scales {
            return Err(Error::shape("QuantizedLinear scales", n_scales, scales.len()));
        }
        let (lo, hi) = int_range(bits);
        if let Some(q) = qweights.iter().find(|&&q| (q as i32) < lo || (q as i32) > hi) {
            return Err(Error::InvalidArgument(format!(
                "quantized weight {q} outside the signed {bits}-bit range"
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument("scales must be finite and non-negative".into()));
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::shape("QuantizedLinear bias", out_dim, b.len()));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("bias".into()));
            }
        }
        Ok(Self {
            out_dim,
            in_dim,
            bits,
            group_size,
            qweights,
            scales,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_row(&self) -> usize {
        self.in_dim / self.group_size
    }

    pub fn qweights(&self) -> &[i8] {
        &self.qweights
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.scales
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_dim {
            return Err(Error::shape("QuantizedLinear bias", self.out_dim, bias.len()));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    #[inline]
    pub fn scale_index(&self, r: usize, c: usize) -> usize {
        r * self.groups_per_row() + c / self.group_size
    }

    /// `w = Δ · w̄` for every weight.
    pub fn dequantize(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.qweights.len());
        for r in 0..self.out_dim {
            for c in 0..self.in_dim {
                let s = self.scales[self.scale_index(r, c)];
                data.push(s * self.qweights[r * self.in_dim + c] as f64);
            }
        }
        Matrix::new(self.out_dim, self.in_dim, data).expect("finite scales give finite weights")
    }

    pub(crate) fn forward_into(&self, offset: Option<&[f64]>, x: &[f64], out: &mut Vec<f64>) {
        let gpr = self.groups_per_row();
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.qweights[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = 0.0;
            for (c, (&q, &xc)) in row.iter().zip(x).enumerate() {
                let g = r * gpr + c / self.group_size;
                let s = match offset {
                    Some(o) => self.scales[g] + o[g],
                    None => self.scales[g],
                };
                acc += (s * q as f64) * xc;
            }
            out.push(acc);
        }
    }
}

/// Round-to-nearest, ties to even, clamped to the signed `bits` range.
fn round_clamped(v: f64, bits: u8) -> i8 {
    let (lo, hi) = int_range(bits);
    v.round_ties_even().clamp(lo as f64, hi as f64) as i8
}

/// Group-wise absmax quantization: per group `Δ = absmax / (2^(k-1) - 1)` and
/// `w̄ = round(w / Δ)`. All-zero groups get `Δ = 0` and zero codes.
pub fn quantize_scalar(weights: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedLinear> {
    check_bits(bits)?;
    let (out_dim, in_dim) = weights.shape();
    check_group(in_dim, group_size)?;
    if weights.data().iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights".into()));
    }
    let qmax = ((1i32 << (bits - 1)) - 1) as f64;
    let mut qweights = Vec::with_capacity(out_dim * in_dim);
    let mut scales = Vec::with_capacity(out_dim * in_dim / group_size);
    for r in 0..out_dim {
        for group in weights.row(r).chunks(group_size) {
            let absmax = group.iter().fold(0.0f64, |m, w| m.max(w.abs()));
            let delta = absmax / qmax;
            scales.push(delta);
            if delta == 0.0 {
                qweights.extend(std::iter::repeat_n(0i8, group.len()));
            } else {
                qweights.extend(group.iter().map(|w| round_clamped(w / delta, bits)));
            }
        }
    }
    QuantizedLinear::from_parts(out_dim, in_dim, bits, group_size, qweights, scales, None)
}
