use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Matrix;

/// Fixed seed for codebook fitting; construction is deterministic.
pub const CODEBOOK_SEED: u64 = 0xC0DE_B00C;

/// Codebook-quantized linear layer.
///
/// Each `group_len` run of a row is one code vector; weight `(r, c)` is
/// `channel_scales[r] * codebook[indices[r * groups_per_row + c / g]][c % g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookLinear {
    out_dim: usize,
    in_dim: usize,
    code_bits: u8,
    group_len: usize,
    codebook: Matrix,
    indices: Vec<u32>,
    channel_scales: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl CodebookLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        out_dim: usize,
        in_dim: usize,
        code_bits: u8,
        group_len: usize,
        codebook: Matrix,
        indices: Vec<u32>,
        channel_scales: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if code_bits == 0 || code_bits > 16 {
            return Err(Error::InvalidArgument(format!(
                "code bits must be in 1..=16, got {code_bits}"
            )));
        }
        if group_len == 0 || in_dim % group_len != 0 {
            return Err(Error::InvalidArgument(format!(
                "group length {group_len} does not divide input dimension {in_dim}"
            )));
        }
        let n_codes = 1usize << code_bits;
        if codebook.shape() != (n_codes, group_len) {
            return Err(Error::shape(
                "CodebookLinear codebook",
                format!("({n_codes}, {group_len})"),
                format!("{:?}", codebook.shape()),
            ));
        }
        let n_groups = out_dim * in_dim / group_len;
        if indices.len() != n_groups {
            return Err(Error::shape("CodebookLinear indices", n_groups, indices.len()));
        }
        if let Some(i) = indices.iter().find(|&&i| i as usize >= n_codes) {
            return Err(Error::InvalidArgument(format!("code index {i} out of range")));
        }
        if channel_scales.len() != out_dim {
            return Err(Error::shape("CodebookLinear channel scales", out_dim, channel_scales.len()));
        }
        if channel_scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "channel scales must be finite and non-negative".into(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != out_dim {
                return Err(Error::shape("CodebookLinear bias", out_dim, b.len()));
            }
        }
        Ok(Self {
            out_dim,
            in_dim,
            code_bits,
            group_len,
            codebook,
            indices,
            channel_scales,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn code_bits(&self) -> u8 {
        self.code_bits
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }

    pub fn codebook(&self) -> &Matrix {
        &self.codebook
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn channel_scales(&self) -> &[f64] {
        &self.channel_scales
    }

    pub(crate) fn scales_mut(&mut self) -> &mut [f64] {
        &mut self.channel_scales
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub(crate) fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.out_dim {
            return Err(Error::shape("CodebookLinear bias", self.out_dim, bias.len()));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    fn groups_per_row(&self) -> usize {
        self.in_dim / self.group_len
    }

    /// Unscaled reconstruction of row `r` (codes only).
    pub fn code_row(&self, r: usize) -> Vec<f64> {
        let gpr = self.groups_per_row();
        let mut out = Vec::with_capacity(self.in_dim);
        for j in 0..gpr {
            out.extend_from_slice(self.codebook.row(self.indices[r * gpr + j] as usize));
        }
        out
    }

    pub fn dequantize(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.out_dim * self.in_dim);
        for r in 0..self.out_dim {
            let s = self.channel_scales[r];
            data.extend(self.code_row(r).iter().map(|v| s * v));
        }
        Matrix::new(self.out_dim, self.in_dim, data).expect("finite codebook and scales")
    }

    pub(crate) fn forward_into(&self, offset: Option<&[f64]>, x: &[f64], out: &mut Vec<f64>) {
        let gpr = self.groups_per_row();
        out.clear();
        for r in 0..self.out_dim {
            let s = match offset {
                Some(o) => self.channel_scales[r] + o[r],
                None => self.channel_scales[r],
            };
            let mut acc = 0.0;
            for j in 0..gpr {
                let code = self.codebook.row(self.indices[r * gpr + j] as usize);
                let xs = &x[j * self.group_len..(j + 1) * self.group_len];
                for (&v, &xc) in code.iter().zip(xs) {
                    acc += (s * v) * xc;
                }
            }
            out.push(acc);
        }
    }
}

/// Result of a codebook fit, with the k-means objective after every assignment pass.
#[derive(Debug, Clone)]
pub struct CodebookFit {
    pub layer: CodebookLinear,
    /// Sum of squared distances of row-normalized groups to their codes.
    pub sse_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest code (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// k-means++ seeding followed by `iters` Lloyd iterations.
///
/// Returns centers, assignments and the objective after each assignment pass.
pub(crate) fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    iters: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
    let mut rng = SplitMix64::new(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(points[rng.below(points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(points.len())
        };
        centers.push(points[pick].clone());
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![0usize; points.len()];
    let mut history = Vec::with_capacity(iters + 1);
    let mut dist = vec![0.0; points.len()];
    for iter in 0..=iters {
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (a, d) = nearest(p, &centers);
            assign[i] = a;
            dist[i] = d;
            sse += d;
        }
        history.push(sse);
        if iter == iters {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; points.len()];
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Empty cluster: move it onto the worst-served point.
                let far = (0..points.len())
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = far {
                    taken[i] = true;
                    centers[c] = points[i].clone();
                }
            }
        }
    }
    (centers, assign, history)
}

/// Fit a `2^code_bits`-entry codebook to the `group_len`-sized groups of `weights`.
///
/// Rows are normalized by their absmax before clustering; channel scales are then
/// set so every reconstructed row has its original absmax (1.0 for all-zero rows).
pub fn quantize_codebook(
    weights: &Matrix,
    code_bits: u8,
    group_len: usize,
    iters: usize,
) -> Result<CodebookLinear> {
    quantize_codebook_with_history(weights, code_bits, group_len, iters).map(|fit| fit.layer)
}

pub fn quantize_codebook_with_history(
    weights: &Matrix,
    code_bits: u8,
    group_len: usize,
    iters: usize,
) -> Result<CodebookFit> {
    if code_bits == 0 || code_bits > 16 {
        return Err(Error::InvalidArgument(format!(
            "code bits must be in 1..=16, got {code_bits}"
        )));
    }
    let (out_dim, in_dim) = weights.shape();
    if group_len == 0 || in_dim % group_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "group length {group_len} does not divide input dimension {in_dim}"
        )));
    }
    let n_codes = 1usize << code_bits;
    let n_groups = out_dim * in_dim / group_len;
    if n_codes > n_groups {
        return Err(Error::DegenerateCodebook {
            codes: n_codes,
            groups: n_groups,
        });
    }

    let row_absmax: Vec<f64> = (0..out_dim)
        .map(|r| weights.row(r).iter().fold(0.0f64, |m, w| m.max(w.abs())))
        .collect();
    let mut points = Vec::with_capacity(n_groups);
    for r in 0..out_dim {
        let norm = if row_absmax[r] > 0.0 { row_absmax[r] } else { 1.0 };
        for g in weights.row(r).chunks(group_len) {
            points.push(g.iter().map(|w| w / norm).collect::<Vec<_>>());
        }
    }

    let (centers, assign, sse_history) = kmeans(&points, n_codes, iters, CODEBOOK_SEED);
    let codebook = Matrix::new(n_codes, group_len, centers.concat())?;
    let indices: Vec<u32> = assign.iter().map(|&a| a as u32).collect();

    let gpr = in_dim / group_len;
    let channel_scales = (0..out_dim)
        .map(|r| {
            let recon_max = (0..gpr)
                .flat_map(|j| codebook.row(assign[r * gpr + j]).iter())
                .fold(0.0f64, |m, v| m.max(v.abs()));
            if row_absmax[r] > 0.0 && recon_max > 0.0 {
                row_absmax[r] / recon_max
            } else {
                1.0
            }
        })
        .collect();

    let layer = CodebookLinear::from_parts(
        out_dim,
        in_dim,
        code_bits,
        group_len,
        codebook,
        indices,
        channel_scales,
        None,
    )?;
    Ok(CodebookFit { layer, sse_history })
}
