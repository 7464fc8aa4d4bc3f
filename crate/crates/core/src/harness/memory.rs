//! Component-wise GPU memory arithmetic for fine-tuning modes. Nothing is
//! measured; every figure is a closed-form byte count.

use crate::error::{Error, Result};

/// Decimal gigabyte, the unit used in memory budgets.
pub const GB: f64 = 1e9;
/// Bytes per stored quantization scale.
pub const SCALE_BYTES: f64 = 8.0;
/// Mode every ratio is taken against.
pub const REFERENCE_MODE: &str = "finetune-bf16-adamw16";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Two AdamW moments stored at 16 bits each.
    AdamW16,
    /// Two AdamW moments stored at 32 bits each.
    AdamW32,
    Sgd,
    /// Zeroth-order: no gradients, no state.
    ZoNone,
}

impl Optimizer {
    fn state_bits(self) -> f64 {
        match self {
            Optimizer::AdamW16 => 2.0 * 16.0,
            Optimizer::AdamW32 => 2.0 * 32.0,
            Optimizer::Sgd | Optimizer::ZoNone => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryModel {
    pub param_count: f64,
    pub weight_bits: f64,
    pub gradient_bits: f64,
    pub optimizer: Optimizer,
    /// `Some(g)` when weights are group-quantized with one scale per `g` weights.
    pub group_size: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryBreakdown {
    pub weights: f64,
    pub gradients: f64,
    pub optimizer: f64,
    pub scales: f64,
}

impl MemoryBreakdown {
    pub fn total(&self) -> f64 {
        self.weights + self.gradients + self.optimizer + self.scales
    }
}

impl MemoryModel {
    /// Named mode: `finetune-bf16-adamw16`, `finetune-bf16-adamw32`,
    /// `finetune-bf16-sgd`, `mezo-bf16`, or `qzo-<k>bit`.
    pub fn for_mode(mode: &str, param_count: f64, group_size: usize) -> Result<Self> {
        if !(param_count >= 1.0 && param_count.is_finite()) {
            return Err(Error::InvalidArgument(format!("parameter count must be at least 1, got {param_count}")));
        }
        let full = |optimizer, gradient_bits| MemoryModel {
            param_count,
            weight_bits: 16.0,
            gradient_bits,
            optimizer,
            group_size: None,
        };
        Ok(match mode {
            "finetune-bf16-adamw16" => full(Optimizer::AdamW16, 16.0),
            "finetune-bf16-adamw32" => full(Optimizer::AdamW32, 16.0),
            "finetune-bf16-sgd" => full(Optimizer::Sgd, 16.0),
            "mezo-bf16" => full(Optimizer::ZoNone, 0.0),
            _ => {
                let bits = mode
                    .strip_prefix("qzo-")
                    .and_then(|b| b.strip_suffix("bit"))
                    .and_then(|b| b.parse::<u8>().ok())
                    .filter(|b| crate::quant::SUPPORTED_BITS.contains(b))
                    .ok_or_else(|| Error::UnknownMode(mode.to_string()))?;
                if group_size == 0 {
                    return Err(Error::InvalidArgument("group size must be positive".into()));
                }
                MemoryModel {
                    param_count,
                    weight_bits: bits as f64,
                    gradient_bits: 0.0,
                    optimizer: Optimizer::ZoNone,
                    group_size: Some(group_size as f64),
                }
            }
        })
    }

    pub fn breakdown(&self) -> MemoryBreakdown {
        let n = self.param_count;
        MemoryBreakdown {
            weights: n * self.weight_bits / 8.0,
            gradients: n * self.gradient_bits / 8.0,
            optimizer: n * self.optimizer.state_bits() / 8.0,
            scales: self.group_size.map_or(0.0, |g| n / g * SCALE_BYTES),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRow {
    pub mode: String,
    pub breakdown: MemoryBreakdown,
    /// Reference-mode total divided by this mode's total.
    pub ratio: f64,
}

/// One row per mode, duplicates removed, in the given order.
pub fn account_memory(param_count: f64, modes: &[String], group_size: usize) -> Result<Vec<MemoryRow>> {
    let reference = MemoryModel::for_mode(REFERENCE_MODE, param_count, group_size)?
        .breakdown()
        .total();
    let mut rows: Vec<MemoryRow> = Vec::new();
    for mode in modes {
        if rows.iter().any(|r| &r.mode == mode) {
            continue;
        }
        let breakdown = MemoryModel::for_mode(mode, param_count, group_size)?.breakdown();
        rows.push(MemoryRow {
            mode: mode.clone(),
            breakdown,
            ratio: reference / breakdown.total(),
        });
    }
    Ok(rows)
}

/// Parse a parameter count such as `7e9`, `7000000000`, `7B` or `350M`.
pub fn parse_param_count(s: &str) -> Result<f64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('b' | 'B') => (&s[..s.len() - 1], 1e9),
        Some('m' | 'M') => (&s[..s.len() - 1], 1e6),
        Some('k' | 'K') => (&s[..s.len() - 1], 1e3),
        _ => (s, 1.0),
    };
    let n = num
        .parse::<f64>()
        .ok()
        .map(|v| v * mult)
        .filter(|v| v.is_finite() && *v >= 1.0)
        .ok_or_else(|| Error::InvalidArgument(format!("bad parameter count {s:?}")))?;
    Ok(n)
}

/// Round to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let mag = x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits - 1 - mag);
    (x * factor).round() / factor
}
