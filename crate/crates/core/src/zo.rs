//! Two-point zeroth-order gradient estimation with seed replay.
//!
//! The perturbation direction `z` is never stored. Every pass that needs it
//! (perturb, restore, update) rewinds a [`SeededNormalStream`] to the step's
//! seed and walks the parameters in registration order.

use crate::error::{Error, Result};
use crate::rng::SeededNormalStream;

/// Whether a parameter block must stay non-negative after an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Free,
    NonNegative,
}

/// A set of trainable coordinates exposed as ordered blocks.
///
/// The visiting order is the registration order: it fixes which normal in the
/// stream drives which coordinate, so it must never change between calls.
pub trait Parameters {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64]));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_blocks(&mut |_, b| n += b.len());
        n
    }

    /// Copy out all coordinates in registration order.
    fn flatten(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_blocks(&mut |_, b| out.extend_from_slice(b));
        out
    }
}

impl Parameters for [f64] {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64])) {
        f(Constraint::Free, self)
    }
}

impl Parameters for Vec<f64> {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64])) {
        f(Constraint::Free, self)
    }
}

/// A vector whose coordinates are all quantization scales.
#[derive(Debug, Clone, PartialEq)]
pub struct Scales(pub Vec<f64>);

impl Parameters for Scales {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64])) {
        f(Constraint::NonNegative, &mut self.0)
    }
}

/// A flat vector with an explicit per-coordinate non-negativity mask.
pub struct Masked<'a> {
    pub values: &'a mut [f64],
    pub nonneg: &'a [bool],
}

impl Parameters for Masked<'_> {
    fn visit_blocks(&mut self, f: &mut dyn FnMut(Constraint, &mut [f64])) {
        assert_eq!(self.values.len(), self.nonneg.len(), "mask length");
        let mut rest = &mut self.values[..];
        let mut mask = self.nonneg;
        while !rest.is_empty() {
            let flag = mask[0];
            let run = mask.iter().take_while(|&&m| m == flag).count();
            let (head, tail) = rest.split_at_mut(run);
            f(if flag { Constraint::NonNegative } else { Constraint::Free }, head);
            rest = tail;
            mask = &mask[run..];
        }
    }
}

/// Seed and scale of one replayable perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    seed: u64,
    epsilon: f64,
}

impl PerturbSpec {
    pub fn new(seed: u64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "perturbation scale must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self { seed, epsilon })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The direction `z` this spec regenerates for `n` coordinates.
    pub fn direction(&self, n: usize) -> Vec<f64> {
        SeededNormalStream::new(self.seed).normals(n)
    }
}

/// Source of direction components, restarted before every pass.
pub(crate) trait Direction {
    fn restart(&mut self);
    fn next_component(&mut self) -> f64;
}

impl Direction for SeededNormalStream {
    fn restart(&mut self) {
        self.rewind();
    }

    fn next_component(&mut self) -> f64 {
        self.next_normal()
    }
}

fn apply_direction<P, D>(params: &mut P, dir: &mut D, step: f64)
where
    P: Parameters + ?Sized,
    D: Direction,
{
    dir.restart();
    params.visit_blocks(&mut |_, block| {
        for v in block {
            *v += step * dir.next_component();
        }
    });
}

fn restore<P: Parameters + ?Sized>(params: &mut P, snapshot: &[f64]) {
    let mut i = 0;
    params.visit_blocks(&mut |_, block| {
        block.copy_from_slice(&snapshot[i..i + block.len()]);
        i += block.len();
    });
}

/// `params_i += multiplier · ε · z_i`, with `z` regenerated from `spec.seed`.
pub fn perturb<P: Parameters + ?Sized>(params: &mut P, spec: PerturbSpec, multiplier: f64) {
    if multiplier == 0.0 {
        return;
    }
    let mut stream = SeededNormalStream::new(spec.seed);
    apply_direction(params, &mut stream, multiplier * spec.epsilon);
}

/// Outcome of one paired-probe estimate: `ĝ = d · z` with `z` recoverable from `spec`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub loss_plus: f64,
    pub loss_minus: f64,
    /// `(ℓ+ − ℓ−) / 2ε`.
    pub d: f64,
    pub spec: PerturbSpec,
}

impl Estimate {
    pub fn clipped(&self, threshold: f64) -> Result<DirectionalDerivative> {
        DirectionalDerivative::new(self.d, threshold)
    }

    /// Mean of the two probe losses.
    pub fn loss(&self) -> f64 {
        0.5 * (self.loss_plus + self.loss_minus)
    }
}

pub(crate) fn estimate_with<P, D, F>(params: &mut P, dir: &mut D, spec: PerturbSpec, mut loss: F) -> Result<Estimate>
where
    P: Parameters + ?Sized,
    D: Direction,
    F: FnMut(&P) -> f64,
{
    let eps = spec.epsilon;
    // The third leg of (+ε, −2ε, +ε) only telescopes back to within a few
    // ulps; copying the perturbed coordinates back makes the restore exact,
    // so a zero update leaves every bit unchanged.
    let snapshot = params.flatten();
    apply_direction(params, dir, eps);
    let loss_plus = loss(params);
    apply_direction(params, dir, -2.0 * eps);
    let loss_minus = loss(params);
    restore(params, &snapshot);
    let d = (loss_plus - loss_minus) / (2.0 * eps);
    if !(loss_plus.is_finite() && loss_minus.is_finite() && d.is_finite()) {
        return Err(Error::Divergence {
            loss_plus,
            loss_minus,
        });
    }
    Ok(Estimate {
        loss_plus,
        loss_minus,
        d,
        spec,
    })
}

/// SPSA: two forward passes at `θ ± εz`, parameters restored bit-exactly on return.
///
/// A non-finite loss from either pass, or a non-finite quotient, is reported as
/// [`Error::Divergence`]; the parameters are restored either way.
pub fn spsa_estimate<P, F>(params: &mut P, spec: PerturbSpec, loss: F) -> Result<Estimate>
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    let mut stream = SeededNormalStream::new(spec.seed);
    estimate_with(params, &mut stream, spec, loss)
}

/// Q-SPSA: the same protocol over a quantized parameter set, whose
/// non-negative blocks are the quantization scales.
///
/// Integer weights never appear in `params`; only scales (and any registered
/// un-quantized parts) are perturbed.
pub fn qspsa_estimate<P, F>(params: &mut P, spec: PerturbSpec, loss: F) -> Result<Estimate>
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    let mut bad = None;
    params.visit_blocks(&mut |c, block| {
        if c == Constraint::NonNegative && bad.is_none() {
            bad = block.iter().copied().find(|s| !(s.is_finite() && *s >= 0.0));
        }
    });
    if let Some(s) = bad {
        return Err(Error::InvalidArgument(format!(
            "quantization scales must be finite and non-negative before a probe, found {s}"
        )));
    }
    spsa_estimate(params, spec, loss)
}

/// Clamp `d` into `[-C, C]`. `C = ∞` disables clipping.
pub fn clip_directional(d: f64, threshold: f64) -> Result<f64> {
    if d.is_nan() {
        return Err(Error::NonFinite("directional derivative".into()));
    }
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clipping threshold must be non-negative, got {threshold}"
        )));
    }
    Ok(if d > threshold {
        threshold
    } else if d < -threshold {
        -threshold
    } else {
        d
    })
}

/// A directional derivative and its clipped counterpart under threshold `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalDerivative {
    pub value: f64,
    pub clipped: f64,
    pub threshold: f64,
}

impl DirectionalDerivative {
    pub fn new(value: f64, threshold: f64) -> Result<Self> {
        Ok(Self {
            value,
            clipped: clip_directional(value, threshold)?,
            threshold,
        })
    }

    pub fn was_clipped(&self) -> bool {
        self.clipped != self.value
    }
}

#[cfg(test)]
pub(crate) mod test_hooks {
    use super::*;

    /// A fixed direction, bypassing the seeded stream.
    pub struct FixedDirection {
        z: Vec<f64>,
        pos: usize,
    }

    impl FixedDirection {
        pub fn new(z: Vec<f64>) -> Self {
            Self { z, pos: 0 }
        }
    }

    impl Direction for FixedDirection {
        fn restart(&mut self) {
            self.pos = 0;
        }

        fn next_component(&mut self) -> f64 {
            let v = self.z[self.pos];
            self.pos += 1;
            v
        }
    }

    pub fn estimate_along<P, F>(params: &mut P, z: Vec<f64>, epsilon: f64, loss: F) -> Result<Estimate>
    where
        P: Parameters + ?Sized,
        F: FnMut(&P) -> f64,
    {
        let spec = PerturbSpec::new(0, epsilon)?;
        estimate_with(params, &mut FixedDirection::new(z), spec, loss)
    }
}
