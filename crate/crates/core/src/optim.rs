//! Zeroth-order SGD with non-negative scale projection.

use crate::error::{Error, Result};
use crate::rng::SeededNormalStream;
use crate::zo::{Constraint, Parameters, PerturbSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    #[default]
    Constant,
    LinearDecay,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" | "linear-decay" => Ok(LrSchedule::LinearDecay),
            other => Err(Error::config(format!("unknown lr_schedule {other:?}"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::LinearDecay => "linear-decay",
        })
    }
}

/// Optimization hyperparameters. `clip_threshold = f64::INFINITY` disables clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub master_seed: u64,
    pub lr_schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-7,
            steps: 20_000,
            batch_size: 16,
            epsilon: 1e-3,
            clip_threshold: 100.0,
            master_seed: 0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.clip_threshold >= 0.0) {
            return Err(Error::config("clip_threshold must be non-negative"));
        }
        Ok(())
    }

    pub fn clipping_enabled(&self) -> bool {
        self.clip_threshold.is_finite()
    }
}

/// Learning rate at step `t` (1-based).
///
/// Linear decay is `η · (1 − (t − 1)/T)`, which is `η` at the first step and
/// still positive at the last.
pub fn schedule_lr(config: &TrainConfig, t: usize) -> Result<f64> {
    if t == 0 || t > config.steps {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            config.steps
        )));
    }
    Ok(match config.lr_schedule {
        LrSchedule::Constant => config.learning_rate,
        LrSchedule::LinearDecay => {
            config.learning_rate * (1.0 - (t - 1) as f64 / config.steps as f64)
        }
    })
}

/// `params_i ← params_i − η · d′ · z_i`, then `max(·, 0)` on non-negative blocks.
///
/// `z` is regenerated from `spec.seed` in registration order, so `spec` must be
/// the one used by the matching estimate. A zero step leaves every bit unchanged.
pub fn zo_sgd_step<P: Parameters + ?Sized>(
    params: &mut P,
    d_clipped: f64,
    spec: PerturbSpec,
    learning_rate: f64,
) -> Result<()> {
    let step = learning_rate * d_clipped;
    if !step.is_finite() {
        return Err(Error::NonFinite(format!(
            "update step η·d′ = {learning_rate}·{d_clipped}"
        )));
    }
    if step == 0.0 {
        return Ok(());
    }
    let mut stream = SeededNormalStream::new(spec.seed());
    params.visit_blocks(&mut |constraint, block| {
        for v in block.iter_mut() {
            *v -= step * stream.next_normal();
        }
        if constraint == Constraint::NonNegative {
            for v in block.iter_mut() {
                *v = v.max(0.0);
            }
        }
    });
    Ok(())
}

/// Smallest value across all non-negative blocks (`+∞` if there are none).
pub fn min_scale<P: Parameters + ?Sized>(params: &mut P) -> f64 {
    let mut m = f64::INFINITY;
    params.visit_blocks(&mut |c, b| {
        if c == Constraint::NonNegative {
            m = b.iter().copied().fold(m, f64::min);
        }
    });
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zo::{Masked, Scales};

    fn spec(seed: u64) -> PerturbSpec {
        PerturbSpec::new(seed, 1e-3).unwrap()
    }

    #[test]
    fn zero_step_is_bit_exact() {
        let mut v: Vec<f64> = vec![0.5, -0.0, 1e-310];
        let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        zo_sgd_step(&mut v, 0.0, spec(1), 0.1).unwrap();
        zo_sgd_step(&mut v, -0.0, spec(1), 0.1).unwrap();
        assert_eq!(v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), bits);
    }

    #[test]
    fn masked_scale_is_projected_to_zero() {
        // Pick d′ so that η·d′·z₀ = 0.02 for the stream's first normal.
        let s = spec(8);
        let z0 = s.direction(1)[0];
        let lr = 0.5;
        let d = 0.02 / (lr * z0);
        let mut scales = Scales(vec![0.01]);
        zo_sgd_step(&mut scales, d, s, lr).unwrap();
        assert_eq!(scales.0, vec![0.0]);

        let mut free = vec![0.01];
        zo_sgd_step(&mut free, d, s, lr).unwrap();
        assert!((free[0] + 0.01).abs() < 1e-15);
    }

    #[test]
    fn mask_only_projects_flagged_coordinates() {
        let s = spec(8);
        let z = s.direction(2);
        let lr = 1.0;
        let d = 1.0 / z[0];
        let mut values = vec![0.0, 0.0];
        let mask = [true, false];
        zo_sgd_step(&mut Masked { values: &mut values, nonneg: &mask }, d, s, lr).unwrap();
        assert_eq!(values[0], 0.0);
        assert_eq!(values[1], -d * z[1]);
    }

    #[test]
    fn opposite_steps_cancel() {
        let start: Vec<f64> = (0..64).map(|i| 0.1 + i as f64 * 0.37).collect();
        let mut v = start.clone();
        zo_sgd_step(&mut v, 3.7, spec(77), 1e-3).unwrap();
        zo_sgd_step(&mut v, -3.7, spec(77), 1e-3).unwrap();
        for (a, b) in v.iter().zip(&start) {
            let ulp = f64::EPSILON * b.abs();
            assert!((a - b).abs() <= 2.0 * ulp, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_step_rejected() {
        let mut v = vec![1.0];
        assert!(zo_sgd_step(&mut v, f64::INFINITY, spec(1), 1.0).is_err());
        assert!(zo_sgd_step(&mut v, 1e300, spec(1), 1e300).is_err());
    }

    #[test]
    fn schedules() {
        let mut c = TrainConfig::default();
        assert_eq!(schedule_lr(&c, 1).unwrap(), 1e-7);
        assert_eq!(schedule_lr(&c, 12345).unwrap(), 1e-7);
        c.lr_schedule = LrSchedule::LinearDecay;
        assert_eq!(schedule_lr(&c, 1).unwrap(), 1e-7);
        assert!((schedule_lr(&c, 10001).unwrap() - 5e-8).abs() < 1e-22);
        assert!((schedule_lr(&c, 10002).unwrap() - 4.9995e-8).abs() < 1e-22);
        assert!(schedule_lr(&c, c.steps).unwrap() > 0.0);
        assert!(schedule_lr(&c, 0).is_err());
        assert!(schedule_lr(&c, c.steps + 1).is_err());
    }

    #[test]
    fn defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epsilon, c.clip_threshold, c.batch_size, c.steps), (1e-7, 1e-3, 100.0, 16, 20_000));
        c.validate().unwrap();
        assert!(TrainConfig { steps: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { clip_threshold: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { clip_threshold: f64::INFINITY, ..c }.validate().is_ok());
    }
}
