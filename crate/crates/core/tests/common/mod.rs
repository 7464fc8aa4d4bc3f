//! Independent oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use qzo_core::rng::{SeededNormalStream, SplitMix64};

/// Distance in representable doubles between two finite values of the same sign.
pub fn ulp_distance(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    let key = |x: f64| {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    };
    key(a).abs_diff(key(b))
}

/// `L(θ) = ½ θᵀAθ + bᵀθ` with `A = MᵀM + I`, evaluated by nalgebra.
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub theta: Vec<f64>,
}

impl Quadratic {
    pub fn random(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let n = 2 + rng.below(63);
        let mut normal = SeededNormalStream::new(seed ^ 0xA5A5);
        let m = DMatrix::from_fn(n, n, |_, _| normal.next_normal());
        let a = m.transpose() * &m + DMatrix::identity(n, n);
        let b = DVector::from_fn(n, |_, _| normal.next_normal());
        let theta = (0..n).map(|_| normal.next_normal()).collect();
        Self { a, b, theta }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let t = DVector::from_column_slice(theta);
        0.5 * t.dot(&(&self.a * &t)) + self.b.dot(&t)
    }

    pub fn gradient(&self) -> Vec<f64> {
        let t = DVector::from_column_slice(&self.theta);
        (&self.a * t + &self.b).iter().copied().collect()
    }
}

/// Error of `d` against `zᵀg`, relative to the scale `‖z‖‖g‖` of a directional derivative.
pub fn directional_error(d: f64, z: &[f64], g: &[f64]) -> f64 {
    let zv = DVector::from_column_slice(z);
    let gv = DVector::from_column_slice(g);
    (d - zv.dot(&gv)).abs() / (zv.norm() * gv.norm())
}
