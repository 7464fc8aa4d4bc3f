//! Monte-Carlo checks of the clipped estimator: the mean of `d′·z` against the
//! analytic gradient, and the variance of `d′·z` against that of `d·z`.

use crate::error::{Error, Result};
use crate::models::{
    build_model, make_synthetic, Activation, Architecture, Batch, Dataset, Head, ModelSpec, QuantSettings,
    QuantizedModel, QuantizerKind, Split, SyntheticKind,
};
use crate::quant::quantize_scalar;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Matrix;
use crate::zo::{clip_directional, qspsa_estimate, Parameters, PerturbSpec};

/// Fewest Monte-Carlo draws the oracle accepts.
pub const MIN_SAMPLES: usize = 10_000;
/// Acceptance band, in standard errors.
pub const SE_BAND: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleProblem {
    /// Sum of outputs of one quantized layer over a fixed batch: linear in scales and biases.
    Linear,
    /// MSE of a quantized linear model on heavy-tailed features, fresh batch per draw.
    Stress,
    /// A two-layer model, which has no analytic oracle.
    Mlp,
}

impl std::str::FromStr for OracleProblem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(OracleProblem::Linear),
            "stress" | "heavy-tailed" => Ok(OracleProblem::Stress),
            "mlp" => Ok(OracleProblem::Mlp),
            other => Err(Error::config(format!("unknown oracle problem {other:?}"))),
        }
    }
}

/// Clipping threshold: fixed (possibly infinite) or a quantile of the observed `|d|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipSpec {
    Fixed(f64),
    Quantile(f64),
}

impl std::str::FromStr for ClipSpec {
    type Err = Error;

    /// `inf`, a non-negative number, or `p<percent>` such as `p90`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(p) = s.strip_prefix('p') {
            return p
                .parse::<f64>()
                .ok()
                .filter(|p| (0.0..=100.0).contains(p))
                .map(|p| ClipSpec::Quantile(p / 100.0))
                .ok_or_else(|| Error::config(format!("bad percentile {s:?}")));
        }
        let c = match s {
            "inf" | "infinity" | "none" => f64::INFINITY,
            _ => s.parse::<f64>().map_err(|_| Error::config(format!("bad clipping threshold {s:?}")))?,
        };
        if !(c >= 0.0) {
            return Err(Error::config(format!("clipping threshold must be non-negative, got {s:?}")));
        }
        Ok(ClipSpec::Fixed(c))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyConfig {
    pub problem: OracleProblem,
    pub samples: usize,
    pub clip: ClipSpec,
    pub epsilon: f64,
    pub seed: u64,
    /// Batch size for problems that resample data per draw.
    pub batch_size: usize,
}

impl VerifyConfig {
    pub fn new(problem: OracleProblem, samples: usize, clip: ClipSpec) -> Self {
        Self {
            problem,
            samples,
            clip,
            epsilon: 1e-3,
            seed: 0,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateStat {
    pub analytic: f64,
    pub mean: f64,
    pub std_error: f64,
}

impl CoordinateStat {
    pub fn bias(&self) -> f64 {
        self.mean - self.analytic
    }

    pub fn within_band(&self) -> bool {
        self.bias().abs() <= SE_BAND * self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceStat {
    pub clipped: f64,
    pub raw: f64,
    /// Standard error of `clipped − raw`, from the paired per-draw differences.
    pub diff_std_error: f64,
}

impl VarianceStat {
    /// `Var[d′z] ≤ Var[dz]` up to the acceptance band.
    pub fn ordered(&self) -> bool {
        self.clipped - self.raw <= SE_BAND * self.diff_std_error
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub problem: OracleProblem,
    pub samples: usize,
    pub threshold: f64,
    /// Fraction of draws whose `|d|` exceeded the threshold.
    pub clipped_fraction: f64,
    pub coords: Vec<CoordinateStat>,
    pub variance: Vec<VarianceStat>,
}

impl VerifyReport {
    /// Unbiasedness is only claimed when no draw was clipped.
    pub fn bias_expected(&self) -> bool {
        self.clipped_fraction > 0.0
    }

    pub fn unbiased(&self) -> bool {
        self.coords.iter().all(CoordinateStat::within_band)
    }

    pub fn variance_ordered(&self) -> bool {
        self.variance.iter().all(VarianceStat::ordered)
    }

    /// Passes when the variance ordering holds and, absent clipping, every
    /// coordinate of the mean sits within the band.
    pub fn passed(&self) -> bool {
        self.variance_ordered() && (self.bias_expected() || self.unbiased())
    }
}

/// A problem instance: parameters, a per-draw loss, and the exact expected gradient.
struct Problem {
    model: QuantizedModel,
    gradient: Vec<f64>,
    fixed: Option<Batch>,
    train: Option<(Dataset, usize)>,
}

impl Problem {
    fn build(cfg: &VerifyConfig) -> Result<Self> {
        match cfg.problem {
            OracleProblem::Linear => {
                let ds = make_synthetic(SyntheticKind::LinearRegression, 20, 0.1, derive_seed(cfg.seed, 1))?;
                let w = Matrix::new(
                    3,
                    ds.dim(),
                    crate::rng::SeededNormalStream::new(derive_seed(cfg.seed, 2)).normals(3 * ds.dim()),
                )?;
                let layer = crate::quant::QuantLayer::from(quantize_scalar(&w, 4, 4)?).with_bias(vec![0.1, -0.2, 0.3])?;
                let model = QuantizedModel::new(vec![layer], Activation::Identity, Head::OutputSum, Architecture::Feedforward)?;
                let batch = ds.split_batch(Split::Train);
                let gradient = model.analytic_gradient(&batch)?;
                Ok(Self {
                    model,
                    gradient,
                    fixed: Some(batch),
                    train: None,
                })
            }
            OracleProblem::Stress => {
                let ds = make_synthetic(SyntheticKind::HeavyTailed, 1000, 0.1, derive_seed(cfg.seed, 1))?;
                let q = QuantSettings {
                    kind: QuantizerKind::Scalar,
                    bits: 4,
                    group_size: 4,
                };
                let model = build_model(ModelSpec::Linear, &ds, q, 0)?;
                // Batches are drawn uniformly with replacement, so the expected
                // batch gradient is the full-split gradient.
                let gradient = model.analytic_gradient(&ds.split_batch(Split::Train))?;
                Ok(Self {
                    model,
                    gradient,
                    fixed: None,
                    train: Some((ds, cfg.batch_size)),
                })
            }
            OracleProblem::Mlp => {
                let ds = make_synthetic(SyntheticKind::TwoGaussians, 100, 1.0, derive_seed(cfg.seed, 1))?;
                let q = QuantSettings {
                    kind: QuantizerKind::Scalar,
                    bits: 4,
                    group_size: 4,
                };
                let model = build_model(ModelSpec::Mlp { hidden: 16 }, &ds, q, 0)?;
                model.analytic_gradient(&ds.split_batch(Split::Train))?;
                unreachable!("multi-layer models have no analytic oracle")
            }
        }
    }

    fn batch_for(&self, draw_seed: u64) -> std::borrow::Cow<'_, Batch> {
        match (&self.fixed, &self.train) {
            (Some(b), _) => std::borrow::Cow::Borrowed(b),
            (None, Some((ds, size))) => {
                let pool = ds.indices(Split::Train);
                let mut rng = SplitMix64::new(derive_seed(draw_seed, 1));
                let idx: Vec<usize> = (0..*size).map(|_| pool[rng.below(pool.len())]).collect();
                std::borrow::Cow::Owned(ds.batch(&idx))
            }
            _ => unreachable!("problem has a data source"),
        }
    }
}

/// Draw `M` seeds, estimate once per seed, and compare the sample mean of
/// `d′·z` with the analytic gradient coordinate by coordinate.
pub fn verify_unbiased(cfg: &VerifyConfig) -> Result<VerifyReport> {
    if cfg.samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "sample count too small: {} < {MIN_SAMPLES}",
            cfg.samples
        )));
    }
    let mut problem = Problem::build(cfg)?;
    let n = problem.model.param_count();
    let draw_seed = |m: usize| derive_seed(cfg.seed ^ 0x5EED_0000, m as u64);

    let mut ds = Vec::with_capacity(cfg.samples);
    for m in 0..cfg.samples {
        let seed = draw_seed(m);
        let batch = problem.batch_for(seed).into_owned();
        let spec = PerturbSpec::new(seed, cfg.epsilon)?;
        let est = qspsa_estimate(&mut problem.model, spec, |p| p.probe_loss(&batch))?;
        ds.push(est.d);
    }
    let threshold = match cfg.clip {
        ClipSpec::Fixed(c) => c,
        ClipSpec::Quantile(q) => quantile_abs(&ds, q),
    };

    let mut sum_a = vec![0.0; n];
    let mut sum_b = vec![0.0; n];
    let mut clipped_count = 0usize;
    let products = |pass: &mut dyn FnMut(usize, f64, f64)| -> Result<()> {
        for (m, &d) in ds.iter().enumerate() {
            let dc = clip_directional(d, threshold)?;
            let z = PerturbSpec::new(draw_seed(m), cfg.epsilon)?.direction(n);
            for (i, zi) in z.iter().enumerate() {
                pass(i, dc * zi, d * zi);
            }
        }
        Ok(())
    };
    products(&mut |i, a, b| {
        sum_a[i] += a;
        sum_b[i] += b;
    })?;
    let mf = cfg.samples as f64;
    let mean_a: Vec<f64> = sum_a.iter().map(|s| s / mf).collect();
    let mean_b: Vec<f64> = sum_b.iter().map(|s| s / mf).collect();
    let mut sq_a = vec![0.0; n];
    let mut sq_b = vec![0.0; n];
    let mut sum_u = vec![0.0; n];
    let mut sq_u = vec![0.0; n];
    products(&mut |i, a, b| {
        let da = (a - mean_a[i]) * (a - mean_a[i]);
        let db = (b - mean_b[i]) * (b - mean_b[i]);
        sq_a[i] += da;
        sq_b[i] += db;
        sum_u[i] += da - db;
        sq_u[i] += (da - db) * (da - db);
    })?;
    for &d in &ds {
        clipped_count += usize::from(d.abs() > threshold);
    }

    let coords = (0..n)
        .map(|i| CoordinateStat {
            analytic: problem.gradient[i],
            mean: mean_a[i],
            std_error: (sq_a[i] / (mf - 1.0)).sqrt() / mf.sqrt(),
        })
        .collect();
    let variance = (0..n)
        .map(|i| {
            let mu = sum_u[i] / mf;
            let var_u = (sq_u[i] / mf - mu * mu).max(0.0) * mf / (mf - 1.0);
            VarianceStat {
                clipped: sq_a[i] / (mf - 1.0),
                raw: sq_b[i] / (mf - 1.0),
                diff_std_error: (var_u / mf).sqrt(),
            }
        })
        .collect();
    Ok(VerifyReport {
        problem: cfg.problem,
        samples: cfg.samples,
        threshold,
        clipped_fraction: clipped_count as f64 / mf,
        coords,
        variance,
    })
}

/// Empirical quantile of `|values|` (nearest rank).
pub fn quantile_abs(values: &[f64], q: f64) -> f64 {
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    if abs.is_empty() {
        return 0.0;
    }
    abs.sort_by(f64::total_cmp);
    let rank = ((q * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    abs[rank - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sample_count_is_refused() {
        let e = verify_unbiased(&VerifyConfig::new(OracleProblem::Linear, 1, ClipSpec::Fixed(f64::INFINITY)))
            .unwrap_err();
        assert!(e.to_string().contains("sample count too small"), "{e}");
    }

    #[test]
    fn mlp_has_no_oracle() {
        let e = verify_unbiased(&VerifyConfig::new(OracleProblem::Mlp, MIN_SAMPLES, ClipSpec::Fixed(1.0)))
            .unwrap_err();
        assert!(matches!(e, Error::OracleUnavailable(_)));
    }

    #[test]
    fn clip_spec_parsing() {
        assert_eq!("inf".parse::<ClipSpec>().unwrap(), ClipSpec::Fixed(f64::INFINITY));
        assert_eq!("p90".parse::<ClipSpec>().unwrap(), ClipSpec::Quantile(0.9));
        assert_eq!("2.5".parse::<ClipSpec>().unwrap(), ClipSpec::Fixed(2.5));
        assert!("-1".parse::<ClipSpec>().is_err());
        assert!("p120".parse::<ClipSpec>().is_err());
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(|i| -(i as f64)).collect();
        assert_eq!(quantile_abs(&v, 0.9), 9.0);
        assert_eq!(quantile_abs(&v, 1.0), 10.0);
        assert_eq!(quantile_abs(&v, 0.0), 1.0);
    }

    #[test]
    fn linear_problem_is_unbiased() {
        let report = verify_unbiased(&VerifyConfig::new(
            OracleProblem::Linear,
            MIN_SAMPLES,
            ClipSpec::Fixed(f64::INFINITY),
        ))
        .unwrap();
        assert_eq!(report.clipped_fraction, 0.0);
        assert!(report.unbiased(), "{:?}", report.coords);
        assert!(report.passed());
    }
}
