//! Clipping-threshold sweeps: one training run per (threshold, repeat).

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::config::{format_clip, RunConfig};
use super::train::{run, TrainOptions, TrainOutcome};

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub threshold: f64,
    /// Mean final primary metric over runs that did not collapse (NaN if all did).
    pub mean_metric: f64,
    /// Mean zero-shot metric over the same repeats.
    pub mean_zero_shot: f64,
    pub collapses: usize,
    /// Sample variance of every `d′` logged across the repeats.
    pub d_clipped_variance: f64,
    pub runs: Vec<TrainOutcome>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub metric: &'static str,
    pub rows: Vec<AblationRow>,
    pub warnings: Vec<String>,
}

/// Master seed of repeat `r` in a sweep rooted at `master_seed`.
pub fn repeat_seed(master_seed: u64, r: usize) -> u64 {
    derive_seed(master_seed, (1u64 << 63) | r as u64)
}

fn variance(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.len() < 2 {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

fn finite_mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Run `base` once per (threshold, repeat); repeats share seeds across thresholds.
///
/// Duplicate thresholds are dropped with a warning. Runs execute on scoped
/// threads; each is independent and deterministic, so results do not depend
/// on scheduling.
pub fn ablate_clipping(
    base: &RunConfig,
    thresholds: &[f64],
    repeats: usize,
    opts: &TrainOptions,
) -> Result<AblationReport> {
    if thresholds.is_empty() {
        return Err(Error::config("threshold list is empty"));
    }
    if repeats == 0 {
        return Err(Error::config("repeats must be at least 1"));
    }
    let mut warnings = Vec::new();
    let mut unique: Vec<f64> = Vec::new();
    for &c in thresholds {
        if !(c >= 0.0) {
            return Err(Error::config(format!("clipping threshold must be non-negative, got {c}")));
        }
        if unique.contains(&c) {
            warnings.push(format!("duplicate clipping threshold {} ignored", format_clip(c)));
        } else {
            unique.push(c);
        }
    }

    let jobs: Vec<RunConfig> = unique
        .iter()
        .flat_map(|&c| {
            (0..repeats).map(move |r| {
                let mut cfg = base.clone();
                cfg.train.clip_threshold = c;
                cfg.train.master_seed = repeat_seed(base.train.master_seed, r);
                cfg
            })
        })
        .collect();
    let results: Vec<Result<TrainOutcome>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs.iter().map(|cfg| s.spawn(move || run(cfg, opts))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let mut outcomes = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();

    let mut rows = Vec::with_capacity(unique.len());
    let mut metric = "test_accuracy";
    for &c in &unique {
        let runs: Vec<TrainOutcome> = outcomes.by_ref().take(repeats).collect();
        metric = runs[0].zero_shot.primary_name();
        rows.push(AblationRow {
            threshold: c,
            mean_metric: finite_mean(runs.iter().filter(|o| !o.collapsed()).map(|o| o.final_metrics.primary())),
            mean_zero_shot: finite_mean(runs.iter().map(|o| o.zero_shot.primary())),
            collapses: runs.iter().filter(|o| o.collapsed()).count(),
            d_clipped_variance: variance(runs.iter().flat_map(|o| o.log.clipped_derivatives().collect::<Vec<_>>())),
            runs,
        });
    }
    Ok(AblationReport { metric, rows, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        RunConfig::parse(
            "steps = 100\nlearning_rate = 1e-3\ngroup_size = 4\ndataset = two-gaussians:n=200,seed=2\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_threshold_keeps_zero_shot_metric() {
        let report = ablate_clipping(&base(), &[0.0], 2, &TrainOptions::default()).unwrap();
        let row = &report.rows[0];
        for run in &row.runs {
            assert_eq!(run.final_metrics, run.zero_shot);
        }
        assert_eq!(row.mean_metric, row.mean_zero_shot);
        assert_eq!(row.d_clipped_variance, 0.0);
    }

    #[test]
    fn duplicates_warn() {
        let report = ablate_clipping(&base(), &[0.0, 1.0, 0.0], 1, &TrainOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn clipped_variance_is_bounded() {
        let report = ablate_clipping(&base(), &[0.01, f64::INFINITY], 1, &TrainOptions::default()).unwrap();
        assert!(report.rows[0].d_clipped_variance <= 0.01 * 0.01 * 1.01);
        assert!(report.rows[0].d_clipped_variance <= report.rows[1].d_clipped_variance);
    }
}
