//! The QZO training loop: sample a batch and a seed, estimate along the scales,
//! clip, update, repeat.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::models::{build_model, BatchSampler, Batch, Dataset, QuantizedModel, Split};
use crate::optim::{min_scale, schedule_lr, zo_sgd_step, TrainConfig};
use crate::quant::format::write_layer;
use crate::rng::{derive_seed, RNG_ALGORITHM_ID};
use crate::zo::{clip_directional, qspsa_estimate, PerturbSpec};

use super::config::RunConfig;
use super::runlog::{EvalRecord, RunLog, StepRecord, RUNLOG_SCHEMA};

/// Stream index reserved for the batch sampler; step seeds use `1..=T`.
const SAMPLER_STREAM: u64 = u64::MAX;
/// Stream index for random model initialization.
const INIT_STREAM: u64 = 0;
/// Stream index for threshold-calibration pilots.
const CALIBRATION_STREAM: u64 = u64::MAX - 1;

/// Seed used for the perturbation at 1-based step `t`.
pub fn step_seed(master_seed: u64, t: usize) -> u64 {
    derive_seed(master_seed, t as u64)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Evaluate every this many steps in addition to the start and the end; 0 disables.
    pub eval_every: usize,
    /// Write 0 for every `wall_ms`, making the step log a pure function of the config.
    pub deterministic: bool,
}

/// Losses and, for classification, accuracies on both splits. Failed
/// evaluations (a collapsed model) show up as NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

impl Metrics {
    pub fn evaluate(model: &QuantizedModel, dataset: &Dataset) -> Self {
        let eval = |split| {
            let batch = dataset.split_batch(split);
            let loss = model.loss(&batch).unwrap_or(f64::NAN);
            let acc = dataset
                .targets()
                .is_classification()
                .then(|| model.accuracy(&batch).unwrap_or(f64::NAN));
            (loss, acc)
        };
        let (train_loss, train_accuracy) = eval(Split::Train);
        let (test_loss, test_accuracy) = eval(Split::Test);
        Self {
            train_loss,
            test_loss,
            train_accuracy,
            test_accuracy,
        }
    }

    /// Test accuracy for classifiers, test loss otherwise.
    pub fn primary(&self) -> f64 {
        self.test_accuracy.unwrap_or(self.test_loss)
    }

    pub fn primary_name(&self) -> &'static str {
        if self.test_accuracy.is_some() {
            "test_accuracy"
        } else {
            "test_loss"
        }
    }

    fn records(&self, step: usize) -> Vec<EvalRecord> {
        let mut out = vec![
            EvalRecord { step, split: "train", metric: "loss", value: self.train_loss },
            EvalRecord { step, split: "test", metric: "loss", value: self.test_loss },
        ];
        if let (Some(tr), Some(te)) = (self.train_accuracy, self.test_accuracy) {
            out.push(EvalRecord { step, split: "train", metric: "accuracy", value: tr });
            out.push(EvalRecord { step, split: "test", metric: "accuracy", value: te });
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub model: QuantizedModel,
    pub zero_shot: Metrics,
    pub final_metrics: Metrics,
    /// Smallest scale seen after any step (and at the start).
    pub min_scale: f64,
}

impl TrainOutcome {
    pub fn collapsed(&self) -> bool {
        self.log.collapsed()
    }

    /// Write the run log files and `layer_{i}.qzol` for every layer into `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.log.write_dir(dir)?;
        for (i, layer) in self.model.layers().iter().enumerate() {
            write_layer(dir.join(format!("layer_{i}.qzol")), layer)?;
        }
        Ok(())
    }
}

fn base_header() -> Vec<(String, String)> {
    vec![
        ("version".into(), env!("CARGO_PKG_VERSION").into()),
        ("rng".into(), RNG_ALGORITHM_ID.into()),
        ("schema".into(), RUNLOG_SCHEMA.into()),
    ]
}

/// Run `cfg.steps` QZO steps on `model`.
///
/// A non-finite probe loss or derivative marks the run collapsed and stops it;
/// that is an outcome, not an error.
pub fn train(
    mut model: QuantizedModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(
        dataset.indices(Split::Train).to_vec(),
        cfg.batch_size,
        derive_seed(cfg.master_seed, SAMPLER_STREAM),
    )
    .map_err(|e| Error::config(e.to_string()))?;
    let mut log = RunLog {
        header: base_header(),
        ..Default::default()
    };
    let zero_shot = Metrics::evaluate(&model, dataset);
    log.evals.extend(zero_shot.records(0));
    let mut lowest = min_scale(&mut model);
    let start = Instant::now();
    let elapsed = |deterministic: bool| {
        if deterministic {
            0
        } else {
            start.elapsed().as_millis() as u64
        }
    };

    for t in 1..=cfg.steps {
        let batch: Batch = dataset.batch(sampler.next_indices());
        let spec = PerturbSpec::new(step_seed(cfg.master_seed, t), cfg.epsilon)?;
        let lr = schedule_lr(cfg, t)?;
        let est = match qspsa_estimate(&mut model, spec, |m| m.probe_loss(&batch)) {
            Ok(est) => est,
            Err(Error::Divergence { loss_plus, loss_minus }) => {
                let d = (loss_plus - loss_minus) / (2.0 * cfg.epsilon);
                log.steps.push(StepRecord {
                    step: t,
                    loss: 0.5 * (loss_plus + loss_minus),
                    d,
                    d_clipped: clip_directional(d, cfg.clip_threshold).unwrap_or(f64::NAN),
                    lr,
                    wall_ms: elapsed(opts.deterministic),
                });
                log.collapsed_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };
        let d_clipped = clip_directional(est.d, cfg.clip_threshold)?;
        log.steps.push(StepRecord {
            step: t,
            loss: est.loss(),
            d: est.d,
            d_clipped,
            lr,
            wall_ms: elapsed(opts.deterministic),
        });
        if zo_sgd_step(&mut model, d_clipped, spec, lr).is_err() {
            log.collapsed_at = Some(t);
            break;
        }
        lowest = lowest.min(min_scale(&mut model));
        if opts.eval_every > 0 && t % opts.eval_every == 0 && t != cfg.steps {
            log.evals.extend(Metrics::evaluate(&model, dataset).records(t));
        }
    }

    let final_metrics = Metrics::evaluate(&model, dataset);
    let last = log.steps.last().map_or(0, |r| r.step);
    log.evals.extend(final_metrics.records(last));
    Ok(TrainOutcome {
        log,
        model,
        zero_shot,
        final_metrics,
        min_scale: lowest,
    })
}

/// The `q`-quantile of `|d|` over `pilot` estimates at the zero-shot model,
/// with batches and seeds independent of any training run.
pub fn calibrate_threshold(cfg: &RunConfig, pilot: usize, q: f64) -> Result<f64> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let mut model = build_model(cfg.model, &dataset, cfg.quant, derive_seed(cfg.train.master_seed, INIT_STREAM))?;
    let root = derive_seed(cfg.train.master_seed, CALIBRATION_STREAM);
    let mut sampler = BatchSampler::new(dataset.indices(Split::Train).to_vec(), cfg.train.batch_size, root)?;
    let mut ds = Vec::with_capacity(pilot);
    for k in 0..pilot {
        let batch = dataset.batch(sampler.next_indices());
        let spec = PerturbSpec::new(derive_seed(root, k as u64), cfg.train.epsilon)?;
        ds.push(qspsa_estimate(&mut model, spec, |m| m.probe_loss(&batch))?.d);
    }
    Ok(super::verify::quantile_abs(&ds, q))
}

/// Load the dataset, build the quantized zero-shot model, and train it.
pub fn run(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = cfg.dataset.load()?;
    let model = build_model(cfg.model, &dataset, cfg.quant, derive_seed(cfg.train.master_seed, INIT_STREAM))
        .map_err(|e| match e {
            Error::InvalidArgument(m) => Error::config(m),
            other => other,
        })?;
    let mut outcome = train(model, &dataset, &cfg.train, opts)?;
    outcome.log.header.push(("config".into(), cfg.to_text()));
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(clip: f64) -> RunConfig {
        RunConfig::parse(&format!(
            "steps = 200\nbatch_size = 16\nlearning_rate = 1e-3\nclip_threshold = {clip}\n\
             group_size = 4\nmaster_seed = 5\ndataset = two-gaussians:n=200,seed=1\n"
        ))
        .unwrap()
    }

    fn opts() -> TrainOptions {
        TrainOptions {
            deterministic: true,
            ..Default::default()
        }
    }

    #[test]
    fn zero_threshold_leaves_model_untouched() {
        let cfg = small_config(0.0);
        let ds = cfg.dataset.load().unwrap();
        let start = build_model(cfg.model, &ds, cfg.quant, derive_seed(5, INIT_STREAM)).unwrap();
        let out = run(&cfg, &opts()).unwrap();
        assert_eq!(out.model, start);
        assert!(out.log.steps.iter().all(|r| r.d_clipped == 0.0));
        assert_eq!(out.final_metrics, out.zero_shot);
    }

    #[test]
    fn every_record_is_clipped_consistently() {
        let cfg = small_config(0.05);
        let out = run(&cfg, &opts()).unwrap();
        assert_eq!(out.log.steps.len(), 200);
        for (i, r) in out.log.steps.iter().enumerate() {
            assert_eq!(r.step, i + 1);
            assert_eq!(r.d_clipped, r.d.clamp(-0.05, 0.05));
        }
        assert!(out.min_scale >= 0.0);
    }

    #[test]
    fn same_config_same_log() {
        let cfg = small_config(100.0);
        let a = run(&cfg, &opts()).unwrap();
        let b = run(&cfg, &opts()).unwrap();
        assert_eq!(a.log.steps_csv(), b.log.steps_csv());
        let mut other = cfg.clone();
        other.train.master_seed = 6;
        assert_ne!(run(&other, &opts()).unwrap().log.steps_csv(), a.log.steps_csv());
    }

    #[test]
    fn outputs_round_trip() {
        let cfg = small_config(100.0);
        let out = run(&cfg, &opts()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        out.write_outputs(dir.path()).unwrap();
        let layer = crate::quant::format::read_layer(dir.path().join("layer_0.qzol")).unwrap();
        assert_eq!(&layer, &out.model.layers()[0]);
        let header = std::fs::read_to_string(dir.path().join("run_header.txt")).unwrap();
        assert!(header.contains("config: steps = 200"));
        assert!(header.contains(RNG_ALGORITHM_ID));
    }
}
