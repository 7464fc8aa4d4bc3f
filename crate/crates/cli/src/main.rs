use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use qzo_core::harness::{
    ablate_clipping, account_memory, calibrate_threshold, estimate_once, format_clip, parse_param_count, round_sig,
    run, verify_unbiased, ClipSpec, DatasetSpec, OracleProblem, RunConfig, TrainOptions, VerifyConfig, GB,
};
use qzo_core::models::{ModelSpec, QuantSettings, QuantizerKind};
use qzo_core::quant::format::{read_layer, write_layer};
use qzo_core::quant::{quantize_codebook, quantize_scalar, read_weights_csv, QuantLayer};

const EXIT_CONFIG: u8 = 2;
const EXIT_COLLAPSED: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "qzo", version, about = "Zeroth-order fine-tuning of quantized models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune the quantization scales of a model and write logs and layer files.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's dataset.
        #[arg(long)]
        dataset: Option<String>,
        /// Override the config's model.
        #[arg(long)]
        model: Option<String>,
        /// Override the config's clipping threshold (`inf` disables clipping).
        #[arg(long)]
        clip: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate every N steps as well as at the start and the end.
        #[arg(long, default_value_t = 0)]
        eval_every: usize,
        /// Log wall_ms as 0 so identical configs give identical logs.
        #[arg(long)]
        deterministic: bool,
    },
    /// Sweep clipping thresholds; collapsed runs are counted, not errors.
    AblateClipping {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated thresholds, e.g. `0,1,10,100,inf`.
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo check of the estimator mean and variance against an analytic gradient.
    VerifyUnbiased {
        /// `linear` or `stress`.
        #[arg(long)]
        problem: String,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        /// `inf`, a number, or a percentile of |d| such as `p90`.
        #[arg(long, default_value = "inf")]
        clip: String,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Print every coordinate rather than a summary.
        #[arg(long)]
        verbose: bool,
    },
    /// Component memory arithmetic for fine-tuning modes.
    AccountMemory {
        /// Parameter count, e.g. `7e9` or `7B`.
        #[arg(long)]
        params: String,
        /// Comma-separated modes: finetune-bf16-adamw16, finetune-bf16-adamw32,
        /// finetune-bf16-sgd, mezo-bf16, qzo-<2|3|4|8>bit.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "finetune-bf16-adamw16,finetune-bf16-adamw32,finetune-bf16-sgd,mezo-bf16,qzo-4bit,qzo-2bit"
        )]
        modes: Vec<String>,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
    },
    /// One paired-probe estimate on a stored layer; the file is only read.
    EstimateOnce {
        #[arg(long)]
        layer: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        /// Use the first N rows; default is every row.
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Quantize a headerless weights CSV (one output row per line) into a layer file.
    Quantize {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long, default_value_t = 128)]
        group_size: usize,
        /// `scalar` or `codebook`.
        #[arg(long, default_value = "scalar")]
        quantizer: String,
        /// Optional bias, one value per output row.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        bias: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantile of |d| over pilot estimates at the zero-shot model.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 500)]
        pilot: usize,
        #[arg(long, default_value_t = 0.9)]
        quantile: f64,
    },
}

fn parse_clip(s: &str) -> Result<f64> {
    match s.parse::<ClipSpec>()? {
        ClipSpec::Fixed(c) => Ok(c),
        ClipSpec::Quantile(_) => bail!(qzo_core::Error::InvalidArgument(format!(
            "percentile threshold {s:?} is only accepted by verify-unbiased; use `qzo calibrate`"
        ))),
    }
}

fn cmd_train(
    config: PathBuf,
    dataset: Option<String>,
    model: Option<String>,
    clip: Option<String>,
    out: PathBuf,
    eval_every: usize,
    deterministic: bool,
) -> Result<u8> {
    let mut cfg = RunConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(d) = dataset {
        cfg.dataset = d.parse::<DatasetSpec>()?;
    }
    if let Some(m) = model {
        cfg.model = m.parse::<ModelSpec>()?;
    }
    if let Some(c) = clip {
        cfg.train.clip_threshold = parse_clip(&c)?;
    }
    let outcome = run(
        &cfg,
        &TrainOptions {
            eval_every,
            deterministic,
        },
    )?;
    outcome
        .write_outputs(&out)
        .with_context(|| format!("writing outputs to {}", out.display()))?;
    let z = outcome.zero_shot;
    let f = outcome.final_metrics;
    println!("zero-shot {} = {:.4}", z.primary_name(), z.primary());
    println!("final     {} = {:.4}", f.primary_name(), f.primary());
    println!("min scale = {:e}", outcome.min_scale);
    println!("wrote {}", out.display());
    if let Some(step) = outcome.log.collapsed_at {
        eprintln!("run collapsed at step {step}: non-finite loss or directional derivative");
        return Ok(EXIT_COLLAPSED);
    }
    Ok(0)
}

fn cmd_ablate(config: PathBuf, thresholds: Vec<String>, repeats: usize, out: Option<PathBuf>) -> Result<u8> {
    let cfg = RunConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
    let cs = thresholds.iter().map(|s| parse_clip(s)).collect::<Result<Vec<f64>>>()?;
    let report = ablate_clipping(&cfg, &cs, repeats, &TrainOptions::default())?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut csv = format!("C,mean_{m},mean_zero_shot_{m},collapses,runs,var_d_clipped\n", m = report.metric);
    println!(
        "{:>10}  {:>14}  {:>14}  {:>9}  {:>14}",
        "C",
        report.metric,
        "zero-shot",
        "collapses",
        "Var[d']"
    );
    for row in &report.rows {
        println!(
            "{:>10}  {:>14.4}  {:>14.4}  {:>5}/{:<3}  {:>14.4e}",
            format_clip(row.threshold),
            row.mean_metric,
            row.mean_zero_shot,
            row.collapses,
            row.runs.len(),
            row.d_clipped_variance
        );
        csv.push_str(&format!(
            "{},{:e},{:e},{},{},{:e}\n",
            format_clip(row.threshold),
            row.mean_metric,
            row.mean_zero_shot,
            row.collapses,
            row.runs.len(),
            row.d_clipped_variance
        ));
    }
    if let Some(path) = out {
        std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_verify(
    problem: String,
    samples: usize,
    clip: String,
    epsilon: f64,
    seed: u64,
    batch_size: usize,
    verbose: bool,
) -> Result<u8> {
    let mut cfg = VerifyConfig::new(problem.parse::<OracleProblem>()?, samples, clip.parse::<ClipSpec>()?);
    cfg.epsilon = epsilon;
    cfg.seed = seed;
    cfg.batch_size = batch_size;
    let report = verify_unbiased(&cfg)?;
    println!(
        "problem {problem}, M = {}, C = {}, clipped fraction = {:.4}",
        report.samples,
        format_clip(report.threshold),
        report.clipped_fraction
    );
    println!(
        "{:>5}  {:>13}  {:>13}  {:>11}  {:>8}  {:>13}  {:>13}  {:>11}  {:>7}",
        "coord", "analytic", "mean d'z", "SE", "bias/SE", "Var[d'z]", "Var[dz]", "SE(diff)", "ordered"
    );
    for (i, (c, v)) in report.coords.iter().zip(&report.variance).enumerate() {
        if verbose || i < 12 {
            println!(
                "{i:>5}  {:>13.6e}  {:>13.6e}  {:>11.3e}  {:>8.2}  {:>13.6e}  {:>13.6e}  {:>11.3e}  {:>7}",
                c.analytic,
                c.mean,
                c.std_error,
                c.bias() / c.std_error,
                v.clipped,
                v.raw,
                v.diff_std_error,
                v.ordered()
            );
        }
    }
    if !verbose && report.coords.len() > 12 {
        println!("... {} more coordinates (use --verbose)", report.coords.len() - 12);
    }
    let unbiased = report.unbiased();
    if report.bias_expected() {
        println!(
            "mean within 3 SE on every coordinate: {unbiased} (informational: clipping biases the estimate)"
        );
    } else {
        println!("mean within 3 SE on every coordinate: {unbiased}");
    }
    println!("Var[d'z] <= Var[dz] within 3 SE on every coordinate: {}", report.variance_ordered());
    Ok(if report.passed() { 0 } else { EXIT_VERIFY_FAILED })
}

fn cmd_memory(params: String, modes: Vec<String>, group_size: usize) -> Result<u8> {
    let n = parse_param_count(&params)?;
    let rows = account_memory(n, &modes, group_size)?;
    let gb = |b: f64| b / GB;
    println!("N = {n:e} parameters, group size {group_size}, 1 GB = 1e9 bytes");
    println!(
        "{:<24} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8}",
        "mode", "weights", "gradients", "optimizer", "scales", "total", "ratio"
    );
    for r in &rows {
        let b = r.breakdown;
        println!(
            "{:<24} {:>10} {:>10} {:>10} {:>10} {:>10} {:>7}x",
            r.mode,
            round_sig(gb(b.weights), 3),
            round_sig(gb(b.gradients), 3),
            round_sig(gb(b.optimizer), 3),
            round_sig(gb(b.scales), 3),
            round_sig(gb(b.total()), 3),
            round_sig(r.ratio, 3)
        );
    }
    println!("ratio = {} total / mode total", qzo_core::harness::REFERENCE_MODE);
    Ok(0)
}

fn cmd_estimate(layer: PathBuf, dataset: String, seed: u64, epsilon: f64, batch: Option<usize>) -> Result<u8> {
    let q = read_layer(&layer).with_context(|| format!("reading {}", layer.display()))?;
    let ds = dataset.parse::<DatasetSpec>()?.load()?;
    let r = estimate_once(q, &ds, seed, epsilon, batch)?;
    println!("seed        = {}", r.seed);
    println!("epsilon     = {:e}", r.epsilon);
    println!("parameters  = {}", r.param_count);
    println!("loss        = {:e}", r.base_loss);
    println!("loss_plus   = {:e}", r.loss_plus);
    println!("loss_minus  = {:e}", r.loss_minus);
    println!("d           = {:e}", r.d);
    Ok(0)
}

fn cmd_quantize(
    weights: PathBuf,
    bits: u8,
    group_size: usize,
    quantizer: String,
    bias: Option<Vec<f64>>,
    out: PathBuf,
) -> Result<u8> {
    let w = read_weights_csv(&weights).with_context(|| format!("reading {}", weights.display()))?;
    let q = QuantSettings {
        kind: quantizer.parse::<QuantizerKind>()?,
        bits,
        group_size,
    };
    let mut layer: QuantLayer = match q.kind {
        QuantizerKind::Scalar => quantize_scalar(&w, bits, group_size)?.into(),
        QuantizerKind::Codebook => {
            quantize_codebook(&w, bits, group_size, qzo_core::models::CODEBOOK_ITERS)?.into()
        }
    };
    if let Some(b) = bias {
        layer = layer.with_bias(b)?;
    }
    write_layer(&out, &layer).with_context(|| format!("writing {}", out.display()))?;
    let recon = layer.dequantize();
    let mse = w
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / w.data().len() as f64;
    println!(
        "{}x{} {} layer, {} scales, reconstruction MSE {:e}",
        layer.out_dim(),
        layer.in_dim(),
        q.kind,
        layer.scales().len(),
        mse
    );
    println!("wrote {} ({} bytes)", out.display(), std::fs::metadata(&out)?.len());
    Ok(0)
}

fn cmd_calibrate(config: PathBuf, pilot: usize, quantile: f64) -> Result<u8> {
    if pilot == 0 || !(0.0..=1.0).contains(&quantile) {
        bail!(qzo_core::Error::InvalidArgument(
            "pilot must be positive and quantile within [0, 1]".into()
        ));
    }
    let cfg = RunConfig::from_file(&config).with_context(|| format!("reading {}", config.display()))?;
    println!("{:e}", calibrate_threshold(&cfg, pilot, quantile)?);
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train {
            config,
            dataset,
            model,
            clip,
            out,
            eval_every,
            deterministic,
        } => cmd_train(config, dataset, model, clip, out, eval_every, deterministic),
        Command::AblateClipping {
            config,
            thresholds,
            repeats,
            out,
        } => cmd_ablate(config, thresholds, repeats, out),
        Command::VerifyUnbiased {
            problem,
            samples,
            clip,
            epsilon,
            seed,
            batch_size,
            verbose,
        } => cmd_verify(problem, samples, clip, epsilon, seed, batch_size, verbose),
        Command::AccountMemory {
            params,
            modes,
            group_size,
        } => cmd_memory(params, modes, group_size),
        Command::EstimateOnce {
            layer,
            dataset,
            seed,
            epsilon,
            batch,
        } => cmd_estimate(layer, dataset, seed, epsilon, batch),
        Command::Quantize {
            weights,
            bits,
            group_size,
            quantizer,
            bias,
            out,
        } => cmd_quantize(weights, bits, group_size, quantizer, bias, out),
        Command::Calibrate {
            config,
            pilot,
            quantile,
        } => cmd_calibrate(config, pilot, quantile),
    }
}

/// Config and input problems exit 2; anything else 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    use qzo_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(e) if e.is_config_error() => EXIT_CONFIG,
        Some(
            E::Csv { .. }
            | E::MissingColumn(_)
            | E::EmptyDataset
            | E::OracleUnavailable(_)
            | E::ShapeMismatch { .. }
            | E::Format(_)
            | E::Io(_),
        ) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
