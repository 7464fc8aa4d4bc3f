//! A single paired-probe estimate with every intermediate value exposed.

use crate::error::{Error, Result};
use crate::models::{Activation, Architecture, Dataset, Head, QuantizedModel};
use crate::quant::QuantLayer;
use crate::zo::{qspsa_estimate, Parameters, PerturbSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateReport {
    pub base_loss: f64,
    pub loss_plus: f64,
    pub loss_minus: f64,
    pub d: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub param_count: usize,
}

/// Estimate once for `layer` on the first `batch` rows of `dataset` (all rows
/// when `None`). Classification data uses cross-entropy, real targets MSE.
pub fn estimate_once(
    layer: QuantLayer,
    dataset: &Dataset,
    seed: u64,
    epsilon: f64,
    batch: Option<usize>,
) -> Result<EstimateReport> {
    let head = if dataset.targets().is_classification() {
        Head::SoftmaxCrossEntropy
    } else {
        Head::MeanSquaredError
    };
    if layer.in_dim() != dataset.dim() || layer.out_dim() != dataset.output_dim() {
        return Err(Error::shape(
            "estimate-once layer vs dataset",
            format!("{}x{}", dataset.output_dim(), dataset.dim()),
            format!("{}x{}", layer.out_dim(), layer.in_dim()),
        ));
    }
    let rows = batch.unwrap_or(dataset.len());
    if rows == 0 || rows > dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "batch of {rows} rows from a dataset of {}",
            dataset.len()
        )));
    }
    let idx: Vec<usize> = (0..rows).collect();
    let batch = dataset.batch(&idx);
    let mut model = QuantizedModel::new(vec![layer], Activation::Identity, head, Architecture::Feedforward)?;
    let base_loss = model.loss(&batch)?;
    let spec = PerturbSpec::new(seed, epsilon)?;
    let est = qspsa_estimate(&mut model, spec, |m| m.probe_loss(&batch))?;
    Ok(EstimateReport {
        base_loss,
        loss_plus: est.loss_plus,
        loss_minus: est.loss_minus,
        d: est.d,
        seed,
        epsilon,
        param_count: model.param_count(),
    })
}
