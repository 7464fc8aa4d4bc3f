//! Forward-only quantized models, losses, and datasets.

mod data;
mod model;
mod zoo;

pub use data::{
    load_csv, make_synthetic, Batch, BatchSampler, CsvSchema, Dataset, LabelKind, Split, SyntheticKind, Targets,
    SYNTHETIC_DIM,
};
pub use model::{Activation, Architecture, Head, QuantizedModel};
pub use zoo::{
    build_model, centroid_classifier, quantize_layer, ridge_regression, ModelSpec, QuantSettings, QuantizerKind,
    CODEBOOK_ITERS,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_scalar, QuantLayer, QuantizedLinear};
    use crate::tensor::Matrix;
    use crate::zo::Parameters;

    fn regression_batch(x: &[&[f64]], y: &[f64]) -> Batch {
        let rows: Vec<Vec<f64>> = x.iter().map(|r| r.to_vec()).collect();
        Batch {
            features: Matrix::from_rows(&rows).unwrap(),
            targets: Targets::Values(Matrix::new(y.len(), 1, y.to_vec()).unwrap()),
        }
    }

    fn one_layer(layer: QuantLayer, head: Head) -> QuantizedModel {
        QuantizedModel::new(vec![layer], Activation::Identity, head, Architecture::Feedforward).unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_mse() {
        let layer = QuantizedLinear::from_parts(1, 2, 4, 2, vec![1, 2], vec![0.5], None).unwrap();
        let model = one_layer(layer.into(), Head::MeanSquaredError);
        let batch = regression_batch(&[&[1.0, 1.0], &[2.0, 0.0]], &[1.5, 1.0]);
        assert_eq!(model.loss(&batch).unwrap(), 0.0);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 3, 10] {
            let layer = QuantizedLinear::from_parts(k, 2, 4, 2, vec![0; 2 * k], vec![0.0; k], None).unwrap();
            let model = one_layer(layer.into(), Head::SoftmaxCrossEntropy);
            let batch = Batch {
                features: Matrix::new(2, 2, vec![1.0, -1.0, 0.3, 2.0]).unwrap(),
                targets: Targets::Classes { ids: vec![0, k - 1], num_classes: k },
            };
            assert!((model.loss(&batch).unwrap() - (k as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_is_pure() {
        let ds = make_synthetic(SyntheticKind::TwoGaussians, 200, 1.0, 4).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 4 };
        let model = build_model(ModelSpec::Mlp { hidden: 32 }, &ds, q, 1).unwrap();
        let batch = ds.split_batch(Split::Train);
        let first = model.loss(&batch).unwrap().to_bits();
        for _ in 0..100 {
            assert_eq!(model.loss(&batch).unwrap().to_bits(), first);
        }
    }

    #[test]
    fn zero_offsets_match_dequantized_model() {
        let ds = make_synthetic(SyntheticKind::LinearRegression, 100, 0.1, 2).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 4 };
        let model = build_model(ModelSpec::Linear, &ds, q, 0).unwrap();
        let batch = ds.split_batch(Split::Train);
        let w = model.layers()[0].dequantize();
        let zeros: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.scales().len()]).collect();
        let reference = {
            let mut total = 0.0;
            for i in 0..batch.len() {
                let x = batch.features.row(i);
                let mut out = w.matvec(x).unwrap();
                out[0] += model.layers()[0].bias().unwrap()[0];
                let Targets::Values(y) = &batch.targets else { unreachable!() };
                total += 0.5 * (out[0] - y.get(i, 0)) * (out[0] - y.get(i, 0));
            }
            total / batch.len() as f64
        };
        assert_eq!(model.loss(&batch).unwrap(), reference);
        assert_eq!(model.loss_with_offsets(Some(&zeros), &batch).unwrap(), reference);
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let ds = make_synthetic(SyntheticKind::LinearRegression, 64, 0.2, 8).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 2 };
        let mut model = build_model(ModelSpec::Linear, &ds, q, 0).unwrap();
        let batch = ds.split_batch(Split::Train);
        let grad = model.analytic_gradient(&batch).unwrap();
        let n = model.param_count();
        assert_eq!(grad.len(), n);
        let h = 1e-4;
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = h;
            let mut plus = model.clone();
            shift(&mut plus, &e);
            e[k] = -h;
            let mut minus = model.clone();
            shift(&mut minus, &e);
            let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
            let scale = grad[k].abs().max(1e-3);
            assert!((fd - grad[k]).abs() <= 1e-8 * scale, "coord {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn analytic_gradient_codebook_and_cross_entropy() {
        let ds = make_synthetic(SyntheticKind::TwoGaussians, 80, 1.0, 3).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Codebook, bits: 2, group_size: 2 };
        let model = build_model(ModelSpec::Logistic, &ds, q, 0).unwrap();
        let batch = ds.split_batch(Split::Train);
        let grad = model.analytic_gradient(&batch).unwrap();
        let n = grad.len();
        let h = 1e-5;
        for k in 0..n {
            let mut e = vec![0.0; n];
            e[k] = h;
            let mut plus = model.clone();
            shift(&mut plus, &e);
            e[k] = -h;
            let mut minus = model.clone();
            shift(&mut minus, &e);
            let fd = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-7 * grad[k].abs().max(1e-2), "coord {k}");
        }
    }

    fn shift(model: &mut QuantizedModel, delta: &[f64]) {
        let mut i = 0;
        model.visit_blocks(&mut |_, b| {
            for v in b {
                *v += delta[i];
                i += 1;
            }
        });
    }

    #[test]
    fn oracle_unavailable_for_deep_models() {
        let ds = make_synthetic(SyntheticKind::TwoGaussians, 40, 1.0, 3).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 4 };
        let model = build_model(ModelSpec::Mlp { hidden: 32 }, &ds, q, 0).unwrap();
        assert!(matches!(
            model.analytic_gradient(&ds.split_batch(Split::Train)),
            Err(crate::Error::OracleUnavailable(_))
        ));
    }

    #[test]
    fn noiseless_gaussians_are_separated_by_centroids() {
        let ds = make_synthetic(SyntheticKind::TwoGaussians, 100, 0.0, 1).unwrap();
        let (w, b) = centroid_classifier(&ds).unwrap();
        let layer = quantize_scalar(&w, 8, 8).unwrap();
        let model = one_layer(QuantLayer::from(layer).with_bias(b).unwrap(), Head::SoftmaxCrossEntropy);
        assert_eq!(model.accuracy(&ds.split_batch(Split::Train)).unwrap(), 1.0);
    }

    #[test]
    fn sequence_model_runs() {
        let ds = make_synthetic(SyntheticKind::TwoGaussians, 40, 1.0, 3).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 4 };
        let model = build_model(ModelSpec::Sequence { seq_len: 2, hidden: 32 }, &ds, q, 0).unwrap();
        let loss = model.loss(&ds.split_batch(Split::Train)).unwrap();
        assert!(loss.is_finite());
        assert!(build_model(ModelSpec::Sequence { seq_len: 3, hidden: 32 }, &ds, q, 0).is_err());
    }

    #[test]
    fn model_spec_parsing() {
        assert_eq!("logistic".parse::<ModelSpec>().unwrap(), ModelSpec::Logistic);
        assert_eq!("mlp:32".parse::<ModelSpec>().unwrap(), ModelSpec::Mlp { hidden: 32 });
        assert_eq!(
            "seq:4:16".parse::<ModelSpec>().unwrap(),
            ModelSpec::Sequence { seq_len: 4, hidden: 16 }
        );
        assert!("mlp:0".parse::<ModelSpec>().is_err());
        assert!("transformer".parse::<ModelSpec>().is_err());
    }
}
