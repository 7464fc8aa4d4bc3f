//! Datasets: synthetic generators, CSV ingestion, and seeded batch sampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, SeededNormalStream, SplitMix64};
use crate::tensor::Matrix;

use super::model::TargetRef;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { ids: Vec<usize>, num_classes: usize },
    /// One row of real targets per example.
    Values(Matrix),
}

impl Targets {
    fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes { ids, num_classes } => Targets::Classes {
                ids: indices.iter().map(|&i| ids[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(m) => Targets::Values(m.select_rows(indices)),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Targets::Classes { .. })
    }
}

/// A materialized mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn target(&self, i: usize) -> TargetRef<'_> {
        match &self.targets {
            Targets::Classes { ids, .. } => TargetRef::Class(ids[i]),
            Targets::Values(m) => TargetRef::Values(m.row(i)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Features, labels, and a fixed 8:2 train/test assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Targets,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Train fraction numerator over 10.
const TRAIN_TENTHS: usize = 8;

impl Dataset {
    /// Build a dataset, assigning rows to splits by a seeded hash of the row index.
    pub fn new(features: Matrix, targets: Targets, split_seed: u64) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        match &targets {
            Targets::Classes { ids, num_classes } => {
                if ids.len() != n {
                    return Err(Error::shape("dataset labels", n, ids.len()));
                }
                if let Some(y) = ids.iter().find(|&&y| y >= *num_classes) {
                    return Err(Error::InvalidArgument(format!(
                        "label {y} outside {num_classes} classes"
                    )));
                }
            }
            Targets::Values(m) => {
                if m.rows() != n {
                    return Err(Error::shape("dataset targets", n, m.rows()));
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (derive_seed(split_seed, i as u64), i));
        let n_train = n * TRAIN_TENTHS / 10;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self {
            features,
            targets,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { num_classes, .. } => Some(num_classes),
            Targets::Values(_) => None,
        }
    }

    /// Output width a model needs: class count, or target width.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values(m) => m.cols(),
        }
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            targets: self.targets.select(indices),
        }
    }

    pub fn split_batch(&self, split: Split) -> Batch {
        self.batch(self.indices(split))
    }
}

/// Seeded shuffled-epoch sampler; each epoch is a fresh permutation and a short
/// final batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if pool.len() < batch_size {
            return Err(Error::InvalidArgument(format!(
                "split has {} examples, fewer than batch size {batch_size}",
                pool.len()
            )));
        }
        let mut s = Self {
            order: pool.clone(),
            pool,
            cursor: 0,
            batch_size,
            seed,
            epoch: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order.copy_from_slice(&self.pool);
        SplitMix64::new(derive_seed(self.seed, self.epoch)).shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Two classes, 8 features. Class means are `±0.5` on every feature;
    /// features 0..4 carry noise `σ = noise` and features 4..8 `σ = 4·noise`,
    /// so equal feature weighting is far from the best linear rule.
    TwoGaussians,
    /// The classic interleaved half-circles in 2-D.
    TwoMoons,
    /// `y = w*·x + noise·ε` with 8 standard-normal features.
    LinearRegression,
    /// Like `LinearRegression`, but features follow a slash distribution
    /// (normal over uniform), so a few examples carry enormous curvature.
    HeavyTailed,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-gaussians" => Ok(SyntheticKind::TwoGaussians),
            "two-moons" => Ok(SyntheticKind::TwoMoons),
            "linear-regression" => Ok(SyntheticKind::LinearRegression),
            "heavy-tailed" | "stress" => Ok(SyntheticKind::HeavyTailed),
            other => Err(Error::config(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

pub const SYNTHETIC_DIM: usize = 8;

/// Deterministic synthetic dataset; the split also derives from `seed`.
pub fn make_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 examples, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be non-negative, got {noise}")));
    }
    let mut normal = SeededNormalStream::new(derive_seed(seed, 1));
    let mut uniform = SplitMix64::new(derive_seed(seed, 2));
    let (features, targets) = match kind {
        SyntheticKind::TwoGaussians => {
            let mut data = Vec::with_capacity(n * SYNTHETIC_DIM);
            let mut ids = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % 2;
                let sign = if y == 1 { 1.0 } else { -1.0 };
                for c in 0..SYNTHETIC_DIM {
                    let sigma = if c < SYNTHETIC_DIM / 2 { noise } else { 4.0 * noise };
                    data.push(sign * 0.5 + sigma * normal.next_normal());
                }
                ids.push(y);
            }
            (
                Matrix::new(n, SYNTHETIC_DIM, data)?,
                Targets::Classes { ids, num_classes: 2 },
            )
        }
        SyntheticKind::TwoMoons => {
            let mut data = Vec::with_capacity(n * 2);
            let mut ids = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % 2;
                let t = std::f64::consts::PI * uniform.next_f64();
                let (x0, x1) = if y == 0 {
                    (libm::cos(t), libm::sin(t))
                } else {
                    (1.0 - libm::cos(t), 0.5 - libm::sin(t))
                };
                data.push(x0 + noise * normal.next_normal());
                data.push(x1 + noise * normal.next_normal());
                ids.push(y);
            }
            (Matrix::new(n, 2, data)?, Targets::Classes { ids, num_classes: 2 })
        }
        SyntheticKind::LinearRegression | SyntheticKind::HeavyTailed => {
            let heavy = kind == SyntheticKind::HeavyTailed;
            let w_star = SeededNormalStream::new(derive_seed(seed, 3)).normals(SYNTHETIC_DIM);
            let mut data = Vec::with_capacity(n * SYNTHETIC_DIM);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> = (0..SYNTHETIC_DIM)
                    .map(|_| {
                        let g = normal.next_normal();
                        if heavy {
                            g / (1.0 - uniform.next_f64())
                        } else {
                            g
                        }
                    })
                    .collect();
                ys.push(crate::tensor::dot(&row, &w_star) + noise * normal.next_normal());
                data.extend(row);
            }
            (
                Matrix::new(n, SYNTHETIC_DIM, data)?,
                Targets::Values(Matrix::new(n, 1, ys)?),
            )
        }
    };
    Dataset::new(features, targets, seed)
}

/// How to interpret the label column of a CSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelKind {
    /// Classes if every label is a non-negative integer, otherwise real targets.
    #[default]
    Auto,
    Classes,
    Values,
}

#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    /// Feature columns; empty means every column except the label.
    pub features: Vec<String>,
    pub label: String,
    pub label_kind: LabelKind,
}

impl CsvSchema {
    pub fn with_label(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }
}

/// Load a headed, comma-separated UTF-8 file. Errors name the 1-based line and the column.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, split_seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let label_col = find(&schema.label)?;
    let feature_cols: Vec<usize> = if schema.features.is_empty() {
        (0..headers.len()).filter(|&c| c != label_col).collect()
    } else {
        schema.features.iter().map(|f| find(f)).collect::<Result<_>>()?
    };
    if feature_cols.is_empty() {
        return Err(Error::InvalidArgument("no feature columns".into()));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        let cell = |c: usize| -> Result<f64> {
            let raw = record.get(c).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Csv {
                    row: line,
                    column: headers[c].clone(),
                    message: format!("non-numeric value {raw:?}"),
                })
        };
        for &c in &feature_cols {
            data.push(cell(c)?);
        }
        labels.push(cell(label_col)?);
    }
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let integral = labels.iter().all(|v| *v >= 0.0 && v.fract() == 0.0);
    let as_classes = match schema.label_kind {
        LabelKind::Auto => integral,
        LabelKind::Classes => {
            if !integral {
                return Err(Error::InvalidArgument(format!(
                    "label column {:?} is not integral",
                    schema.label
                )));
            }
            true
        }
        LabelKind::Values => false,
    };
    let features = Matrix::new(n, feature_cols.len(), data)?;
    let targets = if as_classes {
        let ids: Vec<usize> = labels.iter().map(|&v| v as usize).collect();
        let num_classes = ids.iter().max().map_or(0, |m| m + 1).max(2);
        Targets::Classes { ids, num_classes }
    } else {
        Targets::Values(Matrix::new(n, 1, labels)?)
    };
    Dataset::new(features, targets, split_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ten_rows_split_eight_two() {
        let mut s = String::from("a,b,y\n");
        for i in 0..10 {
            s.push_str(&format!("{},{},{}\n", i, i * 2, i % 2));
        }
        let f = write_csv(&s);
        let ds = load_csv(f.path(), &CsvSchema::with_label("y"), 5).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.indices(Split::Train).len(), 8);
        assert_eq!(ds.indices(Split::Test).len(), 2);
        assert_eq!(ds.num_classes(), Some(2));
        let again = load_csv(f.path(), &CsvSchema::with_label("y"), 5).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn header_only_is_empty() {
        let f = write_csv("a,b,y\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::with_label("y"), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn reports_bad_cells_and_columns() {
        let f = write_csv("a,b,y\n1,2,0\n3,oops,1\n");
        match load_csv(f.path(), &CsvSchema::with_label("y"), 0) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("a,b\n1,2\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::with_label("y"), 0),
            Err(Error::MissingColumn(_))
        ));
    }

    #[test]
    fn real_labels_become_targets() {
        let f = write_csv("x,t\n1,0.5\n2,1.5\n");
        let ds = load_csv(f.path(), &CsvSchema::with_label("t"), 0).unwrap();
        assert!(!ds.targets().is_classification());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for kind in [SyntheticKind::TwoGaussians, SyntheticKind::TwoMoons] {
            let a = make_synthetic(kind, 501, 0.3, 9).unwrap();
            let b = make_synthetic(kind, 501, 0.3, 9).unwrap();
            assert_eq!(a, b);
            let Targets::Classes { ids, .. } = a.targets() else { unreachable!() };
            let ones = ids.iter().filter(|&&y| y == 1).count() as f64 / ids.len() as f64;
            assert!((ones - 0.5).abs() <= 0.05);
        }
        assert_ne!(
            make_synthetic(SyntheticKind::LinearRegression, 20, 0.1, 1).unwrap(),
            make_synthetic(SyntheticKind::LinearRegression, 20, 0.1, 2).unwrap()
        );
        assert!(make_synthetic(SyntheticKind::TwoMoons, 9, 0.1, 1).is_err());
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new((0..12).collect(), 4, 3).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_indices().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        assert_eq!(s.epoch(), 0);
        s.next_indices();
        assert_eq!(s.epoch(), 1);
        assert!(BatchSampler::new(vec![1, 2], 3, 0).is_err());
    }
}
