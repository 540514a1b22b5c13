//! Datasets: seeded synthetic generators, CSV import/export, and the
//! shuffled-epoch batch sampler used by every training run.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, dim, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    Regression,
    Blobs,
}

/// Parameters for [`gen_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_samples: usize,
    pub n_features: usize,
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default)]
    pub noise_std: f64,
    pub batch_size: usize,
    pub seed: u64,
}

fn default_classes() -> usize {
    2
}

/// One mini-batch. Classification targets hold the class index as `f64`
/// in a `[b, 1]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.inputs.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Tensor,
    batch_size: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Tensor, batch_size: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || targets.shape().len() != 2 {
            return Err(dim("dataset inputs and targets must be 2-D"));
        }
        let n = inputs.shape()[0];
        if targets.shape()[0] != n {
            return Err(dim(format!("{n} input rows vs {} target rows", targets.shape()[0])));
        }
        if batch_size == 0 || batch_size > n {
            return Err(config(format!("batch size {batch_size} must lie in 1..={n}")));
        }
        Ok(Self { inputs, targets, batch_size })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn n_features(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn n_targets(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch { inputs: gather_rows(&self.inputs, rows), targets: gather_rows(&self.targets, rows) }
    }

    /// The whole dataset as a single batch (used for evaluation).
    pub fn full_batch(&self) -> Batch {
        Batch { inputs: self.inputs.clone(), targets: self.targets.clone() }
    }

    /// Reads a CSV with a header row; the last `n_targets` columns are targets.
    pub fn from_csv(path: &Path, n_targets: usize, batch_size: usize) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let width = reader.headers()?.len();
        if n_targets == 0 || n_targets >= width {
            return Err(config(format!("{width} csv columns cannot hold {n_targets} target column(s) plus features")));
        }
        let n_features = width - n_targets;
        let (mut xs, mut ys, mut rows) = (Vec::new(), Vec::new(), 0usize);
        for record in reader.records() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| config(format!("row {}: column {j} is not a number: {field:?}", rows + 1)))?;
                if j < n_features {
                    xs.push(v);
                } else {
                    ys.push(v);
                }
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(config("csv has no data rows"));
        }
        Self::new(Tensor::new(vec![rows, n_features], xs)?, Tensor::new(vec![rows, n_targets], ys)?, batch_size)
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let (f, k) = (self.n_features(), self.n_targets());
        let header: Vec<String> = (0..f).map(|j| format!("x{j}")).chain((0..k).map(|j| format!("y{j}"))).collect();
        writer.write_record(&header)?;
        for i in 0..self.n_samples() {
            let row: Vec<String> = self.inputs.data()[i * f..(i + 1) * f]
                .iter()
                .chain(&self.targets.data()[i * k..(i + 1) * k])
                .map(|v| v.to_string())
                .collect();
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * w);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
    }
    Tensor::new(vec![rows.len(), w], data).expect("row gather keeps the width")
}

/// The hidden `[1, n_features]` map behind the regression generator.
pub fn hidden_linear_map(n_features: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let data = (0..n_features).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(vec![1, n_features], data).expect("non-empty feature count")
}

/// Deterministic desk-scale data. `blobs` draws `n_classes` Gaussian clusters
/// around centres in `[-3, 3]^f` with spread `noise_std`; `regression`
/// produces `y = A x + noise` with `A` from [`hidden_linear_map`].
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let &SyntheticSpec { kind, n_samples, n_features, n_classes, noise_std, batch_size, seed } = spec;
    if n_samples == 0 || n_features == 0 {
        return Err(config("synthetic data needs at least one sample and one feature"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(config(format!("noise_std must be finite and non-negative, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    match kind {
        SyntheticKind::Blobs => {
            if n_classes < 2 {
                return Err(config(format!("blobs need at least 2 classes, got {n_classes}")));
            }
            let centres: Vec<f64> = (0..n_classes * n_features).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut xs = Vec::with_capacity(n_samples * n_features);
            let mut ys = Vec::with_capacity(n_samples);
            for i in 0..n_samples {
                let c = i % n_classes;
                for j in 0..n_features {
                    xs.push(centres[c * n_features + j] + noise_std * normal(&mut rng));
                }
                ys.push(c as f64);
            }
            Dataset::new(
                Tensor::new(vec![n_samples, n_features], xs)?,
                Tensor::new(vec![n_samples, 1], ys)?,
                batch_size,
            )
        }
        SyntheticKind::Regression => {
            let a = hidden_linear_map(n_features, seed);
            let mut xs = Vec::with_capacity(n_samples * n_features);
            let mut ys = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let row: Vec<f64> = (0..n_features).map(|_| normal(&mut rng)).collect();
                let clean: f64 = row.iter().zip(a.data()).map(|(x, w)| x * w).sum();
                let noise = if noise_std > 0.0 { noise_std * normal(&mut rng) } else { 0.0 };
                ys.push(clean + noise);
                xs.extend(row);
            }
            Dataset::new(
                Tensor::new(vec![n_samples, n_features], xs)?,
                Tensor::new(vec![n_samples, 1], ys)?,
                batch_size,
            )
        }
    }
}

/// Seeded shuffled-epoch iterator over row indices. Each epoch is a fresh
/// permutation; a trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n_samples: usize, batch_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut rng);
        Self { order, cursor: 0, batch_size, rng }
    }

    pub fn next_rows(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(c: usize) -> SyntheticSpec {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            n_samples: 100,
            n_features: 2,
            n_classes: c,
            noise_std: 0.1,
            batch_size: 10,
            seed: 7,
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = gen_synthetic(&blobs(2)).unwrap();
        let b = gen_synthetic(&blobs(2)).unwrap();
        let bits = |d: &Dataset| -> Vec<u64> {
            d.inputs().data().iter().chain(d.targets().data()).map(|x| x.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn blobs_need_two_classes() {
        assert!(matches!(gen_synthetic(&blobs(1)), Err(crate::Error::Config(_))));
    }

    #[test]
    fn noiseless_regression_reproduces_hidden_map() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Regression,
            n_samples: 50,
            n_features: 3,
            n_classes: 2,
            noise_std: 0.0,
            batch_size: 5,
            seed: 11,
        };
        let d = gen_synthetic(&spec).unwrap();
        let a = hidden_linear_map(3, 11);
        for i in 0..50 {
            let x = &d.inputs().data()[i * 3..(i + 1) * 3];
            let y: f64 = x.iter().zip(a.data()).map(|(x, w)| x * w).sum();
            assert_eq!(y, d.targets().data()[i]);
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = gen_synthetic(&blobs(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.to_csv(&path).unwrap();
        let back = Dataset::from_csv(&path, 1, 10).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn csv_rejects_non_numeric() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,x\n").unwrap();
        assert!(matches!(Dataset::from_csv(&path, 1, 1), Err(crate::Error::Config(_))));
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(12, 4, 3);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_rows().to_vec()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn batch_size_bounds() {
        let x = Tensor::zeros(&[3, 2]).unwrap();
        let y = Tensor::zeros(&[3, 1]).unwrap();
        assert!(Dataset::new(x.clone(), y.clone(), 4).is_err());
        assert!(Dataset::new(x, y, 0).is_err());
    }
}
