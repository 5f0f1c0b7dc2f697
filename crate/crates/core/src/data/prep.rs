//! Chronological splits, z-score normalisation and sliding windows.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{Dataset, BINARY_EXTERNALS, EXTERNALS, FEATURES};
use crate::error::{Error, Result};
use crate::model::ObservationWindow;
use crate::tensor::Tensor;

/// Lower bound applied to every standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Train/validation/test fractions of the time axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2 }
    }
}

/// Contiguous train, validation and test ranges covering `0..len`. Boundaries
/// are the rounded cumulative fractions.
pub fn chronological_split(len: usize, ratios: SplitRatios) -> Result<[Range<usize>; 3]> {
    let r = [ratios.train, ratios.val, ratios.test];
    if r.iter().any(|&x| !x.is_finite() || x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("data.split", format!("ratios {r:?} must be non-negative and sum to 1")));
    }
    let b1 = ((ratios.train * len as f64).round() as usize).min(len);
    let b2 = (((ratios.train + ratios.val) * len as f64).round() as usize).clamp(b1, len);
    let ranges = [0..b1, b1..b2, b2..len];
    for (name, range) in ["train", "val", "test"].iter().zip(&ranges) {
        if range.is_empty() {
            return Err(Error::Data(format!("{name} split of {len} steps with ratios {r:?} is empty")));
        }
    }
    Ok(ranges)
}

/// Per-(node, feature) and per-external statistics of the training range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub nodes: usize,
    /// `[N * F]`, node-major.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `[M]`; binary flags carry mean 0 and std 1.
    pub ext_mean: Vec<f64>,
    pub ext_std: Vec<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

impl NormStats {
    /// Statistics over `train` only.
    pub fn fit(dataset: &Dataset, train: Range<usize>) -> Result<Self> {
        if train.is_empty() || train.end > dataset.len() {
            return Err(Error::Data(format!("train range {train:?} is empty or exceeds {} steps", dataset.len())));
        }
        let n = dataset.nodes();
        let f = FEATURES.len();
        let mut mean = Vec::with_capacity(n * f);
        let mut std = Vec::with_capacity(n * f);
        for node in 0..n {
            for k in 0..f {
                let (m, s) = mean_std(train.clone().map(|t| dataset.value(t, node, k)));
                mean.push(m);
                std.push(s);
            }
        }
        let mut ext_mean = Vec::with_capacity(EXTERNALS.len());
        let mut ext_std = Vec::with_capacity(EXTERNALS.len());
        for k in 0..EXTERNALS.len() {
            let (m, s) = if BINARY_EXTERNALS.contains(&k) { (0.0, 1.0) } else { mean_std(train.clone().map(|t| dataset.external(t, k))) };
            ext_mean.push(m);
            ext_std.push(s);
        }
        Ok(Self { nodes: n, mean, std, ext_mean, ext_std })
    }

    pub fn normalize_value(&self, node: usize, feature: usize, v: f64) -> f64 {
        let i = node * FEATURES.len() + feature;
        (v - self.mean[i]) / self.std[i]
    }

    pub fn denormalize_value(&self, node: usize, feature: usize, v: f64) -> f64 {
        let i = node * FEATURES.len() + feature;
        v * self.std[i] + self.mean[i]
    }

    pub fn normalize_external(&self, k: usize, v: f64) -> f64 {
        (v - self.ext_mean[k]) / self.ext_std[k]
    }

    pub fn denormalize_external(&self, k: usize, v: f64) -> f64 {
        v * self.ext_std[k] + self.ext_mean[k]
    }

    fn map(&self, dataset: &Dataset, value: impl Fn(usize, usize, f64) -> f64, external: impl Fn(usize, f64) -> f64) -> Result<Dataset> {
        if dataset.nodes() != self.nodes {
            return Err(Error::Mismatch(format!("statistics cover {} nodes, dataset has {}", self.nodes, dataset.nodes())));
        }
        let f = FEATURES.len();
        let n = self.nodes;
        let values: Vec<f64> = dataset.values.data().iter().enumerate().map(|(i, &v)| value((i / f) % n, i % f, v)).collect();
        let m = EXTERNALS.len();
        let externals: Vec<f64> = dataset.externals.data().iter().enumerate().map(|(i, &v)| external(i % m, v)).collect();
        Dataset::new(
            dataset.grid,
            Tensor::new(dataset.values.shape().to_vec(), values)?,
            Tensor::new(dataset.externals.shape().to_vec(), externals)?,
            dataset.imputed.clone(),
        )
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        self.map(dataset, |n, f, v| self.normalize_value(n, f, v), |k, v| self.normalize_external(k, v))
    }

    pub fn invert(&self, dataset: &Dataset) -> Result<Dataset> {
        self.map(dataset, |n, f, v| self.denormalize_value(n, f, v), |k, v| self.denormalize_external(k, v))
    }
}

/// Z-scores `dataset` with statistics fitted on `train`.
pub fn normalize(dataset: &Dataset, train: Range<usize>) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(dataset, train)?;
    Ok((stats.apply(dataset)?, stats))
}

/// A training example: inputs, `[H, N, F_out]` target, and a mask that is 1
/// where the target was observed and 0 where it was imputed.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub window: ObservationWindow,
    pub target: Tensor,
    pub mask: Tensor,
}

impl Sample {
    /// Grid index of the first target step.
    pub fn target_start(&self) -> usize {
        self.window.anchor + 1
    }
}

/// Sliding windows lying entirely inside `range`: `T` input steps followed by
/// `H` target steps, advancing by `stride`.
pub fn make_windows(dataset: &Dataset, range: Range<usize>, t: usize, h: usize, stride: usize, targets: &[usize]) -> Result<Vec<Sample>> {
    if t == 0 || h == 0 || stride == 0 {
        return Err(Error::Data("window, horizon and stride must be positive".into()));
    }
    if range.end > dataset.len() || range.len() < t + h {
        return Err(Error::Data(format!("range {range:?} is too short for window {t} + horizon {h}")));
    }
    if targets.iter().any(|&k| k >= FEATURES.len()) {
        return Err(Error::Data(format!("target feature indices {targets:?} out of range")));
    }
    let n = dataset.nodes();
    let f = FEATURES.len();
    let m = EXTERNALS.len();
    let count = (range.len() - t - h) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let s = range.start + w * stride;
        let x = Tensor::new(vec![t, n, f], dataset.values.data()[s * n * f..(s + t) * n * f].to_vec())?;
        let z = Tensor::new(vec![t, m], dataset.externals.data()[s * m..(s + t) * m].to_vec())?;
        let mut target = Vec::with_capacity(h * n * targets.len());
        let mut mask = Vec::with_capacity(h * n * targets.len());
        for step in s + t..s + t + h {
            for node in 0..n {
                for &k in targets {
                    target.push(dataset.value(step, node, k));
                    mask.push(if dataset.is_imputed(step, node, k) { 0.0 } else { 1.0 });
                }
            }
        }
        let shape = vec![h, n, targets.len()];
        out.push(Sample {
            window: ObservationWindow { x, z, anchor: s + t - 1 },
            target: Tensor::new(shape.clone(), target)?,
            mask: Tensor::new(shape, mask)?,
        });
    }
    Ok(out)
}
