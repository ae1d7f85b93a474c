//! Training-time normalizations: scaling to `[0, 1]` and per-pixel global
//! contrast normalization with statistics taken from a reference split.

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledDataset, PreprocessRecord};
use crate::error::{Error, Result};

/// Floor applied to per-pixel standard deviations.
pub const GCN_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    None,
    UnitScale,
    Gcn,
}

/// Per-pixel mean and standard deviation of a reference split.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    source: String,
}

impl GcnStats {
    /// Computes population statistics over every image of `reference`.
    pub fn fit(reference: &LabeledDataset, source: impl Into<String>) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::InvalidParameter(
                "cannot compute normalization statistics of an empty dataset".into(),
            ));
        }
        let n = reference.shape().len();
        let count = reference.len() as f64;
        let mut mean = vec![0.0; n];
        for i in 0..reference.len() {
            for (m, &x) in mean.iter_mut().zip(reference.image(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; n];
        for i in 0..reference.len() {
            for ((v, &x), &m) in var.iter_mut().zip(reference.image(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count).sqrt().max(GCN_EPSILON))
            .collect();
        Ok(GcnStats {
            mean,
            std,
            source: source.into(),
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn apply(&self, dataset: &LabeledDataset) -> Result<LabeledDataset> {
        let n = dataset.shape().len();
        if n != self.mean.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values per image", self.mean.len()),
                actual: format!("{n} values per image"),
            });
        }
        let mut out = dataset.clone();
        for img in out.pixels_mut().chunks_exact_mut(n) {
            for ((x, m), s) in img.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        out.manifest_mut().preprocessing.push(PreprocessRecord::Gcn {
            stats_source: self.source.clone(),
            epsilon: GCN_EPSILON,
        });
        Ok(out)
    }
}

/// Applies `mode` to `dataset`. GCN statistics are taken from the dataset
/// itself; use [`GcnStats`] directly to normalize other splits with them.
pub fn preprocess(dataset: &LabeledDataset, mode: PreprocessMode) -> Result<LabeledDataset> {
    match mode {
        PreprocessMode::None => Ok(dataset.clone()),
        PreprocessMode::UnitScale => {
            let mut out = dataset.clone();
            out.pixels_mut().iter_mut().for_each(|x| *x /= 255.0);
            out.manifest_mut().preprocessing.push(PreprocessRecord::UnitScale);
            Ok(out)
        }
        PreprocessMode::Gcn => {
            let source = dataset.manifest().source.clone();
            GcnStats::fit(dataset, source)?.apply(dataset)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetManifest, Variant};
    use crate::spectral::Shape;

    fn raw(n: usize) -> LabeledDataset {
        let shape = Shape::new(3, 4, 4);
        let pixels = (0..n * shape.len())
            .map(|i| ((i * 7919) % 256) as f64)
            .collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        LabeledDataset::new(pixels, labels, DatasetManifest::new("raw", shape, n, 10, Variant::Unfiltered)).unwrap()
    }

    #[test]
    fn unit_scale_range() {
        let d = preprocess(&raw(10), PreprocessMode::UnitScale).unwrap();
        assert!(d.pixels().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(d.manifest().preprocessing, vec![PreprocessRecord::UnitScale]);
    }

    #[test]
    fn gcn_on_reference_split() {
        let src = raw(10);
        let d = preprocess(&src, PreprocessMode::Gcn).unwrap();
        let n = d.shape().len();
        for p in 0..n {
            let vals: Vec<f64> = (0..d.len()).map(|i| d.image(i)[p]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "pixel {p}: mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "pixel {p}: std {}", var.sqrt());
        }
        assert_eq!(d.labels(), src.labels());
    }

    #[test]
    fn gcn_constant_pixel_uses_floor() {
        let shape = Shape::new(1, 2, 2);
        let d = LabeledDataset::new(vec![5.0; 8], vec![0, 1], DatasetManifest::new("c", shape, 2, 2, Variant::Unfiltered)).unwrap();
        let out = preprocess(&d, PreprocessMode::Gcn).unwrap();
        assert!(out.pixels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stats_reused_on_other_split() {
        let train = raw(10);
        let other = raw(4);
        let stats = GcnStats::fit(&train, "train/unfiltered").unwrap();
        let out = stats.apply(&other).unwrap();
        assert_eq!(
            out.manifest().preprocessing,
            vec![PreprocessRecord::Gcn {
                stats_source: "train/unfiltered".into(),
                epsilon: GCN_EPSILON
            }]
        );
        assert!(GcnStats::fit(&train.subset(&[]).unwrap(), "x").is_err());
    }
}
