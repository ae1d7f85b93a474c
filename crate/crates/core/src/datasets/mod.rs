//! Labeled image datasets, their manifests, and the ways to obtain them:
//! CIFAR-10 binary ingestion, synthetic generation, preprocessing,
//! training-time augmentation and on-disk variant persistence.

mod augment;
mod cifar;
mod persist;
mod preprocess;
mod synth;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment_batch, augment_image, AugmentParams};
pub use cifar::{load_cifar10, load_cifar10_file, Cifar10Split, CIFAR10_CLASSES, CIFAR10_RECORD_LEN};
pub use persist::{load_variant, save_variant, variant_paths, VariantPaths};
pub use preprocess::{preprocess, GcnStats, PreprocessMode, GCN_EPSILON};
pub use synth::{synth_powerlaw, synth_twoclass, PowerLawSpec, TwoClassSpec};

use crate::error::{Error, Result};
use crate::masks::MaskProvenance;
use crate::spectral::{ImageTensor, Shape};

/// Which perturbation produced a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Unfiltered,
    Radial,
    Random,
    Augmented,
    Synthetic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Unfiltered => "unfiltered",
            Variant::Radial => "radial",
            Variant::Random => "random",
            Variant::Augmented => "augmented",
            Variant::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "unfiltered" => Variant::Unfiltered,
            "radial" => Variant::Radial,
            "random" => Variant::Random,
            "augmented" => Variant::Augmented,
            "synthetic" => Variant::Synthetic,
            other => {
                return Err(Error::InvalidParameter(format!("unknown variant '{other}'")))
            }
        })
    }
}

/// One preprocessing step applied to a dataset, in order of application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PreprocessRecord {
    UnitScale,
    Gcn {
        /// Name of the split the per-pixel statistics were computed on.
        stats_source: String,
        epsilon: f64,
    },
}

/// Everything needed to interpret a stored dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub shape: Shape,
    pub count: usize,
    pub classes: usize,
    pub variant: Variant,
    /// Present iff the variant is `radial` or `random`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskProvenance>,
    /// Masks of the filtered parts of an augmented dataset.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<MaskProvenance>,
    #[serde(default)]
    pub preprocessing: Vec<PreprocessRecord>,
    pub max_imag_residual: f64,
    pub precision: String,
    /// Generator parameters for synthetic data (amplitudes, frequencies, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, f64>,
}

impl DatasetManifest {
    pub fn new(source: impl Into<String>, shape: Shape, count: usize, classes: usize, variant: Variant) -> Self {
        DatasetManifest {
            source: source.into(),
            shape,
            count,
            classes,
            variant,
            mask: None,
            components: Vec::new(),
            preprocessing: Vec::new(),
            max_imag_residual: 0.0,
            precision: "f32".into(),
            parameters: BTreeMap::new(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest parse: {e}")))
    }

    fn check(&self) -> Result<()> {
        let filtered = matches!(self.variant, Variant::Radial | Variant::Random);
        if filtered != self.mask.is_some() {
            return Err(Error::InvalidParameter(format!(
                "variant {} {} mask provenance",
                self.variant,
                if filtered { "requires" } else { "must not carry" }
            )));
        }
        Ok(())
    }
}

/// Ordered images with integer labels. Pixels are held in double precision,
/// image-major and channel-plane ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pixels: Vec<f64>,
    labels: Vec<u8>,
    manifest: DatasetManifest,
}

impl LabeledDataset {
    pub fn new(pixels: Vec<f64>, labels: Vec<u8>, mut manifest: DatasetManifest) -> Result<Self> {
        let shape = manifest.shape;
        if shape.is_empty() {
            return Err(Error::Dimension(format!("empty image shape {shape}")));
        }
        if pixels.len() != labels.len() * shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels for {} images of {shape}", labels.len() * shape.len(), labels.len()),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= manifest.classes) {
            return Err(Error::InvalidParameter(format!(
                "label {} at index {pos} outside class range 0..{}",
                labels[pos], manifest.classes
            )));
        }
        manifest.check()?;
        manifest.count = labels.len();
        Ok(LabeledDataset {
            pixels,
            labels,
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.manifest.shape
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    pub fn variant(&self) -> Variant {
        self.manifest.variant
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut DatasetManifest {
        &mut self.manifest
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.shape().len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn image_tensor(&self, index: usize) -> ImageTensor {
        ImageTensor::new(self.shape(), self.image(index).to_vec())
            .expect("dataset images always match the dataset shape")
    }

    /// Copies the selected images (in the given order) into a new dataset
    /// with the same manifest metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let n = self.shape().len();
        let mut pixels = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidParameter(format!(
                    "index {i} out of range for dataset of {} images",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset::new(pixels, labels, self.manifest.clone())
    }

    /// Deterministic class-balanced selection of `count` images: classes
    /// take turns in index order, each contributing its next unused image in
    /// file order, until `count` images are chosen or the data runs out.
    pub fn class_balanced_subset(&self, count: usize) -> Result<LabeledDataset> {
        if count >= self.len() {
            return Ok(self.clone());
        }
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); self.classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            per_class[l as usize].push(i);
        }
        let mut cursors = vec![0usize; self.classes()];
        let mut chosen = Vec::with_capacity(count);
        'outer: loop {
            let mut progressed = false;
            for (c, members) in per_class.iter().enumerate() {
                if chosen.len() == count {
                    break 'outer;
                }
                if let Some(&idx) = members.get(cursors[c]) {
                    chosen.push(idx);
                    cursors[c] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        chosen.sort_unstable();
        self.subset(&chosen)
    }

    /// Concatenates datasets of identical shape and class count.
    pub fn concat(parts: &[&LabeledDataset], manifest: DatasetManifest) -> Result<LabeledDataset> {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for part in parts {
            if part.shape() != manifest.shape {
                return Err(Error::ShapeMismatch {
                    expected: manifest.shape.to_string(),
                    actual: part.shape().to_string(),
                });
            }
            pixels.extend_from_slice(&part.pixels);
            labels.extend_from_slice(&part.labels);
        }
        LabeledDataset::new(pixels, labels, manifest)
    }
}
