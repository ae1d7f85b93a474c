//! On-disk variant format: `<name>.manifest` (TOML), `<name>.f32`
//! (little-endian 32-bit floats, image-major, channel-plane order) and
//! `<name>.labels` (one unsigned byte per image).

use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::{DatasetManifest, LabeledDataset};
use crate::error::{Error, Result};

/// The three files making up one stored variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariantPaths {
    pub manifest: PathBuf,
    pub tensor: PathBuf,
    pub labels: PathBuf,
}

/// Resolves the file set for `base`, which may name the manifest itself or
/// the extension-less stem.
pub fn variant_paths(base: impl AsRef<Path>) -> VariantPaths {
    let base = base.as_ref();
    let stem = if base.extension().is_some_and(|e| e == "manifest") {
        base.with_extension("")
    } else {
        base.to_path_buf()
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    VariantPaths {
        manifest: with("manifest"),
        tensor: with("f32"),
        labels: with("labels"),
    }
}

pub fn save_variant(dataset: &LabeledDataset, base: impl AsRef<Path>) -> Result<VariantPaths> {
    let paths = variant_paths(base);
    if let Some(dir) = paths.manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut manifest = dataset.manifest().clone();
    manifest.precision = "f32".into();
    fs::write(&paths.manifest, manifest.to_toml()?).map_err(|e| Error::io(&paths.manifest, e))?;
    let mut bytes = Vec::with_capacity(dataset.pixels().len() * 4);
    for &v in dataset.pixels() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&paths.tensor, bytes).map_err(|e| Error::io(&paths.tensor, e))?;
    fs::write(&paths.labels, dataset.labels()).map_err(|e| Error::io(&paths.labels, e))?;
    Ok(paths)
}

pub fn load_variant(base: impl AsRef<Path>) -> Result<LabeledDataset> {
    let paths = variant_paths(base);
    let text = fs::read_to_string(&paths.manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let manifest = DatasetManifest::from_toml(&text).map_err(|e| Error::Format {
        path: paths.manifest.clone(),
        message: e.to_string(),
    })?;
    if manifest.precision != "f32" {
        return Err(Error::Format {
            path: paths.manifest.clone(),
            message: format!("unsupported storage precision '{}'", manifest.precision),
        });
    }
    let bytes = fs::read(&paths.tensor).map_err(|e| Error::io(&paths.tensor, e))?;
    let labels = fs::read(&paths.labels).map_err(|e| Error::io(&paths.labels, e))?;
    let expected = manifest.count * manifest.shape.len() * 4;
    if bytes.len() != expected {
        return Err(Error::Integrity {
            path: paths.tensor,
            message: format!(
                "manifest declares {} images of {} ({expected} bytes) but tensor file has {} bytes",
                manifest.count,
                manifest.shape,
                bytes.len()
            ),
        });
    }
    if labels.len() != manifest.count {
        return Err(Error::Integrity {
            path: paths.labels,
            message: format!(
                "manifest declares {} images but label file has {} entries",
                manifest.count,
                labels.len()
            ),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    LabeledDataset::new(pixels, labels, manifest).map_err(|e| Error::Integrity {
        path: paths.manifest,
        message: e.to_string(),
    })
}
