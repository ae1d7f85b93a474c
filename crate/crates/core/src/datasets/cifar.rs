//! CIFAR-10 binary format: a sequence of 3073-byte records, each a label
//! byte followed by the red, green and blue 32x32 planes in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datasets::{DatasetManifest, LabeledDataset, Variant};
use crate::error::{Error, Result};
use crate::spectral::Shape;

pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR10_RECORD_LEN: usize = 1 + 3 * 32 * 32;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses one CIFAR-10 binary file. Intensities are kept on the raw
/// `[0, 255]` scale.
pub fn load_cifar10_file(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(&bytes, path, &path.display().to_string())
}

fn parse_records(bytes: &[u8], path: &Path, source: &str) -> Result<LabeledDataset> {
    let count = bytes.len() / CIFAR10_RECORD_LEN;
    if !bytes.len().is_multiple_of(CIFAR10_RECORD_LEN) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("truncated record at offset {}", count * CIFAR10_RECORD_LEN),
        });
    }
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR10_RECORD_LEN - 1));
    for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = record[0];
        if label as usize >= CIFAR10_CLASSES {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!(
                    "label {label} out of range at offset {}",
                    i * CIFAR10_RECORD_LEN
                ),
            });
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| f64::from(b)));
    }
    let manifest = DatasetManifest::new(
        source,
        Shape::new(3, 32, 32),
        count,
        CIFAR10_CLASSES,
        Variant::Unfiltered,
    );
    LabeledDataset::new(pixels, labels, manifest)
}

/// Which split of the standard CIFAR-10 binary distribution to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cifar10Split {
    Train,
    Test,
}

/// Loads a CIFAR-10 dataset from `path`.
///
/// `path` may be a single binary file, or the extracted
/// `cifar-10-batches-bin` directory, in which case `split` selects either
/// the five training batches (concatenated in order) or the test batch.
pub fn load_cifar10(path: impl AsRef<Path>, split: Cifar10Split) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if path.is_file() {
        return load_cifar10_file(path);
    }
    let files: Vec<PathBuf> = match split {
        Cifar10Split::Train => TRAIN_FILES.iter().map(|f| path.join(f)).collect(),
        Cifar10Split::Test => vec![path.join(TEST_FILE)],
    };
    let mut bytes = Vec::new();
    for file in &files {
        let chunk = fs::read(file).map_err(|e| Error::io(file, e))?;
        if chunk.len() % CIFAR10_RECORD_LEN != 0 {
            // Report offsets relative to the offending file.
            parse_records(&chunk, file, "")?;
        }
        bytes.extend_from_slice(&chunk);
    }
    let name = match split {
        Cifar10Split::Train => "cifar10/train",
        Cifar10Split::Test => "cifar10/test",
    };
    parse_records(&bytes, path, name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f
    }

    #[test]
    fn single_record() {
        let mut rec = vec![0u8; CIFAR10_RECORD_LEN];
        rec[0] = 7;
        rec[1] = 200; // red (0,0)
        rec[1 + 1024 + 33] = 17; // green (1,1)
        let f = write(&rec);
        let d = load_cifar10_file(f.path()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.labels(), &[7]);
        assert_eq!(d.shape(), Shape::new(3, 32, 32));
        let img = d.image_tensor(0);
        assert_eq!(img.get(0, 0, 0), 200.0);
        assert_eq!(img.get(1, 1, 1), 17.0);
        assert_eq!(d.variant(), Variant::Unfiltered);
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let f = write(&[]);
        let d = load_cifar10_file(f.path()).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn truncated_record() {
        let f = write(&vec![0u8; 3072]);
        let err = load_cifar10_file(f.path()).unwrap_err();
        assert!(err.to_string().contains("truncated record at offset 0"), "{err}");
        let f = write(&vec![0u8; CIFAR10_RECORD_LEN + 5]);
        let err = load_cifar10_file(f.path()).unwrap_err();
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn bad_label() {
        let mut bytes = vec![0u8; 2 * CIFAR10_RECORD_LEN];
        bytes[CIFAR10_RECORD_LEN] = 10;
        let f = write(&bytes);
        let err = load_cifar10_file(f.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("offset 3073"), "{err}");
    }

    #[test]
    fn directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in TRAIN_FILES.iter().enumerate() {
            let mut rec = vec![0u8; CIFAR10_RECORD_LEN];
            rec[0] = i as u8;
            fs::write(dir.path().join(name), rec.repeat(2)).unwrap();
        }
        fs::write(dir.path().join(TEST_FILE), vec![3u8; CIFAR10_RECORD_LEN]).unwrap();
        let train = load_cifar10(dir.path(), Cifar10Split::Train).unwrap();
        assert_eq!(train.labels(), &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        let test = load_cifar10(dir.path(), Cifar10Split::Test).unwrap();
        assert_eq!(test.len(), 1);
        assert_eq!(test.manifest().source, "cifar10/test");
    }
}
