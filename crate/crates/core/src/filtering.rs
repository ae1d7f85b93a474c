//! Fourier filtering of images and datasets: `X -> F^-1(F(X) o M)`.
//!
//! The real part of the inverse transform is kept. For conjugate-symmetric
//! masks (every radial mask) the discarded imaginary part is rounding noise;
//! random masks break the symmetry, and the largest discarded magnitude is
//! always reported rather than hidden.

use num_complex::Complex64;

use crate::datasets::{DatasetManifest, LabeledDataset, Variant};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::masks::{radial_mask, random_mask, FourierMask, MaskProvenance};
use crate::spectral::{require_finite, ImageTensor, Shape, SpectralPlan};

/// Filtered image plus the largest imaginary magnitude dropped by the
/// inverse transform.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub image: ImageTensor,
    pub imag_residual: f64,
}

/// A mask bound to FFT plans for its spatial size.
#[derive(Debug, Clone)]
pub struct SpectralFilter {
    plan: SpectralPlan,
    mask: FourierMask,
}

impl SpectralFilter {
    pub fn new(mask: FourierMask) -> Result<Self> {
        let shape = mask.shape();
        Ok(SpectralFilter {
            plan: SpectralPlan::new(shape.height, shape.width)?,
            mask,
        })
    }

    pub fn mask(&self) -> &FourierMask {
        &self.mask
    }

    /// Single-channel masks broadcast over every image channel.
    fn check(&self, shape: Shape) -> Result<()> {
        let m = self.mask.shape();
        let channels_ok = m.channels == 1 || m.channels == shape.channels;
        if !channels_ok || m.height != shape.height || m.width != shape.width {
            return Err(Error::ShapeMismatch {
                expected: format!("image compatible with mask {m}"),
                actual: shape.to_string(),
            });
        }
        Ok(())
    }

    /// Filters one image stored as `C` contiguous planes into `out`.
    fn apply_raw(&self, image: &[f64], channels: usize, out: &mut [f64]) -> f64 {
        let p = self.plan.height() * self.plan.width();
        let broadcast = self.mask.shape().channels == 1;
        let mut spectrum = vec![Complex64::default(); p];
        let mut residual = 0.0f64;
        for c in 0..channels {
            self.plan.forward_plane(&image[c * p..(c + 1) * p], &mut spectrum);
            let bits = self.mask.plane(if broadcast { 0 } else { c });
            for (z, &b) in spectrum.iter_mut().zip(bits) {
                if b == 0 {
                    *z = Complex64::default();
                }
            }
            residual = residual.max(self.plan.inverse_plane(&spectrum, &mut out[c * p..(c + 1) * p]));
        }
        residual
    }

    pub fn apply(&self, image: &ImageTensor) -> Result<FilterOutcome> {
        let shape = image.shape();
        shape.require_even()?;
        self.check(shape)?;
        require_finite(image.data())?;
        let mut out = vec![0.0; shape.len()];
        let imag_residual = self.apply_raw(image.data(), shape.channels, &mut out);
        Ok(FilterOutcome {
            image: ImageTensor::new(shape, out)?,
            imag_residual,
        })
    }

    /// Filters every image of `dataset` with this mask. Each image is
    /// processed independently, so the result does not depend on `exec`.
    pub fn apply_dataset(&self, dataset: &LabeledDataset, exec: Execution) -> Result<LabeledDataset> {
        let shape = dataset.shape();
        shape.require_even()?;
        self.check(shape)?;
        require_finite(dataset.pixels())?;
        let n = shape.len();
        let mut pixels = vec![0.0; dataset.pixels().len()];
        let mut residuals = vec![0.0f64; dataset.len()];
        exec.for_each_chunk_pair_mut(&mut pixels, n, &mut residuals, 1, |i, out, res| {
            res[0] = self.apply_raw(dataset.image(i), shape.channels, out);
        });
        let provenance = self.mask.provenance();
        let mut manifest = dataset.manifest().clone();
        manifest.variant = match provenance {
            MaskProvenance::Radial { .. } => Variant::Radial,
            MaskProvenance::Random { .. } => Variant::Random,
        };
        manifest.mask = Some(provenance);
        manifest.max_imag_residual = residuals.iter().copied().fold(0.0, f64::max);
        LabeledDataset::new(pixels, dataset.labels().to_vec(), manifest)
    }
}

/// `F^-1(F(image) o mask)`, real part, with the discarded imaginary residual.
pub fn filter_image(image: &ImageTensor, mask: &FourierMask) -> Result<FilterOutcome> {
    SpectralFilter::new(mask.clone())?.apply(image)
}

/// Filters every image of `dataset` with the same mask; labels and order
/// are preserved and the variant tag follows the mask kind.
pub fn filter_dataset(dataset: &LabeledDataset, mask: &FourierMask, exec: Execution) -> Result<LabeledDataset> {
    SpectralFilter::new(mask.clone())?.apply_dataset(dataset, exec)
}

/// The four datasets of one experiment split.
#[derive(Debug, Clone)]
pub struct Variants {
    pub unfiltered: LabeledDataset,
    pub radial: LabeledDataset,
    pub random: LabeledDataset,
    pub augmented: LabeledDataset,
}

impl Variants {
    pub fn get(&self, variant: Variant) -> Option<&LabeledDataset> {
        match variant {
            Variant::Unfiltered => Some(&self.unfiltered),
            Variant::Radial => Some(&self.radial),
            Variant::Random => Some(&self.random),
            Variant::Augmented => Some(&self.augmented),
            Variant::Synthetic => None,
        }
    }
}

/// Builds the unfiltered, radial, random and augmented variants of a
/// dataset from explicit masks. Reusing the same mask objects for the train
/// and test splits keeps one draw per experiment.
pub fn build_variants_with(
    dataset: &LabeledDataset,
    radial: &FourierMask,
    random: &FourierMask,
    exec: Execution,
) -> Result<Variants> {
    let radial_set = filter_dataset(dataset, radial, exec)?;
    let random_set = filter_dataset(dataset, random, exec)?;
    let mut manifest: DatasetManifest = dataset.manifest().clone();
    manifest.variant = Variant::Augmented;
    manifest.mask = None;
    manifest.components = vec![radial.provenance(), random.provenance()];
    manifest.max_imag_residual = radial_set
        .manifest()
        .max_imag_residual
        .max(random_set.manifest().max_imag_residual);
    let augmented = LabeledDataset::concat(&[dataset, &radial_set, &random_set], manifest)?;
    Ok(Variants {
        unfiltered: dataset.clone(),
        radial: radial_set,
        random: random_set,
        augmented,
    })
}

/// [`build_variants_with`] using `radial_mask(radius)` and
/// `random_mask(drop_prob, seed)` at the dataset's shape.
pub fn build_variants(
    dataset: &LabeledDataset,
    radius: f64,
    drop_prob: f64,
    seed: u64,
    exec: Execution,
) -> Result<Variants> {
    let s = dataset.shape();
    let radial = radial_mask(s.height, s.width, s.channels, radius)?;
    let random = random_mask(s.height, s.width, s.channels, drop_prob, seed)?;
    build_variants_with(dataset, &radial, &random, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::dft2;
    use std::f64::consts::PI;

    fn noise_image(shape: Shape, salt: usize) -> ImageTensor {
        let data = (0..shape.len())
            .map(|i| ((i * 2654435761 + salt * 97) % 1000) as f64 / 10.0)
            .collect();
        ImageTensor::new(shape, data).unwrap()
    }

    fn dataset(n: usize, shape: Shape) -> LabeledDataset {
        let mut pixels = Vec::new();
        for i in 0..n {
            pixels.extend(noise_image(shape, i).into_data());
        }
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        LabeledDataset::new(pixels, labels, DatasetManifest::new("t", shape, n, 10, Variant::Unfiltered)).unwrap()
    }

    #[test]
    fn identity_and_zero_masks() {
        let img = noise_image(Shape::new(3, 8, 8), 1);
        let ones = random_mask(8, 8, 3, 0.0, 0).unwrap();
        let out = filter_image(&img, &ones).unwrap();
        for (a, b) in out.image.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        let zeros = random_mask(8, 8, 3, 1.0, 0).unwrap();
        let out = filter_image(&img, &zeros).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn highest_horizontal_cosine_is_removed_by_small_radius() {
        let shape = Shape::new(1, 4, 4);
        let data: Vec<f64> = (0..16).map(|i| (PI * (i % 4) as f64).cos()).collect();
        let img = ImageTensor::new(shape, data.clone()).unwrap();
        // Oracle: the only non-zero mode is at distance 2 from DC.
        let s = dft2(&img).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expected = if (i, j) == (2, 0) { 4.0 } else { 0.0 };
                assert!((s.get(0, i, j).norm() - expected).abs() < 1e-12);
            }
        }
        let out = filter_image(&img, &radial_mask(4, 4, 1, 1.0).unwrap()).unwrap();
        assert!(out.image.data().iter().all(|v| v.abs() < 1e-12));
        let out = filter_image(&img, &radial_mask(4, 4, 1, 3.0).unwrap()).unwrap();
        for (a, b) in out.image.data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = noise_image(Shape::new(3, 8, 8), 0);
        assert!(filter_image(&img, &radial_mask(16, 16, 3, 2.0).unwrap()).is_err());
        assert!(filter_image(&img, &random_mask(8, 8, 2, 0.1, 0).unwrap()).is_err());
        // Single-plane masks broadcast.
        assert!(filter_image(&img, &radial_mask(8, 8, 1, 2.0).unwrap()).is_ok());
    }

    #[test]
    fn dataset_filter_matches_per_image_and_schedule() {
        let shape = Shape::new(3, 32, 32);
        let d = dataset(10, shape);
        let mask = radial_mask(32, 32, 3, 11.0).unwrap();
        let par = filter_dataset(&d, &mask, Execution::Parallel).unwrap();
        let seq = filter_dataset(&d, &mask, Execution::Sequential).unwrap();
        assert_eq!(par, seq);
        for i in 0..d.len() {
            let single = filter_image(&d.image_tensor(i), &mask).unwrap();
            assert_eq!(single.image.data(), par.image(i));
        }
        assert_eq!(par.labels(), d.labels());
        assert_eq!(par.variant(), Variant::Radial);
        assert_eq!(par.manifest().mask, Some(MaskProvenance::Radial { radius: 11.0 }));
        assert!(par.manifest().max_imag_residual < 1e-10);
    }

    #[test]
    fn variants_sizes_and_identity_settings() {
        let shape = Shape::new(3, 8, 8);
        let d = dataset(6, shape);
        let v = build_variants(&d, 100.0, 0.0, 3, Execution::Parallel).unwrap();
        assert_eq!(v.augmented.len(), 18);
        let mut labels = v.augmented.labels().to_vec();
        labels.sort_unstable();
        let mut expected = [d.labels(), d.labels(), d.labels()].concat();
        expected.sort_unstable();
        assert_eq!(labels, expected);
        for (a, b) in v.radial.pixels().iter().zip(d.pixels()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in v.random.pixels().iter().zip(d.pixels()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(v.unfiltered, d);
        assert_eq!(v.augmented.manifest().components.len(), 2);
    }

    #[test]
    fn radial_filter_is_idempotent_and_contracts_energy() {
        let img = noise_image(Shape::new(3, 16, 16), 4);
        let mask = radial_mask(16, 16, 3, 4.25).unwrap();
        let once = filter_image(&img, &mask).unwrap().image;
        let twice = filter_image(&once, &mask).unwrap().image;
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        let e0: f64 = img.data().iter().map(|v| v * v).sum();
        let e1: f64 = once.data().iter().map(|v| v * v).sum();
        assert!(e1 <= e0 + 1e-9);
    }
}
