//! Synthetic datasets with controlled spectral statistics.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetManifest, LabeledDataset, Variant};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::spectral::{shift_index, Shape, SpectralPlan};

/// Target spectrum `P(w) = amplitude / |w|^(2 - eta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawSpec {
    pub amplitude: f64,
    pub eta: f64,
    #[serde(with = "crate::seed_serde")]
    pub seed: u64,
}

impl PowerLawSpec {
    fn validate(&self, allow_zero: bool) -> Result<()> {
        let ok = self.amplitude.is_finite()
            && (self.amplitude > 0.0 || (allow_zero && self.amplitude == 0.0));
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "power-law amplitude must be {}, got {}",
                if allow_zero { ">= 0" } else { "> 0" },
                self.amplitude
            )));
        }
        if !self.eta.is_finite() || self.eta >= 2.0 {
            return Err(Error::InvalidParameter(format!(
                "power-law eta must be finite and < 2, got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// Signed frequency of standard index `k` on an axis of length `n`, in
/// `[-n/2, n/2)`.
fn signed_freq(k: usize, n: usize) -> f64 {
    shift_index(k, n) as f64 - (n / 2) as f64
}

/// Draws one power-law plane. Conjugate symmetry is enforced mode by mode
/// so the inverse transform is real up to rounding; the DC term is zero.
fn powerlaw_plane(plan: &SpectralPlan, spec: &PowerLawSpec, rng: &mut ChaCha8Rng, out: &mut [f64]) -> f64 {
    let (h, w) = (plan.height(), plan.width());
    let mut standard = vec![Complex64::default(); h * w];
    for k in 0..h {
        for l in 0..w {
            let (pk, pl) = ((h - k) % h, (w - l) % w);
            if (pk, pl) < (k, l) {
                continue;
            }
            let (fk, fl) = (signed_freq(k, h), signed_freq(l, w));
            let radius = (fk * fk + fl * fl).sqrt();
            if radius == 0.0 {
                continue;
            }
            let scale = (spec.amplitude / radius.powf(2.0 - spec.eta)).sqrt();
            if (pk, pl) == (k, l) {
                let g: f64 = rng.sample(StandardNormal);
                standard[k * w + l] = Complex64::new(scale * g, 0.0);
            } else {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let z = Complex64::new(re, im) * (scale / 2f64.sqrt());
                standard[k * w + l] = z;
                standard[pk * w + pl] = z.conj();
            }
        }
    }
    let mut centered = vec![Complex64::default(); h * w];
    for k in 0..h {
        for l in 0..w {
            centered[shift_index(k, h) * w + shift_index(l, w)] = standard[k * w + l];
        }
    }
    plan.inverse_plane(&centered, out)
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `count` images whose spectra have expected power
/// `A / |w|^(2 - eta)` at every non-DC mode, with `|w|` the l2 distance
/// from DC in centered coordinates. Image `i` is drawn from stream `i` of
/// ChaCha8 seeded with `spec.seed`. All labels are 0.
pub fn synth_powerlaw(
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    spec: &PowerLawSpec,
    exec: Execution,
) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    spec.validate(false)?;
    let shape = Shape::new(channels, height, width);
    shape.require_even()?;
    let plan = SpectralPlan::new(height, width)?;
    let mut pixels = vec![0.0; count * shape.len()];
    let mut residuals = vec![0.0f64; count];
    exec.for_each_chunk_pair_mut(&mut pixels, shape.len(), &mut residuals, 1, |i, img, res| {
        let mut rng = image_rng(spec.seed, i);
        for plane in img.chunks_exact_mut(shape.plane()) {
            res[0] = res[0].max(powerlaw_plane(&plan, spec, &mut rng, plane));
        }
    });
    let mut manifest = DatasetManifest::new("synthetic/powerlaw", shape, count, 1, Variant::Synthetic);
    manifest.max_imag_residual = residuals.iter().copied().fold(0.0, f64::max);
    manifest.parameters.insert("amplitude".into(), spec.amplitude);
    manifest.parameters.insert("eta".into(), spec.eta);
    manifest.parameters.insert("seed".into(), spec.seed as f64);
    LabeledDataset::new(pixels, vec![0; count], manifest)
}

/// Two-class testbed: every image is power-law noise plus a horizontal
/// cosine grating with a uniformly random phase. Class 0 carries the grating
/// at `cue_low` cycles per image width, class 1 at `cue_high`. Labels
/// alternate `0, 1, 0, ...`.
///
/// Both gratings occupy exactly the two modes `(0, +-f)` from DC, so a
/// radial mask with `cue_low <= r < cue_high` keeps the class-0 cue intact
/// and removes the class-1 cue completely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoClassSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub cue_low: usize,
    pub cue_high: usize,
    pub grating_amplitude: f64,
    pub noise: PowerLawSpec,
}

pub fn synth_twoclass(spec: &TwoClassSpec, exec: Execution) -> Result<LabeledDataset> {
    let TwoClassSpec {
        count,
        height,
        width,
        cue_low,
        cue_high,
        grating_amplitude,
        noise,
    } = *spec;
    if count == 0 {
        return Err(Error::InvalidParameter("count must be at least 1".into()));
    }
    let shape = Shape::new(1, height, width);
    shape.require_even()?;
    if !(cue_low < cue_high && 2 * cue_high < height.min(width)) {
        return Err(Error::InvalidParameter(format!(
            "cue frequencies must satisfy low < high < min(H, W)/2, got {cue_low}, {cue_high} for {height}x{width}"
        )));
    }
    if !grating_amplitude.is_finite() {
        return Err(Error::InvalidParameter("grating amplitude must be finite".into()));
    }
    noise.validate(true)?;
    let plan = SpectralPlan::new(height, width)?;
    let mut pixels = vec![0.0; count * shape.len()];
    let mut residuals = vec![0.0f64; count];
    exec.for_each_chunk_pair_mut(&mut pixels, shape.len(), &mut residuals, 1, |i, img, res| {
        let mut rng = image_rng(noise.seed, i);
        if noise.amplitude > 0.0 {
            res[0] = powerlaw_plane(&plan, &noise, &mut rng, img);
        }
        let freq = if i % 2 == 0 { cue_low } else { cue_high } as f64;
        let phase = rng.random::<f64>() * 2.0 * PI;
        for row in img.chunks_exact_mut(width) {
            for (x, v) in row.iter_mut().enumerate() {
                *v += grating_amplitude * (2.0 * PI * freq * x as f64 / width as f64 + phase).cos();
            }
        }
    });
    let labels = (0..count).map(|i| (i % 2) as u8).collect();
    let mut manifest = DatasetManifest::new("synthetic/twoclass", shape, count, 2, Variant::Unfiltered);
    manifest.max_imag_residual = residuals.iter().copied().fold(0.0, f64::max);
    let p = &mut manifest.parameters;
    p.insert("cue_low".into(), cue_low as f64);
    p.insert("cue_high".into(), cue_high as f64);
    p.insert("grating_amplitude".into(), grating_amplitude);
    p.insert("noise_amplitude".into(), noise.amplitude);
    p.insert("noise_eta".into(), noise.eta);
    p.insert("seed".into(), noise.seed as f64);
    LabeledDataset::new(pixels, labels, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{dft2, power_spectrum};

    fn spec(eta: f64, seed: u64) -> PowerLawSpec {
        PowerLawSpec {
            amplitude: 1.0,
            eta,
            seed,
        }
    }

    #[test]
    fn powerlaw_is_real_and_deterministic() {
        let a = synth_powerlaw(4, 3, 16, 16, &spec(0.0, 5), Execution::Parallel).unwrap();
        let b = synth_powerlaw(4, 3, 16, 16, &spec(0.0, 5), Execution::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.manifest().max_imag_residual < 1e-10);
        let c = synth_powerlaw(4, 3, 16, 16, &spec(0.0, 6), Execution::Parallel).unwrap();
        assert_ne!(a.pixels(), c.pixels());
    }

    #[test]
    fn powerlaw_rejects_bad_parameters() {
        assert!(synth_powerlaw(0, 1, 8, 8, &spec(0.0, 0), Execution::Sequential).is_err());
        let mut s = spec(0.0, 0);
        s.amplitude = 0.0;
        assert!(synth_powerlaw(1, 1, 8, 8, &s, Execution::Sequential).is_err());
        assert!(synth_powerlaw(1, 1, 7, 8, &spec(0.0, 0), Execution::Sequential).is_err());
    }

    #[test]
    fn powerlaw_has_zero_mean_and_expected_mode_power() {
        // Average power of the (0, 4) mode over many images approaches A/4^2.
        let d = synth_powerlaw(400, 1, 16, 16, &spec(0.0, 11), Execution::Parallel).unwrap();
        let mut acc = 0.0;
        for i in 0..d.len() {
            let img = d.image_tensor(i);
            assert!(img.data().iter().sum::<f64>().abs() < 1e-9);
            let p = power_spectrum(&dft2(&img).unwrap());
            acc += p[8 * 16 + 12];
        }
        let mean = acc / d.len() as f64;
        // Exponential distribution: std of the mean is 1/16/sqrt(400).
        assert!((mean - 1.0 / 16.0).abs() < 4.0 * (1.0 / 16.0) / 20.0, "{mean}");
    }

    fn twoclass(count: usize, noise_amp: f64) -> TwoClassSpec {
        TwoClassSpec {
            count,
            height: 16,
            width: 16,
            cue_low: 2,
            cue_high: 6,
            grating_amplitude: 1.0,
            noise: PowerLawSpec {
                amplitude: noise_amp,
                eta: 0.0,
                seed: 3,
            },
        }
    }

    #[test]
    fn twoclass_labels_balanced() {
        let d = synth_twoclass(&twoclass(7, 0.1), Execution::Parallel).unwrap();
        let ones = d.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!((d.len() - ones, ones), (4, 3));
        assert_eq!(d.manifest().parameters["grating_amplitude"], 1.0);
    }

    #[test]
    fn twoclass_pure_gratings_live_on_their_modes() {
        let d = synth_twoclass(&twoclass(2, 0.0), Execution::Sequential).unwrap();
        for (i, freq) in [(0usize, 2usize), (1, 6)] {
            let p = power_spectrum(&dft2(&d.image_tensor(i)).unwrap());
            let total: f64 = p.iter().sum();
            let cue = p[8 * 16 + 8 + freq] + p[8 * 16 + 8 - freq];
            assert!((cue - total).abs() < 1e-9 * total);
        }
    }

    #[test]
    fn twoclass_rejects_bad_frequencies() {
        let mut s = twoclass(4, 0.1);
        s.cue_low = 6;
        assert!(synth_twoclass(&s, Execution::Sequential).is_err());
        let mut s = twoclass(4, 0.1);
        s.cue_high = 8;
        assert!(synth_twoclass(&s, Execution::Sequential).is_err());
    }
}
