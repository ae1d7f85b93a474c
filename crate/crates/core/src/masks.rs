//! Binary Fourier masks in centered coordinates.
//!
//! Two families are supported: a radial low-pass mask that keeps every mode
//! within an inclusive l2 radius of the DC position, and a uniformly random
//! mask that drops each `(channel, row, col)` mode independently.
//!
//! Random masks are drawn from ChaCha8 seeded with the mask seed; channel
//! `c` uses stream `c` of that generator and visits its plane in row-major
//! order, drawing one `f64` in `[0, 1)` per mode and dropping the mode when
//! the draw is below `p`. This makes masks reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{centered_offset, conjugate_partner, Shape};

/// How a mask was generated. Masks are always regenerated from this record,
/// never stored as bitmaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskProvenance {
    Radial { radius: f64 },
    Random {
        drop_prob: f64,
        #[serde(with = "crate::seed_serde")]
        seed: u64,
    },
}

impl MaskProvenance {
    pub fn regenerate(&self, shape: Shape) -> Result<FourierMask> {
        match *self {
            MaskProvenance::Radial { radius } => {
                radial_mask(shape.height, shape.width, shape.channels, radius)
            }
            MaskProvenance::Random { drop_prob, seed } => {
                random_mask(shape.height, shape.width, shape.channels, drop_prob, seed)
            }
        }
    }

    pub fn label(&self) -> String {
        match *self {
            MaskProvenance::Radial { radius } => format!("radial(r={radius})"),
            MaskProvenance::Random { drop_prob, seed } => {
                format!("random(p={drop_prob}, seed={seed})")
            }
        }
    }
}

/// `{0, 1}` mask, `C x H x W`, centered coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierMask {
    shape: Shape,
    bits: Vec<u8>,
    provenance: MaskProvenance,
}

impl FourierMask {
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    /// Raw entries, each exactly 0 or 1.
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn plane(&self, c: usize) -> &[u8] {
        let p = self.shape.plane();
        &self.bits[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> u8 {
        self.bits[(c * self.shape.height + i) * self.shape.width + j]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn keep_fraction(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.kept() as f64 / self.bits.len() as f64
    }

    /// True when every kept mode's conjugate partner is kept too, which is
    /// what makes the filtered image exactly real.
    pub fn is_conjugate_symmetric(&self) -> bool {
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        (0..channels).all(|c| {
            (0..height).all(|i| {
                (0..width).all(|j| {
                    let (pi, pj) = conjugate_partner(i, j, height, width);
                    self.get(c, i, j) == self.get(c, pi, pj)
                })
            })
        })
    }
}

/// Fraction of ones in the mask.
pub fn keep_fraction(mask: &FourierMask) -> f64 {
    mask.keep_fraction()
}

/// Low-pass mask: entry `(c, i, j)` is 1 iff the l2 distance from `(i, j)`
/// to `(H/2, W/2)` is at most `radius` (inclusive). Identical across
/// channels.
pub fn radial_mask(height: usize, width: usize, channels: usize, radius: f64) -> Result<FourierMask> {
    let shape = Shape::new(channels, height, width);
    shape.require_even()?;
    if !radius.is_finite() || radius < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "mask radius must be finite and >= 0, got {radius}"
        )));
    }
    let mut plane = vec![0u8; shape.plane()];
    for i in 0..height {
        let di = centered_offset(i, height);
        for j in 0..width {
            let dj = centered_offset(j, width);
            if (di * di + dj * dj).sqrt() <= radius {
                plane[i * width + j] = 1;
            }
        }
    }
    let bits = plane.repeat(channels);
    Ok(FourierMask {
        shape,
        bits,
        provenance: MaskProvenance::Radial { radius },
    })
}

/// Uniformly random mask: each mode independently dropped with probability
/// `drop_prob`, channels drawn from independent streams of the seeded
/// generator.
pub fn random_mask(
    height: usize,
    width: usize,
    channels: usize,
    drop_prob: f64,
    seed: u64,
) -> Result<FourierMask> {
    let shape = Shape::new(channels, height, width);
    shape.require_even()?;
    if !(0.0..=1.0).contains(&drop_prob) {
        return Err(Error::InvalidParameter(format!(
            "drop probability must lie in [0, 1], got {drop_prob}"
        )));
    }
    let mut bits = Vec::with_capacity(shape.len());
    for c in 0..channels {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        bits.extend((0..shape.plane()).map(|_| u8::from(rng.random::<f64>() >= drop_prob)));
    }
    Ok(FourierMask {
        shape,
        bits,
        provenance: MaskProvenance::Random { drop_prob, seed },
    })
}
