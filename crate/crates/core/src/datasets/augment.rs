//! Random horizontal flips and zero-padded random crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::spectral::Shape;

const SIDE: usize = 32;
const PAD: usize = 4;

/// Flip flag and crop offset into the 40x40 zero-padded image. An offset of
/// `(4, 4)` without flip reproduces the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub flip: bool,
    pub dy: usize,
    pub dx: usize,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        dy: PAD,
        dx: PAD,
    };

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        AugmentParams {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
        }
    }
}

/// Writes the augmented version of one `C x 32 x 32` image into `dst`.
pub fn augment_image<T: Copy + Default>(src: &[T], channels: usize, params: AugmentParams, dst: &mut [T]) {
    let plane = SIDE * SIDE;
    for c in 0..channels {
        let s = &src[c * plane..(c + 1) * plane];
        let d = &mut dst[c * plane..(c + 1) * plane];
        for y in 0..SIDE {
            let sy = (y + params.dy).checked_sub(PAD).filter(|&v| v < SIDE);
            for x in 0..SIDE {
                let sx = (x + params.dx).checked_sub(PAD).filter(|&v| v < SIDE);
                d[y * SIDE + x] = match (sy, sx) {
                    (Some(sy), Some(sx)) => {
                        let col = if params.flip { SIDE - 1 - sx } else { sx };
                        s[sy * SIDE + col]
                    }
                    _ => T::default(),
                };
            }
        }
    }
}

/// Augments a batch of `C x 32 x 32` images stored contiguously. Each image
/// is independently flipped with probability 1/2, zero-padded to 40x40 and
/// cropped back to 32x32 at a uniform offset. Fully determined by `seed`.
pub fn augment_batch<T: Copy + Default>(images: &[T], shape: Shape, seed: u64) -> Result<Vec<T>> {
    if shape.height != SIDE || shape.width != SIDE {
        return Err(Error::Dimension(format!(
            "augmentation expects 32x32 images, got {}x{}",
            shape.height, shape.width
        )));
    }
    let n = shape.len();
    if !images.len().is_multiple_of(n) {
        return Err(Error::ShapeMismatch {
            expected: format!("a multiple of {n} values"),
            actual: format!("{} values", images.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![T::default(); images.len()];
    for (src, dst) in images.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        augment_image(src, shape.channels, AugmentParams::draw(&mut rng), dst);
    }
    Ok(out)
}
