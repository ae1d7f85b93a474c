//! Unitary 2D DFT in centered (shifted) coordinates.
//!
//! Forward transform of one `H x W` plane:
//!
//! ```text
//! F[k, l] = 1/sqrt(HW) * sum_{h, w} X[h, w] * exp(-2 pi i (h k / H + w l / W))
//! ```
//!
//! followed by a spectral shift that moves index `k` to `(k + H/2) mod H`
//! (likewise for columns), so the DC component lands at `(H/2, W/2)`. The
//! inverse applies the inverse shift and carries the matching `1/sqrt(HW)`
//! factor, so the pair is unitary and Parseval holds on both sides.
//! Multi-channel tensors are transformed plane by plane.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `C x H x W` tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks the constraints the spectral code relies on: at least one
    /// channel and even, non-zero spatial dimensions.
    pub fn require_even(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Dimension("tensor must have at least one channel".into()));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "height and width must be even and non-zero, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real-valued `C x H x W` image, channel-plane order, row-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for shape {shape}", shape.len()),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(ImageTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        ImageTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.shape.height + h) * self.shape.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        let idx = (c * self.shape.height + h) * self.shape.width + w;
        self.data[idx] = value;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Verifies even dimensions and finite data.
    pub fn validate(&self) -> Result<()> {
        self.shape.require_even()?;
        require_finite(&self.data)
    }
}

pub(crate) fn require_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "value {} at flat index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// Complex spectrum in centered coordinates; `(H/2, W/2)` holds the DC term.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumTensor {
    shape: Shape,
    data: Vec<Complex64>,
}

impl SpectrumTensor {
    pub fn new(shape: Shape, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} coefficients for shape {shape}", shape.len()),
                actual: format!("{} coefficients", data.len()),
            });
        }
        Ok(SpectrumTensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> Complex64 {
        self.data[(c * self.shape.height + i) * self.shape.width + j]
    }
}

/// Centered position of standard frequency index `k` along an axis of even
/// length `n`.
pub fn shift_index(k: usize, n: usize) -> usize {
    (k + n / 2) % n
}

/// Standard frequency index of centered position `i` (inverse of
/// [`shift_index`]; identical to it for even `n`).
pub fn unshift_index(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

/// Centered index of the conjugate partner of centered index `(i, j)`.
///
/// For a real input, `S[i, j] = conj(S[partner(i, j)])`.
pub fn conjugate_partner(i: usize, j: usize, height: usize, width: usize) -> (usize, usize) {
    let k = unshift_index(i, height);
    let l = unshift_index(j, width);
    (
        shift_index((height - k) % height, height),
        shift_index((width - l) % width, width),
    )
}

/// Signed offset of centered index `i` from the DC position along an axis of
/// length `n`.
pub fn centered_offset(i: usize, n: usize) -> f64 {
    i as f64 - (n / 2) as f64
}

/// Cached FFT plans for one spatial size. Cheap to share across threads.
#[derive(Clone)]
pub struct SpectralPlan {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for SpectralPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralPlan")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl SpectralPlan {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        Shape::new(1, height, width).require_even()?;
        let mut planner = FftPlanner::new();
        Ok(SpectralPlan {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check_shape(&self, shape: Shape) -> Result<()> {
        shape.require_even()?;
        if shape.height != self.height || shape.width != self.width {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{} planes", self.height, self.width),
                actual: format!("{}x{} planes", shape.height, shape.width),
            });
        }
        Ok(())
    }

    /// Unnormalized 2D transform of a standard-ordered plane, in place.
    fn transform_plane(&self, buf: &mut [Complex64], forward: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        let scratch_len = row
            .get_inplace_scratch_len()
            .max(col.get_inplace_scratch_len());
        let mut scratch = vec![Complex64::default(); scratch_len];
        for r in buf.chunks_exact_mut(w) {
            row.process_with_scratch(r, &mut scratch);
        }
        let mut column = vec![Complex64::default(); h];
        for j in 0..w {
            for (i, v) in column.iter_mut().enumerate() {
                *v = buf[i * w + j];
            }
            col.process_with_scratch(&mut column, &mut scratch);
            for (i, v) in column.iter().enumerate() {
                buf[i * w + j] = *v;
            }
        }
    }

    /// Centered unitary spectrum of one real plane.
    pub fn forward_plane(&self, plane: &[f64], out: &mut [Complex64]) {
        let (h, w) = (self.height, self.width);
        let mut buf: Vec<Complex64> = plane.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform_plane(&mut buf, true);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        for k in 0..h {
            let ci = shift_index(k, h);
            for l in 0..w {
                out[ci * w + shift_index(l, w)] = buf[k * w + l] * norm;
            }
        }
    }

    /// Inverse of [`SpectralPlan::forward_plane`]. Writes the real part into
    /// `out` and returns the largest discarded imaginary magnitude.
    pub fn inverse_plane(&self, centered: &[Complex64], out: &mut [f64]) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut buf = vec![Complex64::default(); h * w];
        for i in 0..h {
            let k = unshift_index(i, h);
            for j in 0..w {
                buf[k * w + unshift_index(j, w)] = centered[i * w + j];
            }
        }
        self.transform_plane(&mut buf, false);
        let norm = 1.0 / ((h * w) as f64).sqrt();
        let mut residual = 0.0f64;
        for (o, v) in out.iter_mut().zip(&buf) {
            *o = v.re * norm;
            residual = residual.max((v.im * norm).abs());
        }
        residual
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<SpectrumTensor> {
        self.check_shape(image.shape())?;
        require_finite(image.data())?;
        let shape = image.shape();
        let p = shape.plane();
        let mut data = vec![Complex64::default(); shape.len()];
        for (c, out) in data.chunks_exact_mut(p).enumerate() {
            self.forward_plane(image.plane(c), out);
        }
        SpectrumTensor::new(shape, data)
    }

    pub fn inverse(&self, spectrum: &SpectrumTensor) -> Result<(ImageTensor, f64)> {
        self.check_shape(spectrum.shape())?;
        let shape = spectrum.shape();
        let p = shape.plane();
        let mut data = vec![0.0; shape.len()];
        let mut residual = 0.0f64;
        for (out, spec) in data.chunks_exact_mut(p).zip(spectrum.data().chunks_exact(p)) {
            residual = residual.max(self.inverse_plane(spec, out));
        }
        Ok((ImageTensor::new(shape, data)?, residual))
    }
}

/// Centered unitary 2D DFT, computed per channel.
pub fn dft2(image: &ImageTensor) -> Result<SpectrumTensor> {
    let shape = image.shape();
    shape.require_even()?;
    SpectralPlan::new(shape.height, shape.width)?.forward(image)
}

/// Inverse of [`dft2`]: returns the real part and the maximum absolute
/// imaginary component that was discarded.
pub fn idft2(spectrum: &SpectrumTensor) -> Result<(ImageTensor, f64)> {
    let shape = spectrum.shape();
    shape.require_even()?;
    SpectralPlan::new(shape.height, shape.width)?.inverse(spectrum)
}

/// Elementwise `|S|^2`, same layout as the spectrum.
pub fn power_spectrum(spectrum: &SpectrumTensor) -> Vec<f64> {
    spectrum.data().iter().map(|z| z.norm_sqr()).collect()
}
