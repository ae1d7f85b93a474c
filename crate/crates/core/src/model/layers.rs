//! Batched layer kernels on `N x C x H x W` buffers.

use crate::exec::Execution;
use crate::model::scalar::Scalar;

/// Samples per partial weight-gradient sum. Partials are reduced in group
/// order, so gradients do not depend on the number of worker threads.
const GRAD_GROUP: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        ConvGeom {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        }
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_plane()
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.patch()
    }
}

fn source_index(o: usize, k: usize, g: &ConvGeom, len: usize) -> Option<usize> {
    (o * g.stride + k).checked_sub(g.pad).filter(|&v| v < len)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.in_c {
        let src = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match source_index(oy, ky, g, g.in_h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match source_index(ox, kx, g, g.in_w) {
                                    Some(ix) => src[iy * g.in_w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    dx.fill(T::zero());
    for ci in 0..g.in_c {
        let dst = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let Some(iy) = source_index(oy, ky, g, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = source_index(ox, kx, g, g.in_w) {
                            dst[iy * g.in_w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    input: &[T],
    weight: &[T],
    bias: &[T],
    exec: Execution,
) -> Vec<T> {
    debug_assert_eq!(input.len(), n * g.in_len());
    let mut out = vec![T::zero(); n * g.out_len()];
    let plane = g.out_plane();
    exec.for_each_chunk_mut(&mut out, g.out_len(), |i, o| {
        let mut cols = vec![T::zero(); g.patch() * plane];
        im2col(g, &input[i * g.in_len()..(i + 1) * g.in_len()], &mut cols);
        T::gemm(g.out_c, g.patch(), plane, T::one(), weight, false, &cols, false, T::zero(), o);
        for (row, &b) in o.chunks_exact_mut(plane).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    input: &[T],
    weight: &[T],
    dout: &[T],
    need_input_grad: bool,
    exec: Execution,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let groups = n.div_ceil(GRAD_GROUP);
    let partials = exec.map_indexed(groups, |gi| {
        let start = gi * GRAD_GROUP;
        let end = (start + GRAD_GROUP).min(n);
        let mut dw = vec![T::zero(); g.weight_len()];
        let mut db = vec![T::zero(); g.out_c];
        let mut dx = if need_input_grad {
            vec![T::zero(); (end - start) * g.in_len()]
        } else {
            Vec::new()
        };
        let mut cols = vec![T::zero(); g.patch() * plane];
        let mut dcols = vec![T::zero(); g.patch() * plane];
        for s in start..end {
            let x = &input[s * g.in_len()..(s + 1) * g.in_len()];
            let dy = &dout[s * g.out_len()..(s + 1) * g.out_len()];
            im2col(g, x, &mut cols);
            T::gemm(g.out_c, plane, g.patch(), T::one(), dy, false, &cols, true, T::one(), &mut dw);
            for (b, row) in db.iter_mut().zip(dy.chunks_exact(plane)) {
                *b += row.iter().copied().sum::<T>();
            }
            if need_input_grad {
                T::gemm(g.patch(), g.out_c, plane, T::one(), weight, true, dy, false, T::zero(), &mut dcols);
                let off = (s - start) * g.in_len();
                col2im(g, &dcols, &mut dx[off..off + g.in_len()]);
            }
        }
        (dw, db, dx)
    });
    let mut weight_grad = vec![T::zero(); g.weight_len()];
    let mut bias_grad = vec![T::zero(); g.out_c];
    let mut input_grad = Vec::with_capacity(if need_input_grad { n * g.in_len() } else { 0 });
    for (dw, db, dx) in partials {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, &b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        input_grad.extend_from_slice(&dx);
    }
    ConvGrads {
        weight: weight_grad,
        bias: bias_grad,
        input: need_input_grad.then_some(input_grad),
    }
}

/// Normalized activations and inverse standard deviations kept from a
/// training-mode batch-norm forward pass.
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f64>,
}

pub(crate) fn bn_forward_train<T: Scalar>(
    n: usize,
    c: usize,
    plane: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BnCache<T>, BnBatchStats) {
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let row = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            mean[ch] += row.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for s in 0..n {
        for ch in 0..c {
            let row = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
            let m = mean[ch];
            var[ch] += row.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / count).collect();
    let inv_std: Vec<T> = biased.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            let m = T::of(mean[ch]);
            for ((yo, xo), &xi) in y[range.clone()].iter_mut().zip(&mut xhat[range.clone()]).zip(&x[range]) {
                *xo = (xi - m) * inv_std[ch];
                *yo = gamma[ch] * *xo + beta[ch];
            }
        }
    }
    let unbiased = if count > 1.0 {
        var.iter().map(|v| v / (count - 1.0)).collect()
    } else {
        biased
    };
    (
        y,
        BnCache { xhat, inv_std },
        BnBatchStats {
            mean,
            var: unbiased,
        },
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_eval<T: Scalar>(
    n: usize,
    c: usize,
    plane: usize,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Vec<T> {
    let scale: Vec<T> = (0..c)
        .map(|ch| gamma[ch] / (running_var[ch] + T::of(eps)).sqrt())
        .collect();
    let mut y = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for (yo, &xi) in y[range.clone()].iter_mut().zip(&x[range]) {
                *yo = (xi - running_mean[ch]) * scale[ch] + beta[ch];
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    n: usize,
    c: usize,
    plane: usize,
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            for (&g, &xh) in dy[range.clone()].iter().zip(&cache.xhat[range]) {
                dgamma[ch] += (g * xh).as_f64();
                dbeta[ch] += g.as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
            let k = gamma[ch] * cache.inv_std[ch] / T::of(count);
            let db = T::of(dbeta[ch]);
            let dg = T::of(dgamma[ch]);
            let cnt = T::of(count);
            for ((o, &g), &xh) in dx[range.clone()].iter_mut().zip(&dy[range.clone()]).zip(&cache.xhat[range]) {
                *o = k * (cnt * g - db - xh * dg);
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::of).collect(),
        dbeta.into_iter().map(T::of).collect(),
    )
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// Zeroes gradient entries whose ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

pub(crate) fn global_avg_pool<T: Scalar>(n: usize, c: usize, plane: usize, x: &[T]) -> Vec<T> {
    let inv = T::of(1.0 / plane as f64);
    x.chunks_exact(plane)
        .take(n * c)
        .map(|row| row.iter().copied().sum::<T>() * inv)
        .collect()
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(plane: usize, dpooled: &[T]) -> Vec<T> {
    let inv = T::of(1.0 / plane as f64);
    dpooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect()
}

/// `out[n x k] = x[n x f] * W^T + b` with `W` stored `k x f`.
pub(crate) fn linear_forward<T: Scalar>(n: usize, f: usize, k: usize, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    T::gemm(n, f, k, T::one(), x, false, weight, true, T::zero(), &mut out);
    for row in out.chunks_exact_mut(k) {
        row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
    }
    out
}

/// Returns `(dx, dW, db)`.
pub(crate) fn linear_backward<T: Scalar>(
    n: usize,
    f: usize,
    k: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, k, f, T::one(), dout, false, weight, false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); k * f];
    T::gemm(k, n, f, T::one(), dout, true, x, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); k];
    for row in dout.chunks_exact(k) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for co in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[co];
                    for ci in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((co * g.in_c + ci) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ci * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_for_several_geometries() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0)] {
            let g = ConvGeom::new(3, 4, k, stride, pad, 6, 8);
            let x: Vec<f64> = (0..2 * g.in_len()).map(|i| ((i * 37 % 23) as f64) / 7.0 - 1.5).collect();
            let w: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 11 % 13) as f64) / 13.0 - 0.5).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let out = conv_forward(&g, 2, &x, &w, &b, Execution::Parallel);
            for s in 0..2 {
                let expected = naive_conv(&g, &x[s * g.in_len()..(s + 1) * g.in_len()], &w, &b);
                for (a, e) in out[s * g.out_len()..(s + 1) * g.out_len()].iter().zip(&expected) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_is_schedule_independent() {
        let g = ConvGeom::new(2, 3, 3, 1, 1, 4, 4);
        let n = 19;
        let x: Vec<f32> = (0..n * g.in_len()).map(|i| ((i * 31 % 17) as f32) / 17.0).collect();
        let w: Vec<f32> = (0..g.weight_len()).map(|i| ((i * 7 % 5) as f32) / 5.0).collect();
        let dy: Vec<f32> = (0..n * g.out_len()).map(|i| ((i * 13 % 11) as f32) / 11.0 - 0.5).collect();
        let a = conv_backward(&g, n, &x, &w, &dy, true, Execution::Parallel);
        let b = conv_backward(&g, n, &x, &w, &dy, true, Execution::Sequential);
        assert_eq!(a.weight, b.weight);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.input, b.input);
    }

    #[test]
    fn pool_and_linear_shapes() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        assert_eq!(global_avg_pool(1, 2, 4, &x), vec![2.5, 6.5]);
        let d = global_avg_pool_backward(4, &[4.0f64, 8.0]);
        assert_eq!(d, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let out = linear_forward(1, 2, 3, &[1.0f64, 2.0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[0.5, 0.0, -1.0]);
        assert_eq!(out, vec![1.5, 2.0, 2.0]);
    }
}
