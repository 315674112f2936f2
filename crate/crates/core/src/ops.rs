//! Per-sample CHW kernels: same-padded stride-1 convolution (im2col + GEMM),
//! 2×2 max pooling and 2× nearest-neighbour upsampling, each with its
//! backward pass.

use crate::tensor::Real;

/// Leading pad for a same-size convolution. Even kernels pad one extra
/// row/column on the trailing side.
fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

/// Unfolds `input` (c×h×w) into a `(c·k·k) × (h·w)` patch matrix.
pub(crate) fn im2col<F: Real>(input: &[F], c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pb = pad_before(k) as isize;
    let plane = h * w;
    let mut col = vec![F::zero(); c * k * k * plane];
    for ci in 0..c {
        let src = &input[ci * plane..(ci + 1) * plane];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let dx = kw as isize - pb;
                // valid output columns: 0 <= x + dx < w
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + kh as isize - pb;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = sy as usize * w;
                    let sx0 = (x0 as isize + dx) as usize;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[srow + sx0..srow + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Folds a patch-matrix gradient back onto the input plane (adjoint of
/// [`im2col`]).
pub(crate) fn col2im<F: Real>(col: &[F], c: usize, h: usize, w: usize, k: usize) -> Vec<F> {
    let pb = pad_before(k) as isize;
    let plane = h * w;
    let mut out = vec![F::zero(); c * plane];
    for ci in 0..c {
        let dst = &mut out[ci * plane..(ci + 1) * plane];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &col[row * plane..(row + 1) * plane];
                let dx = kw as isize - pb;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + kh as isize - pb;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = sy as usize * w;
                    let dx0 = (x0 as isize + dx) as usize;
                    for (d, s) in dst[drow + dx0..drow + dx0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                    {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    out
}

/// Geometry of one convolution layer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

pub(crate) fn conv_forward<F: Real>(
    shape: ConvShape,
    input: &[F],
    h: usize,
    w: usize,
    weight: &[F],
    bias: &[F],
) -> Vec<F> {
    let plane = h * w;
    let patch = shape.c_in * shape.k * shape.k;
    let mut out = vec![F::zero(); shape.c_out * plane];
    for (co, b) in bias.iter().enumerate() {
        out[co * plane..(co + 1) * plane].fill(*b);
    }
    if shape.k == 1 {
        F::matmul(shape.c_out, patch, plane, weight, false, input, false, &mut out, true);
    } else {
        let col = im2col(input, shape.c_in, h, w, shape.k);
        F::matmul(shape.c_out, patch, plane, weight, false, &col, false, &mut out, true);
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<F: Real>(
    shape: ConvShape,
    input: &[F],
    h: usize,
    w: usize,
    weight: &[F],
    grad_out: &[F],
    grad_weight: &mut [F],
    grad_bias: &mut [F],
    want_input_grad: bool,
) -> Option<Vec<F>> {
    let plane = h * w;
    let patch = shape.c_in * shape.k * shape.k;
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let s: F = grad_out[co * plane..(co + 1) * plane].iter().copied().sum();
        *gb = *gb + s;
    }
    let col_owned;
    let col: &[F] = if shape.k == 1 {
        input
    } else {
        col_owned = im2col(input, shape.c_in, h, w, shape.k);
        &col_owned
    };
    // dW (c_out × patch) += dY (c_out × plane) · colᵀ (plane × patch)
    F::matmul(shape.c_out, plane, patch, grad_out, false, col, true, grad_weight, true);
    if !want_input_grad {
        return None;
    }
    // dcol (patch × plane) = Wᵀ (patch × c_out) · dY (c_out × plane)
    let mut dcol = vec![F::zero(); patch * plane];
    F::matmul(
        patch,
        shape.c_out,
        plane,
        weight,
        true,
        grad_out,
        false,
        &mut dcol,
        false,
    );
    if shape.k == 1 {
        Some(dcol)
    } else {
        Some(col2im(&dcol, shape.c_in, h, w, shape.k))
    }
}

pub(crate) fn relu_in_place<F: Real>(v: &mut [F]) {
    for x in v {
        if *x < F::zero() {
            *x = F::zero();
        }
    }
}

/// Masks `grad` by the post-activation values `out` (gradient flows where
/// the unit was active).
pub(crate) fn relu_backward_in_place<F: Real>(out: &[F], grad: &mut [F]) {
    for (g, o) in grad.iter_mut().zip(out) {
        if *o <= F::zero() {
            *g = F::zero();
        }
    }
}

/// 2×2 max pooling; returns the pooled map and, per output cell, the flat
/// index of the winning input element.
pub(crate) fn maxpool2<F: Real>(input: &[F], c: usize, h: usize, w: usize) -> (Vec<F>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        let base = ci * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<F: Real>(grad_out: &[F], argmax: &[u32], input_len: usize) -> Vec<F> {
    let mut grad = vec![F::zero(); input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad[i as usize] = grad[i as usize] + *g;
    }
    grad
}

pub(crate) fn upsample2<F: Real>(input: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * oh * ow];
    for ci in 0..c {
        for y in 0..oh {
            let src = &input[ci * h * w + (y / 2) * w..ci * h * w + (y / 2) * w + w];
            let dst = &mut out[ci * oh * ow + y * ow..ci * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h`, `w` are the pre-upsampling dims.
pub(crate) fn upsample2_backward<F: Real>(grad_out: &[F], c: usize, h: usize, w: usize) -> Vec<F> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = vec![F::zero(); c * h * w];
    for ci in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = &mut grad[ci * h * w + (y / 2) * w + x / 2];
                *g = *g + grad_out[ci * oh * ow + y * ow + x];
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop convolution used as an oracle for the GEMM path.
    fn conv_naive(s: ConvShape, x: &[f64], h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let pb = pad_before(s.k) as isize;
        let mut out = vec![0.0; s.c_out * h * w];
        for co in 0..s.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[co];
                    for ci in 0..s.c_in {
                        for kh in 0..s.k {
                            for kw in 0..s.k {
                                let sy = y as isize + kh as isize - pb;
                                let sx = xx as isize + kw as isize - pb;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * s.c_in + ci) * s.k + kh) * s.k + kw]
                                    * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let v = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15 ^ salt);
                ((v >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for (k, c_in, c_out, h, w) in [(3, 2, 3, 5, 4), (1, 3, 2, 4, 4), (2, 2, 2, 4, 6), (5, 1, 2, 6, 6)] {
            let s = ConvShape { c_in, c_out, k };
            let x = pseudo(c_in * h * w, 1);
            let wt = pseudo(s.weight_len(), 2);
            let b = pseudo(c_out, 3);
            let fast = conv_forward(s, &x, h, w, &wt, &b);
            let slow = conv_naive(s, &x, h, w, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 3);
        for k in [1, 2, 3] {
            let x = pseudo(c * h * w, 4);
            let y = pseudo(c * k * k * h * w, 5);
            let lhs: f64 = im2col(&x, c, h, w, k).iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(col2im(&y, c, h, w, k)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_and_upsampling() {
        let x = vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 8.0];
        let (p, arg) = maxpool2(&x, 1, 2, 4);
        assert_eq!(p, vec![5.0, 8.0]);
        assert_eq!(arg, vec![1, 7]);
        assert_eq!(
            maxpool2_backward(&[1.0, 2.0], &arg, 8),
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]
        );

        let u = upsample2(&[1.0, 2.0], 1, 1, 2);
        assert_eq!(u, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(upsample2_backward(&u, 1, 1, 2), vec![4.0, 8.0]);
    }
}
