//! Direct 2-D convolution with stride, zero padding and dilation, plus the
//! three backward kernels (input, weight, bias).
//!
//! The stride-1 paths work on contiguous row slices so the innermost loops
//! vectorize; stride > 1 falls back to a plain element loop. Parallelism is
//! over disjoint output regions, keeping results independent of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::{debug_check_finite, Shape, Tensor, TensorError};

/// Convolution hyperparameters. Kernel size comes from the weight tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        assert!(dilation >= 1, "dilation must be positive");
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with the padding that preserves spatial size for an odd
    /// kernel: pad = dilation * (k - 1) / 2.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        assert!(kernel % 2 == 1, "same-padding requires an odd kernel");
        ConvSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

/// Output extent along one spatial dimension.
fn out_extent(input: usize, kernel: usize, spec: &ConvSpec) -> Option<usize> {
    let effective = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if effective > padded {
        return None;
    }
    Some((padded - effective) / spec.stride + 1)
}

/// Shape of `conv2d(input, weight)` output, with full validation.
pub fn conv2d_out_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    spec: &ConvSpec,
) -> Result<Shape, TensorError> {
    if input.c != weight.c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: weight,
            dim: "input channels",
        });
    }
    if let Some(b) = bias {
        if b.n != 1 || b.c != weight.n || b.h != 1 || b.w != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: b,
                rhs: weight,
                dim: "bias channels",
            });
        }
    }
    let oh = out_extent(input.h, weight.h, spec).ok_or(TensorError::KernelTooLarge {
        op: "conv2d",
        kernel: weight.h,
        dilation: spec.dilation,
        padding: spec.padding,
        h: input.h,
        w: input.w,
    })?;
    let ow = out_extent(input.w, weight.w, spec).ok_or(TensorError::KernelTooLarge {
        op: "conv2d",
        kernel: weight.w,
        dilation: spec.dilation,
        padding: spec.padding,
        h: input.h,
        w: input.w,
    })?;
    Ok(Shape::new(input.n, weight.n, oh, ow))
}

/// Valid output range `lo..hi` for which `pos*stride - padding + tap` lands
/// inside `0..extent`, clipped to `0..out`.
#[inline]
fn valid_range(out: usize, extent: usize, padding: usize, tap: usize, stride: usize) -> (usize, usize) {
    debug_assert_eq!(stride, 1);
    let _ = stride;
    let lo = padding.saturating_sub(tap);
    let hi = (extent + padding - tap).min(out);
    (lo.min(hi), hi)
}

/// input (n, ic, h, w) * weight (oc, ic, kh, kw) + bias (1, oc, 1, 1).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>, TensorError> {
    let ishape = input.shape();
    let wshape = weight.shape();
    let oshape = conv2d_out_shape(ishape, wshape, bias.map(|b| b.shape()), spec)?;
    let (h, w) = (ishape.h, ishape.w);
    let (kh, kw) = (wshape.h, wshape.w);
    let (oh, ow) = (oshape.h, oshape.w);
    let (pad, dil, stride) = (spec.padding, spec.dilation, spec.stride);

    let mut out = Tensor::zeros(oshape);
    let in_data = input.data();
    let w_data = weight.data();
    let plane = oh * ow;

    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, out_plane)| {
            let n = chunk / oshape.c;
            let oc = chunk % oshape.c;
            if let Some(b) = bias {
                out_plane.fill(b.data()[oc]);
            }
            for ic in 0..ishape.c {
                let in_plane = &in_data[ishape.at(n, ic, 0, 0)..ishape.at(n, ic, 0, 0) + h * w];
                let w_base = wshape.at(oc, ic, 0, 0);
                if stride == 1 {
                    for ky in 0..kh {
                        for oy in 0..oh {
                            let iy = (oy + ky * dil) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * w..iy as usize * w + w];
                            let out_row = &mut out_plane[oy * ow..oy * ow + ow];
                            for kx in 0..kw {
                                let wv = w_data[w_base + ky * kw + kx];
                                let (lo, hi) = valid_range(ow, w, pad, kx * dil, 1);
                                if lo >= hi {
                                    continue;
                                }
                                let off = (kx * dil) as isize - pad as isize;
                                let src = &in_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (o, i) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * *i;
                                }
                            }
                        }
                    }
                } else {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for ky in 0..kh {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += w_data[w_base + ky * kw + kx]
                                        * in_plane[iy as usize * w + ix as usize];
                                }
                            }
                            out_plane[oy * ow + ox] += acc;
                        }
                    }
                }
            }
        });

    debug_check_finite("conv2d", &out);
    Ok(out)
}

/// dL/d(input). Requires the forward spec and the original shapes.
pub fn conv2d_grad_input<T: Scalar>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    input_shape: Shape,
    spec: &ConvSpec,
) -> Tensor<T> {
    let gshape = grad_out.shape();
    let wshape = weight.shape();
    let (h, w) = (input_shape.h, input_shape.w);
    let (kh, kw) = (wshape.h, wshape.w);
    let (oh, ow) = (gshape.h, gshape.w);
    let (pad, dil, stride) = (spec.padding, spec.dilation, spec.stride);

    let mut din = Tensor::zeros(input_shape);
    let g_data = grad_out.data();
    let w_data = weight.data();
    let batch_plane = input_shape.c * h * w;

    din.data_mut()
        .par_chunks_mut(batch_plane)
        .enumerate()
        .for_each(|(n, din_batch)| {
            for oc in 0..gshape.c {
                let g_plane = &g_data[gshape.at(n, oc, 0, 0)..gshape.at(n, oc, 0, 0) + oh * ow];
                for ic in 0..input_shape.c {
                    let din_plane = &mut din_batch[ic * h * w..(ic + 1) * h * w];
                    let w_base = wshape.at(oc, ic, 0, 0);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = w_data[w_base + ky * kw + kx];
                            if stride == 1 {
                                for oy in 0..oh {
                                    let iy = (oy + ky * dil) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let (lo, hi) = valid_range(ow, w, pad, kx * dil, 1);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let off = (kx * dil) as isize - pad as isize;
                                    let row = iy as usize * w;
                                    let dst = &mut din_plane[row + (lo as isize + off) as usize
                                        ..row + (hi as isize + off) as usize];
                                    for (d, g) in dst.iter_mut().zip(&g_plane[oy * ow + lo..oy * ow + hi]) {
                                        *d += wv * *g;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        din_plane[iy as usize * w + ix as usize] +=
                                            wv * g_plane[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    din
}

/// dL/d(weight).
pub fn conv2d_grad_weight<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight_shape: Shape,
    spec: &ConvSpec,
) -> Tensor<T> {
    let gshape = grad_out.shape();
    let ishape = input.shape();
    let (h, w) = (ishape.h, ishape.w);
    let (kh, kw) = (weight_shape.h, weight_shape.w);
    let (oh, ow) = (gshape.h, gshape.w);
    let (pad, dil, stride) = (spec.padding, spec.dilation, spec.stride);

    let mut dw = Tensor::zeros(weight_shape);
    let g_data = grad_out.data();
    let in_data = input.data();
    let per_oc = weight_shape.c * kh * kw;

    dw.data_mut()
        .par_chunks_mut(per_oc)
        .enumerate()
        .for_each(|(oc, dw_oc)| {
            for ic in 0..weight_shape.c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for n in 0..gshape.n {
                            let g_plane =
                                &g_data[gshape.at(n, oc, 0, 0)..gshape.at(n, oc, 0, 0) + oh * ow];
                            let in_plane =
                                &in_data[ishape.at(n, ic, 0, 0)..ishape.at(n, ic, 0, 0) + h * w];
                            if stride == 1 {
                                for oy in 0..oh {
                                    let iy = (oy + ky * dil) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let (lo, hi) = valid_range(ow, w, pad, kx * dil, 1);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let off = (kx * dil) as isize - pad as isize;
                                    let in_row = &in_plane[iy as usize * w + (lo as isize + off) as usize
                                        ..iy as usize * w + (hi as isize + off) as usize];
                                    for (g, i) in g_plane[oy * ow + lo..oy * ow + hi].iter().zip(in_row) {
                                        acc += *g * *i;
                                    }
                                }
                            } else {
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += g_plane[oy * ow + ox]
                                            * in_plane[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                        }
                        dw_oc[(ic * kh + ky) * kw + kx] = acc;
                    }
                }
            }
        });

    dw
}

/// dL/d(bias): per-channel sum of the output gradient.
pub fn conv2d_grad_bias<T: Scalar>(grad_out: &Tensor<T>) -> Tensor<T> {
    let gshape = grad_out.shape();
    let mut db = Tensor::zeros(Shape::new(1, gshape.c, 1, 1));
    let g = grad_out.data();
    for n in 0..gshape.n {
        for c in 0..gshape.c {
            let base = gshape.at(n, c, 0, 0);
            let mut acc = T::zero();
            for v in &g[base..base + gshape.h * gshape.w] {
                acc += *v;
            }
            db.data_mut()[c] += acc;
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force sliding-window oracle, independent of the kernel above.
    fn conv_oracle(
        input: &Tensor<f64>,
        weight: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: &ConvSpec,
    ) -> Tensor<f64> {
        let is = input.shape();
        let ws = weight.shape();
        let os = conv2d_out_shape(is, ws, bias.map(|b| b.shape()), spec).unwrap();
        let mut out = Tensor::zeros(os);
        for n in 0..os.n {
            for oc in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = bias.map_or(0.0, |b| b.data()[oc]);
                        for ic in 0..is.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                        - spec.padding as isize;
                                    let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iy >= 0 && iy < is.h as isize && ix >= 0 && ix < is.w as isize
                                    {
                                        acc += weight.get(oc, ic, ky, kx)
                                            * input.get(n, ic, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, oc, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        // small deterministic LCG; keeps the oracle tests self-contained
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let data = (0..shape.count()).map(|_| next()).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let input = Tensor::from_rows(&[&[1.0_f64, 2.0], &[3.0, 4.0]]);
        let weight = Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![2.0]).unwrap();
        let out = conv2d(&input, &weight, None, &ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn all_ones_3x3_padded_sums_window() {
        let input = Tensor::from_rows(&[&[1.0_f64, 2.0], &[3.0, 4.0]]);
        let weight = Tensor::from_vec(Shape::new(1, 1, 3, 3), vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &weight, None, &ConvSpec::new(1, 1, 1)).unwrap();
        let expect = conv_oracle(&input, &weight, None, &ConvSpec::new(1, 1, 1));
        assert_eq!(out.data(), expect.data());
        assert_eq!(out.data(), &[10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn dilated_same_padding_preserves_extent() {
        for (h, w) in [(7, 7), (8, 6), (13, 5)] {
            let input = rand_tensor(Shape::new(1, 2, h, w), 3);
            let weight = rand_tensor(Shape::new(3, 2, 3, 3), 4);
            let out = conv2d(&input, &weight, None, &ConvSpec::same(3, 3)).unwrap();
            assert_eq!(out.shape(), Shape::new(1, 3, h, w));
        }
    }

    #[test]
    fn matches_oracle_on_random_cases() {
        let cases: Vec<(Shape, Shape, ConvSpec)> = vec![
            (Shape::new(2, 3, 8, 8), Shape::new(4, 3, 3, 3), ConvSpec::same(3, 1)),
            (Shape::new(1, 2, 9, 7), Shape::new(2, 2, 5, 5), ConvSpec::same(5, 1)),
            (Shape::new(2, 1, 8, 8), Shape::new(3, 1, 3, 3), ConvSpec::same(3, 3)),
            (Shape::new(1, 4, 6, 6), Shape::new(2, 4, 1, 1), ConvSpec::new(1, 0, 1)),
            (Shape::new(1, 2, 9, 9), Shape::new(2, 2, 3, 3), ConvSpec::new(2, 1, 1)),
            (Shape::new(1, 1, 10, 10), Shape::new(1, 1, 3, 3), ConvSpec::new(3, 0, 2)),
        ];
        for (i, (is, ws, spec)) in cases.into_iter().enumerate() {
            let input = rand_tensor(is, 100 + i as u64);
            let weight = rand_tensor(ws, 200 + i as u64);
            let bias = rand_tensor(Shape::new(1, ws.n, 1, 1), 300 + i as u64);
            let got = conv2d(&input, &weight, Some(&bias), &spec).unwrap();
            let expect = conv_oracle(&input, &weight, Some(&bias), &spec);
            assert_eq!(got.shape(), expect.shape());
            for (a, b) in got.data().iter().zip(expect.data())
            {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = rand_tensor(Shape::new(1, 3, 4, 4), 1);
        let weight = rand_tensor(Shape::new(2, 4, 3, 3), 2);
        let err = conv2d(&input, &weight, None, &ConvSpec::same(3, 1)).unwrap_err();
        match err {
            TensorError::ShapeMismatch { dim, .. } => assert_eq!(dim, "input channels"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_oversized_kernel() {
        let input = rand_tensor(Shape::new(1, 1, 4, 4), 1);
        let weight = rand_tensor(Shape::new(1, 1, 7, 7), 2);
        let err = conv2d(&input, &weight, None, &ConvSpec::new(1, 0, 1)).unwrap_err();
        assert!(matches!(err, TensorError::KernelTooLarge { .. }));
    }

    #[test]
    fn linear_in_input_without_bias() {
        let spec = ConvSpec::same(3, 1);
        let x = rand_tensor(Shape::new(1, 2, 6, 6), 11);
        let y = rand_tensor(Shape::new(1, 2, 6, 6), 12);
        let weight = rand_tensor(Shape::new(2, 2, 3, 3), 13);
        let (a, b) = (0.7, -1.3);
        let mut combo = Tensor::zeros(x.shape());
        for i in 0..x.data().len() {
            combo.data_mut()[i] = a * x.data()[i] + b * y.data()[i];
        }
        let lhs = conv2d(&combo, &weight, None, &spec).unwrap();
        let cx = conv2d(&x, &weight, None, &spec).unwrap();
        let cy = conv2d(&y, &weight, None, &spec).unwrap();
        for i in 0..lhs.data().len() {
            let rhs = a * cx.data()[i] + b * cy.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-12);
        }
    }
}
