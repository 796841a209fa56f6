//! Spatial resampling: 2x2 max pooling, nearest-neighbour 2x upsampling and
//! global average pooling.

use crate::scalar::Scalar;
use crate::tensor::{debug_check_finite, Shape, Tensor, TensorError};

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of its maximum (ties resolve to the first
/// candidate in row-major order) for gradient routing.
pub fn max_pool_2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(TensorError::OddPoolExtent { h: s.h, w: s.w });
    }
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.count()];
    let data = input.data();
    let mut oi = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let base = s.at(n, c, 2 * oy, 2 * ox);
                    let candidates = [base, base + 1, base + s.w, base + s.w + 1];
                    let mut best = candidates[0];
                    for &idx in &candidates[1..] {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.data_mut()[oi] = data[best];
                    argmax[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    debug_check_finite("max_pool_2x2", &out);
    Ok((out, argmax))
}

pub fn max_pool_2x2_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Tensor<T> {
    let mut din = Tensor::zeros(input_shape);
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        din.data_mut()[idx] += *g;
    }
    din
}

/// Each input value replicated into a 2x2 block.
pub fn upsample_nearest_2x<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let mut out = Tensor::zeros(os);
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let src = &data[s.at(n, c, y, 0)..s.at(n, c, y, 0) + s.w];
                for dy in 0..2 {
                    let row = os.at(n, c, 2 * y + dy, 0);
                    let dst = &mut out.data_mut()[row..row + os.w];
                    for (x, &v) in src.iter().enumerate() {
                        dst[2 * x] = v;
                        dst[2 * x + 1] = v;
                    }
                }
            }
        }
    }
    out
}

/// Sum of the four replicated positions.
pub fn upsample_nearest_2x_grad<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let os = grad_out.shape();
    let mut din = Tensor::zeros(input_shape);
    let g = grad_out.data();
    for n in 0..input_shape.n {
        for c in 0..input_shape.c {
            for y in 0..input_shape.h {
                for x in 0..input_shape.w {
                    let mut acc = T::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += g[os.at(n, c, 2 * y + dy, 2 * x + dx)];
                        }
                    }
                    let i = input_shape.at(n, c, y, x);
                    din.data_mut()[i] = acc;
                }
            }
        }
    }
    din
}

/// Mean over the spatial extent: (n, c, h, w) -> (n, c, 1, 1).
pub fn global_average_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let inv = T::one() / T::from_usize(s.h * s.w);
    let data = input.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.at(n, c, 0, 0);
            let mut acc = T::zero();
            for v in &data[base..base + s.h * s.w] {
                acc += *v;
            }
            out.data_mut()[n * s.c + c] = acc * inv;
        }
    }
    debug_check_finite("global_average_pool", &out);
    out
}

pub fn global_average_pool_grad<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Tensor<T> {
    let s = input_shape;
    let inv = T::one() / T::from_usize(s.h * s.w);
    let mut din = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.data()[n * s.c + c] * inv;
            let base = s.at(n, c, 0, 0);
            for v in &mut din.data_mut()[base..base + s.h * s.w] {
                *v = g;
            }
        }
    }
    din
}
