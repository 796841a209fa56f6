//! Elementwise ops, broadcasting multiplies for attention maps, channel
//! concatenation and the binary cross-entropy loss kernel.

use serde::{Deserialize, Serialize};

use crate::scalar::{self, Scalar};
use crate::tensor::{debug_check_finite, Shape, Tensor, TensorError};

fn check_same(op: &'static str, a: Shape, b: Shape) -> Result<(), TensorError> {
    if a != b {
        let dim = if a.n != b.n {
            "batch"
        } else if a.c != b.c {
            "channels"
        } else if a.h != b.h {
            "height"
        } else {
            "width"
        };
        return Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b, dim });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_same("add", a.shape(), b.shape())?;
    let mut out = a.clone();
    out.add_assign(b);
    debug_check_finite("add", &out);
    Ok(out)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    check_same("mul", a.shape(), b.shape())?;
    let mut out = a.clone();
    for (x, y) in out.data_mut().iter_mut().zip(b.data()) {
        *x = *x * *y;
    }
    debug_check_finite("mul", &out);
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(scalar::sigmoid)
}

pub fn one_minus<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() - v)
}

/// How an attention map broadcasts onto a feature tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BroadcastMode {
    /// map (n, c, 1, 1): one gate per channel
    Channel,
    /// map (n, 1, h, w): one gate per spatial position
    Spatial,
}

pub fn broadcast_mode(map: Shape, features: Shape) -> Result<BroadcastMode, TensorError> {
    if map.n == features.n && map.c == features.c && map.h == 1 && map.w == 1 {
        Ok(BroadcastMode::Channel)
    } else if map.n == features.n && map.c == 1 && map.h == features.h && map.w == features.w {
        Ok(BroadcastMode::Spatial)
    } else {
        Err(TensorError::BadBroadcastMap { map, features })
    }
}

/// map (n,c,1,1) or (n,1,h,w) times features (n,c,h,w).
pub fn broadcast_mul<T: Scalar>(
    map: &Tensor<T>,
    features: &Tensor<T>,
) -> Result<(Tensor<T>, BroadcastMode), TensorError> {
    let mode = broadcast_mode(map.shape(), features.shape())?;
    let fs = features.shape();
    let mut out = features.clone();
    match mode {
        BroadcastMode::Channel => {
            for n in 0..fs.n {
                for c in 0..fs.c {
                    let m = map.data()[n * fs.c + c];
                    let base = fs.at(n, c, 0, 0);
                    for v in &mut out.data_mut()[base..base + fs.h * fs.w] {
                        *v = *v * m;
                    }
                }
            }
        }
        BroadcastMode::Spatial => {
            let plane = fs.h * fs.w;
            for n in 0..fs.n {
                let m_plane = &map.data()[n * plane..(n + 1) * plane];
                for c in 0..fs.c {
                    let base = fs.at(n, c, 0, 0);
                    for (v, m) in out.data_mut()[base..base + plane].iter_mut().zip(m_plane) {
                        *v = *v * *m;
                    }
                }
            }
        }
    }
    debug_check_finite("broadcast_mul", &out);
    Ok((out, mode))
}

/// dL/d(features) = map broadcast against grad_out.
pub fn broadcast_mul_grad_features<T: Scalar>(
    grad_out: &Tensor<T>,
    map: &Tensor<T>,
    mode: BroadcastMode,
) -> Tensor<T> {
    let _ = mode;
    broadcast_mul(map, grad_out).expect("shapes already validated in forward").0
}

/// dL/d(map): grad_out * features reduced over the broadcast dimensions.
pub fn broadcast_mul_grad_map<T: Scalar>(
    grad_out: &Tensor<T>,
    features: &Tensor<T>,
    mode: BroadcastMode,
) -> Tensor<T> {
    let fs = features.shape();
    match mode {
        BroadcastMode::Channel => {
            let mut dm = Tensor::zeros(Shape::new(fs.n, fs.c, 1, 1));
            for n in 0..fs.n {
                for c in 0..fs.c {
                    let base = fs.at(n, c, 0, 0);
                    let mut acc = T::zero();
                    for (g, f) in grad_out.data()[base..base + fs.h * fs.w]
                        .iter()
                        .zip(&features.data()[base..base + fs.h * fs.w])
                    {
                        acc += *g * *f;
                    }
                    dm.data_mut()[n * fs.c + c] = acc;
                }
            }
            dm
        }
        BroadcastMode::Spatial => {
            let plane = fs.h * fs.w;
            let mut dm = Tensor::zeros(Shape::new(fs.n, 1, fs.h, fs.w));
            for n in 0..fs.n {
                for c in 0..fs.c {
                    let base = fs.at(n, c, 0, 0);
                    let dst = &mut dm.data_mut()[n * plane..(n + 1) * plane];
                    for ((d, g), f) in dst
                        .iter_mut()
                        .zip(&grad_out.data()[base..base + plane])
                        .zip(&features.data()[base..base + plane])
                    {
                        *d += *g * *f;
                    }
                }
            }
            dm
        }
    }
}

/// Stack b's channels after a's. Batch and spatial extents must agree.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        let dim = if sa.n != sb.n {
            "batch"
        } else if sa.h != sb.h {
            "height"
        } else {
            "width"
        };
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
            dim,
        });
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut out = Tensor::zeros(os);
    let plane = sa.h * sa.w;
    for n in 0..sa.n {
        let dst_a = os.at(n, 0, 0, 0);
        out.data_mut()[dst_a..dst_a + sa.c * plane]
            .copy_from_slice(&a.data()[sa.at(n, 0, 0, 0)..sa.at(n, 0, 0, 0) + sa.c * plane]);
        let dst_b = os.at(n, sa.c, 0, 0);
        out.data_mut()[dst_b..dst_b + sb.c * plane]
            .copy_from_slice(&b.data()[sb.at(n, 0, 0, 0)..sb.at(n, 0, 0, 0) + sb.c * plane]);
    }
    Ok(out)
}

/// Split a concat gradient back into the two operand gradients.
pub fn concat_split_grad<T: Scalar>(
    grad_out: &Tensor<T>,
    a_shape: Shape,
    b_shape: Shape,
) -> (Tensor<T>, Tensor<T>) {
    let os = grad_out.shape();
    let plane = os.h * os.w;
    let mut da = Tensor::zeros(a_shape);
    let mut db = Tensor::zeros(b_shape);
    for n in 0..os.n {
        let src_a = os.at(n, 0, 0, 0);
        let dst = a_shape.at(n, 0, 0, 0);
        da.data_mut()[dst..dst + a_shape.c * plane]
            .copy_from_slice(&grad_out.data()[src_a..src_a + a_shape.c * plane]);
        let src_b = os.at(n, a_shape.c, 0, 0);
        let dst = b_shape.at(n, 0, 0, 0);
        db.data_mut()[dst..dst + b_shape.c * plane]
            .copy_from_slice(&grad_out.data()[src_b..src_b + b_shape.c * plane]);
    }
    (da, db)
}

/// First `count` channels of a tensor; used to undo concatenation in tests
/// and to slice attention dumps.
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, start: usize, count: usize) -> Tensor<T> {
    let s = t.shape();
    assert!(start + count <= s.c, "channel slice out of range");
    let os = Shape::new(s.n, count, s.h, s.w);
    let mut out = Tensor::zeros(os);
    let plane = s.h * s.w;
    for n in 0..s.n {
        let src = s.at(n, start, 0, 0);
        let dst = os.at(n, 0, 0, 0);
        out.data_mut()[dst..dst + count * plane]
            .copy_from_slice(&t.data()[src..src + count * plane]);
    }
    out
}

/// Reduce every element to one scalar (1,1,1,1).
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for v in x.data() {
        acc += *v;
    }
    Tensor::scalar(acc)
}

/// How a pixel-summed loss is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Binary cross entropy: -sum(y*log(p) + (1-y)*log(1-p)) with predictions
/// clamped to [eps, 1-eps] before the logs; mean reduction divides by the
/// element count.
pub fn bce_loss<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
    clamp_eps: T,
) -> Result<Tensor<T>, TensorError> {
    check_same("bce_loss", pred.shape(), target.shape())?;
    for (i, &y) in target.data().iter().enumerate() {
        if y < T::zero() || y > T::one() {
            return Err(TensorError::TargetOutOfRange {
                value: y.to_f64(),
                index: i,
            });
        }
    }
    let lo = clamp_eps;
    let hi = T::one() - clamp_eps;
    let mut acc = T::zero();
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        acc -= y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
    }
    if reduction == Reduction::Mean {
        acc = acc / T::from_usize(pred.data().len());
    }
    let out = Tensor::scalar(acc);
    debug_check_finite("bce_loss", &out);
    Ok(out)
}

/// dL/d(pred); zero wherever the clamp was active.
pub fn bce_loss_grad_pred<T: Scalar>(
    grad_out: T,
    pred: &Tensor<T>,
    target: &Tensor<T>,
    reduction: Reduction,
    clamp_eps: T,
) -> Tensor<T> {
    let lo = clamp_eps;
    let hi = T::one() - clamp_eps;
    let scale = match reduction {
        Reduction::Sum => grad_out,
        Reduction::Mean => grad_out / T::from_usize(pred.data().len()),
    };
    let mut din = Tensor::zeros(pred.shape());
    for ((d, &p), &y) in din.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        if p <= lo || p >= hi {
            continue;
        }
        *d = scale * (-y / p + (T::one() - y) / (T::one() - p));
    }
    din
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-2.0_f64, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);
        let om = one_minus(&Tensor::scalar(0.3_f64));
        assert!((om.item() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn add_rejects_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 3, 3, 3));
        let err = add(&a, &b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { dim, .. } => assert_eq!(dim, "channels"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn broadcast_channel_map() {
        // (n,c,1,1) map m, constant features v -> channel i everywhere m_i*v.
        // Oracle: direct nested loop.
        let map = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.5_f64, 2.0, -1.0]).unwrap();
        let features = Tensor::full(Shape::new(1, 3, 2, 2), 3.0);
        let (out, mode) = broadcast_mul(&map, &features).unwrap();
        assert_eq!(mode, BroadcastMode::Channel);
        let fs = features.shape();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    let expect = map.data()[c] * features.get(0, c, y, x);
                    assert_eq!(out.get(0, c, y, x), expect);
                }
            }
        }
        let _ = fs;
    }

    #[test]
    fn broadcast_identity_and_zero_maps() {
        let features = Tensor::from_vec(
            Shape::new(1, 2, 2, 2),
            (0..8).map(|i| i as f64).collect(),
        )
        .unwrap();
        let ones = Tensor::full(Shape::new(1, 2, 1, 1), 1.0);
        let (out, _) = broadcast_mul(&ones, &features).unwrap();
        assert_eq!(out.data(), features.data());

        let zeros = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let (out, mode) = broadcast_mul(&zeros, &features).unwrap();
        assert_eq!(mode, BroadcastMode::Spatial);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_rejects_bad_map() {
        let map = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 1));
        let features = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        assert!(matches!(
            broadcast_mul(&map, &features),
            Err(TensorError::BadBroadcastMap { .. })
        ));
    }

    #[test]
    fn concat_shapes_and_order() {
        let a = Tensor::full(Shape::new(2, 3, 4, 4), 1.0_f32);
        let b = Tensor::full(Shape::new(2, 5, 4, 4), 2.0_f32);
        let out = concat_channels(&a, &b).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 8, 4, 4));
        assert_eq!(out.get(1, 0, 0, 0), 1.0);
        assert_eq!(out.get(1, 2, 3, 3), 1.0);
        assert_eq!(out.get(1, 3, 0, 0), 2.0);
        assert_eq!(out.get(1, 7, 3, 3), 2.0);
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let x = Tensor::from_vec(Shape::new(2, 2, 2, 2), (0..16).map(|i| i as f64).collect())
            .unwrap();
        let zeros = Tensor::zeros(Shape::new(2, 3, 2, 2));
        let cat = concat_channels(&x, &zeros).unwrap();
        let back = slice_channels(&cat, 0, 2);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 4));
        let err = concat_channels(&a, &b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { dim, .. } => assert_eq!(dim, "height"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bce_analytic_values() {
        // single pixel Y=1, p=0.5 -> ln 2
        let pred = Tensor::scalar(0.5_f64);
        let target = Tensor::scalar(1.0_f64);
        let loss = bce_loss(&pred, &target, Reduction::Sum, 1e-7).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);

        // perfect binary prediction stays below -log(1-eps)*N
        let eps = 1e-7_f64;
        let pred = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0 - eps, eps]).unwrap();
        let target = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let loss = bce_loss(&pred, &target, Reduction::Sum, eps).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() <= -(1.0 - eps).ln() * 2.0 + 1e-15);
    }

    #[test]
    fn bce_matches_loop_oracle() {
        let pred = Tensor::from_vec(
            Shape::new(1, 1, 2, 2),
            vec![0.1_f64, 0.7, 0.4, 0.95],
        )
        .unwrap();
        let target = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0_f64, 1.0, 0.5, 1.0]).unwrap();
        // independent scalar loop
        let mut expect = 0.0;
        for (p, y) in pred.data().iter().zip(target.data()) {
            let pc = p.clamp(1e-7, 1.0 - 1e-7);
            expect -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let sum = bce_loss(&pred, &target, Reduction::Sum, 1e-7).unwrap();
        assert!((sum.item() - expect).abs() < 1e-12);
        let mean = bce_loss(&pred, &target, Reduction::Mean, 1e-7).unwrap();
        assert!((mean.item() - expect / 4.0).abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_bad_target() {
        let pred = Tensor::scalar(0.5_f64);
        let target = Tensor::scalar(1.5_f64);
        assert!(matches!(
            bce_loss(&pred, &target, Reduction::Mean, 1e-7),
            Err(TensorError::TargetOutOfRange { index: 0, .. })
        ));
    }

    #[test]
    fn bce_is_nonnegative_on_grid() {
        for i in 0..=10 {
            for j in 0..=10 {
                let p = (i as f64 / 10.0).clamp(1e-7, 1.0 - 1e-7);
                let y = j as f64 / 10.0;
                let loss = bce_loss(&Tensor::scalar(p), &Tensor::scalar(y), Reduction::Sum, 1e-7)
                    .unwrap();
                assert!(loss.item() >= -1e-15, "p={p} y={y} loss={}", loss.item());
            }
        }
    }
}
