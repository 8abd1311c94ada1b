//! Parameter-free operations and their gradients.

use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: Tensor<T>) -> Tensor<T> {
    let mut x = x;
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    x
}

/// Gradient through a ReLU, gated by the ReLU's own output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    assert_eq!(out.shape(), grad.shape());
    let mut g = grad.clone();
    for (gv, &o) in g.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

pub fn sigmoid<T: Real>(x: Tensor<T>) -> Tensor<T> {
    let mut x = x;
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
    x
}

/// Gradient through a sigmoid, from its output `s`: `g * s * (1 - s)`.
pub fn sigmoid_backward<T: Real>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    assert_eq!(out.shape(), grad.shape());
    let mut g = grad.clone();
    for (gv, &s) in g.data_mut().iter_mut().zip(out.data()) {
        *gv *= s * (T::one() - s);
    }
    g
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the winning offset `dy * 2 + dx` inside its window.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u8; n * c * ho * wo];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = plane[2 * oy * w + 2 * ox];
                let mut best_k = 0u8;
                for k in 1..4u8 {
                    let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                    let v = plane[(2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                dst[o] = best;
                arg[o] = best_k;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(
    grad: &Tensor<T>,
    arg: &[u8],
    input_shape: [usize; 4],
) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let (ho, wo) = (h / 2, w / 2);
    assert_eq!(grad.shape(), [n, c, ho, wo]);
    let mut dx = Tensor::zeros(input_shape);
    let g = grad.data();
    let d = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = p * ho * wo + oy * wo + ox;
                let k = arg[o] as usize;
                d[p * h * w + (2 * oy + k / 2) * w + 2 * ox + k % 2] += g[o];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let out_plane = &mut dst[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let (r0, r1) = out_plane[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
            for (x, &v) in row.iter().enumerate() {
                r0[2 * x] = v;
                r0[2 * x + 1] = v;
            }
            r1.copy_from_slice(r0);
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward<T: Real>(grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = grad.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let g = grad.data();
    let d = dx.data_mut();
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let base = p * h2 * w2;
                d[p * h * w + y * w + x] = g[base + 2 * y * w2 + 2 * x]
                    + g[base + 2 * y * w2 + 2 * x + 1]
                    + g[base + (2 * y + 1) * w2 + 2 * x]
                    + g[base + (2 * y + 1) * w2 + 2 * x + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Tensor::<f64>::from_vec(
            [1, 1, 2, 4],
            vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0],
        )
        .unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data(), &[5.0, 0.0]);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let dx = max_pool2_backward(&g, &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([2, 2, 3, 2], |i| (i as f64).sin());
        let g = Tensor::<f64>::from_fn([2, 2, 6, 4], |i| (i as f64 * 0.7).cos());
        let lhs: f64 = upsample2(&x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(upsample2_backward(&g).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_bounded() {
        let x = Tensor::<f32>::from_vec([1, 1, 1, 3], vec![-100.0, 0.0, 100.0]).unwrap();
        let s = sigmoid(x);
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.data()[1], 0.5);
    }
}
