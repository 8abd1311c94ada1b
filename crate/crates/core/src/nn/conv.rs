use rayon::prelude::*;

use super::param::{Param, ParamKind};
use crate::tensor::{Real, Tensor};

/// 2-D convolution with odd square kernel and "same"-style padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads its input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let (h, w, ho, wo) = (g.h as isize, g.w as isize, g.ho, g.wo);
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        assert!(stride >= 1);
        Conv2d {
            weight: Param::zeros(
                format!("{name}.weight"),
                ParamKind::ConvWeight {
                    fan_in: in_channels * kernel * kernel,
                },
                vec![out_channels, in_channels, kernel, kernel],
            ),
            bias: Param::zeros(format!("{name}.bias"), ParamKind::Bias, vec![out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        assert_eq!(
            x.channels(),
            self.in_channels,
            "{}: expected {} input channels",
            self.weight.name,
            self.in_channels
        );
        let pad = self.kernel / 2;
        let (h, w) = (x.height(), x.width());
        Geometry {
            cin: self.in_channels,
            h,
            w,
            k: self.kernel,
            stride: self.stride,
            pad,
            ho: (h + 2 * pad - self.kernel) / self.stride + 1,
            wo: (w + 2 * pad - self.kernel) / self.stride + 1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let (rows, cols_n, cout) = (g.rows(), g.cols(), self.out_channels);
        let mut out = Tensor::zeros([x.batch(), cout, g.ho, g.wo]);
        let out_len = out.sample_len();
        out.data_mut()
            .par_chunks_mut(out_len)
            .enumerate()
            .for_each(|(n, y)| {
                let xs = x.sample(n);
                if g.is_pointwise() {
                    T::gemm(cout, rows, cols_n, &self.weight.value, false, xs, false, y, false);
                } else {
                    let mut cols = vec![T::zero(); rows * cols_n];
                    im2col(xs, &g, &mut cols);
                    T::gemm(cout, rows, cols_n, &self.weight.value, false, &cols, false, y, false);
                }
                for (co, plane) in y.chunks_mut(cols_n).enumerate() {
                    let b = self.bias.value[co];
                    plane.iter_mut().for_each(|v| *v += b);
                }
            });
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when requested.
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let g = self.geometry(x);
        let (rows, cols_n, cout) = (g.rows(), g.cols(), self.out_channels);
        assert_eq!(grad_out.shape(), [x.batch(), cout, g.ho, g.wo]);
        let weight = &self.weight.value;

        let per_sample: Vec<(Vec<T>, Vec<T>, Option<Vec<T>>)> = (0..x.batch())
            .into_par_iter()
            .map(|n| {
                let xs = x.sample(n);
                let gy = grad_out.sample(n);
                let owned;
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    let mut buf = vec![T::zero(); rows * cols_n];
                    im2col(xs, &g, &mut buf);
                    owned = buf;
                    &owned
                };
                let mut dw = vec![T::zero(); cout * rows];
                T::gemm(cout, cols_n, rows, gy, false, cols, true, &mut dw, false);
                let db: Vec<T> = gy.chunks(cols_n).map(|p| p.iter().copied().sum()).collect();
                let dx = need_input_grad.then(|| {
                    let mut dcols = vec![T::zero(); rows * cols_n];
                    T::gemm(rows, cout, cols_n, weight, true, gy, false, &mut dcols, false);
                    if g.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); g.cin * g.h * g.w];
                        col2im(&dcols, &g, &mut dx);
                        dx
                    }
                });
                (dw, db, dx)
            })
            .collect();

        // Reduce in sample order so results do not depend on scheduling.
        let mut dx_all = need_input_grad.then(|| Vec::with_capacity(x.len()));
        for (dw, db, dx) in per_sample {
            for (a, b) in self.weight.grad.iter_mut().zip(dw) {
                *a += b;
            }
            for (a, b) in self.bias.grad.iter_mut().zip(db) {
                *a += b;
            }
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.extend(dx);
            }
        }
        dx_all.map(|d| Tensor::from_vec(x.shape(), d).expect("input grad shape"))
    }
}

/// Per-channel 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    channels: usize,
}

impl<T: Real> DepthwiseConv2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        DepthwiseConv2d {
            weight: Param::zeros(
                format!("{name}.weight"),
                ParamKind::ConvWeight { fan_in: 9 },
                vec![channels, 1, 3, 3],
            ),
            bias: Param::zeros(format!("{name}.bias"), ParamKind::Bias, vec![channels]),
            channels,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.channels);
        let (h, w) = (x.height(), x.width());
        let mut out = Tensor::zeros(x.shape());
        let plane = h * w;
        out.data_mut()
            .par_chunks_mut(plane)
            .zip(x.data().par_chunks(plane))
            .enumerate()
            .for_each(|(i, (y, xp))| {
                let c = i % self.channels;
                let k = &self.weight.value[c * 9..c * 9 + 9];
                y.iter_mut().for_each(|v| *v = self.bias.value[c]);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wk = k[ky * 3 + kx];
                        for_each_shift(h, w, ky, kx, |oy, x0, x1, iy, ix0| {
                            let dst = &mut y[oy * w + x0..oy * w + x1];
                            let src = &xp[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += wk * s;
                            }
                        });
                    }
                }
            });
        out
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape(), grad_out.shape());
        let (h, w) = (x.height(), x.width());
        let plane = h * w;
        let mut dx = Tensor::zeros(x.shape());
        let per_plane: Vec<([T; 9], T)> = dx
            .data_mut()
            .par_chunks_mut(plane)
            .zip(x.data().par_chunks(plane))
            .zip(grad_out.data().par_chunks(plane))
            .enumerate()
            .map(|(i, ((dxp, xp), gp))| {
                let c = i % self.channels;
                let k = &self.weight.value[c * 9..c * 9 + 9];
                let mut dk = [T::zero(); 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wk = k[ky * 3 + kx];
                        let mut acc = T::zero();
                        for_each_shift(h, w, ky, kx, |oy, x0, x1, iy, ix0| {
                            let g = &gp[oy * w + x0..oy * w + x1];
                            let xs = &xp[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            let d = &mut dxp[iy * w + ix0..iy * w + ix0 + (x1 - x0)];
                            for ((dv, &gv), &xv) in d.iter_mut().zip(g).zip(xs) {
                                *dv += wk * gv;
                                acc += gv * xv;
                            }
                        });
                        dk[ky * 3 + kx] = acc;
                    }
                }
                (dk, gp.iter().copied().sum())
            })
            .collect();
        for (i, (dk, db)) in per_plane.into_iter().enumerate() {
            let c = i % self.channels;
            for (a, b) in self.weight.grad[c * 9..c * 9 + 9].iter_mut().zip(dk) {
                *a += b;
            }
            self.bias.grad[c] += db;
        }
        dx
    }
}

/// Visits the valid output-row segments for kernel tap `(ky, kx)` of a 3x3
/// stride-1 pad-1 convolution: `f(out_y, out_x0, out_x1, in_y, in_x0)`.
fn for_each_shift(
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize),
) {
    let x0 = if kx == 0 { 1 } else { 0 };
    let x1 = if kx == 2 { w - 1 } else { w };
    if x1 <= x0 {
        return;
    }
    for oy in 0..h {
        let iy = oy as isize + ky as isize - 1;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        f(oy, x0, x1, iy as usize, x0 + kx - 1);
    }
}
