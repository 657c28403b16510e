//! Convolution and resampling kernels on `[N, C, H, W]` tensors.

use crate::scalar::gemm;
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "conv stride must be positive");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// 1×1, stride 1, no padding: the image itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> ConvGeom {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W], got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be [O,C,K,K], got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch: input {xs:?}, weight {ws:?}");
    assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
    ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = geometry(x, w, stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, p) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * p]
    };
    for i in 0..n {
        let xi = x.outer(i);
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        let yi = &mut out.data_mut()[i * o * p..(i + 1) * o * p];
        if let Some(b) = b {
            for (oc, chunk) in yi.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = b.data()[oc]);
            }
        }
        gemm(o, rows, p, w.data(), (rows, 1), src, (p, 1), yi, (p, 1), b.is_some());
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = geometry(x, w, stride, pad);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let (rows, p) = (g.rows(), g.cols());
    let mut dx = need.0.then(|| Tensor::zeros(x.shape()));
    let mut dw = need.1.then(|| Tensor::zeros(w.shape()));
    let db = need.2.then(|| {
        let mut db = Tensor::zeros(&[o]);
        for i in 0..n {
            for oc in 0..o {
                let start = (i * o + oc) * p;
                db.data_mut()[oc] += dy.data()[start..start + p].iter().copied().sum();
            }
        }
        db
    });
    let mut cols = vec![T::zero(); rows * p];
    for i in 0..n {
        let dyi = &dy.data()[i * o * p..(i + 1) * o * p];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                x.outer(i)
            } else {
                im2col(x.outer(i), &g, &mut cols);
                &cols
            };
            gemm(o, p, rows, dyi, (p, 1), src, (1, p), dw.data_mut(), (rows, 1), true);
        }
        if let Some(dx) = dx.as_mut() {
            let chw = g.c * g.h * g.w;
            let dxi = &mut dx.data_mut()[i * chw..(i + 1) * chw];
            if g.is_pointwise() {
                gemm(rows, o, p, w.data(), (1, rows), dyi, (p, 1), dxi, (p, 1), true);
            } else {
                gemm(rows, o, p, w.data(), (1, rows), dyi, (p, 1), &mut cols, (p, 1), false);
                col2im_add(&cols, &g, dxi);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected [N,C,H,W], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = nchw(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i = base + 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = nchw(in_shape);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = Tensor::zeros(in_shape);
    for (plane, src) in dy.data().chunks(oh * ow).enumerate() {
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
    dx
}

pub(crate) fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = nchw(x.shape());
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (plane, src) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (_, _, h, w) = nchw(in_shape);
    let ow = 2 * w;
    let mut dx = Tensor::zeros(in_shape);
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let src = &dy.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * ow + 2 * xx;
                dst[y * w + xx] = src[i] + src[i + 1] + src[i + ow] + src[i + ow + 1];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = nchw(x.shape());
        let (o, _, k, _) = nchw(w.shape());
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for i in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((i * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                        out.data_mut()[((i * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_convolution_matches_nested_loops() {
        let x = Tensor::from_vec(&[2, 3, 5, 6], (0..180).map(|v| ((v * 7) % 11) as f64 - 5.0).collect());
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let w = Tensor::from_vec(
                &[4, 3, k, k],
                (0..4 * 3 * k * k).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect(),
            );
            let fast = conv2d_forward(&x, &w, None, stride, pad);
            let slow = conv_naive(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <pool(x), y> == <x, pool^T(y)>
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|v| v as f64).collect());
        let y = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| (v as f64) - 3.0).collect());
        let lhs: f64 = avg_pool2(&x).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = avg_pool2_backward(&y, x.shape());
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let up = upsample2(&y);
        let z = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|v| (v % 5) as f64).collect());
        let lhs: f64 = up.data().iter().zip(z.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = y
            .data()
            .iter()
            .zip(upsample2_backward(&z, y.shape()).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
