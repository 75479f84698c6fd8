use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use super::{fan_in_uniform, join, Param, Parameterized};
use crate::scalar::Scalar;

pub fn relu<T: Scalar, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its forward output.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    grad: &ndarray::Array<T, D>,
    output: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut g = grad.clone();
    g.zip_mut_with(output, |g, &y| {
        if y <= T::zero() {
            *g = T::zero()
        }
    });
    g
}

/// Max pooling with a square window; remembers argmax positions.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<((usize, usize, usize, usize), Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn run<T: Scalar>(&self, x: &Array4<T>) -> (Array4<T>, Vec<usize>) {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut y = Array4::<T>::zeros((b, c, oh, ow));
        let mut arg = vec![0usize; b * c * oh * ow];
        let ys = y.as_slice_mut().expect("fresh array");
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut at = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    ys[o] = best;
                    arg[o] = at;
                }
            }
        }
        (y, arg)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>) -> Array4<T> {
        let (y, arg) = self.run(x);
        self.cache = Some((x.dim(), arg));
        y
    }

    pub fn infer<T: Scalar>(&self, x: &Array4<T>) -> Array4<T> {
        self.run(x).0
    }

    pub fn backward<T: Scalar>(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (dim, arg) = self.cache.take().expect("maxpool backward without forward");
        let mut dx = Array4::<T>::zeros(dim);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let grad = grad.as_standard_layout();
        for (&g, &i) in grad.iter().zip(&arg) {
            dxs[i] += g;
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// `[B, C, H, W] -> [B, C]` spatial mean.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let n = T::from_usize_lossy(h * w);
    Array2::from_shape_fn((b, c), |(i, j)| x.slice(s![i, j, .., ..]).sum() / n)
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Array2<T>, hw: (usize, usize)) -> Array4<T> {
    let (b, c) = grad.dim();
    let n = T::from_usize_lossy(hw.0 * hw.1);
    Array4::from_shape_fn((b, c, hw.0, hw.1), |(i, j, _, _)| grad[[i, j]] / n)
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(fan_in_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Param::new(fan_in_uniform(&[out_dim], in_dim, rng)),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality().expect("2d weight")
    }

    pub fn infer(&self, x: &Array2<T>) -> Array2<T> {
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1d bias");
        x.dot(&self.w().t()) + b
    }

    pub fn forward(&mut self, x: &Array2<T>) -> Array2<T> {
        self.cache = Some(x.clone());
        self.infer(x)
    }

    pub fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let x = self.cache.take().expect("linear backward without forward");
        let dw = grad.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad.sum_axis(Axis(0)).into_dyn();
        grad.dot(&self.w())
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Half-pixel-centre taps, matching `augment::resize_bilinear`.
fn taps(out: usize, input: usize) -> Vec<Tap> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            Tap {
                lo,
                hi: (lo + 1).min(input - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Bilinear resize of every `[H, W]` plane to `size`.
pub fn upsample_bilinear<T: Scalar>(x: &Array4<T>, size: (usize, usize)) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = size;
    if (oh, ow) == (h, w) {
        return x.to_owned();
    }
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut y = Array4::<T>::zeros((b, c, oh, ow));
    let ys = y.as_slice_mut().expect("fresh array");
    for plane in 0..b * c {
        let src = &xs[plane * h * w..][..h * w];
        let dst = &mut ys[plane * oh * ow..][..oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(a.frac), T::lit(1.0 - a.frac));
            for (ox, t) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(t.frac), T::lit(1.0 - t.frac));
                let top = src[a.lo * w + t.lo] * gx + src[a.lo * w + t.hi] * fx;
                let bot = src[a.hi * w + t.lo] * gx + src[a.hi * w + t.hi] * fx;
                dst[oy * ow + ox] = top * gy + bot * fy;
            }
        }
    }
    y
}

pub fn upsample_bilinear_backward<T: Scalar>(grad: &Array4<T>, input_hw: (usize, usize)) -> Array4<T> {
    let (b, c, oh, ow) = grad.dim();
    let (h, w) = input_hw;
    if (oh, ow) == (h, w) {
        return grad.to_owned();
    }
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let grad = grad.as_standard_layout();
    let gs = grad.as_slice().expect("standard layout");
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let ds = dx.as_slice_mut().expect("fresh array");
    for plane in 0..b * c {
        let src = &gs[plane * oh * ow..][..oh * ow];
        let dst = &mut ds[plane * h * w..][..h * w];
        for (oy, a) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(a.frac), T::lit(1.0 - a.frac));
            for (ox, t) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(t.frac), T::lit(1.0 - t.frac));
                let g = src[oy * ow + ox];
                dst[a.lo * w + t.lo] += g * gy * gx;
                dst[a.lo * w + t.hi] += g * gy * fx;
                dst[a.hi * w + t.lo] += g * fy * gx;
                dst[a.hi * w + t.hi] += g * fy * fx;
            }
        }
    }
    dx
}

/// Reflect-pad bottom and right edges by `(pad_h, pad_w)`.
pub fn pad_reflect<T: Scalar>(x: &Array4<T>, pad_h: usize, pad_w: usize) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let reflect = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    Array4::from_shape_fn((b, c, h + pad_h, w + pad_w), |(i, j, y, z)| x[[i, j, reflect(y, h), reflect(z, w)]])
}

/// Keep the top-left `size` window.
pub fn crop_spatial<T: Scalar>(x: &Array4<T>, size: (usize, usize)) -> Array4<T> {
    x.slice(s![.., .., ..size.0, ..size.1]).to_owned()
}

/// Backward of [`crop_spatial`]: embed the gradient in a zero tensor of the pre-crop size.
pub fn pad_spatial_backward<T: Scalar>(grad: &Array4<T>, full: (usize, usize)) -> Array4<T> {
    let (b, c, h, w) = grad.dim();
    let mut out = Array4::zeros((b, c, full.0, full.1));
    out.slice_mut(s![.., .., ..h, ..w]).assign(grad);
    out
}

pub fn concat_channels<T: Scalar>(parts: &[Array4<T>]) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("matching spatial dims")
}

pub fn split_channels<T: Scalar>(x: &Array4<T>, sizes: &[usize]) -> Vec<Array4<T>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let part = x.slice(s![.., start..start + n, .., ..]).to_owned();
            start += n;
            part
        })
        .collect()
}
