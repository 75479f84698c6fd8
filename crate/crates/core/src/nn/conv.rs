use ndarray::{Array1, Array2, Array4, Axis, IxDyn};
use rand::Rng;
use rayon::prelude::*;

use super::{fan_in_uniform, he_normal, join, Param, Parameterized};
use crate::scalar::Scalar;

/// Square-kernel 2D convolution (cross-correlation) via im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Array2<T>,
    input_dim: (usize, usize, usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::new(he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| Param::new(fan_in_uniform(&[out_channels], fan_in, rng)));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Output spatial size for an `h x w` input, `None` when the kernel does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        (ph >= span && pw >= span).then(|| ((ph - span) / self.stride + 1, (pw - span) / self.stride + 1))
    }

    fn geometry(&self, x: &Array4<T>) -> Geometry {
        let (batch, channels, height, width) = x.dim();
        assert_eq!(channels, self.in_channels, "conv input channels");
        let (out_h, out_w) = self
            .output_hw(height, width)
            .unwrap_or_else(|| panic!("conv kernel does not fit a {height}x{width} input"));
        Geometry {
            batch,
            channels,
            height,
            width,
            out_h,
            out_w,
        }
    }

    fn weight_matrix(&self) -> Array2<T> {
        let k = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, k))
            .expect("contiguous weight")
            .to_owned()
    }

    fn im2col(&self, x: &Array4<T>, g: Geometry) -> Array2<T> {
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let (k, s, p, d) = (self.kernel, self.stride, self.padding as isize, self.dilation);
        let ncols = g.batch * g.out_h * g.out_w;
        let nrows = g.channels * k * k;
        let mut cols = vec![T::zero(); nrows * ncols];
        cols.par_chunks_mut(ncols).enumerate().for_each(|(row, dst)| {
            let c = row / (k * k);
            let ki = (row / k) % k;
            let kj = row % k;
            for b in 0..g.batch {
                let plane = &xs[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                for oy in 0..g.out_h {
                    let iy = (oy * s + ki * d) as isize - p;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..][..g.width];
                    let out = &mut dst[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kj * d) as isize - p;
                        if ix >= 0 && ix < g.width as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        });
        Array2::from_shape_vec((nrows, ncols), cols).expect("im2col shape")
    }

    fn col2im(&self, cols: &Array2<T>, g: Geometry) -> Array4<T> {
        let (k, s, p, d) = (self.kernel, self.stride, self.padding as isize, self.dilation);
        let ncols = cols.ncols();
        let cs = cols.as_slice().expect("standard layout");
        let hw = g.height * g.width;
        let planes: Vec<Vec<T>> = (0..g.channels)
            .into_par_iter()
            .map(|c| {
                let mut acc = vec![T::zero(); g.batch * hw];
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (c * k + ki) * k + kj;
                        let src = &cs[row * ncols..][..ncols];
                        for b in 0..g.batch {
                            let plane = &mut acc[b * hw..][..hw];
                            for oy in 0..g.out_h {
                                let iy = (oy * s + ki * d) as isize - p;
                                if iy < 0 || iy >= g.height as isize {
                                    continue;
                                }
                                let line = &mut plane[iy as usize * g.width..][..g.width];
                                let from = &src[(b * g.out_h + oy) * g.out_w..][..g.out_w];
                                for (ox, &v) in from.iter().enumerate() {
                                    let ix = (ox * s + kj * d) as isize - p;
                                    if ix >= 0 && ix < g.width as isize {
                                        line[ix as usize] += v;
                                    }
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        let mut dx = Array4::<T>::zeros((g.batch, g.channels, g.height, g.width));
        for (c, plane) in planes.into_iter().enumerate() {
            for b in 0..g.batch {
                let mut view = dx.index_axis_mut(Axis(0), b);
                let mut dst = view.index_axis_mut(Axis(0), c);
                dst.as_slice_mut()
                    .expect("standard layout")
                    .copy_from_slice(&plane[b * hw..][..hw]);
            }
        }
        dx
    }

    fn apply(&self, cols: &Array2<T>, g: Geometry) -> Array4<T> {
        let out = self.weight_matrix().dot(cols);
        let mut y = out
            .into_shape_with_order((self.out_channels, g.batch, g.out_h, g.out_w))
            .expect("gemm output shape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        if let Some(bias) = &self.bias {
            for (o, mut chan) in y.axis_iter_mut(Axis(1)).enumerate() {
                let b = bias.value[[o]];
                chan.mapv_inplace(|v| v + b);
            }
        }
        y
    }

    /// Training forward; caches the unfolded input for [`Conv2d::backward`].
    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let g = self.geometry(x);
        let cols = self.im2col(x, g);
        let y = self.apply(&cols, g);
        self.cache = Some(ConvCache {
            cols,
            input_dim: x.dim(),
        });
        y
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let g = self.geometry(x);
        let cols = self.im2col(x, g);
        self.apply(&cols, g)
    }

    /// Accumulate parameter gradients; returns `dL/dx` when `input_grad` is set.
    pub fn backward(&mut self, grad: &Array4<T>, input_grad: bool) -> Option<Array4<T>> {
        let cache = self.cache.take().expect("conv backward without forward");
        let (batch, channels, height, width) = cache.input_dim;
        let (gb, go, out_h, out_w) = grad.dim();
        assert_eq!((gb, go), (batch, self.out_channels), "conv grad shape");
        let g2 = grad
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, batch * out_h * out_w))
            .expect("grad reshape");
        let dw = g2.dot(&cache.cols.t());
        let dw = dw
            .into_shape_with_order(IxDyn(&[self.out_channels, self.in_channels, self.kernel, self.kernel]))
            .expect("weight grad shape");
        self.weight.grad += &dw;
        if let Some(bias) = &mut self.bias {
            let db: Array1<T> = g2.sum_axis(Axis(1));
            bias.grad += &db.into_dyn();
        }
        input_grad.then(|| {
            let dcols = self.weight_matrix().t().dot(&g2);
            self.col2im(
                &dcols,
                Geometry {
                    batch,
                    channels,
                    height,
                    width,
                    out_h,
                    out_w,
                },
            )
        })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::derive_rng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = x.dim();
        let (oh, ow) = conv.output_hw(h, w).unwrap();
        let mut y = Array4::zeros((b, conv.out_channels, oh, ow));
        for n in 0..b {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb.value[[o]]);
                        for ci in 0..c {
                            for ki in 0..conv.kernel {
                                for kj in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ki * conv.dilation) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kj * conv.dilation) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += conv.weight.value[[o, ci, ki, kj]] * x[[n, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[n, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = derive_rng(seed, 0);
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_naive_convolution() {
        for (k, s, p, d) in [(3, 1, 1, 1), (3, 2, 1, 1), (1, 2, 0, 1), (3, 1, 2, 2), (7, 2, 3, 1)] {
            let mut rng = derive_rng(11, k as u64);
            let conv = Conv2d::<f64>::new(2, 3, k, s, p, d, true, &mut rng);
            let x = random_input((2, 2, 9, 11), 5);
            let fast = conv.infer(&x);
            let slow = naive(&conv, &x);
            assert_eq!(fast.dim(), slow.dim());
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12, "k{k} s{s} p{p} d{d}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = derive_rng(3, 0);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 2, 2, true, &mut rng);
        let x = random_input((2, 2, 7, 6), 9);
        let probe = random_input(conv.infer(&x).dim(), 10);
        let loss = |c: &Conv2d<f64>, x: &Array4<f64>| (&c.infer(x) * &probe).sum();

        conv.forward(&x);
        let dx = conv.backward(&probe, true).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 3, 2], [0, 1, 6, 5]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
        for idx in [[0usize, 0, 0, 0], [1, 1, 2, 1]] {
            let idx = IxDyn(&idx);
            let mut cp = conv.clone();
            cp.weight.value[&idx] += h;
            let mut cm = conv.clone();
            cm.weight.value[&idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[&idx]).abs() < 1e-7);
        }
        let db_fd = {
            let mut cp = conv.clone();
            cp.bias.as_mut().unwrap().value[[1]] += h;
            let mut cm = conv.clone();
            cm.bias.as_mut().unwrap().value[[1]] -= h;
            (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h)
        };
        assert!((db_fd - conv.bias.as_ref().unwrap().grad[[1]]).abs() < 1e-7);
    }
}
