use ndarray::{Array4, ArrayD, IxDyn};

use super::{join, Param, Parameterized};
use crate::scalar::Scalar;

/// Per-channel batch normalisation with running statistics for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    momentum: f64,
    eps: f64,
    cache: Option<(Array4<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalise with batch statistics and update the running estimates.
    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "batchnorm channels");
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let hw = h * w;
        let n = (b * hw) as f64;
        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        let mut inv_std = Vec::with_capacity(c);
        {
            let out = xhat.as_slice_mut().expect("fresh array");
            for ch in 0..c {
                let mut sum = 0.0f64;
                for bi in 0..b {
                    sum += xs[(bi * c + ch) * hw..][..hw].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / n;
                let mut sq = 0.0f64;
                for bi in 0..b {
                    sq += xs[(bi * c + ch) * hw..][..hw]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / n;
                let istd = 1.0 / (var + self.eps).sqrt();
                let (m, s) = (T::lit(mean), T::lit(istd));
                for bi in 0..b {
                    let off = (bi * c + ch) * hw;
                    for (o, &v) in out[off..off + hw].iter_mut().zip(&xs[off..off + hw]) {
                        *o = (v - m) * s;
                    }
                }
                let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                let mom = self.momentum;
                let rm = &mut self.running_mean.value[[ch]];
                *rm = T::lit((1.0 - mom) * rm.as_f64() + mom * mean);
                let rv = &mut self.running_var.value[[ch]];
                *rv = T::lit((1.0 - mom) * rv.as_f64() + mom * unbiased);
                inv_std.push(s);
            }
        }
        let y = self.affine(&xhat);
        self.cache = Some((xhat, inv_std));
        y
    }

    fn affine(&self, xhat: &Array4<T>) -> Array4<T> {
        let mut y = xhat.clone();
        for (ch, mut plane) in y.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let (g, bt) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            plane.mapv_inplace(|v| v * g + bt);
        }
        y
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut y = x.to_owned();
        let eps = T::lit(self.eps);
        for (ch, mut plane) in y.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let scale = self.gamma.value[[ch]] / (self.running_var.value[[ch]] + eps).sqrt();
            let shift = self.beta.value[[ch]] - self.running_mean.value[[ch]] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        y
    }

    pub fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let (xhat, inv_std) = self.cache.take().expect("batchnorm backward without forward");
        let (b, c, h, w) = xhat.dim();
        let hw = h * w;
        let n = T::from_usize_lossy(b * hw);
        let grad = grad.as_standard_layout();
        let gs = grad.as_slice().expect("standard layout");
        let xs = xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        let out = dx.as_slice_mut().expect("fresh array");
        for ch in 0..c {
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for (&g, &xh) in gs[off..off + hw].iter().zip(&xs[off..off + hw]) {
                    sg += g;
                    sgx += g * xh;
                }
            }
            self.gamma.grad[[ch]] += sgx;
            self.beta.grad[[ch]] += sg;
            let k = self.gamma.value[[ch]] * inv_std[ch] / n;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = k * (n * gs[i] - sg - xs[i] * sgx);
                }
            }
        }
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Parameterized<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::derive_rng;
    use rand::Rng;

    #[test]
    fn normalizes_and_backprops() {
        let mut rng = derive_rng(1, 0);
        let x = Array4::from_shape_simple_fn((3, 2, 2, 3), || rng.random_range(-2.0..3.0f64));
        let probe = Array4::from_shape_simple_fn((3, 2, 2, 3), || rng.random_range(-1.0..1.0f64));
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value[[1]] = 1.7;
        bn.beta.value[[0]] = -0.3;
        let y = bn.clone().forward(&x);
        let c0 = y.index_axis(ndarray::Axis(1), 0);
        assert!((c0.mean().unwrap() + 0.3).abs() < 1e-12);

        let loss = |bn: &BatchNorm2d<f64>, x: &Array4<f64>| (&bn.clone().forward(x) * &probe).sum();
        let mut trained = bn.clone();
        trained.forward(&x);
        let dx = trained.backward(&probe);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [2, 1, 1, 2], [1, 0, 1, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6, "{fd} vs {}", dx[idx]);
        }
        let mut bp = bn.clone();
        bp.gamma.value[[1]] += h;
        let mut bm = bn.clone();
        bm.gamma.value[[1]] -= h;
        let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
        assert!((fd - trained.gamma.grad[[1]]).abs() < 1e-6);
    }

    #[test]
    fn inference_uses_running_stats() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.running_mean.value[[0]] = 2.0;
        bn.running_var.value[[0]] = 4.0 - 1e-5;
        let x = Array4::from_elem((1, 1, 1, 2), 6.0);
        let y = bn.infer(&x);
        assert!((y[[0, 0, 0, 0]] - 2.0).abs() < 1e-12);
    }
}
