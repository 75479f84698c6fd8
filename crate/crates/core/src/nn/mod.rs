//! Minimal NCHW layers with hand-written backward passes.
//!
//! Training-mode `forward` caches what `backward` needs inside the layer;
//! `infer` is the cache-free evaluation path usable through `&self`.

mod block;
mod conv;
mod layers;
mod norm;

pub use block::ConvBn;
pub use conv::Conv2d;
pub use layers::{
    concat_channels, crop_spatial, global_avg_pool, global_avg_pool_backward, pad_reflect, pad_spatial_backward,
    relu, relu_backward, split_channels, upsample_bilinear, upsample_bilinear_backward, Linear, MaxPool2d,
};
pub use norm::BatchNorm2d;

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

/// A named tensor owned by a layer. Buffers (`trainable == false`) are persisted
/// but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything holding named parameters.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// `(name, value)` pairs in visiting order.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, ArrayD<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-normal initialisation for a weight with the given fan-in.
pub(crate) fn he_normal<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_simple_fn(shape, || T::lit(normal.sample(rng)))
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual linear/conv bias init.
pub(crate) fn fan_in_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape, || T::lit(rng.random_range(-bound..=bound)))
}
