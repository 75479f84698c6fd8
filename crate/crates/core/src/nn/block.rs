use ndarray::Array4;
use rand::Rng;

use super::{join, relu, relu_backward, BatchNorm2d, Conv2d, Param, Parameterized};
use crate::scalar::Scalar;

/// Bias-free convolution, batch norm and optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    relu: bool,
    out: Option<Array4<T>>,
}

impl<T: Scalar> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, padding, dilation, false, rng),
            bn: BatchNorm2d::new(cout),
            relu,
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let y = self.bn.forward(&self.conv.forward(x));
        if self.relu {
            let y = relu(&y);
            self.out = Some(y.clone());
            y
        } else {
            y
        }
    }

    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let y = self.bn.infer(&self.conv.infer(x));
        if self.relu {
            relu(&y)
        } else {
            y
        }
    }

    pub fn backward(&mut self, grad: &Array4<T>, input_grad: bool) -> Option<Array4<T>> {
        let g = if self.relu {
            relu_backward(grad, &self.out.take().expect("conv-bn backward without forward"))
        } else {
            grad.clone()
        };
        let g = self.bn.backward(&g);
        self.conv.backward(&g, input_grad)
    }

    pub fn clear_cache(&mut self) {
        self.out = None;
        self.bn.clear_cache();
        self.conv.clear_cache();
    }
}

impl<T: Scalar> Parameterized<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}
