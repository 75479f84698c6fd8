//! ResNet-18 and a small convolutional encoder, both NCHW and output-stride aware.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::{EncoderFamily, EncoderSpec};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, ConvBn, MaxPool2d, Param, Parameterized,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct BasicBlock<T: Scalar> {
    a: ConvBn<T>,
    b: ConvBn<T>,
    downsample: Option<ConvBn<T>>,
    out: Option<Array4<T>>,
}

impl<T: Scalar> BasicBlock<T> {
    fn new<R: Rng>(cin: usize, cout: usize, stride: usize, first_dil: usize, dil: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, 1, false, rng));
        Self {
            a: ConvBn::new(cin, cout, 3, stride, first_dil, first_dil, true, rng),
            b: ConvBn::new(cout, cout, 3, 1, dil, dil, false, rng),
            downsample,
            out: None,
        }
    }

    fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let h = self.b.forward(&self.a.forward(x));
        let shortcut = match &mut self.downsample {
            Some(d) => d.forward(x),
            None => x.clone(),
        };
        let y = relu(&(h + shortcut));
        self.out = Some(y.clone());
        y
    }

    fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let h = self.b.infer(&self.a.infer(x));
        let shortcut = match &self.downsample {
            Some(d) => d.infer(x),
            None => x.clone(),
        };
        relu(&(h + shortcut))
    }

    fn backward(&mut self, grad: &Array4<T>) -> Array4<T> {
        let g = relu_backward(grad, &self.out.take().expect("block backward without forward"));
        let gh = self.b.backward(&g, true).expect("input grad");
        let mut gx = self.a.backward(&gh, true).expect("input grad");
        match &mut self.downsample {
            Some(d) => gx += &d.backward(&g, true).expect("input grad"),
            None => gx += &g,
        }
        gx
    }

    fn clear_cache(&mut self) {
        self.out = None;
        self.a.clear_cache();
        self.b.clear_cache();
        if let Some(d) = &mut self.downsample {
            d.clear_cache();
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
        if let Some(d) = &self.downsample {
            d.visit(&join(prefix, "downsample"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        self.b.visit_mut(&join(prefix, "b"), f);
        if let Some(d) = &mut self.downsample {
            d.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

#[derive(Debug, Clone)]
struct ResNet18<T: Scalar> {
    stem: ConvBn<T>,
    pool: MaxPool2d,
    blocks: Vec<BasicBlock<T>>,
}

impl<T: Scalar> ResNet18<T> {
    fn new<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let stem = ConvBn::new(spec.input_channels, 64, 7, 2, 3, 1, true, rng);
        // layers 3 and 4 trade stride for dilation to reach the requested output stride
        let dilate = match spec.output_stride {
            8 => [false, false, true, true],
            16 => [false, false, false, true],
            _ => [false; 4],
        };
        let widths = [64, 128, 256, 512];
        let mut blocks = Vec::with_capacity(8);
        let mut cin = 64;
        let mut dilation = 1;
        for (stage, &cout) in widths.iter().enumerate() {
            let mut stride = if stage == 0 { 1 } else { 2 };
            let prev = dilation;
            if dilate[stage] {
                dilation *= stride;
                stride = 1;
            }
            blocks.push(BasicBlock::new(cin, cout, stride, prev, dilation, rng));
            blocks.push(BasicBlock::new(cout, cout, 1, dilation, dilation, rng));
            cin = cout;
        }
        Self {
            stem,
            pool: MaxPool2d::new(3, 2, 1),
            blocks,
        }
    }
}

#[derive(Debug, Clone)]
struct TinyNet<T: Scalar> {
    layers: Vec<ConvBn<T>>,
}

impl<T: Scalar> TinyNet<T> {
    fn new<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Self {
        let downsamples = spec.output_stride.trailing_zeros() as usize;
        let mut layers = vec![ConvBn::new(spec.input_channels, spec.width, 3, 1, 1, 1, true, rng)];
        let mut cin = spec.width;
        for i in 0..downsamples {
            let cout = if i + 1 == downsamples {
                spec.feature_dim
            } else {
                (spec.width << (i + 1)).min(spec.feature_dim)
            };
            layers.push(ConvBn::new(cin, cout, 3, 2, 1, 1, true, rng));
            cin = cout;
        }
        Self { layers }
    }
}

#[derive(Debug, Clone)]
enum Body<T: Scalar> {
    ResNet18(ResNet18<T>),
    Tiny(TinyNet<T>),
}

/// Image encoder producing a feature map and its global-average-pooled vector.
#[derive(Debug, Clone)]
pub struct Encoder<T: Scalar> {
    spec: EncoderSpec,
    body: Body<T>,
    fmap_hw: Option<(usize, usize)>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(spec: &EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let body = match spec.family {
            EncoderFamily::Resnet18 => Body::ResNet18(ResNet18::new(spec, rng)),
            EncoderFamily::Tiny => Body::Tiny(TinyNet::new(spec, rng)),
        };
        Ok(Self {
            spec: spec.clone(),
            body,
            fmap_hw: None,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Spatial size of the feature map for an `h x w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        match &self.body {
            Body::ResNet18(net) => {
                let (h, w) = net.stem.conv.output_hw(h, w).expect("checked size");
                let (mut h, mut w) = net.pool.output_hw(h, w);
                for b in &net.blocks {
                    (h, w) = b.a.conv.output_hw(h, w).expect("checked size");
                }
                (h, w)
            }
            Body::Tiny(net) => net
                .layers
                .iter()
                .fold((h, w), |(h, w), l| l.conv.output_hw(h, w).expect("checked size")),
        }
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels {
            return Err(Error::Config(format!(
                "encoder expects {} input channels, got {c}",
                self.spec.input_channels
            )));
        }
        let min = self.spec.output_stride;
        if h < min || w < min {
            return Err(Error::Config(format!(
                "input {h}x{w} is smaller than the encoder output stride {min}"
            )));
        }
        Ok(())
    }

    /// Training-mode forward (batch statistics, caches for backward).
    pub fn forward(&mut self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        let y = match &mut self.body {
            Body::ResNet18(net) => {
                let mut h = net.pool.forward(&net.stem.forward(x));
                for b in &mut net.blocks {
                    h = b.forward(&h);
                }
                h
            }
            Body::Tiny(net) => net.layers.iter_mut().fold(x.clone(), |h, l| l.forward(&h)),
        };
        self.fmap_hw = Some((y.dim().2, y.dim().3));
        Ok(y)
    }

    /// Inference-mode forward (running statistics, no caches).
    pub fn infer(&self, x: &Array4<T>) -> Result<Array4<T>> {
        self.check_input(x)?;
        Ok(match &self.body {
            Body::ResNet18(net) => {
                let h = net.pool.infer(&net.stem.infer(x));
                net.blocks.iter().fold(h, |h, b| b.infer(&h))
            }
            Body::Tiny(net) => net.layers.iter().fold(x.clone(), |h, l| l.infer(&h)),
        })
    }

    /// Inference feature map plus its pooled `B x feature_dim` vector.
    pub fn encode(&self, x: &Array4<T>) -> Result<(Array4<T>, Array2<T>)> {
        let fmap = self.infer(x)?;
        let pooled = global_avg_pool(&fmap);
        Ok((fmap, pooled))
    }

    /// Training forward returning the pooled representation.
    pub fn forward_pooled(&mut self, x: &Array4<T>) -> Result<Array2<T>> {
        Ok(global_avg_pool(&self.forward(x)?))
    }

    /// Backward from a feature-map gradient; accumulates parameter gradients.
    pub fn backward(&mut self, grad: &Array4<T>) {
        match &mut self.body {
            Body::ResNet18(net) => {
                let mut g = grad.clone();
                for b in net.blocks.iter_mut().rev() {
                    g = b.backward(&g);
                }
                let g = net.pool.backward(&g);
                net.stem.backward(&g, false);
            }
            Body::Tiny(net) => {
                let n = net.layers.len();
                let mut g = grad.clone();
                for (i, l) in net.layers.iter_mut().enumerate().rev() {
                    match l.backward(&g, i > 0) {
                        Some(next) => g = next,
                        None => debug_assert_eq!(i, 0, "{n} layers"),
                    }
                }
            }
        }
    }

    pub fn backward_pooled(&mut self, grad: &Array2<T>) {
        let hw = self.fmap_hw.expect("encoder backward without forward");
        self.backward(&global_avg_pool_backward(grad, hw));
    }

    pub fn clear_cache(&mut self) {
        match &mut self.body {
            Body::ResNet18(net) => {
                net.stem.clear_cache();
                net.pool.clear_cache();
                net.blocks.iter_mut().for_each(BasicBlock::clear_cache);
            }
            Body::Tiny(net) => net.layers.iter_mut().for_each(ConvBn::clear_cache),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match &self.body {
            Body::ResNet18(net) => {
                net.stem.visit(&join(prefix, "stem"), f);
                for (i, b) in net.blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("block{i}")), f);
                }
            }
            Body::Tiny(net) => {
                for (i, l) in net.layers.iter().enumerate() {
                    l.visit(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match &mut self.body {
            Body::ResNet18(net) => {
                net.stem.visit_mut(&join(prefix, "stem"), f);
                for (i, b) in net.blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("block{i}")), f);
                }
            }
            Body::Tiny(net) => {
                for (i, l) in net.layers.iter_mut().enumerate() {
                    l.visit_mut(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }
}
