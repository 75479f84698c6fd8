//! Projection MLP for the contrastive stage and segmentation heads for fine-tuning.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;

use super::{HeadKind, ProjectionHeadSpec, SegmentationHeadSpec};
use crate::error::{Error, Result};
use crate::loss::{l2_normalize_backward, l2_normalize_rows};
use crate::nn::{
    concat_channels, join, relu, relu_backward, split_channels, upsample_bilinear, upsample_bilinear_backward, Conv2d,
    ConvBn, Linear, Param, Parameterized,
};
use crate::scalar::Scalar;

/// Single-hidden-layer MLP followed by row-wise L2 normalisation.
#[derive(Debug, Clone)]
pub struct ProjectionHead<T: Scalar> {
    spec: ProjectionHeadSpec,
    fc1: Linear<T>,
    fc2: Linear<T>,
    cache: Option<ProjectionCache<T>>,
    guard_hits: usize,
}

#[derive(Debug, Clone)]
struct ProjectionCache<T> {
    hidden: Array2<T>,
    normalized: Array2<T>,
    norms: Vec<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn new<R: Rng>(spec: &ProjectionHeadSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            fc1: Linear::new(spec.in_dim, spec.hidden_dim, rng),
            fc2: Linear::new(spec.hidden_dim, spec.out_dim, rng),
            cache: None,
            guard_hits: 0,
        })
    }

    pub fn spec(&self) -> &ProjectionHeadSpec {
        &self.spec
    }

    /// Rows that needed the zero-norm guard since construction.
    pub fn guard_hits(&self) -> usize {
        self.guard_hits
    }

    pub fn output_layer_mut(&mut self) -> &mut Linear<T> {
        &mut self.fc2
    }

    fn check(&self, pooled: &Array2<T>) -> Result<()> {
        if pooled.ncols() != self.spec.in_dim {
            return Err(Error::Config(format!(
                "projection head expects width {}, got {}",
                self.spec.in_dim,
                pooled.ncols()
            )));
        }
        Ok(())
    }

    fn finish(&mut self, raw: &Array2<T>) -> Result<(Array2<T>, Vec<T>)> {
        let (z, norms, guarded) = l2_normalize_rows(raw);
        if guarded > 0 {
            self.guard_hits += guarded;
            log::warn!("projection produced {guarded} near-zero rows");
            return Err(Error::DegenerateOutput(format!(
                "{guarded} projected rows have norm below 1e-12 and cannot be unit-normalized"
            )));
        }
        Ok((z, norms))
    }

    /// Inference projection to unit-norm embeddings.
    pub fn project(&mut self, pooled: &Array2<T>) -> Result<Array2<T>> {
        self.check(pooled)?;
        let raw = self.fc2.infer(&relu(&self.fc1.infer(pooled)));
        self.finish(&raw).map(|(z, _)| z)
    }

    pub fn forward(&mut self, pooled: &Array2<T>) -> Result<Array2<T>> {
        self.check(pooled)?;
        let hidden = relu(&self.fc1.forward(pooled));
        let raw = self.fc2.forward(&hidden);
        let (z, norms) = self.finish(&raw)?;
        self.cache = Some(ProjectionCache {
            hidden,
            normalized: z.clone(),
            norms,
        });
        Ok(z)
    }

    /// Backward from `dL/dz`; returns `dL/dpooled`.
    pub fn backward(&mut self, grad: &Array2<T>) -> Array2<T> {
        let c = self.cache.take().expect("projection backward without forward");
        let g = l2_normalize_backward(&c.normalized, &c.norms, grad);
        let g = self.fc2.backward(&g);
        let g = relu_backward(&g, &c.hidden);
        self.fc1.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        self.fc1.clear_cache();
        self.fc2.clear_cache();
    }
}

impl<T: Scalar> Parameterized<T> for ProjectionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Atrous spatial pyramid pooling: 1x1 branch, one dilated 3x3 branch per rate and an
/// image-pooling branch, concatenated and fused by a 1x1 conv.
#[derive(Debug, Clone)]
struct Aspp<T: Scalar> {
    branches: Vec<ConvBn<T>>,
    pooling: ConvBn<T>,
    fuse: ConvBn<T>,
    fmap_hw: (usize, usize),
}

impl<T: Scalar> Aspp<T> {
    fn new<R: Rng>(spec: &SegmentationHeadSpec, rng: &mut R) -> Self {
        let (cin, width) = (spec.in_channels, spec.channels);
        let mut branches = vec![ConvBn::new(cin, width, 1, 1, 0, 1, true, rng)];
        for &r in &spec.atrous_rates {
            branches.push(ConvBn::new(cin, width, 3, 1, r, r, true, rng));
        }
        let n = branches.len() + 1;
        Self {
            branches,
            pooling: ConvBn::new(cin, width, 1, 1, 0, 1, true, rng),
            fuse: ConvBn::new(n * width, width, 1, 1, 0, 1, true, rng),
            fmap_hw: (0, 0),
        }
    }

    fn pooled(x: &Array4<T>) -> Array4<T> {
        let (b, c, _, _) = x.dim();
        let m = crate::nn::global_avg_pool(x);
        m.into_shape_with_order((b, c, 1, 1)).expect("pooled reshape")
    }

    fn forward(&mut self, x: &Array4<T>) -> Array4<T> {
        let (_, _, h, w) = x.dim();
        self.fmap_hw = (h, w);
        let mut parts: Vec<Array4<T>> = self.branches.iter_mut().map(|b| b.forward(x)).collect();
        let pooled = self.pooling.forward(&Self::pooled(x));
        parts.push(upsample_bilinear(&pooled, (h, w)));
        self.fuse.forward(&concat_channels(&parts))
    }

    fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let (_, _, h, w) = x.dim();
        let mut parts: Vec<Array4<T>> = self.branches.iter().map(|b| b.infer(x)).collect();
        let pooled = self.pooling.infer(&Self::pooled(x));
        parts.push(upsample_bilinear(&pooled, (h, w)));
        self.fuse.infer(&concat_channels(&parts))
    }

    fn backward(&mut self, grad: &Array4<T>) {
        let g = self.fuse.backward(grad, true).expect("input grad");
        let width = self.pooling.conv.out_channels();
        let sizes = vec![width; self.branches.len() + 1];
        let mut parts = split_channels(&g, &sizes);
        let pooled_grad = parts.pop().expect("pooling part");
        // broadcasting a 1x1 map is adjoint to a spatial sum
        let summed = pooled_grad.sum_axis(Axis(3)).sum_axis(Axis(2));
        let (b, c) = summed.dim();
        self.pooling
            .backward(&summed.into_shape_with_order((b, c, 1, 1)).expect("reshape"), false);
        for (branch, g) in self.branches.iter_mut().zip(parts) {
            branch.backward(&g, false);
        }
    }

    fn clear_cache(&mut self) {
        self.branches.iter_mut().for_each(ConvBn::clear_cache);
        self.pooling.clear_cache();
        self.fuse.clear_cache();
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join(prefix, &format!("branch{i}")), f);
        }
        self.pooling.visit(&join(prefix, "pooling"), f);
        self.fuse.visit(&join(prefix, "fuse"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
        self.pooling.visit_mut(&join(prefix, "pooling"), f);
        self.fuse.visit_mut(&join(prefix, "fuse"), f);
    }
}

/// Per-pixel classifier over encoder features, upsampled bilinearly to the image size.
///
/// Logits are laid out `[B, C, H, W]`; softmax is left to the loss.
#[derive(Debug, Clone)]
pub struct SegmentationHead<T: Scalar> {
    spec: SegmentationHeadSpec,
    aspp: Option<Aspp<T>>,
    classifier: Conv2d<T>,
    fmap_hw: Option<(usize, usize)>,
}

impl<T: Scalar> SegmentationHead<T> {
    pub fn new<R: Rng>(spec: &SegmentationHeadSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (aspp, classifier) = match spec.kind {
            HeadKind::Aspp => (
                Some(Aspp::new(spec, rng)),
                Conv2d::new(spec.channels, spec.num_classes, 1, 1, 0, 1, true, rng),
            ),
            HeadKind::Conv3x3 => (None, Conv2d::new(spec.in_channels, spec.num_classes, 3, 1, 1, 1, true, rng)),
        };
        Ok(Self {
            spec: spec.clone(),
            aspp,
            classifier,
            fmap_hw: None,
        })
    }

    pub fn spec(&self) -> &SegmentationHeadSpec {
        &self.spec
    }

    fn check(&self, fmap: &Array4<T>) -> Result<()> {
        if fmap.dim().1 != self.spec.in_channels {
            return Err(Error::Config(format!(
                "segmentation head expects {} feature channels, got {}",
                self.spec.in_channels,
                fmap.dim().1
            )));
        }
        Ok(())
    }

    /// Inference logits at `target_hw`.
    pub fn segment(&self, fmap: &Array4<T>, target_hw: (usize, usize)) -> Result<Array4<T>> {
        self.check(fmap)?;
        let h = match &self.aspp {
            Some(a) => a.infer(fmap),
            None => fmap.clone(),
        };
        Ok(upsample_bilinear(&self.classifier.infer(&h), target_hw))
    }

    pub fn forward(&mut self, fmap: &Array4<T>, target_hw: (usize, usize)) -> Result<Array4<T>> {
        self.check(fmap)?;
        let h = match &mut self.aspp {
            Some(a) => a.forward(fmap),
            None => fmap.clone(),
        };
        let logits = self.classifier.forward(&h);
        self.fmap_hw = Some((logits.dim().2, logits.dim().3));
        Ok(upsample_bilinear(&logits, target_hw))
    }

    pub fn backward(&mut self, grad: &Array4<T>) {
        let hw = self.fmap_hw.take().expect("head backward without forward");
        let g = upsample_bilinear_backward(grad, hw);
        let needs_input = self.aspp.is_some();
        let g = self.classifier.backward(&g, needs_input);
        if let (Some(a), Some(g)) = (&mut self.aspp, g) {
            a.backward(&g);
        }
    }

    pub fn clear_cache(&mut self) {
        self.fmap_hw = None;
        self.classifier.clear_cache();
        if let Some(a) = &mut self.aspp {
            a.clear_cache();
        }
    }
}

impl<T: Scalar> Parameterized<T> for SegmentationHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(a) = &self.aspp {
            a.visit(&join(prefix, "aspp"), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(a) = &mut self.aspp {
            a.visit_mut(&join(prefix, "aspp"), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}
