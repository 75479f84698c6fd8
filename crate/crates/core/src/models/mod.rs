//! Encoder, projection head and segmentation head contracts plus checkpoint persistence.

mod checkpoint;
mod encoder;
mod heads;

pub use checkpoint::{CheckpointMeta, ModelCheckpoint, Pretraining, Stage, CHECKPOINT_VERSION};
pub use encoder::Encoder;
pub use heads::{ProjectionHead, SegmentationHead};

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Parameterized};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderFamily {
    Resnet18,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub family: EncoderFamily,
    pub input_channels: usize,
    pub feature_dim: usize,
    pub output_stride: usize,
    /// Base channel width of the tiny family; ignored by ResNet-18.
    pub width: usize,
}

impl EncoderSpec {
    /// ResNet-18 on single-channel input, dilated to output stride 16.
    pub fn resnet18() -> Self {
        Self {
            family: EncoderFamily::Resnet18,
            input_channels: 1,
            feature_dim: 512,
            output_stride: 16,
            width: 64,
        }
    }

    pub fn tiny() -> Self {
        Self {
            family: EncoderFamily::Tiny,
            input_channels: 1,
            feature_dim: 32,
            output_stride: 8,
            width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.output_stride, 8 | 16 | 32) {
            return Err(Error::Config(format!(
                "output_stride must be 8, 16 or 32, got {}",
                self.output_stride
            )));
        }
        if self.family == EncoderFamily::Resnet18 && self.feature_dim != 512 {
            return Err(Error::Config(format!("resnet18 feature_dim is 512, got {}", self.feature_dim)));
        }
        if self.input_channels == 0 || self.feature_dim == 0 || self.width == 0 {
            return Err(Error::Config("encoder channel counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionHeadSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl ProjectionHeadSpec {
    /// `feature_dim -> feature_dim -> 128`.
    pub fn for_encoder(enc: &EncoderSpec) -> Self {
        Self {
            in_dim: enc.feature_dim,
            hidden_dim: enc.feature_dim,
            out_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("projection head dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// ASPP + 1x1 fuse + 1x1 classifier.
    Aspp,
    /// Single 3x3 classifier conv.
    Conv3x3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationHeadSpec {
    pub kind: HeadKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub atrous_rates: Vec<usize>,
    /// ASPP branch width.
    pub channels: usize,
}

impl SegmentationHeadSpec {
    pub fn for_encoder(enc: &EncoderSpec, num_classes: usize) -> Self {
        match enc.family {
            EncoderFamily::Resnet18 => Self {
                kind: HeadKind::Aspp,
                in_channels: enc.feature_dim,
                num_classes,
                atrous_rates: vec![6, 12, 18],
                channels: 256,
            },
            EncoderFamily::Tiny => Self {
                kind: HeadKind::Conv3x3,
                in_channels: enc.feature_dim,
                num_classes,
                atrous_rates: Vec::new(),
                channels: enc.feature_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.channels == 0 || self.atrous_rates.contains(&0) {
            return Err(Error::Config("segmentation head channels and rates must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stack `H x W` single-channel images into `[B, channels, H, W]`, replicating the
/// channel when the encoder stem expects more than one.
pub fn images_to_batch<T: Scalar>(images: &[Array2<T>], channels: usize) -> Result<Array4<T>> {
    let Some(first) = images.first() else {
        return Err(Error::Data("empty image batch".into()));
    };
    let (h, w) = first.dim();
    if let Some(bad) = images.iter().find(|i| i.dim() != (h, w)) {
        return Err(Error::Data(format!("image {:?} differs from batch shape {:?}", bad.dim(), (h, w))));
    }
    Ok(Array4::from_shape_fn((images.len(), channels, h, w), |(b, _, y, x)| images[b][[y, x]]))
}

/// Copy stored values into every parameter under `prefix`, checking names and shapes.
pub fn load_parameters<T: Scalar, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    prefix: &str,
    tensors: &BTreeMap<String, ArrayD<T>>,
) -> Result<()> {
    let mut err = None;
    model.visit_mut(prefix, &mut |name, p: &mut Param<T>| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            Some(v) => {
                err = Some(Error::Config(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    v.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Config(format!("checkpoint is missing tensor {name}"))),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Encoder + projection head trained by the contrastive stage.
#[derive(Debug, Clone)]
pub struct ContrastiveModel<T: Scalar> {
    pub encoder: Encoder<T>,
    pub projection: ProjectionHead<T>,
}

impl<T: Scalar> ContrastiveModel<T> {
    pub fn new<R: Rng>(encoder: &EncoderSpec, projection: &ProjectionHeadSpec, rng: &mut R) -> Result<Self> {
        if projection.in_dim != encoder.feature_dim {
            return Err(Error::Config(format!(
                "projection in_dim {} does not match encoder feature_dim {}",
                projection.in_dim, encoder.feature_dim
            )));
        }
        Ok(Self {
            encoder: Encoder::new(encoder, rng)?,
            projection: ProjectionHead::new(projection, rng)?,
        })
    }

    /// Training forward: images to unit-norm embeddings.
    pub fn forward(&mut self, images: &Array4<T>) -> Result<Array2<T>> {
        let pooled = self.encoder.forward_pooled(images)?;
        self.projection.forward(&pooled)
    }

    pub fn backward(&mut self, grad: &Array2<T>) {
        let g = self.projection.backward(grad);
        self.encoder.backward_pooled(&g);
    }

    pub fn clear_cache(&mut self) {
        self.encoder.clear_cache();
        self.projection.clear_cache();
    }
}

impl<T: Scalar> Parameterized<T> for ContrastiveModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
        self.projection.visit(&crate::nn::join(prefix, "projection"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
        self.projection.visit_mut(&crate::nn::join(prefix, "projection"), f);
    }
}

/// Read-only view of an encoder: inference only, no parameter access for optimizers.
#[derive(Debug, Clone, Copy)]
pub struct FrozenEncoder<'a, T: Scalar> {
    inner: &'a Encoder<T>,
}

impl<T: Scalar> FrozenEncoder<'_, T> {
    pub fn spec(&self) -> &EncoderSpec {
        self.inner.spec()
    }

    pub fn encode(&self, images: &Array4<T>) -> Result<(Array4<T>, Array2<T>)> {
        self.inner.encode(images)
    }

    pub fn features(&self, images: &Array4<T>) -> Result<Array4<T>> {
        self.inner.infer(images)
    }
}

/// Exclude an encoder from training: the returned view cannot hand out mutable parameters.
pub fn freeze_encoder<T: Scalar>(encoder: &Encoder<T>) -> FrozenEncoder<'_, T> {
    FrozenEncoder { inner: encoder }
}

/// Encoder + segmentation head used for fine-tuning and evaluation.
#[derive(Debug, Clone)]
pub struct SegmentationModel<T: Scalar> {
    pub encoder: Encoder<T>,
    pub head: SegmentationHead<T>,
}

impl<T: Scalar> SegmentationModel<T> {
    /// Logits `[B, C, H, W]` for normalized images, reflect-padding the input to a
    /// multiple of the output stride and cropping the logits back.
    pub fn predict_logits(&self, images: &Array4<T>) -> Result<Array4<T>> {
        let (_, _, h, w) = images.dim();
        let padded = pad_to_stride(images, self.encoder.spec().output_stride);
        let fmap = self.encoder.infer(&padded)?;
        let (ph, pw) = (padded.dim().2, padded.dim().3);
        let logits = self.head.segment(&fmap, (ph, pw))?;
        Ok(crate::nn::crop_spatial(&logits, (h, w)))
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn predict(&self, images: &Array4<T>) -> Result<Vec<Array2<u32>>> {
        Ok(argmax_classes(&self.predict_logits(images)?))
    }
}

impl<T: Scalar> Parameterized<T> for SegmentationModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&crate::nn::join(prefix, "encoder"), f);
        self.head.visit(&crate::nn::join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&crate::nn::join(prefix, "encoder"), f);
        self.head.visit_mut(&crate::nn::join(prefix, "head"), f);
    }
}

/// Reflect-pad so both spatial dims are multiples of `stride`.
pub fn pad_to_stride<T: Scalar>(images: &Array4<T>, stride: usize) -> Array4<T> {
    let (_, _, h, w) = images.dim();
    let ph = (stride - h % stride) % stride;
    let pw = (stride - w % stride) % stride;
    if ph == 0 && pw == 0 {
        images.clone()
    } else {
        crate::nn::pad_reflect(images, ph, pw)
    }
}

/// Argmax over the class axis of `[B, C, H, W]` logits; ties go to the lowest index.
pub fn argmax_classes<T: Scalar>(logits: &Array4<T>) -> Vec<Array2<u32>> {
    let (b, c, h, w) = logits.dim();
    (0..b)
        .map(|n| {
            Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0;
                for k in 1..c {
                    if logits[[n, k, y, x]] > logits[[n, best, y, x]] {
                        best = k;
                    }
                }
                best as u32
            })
        })
        .collect()
}
