//! Volumetric supervised contrastive pretraining for seismic semantic segmentation.
//!
//! Cross-line slices of a seismic volume are pseudo-labelled by their position
//! in the volume, an encoder is pretrained with a supervised contrastive loss
//! over those labels, and a segmentation head is then fine-tuned on the frozen
//! encoder and scored by split-averaged mean intersection over union.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common cases.

pub mod augment;
pub mod error;
pub mod eval;
pub mod loss;
pub mod models;
pub mod nn;
pub mod npy;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SeismicVolume32 = volume::SeismicVolume<f32>;
pub type SeismicVolume64 = volume::SeismicVolume<f64>;
pub type CrossLineSlice32 = volume::CrossLineSlice<f32>;
pub type EmbeddingBatch32 = loss::EmbeddingBatch<f32>;
pub type EmbeddingBatch64 = loss::EmbeddingBatch<f64>;
pub type Encoder32 = models::Encoder<f32>;
pub type ContrastiveModel32 = models::ContrastiveModel<f32>;
pub type SegmentationModel32 = models::SegmentationModel<f32>;
pub type Checkpoint32 = models::ModelCheckpoint<f32>;
