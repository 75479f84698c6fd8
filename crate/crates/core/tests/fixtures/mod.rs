//! Small synthetic training setups shared by the training and acceptance suites.
#![allow(dead_code)]

use volcon::augment::AugmentationPolicy;
use volcon::eval::{evaluate_splits, TestVolume};
use volcon::models::*;
use volcon::optim::OptimizerConfig;
use volcon::train::*;
use volcon::volume::*;
use volcon::CrossLineSlice32;

pub const DESK_LR: f64 = 0.01;

pub struct Desk {
    pub slices: Vec<CrossLineSlice32>,
    pub policy: AugmentationPolicy,
    pub optimizer: OptimizerConfig,
    pub encoder: EncoderSpec,
    pub projection: ProjectionHeadSpec,
    pub head: SegmentationHeadSpec,
}

fn policy_for(vol: &SeismicVolume<f32>) -> AugmentationPolicy {
    AugmentationPolicy {
        crop_size: 32,
        normalization: compute_normalization_stats(vol).unwrap(),
        ..Default::default()
    }
}

fn desk_from(vol: &SeismicVolume<f32>, labels: &LabelVolume, lr: f64) -> Desk {
    let encoder = EncoderSpec::tiny();
    Desk {
        slices: extract_crosslines(vol, Some(labels)).unwrap(),
        policy: policy_for(vol),
        optimizer: OptimizerConfig {
            learning_rate: lr,
            ..Default::default()
        },
        projection: ProjectionHeadSpec::for_encoder(&encoder),
        head: SegmentationHeadSpec::for_encoder(&encoder, 3),
        encoder,
    }
}

/// Default 3-layer synthetic volume with a tiny encoder and 32-pixel crops.
pub fn desk(noise: f64, seed: u64) -> Desk {
    let cfg = SyntheticConfig {
        noise,
        seed,
        ..Default::default()
    };
    let (vol, labels) = generate_synthetic_volume::<f32>(&cfg).unwrap();
    desk_from(&vol, &labels, DESK_LR)
}

/// A few noiseless cross-lines, cheap enough for unit-speed training tests.
pub fn small_desk(crosslines: usize) -> Desk {
    let cfg = SyntheticConfig {
        dims: (32, crosslines, 32),
        noise: 0.0,
        ..Default::default()
    };
    let (vol, labels) = generate_synthetic_volume::<f32>(&cfg).unwrap();
    desk_from(&vol, &labels, DESK_LR)
}

pub fn pretrain_stage(epochs: usize, n: usize, seed: u64) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 16,
        num_partitions: Some(n),
        seed,
        ..StageConfig::pretrain()
    }
}

pub fn finetune_stage(epochs: usize, seed: u64) -> StageConfig {
    StageConfig {
        epochs,
        batch_size: 16,
        seed,
        ..StageConfig::finetune()
    }
}

/// Test MIOU of volume-label pretraining and of a random-init encoder on one seed.
///
/// One `(32, 124, 64)` volume: cross-lines `0..64` train, `64..94` and `94..124`
/// are the two test volumes, cut into three splits.
pub fn held_out_pair(seed: u64, lr: f64) -> (f64, f64) {
    let cfg = SyntheticConfig {
        dims: (32, 124, 64),
        seed,
        ..Default::default()
    };
    let (vol, labels) = generate_synthetic_volume::<f32>(&cfg).unwrap();
    let train = vol.crossline_range(0..64).unwrap();
    let train_labels = labels.crossline_range(0..64).unwrap();
    let tests: Vec<TestVolume<f32>> = [64..94, 94..124]
        .into_iter()
        .map(|r| TestVolume {
            amplitude: vol.crossline_range(r.clone()).unwrap(),
            labels: labels.crossline_range(r).unwrap(),
        })
        .collect();
    let splits = build_test_splits(30, 30, 3).unwrap();
    let d = desk_from(&train, &train_labels, lr);

    let (pretrained, _) =
        pretrain_contrastive(&d.slices, &pretrain_stage(10, 8, seed), &d.optimizer, &d.policy, &d.encoder, &d.projection)
            .unwrap();
    let random = random_init_checkpoint::<f32>(&d.encoder, &d.projection, seed).unwrap();
    let score = |ck: &ModelCheckpoint<f32>| {
        let (ft, _) = finetune_segmentation(&d.slices, ck, &finetune_stage(20, seed), &d.optimizer, &d.policy, &d.head).unwrap();
        let model = segmentation_model_from_checkpoint(&ft).unwrap();
        evaluate_splits(&model, &tests, &splits, &d.policy).unwrap().1
    };
    (score(&pretrained), score(&random))
}
