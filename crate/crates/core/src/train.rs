//! Stage 1 contrastive pretraining and stage 2 frozen-encoder segmentation fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{derive_rng, make_view_pair, AugmentationMode, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::loss::{supcon_value_and_gradient, EmbeddingBatch, Reduction, DEFAULT_TEMPERATURE};
use crate::models::{
    argmax_classes, freeze_encoder, images_to_batch, load_parameters, pad_to_stride, CheckpointMeta,
    ContrastiveModel, Encoder, EncoderSpec, ModelCheckpoint, Pretraining, ProjectionHeadSpec, SegmentationHead,
    SegmentationHeadSpec, SegmentationModel, Stage,
};
use crate::nn::{crop_spatial, pad_spatial_backward, Parameterized};
use crate::optim::{OptimizerConfig, Sgd};
use crate::scalar::Scalar;
use crate::volume::{assign_volume_labels, CrossLineSlice};

/// Environment variable overriding the augmentation worker count.
pub const NUM_WORKERS_ENV: &str = "VOLCON_NUM_WORKERS";

const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_SALT: u64 = 0x5eed_5eed_5eed_5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    VolumeLabels,
    Simclr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Number of volume partitions; ignored by the SimCLR strategy.
    pub num_partitions: Option<usize>,
    pub pair_strategy: PairStrategy,
    pub seed: u64,
    /// Two augmented views per slice in every pretraining batch.
    pub two_views: bool,
    /// Drop a trailing partial batch instead of training on it.
    pub drop_last: bool,
    pub reduction: Reduction,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs: 50,
            batch_size: 64,
            temperature: DEFAULT_TEMPERATURE,
            num_partitions: Some(100),
            pair_strategy: PairStrategy::VolumeLabels,
            seed: 0,
            two_views: true,
            drop_last: false,
            reduction: Reduction::Mean,
        }
    }
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self::default()
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            num_partitions: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.stage == Stage::Pretrain {
            if !(self.temperature > 0.0 && self.temperature.is_finite()) {
                return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
            }
            if self.pair_strategy == PairStrategy::VolumeLabels && self.num_partitions.unwrap_or(0) < 1 {
                return Err(Error::Config("num_partitions must be >= 1 for volume_labels".into()));
            }
            if self.pair_strategy == PairStrategy::Simclr && !self.two_views {
                return Err(Error::Config("simclr needs two views per slice".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_time_s: f64,
    pub anchors_skipped: usize,
    pub batches_skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("epoch record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<EpochRecord>>>()?;
        Ok(Self {
            records,
            checkpoint: None,
        })
    }
}

/// Worker count from `VOLCON_NUM_WORKERS`, else the rayon default.
pub fn num_workers() -> usize {
    std::env::var(NUM_WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(rayon::current_num_threads)
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(num_workers())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

fn check_targets(logits: &Array4<impl Scalar>, targets: &[Array2<u32>]) -> Result<()> {
    let (b, c, h, w) = logits.dim();
    if targets.len() != b {
        return Err(Error::Data(format!("{} target maps for a batch of {b}", targets.len())));
    }
    for t in targets {
        if t.dim() != (h, w) {
            return Err(Error::Data(format!("target shape {:?} differs from logits {:?}", t.dim(), (h, w))));
        }
        if let Some(bad) = t.iter().find(|&&v| v as usize >= c) {
            return Err(Error::Data(format!("target class {bad} outside [0, {c})")));
        }
    }
    Ok(())
}

/// Mean over pixels of `-log softmax(logits)[target]`, logits `[B, C, H, W]`.
pub fn pixel_cross_entropy<T: Scalar>(logits: &Array4<T>, targets: &[Array2<u32>]) -> Result<T> {
    pixel_cross_entropy_with_gradient(logits, targets).map(|(l, _)| l)
}

/// Loss together with `dL/dlogits`.
pub fn pixel_cross_entropy_with_gradient<T: Scalar>(
    logits: &Array4<T>,
    targets: &[Array2<u32>],
) -> Result<(T, Array4<T>)> {
    check_targets(logits, targets)?;
    let (b, c, h, w) = logits.dim();
    let n = T::from_usize_lossy(b * h * w);
    let mut grad = Array4::<T>::zeros((b, c, h, w));
    let mut total = 0.0f64;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let max = (0..c).map(|k| logits[[bi, k, y, x]]).fold(T::neg_infinity(), T::max);
                let denom: T = (0..c).map(|k| (logits[[bi, k, y, x]] - max).exp()).sum();
                let t = targets[bi][[y, x]] as usize;
                total += (max + denom.ln() - logits[[bi, t, y, x]]).as_f64();
                for k in 0..c {
                    let p = (logits[[bi, k, y, x]] - max).exp() / denom;
                    let onehot = if k == t { T::one() } else { T::zero() };
                    grad[[bi, k, y, x]] = (p - onehot) / n;
                }
            }
        }
    }
    Ok((T::lit(total / (b * h * w) as f64), grad))
}

fn batches(order: &[usize], batch_size: usize, drop_last: bool) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .collect()
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed ^ SHUFFLE_SALT, epoch as u64));
    order
}

/// A freshly initialised encoder + projection, stored as a pretrain-stage checkpoint.
pub fn random_init_checkpoint<T: Scalar>(
    encoder: &EncoderSpec,
    projection: &ProjectionHeadSpec,
    seed: u64,
) -> Result<ModelCheckpoint<T>> {
    let model = ContrastiveModel::<T>::new(encoder, projection, &mut derive_rng(seed, INIT_STREAM))?;
    let meta = CheckpointMeta {
        stage: Stage::Pretrain,
        epoch: 0,
        seed,
        pretraining: Pretraining::RandomInit,
        encoder: encoder.clone(),
        projection: Some(projection.clone()),
        head: None,
        metrics: BTreeMap::new(),
    };
    Ok(ModelCheckpoint::from_model(meta, &model))
}

/// Contrastive pretraining of encoder + projection head on cross-line slices.
///
/// Each epoch shuffles the slices, augments every slice of a batch into two views
/// (rows `2j`, `2j + 1`), labels rows by volume partition or source index and takes
/// one SGD step per batch on the supervised contrastive loss.
pub fn pretrain_contrastive<T: Scalar>(
    slices: &[CrossLineSlice<T>],
    stage: &StageConfig,
    optimizer: &OptimizerConfig,
    policy: &AugmentationPolicy,
    encoder: &EncoderSpec,
    projection: &ProjectionHeadSpec,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    stage.validate()?;
    if stage.stage != Stage::Pretrain {
        return Err(Error::Config("pretrain_contrastive needs a pretrain stage config".into()));
    }
    let policy = policy.with_mode(AugmentationMode::Contrastive);
    policy.validate()?;
    if slices.is_empty() {
        return Err(Error::Data("no training slices".into()));
    }

    let (slice_labels, pretraining) = match stage.pair_strategy {
        PairStrategy::VolumeLabels => {
            let n = stage.num_partitions.unwrap_or(0);
            let a = assign_volume_labels(slices.len(), n)?;
            (a.labels, Pretraining::VolumeLabels { num_partitions: n })
        }
        PairStrategy::Simclr => {
            if let Some(n) = stage.num_partitions {
                log::warn!("pair_strategy simclr ignores num_partitions = {n}");
            }
            ((0..slices.len()).collect(), Pretraining::Simclr)
        }
    };

    let mut model = ContrastiveModel::<T>::new(encoder, projection, &mut derive_rng(stage.seed, INIT_STREAM))?;
    let mut sgd = Sgd::<T>::new(optimizer)?;
    let pool = worker_pool()?;
    let channels = encoder.input_channels;
    let tau = T::lit(stage.temperature);
    let mut log = TrainLog::default();

    for epoch in 1..=stage.epochs {
        let start = Instant::now();
        let order = shuffled(slices.len(), stage.seed, epoch);
        let (mut loss_sum, mut used_batches, mut skipped_batches, mut skipped_anchors) = (0.0, 0usize, 0usize, 0usize);

        for (bi, batch) in batches(&order, stage.batch_size, stage.drop_last).into_iter().enumerate() {
            let views: Vec<Vec<Array2<T>>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&s| {
                        let stream = ((epoch as u64) << 32) | s as u64;
                        let mut rng = derive_rng(stage.seed, stream);
                        if stage.two_views {
                            let p = make_view_pair(&slices[s], &policy, &mut rng)?;
                            Ok(vec![p.view_a, p.view_b])
                        } else {
                            Ok(vec![policy.apply(slices[s].image(), &mut rng)?])
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut labels = Vec::new();
            for (j, (&s, v)) in batch.iter().zip(&views).enumerate() {
                let label = match stage.pair_strategy {
                    PairStrategy::VolumeLabels => slice_labels[s],
                    PairStrategy::Simclr => j,
                };
                labels.extend(std::iter::repeat_n(label, v.len()));
            }
            let images: Vec<Array2<T>> = views.into_iter().flatten().collect();
            if images.len() < 2 {
                skipped_batches += 1;
                continue;
            }

            let input = images_to_batch(&images, channels)?;
            let z = model.forward(&input)?;
            let emb = EmbeddingBatch::new(z, labels, tau)?;
            match supcon_value_and_gradient(&emb, stage.reduction) {
                Ok((res, dz)) => {
                    model.backward(&dz);
                    sgd.step(&mut model);
                    loss_sum += res.value.as_f64();
                    used_batches += 1;
                    skipped_anchors += res.num_anchors_skipped;
                }
                Err(Error::DegenerateBatch(msg)) => {
                    log::debug!("epoch {epoch} batch {bi} skipped: {msg}");
                    model.clear_cache();
                    skipped_batches += 1;
                    skipped_anchors += images.len();
                }
                Err(e) => return Err(e),
            }
        }

        if used_batches == 0 {
            return Err(Error::Training(format!(
                "epoch {epoch}: all {skipped_batches} batches had no positive pairs; \
                 increase batch_size, decrease num_partitions or enable two_views"
            )));
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / used_batches as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
            anchors_skipped: skipped_anchors,
            batches_skipped: skipped_batches,
        };
        log::info!(
            "pretrain epoch {}/{}: loss {:.5} ({:.2}s)",
            epoch,
            stage.epochs,
            record.mean_loss,
            record.wall_time_s
        );
        log.records.push(record);
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("final_loss".to_string(), log.records.last().map_or(f64::NAN, |r| r.mean_loss));
    let meta = CheckpointMeta {
        stage: Stage::Pretrain,
        epoch: stage.epochs,
        seed: stage.seed,
        pretraining,
        encoder: encoder.clone(),
        projection: Some(projection.clone()),
        head: None,
        metrics,
    };
    Ok((ModelCheckpoint::from_model(meta, &model), log))
}

/// Rebuild the encoder stored in a checkpoint.
pub fn encoder_from_checkpoint<T: Scalar>(ckpt: &ModelCheckpoint<T>) -> Result<Encoder<T>> {
    let mut encoder = Encoder::<T>::new(&ckpt.meta.encoder, &mut derive_rng(0, INIT_STREAM))?;
    load_parameters(&mut encoder, "encoder", &ckpt.tensors)?;
    Ok(encoder)
}

/// Rebuild encoder + segmentation head from a fine-tuned checkpoint.
pub fn segmentation_model_from_checkpoint<T: Scalar>(ckpt: &ModelCheckpoint<T>) -> Result<SegmentationModel<T>> {
    if ckpt.meta.stage != Stage::Finetune {
        return Err(Error::Config("evaluation needs a fine-tuned checkpoint".into()));
    }
    let spec = ckpt
        .meta
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("fine-tuned checkpoint has no head spec".into()))?;
    let mut model = SegmentationModel {
        encoder: encoder_from_checkpoint(ckpt)?,
        head: SegmentationHead::new(spec, &mut derive_rng(0, INIT_STREAM))?,
    };
    load_parameters(&mut model, "", &ckpt.tensors)?;
    Ok(model)
}

/// Train a segmentation head on a frozen pretrained encoder with pixel cross-entropy.
///
/// Encoder features are computed once (fine-tune preprocessing is deterministic)
/// and reused every epoch. The returned checkpoint holds `encoder.*` unchanged and
/// `head.*`; the projection head is dropped.
pub fn finetune_segmentation<T: Scalar>(
    slices: &[CrossLineSlice<T>],
    pretrained: &ModelCheckpoint<T>,
    stage: &StageConfig,
    optimizer: &OptimizerConfig,
    policy: &AugmentationPolicy,
    head_spec: &SegmentationHeadSpec,
) -> Result<(ModelCheckpoint<T>, TrainLog)> {
    stage.validate()?;
    if pretrained.meta.stage != Stage::Pretrain {
        return Err(Error::Config("fine-tuning needs a pretrain-stage checkpoint".into()));
    }
    if head_spec.in_channels != pretrained.meta.encoder.feature_dim {
        return Err(Error::Config(format!(
            "head expects {} channels, encoder produces {}",
            head_spec.in_channels, pretrained.meta.encoder.feature_dim
        )));
    }
    head_spec.validate()?;
    let policy = policy.with_mode(AugmentationMode::Finetune);
    policy.validate()?;
    if slices.is_empty() {
        return Err(Error::Data("no training slices".into()));
    }
    let masks: Vec<Array2<u32>> = slices
        .iter()
        .map(|s| {
            s.mask
                .clone()
                .ok_or_else(|| Error::Data(format!("slice {} has no mask", s.crossline_index)))
        })
        .collect::<Result<_>>()?;
    let (h, w) = slices[0].image.dim();
    if slices.iter().any(|s| s.image.dim() != (h, w)) {
        return Err(Error::Data("fine-tuning slices differ in shape".into()));
    }

    let encoder = encoder_from_checkpoint(pretrained)?;
    let frozen = freeze_encoder(&encoder);
    let channels = frozen.spec().input_channels;
    let stride = frozen.spec().output_stride;

    let pool = worker_pool()?;
    let mut features: Vec<Array3<T>> = Vec::with_capacity(slices.len());
    let mut padded_hw = (h, w);
    for chunk in slices.chunks(stage.batch_size) {
        let images = pool.install(|| {
            chunk
                .par_iter()
                .map(|s| policy.apply(s.image(), &mut derive_rng(stage.seed, s.crossline_index as u64)))
                .collect::<Result<Vec<_>>>()
        })?;
        let padded = pad_to_stride(&images_to_batch(&images, channels)?, stride);
        padded_hw = (padded.dim().2, padded.dim().3);
        let fmap = frozen.features(&padded)?;
        features.extend(fmap.axis_iter(Axis(0)).map(|f| f.to_owned()));
    }
    let stack = |idx: &[usize]| -> Array4<T> {
        let views: Vec<_> = idx.iter().map(|&i| features[i].view()).collect();
        ndarray::stack(Axis(0), &views).expect("features share a shape")
    };

    let mut head = SegmentationHead::<T>::new(head_spec, &mut derive_rng(stage.seed, INIT_STREAM - 1))?;
    let mut sgd = Sgd::<T>::new(optimizer)?;
    let mut log = TrainLog::default();

    for epoch in 1..=stage.epochs {
        let start = Instant::now();
        let order = shuffled(slices.len(), stage.seed, epoch);
        let (mut loss_sum, mut used) = (0.0, 0usize);
        for batch in batches(&order, stage.batch_size, stage.drop_last) {
            let fmap = stack(batch);
            let targets: Vec<Array2<u32>> = batch.iter().map(|&i| masks[i].clone()).collect();
            let logits = head.forward(&fmap, padded_hw)?;
            let (loss, grad) = pixel_cross_entropy_with_gradient(&crop_spatial(&logits, (h, w)), &targets)?;
            head.backward(&pad_spatial_backward(&grad, padded_hw));
            sgd.step(&mut head);
            loss_sum += loss.as_f64();
            used += 1;
        }
        if used == 0 {
            return Err(Error::Training(format!(
                "epoch {epoch}: no batch left after drop_last with {} slices",
                slices.len()
            )));
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / used as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
            anchors_skipped: 0,
            batches_skipped: 0,
        };
        log::info!(
            "finetune epoch {}/{}: loss {:.5} ({:.2}s)",
            epoch,
            stage.epochs,
            record.mean_loss,
            record.wall_time_s
        );
        log.records.push(record);
    }

    let num_classes = head_spec.num_classes;
    let mut cm = ConfusionMatrix::new(num_classes);
    let all: Vec<usize> = (0..slices.len()).collect();
    for chunk in all.chunks(stage.batch_size) {
        let logits = crop_spatial(&head.segment(&stack(chunk), padded_hw)?, (h, w));
        for (pred, &i) in argmax_classes(&logits).iter().zip(chunk) {
            cm.update(pred.view(), masks[i].view())?;
        }
    }

    let mut metrics = BTreeMap::new();
    metrics.insert("final_loss".to_string(), log.records.last().map_or(f64::NAN, |r| r.mean_loss));
    metrics.insert("train_miou".to_string(), cm.miou().unwrap_or(0.0));
    metrics.insert("train_pixel_accuracy".to_string(), cm.pixel_accuracy().unwrap_or(0.0));
    let meta = CheckpointMeta {
        stage: Stage::Finetune,
        epoch: stage.epochs,
        seed: stage.seed,
        pretraining: pretrained.meta.pretraining,
        encoder: pretrained.meta.encoder.clone(),
        projection: None,
        head: Some(head_spec.clone()),
        metrics,
    };
    let model = SegmentationModel { encoder, head };
    Ok((ModelCheckpoint::from_model(meta, &model), log))
}

/// Number of trainable scalars in a model (convenience for logs).
pub fn count_parameters<T: Scalar, M: Parameterized<T>>(model: &M) -> usize {
    model.num_parameters()
}
