//! Config-driven runs of the two training stages and the split evaluation.
//!
//! Artifacts written into a run directory:
//!
//! | file                   | producer        |
//! |------------------------|-----------------|
//! | `resolved_config.json` | every stage     |
//! | `pretrain.ckpt`        | `run_pretrain`  |
//! | `pretrain_log.jsonl`   | `run_pretrain`  |
//! | `finetune.ckpt`        | `run_finetune`  |
//! | `finetune_log.jsonl`   | `run_finetune`  |
//! | `split_reports.json`   | `run_evaluate`  |
//! | `summary.json`         | `run_evaluate`  |
//! | `summary.txt`          | `run_evaluate`  |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::eval::{evaluate_splits, render_table, EvaluationSummary, SplitReport, TestVolume};
use crate::models::{EncoderSpec, ModelCheckpoint, ProjectionHeadSpec, SegmentationHeadSpec, Stage};
use crate::optim::OptimizerConfig;
use crate::scalar::Scalar;
use crate::train::{
    finetune_segmentation, pretrain_contrastive, random_init_checkpoint, segmentation_model_from_checkpoint,
    StageConfig, TrainLog,
};
use crate::volume::{
    build_test_splits, compute_normalization_stats, extract_crosslines, load_amplitude, load_labels, load_splits,
    CrossLineSlice, LabelVolume, SeismicVolume, SplitSpec,
};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const SPLIT_REPORTS: &str = "split_reports.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_TXT: &str = "summary.txt";

/// Amplitude + label NPY pair, optionally restricted to a cross-line range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSource {
    pub amplitude: PathBuf,
    pub labels: PathBuf,
    #[serde(default)]
    pub crosslines: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: VolumeSource,
    /// Exactly two test volumes, concatenated in order for splitting.
    #[serde(default)]
    pub test: Vec<VolumeSource>,
    /// Explicit split file; sequential equal splits are built when absent.
    #[serde(default)]
    pub splits: Option<PathBuf>,
    #[serde(default = "default_num_splits")]
    pub num_splits: usize,
    /// Replace `augmentation.normalization` with the training-volume mean/std.
    #[serde(default = "default_true")]
    pub normalize_from_train: bool,
}

fn default_num_splits() -> usize {
    3
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "EncoderSpec::resnet18")]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub projection: Option<ProjectionHeadSpec>,
    #[serde(default)]
    pub head: Option<SegmentationHeadSpec>,
    /// Taken from the training labels when absent.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::resnet18(),
            projection: None,
            head: None,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "StageConfig::pretrain")]
    pub pretrain: StageConfig,
    #[serde(default = "StageConfig::finetune")]
    pub finetune: StageConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parse a JSON document; relative paths are resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        resolve(base_dir, &mut cfg.data.train.amplitude);
        resolve(base_dir, &mut cfg.data.train.labels);
        for t in &mut cfg.data.test {
            resolve(base_dir, &mut t.amplitude);
            resolve(base_dir, &mut t.labels);
        }
        if let Some(s) = &mut cfg.data.splits {
            resolve(base_dir, s);
        }
        resolve(base_dir, &mut cfg.output_dir);
        cfg.pretrain.stage = Stage::Pretrain;
        cfg.finetune.stage = Stage::Finetune;
        cfg.finetune.num_partitions = None;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        Self::from_json(&text, &base)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        if let Some(p) = &self.model.projection {
            p.validate()?;
        }
        if let Some(h) = &self.model.head {
            h.validate()?;
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        if self.data.num_splits == 0 {
            return Err(Error::Config("num_splits must be >= 1".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default expanded.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn projection_spec(&self) -> ProjectionHeadSpec {
        self.model
            .projection
            .clone()
            .unwrap_or_else(|| ProjectionHeadSpec::for_encoder(&self.model.encoder))
    }

    pub fn head_spec(&self, num_classes: usize) -> SegmentationHeadSpec {
        self.model
            .head
            .clone()
            .unwrap_or_else(|| SegmentationHeadSpec::for_encoder(&self.model.encoder, num_classes))
    }

    /// Fill every data-dependent default (normalization, class count, head and
    /// projection specs) so the persisted config reproduces the run on its own.
    pub fn resolve_with<T: Scalar>(&mut self, train: &TrainingData<T>) {
        if self.data.normalize_from_train {
            self.augmentation.normalization = train.normalization;
            self.data.normalize_from_train = false;
        }
        let c = *self.model.num_classes.get_or_insert(train.num_classes);
        self.model.projection = Some(self.projection_spec());
        self.model.head = Some(self.head_spec(c));
    }
}

fn load_pair<T: Scalar>(src: &VolumeSource) -> Result<(SeismicVolume<T>, LabelVolume)> {
    for p in [&src.amplitude, &src.labels] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let amp = load_amplitude::<T>(&src.amplitude)?;
    let lab = load_labels(&src.labels)?;
    if amp.dims() != lab.dims() {
        return Err(Error::Data(format!(
            "{}: amplitude {:?} and labels {:?} differ in shape",
            src.amplitude.display(),
            amp.dims(),
            lab.dims()
        )));
    }
    match src.crosslines {
        Some((a, b)) => Ok((amp.crossline_range(a..b)?, lab.crossline_range(a..b)?)),
        None => Ok((amp, lab)),
    }
}

/// Training slices with masks plus the volume statistics used for normalization.
#[derive(Debug, Clone)]
pub struct TrainingData<T> {
    pub slices: Vec<CrossLineSlice<T>>,
    pub normalization: (f64, f64),
    pub num_classes: usize,
}

pub fn load_training_data<T: Scalar>(cfg: &DataConfig) -> Result<TrainingData<T>> {
    let (amp, lab) = load_pair::<T>(&cfg.train)?;
    let normalization = compute_normalization_stats(&amp)?;
    Ok(TrainingData {
        slices: extract_crosslines(&amp, Some(&lab))?,
        normalization,
        num_classes: lab.num_classes(),
    })
}

pub fn load_test_data<T: Scalar>(cfg: &DataConfig) -> Result<(Vec<TestVolume<T>>, Vec<SplitSpec>)> {
    if cfg.test.len() != 2 {
        return Err(Error::Config(format!("expected two test volumes, got {}", cfg.test.len())));
    }
    let vols = cfg
        .test
        .iter()
        .map(|s| {
            load_pair::<T>(s).map(|(amplitude, labels)| TestVolume { amplitude, labels })
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = match &cfg.splits {
        Some(p) if !p.exists() => return Err(Error::MissingArtifact(p.clone())),
        Some(p) => load_splits(p)?,
        None => build_test_splits(
            vols[0].amplitude.num_crosslines(),
            vols[1].amplitude.num_crosslines(),
            cfg.num_splits,
        )?,
    };
    Ok((vols, splits))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value).expect("artifact serializes"))
}

fn prepare(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join(RESOLVED_CONFIG), &cfg.to_json())
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelCheckpoint<T>> {
    ModelCheckpoint::load(path)
}

/// Stage 1: contrastive pretraining, or a random-init checkpoint when `random_init`.
pub fn run_pretrain<T: Scalar>(cfg: &RunConfig, out_dir: &Path, random_init: bool) -> Result<TrainLog> {
    let data = load_training_data::<T>(&cfg.data)?;
    let mut cfg = cfg.clone();
    cfg.resolve_with(&data);
    prepare(&cfg, out_dir)?;
    let (ckpt, mut log) = if random_init {
        let ckpt = random_init_checkpoint::<T>(&cfg.model.encoder, &cfg.projection_spec(), cfg.pretrain.seed)?;
        (ckpt, TrainLog::default())
    } else {
        pretrain_contrastive(
            &data.slices,
            &cfg.pretrain,
            &cfg.optimizer,
            &cfg.augmentation,
            &cfg.model.encoder,
            &cfg.projection_spec(),
        )?
    };
    let path = out_dir.join(PRETRAIN_CKPT);
    ckpt.save(&path)?;
    log.checkpoint = Some(PRETRAIN_CKPT.to_string());
    log.write_jsonl(out_dir.join(PRETRAIN_LOG))?;
    Ok(log)
}

/// Stage 2: frozen-encoder head training from the checkpoint at `pretrained`.
pub fn run_finetune<T: Scalar>(cfg: &RunConfig, out_dir: &Path, pretrained: &Path) -> Result<TrainLog> {
    let ckpt = load_checkpoint::<T>(pretrained)?;
    let data = load_training_data::<T>(&cfg.data)?;
    let mut cfg = cfg.clone();
    cfg.resolve_with(&data);
    if ckpt.meta.encoder != cfg.model.encoder {
        log::warn!("checkpoint encoder spec differs from the config; using the checkpoint's");
        cfg.model.encoder = ckpt.meta.encoder.clone();
        cfg.model.projection = None;
        cfg.model.head = None;
        cfg.resolve_with(&data);
    }
    prepare(&cfg, out_dir)?;
    let head = cfg.head_spec(cfg.model.num_classes.unwrap_or(data.num_classes));
    let (out, mut log) =
        finetune_segmentation(&data.slices, &ckpt, &cfg.finetune, &cfg.optimizer, &cfg.augmentation, &head)?;
    out.save(out_dir.join(FINETUNE_CKPT))?;
    log.checkpoint = Some(FINETUNE_CKPT.to_string());
    log.write_jsonl(out_dir.join(FINETUNE_LOG))?;
    Ok(log)
}

/// Score a fine-tuned checkpoint on the test splits and write reports and summary.
pub fn run_evaluate<T: Scalar>(cfg: &RunConfig, out_dir: &Path, finetuned: &Path) -> Result<EvaluationSummary> {
    let ckpt = load_checkpoint::<T>(finetuned)?;
    let model = segmentation_model_from_checkpoint(&ckpt)?;
    let mut cfg = cfg.clone();
    if cfg.data.normalize_from_train {
        let data = load_training_data::<T>(&cfg.data)?;
        cfg.resolve_with(&data);
    }
    prepare(&cfg, out_dir)?;
    let (vols, splits) = load_test_data::<T>(&cfg.data)?;
    let (reports, average_miou) = evaluate_splits(&model, &vols, &splits, &cfg.augmentation)?;
    let pretraining = ckpt.meta.pretraining;
    let summary = EvaluationSummary {
        method: pretraining.label(),
        num_partitions: match pretraining {
            crate::models::Pretraining::VolumeLabels { num_partitions } => Some(num_partitions),
            _ => None,
        },
        splits: reports.clone(),
        average_miou,
    };
    write_json(&out_dir.join(SPLIT_REPORTS), &reports)?;
    write_json(&out_dir.join(SUMMARY_JSON), &summary)?;
    write(&out_dir.join(SUMMARY_TXT), &render_table(std::slice::from_ref(&summary)))?;
    Ok(summary)
}

/// Every `summary.json` in `dir` or its immediate subdirectories, in path order.
pub fn collect_summaries(dir: &Path) -> Result<Vec<(PathBuf, EvaluationSummary)>> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut candidates = vec![dir.join(SUMMARY_JSON)];
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    candidates.extend(subdirs.into_iter().map(|d| d.join(SUMMARY_JSON)));
    let mut out = Vec::new();
    for p in candidates.into_iter().filter(|p| p.is_file()) {
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let s: EvaluationSummary =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        out.push((p.parent().unwrap_or(dir).to_path_buf(), s));
    }
    if out.is_empty() {
        return Err(Error::MissingArtifact(dir.join(SUMMARY_JSON)));
    }
    Ok(out)
}

/// Split reports stored next to a summary.
pub fn read_split_reports(run_dir: &Path) -> Result<Vec<SplitReport>> {
    let p = run_dir.join(SPLIT_REPORTS);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"data": {"train": {"amplitude": "a.npy", "labels": "l.npy"}}}"#;

    #[test]
    fn defaults_are_expanded_and_paths_resolved() {
        let cfg = RunConfig::from_json(MINIMAL, Path::new("/data")).unwrap();
        assert_eq!(cfg.data.train.amplitude, PathBuf::from("/data/a.npy"));
        assert_eq!(cfg.output_dir, PathBuf::from("/data/runs"));
        assert_eq!(cfg.pretrain.batch_size, 64);
        assert_eq!(cfg.pretrain.epochs, 50);
        assert_eq!(cfg.optimizer.learning_rate, 0.001);
        let json = cfg.to_json();
        assert!(json.contains("\"temperature\": 0.07"));
        let again = RunConfig::from_json(&json, Path::new("/elsewhere")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"data": {"train": {"amplitude": "a", "labels": "l"}}, "bogus": 1}"#;
        assert!(matches!(RunConfig::from_json(text, Path::new(".")), Err(Error::Config(_))));
        let text = r#"{"data": {"train": {"amplitude": "a", "labels": "l"}}, "pretrain": {"epochz": 1}}"#;
        assert!(matches!(RunConfig::from_json(text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let text = r#"{"data": {"train": {"amplitude": "a", "labels": "l"}}, "optimizer": {"momentum": 1.0}}"#;
        assert!(matches!(RunConfig::from_json(text, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn missing_data_is_missing_artifact() {
        let cfg = RunConfig::from_json(MINIMAL, Path::new("/nonexistent")).unwrap();
        assert!(matches!(load_training_data::<f32>(&cfg.data), Err(Error::MissingArtifact(_))));
    }
}
