//! Confusion-matrix IoU scoring and the three-split average MIOU protocol.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationMode, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::models::{images_to_batch, SegmentationModel};
use crate::scalar::Scalar;
use crate::volume::{LabelVolume, SeismicVolume, SplitSpec};

/// `C x C` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn from_counts(counts: Array2<u64>) -> Result<Self> {
        if counts.nrows() != counts.ncols() {
            return Err(Error::Data(format!("confusion matrix must be square, got {:?}", counts.dim())));
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Add one prediction/target pair, `counts[target][prediction] += 1` per pixel.
    pub fn update(&mut self, predictions: ArrayView2<'_, u32>, targets: ArrayView2<'_, u32>) -> Result<()> {
        if predictions.dim() != targets.dim() {
            return Err(Error::Data(format!(
                "prediction shape {:?} differs from target shape {:?}",
                predictions.dim(),
                targets.dim()
            )));
        }
        let c = self.num_classes();
        if let Some(bad) = predictions.iter().chain(targets.iter()).find(|&&v| v as usize >= c) {
            return Err(Error::Data(format!("class {bad} outside [0, {c})")));
        }
        for (&p, &t) in predictions.iter().zip(targets.iter()) {
            self.counts[[t as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Elementwise sum with another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Data("cannot merge confusion matrices of different sizes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, `None` when the class is absent from both targets and predictions.
    pub fn class_iou(&self, class: usize) -> Option<f64> {
        let tp = self.counts[[class, class]];
        let row = self.counts.row(class).sum();
        let col = self.counts.column(class).sum();
        let denom = row + col - tp;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes()).map(|c| self.class_iou(c)).collect()
    }

    /// Mean over present classes, `None` when no class is present.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.counts.diag().sum() as f64 / total as f64)
    }
}

/// Functional form of [`ConfusionMatrix::update`].
pub fn update_confusion(
    mut cm: ConfusionMatrix,
    predictions: ArrayView2<'_, u32>,
    targets: ArrayView2<'_, u32>,
) -> Result<ConfusionMatrix> {
    cm.update(predictions, targets)?;
    Ok(cm)
}

pub fn class_iou(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    cm.class_iou(class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split_id: usize,
    /// `null` marks a class absent from both targets and predictions.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_count: u64,
}

impl SplitReport {
    pub fn from_confusion(split_id: usize, cm: &ConfusionMatrix) -> Result<Self> {
        let miou = cm
            .miou()
            .ok_or_else(|| Error::Config(format!("split {split_id} scored no pixels")))?;
        Ok(Self {
            split_id,
            per_class_iou: cm.per_class_iou(),
            miou,
            pixel_count: cm.total(),
        })
    }
}

/// Score pre-computed `(prediction, target)` pairs grouped by split.
pub fn score_splits(
    splits: &[Vec<(Array2<u32>, Array2<u32>)>],
    num_classes: usize,
) -> Result<(Vec<SplitReport>, f64)> {
    if splits.is_empty() {
        return Err(Error::Config("no splits to evaluate".into()));
    }
    let mut reports = Vec::with_capacity(splits.len());
    for (id, pairs) in splits.iter().enumerate() {
        if pairs.is_empty() {
            return Err(Error::Config(format!("split {id} is empty")));
        }
        let mut cm = ConfusionMatrix::new(num_classes);
        for (p, t) in pairs {
            cm.update(p.view(), t.view())?;
        }
        reports.push(SplitReport::from_confusion(id, &cm)?);
    }
    let avg = average_miou(&reports);
    Ok((reports, avg))
}

pub fn average_miou(reports: &[SplitReport]) -> f64 {
    reports.iter().map(|r| r.miou).sum::<f64>() / reports.len() as f64
}

/// One test volume: amplitudes plus ground-truth classes.
#[derive(Debug, Clone)]
pub struct TestVolume<T> {
    pub amplitude: SeismicVolume<T>,
    pub labels: LabelVolume,
}

/// Run the model over every cross-line of every split, accumulating one confusion
/// matrix per split; returns the split reports and their arithmetic mean MIOU.
pub fn evaluate_splits<T: Scalar>(
    model: &SegmentationModel<T>,
    volumes: &[TestVolume<T>],
    splits: &[SplitSpec],
    policy: &AugmentationPolicy,
) -> Result<(Vec<SplitReport>, f64)> {
    if splits.is_empty() {
        return Err(Error::Config("no splits to evaluate".into()));
    }
    let policy = policy.with_mode(AugmentationMode::Eval);
    policy.validate()?;
    let num_classes = model.head.spec().num_classes;
    let channels = model.encoder.spec().input_channels;
    for v in volumes {
        if v.labels.dims() != v.amplitude.dims() {
            return Err(Error::Data("test label volume shape differs from amplitudes".into()));
        }
    }
    let mut reports = Vec::with_capacity(splits.len());
    for split in splits {
        if split.crosslines.is_empty() {
            return Err(Error::Config(format!("split {} is empty", split.split_id)));
        }
        for &(vid, idx) in &split.crosslines {
            let v = volumes
                .get(vid)
                .ok_or_else(|| Error::Config(format!("split references unknown volume {vid}")))?;
            if idx >= v.amplitude.num_crosslines() {
                return Err(Error::Config(format!("split references cross-line {idx} of volume {vid}")));
            }
        }
        let partial: Vec<Result<ConfusionMatrix>> = split
            .crosslines
            .par_iter()
            .map(|&(vid, idx)| {
                let v = &volumes[vid];
                let image = v.amplitude.amplitudes().index_axis(Axis(1), idx);
                let target = v.labels.classes().index_axis(Axis(1), idx);
                let normalized = policy.apply(image, &mut crate::augment::derive_rng(0, 0))?;
                let batch = images_to_batch(&[normalized], channels)?;
                let pred = model.predict(&batch)?.remove(0);
                let mut cm = ConfusionMatrix::new(num_classes);
                cm.update(pred.view(), target)?;
                Ok(cm)
            })
            .collect();
        let mut cm = ConfusionMatrix::new(num_classes);
        for p in partial {
            cm.merge(&p?)?;
        }
        reports.push(SplitReport::from_confusion(split.split_id, &cm)?);
    }
    let avg = average_miou(&reports);
    Ok((reports, avg))
}

/// One row of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub method: String,
    pub num_partitions: Option<usize>,
    pub splits: Vec<SplitReport>,
    pub average_miou: f64,
}

/// Plain-text method / MIOU table.
pub fn render_table(rows: &[EvaluationSummary]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
    let mut out = format!("{:<width$} | {:>6} | MIOU\n", "Method", "N");
    out.push_str(&format!("{}-+--------+-------\n", "-".repeat(width)));
    for r in rows {
        let n = r.num_partitions.map_or("-".to_string(), |n| n.to_string());
        out.push_str(&format!("{:<width$} | {:>6} | {:.4}\n", r.method, n, r.average_miou));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions_touch_only_the_diagonal() {
        let t = array![[0u32, 1], [2, 2]];
        let cm = update_confusion(ConfusionMatrix::new(3), t.view(), t.view()).unwrap();
        assert_eq!(cm.counts(), &array![[1u64, 0, 0], [0, 1, 0], [0, 0, 2]]);
        assert!(cm.per_class_iou().iter().all(|v| *v == Some(1.0)));
        assert_eq!(cm.miou(), Some(1.0));
    }

    #[test]
    fn all_wrong_two_by_two() {
        let t = Array2::<u32>::zeros((2, 2));
        let p = Array2::<u32>::ones((2, 2));
        let cm = update_confusion(ConfusionMatrix::new(2), p.view(), t.view()).unwrap();
        assert_eq!(cm.counts()[[0, 1]], 4);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn hand_computed_iou() {
        let cm = ConfusionMatrix::from_counts(array![[2u64, 1], [1, 2]]).unwrap();
        assert_eq!(class_iou(&cm, 0), Some(0.5));
    }

    #[test]
    fn absent_class_is_excluded() {
        let t = array![[0u32, 0], [1, 1]];
        let cm = update_confusion(ConfusionMatrix::new(3), t.view(), t.view()).unwrap();
        assert_eq!(cm.class_iou(2), None);
        assert_eq!(cm.miou(), Some(1.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cm = ConfusionMatrix::new(2);
        let a = array![[0u32, 2]];
        assert!(matches!(cm.update(a.view(), a.view()), Err(Error::Data(_))));
        let b = array![[0u32], [1]];
        assert!(matches!(cm.update(b.view(), array![[0u32, 1]].view()), Err(Error::Data(_))));
        assert!(matches!(score_splits(&[vec![]], 2), Err(Error::Config(_))));
    }

    #[test]
    fn table_lists_rows() {
        let rows = vec![
            EvaluationSummary {
                method: "SimCLR".into(),
                num_partitions: None,
                splits: vec![],
                average_miou: 0.6781,
            },
            EvaluationSummary {
                method: "Volume Labels (N=150)".into(),
                num_partitions: Some(150),
                splits: vec![],
                average_miou: 0.6874,
            },
        ];
        let t = render_table(&rows);
        assert!(t.contains("SimCLR") && t.contains("0.6781"));
        assert!(t.contains("150") && t.contains("0.6874"));
        assert_eq!(t.lines().count(), 4);
    }
}
